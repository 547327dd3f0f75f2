//! Attack measurement: transfer rates across victim zoos, distortion
//! metrics, the FGSM comparison baseline, and representation clustering.

use std::io::Write;

use crate::tensor::{Tensor, TensorError};
use crate::victims::{Classifier, VictimError};

mod fgsm;
mod metrics;
mod stats;

pub use fgsm::{baseline_fgsm_targeted, fgsm_at_rmsd, FgsmCalibration};
pub use metrics::{rmsd, rtd, PIXEL_SCALE};
pub use stats::{image_stat_vector, representation_stats, separation_score, StatsSummary};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error("eval config: {msg}")]
    Config { msg: String },
    #[error("oracle: {msg}")]
    Oracle { msg: String },
}

/// Remote prediction service as the evaluator sees it: an opaque top-1
/// answer per image and a name for report rows.
pub trait BlackBox {
    fn name(&self) -> &str;
    /// Top-1 label for one `[c, h, w]` image in [0, 1].
    fn top1(&self, image: &Tensor) -> Result<usize, EvalError>;
}

/// Fraction of the batch each victim classifies as `target`, one entry per
/// victim in input order. Inference fans out across threads.
pub fn transfer_success_rate(
    adv: &Tensor,
    victims: &[&Classifier],
    target: usize,
) -> Result<Vec<f64>, EvalError> {
    if adv.rank() != 4 || adv.shape()[0] == 0 {
        return Err(EvalError::Config {
            msg: format!("expected a nonempty [n, c, h, w] batch, got {:?}", adv.shape()),
        });
    }
    let results: Vec<Result<f64, VictimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = victims
            .iter()
            .map(|&victim| {
                scope.spawn(move || {
                    let labels = victim.predict_labels(adv)?;
                    let hits = labels.iter().filter(|&&l| l == target).count();
                    Ok(hits as f64 / labels.len() as f64)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("inference does not panic"))
            .collect()
    });
    results
        .into_iter()
        .map(|r| r.map_err(EvalError::from))
        .collect()
}

/// One report line: a method/victim pairing with its measurements.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackRow {
    pub method: String,
    pub victim: String,
    pub n: usize,
    pub target: usize,
    pub transfer_rate: f64,
    /// Distortion on the 0..255 pixel scale.
    pub rmsd: f64,
    /// Not applicable at zero distortion.
    pub rtd: Option<f64>,
    pub seed: u64,
}

/// Evaluation rows, one per victim plus one for the black-box service
/// when queried.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    pub const CSV_HEADER: &'static str = "method,victim,n,target,transfer_rate,rmsd,rtd,seed";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            let rtd = r.rtd.map_or_else(|| "na".to_string(), |v| v.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.method, r.victim, r.n, r.target, r.transfer_rate, r.rmsd, rtd, r.seed
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn parse_csv(text: &str) -> Result<Self, EvalError> {
        let bad = |line: usize, msg: String| EvalError::Config {
            msg: format!("report csv line {}: {msg}", line + 1),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::CSV_HEADER => {}
            other => {
                return Err(bad(
                    0,
                    format!("expected header {:?}, got {:?}", Self::CSV_HEADER, other.map(|(_, h)| h)),
                ))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(bad(i, format!("expected 8 fields, got {}", fields.len())));
            }
            let num = |s: &str| -> Result<f64, EvalError> {
                s.parse().map_err(|e| bad(i, format!("bad number {s:?}: {e}")))
            };
            rows.push(AttackRow {
                method: fields[0].to_string(),
                victim: fields[1].to_string(),
                n: fields[2].parse().map_err(|e| bad(i, format!("bad n: {e}")))?,
                target: fields[3]
                    .parse()
                    .map_err(|e| bad(i, format!("bad target: {e}")))?,
                transfer_rate: num(fields[4])?,
                rmsd: num(fields[5])?,
                rtd: if fields[6] == "na" {
                    None
                } else {
                    Some(num(fields[6])?)
                },
                seed: fields[7]
                    .parse()
                    .map_err(|e| bad(i, format!("bad seed: {e}")))?,
            });
        }
        Ok(Self { rows })
    }
}

/// One attack's artifacts: what ran against the victims and where it
/// started from. `sources` equal to `adversarial` marks source-free runs.
#[derive(Debug, Clone)]
pub struct AttackScenario<'a> {
    pub method: &'a str,
    pub adversarial: &'a Tensor,
    pub sources: &'a Tensor,
    pub target: usize,
    pub seed: u64,
}

fn image_at(batch: &Tensor, index: usize) -> Result<Tensor, TensorError> {
    let s = batch.shape();
    let stride: usize = s[1..].iter().product();
    Tensor::new(
        &s[1..],
        batch.data()[index * stride..(index + 1) * stride].to_vec(),
    )
}

/// Measures one attack against every victim, and the black-box service
/// when given, producing one row per model in declaration order. Pure:
/// identical artifacts yield identical reports.
pub fn evaluate_attack(
    scenario: &AttackScenario,
    victims: &[&Classifier],
    oracle: Option<&dyn BlackBox>,
) -> Result<AttackReport, EvalError> {
    let adv = scenario.adversarial;
    if adv.shape() != scenario.sources.shape() {
        return Err(EvalError::Config {
            msg: format!(
                "adversarial {:?} and source {:?} shapes differ",
                adv.shape(),
                scenario.sources.shape()
            ),
        });
    }
    if adv.rank() != 4 || adv.shape()[0] == 0 {
        return Err(EvalError::Config {
            msg: format!("expected a nonempty [n, c, h, w] batch, got {:?}", adv.shape()),
        });
    }
    let n = adv.shape()[0];
    let distortion = rmsd(adv, scenario.sources)? * PIXEL_SCALE;
    let rates = transfer_success_rate(adv, victims, scenario.target)?;
    let mut report = AttackReport::default();
    let mut push = |victim: String, rate: f64| {
        report.rows.push(AttackRow {
            method: scenario.method.to_string(),
            victim,
            n,
            target: scenario.target,
            transfer_rate: rate,
            rmsd: distortion,
            rtd: rtd(rate, distortion),
            seed: scenario.seed,
        });
    };
    for (victim, rate) in victims.iter().zip(rates) {
        push(victim.spec.name.clone(), rate);
    }
    if let Some(service) = oracle {
        let mut hits = 0usize;
        for i in 0..n {
            let image = image_at(adv, i)?;
            if service.top1(&image)? == scenario.target {
                hits += 1;
            }
        }
        push(service.name().to_string(), hits as f64 / n as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::fooling::test_support::tiny_victim;

    use super::*;

    fn identical_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let one = Tensor::random_uniform(&[1, 3, 12, 12], &mut rng, 0.0, 1.0);
        let mut data = Vec::with_capacity(n * one.numel());
        for _ in 0..n {
            data.extend_from_slice(one.data());
        }
        Tensor::new(&[n, 3, 12, 12], data).unwrap()
    }

    struct Always(usize);
    impl BlackBox for Always {
        fn name(&self) -> &str {
            "stub-oracle"
        }
        fn top1(&self, _image: &Tensor) -> Result<usize, EvalError> {
            Ok(self.0)
        }
    }

    #[test]
    fn rates_hit_the_trivial_extremes() {
        let victim = tiny_victim(3);
        let batch = identical_batch(3, 0);
        let predicted = victim.predict_labels(&batch).unwrap()[0];
        let other = (predicted + 1) % 5;
        let rates =
            transfer_success_rate(&batch, &[&victim, &victim], predicted).unwrap();
        assert_eq!(rates, vec![1.0, 1.0]);
        let rates = transfer_success_rate(&batch, &[&victim], other).unwrap();
        assert_eq!(rates, vec![0.0]);
    }

    #[test]
    fn unperturbed_inputs_report_zero_distortion_and_na_ratio() {
        let victim = tiny_victim(3);
        let batch = identical_batch(2, 1);
        let predicted = victim.predict_labels(&batch).unwrap()[0];
        let scenario = AttackScenario {
            method: "naive",
            adversarial: &batch,
            sources: &batch,
            target: (predicted + 1) % 5,
            seed: 9,
        };
        let report = evaluate_attack(&scenario, &[&victim], None).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.transfer_rate, 0.0);
        assert_eq!(row.rmsd, 0.0);
        assert_eq!(row.rtd, None);
        let csv = report.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(AttackReport::CSV_HEADER));
        assert!(lines.next().unwrap().contains(",na,"));
    }

    #[test]
    fn oracle_rows_come_from_the_service_answers() {
        let victim = tiny_victim(3);
        let batch = identical_batch(2, 2);
        let target = 4;
        let scenario = AttackScenario {
            method: "dr",
            adversarial: &batch,
            sources: &batch,
            target,
            seed: 0,
        };
        let service = Always(target);
        let report = evaluate_attack(&scenario, &[&victim], Some(&service)).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[1].victim, "stub-oracle");
        assert_eq!(report.rows[1].transfer_rate, 1.0);
    }

    #[test]
    fn stored_ratios_recompute_from_their_own_row() {
        let victim = tiny_victim(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let adv = Tensor::random_uniform(&[3, 3, 12, 12], &mut rng, 0.0, 1.0);
        let src = Tensor::random_uniform(&[3, 3, 12, 12], &mut rng, 0.0, 1.0);
        let scenario = AttackScenario {
            method: "tr",
            adversarial: &adv,
            sources: &src,
            target: 2,
            seed: 3,
        };
        let report = evaluate_attack(&scenario, &[&victim], None).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.rtd, rtd(row.transfer_rate, row.rmsd));
        let again = evaluate_attack(&scenario, &[&victim], None).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn csv_round_trips_and_rejects_foreign_headers() {
        let report = AttackReport {
            rows: vec![
                AttackRow {
                    method: "cppn_grad".into(),
                    victim: "conv-a".into(),
                    n: 16,
                    target: 1,
                    transfer_rate: 0.75,
                    rmsd: 12.5,
                    rtd: rtd(0.75, 12.5),
                    seed: 7,
                },
                AttackRow {
                    method: "naive".into(),
                    victim: "oracle".into(),
                    n: 16,
                    target: 1,
                    transfer_rate: 0.0625,
                    rmsd: 0.0,
                    rtd: None,
                    seed: 7,
                },
            ],
        };
        let text = report.to_csv_string();
        let parsed = AttackReport::parse_csv(&text).unwrap();
        assert_eq!(parsed, report);
        assert!(AttackReport::parse_csv("method,victim\n").is_err());
        assert!(AttackReport::parse_csv("").is_err());
    }
}
