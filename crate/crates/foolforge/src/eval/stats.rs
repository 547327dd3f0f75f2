//! Representation-statistics clustering analysis: per-image channel
//! statistics at victim taps, grouped by generator class, reduced to a
//! separation score.

use crate::tensor::Tensor;
use crate::victims::Classifier;

use super::EvalError;

/// Aggregate statistics of one group's stat vectors at one tap.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StatsSummary {
    pub group: String,
    pub tap: String,
    /// Elementwise mean over the group's per-image stat vectors.
    pub mean: Vec<f64>,
    /// Elementwise population variance; nonnegative by construction.
    pub variance: Vec<f64>,
    pub members: usize,
}

/// Per-image statistic vector at a tap: channel means followed by channel
/// variances of the activation volume.
pub fn image_stat_vector(
    victim: &Classifier,
    image: &Tensor,
    tap: &str,
) -> Result<Vec<f64>, EvalError> {
    let (c, h, w) = victim.spec.input;
    let batch = image.reshaped(&[1, c, h, w])?;
    let acts = victim.activations(&batch, tap)?;
    let s = acts.shape();
    let (tc, area) = (s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(2 * tc);
    for ch in 0..tc {
        let plane = &acts.data()[ch * area..(ch + 1) * area];
        let mean = plane.iter().sum::<f64>() / area as f64;
        out.push(mean);
    }
    for ch in 0..tc {
        let plane = &acts.data()[ch * area..(ch + 1) * area];
        let mean = out[ch];
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / area as f64;
        out.push(var);
    }
    Ok(out)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean inter-group distance over mean intra-group distance, both pooled
/// over ordered pairs (self-pairs included), so coinciding groups score
/// exactly 1. Internally collapsed but separated groups score infinity.
pub fn separation_score(groups: &[Vec<Vec<f64>>]) -> Result<f64, EvalError> {
    if groups.len() < 2 || groups.iter().any(Vec::is_empty) {
        return Err(EvalError::Config {
            msg: "separation needs at least two nonempty groups".into(),
        });
    }
    let width = groups[0][0].len();
    if groups
        .iter()
        .flatten()
        .any(|v| v.len() != width || width == 0)
    {
        return Err(EvalError::Config {
            msg: "stat vectors must share a nonzero width".into(),
        });
    }
    let mut intra_sum = 0.0;
    let mut intra_count = 0usize;
    for g in groups {
        for a in g {
            for b in g {
                intra_sum += euclidean(a, b);
                intra_count += 1;
            }
        }
    }
    let mut inter_sum = 0.0;
    let mut inter_count = 0usize;
    for (i, gi) in groups.iter().enumerate() {
        for (j, gj) in groups.iter().enumerate() {
            if i == j {
                continue;
            }
            for a in gi {
                for b in gj {
                    inter_sum += euclidean(a, b);
                    inter_count += 1;
                }
            }
        }
    }
    let intra = intra_sum / intra_count as f64;
    let inter = inter_sum / inter_count as f64;
    if intra == 0.0 {
        return Ok(if inter == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(inter / intra)
}

/// Groups of images reduced to summaries plus the separation score at one
/// tap. `groups` pairs a label with that generator class's images.
pub fn representation_stats(
    victim: &Classifier,
    groups: &[(String, Vec<Tensor>)],
    tap: &str,
) -> Result<(Vec<StatsSummary>, f64), EvalError> {
    let mut vector_groups = Vec::with_capacity(groups.len());
    let mut summaries = Vec::with_capacity(groups.len());
    for (label, images) in groups {
        if images.is_empty() {
            return Err(EvalError::Config {
                msg: format!("group {label} has no images"),
            });
        }
        let vectors: Vec<Vec<f64>> = images
            .iter()
            .map(|img| image_stat_vector(victim, img, tap))
            .collect::<Result<_, _>>()?;
        let width = vectors[0].len();
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; width];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let mut variance = vec![0.0; width];
        for v in &vectors {
            for ((var, x), m) in variance.iter_mut().zip(v).zip(&mean) {
                *var += (x - m) * (x - m) / n;
            }
        }
        summaries.push(StatsSummary {
            group: label.clone(),
            tap: tap.to_string(),
            mean,
            variance,
            members: vectors.len(),
        });
        vector_groups.push(vectors);
    }
    let score = separation_score(&vector_groups)?;
    Ok((summaries, score))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::fooling::test_support::tiny_victim;

    use super::*;

    #[test]
    fn coinciding_groups_score_exactly_one() {
        let g: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![5.0, 0.5]];
        let score = separation_score(&[g.clone(), g]).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn distant_tight_clusters_score_far_above_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = |rng: &mut ChaCha8Rng, center: f64| -> Vec<Vec<f64>> {
            (0..12)
                .map(|_| vec![center + Tensor::random_normal(&[1], rng, 0.0, 1.0).data()[0]])
                .collect()
        };
        let a = draw(&mut rng, 0.0);
        let b = draw(&mut rng, 10.0);
        let score = separation_score(&[a, b]).unwrap();
        assert!(score > 3.0, "got {score}");
    }

    #[test]
    fn collapsed_groups_have_the_degenerate_scores() {
        let a = vec![vec![1.0, 1.0]; 3];
        let same = separation_score(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same, 1.0);
        let b = vec![vec![4.0, 1.0]; 3];
        let apart = separation_score(&[a, b]).unwrap();
        assert!(apart.is_infinite() && apart > 0.0);
    }

    #[test]
    fn degenerate_group_lists_are_rejected() {
        assert!(separation_score(&[vec![vec![1.0]]]).is_err());
        assert!(separation_score(&[vec![vec![1.0]], vec![]]).is_err());
        assert!(separation_score(&[vec![vec![1.0]], vec![vec![1.0, 2.0]]]).is_err());
    }

    #[test]
    fn stat_vectors_carry_channel_means_then_variances() {
        let victim = tiny_victim(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let image = Tensor::random_uniform(&[3, 12, 12], &mut rng, 0.0, 1.0);
        let v = image_stat_vector(&victim, &image, "relu_a").unwrap();
        let acts = victim
            .activations(&image.reshaped(&[1, 3, 12, 12]).unwrap(), "relu_a")
            .unwrap();
        let c = acts.shape()[1];
        assert_eq!(v.len(), 2 * c);
        assert!(v[c..].iter().all(|&var| var >= 0.0));
        let area = (acts.shape()[2] * acts.shape()[3]) as f64;
        let mean0: f64 = acts.data()[..acts.shape()[2] * acts.shape()[3]]
            .iter()
            .sum::<f64>()
            / area;
        assert!((v[0] - mean0).abs() < 1e-12);
    }

    #[test]
    fn summaries_aggregate_member_vectors() {
        let victim = tiny_victim(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| Tensor::random_uniform(&[3, 12, 12], rng, 0.0, 1.0);
        let groups = vec![
            ("alpha".to_string(), vec![mk(&mut rng), mk(&mut rng)]),
            ("beta".to_string(), vec![mk(&mut rng), mk(&mut rng)]),
        ];
        let (summaries, score) = representation_stats(&victim, &groups, "relu_a").unwrap();
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].group, "alpha");
        assert_eq!(summaries[0].members, 2);
        assert!(score.is_finite() && score > 0.0);
        assert!(summaries
            .iter()
            .all(|s| s.variance.iter().all(|&v| v >= 0.0)));
        let v0 = image_stat_vector(&victim, &groups[0].1[0], "relu_a").unwrap();
        let v1 = image_stat_vector(&victim, &groups[0].1[1], "relu_a").unwrap();
        for ((m, a), b) in summaries[0].mean.iter().zip(&v0).zip(&v1) {
            assert!((m - (a + b) / 2.0).abs() < 1e-12);
        }
    }
}
