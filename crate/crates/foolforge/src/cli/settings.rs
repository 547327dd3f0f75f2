//! Resolved run configuration. Every knob has a built-in default chosen by
//! the profile; a TOML config file overrides defaults, `FOOLFORGE_*`
//! environment variables override the file, and command-line flags override
//! everything. Flags are applied by the subcommands after [`resolve_config`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fooling::{FoolingConfig, FoolingMethod};
use crate::ftn::FtnConfig;
use crate::tensor::OptimizerConfig;
use crate::victims::TrainConfig;

use super::CliError;

/// Environment-variable prefix for config overrides, e.g.
/// `FOOLFORGE_FOOLING_STEPS=64` sets `fooling.steps`.
pub const ENV_PREFIX: &str = "FOOLFORGE_";

/// Names the built-in default set: `smoke` finishes a full pipeline in
/// minutes on one core, `full` runs the budgets used for the headline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Smoke,
    Full,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Smoke => "smoke",
            Profile::Full => "full",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "full" => Ok(Profile::Full),
            other => Err(CliError::Config {
                msg: format!("unknown profile {other:?}; expected smoke or full"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub per_class_train: usize,
    pub per_class_val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoolingSection {
    /// Method names, or the single entry "all".
    pub methods: Vec<String>,
    /// Images generated per method.
    pub count: usize,
    /// Optimizer steps for the gradient methods.
    pub steps: usize,
    /// Generations for the evolutionary method.
    pub ea_generations: usize,
    pub population: usize,
    /// Early-stop confidence; 0 disables the full-budget cutoff.
    pub stop_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtnSection {
    pub enc_channels: (usize, usize),
    pub enc_residual_blocks: usize,
    pub mlp_hidden: usize,
    pub taps: Vec<String>,
    pub n_samples: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Validation images mapped per attack set.
    pub attack_count: usize,
    pub fgsm_steps: usize,
    pub with_oracle: bool,
}

/// Every knob a run can turn, grouped by stage. One instance drives a whole
/// pipeline; single-stage subcommands read only their section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub target: usize,
    pub dataset: DatasetSection,
    pub victims: VictimSection,
    pub fooling: FoolingSection,
    pub ftn: FtnSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn smoke() -> Self {
        Self {
            seed: 7,
            target: crate::victims::TARGET_CLASS,
            dataset: DatasetSection {
                per_class_train: 6,
                per_class_val: 3,
            },
            victims: VictimSection {
                epochs: 25,
                batch_size: 10,
                learning_rate: 5e-3,
            },
            fooling: FoolingSection {
                methods: vec!["all".into()],
                count: 3,
                steps: 160,
                ea_generations: 40,
                population: 16,
                stop_confidence: 0.999,
            },
            ftn: FtnSection {
                enc_channels: (8, 16),
                enc_residual_blocks: 1,
                mlp_hidden: 32,
                taps: FtnConfig::default().taps,
                n_samples: 3,
                gamma: 0.5,
                lambda: 1e-4,
                epochs: 2,
                learning_rate: 1e-3,
            },
            eval: EvalSection {
                attack_count: 10,
                fgsm_steps: 10,
                with_oracle: true,
            },
        }
    }

    pub fn full() -> Self {
        let d = FtnConfig::default();
        Self {
            seed: 7,
            target: crate::victims::TARGET_CLASS,
            dataset: DatasetSection {
                per_class_train: 40,
                per_class_val: 10,
            },
            victims: VictimSection {
                epochs: 40,
                batch_size: 20,
                learning_rate: 5e-3,
            },
            fooling: FoolingSection {
                methods: vec!["all".into()],
                count: 8,
                steps: 512,
                ea_generations: 512,
                population: 32,
                stop_confidence: 0.999,
            },
            ftn: FtnSection {
                enc_channels: d.enc_channels,
                enc_residual_blocks: d.enc_residual_blocks,
                mlp_hidden: d.mlp_hidden,
                taps: d.taps,
                n_samples: 8,
                gamma: d.gamma,
                lambda: d.lambda,
                epochs: 8,
                learning_rate: 1e-3,
            },
            eval: EvalSection {
                attack_count: 50,
                fgsm_steps: 20,
                with_oracle: true,
            },
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Smoke => Self::smoke(),
            Profile::Full => Self::full(),
        }
    }

    /// The fooling methods this run covers, in config order.
    pub fn fooling_methods(&self) -> Result<Vec<FoolingMethod>, CliError> {
        parse_methods(&self.fooling.methods.join(","))
    }

    /// Generator budget for one image. The evolutionary method reads its
    /// step count from `ea_generations`; everything else from `steps`.
    pub fn fooling_config(&self, method: FoolingMethod, seed: u64) -> FoolingConfig {
        let mut cfg = FoolingConfig::for_method(method, self.target, seed);
        cfg.steps = match method {
            FoolingMethod::CppnEa => self.fooling.ea_generations,
            _ => self.fooling.steps,
        };
        cfg.population = self.fooling.population;
        cfg.elites = (self.fooling.population / 4).max(1);
        cfg.stop_confidence = if self.fooling.stop_confidence > 0.0 {
            Some(self.fooling.stop_confidence)
        } else {
            None
        };
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.victims.epochs,
            batch_size: self.victims.batch_size,
            optimizer: OptimizerConfig::adam(self.victims.learning_rate),
            seed: self.seed,
        }
    }

    pub fn ftn_config(&self) -> FtnConfig {
        FtnConfig {
            enc_channels: self.ftn.enc_channels,
            enc_residual_blocks: self.ftn.enc_residual_blocks,
            adain_blocks: 3,
            mlp_hidden: self.ftn.mlp_hidden,
            taps: self.ftn.taps.clone(),
            n_samples: self.ftn.n_samples,
            gamma: self.ftn.gamma,
            lambda: self.ftn.lambda,
            epochs: self.ftn.epochs,
            learning_rate: self.ftn.learning_rate,
            seed: self.seed,
        }
    }

    /// Resolved config as a TOML table, as written into run manifests.
    pub fn to_table(&self) -> Result<toml::Table, CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Config {
            msg: format!("serialize config: {e}"),
        })?;
        text.parse::<toml::Table>().map_err(|e| CliError::Config {
            msg: format!("round-trip config: {e}"),
        })
    }
}

/// Parses "all" or a comma-separated method list, rejecting duplicates.
pub fn parse_methods(spec: &str) -> Result<Vec<FoolingMethod>, CliError> {
    if spec.trim() == "all" {
        return Ok(FoolingMethod::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let m: FoolingMethod = part.parse().map_err(|e| CliError::Config {
            msg: format!("{e}"),
        })?;
        if out.contains(&m) {
            return Err(CliError::Config {
                msg: format!("method {m} listed twice"),
            });
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err(CliError::Config {
            msg: "empty method list".into(),
        });
    }
    Ok(out)
}

/// Builds the effective config: profile defaults, then the config file,
/// then `FOOLFORGE_*` entries from `env`. Callers pass `std::env::vars()`;
/// tests pass a synthetic snapshot.
pub fn resolve_config(
    profile: Profile,
    file: Option<&Path>,
    env: &[(String, String)],
) -> Result<PipelineConfig, CliError> {
    let mut table = PipelineConfig::for_profile(profile).to_table()?;

    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let overlay: toml::Table = text.parse().map_err(|e| CliError::Config {
            msg: format!("{}: {e}", path.display()),
        })?;
        merge_table(&mut table, &overlay);
    }

    for (key, value) in env {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        // Meta variables consumed elsewhere: the profile picks the default
        // set before this overlay, and the oracle address belongs to the
        // client, not the run config.
        if rest == "PROFILE" || rest == "ORACLE_ADDR" {
            continue;
        }
        let Some((section, field)) = split_env_key(rest) else {
            continue;
        };
        let parsed = parse_env_value(value);
        match section {
            None => {
                table.insert(field, parsed);
            }
            Some(name) => {
                let slot = table
                    .entry(name)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                if let toml::Value::Table(t) = slot {
                    t.insert(field, parsed);
                }
            }
        }
    }

    let cfg: PipelineConfig =
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config {
                msg: format!("invalid config: {e}"),
            })?;
    cfg.validate()?;
    Ok(cfg)
}

impl PipelineConfig {
    fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Config { msg });
        if self.dataset.per_class_train == 0 || self.dataset.per_class_val == 0 {
            return fail("dataset sizes must be positive".into());
        }
        if self.fooling.count == 0 {
            return fail("fooling.count must be positive".into());
        }
        if self.ftn.n_samples > self.fooling.count {
            return fail(format!(
                "ftn.n_samples {} exceeds fooling.count {}",
                self.ftn.n_samples, self.fooling.count
            ));
        }
        if self.eval.attack_count == 0 {
            return fail("eval.attack_count must be positive".into());
        }
        self.fooling_methods().map(|_| ())
    }
}

/// Recursively overlays `over` onto `base`; tables merge, scalars replace.
fn merge_table(base: &mut toml::Table, over: &toml::Table) {
    for (key, value) in over {
        let nested = matches!(
            (base.get(key), value),
            (Some(toml::Value::Table(_)), toml::Value::Table(_))
        );
        if nested {
            if let (Some(toml::Value::Table(bt)), toml::Value::Table(ot)) =
                (base.get_mut(key), value)
            {
                merge_table(bt, ot);
            }
        } else {
            base.insert(key.clone(), value.clone());
        }
    }
}

/// Maps `DATASET_PER_CLASS_TRAIN` to `(Some("dataset"), "per_class_train")`
/// and `SEED` to `(None, "seed")`. Unknown shapes still map; the final
/// deserialization rejects unknown keys by name.
fn split_env_key(rest: &str) -> Option<(Option<String>, String)> {
    if rest.is_empty() {
        return None;
    }
    let lower = rest.to_ascii_lowercase();
    for section in ["dataset", "victims", "fooling", "ftn", "eval"] {
        if let Some(field) = lower.strip_prefix(&format!("{section}_")) {
            if field.is_empty() {
                return None;
            }
            return Some((Some(section.to_string()), field.to_string()));
        }
    }
    Some((None, lower))
}

/// Guesses the TOML type: integer, then float, then bool; comma-separated
/// values become string arrays; anything else stays a string.
fn parse_env_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if raw.contains(',') {
        return toml::Value::Array(
            raw.split(',')
                .map(|s| toml::Value::String(s.trim().to_string()))
                .collect(),
        );
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn precedence_is_flag_over_env_over_file_over_default() {
        let default = PipelineConfig::smoke().fooling.steps;

        // Default alone.
        let cfg = resolve_config(Profile::Smoke, None, &[]).unwrap();
        assert_eq!(cfg.fooling.steps, default);

        // File overrides the default.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "[fooling]\nsteps = 111").unwrap();
        drop(f);
        let cfg = resolve_config(Profile::Smoke, Some(&path), &[]).unwrap();
        assert_eq!(cfg.fooling.steps, 111);

        // Environment overrides the file.
        let vars = env(&[("FOOLFORGE_FOOLING_STEPS", "222")]);
        let mut cfg = resolve_config(Profile::Smoke, Some(&path), &vars).unwrap();
        assert_eq!(cfg.fooling.steps, 222);

        // A flag, applied last by the subcommand, overrides the environment.
        let flag: Option<usize> = Some(333);
        if let Some(v) = flag {
            cfg.fooling.steps = v;
        }
        assert_eq!(cfg.fooling.steps, 333);
    }

    #[test]
    fn file_merges_per_key_without_clobbering_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 99\n[ftn]\ngamma = 2.5\n").unwrap();
        let cfg = resolve_config(Profile::Smoke, Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.ftn.gamma, 2.5);
        // Untouched keys keep profile defaults.
        let base = PipelineConfig::smoke();
        assert_eq!(cfg.ftn.epochs, base.ftn.epochs);
        assert_eq!(cfg.dataset, base.dataset);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[fooling]\nstepz = 12\n").unwrap();
        let err = resolve_config(Profile::Smoke, Some(&path), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "{msg}");
    }

    #[test]
    fn env_values_parse_into_matching_toml_types() {
        let vars = env(&[
            ("FOOLFORGE_SEED", "41"),
            ("FOOLFORGE_FTN_GAMMA", "0.75"),
            ("FOOLFORGE_EVAL_WITH_ORACLE", "false"),
            ("FOOLFORGE_FOOLING_METHODS", "naive,dr"),
            ("UNRELATED", "ignored"),
        ]);
        let cfg = resolve_config(Profile::Smoke, None, &vars).unwrap();
        assert_eq!(cfg.seed, 41);
        assert_eq!(cfg.ftn.gamma, 0.75);
        assert!(!cfg.eval.with_oracle);
        assert_eq!(
            cfg.fooling_methods().unwrap(),
            vec![FoolingMethod::Naive, FoolingMethod::Dr]
        );
    }

    #[test]
    fn profiles_differ_where_it_counts() {
        let smoke = PipelineConfig::smoke();
        let full = PipelineConfig::full();
        assert!(full.fooling.steps > smoke.fooling.steps);
        assert!(full.dataset.per_class_train > smoke.dataset.per_class_train);
        assert!(full.ftn.epochs > smoke.ftn.epochs);
        assert_eq!("smoke".parse::<Profile>().unwrap(), Profile::Smoke);
        assert!("quick".parse::<Profile>().is_err());
    }

    #[test]
    fn method_lists_reject_typos_and_duplicates() {
        assert_eq!(parse_methods("all").unwrap().len(), 6);
        assert_eq!(
            parse_methods("cppn_grad, naive").unwrap(),
            vec![FoolingMethod::CppnGrad, FoolingMethod::Naive]
        );
        assert!(parse_methods("navie").is_err());
        assert!(parse_methods("naive,naive").is_err());
        assert!(parse_methods("").is_err());
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[ftn]\nn_samples = 50\n").unwrap();
        let err = resolve_config(Profile::Smoke, Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("n_samples"), "{err}");
    }

    #[test]
    fn fooling_budgets_follow_the_method() {
        let cfg = PipelineConfig::smoke();
        let grad = cfg.fooling_config(FoolingMethod::Naive, 3);
        let ea = cfg.fooling_config(FoolingMethod::CppnEa, 3);
        assert_eq!(grad.steps, cfg.fooling.steps);
        assert_eq!(ea.steps, cfg.fooling.ea_generations);
        assert_eq!(ea.population, cfg.fooling.population);
        assert_eq!(grad.seed, 3);
        assert_eq!(grad.stop_confidence, Some(0.999));
    }
}
