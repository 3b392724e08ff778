//! Run configuration, read from TOML.
//!
//! Every section is optional; missing keys take the shipped defaults.
//! Stage seeds are derived from the top-level `seed`, so `seed` keys inside
//! `train` sections are ignored by the pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::NoiseMechanism;
use crate::error::{DgdError, Result};
use crate::generator::GeneratorConfig;
use crate::rng;
use crate::student::StudentConfig;
use crate::synth::{digit_templates, make_digitgrid_dataset, LabeledDataset, MixtureTask, Origin};
use crate::tensor::{Architecture, LrSchedule, OptimizerKind};
use crate::train::TrainConfig;
use crate::vae::VaeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mixture,
    DigitGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    /// Mixture only.
    pub dim: usize,
    /// Mixture only: cluster standard deviation.
    pub spread: f64,
    /// Digit grid only: pixel flip probability.
    pub noise: f64,
    /// Private examples per class.
    pub per_class: usize,
    /// Held-out evaluation examples per class.
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Mixture,
            classes: 10,
            dim: 16,
            spread: 0.3,
            noise: 0.1,
            per_class: 200,
            test_per_class: 100,
        }
    }
}

impl DatasetConfig {
    pub fn data_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Mixture => self.dim,
            DatasetKind::DigitGrid => 64,
        }
    }

    /// Class prototypes: digit templates, or mixture centers.
    pub fn templates(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        match self.kind {
            DatasetKind::Mixture => Ok(MixtureTask::new(self.classes, self.dim, self.spread, seed)?
                .centers()
                .to_vec()),
            DatasetKind::DigitGrid => Ok(digit_templates(self.classes)),
        }
    }

    /// Private training set and held-out test set, both deterministic in `seed`.
    pub fn generate(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let (private, test) = match self.kind {
            DatasetKind::Mixture => {
                let task = MixtureTask::new(self.classes, self.dim, self.spread, seed)?;
                (
                    task.sample(self.per_class, rng::derive_seed(seed, "private", 0))?,
                    task.sample(self.test_per_class, rng::derive_seed(seed, "test", 0))?,
                )
            }
            DatasetKind::DigitGrid => (
                make_digitgrid_dataset(self.classes, self.per_class, self.noise, rng::derive_seed(seed, "private", 0))?,
                make_digitgrid_dataset(self.classes, self.test_per_class, self.noise, rng::derive_seed(seed, "test", 0))?,
            ),
        };
        Ok((private.with_origin(Origin::Private), test.with_origin(Origin::HeldOut)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![64],
            train: TrainConfig {
                rounds: 3000,
                batch_size: 128,
                optimizer: OptimizerKind::Adam,
                lr: 0.05,
                lr_schedule: LrSchedule::Linear,
                seed: 0,
            },
        }
    }
}

impl ClassifierConfig {
    pub fn architecture(&self, dim: usize, classes: usize) -> Result<Architecture> {
        Architecture::classifier(dim, &self.hidden, classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Generated examples; 0 means as many as the private set.
    pub count: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { count: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub delta: f64,
    /// Budget charged for the reconstruction stream when latent noise is off.
    pub eps1: f64,
    pub lambda_max: u32,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            delta: 1e-5,
            eps1: 0.01,
            lambda_max: crate::accountant::DEFAULT_LAMBDA_MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2_weight: f64,
    /// Optional box the reconstruction is projected onto after each step.
    pub bounds: Option<[f64; 2]>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 200,
            lr: 0.1,
            l2_weight: 0.01,
            bounds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory; see [`RunConfig::resolve_output`].
    pub output_dir: Option<PathBuf>,
    pub teacher_count: usize,
    pub query_count: usize,
    pub dataset: DatasetConfig,
    pub baseline: ClassifierConfig,
    pub teacher: ClassifierConfig,
    pub generator: GeneratorConfig,
    pub synthesis: SynthesisConfig,
    pub vae: VaeConfig,
    pub aggregation: NoiseMechanism,
    pub student: StudentConfig,
    pub privacy: PrivacyConfig,
    pub attack: AttackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            teacher_count: 20,
            query_count: 100,
            dataset: DatasetConfig::default(),
            baseline: ClassifierConfig::default(),
            teacher: ClassifierConfig::default(),
            generator: GeneratorConfig::default(),
            synthesis: SynthesisConfig::default(),
            vae: VaeConfig::default(),
            aggregation: NoiseMechanism::Laplace { scale: 40.0 },
            student: StudentConfig::default(),
            privacy: PrivacyConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

/// Tag keys of the enum-valued sections; a table carrying one replaces the
/// default wholesale so variant fields never mix.
const TAG_KEYS: [&str; 2] = ["kind", "mechanism"];

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if !TAG_KEYS.iter().any(|t| o.contains_key(*t)) =>
            {
                merge_tables(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Default output root when neither `--out`, `output_dir` nor `DGD_OUT` is set.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

impl RunConfig {
    /// Parses a possibly partial file. Keys it leaves out keep the values of
    /// [`RunConfig::default`], including stage-specific training defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| DgdError::Config(e.to_string()))?;
        let mut merged: toml::Table = toml::from_str(&RunConfig::default().to_toml()?)
            .map_err(|e| DgdError::Config(e.to_string()))?;
        merge_tables(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| DgdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DgdError::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            DgdError::Config(m) => DgdError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DgdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(DgdError::Config("dataset needs >= 2 classes".into()));
        }
        if d.per_class == 0 || d.test_per_class == 0 {
            return Err(DgdError::Config("per_class and test_per_class must be >= 1".into()));
        }
        if d.kind == DatasetKind::DigitGrid && !(0.0..0.5).contains(&d.noise) {
            return Err(DgdError::Config(format!("digit noise must be in [0, 0.5), got {}", d.noise)));
        }
        let private = d.classes * d.per_class;
        if self.teacher_count == 0 || self.teacher_count > private {
            return Err(DgdError::Config(format!(
                "teacher_count must be in 1..={private}, got {}",
                self.teacher_count
            )));
        }
        if self.query_count > self.synthetic_count() {
            return Err(DgdError::Config(format!(
                "query_count {} exceeds the {} synthetic examples",
                self.query_count,
                self.synthetic_count()
            )));
        }
        self.baseline.train.validate()?;
        self.teacher.train.validate()?;
        self.generator.validate()?;
        self.vae.validate()?;
        self.aggregation.validate()?;
        self.effective_student().validate()?;
        let p = &self.privacy;
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(DgdError::Config(format!("delta must be in (0, 1), got {}", p.delta)));
        }
        if !(p.eps1 >= 0.0 && p.eps1.is_finite()) || p.lambda_max == 0 {
            return Err(DgdError::Config("eps1 must be >= 0 and lambda_max >= 1".into()));
        }
        Ok(())
    }

    pub fn synthetic_count(&self) -> usize {
        match self.synthesis.count {
            0 => self.dataset.classes * self.dataset.per_class,
            n => n,
        }
    }

    /// Student settings with `w_sup` forced to 0 when there are no queries.
    pub fn effective_student(&self) -> StudentConfig {
        let mut s = self.student.clone();
        if self.query_count == 0 {
            s.weights.w_sup = 0.0;
        }
        s
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, stage, 0)
    }

    /// `--out` wins, then `output_dir`, then `$DGD_OUT` (or `runs`) joined
    /// with `seed-<seed>`.
    pub fn resolve_output(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = std::env::var_os("DGD_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        root.join(format!("seed-{}", self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.aggregation, NoiseMechanism::Laplace { scale: 40.0 });
        assert_eq!(c.vae.latent_dim, 32);
        assert_eq!((c.generator.alpha, c.generator.beta), (5.0, 0.1));
        assert_eq!(c.teacher.train.batch_size, 128);
        assert_eq!(c.privacy.eps1, 0.01);
        assert_eq!(c.synthetic_count(), 2000);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            query_count: 27,
            output_dir: Some("x/y".into()),
            ..RunConfig::default()
        };
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = RunConfig::from_toml("query_count = 27\n[vae]\nlatent_dim = 8\n[aggregation]\nmechanism = \"laplace\"\nscale = 20.0\n").unwrap();
        assert_eq!(c.query_count, 27);
        assert_eq!(c.vae.latent_dim, 8);
        assert_eq!(c.vae.hidden, VaeConfig::default().hidden);
        assert_eq!(c.aggregation, NoiseMechanism::Laplace { scale: 20.0 });
    }

    #[test]
    fn partial_train_sections_keep_stage_defaults() {
        let c = RunConfig::from_toml("[generator.train]\nlr = 0.01\n[student.train.lr_schedule]\nkind = \"constant\"\n").unwrap();
        let g = GeneratorConfig::default().train;
        assert_eq!(c.generator.train.lr, 0.01);
        assert_eq!(c.generator.train.rounds, g.rounds);
        assert_eq!(c.generator.train.lr_schedule, g.lr_schedule);
        assert_eq!(c.student.train.lr_schedule, LrSchedule::Constant);
        assert_eq!(c.student.train.rounds, StudentConfig::default().train.rounds);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "teacher_count = 0",
            "query_count = 5000",
            "bogus = 1",
            "[dataset]\nclasses = 1",
            "[student.weights]\nw_sup = 0.0\nw_norm = 0.0\nw_tan = 0.0\nw_ent = 0.0",
            "[privacy]\ndelta = 1.5",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(DgdError::Config(_))), "{text}");
        }
    }

    #[test]
    fn zero_queries_disable_the_supervised_weight() {
        let c = RunConfig {
            query_count: 0,
            ..RunConfig::default()
        };
        assert_eq!(c.effective_student().weights.w_sup, 0.0);
    }

    #[test]
    fn output_resolution_order() {
        let c = RunConfig::default();
        assert_eq!(c.resolve_output(Some(Path::new("a"))), PathBuf::from("a"));
        let c = RunConfig {
            output_dir: Some("b".into()),
            ..c
        };
        assert_eq!(c.resolve_output(None), PathBuf::from("b"));
    }

    #[test]
    fn datasets_are_tagged_and_deterministic() {
        let d = DatasetConfig {
            per_class: 5,
            test_per_class: 3,
            ..DatasetConfig::default()
        };
        let (p, t) = d.generate(4).unwrap();
        assert_eq!((p.len(), t.len()), (50, 30));
        assert_eq!(p.origin(), Origin::Private);
        assert_eq!(t.origin(), Origin::HeldOut);
        assert_eq!(d.generate(4).unwrap().0, p);
    }
}
