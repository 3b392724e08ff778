//! Stage-by-stage pipeline over a run directory.
//!
//! Each stage reads its inputs from the run directory and writes its
//! outputs there, so any stage can be rerun on its own. With `resume`, a
//! stage whose outputs all exist is skipped unless an earlier stage reran.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::accountant::{self, BudgetReport, PrivacyLedger};
use crate::aggregation::{label_query_batch, read_noisy_labels, write_noisy_labels, AggregationConfig, NoiseMechanism};
use crate::discriminative::{evaluate_accuracy, train_classifier, train_teacher_ensemble, TeacherEnsemble};
use crate::error::{DgdError, Result};
use crate::generator::{prediction_profile, synthesize_dataset, train_generator};
use crate::io::{read_text, write_text};
use crate::student::{read_metrics, train_student, write_metrics};
use crate::synth::{partition_disjoint, read_dataset, split_query_pool, write_dataset, LabeledDataset, Origin};
use crate::tensor::{read_paramset, write_checkpoint, ParamSet};
use crate::vae::{build_triples, train_vae, TripleSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainBaseline,
    TrainTeachers,
    TrainGenerator,
    Synthesize,
    TrainVae,
    Query,
    BuildTriples,
    TrainStudent,
    Budget,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::TrainBaseline,
        Stage::TrainTeachers,
        Stage::TrainGenerator,
        Stage::Synthesize,
        Stage::TrainVae,
        Stage::Query,
        Stage::BuildTriples,
        Stage::TrainStudent,
        Stage::Budget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBaseline => "train-baseline",
            Stage::TrainTeachers => "train-teachers",
            Stage::TrainGenerator => "train-generator",
            Stage::Synthesize => "synthesize",
            Stage::TrainVae => "train-vae",
            Stage::Query => "query",
            Stage::BuildTriples => "build-triples",
            Stage::TrainStudent => "train-student",
            Stage::Budget => "budget",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = DgdError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| DgdError::Config(format!("unknown stage `{s}`")))
    }
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn teacher(&self, i: usize) -> PathBuf {
        self.root.join("teachers").join(format!("teacher_{i:03}.dgdw"))
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.toml")
    }

    pub fn summary(&self) -> PathBuf {
        self.file("summary.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.csv")
    }

    /// Every file a stage writes.
    pub fn outputs(&self, stage: Stage, cfg: &RunConfig) -> Vec<PathBuf> {
        let f = |n: &str| self.file(n);
        match stage {
            Stage::GenData => vec![f("private.dgds"), f("test.dgds")],
            Stage::TrainBaseline => vec![f("baseline.dgdw")],
            Stage::TrainTeachers => (0..cfg.teacher_count).map(|i| self.teacher(i)).collect(),
            Stage::TrainGenerator => vec![f("generator.dgdw")],
            Stage::Synthesize => vec![f("synthetic.dgds")],
            Stage::TrainVae => vec![f("vae_encoder.dgdw"), f("vae_decoder.dgdw")],
            Stage::Query => vec![f("queries.dgds"), f("unlabeled.dgds"), f("noisy_labels.csv")],
            Stage::BuildTriples => vec![
                f("triples_hat.dgds"),
                f("triples_tan.dgds"),
                f("triples_norm.dgds"),
                f("triples.json"),
            ],
            Stage::TrainStudent => vec![f("student.dgdw"), f("student_metrics.csv")],
            Stage::Budget => vec![f("budget.json")],
        }
    }
}

/// Contents of `budget.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetFile {
    pub mechanism: String,
    pub noise_parameter: f64,
    pub query_count: u64,
    /// `nominal` when latent noise is off, `latent_scale` when derived from it.
    pub eps1_source: String,
    /// Absent for mechanisms without an accountant.
    pub reports: Option<Vec<BudgetReport>>,
    pub best: Option<BudgetReport>,
}

/// One-row run summary, also written as `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub query_count: usize,
    pub noise_parameter: f64,
    pub majority_rate: f64,
    pub baseline_acc: f64,
    pub ensemble_acc: f64,
    pub student_acc: f64,
    pub generator_confidence: f64,
    pub generator_entropy: f64,
    pub eps_total: Option<f64>,
    pub budget_method: Option<String>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub stages_run: Vec<Stage>,
    pub summary: RunSummary,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
}

/// A configured run bound to its directory.
pub struct Run {
    pub cfg: RunConfig,
    pub paths: RunPaths,
}

impl Run {
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Run {
            cfg,
            paths: RunPaths::new(dir),
        })
    }

    fn complete(&self, stage: Stage) -> bool {
        self.paths.outputs(stage, &self.cfg).iter().all(|p| p.exists())
    }

    /// Runs one stage, wrapping failures with the stage name and its
    /// output paths.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        info!("stage {stage}: start");
        let result = match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainBaseline => self.train_baseline(),
            Stage::TrainTeachers => self.train_teachers(),
            Stage::TrainGenerator => self.train_generator(),
            Stage::Synthesize => self.synthesize(),
            Stage::TrainVae => self.train_vae(),
            Stage::Query => self.query(),
            Stage::BuildTriples => self.build_triples(),
            Stage::TrainStudent => self.train_student(),
            Stage::Budget => self.budget().map(|_| ()),
        };
        result.map_err(|e| DgdError::Stage {
            stage: stage.name().to_string(),
            artifacts: self.paths.outputs(stage, &self.cfg),
            source: Box::new(e),
        })?;
        info!("stage {stage}: done");
        Ok(())
    }

    pub fn write_config(&self) -> Result<()> {
        write_text(&self.paths.config(), &self.cfg.to_toml()?)
    }

    fn dataset(&self, name: &str, origin: Origin) -> Result<LabeledDataset> {
        Ok(read_dataset(self.paths.file(name))?.with_origin(origin))
    }

    fn net(&self, path: PathBuf, arch: &crate::tensor::Architecture) -> Result<ParamSet> {
        read_paramset(path, arch)
    }

    fn dims(&self) -> (usize, usize) {
        (self.cfg.dataset.data_dim(), self.cfg.dataset.classes)
    }

    pub fn private(&self) -> Result<LabeledDataset> {
        self.dataset("private.dgds", Origin::Private)
    }

    pub fn test(&self) -> Result<LabeledDataset> {
        self.dataset("test.dgds", Origin::HeldOut)
    }

    pub fn baseline(&self) -> Result<ParamSet> {
        let (d, k) = self.dims();
        self.net(self.paths.file("baseline.dgdw"), &self.cfg.baseline.architecture(d, k)?)
    }

    pub fn teachers(&self) -> Result<TeacherEnsemble> {
        let (d, k) = self.dims();
        let arch = self.cfg.teacher.architecture(d, k)?;
        let nets = (0..self.cfg.teacher_count)
            .map(|i| self.net(self.paths.teacher(i), &arch))
            .collect::<Result<Vec<_>>>()?;
        TeacherEnsemble::new(nets)
    }

    pub fn generator(&self) -> Result<ParamSet> {
        let arch = self.cfg.generator.architecture(self.dims().0)?;
        self.net(self.paths.file("generator.dgdw"), &arch)
    }

    pub fn vae(&self) -> Result<(ParamSet, ParamSet)> {
        let d = self.dims().0;
        Ok((
            self.net(self.paths.file("vae_encoder.dgdw"), &self.cfg.vae.encoder_architecture(d)?)?,
            self.net(self.paths.file("vae_decoder.dgdw"), &self.cfg.vae.decoder_architecture(d)?)?,
        ))
    }

    pub fn student(&self) -> Result<ParamSet> {
        let (d, k) = self.dims();
        let arch = crate::tensor::Architecture::classifier(d, &self.cfg.student.hidden, k)?;
        self.net(self.paths.file("student.dgdw"), &arch)
    }

    pub fn triples(&self) -> Result<TripleSet> {
        TripleSet::from_datasets(
            &self.dataset("triples_hat.dgds", Origin::Synthetic)?,
            &self.dataset("triples_tan.dgds", Origin::Synthetic)?,
            &self.dataset("triples_norm.dgds", Origin::Synthetic)?,
        )
    }

    fn gen_data(&self) -> Result<()> {
        let (private, test) = self.cfg.dataset.generate(self.cfg.stage_seed("dataset"))?;
        write_dataset(&private, self.paths.file("private.dgds"))?;
        write_dataset(&test, self.paths.file("test.dgds"))
    }

    fn train_baseline(&self) -> Result<()> {
        let private = self.private()?;
        let (d, k) = self.dims();
        let cfg = self.cfg.baseline.train.with_seed(self.cfg.stage_seed("baseline"));
        let trained = train_classifier(&private, &self.cfg.baseline.architecture(d, k)?, &cfg)?;
        write_checkpoint(self.paths.file("baseline.dgdw"), &trained.net)
    }

    fn train_teachers(&self) -> Result<()> {
        let private = self.private()?;
        let (d, k) = self.dims();
        let partition = partition_disjoint(&private, self.cfg.teacher_count, self.cfg.stage_seed("partition"))?;
        let cfg = self.cfg.teacher.train.with_seed(self.cfg.stage_seed("teachers"));
        let ensemble = train_teacher_ensemble(&private, &partition, &self.cfg.teacher.architecture(d, k)?, &cfg)?;
        for (i, t) in ensemble.teachers().iter().enumerate() {
            write_checkpoint(self.paths.teacher(i), t)?;
        }
        Ok(())
    }

    fn train_generator(&self) -> Result<()> {
        let baseline = self.baseline()?;
        let mut cfg = self.cfg.generator.clone();
        cfg.train.seed = self.cfg.stage_seed("generator");
        let trained = train_generator(&baseline, &cfg)?;
        write_checkpoint(self.paths.file("generator.dgdw"), &trained.net)
    }

    fn synthesize(&self) -> Result<()> {
        let g = self.generator()?;
        let ds = synthesize_dataset(&g, self.cfg.synthetic_count(), self.dims().1, self.cfg.stage_seed("synthesize"))?;
        write_dataset(&ds, self.paths.file("synthetic.dgds"))
    }

    fn train_vae(&self) -> Result<()> {
        let synthetic = self.dataset("synthetic.dgds", Origin::Synthetic)?;
        let mut cfg = self.cfg.vae.clone();
        cfg.train.seed = self.cfg.stage_seed("vae");
        let trained = train_vae(&synthetic, &cfg)?;
        write_checkpoint(self.paths.file("vae_encoder.dgdw"), &trained.encoder)?;
        write_checkpoint(self.paths.file("vae_decoder.dgdw"), &trained.decoder)
    }

    fn query(&self) -> Result<()> {
        let synthetic = self.dataset("synthetic.dgds", Origin::Synthetic)?;
        let (queries, unlabeled) = split_query_pool(&synthetic, self.cfg.query_count)?;
        let labels = if queries.is_empty() {
            Vec::new()
        } else {
            let ensemble = self.teachers()?;
            let agg = AggregationConfig {
                mechanism: self.cfg.aggregation,
                seed: self.cfg.stage_seed("aggregation"),
            };
            label_query_batch(&ensemble, &queries, &agg)?.labels
        };
        let ids: Vec<usize> = labels.iter().map(|l| l.label).collect();
        write_dataset(&queries.with_labels(ids)?, self.paths.file("queries.dgds"))?;
        write_dataset(&unlabeled, self.paths.file("unlabeled.dgds"))?;
        write_noisy_labels(self.paths.file("noisy_labels.csv"), &labels, &self.cfg.aggregation)
    }

    fn build_triples(&self) -> Result<()> {
        let (enc, dec) = self.vae()?;
        let unlabeled = self.dataset("unlabeled.dgds", Origin::Synthetic)?;
        if unlabeled.is_empty() {
            return Err(DgdError::Precondition(
                "every synthetic example was used as a query; no triples to build".into(),
            ));
        }
        let v = &self.cfg.vae;
        let t = build_triples(&enc, &dec, &unlabeled, v.radius, v.dp_scale, self.cfg.stage_seed("triples"))?;
        let [hat, tan, norm] = t.to_datasets(self.dims().1)?;
        write_dataset(&hat, self.paths.file("triples_hat.dgds"))?;
        write_dataset(&tan, self.paths.file("triples_tan.dgds"))?;
        write_dataset(&norm, self.paths.file("triples_norm.dgds"))?;
        let manifest = serde_json::json!({
            "count": t.len(),
            "dim": t.dim(),
            "radius": v.radius,
            "dp_scale": v.dp_scale,
            "members": {
                "hat": "triples_hat.dgds",
                "tan": "triples_tan.dgds",
                "norm": "triples_norm.dgds",
            },
        });
        write_text(&self.paths.file("triples.json"), &format!("{manifest:#}\n"))
    }

    fn train_student(&self) -> Result<()> {
        let queries = self.dataset("queries.dgds", Origin::Synthetic)?;
        let test = self.test()?;
        let mut cfg = self.cfg.effective_student();
        cfg.train.seed = self.cfg.stage_seed("student");
        let triples = if cfg.weights.w_norm > 0.0 || cfg.weights.w_tan > 0.0 || cfg.weights.w_ent > 0.0 {
            Some(self.triples()?)
        } else {
            None
        };
        let labeled = (cfg.weights.w_sup > 0.0).then_some(&queries);
        let trained = train_student(labeled, triples.as_ref(), &cfg, Some(&test))?;
        write_checkpoint(self.paths.file("student.dgdw"), &trained.net)?;
        write_metrics(&trained.metrics, self.paths.file("student_metrics.csv"))
    }

    /// Budget of the configured run; the query count is the number of noisy
    /// labels actually recorded when the query stage has run.
    pub fn budget(&self) -> Result<BudgetFile> {
        let recorded = self.paths.file("noisy_labels.csv");
        let q = if recorded.exists() {
            read_noisy_labels(&recorded)?.len() as u64
        } else {
            self.cfg.query_count as u64
        };
        let file = budget_file(&self.cfg, q)?;
        write_text(
            &self.paths.file("budget.json"),
            &(serde_json::to_string_pretty(&file).map_err(|e| DgdError::Data(e.to_string()))? + "\n"),
        )?;
        Ok(file)
    }

    /// Evaluates the finished run and writes `summary.json` and `metrics.csv`.
    pub fn summarize(&self) -> Result<RunSummary> {
        let test = self.test()?;
        let baseline = self.baseline()?;
        let ensemble = self.teachers()?;
        let student = self.student()?;
        let synthetic = self.dataset("synthetic.dgds", Origin::Synthetic)?;
        let (confidence, entropy) = prediction_profile(&baseline, synthetic.features())?;
        let budget: BudgetFile = serde_json::from_str(&read_text(&self.paths.file("budget.json"))?)
            .map_err(|e| DgdError::format(e.column() as u64, e.to_string()))?;
        let summary = RunSummary {
            seed: self.cfg.seed,
            query_count: self.cfg.query_count,
            noise_parameter: self.cfg.aggregation.parameter(),
            majority_rate: test.majority_rate().unwrap_or(0.0),
            baseline_acc: evaluate_accuracy(&baseline, &test)?,
            ensemble_acc: ensemble.consensus_accuracy(&test)?,
            student_acc: evaluate_accuracy(&student, &test)?,
            generator_confidence: confidence,
            generator_entropy: entropy,
            eps_total: budget.best.as_ref().map(|b| b.eps_total),
            budget_method: budget.best.as_ref().map(|b| b.method.to_string()),
        };
        write_text(
            &self.paths.summary(),
            &(serde_json::to_string_pretty(&summary).map_err(|e| DgdError::Data(e.to_string()))? + "\n"),
        )?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&summary).map_err(|e| DgdError::Data(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| DgdError::Data(e.to_string()))?;
        crate::io::write_atomic(&self.paths.metrics(), &bytes)?;
        Ok(summary)
    }

    /// Student metric rows of a finished run.
    pub fn student_metrics(&self) -> Result<Vec<crate::student::EpochMetrics>> {
        read_metrics(self.paths.file("student_metrics.csv"))
    }
}

/// Budget for `q` queries under `cfg`.
pub fn budget_file(cfg: &RunConfig, q: u64) -> Result<BudgetFile> {
    let (eps1, source) = if cfg.vae.dp_scale > 0.0 {
        (accountant::eps1_for_scale(cfg.vae.dp_scale, cfg.vae.latent_dim)?, "latent_scale")
    } else {
        (cfg.privacy.eps1, "nominal")
    };
    let (reports, best) = match cfg.aggregation {
        // noise-free answers carry no finite guarantee
        NoiseMechanism::Laplace { scale } if scale == 0.0 && q > 0 => (None, None),
        NoiseMechanism::Laplace { scale } => {
            let ledger = if q == 0 {
                PrivacyLedger::new(0.0, 0, cfg.privacy.delta, eps1, cfg.vae.latent_dim)?
            } else {
                PrivacyLedger::from_laplace_scale(scale, q, cfg.privacy.delta, eps1, cfg.vae.latent_dim)?
            };
            let reports = vec![
                accountant::compose_basic(&ledger)?,
                accountant::compose_advanced(&ledger)?,
                accountant::compose_moments_independent(&ledger, cfg.privacy.lambda_max)?,
            ];
            let best = reports
                .iter()
                .cloned()
                .reduce(|a, b| if b.eps_total < a.eps_total { b } else { a });
            (Some(reports), best)
        }
        NoiseMechanism::Gaussian { .. } => (None, None),
    };
    Ok(BudgetFile {
        mechanism: cfg.aggregation.name().to_string(),
        noise_parameter: cfg.aggregation.parameter(),
        query_count: q,
        eps1_source: source.to_string(),
        reports,
        best,
    })
}

/// Runs every stage in order, then writes the run summary.
pub fn run_pipeline(cfg: &RunConfig, dir: impl Into<PathBuf>, opts: RunOptions) -> Result<PipelineOutcome> {
    let run = Run::new(cfg.clone(), dir)?;
    std::fs::create_dir_all(run.paths.root()).map_err(|e| DgdError::io(run.paths.root(), e))?;
    run.write_config()?;
    let mut stages_run = Vec::new();
    let mut dirty = !opts.resume;
    for stage in Stage::ALL {
        if dirty || !run.complete(stage) {
            run.run_stage(stage)?;
            stages_run.push(stage);
            dirty = true;
        } else {
            info!("stage {stage}: outputs present, skipped");
        }
    }
    let summary = run.summarize().map_err(|e| DgdError::Stage {
        stage: "summary".into(),
        artifacts: vec![run.paths.summary(), run.paths.metrics()],
        source: Box::new(e),
    })?;
    Ok(PipelineOutcome {
        run_dir: run.paths.root().to_path_buf(),
        stages_run,
        summary,
    })
}
