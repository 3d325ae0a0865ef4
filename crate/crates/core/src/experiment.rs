//! The outer interaction loop: train from scratch, evaluate, query, label,
//! record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_blobs, gen_four_intervals, load_csv_dataset, split_initial_with, FourIntervals, InitSampling};
use crate::error::{Error, Result};
use crate::net::Architecture;
use crate::oracle::{LabelRequest, Oracle, QueryItem};
use crate::pool::Pool;
use crate::query::{select, Strategy};
use crate::train::{accuracy, train_from_scratch, HyperParams, TrainingMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        k: usize,
        per_class: usize,
        d: usize,
        spread: f64,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    FourIntervals {
        n: usize,
        #[serde(default)]
        spec: FourIntervals,
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn load(&self, run_seed: u64, base_dir: Option<&Path>) -> Result<Pool> {
        match self {
            DatasetSpec::Blobs {
                k,
                per_class,
                d,
                spread,
                seed,
            } => gen_blobs(*k, *per_class, *d, *spread, seed.unwrap_or(run_seed)),
            DatasetSpec::FourIntervals { n, spec, seed } => gen_four_intervals(spec, *n, seed.unwrap_or(run_seed)),
            DatasetSpec::Csv { path, num_classes } => {
                let resolved = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                load_csv_dataset(resolved, *num_classes)
            }
        }
    }
}

/// Widths of the hidden layers; input and output widths follow the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenLayers {
    pub feature: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for HiddenLayers {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            feature: a.feature,
            classifier_hidden: a.classifier_hidden,
            critic_hidden: a.critic_hidden,
        }
    }
}

impl HiddenLayers {
    pub fn architecture(&self, input: usize, classes: usize) -> Architecture {
        Architecture {
            input,
            feature: self.feature.clone(),
            classifier_hidden: self.classifier_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            classes,
        }
    }
}

fn default_n_init() -> usize {
    20
}
fn default_rounds() -> usize {
    5
}
fn default_budget() -> usize {
    10
}
fn default_val_frac() -> f64 {
    0.1
}
fn default_test_frac() -> f64 {
    0.2
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub mode: TrainingMode,
    #[serde(default)]
    pub hyperparams: HyperParams,
    #[serde(default)]
    pub architecture: HiddenLayers,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_path: Option<PathBuf>,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    #[serde(default)]
    pub init: InitSampling,
    /// Seconds an interactive oracle waits for a full batch; unbounded when
    /// absent.
    #[serde(default)]
    pub oracle_timeout_secs: Option<f64>,
    /// Wall-clock timings make logs run-dependent, so they are off by default.
    #[serde(default)]
    pub record_timings: bool,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "config".to_string() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 {
            return Err(Error::config("n_init", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.budget == 0 {
            return Err(Error::config("budget", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "needs at least one seed"));
        }
        for (name, f) in [("val_frac", self.val_frac), ("test_frac", self.test_frac)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(name, format!("{f} outside [0, 1)")));
            }
        }
        if self.val_frac == 0.0 {
            return Err(Error::config("val_frac", "validation split must be nonempty"));
        }
        if let Some(t) = self.oracle_timeout_secs {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("oracle_timeout_secs", "must be positive"));
            }
        }
        self.hyperparams.validate()?;
        if let DatasetSpec::FourIntervals { n, spec, .. } = &self.dataset {
            spec.validate().map_err(|e| Error::config("dataset.spec", e.to_string()))?;
            if *n < 4 {
                return Err(Error::config("dataset.n", "need at least 4 points"));
            }
        }
        for (name, widths) in [
            ("architecture.feature", &self.architecture.feature),
            ("architecture.classifier_hidden", &self.architecture.classifier_hidden),
            ("architecture.critic_hidden", &self.architecture.critic_hidden),
        ] {
            if widths.contains(&0) {
                return Err(Error::config(name, "layer widths must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-round metrics, one JSON line each in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub seed: u64,
    pub round: usize,
    pub labeled_count: usize,
    pub test_accuracy: f64,
    pub query_indices: Vec<usize>,
    pub uncertainty: Vec<f64>,
    pub diversity: Vec<f64>,
    pub train_seconds: Option<f64>,
    pub query_seconds: Option<f64>,
}

/// Progress notifications from a running experiment.
#[derive(Clone, Debug)]
pub enum Event<'a> {
    RoundStarted { round: usize },
    Epoch { round: usize, epoch: usize, epochs: usize },
    Record(&'a RoundRecord),
}

/// SplitMix64 finalizer over `(base, a, b)`; decorrelates per-round seeds.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One seeded replicate. State changes only after a round's labels arrive,
/// so a failed round can be retried with [`Experiment::run_round`].
#[derive(Clone, Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    seed: u64,
    pool: Pool,
    records: Vec<RoundRecord>,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig, seed: u64, base_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let pool = config.dataset.load(seed, base_dir)?;
        Self::with_pool(config, seed, pool)
    }

    /// Splits an already loaded dataset.
    pub fn with_pool(config: &ExperimentConfig, seed: u64, pool: Pool) -> Result<Self> {
        config.validate()?;
        let pool = split_initial_with(pool, config.n_init, config.val_frac, config.test_frac, &config.init, seed)?;
        Ok(Self {
            config: config.clone(),
            seed,
            pool,
            records: Vec::new(),
        })
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut Pool {
        &mut self.pool
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_finished(&self) -> bool {
        self.records.len() >= self.config.rounds || self.pool.unlabeled().is_empty()
    }

    pub fn architecture(&self) -> Architecture {
        self.config
            .architecture
            .architecture(self.pool.dim(), self.pool.num_classes())
    }

    /// Runs the next round; `None` once finished.
    pub fn run_round(&mut self, oracle: &mut dyn Oracle, observer: &mut dyn FnMut(Event)) -> Result<Option<RoundRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let round = self.records.len();
        let cfg = &self.config;
        observer(Event::RoundStarted { round });

        let mut hp = cfg.hyperparams.clone();
        hp.seed = derive_seed(self.seed, round as u64, 0);
        let arch = self.architecture();
        let labeled_count = self.pool.labeled().len();
        let budget = cfg.budget.min(self.pool.unlabeled().len());

        let t0 = Instant::now();
        let epochs = hp.epochs;
        let outcome = train_from_scratch(&self.pool, &arch, &hp, cfg.mode, budget, |s| {
            observer(Event::Epoch {
                round,
                epoch: s.epoch,
                epochs,
            })
        })?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let test_accuracy = accuracy(&outcome.params, &self.pool, self.pool.test())?;
        log::debug!(
            "seed {} round {round}: {} epochs (best {}), test accuracy {test_accuracy:.4}",
            self.seed,
            outcome.history.len(),
            outcome.best_epoch
        );

        let t1 = Instant::now();
        let query_seed = derive_seed(self.seed, round as u64, 1);
        let picks = select(cfg.strategy, &self.pool, &outcome.params, &hp, budget, query_seed)?;
        let query_seconds = t1.elapsed().as_secs_f64();

        let request = LabelRequest {
            round,
            items: picks
                .iter()
                .map(|s| QueryItem {
                    index: s.index,
                    features: self.pool.features().row(s.index).to_vec(),
                    uncertainty: s.uncertainty,
                    diversity: s.diversity,
                    combined: s.combined,
                })
                .collect(),
        };
        let labels = oracle.label(&request)?;
        if labels.len() != picks.len() {
            return Err(Error::Oracle(crate::oracle::OracleError::Contract(format!(
                "{} labels for {} queries",
                labels.len(),
                picks.len()
            ))));
        }
        let indices = request.indices();
        self.pool.add_labels(&indices, &labels)?;

        let timed = |v: f64| cfg.record_timings.then_some(v);
        let record = RoundRecord {
            seed: self.seed,
            round,
            labeled_count,
            test_accuracy,
            query_indices: indices,
            uncertainty: picks.iter().map(|s| s.uncertainty).collect(),
            diversity: picks.iter().map(|s| s.diversity).collect(),
            train_seconds: timed(train_seconds),
            query_seconds: timed(query_seconds),
        };
        self.records.push(record.clone());
        observer(Event::Record(&record));
        Ok(Some(record))
    }
}

/// Runs one seeded replicate to completion.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed: u64,
    oracle: &mut dyn Oracle,
    base_dir: Option<&Path>,
    observer: &mut dyn FnMut(Event),
) -> Result<Vec<RoundRecord>> {
    let mut exp = Experiment::new(config, seed, base_dir)?;
    while exp.run_round(oracle, observer)?.is_some() {}
    Ok(exp.records)
}
