//! Run configuration: one file (TOML or JSON, auto-detected) is the single
//! source of truth for a run, and a handful of command-line flags override
//! individual fields. Every command is deterministic given the resolved
//! config, seed included.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigmaquant_core::{Error, Result, SearchBudget, TargetMetric, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

fn config_schema_default() -> u32 {
    CONFIG_SCHEMA_VERSION
}

/// Where the float model comes from: an existing manifest on disk, or a
/// fresh multilayer perceptron built from `mlp_dims` and the run seed.
/// Exactly one of the two must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dims: Option<Vec<usize>>,
}

impl ModelSource {
    pub fn validate(&self) -> Result<()> {
        match (&self.manifest, &self.mlp_dims) {
            (Some(_), Some(_)) => Err(Error::Config(
                "model.manifest and model.mlp_dims are mutually exclusive".into(),
            )),
            (None, None) => Err(Error::Config(
                "set either model.manifest or model.mlp_dims".into(),
            )),
            (None, Some(dims)) if dims.len() < 2 => Err(Error::Config(
                "model.mlp_dims needs at least an input and an output width".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Parameters of the built-in Gaussian-blob dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train: usize,
    pub eval: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { train: 4000, eval: 1000, features: 16, classes: 10, separation: 6.0 }
    }
}

fn default_calib_samples() -> usize {
    256
}

/// Where the train/eval/calibration splits come from: IDX file pairs or the
/// synthetic generator. The calibration split is the first
/// `calib_samples` training samples (IDX) or a separately seeded draw
/// (synthetic).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_calib_samples")]
    pub calib_samples: usize,
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource {
            train_images: None,
            train_labels: None,
            eval_images: None,
            eval_labels: None,
            synthetic: None,
            calib_samples: default_calib_samples(),
        }
    }
}

impl DatasetSource {
    pub fn validate(&self) -> Result<()> {
        let idx_fields = [
            ("dataset.train_images", self.train_images.is_some()),
            ("dataset.train_labels", self.train_labels.is_some()),
            ("dataset.eval_images", self.eval_images.is_some()),
            ("dataset.eval_labels", self.eval_labels.is_some()),
        ];
        let idx_set = idx_fields.iter().filter(|(_, set)| *set).count();
        if self.synthetic.is_some() {
            if idx_set > 0 {
                return Err(Error::Config(
                    "dataset.synthetic and IDX paths are mutually exclusive".into(),
                ));
            }
            return Ok(());
        }
        if idx_set == 0 {
            return Err(Error::Config(
                "set dataset.synthetic or the four IDX paths (dataset.train_images, \
                 dataset.train_labels, dataset.eval_images, dataset.eval_labels)"
                    .into(),
            ));
        }
        if let Some((name, _)) = idx_fields.iter().find(|(_, set)| !*set) {
            return Err(Error::Config(format!("missing dataset field: {name}")));
        }
        if self.calib_samples == 0 {
            return Err(Error::Config("dataset.calib_samples must be positive".into()));
        }
        Ok(())
    }
}

fn default_accuracy_drop() -> f64 {
    1.0
}

/// Planner targets, with convenience forms: the accuracy target defaults to
/// the float baseline minus `accuracy_drop_pct`, and the metric budget can
/// be given as a ratio of the 8-bit reference instead of an absolute value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSpec {
    pub metric: TargetMetric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_pct: Option<f64>,
    pub accuracy_drop_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_budget_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_ratio_of_int8: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bops_budget: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bops_ratio_of_int8: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_m: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_max: Option<usize>,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec {
            metric: TargetMetric::Size,
            accuracy_pct: None,
            accuracy_drop_pct: default_accuracy_drop(),
            size_budget_bytes: None,
            size_ratio_of_int8: None,
            bops_budget: None,
            bops_ratio_of_int8: None,
            delta_a: None,
            delta_m: None,
            i_max: None,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size_budget_bytes.is_some() && self.size_ratio_of_int8.is_some() {
            return Err(Error::Config(
                "targets.size_budget_bytes and targets.size_ratio_of_int8 are mutually \
                 exclusive"
                    .into(),
            ));
        }
        if self.bops_budget.is_some() && self.bops_ratio_of_int8.is_some() {
            return Err(Error::Config(
                "targets.bops_budget and targets.bops_ratio_of_int8 are mutually exclusive"
                    .into(),
            ));
        }
        for (name, ratio) in [
            ("targets.size_ratio_of_int8", self.size_ratio_of_int8),
            ("targets.bops_ratio_of_int8", self.bops_ratio_of_int8),
        ] {
            if let Some(r) = ratio {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::Config(format!("{name} must be a positive ratio, got {r}")));
                }
            }
        }
        if !(self.accuracy_drop_pct.is_finite()) {
            return Err(Error::Config("targets.accuracy_drop_pct must be finite".into()));
        }
        Ok(())
    }
}

/// One reproducible run: model and data sources, planner targets and
/// budget, training hyperparameters, and artifact locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "config_schema_default")]
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelSource,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub targets: TargetSpec,
    #[serde(default)]
    pub budget: SearchBudget,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hw_cost_table: Option<PathBuf>,
}

/// Command-line flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub target_acc: Option<f64>,
    pub target_size: Option<u64>,
    pub target_bops: Option<u64>,
    pub delta_a: Option<f64>,
    pub delta_m: Option<u64>,
    pub i_max: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Loads a config file, picking the format from the extension
    /// (`.json` is JSON, anything else tries TOML first), validates it,
    /// and applies flag overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let is_json = path.extension().is_some_and(|x| x == "json");
        let mut cfg: RunConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?
        } else {
            match toml::from_str(&text) {
                Ok(cfg) => cfg,
                Err(toml_err) => serde_json::from_str(&text).map_err(|_| {
                    Error::Config(format!(
                        "{} parses as neither TOML nor JSON: {toml_err}",
                        path.display()
                    ))
                })?,
            }
        };
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(acc) = o.target_acc {
            self.targets.accuracy_pct = Some(acc);
        }
        if let Some(size) = o.target_size {
            self.targets.metric = TargetMetric::Size;
            self.targets.size_budget_bytes = Some(size);
            self.targets.size_ratio_of_int8 = None;
        }
        if let Some(bops) = o.target_bops {
            self.targets.metric = TargetMetric::Bops;
            self.targets.bops_budget = Some(bops);
            self.targets.bops_ratio_of_int8 = None;
        }
        if let Some(da) = o.delta_a {
            self.targets.delta_a = Some(da);
        }
        if let Some(dm) = o.delta_m {
            self.targets.delta_m = Some(dm);
        }
        if let Some(imax) = o.i_max {
            self.targets.i_max = Some(imax);
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = Some(out.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.targets.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        // Every input path the config references must exist up front, so a
        // long run cannot fail halfway through on a typo.
        let referenced = [
            ("model.manifest", &self.model.manifest),
            ("dataset.train_images", &self.dataset.train_images),
            ("dataset.train_labels", &self.dataset.train_labels),
            ("dataset.eval_images", &self.dataset.eval_images),
            ("dataset.eval_labels", &self.dataset.eval_labels),
            ("hw_cost_table", &self.hw_cost_table),
        ];
        for (name, path) in referenced {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{name} references {}, which does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir().join("model.json")
    }

    pub fn tuned_model_path(&self) -> PathBuf {
        self.out_dir().join("model_tuned.json")
    }

    pub fn quantized_model_path(&self) -> PathBuf {
        self.out_dir().join("quantized.json")
    }

    pub fn plan_path(&self) -> PathBuf {
        self.out_dir().join("plan.json")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.out_dir().join("trace.csv")
    }

    pub fn stats_path(&self) -> PathBuf {
        self.out_dir().join("stats.csv")
    }

    pub fn cluster_path(&self) -> PathBuf {
        self.out_dir().join("cluster.csv")
    }

    pub fn hw_report_json_path(&self) -> PathBuf {
        self.out_dir().join("hw_report.json")
    }

    pub fn hw_report_csv_path(&self) -> PathBuf {
        self.out_dir().join("hw_report.csv")
    }
}
