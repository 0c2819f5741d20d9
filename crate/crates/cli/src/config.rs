use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bdense::data::{DatasetKind, DatasetSpec};
use bdense::distill::DistillConfig;
use bdense::train::TrainConfig;
use bdense::{NetSpec, NoiseSchedule, ScheduleSpec};
use serde::{Deserialize, Serialize};

pub const METRICS: [&str; 3] = ["swd", "mmd", "mode_coverage"];

/// Everything a command needs; every section has a default so a config file
/// only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_net")]
    pub net: NetSpec,
    #[serde(default = "default_teacher")]
    pub teacher: TrainConfig,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub search: SearchSpec,
    /// Seed for sampling, metrics and the weight search.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_nfe")]
    pub nfe: Vec<usize>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_projections")]
    pub projections: usize,
    /// Distance to a ring center that counts as covering it; defaults to
    /// three component standard deviations.
    #[serde(default)]
    pub coverage_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_a_range")]
    pub a_range: (f64, f64),
    #[serde(default = "default_b_range")]
    pub b_range: (f64, f64),
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_projections")]
    pub projections: usize,
}

fn default_dataset() -> DatasetSpec {
    DatasetSpec::gmm_ring(10_000, 0)
}
fn default_schedule() -> ScheduleSpec {
    ScheduleSpec::vp_default(1024)
}
fn default_net() -> NetSpec {
    NetSpec::new(2)
}
fn default_teacher() -> TrainConfig {
    TrainConfig::new(5000, 0)
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_nfe() -> Vec<usize> {
    vec![2, 4, 8]
}
fn default_metrics() -> Vec<String> {
    METRICS.iter().map(|m| m.to_string()).collect()
}
fn default_samples() -> usize {
    2000
}
fn default_projections() -> usize {
    64
}
fn default_trials() -> usize {
    20
}
fn default_a_range() -> (f64, f64) {
    (-2.0, 2.0)
}
fn default_b_range() -> (f64, f64) {
    (-7.0, -2.0)
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            nfe: default_nfe(),
            metrics: default_metrics(),
            samples: default_samples(),
            projections: default_projections(),
            coverage_radius: None,
        }
    }
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            a_range: default_a_range(),
            b_range: default_b_range(),
            samples: default_samples(),
            projections: default_projections(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        NoiseSchedule::build(self.schedule)?;
        self.net.validate()?;
        if self.net.branches != 1 {
            bail!("the teacher network must have a single branch; set `distill.branches` instead");
        }
        if self.dataset.kind != DatasetKind::CsvFile && self.net.channels != 2 {
            bail!("generated datasets are 2-D but net.channels = {}", self.net.channels);
        }
        self.teacher.validate()?;
        if let Some(d) = &self.distill {
            d.validate()?;
            if !d.method.is_pd() && self.schedule.is_vp() {
                bail!("{} runs on an edm_sigma schedule", d.method.name());
            }
        }
        self.eval.validate()?;
        self.search.validate()?;
        Ok(())
    }

    /// Ring centers of a `gmm_ring` dataset.
    pub fn centers(&self) -> Option<Vec<Vec<f64>>> {
        (self.dataset.kind == DatasetKind::GmmRing).then(|| {
            bdense::data::ring_centers(self.dataset.modes, self.dataset.radius)
                .into_iter()
                .map(|c| c.to_vec())
                .collect()
        })
    }

    pub fn coverage_radius(&self) -> f64 {
        self.eval.coverage_radius.unwrap_or(3.0 * self.dataset.std)
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        check_metrics(&self.metrics)?;
        if self.nfe.contains(&0) {
            bail!("eval.nfe entries must be >= 1");
        }
        if self.projections == 0 {
            bail!("eval.projections must be >= 1");
        }
        if let Some(r) = self.coverage_radius {
            if !(r > 0.0) {
                bail!("eval.coverage_radius must be > 0, got {r}");
            }
        }
        Ok(())
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            bail!("search.trials must be >= 1");
        }
        for (name, (lo, hi)) in [("a_range", self.a_range), ("b_range", self.b_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                bail!("search.{name} is empty: [{lo}, {hi}]");
            }
        }
        if self.samples < 2 || self.projections == 0 {
            bail!("search needs samples >= 2 and projections >= 1");
        }
        Ok(())
    }
}

pub fn check_metrics(names: &[String]) -> Result<()> {
    if names.is_empty() {
        bail!("no metrics requested; supported: {}", METRICS.join(", "));
    }
    for m in names {
        if !METRICS.contains(&m.as_str()) {
            bail!("unknown metric `{m}`; supported: {}", METRICS.join(", "));
        }
    }
    Ok(())
}
