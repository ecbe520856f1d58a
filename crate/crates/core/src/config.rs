//! TOML run configuration. Every field has an explicit default so the resolved config can
//! be echoed verbatim into each summary.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::malliavin::{Fault, SkorokhodMode, SkorokhodOptions};
use crate::model::{BuiltinModel, SdeModel};
use crate::path::TimeGrid;
use crate::score::{Bandwidth, PipelineOptions, Regression};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub reverse: ReverseSection,
    #[serde(default)]
    pub validate: ValidateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `ou`, `bounded_nonlinear`, `tanh` or `linear2d`.
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Defaults to the origin.
    #[serde(default)]
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    #[default]
    Auto,
    General,
    StateIndependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_paths: usize,
    pub seed: u64,
    pub mode: ModeChoice,
    pub ridge: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 1,
            mode: ModeChoice::Auto,
            ridge: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    #[default]
    NadarayaWatson,
    Knn,
}

/// `"auto"` or a positive number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthChoice {
    Fixed(f64),
    Named(String),
}

impl Default for BandwidthChoice {
    fn default() -> Self {
        BandwidthChoice::Named("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    /// Evaluation times; empty means the horizon only.
    pub t_eval: Vec<f64>,
    /// Per-dimension grid of evaluation points; a single value is broadcast to every dimension.
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub y_count: Vec<usize>,
    pub bandwidth: BandwidthChoice,
    pub estimator: EstimatorChoice,
    pub knn_k: usize,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            t_eval: Vec::new(),
            y_min: vec![-2.0],
            y_max: vec![2.0],
            y_count: vec![9],
            bandwidth: BandwidthChoice::default(),
            estimator: EstimatorChoice::NadarayaWatson,
            knn_k: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub dump_paths: bool,
    pub dump_paths_limit: usize,
    pub dump_breakdown: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            dump_paths: false,
            dump_paths_limit: 10,
            dump_breakdown: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    Analytic,
    Zero,
    Tables,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReverseSection {
    pub n_samples: usize,
    pub score: ScoreSource,
    /// Directory of score-table CSVs, one per reverse node (`score = "tables"`).
    pub tables_dir: String,
}

impl Default for ReverseSection {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            score: ScoreSource::Analytic,
            tables_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FaultChoice {
    #[default]
    None,
    FlipB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    /// Builtin names (default parameters) checked in addition to the configured model;
    /// `"all"` adds every builtin.
    pub models: Vec<String>,
    pub duality_paths: usize,
    pub pathwise_paths: usize,
    pub probes: usize,
    pub bump_tolerance: f64,
    pub z_threshold: f64,
    pub inject_fault: FaultChoice,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            duality_paths: 10_000,
            pathwise_paths: 20,
            probes: 20,
            bump_tolerance: 5e-2,
            z_threshold: 3.0,
            inject_fault: FaultChoice::None,
        }
    }
}

pub const BUILTIN_NAMES: [&str; 4] = ["ou", "bounded_nonlinear", "tanh", "linear2d"];

impl RunConfig {
    /// Parses and checks a config; TOML errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fully resolved config with every default spelled out.
    pub fn echo(&self) -> String {
        let mut resolved = self.clone();
        resolved.model.x0 = self.x0();
        resolved.score.t_eval = self.t_eval();
        toml::to_string(&resolved).expect("config serialises")
    }

    pub fn build_model(&self) -> Result<BuiltinModel> {
        BuiltinModel::from_name(&self.model.name, &self.model.params).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.steps).map_err(|e| Error::Config(format!("[grid] {e}")))
    }

    pub fn x0(&self) -> Vec<f64> {
        if self.model.x0.is_empty() {
            let m = self.build_model().map(|m| m.state_dim()).unwrap_or(1);
            vec![0.0; m]
        } else {
            self.model.x0.clone()
        }
    }

    pub fn t_eval(&self) -> Vec<f64> {
        if self.score.t_eval.is_empty() {
            vec![self.grid.horizon]
        } else {
            self.score.t_eval.clone()
        }
    }

    /// Grid nodes of `t_eval`; a time off the grid is reported with the nearest node.
    pub fn eval_nodes(&self) -> Result<Vec<usize>> {
        let grid = self.grid()?;
        self.t_eval()
            .iter()
            .map(|&t| {
                let node = grid.node_of(t).map_err(|e| Error::Config(format!("[score] t_eval: {e}")))?;
                if node == 0 {
                    return Err(Error::Config(format!("[score] t_eval = {t}: the score at t = 0 is a point mass")));
                }
                Ok(node)
            })
            .collect()
    }

    pub fn skorokhod_mode(&self) -> SkorokhodMode {
        match self.run.mode {
            ModeChoice::Auto => SkorokhodMode::Auto,
            ModeChoice::General => SkorokhodMode::General,
            ModeChoice::StateIndependent => SkorokhodMode::StateIndependent,
        }
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            skorokhod: SkorokhodOptions {
                mode: self.skorokhod_mode(),
                fault: match self.validate.inject_fault {
                    FaultChoice::None => Fault::None,
                    FaultChoice::FlipB => Fault::FlipB,
                },
            },
            ridge: self.run.ridge,
        }
    }

    pub fn regression(&self) -> Result<Regression> {
        Ok(match self.score.estimator {
            EstimatorChoice::Knn => Regression::NearestNeighbours(self.score.knn_k),
            EstimatorChoice::NadarayaWatson => Regression::NadarayaWatson(match &self.score.bandwidth {
                BandwidthChoice::Named(s) if s == "auto" => Bandwidth::Auto,
                BandwidthChoice::Fixed(h) if *h > 0.0 && h.is_finite() => Bandwidth::Fixed(*h),
                other => {
                    return Err(Error::Config(format!(
                        "[score] bandwidth must be \"auto\" or a positive number, got {other:?}"
                    )))
                }
            }),
        })
    }

    /// Tensor grid of evaluation points, last coordinate varying fastest.
    pub fn y_points(&self) -> Result<Vec<Vec<f64>>> {
        let m = self.build_model()?.state_dim();
        let pick = |v: &[f64], name: &str| -> Result<Vec<f64>> {
            match v.len() {
                1 => Ok(vec![v[0]; m]),
                n if n == m => Ok(v.to_vec()),
                n => Err(Error::Config(format!("[score] {name} has {n} entries, model has {m} dimensions"))),
            }
        };
        let lo = pick(&self.score.y_min, "y_min")?;
        let hi = pick(&self.score.y_max, "y_max")?;
        let counts: Vec<usize> = match self.score.y_count.len() {
            1 => vec![self.score.y_count[0]; m],
            n if n == m => self.score.y_count.clone(),
            n => {
                return Err(Error::Config(format!(
                    "[score] y_count has {n} entries, model has {m} dimensions"
                )))
            }
        };
        let axes: Vec<Vec<f64>> = (0..m)
            .map(|j| {
                let c = counts[j];
                if c == 0 || !(hi[j] >= lo[j]) {
                    return Err(Error::Config(format!("[score] bad y range on axis {}", j + 1)));
                }
                Ok(if c == 1 {
                    vec![lo[j]]
                } else {
                    (0..c).map(|q| lo[j] + (hi[j] - lo[j]) * q as f64 / (c - 1) as f64).collect()
                })
            })
            .collect::<Result<_>>()?;
        let mut points = vec![Vec::new()];
        for axis in &axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        Ok(points)
    }

    pub fn output_dir(&self, overridden: Option<&std::path::Path>) -> PathBuf {
        overridden
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(&self.output.dir))
    }

    /// Models checked by `validate`.
    pub fn validation_models(&self) -> Result<Vec<BuiltinModel>> {
        let mut out = vec![self.build_model()?];
        for name in &self.validate.models {
            let names: Vec<&str> = if name == "all" {
                BUILTIN_NAMES.to_vec()
            } else {
                vec![name.as_str()]
            };
            for n in names {
                let model = BuiltinModel::from_name(n, &BTreeMap::new())
                    .map_err(|e| Error::Config(format!("[validate] models: {e}")))?;
                if !out.contains(&model) {
                    out.push(model);
                }
            }
        }
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let model = self.build_model()?;
        self.grid()?;
        let m = model.state_dim();
        if !self.model.x0.is_empty() && self.model.x0.len() != m {
            return Err(Error::Config(format!(
                "[model] x0 has {} entries, {} has dimension {m}",
                self.model.x0.len(),
                model.id()
            )));
        }
        if self.model.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("[model] x0 must be finite".into()));
        }
        if self.run.mode == ModeChoice::StateIndependent && !model.state_independent_diffusion() {
            return Err(Error::Config(format!(
                "[run] mode = \"state_independent\" refused: {} has a state-dependent diffusion",
                model.id()
            )));
        }
        if self.run.n_paths == 0 {
            return Err(Error::Config("[run] n_paths must be positive".into()));
        }
        self.eval_nodes()?;
        self.regression()?;
        self.y_points()?;
        if self.validate.pathwise_paths == 0 || self.validate.probes == 0 {
            return Err(Error::Config("[validate] path and probe counts must be positive".into()));
        }
        self.validation_models()?;
        if self.reverse.score == ScoreSource::Tables && self.reverse.tables_dir.is_empty() {
            return Err(Error::Config("[reverse] score = \"tables\" needs tables_dir".into()));
        }
        Ok(())
    }
}
