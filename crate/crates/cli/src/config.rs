//! Run configuration: flat TOML file plus flag overrides, with per-task
//! defaults. The resolved config is echoed into the output directory and
//! reproduces the run when fed back in.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use metalearn::engine::{LossKind, MetaConfig, Mode, Order};
use serde::{Deserialize, Serialize};

/// Which episodic task distribution a run trains on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSel {
    Sinusoid,
    SynthCls,
    Dataset(PathBuf),
}

impl TaskSel {
    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskSel::Sinusoid)
    }
}

impl FromStr for TaskSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sinusoid" => Ok(TaskSel::Sinusoid),
            "synthcls" => Ok(TaskSel::SynthCls),
            _ => match s.strip_prefix("dataset:") {
                Some(path) if !path.is_empty() => Ok(TaskSel::Dataset(PathBuf::from(path))),
                _ => Err(format!(
                    "unknown task '{s}' (expected sinusoid, synthcls, or dataset:<path>)"
                )),
            },
        }
    }
}

impl fmt::Display for TaskSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSel::Sinusoid => write!(f, "sinusoid"),
            TaskSel::SynthCls => write!(f, "synthcls"),
            TaskSel::Dataset(p) => write!(f, "dataset:{}", p.display()),
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "maml" => Ok(Mode::Uniform),
        "weightgen" => Ok(Mode::WeightGen),
        "uncertainty" => Ok(Mode::Uncertainty),
        _ => Err(format!(
            "unknown mode '{s}' (expected maml, weightgen, or uncertainty)"
        )),
    }
}

pub fn mode_str(mode: Mode) -> &'static str {
    match mode {
        Mode::Uniform => "maml",
        Mode::WeightGen => "weightgen",
        Mode::Uncertainty => "uncertainty",
    }
}

/// Flat key-value config file. Every field is optional; omitted keys fall
/// back to flag values and then to per-task defaults.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub order: Option<u8>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub inner_steps: Option<usize>,
    pub meta_batch: Option<usize>,
    pub iterations: Option<u64>,
    pub threshold: Option<f64>,
    pub pool_capacity: Option<usize>,
    pub selection_stride: Option<u64>,
    pub way: Option<usize>,
    pub shot: Option<usize>,
    pub query_per_class: Option<usize>,
    pub dim: Option<usize>,
    pub noise_std: Option<f64>,
    pub prototype_range: Option<f64>,
    pub eval_tasks: Option<usize>,
    pub eval_inner_steps: Option<usize>,
    pub log_every: Option<u64>,
}

/// Flag-level overrides. Flags beat the config file, which beats defaults.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub order: Option<u8>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub inner_steps: Option<usize>,
    pub meta_batch: Option<usize>,
    pub iterations: Option<u64>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSel,
    pub seed: u64,
    pub out: PathBuf,
    pub mode: Mode,
    pub order: Order,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub iterations: u64,
    pub threshold: f64,
    pub pool_capacity: usize,
    pub selection_stride: u64,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub prototype_range: f64,
    pub eval_tasks: usize,
    pub eval_inner_steps: usize,
    pub log_every: u64,
}

impl RunConfig {
    /// Merge defaults < config file < flags.
    pub fn resolve(file: &FileConfig, flags: &Overrides) -> Result<RunConfig, String> {
        let task_str = flags
            .task
            .clone()
            .or_else(|| file.task.clone())
            .unwrap_or_else(|| "sinusoid".to_string());
        let task = TaskSel::from_str(&task_str)?;
        let cls = task.is_classification();

        let mode_s = flags
            .mode
            .clone()
            .or_else(|| file.mode.clone())
            .unwrap_or_else(|| "maml".to_string());
        let mode = parse_mode(&mode_s)?;

        let order = match flags.order.or(file.order).unwrap_or(2) {
            1 => Order::First,
            2 => Order::Second,
            n => return Err(format!("order must be 1 or 2, got {n}")),
        };

        let out = flags
            .out
            .clone()
            .or_else(|| file.out.clone())
            .ok_or("an output directory is required (--out or out= in the config file)")?;

        let way = file.way.unwrap_or(5);
        if cls && way < 2 {
            return Err(format!("way must be at least 2, got {way}"));
        }

        let cfg = RunConfig {
            task,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            out,
            mode,
            order,
            inner_lr: flags
                .inner_lr
                .or(file.inner_lr)
                .unwrap_or(if cls { 0.1 } else { 0.01 }),
            outer_lr: flags.outer_lr.or(file.outer_lr).unwrap_or(1e-3),
            inner_steps: flags.inner_steps.or(file.inner_steps).unwrap_or(1),
            meta_batch: flags.meta_batch.or(file.meta_batch).unwrap_or(4),
            iterations: flags
                .iterations
                .or(file.iterations)
                .unwrap_or(if cls { 3000 } else { 5000 }),
            threshold: file
                .threshold
                .unwrap_or(if cls { (way as f64).ln() } else { 1.0 }),
            pool_capacity: file.pool_capacity.unwrap_or(10),
            selection_stride: file.selection_stride.unwrap_or(50),
            way,
            shot: file.shot.unwrap_or(if cls { 1 } else { 10 }),
            query_per_class: file.query_per_class.unwrap_or(if cls { 15 } else { 10 }),
            dim: file.dim.unwrap_or(16),
            noise_std: file.noise_std.unwrap_or(0.3),
            prototype_range: file.prototype_range.unwrap_or(1.0),
            eval_tasks: file.eval_tasks.unwrap_or(if cls { 500 } else { 100 }),
            eval_inner_steps: file.eval_inner_steps.unwrap_or(10),
            log_every: file
                .log_every
                .unwrap_or(if cls { 500 } else { 250 }),
        };
        cfg.to_meta().validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.task.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::Mse
        }
    }

    pub fn to_meta(&self) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps,
            meta_batch: self.meta_batch,
            iterations: self.iterations,
            order: self.order,
            mode: self.mode,
            threshold: self.threshold,
            pool_capacity: self.pool_capacity,
            selection_stride: self.selection_stride,
            loss_kind: self.loss_kind(),
            eval_inner_steps: self.eval_inner_steps,
            log_every: self.log_every,
        }
    }

    /// Flat TOML echo of every resolved field, for provenance.
    pub fn echo_toml(&self) -> String {
        #[derive(Serialize)]
        struct Echo<'a> {
            task: String,
            seed: u64,
            out: &'a PathBuf,
            mode: &'static str,
            order: u8,
            inner_lr: f64,
            outer_lr: f64,
            inner_steps: usize,
            meta_batch: usize,
            iterations: u64,
            threshold: f64,
            pool_capacity: usize,
            selection_stride: u64,
            way: usize,
            shot: usize,
            query_per_class: usize,
            dim: usize,
            noise_std: f64,
            prototype_range: f64,
            eval_tasks: usize,
            eval_inner_steps: usize,
            log_every: u64,
        }
        let echo = Echo {
            task: self.task.to_string(),
            seed: self.seed,
            out: &self.out,
            mode: mode_str(self.mode),
            order: match self.order {
                Order::First => 1,
                Order::Second => 2,
            },
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps,
            meta_batch: self.meta_batch,
            iterations: self.iterations,
            threshold: self.threshold,
            pool_capacity: self.pool_capacity,
            selection_stride: self.selection_stride,
            way: self.way,
            shot: self.shot,
            query_per_class: self.query_per_class,
            dim: self.dim,
            noise_std: self.noise_std,
            prototype_range: self.prototype_range,
            eval_tasks: self.eval_tasks,
            eval_inner_steps: self.eval_inner_steps,
            log_every: self.log_every,
        };
        toml::to_string(&echo).expect("config serializes")
    }
}
