//! Command drivers: training runs, learning-rate and query-count sweeps,
//! and the gradient verification report. Every output byte except wall_ms
//! is determined by (config, seed).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use metalearn::engine::{
    adapt_values, evaluate_adaptation, evaluate_query, meta_train, EngineError, MetricsRow, Mode,
    TrainResult,
};
use metalearn::models::{init_params, MlpSpec, ParamVector};
use metalearn::taskgen::{
    load_dataset, sample_sinusoid_episode, sample_sinusoid_task, sample_synth_cls_episode,
    stream_rng, streams, Episode, SynthClsConfig, TaskGenError,
};
use metalearn::verify;

use crate::config::{mode_str, RunConfig, TaskSel};

/// Stream id for the permutation half of evaluation sampling; train-time
/// streams are defined next to the task generators.
const EVAL_PERM: u64 = streams::EVAL + 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Task(#[from] TaskGenError),
    #[error("gradient checks failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for usage/config problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn model_spec(cfg: &RunConfig) -> Result<MlpSpec, CliError> {
    Ok(match &cfg.task {
        TaskSel::Sinusoid => MlpSpec::regression_default(),
        TaskSel::SynthCls => MlpSpec::classification_default(cfg.dim, cfg.way),
        TaskSel::Dataset(dir) => {
            let ds = load_dataset(dir)?;
            MlpSpec::classification_default(ds.manifest.dim, cfg.way)
        }
    })
}

fn synth_cls_config(cfg: &RunConfig) -> SynthClsConfig {
    SynthClsConfig {
        way: cfg.way,
        shot: cfg.shot,
        query_per_class: cfg.query_per_class,
        dim: cfg.dim,
        noise_std: cfg.noise_std,
        prototype_range: cfg.prototype_range,
    }
}

/// Held-out evaluation episodes, drawn from streams disjoint from training.
pub fn build_eval_set(cfg: &RunConfig) -> Result<Vec<Episode>, CliError> {
    let n = cfg.eval_tasks;
    match &cfg.task {
        TaskSel::Sinusoid => {
            let mut rng = stream_rng(cfg.seed, streams::EVAL);
            Ok((0..n)
                .map(|_| {
                    let task = sample_sinusoid_task(&mut rng);
                    sample_sinusoid_episode(&task, cfg.shot, cfg.query_per_class, &mut rng)
                })
                .collect())
        }
        TaskSel::SynthCls => {
            let scfg = synth_cls_config(cfg);
            let mut noise = stream_rng(cfg.seed, streams::EVAL);
            let mut perm = stream_rng(cfg.seed, EVAL_PERM);
            (0..n)
                .map(|_| sample_synth_cls_episode(&scfg, &mut noise, &mut perm))
                .collect::<Result<_, _>>()
                .map_err(CliError::from)
        }
        TaskSel::Dataset(dir) => {
            let ds = load_dataset(dir)?;
            let mut task_rng = stream_rng(cfg.seed, streams::EVAL);
            let mut perm = stream_rng(cfg.seed, EVAL_PERM);
            (0..n)
                .map(|_| {
                    ds.sample_episode(
                        cfg.way,
                        cfg.shot,
                        cfg.query_per_class,
                        &mut task_rng,
                        &mut perm,
                    )
                })
                .collect::<Result<_, _>>()
                .map_err(CliError::from)
        }
    }
}

fn build_source(cfg: &RunConfig) -> Result<Box<dyn FnMut() -> Result<Episode, TaskGenError>>, CliError> {
    match &cfg.task {
        TaskSel::Sinusoid => {
            let mut rng = stream_rng(cfg.seed, streams::TASK);
            let (shot, query) = (cfg.shot, cfg.query_per_class);
            Ok(Box::new(move || {
                let task = sample_sinusoid_task(&mut rng);
                Ok(sample_sinusoid_episode(&task, shot, query, &mut rng))
            }))
        }
        TaskSel::SynthCls => {
            let scfg = synth_cls_config(cfg);
            let mut noise = stream_rng(cfg.seed, streams::NOISE);
            let mut perm = stream_rng(cfg.seed, streams::PERMUTATION);
            Ok(Box::new(move || {
                sample_synth_cls_episode(&scfg, &mut noise, &mut perm)
            }))
        }
        TaskSel::Dataset(dir) => {
            let ds = load_dataset(dir)?;
            let mut task_rng = stream_rng(cfg.seed, streams::TASK);
            let mut perm = stream_rng(cfg.seed, streams::PERMUTATION);
            let (way, shot, query) = (cfg.way, cfg.shot, cfg.query_per_class);
            Ok(Box::new(move || {
                ds.sample_episode(way, shot, query, &mut task_rng, &mut perm)
            }))
        }
    }
}

pub fn metrics_header(cfg: &RunConfig) -> String {
    let mut cols = vec![
        "iteration".to_string(),
        "mean_support_loss".to_string(),
        "mean_query_loss".to_string(),
        "pre_adapt_eval_loss".to_string(),
        "post_adapt_eval_loss".to_string(),
    ];
    if cfg.task.is_classification() {
        cols.push("accuracy".to_string());
    }
    cols.push("init_idx".to_string());
    match cfg.mode {
        Mode::WeightGen => cols.extend((0..cfg.meta_batch).map(|i| format!("w_{i}"))),
        Mode::Uncertainty => cols.extend((0..cfg.meta_batch).map(|i| format!("s_{i}"))),
        Mode::Uniform => {}
    }
    cols.push("wall_ms".to_string());
    cols.join(",")
}

fn metrics_line(cfg: &RunConfig, row: &MetricsRow) -> String {
    let mut cols = vec![
        row.iteration.to_string(),
        row.mean_support_loss.to_string(),
        row.mean_query_loss.to_string(),
        row.pre_adapt_eval_loss.to_string(),
        row.post_adapt_eval_loss.to_string(),
    ];
    if cfg.task.is_classification() {
        cols.push(row.accuracy.unwrap_or(f64::NAN).to_string());
    }
    cols.push(row.init_idx.to_string());
    match cfg.mode {
        Mode::WeightGen => {
            let w = row.weights.as_deref().unwrap_or(&[]);
            cols.extend(w.iter().map(|v| v.to_string()));
        }
        Mode::Uncertainty => {
            let s = row.s_values.as_deref().unwrap_or(&[]);
            cols.extend(s.iter().map(|v| v.to_string()));
        }
        Mode::Uniform => {}
    }
    cols.push(row.wall_ms.to_string());
    cols.join(",")
}

pub struct TrainOutput {
    pub spec: MlpSpec,
    pub result: TrainResult,
    /// Post-adaptation eval loss of the final parameters; computed even
    /// when no metrics rows were logged.
    pub final_post_eval: f64,
    pub final_accuracy: Option<f64>,
}

/// Train per the config and write config.toml, metrics.csv, and
/// checkpoint.bin into the output directory.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutput, CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    write_file(&cfg.out.join("config.toml"), cfg.echo_toml().as_bytes())?;

    let spec = model_spec(cfg)?;
    let theta = init_params(&spec, cfg.seed);
    let eval_set = build_eval_set(cfg)?;
    let mut source = build_source(cfg)?;
    let meta = cfg.to_meta();

    let result = meta_train(&meta, &spec, theta, &mut source, &eval_set, true, |_| {})?;

    let mut csv = String::from(metrics_header(cfg));
    csv.push('\n');
    for row in &result.rows {
        csv.push_str(&metrics_line(cfg, row));
        csv.push('\n');
    }
    write_file(&cfg.out.join("metrics.csv"), csv.as_bytes())?;
    write_file(&cfg.out.join("checkpoint.bin"), &result.theta.to_bytes())?;

    let (final_post_eval, final_accuracy) = match result.rows.last() {
        Some(row) => (row.post_adapt_eval_loss, row.accuracy),
        None => {
            let (_, post, acc) = evaluate_adaptation(
                &spec,
                &result.theta,
                &eval_set,
                cfg.inner_lr,
                cfg.eval_inner_steps,
                cfg.loss_kind(),
            )?;
            (post, acc)
        }
    };

    Ok(TrainOutput {
        spec,
        result,
        final_post_eval,
        final_accuracy,
    })
}

/// Per-episode post-adaptation query accuracies, for confidence intervals.
pub fn eval_accuracies(
    cfg: &RunConfig,
    spec: &MlpSpec,
    theta: &ParamVector,
    eval_set: &[Episode],
) -> Result<Vec<f64>, CliError> {
    let kind = cfg.loss_kind();
    let mut out = Vec::with_capacity(eval_set.len());
    for ep in eval_set {
        let adapted = adapt_values(spec, theta, ep, cfg.inner_lr, cfg.eval_inner_steps, kind)?;
        let (_, acc) = evaluate_query(spec, &adapted, ep, kind);
        out.push(acc.ok_or_else(|| {
            CliError::Config("accuracy is only defined for classification tasks".to_string())
        })?);
    }
    Ok(out)
}

pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

struct SummaryWriter {
    file: fs::File,
    path: PathBuf,
}

impl SummaryWriter {
    fn create(path: PathBuf, header: &str) -> Result<Self, CliError> {
        let file = fs::File::create(&path).map_err(|e| CliError::Io {
            path: path.clone(),
            source: e,
        })?;
        let mut w = SummaryWriter { file, path };
        w.line(header)?;
        Ok(w)
    }

    // Rows are flushed as they land so partial summaries survive a failed cell.
    fn line(&mut self, s: &str) -> Result<(), CliError> {
        let io = |e| CliError::Io {
            path: self.path.clone(),
            source: e,
        };
        writeln!(self.file, "{s}").map_err(io)?;
        self.file.flush().map_err(io)
    }
}

fn alpha_label(a: f64) -> String {
    format!("{a}")
}

/// One training run per (inner learning rate, mode in {maml, uncertainty});
/// summary.csv gains a final max-min spread row per mode.
///
/// The swept rate governs both training and evaluation adaptation, with a
/// single adaptation step to match training; a multi-step descent at a
/// deliberately unstable rate diverges regardless of training outcome, and
/// a model meta-trained for one rate explodes when adapted at another.
pub fn run_sweep_lr(base: &RunConfig, alphas: &[f64]) -> Result<(), CliError> {
    if alphas.is_empty() {
        return Err(CliError::Config("alpha list must be non-empty".to_string()));
    }
    fs::create_dir_all(&base.out).map_err(|e| CliError::Io {
        path: base.out.clone(),
        source: e,
    })?;
    let mut summary = SummaryWriter::create(
        base.out.join("summary.csv"),
        "mode,alpha,final_eval_loss",
    )?;
    for mode in [Mode::Uniform, Mode::Uncertainty] {
        let mut finals = Vec::new();
        for &a in alphas {
            let mut cell = base.clone();
            cell.mode = mode;
            cell.inner_lr = a;
            cell.eval_inner_steps = 1;
            cell.out = base.out.join(format!("{}_a{}", mode_str(mode), alpha_label(a)));
            let out = run_train(&cell)?;
            summary.line(&format!(
                "{},{},{}",
                mode_str(mode),
                alpha_label(a),
                out.final_post_eval
            ))?;
            finals.push(out.final_post_eval);
        }
        let spread = finals.iter().cloned().fold(f64::MIN, f64::max)
            - finals.iter().cloned().fold(f64::MAX, f64::min);
        summary.line(&format!("{},spread,{}", mode_str(mode), spread))?;
    }
    Ok(())
}

/// Meta-trains once per mode in {maml, uncertainty} on a classification
/// task, then evaluates the final model at each query count; rows carry
/// accuracy with a 95% CI over eval tasks.
pub fn run_sweep_query(base: &RunConfig, n_queries: &[usize]) -> Result<(), CliError> {
    if n_queries.is_empty() {
        return Err(CliError::Config("query list must be non-empty".to_string()));
    }
    if !base.task.is_classification() {
        return Err(CliError::Config(
            "sweep-query needs a classification task (synthcls or dataset)".to_string(),
        ));
    }
    fs::create_dir_all(&base.out).map_err(|e| CliError::Io {
        path: base.out.clone(),
        source: e,
    })?;
    let mut summary = SummaryWriter::create(
        base.out.join("summary.csv"),
        "mode,n_query,accuracy,ci95",
    )?;
    for mode in [Mode::Uniform, Mode::Uncertainty] {
        let mut cell = base.clone();
        cell.mode = mode;
        cell.out = base.out.join(mode_str(mode));
        let out = run_train(&cell)?;
        for &q in n_queries {
            let mut eval_cfg = cell.clone();
            eval_cfg.query_per_class = q;
            let eval_set = build_eval_set(&eval_cfg)?;
            let accs = eval_accuracies(&eval_cfg, &out.spec, &out.result.theta, &eval_set)?;
            let (mean, ci) = mean_and_ci95(&accs);
            summary.line(&format!("{},{},{},{}", mode_str(mode), q, mean, ci))?;
        }
    }
    Ok(())
}

/// Finite-difference verification suite; returns the report text and
/// whether every check passed.
pub fn run_gradcheck(seed: u64, out: Option<&Path>) -> Result<(String, bool), CliError> {
    let reports = verify::run_all(seed);
    let mut text = String::new();
    let mut all_ok = true;
    for r in &reports {
        let ok = r.passed();
        all_ok &= ok;
        text.push_str(&format!(
            "{}: worst_rel_error={:.3e} tolerance={:.1e} {}\n",
            r.name,
            r.worst_rel_error,
            r.tolerance,
            if ok { "PASS" } else { "FAIL" }
        ));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        write_file(&dir.join("gradcheck.txt"), text.as_bytes())?;
    }
    Ok((text, all_ok))
}
