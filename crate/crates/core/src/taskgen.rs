//! Episodic task distributions: sinusoid regression, synthetic N-way K-shot
//! classification, and dataset-backed episodes loaded from a JSON manifest
//! plus raw little-endian f64 class files.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Stream ids for purpose-split RNGs; adding draws in one stream does not
/// perturb the others.
pub mod streams {
    pub const TASK: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const PERMUTATION: u64 = 3;
    pub const EVAL: u64 = 4;
}

/// Counter-based generator seeded per run and split per purpose.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SinusoidTask {
    pub fn target(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

/// One task's support and query split.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
}

impl Episode {
    /// Class indices of classification targets (row-major, one per example).
    pub fn class_indices(y: &Tensor) -> Vec<usize> {
        y.data().iter().map(|&v| v as usize).collect()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthClsConfig {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub prototype_range: f64,
}

impl Default for SynthClsConfig {
    fn default() -> Self {
        SynthClsConfig {
            way: 5,
            shot: 1,
            query_per_class: 15,
            dim: 16,
            noise_std: 0.3,
            prototype_range: 1.0,
        }
    }
}

impl SynthClsConfig {
    pub fn validate(&self) -> Result<(), TaskGenError> {
        if self.way < 2 || self.shot < 1 || self.dim < 1 || self.noise_std <= 0.0 {
            return Err(TaskGenError::InvalidConfig(format!(
                "way={} shot={} dim={} noise_std={}",
                self.way, self.shot, self.dim, self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskGenError {
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no classes")]
    EmptyDataset,
    #[error("dataset manifest error: {0}")]
    Manifest(String),
    #[error("class '{class}' file size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        class: String,
        expected: u64,
        actual: u64,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset needs at least `way` classes with shot+query examples each")]
    TooFewClasses,
}

pub fn sample_sinusoid_task(rng: &mut ChaCha8Rng) -> SinusoidTask {
    SinusoidTask {
        amplitude: rng.gen_range(0.1..=5.0),
        phase: rng.gen_range(0.0..=PI),
    }
}

pub fn sample_sinusoid_episode(
    task: &SinusoidTask,
    shot: usize,
    query: usize,
    rng: &mut ChaCha8Rng,
) -> Episode {
    assert!(shot >= 1 && query >= 1);
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> (Tensor, Tensor) {
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..=5.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| task.target(x)).collect();
        (Tensor::new(vec![n, 1], xs), Tensor::new(vec![n, 1], ys))
    };
    let (support_x, support_y) = draw(shot, rng);
    let (query_x, query_y) = draw(query, rng);
    Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        way: 1,
        shot,
        query_per_class: query,
    }
}

/// Gaussian-cluster episode: `way` prototypes drawn uniformly in a cube,
/// examples are prototype + N(0, noise_std²) noise, class slots permuted.
pub fn sample_synth_cls_episode(
    cfg: &SynthClsConfig,
    noise_rng: &mut ChaCha8Rng,
    perm_rng: &mut ChaCha8Rng,
) -> Result<Episode, TaskGenError> {
    cfg.validate()?;
    let r = cfg.prototype_range;
    let protos: Vec<Vec<f64>> = (0..cfg.way)
        .map(|_| (0..cfg.dim).map(|_| noise_rng.gen_range(-r..=r)).collect())
        .collect();

    let mut slots: Vec<usize> = (0..cfg.way).collect();
    slots.shuffle(perm_rng);

    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller keeps the draw count per example fixed.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    };

    let draw_set = |per_class: usize, rng: &mut ChaCha8Rng| -> (Tensor, Tensor) {
        let n = cfg.way * per_class;
        let mut xs = Vec::with_capacity(n * cfg.dim);
        let mut ys = Vec::with_capacity(n);
        for (orig, &slot) in slots.iter().enumerate() {
            for _ in 0..per_class {
                for d in 0..cfg.dim {
                    xs.push(protos[orig][d] + cfg.noise_std * gauss(rng));
                }
                ys.push(slot as f64);
            }
        }
        (
            Tensor::new(vec![n, cfg.dim], xs),
            Tensor::new(vec![n, 1], ys),
        )
    };

    let (support_x, support_y) = draw_set(cfg.shot, noise_rng);
    let (query_x, query_y) = draw_set(cfg.query_per_class, noise_rng);
    Ok(Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        way: cfg.way,
        shot: cfg.shot,
        query_per_class: cfg.query_per_class,
    })
}

// ---- dataset-backed episodes ----

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestClass {
    pub name: String,
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub dim: usize,
    pub classes: Vec<ManifestClass>,
}

/// Validated in-memory dataset.
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Per class: count × dim, row-major.
    pub class_data: Vec<Tensor>,
}

/// Load `meta.json` and the raw class files it names, validating sizes.
pub fn load_dataset(dir: &Path) -> Result<Dataset, TaskGenError> {
    let manifest_path = dir.join("meta.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| TaskGenError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| TaskGenError::Manifest(e.to_string()))?;
    if manifest.dim == 0 {
        return Err(TaskGenError::Manifest("dim must be positive".to_string()));
    }
    if manifest.classes.is_empty() {
        return Err(TaskGenError::EmptyDataset);
    }
    let mut class_data = Vec::with_capacity(manifest.classes.len());
    for class in &manifest.classes {
        let path = dir.join(&class.file);
        let bytes = fs::read(&path).map_err(|e| TaskGenError::Io {
            path: path.clone(),
            source: e,
        })?;
        let expected = (class.count * manifest.dim * 8) as u64;
        if bytes.len() as u64 != expected {
            return Err(TaskGenError::SizeMismatch {
                class: class.name.clone(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        class_data.push(Tensor::new(vec![class.count, manifest.dim], data));
    }
    Ok(Dataset {
        manifest,
        class_data,
    })
}

impl Dataset {
    /// N-way K-shot episode from real class data. Support and query indices
    /// within a class never overlap.
    pub fn sample_episode(
        &self,
        way: usize,
        shot: usize,
        query_per_class: usize,
        task_rng: &mut ChaCha8Rng,
        perm_rng: &mut ChaCha8Rng,
    ) -> Result<Episode, TaskGenError> {
        let dim = self.manifest.dim;
        let usable: Vec<usize> = (0..self.class_data.len())
            .filter(|&i| self.class_data[i].rows() >= shot + query_per_class)
            .collect();
        if usable.len() < way {
            return Err(TaskGenError::TooFewClasses);
        }
        let mut chosen = usable;
        chosen.shuffle(task_rng);
        chosen.truncate(way);

        let mut slots: Vec<usize> = (0..way).collect();
        slots.shuffle(perm_rng);

        let n_s = way * shot;
        let n_q = way * query_per_class;
        let mut sx = Vec::with_capacity(n_s * dim);
        let mut sy = Vec::with_capacity(n_s);
        let mut qx = Vec::with_capacity(n_q * dim);
        let mut qy = Vec::with_capacity(n_q);
        for (pos, &ci) in chosen.iter().enumerate() {
            let rows = self.class_data[ci].rows();
            let mut idx: Vec<usize> = (0..rows).collect();
            idx.shuffle(task_rng);
            let label = slots[pos] as f64;
            for &i in &idx[..shot] {
                sx.extend_from_slice(
                    &self.class_data[ci].data()[i * dim..(i + 1) * dim],
                );
                sy.push(label);
            }
            for &i in &idx[shot..shot + query_per_class] {
                qx.extend_from_slice(
                    &self.class_data[ci].data()[i * dim..(i + 1) * dim],
                );
                qy.push(label);
            }
        }
        Ok(Episode {
            support_x: Tensor::new(vec![n_s, dim], sx),
            support_y: Tensor::new(vec![n_s, 1], sy),
            query_x: Tensor::new(vec![n_q, dim], qx),
            query_y: Tensor::new(vec![n_q, 1], qy),
            way,
            shot,
            query_per_class,
        })
    }
}
