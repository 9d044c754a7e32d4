//! JSON run configurations. Every struct rejects unknown keys.

use std::path::{Path, PathBuf};

use liparch::fixtures::{
    condensing_stack, contracting_perturbation, gpt2_like, harmonic_stack, post_ln_stack, pre_ln_decay_stack,
    rotation_stack, unit_perturbation, TransformerDims,
};
use liparch::limitarch::Mode;
use liparch::lipnum::{DomainSampler, SamplerKind};
use liparch::probe::ProbeConfig;
use liparch::scaling::{CoveringSpec, Link, LossDistribution};
use liparch::weights::WeightFile;
use liparch::{Block, Error, Matrix, Result, Seed};
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// Where the blocks come from: a weight file or a seeded fixture.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// Manifest path, relative to the config file.
    Weights { path: PathBuf },
    /// Explicit linear blocks, one matrix per block.
    Matrices { matrices: Vec<Vec<Vec<f64>>> },
    PostLn { width: usize, count: usize },
    PreLnDecay { width: usize, count: usize, scale: f64, decay: f64 },
    Gpt2Like { width: usize, count: usize, scale: f64 },
    /// `T_i = I + rate^i P`
    Condensing {
        width: usize,
        count: usize,
        rate: f64,
        #[serde(default)]
        contracting: bool,
    },
    /// `T_i = I + P/i`
    Harmonic { width: usize, count: usize },
    Rotations { width: usize, count: usize },
    ScaledIdentity { width: usize, count: usize, c: f64 },
}

pub struct Loaded {
    pub blocks: Vec<Block>,
    /// Sequence length recorded in a weight file.
    pub seq_len: Option<usize>,
    pub weights: Option<PathBuf>,
}

impl Source {
    pub fn load(&self, base: &Path, seed: Seed) -> Result<Loaded> {
        let members = |b: Block| -> Vec<Block> { b.layers().into_iter().cloned().collect() };
        let count_ok = |count: usize| {
            if count == 0 {
                Err(Error::InvalidArgument("source needs at least one block".into()))
            } else {
                Ok(())
            }
        };
        let plain = |blocks: Vec<Block>| Loaded {
            blocks,
            seq_len: None,
            weights: None,
        };
        Ok(match self {
            Source::Weights { path } => {
                let path = base.join(path);
                let wf = WeightFile::load(&path)?;
                Loaded {
                    blocks: wf.blocks()?,
                    seq_len: wf.seq_len()?,
                    weights: Some(path),
                }
            }
            Source::Matrices { matrices } => {
                count_ok(matrices.len())?;
                let blocks = matrices
                    .iter()
                    .map(|rows| {
                        let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                        if r.is_empty() || r.iter().any(|row| row.len() != r[0].len()) {
                            return Err(Error::InvalidArgument("matrix rows must be nonempty and equal".into()));
                        }
                        Block::linear(Matrix::from_rows(&r))
                    })
                    .collect::<Result<Vec<_>>>()?;
                plain(blocks)
            }
            Source::PostLn { width, count } => {
                count_ok(*count)?;
                plain(members(post_ln_stack(&dims(*width)?, *count, seed)?))
            }
            Source::PreLnDecay {
                width,
                count,
                scale,
                decay,
            } => {
                count_ok(*count)?;
                plain(members(pre_ln_decay_stack(&dims(*width)?, *count, *scale, *decay, seed)?))
            }
            Source::Gpt2Like { width, count, scale } => {
                count_ok(*count)?;
                plain(members(gpt2_like(&dims(*width)?, *count, *scale, seed)?))
            }
            Source::Condensing {
                width,
                count,
                rate,
                contracting,
            } => {
                count_ok(*count)?;
                let p = if *contracting {
                    contracting_perturbation(*width, seed)?
                } else {
                    unit_perturbation(*width, seed)?
                };
                plain(condensing_stack(&p, *count, *rate)?)
            }
            Source::Harmonic { width, count } => {
                count_ok(*count)?;
                plain(harmonic_stack(&unit_perturbation(*width, seed)?, *count)?)
            }
            Source::Rotations { width, count } => {
                count_ok(*count)?;
                plain(rotation_stack(*width, *count, seed)?)
            }
            Source::ScaledIdentity { width, count, c } => {
                count_ok(*count)?;
                plain(vec![Block::linear(Matrix::identity(*width).scale(*c))?; *count])
            }
        })
    }
}

fn dims(width: usize) -> Result<TransformerDims> {
    if width < 2 {
        return Err(Error::InvalidArgument("transformer width must be at least 2".into()));
    }
    Ok(TransformerDims::small(width))
}

/// Sampling domain; the column count is taken from the block width.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub kind: SamplerKind,
    /// Falls back to the sequence length of the weight file.
    #[serde(default)]
    pub rows: Option<usize>,
    pub radius: f64,
}

impl SamplerConfig {
    pub fn build(&self, width: usize, seq_len: Option<usize>) -> Result<DomainSampler> {
        let rows = self.rows.or(seq_len).ok_or_else(|| {
            Error::InvalidArgument("sampler.rows is required when the source records no sequence length".into())
        })?;
        Ok(DomainSampler {
            rows,
            cols: width,
            radius: self.radius,
            kind: self.kind,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipConfig {
    pub source: Source,
    pub sampler: SamplerConfig,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Largest power for the Lip-number sequence.
    #[serde(default = "one")]
    pub n_power: usize,
    #[serde(default)]
    pub with_inf: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub source: Source,
    pub sampler: SamplerConfig,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitConfig {
    pub source: Source,
    pub mode: Mode,
    pub sampler: SamplerConfig,
    #[serde(default = "default_lip_samples")]
    pub lip_samples: usize,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdParams {
    pub mu: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    /// Averaged projection onto the line at angle `theta`.
    Projection { theta: f64 },
    /// `(1 − α) I + α R(θ)`
    Rotation { theta: f64, alpha: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub operator: OperatorSpec,
    /// Starting point as a single row.
    pub f0: Vec<f64>,
    pub k_max: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataParams {
    pub ns: Vec<usize>,
    pub trials: usize,
    pub distribution: LossDistribution,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Gd {
        mu: f64,
        #[serde(rename = "G")]
        g: f64,
        #[serde(rename = "K")]
        k: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        output_dir: Option<PathBuf>,
    },
    ModelSize {
        operator: OperatorSpec,
        f0: Vec<f64>,
        k_max: usize,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        output_dir: Option<PathBuf>,
    },
    DataSize {
        ns: Vec<usize>,
        trials: usize,
        distribution: LossDistribution,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        output_dir: Option<PathBuf>,
    },
    Joint {
        gd: GdParams,
        model_size: ModelParams,
        data_size: DataParams,
        /// `(K, P, N)` points.
        grid: Vec<[f64; 3]>,
        #[serde(default)]
        link: Link,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        output_dir: Option<PathBuf>,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Gd { .. } => "gd",
            Experiment::ModelSize { .. } => "model_size",
            Experiment::DataSize { .. } => "data_size",
            Experiment::Joint { .. } => "joint",
        }
    }

    pub fn common(&self) -> (Option<u64>, Option<&PathBuf>) {
        match self {
            Experiment::Gd { seed, output_dir, .. }
            | Experiment::ModelSize { seed, output_dir, .. }
            | Experiment::DataSize { seed, output_dir, .. }
            | Experiment::Joint { seed, output_dir, .. } => (*seed, output_dir.as_ref()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoveringForm {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoveringConfig {
    pub form: CoveringForm,
    pub spec: CoveringSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Injection layer; each listed layer gets its own file.
    pub layers: Vec<usize>,
    #[serde(default = "default_column")]
    pub column: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRunConfig {
    pub source: Source,
    pub probe: ProbeConfig,
    #[serde(default)]
    pub heatmap: Option<HeatmapConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_samples() -> usize {
    liparch::lipnum::DEFAULT_SAMPLES
}

fn default_lip_samples() -> usize {
    16
}

fn default_probe_samples() -> usize {
    32
}

fn default_tol() -> f64 {
    liparch::limitarch::LIP_TOLERANCE
}

fn default_dim() -> usize {
    16
}

fn default_column() -> String {
    "mean_d".into()
}

fn one() -> usize {
    1
}

/// Reads and parses a config file. Returns the directory that relative
/// paths in it are resolved against.
pub fn read<T: DeserializeOwned>(path: &Path) -> std::result::Result<(T, PathBuf), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Invalid(String),
}
