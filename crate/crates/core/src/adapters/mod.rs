//! Low-rank adapter construction: plain LoRA plus the spectral schemes that
//! initialize the adapter from a chosen slice of the base weight's singular
//! value decomposition (PiSSA: principal components, MiLoRA: minor
//! components, random_components: a seeded random subset).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{recompose, svd, LinalgError, Matrix};
use crate::nn::{Graph, Model, NnError, Placement, Tensor};
use crate::seeds::derive_seed;

/// Which slice of the spectrum seeds the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Largest singular values.
    Principal,
    /// Smallest singular values.
    Minor,
    /// Seeded random subset of components.
    Random,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Principal => "principal",
            SplitMode::Minor => "minor",
            SplitMode::Random => "random",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "principal" => Ok(SplitMode::Principal),
            "minor" => Ok(SplitMode::Minor),
            "random" => Ok(SplitMode::Random),
            other => Err(format!("unknown split mode `{other}`")),
        }
    }
}

/// Adapter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Lora,
    Pissa,
    Milora,
    RandomComponents,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Lora => "lora",
            Scheme::Pissa => "pissa",
            Scheme::Milora => "milora",
            Scheme::RandomComponents => "random_components",
        }
    }

    /// The spectral slice a scheme freezes out of the base weight, if any.
    pub fn split_mode(self) -> Option<SplitMode> {
        match self {
            Scheme::Lora => None,
            Scheme::Pissa => Some(SplitMode::Principal),
            Scheme::Milora => Some(SplitMode::Minor),
            Scheme::RandomComponents => Some(SplitMode::Random),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lora" => Ok(Scheme::Lora),
            "pissa" => Ok(Scheme::Pissa),
            "milora" => Ok(Scheme::Milora),
            "random_components" => Ok(Scheme::RandomComponents),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

fn default_placement() -> BTreeSet<Placement> {
    [Placement::Query, Placement::Key, Placement::Value, Placement::MlpUp, Placement::MlpDown]
        .into_iter()
        .collect()
}

fn default_dropout() -> f64 {
    0.05
}

/// How to adapt a model: scheme, rank, scaling, dropout, and which
/// placements get an adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub scheme: Scheme,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_placement")]
    pub placement: BTreeSet<Placement>,
    #[serde(default)]
    pub seed: u64,
}

/// Exact split of a weight into a frozen part plus a rank-r product:
/// `w_p + b * a` reconstructs the original weight.
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    pub w_p: Matrix,
    pub b: Matrix,
    pub a: Matrix,
    pub rank: usize,
    pub mode: SplitMode,
    /// Indices of the singular components kept in the adapter, ascending.
    pub selected: Vec<usize>,
}

/// A single adapted layer before installation into a model.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    pub name: String,
    pub frozen: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub scaling: f64,
    pub dropout: f64,
}

/// Trainable/total counts after installation.
#[derive(Debug, Clone)]
pub struct AdapterSummary {
    pub trainable_params: usize,
    pub total_params: usize,
    pub adapted_weights: Vec<String>,
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("rank {rank} exceeds min dimension {max} of weight `{name}` ({rows}x{cols})")]
    RankTooLarge { rank: usize, max: usize, name: String, rows: usize, cols: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("scheme `{scheme}` requires alpha == rank, got alpha {alpha} with rank {rank}")]
    AlphaMismatch { scheme: Scheme, alpha: f64, rank: usize },
    #[error("dropout must lie in [0, 1), got {0}")]
    InvalidDropout(f64),
    #[error("placement `{0}` is not a linear weight and cannot take an adapter")]
    NonLinearPlacement(Placement),
    #[error("placement set selects no weights in this model")]
    EmptyPlacement,
    #[error("adapter branch input has {got} columns, weight `{name}` expects {expected}")]
    InputWidthMismatch { name: String, got: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Splits `w` into the complementary-component reconstruction `w_p` and the
/// factors `b = U_s * sqrt(S_s)`, `a = sqrt(S_s) * V_s^T` over the selected
/// components, so that `w_p + b * a == w` up to SVD reconstruction error.
pub fn spectral_split(
    w: &Matrix,
    rank: usize,
    mode: SplitMode,
    seed: u64,
) -> Result<SpectralSplit, AdapterError> {
    let k = w.rows().min(w.cols());
    validate_rank(rank, k, "spectral_split input", w)?;
    let f = svd(w)?;
    let selected: Vec<usize> = match mode {
        SplitMode::Principal => (0..rank).collect(),
        SplitMode::Minor => (k - rank..k).collect(),
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..k).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Partial Fisher-Yates: the first `rank` entries are the draw.
            for i in 0..rank {
                let j = rng.gen_range(i..k);
                idx.swap(i, j);
            }
            let mut chosen = idx[..rank].to_vec();
            chosen.sort_unstable();
            chosen
        }
    };
    let complement: Vec<usize> = (0..k).filter(|i| !selected.contains(i)).collect();

    let u_s = f.u.gather_columns(&selected);
    let v_s = f.v.gather_columns(&selected);
    let roots: Vec<f64> = selected.iter().map(|&i| f.sigma[i].sqrt()).collect();
    // b = U_s * sqrt(S): scale columns; a = sqrt(S) * V_s^T: scale rows.
    let b = Matrix::from_fn(u_s.rows(), rank, |i, j| u_s[(i, j)] * roots[j]);
    let a = Matrix::from_fn(rank, v_s.rows(), |i, j| roots[i] * v_s[(j, i)]);

    let w_p = if complement.is_empty() {
        Matrix::zeros(w.rows(), w.cols())
    } else {
        let u_c = f.u.gather_columns(&complement);
        let v_c = f.v.gather_columns(&complement);
        let s_c: Vec<f64> = complement.iter().map(|&i| f.sigma[i]).collect();
        recompose(&u_c, &s_c, &v_c)?
    };
    Ok(SpectralSplit { w_p, b, a, rank, mode, selected })
}

/// Builds the adapter for one weight according to the scheme.
///
/// LoRA keeps the weight frozen as-is, draws `a ~ N(0, 1/n)` from
/// `layer_seed`, and zeroes `b`; the spectral schemes move the selected
/// components of the weight into `(a, b)` and freeze the complement.
pub fn init_adapter(
    name: &str,
    weight: &Matrix,
    cfg: &AdapterConfig,
    layer_seed: u64,
) -> Result<AdaptedLinear, AdapterError> {
    let (m, n) = weight.shape();
    validate_rank(cfg.rank, m.min(n), name, weight)?;
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(AdapterError::InvalidDropout(cfg.dropout));
    }
    let scaling = cfg.alpha / cfg.rank as f64;
    let (frozen, a, b) = match cfg.scheme.split_mode() {
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(layer_seed);
            let std = (1.0 / n as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let a = Matrix::from_fn(cfg.rank, n, |_, _| normal.sample(&mut rng));
            (weight.clone(), a, Matrix::zeros(m, cfg.rank))
        }
        Some(mode) => {
            // Spectral initializations bake sqrt(sigma) into both factors;
            // any scaling other than 1 would break the exact identity
            // w_p + scaling * b * a == w at initialization.
            if scaling != 1.0 {
                return Err(AdapterError::AlphaMismatch {
                    scheme: cfg.scheme,
                    alpha: cfg.alpha,
                    rank: cfg.rank,
                });
            }
            let split = spectral_split(weight, cfg.rank, mode, layer_seed)?;
            (split.w_p, split.a, split.b)
        }
    };
    Ok(AdaptedLinear {
        name: name.to_string(),
        frozen,
        a,
        b,
        scaling,
        dropout: cfg.dropout,
    })
}

impl AdaptedLinear {
    /// `y = x * frozen^T + scaling * (dropout(x) * a^T) * b^T` built on a
    /// graph; dropout applies to the adapter branch input in training mode
    /// only.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, AdapterError> {
        let (m, n) = self.frozen.shape();
        if x.cols != n {
            return Err(AdapterError::InputWidthMismatch {
                name: self.name.clone(),
                got: x.cols,
                expected: n,
            });
        }
        let w = g.leaf(self.frozen.clone(), false);
        let a = g.leaf(self.a.clone(), true);
        let b = g.leaf(self.b.clone(), true);
        let wt = g.transpose(w);
        let base = g.matmul(x, wt);
        let branch_in = if training && self.dropout > 0.0 {
            let keep = 1.0 - self.dropout;
            let mask = Matrix::from_fn(x.rows, x.cols, |_, _| {
                if rng.gen::<f64>() < self.dropout {
                    0.0
                } else {
                    1.0 / keep
                }
            });
            let mask = g.leaf(mask, false);
            g.mul(x, mask)
        } else {
            x
        };
        let at = g.transpose(a);
        let bt = g.transpose(b);
        let xa = g.matmul(branch_in, at);
        let xab = g.matmul(xa, bt);
        let scaled = g.scale(xab, self.scaling);
        let _ = m;
        Ok(g.add(base, scaled))
    }

    /// Dense merged weight `frozen + scaling * b * a`.
    pub fn merge(&self) -> Result<Matrix, AdapterError> {
        Ok(self.frozen.add(&self.b.matmul(&self.a)?.scale(self.scaling))?)
    }
}

/// Replaces every weight whose placement is in `cfg.placement` with an
/// adapted version, freezes everything else, and reports parameter counts.
pub fn apply_adapters(
    model: Model,
    cfg: &AdapterConfig,
) -> Result<(Model, AdapterSummary), AdapterError> {
    if cfg.rank == 0 {
        return Err(AdapterError::ZeroRank);
    }
    if cfg.placement.contains(&Placement::Norm) {
        return Err(AdapterError::NonLinearPlacement(Placement::Norm));
    }
    let targets: Vec<(String, Placement)> = model
        .adaptable_weights()
        .into_iter()
        .filter(|(_, p)| cfg.placement.contains(p))
        .collect();
    if targets.is_empty() {
        return Err(AdapterError::EmptyPlacement);
    }
    // Check every target before touching the model so failures are atomic.
    for (name, _) in &targets {
        let w = &model.param(name)?.value;
        validate_rank(cfg.rank, w.rows().min(w.cols()), name, w)?;
    }

    let mut model = model;
    model.set_all_requires_grad(false);
    let mut adapted_weights = Vec::with_capacity(targets.len());
    for (name, _) in &targets {
        let weight = model.param(name)?.value.clone();
        let layer_seed = derive_seed(cfg.seed, name);
        let adapted = init_adapter(name, &weight, cfg, layer_seed)?;
        model.set_param_value(name, adapted.frozen)?;
        model.attach_low_rank(name, adapted.a, adapted.b, adapted.scaling, adapted.dropout)?;
        adapted_weights.push(name.clone());
    }

    let mut trainable = 0;
    let mut total = 0;
    for (_, p) in model.params() {
        let count = p.value.rows() * p.value.cols();
        total += count;
        if p.requires_grad {
            trainable += count;
        }
    }
    Ok((model, AdapterSummary { trainable_params: trainable, total_params: total, adapted_weights }))
}

fn validate_rank(rank: usize, k: usize, name: &str, w: &Matrix) -> Result<(), AdapterError> {
    if rank == 0 {
        return Err(AdapterError::ZeroRank);
    }
    if rank > k {
        return Err(AdapterError::RankTooLarge {
            rank,
            max: k,
            name: name.to_string(),
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    Ok(())
}
