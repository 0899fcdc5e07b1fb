//! Instruments for studying what finetuning did to the weights: subspace
//! similarity between singular-vector spans, projection of the update onto
//! chosen subspaces with the resulting amplification factor, per-layer and
//! per-module sweeps over a model pair, and a forgetting metric that scores
//! the finetuned model's predictions against the base model's distribution.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::Scheme;
use crate::linalg::{svd, LinalgError, Matrix};
use crate::nn::{log_softmax_rows, Model, NnError};
use crate::seeds::{derive_seed, fmt_g17};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("rank {rank} exceeds the smallest dimension {max} of `{context}`")]
    RankTooLarge { rank: usize, max: usize, context: String },
    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch { left_rows: usize, left_cols: usize, right_rows: usize, right_cols: usize },
    #[error("update is zero; its singular subspace is undefined")]
    ZeroUpdate,
    #[error("models disagree in structure: {0}")]
    StructureMismatch(String),
    #[error("models have different vocab sizes: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// phi(A, B) = ||A^T B||_F^2 / r over two r-column orthonormal bases:
/// 1 means the spans coincide, 0 means they are orthogonal.
fn phi_from_bases(a: &Matrix, b: &Matrix, r: usize) -> Result<f64, AnalysisError> {
    let cross = a.transpose().matmul(b)?;
    Ok(cross.frobenius_norm().powi(2) / r as f64)
}

fn top_left_vectors(m: &Matrix, r: usize, context: &str) -> Result<Matrix, AnalysisError> {
    let k = m.rows().min(m.cols());
    if r > k {
        return Err(AnalysisError::RankTooLarge { rank: r, max: k, context: context.to_string() });
    }
    Ok(svd(m)?.u.columns(0, r))
}

/// Similarity between the spans of the top-`r` left singular vectors of two
/// matrices. Symmetric, bounded by [0, 1], and invariant to right-
/// multiplication of either input by an orthogonal matrix.
pub fn subspace_similarity(m1: &Matrix, m2: &Matrix, r: usize) -> Result<f64, AnalysisError> {
    let a = top_left_vectors(m1, r, "first argument")?;
    let b = top_left_vectors(m2, r, "second argument")?;
    phi_from_bases(&a, &b, r)
}

/// Which matrix supplies the projection bases U and V.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSource {
    /// Top singular vectors of the base weight itself.
    W,
    /// Top singular vectors of a seeded Gaussian matrix of the same shape.
    Random { seed: u64 },
    /// Top singular vectors of the update itself, labeled with the scheme
    /// that produced it when that is known.
    Delta(Option<Scheme>),
}

impl BasisSource {
    pub fn label(self) -> String {
        match self {
            BasisSource::W => "w".to_string(),
            BasisSource::Random { .. } => "random".to_string(),
            BasisSource::Delta(Some(scheme)) => format!("delta_{scheme}"),
            BasisSource::Delta(None) => "delta".to_string(),
        }
    }
}

impl fmt::Display for BasisSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Norms of the base weight and the update inside an r-dimensional subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    pub basis_source: BasisSource,
    pub r: usize,
    pub w_norm: f64,
    pub proj_w_norm: f64,
    pub proj_delta_norm: Option<f64>,
    pub amplification: Option<f64>,
}

/// The published amplification formula: how much larger the update is than
/// the base weight inside the probed subspace. `None` when the denominator
/// vanishes.
pub fn amplification_ratio(proj_delta_norm: f64, proj_w_norm: f64) -> Option<f64> {
    (proj_w_norm != 0.0).then(|| proj_delta_norm / proj_w_norm)
}

pub fn gaussian_like(w: &Matrix, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(w.rows(), w.cols(), |_, _| StandardNormal.sample(&mut rng))
}

/// Projects both the base weight and the update ΔW = finetuned − base onto
/// the top-`r` singular subspace of the matrix chosen by `basis`.
pub fn projection_analysis(
    w_base: &Matrix,
    w_finetuned: &Matrix,
    r: usize,
    basis: BasisSource,
) -> Result<ProjectionReport, AnalysisError> {
    if w_base.shape() != w_finetuned.shape() {
        return Err(AnalysisError::ShapeMismatch {
            left_rows: w_base.rows(),
            left_cols: w_base.cols(),
            right_rows: w_finetuned.rows(),
            right_cols: w_finetuned.cols(),
        });
    }
    let delta = w_finetuned.sub(w_base)?;
    let basis_matrix = match basis {
        BasisSource::W => w_base.clone(),
        BasisSource::Random { seed } => gaussian_like(w_base, seed),
        BasisSource::Delta(_) => {
            if delta.frobenius_norm() == 0.0 {
                return Err(AnalysisError::ZeroUpdate);
            }
            delta.clone()
        }
    };
    let k = basis_matrix.rows().min(basis_matrix.cols());
    if r > k {
        return Err(AnalysisError::RankTooLarge { rank: r, max: k, context: basis.label() });
    }
    let f = svd(&basis_matrix)?;
    let u_r = f.u.columns(0, r);
    let v_r = f.v.columns(0, r);
    let project = |m: &Matrix| -> Result<f64, AnalysisError> {
        Ok(u_r.transpose().matmul(m)?.matmul(&v_r)?.frobenius_norm())
    };
    let proj_w_norm = project(w_base)?;
    let proj_delta_norm = project(&delta)?;
    Ok(ProjectionReport {
        basis_source: basis,
        r,
        w_norm: w_base.frobenius_norm(),
        proj_w_norm,
        proj_delta_norm: Some(proj_delta_norm),
        amplification: amplification_ratio(proj_delta_norm, proj_w_norm),
    })
}

/// Reference subspaces of the base weight that an update is compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SimilarityTarget {
    TopROfW,
    BottomROfW,
    RandomROfW,
}

impl SimilarityTarget {
    pub const ALL: [SimilarityTarget; 3] =
        [SimilarityTarget::TopROfW, SimilarityTarget::BottomROfW, SimilarityTarget::RandomROfW];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityTarget::TopROfW => "top_r_of_W",
            SimilarityTarget::BottomROfW => "bottom_r_of_W",
            SimilarityTarget::RandomROfW => "random_r_of_W",
        }
    }
}

impl fmt::Display for SimilarityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// phi between the update's top-`r` left singular vectors and one reference
/// subspace of one weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRecord {
    /// Decoder-block index; `None` for weights outside the block stack.
    pub layer: Option<usize>,
    pub module: String,
    pub weight: String,
    pub target: SimilarityTarget,
    pub r: usize,
    pub phi: f64,
}

/// Mean phi over all modules of one layer (one point of the per-layer view).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMean {
    pub layer: usize,
    pub target: SimilarityTarget,
    pub phi: f64,
}

/// Mean phi over all layers for one module label.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleMean {
    pub module: String,
    pub target: SimilarityTarget,
    pub phi: f64,
}

/// Output of a full-model similarity sweep.
#[derive(Debug, Clone)]
pub struct SimilaritySweep {
    pub records: Vec<SimilarityRecord>,
    pub layer_means: Vec<LayerMean>,
    pub module_means: Vec<ModuleMean>,
    /// True when every weight was unchanged, i.e. there was nothing to
    /// analyze; `records` is empty in that case.
    pub zero_update: bool,
    /// Weights skipped because their individual update was zero.
    pub skipped: Vec<String>,
}

/// Decoder-block index encoded in a weight name, if any.
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

/// For every weight that changed between the two models, compares the
/// update's top-`r` left singular subspace against the top-`r`, bottom-`r`,
/// and a seeded-random subspace of the base weight. Adapter branches are
/// folded in before differencing, so trained-but-unmerged models compare in
/// full weight space.
pub fn similarity_sweep(
    base: &Model,
    finetuned: &Model,
    r: usize,
    random_seed: u64,
) -> Result<SimilaritySweep, AnalysisError> {
    let weights = base.adaptable_weights();
    let other: BTreeMap<String, _> = finetuned.adaptable_weights().into_iter().collect();
    if weights.len() != other.len() {
        return Err(AnalysisError::StructureMismatch(format!(
            "{} weights vs {}",
            weights.len(),
            other.len()
        )));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (name, placement) in &weights {
        if !other.contains_key(name) {
            return Err(AnalysisError::StructureMismatch(format!(
                "weight `{name}` is missing from the finetuned model"
            )));
        }
        let w = base.merged_weight(name)?;
        let w_ft = finetuned.merged_weight(name)?;
        if w.shape() != w_ft.shape() {
            return Err(AnalysisError::StructureMismatch(format!(
                "weight `{name}` changed shape: {:?} vs {:?}",
                w.shape(),
                w_ft.shape()
            )));
        }
        let delta = w_ft.sub(&w)?;
        if delta.frobenius_norm() == 0.0 {
            skipped.push(name.clone());
            continue;
        }
        let k = w.rows().min(w.cols());
        if r > k {
            return Err(AnalysisError::RankTooLarge { rank: r, max: k, context: name.clone() });
        }
        let delta_top = svd(&delta)?.u.columns(0, r);
        let w_svd = svd(&w)?;
        let random = gaussian_like(&w, derive_seed(random_seed, name));
        for target in SimilarityTarget::ALL {
            let reference = match target {
                SimilarityTarget::TopROfW => w_svd.u.columns(0, r),
                SimilarityTarget::BottomROfW => w_svd.u.columns(k - r, k),
                SimilarityTarget::RandomROfW => svd(&random)?.u.columns(0, r),
            };
            records.push(SimilarityRecord {
                layer: layer_of(name),
                module: placement.as_str().to_string(),
                weight: name.clone(),
                target,
                r,
                phi: phi_from_bases(&delta_top, &reference, r)?,
            });
        }
    }
    let zero_update = records.is_empty();

    let mut by_layer: BTreeMap<(usize, SimilarityTarget), Vec<f64>> = BTreeMap::new();
    let mut by_module: BTreeMap<(String, SimilarityTarget), Vec<f64>> = BTreeMap::new();
    for rec in &records {
        if let Some(layer) = rec.layer {
            by_layer.entry((layer, rec.target)).or_default().push(rec.phi);
        }
        by_module.entry((rec.module.clone(), rec.target)).or_default().push(rec.phi);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let layer_means = by_layer
        .iter()
        .map(|((layer, target), phis)| LayerMean { layer: *layer, target: *target, phi: mean(phis) })
        .collect();
    let module_means = by_module
        .iter()
        .map(|((module, target), phis)| ModuleMean {
            module: module.clone(),
            target: *target,
            phi: mean(phis),
        })
        .collect();
    Ok(SimilaritySweep { records, layer_means, module_means, zero_update, skipped })
}

/// Forgetting metric over a corpus: mean over all positions of the cross-
/// entropy between the base model's next-token distribution and the
/// finetuned model's. Bounded below by the base model's mean predictive
/// entropy, with equality exactly when the distributions coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    pub loss: f64,
    pub base_entropy: f64,
    pub positions: usize,
}

fn accumulate_forgetting(
    base_logits: &Matrix,
    ft_logits: &Matrix,
    loss_sum: &mut f64,
    entropy_sum: &mut f64,
) {
    let lp_base = log_softmax_rows(base_logits);
    let lp_ft = log_softmax_rows(ft_logits);
    for i in 0..lp_base.rows() {
        let mut loss = 0.0;
        let mut entropy = 0.0;
        for j in 0..lp_base.cols() {
            let p = lp_base[(i, j)].exp();
            loss -= p * lp_ft[(i, j)];
            entropy -= p * lp_base[(i, j)];
        }
        *loss_sum += loss;
        *entropy_sum += entropy;
    }
}

pub fn forgetting_loss(
    base: &Model,
    finetuned: &Model,
    corpus: &[Vec<u32>],
) -> Result<ForgettingReport, AnalysisError> {
    if base.config().vocab_size != finetuned.config().vocab_size {
        return Err(AnalysisError::VocabMismatch {
            left: base.config().vocab_size,
            right: finetuned.config().vocab_size,
        });
    }
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(AnalysisError::EmptyCorpus);
    }
    let mut loss_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut positions = 0usize;
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let base_logits = base.forward(seq)?;
        let ft_logits = finetuned.forward(seq)?;
        accumulate_forgetting(&base_logits, &ft_logits, &mut loss_sum, &mut entropy_sum);
        positions += seq.len();
    }
    Ok(ForgettingReport {
        loss: loss_sum / positions as f64,
        base_entropy: entropy_sum / positions as f64,
        positions,
    })
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), std::io::Error> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_g17(v: Option<f64>) -> String {
    v.map(fmt_g17).unwrap_or_default()
}

/// `layer,module,target,r,phi` — one row per record, empty layer cell for
/// weights outside the block stack.
pub fn write_similarity_csv(records: &[SimilarityRecord], path: &Path) -> Result<(), std::io::Error> {
    let mut out = String::from("layer,module,target,r,phi\n");
    for rec in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            opt_usize(rec.layer),
            rec.module,
            rec.target,
            rec.r,
            fmt_g17(rec.phi)
        ));
    }
    write_atomic(path, &out)
}

/// One projection report tied to the weight it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub layer: Option<usize>,
    pub module: String,
    pub report: ProjectionReport,
}

/// `layer,module,basis_source,r,w_norm,proj_w_norm,proj_delta_norm,amplification`.
pub fn write_projection_csv(rows: &[ProjectionRow], path: &Path) -> Result<(), std::io::Error> {
    let mut out =
        String::from("layer,module,basis_source,r,w_norm,proj_w_norm,proj_delta_norm,amplification\n");
    for row in rows {
        let rep = &row.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            opt_usize(row.layer),
            row.module,
            rep.basis_source,
            rep.r,
            fmt_g17(rep.w_norm),
            fmt_g17(rep.proj_w_norm),
            opt_g17(rep.proj_delta_norm),
            opt_g17(rep.amplification)
        ));
    }
    write_atomic(path, &out)
}

/// One forgetting measurement for one scheme on one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingRow {
    pub scheme: String,
    pub corpus: String,
    pub report: ForgettingReport,
}

/// `scheme,corpus,loss,base_entropy`.
pub fn write_forgetting_csv(rows: &[ForgettingRow], path: &Path) -> Result<(), std::io::Error> {
    let mut out = String::from("scheme,corpus,loss,base_entropy\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.scheme,
            row.corpus,
            fmt_g17(row.report.loss),
            fmt_g17(row.report.base_entropy)
        ));
    }
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
        gaussian_like(&Matrix::zeros(rows, cols), seed)
    }

    #[test]
    fn self_similarity_is_one() {
        for seed in 0..5 {
            let w = gaussian(seed, 9, 7);
            let phi = subspace_similarity(&w, &w, 3).unwrap();
            assert!((phi - 1.0).abs() <= 1e-10, "phi(W, W) = {phi}");
        }
    }

    #[test]
    fn disjoint_left_subspaces_give_zero() {
        // W1's columns live in span{e1, e2}, W2's in span{e3, e4}.
        let mut w1 = Matrix::zeros(4, 2);
        w1[(0, 0)] = 3.0;
        w1[(1, 1)] = 2.0;
        let mut w2 = Matrix::zeros(4, 2);
        w2[(2, 0)] = 5.0;
        w2[(3, 1)] = 4.0;
        let phi = subspace_similarity(&w1, &w2, 2).unwrap();
        assert_eq!(phi, 0.0);
    }

    #[test]
    fn similarity_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let (rows, cols) = (rng.gen_range(4..16), rng.gen_range(4..16));
            let r = rng.gen_range(1..=rows.min(cols).min(4));
            let a = gaussian(rng.gen(), rows, cols);
            let b = gaussian(rng.gen(), rows, cols);
            let ab = subspace_similarity(&a, &b, r).unwrap();
            let ba = subspace_similarity(&b, &a, r).unwrap();
            assert!((ab - ba).abs() <= 1e-10, "asymmetry: {ab} vs {ba}");
            assert!((-1e-12..=1.0 + 1e-12).contains(&ab), "phi out of bounds: {ab}");
        }
    }

    #[test]
    fn similarity_ignores_right_rotations() {
        let w1 = gaussian(10, 8, 6);
        let w2 = gaussian(11, 8, 6);
        // An orthogonal 6x6 matrix: left singular vectors of a random square.
        let q = svd(&gaussian(12, 6, 6)).unwrap().u;
        let rotated = w2.matmul(&q).unwrap();
        let before = subspace_similarity(&w1, &w2, 3).unwrap();
        let after = subspace_similarity(&w1, &rotated, 3).unwrap();
        assert!((before - after).abs() <= 1e-9, "rotation changed phi: {before} vs {after}");
    }

    #[test]
    fn rank_larger_than_either_input_is_rejected() {
        let a = Matrix::zeros(5, 3);
        let b = Matrix::zeros(8, 8);
        assert!(matches!(
            subspace_similarity(&a, &b, 4),
            Err(AnalysisError::RankTooLarge { rank: 4, max: 3, .. })
        ));
    }

    #[test]
    fn scaled_update_has_amplification_equal_to_the_scalar() {
        let w = gaussian(20, 6, 6);
        let finetuned = w.scale(4.0); // delta = 3 * w
        let report =
            projection_analysis(&w, &finetuned, 6, BasisSource::Delta(Some(Scheme::Lora))).unwrap();
        assert!((report.proj_w_norm - w.frobenius_norm()).abs() <= 1e-9);
        let amp = report.amplification.unwrap();
        assert!((amp - 3.0).abs() <= 1e-9, "amplification {amp} should equal the scalar 3");
    }

    #[test]
    fn published_norm_pairs_reproduce_published_ratios() {
        let cases = [
            (68.18, 1.82, 37.46),
            (55.79, 17.57, 3.18),
            (44.95, 1.86, 24.17),
            (77.02, 1.32, 58.35),
            (74.34, 6.98, 10.65),
            (56.61, 1.29, 43.88),
        ];
        for (num, den, expected) in cases {
            let got = amplification_ratio(num, den).unwrap();
            assert!(
                (got - expected).abs() <= 0.02,
                "{num}/{den} gave {got}, published value is {expected}"
            );
        }
        assert_eq!(amplification_ratio(1.0, 0.0), None);
    }

    #[test]
    fn zero_update_with_delta_basis_is_an_error() {
        let w = gaussian(21, 5, 5);
        let err = projection_analysis(&w, &w, 2, BasisSource::Delta(Some(Scheme::Milora))).unwrap_err();
        assert!(matches!(err, AnalysisError::ZeroUpdate));
        // With the weight's own basis the analysis is still defined.
        let rep = projection_analysis(&w, &w, 2, BasisSource::W).unwrap();
        assert_eq!(rep.proj_delta_norm, Some(0.0));
        assert_eq!(rep.amplification, Some(0.0));
    }

    #[test]
    fn basis_source_labels_match_the_reporting_convention() {
        assert_eq!(BasisSource::W.label(), "w");
        assert_eq!(BasisSource::Random { seed: 3 }.label(), "random");
        assert_eq!(BasisSource::Delta(Some(Scheme::Lora)).label(), "delta_lora");
        assert_eq!(BasisSource::Delta(Some(Scheme::Pissa)).label(), "delta_pissa");
        assert_eq!(BasisSource::Delta(Some(Scheme::Milora)).label(), "delta_milora");
        assert_eq!(BasisSource::Delta(None).label(), "delta");
    }

    #[test]
    fn hand_computed_two_token_forgetting_case() {
        // Base predicts (0.8, 0.2); finetuned predicts (0.5, 0.5). The
        // cross-entropy is -(0.8 ln 0.5 + 0.2 ln 0.5) = ln 2. Logits equal
        // to log-probabilities produce exactly these distributions.
        let base = Matrix::from_vec(1, 2, vec![0.8f64.ln(), 0.2f64.ln()]).unwrap();
        let ft = Matrix::from_vec(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let (mut loss, mut entropy) = (0.0, 0.0);
        accumulate_forgetting(&base, &ft, &mut loss, &mut entropy);
        assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12, "loss {loss}");
        let expected_entropy = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((entropy - expected_entropy).abs() <= 1e-12);
        assert!(loss >= entropy, "Gibbs inequality must hold");
    }

    #[test]
    fn layer_parsing_handles_all_weight_names() {
        assert_eq!(layer_of("layers.0.attn.q"), Some(0));
        assert_eq!(layer_of("layers.12.mlp.up"), Some(12));
        assert_eq!(layer_of("embed.tokens"), None);
        assert_eq!(layer_of("head.out"), None);
    }
}
