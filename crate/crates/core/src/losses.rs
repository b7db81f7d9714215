//! Training objectives with analytic gradients w.r.t. their feature inputs.
//!
//! Every contrastive term here is an instance of one directional kernel: for
//! query rows `q_i`, key rows `k_j`, a positive key `p(i)` per query and
//! scores `s_ij = <q_i, k_j> / tau`,
//!
//! ```text
//! L = (1/n) Σ_i [ log Σ_{j ∈ D_i} exp(s_ij) − w_i · s_{i,p(i)} ]
//! ```
//!
//! InfoNCE uses every key in `D_i`; the decoupled form drops the positive key
//! from `D_i`. Unit weights give the plain losses, semantic weights give the
//! weighted alignment term. Text embeddings only ever enter as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, logsumexp_nonempty, softmax_into, RealMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature of the semantic weighting function.
    pub sigma: f64,
    /// Similarity gate for pseudo-pair selection.
    pub theta: f64,
    pub w_t: f64,
    pub w_aw: f64,
    pub w_m: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            sigma: 1.0,
            theta: 0.7,
            w_t: 1.0,
            w_aw: 0.1,
            w_m: 1.0,
            triplet_margin: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return err("tau must be > 0");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return err("sigma must be > 0");
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return err("theta must lie in [-1, 1]");
        }
        for (name, w) in [("w_t", self.w_t), ("w_aw", self.w_aw), ("w_m", self.w_m)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return err("triplet_margin must be >= 0");
        }
        Ok(())
    }
}

/// A scalar loss and its gradient w.r.t. each matrix input, in the order the
/// producing function documents.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<RealMatrix>,
}

impl LossOutput {
    fn zeros_like(inputs: &[&RealMatrix]) -> Self {
        Self {
            value: 0.0,
            grads: inputs
                .iter()
                .map(|m| RealMatrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    fn add_scaled(&mut self, alpha: f64, other: &LossOutput) {
        self.value += alpha * other.value;
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            axpy(alpha, o.as_slice(), g.as_mut_slice());
        }
    }
}

/// A batch of projected features whose rows are unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch(RealMatrix);

impl FeatureBatch {
    pub const UNIT_TOL: f64 = 1e-9;

    pub fn new(z: RealMatrix) -> Result<Self> {
        for (i, row) in z.row_iter().enumerate() {
            let n = dot(row, row).sqrt();
            if (n - 1.0).abs() > Self::UNIT_TOL {
                return Err(Error::ShapeMismatch(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self(z))
    }

    pub fn matrix(&self) -> &RealMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> RealMatrix {
        self.0
    }
}

impl AsRef<RealMatrix> for FeatureBatch {
    fn as_ref(&self) -> &RealMatrix {
        &self.0
    }
}

/// Which keys serve as negatives in the weighted alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// Only the selected pseudo-pairs.
    #[default]
    SelectedSubset,
    /// Every pair in the batch; positives are still only the selected ones.
    FullBatch,
}

fn check_pair(a: &RealMatrix, b: &RealMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() < 2 {
        return Err(Error::BatchTooSmall(a.rows()));
    }
    Ok(())
}

/// The shared directional kernel. Returns (value, grad_queries, grad_keys).
fn contrast(
    queries: &RealMatrix,
    keys: &RealMatrix,
    positives: &[usize],
    weights: Option<&[f64]>,
    decoupled: bool,
    tau: f64,
) -> (f64, RealMatrix, RealMatrix) {
    let n = queries.rows();
    let m = keys.rows();
    let inv_n = 1.0 / n as f64;
    let mut gq = RealMatrix::zeros(n, queries.cols());
    let mut gk = RealMatrix::zeros(m, keys.cols());
    let mut scores = vec![0.0; m];
    let mut probs = vec![0.0; m];
    let mut value = 0.0;
    for i in 0..n {
        let q = queries.row(i);
        for (s, k) in scores.iter_mut().zip(keys.row_iter()) {
            *s = dot(q, k) / tau;
        }
        let p = positives[i];
        let w = weights.map_or(1.0, |w| w[i]);
        if decoupled {
            let neg = scores
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != p)
                .map(|(_, &s)| s);
            value += logsumexp_nonempty(neg) - w * scores[p];
            let saved = scores[p];
            scores[p] = f64::NEG_INFINITY;
            softmax_into(&scores, &mut probs);
            scores[p] = saved;
        } else {
            value += logsumexp_nonempty(scores.iter().copied()) - w * scores[p];
            softmax_into(&scores, &mut probs);
        }
        probs[p] -= w;
        // dL/ds_ij = probs_j / n, and ds_ij = <dq, k_j>/tau + <q, dk_j>/tau.
        for (j, &g) in probs.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let c = g * inv_n / tau;
            axpy(c, keys.row(j), gq.row_mut(i));
            axpy(c, q, gk.row_mut(j));
        }
    }
    (value * inv_n, gq, gk)
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// One InfoNCE direction. Gradients: `[z1, z2]`.
pub fn info_nce_direction(z1: &RealMatrix, z2: &RealMatrix, tau: f64) -> Result<LossOutput> {
    check_pair(z1, z2)?;
    let (value, g1, g2) = contrast(z1, z2, &identity(z1.rows()), None, false, tau);
    Ok(LossOutput {
        value,
        grads: vec![g1, g2],
    })
}

/// Both InfoNCE directions. Gradients: `[zf, zt]`.
pub fn info_nce_symmetric(zf: &RealMatrix, zt: &RealMatrix, tau: f64) -> Result<LossOutput> {
    let ab = info_nce_direction(zf, zt, tau)?;
    let ba = info_nce_direction(zt, zf, tau)?;
    Ok(merge_swapped(ab, ba))
}

/// One decoupled contrastive direction: the positive is removed from the
/// denominator, so the value may be negative. Gradients: `[z1, z2]`.
pub fn dcl_direction(z1: &RealMatrix, z2: &RealMatrix, tau: f64) -> Result<LossOutput> {
    check_pair(z1, z2)?;
    let (value, g1, g2) = contrast(z1, z2, &identity(z1.rows()), None, true, tau);
    Ok(LossOutput {
        value,
        grads: vec![g1, g2],
    })
}

/// Combines `L(a, b)` with `L(b, a)` into gradients ordered `[a, b]`.
fn merge_swapped(mut ab: LossOutput, ba: LossOutput) -> LossOutput {
    ab.value += ba.value;
    axpy(1.0, ba.grads[1].as_slice(), ab.grads[0].as_mut_slice());
    axpy(1.0, ba.grads[0].as_slice(), ab.grads[1].as_mut_slice());
    ab
}

/// Per-pair positive weights `exp(<df_i, dt_i>/σ)` normalized to mean one.
pub fn semantic_weights(df: &RealMatrix, dt: &RealMatrix, sigma: f64) -> Result<Vec<f64>> {
    if df.shape() != dt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            df.shape(),
            dt.shape()
        )));
    }
    let sims: Vec<f64> = df
        .row_iter()
        .zip(dt.row_iter())
        .map(|(a, b)| dot(a, b))
        .collect();
    Ok(weights_from_similarities(&sims, sigma))
}

pub fn weights_from_similarities(sims: &[f64], sigma: f64) -> Vec<f64> {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max) / sigma;
    let e: Vec<f64> = sims.iter().map(|s| (s / sigma - max).exp()).collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    e.into_iter().map(|x| x / mean).collect()
}

/// Cross-view alignment over the rows `selected` of a batch of pseudo-pairs.
///
/// `weights` (one per selected pair) switches between the weighted and the
/// unweighted term; `negatives` picks the key set. Gradients are w.r.t. the
/// full `[zf, zt]` batch; rows outside the selection only receive gradient in
/// [`NegativeSet::FullBatch`] mode.
pub fn alignment_loss(
    zf: &RealMatrix,
    zt: &RealMatrix,
    selected: &[usize],
    weights: Option<&[f64]>,
    negatives: NegativeSet,
    tau: f64,
) -> Result<LossOutput> {
    if zf.shape() != zt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            zf.shape(),
            zt.shape()
        )));
    }
    if selected.len() < 2 {
        return Err(Error::BatchTooSmall(selected.len()));
    }
    if let Some(w) = weights {
        if w.len() != selected.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} selected pairs",
                w.len(),
                selected.len()
            )));
        }
    }
    let qf = zf.select_rows(selected);
    let qt = zt.select_rows(selected);
    let mut out = LossOutput::zeros_like(&[zf, zt]);
    match negatives {
        NegativeSet::SelectedSubset => {
            let pos = identity(selected.len());
            let (v1, gf, gt) = contrast(&qf, &qt, &pos, weights, true, tau);
            let (v2, gt2, gf2) = contrast(&qt, &qf, &pos, weights, true, tau);
            out.value = v1 + v2;
            for (r, &row) in selected.iter().enumerate() {
                axpy(1.0, gf.row(r), out.grads[0].row_mut(row));
                axpy(1.0, gf2.row(r), out.grads[0].row_mut(row));
                axpy(1.0, gt.row(r), out.grads[1].row_mut(row));
                axpy(1.0, gt2.row(r), out.grads[1].row_mut(row));
            }
        }
        NegativeSet::FullBatch => {
            let (v1, gqf, gkt) = contrast(&qf, zt, selected, weights, true, tau);
            let (v2, gqt, gkf) = contrast(&qt, zf, selected, weights, true, tau);
            out.value = v1 + v2;
            axpy(1.0, gkt.as_slice(), out.grads[1].as_mut_slice());
            axpy(1.0, gkf.as_slice(), out.grads[0].as_mut_slice());
            for (r, &row) in selected.iter().enumerate() {
                axpy(1.0, gqf.row(r), out.grads[0].row_mut(row));
                axpy(1.0, gqt.row(r), out.grads[1].row_mut(row));
            }
        }
    }
    Ok(out)
}

/// Semantics-weighted alignment over already-selected pairs, negatives drawn
/// from the same selected set. Gradients: `[zf, zt]`.
pub fn weighted_alignment_loss(
    zf: &RealMatrix,
    zt: &RealMatrix,
    df: &RealMatrix,
    dt: &RealMatrix,
    tau: f64,
    sigma: f64,
) -> Result<LossOutput> {
    check_pair(zf, zt)?;
    if df.rows() != zf.rows() {
        return Err(Error::ShapeMismatch("text batch size differs from feature batch".into()));
    }
    let w = semantic_weights(df, dt, sigma)?;
    alignment_loss(
        zf,
        zt,
        &identity(zf.rows()),
        Some(&w),
        NegativeSet::SelectedSubset,
        tau,
    )
}

/// Unweighted alignment: both decoupled directions. Gradients: `[zf, zt]`.
pub fn alignment_loss_unweighted(zf: &RealMatrix, zt: &RealMatrix, tau: f64) -> Result<LossOutput> {
    let ab = dcl_direction(zf, zt, tau)?;
    let ba = dcl_direction(zt, zf, tau)?;
    Ok(merge_swapped(ab, ba))
}

/// Video-text alignment for both views over the whole batch. Text rows are
/// constants. Gradients: `[zf, zt]`.
pub fn multimodal_loss(
    zf: &RealMatrix,
    df: &RealMatrix,
    zt: &RealMatrix,
    dt: &RealMatrix,
    tau: f64,
) -> Result<LossOutput> {
    let f = alignment_loss_unweighted(zf, df, tau)?;
    let t = alignment_loss_unweighted(zt, dt, tau)?;
    Ok(LossOutput {
        value: f.value + t.value,
        grads: vec![
            f.grads.into_iter().next().unwrap(),
            t.grads.into_iter().next().unwrap(),
        ],
    })
}

/// Mean softmax cross-entropy. Gradients: `[logits]`.
pub fn cross_entropy(logits: &RealMatrix, labels: &[usize]) -> Result<LossOutput> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut grad = RealMatrix::zeros(n, c);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        value += logsumexp_nonempty(row.iter().copied()) - row[y];
        let g = grad.row_mut(i);
        softmax_into(row, g);
        g[y] -= 1.0;
        for x in g.iter_mut() {
            *x /= n as f64;
        }
    }
    Ok(LossOutput {
        value: value / n as f64,
        grads: vec![grad],
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hardest-in-batch margin loss with FPV rows as anchors, the paired TPV row
/// as positive and the closest other TPV row as negative. Zero slack yields a
/// zero subgradient. Gradients: `[zf, zt]`.
pub fn triplet_loss(zf: &RealMatrix, zt: &RealMatrix, margin: f64) -> Result<LossOutput> {
    check_pair(zf, zt)?;
    let n = zf.rows();
    let mut out = LossOutput::zeros_like(&[zf, zt]);
    for i in 0..n {
        let a = zf.row(i);
        let pos = sq_dist(a, zt.row(i));
        let (neg_idx, neg) = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, sq_dist(a, zt.row(j))))
            .fold((usize::MAX, f64::INFINITY), |best, cur| {
                if cur.1 < best.1 {
                    cur
                } else {
                    best
                }
            });
        let slack = pos - neg + margin;
        if slack <= 0.0 {
            continue;
        }
        out.value += slack;
        let c = 2.0 / n as f64;
        let (p, q) = (zt.row(i).to_vec(), zt.row(neg_idx).to_vec());
        // d/da (|a-p|² - |a-q|²) = 2(q - p)
        let ga = out.grads[0].row_mut(i);
        axpy(c, &q, ga);
        axpy(-c, &p, ga);
        // d/dp = -2(a - p), d/dq = 2(a - q)
        let gp = out.grads[1].row_mut(i);
        axpy(-c, a, gp);
        axpy(c, &p, gp);
        let gq = out.grads[1].row_mut(neg_idx);
        axpy(c, a, gq);
        axpy(-c, &q, gq);
    }
    out.value /= n as f64;
    Ok(out)
}

/// `L_f + w_t·L_t + w_aw·L_aw + w_m·L_m`, applied to values and gradients.
/// All components must carry gradients of identical shapes.
pub fn total_loss(
    lf: &LossOutput,
    lt: &LossOutput,
    law: &LossOutput,
    lm: &LossOutput,
    config: &LossConfig,
) -> Result<LossOutput> {
    for other in [lt, law, lm] {
        let same = other.grads.len() == lf.grads.len()
            && other
                .grads
                .iter()
                .zip(&lf.grads)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::ShapeMismatch(
                "loss components have different gradient targets".into(),
            ));
        }
    }
    let mut out = lf.clone();
    out.add_scaled(config.w_t, lt);
    out.add_scaled(config.w_aw, law);
    out.add_scaled(config.w_m, lm);
    Ok(out)
}

/// Scalar-only form of [`total_loss`].
pub fn combine_values(lf: f64, lt: f64, law: f64, lm: f64, config: &LossConfig) -> f64 {
    lf + config.w_t * lt + config.w_aw * law + config.w_m * lm
}
