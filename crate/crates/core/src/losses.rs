//! The terms of the training objective
//! `J = L_KL + γ·L_d + α·L_F + β·L_reg` as differentiable graph scalars.
//!
//! Expectations over samples are arithmetic means over the full batch. The
//! sum over samples in `L_KL` is divided by n, and `L_d` is a mean over
//! samples and latent coordinates, so neither term grows with n or with the
//! latent width.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Axis;

use crate::clustering::FairnessStats;
use crate::diffengine::{Graph, Matrix, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegMode {
    /// No representation regularizer.
    None,
    /// Vanilla contrastive loss.
    L1,
    /// Membership-weighted contrastive loss.
    Ctr,
    /// Stop-gradient cosine agreement between views.
    L2,
    /// Stop-gradient agreement on cross-attended representations.
    Nctr,
}

impl RegMode {
    pub const ALL: [RegMode; 5] = [RegMode::None, RegMode::L1, RegMode::Ctr, RegMode::L2, RegMode::Nctr];

    /// Non-contrastive modes share one projection head across views.
    pub fn shares_projection(self) -> bool {
        matches!(self, RegMode::L2 | RegMode::Nctr)
    }

    pub fn needs_attention(self) -> bool {
        self == RegMode::Nctr
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegMode::None => "none",
            RegMode::L1 => "l1",
            RegMode::Ctr => "ctr",
            RegMode::L2 => "l2",
            RegMode::Nctr => "nctr",
        })
    }
}

impl FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegMode::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::usage(
                "reg",
                format!("unknown regularizer `{s}` (expected none, l1, ctr, l2 or nctr)"),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub iterations: usize,
    pub reg: RegMode,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 0.01,
            gamma: 10.0,
            tau: 0.5,
            iterations: 1000,
            reg: RegMode::Ctr,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::usage(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::usage("tau", format!("must be positive, got {}", self.tau)));
        }
        if self.iterations == 0 {
            return Err(Error::usage("iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub kl: f64,
    pub compact: f64,
    pub fair: f64,
    pub reg: f64,
    pub total: f64,
}

/// Graph scalars of the individual terms; `reg` is `None` for [`RegMode::None`].
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub kl: Var,
    pub compact: Var,
    pub fair: Var,
    pub reg: Option<Var>,
}

fn mean_over_rows(g: &mut Graph, per_element: Var, n: usize) -> Result<Var> {
    let s = g.sum(per_element)?;
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Differentiable soft assignment `softmax_j(−‖z_i − μ_j‖² + α G_ij)` with the
/// centroids and the adjustment held constant.
pub fn membership(g: &mut Graph, z: Var, centroids: &Matrix, adjustment: Option<(&Matrix, f64)>) -> Result<Var> {
    let mu = g.constant(centroids.clone());
    let d = g.sq_dist(z, mu)?;
    let mut logits = g.neg(d);
    if let Some((adj, alpha)) = adjustment {
        if alpha != 0.0 {
            let a = g.constant(adj.mapv(|v| alpha * v));
            logits = g.add(logits, a)?;
        }
    }
    g.row_softmax(logits)
}

/// Symmetric KL divergence `KL(Q¹‖Q²) + KL(Q²‖Q¹)`, averaged over samples.
///
/// Written as `Σ (q¹ − q²)(ln q¹ − ln q²)`, which equals the two-sided sum
/// and is exactly symmetric in floating point.
pub fn kl_agreement(g: &mut Graph, q1: Var, q2: Var) -> Result<Var> {
    let diff = g.sub(q1, q2)?;
    let l1 = g.log(q1);
    let l2 = g.log(q2);
    let ldiff = g.sub(l1, l2)?;
    let terms = g.mul(diff, ldiff)?;
    let n = g.shape(q1).0;
    mean_over_rows(g, terms, n)
}

/// Squared distance of every latent to its assigned centroid, summed over
/// views and averaged over samples and latent coordinates. Centroids and
/// indicators are constants.
pub fn compactness(g: &mut Graph, latents: &[Var], centroids: &[Matrix], indicators: &[Matrix]) -> Result<Var> {
    if latents.is_empty() || latents.len() != centroids.len() || latents.len() != indicators.len() {
        return Err(Error::Contract(
            "compactness needs one centroid set and indicator matrix per view".into(),
        ));
    }
    let n = g.shape(latents[0]).0;
    let mut acc: Option<Var> = None;
    for ((&z, mu), c) in latents.iter().zip(centroids).zip(indicators) {
        let muv = g.constant(mu.clone());
        let d = g.sq_dist(z, muv)?;
        let cv = g.constant(c.clone());
        let picked = g.mul(d, cv)?;
        let s = g.sum(picked)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let d = g.shape(latents[0]).1;
    Ok(g.scale(acc.expect("at least one view"), 1.0 / (n * d) as f64))
}

/// `L_F = Σ_j ‖s_j − s_D‖²` with `s_j` the membership-weighted sensitive mean
/// of cluster j (memberships summed over views) and `s_D` constant.
pub fn fairness_penalty(g: &mut Graph, memberships: &[Var], sensitive: &Matrix) -> Result<Var> {
    let (&first, rest) = memberships
        .split_first()
        .ok_or_else(|| Error::Contract("fairness penalty needs at least one view".into()))?;
    let mut qsum = first;
    for &q in rest {
        qsum = g.add(qsum, q)?;
    }
    let (n, k) = g.shape(qsum);
    if sensitive.nrows() != n {
        return Err(Error::shape("fairness_penalty", (n, k), sensitive.dim()));
    }
    let dr = sensitive.ncols();
    let qt = g.transpose(qsum);
    let r = g.constant(sensitive.clone());
    let weighted = g.matmul(qt, r)?;
    let ones = g.constant(Matrix::ones((n, dr)));
    let mass = g.matmul(qt, ones)?;
    let s = g.div(weighted, mass)?;
    let sd = sensitive.sum_axis(ndarray::Axis(0)) / n as f64;
    let sd = g.constant(Matrix::from_shape_fn((k, dr), |(_, c)| sd[c]));
    let diff = g.sub(s, sd)?;
    let sq = g.square(diff);
    g.sum(sq)
}

/// `Σ_j ‖s_j − s_D‖²` evaluated from precomputed statistics.
pub fn fairness_penalty_value(stats: &FairnessStats) -> f64 {
    stats
        .cluster_means
        .outer_iter()
        .map(|s| {
            s.iter()
                .zip(&stats.dataset_mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// `ln sim(q_i, q_j) = 1 − cos(q_i, q_j)` for the concatenated memberships
/// `q_i = [q_i¹; q_i²]`.
pub fn pair_log_weights(memberships: &[&Matrix]) -> Result<Matrix> {
    let first = memberships
        .first()
        .ok_or_else(|| Error::Contract("pair weights need at least one membership matrix".into()))?;
    let n = first.nrows();
    for q in memberships {
        if q.nrows() != n {
            return Err(Error::shape("pair_log_weights", first.dim(), q.dim()));
        }
    }
    let views: Vec<_> = memberships.iter().map(|q| q.view()).collect();
    let mut unit = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Contract(e.to_string()))?;
    for mut row in unit.outer_iter_mut() {
        let norm = row.dot(&row).sqrt().max(crate::diffengine::EPS);
        row.mapv_inplace(|v| v / norm);
    }
    let mut w = unit.dot(&unit.t());
    w.mapv_inplace(|c| 1.0 - c);
    Ok(w)
}

/// The contrastive loss with explicit constant pair weights `ln w_ij`
/// (`None` means every weight is 1).
pub fn contrastive_with_log_weights(
    g: &mut Graph,
    h1: Var,
    h2: Var,
    tau: f64,
    log_weights: Option<Matrix>,
) -> Result<Var> {
    let (s1, s2) = (g.shape(h1), g.shape(h2));
    if s1 != s2 {
        return Err(Error::shape("contrastive", s1, s2));
    }
    let n = s1.0;
    let w = log_weights.map(Arc::new);
    let neg1 = g.pairwise_lse(h1, tau, w.clone())?;
    let neg2 = g.pairwise_lse(h2, tau, w)?;
    let prod = g.mul(h1, h2)?;
    let pos = g.row_sum(prod)?;
    let pos = g.scale(pos, 1.0 / tau);
    let neg = g.log_add_exp(neg1, neg2)?;
    let den = g.log_add_exp(pos, neg)?;
    let per_sample = g.sub(den, pos)?;
    mean_over_rows(g, per_sample, n)
}

/// `−mean_i ln[f(h_i¹,h_i²) / (f(h_i¹,h_i²) + Σ_{j≠i} Σ_v f(h_i^v,h_j^v))]`
/// with `f(a,b) = exp(a·b/τ)`.
pub fn contrastive_vanilla(g: &mut Graph, h1: Var, h2: Var, tau: f64) -> Result<Var> {
    contrastive_with_log_weights(g, h1, h2, tau, None)
}

/// The contrastive loss with each negative pair scaled by
/// `sim(q_i, q_j) = exp(1 − cos(q_i, q_j))`. The weights are constants.
pub fn contrastive_weighted(g: &mut Graph, h1: Var, h2: Var, q1: &Matrix, q2: &Matrix, tau: f64) -> Result<Var> {
    let n = g.shape(h1).0;
    if q1.nrows() != n || q2.nrows() != n {
        return Err(Error::shape("contrastive_weighted", g.shape(h1), q1.dim()));
    }
    let w = pair_log_weights(&[q1, q2])?;
    contrastive_with_log_weights(g, h1, h2, tau, Some(w))
}

/// `−mean_i (â_i¹ · SG(ẑ_i²) + â_i² · SG(ẑ_i¹))` where `x̂` is the row
/// normalized `x`.
pub fn noncontrastive_simple(g: &mut Graph, h1: Var, h2: Var, z1: Var, z2: Var) -> Result<Var> {
    let n = g.shape(h1).0;
    let hn1 = g.row_l2_normalize(h1)?;
    let hn2 = g.row_l2_normalize(h2)?;
    let zn1 = g.row_l2_normalize(z1)?;
    let zn2 = g.row_l2_normalize(z2)?;
    let zn1 = g.stop_gradient(zn1);
    let zn2 = g.stop_gradient(zn2);
    let a = g.mul(hn1, zn2)?;
    let b = g.mul(hn2, zn1)?;
    let both = g.add(a, b)?;
    let s = g.sum(both)?;
    Ok(g.scale(s, -1.0 / n as f64))
}

/// [`noncontrastive_simple`] on the cross-attended representations `T^v`.
pub fn noncontrastive_attention(g: &mut Graph, t1: Var, t2: Var, z1: Var, z2: Var) -> Result<Var> {
    noncontrastive_simple(g, t1, t2, z1, z2)
}

/// Combines the parts into `J` and reads back their values.
pub fn total(g: &mut Graph, parts: &LossParts, hp: &HyperParams) -> Result<(Var, LossBundle)> {
    let mut j = parts.kl;
    for (w, v) in [
        (hp.gamma, Some(parts.compact)),
        (hp.alpha, Some(parts.fair)),
        (hp.beta, parts.reg),
    ] {
        if let Some(v) = v {
            let scaled = g.scale(v, w);
            j = g.add(j, scaled)?;
        }
    }
    let bundle = LossBundle {
        kl: g.scalar(parts.kl),
        compact: g.scalar(parts.compact),
        fair: g.scalar(parts.fair),
        reg: parts.reg.map_or(0.0, |v| g.scalar(v)),
        total: g.scalar(j),
    };
    Ok((j, bundle))
}
