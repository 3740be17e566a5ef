//! The EM training loop and its momentum-SGD optimizer.
//!
//! Each iteration: fairness statistics from the previous memberships, the
//! fairness-adjusted soft assignment, one gradient step on the full objective,
//! then the closed-form centroid update from the re-encoded latents.

use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use ndarray::Axis;

use crate::clustering::{
    fair_soft_assign, fairness_stats, final_membership, hard_assign, is_row_stochastic, kmeans, label_permutation,
    one_hot, soft_assign, update_centroids, ClusterState, FairnessStats, KMeansConfig,
};
use crate::data::MultiViewDataset;
use crate::diffengine::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::losses::{
    compactness, contrastive_vanilla, contrastive_weighted, contrastive_with_log_weights, fairness_penalty,
    kl_agreement, membership, noncontrastive_attention, noncontrastive_simple, pair_log_weights, total, HyperParams,
    LossBundle, LossParts, RegMode,
};
use crate::model::{init_params, Bound, ModelConfig, ModelParams, ProjectionMode};

/// Whether the E-step computes fairness statistics at all. `Skipped` exists
/// to compare an α = 0 run against a loop that never touches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairnessPolicy {
    Adjusted,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden: usize,
    pub dim: usize,
    pub kmeans: KMeansConfig,
    pub fairness: FairnessPolicy,
    /// Target per-coordinate variance of the initial latents; `None` keeps
    /// the raw Glorot scale. See [`normalize_latent_scale`].
    pub latent_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            hidden: 256,
            dim: 32,
            kmeans: KMeansConfig::default(),
            fairness: FairnessPolicy::Adjusted,
            latent_scale: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::usage(
                "weight_decay",
                format!("must be nonnegative, got {}", self.weight_decay),
            ));
        }
        if let Some(s) = self.latent_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::usage("latent_scale", format!("must be positive, got {s}")));
            }
        }
        if self.hidden == 0 || self.dim == 0 {
            return Err(Error::usage("hidden/dim", "layer widths must be at least 1"));
        }
        Ok(())
    }

    pub fn model_config(&self, n: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            dim: self.dim,
            projection: if self.hp.reg.shares_projection() {
                ProjectionMode::Shared
            } else {
                ProjectionMode::PerView
            },
            attention_samples: self.hp.reg.needs_attention().then_some(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub losses: LossBundle,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<IterationRecord>,
    pub state: ClusterState,
    /// Averaged test-time membership, n × k.
    pub membership: Matrix,
    pub params: ModelParams,
}

impl TrainReport {
    pub fn labels(&self) -> Vec<usize> {
        crate::clustering::argmax_rows(&self.membership)
    }

    pub fn seconds(&self) -> f64 {
        self.history.iter().map(|r| r.seconds).sum()
    }

    /// Loss history as comma-separated rows.
    pub fn write_history(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(e) => Error::io(path, e),
            other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["iteration", "l_kl", "l_d", "l_f", "l_reg", "j", "seconds"])
            .map_err(io)?;
        for r in &self.history {
            let l = &r.losses;
            w.write_record([
                r.iteration.to_string(),
                l.kl.to_string(),
                l.compact.to_string(),
                l.fair.to_string(),
                l.reg.to_string(),
                l.total.to_string(),
                r.seconds.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One momentum-SGD update:
/// `v ← m·v + (grad + wd·param)`, `param ← param − lr·v`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, lr: f64, momentum: f64, weight_decay: f64) {
    ndarray::Zip::from(param).and(grad).and(velocity).for_each(|p, &g, v| {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    });
}

/// Everything the objective needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub views: &'a [Matrix],
    pub sensitive: &'a Matrix,
    pub centroids: &'a [Matrix],
    /// Fairness adjustment `G` per sample and cluster, if the E-step uses it.
    pub adjustment: Option<&'a Matrix>,
    /// Replaces the detached quantities with fixed values; see
    /// [`FrozenBranches`].
    pub frozen: Option<&'a FrozenBranches>,
}

/// Values that the objective treats as constants in backward: the contrastive
/// pair weights `ln w_ij` and the stop-gradient latent targets. Supplying them
/// explicitly lets a finite-difference check hold them fixed as well.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBranches {
    pub pair_log_weights: Matrix,
    pub targets: [Matrix; 2],
}

impl FrozenBranches {
    /// Captures the detached quantities of an evaluated objective.
    pub fn capture(g: &Graph, objective: &Objective) -> Result<Self> {
        let q = [g.value(objective.memberships[0]), g.value(objective.memberships[1])];
        Ok(Self {
            pair_log_weights: pair_log_weights(&q)?,
            targets: [
                g.value(objective.latents[0]).clone(),
                g.value(objective.latents[1]).clone(),
            ],
        })
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Var,
    pub bundle: LossBundle,
    pub latents: Vec<Var>,
    pub memberships: Vec<Var>,
}

/// Builds `J = L_KL + γ·L_d + α·L_F + β·L_reg` for two views. Hard indicators
/// for `L_d` come from the memberships computed in the same pass.
pub fn build_objective(g: &mut Graph, bound: &Bound, inputs: &ObjectiveInputs, hp: &HyperParams) -> Result<Objective> {
    if inputs.views.len() != 2 || inputs.centroids.len() != 2 {
        return Err(Error::Contract("the objective is defined for exactly two views".into()));
    }
    let mut latents = Vec::with_capacity(2);
    let mut memberships = Vec::with_capacity(2);
    for (v, (x, mu)) in inputs.views.iter().zip(inputs.centroids).enumerate() {
        let xv = g.constant(x.clone());
        let z = bound.encode(g, v, xv)?;
        let q = membership(g, z, mu, inputs.adjustment.map(|a| (a, hp.alpha)))?;
        latents.push(z);
        memberships.push(q);
    }
    let indicators: Vec<Matrix> = memberships.iter().map(|&q| hard_assign(g.value(q))).collect();

    let kl = kl_agreement(g, memberships[0], memberships[1])?;
    let compact = compactness(g, &latents, inputs.centroids, &indicators)?;
    let fair = fairness_penalty(g, &memberships, inputs.sensitive)?;
    let (z1, z2) = (latents[0], latents[1]);
    let reg = match hp.reg {
        RegMode::None => None,
        RegMode::L1 | RegMode::Ctr | RegMode::L2 => {
            let h1 = bound.project(g, 0, z1)?;
            let h2 = bound.project(g, 1, z2)?;
            Some(match hp.reg {
                RegMode::L1 => contrastive_vanilla(g, h1, h2, hp.tau)?,
                RegMode::Ctr => match inputs.frozen {
                    Some(f) => contrastive_with_log_weights(g, h1, h2, hp.tau, Some(f.pair_log_weights.clone()))?,
                    None => {
                        let (q1, q2) = (g.value(memberships[0]).clone(), g.value(memberships[1]).clone());
                        contrastive_weighted(g, h1, h2, &q1, &q2, hp.tau)?
                    }
                },
                _ => {
                    let [t1, t2] = targets(g, inputs.frozen, [z1, z2]);
                    noncontrastive_simple(g, h1, h2, t1, t2)?
                }
            })
        }
        RegMode::Nctr => {
            let h1 = bound.project(g, 0, z1)?;
            let h2 = bound.project(g, 1, z2)?;
            let att = bound.cross_attention(g, [z1, z2], [h1, h2])?;
            let [t1, t2] = targets(g, inputs.frozen, [z1, z2]);
            Some(noncontrastive_attention(g, att.out[0], att.out[1], t1, t2)?)
        }
    };
    let (loss, bundle) = total(g, &LossParts { kl, compact, fair, reg }, hp)?;
    Ok(Objective {
        loss,
        bundle,
        latents,
        memberships,
    })
}

fn targets(g: &mut Graph, frozen: Option<&FrozenBranches>, latents: [Var; 2]) -> [Var; 2] {
    match frozen {
        Some(f) => [g.constant(f.targets[0].clone()), g.constant(f.targets[1].clone())],
        None => latents,
    }
}

fn view_seed(seed: u64, view: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(view as u64 + 1)
}

/// Rescales each encoder so its initial latents have mean per-coordinate
/// variance `target`. Both layer weights are multiplied by the same factor;
/// with zero biases and a relu in between the output scales exactly by its
/// square. On low-dimensional inputs Glorot latents are so small that the
/// unit-bandwidth soft assignment is nearly uniform and the first centroid
/// update merges every cluster.
pub fn normalize_latent_scale(model: &mut ModelParams, views: &[Matrix], target: f64) -> Result<()> {
    for (v, x) in views.iter().enumerate() {
        let z = model.encode_values(v, x)?;
        let var = z.var_axis(Axis(0), 0.0).mean().unwrap_or(0.0);
        if !(var > 0.0 && var.is_finite()) {
            warn!("view {v}: initial latents have no spread, scale left unchanged");
            continue;
        }
        let factor = (target / var).sqrt().sqrt();
        for layer in ["l1", "l2"] {
            let name = format!("enc{v}.{layer}.weight");
            let scaled = model
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?
                .mapv(|w| w * factor);
            model.set(&name, scaled)?;
        }
    }
    Ok(())
}

/// Per-view k-means on the initial latents. Labels of later views are
/// permuted to agree with view 0 so cluster j means the same in every view.
pub fn initial_state(latents: &[Matrix], k: usize, cfg: &TrainConfig) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut reference: Option<Vec<usize>> = None;
    let mut centroids = Vec::new();
    let mut memberships = Vec::new();
    for (v, z) in latents.iter().enumerate() {
        let km = kmeans(z, k, cfg.kmeans, view_seed(cfg.seed, v))?;
        let perm = match &reference {
            None => (0..k).collect(),
            Some(r) => label_permutation(r, &km.labels, k),
        };
        let labels: Vec<usize> = km.labels.iter().map(|&l| perm[l]).collect();
        let mut mu = Matrix::zeros(km.centroids.dim());
        for (old, &new) in perm.iter().enumerate() {
            mu.row_mut(new).assign(&km.centroids.row(old));
        }
        memberships.push(one_hot(&labels, k));
        centroids.push(mu);
        if reference.is_none() {
            reference = Some(labels);
        }
    }
    Ok((centroids, memberships))
}

fn check_memberships(qs: &[Matrix], t: usize) -> Result<()> {
    for (v, q) in qs.iter().enumerate() {
        if !is_row_stochastic(q, 1e-9) {
            return Err(Error::Contract(format!(
                "memberships of view {v} stopped being row distributions at iteration {t}"
            )));
        }
    }
    Ok(())
}

/// State after one EM iteration, passed to the observer of [`fit_observed`].
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub iteration: usize,
    pub losses: &'a LossBundle,
    pub latents: &'a [Matrix],
    pub centroids: &'a [Matrix],
    pub memberships: &'a [Matrix],
}

/// Trains on a two-view dataset and returns the loss history, the final
/// clustering state and the averaged test-time membership.
pub fn fit(ds: &MultiViewDataset, k: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    fit_observed(ds, k, cfg, |_| {})
}

/// [`fit`] with a callback after every iteration.
pub fn fit_observed(
    ds: &MultiViewDataset,
    k: usize,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&Snapshot),
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = ds.n();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if ds.views.len() != 2 {
        return Err(Error::Contract(format!(
            "training needs exactly two views, got {}",
            ds.views.len()
        )));
    }
    if k == 0 || n < k {
        return Err(Error::Domain(format!("need 1 ≤ k ≤ n, got k = {k}, n = {n}")));
    }
    let hp = cfg.hp;
    let mut model = init_params(&ds.view_dims(), &cfg.model_config(n), cfg.seed)?;
    let mut velocity: Vec<Matrix> = model.params().iter().map(|p| Matrix::zeros(p.value.dim())).collect();

    let encode_all = |model: &ModelParams| -> Result<Vec<Matrix>> {
        ds.views
            .iter()
            .enumerate()
            .map(|(v, x)| model.encode_values(v, x))
            .collect()
    };
    if let Some(target) = cfg.latent_scale {
        normalize_latent_scale(&mut model, &ds.views, target)?;
    }
    let (mut centroids, mut memberships) = initial_state(&encode_all(&model)?, k, cfg)?;

    let mut history = Vec::with_capacity(hp.iterations);
    for t in 1..=hp.iterations {
        let start = Instant::now();
        let stats: Option<FairnessStats> = match cfg.fairness {
            FairnessPolicy::Adjusted => Some(fairness_stats(&memberships, &ds.sensitive)?),
            FairnessPolicy::Skipped => None,
        };

        let mut g = Graph::new();
        let bound = model.bind_owned(&mut g);
        let inputs = ObjectiveInputs {
            views: &ds.views,
            sensitive: &ds.sensitive,
            centroids: &centroids,
            adjustment: stats.as_ref().map(|s| &s.adjustment),
            frozen: None,
        };
        let objective = build_objective(&mut g, &bound, &inputs, &hp);
        let objective = match objective {
            Ok(o) => o,
            Err(e) => {
                model.restore(&mut g, &bound);
                return Err(e);
            }
        };
        g.backward(objective.loss)?;
        let grads = model.restore(&mut g, &bound);
        drop(g);
        for ((p, grad), vel) in model.params_mut().iter_mut().zip(&grads).zip(&mut velocity) {
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            sgd_step(&mut p.value, grad, vel, cfg.lr, cfg.momentum, wd);
        }

        let latents = encode_all(&model)?;
        let mut next = Vec::with_capacity(2);
        for (z, mu) in latents.iter().zip(&centroids) {
            next.push(match &stats {
                Some(s) => fair_soft_assign(z, mu, s, hp.alpha)?,
                None => soft_assign(z, mu)?,
            });
        }
        check_memberships(&next, t)?;
        centroids = next
            .iter()
            .zip(&latents)
            .map(|(q, z)| update_centroids(q, z))
            .collect::<Result<_>>()?;
        memberships = next;
        observe(&Snapshot {
            iteration: t,
            losses: &objective.bundle,
            latents: &latents,
            centroids: &centroids,
            memberships: &memberships,
        });

        let record = IterationRecord {
            iteration: t,
            losses: objective.bundle,
            seconds: start.elapsed().as_secs_f64(),
        };
        if !record.losses.total.is_finite() {
            return Err(Error::Domain(format!("objective diverged at iteration {t}")));
        }
        if t == 1 || t % 100 == 0 {
            debug!("iteration {t}: J = {:.6}", record.losses.total);
        }
        history.push(record);
    }

    let latents = encode_all(&model)?;
    let membership = final_membership(&latents, &centroids)?;
    Ok(TrainReport {
        history,
        state: ClusterState::new(centroids, memberships),
        membership,
        params: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PortableRng;
    use crate::diffengine::grad_check;

    fn blobs(n: usize, seed: u64) -> MultiViewDataset {
        let mut rng = PortableRng::new(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut view = |d: usize, shift: f64| {
            Matrix::from_shape_fn((n, d), |(i, _)| {
                let c = if labels[i] == 0 { -shift } else { shift };
                c + 0.3 * rng.standard_normal()
            })
        };
        let v1 = view(3, 2.0);
        let v2 = view(2, 1.5);
        let mut rng = PortableRng::new(seed + 99);
        let r = Matrix::from_shape_fn((n, 1), |_| f64::from(u8::from(rng.bernoulli(0.4))));
        MultiViewDataset::new(vec![v1, v2], r, Some(labels)).unwrap()
    }

    fn small_cfg(reg: RegMode, iterations: usize) -> TrainConfig {
        TrainConfig {
            hp: HyperParams {
                reg,
                iterations,
                ..HyperParams::default()
            },
            hidden: 8,
            dim: 4,
            kmeans: KMeansConfig { restarts: 2, iters: 20 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_reductions() {
        let mut p = Matrix::from_elem((1, 2), 1.0);
        let g = Matrix::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap();
        let mut v = Matrix::zeros((1, 2));
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0);
        assert_eq!(
            p,
            Matrix::from_shape_vec((1, 2), vec![1.0 - 0.1 * 0.5, 1.0 + 0.1 * 2.0]).unwrap()
        );

        let mut v = Matrix::from_elem((1, 2), 1.0);
        let zero = Matrix::zeros((1, 2));
        for step in 1..=5 {
            sgd_step(&mut p, &zero, &mut v, 0.1, 0.9, 0.0);
            assert!((v[[0, 0]] - 0.9f64.powi(step)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut x = Matrix::from_elem((1, 2), 1.0);
        let mut v = Matrix::zeros((1, 2));
        for _ in 0..500 {
            let grad = x.clone();
            sgd_step(&mut x, &grad, &mut v, 0.1, 0.9, 0.0);
        }
        assert!(x.iter().map(|a| a * a).sum::<f64>().sqrt() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..ok }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..ok }.validate().is_err());
        assert!(TrainConfig {
            weight_decay: -1.0,
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let ds = blobs(6, 1);
        assert!(matches!(
            fit(&ds, 7, &small_cfg(RegMode::None, 1)),
            Err(Error::Domain(_))
        ));
        let one = MultiViewDataset::new(vec![ds.views[0].clone()], ds.sensitive.clone(), None).unwrap();
        assert!(matches!(
            fit(&one, 2, &small_cfg(RegMode::None, 1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fit_is_deterministic_and_well_formed() {
        let ds = blobs(24, 3);
        for reg in RegMode::ALL {
            let cfg = small_cfg(reg, 5);
            let a = fit(&ds, 2, &cfg).unwrap();
            let b = fit(&ds, 2, &cfg).unwrap();
            assert_eq!(a.history.len(), 5);
            assert_eq!(a.state, b.state, "{reg}");
            assert_eq!(a.params, b.params, "{reg}");
            for (x, y) in a.history.iter().zip(&b.history) {
                assert_eq!(x.losses, y.losses);
            }
            assert!(is_row_stochastic(&a.membership, 1e-9));
            for q in &a.state.memberships {
                assert!(is_row_stochastic(q, 1e-9));
            }
        }
    }

    #[test]
    fn single_step_only_kl_moves_parameters() {
        let ds = blobs(20, 5);
        let mut cfg = small_cfg(RegMode::None, 1);
        cfg.hp.alpha = 0.0;
        cfg.hp.beta = 0.0;
        cfg.hp.gamma = 0.0;
        cfg.weight_decay = 0.0;
        let report = fit(&ds, 2, &cfg).unwrap();
        let init = init_params(&ds.view_dims(), &cfg.model_config(20), cfg.seed).unwrap();
        for (p, q) in report.params.params().iter().zip(init.params()) {
            if p.name.starts_with("proj") {
                assert_eq!(p.value, q.value, "{} has no path to L_KL", p.name);
            }
        }
        let h = report.history[0].losses;
        assert_eq!(h.total, h.kl);
        for v in 0..2 {
            let z = report.params.encode_values(v, &ds.views[v]).unwrap();
            let expected = update_centroids(&report.state.memberships[v], &z).unwrap();
            assert_eq!(report.state.centroids[v], expected);
        }
    }

    #[test]
    fn skipping_fairness_matches_zero_alpha() {
        let ds = blobs(30, 7);
        let mut cfg = small_cfg(RegMode::None, 10);
        cfg.hp.alpha = 0.0;
        let a = fit(&ds, 2, &cfg).unwrap();
        let b = fit(
            &ds,
            2,
            &TrainConfig {
                fairness: FairnessPolicy::Skipped,
                ..cfg
            },
        )
        .unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert!((x.losses.total - y.losses.total).abs() <= 1e-12);
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let ds = blobs(12, 11);
        for reg in [RegMode::L1, RegMode::Ctr, RegMode::L2, RegMode::Nctr] {
            let cfg = small_cfg(reg, 1);
            let model = init_params(&ds.view_dims(), &cfg.model_config(12), 2).unwrap();
            let latents: Vec<Matrix> = (0..2).map(|v| model.encode_values(v, &ds.views[v]).unwrap()).collect();
            let (centroids, memberships) = initial_state(&latents, 2, &cfg).unwrap();
            let stats = fairness_stats(&memberships, &ds.sensitive).unwrap();
            let values: Vec<Matrix> = model.params().iter().map(|p| p.value.clone()).collect();
            let mut inputs = ObjectiveInputs {
                views: &ds.views,
                sensitive: &ds.sensitive,
                centroids: &centroids,
                adjustment: Some(&stats.adjustment),
                frozen: None,
            };
            // Detached quantities are constants of the analytic gradient, so
            // the finite-difference oracle must hold them fixed too.
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let o = build_objective(&mut g, &bound, &inputs, &cfg.hp).unwrap();
            let frozen = FrozenBranches::capture(&g, &o).unwrap();
            inputs.frozen = Some(&frozen);
            let err = grad_check(&values, 1e-5, |g, vars| {
                let bound = model.bound(vars.to_vec());
                Ok(build_objective(g, &bound, &inputs, &cfg.hp)?.loss)
            })
            .unwrap();
            assert!(err < 1e-4, "{reg}: {err}");
        }
    }
}
