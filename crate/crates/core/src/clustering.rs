//! Soft and hard cluster assignment, fairness statistics, centroid updates and
//! k-means initialization.
//!
//! Everything here is a pure function of explicit inputs; the trainer owns the
//! ordering of E- and M-steps.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffengine::{pairwise_sq_dist, row_softmax, Matrix, EPS};
use crate::error::{Error, Result};

/// Per-view clustering state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// k × d centroid matrix per view.
    pub centroids: Vec<Matrix>,
    /// n × k soft memberships per view.
    pub memberships: Vec<Matrix>,
    /// n × k one-hot hard indicators per view.
    pub indicators: Vec<Matrix>,
    pub k: usize,
}

impl ClusterState {
    pub fn new(centroids: Vec<Matrix>, memberships: Vec<Matrix>) -> Self {
        let k = centroids.first().map_or(0, |c| c.nrows());
        let indicators = memberships.iter().map(hard_assign).collect();
        Self {
            centroids,
            memberships,
            indicators,
            k,
        }
    }
}

/// Sensitive-group statistics of a set of soft memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessStats {
    /// k × d_r weighted sensitive means `s_j`.
    pub cluster_means: Matrix,
    /// Column means of R, length d_r.
    pub dataset_mean: Vec<f64>,
    /// n × k × d_r leave-one-out terms.
    pub kappa: Array3<f64>,
    /// n × k assignment adjustments.
    pub adjustment: Matrix,
}

fn check_centroids(z: &Matrix, centroids: &Matrix) -> Result<()> {
    if centroids.nrows() == 0 {
        return Err(Error::Domain("soft assignment needs k ≥ 1".into()));
    }
    if z.ncols() != centroids.ncols() {
        return Err(Error::shape("soft_assign", z.dim(), centroids.dim()));
    }
    Ok(())
}

/// `q_ij = softmax_j(−‖z_i − μ_j‖²)`.
pub fn soft_assign(z: &Matrix, centroids: &Matrix) -> Result<Matrix> {
    check_centroids(z, centroids)?;
    let mut logits = pairwise_sq_dist(z, centroids);
    logits.mapv_inplace(|d| -d);
    Ok(row_softmax(&logits))
}

/// Soft assignment with the fairness adjustment added to each logit:
/// `softmax_j(−‖z_i − μ_j‖² + α G_ij)`.
///
/// With `alpha == 0` the result is bit-identical to [`soft_assign`].
pub fn fair_soft_assign(z: &Matrix, centroids: &Matrix, stats: &FairnessStats, alpha: f64) -> Result<Matrix> {
    check_centroids(z, centroids)?;
    let g = &stats.adjustment;
    if g.dim() != (z.nrows(), centroids.nrows()) {
        return Err(Error::shape(
            "fair_soft_assign",
            (z.nrows(), centroids.nrows()),
            g.dim(),
        ));
    }
    let mut logits = pairwise_sq_dist(z, centroids);
    logits.mapv_inplace(|d| -d);
    if alpha != 0.0 {
        logits.scaled_add(alpha, g);
    }
    Ok(row_softmax(&logits))
}

/// Computes `s_j`, `s_D`, the leave-one-out terms κ and the adjustment
/// `G_ij = ‖s_j − κ_ij − s_D‖² − ‖s_j − s_D‖²` from the memberships of all
/// views.
pub fn fairness_stats(memberships: &[Matrix], sensitive: &Matrix) -> Result<FairnessStats> {
    let first = memberships
        .first()
        .ok_or_else(|| Error::Domain("fairness statistics need at least one view".into()))?;
    let (n, k) = first.dim();
    for q in memberships {
        if q.dim() != (n, k) {
            return Err(Error::shape("fairness_stats", (n, k), q.dim()));
        }
    }
    if sensitive.nrows() != n {
        return Err(Error::shape("fairness_stats", (n, k), sensitive.dim()));
    }
    let dr = sensitive.ncols();

    // Σ_v q_ij^v
    let mut qsum = Matrix::zeros((n, k));
    for q in memberships {
        qsum += q;
    }
    let mass = qsum.sum_axis(Axis(0));
    let weighted = qsum.t().dot(sensitive);
    let mut cluster_means = Matrix::zeros((k, dr));
    for j in 0..k {
        let den = mass[j].max(EPS);
        for c in 0..dr {
            cluster_means[[j, c]] = weighted[[j, c]] / den;
        }
    }
    let dataset_mean: Vec<f64> = (0..dr).map(|c| sensitive.column(c).sum() / n as f64).collect();

    let mut kappa = Array3::zeros((n, k, dr));
    let mut adjustment = Matrix::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let den = (mass[j] - qsum[[i, j]]).max(EPS);
            let mut with = 0.0;
            let mut without = 0.0;
            for c in 0..dr {
                let kap = qsum[[i, j]] * sensitive[[i, c]] / den;
                kappa[[i, j, c]] = kap;
                let base = cluster_means[[j, c]] - dataset_mean[c];
                with += (base - kap) * (base - kap);
                without += base * base;
            }
            adjustment[[i, j]] = with - without;
        }
    }
    Ok(FairnessStats {
        cluster_means,
        dataset_mean,
        kappa,
        adjustment,
    })
}

/// `μ_j = Σ_i q_ij z_i / Σ_i q_ij` with the denominator clamped at [`EPS`].
pub fn update_centroids(q: &Matrix, z: &Matrix) -> Result<Matrix> {
    if q.nrows() != z.nrows() {
        return Err(Error::shape("update_centroids", q.dim(), z.dim()));
    }
    let mut centroids = q.t().dot(z);
    let mass = q.sum_axis(Axis(0));
    for (mut row, m) in centroids.outer_iter_mut().zip(mass.iter()) {
        let den = m.max(EPS);
        row.mapv_inplace(|v| v / den);
    }
    Ok(centroids)
}

/// Row-wise argmax, ties going to the lowest index.
pub fn argmax_rows(q: &Matrix) -> Vec<usize> {
    q.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut c = Matrix::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        c[[i, l]] = 1.0;
    }
    c
}

/// One-hot indicators of the row-wise argmax of `q`.
pub fn hard_assign(q: &Matrix) -> Matrix {
    one_hot(&argmax_rows(q), q.ncols())
}

/// Averaged test-time membership `(1/V) Σ_v soft_assign(Z^v, μ^v)`; the
/// fairness adjustment is not used.
pub fn final_membership(latents: &[Matrix], centroids: &[Matrix]) -> Result<Matrix> {
    if latents.is_empty() || latents.len() != centroids.len() {
        return Err(Error::Contract(format!(
            "final membership needs one centroid set per view ({} views, {} centroid sets)",
            latents.len(),
            centroids.len()
        )));
    }
    let mut total: Option<Matrix> = None;
    for (z, mu) in latents.iter().zip(centroids) {
        let q = soft_assign(z, mu)?;
        match total.as_mut() {
            Some(t) => {
                if t.dim() != q.dim() {
                    return Err(Error::shape("final_membership", t.dim(), q.dim()));
                }
                *t += &q;
            }
            None => total = Some(q),
        }
    }
    let mut q = total.expect("at least one view");
    q.mapv_inplace(|v| v / latents.len() as f64);
    Ok(q)
}

/// Checks that every row is a probability distribution within `tol`.
pub fn is_row_stochastic(q: &Matrix, tol: f64) -> bool {
    q.outer_iter()
        .all(|row| row.iter().all(|&v| v >= 0.0 && v.is_finite()) && (row.sum() - 1.0).abs() <= tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub iters: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    pub wcss: f64,
    /// Final WCSS of every restart, in restart order.
    pub restart_wcss: Vec<f64>,
}

/// One Lloyd run from the given centroids. Returns the final centroids,
/// labels, and the WCSS after every assignment step.
pub fn lloyd(points: &Matrix, init: Matrix, iters: usize) -> (Matrix, Vec<usize>, Vec<f64>) {
    let k = init.nrows();
    let mut centroids = init;
    let mut labels = vec![usize::MAX; points.nrows()];
    let mut trace = Vec::new();
    for _ in 0..iters.max(1) {
        let dist = pairwise_sq_dist(points, &centroids);
        let next = argmax_rows(&dist.mapv(|d| -d));
        let wcss: f64 = next.iter().enumerate().map(|(i, &j)| dist[[i, j]]).sum();
        trace.push(wcss);
        let changed = next != labels;
        labels = next;
        if !changed {
            break;
        }

        let mut sums = Matrix::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &j) in labels.iter().enumerate() {
            sums.row_mut(j).scaled_add(1.0, &points.row(i));
            counts[j] += 1;
        }
        let mut empty = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                centroids.row_mut(j).assign(&sums.row(j).mapv(|v| v / c));
            } else {
                empty.push(j);
            }
        }
        // An empty cluster takes over the point farthest from its centroid.
        for j in empty {
            let far = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (i, dist[[i, l]]))
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                )
                .0;
            centroids.row_mut(j).assign(&points.row(far));
            labels[far] = j;
        }
    }
    (centroids, labels, trace)
}

fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.nrows();
    let mut centroids = Matrix::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(&points.row(i), &centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq(&points.row(i), &centroids.row(c)));
        }
    }
    centroids
}

fn sq(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// within-cluster sum of squares wins (earliest on ties).
pub fn kmeans(points: &Matrix, k: usize, cfg: KMeansConfig, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Domain("k-means needs k ≥ 1".into()));
    }
    if n < k {
        return Err(Error::Domain(format!("k-means needs n ≥ k, got n = {n}, k = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    let mut restart_wcss = Vec::with_capacity(cfg.restarts.max(1));
    for _ in 0..cfg.restarts.max(1) {
        let init = kmeans_plus_plus(points, k, &mut rng);
        let (centroids, labels, _) = lloyd(points, init, cfg.iters);
        let wcss = wcss(points, &centroids, &labels);
        restart_wcss.push(wcss);
        if best.as_ref().is_none_or(|b| wcss < b.wcss) {
            best = Some(KMeansResult {
                centroids,
                labels,
                wcss,
                restart_wcss: Vec::new(),
            });
        }
    }
    let mut best = best.expect("at least one restart");
    best.restart_wcss = restart_wcss;
    Ok(best)
}

pub fn wcss(points: &Matrix, centroids: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &j)| sq(&points.row(i), &centroids.row(j)))
        .sum()
}

/// Relabels `labels` (values in `[0, k)`) to maximize agreement with
/// `reference`. Exhaustive over permutations for k ≤ 8, greedy beyond.
pub fn align_labels(reference: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
    let mapping = label_permutation(reference, labels, k);
    labels.iter().map(|&l| mapping[l]).collect()
}

/// The permutation used by [`align_labels`]: old label `l` becomes `p[l]`.
pub fn label_permutation(reference: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
    let mut overlap = vec![vec![0usize; k]; k];
    for (&r, &l) in reference.iter().zip(labels) {
        overlap[l][r] += 1;
    }
    if k <= 8 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = perm.clone();
        let mut best_score = 0usize;
        let mut first = true;
        permute(&mut perm, 0, &mut |p| {
            let score: usize = p.iter().enumerate().map(|(l, &r)| overlap[l][r]).sum();
            if first || score > best_score {
                best_score = score;
                best = p.to_vec();
                first = false;
            }
        });
        best
    } else {
        let mut mapping = vec![usize::MAX; k];
        let mut used = vec![false; k];
        let mut cells: Vec<(usize, usize, usize)> = (0..k)
            .flat_map(|l| (0..k).map(move |r| (l, r)))
            .map(|(l, r)| (overlap[l][r], l, r))
            .collect();
        cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, l, r) in cells {
            if mapping[l] == usize::MAX && !used[r] {
                mapping[l] = r;
                used[r] = true;
            }
        }
        mapping
    }
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_shape_vec((rows, cols), v).unwrap())
    }

    fn stats_with_adjustment(g: Matrix) -> FairnessStats {
        let (n, k) = g.dim();
        FairnessStats {
            cluster_means: Matrix::zeros((k, 1)),
            dataset_mean: vec![0.0],
            kappa: Array3::zeros((n, k, 1)),
            adjustment: g,
        }
    }

    #[test]
    fn soft_assign_examples() {
        let mu = array![[1.0, 0.0], [-1.0, 0.0]];
        let q = soft_assign(&array![[0.0, 3.0]], &mu).unwrap();
        assert_eq!(q, array![[0.5, 0.5]]);

        let mu = array![[0.0, 0.0], [10.0, 0.0]];
        let q = soft_assign(&array![[0.0, 0.0]], &mu).unwrap();
        let expected = 1.0 / (1.0 + (-100.0f64).exp());
        assert_abs_diff_eq!(q[[0, 0]], expected, epsilon = 1e-15);
        assert!((q[[0, 0]] - 1.0).abs() < 1e-9);

        let q = soft_assign(&array![[1.0], [2.0], [-3.0]], &array![[0.5]]).unwrap();
        assert_eq!(q, array![[1.0], [1.0], [1.0]]);

        assert!(soft_assign(&array![[1.0]], &Matrix::zeros((0, 1))).is_err());
    }

    #[test]
    fn fairness_stats_hand_example() {
        let q = vec![array![[1.0], [1.0]]];
        let r = array![[1.0], [0.0]];
        let s = fairness_stats(&q, &r).unwrap();
        assert_eq!(s.cluster_means, array![[0.5]]);
        assert_eq!(s.dataset_mean, vec![0.5]);
        assert_eq!(s.kappa[[0, 0, 0]], 1.0);
        assert_eq!(s.adjustment[[0, 0]], 1.0);
        assert_eq!(s.kappa[[1, 0, 0]], 0.0);
        assert_eq!(s.adjustment[[1, 0]], 0.0);
    }

    #[test]
    fn fairness_stats_constant_and_zero_cases() {
        let q = vec![Matrix::from_elem((4, 2), 0.5), Matrix::from_elem((4, 2), 0.5)];
        let ones = Matrix::ones((4, 1));
        let s = fairness_stats(&q, &ones).unwrap();
        assert!(s.cluster_means.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(s.dataset_mean, vec![1.0]);
        // Σ_v q = 1 per cell, cluster mass 4: κ = 1 / 3.
        for v in s.kappa.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        for g in s.adjustment.iter() {
            assert_abs_diff_eq!(*g, 1.0 / 9.0, epsilon = 1e-15);
        }

        let zeros = Matrix::zeros((4, 1));
        let s = fairness_stats(&q, &zeros).unwrap();
        assert!(s.cluster_means.iter().all(|&v| v == 0.0));
        assert_eq!(s.dataset_mean, vec![0.0]);
        assert!(s.kappa.iter().all(|&v| v == 0.0));
        assert!(s.adjustment.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fair_soft_assign_examples() {
        let z = array![[0.0, 0.0]];
        let mu = array![[1.0, 0.0], [-1.0, 0.0]];
        let stats = stats_with_adjustment(array![[1.0, 0.0]]);
        let q = fair_soft_assign(&z, &mu, &stats, 1.0).unwrap();
        assert_abs_diff_eq!(q[[0, 0]], 0.7310585786300049, epsilon = 1e-12);
        assert_abs_diff_eq!(q[[0, 1]], 0.2689414213699951, epsilon = 1e-12);

        let stats = stats_with_adjustment(array![[3.0, 3.0]]);
        let q = fair_soft_assign(&z, &mu, &stats, 2.0).unwrap();
        assert_eq!(q, soft_assign(&z, &mu).unwrap());
    }

    #[test]
    fn update_centroids_examples() {
        let z = array![[0.0, 0.0], [2.0, 2.0], [10.0, 0.0], [12.0, 2.0]];
        let q = one_hot(&[0, 0, 1, 1], 2);
        let mu = update_centroids(&q, &z).unwrap();
        assert_eq!(mu, array![[1.0, 1.0], [11.0, 1.0]]);

        let uniform = Matrix::from_elem((4, 2), 0.5);
        let mu = update_centroids(&uniform, &z).unwrap();
        assert_eq!(mu.row(0), array![6.0, 1.0]);
        assert_eq!(mu.row(1), array![6.0, 1.0]);

        let empty = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let mu = update_centroids(&empty, &z).unwrap();
        assert!(mu.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hard_assign_ties_go_low() {
        assert_eq!(hard_assign(&array![[0.2, 0.8]]), array![[0.0, 1.0]]);
        assert_eq!(hard_assign(&array![[0.5, 0.5]]), array![[1.0, 0.0]]);
    }

    #[test]
    fn kmeans_separable_and_single_cluster() {
        let pts = array![[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]];
        let res = kmeans(&pts, 2, KMeansConfig::default(), 7).unwrap();
        let mut cs: Vec<Vec<f64>> = res.centroids.outer_iter().map(|r| r.to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);

        let res = kmeans(&pts, 1, KMeansConfig::default(), 7).unwrap();
        assert_eq!(res.centroids, array![[5.0, 5.5]]);
        assert!(kmeans(&pts, 5, KMeansConfig::default(), 7).is_err());
    }

    #[test]
    fn kmeans_keeps_best_restart_and_is_deterministic() {
        let pts = Matrix::from_shape_fn((60, 2), |(i, j)| {
            let c = (i % 3) as f64 * 4.0;
            c + ((i * 31 + j * 17) % 13) as f64 * 0.37
        });
        let a = kmeans(&pts, 4, KMeansConfig { restarts: 6, iters: 50 }, 3).unwrap();
        let b = kmeans(&pts, 4, KMeansConfig { restarts: 6, iters: 50 }, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.restart_wcss.len(), 6);
        assert!(a.restart_wcss.iter().all(|&w| a.wcss <= w));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let pts = array![[0.0], [0.1], [5.0], [5.1]];
        let init = array![[0.0], [100.0]];
        let (c, labels, trace) = lloyd(&pts, init, 20);
        assert!(labels.contains(&1));
        assert!(c.iter().all(|v| v.is_finite()));
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn final_membership_reductions() {
        let z = array![[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]];
        let mu = array![[0.0, 1.0], [2.0, 0.0]];
        let single = final_membership(&[z.clone()], &[mu.clone()]).unwrap();
        assert_eq!(single, soft_assign(&z, &mu).unwrap());
        let both = final_membership(&[z.clone(), z.clone()], &[mu.clone(), mu.clone()]).unwrap();
        for (a, b) in both.iter().zip(single.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn align_labels_recovers_permutation() {
        let reference = vec![0, 0, 1, 1, 2, 2];
        let permuted = vec![2, 2, 0, 0, 1, 1];
        assert_eq!(align_labels(&reference, &permuted, 3), reference);
    }

    proptest! {
        #[test]
        fn alpha_zero_is_bit_identical(z in matrix(6, 3, -3.0, 3.0), mu in matrix(3, 3, -3.0, 3.0), g in matrix(6, 3, -1.0, 1.0)) {
            let stats = stats_with_adjustment(g);
            prop_assert_eq!(fair_soft_assign(&z, &mu, &stats, 0.0).unwrap(), soft_assign(&z, &mu).unwrap());
        }

        #[test]
        fn constant_row_shift_of_adjustment_is_invisible(z in matrix(5, 2, -3.0, 3.0), mu in matrix(3, 2, -3.0, 3.0), g in matrix(5, 3, -1.0, 1.0), shift in prop::collection::vec(-5.0f64..5.0, 5)) {
            let mut shifted = g.clone();
            for (mut row, s) in shifted.outer_iter_mut().zip(&shift) {
                row.mapv_inplace(|v| v + s);
            }
            let a = fair_soft_assign(&z, &mu, &stats_with_adjustment(g), 1.5).unwrap();
            let b = fair_soft_assign(&z, &mu, &stats_with_adjustment(shifted), 1.5).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn one_hot_centroids_are_arithmetic_means(z in matrix(12, 3, -5.0, 5.0), labels in prop::collection::vec(0usize..3, 12)) {
            let mu = update_centroids(&one_hot(&labels, 3), &z).unwrap();
            for j in 0..3 {
                let members: Vec<usize> = (0..12).filter(|&i| labels[i] == j).collect();
                if members.is_empty() { continue; }
                for c in 0..3 {
                    let mean = members.iter().map(|&i| z[[i, c]]).sum::<f64>() / members.len() as f64;
                    prop_assert!((mu[[j, c]] - mean).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn hard_assign_rows_have_single_one(q in matrix(8, 4, 0.0, 1.0)) {
            let c = hard_assign(&q);
            for row in c.outer_iter() {
                prop_assert_eq!(row.sum(), 1.0);
            }
        }

        #[test]
        fn fairness_invariants(raw in matrix(10, 3, -4.0, 4.0), r in prop::collection::vec(0u8..2, 20)) {
            let q1 = row_softmax(&raw);
            let q2 = row_softmax(&raw.mapv(|v| v * 0.5 + 1.0));
            let r = Matrix::from_shape_fn((10, 2), |(i, c)| r[i * 2 + c] as f64);
            let s = fairness_stats(&[q1, q2], &r).unwrap();
            for c in 0..2 {
                prop_assert_eq!(s.dataset_mean[c], r.column(c).sum() / 10.0);
            }
            prop_assert!(s.cluster_means.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
            for i in 0..10 {
                for j in 0..3 {
                    let with: f64 = (0..2).map(|c| (s.cluster_means[[j, c]] - s.kappa[[i, j, c]] - s.dataset_mean[c]).powi(2)).sum::<f64>().sqrt();
                    let without: f64 = (0..2).map(|c| (s.cluster_means[[j, c]] - s.dataset_mean[c]).powi(2)).sum::<f64>().sqrt();
                    let g = s.adjustment[[i, j]];
                    if (with - without).abs() > 1e-9 {
                        prop_assert_eq!(g > 0.0, with > without);
                    }
                }
            }
        }

        #[test]
        fn lloyd_wcss_never_increases(pts in matrix(30, 2, -5.0, 5.0), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = kmeans_plus_plus(&pts, 3, &mut rng);
            let (_, _, trace) = lloyd(&pts, init, 100);
            prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }

        #[test]
        fn final_membership_rows_sum_to_one(z1 in matrix(7, 2, -3.0, 3.0), z2 in matrix(7, 2, -3.0, 3.0), mu in matrix(3, 2, -3.0, 3.0)) {
            let q = final_membership(&[z1, z2], &[mu.clone(), mu]).unwrap();
            prop_assert!(is_row_stochastic(&q, 1e-9));
        }
    }
}
