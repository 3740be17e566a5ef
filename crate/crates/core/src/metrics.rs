//! Clustering quality and group-fairness metrics.

use log::warn;

use crate::diffengine::Matrix;
use crate::error::{Error, Result};

/// A hard clustering: `labels[i] < k` for every sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain(format!("label {bad} is out of range for k = {k}")));
        }
        Ok(Self { labels, k })
    }

    /// Uses `k = max label + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        Self::new(labels, k)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with the arithmetic-mean normalizer
/// `I(a; b) / ((H(a) + H(b)) / 2)`, natural logarithms.
pub fn nmi(pred: &Partition, truth: &Partition) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("nmi", (pred.len(), 1), (truth.len(), 1)));
    }
    let n = pred.len() as f64;
    let mut table = vec![vec![0usize; truth.k]; pred.k];
    for (&a, &b) in pred.labels.iter().zip(&truth.labels) {
        table[a][b] += 1;
    }
    let (sa, sb) = (pred.sizes(), truth.sizes());
    let (ha, hb) = (entropy(&sa, n), entropy(&sb, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (sa[i] as f64 * sb[j] as f64)).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Protected groups: value 1 and value 0 of every sensitive column.
fn groups(sensitive: &Matrix) -> Vec<(usize, f64)> {
    (0..sensitive.ncols()).flat_map(|c| [(c, 1.0), (c, 0.0)]).collect()
}

fn check_sensitive(pred: &Partition, sensitive: &Matrix) -> Result<()> {
    if sensitive.nrows() != pred.len() {
        return Err(Error::shape("balance", (pred.len(), 1), sensitive.dim()));
    }
    if sensitive.ncols() == 0 {
        return Err(Error::Domain("balance needs at least one sensitive column".into()));
    }
    if sensitive.iter().any(|&r| r != 0.0 && r != 1.0) {
        return Err(Error::Domain("sensitive entries must be 0 or 1".into()));
    }
    Ok(())
}

/// `min over clusters i and groups a of |C_i ∩ a| / |C_i|`. Empty clusters
/// are skipped with a warning.
pub fn balance(pred: &Partition, sensitive: &Matrix) -> Result<f64> {
    check_sensitive(pred, sensitive)?;
    let counts = group_counts(pred, sensitive)?;
    let sizes = pred.sizes();
    let empty = sizes.iter().filter(|&&s| s == 0).count();
    if empty > 0 {
        warn!("balance: {empty} of {} clusters are empty and were excluded", pred.k);
    }
    let mut best = f64::INFINITY;
    for (i, row) in counts.counts.iter().enumerate() {
        if sizes[i] == 0 {
            continue;
        }
        for &c in row {
            best = best.min(c as f64 / sizes[i] as f64);
        }
    }
    if best.is_infinite() {
        return Err(Error::Domain("every cluster is empty".into()));
    }
    Ok(best)
}

/// The largest balance any partition can reach: the smallest dataset-wide
/// group fraction.
pub fn balance_upper_bound(sensitive: &Matrix) -> Result<f64> {
    let n = sensitive.nrows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(groups(sensitive)
        .into_iter()
        .map(|(c, v)| sensitive.column(c).iter().filter(|&&r| r == v).count() as f64 / n as f64)
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCounts {
    /// Group names, `column=value`.
    pub groups: Vec<String>,
    /// `counts[cluster][group]`.
    pub counts: Vec<Vec<usize>>,
    /// Population standard deviation across clusters, per group.
    pub std: Vec<f64>,
}

/// Members of every protected group in every cluster.
pub fn group_counts(pred: &Partition, sensitive: &Matrix) -> Result<GroupCounts> {
    check_sensitive(pred, sensitive)?;
    let gs = groups(sensitive);
    let mut counts = vec![vec![0usize; gs.len()]; pred.k];
    for (i, &l) in pred.labels.iter().enumerate() {
        for (a, &(c, v)) in gs.iter().enumerate() {
            if sensitive[[i, c]] == v {
                counts[l][a] += 1;
            }
        }
    }
    let k = pred.k as f64;
    let std = (0..gs.len())
        .map(|a| {
            let mean = counts.iter().map(|r| r[a] as f64).sum::<f64>() / k;
            (counts.iter().map(|r| (r[a] as f64 - mean).powi(2)).sum::<f64>() / k).sqrt()
        })
        .collect();
    Ok(GroupCounts {
        groups: gs.iter().map(|&(c, v)| format!("s{c}={v}")).collect(),
        counts,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p(labels: &[usize]) -> Partition {
        Partition::from_labels(labels.to_vec()).unwrap()
    }

    fn col(values: &[f64]) -> Matrix {
        Matrix::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
    }

    /// Mutual information and entropies from joint probabilities, with no
    /// shortcuts.
    fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let ka = a.iter().max().unwrap() + 1;
        let kb = b.iter().max().unwrap() + 1;
        let mut mi = 0.0;
        let mut ha = 0.0;
        let mut hb = 0.0;
        for i in 0..ka {
            let pi = a.iter().filter(|&&x| x == i).count() as f64 / n;
            if pi > 0.0 {
                ha -= pi * pi.ln();
            }
            for j in 0..kb {
                let pj = b.iter().filter(|&&x| x == j).count() as f64 / n;
                let pij = a.iter().zip(b).filter(|&(&x, &y)| x == i && y == j).count() as f64 / n;
                if pij > 0.0 {
                    mi += pij * (pij / (pi * pj)).ln();
                }
            }
        }
        for j in 0..kb {
            let pj = b.iter().filter(|&&x| x == j).count() as f64 / n;
            if pj > 0.0 {
                hb -= pj * pj.ln();
            }
        }
        if ha == 0.0 && hb == 0.0 {
            1.0
        } else if ha == 0.0 || hb == 0.0 {
            0.0
        } else {
            mi / ((ha + hb) / 2.0)
        }
    }

    fn labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
        (0..k.pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let l = code % k;
                        code /= k;
                        l
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn nmi_examples() {
        let t = p(&[0, 0, 1, 1, 2]);
        assert_abs_diff_eq!(nmi(&t, &t).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nmi(&p(&[2, 2, 0, 0, 1]), &t).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(nmi(&p(&[0, 0, 1, 1]), &p(&[0, 1, 0, 1])).unwrap(), 0.0);
        assert_eq!(nmi(&p(&[0, 0, 0]), &p(&[1, 1, 1])).unwrap(), 1.0);
        assert_eq!(nmi(&p(&[0, 0, 0]), &p(&[0, 1, 1])).unwrap(), 0.0);
        assert!(nmi(&p(&[0, 1]), &p(&[0, 1, 1])).is_err());
    }

    #[test]
    fn nmi_matches_oracle_exhaustively_small() {
        for n in 1..=4 {
            for k in 1..=3 {
                let all = labelings(n, k);
                for a in &all {
                    for b in &all {
                        let got = nmi(&p(a), &p(b)).unwrap();
                        assert!((got - nmi_oracle(a, b)).abs() <= 1e-12, "{a:?} {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn balance_examples() {
        let r = col(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(balance(&p(&[0, 0, 1, 1]), &r).unwrap(), 0.5);
        assert_eq!(balance(&p(&[0, 1, 0, 1]), &r).unwrap(), 0.0);
        let with_empty = Partition::new(vec![0, 0, 2, 2], 3).unwrap();
        assert_eq!(balance(&with_empty, &r).unwrap(), 0.5);
        assert!(balance(&p(&[0, 1]), &r).is_err());
        assert!(balance(&p(&[0, 1]), &col(&[0.5, 1.0])).is_err());
        assert_abs_diff_eq!(balance_upper_bound(&col(&[1.0, 1.0, 1.0, 0.0])).unwrap(), 0.25);
    }

    #[test]
    fn group_count_examples() {
        let r = col(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let part = p(&[0, 0, 0, 1, 2, 2, 1, 2]);
        let gc = group_counts(&part, &r).unwrap();
        assert_eq!(gc.groups, vec!["s0=1", "s0=0"]);
        assert_eq!(gc.counts, vec![vec![3, 0], vec![1, 1], vec![2, 1]]);
        assert_abs_diff_eq!(gc.std[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(gc.std[0], 0.8165, epsilon = 1e-4);
        for a in 0..2 {
            let total: usize = gc.counts.iter().map(|r| r[a]).sum();
            let expected = r.iter().filter(|&&v| v == if a == 0 { 1.0 } else { 0.0 }).count();
            assert_eq!(total, expected);
        }
        let even = group_counts(&p(&[0, 1, 0, 1]), &col(&[1.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(even.std, vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn nmi_symmetric_and_label_invariant(
            (a, b) in (1usize..30).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..4, n))),
            shift in 1usize..4,
        ) {
            let (pa, pb) = (p(&a), p(&b));
            let ab = nmi(&pa, &pb).unwrap();
            prop_assert!((ab - nmi(&pb, &pa).unwrap()).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let relabeled: Vec<usize> = a.iter().map(|&l| (l + shift) % 4).collect();
            prop_assert!((nmi(&p(&relabeled), &pb).unwrap() - ab).abs() <= 1e-12);
        }

        #[test]
        fn balance_invariant_and_bounded(
            (labels, r) in (2usize..30).prop_flat_map(|n| (prop::collection::vec(0usize..3, n), prop::collection::vec(prop::bool::ANY, n))),
        ) {
            let r = col(&r.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>());
            let part = p(&labels);
            let b = balance(&part, &r).unwrap();
            prop_assert!(b <= balance_upper_bound(&r).unwrap() + 1e-15);
            let flipped = r.mapv(|v| 1.0 - v);
            prop_assert_eq!(balance(&part, &flipped).unwrap(), b);
            let relabeled: Vec<usize> = labels.iter().map(|&l| 2 - l).collect();
            prop_assert_eq!(balance(&Partition::new(relabeled, 3).unwrap(), &r).unwrap(), b);
        }
    }
}
