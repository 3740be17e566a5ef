//! Datasets, view synthesis, the synthetic Zafar-style generator and the
//! missing/noisy feature perturbations.
//!
//! All randomness comes from [`PortableRng`]: ChaCha8 seeded with
//! `ChaCha8Rng::seed_from_u64(seed)`. Uniforms are `(next_u64 >> 11) · 2⁻⁵³`
//! (the `rand` 0.8 `f64` conversion), and standard normals use the cosine
//! branch of Box–Muller on two consecutive uniforms,
//! `sqrt(−2 ln(1 − u₁)) · cos(2π u₂)`. Any reimplementation of those three
//! steps reproduces masks and noise bit-exactly for a given seed.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffengine::{sigmoid, Matrix};
use crate::error::{Error, Result};

/// Seedable generator with a fixed, documented output stream.
#[derive(Debug, Clone)]
pub struct PortableRng(ChaCha8Rng);

impl PortableRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    /// One n × d_v matrix per view.
    pub views: Vec<Matrix>,
    /// n × d_r matrix with entries in {0, 1}.
    pub sensitive: Matrix,
    /// Ground truth, for evaluation only.
    pub labels: Option<Vec<usize>>,
    pub sensitive_names: Vec<String>,
}

impl MultiViewDataset {
    pub fn new(views: Vec<Matrix>, sensitive: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        let names = (0..sensitive.ncols()).map(|c| format!("s{c}")).collect();
        let ds = Self {
            views,
            sensitive,
            labels,
            sensitive_names: names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.sensitive.nrows()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.ncols()).collect()
    }

    pub fn sensitive_dim(&self) -> usize {
        self.sensitive.ncols()
    }

    /// Number of distinct ground-truth classes, if labels are present.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sensitive.nrows();
        for v in &self.views {
            if v.nrows() != n {
                return Err(Error::shape("dataset", v.dim(), self.sensitive.dim()));
            }
        }
        if self.sensitive.iter().any(|&r| r != 0.0 && r != 1.0) {
            return Err(Error::Domain("sensitive entries must be 0 or 1".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::shape("dataset labels", (labels.len(), 1), (n, 1)));
            }
        }
        Ok(())
    }

    /// Writes views, sensitive columns and labels as comma-separated text.
    /// Values use the shortest representation that parses back exactly.
    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = Vec::new();
        for (v, x) in self.views.iter().enumerate() {
            header.extend((0..x.ncols()).map(|c| format!("x{v}_{c}")));
        }
        header.extend(self.sensitive_names.iter().map(|s| format!("s:{s}")));
        if self.labels.is_some() {
            header.push("label".into());
        }
        let csv_err = |e: csv::Error| Error::io(path, e.into());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            for x in &self.views {
                row.extend(x.row(i).iter().map(|v| v.to_string()));
            }
            row.extend(self.sensitive.row(i).iter().map(|v| v.to_string()));
            if let Some(l) = &self.labels {
                row.push(l[i].to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a file written by [`MultiViewDataset::save_text`].
    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = open_csv(path)?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| Error::io(path, e.into()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut view_cols: Vec<Vec<usize>> = Vec::new();
        let mut sens_cols = Vec::new();
        let mut names = Vec::new();
        let mut label_col = None;
        for (c, h) in header.iter().enumerate() {
            if let Some(rest) = h.strip_prefix('x') {
                let v: usize = rest
                    .split('_')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::UnknownColumn(h.clone()))?;
                if view_cols.len() <= v {
                    view_cols.resize(v + 1, Vec::new());
                }
                view_cols[v].push(c);
            } else if let Some(name) = h.strip_prefix("s:") {
                sens_cols.push(c);
                names.push(name.to_string());
            } else if h == "label" {
                label_col = Some(c);
            } else {
                return Err(Error::UnknownColumn(h.clone()));
            }
        }
        let rows = read_records(&mut r, path)?;
        let n = rows.len();
        let cell = |i: usize, c: usize| -> Result<f64> { parse_cell(&rows[i][c], i, &header[c]) };
        let mut views = Vec::new();
        for cols in &view_cols {
            let mut x = Matrix::zeros((n, cols.len()));
            for i in 0..n {
                for (j, &c) in cols.iter().enumerate() {
                    x[[i, j]] = cell(i, c)?;
                }
            }
            views.push(x);
        }
        let mut s = Matrix::zeros((n, sens_cols.len()));
        for i in 0..n {
            for (j, &c) in sens_cols.iter().enumerate() {
                s[[i, j]] = cell(i, c)?;
            }
        }
        let labels = match label_col {
            Some(c) => Some(
                (0..n)
                    .map(|i| {
                        rows[i][c].trim().parse::<usize>().map_err(|e| Error::Parse {
                            row: i + 2,
                            column: "label".into(),
                            message: e.to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let ds = Self {
            views,
            sensitive: s,
            labels,
            sensitive_names: names,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn read_records(r: &mut csv::Reader<File>, path: &Path) -> Result<Vec<csv::StringRecord>> {
    r.records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::io(path, e.into()))
}

/// `row` is the zero-based data row; errors report the 1-based file line.
fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        row: row + 2,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbKind {
    Missing,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub p: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "perturbation fraction must be in [0, 1], got {p}"
            )));
        }
        Ok(Self { kind, p, seed })
    }

    pub fn apply(&self, ds: &MultiViewDataset) -> Result<MultiViewDataset> {
        match self.kind {
            PerturbKind::Missing => mask_features(ds, self),
            PerturbKind::Noise => add_noise(ds, self),
        }
    }
}

/// Loads a header-led comma-separated table into a single raw view.
///
/// Sensitive columns are binarized: distinct raw values are sorted
/// lexicographically, the first maps to 0 and the second to 1; columns with
/// more than two values become one column per value. Label values are mapped
/// to `0..k` in lexicographic order.
pub fn load_table(
    path: impl AsRef<Path>,
    sensitive_columns: &[&str],
    label_column: Option<&str>,
) -> Result<MultiViewDataset> {
    let path = path.as_ref();
    let mut r = open_csv(path)?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::io(path, e.into()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let sens_idx: Vec<usize> = sensitive_columns.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let label_idx = label_column.map(find).transpose()?;
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|c| !sens_idx.contains(c) && Some(*c) != label_idx)
        .collect();

    let rows = read_records(&mut r, path)?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }

    let mut x = Matrix::zeros((n, feature_idx.len()));
    for (i, rec) in rows.iter().enumerate() {
        for (j, &c) in feature_idx.iter().enumerate() {
            x[[i, j]] = parse_cell(rec.get(c).unwrap_or(""), i, &header[c])?;
        }
    }

    let mut sens_cols: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for &c in &sens_idx {
        let values: Vec<&str> = rows.iter().map(|rec| rec.get(c).unwrap_or("")).collect();
        let distinct: Vec<&str> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if distinct.len() <= 2 {
            let one = distinct.get(1).copied();
            sens_cols.push(values.iter().map(|v| f64::from(Some(*v) == one)).collect());
            names.push(header[c].clone());
        } else {
            for d in &distinct {
                sens_cols.push(values.iter().map(|v| f64::from(v == d)).collect());
                names.push(format!("{}={}", header[c], d));
            }
        }
    }
    let sensitive = Matrix::from_shape_fn((n, sens_cols.len()), |(i, j)| sens_cols[j][i]);

    let labels = label_idx.map(|c| {
        let values: Vec<&str> = rows.iter().map(|rec| rec.get(c).unwrap_or("")).collect();
        let distinct: Vec<&str> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        values
            .iter()
            .map(|v| distinct.binary_search(v).expect("value is present"))
            .collect()
    });

    let ds = MultiViewDataset {
        views: vec![x],
        sensitive,
        labels,
        sensitive_names: names,
    };
    ds.validate()?;
    Ok(ds)
}

/// Zero-mean, unit population variance per feature column. Columns whose
/// standard deviation is below `1e-12 · max(1, |mean|)` become all zeros.
pub fn standardize(ds: &MultiViewDataset) -> Result<MultiViewDataset> {
    let n = ds.n();
    if n < 2 {
        return Err(Error::Domain(format!("standardize needs n ≥ 2, got {n}")));
    }
    let mut out = ds.clone();
    for x in &mut out.views {
        for mut col in x.columns_mut() {
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd <= 1e-12 * mean.abs().max(1.0) {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - mean) / sd);
            }
        }
    }
    Ok(out)
}

/// Replaces the single raw view by a sigmoid view and a relu view.
pub fn make_views(ds: &MultiViewDataset) -> Result<MultiViewDataset> {
    if ds.views.len() != 1 {
        return Err(Error::Contract(format!(
            "view synthesis expects one raw view, found {}",
            ds.views.len()
        )));
    }
    let raw = &ds.views[0];
    let mut out = ds.clone();
    out.views = vec![raw.mapv(sigmoid), raw.mapv(|v| v.max(0.0))];
    Ok(out)
}

/// Generator settings for the synthetic two-class set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZafarConfig {
    pub mean: [[f64; 2]; 2],
    pub cov: [[[f64; 2]; 2]; 2],
    /// P(r = 1 | class).
    pub sensitive_rate: [f64; 2],
}

impl Default for ZafarConfig {
    fn default() -> Self {
        Self {
            mean: [[2.0, 2.0], [-2.0, -2.0]],
            cov: [[[5.0, 1.0], [1.0, 5.0]], [[10.0, 1.0], [1.0, 3.0]]],
            sensitive_rate: [0.8, 0.3],
        }
    }
}

impl ZafarConfig {
    /// Expected fraction of samples with r = 1 under an even class split.
    pub fn sensitive_mixture(&self) -> f64 {
        0.5 * (self.sensitive_rate[0] + self.sensitive_rate[1])
    }
}

/// Raw (single view, unstandardized) synthetic data: `n / 2` samples of class
/// 0 followed by the rest of class 1.
pub fn generate_zafar_raw(n: usize, seed: u64, cfg: &ZafarConfig) -> Result<MultiViewDataset> {
    if n < 4 {
        return Err(Error::Domain(format!("synthetic set needs n ≥ 4, got {n}")));
    }
    let mut rng = PortableRng::new(seed);
    let mut x = Matrix::zeros((n, 2));
    let mut r = Matrix::zeros((n, 1));
    let mut labels = Vec::with_capacity(n);
    let chol: Vec<[f64; 3]> = cfg
        .cov
        .iter()
        .map(|c| {
            let l00 = c[0][0].sqrt();
            let l10 = c[1][0] / l00;
            let l11 = (c[1][1] - l10 * l10).sqrt();
            [l00, l10, l11]
        })
        .collect();
    for i in 0..n {
        let class = usize::from(i >= n / 2);
        let (e0, e1) = (rng.standard_normal(), rng.standard_normal());
        let [l00, l10, l11] = chol[class];
        x[[i, 0]] = cfg.mean[class][0] + l00 * e0;
        x[[i, 1]] = cfg.mean[class][1] + l10 * e0 + l11 * e1;
        r[[i, 0]] = f64::from(rng.bernoulli(cfg.sensitive_rate[class]));
        labels.push(class);
    }
    let mut ds = MultiViewDataset::new(vec![x], r, Some(labels))?;
    ds.sensitive_names = vec!["group".into()];
    Ok(ds)
}

/// Two-view synthetic set: raw data, standardized, then sigmoid/relu views.
pub fn generate_zafar(n: usize, seed: u64) -> Result<MultiViewDataset> {
    make_views(&standardize(&generate_zafar_raw(n, seed, &ZafarConfig::default())?)?)
}

/// Zeroes each feature cell of every view independently with probability p.
pub fn mask_features(ds: &MultiViewDataset, spec: &PerturbSpec) -> Result<MultiViewDataset> {
    if spec.kind != PerturbKind::Missing {
        return Err(Error::Contract("mask_features needs a `missing` spec".into()));
    }
    let mut rng = PortableRng::new(spec.seed);
    let mut out = ds.clone();
    for x in &mut out.views {
        for v in x.iter_mut() {
            if rng.bernoulli(spec.p) {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Selects each sample with probability p and adds independent N(0, 1) noise
/// to all of its features in every view.
pub fn add_noise(ds: &MultiViewDataset, spec: &PerturbSpec) -> Result<MultiViewDataset> {
    if spec.kind != PerturbKind::Noise {
        return Err(Error::Contract("add_noise needs a `noise` spec".into()));
    }
    let mut rng = PortableRng::new(spec.seed);
    let mut out = ds.clone();
    for i in 0..ds.n() {
        if rng.bernoulli(spec.p) {
            for x in &mut out.views {
                for v in x.row_mut(i).iter_mut() {
                    *v += rng.standard_normal();
                }
            }
        }
    }
    Ok(out)
}
