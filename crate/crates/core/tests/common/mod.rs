#![allow(dead_code)]

use fairmvc::data::{MultiViewDataset, PortableRng};
use fairmvc::diffengine::Matrix;

/// Two Gaussian blobs at ±`sep` per coordinate with unit noise. View 0 is
/// 2-D, view 1 is 3-D and mirrored at 0.7·`sep`. The binary sensitive column
/// is independent of the blobs.
pub fn blobs(n: usize, sep: f64, seed: u64) -> MultiViewDataset {
    let mut rng = PortableRng::new(seed);
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    let centre = |i: usize| if labels[i] == 0 { sep } else { -sep };
    let v0 = Matrix::from_shape_fn((n, 2), |(i, _)| centre(i) + rng.standard_normal());
    let v1 = Matrix::from_shape_fn((n, 3), |(i, _)| -0.7 * centre(i) + rng.standard_normal());
    let r = Matrix::from_shape_fn((n, 1), |_| f64::from(u8::from(rng.bernoulli(0.5))));
    MultiViewDataset::new(vec![v0, v1], r, Some(labels)).unwrap()
}
