#![allow(dead_code)]

pub mod loss_fixture;
pub mod vmf_oracle;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use scene_ssl::cluster::{TokenField, ViewId};
use scene_ssl::depth::{pool_token_depth, DenseDepthMap, DepthProvenance};
use scene_ssl::synth::{make_view, CropBox, Scene, ViewConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut r in m.rows_mut() {
        let n: f64 = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

pub fn random_unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    unit_rows(Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng)))
}

/// A scene with a hand-made mask and depth; pixels are unused by fixtures.
pub fn painted_scene(mask: Array2<usize>, depth: Array2<f64>) -> Scene {
    let (h, w) = mask.dim();
    Scene {
        pixels: Array3::zeros((h, w, 1)),
        class_mask: mask,
        depth_map: depth,
        seed: 0,
        objects: vec![],
    }
}

pub fn random_crop(rng: &mut ChaCha8Rng, min_area: f64) -> CropBox {
    let side = rng.random_range(min_area..1.0f64).sqrt();
    let x0 = rng.random_range(0.0..=1.0 - side);
    let y0 = rng.random_range(0.0..=1.0 - side);
    CropBox {
        x0,
        y0,
        x1: x0 + side,
        y1: y0 + side,
    }
}

/// Token fields for two crops of `scene` whose features are the class mean
/// of each token's majority class plus isotropic noise. Returns the fields
/// and the ground-truth class of every joint token (view A first).
pub fn class_mean_fields(
    scene: &Scene,
    means: &Array2<f64>,
    noise: f64,
    crops: [CropBox; 2],
    seed: u64,
) -> (TokenField, TokenField, Vec<usize>) {
    let cfg = ViewConfig {
        output_size: 64,
        patch_size: 8,
        ..ViewConfig::default()
    };
    let mut rng = rng(seed ^ 0xfeed);
    let gt = DenseDepthMap::new(scene.depth_map.clone(), DepthProvenance::GroundTruth).unwrap();
    let mut truth = Vec::new();
    let mut fields = Vec::new();
    for (k, crop) in crops.into_iter().enumerate() {
        let view = make_view(scene, crop, false, &cfg).unwrap();
        let labels = view.token_labels(&scene.class_mask, means.nrows());
        let depths = pool_token_depth(&gt.in_view(&view), &view).unwrap();
        let d = means.ncols();
        let feats = Array2::from_shape_fn((labels.len(), d), |(i, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            means[[labels[i], j]] + noise * e
        });
        truth.extend(labels);
        let id = if k == 0 { ViewId::A } else { ViewId::B };
        fields.push(TokenField::new(unit_rows(feats), view.token_positions(), depths, id).unwrap());
    }
    let b = fields.pop().unwrap();
    let a = fields.pop().unwrap();
    (a, b, truth)
}

/// Background at 60 m with two same-looking regions: class 1 at 5 m on the
/// left and class 2 at 40 m on the right.
pub fn twin_scene() -> Scene {
    let mut mask = Array2::zeros((64, 64));
    let mut depth = Array2::from_elem((64, 64), 60.0);
    for r in 16..48 {
        for c in 4..28 {
            mask[[r, c]] = 1;
            depth[[r, c]] = 5.0;
        }
        for c in 36..60 {
            mask[[r, c]] = 2;
            depth[[r, c]] = 40.0;
        }
    }
    painted_scene(mask, depth)
}

/// Class means for the twin scene: background plus one shared twin mean.
pub fn twin_means(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let base = random_unit_rows(2, d, rng);
    ndarray::stack![Axis(0), base.row(0), base.row(1), base.row(1)]
}

/// Class 1 covers one ninth of the image, so areas are 8:1.
pub fn eight_to_one_scene() -> Scene {
    let mut mask = Array2::zeros((64, 64));
    for r in 0..21 {
        for c in 0..21 {
            mask[[r, c]] = 1;
        }
    }
    painted_scene(mask, Array2::from_elem((64, 64), 20.0))
}

/// Normalized entropy of the cluster-area distribution.
pub fn area_entropy(presence: &[[usize; 2]]) -> f64 {
    let n: usize = presence.iter().map(|p| p[0] + p[1]).sum();
    let h: f64 = presence
        .iter()
        .map(|p| (p[0] + p[1]) as f64 / n as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h / (presence.len() as f64).ln()
}

/// Central finite difference of `f` at `x` along every coordinate.
pub fn fd_grad(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let v = x[[r, c]];
        xp[[r, c]] = v + h;
        let fp = f(&xp);
        xp[[r, c]] = v - h;
        let fm = f(&xp);
        xp[[r, c]] = v;
        g[[r, c]] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error with a floor on the denominator so exact zeros
/// compare on an absolute scale.
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Upper tail of the chi-square distribution for even degrees of freedom.
pub fn chi_square_sf_even(x: f64, df: usize) -> f64 {
    assert!(df % 2 == 0 && df > 0);
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..df / 2 {
        term *= half / j as f64;
        sum += term;
    }
    (-half).exp() * sum
}

/// Spearman rank correlation (no tie correction needed for our inputs).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// All balanced hard assignments of `n` tokens to 2 clusters with `n/2`
/// each, as (cost, labels), cheapest first.
pub fn balanced_assignments(cost: &Array2<f64>) -> Vec<(f64, Vec<usize>)> {
    let n = cost.nrows();
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize * 2 != n {
            continue;
        }
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let c: f64 = labels.iter().enumerate().map(|(i, &l)| cost[[i, l]]).sum();
        out.push((c, labels));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Whether each joint token's patch holds a single class.
pub fn pure_tokens(scene: &Scene, crops: [CropBox; 2]) -> Vec<bool> {
    let cfg = ViewConfig {
        output_size: 64,
        patch_size: 8,
        ..ViewConfig::default()
    };
    let mut out = Vec::new();
    for crop in crops {
        let view = make_view(scene, crop, false, &cfg).unwrap();
        let mask = view.resample_nearest(&scene.class_mask);
        let (rows, cols) = view.token_grid;
        for i in 0..rows {
            for j in 0..cols {
                let patch = mask.slice(ndarray::s![i * 8..(i + 1) * 8, j * 8..(j + 1) * 8]);
                let first = patch[[0, 0]];
                out.push(patch.iter().all(|&c| c == first));
            }
        }
    }
    out
}
