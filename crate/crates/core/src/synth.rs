//! Reproducible synthetic scenes with long-tailed class frequencies,
//! layered flat-depth objects, paired crops and emulated sparse depth.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{ArrayBundle, ArrayData};

const MODULE: &str = "synth_scenes";

/// Class id reserved for the background.
pub const BACKGROUND: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Pixels per side (square images).
    pub image_size: usize,
    /// Number of class ids including the background.
    pub num_classes: usize,
    /// Power-law exponent of object class frequencies.
    pub class_frequency_exponent: f64,
    /// Explicit object class frequencies; overrides the power law when set.
    pub class_frequencies: Option<Vec<f64>>,
    /// Object side as a fraction of the image side, `(min, max)`.
    pub size_range: (f64, f64),
    /// `(near, far)` in meters; the background sits at `far`.
    pub depth_range: (f64, f64),
    pub objects_per_scene: (usize, usize),
    pub texture_noise_std: f64,
    pub channels: usize,
    /// Two object classes painted with the same mean color, one kept near
    /// and one kept far.
    pub visual_twins: Option<(usize, usize)>,
    /// Seed of the class-mean palette; shared by every scene of a dataset.
    pub palette_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            num_classes: 8,
            class_frequency_exponent: 1.0,
            class_frequencies: None,
            size_range: (0.15, 0.45),
            depth_range: (3.0, 60.0),
            objects_per_scene: (2, 6),
            texture_noise_std: 0.3,
            channels: 3,
            visual_twins: Some((1, 2)),
            palette_seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (near, far) = self.depth_range;
        let (smin, smax) = self.size_range;
        let fail = |m: String| Err(Error::invalid(MODULE, m));
        if self.image_size == 0 || self.channels == 0 {
            return fail("image size and channels must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!("num_classes must be in [2, 256], got {}", self.num_classes));
        }
        if !(self.class_frequency_exponent >= 0.0) {
            return fail("class frequency exponent must be >= 0".into());
        }
        if !(near > 0.0 && near < far && far.is_finite()) {
            return fail(format!("depth range must satisfy 0 < near < far, got {near}..{far}"));
        }
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return fail(format!("size range must satisfy 0 < min <= max <= 1, got {smin}..{smax}"));
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return fail("objects_per_scene min exceeds max".into());
        }
        if !(self.texture_noise_std >= 0.0) {
            return fail("texture noise std must be >= 0".into());
        }
        if let Some(freqs) = &self.class_frequencies {
            if freqs.len() != self.num_classes - 1 || freqs.iter().any(|&f| !(f >= 0.0)) || freqs.iter().sum::<f64>() <= 0.0 {
                return fail("class_frequencies must give one nonnegative weight per object class".into());
            }
        }
        if let Some((a, b)) = self.visual_twins {
            if a == b || a == BACKGROUND || b == BACKGROUND || a >= self.num_classes || b >= self.num_classes {
                return fail(format!("invalid visual twin classes ({a}, {b})"));
            }
        }
        Ok(())
    }

    /// Frequencies of the object classes `1..num_classes`, summing to 1.
    /// The power law is `f ∝ (rank + 1)^(-exponent)` with rank 0 for class 1.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let raw: Vec<f64> = match &self.class_frequencies {
            Some(f) => f.clone(),
            None => (0..self.num_classes - 1)
                .map(|rank| ((rank + 1) as f64).powf(-self.class_frequency_exponent))
                .collect(),
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|f| f / total).collect()
    }

    /// Class-conditional mean colors, `num_classes x channels`.
    pub fn palette(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.palette_seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut pal = Array2::from_shape_fn((self.num_classes, self.channels), |_| normal.sample(&mut rng));
        if let Some((a, b)) = self.visual_twins {
            let shared = pal.row(a).to_owned();
            pal.row_mut(b).assign(&shared);
        }
        pal
    }

    fn depth_bounds(&self, class: usize) -> (f64, f64) {
        let (near, far) = self.depth_range;
        let span = far - near;
        match self.visual_twins {
            Some((a, _)) if class == a => (near, near + 0.2 * span),
            Some((_, b)) if class == b => (near + 0.6 * span, near + 0.95 * span),
            _ => (near, near + 0.95 * span),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub depth: f64,
    pub shape: Shape,
    /// Pixel bounds `(row0, col0, row1, col1)`, half-open.
    pub bounds: (usize, usize, usize, usize),
}

impl SceneObject {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r0, c0, r1, c1) = self.bounds;
        if row < r0 || row >= r1 || col < c0 || col >= c1 {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let cy = (r0 + r1) as f64 / 2.0;
                let cx = (c0 + c1) as f64 / 2.0;
                let ry = (r1 - r0) as f64 / 2.0;
                let rx = (c1 - c0) as f64 / 2.0;
                let dy = (row as f64 + 0.5 - cy) / ry;
                let dx = (col as f64 + 0.5 - cx) / rx;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `H x W x C`.
    pub pixels: Array3<f64>,
    pub class_mask: Array2<usize>,
    /// Meters.
    pub depth_map: Array2<f64>,
    pub seed: u64,
    /// Painted objects, far to near.
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.class_mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.class_mask.ncols()
    }
}

fn sample_class(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random();
    let idx = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
    idx + 1
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.image_size;
    let (near, far) = config.depth_range;
    let freqs = config.class_frequencies();
    let cumulative: Vec<f64> = freqs
        .iter()
        .scan(0.0, |acc, &f| {
            *acc += f;
            Some(*acc)
        })
        .collect();

    let count = rng.random_range(config.objects_per_scene.0..=config.objects_per_scene.1);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = sample_class(&mut rng, &cumulative);
        let (dlo, dhi) = config.depth_bounds(class);
        let depth = rng.random_range(dlo..dhi).clamp(near, far);
        let side = |rng: &mut ChaCha8Rng| {
            let f = rng.random_range(config.size_range.0..=config.size_range.1);
            ((f * n as f64).round() as usize).clamp(1, n)
        };
        let (h, w) = (side(&mut rng), side(&mut rng));
        let r0 = rng.random_range(0..=n - h);
        let c0 = rng.random_range(0..=n - w);
        let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
        objects.push(SceneObject {
            class,
            depth,
            shape,
            bounds: (r0, c0, r0 + h, c0 + w),
        });
    }
    // far first, so nearer objects are painted over them
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut class_mask = Array2::from_elem((n, n), BACKGROUND);
    let mut depth_map = Array2::from_elem((n, n), far);
    for obj in &objects {
        let (r0, c0, r1, c1) = obj.bounds;
        for r in r0..r1 {
            for c in c0..c1 {
                if obj.contains(r, c) {
                    class_mask[[r, c]] = obj.class;
                    depth_map[[r, c]] = obj.depth;
                }
            }
        }
    }

    let palette = config.palette();
    let noise = Normal::new(0.0, config.texture_noise_std.max(0.0)).expect("finite std");
    let mut pixels = Array3::zeros((n, n, config.channels));
    for r in 0..n {
        for c in 0..n {
            let class = class_mask[[r, c]];
            for ch in 0..config.channels {
                let eps = if config.texture_noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels[[r, c, ch]] = palette[[class, ch]] + eps;
            }
        }
    }

    Ok(Scene {
        pixels,
        class_mask,
        depth_map,
        seed,
        objects,
    })
}

/// Crop in normalized source-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropBox {
    pub const FULL: CropBox = CropBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    /// Side of the resampled view in pixels.
    pub output_size: usize,
    pub patch_size: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub allow_flip: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            output_size: 64,
            patch_size: 8,
            min_scale: 0.25,
            max_scale: 1.0,
            allow_flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `h x w x C`.
    pub pixels: Array3<f64>,
    pub crop_box: CropBox,
    /// Horizontal flip applied after cropping.
    pub flip: bool,
    pub token_grid: (usize, usize),
    pub patch_size: usize,
}

impl View {
    pub fn size(&self) -> (usize, usize) {
        (self.pixels.dim().0, self.pixels.dim().1)
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    /// Maps normalized view coordinates `(u, v)` to normalized source
    /// coordinates `(x, y)`.
    pub fn to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let u = if self.flip { 1.0 - u } else { u };
        let b = self.crop_box;
        (b.x0 + u * (b.x1 - b.x0), b.y0 + v * (b.y1 - b.y0))
    }

    /// Source-image position of every token center, row-major.
    pub fn token_positions(&self) -> Vec<(f64, f64)> {
        let (rows, cols) = self.token_grid;
        (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| self.to_source((j as f64 + 0.5) / cols as f64, (i as f64 + 0.5) / rows as f64))
            .collect()
    }

    /// Nearest-neighbour resampling of a source-resolution field into this
    /// view's pixel grid.
    pub fn resample_nearest<T: Copy>(&self, field: &Array2<T>) -> Array2<T> {
        let (h, w) = self.size();
        let (sh, sw) = field.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (x, y) = self.to_source((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
            let sr = ((y * sh as f64).floor() as usize).min(sh - 1);
            let sc = ((x * sw as f64).floor() as usize).min(sw - 1);
            field[[sr, sc]]
        })
    }

    /// Ground-truth class per token: the most frequent class inside each
    /// patch, ties broken toward the smaller id.
    pub fn token_labels(&self, scene_mask: &Array2<usize>, num_classes: usize) -> Vec<usize> {
        let mask = self.resample_nearest(scene_mask);
        token_majority(&mask, self.patch_size, num_classes)
    }
}

pub fn token_majority(mask: &Array2<usize>, patch: usize, num_classes: usize) -> Vec<usize> {
    let (h, w) = mask.dim();
    let (rows, cols) = (h / patch, w / patch);
    let mut labels = Vec::with_capacity(rows * cols);
    let mut counts = vec![0usize; num_classes];
    for i in 0..rows {
        for j in 0..cols {
            counts.iter_mut().for_each(|c| *c = 0);
            for r in i * patch..(i + 1) * patch {
                for c in j * patch..(j + 1) * patch {
                    counts[mask[[r, c]]] += 1;
                }
            }
            let best = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap_or(BACKGROUND);
            labels.push(best);
        }
    }
    labels
}

fn bilinear(pixels: &Array3<f64>, x: f64, y: f64, out: &mut [f64]) {
    let (h, w, ch) = pixels.dim();
    let px = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (c0, r0) = (px.floor() as usize, py.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
    let (fx, fy) = (px - c0 as f64, py - r0 as f64);
    for (k, o) in out.iter_mut().enumerate().take(ch) {
        let top = pixels[[r0, c0, k]] * (1.0 - fx) + pixels[[r0, c1, k]] * fx;
        let bot = pixels[[r1, c0, k]] * (1.0 - fx) + pixels[[r1, c1, k]] * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
}

/// Builds a view from an explicit crop; the crop is resampled bilinearly.
pub fn make_view(scene: &Scene, crop_box: CropBox, flip: bool, config: &ViewConfig) -> Result<View> {
    let b = crop_box;
    if !(0.0 <= b.x0 && b.x0 < b.x1 && b.x1 <= 1.0 && 0.0 <= b.y0 && b.y0 < b.y1 && b.y1 <= 1.0) {
        return Err(Error::invalid(MODULE, format!("crop box out of range: {b:?}")));
    }
    let s = config.output_size;
    if config.patch_size == 0 || s % config.patch_size != 0 {
        return Err(Error::invalid(MODULE, "patch size must divide the view size"));
    }
    let ch = scene.pixels.dim().2;
    let mut view = View {
        pixels: Array3::zeros((s, s, ch)),
        crop_box,
        flip,
        token_grid: (s / config.patch_size, s / config.patch_size),
        patch_size: config.patch_size,
    };
    let mut buf = vec![0.0; ch];
    for r in 0..s {
        for c in 0..s {
            let (x, y) = view.to_source((c as f64 + 0.5) / s as f64, (r as f64 + 0.5) / s as f64);
            bilinear(&scene.pixels, x, y, &mut buf);
            for k in 0..ch {
                view.pixels[[r, c, k]] = buf[k];
            }
        }
    }
    Ok(view)
}

/// Two independent square crops with area fraction in
/// `[min_scale, max_scale]`, each optionally flipped.
pub fn sample_views(scene: &Scene, config: &ViewConfig, seed: u64) -> Result<(View, View)> {
    let (lo, hi) = (config.min_scale, config.max_scale);
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(MODULE, format!("crop scales must satisfy 0 < min <= max <= 1, got {lo}..{hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = |rng: &mut ChaCha8Rng| -> Result<View> {
        let area = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let side = area.sqrt();
        let x0 = if side >= 1.0 { 0.0 } else { rng.random_range(0.0..=1.0 - side) };
        let y0 = if side >= 1.0 { 0.0 } else { rng.random_range(0.0..=1.0 - side) };
        let flip = config.allow_flip && rng.random_bool(0.5);
        let crop = CropBox {
            x0,
            y0,
            x1: (x0 + side).min(1.0),
            y1: (y0 + side).min(1.0),
        };
        make_view(scene, crop, flip, config)
    };
    let a = one(&mut rng)?;
    let b = one(&mut rng)?;
    Ok((a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparsePattern {
    Uniform,
    /// Samples only rows `r` with `r % row_step == 0`, like LiDAR sweeps.
    Scanline { row_step: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    /// `(row, col)`, unique, row-major sorted.
    pub coords: Vec<(usize, usize)>,
    /// Meters, aligned with `coords`.
    pub values: Vec<f64>,
    pub shape: (usize, usize),
}

impl SparseDepthMap {
    pub fn new(coords: Vec<(usize, usize)>, values: Vec<f64>, shape: (usize, usize)) -> Result<Self> {
        if coords.len() != values.len() {
            return Err(Error::invalid(MODULE, "coords and values differ in length"));
        }
        let mut seen = std::collections::HashSet::with_capacity(coords.len());
        for &(r, c) in &coords {
            if r >= shape.0 || c >= shape.1 || !seen.insert((r, c)) {
                return Err(Error::invalid(MODULE, format!("sparse coord ({r}, {c}) repeated or out of bounds")));
            }
        }
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(MODULE, "sparse depths must be finite and > 0"));
        }
        Ok(SparseDepthMap { coords, values, shape })
    }

    pub fn fill_fraction(&self) -> f64 {
        self.coords.len() as f64 / (self.shape.0 * self.shape.1) as f64
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Retains exactly `round(fill_fraction * H * W)` ground-truth depths.
pub fn sample_sparse_depth(scene: &Scene, fill_fraction: f64, pattern: SparsePattern, seed: u64) -> Result<SparseDepthMap> {
    sample_sparse_from(&scene.depth_map, fill_fraction, pattern, seed)
}

pub fn sample_sparse_from(depth: &Array2<f64>, fill_fraction: f64, pattern: SparsePattern, seed: u64) -> Result<SparseDepthMap> {
    if !(fill_fraction > 0.0 && fill_fraction <= 1.0) {
        return Err(Error::invalid(MODULE, format!("fill fraction must be in (0, 1], got {fill_fraction}")));
    }
    let (h, w) = depth.dim();
    let wanted = (fill_fraction * (h * w) as f64).round() as usize;
    let candidates: Vec<(usize, usize)> = match pattern {
        SparsePattern::Uniform => (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect(),
        SparsePattern::Scanline { row_step } => {
            if row_step == 0 {
                return Err(Error::invalid(MODULE, "scanline row step must be >= 1"));
            }
            (0..h)
                .filter(|r| r % row_step == 0)
                .flat_map(|r| (0..w).map(move |c| (r, c)))
                .collect()
        }
    };
    if wanted > candidates.len() {
        return Err(Error::invalid(
            MODULE,
            format!("{wanted} samples requested but the pattern offers {}", candidates.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), wanted).into_vec();
    picked.sort_unstable();
    let coords: Vec<(usize, usize)> = picked.into_iter().map(|i| candidates[i]).collect();
    let values = coords.iter().map(|&(r, c)| depth[[r, c]]).collect();
    SparseDepthMap::new(coords, values, (h, w))
}

/// Per-class object counts over many scenes (background excluded); index 0
/// is class 1.
pub fn object_class_histogram(config: &SceneConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Array1<f64>> {
    let mut hist = Array1::zeros(config.num_classes - 1);
    for seed in seeds {
        for obj in generate_scene(config, seed)?.objects {
            hist[obj.class - 1] += 1.0;
        }
    }
    Ok(hist)
}

impl Scene {
    /// Writes the scene as an array directory (`pixels`, `class_mask`,
    /// `depth_map`) with the seed in the header.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (h, w, c) = self.pixels.dim();
        ArrayBundle::default()
            .with_meta("kind", "scene")
            .with_meta("seed", self.seed)
            .with_array("pixels", &[h, w, c], ArrayData::F64(self.pixels.iter().copied().collect()))
            .with_array("class_mask", &[h, w], ArrayData::U16(self.class_mask.iter().map(|&v| v as u16).collect()))
            .with_array("depth_map", &[h, w], ArrayData::F64(self.depth_map.iter().copied().collect()))
            .write(dir)
    }

    /// Loads a saved scene. Object metadata is not stored, so `objects` is empty.
    pub fn load(dir: &Path) -> Result<Scene> {
        let b = ArrayBundle::read(dir)?;
        let seed = b
            .meta("seed")?
            .parse()
            .map_err(|_| Error::format("scene header", "seed is not an integer"))?;
        let shape_err = |what: &str| Error::format("scene header", format!("{what} has the wrong shape"));
        let (ps, pv) = b.f64_array("pixels")?;
        let pixels = Array3::from_shape_vec((ps[0], ps[1], ps[2]), pv.to_vec()).map_err(|_| shape_err("pixels"))?;
        let (ms, mv) = b.u16_array("class_mask")?;
        let class_mask = Array2::from_shape_vec((ms[0], ms[1]), mv.iter().map(|&v| v as usize).collect())
            .map_err(|_| shape_err("class_mask"))?;
        let (ds, dv) = b.f64_array("depth_map")?;
        let depth_map = Array2::from_shape_vec((ds[0], ds[1]), dv.to_vec()).map_err(|_| shape_err("depth_map"))?;
        Ok(Scene {
            pixels,
            class_mask,
            depth_map,
            seed,
            objects: Vec::new(),
        })
    }
}

impl SparseDepthMap {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let n = self.coords.len();
        ArrayBundle::default()
            .with_meta("kind", "sparse_depth")
            .with_meta("height", self.shape.0)
            .with_meta("width", self.shape.1)
            .with_meta("fill_fraction", self.fill_fraction())
            .with_array(
                "coords",
                &[n, 2],
                ArrayData::U32(self.coords.iter().flat_map(|&(r, c)| [r as u32, c as u32]).collect()),
            )
            .with_array("values", &[n], ArrayData::F64(self.values.clone()))
            .write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let b = ArrayBundle::read(dir)?;
        let dim = |k: &str| -> Result<usize> {
            b.meta(k)?
                .parse()
                .map_err(|_| Error::format("sparse depth header", format!("{k} is not an integer")))
        };
        let shape = (dim("height")?, dim("width")?);
        let (_, cv) = b.u32_array("coords")?;
        let (_, vv) = b.f64_array("values")?;
        let coords = cv.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
        SparseDepthMap::new(coords, vv.to_vec(), shape)
    }
}
