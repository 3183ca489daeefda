//! Sparse-to-dense depth completion, token pooling and the depth cost term.

use std::path::Path;

use ndarray::Array2;

use crate::cluster::CostMatrix;
use crate::error::{Error, Result};
use crate::io::{self, ArrayBundle, ArrayData};
use crate::synth::{SparseDepthMap, View};

const MODULE: &str = "depth_pipeline";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthProvenance {
    GroundTruth,
    Completed,
}

impl DepthProvenance {
    fn as_str(self) -> &'static str {
        match self {
            DepthProvenance::GroundTruth => "ground_truth",
            DepthProvenance::Completed => "completed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseDepthMap {
    /// Meters.
    pub values: Array2<f64>,
    pub provenance: DepthProvenance,
}

impl DenseDepthMap {
    pub fn new(values: Array2<f64>, provenance: DepthProvenance) -> Result<Self> {
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(MODULE, "dense depths must be finite and > 0"));
        }
        Ok(DenseDepthMap { values, provenance })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Nearest-neighbour resampling into a view's pixel grid.
    pub fn in_view(&self, view: &View) -> DenseDepthMap {
        DenseDepthMap {
            values: view.resample_nearest(&self.values),
            provenance: self.provenance,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (h, w) = self.shape();
        ArrayBundle::default()
            .with_meta("kind", "dense_depth")
            .with_meta("provenance", self.provenance.as_str())
            .with_array("values", &[h, w], ArrayData::F64(self.values.iter().copied().collect()))
            .write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let b = ArrayBundle::read(dir)?;
        let provenance = match b.meta("provenance")? {
            "ground_truth" => DepthProvenance::GroundTruth,
            "completed" => DepthProvenance::Completed,
            other => return Err(Error::format("depth header", format!("unknown provenance {other}"))),
        };
        let (shape, v) = b.f64_array("values")?;
        if shape.len() != 2 {
            return Err(Error::format("depth header", "values must be 2-D"));
        }
        let values = Array2::from_shape_vec((shape[0], shape[1]), v.to_vec()).expect("length checked on read");
        DenseDepthMap::new(values, provenance)
    }

    /// 16-bit PGM with depth mapped linearly from `[0, max_depth]` to
    /// `[0, 65535]`.
    pub fn write_pgm16(&self, path: &Path, max_depth: f64) -> Result<()> {
        if !(max_depth > 0.0) {
            return Err(Error::invalid(MODULE, "max depth must be > 0"));
        }
        let img = self
            .values
            .mapv(|d| ((d / max_depth).clamp(0.0, 1.0) * 65535.0).round() as u16);
        io::write_pgm16(path, &img)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDepths {
    /// Meters, row-major over the token grid.
    pub values: Vec<f64>,
    pub grid: (usize, usize),
}

impl TokenDepths {
    pub fn new(values: Vec<f64>, grid: (usize, usize)) -> Result<Self> {
        if values.len() != grid.0 * grid.1 {
            return Err(Error::invalid(MODULE, "token depth count does not match the grid"));
        }
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(MODULE, "token depths must be finite and > 0"));
        }
        Ok(TokenDepths { values, grid })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

const DIAMOND_1: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Simplified morphological completion. Working on inverted depth
/// `max_depth - d` and taking maxima is the same as taking minima of `d`
/// directly, which is what this does so stored samples survive bit-exactly:
///
/// 1. every empty pixel takes the nearest (smallest) depth among samples
///    within a diamond of `kernel_radius`;
/// 2. remaining holes are filled by repeated radius-1 diamond dilation;
/// 3. a 3x3 median filter (window clipped at the border) smooths the result.
pub fn complete_depth(sparse: &SparseDepthMap, kernel_radius: usize, max_depth: f64) -> Result<DenseDepthMap> {
    if sparse.is_empty() {
        return Err(Error::invalid(MODULE, "sparse depth has no samples to complete from"));
    }
    if let Some(&v) = sparse.values.iter().find(|&&v| v > max_depth) {
        return Err(Error::invalid(MODULE, format!("sample {v} exceeds max depth {max_depth}")));
    }
    let (h, w) = sparse.shape;
    let mut grid: Array2<Option<f64>> = Array2::from_elem((h, w), None);
    for (&(r, c), &v) in sparse.coords.iter().zip(&sparse.values) {
        grid[[r, c]] = Some(v);
    }

    let r = kernel_radius as isize;
    let mut dilated = grid.clone();
    for ((row, col), out) in dilated.indexed_iter_mut() {
        if out.is_some() {
            continue;
        }
        let mut best: Option<f64> = None;
        for dr in -r..=r {
            let span = r - dr.abs();
            for dc in -span..=span {
                let (rr, cc) = (row as isize + dr, col as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                if let Some(v) = grid[[rr as usize, cc as usize]] {
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
            }
        }
        *out = best;
    }

    let mut holes = dilated.iter().filter(|v| v.is_none()).count();
    while holes > 0 {
        let prev = dilated.clone();
        for ((row, col), out) in dilated.indexed_iter_mut() {
            if out.is_some() {
                continue;
            }
            for (dr, dc) in DIAMOND_1 {
                let (rr, cc) = (row as isize + dr, col as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                if let Some(v) = prev[[rr as usize, cc as usize]] {
                    *out = Some(out.map_or(v, |b| b.min(v)));
                }
            }
        }
        holes = dilated.iter().filter(|v| v.is_none()).count();
    }

    let filled = dilated.mapv(|v| v.expect("all holes filled"));
    DenseDepthMap::new(median3(&filled), DepthProvenance::Completed)
}

/// 3x3 median with the window clipped at the border. For an even count the
/// upper middle element is taken, which is the lower median of the
/// inverted depths.
fn median3(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut buf = Vec::with_capacity(9);
    Array2::from_shape_fn((h, w), |(r, c)| {
        buf.clear();
        for rr in r.saturating_sub(1)..(r + 2).min(h) {
            for cc in c.saturating_sub(1)..(c + 2).min(w) {
                buf.push(a[[rr, cc]]);
            }
        }
        buf.sort_by(f64::total_cmp);
        buf[buf.len() / 2]
    })
}

/// Per-token depth: the lower median of the pixel depths in each patch.
/// `dense` must already be in the view's pixel grid (see
/// [`DenseDepthMap::in_view`]).
pub fn pool_token_depth(dense: &DenseDepthMap, view: &View) -> Result<TokenDepths> {
    if dense.shape() != view.size() {
        return Err(Error::invalid(
            MODULE,
            format!("depth map {:?} does not match view {:?}", dense.shape(), view.size()),
        ));
    }
    let p = view.patch_size;
    let (rows, cols) = view.token_grid;
    let mut values = Vec::with_capacity(rows * cols);
    let mut buf = Vec::with_capacity(p * p);
    for i in 0..rows {
        for j in 0..cols {
            buf.clear();
            buf.extend(dense.values.slice(ndarray::s![i * p..(i + 1) * p, j * p..(j + 1) * p]).iter());
            buf.sort_by(f64::total_cmp);
            values.push(buf[(buf.len() - 1) / 2]);
        }
    }
    TokenDepths::new(values, view.token_grid)
}

/// `|d_i - d_j| / scale` for every token depth against every centroid depth.
pub fn depth_cost(token_depths: &[f64], centroid_depths: &[f64], scale: f64) -> Result<CostMatrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(MODULE, format!("depth scale must be > 0, got {scale}")));
    }
    let entries = Array2::from_shape_fn((token_depths.len(), centroid_depths.len()), |(i, j)| {
        (token_depths[i] - centroid_depths[j]).abs() / scale
    });
    CostMatrix::new(entries)
}
