//! Samples sparse depth from a scene, completes it, and reports the error
//! against ground truth for a few fill fractions and both patterns.

use std::path::Path;

use scene_ssl::depth::{complete_depth, pool_token_depth};
use scene_ssl::synth::{generate_scene, make_view, sample_sparse_depth, CropBox, SceneConfig, SparsePattern, ViewConfig};

fn main() -> scene_ssl::Result<()> {
    let cfg = SceneConfig::default();
    let scene = generate_scene(&cfg, 3)?;
    let max_depth = cfg.depth_range.1;

    for pattern in [SparsePattern::Uniform, SparsePattern::Scanline { row_step: 4 }] {
        for fill in [0.02, 0.05, 0.2] {
            let sparse = sample_sparse_depth(&scene, fill, pattern, 1)?;
            let dense = complete_depth(&sparse, 2, max_depth)?;
            let mae = (&dense.values - &scene.depth_map).mapv(f64::abs).mean().unwrap();
            println!("{pattern:?} fill {fill:.2}: {} samples, mean abs error {mae:.2} m", sparse.len());
        }
    }

    let sparse = sample_sparse_depth(&scene, 0.05, SparsePattern::Uniform, 1)?;
    let dense = complete_depth(&sparse, 2, max_depth)?;
    let view = make_view(&scene, CropBox::FULL, false, &ViewConfig::default())?;
    let tokens = pool_token_depth(&dense.in_view(&view), &view)?;
    println!("token depths, {}x{} grid:", tokens.grid.0, tokens.grid.1);
    for row in tokens.values.chunks(tokens.grid.1) {
        println!("  {}", row.iter().map(|d| format!("{d:5.1}")).collect::<Vec<_>>().join(" "));
    }

    let out = Path::new("target/examples-out/depth.pgm");
    dense.write_pgm16(out, max_depth)?;
    println!("wrote {}", out.display());
    Ok(())
}
