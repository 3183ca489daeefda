//! Generates a few scenes, prints their object layout and the class
//! histogram, and writes one scene plus its class mask seen through a random crop.

use std::path::Path;

use scene_ssl::io::write_ppm_labels;
use scene_ssl::synth::{generate_scene, object_class_histogram, sample_views, SceneConfig, ViewConfig};

fn main() -> scene_ssl::Result<()> {
    let cfg = SceneConfig::default();
    for seed in 0..3 {
        let scene = generate_scene(&cfg, seed)?;
        println!("scene {seed}: {} objects", scene.objects.len());
        for o in &scene.objects {
            println!("  class {} at depth {:.1} m", o.class, o.depth);
        }
    }

    let hist = object_class_histogram(&cfg, 0..500)?;
    println!("object class frequencies over 500 scenes: {:.3}", &hist / hist.sum());

    let scene = generate_scene(&cfg, 7)?;
    let (a, b) = sample_views(&scene, &ViewConfig::default(), 11)?;
    println!("view A crop {:?} flip {}", a.crop_box, a.flip);
    println!("view B crop {:?} flip {}", b.crop_box, b.flip);

    let out = Path::new("target/examples-out/synth");
    scene.save(&out.join("scene"))?;
    write_ppm_labels(&out.join("mask.ppm"), &scene.class_mask)?;
    write_ppm_labels(&out.join("mask_view_a.ppm"), &a.resample_nearest(&scene.class_mask))?;
    println!("wrote {}", out.display());
    Ok(())
}
