//! Evaluates a briefly trained teacher: clustering scores, a linear probe,
//! and segment maps written as images.

use std::path::Path;

use scene_ssl::cluster::ViewId;
use scene_ssl::config::RunConfig;
use scene_ssl::eval::{cluster_eval_scene, evaluate_clustering, export_segment_map, linear_probe, report_text, upsample_labels, SegmentFormat};
use scene_ssl::train::Trainer;

fn main() -> scene_ssl::Result<()> {
    let cfg = RunConfig {
        steps: 40,
        batch_size: 2,
        eval_scenes: 8,
        probe_train_scenes: 16,
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let (before, _) = linear_probe(&trainer.pair.teacher, &cfg)?;
    trainer.run(cfg.steps, None, None)?;
    let teacher = &trainer.pair.teacher;

    let clusters = evaluate_clustering(teacher, &cfg)?;
    let (probe, _) = linear_probe(teacher, &cfg)?;
    print!("{}", report_text(Some(&clusters), Some(&probe)));
    println!("probe mIoU at init {:.4}, after {} steps {:.4}", before.miou, cfg.steps, probe.miou);

    let out = Path::new("target/examples-out/segments");
    let ev = cluster_eval_scene(teacher, &cfg, 0)?;
    let view = &ev.views[0];
    let labels = ev.assignment.label_map(ViewId::A, view.token_grid)?;
    export_segment_map(&upsample_labels(&labels, view.patch_size), &out.join("clusters.ppm"), SegmentFormat::Ppm)?;
    export_segment_map(&view.resample_nearest(&ev.scene.class_mask), &out.join("truth.ppm"), SegmentFormat::Ppm)?;
    println!("wrote {}", out.display());
    Ok(())
}
