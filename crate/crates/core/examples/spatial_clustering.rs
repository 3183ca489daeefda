//! Clusters the tokens of two views jointly, with and without the depth
//! term, and scores the labels against the scene's class mask.

use scene_ssl::cluster::{cluster_joint_views, ClusterParams, ViewId};
use scene_ssl::config::RunConfig;
use scene_ssl::metrics::{ari, nmi};
use scene_ssl::synth::generate_scene;
use scene_ssl::train::Trainer;

fn main() -> scene_ssl::Result<()> {
    let cfg = RunConfig { batch_size: 4, ..RunConfig::default() };
    let mut trainer = Trainer::new(cfg.clone())?;
    let batch = trainer.prepare_batch()?;

    for img in &batch {
        let scene = generate_scene(&cfg.scene, img.scene_seed)?;
        let truth: Vec<usize> = img
            .views
            .iter()
            .flat_map(|v| v.token_labels(&scene.class_mask, cfg.scene.num_classes))
            .collect();
        let [a, b] = trainer.teacher_fields(img)?;
        println!("scene {}", img.scene_seed);
        for beta in [0.0, 4.0] {
            let params = ClusterParams { depth_beta: beta, seed: img.cluster_seed, ..cfg.cluster };
            let asg = cluster_joint_views(&a, &b, &params)?;
            println!(
                "  beta {beta}: ARI {:.3} NMI {:.3}, {} clusters span both views",
                ari(&asg.labels, &truth),
                nmi(&asg.labels, &truth),
                asg.spanning_clusters().len()
            );
            if beta > 0.0 {
                let map = asg.label_map(ViewId::A, a.depths.grid)?;
                for row in map.rows() {
                    println!("    {}", row.iter().map(|l| format!("{l:2}")).collect::<Vec<_>>().join(" "));
                }
            }
        }
    }
    Ok(())
}
