//! Encodes one view with a freshly initialized student, projects the
//! outputs, and shows how the teacher trails the student under EMA.

use scene_ssl::config::RunConfig;
use scene_ssl::encoder::{encode, init_params, project_rows, ModelPair, Schedules, PROTOTYPES};
use scene_ssl::synth::{generate_scene, sample_views};

fn main() -> scene_ssl::Result<()> {
    let cfg = RunConfig::default();
    let enc = cfg.encoder;
    let params = init_params(&enc, cfg.num_prototypes, cfg.seed)?;
    println!("{} tensors, {} values", params.len(), params.num_values());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        println!("  {name:12} {:?}", t.dim());
    }

    let scene = generate_scene(&cfg.scene, 0)?;
    let (view, _) = sample_views(&scene, &cfg.view, 1)?;
    let out = encode(&view, &params, &enc)?;
    let z = project_rows(&out.dense, &params);
    println!("dense tokens {:?}, projected {:?}", out.dense.dim(), z.dim());
    println!("first token projected norm {:.6}", z.row(0).dot(&z.row(0)).sqrt());
    println!("prototype bank {:?}", params.get(PROTOTYPES).unwrap().dim());

    let schedules = Schedules::for_steps(100);
    let other = init_params(&enc, cfg.num_prototypes, cfg.seed + 1)?;
    let mut pair = ModelPair::from_parts(other, params, schedules)?;
    let gap = |p: &ModelPair| {
        p.teacher.tensors().iter().zip(p.student.tensors()).map(|(a, b)| (a - b).mapv(|v| v * v).sum()).sum::<f64>().sqrt()
    };
    for step in 0..100 {
        if step % 20 == 0 {
            let (m, tau, wd) = schedules.at(step);
            println!("step {step:3}: momentum {m:.5} teacher temp {tau:.4} weight decay {wd:.3} lr {:.2e} gap {:.4}", schedules.lr(step), gap(&pair));
        }
        pair.ema_update(step)?;
    }
    Ok(())
}
