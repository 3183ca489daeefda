//! Trains briefly, then builds the batch objective from teacher passes and
//! shows how the targets split across the three loss terms as the object
//! queue warms up.

use scene_ssl::config::RunConfig;
use scene_ssl::objective::{LossPlan, Term};
use scene_ssl::train::Trainer;

fn main() -> scene_ssl::Result<()> {
    let cfg = RunConfig { steps: 200, batch_size: 2, ..RunConfig::default() };
    let mut trainer = Trainer::new(cfg.clone())?;
    println!("step  global_cv  object_cv  object_ci     total  pairs(g/o/ci)  queue");
    for _ in 0..30 {
        let step = trainer.step;
        let b = trainer.train_step()?;
        if step % 5 == 0 {
            println!(
                "{step:4}  {:9.4}  {:9.4}  {:9.4}  {:8.4}  {:3}/{:3}/{:3}  {:5}",
                b.global_cv, b.object_cv, b.object_ci, b.total, b.counts.global_cv, b.counts.object_cv, b.counts.object_ci, trainer.queue.len()
            );
        }
    }

    // rebuild one plan by hand, letting the student keep every teacher object
    let batch = trainer.prepare_batch()?;
    let mut images = Vec::new();
    let mut student_objects = Vec::new();
    for img in &batch {
        let pass = trainer.teacher_pass(img)?;
        student_objects.push([
            pass.image.objects[0].cluster_ids.clone(),
            pass.image.objects[1].cluster_ids.clone(),
        ]);
        images.push(pass.image);
    }
    let tau = trainer.pair.schedules.teacher_temp(trainer.step);
    let plan = LossPlan::build(&images, &student_objects, &trainer.queue, &trainer.teacher_bank()?, tau, cfg.cycle_consistent)?;
    for term in [Term::GlobalCv, Term::ObjectCv, Term::ObjectCi] {
        let ts: Vec<_> = plan.targets.iter().filter(|t| t.term == term).collect();
        let weight: f64 = ts.iter().map(|t| t.weight).sum();
        let entropy = ts.iter().map(|t| t.teacher.entropy()).sum::<f64>() / ts.len().max(1) as f64;
        println!("{term:?}: {} targets, total weight {weight:.3}, mean teacher entropy {entropy:.3}", ts.len());
    }
    Ok(())
}
