//! Runs a short training job with checkpoints, resumes from the midpoint,
//! and checks that the resumed run lands on the same bytes.

use std::path::PathBuf;

use scene_ssl::config::RunConfig;
use scene_ssl::train::{train, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from("target/examples-out/train");
    let cfg = RunConfig {
        steps: 20,
        batch_size: 2,
        checkpoint_every: 10,
        output_dir: out.clone(),
        ..RunConfig::default()
    };
    let (trainer, last) = train(cfg)?;
    println!("finished at step {}; final checkpoint {}", trainer.step, last.display());
    print!("{}", std::fs::read_to_string(out.join("losses.csv"))?);

    let mut resumed = Trainer::load(&out.join("checkpoint-000010.bin"))?;
    resumed.run(20, None, None)?;
    println!("resume from step 10 matches: {}", resumed.to_bytes() == trainer.to_bytes());
    Ok(())
}
