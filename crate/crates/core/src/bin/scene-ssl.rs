use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use scene_ssl::cluster::ViewId;
use scene_ssl::config::RunConfig;
use scene_ssl::eval::{
    cluster_eval_scene, evaluate_clustering, export_segment_map, full_view, linear_probe, probe_test_seeds,
    report_text, token_features, upsample_labels, SegmentFormat,
};
use scene_ssl::semantic::vmf::{bessel_regime, log_vmf_normalizer};
use scene_ssl::train::{train, Trainer};
use scene_ssl::{Error, Result};

#[derive(Parser)]
#[command(name = "scene-ssl", version, about = "Dense self-supervised pre-training on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Config file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io { .. } => Error::Config(e.to_string()),
                e => e,
            })?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes config.txt, losses.csv and checkpoints.
    Train(Overrides),
    /// Teacher clustering metrics on held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Linear probe on frozen teacher token features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segment maps of one held-out scene.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_enum, default_value_t = ExportKind::Clusters)]
        kind: ExportKind,
        /// Output image; `.pgm` or `.ppm` picks the format.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Log vMF normalizer over a log-spaced kappa grid, as CSV.
    VmfDump {
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1e-3)]
        kappa_min: f64,
        #[arg(long, default_value_t = 1e3)]
        kappa_max: f64,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    /// Teacher clusters of view A, one label per pixel.
    Clusters,
    /// Ground-truth class mask of the scene.
    Truth,
    /// Linear-probe prediction on the full view.
    Probe,
    /// Completed depth as 16-bit PGM, linear in [0, depth.max_m].
    Depth,
}

fn load_checkpoint(path: &Path, overrides: &Overrides) -> Result<(Trainer, RunConfig)> {
    let trainer = Trainer::load(path)?;
    let cfg = overrides.apply(trainer.config.clone())?;
    Ok((trainer, cfg))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => {
            let cfg = o.config()?;
            let (trainer, ckpt) = train(cfg)?;
            println!("trained {} steps, checkpoint {}", trainer.step, ckpt.display());
        }
        Command::Eval { checkpoint, out, overrides } => {
            let (trainer, cfg) = load_checkpoint(&checkpoint, &overrides)?;
            let report = evaluate_clustering(&trainer.pair.teacher, &cfg)?;
            emit(&report_text(Some(&report), None), out.as_deref())?;
        }
        Command::Probe { checkpoint, out, overrides } => {
            let (trainer, cfg) = load_checkpoint(&checkpoint, &overrides)?;
            let (report, _) = linear_probe(&trainer.pair.teacher, &cfg)?;
            emit(&report_text(None, Some(&report)), out.as_deref())?;
        }
        Command::Export {
            checkpoint,
            scene,
            kind,
            out,
            overrides,
        } => {
            let (trainer, cfg) = load_checkpoint(&checkpoint, &overrides)?;
            let teacher = &trainer.pair.teacher;
            let format = SegmentFormat::from_path(&out)
                .ok_or_else(|| Error::Config("export path must end in .pgm or .ppm".into()))?;
            if scene >= cfg.eval_scenes {
                return Err(Error::Config(format!("scene {scene} is beyond eval.scenes = {}", cfg.eval_scenes)));
            }
            match kind {
                ExportKind::Clusters => {
                    let ev = cluster_eval_scene(teacher, &cfg, scene)?;
                    let view = &ev.views[0];
                    let grid = ev.assignment.label_map(ViewId::A, view.token_grid)?;
                    export_segment_map(&upsample_labels(&grid, view.patch_size), &out, format)?;
                    ev.assignment.write_stats(&out.with_extension("stats.txt"))?;
                }
                ExportKind::Truth => {
                    let ev = cluster_eval_scene(teacher, &cfg, scene)?;
                    export_segment_map(&ev.scene.class_mask, &out, format)?;
                }
                ExportKind::Probe => {
                    let seed = probe_test_seeds(&cfg)[scene];
                    let (_, probe) = linear_probe(teacher, &cfg)?;
                    let (x, _) = token_features(teacher, &cfg, &[seed])?;
                    let sc = scene_ssl::synth::generate_scene(&cfg.scene, seed)?;
                    let view = full_view(&sc, &cfg)?;
                    let grid = ndarray::Array2::from_shape_vec(view.token_grid, probe.predict(&x))
                        .map_err(|_| Error::Config("token grid mismatch".into()))?;
                    export_segment_map(&upsample_labels(&grid, view.patch_size), &out, format)?;
                }
                ExportKind::Depth => {
                    if format != SegmentFormat::Pgm {
                        return Err(Error::Config("depth export needs a .pgm path".into()));
                    }
                    let ev = cluster_eval_scene(teacher, &cfg, scene)?;
                    ev.depth.write_pgm16(&out, cfg.depth.max_depth)?;
                }
            }
            println!("wrote {}", out.display());
        }
        Command::VmfDump {
            dim,
            kappa_min,
            kappa_max,
            points,
            out,
        } => {
            if !(kappa_min > 0.0 && kappa_max >= kappa_min && points >= 1 && dim >= 2) {
                return Err(Error::Config("need 0 < kappa_min <= kappa_max, points >= 1, dim >= 2".into()));
            }
            let mut text = String::from("kappa,dim,log_normalizer,regime\n");
            for i in 0..points {
                let f = if points == 1 { 0.0 } else { i as f64 / (points - 1) as f64 };
                let kappa = (kappa_min.ln() + f * (kappa_max.ln() - kappa_min.ln())).exp();
                let v = log_vmf_normalizer(kappa, dim)?;
                let regime = bessel_regime(dim as f64 / 2.0 - 1.0, kappa);
                text.push_str(&format!("{kappa:.17e},{dim},{v:.17e},{regime:?}\n"));
            }
            emit(&text, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            match e.module() {
                Some(m) => eprintln!("error in {m}: {e}"),
                None => eprintln!("error: {e}"),
            }
            ExitCode::from(if matches!(e, Error::Config(_)) { 1 } else { 2 })
        }
    }
}
