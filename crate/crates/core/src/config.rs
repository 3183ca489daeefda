//! Run configuration as a flat `key = value` text file.
//!
//! Lines starting with `#` are comments. Every key is optional; missing
//! keys take the defaults of [`RunConfig::default`]. Unknown keys and
//! malformed values are config errors. Units are part of the key name where
//! they apply (`_m` for meters, `_px` for pixels).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cluster::ClusterParams;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::semantic::AssignMode;
use crate::synth::{SceneConfig, SparsePattern, ViewConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DepthConfig {
    pub sparse_fraction: f64,
    pub pattern: SparsePattern,
    pub kernel_radius: usize,
    pub max_depth: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            sparse_fraction: 0.05,
            pattern: SparsePattern::Scanline { row_step: 4 },
            kernel_radius: 2,
            max_depth: 80.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Scenes per epoch; the pool is regenerated from seeds on demand.
    pub epoch_scenes: usize,
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    pub scene: SceneConfig,
    pub view: ViewConfig,
    pub depth: DepthConfig,
    pub encoder: EncoderConfig,
    pub cluster: ClusterParams,
    pub num_prototypes: usize,
    pub mode: AssignMode,
    pub renormalize_prototypes: bool,
    pub center_momentum: f64,
    pub queue_capacity: usize,
    pub cycle_consistent: bool,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub lr_warmup_frac: f64,
    pub weight_decay: (f64, f64),
    pub momentum: (f64, f64),
    pub student_temp: f64,
    pub teacher_temp: (f64, f64),
    pub teacher_warmup_frac: f64,
    pub eval_scenes: usize,
    pub probe_train_scenes: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_seed: 1,
            eval_seed: 2,
            steps: 2000,
            batch_size: 8,
            epoch_scenes: 200,
            checkpoint_every: 0,
            output_dir: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            view: ViewConfig::default(),
            depth: DepthConfig::default(),
            encoder: EncoderConfig::default(),
            cluster: ClusterParams {
                num_clusters: 8,
                ..ClusterParams::default()
            },
            num_prototypes: 256,
            mode: AssignMode::Vmf,
            renormalize_prototypes: false,
            center_momentum: 0.9,
            queue_capacity: 2500,
            cycle_consistent: false,
            lr_peak: 1e-3,
            lr_min: 1e-5,
            lr_warmup_frac: 0.1,
            weight_decay: (0.04, 0.4),
            momentum: (0.996, 1.0),
            student_temp: 0.1,
            teacher_temp: (0.04, 0.07),
            teacher_warmup_frac: 0.3,
            eval_scenes: 50,
            probe_train_scenes: 100,
            probe_steps: 2000,
            probe_lr: 0.05,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_pattern(key: &str, v: &str) -> Result<SparsePattern> {
    if v == "uniform" {
        return Ok(SparsePattern::Uniform);
    }
    match v.strip_prefix("scanline:") {
        Some(k) => Ok(SparsePattern::Scanline { row_step: parse(key, k)? }),
        None => Err(Error::config(format!("{key}: expected uniform or scanline:<rows>, got {v:?}"))),
    }
}

fn pattern_text(p: SparsePattern) -> String {
    match p {
        SparsePattern::Uniform => "uniform".into(),
        SparsePattern::Scanline { row_step } => format!("scanline:{row_step}"),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected key = value", n + 1)));
            };
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {}", n + 1, k.trim())));
            }
        }
        let mut c = RunConfig::default();
        for (k, v) in &kv {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Sets one key. Used by the parser and by CLI overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match k {
            "seed" => self.seed = parse(k, v)?,
            "data_seed" => self.data_seed = parse(k, v)?,
            "eval_seed" => self.eval_seed = parse(k, v)?,
            "steps" => self.steps = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "epoch_scenes" => self.epoch_scenes = parse(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "scene.image_size_px" => self.scene.image_size = parse(k, v)?,
            "scene.num_classes" => self.scene.num_classes = parse(k, v)?,
            "scene.class_frequency_exponent" => self.scene.class_frequency_exponent = parse(k, v)?,
            "scene.class_frequencies" => {
                self.scene.class_frequencies = if v == "none" { None } else { Some(parse_list(k, v)?) }
            }
            "scene.object_size_min" => self.scene.size_range.0 = parse(k, v)?,
            "scene.object_size_max" => self.scene.size_range.1 = parse(k, v)?,
            "scene.depth_near_m" => self.scene.depth_range.0 = parse(k, v)?,
            "scene.depth_far_m" => self.scene.depth_range.1 = parse(k, v)?,
            "scene.objects_min" => self.scene.objects_per_scene.0 = parse(k, v)?,
            "scene.objects_max" => self.scene.objects_per_scene.1 = parse(k, v)?,
            "scene.texture_noise_std" => self.scene.texture_noise_std = parse(k, v)?,
            "scene.channels" => {
                self.scene.channels = parse(k, v)?;
                self.encoder.input_channels = self.scene.channels;
            }
            "scene.visual_twins" => {
                self.scene.visual_twins = if v == "none" {
                    None
                } else {
                    let (a, b) = v
                        .split_once(',')
                        .ok_or_else(|| Error::config(format!("{k}: expected a,b or none")))?;
                    Some((parse(k, a.trim())?, parse(k, b.trim())?))
                }
            }
            "scene.palette_seed" => self.scene.palette_seed = parse(k, v)?,
            "view.size_px" => {
                self.view.output_size = parse(k, v)?;
                self.encoder.view_size = self.view.output_size;
            }
            "view.min_scale" => self.view.min_scale = parse(k, v)?,
            "view.max_scale" => self.view.max_scale = parse(k, v)?,
            "view.flip" => self.view.allow_flip = parse_bool(k, v)?,
            "depth.sparse_fraction" => self.depth.sparse_fraction = parse(k, v)?,
            "depth.pattern" => self.depth.pattern = parse_pattern(k, v)?,
            "depth.kernel_radius_px" => self.depth.kernel_radius = parse(k, v)?,
            "depth.max_m" => self.depth.max_depth = parse(k, v)?,
            "encoder.patch_px" => {
                self.encoder.patch_size = parse(k, v)?;
                self.view.patch_size = self.encoder.patch_size;
            }
            "encoder.embed_dim" => self.encoder.embed_dim = parse(k, v)?,
            "encoder.depth" => self.encoder.depth = parse(k, v)?,
            "encoder.token_hidden" => self.encoder.token_hidden = parse(k, v)?,
            "encoder.channel_hidden" => self.encoder.channel_hidden = parse(k, v)?,
            "encoder.head_hidden" => self.encoder.head_hidden = parse(k, v)?,
            "encoder.out_dim" => self.encoder.out_dim = parse(k, v)?,
            "cluster.num_clusters" => self.cluster.num_clusters = parse(k, v)?,
            "cluster.lambda" => self.cluster.lambda = parse(k, v)?,
            "cluster.sk_iterations" => self.cluster.sk_iterations = parse(k, v)?,
            "cluster.pos_alpha" => self.cluster.pos_alpha = parse(k, v)?,
            "cluster.depth_beta" => self.cluster.depth_beta = parse(k, v)?,
            "cluster.depth_scale_m" => self.cluster.depth_scale = parse(k, v)?,
            "cluster.outer_rounds" => self.cluster.outer_rounds = parse(k, v)?,
            "bank.num_prototypes" => self.num_prototypes = parse(k, v)?,
            "bank.mode" => {
                self.mode = AssignMode::parse(v).ok_or_else(|| Error::config(format!("{k}: expected vmf or uniform, got {v:?}")))?
            }
            "bank.renormalize_prototypes" => self.renormalize_prototypes = parse_bool(k, v)?,
            "bank.center_momentum" => self.center_momentum = parse(k, v)?,
            "queue.capacity" => self.queue_capacity = parse(k, v)?,
            "queue.cycle_consistent" => self.cycle_consistent = parse_bool(k, v)?,
            "optim.lr_peak" => self.lr_peak = parse(k, v)?,
            "optim.lr_min" => self.lr_min = parse(k, v)?,
            "optim.lr_warmup_frac" => self.lr_warmup_frac = parse(k, v)?,
            "optim.weight_decay_start" => self.weight_decay.0 = parse(k, v)?,
            "optim.weight_decay_end" => self.weight_decay.1 = parse(k, v)?,
            "ema.momentum_start" => self.momentum.0 = parse(k, v)?,
            "ema.momentum_end" => self.momentum.1 = parse(k, v)?,
            "temp.student" => self.student_temp = parse(k, v)?,
            "temp.teacher_start" => self.teacher_temp.0 = parse(k, v)?,
            "temp.teacher_end" => self.teacher_temp.1 = parse(k, v)?,
            "temp.teacher_warmup_frac" => self.teacher_warmup_frac = parse(k, v)?,
            "eval.scenes" => self.eval_scenes = parse(k, v)?,
            "probe.train_scenes" => self.probe_train_scenes = parse(k, v)?,
            "probe.steps" => self.probe_steps = parse(k, v)?,
            "probe.lr" => self.probe_lr = parse(k, v)?,
            _ => return Err(Error::config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("eval_seed", self.eval_seed.to_string());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epoch_scenes", self.epoch_scenes.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("scene.image_size_px", s.image_size.to_string());
        put("scene.num_classes", s.num_classes.to_string());
        put("scene.class_frequency_exponent", s.class_frequency_exponent.to_string());
        put("scene.class_frequencies", s.class_frequencies.as_deref().map_or("none".into(), join));
        put("scene.object_size_min", s.size_range.0.to_string());
        put("scene.object_size_max", s.size_range.1.to_string());
        put("scene.depth_near_m", s.depth_range.0.to_string());
        put("scene.depth_far_m", s.depth_range.1.to_string());
        put("scene.objects_min", s.objects_per_scene.0.to_string());
        put("scene.objects_max", s.objects_per_scene.1.to_string());
        put("scene.texture_noise_std", s.texture_noise_std.to_string());
        put("scene.channels", s.channels.to_string());
        put("scene.visual_twins", s.visual_twins.map_or("none".into(), |(a, b)| format!("{a},{b}")));
        put("scene.palette_seed", s.palette_seed.to_string());
        put("view.size_px", self.view.output_size.to_string());
        put("view.min_scale", self.view.min_scale.to_string());
        put("view.max_scale", self.view.max_scale.to_string());
        put("view.flip", self.view.allow_flip.to_string());
        put("depth.sparse_fraction", self.depth.sparse_fraction.to_string());
        put("depth.pattern", pattern_text(self.depth.pattern));
        put("depth.kernel_radius_px", self.depth.kernel_radius.to_string());
        put("depth.max_m", self.depth.max_depth.to_string());
        let e = &self.encoder;
        put("encoder.patch_px", e.patch_size.to_string());
        put("encoder.embed_dim", e.embed_dim.to_string());
        put("encoder.depth", e.depth.to_string());
        put("encoder.token_hidden", e.token_hidden.to_string());
        put("encoder.channel_hidden", e.channel_hidden.to_string());
        put("encoder.head_hidden", e.head_hidden.to_string());
        put("encoder.out_dim", e.out_dim.to_string());
        let c = &self.cluster;
        put("cluster.num_clusters", c.num_clusters.to_string());
        put("cluster.lambda", c.lambda.to_string());
        put("cluster.sk_iterations", c.sk_iterations.to_string());
        put("cluster.pos_alpha", c.pos_alpha.to_string());
        put("cluster.depth_beta", c.depth_beta.to_string());
        put("cluster.depth_scale_m", c.depth_scale.to_string());
        put("cluster.outer_rounds", c.outer_rounds.to_string());
        put("bank.num_prototypes", self.num_prototypes.to_string());
        put("bank.mode", self.mode.as_str().to_string());
        put("bank.renormalize_prototypes", self.renormalize_prototypes.to_string());
        put("bank.center_momentum", self.center_momentum.to_string());
        put("queue.capacity", self.queue_capacity.to_string());
        put("queue.cycle_consistent", self.cycle_consistent.to_string());
        put("optim.lr_peak", self.lr_peak.to_string());
        put("optim.lr_min", self.lr_min.to_string());
        put("optim.lr_warmup_frac", self.lr_warmup_frac.to_string());
        put("optim.weight_decay_start", self.weight_decay.0.to_string());
        put("optim.weight_decay_end", self.weight_decay.1.to_string());
        put("ema.momentum_start", self.momentum.0.to_string());
        put("ema.momentum_end", self.momentum.1.to_string());
        put("temp.student", self.student_temp.to_string());
        put("temp.teacher_start", self.teacher_temp.0.to_string());
        put("temp.teacher_end", self.teacher_temp.1.to_string());
        put("temp.teacher_warmup_frac", self.teacher_warmup_frac.to_string());
        put("eval.scenes", self.eval_scenes.to_string());
        put("probe.train_scenes", self.probe_train_scenes.to_string());
        put("probe.steps", self.probe_steps.to_string());
        put("probe.lr", self.probe_lr.to_string());
        out
    }

    /// Checks every sub-config and the cross-field rules. Failures are
    /// reported as config errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Invalid { module, reason } => Error::config(format!("{module}: {reason}")),
            other => other,
        };
        self.scene.validate().map_err(as_config)?;
        self.encoder.validate().map_err(as_config)?;
        self.cluster.validate().map_err(as_config)?;
        let fail = |m: String| Err(Error::config(m));
        if self.view.output_size != self.encoder.view_size || self.view.patch_size != self.encoder.patch_size {
            return fail("view size and patch size must match the encoder".into());
        }
        if self.scene.channels != self.encoder.input_channels {
            return fail("scene channels must match encoder input channels".into());
        }
        if !(self.view.min_scale > 0.0 && self.view.min_scale <= self.view.max_scale && self.view.max_scale <= 1.0) {
            return fail("view scales must satisfy 0 < min <= max <= 1".into());
        }
        if self.mode == AssignMode::Vmf && self.renormalize_prototypes {
            return fail("vmf mode keeps free prototype norms; bank.renormalize_prototypes must be false".into());
        }
        if self.steps == 0 || self.batch_size == 0 || self.epoch_scenes == 0 {
            return fail("steps, batch_size and epoch_scenes must be >= 1".into());
        }
        if self.num_prototypes < 2 || self.queue_capacity == 0 {
            return fail("need >= 2 prototypes and a nonempty queue".into());
        }
        if !(self.depth.sparse_fraction > 0.0 && self.depth.sparse_fraction <= 1.0) {
            return fail("depth.sparse_fraction must lie in (0, 1]".into());
        }
        if self.depth.max_depth < self.scene.depth_range.1 {
            return fail("depth.max_m must cover the scene's far depth".into());
        }
        let temps = [self.student_temp, self.teacher_temp.0, self.teacher_temp.1];
        if temps.iter().any(|&t| !(t > 0.0)) {
            return fail("temperatures must be > 0".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_min >= 0.0 && self.probe_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        let fracs = [self.lr_warmup_frac, self.teacher_warmup_frac, self.center_momentum];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return fail("warmup fractions and center momentum must lie in [0, 1]".into());
        }
        if [self.momentum.0, self.momentum.1].iter().any(|m| !(0.0..=1.0).contains(m)) {
            return fail("EMA momentum must lie in [0, 1]".into());
        }
        if self.eval_scenes == 0 || self.probe_train_scenes == 0 {
            return fail("eval.scenes and probe.train_scenes must be >= 1".into());
        }
        Ok(())
    }

    /// Whether student prototypes are projected to the unit sphere after
    /// every optimizer step.
    pub fn keeps_unit_prototypes(&self) -> bool {
        self.mode == AssignMode::Uniform || self.renormalize_prototypes
    }
}
