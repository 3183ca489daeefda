//! A small patch-mixing encoder, its projection head, and the
//! student/teacher pair.
//!
//! Layout per block: token mixing (an MLP across the token axis) and channel
//! mixing (an MLP across features), each behind a pre-norm and a residual.
//! A final affine layer norm produces the token features; dense outputs are
//! their unit-normalized rows and the global output is the unit-normalized
//! token mean.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::semantic::TempSchedule;
use crate::synth::View;

const MODULE: &str = "encoder_toy";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub view_size: usize,
    pub patch_size: usize,
    pub input_channels: usize,
    pub embed_dim: usize,
    /// Number of mixing blocks. Zero leaves a per-patch embedding.
    pub depth: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub head_hidden: usize,
    /// Output width of the projection head.
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            view_size: 64,
            patch_size: 8,
            input_channels: 3,
            embed_dim: 64,
            depth: 2,
            token_hidden: 64,
            channel_hidden: 128,
            head_hidden: 128,
            out_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.view_size == 0 || self.view_size % self.patch_size != 0 {
            return Err(Error::invalid(
                MODULE,
                format!("patch size {} must divide view size {}", self.patch_size, self.view_size),
            ));
        }
        let dims = [
            self.input_channels,
            self.embed_dim,
            self.token_hidden,
            self.channel_hidden,
            self.head_hidden,
            self.out_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(MODULE, "every width must be >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.view_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.input_channels
    }

    /// Name and shape of every tensor, in storage order. Prototypes come
    /// last.
    pub fn param_shapes(&self, num_prototypes: usize) -> Vec<(String, (usize, usize))> {
        let (p, d) = (self.num_tokens(), self.embed_dim);
        let mut v = vec![
            ("embed.w".to_string(), (self.patch_dim(), d)),
            ("embed.b".to_string(), (1, d)),
        ];
        for b in 0..self.depth {
            v.push((format!("block{b}.token.w1"), (p, self.token_hidden)));
            v.push((format!("block{b}.token.b1"), (1, self.token_hidden)));
            v.push((format!("block{b}.token.w2"), (self.token_hidden, p)));
            v.push((format!("block{b}.token.b2"), (1, p)));
            v.push((format!("block{b}.channel.w1"), (d, self.channel_hidden)));
            v.push((format!("block{b}.channel.b1"), (1, self.channel_hidden)));
            v.push((format!("block{b}.channel.w2"), (self.channel_hidden, d)));
            v.push((format!("block{b}.channel.b2"), (1, d)));
        }
        let (h, o) = (self.head_hidden, self.out_dim);
        v.extend([
            ("norm.g".to_string(), (1, d)),
            ("norm.b".to_string(), (1, d)),
            ("head.w1".to_string(), (d, h)),
            ("head.b1".to_string(), (1, h)),
            ("head.w2".to_string(), (h, h)),
            ("head.b2".to_string(), (1, h)),
            ("head.w3".to_string(), (h, o)),
            ("head.b3".to_string(), (1, o)),
            (PROTOTYPES.to_string(), (num_prototypes, o)),
        ]);
        v
    }
}

pub const PROTOTYPES: &str = "prototypes";

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, tensors: Vec<Array2<f64>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::invalid(MODULE, "one name per tensor is required"));
        }
        let mut seen = names.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != names.len() {
            return Err(Error::invalid(MODULE, "parameter names must be distinct"));
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Whether weight decay applies: weight matrices only. Biases, norm
    /// parameters and prototypes are exempt.
    pub fn decays(&self, index: usize) -> bool {
        let name = &self.names[index];
        name != PROTOTYPES && name.rsplit('.').next().is_some_and(|s| s.starts_with('w'))
    }

    /// Records every tensor as a tape leaf.
    pub fn on_tape(&self, tape: &Tape) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            index: self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }
}

/// Tape handles of a [`ParamSet`], addressable by name.
pub struct ParamVars {
    pub vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

/// Seeded initialization: weights `N(0, 1/fan_in)`, zero biases, unit norm
/// gains, and unit-norm prototype rows.
pub fn init_params(cfg: &EncoderConfig, num_prototypes: usize, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    if num_prototypes < 2 {
        return Err(Error::invalid(MODULE, "need at least 2 prototypes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, (r, c)) in cfg.param_shapes(num_prototypes) {
        let last = name.rsplit('.').next().unwrap_or("");
        let t = if name == PROTOTYPES {
            let mut w: Array2<f64> = Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
            for mut row in w.rows_mut() {
                let n = row.dot(&row).sqrt();
                row /= n;
            }
            w
        } else if last.starts_with('w') {
            let std = 1.0 / (r as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                std * e
            })
        } else if last == "g" {
            Array2::ones((r, c))
        } else {
            Array2::zeros((r, c))
        };
        names.push(name);
        tensors.push(t);
    }
    ParamSet::new(names, tensors)
}

/// Flattens a view into `P x (p*p*C)` patch rows, row-major over the grid;
/// within a patch the order is (row, column, channel).
pub fn patchify(view: &View, cfg: &EncoderConfig) -> Result<Array2<f64>> {
    let (h, w, c) = view.pixels.dim();
    if h != cfg.view_size || w != cfg.view_size || c != cfg.input_channels {
        return Err(Error::invalid(
            MODULE,
            format!(
                "view {h}x{w}x{c} does not match encoder input {0}x{0}x{1}",
                cfg.view_size, cfg.input_channels
            ),
        ));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    Ok(Array2::from_shape_fn((g * g, cfg.patch_dim()), |(t, f)| {
        let (ti, tj) = (t / g, t % g);
        let (dy, rest) = (f / (p * c), f % (p * c));
        let (dx, ch) = (rest / c, rest % c);
        view.pixels[[ti * p + dy, tj * p + dx, ch]]
    }))
}

/// Encoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// Token features before normalization, `P x d`.
    pub tokens: Var,
    /// Unit rows of `tokens`.
    pub dense: Var,
    /// `1 x d` unit-normalized token mean.
    pub global: Var,
}

pub fn encode_tape(tape: &Tape, pv: &ParamVars, cfg: &EncoderConfig, patches: Array2<f64>) -> Result<EncodedVars> {
    if patches.dim() != (cfg.num_tokens(), cfg.patch_dim()) {
        return Err(Error::invalid(MODULE, format!("patch matrix has shape {:?}", patches.dim())));
    }
    let x = tape.leaf(patches);
    let mut x = tape.add_row(tape.matmul(x, pv.var("embed.w")), pv.var("embed.b"));
    for b in 0..cfg.depth {
        let v = |s: &str| pv.var(&format!("block{b}.{s}"));
        let y = tape.transpose(tape.layer_norm(x));
        let h = tape.gelu(tape.add_row(tape.matmul(y, v("token.w1")), v("token.b1")));
        let u = tape.add_row(tape.matmul(h, v("token.w2")), v("token.b2"));
        x = tape.add(x, tape.transpose(u));
        let y = tape.layer_norm(x);
        let h = tape.gelu(tape.add_row(tape.matmul(y, v("channel.w1")), v("channel.b1")));
        let u = tape.add_row(tape.matmul(h, v("channel.w2")), v("channel.b2"));
        x = tape.add(x, u);
    }
    let tokens = tape.add_row(tape.mul_row(tape.layer_norm(x), pv.var("norm.g")), pv.var("norm.b"));
    Ok(EncodedVars {
        tokens,
        dense: tape.l2_normalize_rows(tokens),
        global: tape.l2_normalize_rows(tape.mean_rows(tokens)),
    })
}

/// Three-layer head with GELU between layers and a unit-normalized output.
pub fn project_tape(tape: &Tape, pv: &ParamVars, reps: Var) -> Var {
    let h = tape.gelu(tape.add_row(tape.matmul(reps, pv.var("head.w1")), pv.var("head.b1")));
    let h = tape.gelu(tape.add_row(tape.matmul(h, pv.var("head.w2")), pv.var("head.b2")));
    let z = tape.add_row(tape.matmul(h, pv.var("head.w3")), pv.var("head.b3"));
    tape.l2_normalize_rows(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub global: Array1<f64>,
    /// `P x d`, unit rows.
    pub dense: Array2<f64>,
}

/// Forward pass without gradients.
pub fn encode(view: &View, params: &ParamSet, cfg: &EncoderConfig) -> Result<Encoded> {
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let out = encode_tape(&tape, &pv, cfg, patchify(view, cfg)?)?;
    Ok(Encoded {
        global: tape.value(out.global).row(0).to_owned(),
        dense: (*tape.value(out.dense)).clone(),
    })
}

/// Projects each row of `reps` (`n x d`) to a unit vector.
pub fn project_rows(reps: &Array2<f64>, params: &ParamSet) -> Array2<f64> {
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let x = tape.leaf(reps.clone());
    let z = project_tape(&tape, &pv, x);
    (*tape.value(z)).clone()
}

pub fn project(rep: ArrayView1<f64>, params: &ParamSet) -> Array1<f64> {
    let row = rep.to_owned().insert_axis(ndarray::Axis(0));
    project_rows(&row, params).row(0).to_owned()
}

/// `end + (start - end) * (1 + cos(pi * step / (total - 1))) / 2`.
pub fn cosine(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return end;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Per-step hyperparameter schedules over a fixed horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    pub total_steps: usize,
    pub momentum: (f64, f64),
    pub weight_decay: (f64, f64),
    pub temps: TempSchedule,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub lr_warmup_steps: usize,
}

impl Schedules {
    /// Defaults for a run of `total_steps`: learning-rate warmup over the
    /// first 10% and teacher-temperature warmup over the first 30%.
    pub fn for_steps(total_steps: usize) -> Self {
        Schedules {
            total_steps,
            momentum: (0.996, 1.0),
            weight_decay: (0.04, 0.4),
            temps: TempSchedule {
                warmup_steps: (total_steps * 3).div_ceil(10),
                ..TempSchedule::default()
            },
            lr_peak: 1e-3,
            lr_min: 1e-5,
            lr_warmup_steps: total_steps.div_ceil(10),
        }
    }

    pub fn momentum(&self, step: usize) -> f64 {
        cosine(self.momentum.0, self.momentum.1, step, self.total_steps)
    }

    pub fn weight_decay(&self, step: usize) -> f64 {
        cosine(self.weight_decay.0, self.weight_decay.1, step, self.total_steps)
    }

    pub fn teacher_temp(&self, step: usize) -> f64 {
        self.temps.teacher(step)
    }

    /// Linear warmup to the peak, then cosine decay to the floor.
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.lr_warmup_steps;
        if step < w {
            return self.lr_peak * (step + 1) as f64 / w as f64;
        }
        cosine(self.lr_peak, self.lr_min, step - w, self.total_steps.saturating_sub(w))
    }

    /// `(momentum, teacher temperature, weight decay)` at `step`.
    pub fn at(&self, step: usize) -> (f64, f64, f64) {
        (self.momentum(step), self.teacher_temp(step), self.weight_decay(step))
    }
}

/// Student and EMA teacher with identical layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub schedules: Schedules,
}

impl ModelPair {
    /// The teacher starts as a copy of the student.
    pub fn new(student: ParamSet, schedules: Schedules) -> Self {
        ModelPair {
            teacher: student.clone(),
            student,
            schedules,
        }
    }

    pub fn from_parts(student: ParamSet, teacher: ParamSet, schedules: Schedules) -> Result<Self> {
        if !student.same_layout(&teacher) {
            return Err(Error::invalid(MODULE, "teacher and student layouts differ"));
        }
        Ok(ModelPair {
            student,
            teacher,
            schedules,
        })
    }

    /// `teacher <- m * teacher + (1 - m) * student` with the scheduled `m`.
    pub fn ema_update(&mut self, step: usize) -> Result<f64> {
        if step >= self.schedules.total_steps {
            return Err(Error::invalid(
                MODULE,
                format!("step {step} is past the horizon of {}", self.schedules.total_steps),
            ));
        }
        let m = self.schedules.momentum(step);
        self.ema_with(m);
        Ok(m)
    }

    pub fn ema_with(&mut self, m: f64) {
        for (t, s) in self.teacher.tensors.iter_mut().zip(&self.student.tensors) {
            if m == 0.0 {
                t.assign(s);
            } else if m != 1.0 {
                Zip::from(t).and(s).for_each(|t, &s| *t = m * *t + (1.0 - m) * s);
            }
        }
    }
}
