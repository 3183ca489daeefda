//! Semantic assignment of representations to K learnable prototypes.
//!
//! Two formulations share one [`PrototypeBank`]:
//!
//! * `Uniform`: `p_k ∝ exp(<W_k, z> / tau)` with unit-norm prototypes and a
//!   running center subtracted from the teacher logits;
//! * `Vmf`: each term is additionally weighted by the vMF normalizer of the
//!   prototype's scaled norm, `p_k ∝ C(|W_k| / tau) exp(<W_k, z> / tau)`,
//!   prototypes are left unnormalized, and teacher centering divides the
//!   probabilities by a running probability-space center.

pub mod vmf;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{Error, Result};

pub use vmf::{log_bessel_i, log_vmf_normalizer};

const MODULE: &str = "semantic_assignment";
const UNIT_TOL: f64 = 1e-6;
const SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignMode {
    Uniform,
    Vmf,
}

impl AssignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AssignMode::Uniform => "uniform",
            AssignMode::Vmf => "vmf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(AssignMode::Uniform),
            "vmf" => Some(AssignMode::Vmf),
            _ => None,
        }
    }
}

/// A normalized distribution over the K prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist(Array1<f64>);

impl ProbDist {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid(MODULE, "probabilities must be finite and >= 0"));
        }
        let s = probs.sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(MODULE, format!("probabilities sum to {s}")));
        }
        Ok(ProbDist(probs))
    }

    pub fn uniform(k: usize) -> Self {
        ProbDist(Array1::from_elem(k, 1.0 / k as f64))
    }

    /// Softmax of log-weights.
    pub fn from_log_weights(logw: ArrayView1<f64>) -> Self {
        let lse = log_sum_exp(logw.iter().copied());
        ProbDist(logw.mapv(|l| (l - lse).exp()))
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// Prototype vectors together with the running teacher center.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `K x D`; unit rows in uniform mode, free norms in vMF mode.
    pub prototypes: Array2<f64>,
    pub mode: AssignMode,
    /// Logit-space center (uniform) or probability-space center (vMF).
    pub center: Array1<f64>,
    pub center_momentum: f64,
}

impl PrototypeBank {
    pub fn new(prototypes: Array2<f64>, mode: AssignMode, center_momentum: f64) -> Result<Self> {
        let k = prototypes.nrows();
        if k < 2 {
            return Err(Error::invalid(MODULE, format!("need at least 2 prototypes, got {k}")));
        }
        if !(0.0..=1.0).contains(&center_momentum) {
            return Err(Error::invalid(MODULE, "center momentum must lie in [0, 1]"));
        }
        let center = match mode {
            AssignMode::Uniform => Array1::zeros(k),
            AssignMode::Vmf => Array1::from_elem(k, 1.0 / k as f64),
        };
        let mut bank = PrototypeBank {
            prototypes,
            mode,
            center,
            center_momentum,
        };
        if mode == AssignMode::Uniform {
            bank.renormalize_prototypes();
        }
        Ok(bank)
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Projects every prototype back to the unit sphere (uniform mode only).
    pub fn renormalize_prototypes(&mut self) {
        if self.mode != AssignMode::Uniform {
            return;
        }
        for mut row in self.prototypes.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
    }

    /// Per-prototype additive log-weight: `log C(|W_k| / tau)` in vMF mode,
    /// zero in uniform mode.
    pub fn log_norm_terms(&self, temperature: f64) -> Array1<f64> {
        match self.mode {
            AssignMode::Uniform => Array1::zeros(self.num_prototypes()),
            AssignMode::Vmf => self
                .prototypes
                .rows()
                .into_iter()
                .map(|w| vmf::log_vmf_normalizer_unchecked(w.dot(&w).sqrt() / temperature, self.dim()))
                .collect(),
        }
    }

    /// Unnormalized log-weights of `z` under the bank's formulation.
    pub fn log_weights(&self, z: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
        self.log_weights_with(z, temperature, &self.log_norm_terms(temperature))
    }

    fn log_weights_with(&self, z: ArrayView1<f64>, temperature: f64, norm_terms: &Array1<f64>) -> Array1<f64> {
        self.prototypes.dot(&z) / temperature + norm_terms
    }
}

fn check_unit(z: ArrayView1<f64>) -> Result<()> {
    let n = z.dot(&z).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::invalid(MODULE, format!("representation norm {n} is not 1")));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(MODULE, format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Distribution of a unit representation over the bank's prototypes.
pub fn assign_semantic(z: ArrayView1<f64>, bank: &PrototypeBank, temperature: f64) -> Result<ProbDist> {
    check_unit(z)?;
    check_temperature(temperature)?;
    if z.len() != bank.dim() {
        return Err(Error::invalid(MODULE, "representation and prototype dims differ"));
    }
    Ok(ProbDist::from_log_weights(bank.log_weights(z, temperature).view()))
}

/// Row-wise assignments for a batch of unit representations; the vMF
/// normalizer terms are computed once.
pub fn assign_batch(z: &Array2<f64>, bank: &PrototypeBank, temperature: f64) -> Result<Vec<ProbDist>> {
    check_temperature(temperature)?;
    let terms = bank.log_norm_terms(temperature);
    z.rows()
        .into_iter()
        .map(|row| {
            check_unit(row)?;
            Ok(ProbDist::from_log_weights(bank.log_weights_with(row, temperature, &terms).view()))
        })
        .collect()
}

/// `-log P_k(z)` and its analytic gradients with respect to `z` and the
/// prototype matrix. The vMF term differentiates through `|W_k|`.
pub fn neg_log_prob_grad(
    z: ArrayView1<f64>,
    bank: &PrototypeBank,
    temperature: f64,
    k: usize,
) -> (f64, Array1<f64>, Array2<f64>) {
    let logw = bank.log_weights(z, temperature);
    let p = ProbDist::from_log_weights(logw.view()).into_inner();
    let lse = log_sum_exp(logw.iter().copied());
    let value = lse - logw[k];
    let mut delta = p;
    delta[k] -= 1.0;

    let grad_z = bank.prototypes.t().dot(&delta) / temperature;
    let mut grad_w = Array2::zeros(bank.prototypes.raw_dim());
    for (j, (mut gw, w)) in grad_w
        .rows_mut()
        .into_iter()
        .zip(bank.prototypes.rows())
        .enumerate()
    {
        gw.assign(&(&z * (delta[j] / temperature)));
        if bank.mode == AssignMode::Vmf {
            let norm = w.dot(&w).sqrt();
            if norm > 0.0 {
                let slope = vmf::log_vmf_normalizer_slope(norm / temperature, bank.dim());
                gw.scaled_add(delta[j] * slope / (temperature * norm), &w);
            }
        }
    }
    (value, grad_z, grad_w)
}

/// Log-probabilities of each row of `z` (`n x D`) over the prototypes `w`
/// (`K x D`) recorded on a tape.
pub fn assign_log_probs_tape(tape: &Tape, z: Var, w: Var, temperature: f64, mode: AssignMode) -> Var {
    let wt = tape.transpose(w);
    let logits = tape.matmul(z, wt);
    let mut logits = tape.scale(logits, 1.0 / temperature);
    if mode == AssignMode::Vmf {
        let dim = tape.value(w).ncols();
        let terms = tape.vmf_log_norm_rows(w, temperature, dim);
        logits = tape.add_row(logits, terms);
    }
    tape.log_softmax_rows(logits)
}

/// Raw teacher output before centering: logits `<W_k, z>` in uniform mode,
/// temperature-scaled vMF probabilities in vMF mode.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherOutput {
    Logits(Array1<f64>),
    Probs(ProbDist),
}

pub fn teacher_output(z: ArrayView1<f64>, bank: &PrototypeBank, temperature: f64) -> Result<TeacherOutput> {
    check_unit(z)?;
    Ok(match bank.mode {
        AssignMode::Uniform => TeacherOutput::Logits(bank.prototypes.dot(&z)),
        AssignMode::Vmf => TeacherOutput::Probs(assign_semantic(z, bank, temperature)?),
    })
}

pub fn teacher_outputs(z: &Array2<f64>, bank: &PrototypeBank, temperature: f64) -> Result<Vec<TeacherOutput>> {
    Ok(match bank.mode {
        AssignMode::Uniform => z
            .rows()
            .into_iter()
            .map(|row| {
                check_unit(row)?;
                Ok(TeacherOutput::Logits(bank.prototypes.dot(&row)))
            })
            .collect::<Result<_>>()?,
        AssignMode::Vmf => assign_batch(z, bank, temperature)?
            .into_iter()
            .map(TeacherOutput::Probs)
            .collect(),
    })
}

/// Teacher centering: `softmax((logits - c) / tau)` in uniform mode,
/// `p_k / c_k` renormalized in vMF mode.
pub fn apply_centering(raw: &TeacherOutput, bank: &PrototypeBank, teacher_temperature: f64) -> Result<ProbDist> {
    match (raw, bank.mode) {
        (TeacherOutput::Logits(l), AssignMode::Uniform) => {
            check_temperature(teacher_temperature)?;
            let shifted = (l - &bank.center) / teacher_temperature;
            Ok(ProbDist::from_log_weights(shifted.view()))
        }
        (TeacherOutput::Probs(p), AssignMode::Vmf) => {
            if bank.center.iter().any(|&c| !(c > 0.0)) {
                return Err(Error::invalid(MODULE, "probability-space center must be > 0"));
            }
            let mut q = p.probs() / &bank.center;
            let s = q.sum();
            q.mapv_inplace(|v| v / s);
            Ok(ProbDist(q))
        }
        _ => Err(Error::invalid(MODULE, "teacher output does not match bank mode")),
    }
}

impl PrototypeBank {
    /// EMA of the batch-mean teacher output into the center.
    pub fn update_center(&mut self, outputs: &[TeacherOutput]) -> Result<()> {
        if outputs.is_empty() {
            return Err(Error::invalid(MODULE, "center update needs a nonempty batch"));
        }
        let mut mean = Array1::<f64>::zeros(self.num_prototypes());
        for out in outputs {
            match (out, self.mode) {
                (TeacherOutput::Logits(l), AssignMode::Uniform) => mean += l,
                (TeacherOutput::Probs(p), AssignMode::Vmf) => mean += p.probs(),
                _ => return Err(Error::invalid(MODULE, "teacher output does not match bank mode")),
            }
        }
        mean /= outputs.len() as f64;
        let m = self.center_momentum;
        self.center = &self.center * m + &mean * (1.0 - m);
        if self.mode == AssignMode::Vmf {
            let s = self.center.sum();
            self.center /= s;
        }
        Ok(())
    }
}

/// Teacher temperature warmup plus a constant student temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TempSchedule {
    pub teacher_start: f64,
    pub teacher_end: f64,
    pub warmup_steps: usize,
    pub student: f64,
}

impl Default for TempSchedule {
    fn default() -> Self {
        TempSchedule {
            teacher_start: 0.04,
            teacher_end: 0.07,
            warmup_steps: 30,
            student: 0.1,
        }
    }
}

impl TempSchedule {
    /// Linear from `teacher_start` to `teacher_end` over the warmup, then held.
    pub fn teacher(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            return self.teacher_end;
        }
        let frac = step as f64 / self.warmup_steps as f64;
        self.teacher_start + (self.teacher_end - self.teacher_start) * frac
    }
}

/// Mean of row distributions; used for batch statistics in tests and logs.
pub fn mean_distribution(dists: &[ProbDist]) -> Option<Array1<f64>> {
    if dists.is_empty() {
        return None;
    }
    let rows: Vec<_> = dists.iter().map(|d| d.probs().view()).collect();
    let stacked = ndarray::stack(Axis(0), &rows).ok()?;
    stacked.mean_axis(Axis(0))
}
