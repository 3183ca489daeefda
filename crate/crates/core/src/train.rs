//! The training loop.
//!
//! One step, in order: sample scenes and two views each, complete sparse
//! depth, run the teacher on both views, cluster the teacher tokens jointly,
//! pool objects, build the loss against the queue as it stood before this
//! step, update the student, EMA the teacher, update the center, and push the
//! batch's teacher objects into the queue.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{stack, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::cluster::{cluster_joint_views, pool_objects, ClusterAssignment, ClusterParams, ObjectReps, TokenField, ViewId};
use crate::config::RunConfig;
use crate::depth::{complete_depth, pool_token_depth, TokenDepths};
use crate::encoder::{
    encode, encode_tape, Encoded, init_params, patchify, project_rows, project_tape, ModelPair, ParamSet, Schedules, PROTOTYPES,
};
use crate::error::{Error, Result};
use crate::objective::{teacher_object_targets, LossBreakdown, LossPlan, ObjectQueue, RowKind, StudentRow, TeacherImage};
use crate::optim::AdamW;
use crate::semantic::{assign_log_probs_tape, teacher_outputs, PrototypeBank};
use crate::synth::{generate_scene, sample_sparse_depth, sample_views, View};

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th training scene. Every epoch of `epoch_scenes`
/// draws fresh scenes.
pub fn train_scene_seed(config: &RunConfig, index: u64) -> u64 {
    let e = config.epoch_scenes as u64;
    mix_seed(mix_seed(config.data_seed, index / e), index % e)
}

/// Seed of the `index`-th held-out scene.
pub fn eval_scene_seed(config: &RunConfig, index: u64) -> u64 {
    mix_seed(mix_seed(config.eval_seed, u64::MAX), index)
}

pub fn schedules_for(config: &RunConfig) -> Schedules {
    let mut s = Schedules::for_steps(config.steps);
    s.momentum = config.momentum;
    s.weight_decay = config.weight_decay;
    s.temps.teacher_start = config.teacher_temp.0;
    s.temps.teacher_end = config.teacher_temp.1;
    s.temps.student = config.student_temp;
    s.temps.warmup_steps = (config.teacher_warmup_frac * config.steps as f64).ceil() as usize;
    s.lr_peak = config.lr_peak;
    s.lr_min = config.lr_min;
    s.lr_warmup_steps = (config.lr_warmup_frac * config.steps as f64).ceil() as usize;
    s
}

/// One image of a batch up to the first clustering call.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub scene_seed: u64,
    pub views: [View; 2],
    pub token_depths: [TokenDepths; 2],
    pub cluster_seed: u64,
}

/// Teacher outputs for one image.
#[derive(Clone, Debug)]
pub struct TeacherPass {
    pub fields: [TokenField; 2],
    pub assignment: ClusterAssignment,
    pub image: TeacherImage,
}

/// Complete mutable training state; this is what a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: RunConfig,
    pub pair: ModelPair,
    /// Teacher center (logit space or probability space by mode).
    pub center: Array1<f64>,
    pub optimizer: AdamW,
    pub queue: ObjectQueue,
    pub rng: ChaCha8Rng,
    /// Index of the next step to run.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Trainer> {
        config.validate()?;
        let student = init_params(&config.encoder, config.num_prototypes, config.seed)?;
        let bank = PrototypeBank::new(student.get(PROTOTYPES).unwrap().clone(), config.mode, config.center_momentum)?;
        Ok(Trainer {
            optimizer: AdamW::new(&student),
            pair: ModelPair::new(student, schedules_for(&config)),
            center: bank.center,
            queue: ObjectQueue::new(config.queue_capacity)?,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x7261_696e)),
            step: 0,
            config,
        })
    }

    fn bank_of(&self, params: &ParamSet) -> Result<PrototypeBank> {
        let mut bank = PrototypeBank::new(
            params.get(PROTOTYPES).unwrap().clone(),
            self.config.mode,
            self.config.center_momentum,
        )?;
        bank.center = self.center.clone();
        Ok(bank)
    }

    /// Teacher prototypes with the current center.
    pub fn teacher_bank(&self) -> Result<PrototypeBank> {
        self.bank_of(&self.pair.teacher)
    }

    pub fn student_bank(&self) -> Result<PrototypeBank> {
        self.bank_of(&self.pair.student)
    }

    /// Samples the next batch: scenes, views, sparse depth and its
    /// completion, pooled token depths. Advances the RNG.
    pub fn prepare_batch(&mut self) -> Result<Vec<PreparedImage>> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let index = (self.step * cfg.batch_size + b) as u64;
            let scene_seed = train_scene_seed(cfg, index);
            let scene = generate_scene(&cfg.scene, scene_seed)?;
            let (va, vb) = sample_views(&scene, &cfg.view, self.rng.random())?;
            let sparse = sample_sparse_depth(&scene, cfg.depth.sparse_fraction, cfg.depth.pattern, self.rng.random())?;
            let dense = complete_depth(&sparse, cfg.depth.kernel_radius, cfg.depth.max_depth)?;
            let da = pool_token_depth(&dense.in_view(&va), &va)?;
            let db = pool_token_depth(&dense.in_view(&vb), &vb)?;
            out.push(PreparedImage {
                scene_seed,
                views: [va, vb],
                token_depths: [da, db],
                cluster_seed: self.rng.random(),
            });
        }
        Ok(out)
    }

    fn teacher_encode(&self, img: &PreparedImage) -> Result<[Encoded; 2]> {
        let enc = &self.config.encoder;
        Ok([
            encode(&img.views[0], &self.pair.teacher, enc)?,
            encode(&img.views[1], &self.pair.teacher, enc)?,
        ])
    }

    fn fields_of(img: &PreparedImage, encoded: &[Encoded; 2]) -> Result<[TokenField; 2]> {
        let field = |v: usize, id: ViewId| {
            TokenField::new(
                encoded[v].dense.clone(),
                img.views[v].token_positions(),
                img.token_depths[v].clone(),
                id,
            )
        };
        Ok([field(0, ViewId::A)?, field(1, ViewId::B)?])
    }

    /// Teacher token fields for a prepared image. Depth enters here only as
    /// token depths; the clustering call is the first place `depth_beta`
    /// is read.
    pub fn teacher_fields(&self, img: &PreparedImage) -> Result<[TokenField; 2]> {
        Self::fields_of(img, &self.teacher_encode(img)?)
    }

    pub fn teacher_pass(&self, img: &PreparedImage) -> Result<TeacherPass> {
        let teacher = &self.pair.teacher;
        let encoded = self.teacher_encode(img)?;
        let fields = Self::fields_of(img, &encoded)?;
        let params = ClusterParams {
            seed: img.cluster_seed,
            ..self.config.cluster
        };
        let assignment = cluster_joint_views(&fields[0], &fields[1], &params)?;
        let feats = [pool_objects(&fields[0], &assignment)?, pool_objects(&fields[1], &assignment)?];
        let projected = |o: &ObjectReps| ObjectReps {
            reps: project_rows(&o.reps, teacher),
            cluster_ids: o.cluster_ids.clone(),
        };
        let globals = project_rows(&stack![Axis(0), encoded[0].global, encoded[1].global], teacher);
        let image = TeacherImage {
            global: [globals.row(0).to_owned(), globals.row(1).to_owned()],
            objects: [projected(&feats[0]), projected(&feats[1])],
            object_features: feats,
            spanning: assignment.spanning_clusters(),
        };
        Ok(TeacherPass {
            fields,
            assignment,
            image,
        })
    }

    /// Runs one optimization step and returns its loss breakdown.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let step = self.step;
        if step >= self.config.steps {
            return Err(Error::invalid("train", format!("step {step} is past the configured {} steps", self.config.steps)));
        }
        let sched = self.pair.schedules;
        let tau_t = sched.teacher_temp(step);
        let tau_s = self.config.student_temp;
        let batch = self.prepare_batch()?;
        let teacher_bank = self.teacher_bank()?;
        let passes: Vec<TeacherPass> = batch.iter().map(|img| self.teacher_pass(img)).collect::<Result<_>>()?;

        let tape = Tape::new();
        let pv = self.pair.student.on_tape(&tape);
        let mut parts = Vec::new();
        let mut rows = Vec::new();
        let mut student_ids = Vec::new();
        for (i, (img, pass)) in batch.iter().zip(&passes).enumerate() {
            let mut ids: [Vec<usize>; 2] = Default::default();
            for (v, view) in [ViewId::A, ViewId::B].into_iter().enumerate() {
                let enc = encode_tape(&tape, &pv, &self.config.encoder, patchify(&img.views[v], &self.config.encoder)?)?;
                let labels = pass.assignment.view_labels(view);
                let mut present: Vec<usize> = labels.to_vec();
                present.sort_unstable();
                present.dedup();
                let groups: Vec<Vec<usize>> = present
                    .iter()
                    .map(|&k| (0..labels.len()).filter(|&t| labels[t] == k).collect())
                    .collect();
                let objects = tape.l2_normalize_rows(tape.segment_mean(enc.dense, groups));
                parts.push(enc.global);
                rows.push(StudentRow { image: i, view, kind: RowKind::Global });
                parts.push(objects);
                rows.extend(present.iter().map(|&k| StudentRow { image: i, view, kind: RowKind::Object(k) }));
                ids[v] = present;
            }
            student_ids.push(ids);
        }
        let reps = tape.concat_rows(&parts);
        let z = project_tape(&tape, &pv, reps);
        let logp = assign_log_probs_tape(&tape, z, pv.var(PROTOTYPES), tau_s, self.config.mode);

        let images: Vec<TeacherImage> = passes.iter().map(|p| p.image.clone()).collect();
        let plan = LossPlan::build(&images, &student_ids, &self.queue, &teacher_bank, tau_t, self.config.cycle_consistent)?;
        let loss = plan.tape_loss(&tape, &rows, logp)?;
        let breakdown = plan.breakdown(&rows, &tape.value(logp))?;
        if !breakdown.total.is_finite() {
            return Err(Error::invalid("objective_engine", format!("non-finite loss at step {step}")));
        }
        let grads = tape.backward(loss);
        let g: Vec<Array2<f64>> = pv
            .vars
            .iter()
            .zip(self.pair.student.tensors())
            .map(|(v, t)| grads.get_or_zeros(*v, t))
            .collect();
        drop(tape);

        self.optimizer
            .step(&mut self.pair.student, &g, sched.lr(step), sched.weight_decay(step))?;
        if self.config.keeps_unit_prototypes() {
            let w = self.pair.student.get_mut(PROTOTYPES).unwrap();
            for mut row in w.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
        }
        self.pair.ema_update(step)?;

        // one center over every teacher output of the step, globals and objects
        let mut raw = Vec::new();
        for img in &images {
            let g = stack![Axis(0), img.global[0], img.global[1]];
            raw.extend(teacher_outputs(&g, &teacher_bank, tau_t)?);
            for o in &img.objects {
                raw.extend(teacher_outputs(&o.reps, &teacher_bank, tau_t)?);
            }
        }
        let mut centered = teacher_bank.clone();
        centered.update_center(&raw)?;
        self.center = centered.center;

        for img in &images {
            let targets = teacher_object_targets(img, &teacher_bank, tau_t)?;
            for v in 0..2 {
                self.queue.queue_update(&img.object_features[v], &targets[v])?;
            }
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs until `until` (exclusive) or the configured horizon, writing one
    /// CSV row per step to `log` and checkpoints at the configured cadence.
    pub fn run(&mut self, until: usize, mut log: Option<&mut dyn Write>, checkpoint_dir: Option<&Path>) -> Result<Vec<LossBreakdown>> {
        let until = until.min(self.config.steps);
        let mut out = Vec::new();
        while self.step < until {
            let step = self.step;
            let b = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", b.csv_row(step)).map_err(|e| Error::io("loss log", e))?;
            }
            if let (Some(dir), every) = (checkpoint_dir, self.config.checkpoint_every) {
                if every > 0 && self.step % every == 0 {
                    self.save(&dir.join(format!("checkpoint-{:06}.bin", self.step)))?;
                }
            }
            out.push(b);
        }
        Ok(out)
    }
}

/// Trains a configuration to completion under its output directory:
/// `losses.csv`, `config.txt`, periodic checkpoints and `checkpoint.bin`.
pub fn train(config: RunConfig) -> Result<(Trainer, PathBuf)> {
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join("config.txt"), config.to_text()).map_err(|e| Error::io(dir.join("config.txt"), e))?;
    let mut trainer = Trainer::new(config)?;
    let log_path = dir.join("losses.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    let steps = trainer.config.steps;
    trainer.run(steps, Some(&mut log), Some(&dir))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = dir.join("checkpoint.bin");
    trainer.save(&ckpt)?;
    Ok((trainer, ckpt))
}
