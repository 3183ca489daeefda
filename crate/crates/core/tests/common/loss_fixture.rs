//! A two-image batch for the loss plan, laid out like a training step.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use scene_ssl::autodiff::{Tape, Var};
use scene_ssl::cluster::{ObjectReps, ViewId};
use scene_ssl::encoder::{init_params, project_tape, EncoderConfig, ParamSet, PROTOTYPES};
use scene_ssl::objective::*;
use scene_ssl::semantic::{assign_log_probs_tape, AssignMode, PrototypeBank, ProbDist};

use super::{random_unit_rows, rng};

pub const K: usize = 8;
pub const TOKENS: usize = 8;

pub fn random_dist(r: &mut ChaCha8Rng, k: usize) -> ProbDist {
    let logw = Array1::from_shape_fn(k, |_| { let e: f64 = StandardNormal.sample(r); 2.0 * e });
    ProbDist::from_log_weights(logw.view())
}

pub fn random_unit(r: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    random_unit_rows(1, d, r).row(0).to_owned()
}

pub fn bank(r: &mut ChaCha8Rng, k: usize, d: usize) -> PrototypeBank {
    let mut w = random_unit_rows(k, d, r);
    for mut row in w.rows_mut() {
        row *= r.random_range(0.5..2.0);
    }
    PrototypeBank::new(w, AssignMode::Vmf, 0.9).unwrap()
}

pub fn reps(rows: Vec<Array1<f64>>, ids: Vec<usize>) -> ObjectReps {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ObjectReps {
        reps: ndarray::stack(Axis(0), &views).unwrap(),
        cluster_ids: ids,
    }
}

/// Two images, eight tokens per view, four clusters, eight prototypes.
pub struct Fixture {
    pub params: ParamSet,
    pub tokens: Array2<f64>,
    pub labels: Vec<[Vec<usize>; 2]>,
    pub images: Vec<TeacherImage>,
    pub queue: ObjectQueue,
    pub teacher_bank: PrototypeBank,
    pub tau_t: f64,
    pub tau_s: f64,
    pub cycle: bool,
}

pub fn present(labels: &[usize]) -> Vec<usize> {
    let mut p = labels.to_vec();
    p.sort_unstable();
    p.dedup();
    p
}

pub fn fixture(cycle: bool) -> Fixture {
    let mut r = rng(10);
    let cfg = EncoderConfig {
        embed_dim: 6,
        depth: 0,
        head_hidden: 7,
        out_dim: 5,
        ..EncoderConfig::default()
    };
    let mut params = init_params(&cfg, K, 3).unwrap();
    for mut row in params.get_mut(PROTOTYPES).unwrap().rows_mut() {
        row *= r.random_range(0.5..2.0);
    }
    let labels = vec![
        [vec![0, 0, 1, 1, 2, 2, 0, 1], vec![1, 1, 3, 3, 2, 0, 0, 3]],
        [vec![3, 3, 3, 1, 1, 0, 0, 0], vec![3, 2, 2, 1, 1, 1, 2, 3]],
    ];
    let images = labels
        .iter()
        .map(|l| {
            let ids = [present(&l[0]), present(&l[1])];
            let spanning: Vec<usize> = ids[0].iter().copied().filter(|k| ids[1].contains(k)).collect();
            let side = |d: usize, r: &mut ChaCha8Rng| {
                [0, 1].map(|v| reps(ids[v].iter().map(|_| random_unit(r, d)).collect(), ids[v].clone()))
            };
            TeacherImage {
                global: [random_unit(&mut r, 5), random_unit(&mut r, 5)],
                objects: side(5, &mut r),
                object_features: side(6, &mut r),
                spanning,
            }
        })
        .collect();
    let mut queue = ObjectQueue::new(20).unwrap();
    for _ in 0..10 {
        queue
            .push(QueueEntry {
                embedding: random_unit(&mut r, 6),
                assignment: random_dist(&mut r, K),
            })
            .unwrap();
    }
    let mut teacher_bank = bank(&mut r, K, 5);
    let c = Array1::from_shape_fn(K, |_| r.random_range(0.5..1.5));
    teacher_bank.center = &c / c.sum();
    Fixture {
        params,
        tokens: Array2::from_shape_fn((4 * TOKENS, 6), |_| StandardNormal.sample(&mut r)),
        labels,
        images,
        queue,
        teacher_bank,
        tau_t: 0.05,
        tau_s: 0.1,
        cycle,
    }
}

pub struct Forward {
    pub tape: Tape,
    pub x: Var,
    pub w: Var,
    pub z: Var,
    pub logp: Var,
    pub rows: Vec<StudentRow>,
    pub plan: LossPlan,
}

/// Student forward pass laid out exactly like a training step.
pub fn forward(f: &Fixture, tokens: &Array2<f64>, params: &ParamSet) -> Forward {
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let x = tape.leaf(tokens.clone());
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (i, l) in f.labels.iter().enumerate() {
        let mut per_view: [Vec<usize>; 2] = Default::default();
        for (v, view) in [ViewId::A, ViewId::B].into_iter().enumerate() {
            let start = (2 * i + v) * TOKENS;
            let block = tape.select_rows(x, (start..start + TOKENS).collect());
            let dense = tape.l2_normalize_rows(block);
            let p = present(&l[v]);
            let groups = p.iter().map(|&k| (0..TOKENS).filter(|&t| l[v][t] == k).collect()).collect();
            parts.push(tape.l2_normalize_rows(tape.mean_rows(block)));
            rows.push(StudentRow { image: i, view, kind: RowKind::Global });
            parts.push(tape.l2_normalize_rows(tape.segment_mean(dense, groups)));
            rows.extend(p.iter().map(|&k| StudentRow { image: i, view, kind: RowKind::Object(k) }));
            per_view[v] = p;
        }
        ids.push(per_view);
    }
    let z = project_tape(&tape, &pv, tape.concat_rows(&parts));
    let w = pv.var(PROTOTYPES);
    let logp = assign_log_probs_tape(&tape, z, w, f.tau_s, AssignMode::Vmf);
    let plan = LossPlan::build(&f.images, &ids, &f.queue, &f.teacher_bank, f.tau_t, f.cycle).unwrap();
    Forward { tape, x, w, z, logp, rows, plan }
}

pub fn loss_value(f: &Fixture, tokens: &Array2<f64>, params: &ParamSet) -> f64 {
    let fw = forward(f, tokens, params);
    let loss = fw.plan.tape_loss(&fw.tape, &fw.rows, fw.logp).unwrap();
    fw.tape.scalar(loss)
}
