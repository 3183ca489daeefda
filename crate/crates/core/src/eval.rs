//! Held-out evaluation: teacher clustering against ground-truth masks, a
//! linear probe on frozen token features, and segment-map export.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::autodiff::Tape;
use crate::cluster::{cluster_joint_views, ClusterAssignment, ClusterParams, TokenField, ViewId};
use crate::config::RunConfig;
use crate::depth::{complete_depth, pool_token_depth, DenseDepthMap};
use crate::encoder::{encode, ParamSet};
use crate::error::{Error, Result};
use crate::metrics::{ari, confusion_matrix, mean_iou, nmi, per_class_iou, per_class_recall, purity};
use crate::optim::AdamW;
use crate::synth::{generate_scene, make_view, sample_sparse_depth, sample_views, CropBox, Scene, SceneConfig, View};
use crate::train::{eval_scene_seed, mix_seed};

/// The bottom frequency tercile of object classes (at least one class),
/// rarest first. The background is never rare.
pub fn rare_classes(scene: &SceneConfig) -> Vec<usize> {
    let f = scene.class_frequencies();
    let mut ids: Vec<usize> = (1..scene.num_classes).collect();
    ids.sort_by(|&a, &b| f[a - 1].total_cmp(&f[b - 1]).then(b.cmp(&a)));
    ids.truncate((scene.num_classes - 1).div_ceil(3));
    ids
}

fn mean_of(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One held-out scene after teacher clustering of its two views.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub scene: Scene,
    pub views: [View; 2],
    pub depth: DenseDepthMap,
    pub assignment: ClusterAssignment,
    /// Token-majority class of every joint token, view A first.
    pub truth: Vec<usize>,
}

/// Views, depth and teacher clustering of held-out scene `index`. Fully
/// determined by the config and the index.
pub fn cluster_eval_scene(teacher: &ParamSet, config: &RunConfig, index: usize) -> Result<EvalScene> {
    let cfg = config;
    let seed = eval_scene_seed(cfg, index as u64);
    let scene = generate_scene(&cfg.scene, seed)?;
    let (va, vb) = sample_views(&scene, &cfg.view, mix_seed(seed, 1))?;
    let sparse = sample_sparse_depth(&scene, cfg.depth.sparse_fraction, cfg.depth.pattern, mix_seed(seed, 2))?;
    let depth = complete_depth(&sparse, cfg.depth.kernel_radius, cfg.depth.max_depth)?;
    let mut fields = Vec::new();
    let mut truth = Vec::new();
    for (view, id) in [(&va, ViewId::A), (&vb, ViewId::B)] {
        let e = encode(view, teacher, &cfg.encoder)?;
        let depths = pool_token_depth(&depth.in_view(view), view)?;
        fields.push(TokenField::new(e.dense, view.token_positions(), depths, id)?);
        truth.extend(view.token_labels(&scene.class_mask, cfg.scene.num_classes));
    }
    let params = ClusterParams {
        seed: mix_seed(seed, 3),
        ..cfg.cluster
    };
    let assignment = cluster_joint_views(&fields[0], &fields[1], &params)?;
    Ok(EvalScene {
        scene,
        views: [va, vb],
        depth,
        assignment,
        truth,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    /// Per-scene scores averaged over scenes.
    pub nmi: f64,
    pub ari: f64,
    pub purity: f64,
    /// Token recall per class over all scenes, `None` for absent classes.
    pub per_class_recall: Vec<Option<f64>>,
    pub rare_classes: Vec<usize>,
    pub rare_recall: Option<f64>,
    pub scenes: usize,
}

/// Teacher clustering on `config.eval_scenes` held-out scenes, scored
/// against the token-majority class of each token.
pub fn evaluate_clustering(teacher: &ParamSet, config: &RunConfig) -> Result<ClusterReport> {
    let cfg = config;
    let m = cfg.cluster.num_clusters;
    let mut sums = [0.0; 3];
    let mut all_pred = Vec::new();
    let mut all_truth = Vec::new();
    for i in 0..cfg.eval_scenes {
        let ev = cluster_eval_scene(teacher, cfg, i)?;
        let (asg, truth) = (ev.assignment, ev.truth);
        sums[0] += nmi(&asg.labels, &truth);
        sums[1] += ari(&asg.labels, &truth);
        sums[2] += purity(&asg.labels, &truth);
        all_pred.extend(asg.labels.iter().map(|&l| i * m + l));
        all_truth.extend(truth);
    }
    let n = cfg.eval_scenes as f64;
    let recall = per_class_recall(&all_pred, &all_truth, cfg.scene.num_classes);
    let rare = rare_classes(&cfg.scene);
    Ok(ClusterReport {
        nmi: sums[0] / n,
        ari: sums[1] / n,
        purity: sums[2] / n,
        rare_recall: mean_of(rare.iter().map(|&c| recall[c])),
        per_class_recall: recall,
        rare_classes: rare,
        scenes: cfg.eval_scenes,
    })
}

/// Full, unflipped view of a scene.
pub fn full_view(scene: &Scene, config: &RunConfig) -> Result<View> {
    make_view(scene, CropBox::FULL, false, &config.view)
}

/// Frozen dense features and token-majority labels of full views.
pub fn token_features(params: &ParamSet, config: &RunConfig, seeds: &[u64]) -> Result<(Array2<f64>, Vec<usize>)> {
    let d = config.encoder.embed_dim;
    let p = config.encoder.num_tokens();
    let mut x = Array2::zeros((seeds.len() * p, d));
    let mut y = Vec::with_capacity(seeds.len() * p);
    for (i, &seed) in seeds.iter().enumerate() {
        let scene = generate_scene(&config.scene, seed)?;
        let view = full_view(&scene, config)?;
        let e = encode(&view, params, &config.encoder)?;
        x.slice_mut(ndarray::s![i * p..(i + 1) * p, ..]).assign(&e.dense);
        y.extend(view.token_labels(&scene.class_mask, config.scene.num_classes));
    }
    Ok((x, y))
}

/// A linear softmax classifier on token features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearProbe {
    /// Full-batch Adam on softmax cross-entropy, from zero weights.
    pub fn fit(x: &Array2<f64>, y: &[usize], num_classes: usize, steps: usize, lr: f64) -> Result<LinearProbe> {
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(Error::invalid("linear_probe", "features and labels must be nonempty and aligned"));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid("linear_probe", format!("label {bad} out of range")));
        }
        let n = x.nrows() as f64;
        let mut target = Array2::zeros((x.nrows(), num_classes));
        for (i, &c) in y.iter().enumerate() {
            target[[i, c]] = -1.0 / n;
        }
        let mut params = ParamSet::new(
            vec!["probe.w".into(), "probe.b".into()],
            vec![Array2::zeros((x.ncols(), num_classes)), Array2::zeros((1, num_classes))],
        )?;
        let mut opt = AdamW::new(&params);
        for _ in 0..steps {
            let tape = Tape::new();
            let pv = params.on_tape(&tape);
            let xs = tape.leaf(x.clone());
            let logits = tape.add_row(tape.matmul(xs, pv.vars[0]), pv.vars[1]);
            let loss = tape.weighted_sum(tape.log_softmax_rows(logits), target.clone());
            let g = tape.backward(loss);
            let grads: Vec<Array2<f64>> = pv
                .vars
                .iter()
                .zip(params.tensors())
                .map(|(v, t)| g.get_or_zeros(*v, t))
                .collect();
            opt.step(&mut params, &grads, lr, 0.0)?;
        }
        Ok(LinearProbe {
            weights: params.tensors()[0].clone(),
            bias: params.tensors()[1].row(0).to_owned(),
        })
    }

    /// Argmax class per row; ties go to the lower class id.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let logits = x.dot(&self.weights) + &self.bias;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub rare_classes: Vec<usize>,
    pub rare_iou: Option<f64>,
    pub confusion: Array2<u64>,
}

impl ProbeReport {
    pub fn from_predictions(pred: &[usize], truth: &[usize], scene: &SceneConfig) -> ProbeReport {
        let confusion = confusion_matrix(pred, truth, scene.num_classes);
        let iou = per_class_iou(&confusion);
        let rare = rare_classes(scene);
        ProbeReport {
            miou: mean_iou(&iou),
            rare_iou: mean_of(rare.iter().map(|&c| iou[c])),
            per_class_iou: iou,
            rare_classes: rare,
            confusion,
        }
    }
}

pub fn probe_train_seeds(config: &RunConfig) -> Vec<u64> {
    (0..config.probe_train_scenes as u64)
        .map(|i| mix_seed(mix_seed(config.eval_seed, 0x7072_6f62), i))
        .collect()
}

pub fn probe_test_seeds(config: &RunConfig) -> Vec<u64> {
    (0..config.eval_scenes as u64).map(|i| eval_scene_seed(config, i)).collect()
}

/// Trains a linear probe on frozen features of `params` and scores it on
/// the held-out scenes. The parameters are only read.
pub fn linear_probe(params: &ParamSet, config: &RunConfig) -> Result<(ProbeReport, LinearProbe)> {
    let (xtr, ytr) = token_features(params, config, &probe_train_seeds(config))?;
    let (xte, yte) = token_features(params, config, &probe_test_seeds(config))?;
    let probe = LinearProbe::fit(&xtr, &ytr, config.scene.num_classes, config.probe_steps, config.probe_lr)?;
    let pred = probe.predict(&xte);
    Ok((ProbeReport::from_predictions(&pred, &yte, &config.scene), probe))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentFormat {
    /// 8-bit grayscale, one gray level per label id.
    Pgm,
    /// RGB with a fixed palette keyed by label id.
    Ppm,
}

impl SegmentFormat {
    pub fn from_path(path: &Path) -> Option<SegmentFormat> {
        match path.extension()?.to_str()? {
            "pgm" => Some(SegmentFormat::Pgm),
            "ppm" => Some(SegmentFormat::Ppm),
            _ => None,
        }
    }
}

pub fn export_segment_map(labels: &Array2<usize>, path: &Path, format: SegmentFormat) -> Result<()> {
    match format {
        SegmentFormat::Pgm => crate::io::write_label_pgm(path, labels),
        SegmentFormat::Ppm => crate::io::write_ppm_labels(path, labels),
    }
}

/// Nearest-neighbour upsampling of a token label grid to pixels.
pub fn upsample_labels(grid: &Array2<usize>, patch: usize) -> Array2<usize> {
    let (r, c) = grid.dim();
    Array2::from_shape_fn((r * patch, c * patch), |(i, j)| grid[[i / patch, j / patch]])
}

/// Plain-text metrics report.
pub fn report_text(cluster: Option<&ClusterReport>, probe: Option<&ProbeReport>) -> String {
    let mut s = String::new();
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    if let Some(c) = cluster {
        let _ = writeln!(s, "cluster.scenes {}", c.scenes);
        let _ = writeln!(s, "cluster.nmi {:.4}", c.nmi);
        let _ = writeln!(s, "cluster.ari {:.4}", c.ari);
        let _ = writeln!(s, "cluster.purity {:.4}", c.purity);
        for (k, r) in c.per_class_recall.iter().enumerate() {
            let tag = if c.rare_classes.contains(&k) { " rare" } else { "" };
            let _ = writeln!(s, "cluster.recall.{k} {}{tag}", fmt(*r));
        }
        let _ = writeln!(s, "cluster.rare_recall {}", fmt(c.rare_recall));
    }
    if let Some(p) = probe {
        let _ = writeln!(s, "probe.miou {:.4}", p.miou);
        for (k, r) in p.per_class_iou.iter().enumerate() {
            let tag = if p.rare_classes.contains(&k) { " rare" } else { "" };
            let _ = writeln!(s, "probe.iou.{k} {}{tag}", fmt(*r));
        }
        let _ = writeln!(s, "probe.rare_iou {}", fmt(p.rare_iou));
    }
    s
}
