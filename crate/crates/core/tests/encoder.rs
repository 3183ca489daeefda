mod common;

use common::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use scene_ssl::autodiff::Tape;
use scene_ssl::encoder::*;
use scene_ssl::synth::{CropBox, View};

fn small() -> EncoderConfig {
    EncoderConfig {
        view_size: 16,
        patch_size: 4,
        input_channels: 3,
        embed_dim: 6,
        depth: 1,
        token_hidden: 5,
        channel_hidden: 7,
        head_hidden: 7,
        out_dim: 5,
    }
}

fn random_view(cfg: &EncoderConfig, seed: u64) -> View {
    let mut r = rng(seed);
    View {
        pixels: Array3::from_shape_fn((cfg.view_size, cfg.view_size, cfg.input_channels), |_| r.random()),
        crop_box: CropBox::FULL,
        flip: false,
        token_grid: (cfg.grid(), cfg.grid()),
        patch_size: cfg.patch_size,
    }
}

#[test]
fn init_and_forward_are_deterministic() {
    let cfg = small();
    let a = init_params(&cfg, 8, 5).unwrap();
    assert_eq!(a, init_params(&cfg, 8, 5).unwrap());
    assert_ne!(a, init_params(&cfg, 8, 6).unwrap());
    let v = random_view(&cfg, 1);
    assert_eq!(encode(&v, &a, &cfg).unwrap(), encode(&v, &a, &cfg).unwrap());
}

#[test]
fn prototypes_start_on_the_sphere_and_gains_at_one() {
    let p = init_params(&EncoderConfig::default(), 256, 0).unwrap();
    for row in p.get(PROTOTYPES).unwrap().rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-12);
    }
    assert!(p.get("norm.g").unwrap().iter().all(|&g| g == 1.0));
    assert!(p.get("head.b3").unwrap().iter().all(|&b| b == 0.0));
}

#[test]
fn without_mixing_blocks_tokens_follow_their_patches() {
    let cfg = EncoderConfig { depth: 0, ..small() };
    let params = init_params(&cfg, 8, 2).unwrap();
    let v = random_view(&cfg, 3);
    // swap the contents of patches (0,0) and (2,3)
    let mut w = v.clone();
    let p = cfg.patch_size;
    for dy in 0..p {
        for dx in 0..p {
            for c in 0..3 {
                let a = [dy, dx, c];
                let b = [2 * p + dy, 3 * p + dx, c];
                w.pixels[a] = v.pixels[b];
                w.pixels[b] = v.pixels[a];
            }
        }
    }
    let ev = encode(&v, &params, &cfg).unwrap();
    let ew = encode(&w, &params, &cfg).unwrap();
    let (t0, t1) = (0, 2 * cfg.grid() + 3);
    for t in 0..cfg.num_tokens() {
        let src = if t == t0 { t1 } else if t == t1 { t0 } else { t };
        assert_eq!(ew.dense.row(t), ev.dense.row(src));
    }
    let d = (&ew.global - &ev.global).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(d < 1e-12, "global moved by {d}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let cfg = small();
    let params = init_params(&cfg, 8, 4).unwrap();
    let patches = patchify(&random_view(&cfg, 5), &cfg).unwrap();
    let mut r = rng(6);
    let rd: Array2<f64> = Array2::from_shape_fn((cfg.num_tokens(), cfg.out_dim), |_| StandardNormal.sample(&mut r));
    let rg: Array2<f64> = Array2::from_shape_fn((1, cfg.embed_dim), |_| StandardNormal.sample(&mut r));
    // scalar probe touching the dense head output and the global vector
    let probe = |p: &ParamSet| {
        let tape = Tape::new();
        let pv = p.on_tape(&tape);
        let enc = encode_tape(&tape, &pv, &cfg, patches.clone()).unwrap();
        let z = project_tape(&tape, &pv, enc.dense);
        let s = tape.add(tape.weighted_sum(z, rd.clone()), tape.weighted_sum(enc.global, rg.clone()));
        let grads = tape.backward(s);
        let g: Vec<Array2<f64>> = pv.vars.iter().zip(p.tensors()).map(|(v, t)| grads.get_or_zeros(*v, t)).collect();
        (tape.scalar(s), g)
    };
    let (_, grads) = probe(&params);
    for (i, name) in params.names().iter().enumerate() {
        let fd = fd_grad(&params.tensors()[i], 1e-5, |t| {
            let mut p = params.clone();
            p.tensors_mut()[i].assign(t);
            probe(&p).0
        });
        let e = rel_err(&grads[i], &fd);
        assert!(e < 1e-4, "{name}: rel err {e}");
    }
}

#[test]
fn zero_final_layer_gives_one_direction() {
    let cfg = small();
    let mut params = init_params(&cfg, 8, 7).unwrap();
    params.get_mut("head.w3").unwrap().fill(0.0);
    let b3 = Array2::from_shape_vec((1, 5), vec![0.3, -1.0, 2.0, 0.0, 0.5]).unwrap();
    params.get_mut("head.b3").unwrap().assign(&b3);
    let dir = &b3.row(0) / b3.row(0).dot(&b3.row(0)).sqrt();
    let mut r = rng(8);
    let x = random_unit_rows(50, cfg.embed_dim, &mut r);
    for row in project_rows(&x, &params).rows() {
        let d = (&row - &dir).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-15);
    }
}

#[test]
fn head_outputs_are_unit_vectors() {
    let cfg = EncoderConfig::default();
    let params = init_params(&cfg, 16, 9).unwrap();
    let mut r = rng(10);
    let x: Array2<f64> = Array2::from_shape_fn((10_000, cfg.embed_dim), |_| {
        let e: f64 = StandardNormal.sample(&mut r);
        3.0 * e
    });
    for row in project_rows(&x, &params).rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn schedules_hit_their_endpoints() {
    let s = Schedules::for_steps(1000);
    let (m, tau, wd) = s.at(0);
    assert!((m - 0.996).abs() < 1e-15 && (tau - 0.04).abs() < 1e-15 && (wd - 0.04).abs() < 1e-15);
    let (m, tau, wd) = s.at(999);
    assert!((m - 1.0).abs() < 1e-15 && (tau - 0.07).abs() < 1e-15 && (wd - 0.4).abs() < 1e-15);
    // temperature warmup ends at 30% of the run
    assert_eq!(s.teacher_temp(300), 0.07);
    assert!(s.teacher_temp(299) < 0.07);
    assert!((s.teacher_temp(150) - 0.055).abs() < 1e-15);
    // learning rate warms up linearly then decays to the floor
    assert!((s.lr(99) - 1e-3).abs() < 1e-15);
    assert!((s.lr(999) - 1e-5).abs() < 1e-15);
    let lrs: Vec<f64> = (100..1000).map(|t| s.lr(t)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn ema_extremes_are_fixed_points() {
    let cfg = small();
    let student = init_params(&cfg, 8, 11).unwrap();
    let teacher = init_params(&cfg, 8, 12).unwrap();
    let mut pair = ModelPair::from_parts(student.clone(), teacher.clone(), Schedules::for_steps(10)).unwrap();
    pair.ema_with(1.0);
    assert_eq!(pair.teacher, teacher);
    pair.ema_with(0.0);
    assert_eq!(pair.teacher, student);
    assert_eq!(ModelPair::new(student.clone(), Schedules::for_steps(10)).teacher, student);
    let other = init_params(&EncoderConfig { depth: 0, ..cfg }, 8, 0).unwrap();
    assert!(ModelPair::from_parts(student, other, Schedules::for_steps(10)).is_err());
}

fn distance(a: &ParamSet, b: &ParamSet) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| (x - y).mapv(|v| v * v).sum())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn ema_contracts_geometrically_toward_a_fixed_student() {
    let cfg = small();
    let student = init_params(&cfg, 8, 13).unwrap();
    let teacher = init_params(&cfg, 8, 14).unwrap();
    for m in [0.5, 0.9, 0.996] {
        let mut pair = ModelPair::from_parts(student.clone(), teacher.clone(), Schedules::for_steps(10)).unwrap();
        let d0 = distance(&pair.teacher, &student);
        for t in 1..=50 {
            pair.ema_with(m);
            let want = m.powi(t) * d0;
            assert!((distance(&pair.teacher, &student) - want).abs() <= 1e-9 * d0.max(1.0), "m {m} step {t}");
        }
    }
}

#[test]
fn scheduled_ema_stops_at_the_horizon() {
    let cfg = small();
    let mut pair = ModelPair::new(init_params(&cfg, 8, 15).unwrap(), Schedules::for_steps(4));
    assert!((pair.ema_update(0).unwrap() - 0.996).abs() < 1e-15);
    assert!((pair.ema_update(3).unwrap() - 1.0).abs() < 1e-15);
    assert!(pair.ema_update(4).is_err());
}

#[test]
fn mismatched_views_are_rejected() {
    let cfg = small();
    let v = random_view(&EncoderConfig { view_size: 32, ..cfg }, 0);
    assert!(patchify(&v, &cfg).is_err());
    assert!(EncoderConfig { patch_size: 5, ..cfg }.validate().is_err());
    assert!(init_params(&cfg, 1, 0).is_err());
}
