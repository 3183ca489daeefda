mod common;

use std::collections::{BTreeMap, VecDeque};

use common::loss_fixture::*;
use common::*;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use scene_ssl::cluster::{ObjectReps, ViewId};
use scene_ssl::encoder::PROTOTYPES;
use scene_ssl::objective::*;
use scene_ssl::semantic::{assign_semantic, AssignMode, PrototypeBank, ProbDist};

fn brute_ce(t: &ProbDist, s: &ProbDist) -> f64 {
    let mut h = 0.0;
    for k in 0..t.len() {
        if t.probs()[k] > 0.0 {
            h -= t.probs()[k] * s.probs()[k].ln();
        }
    }
    h
}

#[test]
fn cross_entropy_matches_the_sum() {
    let mut r = rng(0);
    for _ in 0..50 {
        let t = random_dist(&mut r, 16);
        let s = random_dist(&mut r, 16);
        assert!((cross_entropy(&t, &s) - brute_ce(&t, &s)).abs() < 1e-12);
        assert!((cross_entropy(&t, &t) - t.entropy()).abs() < 1e-12);
        // Gibbs
        assert!(cross_entropy(&t, &s) >= t.entropy() - 1e-12);
    }
    let u = ProbDist::uniform(5);
    assert!((cross_entropy(&u, &u) - 5f64.ln()).abs() < 1e-15);
}

#[test]
fn global_term_with_equal_embeddings_is_the_entropy() {
    let mut r = rng(1);
    for _ in 0..20 {
        let b = bank(&mut r, K, 5);
        let z = random_unit(&mut r, 5);
        let temps = Temps { teacher: 0.1, student: 0.1 };
        let banks = Banks { teacher: &b, student: &b };
        let l = global_cv_loss([z.view(), z.view()], [z.view(), z.view()], banks, temps).unwrap();
        let h = assign_semantic(z.view(), &b, 0.1).unwrap().entropy();
        assert!((l - h).abs() < 1e-12, "{l} vs {h}");
    }
}

#[test]
fn global_term_is_symmetric_and_bounded_below() {
    let mut r = rng(2);
    for _ in 0..20 {
        let tb = bank(&mut r, K, 5);
        let sb = bank(&mut r, K, 5);
        let temps = Temps { teacher: 0.05, student: 0.1 };
        let banks = Banks { teacher: &tb, student: &sb };
        let z: Vec<Array1<f64>> = (0..4).map(|_| random_unit(&mut r, 5)).collect();
        let l = global_cv_loss([z[0].view(), z[1].view()], [z[2].view(), z[3].view()], banks, temps).unwrap();
        let swapped = global_cv_loss([z[1].view(), z[0].view()], [z[3].view(), z[2].view()], banks, temps).unwrap();
        assert!((l - swapped).abs() < 1e-12);
        let ta = teacher_target(z[0].view(), &tb, 0.05).unwrap();
        let tbb = teacher_target(z[1].view(), &tb, 0.05).unwrap();
        assert!(l >= 0.5 * (ta.entropy() + tbb.entropy()) - 1e-12);
    }
}

#[test]
fn global_term_grows_when_the_student_contradicts_the_teacher() {
    let mut r = rng(3);
    let w = random_unit_rows(K, 5, &mut r);
    let b = PrototypeBank::new(w.clone(), AssignMode::Vmf, 0.9).unwrap();
    let banks = Banks { teacher: &b, student: &b };
    let temps = Temps { teacher: 0.05, student: 0.05 };
    let a = w.row(0).to_owned();
    let anti = -&a;
    let agree = global_cv_loss([a.view(), a.view()], [a.view(), a.view()], banks, temps).unwrap();
    let disagree = global_cv_loss([a.view(), a.view()], [anti.view(), anti.view()], banks, temps).unwrap();
    assert!(disagree > agree + 10.0, "{agree} {disagree}");
}

#[test]
fn object_term_without_spanning_clusters_is_vacuous() {
    let mut r = rng(4);
    let b = bank(&mut r, K, 5);
    let o = reps(vec![random_unit(&mut r, 5)], vec![2]);
    let banks = Banks { teacher: &b, student: &b };
    let temps = Temps { teacher: 0.05, student: 0.1 };
    assert_eq!(object_cv_loss([&o, &o], [&o, &o], &[], banks, temps).unwrap(), (0.0, 0));
    // a spanning id missing from a student view does not count
    let other = reps(vec![random_unit(&mut r, 5)], vec![3]);
    assert_eq!(object_cv_loss([&o, &o], [&o, &other], &[2], banks, temps).unwrap(), (0.0, 0));
}

#[test]
fn object_term_with_identical_sides_is_the_mean_entropy() {
    let mut r = rng(5);
    let b = bank(&mut r, K, 5);
    let zs: Vec<Array1<f64>> = (0..3).map(|_| random_unit(&mut r, 5)).collect();
    let o = reps(zs.clone(), vec![0, 4, 6]);
    let banks = Banks { teacher: &b, student: &b };
    let temps = Temps { teacher: 0.1, student: 0.1 };
    let (l, n) = object_cv_loss([&o, &o], [&o, &o], &[0, 4, 6], banks, temps).unwrap();
    let h: f64 = zs.iter().map(|z| assign_semantic(z.view(), &b, 0.1).unwrap().entropy()).sum::<f64>() / 3.0;
    assert_eq!(n, 3);
    assert!((l - h).abs() < 1e-12);
}

#[test]
fn queue_is_fifo_with_fixed_capacity() {
    let mut r = rng(6);
    let mut q = ObjectQueue::new(4).unwrap();
    let es: Vec<QueueEntry> = (0..6)
        .map(|_| QueueEntry {
            embedding: random_unit(&mut r, 3),
            assignment: random_dist(&mut r, 4),
        })
        .collect();
    for e in &es {
        q.push(e.clone()).unwrap();
    }
    assert_eq!(q.len(), 4);
    let kept: Vec<&QueueEntry> = q.entries().collect();
    assert_eq!(kept, es[2..].iter().collect::<Vec<_>>());

    let empty = ObjectReps {
        reps: Array2::zeros((0, 3)),
        cluster_ids: vec![],
    };
    let before = q.clone();
    q.queue_update(&empty, &[]).unwrap();
    assert_eq!(q, before);

    assert!(ObjectQueue::new(0).is_err());
    let bad = QueueEntry {
        embedding: Array1::from_elem(3, 1.0),
        assignment: ProbDist::uniform(4),
    };
    assert!(q.push(bad).is_err());
    assert_eq!(ObjectQueue::new(65536).unwrap().warm_level(), 6554);
    assert_eq!(ObjectQueue::new(10).unwrap().warm_level(), 1);
}

#[test]
fn cross_image_term_is_zero_until_the_queue_is_warm() {
    let mut r = rng(7);
    let b = bank(&mut r, K, 5);
    let feats = reps(vec![random_unit(&mut r, 3)], vec![1]);
    let student = reps(vec![random_unit(&mut r, 5)], vec![1]);
    let mut q = ObjectQueue::new(20).unwrap();
    assert_eq!(object_ci_loss(&q, &feats, &student, &b, 0.1, true).unwrap(), (0.0, 0));
    q.push(QueueEntry {
        embedding: random_unit(&mut r, 3),
        assignment: random_dist(&mut r, K),
    })
    .unwrap();
    assert!(!q.is_warm());
    assert_eq!(object_ci_loss(&q, &feats, &student, &b, 0.1, false).unwrap(), (0.0, 0));
    q.push(QueueEntry {
        embedding: random_unit(&mut r, 3),
        assignment: random_dist(&mut r, K),
    })
    .unwrap();
    assert!(q.is_warm());
    assert_eq!(object_ci_loss(&q, &feats, &student, &b, 0.1, false).unwrap().1, 1);
}

#[test]
fn cross_image_term_on_exact_copies_is_the_mean_entropy() {
    let mut r = rng(8);
    let b = bank(&mut r, K, 5);
    let feats = reps((0..3).map(|_| random_unit(&mut r, 6)).collect(), vec![0, 2, 5]);
    let student = reps((0..3).map(|_| random_unit(&mut r, 5)).collect(), vec![0, 2, 5]);
    let mut q = ObjectQueue::new(10).unwrap();
    let mut h = 0.0;
    for i in 0..3 {
        let s = assign_semantic(student.reps.row(i), &b, 0.1).unwrap();
        h += s.entropy() / 3.0;
        q.push(QueueEntry {
            embedding: feats.reps.row(i).to_owned(),
            assignment: s,
        })
        .unwrap();
    }
    let (l, n) = object_ci_loss(&q, &feats, &student, &b, 0.1, true).unwrap();
    assert_eq!(n, 3);
    assert!((l - h).abs() < 1e-12);
}

fn brute_nearest(entries: &[QueueEntry], q: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..entries.len() {
        if entries[i].embedding.dot(q) > entries[best].embedding.dot(q) {
            best = i;
        }
    }
    best
}

#[test]
fn matching_agrees_with_exhaustive_search() {
    let mut r = rng(9);
    for trial in 0..20 {
        let mut q = ObjectQueue::new(30).unwrap();
        for _ in 0..25 {
            q.push(QueueEntry {
                embedding: random_unit(&mut r, 4),
                assignment: random_dist(&mut r, K),
            })
            .unwrap();
        }
        let entries: Vec<QueueEntry> = q.entries().cloned().collect();
        let objs = reps((0..6).map(|_| random_unit(&mut r, 4)).collect(), (0..6).collect());
        let plain = match_objects(&q, &objs, false);
        let cyc = match_objects(&q, &objs, true);
        let mut want_cyc = Vec::new();
        for i in 0..6 {
            let q_i = objs.reps.row(i).to_owned();
            let j = brute_nearest(&entries, &q_i);
            assert_eq!(plain[i], (i, j), "trial {trial}");
            let back = (0..6)
                .fold(0, |b, o| if objs.reps.row(o).dot(&entries[j].embedding) > objs.reps.row(b).dot(&entries[j].embedding) { o } else { b });
            if back == i {
                want_cyc.push((i, j));
            }
        }
        assert_eq!(cyc, want_cyc);
    }
}

#[test]
fn total_is_the_unweighted_sum() {
    let b = total_loss((1.25, 4), (0.5, 7), (2.0, 3));
    assert_eq!(b.total, 3.75);
    assert_eq!(
        b.counts,
        LossCounts {
            global_cv: 4,
            object_cv: 7,
            object_ci: 3
        }
    );
    let b = total_loss((1.0, 2), (0.0, 0), (0.0, 0));
    assert_eq!(b.total, 1.0);
    let row = b.csv_row(17);
    assert_eq!(LossBreakdown::parse_csv_row(&row).unwrap(), (17, b));
    assert_eq!(LossBreakdown::CSV_HEADER.split(',').count(), row.split(',').count());
    assert!(LossBreakdown::parse_csv_row("1,2,3").is_err());
}

#[test]
fn plan_breakdown_matches_the_per_term_functions() {
    for cycle in [false, true] {
        let f = fixture(cycle);
        let fw = forward(&f, &f.tokens, &f.params);
        let z = fw.tape.value(fw.z);
        let at: BTreeMap<StudentRow, usize> = fw.rows.iter().enumerate().map(|(i, r)| (*r, i)).collect();
        let student_bank = PrototypeBank::new(f.params.get(PROTOTYPES).unwrap().clone(), AssignMode::Vmf, 0.9).unwrap();
        let banks = Banks { teacher: &f.teacher_bank, student: &student_bank };
        let temps = Temps { teacher: f.tau_t, student: f.tau_s };

        let (mut g, mut o, mut c) = ((0.0, 0), (0.0, 0), (0.0, 0));
        for (i, img) in f.images.iter().enumerate() {
            let zrow = |view, kind| z.row(at[&StudentRow { image: i, view, kind }]).to_owned();
            let sg = [zrow(ViewId::A, RowKind::Global), zrow(ViewId::B, RowKind::Global)];
            g.0 += global_cv_loss([img.global[0].view(), img.global[1].view()], [sg[0].view(), sg[1].view()], banks, temps).unwrap();
            g.1 += 1;
            let so = [ViewId::A, ViewId::B].map(|view| {
                let ids = present(&f.labels[i][view as usize]);
                reps(ids.iter().map(|&k| zrow(view, RowKind::Object(k))).collect(), ids)
            });
            let (m, n) = object_cv_loss([&img.objects[0], &img.objects[1]], [&so[0], &so[1]], &img.spanning, banks, temps).unwrap();
            o.0 += m * n as f64;
            o.1 += n;
            for v in 0..2 {
                let (m, n) = object_ci_loss(&f.queue, &img.object_features[v], &so[v], &student_bank, f.tau_s, cycle).unwrap();
                c.0 += m * n as f64;
                c.1 += n;
            }
        }
        let mean = |(s, n): (f64, usize)| if n == 0 { (0.0, 0) } else { (s / n as f64, n) };
        let want = total_loss(mean(g), mean(o), mean(c));
        let got = fw.plan.breakdown(&fw.rows, &fw.tape.value(fw.logp)).unwrap();
        assert_eq!(got.counts, want.counts);
        for (a, b) in [
            (got.global_cv, want.global_cv),
            (got.object_cv, want.object_cv),
            (got.object_ci, want.object_ci),
            (got.total, want.total),
        ] {
            assert!((a - b).abs() < 1e-12, "cycle {cycle}: {a} vs {b}");
        }
        // every spanning cluster is pooled on both sides here
        let spans: usize = f.images.iter().map(|im| im.spanning.len()).sum();
        assert_eq!(got.counts.object_cv, spans);
        assert_eq!(got.counts.global_cv, 2);
        assert!(got.counts.object_ci > 0);
        if !cycle {
            let objects: usize = f.images.iter().map(|im| im.object_features[0].len() + im.object_features[1].len()).sum();
            assert_eq!(got.counts.object_ci, objects);
        }
    }
}

#[test]
fn total_gradient_matches_finite_differences() {
    let f = fixture(false);
    let fw = forward(&f, &f.tokens, &f.params);
    let loss = fw.plan.tape_loss(&fw.tape, &fw.rows, fw.logp).unwrap();
    let grads = fw.tape.backward(loss);

    let gx = grads.get_or_zeros(fw.x, &f.tokens);
    let fd = fd_grad(&f.tokens, 1e-5, |t| loss_value(&f, t, &f.params));
    let e = rel_err(&gx, &fd);
    assert!(e < 1e-4, "token grad rel err {e}");

    let w0 = f.params.get(PROTOTYPES).unwrap().clone();
    let gw = grads.get_or_zeros(fw.w, &w0);
    let fd = fd_grad(&w0, 1e-5, |w| {
        let mut p = f.params.clone();
        p.get_mut(PROTOTYPES).unwrap().assign(w);
        loss_value(&f, &f.tokens, &p)
    });
    let e = rel_err(&gw, &fd);
    assert!(e < 1e-4, "prototype grad rel err {e}");
}

#[test]
fn total_gradient_is_the_sum_of_term_gradients() {
    let f = fixture(false);
    let fw = forward(&f, &f.tokens, &f.params);
    let total = fw.plan.tape_loss(&fw.tape, &fw.rows, fw.logp).unwrap();
    let g_total = fw.tape.backward(total).get_or_zeros(fw.x, &f.tokens);
    let mut g_sum = Array2::zeros(f.tokens.raw_dim());
    for term in [Term::GlobalCv, Term::ObjectCv, Term::ObjectCi] {
        let wm = fw.plan.weight_matrix(&fw.rows, K, Some(term)).unwrap();
        let part = fw.tape.weighted_sum(fw.logp, wm);
        g_sum += &fw.tape.backward(part).get_or_zeros(fw.x, &f.tokens);
    }
    let diff = (&g_total - &g_sum).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn plan_rows_are_the_referenced_student_rows() {
    let f = fixture(true);
    let fw = forward(&f, &f.tokens, &f.params);
    let rows = fw.plan.rows();
    assert!(rows.windows(2).all(|w| w[0] < w[1]));
    for r in &rows {
        assert!(fw.rows.contains(r));
    }
    // a missing row is an error, not a silent zero
    assert!(fw.plan.weight_matrix(&rows[1..], K, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn queue_matches_a_ring_buffer_model(cap in 1usize..12, pushes in 0usize..40, seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut q = ObjectQueue::new(cap).unwrap();
        let mut model: VecDeque<QueueEntry> = VecDeque::new();
        for _ in 0..pushes {
            let e = QueueEntry { embedding: random_unit(&mut r, 3), assignment: random_dist(&mut r, 4) };
            q.push(e.clone()).unwrap();
            model.push_back(e);
            if model.len() > cap {
                model.pop_front();
            }
        }
        prop_assert_eq!(q.len(), model.len());
        prop_assert!(q.entries().eq(model.iter()));
        prop_assert_eq!(q.is_warm(), model.len() >= cap.div_ceil(10));
    }
}
