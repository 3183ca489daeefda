//! The three-term training objective.
//!
//! Teacher distributions enter every term as constants. The student side is
//! evaluated either from plain [`ProbDist`]s or, during training, from a
//! matrix of student log-probabilities on a [`Tape`]; a [`LossPlan`] holds
//! the teacher targets and per-row weights so both paths agree exactly.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array1, Array2, ArrayView1};

use crate::autodiff::{Tape, Var};
use crate::cluster::{ObjectReps, ViewId};
use crate::error::{Error, Result};
use crate::semantic::{apply_centering, assign_semantic, teacher_output, PrototypeBank, ProbDist};

const MODULE: &str = "objective_engine";
const UNIT_TOL: f64 = 1e-6;

/// `-sum_k t_k log s_k`. Terms with `t_k = 0` contribute nothing.
pub fn cross_entropy(teacher: &ProbDist, student: &ProbDist) -> f64 {
    teacher
        .probs()
        .iter()
        .zip(student.probs())
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| -t * s.ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temps {
    pub teacher: f64,
    pub student: f64,
}

/// Teacher and student prototype banks. The teacher bank carries the center.
#[derive(Clone, Copy, Debug)]
pub struct Banks<'a> {
    pub teacher: &'a PrototypeBank,
    pub student: &'a PrototypeBank,
}

/// Centered teacher distribution of a projected embedding.
pub fn teacher_target(z: ArrayView1<f64>, bank: &PrototypeBank, temperature: f64) -> Result<ProbDist> {
    apply_centering(&teacher_output(z, bank, temperature)?, bank, temperature)
}

/// Symmetrized global cross-view term for one image.
pub fn global_cv_loss(
    teacher: [ArrayView1<f64>; 2],
    student: [ArrayView1<f64>; 2],
    banks: Banks,
    temps: Temps,
) -> Result<f64> {
    let t: Vec<ProbDist> = teacher
        .iter()
        .map(|z| teacher_target(*z, banks.teacher, temps.teacher))
        .collect::<Result<_>>()?;
    let s: Vec<ProbDist> = student
        .iter()
        .map(|z| assign_semantic(*z, banks.student, temps.student))
        .collect::<Result<_>>()?;
    Ok(0.5 * (cross_entropy(&t[0], &s[1]) + cross_entropy(&t[1], &s[0])))
}

/// Clusters that appear in both views and survived pooling on both sides.
pub fn qualifying_clusters(spanning: &[usize], teacher: [&ObjectReps; 2], student: [&ObjectReps; 2]) -> Vec<usize> {
    spanning
        .iter()
        .copied()
        .filter(|&k| teacher.iter().chain(student.iter()).all(|o| o.row_of(k).is_some()))
        .collect()
}

/// Object cross-view term for one image: mean over spanning clusters of the
/// symmetrized teacher/student cross-entropy. Returns the value and the
/// number of contributing clusters.
pub fn object_cv_loss(
    teacher: [&ObjectReps; 2],
    student: [&ObjectReps; 2],
    spanning: &[usize],
    banks: Banks,
    temps: Temps,
) -> Result<(f64, usize)> {
    let ks = qualifying_clusters(spanning, teacher, student);
    if ks.is_empty() {
        return Ok((0.0, 0));
    }
    let row = |o: &ObjectReps, k: usize| o.reps.row(o.row_of(k).unwrap()).to_owned();
    let mut sum = 0.0;
    for &k in &ks {
        let ta = teacher_target(row(teacher[0], k).view(), banks.teacher, temps.teacher)?;
        let tb = teacher_target(row(teacher[1], k).view(), banks.teacher, temps.teacher)?;
        let sa = assign_semantic(row(student[0], k).view(), banks.student, temps.student)?;
        let sb = assign_semantic(row(student[1], k).view(), banks.student, temps.student)?;
        sum += 0.5 * (cross_entropy(&ta, &sb) + cross_entropy(&tb, &sa));
    }
    Ok((sum / ks.len() as f64, ks.len()))
}

/// One stored object: a unit teacher embedding and the teacher's centered
/// assignment at insertion time.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub embedding: Array1<f64>,
    pub assignment: ProbDist,
}

/// FIFO memory of past teacher objects for cross-image bootstrapping.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl ObjectQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid(MODULE, "queue capacity must be >= 1"));
        }
        Ok(ObjectQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Size at which cross-image matching switches on: 10% of capacity.
    pub fn warm_level(&self) -> usize {
        self.capacity.div_ceil(10)
    }

    pub fn is_warm(&self) -> bool {
        self.len() >= self.warm_level()
    }

    pub fn push(&mut self, entry: QueueEntry) -> Result<()> {
        let n = entry.embedding.dot(&entry.embedding).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(MODULE, format!("queue embedding norm {n} is not 1")));
        }
        if let Some(first) = self.entries.front() {
            if first.embedding.len() != entry.embedding.len() || first.assignment.len() != entry.assignment.len() {
                return Err(Error::invalid(MODULE, "queue entry shape differs from stored entries"));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// Appends every object row in order, evicting the oldest entries.
    pub fn queue_update(&mut self, objects: &ObjectReps, assignments: &[ProbDist]) -> Result<()> {
        if objects.len() != assignments.len() {
            return Err(Error::invalid(MODULE, "one assignment per object is required"));
        }
        for (row, a) in objects.reps.rows().into_iter().zip(assignments) {
            self.push(QueueEntry {
                embedding: row.to_owned(),
                assignment: a.clone(),
            })?;
        }
        Ok(())
    }

    /// Index (oldest = 0) of the entry with the highest cosine similarity;
    /// ties go to the older entry.
    pub fn nearest(&self, query: ArrayView1<f64>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let s = e.embedding.dot(&query);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn get(&self, index: usize) -> Option<&QueueEntry> {
        self.entries.get(index)
    }
}

fn nearest_row(reps: &Array2<f64>, query: ArrayView1<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in reps.rows().into_iter().enumerate() {
        let s = r.dot(&query);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Queue matches for the objects of one view: `(object row, queue index)`.
/// With `cycle_consistent`, a match is kept only when the retrieved entry's
/// own nearest object in this view is the query.
pub fn match_objects(queue: &ObjectQueue, teacher_objects: &ObjectReps, cycle_consistent: bool) -> Vec<(usize, usize)> {
    if !queue.is_warm() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, q) in teacher_objects.reps.rows().into_iter().enumerate() {
        let Some(j) = queue.nearest(q) else { continue };
        if cycle_consistent {
            let back = nearest_row(&teacher_objects.reps, queue.entries[j].embedding.view());
            if back != Some(i) {
                continue;
            }
        }
        out.push((i, j));
    }
    out
}

/// Cross-image term for the objects of one view. `teacher_objects` are the
/// retrieval embeddings; `student_objects` are projected student embeddings
/// with the same cluster ids. Returns the mean and the number of matches.
pub fn object_ci_loss(
    queue: &ObjectQueue,
    teacher_objects: &ObjectReps,
    student_objects: &ObjectReps,
    student_bank: &PrototypeBank,
    student_temperature: f64,
    cycle_consistent: bool,
) -> Result<(f64, usize)> {
    let matches = match_objects(queue, teacher_objects, cycle_consistent);
    let mut sum = 0.0;
    let mut n = 0;
    for (i, j) in matches {
        let k = teacher_objects.cluster_ids[i];
        let Some(r) = student_objects.row_of(k) else {
            return Err(Error::invalid(MODULE, format!("student has no object for cluster {k}")));
        };
        let s = assign_semantic(student_objects.reps.row(r), student_bank, student_temperature)?;
        sum += cross_entropy(&queue.entries[j].assignment, &s);
        n += 1;
    }
    Ok(if n == 0 { (0.0, 0) } else { (sum / n as f64, n) })
}

/// Number of contributing pairs per term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossCounts {
    pub global_cv: usize,
    pub object_cv: usize,
    pub object_ci: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub global_cv: f64,
    pub object_cv: f64,
    pub object_ci: f64,
    pub total: f64,
    pub counts: LossCounts,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,global_cv,object_cv,object_ci,total,n_global_cv,n_object_cv,n_object_ci";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.global_cv,
            self.object_cv,
            self.object_ci,
            self.total,
            self.counts.global_cv,
            self.counts.object_cv,
            self.counts.object_ci
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<(usize, LossBreakdown)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::format("loss row", format!("expected 8 fields, got {}", f.len())));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|e| Error::format("loss row", e.to_string()));
        let count = |s: &str| s.parse::<usize>().map_err(|e| Error::format("loss row", e.to_string()));
        Ok((
            count(f[0])?,
            LossBreakdown {
                global_cv: real(f[1])?,
                object_cv: real(f[2])?,
                object_ci: real(f[3])?,
                total: real(f[4])?,
                counts: LossCounts {
                    global_cv: count(f[5])?,
                    object_cv: count(f[6])?,
                    object_ci: count(f[7])?,
                },
            },
        ))
    }
}

/// Unweighted sum of the three `(mean, count)` terms.
pub fn total_loss(global_cv: (f64, usize), object_cv: (f64, usize), object_ci: (f64, usize)) -> LossBreakdown {
    LossBreakdown {
        global_cv: global_cv.0,
        object_cv: object_cv.0,
        object_ci: object_ci.0,
        total: global_cv.0 + object_cv.0 + object_ci.0,
        counts: LossCounts {
            global_cv: global_cv.1,
            object_cv: object_cv.1,
            object_ci: object_ci.1,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    GlobalCv,
    ObjectCv,
    ObjectCi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowKind {
    Global,
    Object(usize),
}

/// A student output row addressed by image, view and global/object slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StudentRow {
    pub image: usize,
    pub view: ViewId,
    pub kind: RowKind,
}

/// One `weight * H(teacher, student[row])` contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub row: StudentRow,
    pub teacher: ProbDist,
    pub term: Term,
    pub weight: f64,
}

/// Teacher-side quantities of one image.
#[derive(Clone, Debug)]
pub struct TeacherImage {
    /// Projected global embeddings of views A and B.
    pub global: [Array1<f64>; 2],
    /// Projected object embeddings per view.
    pub objects: [ObjectReps; 2],
    /// Unprojected object representations per view, used for queue lookup.
    pub object_features: [ObjectReps; 2],
    /// Clusters present in both views.
    pub spanning: Vec<usize>,
}

/// Centered teacher distributions of every teacher object, per view, in
/// row order. These are what the queue stores.
pub fn teacher_object_targets(image: &TeacherImage, bank: &PrototypeBank, temperature: f64) -> Result<[Vec<ProbDist>; 2]> {
    let per_view = |o: &ObjectReps| -> Result<Vec<ProbDist>> {
        o.reps.rows().into_iter().map(|r| teacher_target(r, bank, temperature)).collect()
    };
    Ok([per_view(&image.objects[0])?, per_view(&image.objects[1])?])
}

/// The full batch objective as a list of weighted teacher targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossPlan {
    pub targets: Vec<Target>,
    pub counts: LossCounts,
}

impl LossPlan {
    /// Builds the targets for a batch. `object_cv` only pairs clusters for
    /// which the student has an object in both views; `student_objects`
    /// lists, per image and view, the cluster ids the student pooled.
    pub fn build(
        images: &[TeacherImage],
        student_objects: &[[Vec<usize>; 2]],
        queue: &ObjectQueue,
        teacher_bank: &PrototypeBank,
        teacher_temperature: f64,
        cycle_consistent: bool,
    ) -> Result<LossPlan> {
        if images.len() != student_objects.len() {
            return Err(Error::invalid(MODULE, "student objects must be given for every image"));
        }
        let views = [ViewId::A, ViewId::B];
        let mut global = Vec::new();
        let mut object_cv = Vec::new();
        let mut object_ci = Vec::new();
        for (i, (img, sobj)) in images.iter().zip(student_objects).enumerate() {
            let tg = [
                teacher_target(img.global[0].view(), teacher_bank, teacher_temperature)?,
                teacher_target(img.global[1].view(), teacher_bank, teacher_temperature)?,
            ];
            for v in 0..2 {
                global.push((StudentRow { image: i, view: views[1 - v], kind: RowKind::Global }, tg[v].clone()));
            }
            let targets = teacher_object_targets(img, teacher_bank, teacher_temperature)?;
            for &k in &img.spanning {
                let rows = [img.objects[0].row_of(k), img.objects[1].row_of(k)];
                let (Some(ra), Some(rb)) = (rows[0], rows[1]) else { continue };
                if !(sobj[0].contains(&k) && sobj[1].contains(&k)) {
                    continue;
                }
                object_cv.push((
                    StudentRow { image: i, view: ViewId::B, kind: RowKind::Object(k) },
                    targets[0][ra].clone(),
                ));
                object_cv.push((
                    StudentRow { image: i, view: ViewId::A, kind: RowKind::Object(k) },
                    targets[1][rb].clone(),
                ));
            }
            for v in 0..2 {
                for (r, j) in match_objects(queue, &img.object_features[v], cycle_consistent) {
                    let k = img.object_features[v].cluster_ids[r];
                    if !sobj[v].contains(&k) {
                        continue;
                    }
                    object_ci.push((
                        StudentRow { image: i, view: views[v], kind: RowKind::Object(k) },
                        queue.entries[j].assignment.clone(),
                    ));
                }
            }
        }
        let counts = LossCounts {
            global_cv: images.len(),
            object_cv: object_cv.len() / 2,
            object_ci: object_ci.len(),
        };
        let mut targets = Vec::new();
        let mut add = |list: Vec<(StudentRow, ProbDist)>, term: Term, weight: f64| {
            for (row, teacher) in list {
                targets.push(Target { row, teacher, term, weight });
            }
        };
        if counts.global_cv > 0 {
            add(global, Term::GlobalCv, 0.5 / counts.global_cv as f64);
        }
        if counts.object_cv > 0 {
            add(object_cv, Term::ObjectCv, 0.5 / counts.object_cv as f64);
        }
        if counts.object_ci > 0 {
            add(object_ci, Term::ObjectCi, 1.0 / counts.object_ci as f64);
        }
        Ok(LossPlan { targets, counts })
    }

    /// Distinct student rows referenced by the plan, sorted.
    pub fn rows(&self) -> Vec<StudentRow> {
        let mut rows: Vec<StudentRow> = self.targets.iter().map(|t| t.row).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// `-weight * teacher` accumulated into an `n_rows x K` matrix, so that
    /// `sum(W * log_probs)` is the loss. `term = None` takes every term.
    pub fn weight_matrix(&self, rows: &[StudentRow], num_prototypes: usize, term: Option<Term>) -> Result<Array2<f64>> {
        let index: BTreeMap<StudentRow, usize> = rows.iter().enumerate().map(|(i, r)| (*r, i)).collect();
        let mut w = Array2::zeros((rows.len(), num_prototypes));
        for t in self.targets.iter().filter(|t| term.is_none_or(|x| x == t.term)) {
            let Some(&i) = index.get(&t.row) else {
                return Err(Error::invalid(MODULE, format!("no student row for {:?}", t.row)));
            };
            if t.teacher.len() != num_prototypes {
                return Err(Error::invalid(MODULE, "teacher target and student widths differ"));
            }
            w.row_mut(i).scaled_add(-t.weight, t.teacher.probs());
        }
        Ok(w)
    }

    /// Per-term values from student log-probabilities laid out as `rows`.
    pub fn breakdown(&self, rows: &[StudentRow], log_probs: &Array2<f64>) -> Result<LossBreakdown> {
        let k = log_probs.ncols();
        let term = |t: Term| -> Result<f64> { Ok((self.weight_matrix(rows, k, Some(t))? * log_probs).sum()) };
        let g = term(Term::GlobalCv)?;
        let o = term(Term::ObjectCv)?;
        let c = term(Term::ObjectCi)?;
        Ok(total_loss(
            (g, self.counts.global_cv),
            (o, self.counts.object_cv),
            (c, self.counts.object_ci),
        ))
    }

    /// Total loss as a tape scalar over `log_probs` (rows laid out as `rows`).
    pub fn tape_loss(&self, tape: &Tape, rows: &[StudentRow], log_probs: Var) -> Result<Var> {
        let k = tape.value(log_probs).ncols();
        Ok(tape.weighted_sum(log_probs, self.weight_matrix(rows, k, None)?))
    }
}
