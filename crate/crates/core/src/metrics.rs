//! Partition agreement scores and segmentation IoU.

use std::collections::BTreeMap;

use ndarray::Array2;

/// Co-occurrence counts of `(predicted, truth)` pairs, with the row and
/// column totals.
#[derive(Clone, Debug, PartialEq)]
pub struct Contingency {
    pub table: Array2<u64>,
    pub pred_ids: Vec<usize>,
    pub truth_ids: Vec<usize>,
}

impl Contingency {
    pub fn new(pred: &[usize], truth: &[usize]) -> Self {
        assert_eq!(pred.len(), truth.len(), "label sequences differ in length");
        let index = |xs: &[usize]| -> BTreeMap<usize, usize> {
            let mut ids: Vec<usize> = xs.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
        };
        let (pi, ti) = (index(pred), index(truth));
        let mut table = Array2::zeros((pi.len(), ti.len()));
        for (p, t) in pred.iter().zip(truth) {
            table[[pi[p], ti[t]]] += 1;
        }
        Contingency {
            table,
            pred_ids: pi.into_keys().collect(),
            truth_ids: ti.into_keys().collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.table.sum()
    }

    fn row_sums(&self) -> Vec<u64> {
        self.table.rows().into_iter().map(|r| r.sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        self.table.columns().into_iter().map(|c| c.sum()).collect()
    }
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `2 I / (H(pred) + H(truth))`. Two single-block partitions score 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let c = Contingency::new(pred, truth);
    let n = c.total() as f64;
    if n == 0.0 {
        return 1.0;
    }
    let (rows, cols) = (c.row_sums(), c.col_sums());
    let (hp, ht) = (entropy(&rows, n), entropy(&cols, n));
    if hp + ht == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for ((i, j), &nij) in c.table.indexed_iter() {
        if nij > 0 {
            let nij = nij as f64;
            mi += nij / n * (n * nij / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    (2.0 * mi / (hp + ht)).clamp(0.0, 1.0)
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. Returns 1 when both partitions are trivial in the
/// same way (the index is undefined there).
pub fn ari(pred: &[usize], truth: &[usize]) -> f64 {
    let c = Contingency::new(pred, truth);
    let n = c.total();
    let sum_ij: f64 = c.table.iter().map(|&v| comb2(v)).sum();
    let sum_a: f64 = c.row_sums().into_iter().map(comb2).sum();
    let sum_b: f64 = c.col_sums().into_iter().map(comb2).sum();
    let total = comb2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}

/// Fraction of items whose cluster's majority class equals their own class.
pub fn purity(pred: &[usize], truth: &[usize]) -> f64 {
    let c = Contingency::new(pred, truth);
    let n = c.total();
    if n == 0 {
        return 1.0;
    }
    let hits: u64 = c.table.rows().into_iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    hits as f64 / n as f64
}

/// `num_classes x num_classes` counts, rows = truth, columns = prediction.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], num_classes: usize) -> Array2<u64> {
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&p, &t) in pred.iter().zip(truth) {
        m[[t, p]] += 1;
    }
    m
}

/// Per-class IoU `tp / (tp + fp + fn)`; `None` for classes absent from
/// both truth and prediction.
pub fn per_class_iou(confusion: &Array2<u64>) -> Vec<Option<f64>> {
    let k = confusion.nrows();
    (0..k)
        .map(|c| {
            let tp = confusion[[c, c]];
            let fn_ = confusion.row(c).sum() - tp;
            let fp = confusion.column(c).sum() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean over classes with a defined IoU.
pub fn mean_iou(ious: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return 0.0;
    }
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// Token recall per class under a majority-vote mapping from clusters to
/// classes: a token counts as recalled when its cluster's majority class is
/// its own. `None` for classes with no tokens.
pub fn per_class_recall(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let c = Contingency::new(pred, truth);
    let majority: BTreeMap<usize, usize> = c
        .table
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let j = (0..r.len()).max_by(|&a, &b| r[a].cmp(&r[b]).then(b.cmp(&a))).unwrap_or(0);
            (c.pred_ids[i], c.truth_ids[j])
        })
        .collect();
    let mut hit = vec![0u64; num_classes];
    let mut tot = vec![0u64; num_classes];
    for (p, &t) in pred.iter().zip(truth) {
        tot[t] += 1;
        if majority[p] == t {
            hit[t] += 1;
        }
    }
    (0..num_classes)
        .map(|k| (tot[k] > 0).then(|| hit[k] as f64 / tot[k] as f64))
        .collect()
}
