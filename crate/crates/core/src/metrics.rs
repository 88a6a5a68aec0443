//! Confusion-matrix segmentation metrics and edge derivation.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return dim_err("confusion_matrix", format!("{} counts for {classes} classes", counts.len()));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return dim_err("confusion_matrix", format!("{} labels vs {} predictions", truth.len(), pred.len()));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= self.classes || p >= self.classes {
                return Err(Error::Contract(format!("class index outside 0..{}", self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return dim_err("confusion_matrix", "merging matrices of different class counts");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn row(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }
}

/// Per-class values are `None` where undefined (`0/0`).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub acc: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub macc: f64,
    pub miou: f64,
}

/// Per-class accuracy and IoU with means over the classes present in
/// truth or prediction. Class 0 is dropped from the means when
/// `exclude_background` is set.
pub fn metrics(cm: &ConfusionMatrix, exclude_background: bool) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    let n = cm.classes();
    let mut acc = Vec::with_capacity(n);
    let mut iou = Vec::with_capacity(n);
    let (mut acc_sum, mut acc_n, mut iou_sum, mut iou_n) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..n {
        let tp = cm.get(c, c) as f64;
        let row = cm.row(c) as f64;
        let union = row + cm.col(c) as f64 - tp;
        let a = (row > 0.0).then(|| tp / row);
        let i = (union > 0.0).then(|| tp / union);
        let counted = !(exclude_background && c == 0);
        if counted {
            if let Some(v) = a {
                acc_sum += v;
                acc_n += 1;
            }
            if let Some(v) = i {
                iou_sum += v;
                iou_n += 1;
            }
        }
        acc.push(a);
        iou.push(i);
    }
    if iou_n == 0 {
        return Err(Error::Contract("no scored class present".into()));
    }
    Ok(Metrics {
        acc,
        iou,
        macc: if acc_n == 0 { 0.0 } else { acc_sum / acc_n as f64 },
        miou: iou_sum / iou_n as f64,
    })
}

/// Per-pixel argmax over the leading class axis of `[K,H,W]` logits; ties
/// go to the lower class.
pub fn argmax<R: Real>(logits: &Tensor<R>) -> Result<Vec<usize>> {
    let (k, h, w) = logits.chw()?;
    let p_count = h * w;
    let z = logits.data();
    Ok((0..p_count)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if z[c * p_count + p] > z[best * p_count + p] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// A pixel is an edge iff an in-bounds 4-neighbour carries another label.
pub fn derive_edges(labels: &[usize], h: usize, w: usize) -> Result<Vec<bool>> {
    if labels.len() != h * w {
        return dim_err("derive_edges", format!("{} labels for {h}x{w}", labels.len()));
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let differs = (y > 0 && labels[(y - 1) * w + x] != l)
                || (y + 1 < h && labels[(y + 1) * w + x] != l)
                || (x > 0 && labels[y * w + x - 1] != l)
                || (x + 1 < w && labels[y * w + x + 1] != l);
            out[y * w + x] = differs;
        }
    }
    Ok(out)
}
