//! Segmentation metrics: per-class IoU, mIoU, class accuracy, and overall
//! accuracy, aggregated dataset-wide from a confusion matrix. An optional
//! background class is excluded from metric aggregation only.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::patch::LabelMap;

/// K x K pixel counts: `counts[a][b]` = pixels of true class a predicted b.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    /// Class excluded from metric aggregation, if any.
    pub background_class: Option<usize>,
    /// Truth pixels with this value are skipped entirely.
    pub ignore_label: Option<u8>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, background_class: Option<usize>, ignore_label: Option<u8>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("confusion matrix needs >= 1 class".to_string()));
        }
        if let Some(b) = background_class {
            if b >= num_classes {
                return Err(Error::config(format!(
                    "background class {b} out of range [0,{num_classes})"
                )));
            }
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            background_class,
            ignore_label,
        })
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction/truth raster pair.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::data(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        let k = self.num_classes;
        for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
            if Some(t) == self.ignore_label {
                continue;
            }
            if (t as usize) >= k || (p as usize) >= k {
                return Err(Error::data(format!(
                    "class out of range at pixel ({}, {}): truth {t}, pred {p}, K={k}",
                    i / pred.width,
                    i % pred.width
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise merge (used to combine per-image matrices).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::usage("merging confusion matrices of different K".to_string()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|b| self.count(class, b)).sum()
    }

    fn col_sum(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|a| self.count(a, class)).sum()
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::usage(format!(
                "class {class} out of range [0,{})",
                self.num_classes
            )));
        }
        if self.background_class == Some(class) {
            return Err(Error::usage(format!(
                "class {class} is the excluded background"
            )));
        }
        Ok(())
    }

    /// Dataset-level IoU of one class: TP / (TP + FP + FN).
    /// 0 by convention when the denominator is 0.
    pub fn iou(&self, class: usize) -> Result<f64> {
        self.check_class(class)?;
        let tp = self.count(class, class);
        let denom = self.row_sum(class) + self.col_sum(class) - tp;
        Ok(if denom == 0 { 0.0 } else { tp as f64 / denom as f64 })
    }

    /// Unweighted mean IoU over non-background classes. Degenerate classes
    /// (absent from truth and prediction) score 0 and still count.
    pub fn miou(&self) -> Result<f64> {
        let classes: Vec<usize> = (0..self.num_classes)
            .filter(|&c| self.background_class != Some(c))
            .collect();
        if classes.is_empty() {
            return Err(Error::usage("no non-background classes to average".to_string()));
        }
        let sum: f64 = classes.iter().map(|&c| self.iou(c).unwrap()).sum();
        Ok(sum / classes.len() as f64)
    }

    /// Fraction of class-a truth pixels predicted as a; 0 when t_a = 0.
    pub fn class_accuracy(&self, class: usize) -> Result<f64> {
        self.check_class(class)?;
        let t_a = self.row_sum(class);
        Ok(if t_a == 0 {
            0.0
        } else {
            self.count(class, class) as f64 / t_a as f64
        })
    }

    /// Correct pixels over all pixels, background truth rows excluded.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let mut correct = 0u64;
        let mut total = 0u64;
        for a in 0..self.num_classes {
            if self.background_class == Some(a) {
                continue;
            }
            correct += self.count(a, a);
            total += self.row_sum(a);
        }
        Ok(if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        })
    }
}

/// Metrics of one evaluated model, ready for reporting.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub per_class: Vec<(usize, f64, f64)>, // (class, IoU, Acc)
    pub miou: f64,
    pub overall_accuracy: f64,
}

impl MetricsReport {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        let mut per_class = Vec::new();
        for c in 0..cm.num_classes {
            if cm.background_class == Some(c) {
                continue;
            }
            per_class.push((c, cm.iou(c)?, cm.class_accuracy(c)?));
        }
        Ok(MetricsReport {
            per_class,
            miou: cm.miou()?,
            overall_accuracy: cm.overall_accuracy()?,
        })
    }

    /// Key-value lines, machine-readable.
    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (c, iou, acc) in &self.per_class {
            let _ = writeln!(out, "{prefix}class.{c}.iou={iou}");
            let _ = writeln!(out, "{prefix}class.{c}.acc={acc}");
        }
        let _ = writeln!(out, "{prefix}miou={}", self.miou);
        let _ = writeln!(out, "{prefix}oa={}", self.overall_accuracy);
        out
    }
}

/// Render one or two reports as a table; with two, columns follow the
/// baseline-versus-context ("w/o" / "w") layout.
pub fn render_table(baseline: &MetricsReport, context: Option<&MetricsReport>) -> String {
    let mut out = String::new();
    match context {
        None => {
            let _ = writeln!(out, "{:>8} {:>10} {:>10}", "class", "IoU", "Acc");
            for (c, iou, acc) in &baseline.per_class {
                let _ = writeln!(out, "{c:>8} {iou:>10.4} {acc:>10.4}");
            }
            let _ = writeln!(out, "{:>8} {:>10.4} {:>10.4}", "mIoU/OA", baseline.miou, baseline.overall_accuracy);
        }
        Some(ctx) => {
            let _ = writeln!(
                out,
                "{:>8} {:>10} {:>10} {:>10} {:>10}",
                "class", "IoU w/o", "IoU w", "Acc w/o", "Acc w"
            );
            for ((c, iou0, acc0), (_, iou1, acc1)) in baseline.per_class.iter().zip(&ctx.per_class)
            {
                let _ = writeln!(out, "{c:>8} {iou0:>10.4} {iou1:>10.4} {acc0:>10.4} {acc1:>10.4}");
            }
            let _ = writeln!(
                out,
                "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                "mIoU/OA", baseline.miou, ctx.miou, baseline.overall_accuracy, ctx.overall_accuracy
            );
        }
    }
    out
}
