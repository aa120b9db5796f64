//! Dice scores over the aggregated tumor regions.

use crate::data::{check_labels, LabelMap};
use crate::error::{Error, Result};
use crate::infer::aggregate_regions;

/// Confusion counts of a binary prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl DiceCounts {
    pub fn of(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "dice",
                lhs: vec![pred.len()],
                rhs: vec![truth.len()],
            });
        }
        let mut c = DiceCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    /// Both masks empty.
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `2TP / (FN + FP + 2TP)`, defined as 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        if self.is_empty() {
            return 1.0;
        }
        2.0 * self.tp as f64 / (self.fn_ + self.fp + 2 * self.tp) as f64
    }
}

pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(DiceCounts::of(pred, truth)?.dice())
}

/// Dice per aggregated region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub complete: f64,
    pub core: f64,
    pub enhancing: f64,
    /// Regions empty in both maps, scored 1 by convention:
    /// complete, core, enhancing.
    pub empty: [bool; 3],
}

impl Evaluation {
    pub fn as_array(&self) -> [f64; 3] {
        [self.complete, self.core, self.enhancing]
    }
}

pub const REGION_NAMES: [&str; 3] = ["complete", "core", "enhancing"];

pub fn evaluate(pred: &LabelMap, truth: &LabelMap) -> Result<Evaluation> {
    if pred.extents != truth.extents {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: pred.extents.to_vec(),
            rhs: truth.extents.to_vec(),
        });
    }
    check_labels(&pred.labels)?;
    check_labels(&truth.labels)?;
    let p = aggregate_regions(&pred.labels);
    let t = aggregate_regions(&truth.labels);
    let c = [
        DiceCounts::of(&p.complete, &t.complete)?,
        DiceCounts::of(&p.core, &t.core)?,
        DiceCounts::of(&p.enhancing, &t.enhancing)?,
    ];
    Ok(Evaluation {
        complete: c[0].dice(),
        core: c[1].dice(),
        enhancing: c[2].dice(),
        empty: c.map(|c| c.is_empty()),
    })
}

/// One line per volume, `id dice_complete dice_core dice_enhancing`, then a
/// `mean` row. Regions scored by the empty-empty convention are listed in a
/// trailing `# empty:` comment.
pub fn format_report(rows: &[(String, Evaluation)]) -> String {
    let mut out = String::from("# id dice_complete dice_core dice_enhancing\n");
    let mut sum = [0.0; 3];
    for (id, e) in rows {
        out.push_str(&format!("{id} {:.6} {:.6} {:.6}", e.complete, e.core, e.enhancing));
        let empty: Vec<&str> = (0..3).filter(|&i| e.empty[i]).map(|i| REGION_NAMES[i]).collect();
        if !empty.is_empty() {
            out.push_str(&format!(" # empty: {}", empty.join(",")));
        }
        out.push('\n');
        for (s, v) in sum.iter_mut().zip(e.as_array()) {
            *s += v;
        }
    }
    let n = rows.len().max(1) as f64;
    out.push_str(&format!("mean {:.6} {:.6} {:.6}\n", sum[0] / n, sum[1] / n, sum[2] / n));
    out
}

/// Mean Dice per region.
pub fn mean_dice(rows: &[Evaluation]) -> [f64; 3] {
    let n = rows.len().max(1) as f64;
    let mut m = [0.0; 3];
    for e in rows {
        for (s, v) in m.iter_mut().zip(e.as_array()) {
            *s += v / n;
        }
    }
    m
}
