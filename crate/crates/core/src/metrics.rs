//! Confusion matrices and the IoU family of scores derived from them.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
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

    pub fn accumulate(&mut self, predictions: &[u8], labels: &[u8], ignore: u8) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        for (&p, &g) in predictions.iter().zip(labels) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::data(format!(
                    "class id {} outside {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merging confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the denominator is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Per-pixel argmax over the class axis of `B×C×H×W` scores; ties go to
/// the lowest class index.
pub fn argmax_classes<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<u8>> {
    let (b, c, h, w) = scores.dims4()?;
    let hw = h * w;
    let s = scores.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if s[(bi * c + k) * hw + p] > s[(bi * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UndefinedPolicy {
    /// Undefined classes enter the mean as 0.
    #[default]
    CountAsZero,
    /// Undefined classes are left out of the mean.
    Exclude,
}

pub fn miou(ious: &[Option<f64>], policy: UndefinedPolicy) -> Result<f64> {
    let vals: Vec<f64> = match policy {
        UndefinedPolicy::CountAsZero => ious.iter().map(|v| v.unwrap_or(0.0)).collect(),
        UndefinedPolicy::Exclude => ious.iter().flatten().copied().collect(),
    };
    if vals.is_empty() || ious.iter().all(Option::is_none) {
        return Err(Error::invalid("mIoU of no defined classes"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Target-domain mIoU as a fraction of source-domain mIoU.
pub fn retention(miou_target: f64, miou_source: f64) -> Result<f64> {
    if !(miou_source > 0.0) {
        return Err(Error::invalid(format!("retention needs a positive source mIoU, got {miou_source}")));
    }
    Ok(miou_target / miou_source)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub rows: Vec<(String, Option<f64>)>,
    pub miou: f64,
}

impl ClassReport {
    pub fn from_confusion(cm: &ConfusionMatrix, names: &[String], policy: UndefinedPolicy) -> Result<Self> {
        if names.len() != cm.classes() {
            return Err(Error::invalid(format!(
                "{} class names for {} classes",
                names.len(),
                cm.classes()
            )));
        }
        let ious = cm.iou_per_class();
        Ok(ClassReport {
            miou: miou(&ious, policy)?,
            rows: names.iter().cloned().zip(ious).collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("report text is UTF-8")
    }

    /// `class,iou` header, one row per class, then `miou,<value>`; values
    /// to four decimals, undefined classes as `undefined`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let row_err = |e: csv::Error| Error::data(format!("writing report: {e}"));
        w.write_record(["class", "iou"]).map_err(row_err)?;
        for (name, v) in &self.rows {
            let v = v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
            w.write_record([name.as_str(), v.as_str()]).map_err(row_err)?;
        }
        w.write_record(["miou", &format!("{:.4}", self.miou)]).map_err(row_err)?;
        w.flush().map_err(|e| Error::data(format!("writing report: {e}")))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let bad = |m: String| Error::data(format!("class report: {m}"));
        if r.headers().map_err(|e| bad(e.to_string()))?.iter().collect::<Vec<_>>() != ["class", "iou"] {
            return Err(bad("expected header class,iou".into()));
        }
        let mut rows = Vec::new();
        let mut miou = None;
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 2 || miou.is_some() {
                return Err(bad("malformed row".into()));
            }
            let parse = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad value {v}")));
            if &rec[0] == "miou" {
                miou = Some(parse(&rec[1])?);
            } else if &rec[1] == "undefined" {
                rows.push((rec[0].to_string(), None));
            } else {
                rows.push((rec[0].to_string(), Some(parse(&rec[1])?)));
            }
        }
        Ok(ClassReport {
            rows,
            miou: miou.ok_or_else(|| bad("missing miou row".into()))?,
        })
    }
}
