//! Confusion counts, F1 and mean intersection-over-union.

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{ChangeMask, Image};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, o: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(param_err!("threshold {} outside (0, 1)", tau));
    }
    Ok(())
}

/// Positive where `p >= tau`.
pub fn binarize(prob: &[f64], tau: f64) -> Result<Vec<bool>> {
    check_threshold(tau)?;
    Ok(prob.iter().map(|&p| p >= tau).collect())
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(shape_err!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        ));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`, or 0 when nothing is positive on either side.
pub fn f1(c: &Confusion) -> f64 {
    let d = 2 * c.tp + c.fp + c.fn_;
    if d == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / d as f64
    }
}

/// Mean IoU over the change and no-change classes. A class with an empty
/// union is left out; with both empty the score is 1.
pub fn miou(c: &Confusion) -> f64 {
    let ious: Vec<f64> = [(c.tp, c.tp + c.fp + c.fn_), (c.tn, c.tn + c.fp + c.fn_)]
        .into_iter()
        .filter(|&(_, d)| d > 0)
        .map(|(n, d)| n as f64 / d as f64)
        .collect();
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Scores per pair, then mean and standard deviation over pairs.
    #[default]
    PerPair,
    /// One confusion matrix summed over all pixels of all pairs.
    Pooled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub id: String,
    pub confusion: Confusion,
    pub f1: f64,
    pub miou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::InsufficientData("no values to summarize".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Summary { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairScore>,
    pub aggregation: Aggregation,
    pub f1: Summary,
    pub miou: Summary,
}

impl EvalReport {
    /// `pair_id,f1,miou` rows followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["pair_id", "f1", "miou"]).map_err(err)?;
        for p in &self.pairs {
            w.write_record([p.id.clone(), fmt(p.f1), fmt(p.miou)]).map_err(err)?;
        }
        w.write_record(["mean".into(), fmt(self.f1.mean), fmt(self.miou.mean)])
            .map_err(err)?;
        w.write_record(["std".into(), fmt(self.f1.std), fmt(self.miou.std)])
            .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// A change probability map and the ground truth for one pair.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub prob: &'a [f64],
    pub gt: &'a ChangeMask,
}

pub fn evaluate_fold(items: &[EvalItem<'_>], tau: f64, aggregation: Aggregation) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InsufficientData("no pairs to evaluate".into()));
    }
    let mut pairs = Vec::with_capacity(items.len());
    for it in items {
        let gt = it.gt.binarize();
        if it.prob.len() != gt.len() {
            return Err(shape_err!("pair {}: prediction and ground truth differ in size", it.id));
        }
        let c = confusion(&binarize(it.prob, tau)?, &gt)?;
        pairs.push(PairScore {
            id: it.id.to_string(),
            confusion: c,
            f1: f1(&c),
            miou: miou(&c),
        });
    }
    let (f, m) = match aggregation {
        Aggregation::PerPair => (
            Summary::of(&pairs.iter().map(|p| p.f1).collect::<Vec<_>>())?,
            Summary::of(&pairs.iter().map(|p| p.miou).collect::<Vec<_>>())?,
        ),
        Aggregation::Pooled => {
            let c = pairs.iter().fold(Confusion::default(), |a, p| a.merge(&p.confusion));
            (
                Summary { mean: f1(&c), std: 0.0 },
                Summary {
                    mean: miou(&c),
                    std: 0.0,
                },
            )
        }
    };
    Ok(EvalReport {
        pairs,
        aggregation,
        f1: f,
        miou: m,
    })
}

/// Color-coded comparison: true positives green, false positives red,
/// false negatives blue, true negatives the dimmed base image.
pub fn overlay(base: &Image, pred: &[bool], gt: &[bool]) -> Result<Image> {
    let (w, h) = (base.width(), base.height());
    if pred.len() != w * h || gt.len() != w * h {
        return Err(shape_err!("overlay masks must match the {}x{} image", w, h));
    }
    let rgb = base.to_rgb();
    let mut out = Image::filled(w, h, 3, 0)?;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let color = match (pred[i], gt[i]) {
                (true, true) => [0, 200, 0],
                (true, false) => [220, 0, 0],
                (false, true) => [0, 80, 255],
                (false, false) => {
                    let c = |ch| rgb.sample(x, y, ch) / 2;
                    [c(0), c(1), c(2)]
                }
            };
            for (ch, v) in color.into_iter().enumerate() {
                out.set_sample(x, y, ch, v);
            }
        }
    }
    Ok(out)
}
