//! Pixel-pooled evaluation: confusion counts, ROC/PR curves, F1 threshold
//! selection and summary reports.
//!
//! A pixel is predicted vessel iff `p >= threshold`, everywhere in this crate.
//! Probability maps are single precision, so thresholds are rounded to `f32`
//! before comparing; `0.45` then means the same thing as a stored `0.45`.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::{LabelledImage, VesselMask};
use crate::error::{Error, Result};
use crate::inference;
use crate::model::Model;
use crate::plane::Plane;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// `2tp / (2tp + fp + fn)`; 0 when there is nothing to find or predict.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// 1 when nothing is predicted vessel.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            ratio(self.tp, self.tp + self.fp)
        }
    }
}

/// A curve traced by sweeping the decision threshold from high to low.
/// The first point has threshold `+inf` (nothing predicted vessel).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

impl Curve {
    pub fn to_csv(&self, header: &str) -> String {
        let mut out = format!("{header}\n");
        for (x, y) in &self.points {
            let _ = writeln!(out, "{x:.10},{y:.10}");
        }
        out
    }
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Pooled scores sorted in descending order with cumulative positive counts,
/// so that counts at any threshold are a binary search away.
pub struct PooledScores {
    scores: Vec<f64>,
    cum_pos: Vec<u64>,
    positives: u64,
}

fn check_pairs<P: AsRef<Plane<f32>>>(probs: &[P], masks: &[VesselMask]) -> Result<()> {
    if probs.len() != masks.len() {
        return Err(Error::Contract(format!(
            "{} probability maps vs {} masks",
            probs.len(),
            masks.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Contract("no images to evaluate".into()));
    }
    for (i, (p, m)) in probs.iter().zip(masks).enumerate() {
        let p = p.as_ref();
        if p.dims() != m.labels().dims() {
            return Err(Error::Contract(format!(
                "pair {i}: probability map {}x{} vs mask {}x{}",
                p.width(),
                p.height(),
                m.width(),
                m.height()
            )));
        }
    }
    Ok(())
}

impl PooledScores {
    pub fn new<P: AsRef<Plane<f32>>>(probs: &[P], masks: &[VesselMask]) -> Result<Self> {
        check_pairs(probs, masks)?;
        let mut pairs: Vec<(f64, u8)> = probs
            .iter()
            .zip(masks)
            .flat_map(|(p, m)| {
                p.as_ref()
                    .as_slice()
                    .iter()
                    .zip(m.labels().as_slice())
                    .map(|(&p, &g)| (p as f64, g))
            })
            .collect();
        pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut cum_pos = Vec::with_capacity(pairs.len() + 1);
        cum_pos.push(0);
        let mut acc = 0;
        for &(_, g) in &pairs {
            acc += g as u64;
            cum_pos.push(acc);
        }
        Ok(PooledScores {
            scores: pairs.into_iter().map(|(p, _)| p).collect(),
            cum_pos,
            positives: acc,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> u64 {
        self.positives
    }

    pub fn negatives(&self) -> u64 {
        self.scores.len() as u64 - self.positives
    }

    pub fn counts_at(&self, threshold: f64) -> ConfusionCounts {
        let t = threshold as f32 as f64;
        let k = self.scores.partition_point(|&p| p >= t);
        self.counts_top(k)
    }

    fn counts_top(&self, k: usize) -> ConfusionCounts {
        let tp = self.cum_pos[k];
        let fp = k as u64 - tp;
        ConfusionCounts {
            tp,
            fp,
            fn_: self.positives - tp,
            tn: self.negatives() - fp,
        }
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.positives == 0 || self.negatives() == 0 {
            return Err(Error::UndefinedMetric(format!(
                "ground truth has {} vessel and {} background pixels; both classes are required",
                self.positives,
                self.negatives()
            )));
        }
        Ok(())
    }

    /// Distinct scores in descending order.
    pub fn distinct(&self) -> Vec<f64> {
        let mut out = self.scores.clone();
        out.dedup();
        out
    }

    /// `(threshold, counts)` at `+inf`, then at every distinct value of
    /// `{1, scores, 0}` in descending order.
    fn sweep(&self) -> Vec<(f64, ConfusionCounts)> {
        let mut thresholds = Vec::with_capacity(self.scores.len() + 3);
        thresholds.push(1.0);
        thresholds.extend(self.scores.iter().copied());
        thresholds.push(0.0);
        thresholds.sort_unstable_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut out = Vec::with_capacity(thresholds.len() + 1);
        out.push((f64::INFINITY, self.counts_top(0)));
        let mut k = 0;
        for t in thresholds {
            while k < self.scores.len() && self.scores[k] >= t {
                k += 1;
            }
            out.push((t, self.counts_top(k)));
        }
        out
    }

    pub fn roc(&self) -> Result<(Curve, f64)> {
        self.require_both_classes()?;
        let (p, n) = (self.positives as f64, self.negatives() as f64);
        let mut curve = Curve::default();
        for (t, c) in self.sweep() {
            curve.points.push((c.fp as f64 / n, c.tp as f64 / p));
            curve.thresholds.push(t);
        }
        let auc = trapezoid(&curve.points);
        Ok((curve, auc))
    }

    pub fn pr(&self) -> Result<(Curve, f64)> {
        self.require_both_classes()?;
        let p = self.positives as f64;
        let mut curve = Curve::default();
        for (t, c) in self.sweep() {
            curve.points.push((c.tp as f64 / p, c.precision()));
            curve.thresholds.push(t);
        }
        let area = trapezoid(&curve.points);
        Ok((curve, area))
    }

    pub fn best_f1(&self, grid: &[f64]) -> Result<(f64, f64)> {
        self.require_both_classes()?;
        if grid.is_empty() {
            return Err(Error::Config("threshold grid is empty".into()));
        }
        let mut sorted = grid.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let mut best = (sorted[0], self.counts_at(sorted[0]).f1());
        for &t in &sorted[1..] {
            let f = self.counts_at(t).f1();
            if f > best.1 {
                best = (t, f);
            }
        }
        Ok(best)
    }

    /// Steps of 0.01 over `[0, 1]` plus every distinct score.
    pub fn default_grid(&self) -> Vec<f64> {
        let mut grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        grid.extend(self.distinct());
        grid.sort_unstable_by(f64::total_cmp);
        grid.dedup();
        grid
    }
}

impl AsRef<Plane<f32>> for inference::ProbabilityMap {
    fn as_ref(&self) -> &Plane<f32> {
        &self.values
    }
}

pub fn confusion<P: AsRef<Plane<f32>>>(probs: &[P], masks: &[VesselMask], threshold: f64) -> Result<ConfusionCounts> {
    check_pairs(probs, masks)?;
    if threshold.is_nan() {
        return Err(Error::Contract("threshold is NaN".into()));
    }
    let t = threshold as f32;
    let mut c = ConfusionCounts::default();
    for (p, m) in probs.iter().zip(masks) {
        for (&p, &g) in p.as_ref().as_slice().iter().zip(m.labels().as_slice()) {
            match (p >= t, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(c)
}

pub fn roc_with_auc<P: AsRef<Plane<f32>>>(probs: &[P], masks: &[VesselMask]) -> Result<(Curve, f64)> {
    PooledScores::new(probs, masks)?.roc()
}

pub fn pr_with_auprc<P: AsRef<Plane<f32>>>(probs: &[P], masks: &[VesselMask]) -> Result<(Curve, f64)> {
    PooledScores::new(probs, masks)?.pr()
}

/// Grid threshold maximising F1, ties going to the lower threshold. `None`
/// uses the default grid.
pub fn best_f1_threshold<P: AsRef<Plane<f32>>>(
    probs: &[P],
    masks: &[VesselMask],
    grid: Option<&[f64]>,
) -> Result<(f64, f64)> {
    let pooled = PooledScores::new(probs, masks)?;
    match grid {
        Some(g) => pooled.best_f1(g),
        None => pooled.best_f1(&pooled.default_grid()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub auprc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub roc: Curve,
    pub pr: Curve,
}

pub const REPORT_CSV_HEADER: &str = "auc,auprc,sensitivity,specificity,f1,accuracy,threshold,tp,fp,tn,fn";

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "AUC          {:.4}\nAUPRC        {:.4}\nSensitivity  {:.4}\nSpecificity  {:.4}\nF1           {:.4}\nAccuracy     {:.4}\nThreshold    {:.4}\nTP {}  FP {}  TN {}  FN {}\n",
            self.auc,
            self.auprc,
            self.sensitivity,
            self.specificity,
            self.f1,
            self.accuracy,
            self.threshold,
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{REPORT_CSV_HEADER}\n{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            self.auc,
            self.auprc,
            self.sensitivity,
            self.specificity,
            self.f1,
            self.accuracy,
            self.threshold,
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_
        )
    }

    /// Writes `report.txt`, `report.csv`, `roc.csv` and `pr.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.txt", self.to_text()),
            ("report.csv", self.to_csv()),
            ("roc.csv", self.roc.to_csv("fpr,tpr")),
            ("pr.csv", self.pr.to_csv("recall,precision")),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Report over precomputed maps. Without a threshold, the F1-optimal one on
/// these same maps is used.
pub fn evaluate_maps<P: AsRef<Plane<f32>>>(
    probs: &[P],
    masks: &[VesselMask],
    threshold: Option<f64>,
) -> Result<EvalReport> {
    let pooled = PooledScores::new(probs, masks)?;
    let (roc, auc) = pooled.roc()?;
    let (pr, auprc) = pooled.pr()?;
    let threshold = match threshold {
        Some(t) => t,
        None => pooled.best_f1(&pooled.default_grid())?.0,
    };
    let counts = confusion(probs, masks, threshold)?;
    Ok(EvalReport {
        auc,
        auprc,
        sensitivity: counts.sensitivity(),
        specificity: counts.specificity(),
        f1: counts.f1(),
        accuracy: counts.accuracy(),
        threshold,
        counts,
        roc,
        pr,
    })
}

pub fn predict_all(model: &Model, data: &[&LabelledImage]) -> Result<Vec<inference::ProbabilityMap>> {
    data.iter().map(|s| inference::segment_full(model, &s.image)).collect()
}

/// Segments every image in full and reports pooled metrics.
pub fn evaluate(model: &Model, data: &[&LabelledImage], threshold: Option<f64>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let maps = predict_all(model, data)?;
    let masks: Vec<VesselMask> = data.iter().map(|s| s.mask.clone()).collect();
    evaluate_maps(&maps, &masks, threshold)
}
