//! Nearest-class-embedding classification with calibrated stacking.
//!
//! A sample is assigned the class whose `θ_w` is closest to its `θ_o` in
//! Euclidean distance. Calibrated stacking usually subtracts a constant from
//! seen-class scores; with distances the same effect is adding `gamma` to
//! every seen-class distance, which shifts the argmin toward unseen classes
//! by exactly the same margin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{harmonic_mean, mean_class_accuracy, per_class_accuracy};
use crate::data::{FeatureArchive, StageView};
use crate::error::{Error, Result};
use crate::model::{embed_audio_visual, embed_classes, ModelParams};
use crate::nn::{Matrix, Real};

/// Grid step and upper bound of the calibration search.
pub const GAMMA_STEP: f64 = 0.07;
pub const GAMMA_MAX: f64 = 5.0;

/// Rows embedded per forward pass when scoring an archive.
const EMBED_CHUNK: usize = 1024;

/// Sample-to-class distances with the class ids of each column.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    /// `N x K`
    pub distances: Matrix<f64>,
    /// Archive class id of each column, strictly ascending.
    pub classes: Vec<usize>,
    pub seen: Vec<bool>,
}

/// `‖θ_w[j] - θ_o[i]‖₂` for every pair, accumulated in f64.
pub fn pairwise_distances<T: Real>(
    theta_o: &Matrix<T>,
    theta_w: &Matrix<T>,
    classes: Vec<usize>,
    seen: Vec<bool>,
) -> Result<DistanceTable> {
    if theta_o.cols() != theta_w.cols() {
        return Err(Error::dim("pairwise_distances", theta_o.shape_str(), theta_w.shape_str()));
    }
    if classes.len() != theta_w.rows() || seen.len() != theta_w.rows() {
        return Err(Error::dim("pairwise_distances", "class list", theta_w.rows()));
    }
    if !classes.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Protocol("distance table classes must be strictly ascending".into()));
    }
    let mut d = Matrix::zeros(theta_o.rows(), theta_w.rows());
    for i in 0..theta_o.rows() {
        let o = theta_o.row(i);
        for j in 0..theta_w.rows() {
            let sq: f64 = o
                .iter()
                .zip(theta_w.row(j))
                .map(|(a, b)| {
                    let diff = b.to_f64() - a.to_f64();
                    diff * diff
                })
                .sum();
            d.row_mut(i)[j] = sq.sqrt();
        }
    }
    if !d.is_finite() {
        return Err(Error::NonFinite {
            what: "distance table".into(),
            epoch: 0,
            batch: 0,
        });
    }
    Ok(DistanceTable {
        distances: d,
        classes,
        seen,
    })
}

impl DistanceTable {
    pub fn num_samples(&self) -> usize {
        self.distances.rows()
    }

    fn column(&self, class: usize) -> Result<usize> {
        self.classes
            .binary_search(&class)
            .map_err(|_| Error::Protocol(format!("class {class} is not in the distance table")))
    }

    /// Argmin over `candidates`; ties go to the lowest class id.
    pub fn classify(&self, candidates: &[usize]) -> Result<Vec<usize>> {
        if candidates.is_empty() {
            return Err(Error::Protocol("empty candidate class set".into()));
        }
        let mut cols = candidates
            .iter()
            .map(|&c| self.column(c))
            .collect::<Result<Vec<_>>>()?;
        cols.sort_unstable();
        cols.dedup();
        Ok(self.argmin_rows(&cols, 0.0))
    }

    /// Argmin over all classes after adding `gamma` to seen-class distances.
    pub fn classify_calibrated(&self, gamma: f64) -> Vec<usize> {
        let cols: Vec<usize> = (0..self.classes.len()).collect();
        self.argmin_rows(&cols, gamma)
    }

    fn argmin_rows(&self, cols: &[usize], gamma: f64) -> Vec<usize> {
        (0..self.num_samples())
            .map(|i| {
                let row = self.distances.row(i);
                let score = |j: usize| row[j] + if self.seen[j] { gamma } else { 0.0 };
                let mut best = cols[0];
                for &j in &cols[1..] {
                    if score(j) < score(best) {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_s: f64,
    pub acc_u: f64,
    pub hm: f64,
    pub acc_zsl: f64,
    pub gamma: f64,
    /// Calibrated accuracy of every scored class, keyed by class id.
    pub per_class_accuracy: BTreeMap<usize, f64>,
}

/// A distance table plus the ground truth needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct GzslTask {
    pub table: DistanceTable,
    pub labels: Vec<usize>,
    seen_present: Vec<usize>,
    unseen_present: Vec<usize>,
    unseen_classes: Vec<usize>,
    unseen_rows: Vec<usize>,
}

impl GzslTask {
    pub fn new(table: DistanceTable, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != table.num_samples() {
            return Err(Error::dim("gzsl task", labels.len(), table.num_samples()));
        }
        let mut seen_present = Vec::new();
        let mut unseen_present = Vec::new();
        let mut unseen_rows = Vec::new();
        for (row, &y) in labels.iter().enumerate() {
            let col = table.column(y)?;
            if table.seen[col] {
                seen_present.push(y);
            } else {
                unseen_present.push(y);
                unseen_rows.push(row);
            }
        }
        for (what, v) in [("seen", &mut seen_present), ("unseen", &mut unseen_present)] {
            if v.is_empty() {
                return Err(Error::Protocol(format!("no {what}-class samples to evaluate")));
            }
            v.sort_unstable();
            v.dedup();
        }
        let unseen_classes = table
            .classes
            .iter()
            .zip(&table.seen)
            .filter(|(_, &s)| !s)
            .map(|(&c, _)| c)
            .collect();
        Ok(Self {
            table,
            labels,
            seen_present,
            unseen_present,
            unseen_classes,
            unseen_rows,
        })
    }

    pub fn report(&self, gamma: f64) -> Result<EvalReport> {
        let preds = self.table.classify_calibrated(gamma);
        let acc_s = mean_class_accuracy(&preds, &self.labels, &self.seen_present)?;
        let acc_u = mean_class_accuracy(&preds, &self.labels, &self.unseen_present)?;
        let mut scored = self.seen_present.clone();
        scored.extend(&self.unseen_present);
        let per_class = per_class_accuracy(&preds, &self.labels, &scored)?;
        Ok(EvalReport {
            acc_s,
            acc_u,
            hm: harmonic_mean(acc_s, acc_u),
            acc_zsl: self.acc_zsl()?,
            gamma,
            per_class_accuracy: per_class,
        })
    }

    /// Accuracy on unseen-class samples with only unseen classes as candidates.
    pub fn acc_zsl(&self) -> Result<f64> {
        let restricted = self.table.classify(&self.unseen_classes)?;
        let preds: Vec<usize> = self.unseen_rows.iter().map(|&r| restricted[r]).collect();
        let labels: Vec<usize> = self.unseen_rows.iter().map(|&r| self.labels[r]).collect();
        mean_class_accuracy(&preds, &labels, &self.unseen_present)
    }

    /// HM only, for the calibration search.
    pub fn hm_at(&self, gamma: f64) -> Result<f64> {
        let preds = self.table.classify_calibrated(gamma);
        let acc_s = mean_class_accuracy(&preds, &self.labels, &self.seen_present)?;
        let acc_u = mean_class_accuracy(&preds, &self.labels, &self.unseen_present)?;
        Ok(harmonic_mean(acc_s, acc_u))
    }
}

/// `{0, step, 2·step, …}` up to the largest multiple of `step` that is `<= max`.
pub fn calibration_grid(step: f64, max: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && max >= 0.0 && step.is_finite() && max.is_finite()) {
        return Err(Error::Config(format!("bad calibration grid: step {step}, max {max}")));
    }
    let n = (max / step).floor() as usize;
    Ok((0..=n).map(|k| k as f64 * step).filter(|&g| g <= max).collect())
}

pub fn default_grid() -> Vec<f64> {
    calibration_grid(GAMMA_STEP, GAMMA_MAX).expect("default grid is valid")
}

/// Returns the gamma with the highest HM; ties go to the smaller gamma.
pub fn search_calibration(task: &GzslTask, grid: &[f64]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &g in grid {
        let hm = task.hm_at(g)?;
        if best.is_none_or(|(_, b)| hm > b) {
            best = Some((g, hm));
        }
    }
    best.ok_or_else(|| Error::Config("empty calibration grid".into()))
}

/// Eval-mode `θ_o` for the given archive rows.
pub fn embed_samples(params: &ModelParams<f32>, archive: &FeatureArchive, samples: &[usize]) -> Result<Matrix<f32>> {
    let mut out: Option<Matrix<f32>> = None;
    for chunk in samples.chunks(EMBED_CHUNK) {
        let v = archive.visual.gather_rows(chunk);
        let a = archive.audio.gather_rows(chunk);
        let theta = embed_audio_visual(params, &v, &a)?;
        out = Some(match out {
            None => theta,
            Some(acc) => acc.vconcat(&theta)?,
        });
    }
    Ok(out.unwrap_or_else(|| Matrix::zeros(0, params.dims.d_out)))
}

/// Eval-mode `θ_w` for the given archive classes.
pub fn embed_class_table(params: &ModelParams<f32>, archive: &FeatureArchive, classes: &[usize]) -> Result<Matrix<f32>> {
    embed_classes(
        params,
        &archive.text_clip.gather_rows(classes),
        &archive.text_clap.gather_rows(classes),
    )
}

/// Embeds a stage's evaluation samples and candidate classes once.
pub fn build_task(params: &ModelParams<f32>, archive: &FeatureArchive, view: &StageView) -> Result<GzslTask> {
    let samples = view.eval_samples();
    let classes = view.eval_classes();
    let theta_o = embed_samples(params, archive, &samples)?;
    let theta_w = embed_class_table(params, archive, &classes)?;
    let seen = classes.iter().map(|c| view.seen_classes.binary_search(c).is_ok()).collect();
    let table = pairwise_distances(&theta_o, &theta_w, classes, seen)?;
    let labels = samples.iter().map(|&i| archive.labels[i] as usize).collect();
    GzslTask::new(table, labels)
}

pub fn evaluate_gzsl(
    params: &ModelParams<f32>,
    archive: &FeatureArchive,
    view: &StageView,
    gamma: f64,
) -> Result<EvalReport> {
    build_task(params, archive, view)?.report(gamma)
}
