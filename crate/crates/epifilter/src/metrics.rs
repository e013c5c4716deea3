//! Evaluation metrics and the method comparison runner.
//!
//! Classification quality is measured at threshold 0.5; pose quality by the
//! angular errors of the recovered rotation and translation, summarized as
//! mAP: the mean of accuracies at 5-degree thresholds up to the cutoff,
//! where a pair counts as accurate if `max(rot, trans) <= threshold`.
//! Failed estimations score 180 degrees so they penalize every threshold.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{CascadeModel, ModelError};
use crate::datagen::Dataset;
use crate::geometry::{
    ransac_essential, recover_pose_and_angular_errors, weighted_eight_point, Correspondence,
    EssentialMatrix, GeometryError, Pose,
};
use crate::loss::{confusion_from_probs, fn_measure, FnGuidance, LossError};
use crate::prior::{posteriors_for_pair, PriorError, RatioDensityModel, MIN_RATIOS_FOR_ESTIMATE};

/// Error assigned to pairs whose estimation failed outright.
pub const FAILED_PAIR_ERROR_DEG: f64 = 180.0;
/// Hypothesize-and-verify budget used as post-processing on the predicted
/// inlier subset.
pub const RANSAC_POST_ITERATIONS: usize = 2000;
/// Inlier threshold (symmetric epipolar distance, normalized coordinates)
/// of the post-processing RANSAC.
pub const RANSAC_POST_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("classification metrics need both classes present")]
    SingleClass,
    #[error("empty error list")]
    EmptyErrors,
    #[error("threshold must be a positive multiple of 5 degrees, got {0}")]
    BadThreshold(f64),
    #[error("the learned method needs a trained checkpoint")]
    MissingModel,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
}

/// Threshold-0.5 precision, recall, F1 and F2.
pub fn compute_classification_metrics(
    probs: &[f64],
    labels: &[bool],
) -> Result<ClassMetrics, MetricsError> {
    let state = confusion_from_probs(probs, labels)?;
    if state.n_pos == 0 || state.n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok(ClassMetrics {
        precision: state.precision(),
        recall: state.recall(),
        f1: fn_measure(&state, FnGuidance::new(1.0).expect("valid")),
        f2: fn_measure(&state, FnGuidance::new(2.0).expect("valid")),
    })
}

/// Mean of accuracies at thresholds 5, 10, ..., `max_threshold_deg`, in
/// percent. A pair is accurate at a threshold when its error is at most
/// that many degrees.
pub fn map_at_threshold(errors: &[f64], max_threshold_deg: f64) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    let steps = max_threshold_deg / 5.0;
    if !(steps >= 1.0 && (steps - steps.round()).abs() < 1e-9) {
        return Err(MetricsError::BadThreshold(max_threshold_deg));
    }
    let steps = steps.round() as usize;
    let mut acc_sum = 0.0;
    for k in 1..=steps {
        let threshold = 5.0 * k as f64;
        let hits = errors.iter().filter(|e| **e <= threshold).count();
        acc_sum += hits as f64 / errors.len() as f64;
    }
    Ok(100.0 * acc_sum / steps as f64)
}

/// Classifier under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No classifier: every correspondence counts as a predicted inlier.
    RansacOnly,
    /// The trained cascade.
    Learned,
    /// Ground-truth labels as predictions (sanity ceiling).
    Oracle,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::RansacOnly => "ransac-only",
            Method::Learned => "learned",
            Method::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ransac-only" | "ransac" => Ok(Method::RansacOnly),
            "learned" => Ok(Method::Learned),
            "oracle" => Ok(Method::Oracle),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Essential matrix estimator applied to the classifier's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostProcess {
    WeightedEightPoint,
    Ransac,
}

impl PostProcess {
    pub fn name(&self) -> &'static str {
        match self {
            PostProcess::WeightedEightPoint => "w8pt",
            PostProcess::Ransac => "ransac",
        }
    }
}

impl std::str::FromStr for PostProcess {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "w8pt" | "weighted-eight-point" => Ok(PostProcess::WeightedEightPoint),
            "ransac" => Ok(PostProcess::Ransac),
            other => Err(format!("unknown post-processing `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub rot_err_deg: f64,
    pub trans_err_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub post: String,
    pub map5: f64,
    pub map10: f64,
    pub map20: f64,
    pub mean_p: f64,
    pub mean_r: f64,
    pub mean_f2: f64,
    pub per_pair: Vec<PairRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn row(&self, method: Method, post: PostProcess) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method.name() && r.post == post.name())
    }
}

/// One method's predictions on one pair.
struct Predictions {
    probs: Vec<f64>,
    weights: Vec<f64>,
}

fn predict(
    method: Method,
    pair_correspondences: &[Correspondence],
    labels: &[bool],
    prior: &[f64],
    model: Option<&CascadeModel>,
) -> Result<Predictions, MetricsError> {
    match method {
        Method::RansacOnly => Ok(Predictions {
            probs: vec![1.0; pair_correspondences.len()],
            weights: vec![1.0; pair_correspondences.len()],
        }),
        Method::Oracle => Ok(Predictions {
            probs: labels.iter().map(|&l| if l { 0.99 } else { 0.01 }).collect(),
            weights: labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
        }),
        Method::Learned => {
            let model = model.ok_or(MetricsError::MissingModel)?;
            let out = model.infer(pair_correspondences, prior)?;
            let probs = out
                .stage_logits
                .last()
                .expect("at least one stage")
                .iter()
                .map(|&l| {
                    if l >= 0.0 {
                        1.0 / (1.0 + (-l).exp())
                    } else {
                        l.exp() / (1.0 + l.exp())
                    }
                })
                .collect();
            Ok(Predictions {
                probs,
                weights: out.final_weights,
            })
        }
    }
}

fn estimate_pose_errors(
    post: PostProcess,
    correspondences: &[Correspondence],
    predictions: &Predictions,
    gt_pose: &Pose,
    seed: u64,
) -> (f64, f64) {
    let predicted_inliers: Vec<Correspondence> = correspondences
        .iter()
        .zip(predictions.probs.iter())
        .filter(|(_, &p)| p > 0.5)
        .map(|(c, _)| *c)
        .collect();
    if predicted_inliers.is_empty() {
        return (FAILED_PAIR_ERROR_DEG, FAILED_PAIR_ERROR_DEG);
    }
    let estimate: Option<EssentialMatrix> = match post {
        PostProcess::WeightedEightPoint => {
            weighted_eight_point(correspondences, &predictions.weights).ok()
        }
        PostProcess::Ransac => ransac_essential(
            &predicted_inliers,
            RANSAC_POST_ITERATIONS,
            RANSAC_POST_THRESHOLD,
            seed,
        )
        .ok()
        .map(|(e, _)| e),
    };
    match estimate {
        Some(e) => recover_pose_and_angular_errors(&e, gt_pose, &predicted_inliers)
            .unwrap_or((FAILED_PAIR_ERROR_DEG, FAILED_PAIR_ERROR_DEG)),
        None => (FAILED_PAIR_ERROR_DEG, FAILED_PAIR_ERROR_DEG),
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over a combined counter.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluates every `(method, post)` combination over the dataset. Learned
/// methods require `model`. Deterministic for a fixed `seed`.
pub fn run_comparison(
    dataset: &Dataset,
    prior_model: &RatioDensityModel,
    model: Option<&CascadeModel>,
    methods: &[Method],
    posts: &[PostProcess],
    seed: u64,
) -> Result<MetricsReport, MetricsError> {
    if methods.contains(&Method::Learned) && model.is_none() {
        return Err(MetricsError::MissingModel);
    }
    let priors: Vec<Vec<f64>> = dataset
        .pairs
        .iter()
        .map(|p| {
            if p.len() >= MIN_RATIOS_FOR_ESTIMATE {
                posteriors_for_pair(&p.lowe_ratios, prior_model)
            } else {
                Ok(vec![0.5; p.len()])
            }
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(methods.len() * posts.len());
    for (mi, &method) in methods.iter().enumerate() {
        // Predictions are shared across post-processing modes.
        let predictions: Vec<Predictions> = dataset
            .pairs
            .iter()
            .zip(priors.iter())
            .map(|(pair, prior)| {
                predict(method, &pair.correspondences, &pair.labels, prior, model)
            })
            .collect::<Result<_, _>>()?;
        for (pi, &post) in posts.iter().enumerate() {
            let mut per_pair = Vec::with_capacity(dataset.pairs.len());
            let mut errors = Vec::with_capacity(dataset.pairs.len());
            for (pair_idx, (pair, preds)) in
                dataset.pairs.iter().zip(predictions.iter()).enumerate()
            {
                let cls = compute_classification_metrics(&preds.probs, &pair.labels)?;
                let pair_seed = mix_seed(seed, (mi * posts.len() + pi) as u64, pair_idx as u64);
                let (rot, trans) = estimate_pose_errors(
                    post,
                    &pair.correspondences,
                    preds,
                    &pair.gt_pose,
                    pair_seed,
                );
                errors.push(rot.max(trans));
                per_pair.push(PairRecord {
                    precision: cls.precision,
                    recall: cls.recall,
                    f1: cls.f1,
                    f2: cls.f2,
                    rot_err_deg: rot,
                    trans_err_deg: trans,
                });
            }
            let n = per_pair.len() as f64;
            rows.push(ReportRow {
                method: method.name().to_string(),
                post: post.name().to_string(),
                map5: map_at_threshold(&errors, 5.0)?,
                map10: map_at_threshold(&errors, 10.0)?,
                map20: map_at_threshold(&errors, 20.0)?,
                mean_p: per_pair.iter().map(|r| r.precision).sum::<f64>() / n,
                mean_r: per_pair.iter().map(|r| r.recall).sum::<f64>() / n,
                mean_f2: per_pair.iter().map(|r| r.f2).sum::<f64>() / n,
                per_pair,
            });
        }
    }
    Ok(MetricsReport { rows })
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<(), MetricsError> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// CSV mirror: one row per `(method, post)`, no per-pair detail.
pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<(), MetricsError> {
    let mut out = String::from("method,post,map5,map10,map20,mean_p,mean_r,mean_f2\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.method,
            row.post,
            row.map5,
            row.map10,
            row.map20,
            row.mean_p,
            row.mean_r,
            row.mean_f2
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
