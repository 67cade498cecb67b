//! Pose mAP, inlier precision/recall, method comparison tables and
//! cluster-response export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::diffengine::{load_checkpoint, save_checkpoint, EngineError, Graph, ParameterStore};
use crate::epipolar::{pose_angular_errors, project_to_essential, recover_pose, Correspondence, Pose};
use crate::oanet::{Architecture, Mode, NetError, NetworkConfig, OaNet, UnpoolVariant};
use crate::ransac::{ransac_essential, ransac_postprocess, RansacConfig, RansacError};
use crate::synthdata::ScenePair;

/// Human-readable statement of the pose metric, for manifests and logs.
pub const MAP_DEFINITION: &str = "mAP(T) = mean over tau = 5,10,..,T deg of the percentage of pairs whose \
max(rotation, translation) error is below tau; failed pairs count as infinite error. \
precision and recall are per-pair values averaged over pairs; fscore is their harmonic mean.";

pub const METRICS_HEADER: &str = "method,mAP5,mAP10,mAP20,precision,recall,fscore,pairs,failures";
pub const RESPONSES_HEADER: &str = "cluster,rank,row,value";
pub const DEFAULT_TOP_K: usize = 15;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no pairs to evaluate")]
    EmptyEvaluation,
    #[error("mAP threshold must be a positive multiple of 5, got {0}")]
    InvalidThreshold(u32),
    #[error("method {0} needs a checkpoint")]
    MissingCheckpoint(String),
    #[error("checkpoint {path} not found")]
    CheckpointNotFound { path: PathBuf },
    #[error("checkpoint {path} does not match its network config: {detail}")]
    IncompatibleCheckpoint { path: PathBuf, detail: String },
    #[error("cluster responses need the order-aware unpool, got {0}")]
    NotOrderAware(String),
    #[error("mask has {mask} rows but labels have {labels}")]
    LengthMismatch { mask: usize, labels: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ransac(#[from] RansacError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Percentage of pairs with `max(rot, trans)` below each of 5, 10, .., `max`
/// degrees, averaged. `None` marks a failed pair.
pub fn pose_map(errors: &[Option<(f64, f64)>], max_threshold_deg: u32) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    if max_threshold_deg == 0 || !max_threshold_deg.is_multiple_of(5) {
        return Err(EvalError::InvalidThreshold(max_threshold_deg));
    }
    let per_pair: Vec<f64> = errors.iter().map(|e| e.map_or(f64::INFINITY, |(r, t)| r.max(t))).collect();
    let thresholds: Vec<f64> = (1..=max_threshold_deg / 5).map(|k| (5 * k) as f64).collect();
    let total: f64 = thresholds
        .iter()
        .map(|&tau| per_pair.iter().filter(|&&e| e < tau).count() as f64 / per_pair.len() as f64)
        .sum();
    Ok(100.0 * total / thresholds.len() as f64)
}

/// Percentages; a zero denominator yields 0 and sets the matching flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn classification_prf(predicted: &[u8], labels: &[u8]) -> Result<Prf, EvalError> {
    if predicted.len() != labels.len() {
        return Err(EvalError::LengthMismatch { mask: predicted.len(), labels: labels.len() });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in predicted.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    Ok(Prf {
        precision,
        recall,
        fscore: harmonic(precision, recall),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fneg == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ransac,
    OaNet,
    OaNetRansac,
    PointCnAblation,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ransac, Method::OaNet, Method::OaNetRansac, Method::PointCnAblation];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ransac => "ransac",
            Method::OaNet => "oanet",
            Method::OaNetRansac => "oanet+ransac",
            Method::PointCnAblation => "pointcn_ablation",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: OaNet,
    pub store: ParameterStore,
}

/// The network config is stored next to the checkpoint, in `<checkpoint>.net`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".net");
    checkpoint.with_file_name(name)
}

impl TrainedModel {
    pub fn save(&self, checkpoint: &Path) -> Result<(), EvalError> {
        save_checkpoint(&self.store, checkpoint)?;
        let side = sidecar_path(checkpoint);
        let tmp = side.with_extension("net.tmp");
        std::fs::write(&tmp, self.net.config.to_kv())
            .and_then(|_| std::fs::rename(&tmp, &side))
            .map_err(|source| EvalError::Io { path: side, source })
    }

    pub fn load(checkpoint: &Path) -> Result<Self, EvalError> {
        let side = sidecar_path(checkpoint);
        for p in [checkpoint, side.as_path()] {
            if !p.exists() {
                return Err(EvalError::CheckpointNotFound { path: p.to_path_buf() });
            }
        }
        let text = std::fs::read_to_string(&side).map_err(|source| EvalError::Io { path: side.clone(), source })?;
        let net = OaNet::new(NetworkConfig::from_kv(&text)?)?;
        let store = load_checkpoint(checkpoint)?;
        let reference = net.init(0);
        for (name, p) in reference.iter() {
            let found = store.get(name).ok_or_else(|| EvalError::IncompatibleCheckpoint {
                path: checkpoint.to_path_buf(),
                detail: format!("missing parameter {name}"),
            })?;
            if found.value.shape() != p.value.shape() {
                return Err(EvalError::IncompatibleCheckpoint {
                    path: checkpoint.to_path_buf(),
                    detail: format!("{name} has shape {:?}, expected {:?}", found.value.shape(), p.value.shape()),
                });
            }
        }
        Ok(Self { net, store })
    }
}

/// Outcome of one method on one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    /// `None` when estimation failed.
    pub pose: Option<Pose>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: String,
    pub pairs: Vec<PairResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub map5: f64,
    pub map10: f64,
    pub map20: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub pairs: usize,
    pub failures: usize,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.method,
            self.map5,
            self.map10,
            self.map20,
            self.precision,
            self.recall,
            self.fscore,
            self.pairs,
            self.failures
        )
    }
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Angular errors per pair, `None` for failures.
pub fn pose_errors(result: &MethodResult, pairs: &[ScenePair]) -> Vec<Option<(f64, f64)>> {
    result.pairs.iter().zip(pairs).map(|(r, p)| r.pose.as_ref().map(|est| pose_angular_errors(est, &p.pose))).collect()
}

pub fn report(result: &MethodResult, pairs: &[ScenePair]) -> Result<MetricsReport, EvalError> {
    if pairs.is_empty() || result.pairs.len() != pairs.len() {
        return Err(EvalError::EmptyEvaluation);
    }
    let errors = pose_errors(result, pairs);
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (r, p) in result.pairs.iter().zip(pairs) {
        let prf = classification_prf(&r.mask, &p.labels)?;
        precision += prf.precision;
        recall += prf.recall;
    }
    let n = pairs.len() as f64;
    let (precision, recall) = (precision / n, recall / n);
    Ok(MetricsReport {
        method: result.method.clone(),
        map5: pose_map(&errors, 5)?,
        map10: pose_map(&errors, 10)?,
        map20: pose_map(&errors, 20)?,
        precision,
        recall,
        fscore: harmonic(precision, recall),
        pairs: pairs.len(),
        failures: errors.iter().filter(|e| e.is_none()).count(),
    })
}

fn mask_weights(mask: &[u8]) -> Vec<f64> {
    mask.iter().map(|&m| m as f64).collect()
}

fn ransac_cfg(base: &RansacConfig, pair_index: usize) -> RansacConfig {
    RansacConfig { seed: base.seed.wrapping_add(pair_index as u64), ..*base }
}

pub fn run_ransac(pairs: &[ScenePair], cfg: &RansacConfig) -> MethodResult {
    let results = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| match ransac_essential(&p.correspondences, &ransac_cfg(cfg, i)) {
            Ok(r) => {
                let pose = recover_pose(&r.essential, &p.correspondences, &mask_weights(&r.mask)).ok();
                PairResult { pose, mask: r.mask }
            }
            Err(_) => PairResult { pose: None, mask: vec![0; p.correspondences.len()] },
        })
        .collect();
    MethodResult { method: Method::Ransac.name().into(), pairs: results }
}

/// Network predictions, optionally followed by RANSAC on the rows with
/// positive weight.
pub fn run_network(
    model: &TrainedModel,
    pairs: &[ScenePair],
    postprocess: Option<&RansacConfig>,
    method: &str,
) -> Result<MethodResult, EvalError> {
    let sets: Vec<&[Correspondence]> = pairs.iter().map(|p| p.correspondences.as_slice()).collect();
    let predictions = model.net.predict(&model.store, &sets)?;
    let results = predictions
        .par_iter()
        .zip(pairs.par_iter())
        .enumerate()
        .map(|(i, (pred, p))| {
            let set = &p.correspondences;
            match postprocess {
                None => {
                    let mask: Vec<u8> = pred.logits.iter().map(|&z| (z > 0.0) as u8).collect();
                    let pose = pred
                        .essential
                        .as_ref()
                        .ok()
                        .and_then(|e| project_to_essential(e.matrix()).ok())
                        .and_then(|e| recover_pose(&e, set, &pred.weights).ok());
                    PairResult { pose, mask }
                }
                Some(cfg) => match ransac_postprocess(set, &pred.weights, &ransac_cfg(cfg, i), 0.0) {
                    Ok(r) => {
                        let pose = recover_pose(&r.essential, set, &mask_weights(&r.mask)).ok();
                        PairResult { pose, mask: r.mask }
                    }
                    Err(_) => PairResult { pose: None, mask: vec![0; set.len()] },
                },
            }
        })
        .collect();
    Ok(MethodResult { method: method.into(), pairs: results })
}

/// Learned models available to [`compare_methods`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Models<'a> {
    pub oanet: Option<&'a TrainedModel>,
    pub pointcn: Option<&'a TrainedModel>,
}

pub fn run_method(
    method: Method,
    pairs: &[ScenePair],
    models: Models<'_>,
    ransac: &RansacConfig,
) -> Result<MethodResult, EvalError> {
    fn need(m: Option<&TrainedModel>, method: Method) -> Result<&TrainedModel, EvalError> {
        m.ok_or_else(|| EvalError::MissingCheckpoint(method.name().into()))
    }
    match method {
        Method::Ransac => Ok(run_ransac(pairs, ransac)),
        Method::OaNet => run_network(need(models.oanet, method)?, pairs, None, method.name()),
        Method::OaNetRansac => run_network(need(models.oanet, method)?, pairs, Some(ransac), method.name()),
        Method::PointCnAblation => run_network(need(models.pointcn, method)?, pairs, None, method.name()),
    }
}

/// One report per method, in the order given.
pub fn compare_methods(
    pairs: &[ScenePair],
    methods: &[Method],
    models: Models<'_>,
    ransac: &RansacConfig,
) -> Result<Vec<MetricsReport>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    methods.iter().map(|&m| report(&run_method(m, pairs, models, ransac)?, pairs)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseRow {
    pub cluster: usize,
    pub rank: usize,
    pub row: usize,
    pub value: f64,
}

/// Top `top_k` rows of every column of the (last-stage) unpool assignment.
pub fn export_cluster_responses(
    model: &TrainedModel,
    set: &[Correspondence],
    top_k: usize,
) -> Result<Vec<ResponseRow>, EvalError> {
    let cfg = &model.net.config;
    if cfg.architecture == Architecture::PointCn || cfg.unpool != UnpoolVariant::OrderAware {
        return Err(EvalError::NotOrderAware(format!("{} / {:?}", cfg.architecture.name(), cfg.unpool)));
    }
    let mut g = Graph::new();
    let out = model.net.forward(&mut g, &model.store, &[set], Mode::Eval)?;
    let s = out.last().unpool_assignment.expect("pooling architecture has an unpool assignment");
    let s = g.value(s);
    let (n, m) = (s.shape()[1], s.shape()[2]);
    let data = s.data();
    let mut rows = Vec::with_capacity(m * top_k.min(n));
    for cluster in 0..m {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data[b * m + cluster].total_cmp(&data[a * m + cluster]).then(a.cmp(&b)));
        for (rank, &row) in order.iter().take(top_k).enumerate() {
            rows.push(ResponseRow { cluster, rank, row, value: data[row * m + cluster] });
        }
    }
    Ok(rows)
}

pub fn responses_csv(rows: &[ResponseRow]) -> String {
    let mut out = String::from(RESPONSES_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.12e}", r.cluster, r.rank, r.row, r.value);
    }
    out
}
