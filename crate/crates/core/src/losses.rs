//! Training objectives: class-balanced logistic loss on the inlier logits and
//! a sign-invariant essential-matrix term (Frobenius or clamped geometric).

use thiserror::Error;

use crate::diffengine::{CustomOp, EngineError, Graph, Tensor, Var};
use crate::epipolar::{symmetric_epipolar_distance_grad, Correspondence, Mat3};
use crate::kvconfig::{render, KvError, KvMap};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("labels have {positives} positives and {negatives} negatives; both classes are required")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("geometry loss needs at least one ground-truth inlier")]
    NoInliers,
    #[error("no sample in the batch produced a usable loss term")]
    EmptyBatch,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Config(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EssentialLossKind {
    L2,
    Geometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BceMode {
    /// Positive and negative terms are averaged within their class first.
    Balanced,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    /// Iterations during which the essential term is switched off.
    pub warmup: u64,
    pub kind: EssentialLossKind,
    pub clamp: f64,
    pub bce: BceMode,
}

pub const DESK_WARMUP: u64 = 500;
pub const FULL_WARMUP: u64 = 20_000;
pub const DEFAULT_CLAMP: f64 = 0.1;

impl LossConfig {
    /// Default weight for each kind: 0.1 for the Frobenius loss, 0.5 for the
    /// geometry loss.
    pub fn default_alpha(kind: EssentialLossKind) -> f64 {
        match kind {
            EssentialLossKind::L2 => 0.1,
            EssentialLossKind::Geometry => 0.5,
        }
    }

    pub fn desk(kind: EssentialLossKind) -> Self {
        Self {
            alpha: Self::default_alpha(kind),
            warmup: DESK_WARMUP,
            kind,
            clamp: DEFAULT_CLAMP,
            bce: BceMode::Balanced,
        }
    }

    pub fn full(kind: EssentialLossKind) -> Self {
        Self { warmup: FULL_WARMUP, ..Self::desk(kind) }
    }

    pub fn alpha_at(&self, iteration: u64) -> f64 {
        if iteration < self.warmup {
            0.0
        } else {
            self.alpha
        }
    }
}

impl LossConfig {
    /// Reads `loss`, `alpha`, `warmup`, `clamp` and `bce` over `base`.
    /// Changing the kind without giving `alpha` picks that kind's default.
    pub fn take_from(kv: &mut KvMap, base: Self) -> Result<Self, LossError> {
        let mut c = base;
        if let Some(k) = kv.choice("loss", &["l2", "geometry"])? {
            c.kind = if k == "l2" { EssentialLossKind::L2 } else { EssentialLossKind::Geometry };
            c.alpha = Self::default_alpha(c.kind);
        }
        if let Some(a) = kv.f64("alpha")? {
            c.alpha = a;
        }
        if let Some(w) = kv.u64("warmup")? {
            c.warmup = w;
        }
        if let Some(v) = kv.f64("clamp")? {
            c.clamp = v;
        }
        if let Some(b) = kv.choice("bce", &["balanced", "plain"])? {
            c.bce = if b == "balanced" { BceMode::Balanced } else { BceMode::Plain };
        }
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let kind = match self.kind {
            EssentialLossKind::L2 => "l2",
            EssentialLossKind::Geometry => "geometry",
        };
        let bce = match self.bce {
            BceMode::Balanced => "balanced",
            BceMode::Plain => "plain",
        };
        render(&[
            ("loss", kind.to_string()),
            ("alpha", self.alpha.to_string()),
            ("warmup", self.warmup.to_string()),
            ("clamp", self.clamp.to_string()),
            ("bce", bce.to_string()),
        ])
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::desk(EssentialLossKind::L2)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and gradient with respect to the logits for one sample.
pub fn classification_loss_grad(z: &[f64], s: &[u8], mode: BceMode) -> Result<(f64, Vec<f64>), LossError> {
    if z.len() != s.len() {
        return Err(LossError::LengthMismatch { what: "labels", expected: z.len(), got: s.len() });
    }
    let positives = s.iter().filter(|&&v| v != 0).count();
    let negatives = s.len() - positives;
    let (wp, wn) = match mode {
        BceMode::Balanced => {
            if positives == 0 || negatives == 0 {
                return Err(LossError::DegenerateLabels { positives, negatives });
            }
            (0.5 / positives as f64, 0.5 / negatives as f64)
        }
        BceMode::Plain => {
            if s.is_empty() {
                return Err(LossError::DegenerateLabels { positives, negatives });
            }
            let w = 1.0 / s.len() as f64;
            (w, w)
        }
    };
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (&zi, &si) in z.iter().zip(s) {
        if si != 0 {
            // -log sigmoid(z)
            loss += wp * softplus(-zi);
            grad.push(wp * (sigmoid(zi) - 1.0));
        } else {
            // -log(1 - sigmoid(z))
            loss += wn * softplus(zi);
            grad.push(wn * sigmoid(zi));
        }
    }
    Ok((loss, grad))
}

pub fn classification_loss(z: &[f64], s: &[u8], mode: BceMode) -> Result<f64, LossError> {
    classification_loss_grad(z, s, mode).map(|(l, _)| l)
}

/// `min(||E_hat - E||_F, ||E_hat + E||_F)` and its gradient with respect to
/// `E_hat` (row-major). The gradient is zero where the distance vanishes.
pub fn essential_l2_loss_grad(e_hat: &Mat3, e_gt: &Mat3) -> (f64, [f64; 9]) {
    let minus = e_hat - e_gt;
    let plus = e_hat + e_gt;
    let d = if minus.norm() <= plus.norm() { minus } else { plus };
    let n = d.norm();
    let mut g = [0.0; 9];
    if n > 0.0 {
        for i in 0..3 {
            for j in 0..3 {
                g[i * 3 + j] = d[(i, j)] / n;
            }
        }
    }
    (n, g)
}

pub fn essential_l2_loss(e_hat: &Mat3, e_gt: &Mat3) -> f64 {
    essential_l2_loss_grad(e_hat, e_gt).0
}

/// Mean clamped symmetric epipolar distance over `inliers`, with the
/// gradient with respect to `E_hat` (row-major). Rows at the epipoles
/// contribute the clamp value and no gradient.
pub fn geometry_loss_grad(e_hat: &Mat3, inliers: &[Correspondence], clamp: f64) -> Result<(f64, [f64; 9]), LossError> {
    if inliers.is_empty() {
        return Err(LossError::NoInliers);
    }
    let n = inliers.len() as f64;
    let mut loss = 0.0;
    let mut saturated = 0usize;
    let mut grad = [0.0; 9];
    for c in inliers {
        match symmetric_epipolar_distance_grad(e_hat, c) {
            Some((d, g)) if d < clamp => {
                loss += d;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v / n;
                }
            }
            _ => saturated += 1,
        }
    }
    // Fully saturated sets give exactly the clamp value.
    Ok((loss / n + clamp * (saturated as f64 / n), grad))
}

pub fn geometry_loss(e_hat: &Mat3, inliers: &[Correspondence], clamp: f64) -> Result<f64, LossError> {
    geometry_loss_grad(e_hat, inliers, clamp).map(|(l, _)| l)
}

fn inlier_rows(set: &[Correspondence], labels: &[u8]) -> Vec<Correspondence> {
    set.iter().zip(labels).filter(|(_, &s)| s != 0).map(|(c, _)| *c).collect()
}

/// The essential term selected by `cfg` for one sample.
pub fn essential_term_grad(
    e_hat: &Mat3,
    e_gt: &Mat3,
    set: &[Correspondence],
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<(f64, [f64; 9]), LossError> {
    match cfg.kind {
        EssentialLossKind::L2 => Ok(essential_l2_loss_grad(e_hat, e_gt)),
        EssentialLossKind::Geometry => geometry_loss_grad(e_hat, &inlier_rows(set, labels), cfg.clamp),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub essential: f64,
    pub alpha: f64,
}

/// Single-sample objective `cls + alpha_eff * ess`. The essential term is
/// only evaluated once the warmup is over.
pub fn total_loss(
    z: &[f64],
    s: &[u8],
    e_hat: &Mat3,
    e_gt: &Mat3,
    set: &[Correspondence],
    cfg: &LossConfig,
    iteration: u64,
) -> Result<LossBreakdown, LossError> {
    let classification = classification_loss(z, s, cfg.bce)?;
    let alpha = cfg.alpha_at(iteration);
    let essential = if alpha > 0.0 { essential_term_grad(e_hat, e_gt, set, s, cfg)?.0 } else { 0.0 };
    Ok(LossBreakdown { total: classification + alpha * essential, classification, essential, alpha })
}

/// Per-sample terms averaged over the samples that produced one; the
/// gradient of each sample is precomputed in the forward pass.
struct PrecomputedMean {
    name: &'static str,
    grads: Vec<Option<Vec<f64>>>,
    width: usize,
}

impl CustomOp for PrecomputedMean {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let used = self.grads.iter().filter(|g| g.is_some()).count().max(1) as f64;
        let scale = grad.item() / used;
        let mut out = vec![0.0; inputs[0].len()];
        for (b, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                for (o, v) in out[b * self.width..(b + 1) * self.width].iter_mut().zip(g) {
                    *o = v * scale;
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("input shape"))]
    }
}

/// Batch classification loss on logits of shape `(B, N)`. Samples whose
/// labels are degenerate are skipped; the count of skipped samples is
/// returned alongside the node.
pub fn classification_node(
    g: &mut Graph,
    z: Var,
    labels: &[Vec<u8>],
    mode: BceMode,
) -> Result<(Var, usize), LossError> {
    let zt = g.value(z);
    let shape = zt.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::LengthMismatch {
            what: "label batch",
            expected: shape.first().copied().unwrap_or(0),
            got: labels.len(),
        });
    }
    let n = shape[1];
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(labels.len());
    let mut skipped = 0;
    for (b, s) in labels.iter().enumerate() {
        match classification_loss_grad(&zt.data()[b * n..(b + 1) * n], s, mode) {
            Ok((l, gr)) => {
                total += l;
                grads.push(Some(gr));
            }
            Err(LossError::DegenerateLabels { .. }) => {
                skipped += 1;
                grads.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let used = labels.len() - skipped;
    if used == 0 {
        return Err(LossError::EmptyBatch);
    }
    let op = PrecomputedMean { name: "classification_loss", grads, width: n };
    let v = g.custom(&[z], Tensor::scalar(total / used as f64), Box::new(op))?;
    Ok((v, skipped))
}

/// Batch essential term on row-major estimates of shape `(B, 9)`. Samples
/// flagged invalid (the solver failed) or without inliers are skipped.
pub fn essential_node(
    g: &mut Graph,
    e_hat: Var,
    valid: &[bool],
    targets: &[Mat3],
    sets: &[Vec<Correspondence>],
    labels: &[Vec<u8>],
    cfg: &LossConfig,
) -> Result<(Var, usize), LossError> {
    let et = g.value(e_hat);
    let b = valid.len();
    if et.shape() != [b, 9] || targets.len() != b || sets.len() != b || labels.len() != b {
        return Err(LossError::LengthMismatch { what: "essential batch", expected: b, got: et.shape()[0] });
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(b);
    let mut skipped = 0;
    for i in 0..b {
        if !valid[i] {
            skipped += 1;
            grads.push(None);
            continue;
        }
        let e = Mat3::from_row_slice(&et.data()[i * 9..(i + 1) * 9]);
        match essential_term_grad(&e, &targets[i], &sets[i], &labels[i], cfg) {
            Ok((l, gr)) => {
                total += l;
                grads.push(Some(gr.to_vec()));
            }
            Err(LossError::NoInliers) => {
                skipped += 1;
                grads.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let used = b - skipped;
    let value = if used == 0 { 0.0 } else { total / used as f64 };
    let op = PrecomputedMean { name: "essential_loss", grads, width: 9 };
    let v = g.custom(&[e_hat], Tensor::scalar(value), Box::new(op))?;
    Ok((v, skipped))
}
