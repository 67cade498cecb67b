//! Building blocks of the network. Each block has an `init_*` function that
//! registers its parameters and a forward function that reads them back by
//! name, so initialization order alone fixes the random draws.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffengine::{EngineError, Graph, ParameterStore, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages collected for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Sub-layer order inside a PointCN unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOrder {
    /// ContextNorm, BatchNorm, ReLU, then the shared perceptron.
    NormFirst,
    /// Shared perceptron first, then ContextNorm, BatchNorm, ReLU.
    PerceptronFirst,
}

/// Batch statistics of one batch-norm layer, to be folded into its running
/// averages after the step.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Per-forward state shared by all blocks.
pub struct Ctx<'a> {
    pub store: &'a ParameterStore,
    pub mode: Mode,
    pub order: NormOrder,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParameterStore, mode: Mode, order: NormOrder) -> Self {
        Self { store, mode, order, bn_updates: Vec::new() }
    }

    fn param(&self, g: &mut Graph, name: &str) -> Result<Var, EngineError> {
        g.parameter(self.store, name)
    }
}

/// Folds collected batch statistics into the running averages:
/// `running = 0.9 * running + 0.1 * batch`.
pub fn apply_bn_updates(store: &mut ParameterStore, updates: &[BnUpdate]) -> Result<(), EngineError> {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let key = format!("{}.{suffix}", u.name);
            let mut t = store.value(&key)?.clone();
            for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            store.set_value(&key, t)?;
        }
    }
    Ok(())
}

pub fn init_linear(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, din: usize, dout: usize, bias: bool) {
    let normal = Normal::new(0.0, (2.0 / din as f64).sqrt()).expect("positive std");
    let w = Tensor::from_fn(&[din, dout], |_| normal.sample(rng));
    store.insert(format!("{name}.weight"), w, true);
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]), true);
    }
}

/// Identical affine map `x W + b` at every point.
pub fn shared_perceptron(ctx: &Ctx, g: &mut Graph, name: &str, x: Var) -> Result<Var, EngineError> {
    let w = ctx.param(g, &format!("{name}.weight"))?;
    let bias_name = format!("{name}.bias");
    let b = match ctx.store.get(&bias_name) {
        Some(_) => Some(ctx.param(g, &bias_name)?),
        None => None,
    };
    g.linear(x, w, b)
}

/// Per sample and channel: zero mean and unit variance over the points.
pub fn context_norm(g: &mut Graph, x: Var) -> Result<Var, EngineError> {
    g.normalize(x, 1..2, NORM_EPS)
}

pub fn init_batch_norm(store: &mut ParameterStore, name: &str, d: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0), true);
    store.insert(format!("{name}.beta"), Tensor::zeros(&[d]), true);
    store.insert(format!("{name}.running_mean"), Tensor::zeros(&[d]), false);
    store.insert(format!("{name}.running_var"), Tensor::full(&[d], 1.0), false);
}

/// Per-channel normalization over batch and points, followed by the learned
/// affine map.
pub fn batch_norm(ctx: &mut Ctx, g: &mut Graph, name: &str, x: Var) -> Result<Var, EngineError> {
    let gamma = ctx.param(g, &format!("{name}.gamma"))?;
    let beta = ctx.param(g, &format!("{name}.beta"))?;
    let normalized = match ctx.mode {
        Mode::Train => {
            let shape = g.value(x).shape().to_vec();
            let count = shape[0] * shape[1];
            let y = g.normalize(x, 0..2, NORM_EPS)?;
            let (mean, var) = g.normalization_stats(y).expect("normalize node");
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            ctx.bn_updates.push(BnUpdate {
                name: name.to_string(),
                mean: mean.to_vec(),
                var: var.iter().map(|v| v * unbias).collect(),
            });
            y
        }
        Mode::Eval => {
            let rm = ctx.store.value(&format!("{name}.running_mean"))?;
            let rv = ctx.store.value(&format!("{name}.running_var"))?;
            let inv: Vec<f64> = rv.data().iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let shift: Vec<f64> = rm.data().iter().zip(&inv).map(|(m, s)| -m * s).collect();
            let d = inv.len();
            let scale = g.constant(Tensor::new(vec![d], inv)?)?;
            let shift = g.constant(Tensor::new(vec![d], shift)?)?;
            g.channel_affine(x, scale, shift)?
        }
    };
    g.channel_affine(normalized, gamma, beta)
}

/// One PointCN unit mapping `din` to `dout` channels. `bias` is dropped
/// where the next operation is a normalization that would cancel it.
pub fn init_pointcn_unit(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    name: &str,
    din: usize,
    dout: usize,
    order: NormOrder,
    bias: bool,
) {
    let norm_width = match order {
        NormOrder::NormFirst => din,
        NormOrder::PerceptronFirst => dout,
    };
    init_batch_norm(store, &format!("{name}.bn"), norm_width);
    let bias = bias && order == NormOrder::NormFirst;
    init_linear(store, rng, &format!("{name}.linear"), din, dout, bias);
}

pub fn pointcn_unit(ctx: &mut Ctx, g: &mut Graph, name: &str, x: Var) -> Result<Var, EngineError> {
    let linear = format!("{name}.linear");
    let bn = format!("{name}.bn");
    match ctx.order {
        NormOrder::NormFirst => {
            let h = context_norm(g, x)?;
            let h = batch_norm(ctx, g, &bn, h)?;
            let h = g.relu(h)?;
            shared_perceptron(ctx, g, &linear, h)
        }
        NormOrder::PerceptronFirst => {
            let h = shared_perceptron(ctx, g, &linear, x)?;
            let h = context_norm(g, h)?;
            let h = batch_norm(ctx, g, &bn, h)?;
            g.relu(h)
        }
    }
}

pub fn init_pointcn_block(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, d: usize, order: NormOrder) {
    // The first unit feeds straight into the second unit's normalization.
    init_pointcn_unit(store, rng, &format!("{name}.unit0"), d, d, order, false);
    init_pointcn_unit(store, rng, &format!("{name}.unit1"), d, d, order, true);
}

/// Two PointCN units with an identity skip connection.
pub fn pointcn_resnet_block(ctx: &mut Ctx, g: &mut Graph, name: &str, x: Var) -> Result<Var, EngineError> {
    let h = pointcn_unit(ctx, g, &format!("{name}.unit0"), x)?;
    let h = pointcn_unit(ctx, g, &format!("{name}.unit1"), h)?;
    g.add(h, x)
}

pub fn init_diff_pool(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    name: &str,
    d: usize,
    m: usize,
    order: NormOrder,
) {
    init_pointcn_unit(store, rng, &format!("{name}.h"), d, m, order, true);
}

/// Output of [`diff_pool`].
pub struct Pooled {
    /// `(B, M, D)`.
    pub clusters: Var,
    /// `(B, N, M)`, rows sum to one.
    pub assignment: Var,
}

/// Soft assignment of the `N` points to `M` clusters and the weighted
/// cluster features `S^T X`. `pool_axis` selects the softmax direction of
/// the `(B, N, M)` logits; 2 normalizes each point's row over the clusters.
pub fn diff_pool(ctx: &mut Ctx, g: &mut Graph, name: &str, x: Var, pool_axis: usize) -> Result<Pooled, EngineError> {
    let logits = pointcn_unit(ctx, g, &format!("{name}.h"), x)?;
    let assignment = g.softmax(logits, pool_axis)?;
    let st = g.transpose(assignment)?;
    let clusters = g.matmul(st, x)?;
    Ok(Pooled { clusters, assignment })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnpoolVariant {
    /// Assignment predicted from the cluster features alone; needs a fixed
    /// number of points.
    Plain,
    /// Assignment predicted from the pre-pool point features.
    OrderAware,
}

#[allow(clippy::too_many_arguments)]
pub fn init_diff_unpool(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    name: &str,
    variant: UnpoolVariant,
    d: usize,
    m: usize,
    n: usize,
    order: NormOrder,
) {
    // The softmax runs over the axis each bias entry is constant along, so
    // no bias is needed in either variant.
    let dout = match variant {
        UnpoolVariant::OrderAware => m,
        UnpoolVariant::Plain => n,
    };
    init_pointcn_unit(store, rng, &format!("{name}.h"), d, dout, order, false);
}

pub struct Unpooled {
    /// `(B, N, D)`.
    pub features: Var,
    /// `(B, N, M)` for the order-aware variant, `(B, M, N)` for the plain one.
    pub assignment: Var,
}

/// Maps cluster features `(B, M, D)` back to the `N` points.
///
/// Order-aware: `S = softmax(h(X_l))` of shape `(B, N, M)` normalized along
/// `unpool_axis` (1 = over points, i.e. each column), output `S X'`.
/// Plain: `S = softmax(h(X'))` of shape `(B, M, N)` normalized over the
/// clusters, output `S^T X'`.
pub fn diff_unpool(
    ctx: &mut Ctx,
    g: &mut Graph,
    name: &str,
    variant: UnpoolVariant,
    points: Var,
    clusters: Var,
    unpool_axis: usize,
) -> Result<Unpooled, EngineError> {
    let h = format!("{name}.h");
    match variant {
        UnpoolVariant::OrderAware => {
            let logits = pointcn_unit(ctx, g, &h, points)?;
            let assignment = g.softmax(logits, unpool_axis)?;
            let features = g.matmul(assignment, clusters)?;
            Ok(Unpooled { features, assignment })
        }
        UnpoolVariant::Plain => {
            let logits = pointcn_unit(ctx, g, &h, clusters)?;
            let assignment = g.softmax(logits, 1)?;
            let st = g.transpose(assignment)?;
            let features = g.matmul(st, clusters)?;
            Ok(Unpooled { features, assignment })
        }
    }
}

pub fn init_spatial_correlation(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, m: usize) {
    init_linear(store, rng, name, m, m, true);
}

/// Linear map along the cluster axis, shared by all channels:
/// `out[b, j, c] = sum_i W[j, i] F[b, i, c] + bias[j]`.
pub fn spatial_correlation(ctx: &Ctx, g: &mut Graph, name: &str, x: Var) -> Result<Var, EngineError> {
    let w = ctx.param(g, &format!("{name}.weight"))?;
    let b = ctx.param(g, &format!("{name}.bias"))?;
    let m = g.value(w).shape()[0];
    if g.value(x).shape().get(1) != Some(&m) {
        return Err(EngineError::ShapeMismatch {
            op: "spatial_correlation",
            detail: format!("input {:?} against {m} clusters", g.value(x).shape()),
        });
    }
    let xt = g.transpose(x)?;
    let wt = g.transpose(w)?;
    let y = g.linear(xt, wt, Some(b))?;
    g.transpose(y)
}

pub fn init_order_aware_block(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    name: &str,
    d: usize,
    m: usize,
    order: NormOrder,
) {
    init_pointcn_unit(store, rng, &format!("{name}.unit0"), d, d, order, true);
    init_batch_norm(store, &format!("{name}.sc.bn"), m);
    init_spatial_correlation(store, rng, &format!("{name}.sc"), m);
    init_pointcn_unit(store, rng, &format!("{name}.unit1"), d, d, order, true);
}

/// PointCN unit, then a residual spatial-correlation stage (BatchNorm over
/// clusters, ReLU, the cluster-axis linear map), then a second PointCN unit,
/// all wrapped in an identity skip.
pub fn order_aware_block(ctx: &mut Ctx, g: &mut Graph, name: &str, x: Var) -> Result<Var, EngineError> {
    let h = pointcn_unit(ctx, g, &format!("{name}.unit0"), x)?;
    let ht = g.transpose(h)?;
    let s = batch_norm(ctx, g, &format!("{name}.sc.bn"), ht)?;
    let s = g.relu(s)?;
    let s = g.transpose(s)?;
    let s = spatial_correlation(ctx, g, &format!("{name}.sc"), s)?;
    let h = g.add(h, s)?;
    let h = pointcn_unit(ctx, g, &format!("{name}.unit1"), h)?;
    g.add(h, x)
}
