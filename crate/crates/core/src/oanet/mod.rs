//! The order-aware correspondence network: PointCN trunk, differentiable
//! pooling to a canonical cluster order, order-aware unpooling, and a
//! weighted eight-point head.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffengine::{CustomOp, EngineError, Graph, ParameterStore, Tensor, Var};
use crate::epipolar::{symmetric_epipolar_distance, Correspondence, EssentialMatrix};
use crate::kvconfig::{render, KvError, KvMap};
use crate::weighted8pt::{solve_weighted_eightpoint, EightPointSolution, SolverError};

pub use layers::{apply_bn_updates, BnUpdate, Ctx, Mode, NormOrder, UnpoolVariant};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("batch sample {index} has {got} correspondences, expected {expected}")]
    PointCount { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Config(#[from] KvError),
}

/// What sits between DiffPool and DiffUnpool, or whether pooling is used at
/// all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Plain PointCN ResNet stack, no pooling.
    PointCn,
    /// DiffPool / DiffUnpool with PointCN blocks on the clusters.
    PoolUnpool,
    /// DiffPool / DiffUnpool with order-aware filtering blocks on the clusters.
    OrderAware,
}

impl Architecture {
    pub const NAMES: &'static [&'static str] = &["pointcn", "pool", "oanet"];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::PointCn => "pointcn",
            Architecture::PoolUnpool => "pool",
            Architecture::OrderAware => "oanet",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "pointcn" => Some(Self::PointCn),
            "pool" => Some(Self::PoolUnpool),
            "oanet" => Some(Self::OrderAware),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub channels: usize,
    pub clusters: usize,
    pub blocks_pre: usize,
    pub blocks_post: usize,
    pub level2_blocks: usize,
    pub architecture: Architecture,
    pub unpool: UnpoolVariant,
    pub iterative: bool,
    pub order: NormOrder,
    /// Softmax axis of the `(B, N, M)` pooling logits (2: over clusters).
    pub pool_axis: usize,
    /// Softmax axis of the `(B, N, M)` order-aware unpooling logits
    /// (1: over points).
    pub unpool_axis: usize,
    /// Number of correspondences per sample; only the plain unpool variant
    /// depends on it.
    pub points: usize,
}

impl NetworkConfig {
    /// Small network for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            channels: 32,
            clusters: 128,
            blocks_pre: 2,
            blocks_post: 2,
            level2_blocks: 2,
            architecture: Architecture::OrderAware,
            unpool: UnpoolVariant::OrderAware,
            iterative: false,
            order: NormOrder::NormFirst,
            pool_axis: 2,
            unpool_axis: 1,
            points: 512,
        }
    }

    /// The full-size network: 128 channels, 500 clusters, 6 + 6 level-one
    /// blocks and 6 level-two blocks.
    pub fn full() -> Self {
        Self { channels: 128, clusters: 500, blocks_pre: 6, blocks_post: 6, level2_blocks: 6, ..Self::desk() }
    }

    /// Toy size used by gradient checks.
    pub fn toy() -> Self {
        Self { channels: 8, clusters: 4, blocks_pre: 1, blocks_post: 1, level2_blocks: 1, points: 16, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.channels == 0 || self.clusters == 0 || self.points == 0 {
            return bad("channels, clusters and points must be positive");
        }
        if !(1..=2).contains(&self.pool_axis) || !(1..=2).contains(&self.unpool_axis) {
            return bad("softmax axes must be 1 or 2");
        }
        Ok(())
    }

    fn uses_pooling(&self) -> bool {
        self.architecture != Architecture::PointCn
    }

    pub fn to_kv(&self) -> String {
        let order = match self.order {
            NormOrder::NormFirst => "norm_first",
            NormOrder::PerceptronFirst => "perceptron_first",
        };
        let unpool = match self.unpool {
            UnpoolVariant::Plain => "plain",
            UnpoolVariant::OrderAware => "order_aware",
        };
        render(&[
            ("architecture", self.architecture.name().to_string()),
            ("channels", self.channels.to_string()),
            ("clusters", self.clusters.to_string()),
            ("blocks_pre", self.blocks_pre.to_string()),
            ("blocks_post", self.blocks_post.to_string()),
            ("level2_blocks", self.level2_blocks.to_string()),
            ("unpool", unpool.to_string()),
            ("iterative", self.iterative.to_string()),
            ("order", order.to_string()),
            ("pool_axis", self.pool_axis.to_string()),
            ("unpool_axis", self.unpool_axis.to_string()),
            ("points", self.points.to_string()),
        ])
    }

    /// Reads the network keys from `kv`, starting from `base`. Keys that are
    /// not network keys are left in the map.
    pub fn take_from(kv: &mut KvMap, base: Self) -> Result<Self, NetError> {
        let mut c = base;
        if let Some(preset) = kv.choice("preset", &["desk", "full", "toy"])? {
            c = match preset {
                "full" => Self::full(),
                "toy" => Self::toy(),
                _ => Self::desk(),
            };
        }
        if let Some(a) = kv.choice("architecture", Architecture::NAMES)? {
            c.architecture = Architecture::from_name(a).expect("listed");
        }
        macro_rules! num {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.usize(stringify!($field))? { c.$field = v; }
            )*};
        }
        num!(channels, clusters, blocks_pre, blocks_post, level2_blocks, pool_axis, unpool_axis, points);
        if let Some(u) = kv.choice("unpool", &["plain", "order_aware"])? {
            c.unpool = if u == "plain" { UnpoolVariant::Plain } else { UnpoolVariant::OrderAware };
        }
        if let Some(i) = kv.bool("iterative")? {
            c.iterative = i;
        }
        if let Some(o) = kv.choice("order", &["norm_first", "perceptron_first"])? {
            c.order = if o == "norm_first" { NormOrder::NormFirst } else { NormOrder::PerceptronFirst };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_kv(text: &str) -> Result<Self, NetError> {
        let mut kv = KvMap::parse(text)?;
        let c = Self::take_from(&mut kv, Self::desk())?;
        kv.finish()?;
        Ok(c)
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Batched weighted eight-point solve as a graph node: weights `(B, N)` in,
/// row-major estimates `(B, 9)` out. Failed samples produce zeros and no
/// gradient.
struct EightPointOp {
    solutions: Vec<Option<EightPointSolution>>,
}

impl CustomOp for EightPointOp {
    fn name(&self) -> &'static str {
        "weighted_eightpoint"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape();
        let n = shape[1];
        let mut out = vec![0.0; inputs[0].len()];
        for (b, sol) in self.solutions.iter().enumerate() {
            if let Some(sol) = sol {
                let up: [f64; 9] = std::array::from_fn(|k| grad.data()[b * 9 + k]);
                out[b * n..(b + 1) * n].copy_from_slice(&sol.weight_gradient(&up));
            }
        }
        vec![Some(Tensor::new(shape.to_vec(), out).expect("input shape"))]
    }
}

/// Solves every sample of the batch and adds the result to the graph.
pub fn eightpoint_node(
    g: &mut Graph,
    weights: Var,
    sets: &[&[Correspondence]],
) -> Result<(Var, Vec<Result<EssentialMatrix, SolverError>>), EngineError> {
    let wt = g.value(weights);
    let n = wt.shape()[1];
    let solved: Vec<Result<EightPointSolution, SolverError>> = sets
        .iter()
        .enumerate()
        .map(|(b, set)| solve_weighted_eightpoint(set, &wt.data()[b * n..(b + 1) * n]))
        .collect();
    let mut out = vec![0.0; sets.len() * 9];
    for (b, s) in solved.iter().enumerate() {
        if let Ok(s) = s {
            out[b * 9..(b + 1) * 9].copy_from_slice(&s.essential.to_row_major());
        }
    }
    let results = solved.iter().map(|s| s.as_ref().map(|s| s.essential).map_err(Clone::clone)).collect();
    let op = EightPointOp { solutions: solved.into_iter().map(Result::ok).collect() };
    let v = g.custom(&[weights], Tensor::new(vec![sets.len(), 9], out)?, Box::new(op))?;
    Ok((v, results))
}

/// Graph handles of one network stage.
pub struct StageOutput {
    /// `(B, N)`.
    pub logits: Var,
    /// `tanh(relu(logits))`, `(B, N)`.
    pub weights: Var,
    /// Row-major estimates `(B, 9)`; zero rows where the solver failed.
    pub essential: Var,
    pub solutions: Vec<Result<EssentialMatrix, SolverError>>,
    /// Pooled cluster features `(B, M, D)`.
    pub clusters: Option<Var>,
    pub pool_assignment: Option<Var>,
    pub unpool_assignment: Option<Var>,
}

pub struct ForwardOutput {
    /// One entry, or two for the iterative network (the last is the
    /// prediction).
    pub stages: Vec<StageOutput>,
    pub bn_updates: Vec<BnUpdate>,
}

impl ForwardOutput {
    pub fn last(&self) -> &StageOutput {
        self.stages.last().expect("at least one stage")
    }
}

/// A detached per-sample prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub essential: Result<EssentialMatrix, SolverError>,
}

#[derive(Debug, Clone)]
pub struct OaNet {
    pub config: NetworkConfig,
}

fn stage_prefix(config: &NetworkConfig, stage: usize) -> String {
    if config.iterative {
        format!("stage{}.", stage + 1)
    } else {
        String::new()
    }
}

impl OaNet {
    pub fn new(config: NetworkConfig) -> Result<Self, NetError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn stage_count(&self) -> usize {
        if self.config.iterative {
            2
        } else {
            1
        }
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(&self, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stage in 0..self.stage_count() {
            let inputs = if stage == 0 { 4 } else { 6 };
            self.init_stage(&mut store, &mut rng, &stage_prefix(&self.config, stage), inputs);
        }
        store
    }

    fn init_stage(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng, p: &str, inputs: usize) {
        let c = &self.config;
        let (d, m, o) = (c.channels, c.clusters, c.order);
        layers::init_linear(store, rng, &format!("{p}embed"), inputs, d, true);
        for i in 0..c.blocks_pre {
            layers::init_pointcn_block(store, rng, &format!("{p}l1a.{i}"), d, o);
        }
        if c.uses_pooling() {
            layers::init_diff_pool(store, rng, &format!("{p}pool"), d, m, o);
            for i in 0..c.level2_blocks {
                let name = format!("{p}l2.{i}");
                match c.architecture {
                    Architecture::OrderAware => layers::init_order_aware_block(store, rng, &name, d, m, o),
                    _ => layers::init_pointcn_block(store, rng, &name, d, o),
                }
            }
            layers::init_diff_unpool(store, rng, &format!("{p}unpool"), c.unpool, d, m, c.points, o);
            layers::init_linear(store, rng, &format!("{p}fuse"), 2 * d, d, true);
        }
        for i in 0..c.blocks_post {
            layers::init_pointcn_block(store, rng, &format!("{p}l1b.{i}"), d, o);
        }
        layers::init_linear(store, rng, &format!("{p}head"), d, 1, true);
    }

    /// Trunk and head of one stage on `(B, N, C_in)` input features.
    fn stage(
        &self,
        ctx: &mut Ctx,
        g: &mut Graph,
        p: &str,
        input: Var,
        sets: &[&[Correspondence]],
    ) -> Result<StageOutput, NetError> {
        let c = &self.config;
        let mut x = layers::shared_perceptron(ctx, g, &format!("{p}embed"), input)?;
        for i in 0..c.blocks_pre {
            x = layers::pointcn_resnet_block(ctx, g, &format!("{p}l1a.{i}"), x)?;
        }
        let (mut clusters, mut pool_assignment, mut unpool_assignment) = (None, None, None);
        if c.uses_pooling() {
            let pooled = layers::diff_pool(ctx, g, &format!("{p}pool"), x, c.pool_axis)?;
            clusters = Some(pooled.clusters);
            pool_assignment = Some(pooled.assignment);
            let mut h = pooled.clusters;
            for i in 0..c.level2_blocks {
                let name = format!("{p}l2.{i}");
                h = match c.architecture {
                    Architecture::OrderAware => layers::order_aware_block(ctx, g, &name, h)?,
                    _ => layers::pointcn_resnet_block(ctx, g, &name, h)?,
                };
            }
            let up = layers::diff_unpool(ctx, g, &format!("{p}unpool"), c.unpool, x, h, c.unpool_axis)?;
            unpool_assignment = Some(up.assignment);
            let cat = g.concat(up.features, x)?;
            x = layers::shared_perceptron(ctx, g, &format!("{p}fuse"), cat)?;
        }
        for i in 0..c.blocks_post {
            x = layers::pointcn_resnet_block(ctx, g, &format!("{p}l1b.{i}"), x)?;
        }
        let z = layers::shared_perceptron(ctx, g, &format!("{p}head"), x)?;
        let shape = g.value(z).shape().to_vec();
        let logits = g.reshape(z, &shape[..2])?;
        let r = g.relu(logits)?;
        let weights = g.tanh(r)?;
        let (essential, solutions) = eightpoint_node(g, weights, sets)?;
        Ok(StageOutput { logits, weights, essential, solutions, clusters, pool_assignment, unpool_assignment })
    }

    /// Full forward pass over a batch of equally sized correspondence sets.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        sets: &[&[Correspondence]],
        mode: Mode,
    ) -> Result<ForwardOutput, NetError> {
        let n = sets.first().map_or(0, |s| s.len());
        for (index, s) in sets.iter().enumerate() {
            if s.len() != n {
                return Err(NetError::PointCount { index, expected: n, got: s.len() });
            }
        }
        if self.config.unpool == UnpoolVariant::Plain && self.config.uses_pooling() && n != self.config.points {
            return Err(NetError::PointCount { index: 0, expected: self.config.points, got: n });
        }
        let b = sets.len();
        let mut ctx = Ctx::new(store, mode, self.config.order);
        let coords: Vec<f64> = sets.iter().flat_map(|s| s.iter().flat_map(|c| c.as_array())).collect();
        let input = g.constant(Tensor::new(vec![b, n, 4], coords.clone())?)?;
        let first = self.stage(&mut ctx, g, &stage_prefix(&self.config, 0), input, sets)?;
        let mut stages = vec![first];
        if self.config.iterative {
            // Residuals and weights of the first stage enter as constants, so
            // the second stage's loss cannot reach the first stage.
            let w1 = g.detach(stages[0].weights)?;
            let w1 = g.value(w1).data().to_vec();
            let mut feats = Vec::with_capacity(b * n * 6);
            for (s, set) in sets.iter().enumerate() {
                let residuals = residuals(&stages[0].solutions[s], set);
                for (i, c) in set.iter().enumerate() {
                    feats.extend_from_slice(&c.as_array());
                    feats.push(residuals[i]);
                    feats.push(w1[s * n + i]);
                }
            }
            let input2 = g.constant(Tensor::new(vec![b, n, 6], feats)?)?;
            let second = self.stage(&mut ctx, g, &stage_prefix(&self.config, 1), input2, sets)?;
            stages.push(second);
        }
        Ok(ForwardOutput { stages, bn_updates: ctx.bn_updates })
    }

    /// Eval-mode predictions, one graph per sample evaluated in parallel.
    pub fn predict(&self, store: &ParameterStore, sets: &[&[Correspondence]]) -> Result<Vec<Prediction>, NetError> {
        sets.par_iter()
            .map(|set| {
                let mut g = Graph::new();
                let out = self.forward(&mut g, store, &[set], Mode::Eval)?;
                let last = out.last();
                Ok(Prediction {
                    logits: g.value(last.logits).data().to_vec(),
                    weights: g.value(last.weights).data().to_vec(),
                    essential: last.solutions[0].clone(),
                })
            })
            .collect()
    }
}

/// Symmetric epipolar distance of every row to a first-stage estimate.
/// Rows at the epipoles get 1 (far outside any inlier band); a failed solve
/// gives all zeros.
fn residuals(e: &Result<EssentialMatrix, SolverError>, set: &[Correspondence]) -> Vec<f64> {
    match e {
        Ok(e) => set.iter().map(|c| symmetric_epipolar_distance(e.matrix(), c).unwrap_or(1.0)).collect(),
        Err(_) => vec![0.0; set.len()],
    }
}
