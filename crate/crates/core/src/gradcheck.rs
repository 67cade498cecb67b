//! Finite-difference verification of every differentiable component, as a
//! table with one row per operation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffengine::{
    finite_difference_check, graph_gradient_check, CustomOp, EngineError, FdReport, Graph, ParameterStore, Tensor, Var,
};
use crate::epipolar::{Correspondence, Mat3};
use crate::losses::{
    classification_node, essential_node, essential_term_grad, BceMode, EssentialLossKind, LossConfig, LossError,
};
use crate::oanet::layers::*;
use crate::oanet::{eightpoint_node, Architecture, NetworkConfig, OaNet};
use crate::synthdata::{generate_pair, SceneConfig};
use crate::weighted8pt::{weighted_eightpoint, weighted_eightpoint_backward, SolverError};

pub const GRADCHECK_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const TOY_POINTS: usize = 16;
const TOY_CLUSTERS: usize = 4;
const TOY_CHANNELS: usize = 8;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("{row}: {source}")]
    Engine { row: String, source: EngineError },
    #[error("{row}: {source}")]
    Loss { row: String, source: LossError },
    #[error("{row}: {source}")]
    Solver { row: String, source: SolverError },
    #[error("unknown gradcheck row {0}")]
    UnknownRow(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub components: usize,
}

impl GradcheckRow {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passes)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.passes()).map(|r| r.name.as_str()).collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::from("op,max_rel_error,components,status\n");
        for r in &self.rows {
            let status = if r.passes() { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{},{:.3e},{},{}", r.name, r.max_rel_error, r.components, status);
        }
        out
    }
}

/// Identity whose backward scales the incoming gradient, used to prove the
/// harness catches a wrong derivative.
struct CorruptedBackward;

impl CustomOp for CorruptedBackward {
    fn name(&self) -> &'static str {
        "corrupted_backward"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = grad.data().iter().map(|g| 1.5 * g).collect();
        vec![Some(Tensor::new(grad.shape().to_vec(), data).expect("same shape"))]
    }
}

type Build = Box<dyn Fn(&mut Graph, &ParameterStore) -> Result<Var, EngineError>>;

struct GraphRow {
    name: String,
    store: ParameterStore,
    build: Build,
    /// Components probed per parameter.
    max_entries: Option<usize>,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so the relu kink is never straddled.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn inputs(tensors: Vec<Tensor>) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.insert(format!("x{i}"), t, true);
    }
    s
}

fn x(g: &mut Graph, s: &ParameterStore, i: usize) -> Result<Var, EngineError> {
    g.parameter(s, &format!("x{i}"))
}

fn op_row(
    name: &str,
    tensors: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var, EngineError> + 'static,
) -> GraphRow {
    let count = tensors.len();
    GraphRow {
        name: name.to_string(),
        store: inputs(tensors),
        build: Box::new(move |g, s| {
            let vars = (0..count).map(|i| x(g, s, i)).collect::<Result<Vec<_>, _>>()?;
            f(g, &vars)
        }),
        max_entries: None,
    }
}

fn engine_rows(rng: &mut ChaCha8Rng) -> Vec<GraphRow> {
    let mut r = |s: &[usize]| random(rng, s);
    let mut rows = vec![
        op_row("linear", vec![r(&[2, 5, 3]), r(&[3, 4]), r(&[4])], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        op_row("matmul", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], |g, v| g.matmul(v[0], v[1])),
        op_row("transpose", vec![r(&[2, 3, 4])], |g, v| g.transpose(v[0])),
        op_row("reshape", vec![r(&[2, 6])], |g, v| g.reshape(v[0], &[3, 4])),
        op_row("concat", vec![r(&[2, 3, 2]), r(&[2, 3, 4])], |g, v| g.concat(v[0], v[1])),
        op_row("add", vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.add(v[0], v[1])),
        op_row("mul", vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.mul(v[0], v[1])),
        op_row("scale", vec![r(&[5])], |g, v| g.scale(v[0], -1.7)),
        op_row("tanh", vec![r(&[4, 5])], |g, v| g.tanh(v[0])),
        op_row("softmax_axis1", vec![r(&[2, 3, 4])], |g, v| g.softmax(v[0], 1)),
        op_row("softmax_axis2", vec![r(&[2, 3, 4])], |g, v| g.softmax(v[0], 2)),
        op_row("normalize", vec![r(&[2, 6, 3])], |g, v| g.normalize(v[0], 0..2, NORM_EPS)),
        op_row("channel_affine", vec![r(&[2, 4, 3]), r(&[3]), r(&[3])], |g, v| g.channel_affine(v[0], v[1], v[2])),
        op_row("sum", vec![r(&[3, 2])], |g, v| g.sum(v[0])),
    ];
    rows.insert(8, op_row("relu", vec![off_kink(rng, &[4, 5])], |g, v| g.relu(v[0])));
    rows
}

fn block_row(
    name: &str,
    rng: &mut ChaCha8Rng,
    input_shape: &[usize],
    init: impl FnOnce(&mut ParameterStore, &mut ChaCha8Rng),
    block: impl Fn(&mut Ctx, &mut Graph, Var) -> Result<Var, EngineError> + 'static,
    mode: Mode,
) -> GraphRow {
    let mut store = inputs(vec![random(rng, input_shape)]);
    init(&mut store, rng);
    GraphRow {
        name: name.to_string(),
        store,
        build: Box::new(move |g, s| {
            let mut ctx = Ctx::new(s, mode, NormOrder::NormFirst);
            let v = x(g, s, 0)?;
            block(&mut ctx, g, v)
        }),
        max_entries: Some(24),
    }
}

fn set_running_stats(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.contains("running_")).cloned().collect();
    for n in names {
        let len = store.value(&n).expect("listed").len();
        let t = Tensor::from_fn(&[len], |_| {
            if n.ends_with("var") {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.5..0.5)
            }
        });
        store.set_value(&n, t).expect("listed");
    }
}

fn oanet_rows(rng: &mut ChaCha8Rng) -> Vec<GraphRow> {
    let (n, m, d) = (TOY_POINTS, TOY_CLUSTERS, TOY_CHANNELS);
    let o = NormOrder::NormFirst;
    let mut rows = vec![
        block_row("context_norm", rng, &[2, n, d], |_, _| {}, |_, g, v| context_norm(g, v), Mode::Train),
        block_row(
            "batch_norm_train",
            rng,
            &[2, n, d],
            |s, _| init_batch_norm(s, "bn", d),
            |c, g, v| batch_norm(c, g, "bn", v),
            Mode::Train,
        ),
        block_row(
            "batch_norm_eval",
            rng,
            &[2, n, d],
            |s, r| {
                init_batch_norm(s, "bn", d);
                set_running_stats(s, r);
            },
            |c, g, v| batch_norm(c, g, "bn", v),
            Mode::Eval,
        ),
        block_row(
            "pointcn_unit",
            rng,
            &[2, n, 4],
            move |s, r| init_pointcn_unit(s, r, "u", 4, d, o, true),
            |c, g, v| pointcn_unit(c, g, "u", v),
            Mode::Train,
        ),
        block_row(
            "pointcn_unit_perceptron_first",
            rng,
            &[2, n, d],
            move |s, r| init_pointcn_unit(s, r, "u", d, d, NormOrder::PerceptronFirst, false),
            |c, g, v| {
                c.order = NormOrder::PerceptronFirst;
                pointcn_unit(c, g, "u", v)
            },
            Mode::Train,
        ),
        block_row(
            "pointcn_resnet_block",
            rng,
            &[2, n, d],
            move |s, r| init_pointcn_block(s, r, "b", d, o),
            |c, g, v| pointcn_resnet_block(c, g, "b", v),
            Mode::Train,
        ),
        block_row(
            "diff_pool",
            rng,
            &[2, n, d],
            move |s, r| init_diff_pool(s, r, "p", d, m, o),
            |c, g, v| diff_pool(c, g, "p", v, 2).map(|p| p.clusters),
            Mode::Train,
        ),
        block_row(
            "spatial_correlation",
            rng,
            &[2, m, d],
            move |s, r| init_spatial_correlation(s, r, "sc", m),
            |c, g, v| spatial_correlation(c, g, "sc", v),
            Mode::Train,
        ),
        block_row(
            "order_aware_block",
            rng,
            &[2, m, d],
            move |s, r| init_order_aware_block(s, r, "oa", d, m, o),
            |c, g, v| order_aware_block(c, g, "oa", v),
            Mode::Train,
        ),
    ];
    for (name, variant) in
        [("diff_unpool_order_aware", UnpoolVariant::OrderAware), ("diff_unpool_plain", UnpoolVariant::Plain)]
    {
        let mut store = inputs(vec![random(rng, &[2, n, d]), random(rng, &[2, m, d])]);
        init_diff_unpool(&mut store, rng, "up", variant, d, m, n, o);
        rows.push(GraphRow {
            name: name.to_string(),
            store,
            build: Box::new(move |g, s| {
                let mut ctx = Ctx::new(s, Mode::Train, o);
                let points = x(g, s, 0)?;
                let clusters = x(g, s, 1)?;
                diff_unpool(&mut ctx, g, "up", variant, points, clusters, 1).map(|u| u.features)
            }),
            max_entries: Some(24),
        });
    }
    rows
}

fn toy_sets(count: usize, seed: u64) -> Vec<Vec<Correspondence>> {
    let cfg = SceneConfig { n: TOY_POINTS, outlier_ratio: 0.25, ..Default::default() };
    (0..count).map(|i| generate_pair(&cfg, seed + i as u64).expect("valid toy scene").correspondences).collect()
}

fn network_rows() -> Vec<GraphRow> {
    let mut rows = Vec::new();
    for (name, arch) in [
        ("network_pointcn", Architecture::PointCn),
        ("network_pool_unpool", Architecture::PoolUnpool),
        ("network_order_aware", Architecture::OrderAware),
    ] {
        let config = NetworkConfig { architecture: arch, ..NetworkConfig::toy() };
        let net = OaNet::new(config).expect("toy config is valid");
        let store = net.init(21);
        let sets = toy_sets(2, 40);
        rows.push(GraphRow {
            name: name.to_string(),
            store,
            build: Box::new(move |g, s| {
                let refs: Vec<&[Correspondence]> = sets.iter().map(|v| v.as_slice()).collect();
                let out = net.forward(g, s, &refs, Mode::Train).map_err(|e| match e {
                    crate::oanet::NetError::Engine(e) => e,
                    other => EngineError::Checkpoint(other.to_string()),
                })?;
                Ok(out.last().logits)
            }),
            max_entries: Some(4),
        });
    }
    rows
}

/// Positive weights that keep the eight-point problem well conditioned.
fn eightpoint_row(rng: &mut ChaCha8Rng) -> GraphRow {
    let sets = toy_sets(2, 60);
    let w = Tensor::from_fn(&[2, TOY_POINTS], |_| rng.random_range(0.2..1.0));
    GraphRow {
        name: "weighted_eightpoint".into(),
        store: inputs(vec![w]),
        build: Box::new(move |g, s| {
            let w = x(g, s, 0)?;
            let refs: Vec<&[Correspondence]> = sets.iter().map(|v| v.as_slice()).collect();
            eightpoint_node(g, w, &refs).map(|(e, _)| e)
        }),
        max_entries: None,
    }
}

fn run_graph_row(row: GraphRow, fault: bool, rng: &mut ChaCha8Rng) -> Result<GradcheckRow, GradcheckError> {
    let wrap = |e| GradcheckError::Engine { row: row.name.clone(), source: e };
    let mut probe = Graph::new();
    let out = (row.build)(&mut probe, &row.store).map_err(wrap)?;
    let dir = random(rng, probe.value(out).shape());
    let build = &row.build;
    let reports = graph_gradient_check(
        &row.store,
        |g, s| {
            let mut y = build(g, s)?;
            if fault {
                let value = g.value(y).clone();
                y = g.custom(&[y], value, Box::new(CorruptedBackward))?;
            }
            let d = g.constant(dir.clone())?;
            let p = g.mul(y, d)?;
            g.sum(p)
        },
        STEP,
        row.max_entries,
    )
    .map_err(wrap)?;
    Ok(merge(&row.name, reports.iter().map(|(_, r)| r)))
}

fn merge<'a>(name: &str, reports: impl Iterator<Item = &'a FdReport>) -> GradcheckRow {
    let mut max_rel_error: f64 = 0.0;
    let mut components = 0;
    for r in reports {
        max_rel_error = max_rel_error.max(r.max_rel_error);
        components += r.components;
    }
    GradcheckRow { name: name.to_string(), max_rel_error, components }
}

fn corrupt(fault: bool, g: &mut [f64]) {
    if fault {
        for v in g {
            *v *= 1.5;
        }
    }
}

/// Detach has no finite-difference counterpart of its own: the oracle holds
/// the detached copy at its base value while the live input is perturbed.
fn detach_row(rng: &mut ChaCha8Rng, fault: bool) -> Result<GradcheckRow, GradcheckError> {
    let name = "detach";
    let wrap = |e| GradcheckError::Engine { row: name.into(), source: e };
    let base = random(rng, &[6]);
    let dir = random(rng, &[6]);
    let mut g = Graph::new();
    let x = g.variable(base.clone()).map_err(wrap)?;
    let frozen = g.detach(x).map_err(wrap)?;
    let y = g.mul(frozen, x).map_err(wrap)?;
    let y = g.add(y, x).map_err(wrap)?;
    let d = g.constant(dir.clone()).map_err(wrap)?;
    let p = g.mul(y, d).map_err(wrap)?;
    let l = g.sum(p).map_err(wrap)?;
    let mut analytic = g.backward(l).map_err(wrap)?.wrt(x).expect("x needs grad").data().to_vec();
    corrupt(fault, &mut analytic);
    let f = |xp: &[f64]| (0..6).map(|i| dir.data()[i] * (base.data()[i] * xp[i] + xp[i])).sum();
    Ok(merge(name, std::iter::once(&finite_difference_check(f, base.data(), &analytic, STEP))))
}

/// The eigenvector derivative used by the solver, checked without the graph.
fn eigen_backward_row(rng: &mut ChaCha8Rng, fault: bool) -> Result<GradcheckRow, GradcheckError> {
    let name = "eigendecomposition_backward";
    let set = &toy_sets(1, 80)[0];
    let w: Vec<f64> = (0..set.len()).map(|_| rng.random_range(0.2..1.0)).collect();
    let upstream = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let mut analytic = weighted_eightpoint_backward(set, &w, &upstream)
        .map_err(|e| GradcheckError::Solver { row: name.into(), source: e })?;
    corrupt(fault, &mut analytic);
    let reference = weighted_eightpoint(set, &w).map_err(|e| GradcheckError::Solver { row: name.into(), source: e })?;
    let f = |wp: &[f64]| {
        let e = weighted_eightpoint(set, wp).expect("small perturbation stays solvable");
        // Align the sign with the unperturbed solution.
        let m = if (e.matrix() - reference.matrix()).norm() < (e.matrix() + reference.matrix()).norm() {
            *e.matrix()
        } else {
            -e.matrix()
        };
        m.component_mul(&upstream).sum()
    };
    let report = finite_difference_check(f, &w, &analytic, STEP);
    Ok(merge(name, std::iter::once(&report)))
}

fn lerr(row: &'static str) -> impl Fn(LossError) -> GradcheckError {
    move |e| GradcheckError::Loss { row: row.to_string(), source: e }
}

fn loss_rows(rng: &mut ChaCha8Rng, fault: Option<&str>) -> Result<Vec<GradcheckRow>, GradcheckError> {
    let mut rows = Vec::new();
    let pair = generate_pair(&SceneConfig { n: 64, outlier_ratio: 0.4, noise_px: 0.5, ..Default::default() }, 90)
        .expect("valid scene");

    // Classification loss through its graph node.
    {
        let name = "classification_loss";
        let z = Tensor::from_fn(&[1, pair.labels.len()], |_| rng.random_range(-3.0..3.0));
        let labels = vec![pair.labels.clone()];
        let mut g = Graph::new();
        let zv = g.variable(z.clone()).map_err(|e| GradcheckError::Engine { row: name.into(), source: e })?;
        let (l, _) = classification_node(&mut g, zv, &labels, BceMode::Balanced).map_err(lerr(name))?;
        let grads = g.backward(l).map_err(|e| GradcheckError::Engine { row: name.into(), source: e })?;
        let mut analytic = grads.wrt(zv).expect("z needs grad").data().to_vec();
        corrupt(fault == Some(name), &mut analytic);
        let f =
            |zp: &[f64]| crate::losses::classification_loss(zp, &pair.labels, BceMode::Balanced).expect("both classes");
        rows.push(merge(name, std::iter::once(&finite_difference_check(f, z.data(), &analytic, STEP))));
    }

    // Essential terms: estimate near the ground truth so no geometry
    // residual sits at the clamp.
    for (name, kind) in [("essential_l2_loss", EssentialLossKind::L2), ("geometry_loss", EssentialLossKind::Geometry)] {
        let cfg = LossConfig::desk(kind);
        let target = *pair.e_gt.matrix();
        let mut e_hat = target + Mat3::from_fn(|_, _| rng.random_range(-0.01..0.01));
        e_hat /= e_hat.norm();
        let data: Vec<f64> = e_hat.transpose().as_slice().to_vec();
        let mut g = Graph::new();
        let ev = g
            .variable(Tensor::new(vec![1, 9], data.clone()).expect("nine entries"))
            .map_err(|e| GradcheckError::Engine { row: name.into(), source: e })?;
        let sets = vec![pair.correspondences.clone()];
        let labels = vec![pair.labels.clone()];
        let (l, _) = essential_node(&mut g, ev, &[true], &[target], &sets, &labels, &cfg).map_err(lerr(name))?;
        let grads = g.backward(l).map_err(|e| GradcheckError::Engine { row: name.into(), source: e })?;
        let mut analytic = grads.wrt(ev).expect("estimate needs grad").data().to_vec();
        corrupt(fault == Some(name), &mut analytic);
        let f = |v: &[f64]| {
            let m = Mat3::from_row_slice(v);
            essential_term_grad(&m, &target, &pair.correspondences, &pair.labels, &cfg).expect("inliers present").0
        };
        rows.push(merge(name, std::iter::once(&finite_difference_check(f, &data, &analytic, STEP))));
    }
    Ok(rows)
}

/// Names of every row, in table order.
pub fn row_names() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut names: Vec<String> = engine_rows(&mut rng).into_iter().map(|r| r.name).collect();
    names.extend(oanet_rows(&mut rng).into_iter().map(|r| r.name));
    names.extend(network_rows().into_iter().map(|r| r.name));
    names.push("weighted_eightpoint".into());
    names.push("detach".into());
    names.push("eigendecomposition_backward".into());
    names.extend(["classification_loss", "essential_l2_loss", "geometry_loss"].map(String::from));
    names
}

/// Runs every row. `fault` names a row whose backward is deliberately
/// corrupted.
pub fn run_gradcheck(fault: Option<&str>) -> Result<GradcheckReport, GradcheckError> {
    if let Some(f) = fault {
        if !row_names().iter().any(|n| n == f) {
            return Err(GradcheckError::UnknownRow(f.to_string()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut graph_rows = engine_rows(&mut rng);
    graph_rows.extend(oanet_rows(&mut rng));
    graph_rows.extend(network_rows());
    graph_rows.push(eightpoint_row(&mut rng));

    let mut dir_rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = Vec::new();
    for row in graph_rows {
        let is_fault = fault == Some(row.name.as_str());
        rows.push(run_graph_row(row, is_fault, &mut dir_rng)?);
    }
    rows.push(detach_row(&mut rng, fault == Some("detach"))?);
    rows.push(eigen_backward_row(&mut rng, fault == Some("eigendecomposition_backward"))?);
    rows.extend(loss_rows(&mut rng, fault)?);
    Ok(GradcheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_row() {
        let report = run_gradcheck(None).unwrap();
        let names: Vec<String> = report.rows.iter().map(|r| r.name.clone()).collect();
        assert_eq!(names, row_names());
        assert!(report.passed(), "{}", report.table());
        assert!(report.table().contains("eigendecomposition_backward,"));
        for r in &report.rows {
            assert!(r.components > 0, "{}", r.name);
        }
    }

    #[test]
    fn corrupted_backward_is_named() {
        for row in ["tanh", "order_aware_block", "geometry_loss", "eigendecomposition_backward"] {
            let report = run_gradcheck(Some(row)).unwrap();
            assert_eq!(report.failing(), vec![row]);
        }
        assert!(matches!(run_gradcheck(Some("nope")), Err(GradcheckError::UnknownRow(_))));
    }
}
