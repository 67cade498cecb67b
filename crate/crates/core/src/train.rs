//! Minibatch training of the correspondence network.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffengine::{AdamConfig, EngineError, Graph, ParameterStore, Var};
use crate::epipolar::{pose_angular_errors, project_to_essential, recover_pose, Correspondence, Mat3};
use crate::evalbench::pose_map;
use crate::kvconfig::{render, KvError, KvMap};
use crate::losses::{classification_node, essential_node, LossConfig, LossError};
use crate::oanet::{apply_bn_updates, Mode, NetError, OaNet, StageOutput};
use crate::synthdata::ScenePair;

pub const LOG_EVERY: u64 = 100;
pub const LOG_HEADER: &str = "step,loss,classification,essential,alpha,skipped_essential,batch_mAP5";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step}: {term} is not finite ({value})")]
    NonFiniteLoss { step: u64, term: String, value: f64 },
    #[error("step {step}: {source}")]
    NonFiniteOp { step: u64, source: EngineError },
    #[error("training needs at least {needed} pairs, got {got}")]
    NotEnoughData { needed: usize, got: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Config(#[from] KvError),
}

impl TrainError {
    /// Divergence, as opposed to bad input.
    pub fn is_non_finite(&self) -> bool {
        matches!(self, TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteOp { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Steps to run in this call; the step counter in the parameter store
    /// carries over between calls.
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 10_000, batch_size: 32, adam: AdamConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    /// Reads `steps`, `batch_size` and `lr` over `base`; the seed comes from
    /// the caller.
    pub fn take_from(kv: &mut KvMap, base: Self) -> Result<Self, TrainError> {
        let mut c = base;
        if let Some(v) = kv.u64("steps")? {
            c.steps = v;
        }
        if let Some(v) = kv.usize("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = kv.f64("lr")? {
            c.adam.lr = v;
        }
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        render(&[
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.adam.lr.to_string()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub classification: f64,
    pub essential: f64,
    pub alpha: f64,
    pub skipped_essential: usize,
    /// Pose mAP at 5 degrees over the step's batch, from training-mode
    /// predictions.
    pub batch_map5: f64,
}

impl LogRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{},{},{:.6}",
            self.step,
            self.loss,
            self.classification,
            self.essential,
            self.alpha,
            self.skipped_essential,
            self.batch_map5
        )
    }
}

/// Batch indices for a global step; a pure function of `(seed, step)` so a
/// resumed run draws the same batches as an uninterrupted one.
pub fn batch_indices(seed: u64, step: u64, data_len: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    sample(&mut rng, data_len, batch).into_vec()
}

fn check(step: u64, term: &str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteLoss { step, term: term.to_string(), value })
    }
}

fn op_error(step: u64) -> impl Fn(NetError) -> TrainError {
    move |e| match e {
        NetError::Engine(source @ EngineError::NonFinite { .. }) => TrainError::NonFiniteOp { step, source },
        other => TrainError::Net(other),
    }
}

struct StageLoss {
    total: Var,
    classification: f64,
    essential: f64,
    skipped: usize,
}

fn stage_loss(
    g: &mut Graph,
    stage: &StageOutput,
    batch: &[&ScenePair],
    loss: &LossConfig,
    alpha: f64,
) -> Result<StageLoss, TrainError> {
    let labels: Vec<Vec<u8>> = batch.iter().map(|p| p.labels.clone()).collect();
    let (cls, _) = classification_node(g, stage.logits, &labels, loss.bce)?;
    let classification = g.value(cls).item();
    if alpha == 0.0 {
        return Ok(StageLoss { total: cls, classification, essential: 0.0, skipped: 0 });
    }
    // Samples whose solve failed keep only the classification term.
    let valid: Vec<bool> = stage.solutions.iter().map(|s| s.is_ok()).collect();
    let targets: Vec<Mat3> = batch.iter().map(|p| *p.e_gt.matrix()).collect();
    let sets: Vec<Vec<Correspondence>> = batch.iter().map(|p| p.correspondences.clone()).collect();
    let (ess, skipped) = essential_node(g, stage.essential, &valid, &targets, &sets, &labels, loss)?;
    let essential = g.value(ess).item();
    let weighted = g.scale(ess, alpha)?;
    let total = g.add(cls, weighted)?;
    Ok(StageLoss { total, classification, essential, skipped })
}

fn batch_map5(stage: &StageOutput, g: &Graph, batch: &[&ScenePair]) -> f64 {
    let w = g.value(stage.weights);
    let n = w.shape()[1];
    let errors: Vec<Option<(f64, f64)>> = batch
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let e = stage.solutions[i].as_ref().ok()?;
            let e = project_to_essential(e.matrix()).ok()?;
            let pose = recover_pose(&e, &p.correspondences, &w.data()[i * n..(i + 1) * n]).ok()?;
            Some(pose_angular_errors(&pose, &p.pose))
        })
        .collect();
    pose_map(&errors, 5).unwrap_or(0.0)
}

/// Runs `cfg.steps` optimizer steps and returns a log row every
/// [`LOG_EVERY`] global steps and after the last one.
pub fn train(
    net: &OaNet,
    store: &mut ParameterStore,
    data: &[ScenePair],
    loss: &LossConfig,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>, TrainError> {
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(TrainError::InvalidConfig("steps and batch size must be positive".into()));
    }
    if data.len() < cfg.batch_size {
        return Err(TrainError::NotEnoughData { needed: cfg.batch_size, got: data.len() });
    }
    let mut rows = Vec::new();
    for k in 0..cfg.steps {
        let step = store.step();
        let batch: Vec<&ScenePair> =
            batch_indices(cfg.seed, step, data.len(), cfg.batch_size).into_iter().map(|i| &data[i]).collect();
        let sets: Vec<&[Correspondence]> = batch.iter().map(|p| p.correspondences.as_slice()).collect();
        let alpha = loss.alpha_at(step);

        let mut g = Graph::new();
        let out = net.forward(&mut g, store, &sets, Mode::Train).map_err(op_error(step))?;
        let mut total: Option<Var> = None;
        let (mut classification, mut essential, mut skipped) = (0.0, 0.0, 0);
        for stage in &out.stages {
            let s = stage_loss(&mut g, stage, &batch, loss, alpha)?;
            check(step, "classification loss", s.classification)?;
            check(step, "essential loss", s.essential)?;
            classification += s.classification;
            essential += s.essential;
            skipped += s.skipped;
            total = Some(match total {
                Some(t) => g.add(t, s.total)?,
                None => s.total,
            });
        }
        let total = total.expect("at least one stage");
        let value = check(step, "total loss", g.value(total).item())?;
        let grads = g.backward(total)?.parameters(store);
        for (name, t) in &grads {
            if let Some(v) = t.data().iter().find(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step, term: format!("gradient of {name}"), value: *v });
            }
        }
        store.adam_step(&grads, &cfg.adam)?;
        apply_bn_updates(store, &out.bn_updates)?;

        let done = store.step();
        if done.is_multiple_of(LOG_EVERY) || k + 1 == cfg.steps {
            let row = LogRow {
                step: done,
                loss: value,
                classification,
                essential,
                alpha,
                skipped_essential: skipped,
                batch_map5: batch_map5(out.last(), &g, &batch),
            };
            on_log(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::EssentialLossKind;
    use crate::oanet::{Architecture, NetworkConfig};
    use crate::synthdata::{generate_dataset, SceneConfig};

    fn tiny() -> (OaNet, Vec<ScenePair>) {
        let cfg = NetworkConfig { points: 32, ..NetworkConfig::toy() };
        let data = generate_dataset(&SceneConfig { n: 32, outlier_ratio: 0.5, ..Default::default() }, 11, 6).unwrap();
        (OaNet::new(cfg).unwrap(), data)
    }

    fn run(net: &OaNet, store: &mut ParameterStore, data: &[ScenePair], steps: u64) -> Vec<LogRow> {
        let loss = LossConfig { warmup: 3, ..LossConfig::desk(EssentialLossKind::Geometry) };
        let cfg = TrainConfig { steps, batch_size: 2, adam: AdamConfig { lr: 1e-3, ..Default::default() }, seed: 4 };
        train(net, store, data, &loss, &cfg, |_| {}).unwrap()
    }

    #[test]
    fn short_run_logs_final_step() {
        let (net, data) = tiny();
        let mut store = net.init(1);
        let rows = run(&net, &mut store, &data, 10);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 10);
        assert_eq!(store.step(), 10);
        assert!(rows[0].alpha > 0.0);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (net, data) = tiny();
        let mut straight = net.init(1);
        run(&net, &mut straight, &data, 6);
        let mut resumed = net.init(1);
        run(&net, &mut resumed, &data, 4);
        let mut bytes = Vec::new();
        crate::diffengine::write_checkpoint(&resumed, &mut bytes).unwrap();
        let mut resumed = crate::diffengine::read_checkpoint(&mut bytes.as_slice()).unwrap();
        run(&net, &mut resumed, &data, 2);
        assert_eq!(resumed.step(), 6);
        assert_eq!(resumed, straight);
    }

    #[test]
    fn iterative_and_plain_variants_train() {
        let data = generate_dataset(&SceneConfig { n: 32, outlier_ratio: 0.5, ..Default::default() }, 11, 4).unwrap();
        for config in [
            NetworkConfig { points: 32, iterative: true, ..NetworkConfig::toy() },
            NetworkConfig { points: 32, architecture: Architecture::PointCn, ..NetworkConfig::toy() },
            NetworkConfig { points: 32, unpool: crate::oanet::UnpoolVariant::Plain, ..NetworkConfig::toy() },
        ] {
            let net = OaNet::new(config).unwrap();
            let mut store = net.init(2);
            let before = store.clone();
            let rows = run(&net, &mut store, &data, 5);
            assert!(rows[0].loss.is_finite());
            assert_ne!(store, before);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (net, data) = tiny();
        let mut store = net.init(1);
        let loss = LossConfig::default();
        let cfg = TrainConfig { batch_size: 7, steps: 1, ..Default::default() };
        assert!(matches!(train(&net, &mut store, &data, &loss, &cfg, |_| {}), Err(TrainError::NotEnoughData { .. })));
        let cfg = TrainConfig { batch_size: 2, steps: 0, ..Default::default() };
        assert!(matches!(train(&net, &mut store, &data, &loss, &cfg, |_| {}), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (net, data) = tiny();
        let mut store = net.init(1);
        let name = store.names().find(|n| n.ends_with("embed.weight")).unwrap().clone();
        let mut w = store.value(&name).unwrap().clone();
        w.data_mut()[0] = f64::NAN;
        store.set_value(&name, w).unwrap();
        let loss = LossConfig::default();
        let cfg = TrainConfig { batch_size: 2, steps: 3, ..Default::default() };
        let err = train(&net, &mut store, &data, &loss, &cfg, |_| {}).unwrap_err();
        assert!(err.is_non_finite(), "{err}");
        assert!(err.to_string().starts_with("step 0"), "{err}");
    }

    #[test]
    fn batches_depend_on_seed_and_step_only() {
        assert_eq!(batch_indices(3, 17, 100, 8), batch_indices(3, 17, 100, 8));
        assert_ne!(batch_indices(3, 17, 100, 8), batch_indices(3, 18, 100, 8));
        assert_ne!(batch_indices(3, 17, 100, 8), batch_indices(4, 17, 100, 8));
        let b = batch_indices(1, 0, 10, 10);
        let mut s = b.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn train_config_round_trips_through_kv() {
        let mut cfg = TrainConfig { steps: 123, batch_size: 5, seed: 8, ..TrainConfig::default() };
        cfg.adam.lr = 3e-3;
        let mut kv = KvMap::parse(&cfg.to_kv()).unwrap();
        let base = TrainConfig { seed: 8, ..TrainConfig::default() };
        assert_eq!(TrainConfig::take_from(&mut kv, base).unwrap(), cfg);
        kv.finish().unwrap();
    }
}
