use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use thiserror::Error;

use oanet::evalbench::{
    compare_methods, export_cluster_responses, metrics_csv, responses_csv, EvalError, Method, Models, TrainedModel,
    MAP_DEFINITION,
};
use oanet::gradcheck::run_gradcheck;
use oanet::kvconfig::{KvError, KvMap};
use oanet::losses::LossConfig;
use oanet::oanet::{NetworkConfig, OaNet, UnpoolVariant};
use oanet::ransac::RansacConfig;
use oanet::synthdata::{generate_dataset, read_dataset, write_dataset, SceneConfig, ScenePair};
use oanet::train::{train as run_training, TrainConfig, LOG_HEADER};

use crate::manifest::RunManifest;

pub const DEFAULT_GEN_COUNT: usize = 100;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error("{0}")]
    MissingCheckpoint(String),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::MissingCheckpoint(_) => 4,
            CliError::GradcheckFailed(_) => 5,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Other(format!("{}: {e}", path.display()))
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn config_err(path: Option<&Path>) -> impl Fn(KvError) -> CliError + '_ {
    move |e| {
        let file = path.map_or_else(|| "<none>".to_string(), |p| p.display().to_string());
        CliError::Config(format!("{file}: {e}"))
    }
}

fn load_kv(path: Option<&Path>) -> Result<KvMap, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    KvMap::parse(&text).map_err(config_err(path))
}

/// Library errors that wrap a config problem map to exit code 2.
fn from_eval(e: EvalError) -> CliError {
    match e {
        EvalError::MissingCheckpoint(_) | EvalError::CheckpointNotFound { .. } => {
            CliError::MissingCheckpoint(e.to_string())
        }
        EvalError::Net(oanet::oanet::NetError::Config(_) | oanet::oanet::NetError::InvalidConfig(_)) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Other(other.to_string()),
    }
}

fn read_data(path: &Path) -> Result<Vec<ScenePair>, CliError> {
    read_dataset(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn suffixed(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

pub fn gen(config: Option<&Path>, out: &Path, seed: u64, count: Option<usize>) -> Result<(), CliError> {
    let mut kv = load_kv(config)?;
    let scene = SceneConfig::take_from(&mut kv, SceneConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    let count = match count {
        Some(c) => {
            kv.usize("count").map_err(config_err(config))?;
            c
        }
        None => kv.usize("count").map_err(config_err(config))?.unwrap_or(DEFAULT_GEN_COUNT),
    };
    kv.finish().map_err(config_err(config))?;

    let manifest = RunManifest::new("gen", format!("{}count = {count}\n", scene.to_kv())).seed("seed", seed);
    let pairs = generate_dataset(&scene, seed, count).map_err(other)?;
    write_dataset(&pairs, out).map_err(other)?;
    info!("wrote {count} pairs to {}", out.display());
    let mut manifest = manifest;
    manifest.artifacts.push(out.to_path_buf());
    manifest.write(out)?;
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    data: &Path,
    steps: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut kv = load_kv(config)?;
    let conf = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
    let (base_net, mut store) = match resume {
        Some(p) => {
            let m = TrainedModel::load(p).map_err(from_eval)?;
            (m.net.config, Some(m.store))
        }
        None => (NetworkConfig::desk(), None),
    };
    let net_cfg = NetworkConfig::take_from(&mut kv, base_net).map_err(|e| conf(&e))?;
    if resume.is_some() && net_cfg != base_net {
        return Err(CliError::Config("network keys differ from the resumed checkpoint".into()));
    }
    let loss = LossConfig::take_from(&mut kv, LossConfig::default()).map_err(|e| conf(&e))?;
    let mut tcfg =
        TrainConfig::take_from(&mut kv, TrainConfig { seed, ..TrainConfig::default() }).map_err(|e| conf(&e))?;
    if let Some(s) = steps {
        tcfg.steps = s;
    }
    kv.finish().map_err(config_err(config))?;
    if tcfg.steps == 0 {
        return Err(CliError::Config("steps must be at least 1".into()));
    }

    let pairs = read_data(data)?;
    if net_cfg.unpool == UnpoolVariant::Plain {
        if let Some(p) = pairs.iter().find(|p| p.correspondences.len() != net_cfg.points) {
            return Err(CliError::Config(format!(
                "plain unpool is built for points = {} but the dataset has {} correspondences per pair",
                net_cfg.points,
                p.correspondences.len()
            )));
        }
    }
    let net = OaNet::new(net_cfg).map_err(|e| conf(&e))?;
    let mut store = store.take().unwrap_or_else(|| net.init(seed));
    let start_step = store.step();
    let echo = format!("{}{}{}", net_cfg.to_kv(), loss.to_kv(), tcfg.to_kv());
    let mut manifest = RunManifest::new("train", echo).seed("seed", seed);

    let rows = run_training(&net, &mut store, &pairs, &loss, &tcfg, |r| {
        info!(
            "step {} loss {:.5} (cls {:.5}, ess {:.5}) batch mAP5 {:.1}",
            r.step, r.loss, r.classification, r.essential, r.batch_map5
        )
    })
    .map_err(|e| if e.is_non_finite() { CliError::NonFinite(e.to_string()) } else { other(e) })?;

    let model = TrainedModel { net, store };
    model.save(out).map_err(from_eval)?;
    let log_path = suffixed(out, ".log.csv");
    let mut log = format!("{LOG_HEADER}\n");
    for r in &rows {
        log.push_str(&r.csv_row());
        log.push('\n');
    }
    write_text(&log_path, &log)?;

    manifest.artifacts = vec![out.to_path_buf(), oanet::evalbench::sidecar_path(out), log_path];
    manifest.checkpoint = Some(out.to_path_buf());
    manifest.extra.insert("dataset".into(), json!(data.display().to_string()));
    manifest.extra.insert("resumed_from".into(), json!(resume.map(|p| p.display().to_string())));
    manifest.extra.insert("start_step".into(), json!(start_step));
    manifest.extra.insert("end_step".into(), json!(model.store.step()));
    manifest.write(out)?;
    info!("checkpoint at step {} written to {}", model.store.step(), out.display());
    Ok(())
}

fn load_model(path: Option<&Path>, method: Method) -> Result<Option<TrainedModel>, CliError> {
    match path {
        Some(p) => TrainedModel::load(p).map(Some).map_err(from_eval),
        None if method == Method::Ransac => Ok(None),
        None => Err(CliError::MissingCheckpoint(format!("method {} needs --checkpoint", method.name()))),
    }
}

fn ransac_config(config: Option<&Path>, seed: u64) -> Result<(RansacConfig, KvMap), CliError> {
    let mut kv = load_kv(config)?;
    let cfg = RansacConfig::take_from(&mut kv, RansacConfig { seed, ..RansacConfig::default() })
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, kv))
}

fn finish_eval(
    command: &'static str,
    out: &Path,
    data: &Path,
    rcfg: &RansacConfig,
    reports: &[oanet::evalbench::MetricsReport],
    checkpoints: &[&Path],
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(command, rcfg.to_kv()).seed("ransac_seed", rcfg.seed);
    write_text(out, &metrics_csv(reports))?;
    for r in reports {
        println!(
            "{}: mAP5 {:.2} mAP10 {:.2} mAP20 {:.2} precision {:.2} recall {:.2} fscore {:.2} ({} pairs, {} failures)",
            r.method, r.map5, r.map10, r.map20, r.precision, r.recall, r.fscore, r.pairs, r.failures
        );
    }
    println!("{MAP_DEFINITION}");
    manifest.artifacts.push(out.to_path_buf());
    manifest.checkpoint = checkpoints.first().map(|p| p.to_path_buf());
    manifest.extra.insert("dataset".into(), json!(data.display().to_string()));
    manifest
        .extra
        .insert("checkpoints".into(), json!(checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
    manifest.extra.insert("metric_definition".into(), json!(MAP_DEFINITION));
    manifest.write(out)?;
    Ok(())
}

pub fn eval(
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    data: &Path,
    method: &str,
    with_ransac: bool,
    checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    let (rcfg, kv) = ransac_config(config, seed)?;
    kv.finish().map_err(config_err(config))?;
    let mut method = Method::from_name(method).ok_or_else(|| CliError::Config(format!("unknown method {method}")))?;
    if with_ransac {
        method = match method {
            Method::OaNet | Method::OaNetRansac => Method::OaNetRansac,
            other => return Err(CliError::Config(format!("--ransac does not apply to {}", other.name()))),
        };
    }
    let model = load_model(checkpoint, method)?;
    let pairs = read_data(data)?;
    let models = match method {
        Method::PointCnAblation => Models { oanet: None, pointcn: model.as_ref() },
        _ => Models { oanet: model.as_ref(), pointcn: None },
    };
    let reports = compare_methods(&pairs, &[method], models, &rcfg).map_err(from_eval)?;
    let ckpts: Vec<&Path> = checkpoint.into_iter().collect();
    finish_eval("eval", out, data, &rcfg, &reports, &ckpts)
}

pub fn compare(
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    data: &Path,
    oanet_ckpt: Option<&Path>,
    pointcn_ckpt: Option<&Path>,
    methods: &[String],
) -> Result<(), CliError> {
    let (rcfg, kv) = ransac_config(config, seed)?;
    kv.finish().map_err(config_err(config))?;
    let methods = methods
        .iter()
        .map(|m| Method::from_name(m).ok_or_else(|| CliError::Config(format!("unknown method {m}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let needs = |wanted: &[Method]| methods.iter().any(|m| wanted.contains(m));
    let oanet = match oanet_ckpt {
        Some(_) => load_model(oanet_ckpt, Method::OaNet)?,
        None if needs(&[Method::OaNet, Method::OaNetRansac]) => {
            return Err(CliError::MissingCheckpoint("oanet methods need --oanet".into()))
        }
        None => None,
    };
    let pointcn = match pointcn_ckpt {
        Some(_) => load_model(pointcn_ckpt, Method::PointCnAblation)?,
        None if needs(&[Method::PointCnAblation]) => {
            return Err(CliError::MissingCheckpoint("pointcn_ablation needs --pointcn".into()))
        }
        None => None,
    };
    let pairs = read_data(data)?;
    let models = Models { oanet: oanet.as_ref(), pointcn: pointcn.as_ref() };
    let reports = compare_methods(&pairs, &methods, models, &rcfg).map_err(from_eval)?;
    let ckpts: Vec<&Path> = oanet_ckpt.into_iter().chain(pointcn_ckpt).collect();
    finish_eval("compare", out, data, &rcfg, &reports, &ckpts)
}

pub fn responses(out: &Path, data: &Path, checkpoint: &Path, pair: usize, top_k: usize) -> Result<(), CliError> {
    let model = TrainedModel::load(checkpoint).map_err(from_eval)?;
    let pairs = read_data(data)?;
    let p =
        pairs.get(pair).ok_or_else(|| CliError::Config(format!("pair {pair} out of range ({} pairs)", pairs.len())))?;
    let rows = export_cluster_responses(&model, &p.correspondences, top_k).map_err(|e| match e {
        EvalError::NotOrderAware(_) => CliError::Config(e.to_string()),
        other => from_eval(other),
    })?;
    write_text(out, &responses_csv(&rows))?;
    let mut manifest = RunManifest::new("responses", format!("pair = {pair}\ntop_k = {top_k}\n"));
    manifest.artifacts.push(out.to_path_buf());
    manifest.checkpoint = Some(checkpoint.to_path_buf());
    manifest.extra.insert("dataset".into(), json!(data.display().to_string()));
    manifest.write(out)?;
    info!("{} response rows written to {}", rows.len(), out.display());
    Ok(())
}

pub fn gradcheck(fault: Option<&str>) -> Result<(), CliError> {
    let report = run_gradcheck(fault).map_err(|e| match e {
        oanet::gradcheck::GradcheckError::UnknownRow(_) => CliError::Config(e.to_string()),
        other => CliError::Other(other.to_string()),
    })?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(report.failing().into_iter().map(String::from).collect()))
    }
}
