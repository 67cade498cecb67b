//! Synthetic two-view scenes with known relative pose, pixel noise and
//! uniformly random outliers, plus a line-oriented dataset format.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::epipolar::{
    essential_from_pose, label_inliers, CameraIntrinsics, Correspondence, EssentialMatrix, Mat3, Pose, RotationMatrix,
    Vec3, INLIER_THRESHOLD,
};
use crate::kvconfig::{render, KvError, KvMap};

const MAX_POSE_RETRIES: usize = 100;
const MIN_VISIBLE_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("no acceptable pose after {0} redraws")]
    RetryExhausted(usize),
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct SceneConfig {
    pub n: usize,
    pub outlier_ratio: f64,
    /// Standard deviation of the pixel noise on inlier matches.
    pub noise_px: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub max_rotation_deg: f64,
    pub baseline: f64,
    pub focal: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n: 512,
            outlier_ratio: 0.4,
            noise_px: 0.5,
            depth_min: 4.0,
            depth_max: 10.0,
            max_rotation_deg: 30.0,
            baseline: 1.0,
            focal: 500.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl SceneConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n < 8 {
            return bad("n must be at least 8");
        }
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return bad("outlier_ratio must lie in [0, 1)");
        }
        if !(self.noise_px >= 0.0) {
            return bad("noise_px must be non-negative");
        }
        if !(self.depth_min > 0.0 && self.depth_max >= self.depth_min) {
            return bad("depth range must be positive and ordered");
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return bad("max_rotation_deg must lie in [0, 180]");
        }
        if !(self.baseline > 0.0 && self.focal > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return bad("baseline, focal and image size must be positive");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(self.focal, self.focal, self.width / 2.0, self.height / 2.0)
    }

    /// Reads scene keys from `kv` over `base`, leaving other keys in place.
    pub fn take_from(kv: &mut KvMap, base: Self) -> Result<Self, SynthError> {
        let mut c = base;
        if let Some(n) = kv.usize("n")? {
            c.n = n;
        }
        macro_rules! real {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.f64(stringify!($field))? { c.$field = v; }
            )*};
        }
        real!(outlier_ratio, noise_px, depth_min, depth_max, max_rotation_deg, baseline, focal, width, height);
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        render(&[
            ("n", self.n.to_string()),
            ("outlier_ratio", self.outlier_ratio.to_string()),
            ("noise_px", self.noise_px.to_string()),
            ("depth_min", self.depth_min.to_string()),
            ("depth_max", self.depth_max.to_string()),
            ("max_rotation_deg", self.max_rotation_deg.to_string()),
            ("baseline", self.baseline.to_string()),
            ("focal", self.focal.to_string()),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
        ])
    }

    fn outlier_count(&self) -> usize {
        (self.outlier_ratio * self.n as f64).round() as usize
    }
}

/// One synthetic image pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub correspondences: Vec<Correspondence>,
    pub pose: Pose,
    pub e_gt: EssentialMatrix,
    pub labels: Vec<u8>,
    pub seed: u64,
    pub config: SceneConfig,
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// A first-view point uniformly placed in the image with random depth.
fn sample_point(rng: &mut impl Rng, cfg: &SceneConfig, k: &CameraIntrinsics) -> Vec3 {
    let u = rng.random_range(0.0..cfg.width);
    let v = rng.random_range(0.0..cfg.height);
    let z = if cfg.depth_max > cfg.depth_min { rng.random_range(cfg.depth_min..cfg.depth_max) } else { cfg.depth_min };
    let (x, y) = k.normalize(u, v);
    Vec3::new(x * z, y * z, z)
}

/// Pixel position of a camera-frame point if it is in front of the camera and
/// inside the image.
fn project(p: &Vec3, cfg: &SceneConfig, k: &CameraIntrinsics) -> Option<(f64, f64)> {
    if p.z <= 1e-9 {
        return None;
    }
    let (u, v) = k.denormalize(p.x / p.z, p.y / p.z);
    (u >= 0.0 && u < cfg.width && v >= 0.0 && v < cfg.height).then_some((u, v))
}

fn draw_pose(rng: &mut impl Rng, cfg: &SceneConfig) -> (RotationMatrix, Vec3) {
    let axis = unit_vector(rng);
    let max = cfg.max_rotation_deg.to_radians();
    let angle = if max > 0.0 { rng.random_range(0.0..=max) } else { 0.0 };
    let t = unit_vector(rng) * cfg.baseline;
    (RotationMatrix::from_axis_angle(&axis, angle), t)
}

/// Random relative pose: uniform axis, angle uniform up to the configured
/// maximum, translation uniform on the sphere. The draw is repeated until at
/// least 80% of a probe set of `cfg.n` scene points is visible in both views.
pub fn random_pose(rng: &mut impl Rng, cfg: &SceneConfig) -> Result<Pose, SynthError> {
    let k = cfg.intrinsics();
    for _ in 0..MAX_POSE_RETRIES {
        let (r, t) = draw_pose(rng, cfg);
        let visible = (0..cfg.n)
            .filter(|_| {
                let x1 = sample_point(rng, cfg, &k);
                project(&(r.matrix() * x1 + t), cfg, &k).is_some()
            })
            .count();
        if visible as f64 >= MIN_VISIBLE_FRACTION * cfg.n as f64 {
            return Ok(Pose::new(r, t).expect("non-zero baseline"));
        }
    }
    Err(SynthError::RetryExhausted(MAX_POSE_RETRIES))
}

/// Generates one pair; a pure function of `(cfg, seed)`.
pub fn generate_pair(cfg: &SceneConfig, seed: u64) -> Result<ScenePair, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.intrinsics();
    let pose = random_pose(&mut rng, cfg)?;
    let r = pose.rotation;
    let t = pose.translation * cfg.baseline;
    let noise = Normal::new(0.0, cfg.noise_px).expect("validated noise");
    let outliers = cfg.outlier_count();

    let mut rows = Vec::with_capacity(cfg.n);
    let mut attempts = 0usize;
    while rows.len() < cfg.n {
        attempts += 1;
        if attempts > 100 * cfg.n {
            return Err(SynthError::RetryExhausted(MAX_POSE_RETRIES));
        }
        let x1 = sample_point(&mut rng, cfg, &k);
        let Some((u2, v2)) = project(&(r.matrix() * x1 + t), cfg, &k) else { continue };
        let (u1, v1) = k.denormalize(x1.x / x1.z, x1.y / x1.z);
        let (u1, v1, u2, v2) = if rows.len() < outliers {
            (u1, v1, rng.random_range(0.0..cfg.width), rng.random_range(0.0..cfg.height))
        } else if cfg.noise_px > 0.0 {
            (
                u1 + noise.sample(&mut rng),
                v1 + noise.sample(&mut rng),
                u2 + noise.sample(&mut rng),
                v2 + noise.sample(&mut rng),
            )
        } else {
            (u1, v1, u2, v2)
        };
        let (x1n, y1n) = k.normalize(u1, v1);
        let (x2n, y2n) = k.normalize(u2, v2);
        rows.push(Correspondence::new(x1n, y1n, x2n, y2n));
    }
    rows.shuffle(&mut rng);

    let e_gt = essential_from_pose(&r, &t).expect("non-zero baseline");
    let labels = label_inliers(&e_gt, &rows, INLIER_THRESHOLD);
    Ok(ScenePair { correspondences: rows, pose, e_gt, labels, seed, config: *cfg })
}

/// `count` pairs seeded `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(cfg: &SceneConfig, base_seed: u64, count: usize) -> Result<Vec<ScenePair>, SynthError> {
    (0..count as u64).into_par_iter().map(|i| generate_pair(cfg, base_seed.wrapping_add(i))).collect()
}

fn push_reals(out: &mut String, values: impl IntoIterator<Item = f64>) {
    out.push('[');
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // 17 significant digits round-trip every finite f64.
        write!(out, "{v:.16e}").expect("write to string");
    }
    out.push(']');
}

fn mat_row_major(m: &Mat3) -> [f64; 9] {
    std::array::from_fn(|k| m[(k / 3, k % 3)])
}

/// One JSON object per pair.
pub fn encode_pair(p: &ScenePair) -> String {
    let mut s = String::new();
    let c = &p.config;
    write!(s, "{{\"n\":{},\"correspondences\":", p.correspondences.len()).unwrap();
    push_reals(&mut s, p.correspondences.iter().flat_map(|c| c.as_array()));
    s.push_str(",\"e_gt\":");
    push_reals(&mut s, p.e_gt.to_row_major());
    s.push_str(",\"r_gt\":");
    push_reals(&mut s, mat_row_major(p.pose.rotation.matrix()));
    s.push_str(",\"t_gt\":");
    push_reals(&mut s, p.pose.translation.iter().copied());
    s.push_str(",\"labels\":[");
    for (i, l) in p.labels.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{l}").unwrap();
    }
    write!(s, "],\"seed\":{},\"config\":{{\"n\":{}", p.seed, c.n).unwrap();
    for (key, v) in [
        ("outlier_ratio", c.outlier_ratio),
        ("noise_px", c.noise_px),
        ("depth_min", c.depth_min),
        ("depth_max", c.depth_max),
        ("max_rotation_deg", c.max_rotation_deg),
        ("baseline", c.baseline),
        ("focal", c.focal),
        ("width", c.width),
        ("height", c.height),
    ] {
        write!(s, ",\"{key}\":{v:.16e}").unwrap();
    }
    s.push_str("}}");
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    n: usize,
    correspondences: Vec<f64>,
    e_gt: Vec<f64>,
    r_gt: Vec<f64>,
    t_gt: Vec<f64>,
    labels: Vec<u8>,
    seed: u64,
    config: SceneConfig,
}

/// Parses one record; `line` is only used for diagnostics.
pub fn decode_pair(text: &str, line: usize) -> Result<ScenePair, SynthError> {
    let bad = |reason: String| SynthError::MalformedRecord { line, reason };
    let rec: Record = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if rec.correspondences.len() != 4 * rec.n || rec.labels.len() != rec.n {
        return Err(bad(format!(
            "n = {} but {} coordinates and {} labels",
            rec.n,
            rec.correspondences.len(),
            rec.labels.len()
        )));
    }
    if rec.e_gt.len() != 9 || rec.r_gt.len() != 9 || rec.t_gt.len() != 3 {
        return Err(bad("e_gt and r_gt need 9 entries, t_gt 3".into()));
    }
    if rec.labels.iter().any(|&l| l > 1) {
        return Err(bad("labels must be 0 or 1".into()));
    }
    let correspondences: Vec<Correspondence> =
        rec.correspondences.chunks(4).map(|c| Correspondence::new(c[0], c[1], c[2], c[3])).collect();
    let rotation = RotationMatrix::from_matrix(Mat3::from_row_slice(&rec.r_gt))
        .ok_or_else(|| bad("r_gt is not a rotation".into()))?;
    let t = Vec3::new(rec.t_gt[0], rec.t_gt[1], rec.t_gt[2]);
    if (t.norm() - 1.0).abs() > 1e-9 {
        return Err(bad("t_gt is not a unit vector".into()));
    }
    let pose = Pose { rotation, translation: t };
    let e_arr: [f64; 9] = rec.e_gt.try_into().expect("length checked");
    let e_gt = EssentialMatrix::from_unit_matrix(Mat3::from_row_slice(&e_arr))
        .ok_or_else(|| bad("e_gt does not have unit Frobenius norm".into()))?;
    let recomputed = label_inliers(&e_gt, &correspondences, INLIER_THRESHOLD);
    if recomputed != rec.labels {
        return Err(bad("stored labels disagree with the geometry".into()));
    }
    Ok(ScenePair { correspondences, pose, e_gt, labels: rec.labels, seed: rec.seed, config: rec.config })
}

pub fn write_dataset(pairs: &[ScenePair], path: &Path) -> Result<(), SynthError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        f.write_all(encode_pair(p).as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ScenePair>, SynthError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_pair(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epipolar::symmetric_epipolar_distance;
    use proptest::prelude::*;

    fn clean(n: usize, outliers: f64) -> SceneConfig {
        SceneConfig { n, outlier_ratio: outliers, noise_px: 0.0, ..Default::default() }
    }

    #[test]
    fn zero_max_rotation_gives_identity() {
        let cfg = SceneConfig { max_rotation_deg: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng, &cfg).unwrap();
        assert_eq!(*p.rotation.matrix(), Mat3::identity());
    }

    #[test]
    fn pose_draws_are_reproducible_and_unit() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let a = random_pose(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            let b = random_pose(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            assert_eq!(a, b);
            assert!((a.translation.norm() - 1.0).abs() < 1e-12);
            let angle = crate::epipolar::rotation_angle(a.rotation.matrix()).to_degrees();
            assert!(angle <= 30.0 + 1e-9);
        }
    }

    #[test]
    fn clean_scene_is_exact() {
        for seed in 0..10 {
            let p = generate_pair(&clean(200, 0.0), seed).unwrap();
            assert!(p.labels.iter().all(|&l| l == 1));
            for c in &p.correspondences {
                assert!(symmetric_epipolar_distance(p.e_gt.matrix(), c).unwrap() < 1e-10);
                assert!(p.e_gt.algebraic_residual(c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn outlier_fraction_matches_config() {
        let mut total = 0.0;
        for seed in 0..100 {
            let p = generate_pair(&clean(200, 0.5), seed).unwrap();
            total += p.labels.iter().map(|&l| l as f64).sum::<f64>() / 200.0;
        }
        let mean = total / 100.0;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn shuffle_keeps_labels_with_rows() {
        let p = generate_pair(&clean(100, 0.5), 9).unwrap();
        assert_eq!(p.labels, label_inliers(&p.e_gt, &p.correspondences, INLIER_THRESHOLD));
        // Outliers are not all at the front.
        let first_half: u32 = p.labels[..50].iter().map(|&l| l as u32).sum();
        assert!(first_half > 5 && first_half < 45, "{first_half}");
    }

    #[test]
    fn noisy_inliers_stay_labeled() {
        let cfg = SceneConfig { n: 300, outlier_ratio: 0.0, noise_px: 1.0, ..Default::default() };
        let p = generate_pair(&cfg, 1).unwrap();
        let frac = p.labels.iter().map(|&l| l as f64).sum::<f64>() / 300.0;
        assert!(frac > 0.95, "{frac}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SceneConfig { n: 7, ..Default::default() },
            SceneConfig { outlier_ratio: 1.0, ..Default::default() },
            SceneConfig { noise_px: -1.0, ..Default::default() },
        ] {
            assert!(matches!(generate_pair(&cfg, 0), Err(SynthError::InvalidConfig(_))));
        }
    }

    #[test]
    fn impossible_visibility_exhausts_retries() {
        // A one-pixel image: the second view essentially never sees the point.
        let cfg = SceneConfig { width: 1.0, height: 1.0, ..Default::default() };
        assert!(matches!(generate_pair(&cfg, 0), Err(SynthError::RetryExhausted(100))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = std::env::temp_dir().join(format!("oanet-synth-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let pairs = generate_dataset(&SceneConfig { n: 40, ..Default::default() }, 100, 10).unwrap();
        let path = dir.join("pairs.jsonl");
        write_dataset(&pairs, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, pairs);
        for (a, b) in pairs.iter().zip(&back) {
            for (x, y) in a.correspondences.iter().zip(&b.correspondences) {
                assert_eq!(x.as_array().map(f64::to_bits), y.as_array().map(f64::to_bits));
            }
        }

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(read_dataset(&path), Err(SynthError::MalformedRecord { .. })));

        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tampered_labels_are_rejected() {
        let p = generate_pair(&clean(20, 0.0), 3).unwrap();
        let line = encode_pair(&p).replacen("\"labels\":[1", "\"labels\":[0", 1);
        assert!(matches!(decode_pair(&line, 7), Err(SynthError::MalformedRecord { line: 7, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn generation_is_pure(seed in any::<u64>(), ratio in 0.0f64..0.9) {
            let cfg = SceneConfig { n: 32, outlier_ratio: ratio, ..Default::default() };
            let a = generate_pair(&cfg, seed).unwrap();
            let b = generate_pair(&cfg, seed).unwrap();
            prop_assert_eq!(encode_pair(&a), encode_pair(&b));
        }

        #[test]
        fn encode_decode_is_identity(seed in any::<u64>()) {
            let cfg = SceneConfig { n: 16, noise_px: 1.0, ..Default::default() };
            let a = generate_pair(&cfg, seed).unwrap();
            prop_assert_eq!(decode_pair(&encode_pair(&a), 1).unwrap(), a);
        }
    }

    #[test]
    fn scene_config_round_trips_through_kv() {
        let cfg = SceneConfig { n: 77, outlier_ratio: 0.35, noise_px: 0.25, focal: 410.0, ..SceneConfig::default() };
        let mut kv = KvMap::parse(&cfg.to_kv()).unwrap();
        assert_eq!(SceneConfig::take_from(&mut kv, SceneConfig::default()).unwrap(), cfg);
        kv.finish().unwrap();
    }
}
