//! Closed-form two-view geometry for calibrated cameras.
//!
//! Conventions: a 3D point `X1` in the first camera frame maps to the second
//! camera frame as `X2 = R * X1 + t`, and the essential matrix is
//! `E = [t]x R`, so that `p2^T E p1 = 0` for homogeneous normalized image
//! points `p1 = (x1, y1, 1)` and `p2 = (x2, y2, 1)`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Default threshold on the symmetric epipolar distance for inlier labels.
pub const INLIER_THRESHOLD: f64 = 1e-4;

const EPIPOLE_EPS: f64 = 1e-15;
const RANK_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("translation norm {0:e} is too small to define an essential matrix")]
    ZeroTranslation(f64),
    #[error("both points lie at their epipoles (denominator {0:e})")]
    DegenerateEpipole(f64),
    #[error("matrix is rank deficient (singular values {0:?})")]
    RankDeficient([f64; 3]),
    #[error("no pose candidate places any correspondence in front of both cameras")]
    NoValidCandidate,
    #[error("weights length {weights} does not match {correspondences} correspondences")]
    LengthMismatch { weights: usize, correspondences: usize },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy }
    }

    pub fn normalize(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.fx + self.cx, y * self.fy + self.cy)
    }
}

/// A putative match in intrinsics-normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Correspondence {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Correspondence {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn p1(&self) -> Vec3 {
        Vec3::new(self.x1, self.y1, 1.0)
    }

    pub fn p2(&self) -> Vec3 {
        Vec3::new(self.x2, self.y2, 1.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub type CorrespondenceSet = Vec<Correspondence>;

/// Rotation matrix; `R^T R = I` and `det R = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Wraps `m` after checking orthonormality and orientation to 1e-9.
    pub fn from_matrix(m: Mat3) -> Option<Self> {
        let ortho = (m.transpose() * m - Mat3::identity()).abs().max();
        if ortho < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9 {
            Some(Self(m))
        } else {
            None
        }
    }

    /// Rotation of `angle` radians about `axis` (Rodrigues).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let k = skew(&(axis / n));
        Self(Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos()))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

/// Essential matrix with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Mat3);

impl EssentialMatrix {
    /// Scales `m` to unit Frobenius norm. Returns `None` for a zero matrix.
    pub fn from_matrix(m: Mat3) -> Option<Self> {
        let n = m.norm();
        if n > 0.0 && n.is_finite() {
            Some(Self(m / n))
        } else {
            None
        }
    }

    /// Wraps `m` unchanged when its Frobenius norm is already 1 within 1e-9.
    pub fn from_unit_matrix(m: Mat3) -> Option<Self> {
        ((m.norm() - 1.0).abs() < 1e-9).then_some(Self(m))
    }

    /// Row-major 9-vector view, the `Vec(E)` convention of the eight-point solver.
    pub fn from_row_major(v: &[f64; 9]) -> Option<Self> {
        Self::from_matrix(Mat3::from_row_slice(v))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    /// Algebraic residual `p2^T E p1`.
    pub fn algebraic_residual(&self, c: &Correspondence) -> f64 {
        c.p2().dot(&(self.0 * c.p1()))
    }
}

impl std::ops::Neg for EssentialMatrix {
    type Output = Self;
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

/// Relative pose with a unit, scale-free translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Pose {
    /// Builds a pose, normalizing the translation to unit length.
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Result<Self, GeometryError> {
        let n = translation.norm();
        if n < RANK_EPS {
            return Err(GeometryError::ZeroTranslation(n));
        }
        Ok(Self { rotation, translation: translation / n })
    }
}

/// Cross-product matrix: `skew(t) * v == t.cross(v)`.
pub fn skew(t: &Vec3) -> Mat3 {
    Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `E = [t]x R` scaled to unit Frobenius norm.
pub fn essential_from_pose(r: &RotationMatrix, t: &Vec3) -> Result<EssentialMatrix, GeometryError> {
    let n = t.norm();
    if n < RANK_EPS {
        return Err(GeometryError::ZeroTranslation(n));
    }
    let e = skew(t) * r.matrix();
    Ok(EssentialMatrix::from_matrix(e).expect("non-zero translation and rotation give non-zero E"))
}

/// Squared epipolar residual over the sum of squared epipolar-line gradients
/// in both images.
pub fn symmetric_epipolar_distance(e: &Mat3, c: &Correspondence) -> Result<f64, GeometryError> {
    let (num, den) = epipolar_terms(e, c);
    if den < EPIPOLE_EPS {
        return Err(GeometryError::DegenerateEpipole(den));
    }
    Ok(num / den)
}

/// `(p2^T E p1)^2` and the epipolar-line gradient denominator.
pub(crate) fn epipolar_terms(e: &Mat3, c: &Correspondence) -> (f64, f64) {
    let p1 = c.p1();
    let p2 = c.p2();
    let ep1 = e * p1;
    let etp2 = e.transpose() * p2;
    let r = p2.dot(&ep1);
    let den = ep1.x * ep1.x + ep1.y * ep1.y + etp2.x * etp2.x + etp2.y * etp2.y;
    (r * r, den)
}

/// Gradient of the symmetric epipolar distance with respect to the entries of
/// `E` (row-major), together with the distance itself.
pub(crate) fn symmetric_epipolar_distance_grad(e: &Mat3, c: &Correspondence) -> Option<(f64, [f64; 9])> {
    let p1 = c.p1();
    let p2 = c.p2();
    let ep1 = e * p1;
    let etp2 = e.transpose() * p2;
    let r = p2.dot(&ep1);
    let den = ep1.x * ep1.x + ep1.y * ep1.y + etp2.x * etp2.x + etp2.y * etp2.y;
    if den < EPIPOLE_EPS {
        return None;
    }
    let d = r * r / den;
    let mut g = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            // d r / d E_ij = p2_i p1_j
            let dr = p2[i] * p1[j];
            // d den / d E_ij: (Ep1)_i for i < 2 contributes 2 (Ep1)_i p1_j;
            // (E^T p2)_j for j < 2 contributes 2 (E^T p2)_j p2_i.
            let mut dden = 0.0;
            if i < 2 {
                dden += 2.0 * ep1[i] * p1[j];
            }
            if j < 2 {
                dden += 2.0 * etp2[j] * p2[i];
            }
            g[i * 3 + j] = (2.0 * r * dr * den - r * r * dden) / (den * den);
        }
    }
    Some((d, g))
}

/// Converts pixel coordinates to normalized image coordinates.
pub fn normalize_keypoints(pixels: &[(f64, f64)], k: &CameraIntrinsics) -> Vec<(f64, f64)> {
    pixels.iter().map(|&(u, v)| k.normalize(u, v)).collect()
}

/// 1 where the symmetric epipolar distance is below `threshold`, else 0.
/// Rows with both points at the epipoles are outliers.
pub fn label_inliers(e: &EssentialMatrix, set: &[Correspondence], threshold: f64) -> Vec<u8> {
    set.iter()
        .map(|c| match symmetric_epipolar_distance(e.matrix(), c) {
            Ok(d) if d < threshold => 1,
            _ => 0,
        })
        .collect()
}

fn svd3(m: &Mat3) -> (Mat3, Vec3, Mat3) {
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let mut v_t = svd.v_t.expect("requested V^T");
    let mut s = svd.singular_values;
    // nalgebra does not guarantee ordering for small matrices.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    if order != [0, 1, 2] {
        let (u0, vt0, s0) = (u, v_t, s);
        for (dst, &src) in order.iter().enumerate() {
            u.set_column(dst, &u0.column(src));
            v_t.set_row(dst, &vt0.row(src));
            s[dst] = s0[src];
        }
    }
    (u, s, v_t)
}

/// Closest essential matrix (singular values `(1/sqrt2, 1/sqrt2, 0)`).
pub fn project_to_essential(m: &Mat3) -> Result<EssentialMatrix, GeometryError> {
    let (u, s, v_t) = svd3(m);
    if s[0] < RANK_EPS && s[1] < RANK_EPS {
        return Err(GeometryError::RankDeficient([s[0], s[1], s[2]]));
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let e = u * Mat3::from_diagonal(&Vec3::new(h, h, 0.0)) * v_t;
    Ok(EssentialMatrix(e))
}

/// The four `(R, t)` factorizations of `E`: `(R1, t), (R1, -t), (R2, t), (R2, -t)`.
pub fn decompose_essential(e: &EssentialMatrix) -> Result<[Pose; 4], GeometryError> {
    let (mut u, s, mut v_t) = svd3(e.matrix());
    if s[0] < RANK_EPS && s[1] < RANK_EPS {
        return Err(GeometryError::RankDeficient([s[0], s[1], s[2]]));
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = RotationMatrix(u * w * v_t);
    let r2 = RotationMatrix(u * w.transpose() * v_t);
    let t: Vec3 = u.column(2).into_owned().normalize();
    Ok([
        Pose { rotation: r1, translation: t },
        Pose { rotation: r1, translation: -t },
        Pose { rotation: r2, translation: t },
        Pose { rotation: r2, translation: -t },
    ])
}

/// Depths `(d1, d2)` with `d2 p2 ~= d1 R p1 + t`, by linear least squares.
pub(crate) fn triangulate_depths(pose: &Pose, c: &Correspondence) -> Option<(f64, f64)> {
    let a = pose.rotation.matrix() * c.p1();
    let b = -c.p2();
    let t = &pose.translation;
    // Solve [a b] [d1 d2]^T = -t in the least-squares sense.
    let aa = a.dot(&a);
    let ab = a.dot(&b);
    let bb = b.dot(&b);
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-14 * aa * bb {
        return None;
    }
    let at = -a.dot(t);
    let bt = -b.dot(t);
    let d1 = (bb * at - ab * bt) / det;
    let d2 = (aa * bt - ab * at) / det;
    Some((d1, d2))
}

/// Selects the candidate that puts the largest weighted number of
/// correspondences in front of both cameras.
pub fn recover_pose(e: &EssentialMatrix, set: &[Correspondence], weights: &[f64]) -> Result<Pose, GeometryError> {
    if weights.len() != set.len() {
        return Err(GeometryError::LengthMismatch { weights: weights.len(), correspondences: set.len() });
    }
    let candidates = decompose_essential(e)?;
    let mut best: Option<(f64, Pose)> = None;
    for cand in candidates {
        let score: f64 = set
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .filter_map(|(c, &w)| match triangulate_depths(&cand, c) {
                Some((d1, d2)) if d1 > 0.0 && d2 > 0.0 => Some(w),
                _ => None,
            })
            .sum();
        if score > 0.0 && best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.map(|(_, p)| p).ok_or(GeometryError::NoValidCandidate)
}

/// Rotation angle of `r` in radians, computed without the arccos precision
/// loss near zero.
pub(crate) fn rotation_angle(r: &Mat3) -> f64 {
    let cos = (r.trace() - 1.0) / 2.0;
    let sin = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    sin.atan2(cos)
}

/// Rotation and translation angular errors in degrees. The translation error
/// folds the sign: `t` and `-t` are the same direction.
pub fn pose_angular_errors(est: &Pose, gt: &Pose) -> (f64, f64) {
    let dr = est.rotation.matrix().transpose() * gt.rotation.matrix();
    let rot = rotation_angle(&dr).to_degrees().clamp(0.0, 180.0);
    let a = est.translation.normalize();
    let b = gt.translation.normalize();
    let trans = a.cross(&b).norm().atan2(a.dot(&b).abs()).to_degrees().clamp(0.0, 90.0);
    (rot, trans)
}

/// `min(||A - B||_F, ||A + B||_F)`.
pub fn sign_invariant_distance(a: &Mat3, b: &Mat3) -> f64 {
    (a - b).norm().min((a + b).norm())
}
