//! Essential matrix algebra: construction from pose, epipolar residuals,
//! the weighted eight-point solve, pose recovery with angular error metrics,
//! and a RANSAC baseline.
//!
//! All coordinates here are intrinsics-normalized (camera) coordinates; the
//! conversion from pixels lives in [`normalize_coordinates`].

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{jacobi_eigen_sym, svd3, LinalgError, Mat3, Vec3};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("rotation matrix is not orthonormal with unit determinant")]
    InvalidRotation,
    #[error("baseline is zero; essential matrix undefined")]
    ZeroBaseline,
    #[error("need at least {required} weighted correspondences, got {got}")]
    RankDeficient { required: usize, got: usize },
    #[error("weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("essential matrix decomposition failed: {0}")]
    DecompositionFailure(String),
    #[error("cheirality selection needs at least one inlier correspondence")]
    NoInliers,
    #[error("ransac requires at least one iteration")]
    NoIterations,
    #[error("ransac found no valid model: every sample was degenerate")]
    NoModel,
    #[error(transparent)]
    Eigensolver(#[from] LinalgError),
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

/// Relative pose: `x_cam2 = R x_cam1 + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    /// Validates orthonormality and positive determinant to 1e-10.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let rtr = rotation.transpose().mul(&rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (rtr.0[i][j] - expected).abs() > 1e-10 {
                    return Err(GeometryError::InvalidRotation);
                }
            }
        }
        if (rotation.det() - 1.0).abs() > 1e-10 {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }
}

/// A putative correspondence in intrinsics-normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Correspondence {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Correspondence { x1, y1, x2, y2 }
    }
}

/// Essential matrix, Frobenius-normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Mat3);

impl EssentialMatrix {
    /// Normalizes the input to unit Frobenius norm.
    pub fn from_matrix(m: Mat3) -> Result<Self, GeometryError> {
        let norm = m.frobenius_norm();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(GeometryError::DecompositionFailure(
                "cannot normalize a zero or non-finite matrix".into(),
            ));
        }
        Ok(EssentialMatrix(m.scaled(1.0 / norm)))
    }

    /// Accepts a matrix that is already unit-Frobenius (to 1e-9) and stores
    /// it unchanged, preserving bit-exact round-trips through serialization.
    pub fn from_unit_norm(m: Mat3) -> Result<Self, GeometryError> {
        let norm = m.frobenius_norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(GeometryError::DecompositionFailure(format!(
                "matrix is not unit-Frobenius: norm {norm}"
            )));
        }
        Ok(EssentialMatrix(m))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Result<[f64; 3], GeometryError> {
        let (_, s, _) = svd3(&self.0)?;
        Ok(s)
    }
}

/// Pixel coordinates -> normalized coordinates: `(p - c) / f` per axis.
pub fn normalize_coordinates(
    pixels: &[[f64; 4]],
    intrinsics: &CameraIntrinsics,
) -> Vec<Correspondence> {
    pixels
        .iter()
        .map(|p| Correspondence {
            x1: (p[0] - intrinsics.cx) / intrinsics.fx,
            y1: (p[1] - intrinsics.cy) / intrinsics.fy,
            x2: (p[2] - intrinsics.cx) / intrinsics.fx,
            y2: (p[3] - intrinsics.cy) / intrinsics.fy,
        })
        .collect()
}

/// `E = [t]x R`, Frobenius-normalized. Satisfies `x2^T E x1 = 0` for any 3D
/// point visible in both views.
pub fn essential_from_pose(pose: &Pose) -> Result<EssentialMatrix, GeometryError> {
    if pose.translation.norm() <= 0.0 {
        return Err(GeometryError::ZeroBaseline);
    }
    let e = Mat3::cross_matrix(&pose.translation).mul(&pose.rotation);
    EssentialMatrix::from_matrix(e)
}

/// Symmetric epipolar distance of a correspondence from exact satisfaction
/// of the epipolar constraint. Returns `+inf` when both epipolar line
/// gradients vanish.
pub fn epipolar_residual(c: &Correspondence, e: &EssentialMatrix) -> f64 {
    let x1 = Vec3::new(c.x1, c.y1, 1.0);
    let x2 = Vec3::new(c.x2, c.y2, 1.0);
    let l1 = e.0.mul_vec(&x1);
    let l2 = e.0.transpose().mul_vec(&x2);
    let v = x2.dot(&l1);
    let g1 = l1.0[0] * l1.0[0] + l1.0[1] * l1.0[1];
    let g2 = l2.0[0] * l2.0[0] + l2.0[1] * l2.0[1];
    if g1 <= 0.0 && g2 <= 0.0 {
        return f64::INFINITY;
    }
    let v2 = v * v;
    let term = |g: f64| if g > 0.0 { v2 / g } else { f64::INFINITY };
    term(g1) + term(g2)
}

/// The nine epipolar monomials of a correspondence, ordered so that
/// `x2^T E x1 = a . vec(E)` with `E` flattened row-major.
pub fn epipolar_monomials(c: &Correspondence) -> [f64; 9] {
    [
        c.x2 * c.x1,
        c.x2 * c.y1,
        c.x2,
        c.y2 * c.x1,
        c.y2 * c.y1,
        c.y2,
        c.x1,
        c.y1,
        1.0,
    ]
}

/// Weighted eight-point solve: minimizes `e^T (sum_i w_i a_i a_i^T) e` over
/// unit `e`, projects singular values to `(1, 1, 0)`, and Frobenius
/// normalizes. Entries with weight exactly zero contribute nothing, so a
/// 0/1 indicator removes rows exactly.
pub fn weighted_eight_point(
    correspondences: &[Correspondence],
    weights: &[f64],
) -> Result<EssentialMatrix, GeometryError> {
    assert_eq!(
        correspondences.len(),
        weights.len(),
        "one weight per correspondence"
    );
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GeometryError::InvalidWeights);
    }
    let effective = weights.iter().filter(|w| **w > 0.0).count();
    if effective < 8 {
        return Err(GeometryError::RankDeficient {
            required: 8,
            got: effective,
        });
    }
    let mut normal = [0.0f64; 81];
    for (c, &w) in correspondences.iter().zip(weights.iter()) {
        if w == 0.0 {
            continue;
        }
        let a = epipolar_monomials(c);
        for j in 0..9 {
            let waj = w * a[j];
            for k in j..9 {
                normal[j * 9 + k] += waj * a[k];
            }
        }
    }
    for j in 0..9 {
        for k in 0..j {
            normal[j * 9 + k] = normal[k * 9 + j];
        }
    }
    let (_, vecs) = jacobi_eigen_sym(&normal, 9)?;
    let e_flat: Vec<f64> = (0..9).map(|r| vecs[r * 9]).collect();
    let e_raw = Mat3::from_flat(&e_flat);
    project_rank2(&e_raw)
}

/// Nearest matrix with singular values proportional to `(1, 1, 0)`, unit
/// Frobenius norm.
fn project_rank2(m: &Mat3) -> Result<EssentialMatrix, GeometryError> {
    let (u, _, v) = svd3(m).map_err(|_| GeometryError::RankDeficient {
        required: 8,
        got: 0,
    })?;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let d = Mat3::from_rows(
        [inv_sqrt2, 0.0, 0.0],
        [0.0, inv_sqrt2, 0.0],
        [0.0, 0.0, 0.0],
    );
    Ok(EssentialMatrix(u.mul(&d).mul(&v.transpose())))
}

/// The four `(R, t)` candidates of an essential matrix decomposition.
pub fn decompose_essential(e: &EssentialMatrix) -> Result<[(Mat3, Vec3); 4], GeometryError> {
    let (u, _, v) = svd3(&e.0).map_err(|err| {
        GeometryError::DecompositionFailure(format!("degenerate essential matrix: {err}"))
    })?;
    let w = Mat3::from_rows([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
    let fix_det = |r: Mat3| if r.det() < 0.0 { r.scaled(-1.0) } else { r };
    let r1 = fix_det(u.mul(&w).mul(&v.transpose()));
    let r2 = fix_det(u.mul(&w.transpose()).mul(&v.transpose()));
    let t = u.column(2);
    Ok([
        (r1, t),
        (r1, t.scaled(-1.0)),
        (r2, t),
        (r2, t.scaled(-1.0)),
    ])
}

/// Linear (DLT) triangulation with `P1 = [I|0]`, `P2 = [R|t]`. Returns the
/// depths in both cameras.
pub fn triangulate_depths(c: &Correspondence, r: &Mat3, t: &Vec3) -> Option<(f64, f64)> {
    let mut a = [0.0f64; 16];
    // Rows for camera 1 with P1 = [I|0].
    a[0] = -1.0;
    a[2] = c.x1;
    a[4 + 1] = -1.0;
    a[4 + 2] = c.y1;
    // Rows for camera 2: x2 * P2_row3 - P2_row1 and y2 * P2_row3 - P2_row2.
    let p2 = [
        [r.0[0][0], r.0[0][1], r.0[0][2], t.0[0]],
        [r.0[1][0], r.0[1][1], r.0[1][2], t.0[1]],
        [r.0[2][0], r.0[2][1], r.0[2][2], t.0[2]],
    ];
    for j in 0..4 {
        a[8 + j] = c.x2 * p2[2][j] - p2[0][j];
        a[12 + j] = c.y2 * p2[2][j] - p2[1][j];
    }
    // Smallest right singular vector of A via A^T A.
    let mut ata = [0.0f64; 16];
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a[k * 4 + i] * a[k * 4 + j];
            }
            ata[i * 4 + j] = s;
        }
    }
    let (_, vecs) = jacobi_eigen_sym(&ata, 4).ok()?;
    let xh: Vec<f64> = (0..4).map(|row| vecs[row * 4]).collect();
    if xh[3].abs() < 1e-12 {
        return None;
    }
    let x = Vec3::new(xh[0] / xh[3], xh[1] / xh[3], xh[2] / xh[3]);
    let z1 = x.0[2];
    let z2 = r.mul_vec(&x).add(t).0[2];
    Some((z1, z2))
}

/// Rotation error between two rotations, in degrees.
pub fn rotation_angular_error_deg(r_gt: &Mat3, r_est: &Mat3) -> f64 {
    let cos = ((r_gt.transpose().mul(r_est).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// Translation direction error in degrees, invariant to the sign of either
/// vector (essential matrices determine `t` only up to sign).
pub fn translation_angular_error_deg(t_gt: &Vec3, t_est: &Vec3) -> f64 {
    let denom = t_gt.norm() * t_est.norm();
    if denom <= 0.0 {
        return 180.0;
    }
    let cos = (t_gt.dot(t_est).abs() / denom).clamp(0.0, 1.0);
    cos.acos().to_degrees()
}

/// Picks the physically valid pose among the four decomposition candidates
/// by counting triangulated points with positive depth in both views; ties
/// keep the first candidate in the canonical order.
pub fn recover_pose(
    e_hat: &EssentialMatrix,
    inliers: &[Correspondence],
) -> Result<(Mat3, Vec3), GeometryError> {
    if inliers.is_empty() {
        return Err(GeometryError::NoInliers);
    }
    let candidates = decompose_essential(e_hat)?;
    let mut best = None;
    let mut best_count = 0usize;
    for (r, t) in candidates.iter() {
        let count = inliers
            .iter()
            .filter_map(|c| triangulate_depths(c, r, t))
            .filter(|(z1, z2)| *z1 > 0.0 && *z2 > 0.0)
            .count();
        if count > best_count || best.is_none() {
            best_count = count;
            best = Some((*r, *t));
        }
    }
    best.ok_or_else(|| GeometryError::DecompositionFailure("no candidate pose".into()))
}

/// Recovers the pose from `e_hat` and reports (rotation error, translation
/// error) against the ground truth, both in degrees.
pub fn recover_pose_and_angular_errors(
    e_hat: &EssentialMatrix,
    gt: &Pose,
    inliers: &[Correspondence],
) -> Result<(f64, f64), GeometryError> {
    let (r, t) = recover_pose(e_hat, inliers)?;
    Ok((
        rotation_angular_error_deg(&gt.rotation, &r),
        translation_angular_error_deg(&gt.translation, &t),
    ))
}

/// Squared Frobenius regression loss with the sign ambiguity absorbed:
/// `min(|e_hat - e|^2, |e_hat + e|^2)`.
pub fn essential_regression_loss(e_hat: &EssentialMatrix, e_gt: &EssentialMatrix) -> f64 {
    let minus = e_hat.0.sub(&e_gt.0).frobenius_norm();
    let plus = e_hat.0.add(&e_gt.0).frobenius_norm();
    (minus * minus).min(plus * plus)
}

/// Classic hypothesize-and-verify estimation with an eight-point minimal
/// sample (matching the learned pipeline's solver). Deterministic for a
/// fixed seed; ties between hypotheses keep the earliest one.
pub fn ransac_essential(
    correspondences: &[Correspondence],
    iterations: usize,
    inlier_threshold: f64,
    seed: u64,
) -> Result<(EssentialMatrix, Vec<bool>), GeometryError> {
    if iterations == 0 {
        return Err(GeometryError::NoIterations);
    }
    let n = correspondences.len();
    if n < 8 {
        return Err(GeometryError::RankDeficient {
            required: 8,
            got: n,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut best: Option<(EssentialMatrix, Vec<bool>, usize)> = None;
    for _ in 0..iterations {
        let sample = rand::seq::index::sample(&mut rng, n, 8);
        let subset: Vec<Correspondence> = sample.iter().map(|i| correspondences[i]).collect();
        let Ok(e) = weighted_eight_point(&subset, &[1.0; 8]) else {
            continue;
        };
        let mask: Vec<bool> = correspondences
            .iter()
            .map(|c| epipolar_residual(c, &e) < inlier_threshold)
            .collect();
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().map_or(true, |(_, _, bc)| count > *bc) {
            best = Some((e, mask, count));
        }
    }
    let (hypothesis, mask, count) = best.ok_or(GeometryError::NoModel)?;
    // Re-fit on the consensus set when it can support a solve.
    let model = if count >= 8 {
        let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        weighted_eight_point(correspondences, &weights).unwrap_or(hypothesis)
    } else {
        hypothesis
    };
    Ok((model, mask))
}
