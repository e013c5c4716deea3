//! Small fixed-size linear algebra and a symmetric eigensolver.
//!
//! Everything here operates on tiny dense matrices (3x3 up to 9x9), so a
//! cyclic Jacobi iteration is both simple and accurate; no external solver
//! is needed.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("Jacobi eigensolver did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("singular value decomposition failed: {0}")]
    SvdFailure(String),
}

/// 3-vector of `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    pub fn cross(&self, other: &Vec3) -> Vec3 {
        let a = &self.0;
        let b = &other.0;
        Vec3([
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ])
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn normalized(&self) -> Vec3 {
        let n = self.norm();
        self.scaled(1.0 / n)
    }

    pub fn sub(&self, other: &Vec3) -> Vec3 {
        Vec3([
            self.0[0] - other.0[0],
            self.0[1] - other.0[1],
            self.0[2] - other.0[2],
        ])
    }

    pub fn add(&self, other: &Vec3) -> Vec3 {
        Vec3([
            self.0[0] + other.0[0],
            self.0[1] + other.0[1],
            self.0[2] + other.0[2],
        ])
    }
}

/// Row-major 3x3 matrix of `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn zeros() -> Self {
        Mat3([[0.0; 3]; 3])
    }

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Mat3([r0, r1, r2])
    }

    /// Skew-symmetric cross-product matrix `[t]x` with `[t]x v = t x v`.
    pub fn cross_matrix(t: &Vec3) -> Self {
        let [x, y, z] = t.0;
        Mat3([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(&self, other: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                let a = self.0[i][k];
                for j in 0..3 {
                    out[i][j] += a * other.0[k][j];
                }
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, s: f64) -> Mat3 {
        let mut out = self.0;
        for row in &mut out {
            for v in row {
                *v *= s;
            }
        }
        Mat3(out)
    }

    pub fn sub(&self, other: &Mat3) -> Mat3 {
        let mut out = self.0;
        for (r, or) in out.iter_mut().zip(other.0.iter()) {
            for (v, ov) in r.iter_mut().zip(or.iter()) {
                *v -= ov;
            }
        }
        Mat3(out)
    }

    pub fn add(&self, other: &Mat3) -> Mat3 {
        let mut out = self.0;
        for (r, or) in out.iter_mut().zip(other.0.iter()) {
            for (v, ov) in r.iter_mut().zip(or.iter()) {
                *v += ov;
            }
        }
        Mat3(out)
    }

    pub fn column(&self, j: usize) -> Vec3 {
        Vec3([self.0[0][j], self.0[1][j], self.0[2][j]])
    }

    pub fn from_columns(c0: &Vec3, c1: &Vec3, c2: &Vec3) -> Mat3 {
        Mat3([
            [c0.0[0], c1.0[0], c2.0[0]],
            [c0.0[1], c1.0[1], c2.0[1]],
            [c0.0[2], c1.0[2], c2.0[2]],
        ])
    }

    /// Flat row-major copy.
    pub fn to_flat(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn from_flat(v: &[f64]) -> Mat3 {
        assert_eq!(v.len(), 9, "expected 9 entries for a 3x3 matrix");
        Mat3([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }
}

/// Rotation about a unit axis by `angle_rad` (Rodrigues formula).
pub fn rotation_from_axis_angle(axis: &Vec3, angle_rad: f64) -> Mat3 {
    let u = axis.normalized();
    let k = Mat3::cross_matrix(&u);
    let k2 = k.mul(&k);
    let (s, c) = angle_rad.sin_cos();
    Mat3::identity().add(&k.scaled(s)).add(&k2.scaled(1.0 - c))
}

const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// `a` is row-major `n x n` and is only read. Returns eigenvalues in
/// ascending order and the matching unit eigenvectors as columns of a
/// row-major `n x n` matrix. The input is normalized by its Frobenius norm
/// before iterating, so the stopping tolerance is scale invariant.
pub fn jacobi_eigen_sym(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    if a.len() != n * n {
        return Err(LinalgError::NotSquare {
            rows: a.len() / n.max(1),
            cols: n,
        });
    }
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        let mut vecs = vec![0.0; n * n];
        for i in 0..n {
            vecs[i * n + i] = 1.0;
        }
        return Ok((vec![0.0; n], vecs));
    }

    let mut m: Vec<f64> = a.iter().map(|v| v / scale).collect();
    // Symmetrize to protect against tiny asymmetries in the input.
    for p in 0..n {
        for q in (p + 1)..n {
            let avg = 0.5 * (m[p * n + q] + m[q * n + p]);
            m[p * n + q] = avg;
            m[q * n + p] = avg;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += m[p * n + q].abs();
                }
            }
            s
        };
        if off < JACOBI_TOLERANCE {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = 0.5 * (m[q * n + q] - m[p * n + p]) / apq;
                let t = {
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                let app = m[p * n + p];
                let aqq = m[q * n + q];
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m[i * n + p];
                        let aiq = m[i * n + q];
                        let new_ip = aip - s * (aiq + tau * aip);
                        let new_iq = aiq + s * (aip - tau * aiq);
                        m[i * n + p] = new_ip;
                        m[p * n + i] = new_ip;
                        m[i * n + q] = new_iq;
                        m[q * n + i] = new_iq;
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = vip - s * (viq + tau * vip);
                    v[i * n + q] = viq + s * (vip - tau * viq);
                }
            }
        }
    }
    if !converged {
        // One more tolerance check after the final sweep.
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q].abs())
            .sum();
        if off >= JACOBI_TOLERANCE {
            return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[i * n + i]
            .partial_cmp(&m[j * n + j])
            .expect("eigenvalues are finite")
    });
    let vals: Vec<f64> = order.iter().map(|&i| m[i * n + i] * scale).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            vecs[row * n + new_col] = v[row * n + old_col];
        }
    }
    Ok((vals, vecs))
}

/// Singular value decomposition of a 3x3 matrix: `m = u * diag(s) * v^T`.
///
/// Built on the symmetric eigendecomposition of `m^T m`. Singular values come
/// back in descending order; `u` and `v` have unit columns and `u` is
/// completed by a cross product so it stays orthonormal even when the
/// smallest singular value is zero (the usual case for essential matrices).
pub fn svd3(m: &Mat3) -> Result<(Mat3, [f64; 3], Mat3), LinalgError> {
    let mtm = m.transpose().mul(m);
    let (vals, vecs) = jacobi_eigen_sym(&mtm.to_flat(), 3)?;
    // Ascending eigenvalues -> descending singular values.
    let idx = [2, 1, 0];
    let mut sing = [0.0; 3];
    let mut v_cols = [Vec3::new(0.0, 0.0, 0.0); 3];
    for (k, &i) in idx.iter().enumerate() {
        sing[k] = vals[i].max(0.0).sqrt();
        v_cols[k] = Vec3([vecs[i], vecs[3 + i], vecs[6 + i]]).normalized();
    }
    // Keep V right-handed so U = M V / sigma stays a rotation candidate.
    if Mat3::from_columns(&v_cols[0], &v_cols[1], &v_cols[2]).det() < 0.0 {
        v_cols[2] = v_cols[2].scaled(-1.0);
    }
    if sing[1] <= 1e-300 {
        return Err(LinalgError::SvdFailure(
            "matrix is rank deficient below rank 2".into(),
        ));
    }
    let u0 = m.mul_vec(&v_cols[0]).scaled(1.0 / sing[0]).normalized();
    let u1 = m.mul_vec(&v_cols[1]).scaled(1.0 / sing[1]).normalized();
    let u2 = u0.cross(&u1);
    let u = Mat3::from_columns(&u0, &u1, &u2);
    let v = Mat3::from_columns(&v_cols[0], &v_cols[1], &v_cols[2]);
    Ok((u, sing, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn jacobi_diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let (vals, _) = jacobi_eigen_sym(&a, 3).unwrap();
        assert!(approx(vals[0], 1.0, 1e-12));
        assert!(approx(vals[1], 2.0, 1e-12));
        assert!(approx(vals[2], 3.0, 1e-12));
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        // Symmetric 4x4 with known structure: A = Q D Q^T reconstruction test.
        let a = [
            4.0, 1.0, 0.5, 0.0, //
            1.0, 3.0, 0.2, 0.1, //
            0.5, 0.2, 2.0, 0.3, //
            0.0, 0.1, 0.3, 1.0,
        ];
        let n = 4;
        let (vals, vecs) = jacobi_eigen_sym(&a, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut rec = 0.0;
                for k in 0..n {
                    rec += vecs[i * n + k] * vals[k] * vecs[j * n + k];
                }
                assert!(approx(rec, a[i * n + j], 1e-9), "entry ({i},{j})");
            }
        }
        // Eigenvectors orthonormal.
        for c1 in 0..n {
            for c2 in 0..n {
                let dot: f64 = (0..n).map(|r| vecs[r * n + c1] * vecs[r * n + c2]).sum();
                let expected = if c1 == c2 { 1.0 } else { 0.0 };
                assert!(approx(dot, expected, 1e-10));
            }
        }
    }

    #[test]
    fn jacobi_scale_invariance() {
        let a = [2.0, 0.3, 0.3, 1.0];
        let scaled: Vec<f64> = a.iter().map(|v| v * 1e6).collect();
        let (_, v1) = jacobi_eigen_sym(&a, 2).unwrap();
        let (_, v2) = jacobi_eigen_sym(&scaled, 2).unwrap();
        for (x, y) in v1.iter().zip(v2.iter()) {
            assert!(approx(*x, *y, 1e-12));
        }
    }

    #[test]
    fn svd3_recovers_singular_values() {
        let m = Mat3::from_rows([1.0, 0.2, 0.0], [0.0, 2.0, 0.3], [0.1, 0.0, 0.5]);
        let (u, s, v) = svd3(&m).unwrap();
        assert!(s[0] >= s[1] && s[1] >= s[2]);
        // Reconstruct.
        let d = Mat3::from_rows([s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]);
        let rec = u.mul(&d).mul(&v.transpose());
        for i in 0..3 {
            for j in 0..3 {
                assert!(approx(rec.0[i][j], m.0[i][j], 1e-10));
            }
        }
    }

    #[test]
    fn rotation_axis_angle_roundtrip() {
        let axis = Vec3::new(0.3, -0.5, 0.8);
        let r = rotation_from_axis_angle(&axis, 0.7);
        // R^T R = I and det = 1.
        let rtr = r.transpose().mul(&r);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!(approx(rtr.0[i][j], expected, 1e-12));
            }
        }
        assert!(approx(r.det(), 1.0, 1e-12));
        // Rotation angle recovered from the trace.
        let angle = ((r.trace() - 1.0) / 2.0).acos();
        assert!(approx(angle, 0.7, 1e-12));
    }

    #[test]
    fn cross_matrix_matches_cross_product() {
        let t = Vec3::new(0.2, -1.0, 0.7);
        let v = Vec3::new(1.5, 0.3, -0.4);
        let lhs = Mat3::cross_matrix(&t).mul_vec(&v);
        let rhs = t.cross(&v);
        for i in 0..3 {
            assert!(approx(lhs.0[i], rhs.0[i], 1e-15));
        }
    }
}
