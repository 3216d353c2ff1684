//! Covariance construction and EWA projection, forward and reverse.
//!
//! Quaternions are stored `[w, x, y, z]` and normalized internally, so the
//! reverse pass returns gradients with respect to the raw (unnormalized)
//! quaternion.

use crate::real::Real;

pub type Mat3<R> = [[R; 3]; 3];

#[inline]
pub fn mat3_mul<R: Real>(a: &Mat3<R>, b: &Mat3<R>) -> Mat3<R> {
    let mut out = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = R::zero();
            for k in 0..3 {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

#[inline]
pub fn mat3_transpose<R: Real>(a: &Mat3<R>) -> Mat3<R> {
    let mut out = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

#[inline]
pub fn mat3_vec<R: Real>(a: &Mat3<R>, v: &[R; 3]) -> [R; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
pub fn mat3_t_vec<R: Real>(a: &Mat3<R>, v: &[R; 3]) -> [R; 3] {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

pub fn quat_norm<R: Real>(q: &[R; 4]) -> R {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Normalize a quaternion. A zero quaternion maps to identity.
pub fn quat_normalize<R: Real>(q: &[R; 4]) -> [R; 4] {
    let n = quat_norm(q);
    if n == R::zero() {
        return [R::one(), R::zero(), R::zero(), R::zero()];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Reverse of [`quat_normalize`]: project the gradient onto the tangent space and rescale.
pub fn quat_normalize_backward<R: Real>(q: &[R; 4], g_unit: &[R; 4]) -> [R; 4] {
    let n = quat_norm(q);
    if n == R::zero() {
        return [R::zero(); 4];
    }
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot = u[0] * g_unit[0] + u[1] * g_unit[1] + u[2] * g_unit[2] + u[3] * g_unit[3];
    [
        (g_unit[0] - u[0] * dot) / n,
        (g_unit[1] - u[1] * dot) / n,
        (g_unit[2] - u[2] * dot) / n,
        (g_unit[3] - u[3] * dot) / n,
    ]
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn rotation_matrix<R: Real>(u: &[R; 4]) -> Mat3<R> {
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let one = R::one();
    let two = R::of(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Gradient of a scalar with respect to the unit quaternion, given its gradient
/// with respect to the rotation matrix entries.
pub fn rotation_matrix_backward<R: Real>(u: &[R; 4], g: &Mat3<R>) -> [R; 4] {
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let two = R::of(2.0);
    let gw = -z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1];
    let gx = y * g[0][1] + z * g[0][2] + y * g[1][0] - two * x * g[1][1] - w * g[1][2]
        + z * g[2][0]
        + w * g[2][1]
        - two * x * g[2][2];
    let gy = -two * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
        - w * g[2][0]
        + z * g[2][1]
        - two * y * g[2][2];
    let gz = -two * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - two * z * g[1][1]
        + y * g[1][2]
        + x * g[2][0]
        + y * g[2][1];
    [two * gw, two * gx, two * gy, two * gz]
}

/// Σ = R diag(exp(log_scale))² Rᵀ.
pub fn covariance3<R: Real>(log_scale: &[R; 3], rotation: &[R; 4]) -> Mat3<R> {
    let u = quat_normalize(rotation);
    let rot = rotation_matrix(&u);
    let s = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    let mut m = rot;
    for row in m.iter_mut() {
        for k in 0..3 {
            row[k] *= s[k];
        }
    }
    mat3_mul(&m, &mat3_transpose(&m))
}

/// Reverse of [`covariance3`] for a symmetric upstream gradient.
pub fn covariance3_backward<R: Real>(
    log_scale: &[R; 3],
    rotation: &[R; 4],
    g_sigma: &Mat3<R>,
) -> ([R; 3], [R; 4]) {
    let u = quat_normalize(rotation);
    let rot = rotation_matrix(&u);
    let s = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    let mut m = rot;
    for row in m.iter_mut() {
        for k in 0..3 {
            row[k] *= s[k];
        }
    }
    // Σ = M Mᵀ  =>  G_M = (G + Gᵀ) M
    let mut g_sym = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g_sym[i][j] = g_sigma[i][j] + g_sigma[j][i];
        }
    }
    let g_m = mat3_mul(&g_sym, &m);
    let mut g_rot = [[R::zero(); 3]; 3];
    let mut g_ls = [R::zero(); 3];
    for k in 0..3 {
        let mut gs = R::zero();
        for i in 0..3 {
            g_rot[i][k] = g_m[i][k] * s[k];
            gs += g_m[i][k] * rot[i][k];
        }
        g_ls[k] = gs * s[k];
    }
    let g_u = rotation_matrix_backward(&u, &g_rot);
    (g_ls, quat_normalize_backward(rotation, &g_u))
}

/// Pinhole camera parameters in the scalar type of the computation.
#[derive(Clone, Copy, Debug)]
pub struct CameraParams<R> {
    pub fx: R,
    pub fy: R,
    pub cx: R,
    pub cy: R,
    pub rotation: Mat3<R>,
    pub translation: [R; 3],
}

/// Intermediate values of one Gaussian's projection, kept for the reverse pass.
#[derive(Clone, Copy, Debug)]
pub struct Projection<R> {
    pub cam: [R; 3],
    pub mean2d: [R; 2],
    /// `[xx, xy, yy]` including the low-pass floor.
    pub cov2d: [R; 3],
    pub depth: R,
    sigma_cam: Mat3<R>,
    jac: [[R; 3]; 2],
}

pub enum ProjectFailure<R> {
    BehindCamera(R),
}

/// Camera-space mean, screen-space mean and EWA covariance `J W Σ Wᵀ Jᵀ + low_pass·I`.
pub fn project<R: Real>(
    position: &[R; 3],
    log_scale: &[R; 3],
    rotation: &[R; 4],
    cam: &CameraParams<R>,
    near: R,
    low_pass: R,
) -> Result<Projection<R>, ProjectFailure<R>> {
    let pc = mat3_vec(&cam.rotation, position);
    let t = [
        pc[0] + cam.translation[0],
        pc[1] + cam.translation[1],
        pc[2] + cam.translation[2],
    ];
    if t[2] <= near {
        return Err(ProjectFailure::BehindCamera(t[2]));
    }
    let iz = R::one() / t[2];
    let iz2 = iz * iz;
    let jac = [
        [cam.fx * iz, R::zero(), -cam.fx * t[0] * iz2],
        [R::zero(), cam.fy * iz, -cam.fy * t[1] * iz2],
    ];
    let sigma = covariance3(log_scale, rotation);
    let w = &cam.rotation;
    let sigma_cam = mat3_mul(&mat3_mul(w, &sigma), &mat3_transpose(w));
    // cov2d = J Σc Jᵀ
    let mut js = [[R::zero(); 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            let mut s = R::zero();
            for k in 0..3 {
                s += jac[i][k] * sigma_cam[k][j];
            }
            js[i][j] = s;
        }
    }
    let mut c = [[R::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut s = R::zero();
            for k in 0..3 {
                s += js[i][k] * jac[j][k];
            }
            c[i][j] = s;
        }
    }
    let mean2d = [cam.fx * t[0] * iz + cam.cx, cam.fy * t[1] * iz + cam.cy];
    Ok(Projection {
        cam: t,
        mean2d,
        cov2d: [c[0][0] + low_pass, c[0][1], c[1][1] + low_pass],
        depth: t[2],
        sigma_cam,
        jac,
    })
}

/// Reverse of [`project`]. `g_cov2d` holds `[∂/∂xx, ∂/∂xy, ∂/∂yy]` where the
/// off-diagonal is treated as a single scalar parameter of the symmetric matrix.
/// Returns gradients for `(position, log_scale, rotation)`.
pub fn project_backward<R: Real>(
    proj: &Projection<R>,
    log_scale: &[R; 3],
    rotation: &[R; 4],
    cam: &CameraParams<R>,
    g_mean2d: [R; 2],
    g_cov2d: [R; 3],
) -> ([R; 3], [R; 3], [R; 4]) {
    let half = R::of(0.5);
    let two = R::of(2.0);
    let t = proj.cam;
    let iz = R::one() / t[2];
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    let mut g_t = [R::zero(); 3];
    g_t[0] += g_mean2d[0] * cam.fx * iz;
    g_t[1] += g_mean2d[1] * cam.fy * iz;
    g_t[2] += -g_mean2d[0] * cam.fx * t[0] * iz2 - g_mean2d[1] * cam.fy * t[1] * iz2;

    // Full symmetric gradient of the 2×2 covariance.
    let g2 = [
        [g_cov2d[0], g_cov2d[1] * half],
        [g_cov2d[1] * half, g_cov2d[2]],
    ];
    let jac = &proj.jac;
    let sc = &proj.sigma_cam;

    // G_J = 2 G2 J Σc
    let mut jsc = [[R::zero(); 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            let mut s = R::zero();
            for k in 0..3 {
                s += jac[i][k] * sc[k][j];
            }
            jsc[i][j] = s;
        }
    }
    let mut g_j = [[R::zero(); 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            g_j[i][j] = two * (g2[i][0] * jsc[0][j] + g2[i][1] * jsc[1][j]);
        }
    }
    g_t[0] += g_j[0][2] * (-cam.fx * iz2);
    g_t[1] += g_j[1][2] * (-cam.fy * iz2);
    g_t[2] += g_j[0][0] * (-cam.fx * iz2)
        + g_j[0][2] * (two * cam.fx * t[0] * iz3)
        + g_j[1][1] * (-cam.fy * iz2)
        + g_j[1][2] * (two * cam.fy * t[1] * iz3);

    // G_Σc = Jᵀ G2 J, then G_Σ = Wᵀ G_Σc W
    let mut g_sc = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = R::zero();
            for a in 0..2 {
                for b in 0..2 {
                    s += jac[a][i] * g2[a][b] * jac[b][j];
                }
            }
            g_sc[i][j] = s;
        }
    }
    let w = &cam.rotation;
    let g_sigma = mat3_mul(&mat3_mul(&mat3_transpose(w), &g_sc), w);
    let (g_ls, g_q) = covariance3_backward(log_scale, rotation, &g_sigma);

    let g_p = mat3_t_vec(w, &g_t);
    (g_p, g_ls, g_q)
}

/// Inverse of a symmetric 2×2 `[xx, xy, yy]`, or `None` when `det < min_det`.
pub fn conic<R: Real>(cov: &[R; 3], min_det: R) -> Option<([R; 3], R)> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det >= min_det) {
        return None;
    }
    let inv = R::one() / det;
    Some(([cov[2] * inv, -cov[1] * inv, cov[0] * inv], det))
}

/// Reverse of [`conic`]: maps `[∂/∂A, ∂/∂B, ∂/∂C]` of the conic (off-diagonal as one
/// scalar) to the same representation for the covariance.
pub fn conic_backward<R: Real>(con: &[R; 3], g_con: &[R; 3]) -> [R; 3] {
    let half = R::of(0.5);
    let q = [[con[0], con[1]], [con[1], con[2]]];
    let g = [[g_con[0], g_con[1] * half], [g_con[1] * half, g_con[2]]];
    // G_Σ = -Q G Q
    let mut qg = [[R::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            qg[i][j] = q[i][0] * g[0][j] + q[i][1] * g[1][j];
        }
    }
    let mut gs = [[R::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            gs[i][j] = -(qg[i][0] * q[0][j] + qg[i][1] * q[1][j]);
        }
    }
    [gs[0][0], gs[0][1] + gs[1][0], gs[1][1]]
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}
