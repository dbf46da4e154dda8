//! EPnP initialization and Levenberg-Marquardt pose refinement.

use nalgebra::{
    DMatrix, DVector, Matrix3, Matrix6, Rotation3, SMatrix, SymmetricEigen, Vector2, Vector3,
    Vector6,
};

use super::{CameraIntrinsics, FacialModel, GeometryError, RigidPose};

/// Result of [`estimate_head_pose`].
#[derive(Clone, Copy, Debug)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    /// Root-mean-square reprojection error, pixels.
    pub rms_error: f64,
    /// False when refinement failed and `pose` is the EPnP initialization.
    pub refined: bool,
}

/// Projects head-frame points through `pose` and `cam`.
pub fn project(
    pose: &RigidPose,
    cam: &CameraIntrinsics,
    points: &[Vector3<f64>],
) -> Vec<Vector2<f64>> {
    points
        .iter()
        .map(|p| cam.project(&pose.transform(p)))
        .collect()
}

fn rms(
    pose: &RigidPose,
    cam: &CameraIntrinsics,
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
) -> f64 {
    let se: f64 = world
        .iter()
        .zip(image)
        .map(|(p, u)| {
            let c = pose.transform(p);
            if c.z <= 0.0 {
                return f64::INFINITY;
            }
            (cam.project(&c) - u).norm_squared()
        })
        .sum();
    (se / world.len() as f64).sqrt()
}

/// Estimates the head pose from the six model landmarks and their observed
/// image positions.
pub fn estimate_head_pose(
    model: &FacialModel,
    observed: &[Vector2<f64>; 6],
    cam: &CameraIntrinsics,
) -> Result<PoseEstimate, GeometryError> {
    solve_pnp(&model.points, observed, cam)
}

pub(crate) fn solve_pnp(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    cam: &CameraIntrinsics,
) -> Result<PoseEstimate, GeometryError> {
    if world.len() != image.len() || world.len() < 4 {
        return Err(GeometryError::InvalidParameter(format!(
            "need at least 4 matching correspondences, got {} and {}",
            world.len(),
            image.len()
        )));
    }
    if image.iter().any(|u| !u.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::NonFinite("observed points"));
    }
    if world.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::NonFinite("model points"));
    }
    check_not_collinear(image)?;

    let init = epnp(world, image, cam)?;
    let init_err = rms(&init, cam, world, image);
    match refine(init, world, image, cam) {
        Some(pose) => {
            let err = rms(&pose, cam, world, image);
            Ok(PoseEstimate {
                pose,
                rms_error: err,
                refined: true,
            })
        }
        None => {
            log::warn!("pose refinement diverged; returning EPnP initialization");
            Ok(PoseEstimate {
                pose: init,
                rms_error: init_err,
                refined: false,
            })
        }
    }
}

fn check_not_collinear(image: &[Vector2<f64>]) -> Result<(), GeometryError> {
    let n = image.len() as f64;
    let mean = image.iter().sum::<Vector2<f64>>() / n;
    let mut cov = nalgebra::Matrix2::zeros();
    for u in image {
        let d = u - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-10 * hi {
        return Err(GeometryError::Degenerate(
            "observed points are collinear".into(),
        ));
    }
    Ok(())
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Closed-form EPnP: four virtual control points, the null space of the
/// projection system, and the best of the N = 1, 2, 3 beta approximations
/// after Gauss-Newton polishing.
fn epnp(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    cam: &CameraIntrinsics,
) -> Result<RigidPose, GeometryError> {
    let n = world.len();
    let c0 = world.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p - c0;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let max_ev = eig.eigenvalues.max();
    if !(eig.eigenvalues.min() > 1e-12 * max_ev) {
        return Err(GeometryError::Degenerate(
            "model points are coplanar".into(),
        ));
    }
    let mut ctrl = [c0; 4];
    for k in 0..3 {
        ctrl[k + 1] = c0 + eig.eigenvectors.column(k) * eig.eigenvalues[k].sqrt();
    }

    let basis = Matrix3::from_columns(&[ctrl[1] - c0, ctrl[2] - c0, ctrl[3] - c0]);
    let basis_inv = basis
        .try_inverse()
        .ok_or_else(|| GeometryError::Degenerate("control points are degenerate".into()))?;
    let alphas: Vec<[f64; 4]> = world
        .iter()
        .map(|p| {
            let a = basis_inv * (p - c0);
            [1.0 - a.sum(), a.x, a.y, a.z]
        })
        .collect();

    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (a, u)) in alphas.iter().zip(image).enumerate() {
        for j in 0..4 {
            m[(2 * i, 3 * j)] = a[j] * cam.fx;
            m[(2 * i, 3 * j + 2)] = a[j] * (cam.cx - u.x);
            m[(2 * i + 1, 3 * j + 1)] = a[j] * cam.fy;
            m[(2 * i + 1, 3 * j + 2)] = a[j] * (cam.cy - u.y);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: Vec<DVector<f64>> = order[..4]
        .iter()
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();

    // distance constraints between control points
    let mut l = SMatrix::<f64, 6, 10>::zeros();
    let mut rho = SMatrix::<f64, 6, 1>::zeros();
    for (row, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: Vec<Vector3<f64>> = null
            .iter()
            .map(|v| {
                Vector3::new(
                    v[3 * a] - v[3 * b],
                    v[3 * a + 1] - v[3 * b + 1],
                    v[3 * a + 2] - v[3 * b + 2],
                )
            })
            .collect();
        let vals = [
            dv[0].dot(&dv[0]),
            2.0 * dv[0].dot(&dv[1]),
            dv[1].dot(&dv[1]),
            2.0 * dv[0].dot(&dv[2]),
            2.0 * dv[1].dot(&dv[2]),
            dv[2].dot(&dv[2]),
            2.0 * dv[0].dot(&dv[3]),
            2.0 * dv[1].dot(&dv[3]),
            2.0 * dv[2].dot(&dv[3]),
            dv[3].dot(&dv[3]),
        ];
        for (c, v) in vals.into_iter().enumerate() {
            l[(row, c)] = v;
        }
        rho[row] = (ctrl[a] - ctrl[b]).norm_squared();
    }

    let lsq = |cols: &[usize]| -> Option<DVector<f64>> {
        let mut sub = DMatrix::<f64>::zeros(6, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            sub.set_column(j, &l.column(c));
        }
        let rhs = DVector::from_column_slice(rho.as_slice());
        sub.svd(true, true).solve(&rhs, 1e-14).ok()
    };

    let mut candidates: Vec<[f64; 4]> = Vec::new();
    if let Some(b) = lsq(&[0, 1, 3, 6]) {
        let s = if b[0] < 0.0 { -1.0 } else { 1.0 };
        let b0 = (s * b[0]).sqrt();
        if b0 > 0.0 {
            candidates.push([b0, s * b[1] / b0, s * b[2] / b0, s * b[3] / b0]);
        }
    }
    if let Some(b) = lsq(&[0, 1, 2]) {
        let (mut b0, b1) = if b[0] < 0.0 {
            (
                (-b[0]).sqrt(),
                if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 },
            )
        } else {
            (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
        };
        if b[1] < 0.0 {
            b0 = -b0;
        }
        candidates.push([b0, b1, 0.0, 0.0]);
    }
    if let Some(b) = lsq(&[0, 1, 2, 3, 4]) {
        let (mut b0, b1) = if b[0] < 0.0 {
            (
                (-b[0]).sqrt(),
                if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 },
            )
        } else {
            (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
        };
        if b[1] < 0.0 {
            b0 = -b0;
        }
        let b2 = if b0 != 0.0 { b[3] / b0 } else { 0.0 };
        candidates.push([b0, b1, b2, 0.0]);
    }

    let mut best: Option<(f64, RigidPose)> = None;
    for betas in candidates {
        let betas = polish_betas(&l, &rho, betas);
        let Some(pose) = pose_from_betas(&null, &betas, &alphas, world) else {
            continue;
        };
        let err = rms(&pose, cam, world, image);
        if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| GeometryError::Degenerate("no EPnP solution in front of the camera".into()))
}

fn polish_betas(l: &SMatrix<f64, 6, 10>, rho: &SMatrix<f64, 6, 1>, mut b: [f64; 4]) -> [f64; 4] {
    for _ in 0..10 {
        let prod = [
            b[0] * b[0],
            b[0] * b[1],
            b[1] * b[1],
            b[0] * b[2],
            b[1] * b[2],
            b[2] * b[2],
            b[0] * b[3],
            b[1] * b[3],
            b[2] * b[3],
            b[3] * b[3],
        ];
        let mut jac = SMatrix::<f64, 6, 4>::zeros();
        let mut res = SMatrix::<f64, 6, 1>::zeros();
        for i in 0..6 {
            let r = l.row(i);
            jac[(i, 0)] = 2.0 * r[0] * b[0] + r[1] * b[1] + r[3] * b[2] + r[6] * b[3];
            jac[(i, 1)] = r[1] * b[0] + 2.0 * r[2] * b[1] + r[4] * b[2] + r[7] * b[3];
            jac[(i, 2)] = r[3] * b[0] + r[4] * b[1] + 2.0 * r[5] * b[2] + r[8] * b[3];
            jac[(i, 3)] = r[6] * b[0] + r[7] * b[1] + r[8] * b[2] + 2.0 * r[9] * b[3];
            res[i] = rho[i] - (0..10).map(|k| r[k] * prod[k]).sum::<f64>();
        }
        let Ok(step) = jac.svd(true, true).solve(&res, 1e-14) else {
            break;
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        for k in 0..4 {
            b[k] += step[k];
        }
        if step.norm() < 1e-14 * (1.0 + b.iter().map(|v| v * v).sum::<f64>().sqrt()) {
            break;
        }
    }
    b
}

fn pose_from_betas(
    null: &[DVector<f64>],
    betas: &[f64; 4],
    alphas: &[[f64; 4]],
    world: &[Vector3<f64>],
) -> Option<RigidPose> {
    let mut ctrl = [Vector3::zeros(); 4];
    for (j, c) in ctrl.iter_mut().enumerate() {
        for (v, b) in null.iter().zip(betas) {
            *c += Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b;
        }
    }
    let mut cam_pts: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| ctrl[0] * a[0] + ctrl[1] * a[1] + ctrl[2] * a[2] + ctrl[3] * a[3])
        .collect();
    if cam_pts[0].z < 0.0 {
        for p in &mut cam_pts {
            *p = -*p;
        }
    }
    kabsch(world, &cam_pts)
}

/// Least-squares rigid transform taking `src` onto `dst`.
fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidPose> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    if !r.iter().all(|v| v.is_finite()) {
        return None;
    }
    let rotation = Rotation3::from_matrix_unchecked(r);
    Some(RigidPose {
        rotation,
        translation: cd - rotation * cs,
    })
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Levenberg-Marquardt on reprojection residuals with a left-multiplied
/// rotation-vector update. Returns `None` if the iteration leaves the valid
/// region or produces non-finite values.
fn refine(
    init: RigidPose,
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    cam: &CameraIntrinsics,
) -> Option<RigidPose> {
    let cost = |pose: &RigidPose| -> f64 {
        let mut c = 0.0;
        for (p, u) in world.iter().zip(image) {
            let q = pose.transform(p);
            if q.z <= 0.0 {
                return f64::INFINITY;
            }
            c += (cam.project(&q) - u).norm_squared();
        }
        c
    };
    let mut pose = init;
    let mut current = cost(&pose);
    if !current.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, u) in world.iter().zip(image) {
            let rp = pose.rotation * p;
            let q = rp + pose.translation;
            let r = cam.project(&q) - u;
            let iz = 1.0 / q.z;
            let dproj = SMatrix::<f64, 2, 3>::new(
                cam.fx * iz,
                0.0,
                -cam.fx * q.x * iz * iz,
                0.0,
                cam.fy * iz,
                -cam.fy * q.y * iz * iz,
            );
            let mut dq = SMatrix::<f64, 3, 6>::zeros();
            dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rp)));
            dq.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&Matrix3::identity());
            let j = dproj * dq;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.norm() < 1e-15 {
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let cand = RigidPose {
                rotation: Rotation3::new(omega) * pose.rotation,
                translation: pose.translation + Vector3::new(step[3], step[4], step[5]),
            };
            let c = cost(&cand);
            if c.is_finite() && c <= current {
                let small = step.norm() < 1e-13 * (1.0 + pose.translation.norm());
                pose = cand;
                let gain = current - c;
                current = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !small && gain > 0.0;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let r = pose.rotation.matrix();
    if !current.is_finite() || !r.iter().all(|v| v.is_finite()) {
        return None;
    }
    // re-orthonormalize accumulated updates
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    pose.rotation = Rotation3::from_matrix_unchecked(u * vt);
    Some(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{head_rotation, rotation_angle_between, rotation_defect};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(960.0, 960.0, 640.0, 360.0).unwrap()
    }

    fn observe(pose: &RigidPose) -> [Vector2<f64>; 6] {
        let model = FacialModel::generic();
        let v = project(pose, &cam(), &model.points);
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }

    #[test]
    fn frontal_pose_recovered() {
        let truth = RigidPose {
            rotation: Rotation3::identity(),
            translation: Vector3::new(0.0, 0.0, 600.0),
        };
        let est = estimate_head_pose(&FacialModel::generic(), &observe(&truth), &cam()).unwrap();
        assert!(est.refined);
        assert!(rotation_angle_between(&est.pose.rotation, &truth.rotation).to_degrees() < 0.1);
        assert!((est.pose.translation - truth.translation).norm() < 0.1);
        assert!(rotation_defect(est.pose.rotation.matrix()) < 1e-9);
    }

    #[test]
    fn yaw_twenty_degrees() {
        let truth = RigidPose {
            rotation: head_rotation(20f64.to_radians(), 0.0),
            translation: Vector3::new(30.0, -20.0, 550.0),
        };
        let est = estimate_head_pose(&FacialModel::generic(), &observe(&truth), &cam()).unwrap();
        let h = crate::geometry::head_angle_vector(est.pose.rotation.matrix()).unwrap();
        assert!(
            (h[0].to_degrees() - 20.0).abs() < 0.1,
            "yaw {}",
            h[0].to_degrees()
        );
        assert!(h[1].to_degrees().abs() < 0.1);
    }

    #[test]
    fn collinear_observations_rejected() {
        let pts =
            [0.0, 1.0, 2.0, 3.0, 4.0, 5.0].map(|t| Vector2::new(100.0 + 10.0 * t, 50.0 + 5.0 * t));
        let err = estimate_head_pose(&FacialModel::generic(), &pts, &cam()).unwrap_err();
        assert!(matches!(err, GeometryError::Degenerate(_)));
    }

    #[test]
    fn non_finite_rejected() {
        let mut pts = observe(&RigidPose {
            rotation: Rotation3::identity(),
            translation: Vector3::new(0.0, 0.0, 600.0),
        });
        pts[3].x = f64::NAN;
        assert!(matches!(
            estimate_head_pose(&FacialModel::generic(), &pts, &cam()),
            Err(GeometryError::NonFinite(_))
        ));
    }
}
