//! Gaussian primitives, clouds, cameras and the covariance / projection math
//! shared by the rasterizer, the reconstruction branches and the motion fields.
//!
//! Parameters are stored unconstrained: log-scale, opacity logit and a raw
//! (unnormalized) quaternion in `(w, x, y, z)` order. Constraints are applied
//! where the values are used.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Default screen-space low-pass floor added to every projected covariance, in px².
pub const LOW_PASS: f64 = 0.3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which reconstruction branch produced a primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Visible,
    Occluded,
}

impl Branch {
    pub fn as_u8(self) -> u8 {
        match self {
            Branch::Visible => 0,
            Branch::Occluded => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Branch::Visible),
            1 => Some(Branch::Occluded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    pub scale_log: [f64; 3],
    /// Raw quaternion `(w, x, y, z)`.
    pub rot: [f64; 4],
    pub opacity_logit: f64,
    pub feat: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.scale_log.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(self.scale_log, self.rot)
    }
}

/// Ordered primitive collection stored as flat per-attribute arrays.
///
/// Row `i` of every array belongs to primitive `i`; the order is the order of
/// insertion and is preserved by every operation in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    feat_dim: usize,
    pub(crate) mu: Vec<f64>,
    pub(crate) scale_log: Vec<f64>,
    pub(crate) rot: Vec<f64>,
    pub(crate) opacity_logit: Vec<f64>,
    pub(crate) feat: Vec<f64>,
    pub(crate) tags: Vec<Branch>,
}

impl GaussianCloud {
    pub fn new(feat_dim: usize) -> Self {
        assert!(feat_dim > 0, "feature dimension must be positive");
        Self {
            feat_dim,
            mu: Vec::new(),
            scale_log: Vec::new(),
            rot: Vec::new(),
            opacity_logit: Vec::new(),
            feat: Vec::new(),
            tags: Vec::new(),
        }
    }

    /// Builds a cloud from flat row-major attribute arrays.
    pub fn from_arrays(
        feat_dim: usize,
        mu: Vec<f64>,
        scale_log: Vec<f64>,
        rot: Vec<f64>,
        opacity_logit: Vec<f64>,
        feat: Vec<f64>,
        tags: Vec<Branch>,
    ) -> Result<Self> {
        let n = tags.len();
        let check = |what: &'static str, len: usize, per: usize| {
            if len != n * per {
                Err(Error::Dimension {
                    what,
                    expected: n * per,
                    got: len,
                })
            } else {
                Ok(())
            }
        };
        if feat_dim == 0 {
            return Err(Error::Contract("feature dimension must be positive".into()));
        }
        check("mu", mu.len(), 3)?;
        check("scale_log", scale_log.len(), 3)?;
        check("rot", rot.len(), 4)?;
        check("opacity_logit", opacity_logit.len(), 1)?;
        check("feat", feat.len(), feat_dim)?;
        Ok(Self {
            feat_dim,
            mu,
            scale_log,
            rot,
            opacity_logit,
            feat,
            tags,
        })
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn push(&mut self, prim: &GaussianPrimitive, tag: Branch) -> Result<()> {
        if prim.feat.len() != self.feat_dim {
            return Err(Error::Dimension {
                what: "primitive feature",
                expected: self.feat_dim,
                got: prim.feat.len(),
            });
        }
        self.mu.extend_from_slice(&prim.mu);
        self.scale_log.extend_from_slice(&prim.scale_log);
        self.rot.extend_from_slice(&prim.rot);
        self.opacity_logit.push(prim.opacity_logit);
        self.feat.extend_from_slice(&prim.feat);
        self.tags.push(tag);
        Ok(())
    }

    pub fn get(&self, i: usize) -> GaussianPrimitive {
        let z = self.feat_dim;
        GaussianPrimitive {
            mu: self.mu(i),
            scale_log: [
                self.scale_log[3 * i],
                self.scale_log[3 * i + 1],
                self.scale_log[3 * i + 2],
            ],
            rot: [
                self.rot[4 * i],
                self.rot[4 * i + 1],
                self.rot[4 * i + 2],
                self.rot[4 * i + 3],
            ],
            opacity_logit: self.opacity_logit[i],
            feat: self.feat[z * i..z * (i + 1)].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (GaussianPrimitive, Branch)> + '_ {
        (0..self.len()).map(move |i| (self.get(i), self.tags[i]))
    }

    #[inline]
    pub fn mu(&self, i: usize) -> [f64; 3] {
        [self.mu[3 * i], self.mu[3 * i + 1], self.mu[3 * i + 2]]
    }

    pub fn tag(&self, i: usize) -> Branch {
        self.tags[i]
    }

    pub fn tags(&self) -> &[Branch] {
        &self.tags
    }

    pub fn mu_flat(&self) -> &[f64] {
        &self.mu
    }
    pub fn scale_log_flat(&self) -> &[f64] {
        &self.scale_log
    }
    pub fn rot_flat(&self) -> &[f64] {
        &self.rot
    }
    pub fn opacity_logit_flat(&self) -> &[f64] {
        &self.opacity_logit
    }
    pub fn feat_flat(&self) -> &[f64] {
        &self.feat
    }

    pub fn mu_flat_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }
    pub fn scale_log_flat_mut(&mut self) -> &mut [f64] {
        &mut self.scale_log
    }
    pub fn rot_flat_mut(&mut self) -> &mut [f64] {
        &mut self.rot
    }
    pub fn opacity_logit_flat_mut(&mut self) -> &mut [f64] {
        &mut self.opacity_logit
    }
    pub fn feat_flat_mut(&mut self) -> &mut [f64] {
        &mut self.feat
    }

    /// Indices of primitives carrying `tag`, in cloud order.
    pub fn indices_of(&self, tag: Branch) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    /// Sub-cloud made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> GaussianCloud {
        let z = self.feat_dim;
        let mut out = GaussianCloud::new(z);
        for &i in rows {
            out.mu.extend_from_slice(&self.mu[3 * i..3 * i + 3]);
            out.scale_log.extend_from_slice(&self.scale_log[3 * i..3 * i + 3]);
            out.rot.extend_from_slice(&self.rot[4 * i..4 * i + 4]);
            out.opacity_logit.push(self.opacity_logit[i]);
            out.feat.extend_from_slice(&self.feat[z * i..z * (i + 1)]);
            out.tags.push(self.tags[i]);
        }
        out
    }

    /// Multiplies every feature vector by `c`.
    pub fn scale_features(&mut self, c: f64) {
        self.feat.iter_mut().for_each(|f| *f *= c);
    }
}

/// Pinhole camera: `x_cam = R x_world + t`, camera looks down +z, image y grows downward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).amax() > 1e-6 {
            return Err(Error::Contract("camera rotation is not orthonormal".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Contract(format!(
                "invalid clip range near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("empty image size".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that maps to image-up.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let translation = -(rotation * eye);
        Self {
            rotation,
            translation,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: 0.1,
            far: 100.0,
        }
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates and depth of a world point; `None` when outside the clip range.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let t = self.to_camera(p);
        if t.z <= self.near || t.z >= self.far {
            return None;
        }
        Some((
            Vector2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy),
            t.z,
        ))
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotmat(rot: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = rot.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    let [w, x, y, z] = rot.map(|v| v / n);
    Ok(rotmat_unit(w, x, y, z))
}

#[inline]
pub(crate) fn rotmat_unit(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R diag(exp(scale_log))² Rᵀ`.
pub fn build_covariance(scale_log: [f64; 3], rot: [f64; 4]) -> Result<Matrix3<f64>> {
    let r = quat_to_rotmat(rot)?;
    let s = Vector3::from(scale_log.map(f64::exp));
    let m = r * Matrix3::from_diagonal(&s);
    Ok(m * m.transpose())
}

/// Unnormalized Gaussian basis `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn evaluate_gaussian(x: [f64; 3], mu: [f64; 3], sigma: &Matrix3<f64>) -> Result<f64> {
    let inv = sigma.try_inverse().ok_or(Error::SingularCovariance)?;
    if sigma.determinant().abs() < 1e-300 {
        return Err(Error::SingularCovariance);
    }
    let d = Vector3::from(x) - Vector3::from(mu);
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// Screen-space footprint of a primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// First-order EWA projection; `None` when the mean lies outside `(near, far)`.
pub fn project_gaussian(
    prim: &GaussianPrimitive,
    cam: &CameraPose,
    low_pass: f64,
) -> Result<Option<ProjectedGaussian>> {
    let sigma = prim.covariance()?;
    Ok(project_mean_cov(&Vector3::from(prim.mu), &sigma, cam, low_pass))
}

pub(crate) fn project_mean_cov(
    mu: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    cam: &CameraPose,
    low_pass: f64,
) -> Option<ProjectedGaussian> {
    let t = cam.to_camera(mu);
    if t.z <= cam.near || t.z >= cam.far {
        return None;
    }
    let iz = 1.0 / t.z;
    let j = nalgebra::Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    );
    let tw = j * cam.rotation;
    let cov = tw * sigma * tw.transpose() + Matrix2::identity() * low_pass;
    Some(ProjectedGaussian {
        mean2d: Vector2::new(cam.fx * t.x * iz + cam.cx, cam.fy * t.y * iz + cam.cy),
        cov2d: cov,
        depth: t.z,
    })
}

/// Concatenates two clouds, visible rows first, keeping each primitive's tag.
pub fn merge_clouds(vis: &GaussianCloud, occ: &GaussianCloud) -> Result<GaussianCloud> {
    if vis.feat_dim != occ.feat_dim {
        return Err(Error::Dimension {
            what: "merge feature dimension",
            expected: vis.feat_dim,
            got: occ.feat_dim,
        });
    }
    let mut out = vis.clone();
    out.mu.extend_from_slice(&occ.mu);
    out.scale_log.extend_from_slice(&occ.scale_log);
    out.rot.extend_from_slice(&occ.rot);
    out.opacity_logit.extend_from_slice(&occ.opacity_logit);
    out.feat.extend_from_slice(&occ.feat);
    out.tags.extend_from_slice(&occ.tags);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.1 {
                return q;
            }
        }
    }

    #[test]
    fn identity_and_half_turn_quaternions() {
        let r = quat_to_rotmat([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r = quat_to_rotmat([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(r, Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
    }

    #[test]
    fn zero_quaternion_is_degenerate() {
        assert!(matches!(
            quat_to_rotmat([0.0; 4]),
            Err(Error::DegenerateRotation)
        ));
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = quat_to_rotmat(random_quat(&mut rng)).unwrap();
            let e = (r.transpose() * r - Matrix3::identity()).amax();
            assert!(e < 1e-12, "orthonormality error {e}");
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_examples() {
        let s = build_covariance([0.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, Matrix3::identity());
        let s = build_covariance([2f64.ln(), 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(s, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-14);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let sl: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
            let s = build_covariance(sl, random_quat(&mut rng)).unwrap();
            let mut eig: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = sl.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9 * b.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn density_examples() {
        let id = Matrix3::identity();
        assert_eq!(evaluate_gaussian([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], &id).unwrap(), 1.0);
        let v = evaluate_gaussian([0.0, 1.0, 0.0], [0.0; 3], &id).unwrap();
        assert_relative_eq!(v, (-0.5f64).exp(), epsilon = 1e-15);
        assert!(matches!(
            evaluate_gaussian([0.0; 3], [0.0; 3], &Matrix3::zeros()),
            Err(Error::SingularCovariance)
        ));
    }

    #[test]
    fn density_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let sl: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let s = build_covariance(sl, random_quat(&mut rng)).unwrap();
            let x: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let mu: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            // adjugate / determinant
            let a = s;
            let cof = |r0: usize, r1: usize, c0: usize, c1: usize| a[(r0, c0)] * a[(r1, c1)] - a[(r0, c1)] * a[(r1, c0)];
            let det = a[(0, 0)] * cof(1, 2, 1, 2) - a[(0, 1)] * cof(1, 2, 0, 2) + a[(0, 2)] * cof(1, 2, 0, 1);
            let inv = [
                [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
                [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
                [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
            ];
            let d = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]];
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += d[i] * inv[i][j] * d[j];
                }
            }
            let want = (-0.5 * q).exp();
            let got = evaluate_gaussian(x, mu, &s).unwrap();
            assert!((got - want).abs() <= 1e-10 * want.max(1e-300), "{got} vs {want}");
        }
    }

    fn axis_camera() -> CameraPose {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
            near: 0.1,
            far: 100.0,
        }
    }

    fn prim_at(mu: [f64; 3], scale_log: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            mu,
            scale_log: [scale_log; 3],
            rot: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            feat: vec![0.0; 3],
        }
    }

    #[test]
    fn projection_on_axis() {
        let cam = axis_camera();
        let p = project_gaussian(&prim_at([0.0, 0.0, 1.0], -3.0), &cam, LOW_PASS)
            .unwrap()
            .unwrap();
        assert_eq!(p.mean2d, Vector2::new(64.0, 64.0));
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn projection_isotropic_pinhole_scaling() {
        let cam = axis_camera();
        for &(sigma, d) in &[(0.01, 1.0), (0.05, 2.5), (0.2, 7.0)] {
            let prim = prim_at([0.0, 0.0, d], f64::ln(sigma));
            let p = project_gaussian(&prim, &cam, LOW_PASS).unwrap().unwrap();
            let want = (cam.fx * sigma / d).powi(2) + LOW_PASS;
            assert_relative_eq!(p.cov2d[(0, 0)], want, max_relative = 1e-12);
            assert_relative_eq!(p.cov2d[(1, 1)], want, max_relative = 1e-12);
            assert!(p.cov2d[(0, 1)].abs() < 1e-15);
        }
    }

    #[test]
    fn projection_culls_behind_near_plane() {
        let cam = axis_camera();
        assert!(project_gaussian(&prim_at([0.0, 0.0, 0.05], 0.0), &cam, LOW_PASS)
            .unwrap()
            .is_none());
        assert!(project_gaussian(&prim_at([0.0, 0.0, -3.0], 0.0), &cam, LOW_PASS)
            .unwrap()
            .is_none());
    }

    fn cloud_of(n: usize, z: usize, tag: Branch) -> GaussianCloud {
        let mut c = GaussianCloud::new(z);
        let mut p = prim_at([0.0; 3], 0.0);
        p.feat = vec![0.5; z];
        for i in 0..n {
            p.mu[0] = i as f64;
            c.push(&p, tag).unwrap();
        }
        c
    }

    #[test]
    fn merge_full_budget() {
        let vis = cloud_of(175_232, 4, Branch::Visible);
        let occ = cloud_of(1_920, 4, Branch::Occluded);
        let out = merge_clouds(&vis, &occ).unwrap();
        assert_eq!(out.len(), 177_152);
        assert!(out.tags()[..175_232].iter().all(|&t| t == Branch::Visible));
        assert!(out.tags()[175_232..].iter().all(|&t| t == Branch::Occluded));
    }

    #[test]
    fn merge_empty_and_mismatch() {
        let vis = cloud_of(5, 3, Branch::Visible);
        assert_eq!(merge_clouds(&vis, &GaussianCloud::new(3)).unwrap(), vis);
        assert!(matches!(
            merge_clouds(&vis, &cloud_of(1, 2, Branch::Occluded)),
            Err(Error::Dimension { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn quat() -> impl Strategy<Value = [f64; 4]> {
            prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| {
                q.iter().map(|v| v * v).sum::<f64>() > 1e-3
            })
        }

        proptest! {
            #[test]
            fn covariance_symmetric_positive_definite(sl in prop::array::uniform3(-2.0f64..2.0), q in quat()) {
                let s = build_covariance(sl, q).unwrap();
                prop_assert!((s - s.transpose()).amax() < 1e-12);
                prop_assert!(s.cholesky().is_some());
            }

            #[test]
            fn double_cover(q in quat()) {
                let neg = q.map(|v| -v);
                prop_assert_eq!(quat_to_rotmat(q).unwrap(), quat_to_rotmat(neg).unwrap());
            }

            #[test]
            fn density_rotation_invariant(
                sl in prop::array::uniform3(-1.0f64..1.0),
                q in quat(), qr in quat(),
                x in prop::array::uniform3(-2.0f64..2.0),
                mu in prop::array::uniform3(-2.0f64..2.0),
            ) {
                let s = build_covariance(sl, q).unwrap();
                let r = quat_to_rotmat(qr).unwrap();
                let a = evaluate_gaussian(x, mu, &s).unwrap();
                let rx = r * Vector3::from(x);
                let rmu = r * Vector3::from(mu);
                let b = evaluate_gaussian(rx.into(), rmu.into(), &(r * s * r.transpose())).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12));
            }

            #[test]
            fn projected_depth_orders_like_camera_z(zs in prop::collection::vec(0.5f64..20.0, 2..20)) {
                let cam = CameraPose::look_at(
                    Vector3::new(0.3, -0.2, -4.0), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0),
                    80.0, 80.0, 64, 64);
                let mut pairs = Vec::new();
                for (i, &z) in zs.iter().enumerate() {
                    let prim = prim_at([0.1 * i as f64, -0.05 * i as f64, z - 4.0], -2.0);
                    let cz = cam.to_camera(&Vector3::from(prim.mu)).z;
                    if let Some(p) = project_gaussian(&prim, &cam, LOW_PASS).unwrap() {
                        pairs.push((cz, p.depth));
                    }
                }
                for a in &pairs {
                    for b in &pairs {
                        prop_assert_eq!(a.0 < b.0, a.1 < b.1);
                    }
                }
            }
        }
    }
}
