//! Sparse nonlinear least squares by Levenberg-Marquardt, with Schur
//! elimination of landmark blocks, plus the concrete problems built on it:
//! motion-only BA, bundle adjustment and Sim(3) essential-graph optimization.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, Matrix3};
use thiserror::Error;

use crate::geometry::{
    sim3_left_jacobian, skew, CameraIntrinsics, SE3Pose, Sim3Transform, TangentVector7, Vec2,
    Vec3,
};
use crate::map::{KfId, MpId};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("normal equations singular after damping retries")]
    SingularNormalEquations,
    #[error("motion-only BA needs at least {needed} matches, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("pose graph is disconnected")]
    DisconnectedGraph,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Levenberg-Marquardt knobs. Damping multiplies the Hessian diagonal.
#[derive(Debug, Clone, Copy)]
pub struct LMSettings {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub absolute_tolerance: f64,
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
}

impl Default for LMSettings {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            absolute_tolerance: 1e-12,
            relative_tolerance: 1e-9,
            gradient_tolerance: 1e-10,
        }
    }
}

impl LMSettings {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizationOutcome {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: TerminationReason,
}

/// Huber loss on the squared residual norm; `threshold` in residual units.
#[derive(Debug, Clone, Copy)]
pub struct HuberLoss {
    pub threshold: f64,
}

/// 95% chi-square bound for 2-dof residuals, the standard reprojection gate.
pub const CHI2_2D: f64 = 5.991;

impl HuberLoss {
    /// Robust cost given the squared residual norm.
    pub fn cost(&self, squared_norm: f64) -> f64 {
        let t2 = self.threshold * self.threshold;
        if squared_norm <= t2 {
            squared_norm
        } else {
            2.0 * self.threshold * squared_norm.sqrt() - t2
        }
    }

    /// Scaling applied to residual and Jacobian (sqrt of the IRLS weight).
    pub fn sqrt_weight(&self, squared_norm: f64) -> f64 {
        let t2 = self.threshold * self.threshold;
        if squared_norm <= t2 {
            1.0
        } else {
            (self.threshold / squared_norm.sqrt()).sqrt()
        }
    }
}

/// A parameter block living on its manifold.
#[derive(Debug, Clone)]
pub enum ParamValue {
    Se3(SE3Pose),
    Sim3(Sim3Transform),
    Point(Vec3),
    Vector(DVector<f64>),
}

impl ParamValue {
    pub fn tangent_dim(&self) -> usize {
        match self {
            ParamValue::Se3(_) => 6,
            ParamValue::Sim3(_) => 7,
            ParamValue::Point(_) => 3,
            ParamValue::Vector(v) => v.len(),
        }
    }

    /// Retraction: SE(3) uses rotation exp plus additive translation, Sim(3)
    /// uses the full exponential left update, Euclidean blocks add.
    pub fn retract(&mut self, delta: &[f64]) {
        match self {
            ParamValue::Se3(p) => {
                let omega = Vec3::new(delta[0], delta[1], delta[2]);
                let dt = Vec3::new(delta[3], delta[4], delta[5]);
                let rot = nalgebra::UnitQuaternion::from_scaled_axis(omega) * p.rotation;
                *p = SE3Pose::new(rot, p.translation + dt);
            }
            ParamValue::Sim3(t) => {
                let mut v = TangentVector7::zeros();
                for i in 0..7 {
                    v[i] = delta[i];
                }
                *t = Sim3Transform::exp(&v).compose(t);
            }
            ParamValue::Point(p) => {
                *p += Vec3::new(delta[0], delta[1], delta[2]);
            }
            ParamValue::Vector(v) => {
                for (x, d) in v.iter_mut().zip(delta.iter()) {
                    *x += d;
                }
            }
        }
    }

    pub fn as_se3(&self) -> &SE3Pose {
        match self {
            ParamValue::Se3(p) => p,
            _ => panic!("parameter block is not SE3"),
        }
    }

    pub fn as_sim3(&self) -> &Sim3Transform {
        match self {
            ParamValue::Sim3(t) => t,
            _ => panic!("parameter block is not Sim3"),
        }
    }

    pub fn as_point(&self) -> &Vec3 {
        match self {
            ParamValue::Point(p) => p,
            _ => panic!("parameter block is not a point"),
        }
    }
}

/// One residual block. Jacobians are with respect to each parameter's
/// retraction at delta = 0, in the order of `params()`. At most one
/// referenced block may be a `Point` (it gets Schur-eliminated).
pub trait Residual {
    fn dim(&self) -> usize;
    fn params(&self) -> &[usize];
    fn eval(
        &self,
        values: &[&ParamValue],
        residual: &mut DVector<f64>,
        jacobians: Option<&mut [DMatrix<f64>]>,
    );
    fn loss(&self) -> Option<HuberLoss> {
        None
    }
}

struct Block {
    value: ParamValue,
    fixed: bool,
}

/// A nonlinear least-squares problem over manifold parameter blocks.
#[derive(Default)]
pub struct Problem {
    blocks: Vec<Block>,
    residuals: Vec<Box<dyn Residual>>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, value: ParamValue) -> usize {
        self.blocks.push(Block { value, fixed: false });
        self.blocks.len() - 1
    }

    pub fn set_fixed(&mut self, id: usize, fixed: bool) {
        self.blocks[id].fixed = fixed;
    }

    pub fn add_residual(&mut self, r: Box<dyn Residual>) {
        debug_assert!(
            r.params()
                .iter()
                .filter(|&&p| matches!(self.blocks[p].value, ParamValue::Point(_)))
                .count()
                <= 1,
            "a residual may reference at most one point block"
        );
        self.residuals.push(r);
    }

    pub fn value(&self, id: usize) -> &ParamValue {
        &self.blocks[id].value
    }

    /// Total robustified cost at the current state.
    pub fn cost(&self) -> f64 {
        let mut total = 0.0;
        for res in &self.residuals {
            let values: Vec<&ParamValue> =
                res.params().iter().map(|&p| &self.blocks[p].value).collect();
            let mut r = DVector::zeros(res.dim());
            res.eval(&values, &mut r, None);
            let sq = r.norm_squared();
            total += res.loss().map_or(sq, |l| l.cost(sq));
        }
        total
    }

    /// Runs Levenberg-Marquardt. Accepted steps strictly decrease the
    /// robustified cost; parameter blocks are updated in place. On
    /// [`OptimError::SingularNormalEquations`] the prior state is kept.
    pub fn solve(&mut self, settings: &LMSettings) -> Result<OptimizationOutcome, OptimError> {
        if self.residuals.is_empty() {
            return Err(OptimError::InvalidProblem("no residuals".into()));
        }
        let layout = Layout::build(&self.blocks);
        let initial_cost = self.cost();
        if layout.cam_dim == 0 && layout.points.is_empty() {
            return Ok(OptimizationOutcome {
                initial_cost,
                final_cost: initial_cost,
                iterations: 0,
                termination: TerminationReason::Converged,
            });
        }

        let mut lambda = settings.initial_lambda;
        let mut cost = initial_cost;
        let mut iterations = 0;
        let mut termination = TerminationReason::MaxIterations;

        'outer: for _ in 0..settings.max_iterations {
            let system = self.assemble(&layout);
            if system.gradient_inf_norm < settings.gradient_tolerance {
                termination = TerminationReason::Converged;
                break;
            }
            // Damping retries: raise lambda until the step solves and improves.
            let mut accepted = false;
            for _ in 0..40 {
                let Some((delta_c, delta_p)) = system.solve_damped(lambda) else {
                    lambda *= settings.lambda_up;
                    continue;
                };
                let saved: Vec<ParamValue> =
                    self.blocks.iter().map(|b| b.value.clone()).collect();
                self.apply_step(&layout, &delta_c, &delta_p);
                let new_cost = self.cost();
                if new_cost < cost {
                    let decrease = cost - new_cost;
                    cost = new_cost;
                    lambda = (lambda * settings.lambda_down).max(1e-12);
                    iterations += 1;
                    accepted = true;
                    if decrease < settings.absolute_tolerance
                        || decrease < settings.relative_tolerance * cost.max(1e-300)
                    {
                        termination = TerminationReason::Converged;
                        break 'outer;
                    }
                    break;
                }
                // Revert and retry with stronger damping.
                for (block, value) in self.blocks.iter_mut().zip(saved) {
                    block.value = value;
                }
                lambda *= settings.lambda_up;
                if lambda > 1e14 {
                    termination = TerminationReason::Stalled;
                    break 'outer;
                }
            }
            if !accepted {
                if iterations == 0 {
                    return Err(OptimError::SingularNormalEquations);
                }
                termination = TerminationReason::Stalled;
                break;
            }
        }

        Ok(OptimizationOutcome { initial_cost, final_cost: cost, iterations, termination })
    }

    fn apply_step(&mut self, layout: &Layout, delta_c: &DVector<f64>, delta_p: &[Vec3]) {
        for (&block_id, &(offset, dim)) in &layout.cam_offsets {
            self.blocks[block_id].value.retract(&delta_c.as_slice()[offset..offset + dim]);
        }
        for (pi, &block_id) in layout.points.iter().enumerate() {
            let d = delta_p[pi];
            self.blocks[block_id].value.retract(&[d.x, d.y, d.z]);
        }
    }

    fn assemble(&self, layout: &Layout) -> LinearSystem {
        let nc = layout.cam_dim;
        let np = layout.points.len();
        let mut h_cc = DMatrix::<f64>::zeros(nc, nc);
        let mut g_c = DVector::<f64>::zeros(nc);
        let mut h_pp = vec![Matrix3::<f64>::zeros(); np];
        let mut g_p = vec![Vec3::zeros(); np];
        // point index -> (camera offset, dim) -> dim x 3 coupling block.
        // Ordered map: Schur accumulation below must be order-stable so runs
        // are bit-reproducible.
        let mut h_cp: Vec<BTreeMap<(usize, usize), DMatrix<f64>>> =
            (0..np).map(|_| BTreeMap::new()).collect();

        for res in &self.residuals {
            let params = res.params();
            let values: Vec<&ParamValue> =
                params.iter().map(|&p| &self.blocks[p].value).collect();
            let mut r = DVector::zeros(res.dim());
            let mut jacs: Vec<DMatrix<f64>> = params
                .iter()
                .map(|&p| DMatrix::zeros(res.dim(), self.blocks[p].value.tangent_dim()))
                .collect();
            res.eval(&values, &mut r, Some(&mut jacs));
            let w = res.loss().map_or(1.0, |l| l.sqrt_weight(r.norm_squared()));
            if w != 1.0 {
                r *= w;
                for j in &mut jacs {
                    *j *= w;
                }
            }

            // Split references into camera-side and (at most one) point block.
            let mut cams: Vec<(usize, usize, &DMatrix<f64>)> = Vec::new(); // (offset, dim, J)
            let mut point: Option<(usize, &DMatrix<f64>)> = None; // (point index, J)
            for (slot, &p) in params.iter().enumerate() {
                if self.blocks[p].fixed {
                    continue;
                }
                if let Some(&pi) = layout.point_index.get(&p) {
                    point = Some((pi, &jacs[slot]));
                } else {
                    let (offset, dim) = layout.cam_offsets[&p];
                    cams.push((offset, dim, &jacs[slot]));
                }
            }

            for (i, &(oi, di, ji)) in cams.iter().enumerate() {
                let jtr = ji.transpose() * &r;
                for k in 0..di {
                    g_c[oi + k] -= jtr[k];
                }
                // Diagonal block once; cross blocks mirrored.
                let h_ii = ji.transpose() * ji;
                for a in 0..di {
                    for b in 0..di {
                        h_cc[(oi + a, oi + b)] += h_ii[(a, b)];
                    }
                }
                for &(oj, dj, jj) in cams.iter().skip(i + 1) {
                    let h = ji.transpose() * jj;
                    for a in 0..di {
                        for b in 0..dj {
                            h_cc[(oi + a, oj + b)] += h[(a, b)];
                            h_cc[(oj + b, oi + a)] += h[(a, b)];
                        }
                    }
                }
            }
            if let Some((pi, jp)) = point {
                let jtr = jp.transpose() * &r;
                for k in 0..3 {
                    g_p[pi][k] -= jtr[k];
                }
                let h = jp.transpose() * jp;
                for a in 0..3 {
                    for b in 0..3 {
                        h_pp[pi][(a, b)] += h[(a, b)];
                    }
                }
                for &(oi, di, ji) in &cams {
                    let cross = ji.transpose() * jp; // di x 3
                    h_cp[pi]
                        .entry((oi, di))
                        .and_modify(|m| *m += &cross)
                        .or_insert(cross);
                }
            }
        }

        let mut gradient_inf_norm = g_c.amax();
        for g in &g_p {
            gradient_inf_norm = gradient_inf_norm.max(g.amax());
        }
        if nc == 0 {
            gradient_inf_norm = g_p.iter().map(|g| g.amax()).fold(0.0, f64::max);
        }
        LinearSystem { h_cc, g_c, h_pp, g_p, h_cp, gradient_inf_norm }
    }
}

struct Layout {
    /// block id -> (tangent offset, tangent dim) for non-point free blocks
    cam_offsets: BTreeMap<usize, (usize, usize)>,
    cam_dim: usize,
    /// free point block ids in order
    points: Vec<usize>,
    point_index: HashMap<usize, usize>,
}

impl Layout {
    fn build(blocks: &[Block]) -> Layout {
        let mut cam_offsets = BTreeMap::new();
        let mut cam_dim = 0;
        let mut points = Vec::new();
        let mut point_index = HashMap::new();
        for (id, b) in blocks.iter().enumerate() {
            if b.fixed {
                continue;
            }
            if matches!(b.value, ParamValue::Point(_)) {
                point_index.insert(id, points.len());
                points.push(id);
            } else {
                let dim = b.value.tangent_dim();
                cam_offsets.insert(id, (cam_dim, dim));
                cam_dim += dim;
            }
        }
        Layout { cam_offsets, cam_dim, points, point_index }
    }
}

struct LinearSystem {
    h_cc: DMatrix<f64>,
    g_c: DVector<f64>,
    h_pp: Vec<Matrix3<f64>>,
    g_p: Vec<Vec3>,
    h_cp: Vec<BTreeMap<(usize, usize), DMatrix<f64>>>,
    gradient_inf_norm: f64,
}

impl LinearSystem {
    /// Schur-reduced damped solve; returns None when the reduced system (or a
    /// landmark block) is not positive definite at this damping level.
    fn solve_damped(&self, lambda: f64) -> Option<(DVector<f64>, Vec<Vec3>)> {
        let nc = self.h_cc.nrows();
        let np = self.h_pp.len();

        let mut hpp_inv = Vec::with_capacity(np);
        for h in &self.h_pp {
            let mut d = *h;
            for i in 0..3 {
                d[(i, i)] += lambda * d[(i, i)].max(1e-12);
            }
            hpp_inv.push(d.try_inverse()?);
        }

        if nc == 0 {
            let mut delta_p = Vec::with_capacity(np);
            for (inv, g) in hpp_inv.iter().zip(&self.g_p) {
                delta_p.push(inv * g);
            }
            return Some((DVector::zeros(0), delta_p));
        }

        let mut reduced = self.h_cc.clone();
        for i in 0..nc {
            reduced[(i, i)] += lambda * reduced[(i, i)].max(1e-12);
        }
        let mut rhs = self.g_c.clone();
        for pi in 0..np {
            let inv = &hpp_inv[pi];
            let gp = &self.g_p[pi];
            let blocks: Vec<(&(usize, usize), &DMatrix<f64>)> = self.h_cp[pi].iter().collect();
            for (&(oi, di), a) in &blocks {
                let a_inv = *a * inv; // di x 3
                let contrib = &a_inv * gp;
                for k in 0..di {
                    rhs[oi + k] -= contrib[k];
                }
                for (&(oj, dj), b) in &blocks {
                    let m = &a_inv * b.transpose(); // di x dj
                    for r in 0..di {
                        for c in 0..dj {
                            reduced[(oi + r, oj + c)] -= m[(r, c)];
                        }
                    }
                }
            }
        }

        let chol = reduced.cholesky()?;
        let delta_c = chol.solve(&rhs);

        let mut delta_p = Vec::with_capacity(np);
        for pi in 0..np {
            let mut rhs_p = self.g_p[pi];
            for (&(oi, di), a) in &self.h_cp[pi] {
                // subtract Hpc * delta_c = A^T delta_c
                for r in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..di {
                        acc += a[(k, r)] * delta_c[oi + k];
                    }
                    rhs_p[r] -= acc;
                }
            }
            delta_p.push(hpp_inv[pi] * rhs_p);
        }
        Some((delta_c, delta_p))
    }
}

// ---------------------------------------------------------------------------
// Residual types
// ---------------------------------------------------------------------------

/// 2x3 Jacobian of the pinhole projection at a camera-frame point.
fn projection_jacobian(k: &CameraIntrinsics, p_cam: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let z = p_cam.z.max(1e-9);
    nalgebra::Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * p_cam.x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * p_cam.y / (z * z),
    )
}

fn project_clamped(k: &CameraIntrinsics, p_cam: &Vec3) -> Vec2 {
    let z = p_cam.z.max(1e-9);
    Vec2::new(k.fx * p_cam.x / z + k.cx, k.fy * p_cam.y / z + k.cy)
}

/// Reprojection of a variable point through a variable SE(3) pose.
pub struct ReprojectionResidual {
    params: [usize; 2], // [pose, point]
    pub pixel: Vec2,
    pub camera: CameraIntrinsics,
    pub huber: Option<HuberLoss>,
}

impl ReprojectionResidual {
    pub fn new(pose: usize, point: usize, pixel: Vec2, camera: CameraIntrinsics) -> Self {
        Self {
            params: [pose, point],
            pixel,
            camera,
            huber: Some(HuberLoss { threshold: CHI2_2D.sqrt() }),
        }
    }

    pub fn without_loss(mut self) -> Self {
        self.huber = None;
        self
    }
}

impl Residual for ReprojectionResidual {
    fn dim(&self) -> usize {
        2
    }

    fn params(&self) -> &[usize] {
        &self.params
    }

    fn eval(
        &self,
        values: &[&ParamValue],
        residual: &mut DVector<f64>,
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) {
        let pose = values[0].as_se3();
        let point = values[1].as_point();
        let p_cam = pose.transform_point(point);
        let proj = project_clamped(&self.camera, &p_cam);
        residual[0] = proj.x - self.pixel.x;
        residual[1] = proj.y - self.pixel.y;
        if let Some(jacs) = jacobians {
            let jp = projection_jacobian(&self.camera, &p_cam);
            let r = pose.rotation.to_rotation_matrix().into_inner();
            // pose tangent [omega, dt]: d p_cam = -[R p]x omega + dt
            let mut j_pose = DMatrix::zeros(2, 6);
            let j_rot = jp * (-skew(&(r * point)));
            let j_t = jp;
            j_pose.view_mut((0, 0), (2, 3)).copy_from(&j_rot);
            j_pose.view_mut((0, 3), (2, 3)).copy_from(&j_t);
            jacs[0] = j_pose;
            let j_point = jp * r;
            jacs[1] = DMatrix::from_fn(2, 3, |a, b| j_point[(a, b)]);
        }
    }

    fn loss(&self) -> Option<HuberLoss> {
        self.huber
    }
}

/// Reprojection of a fixed landmark through a variable SE(3) pose
/// (motion-only BA).
pub struct FixedPointReprojection {
    params: [usize; 1],
    pub point: Vec3,
    pub pixel: Vec2,
    pub camera: CameraIntrinsics,
    pub huber: Option<HuberLoss>,
}

impl FixedPointReprojection {
    pub fn new(pose: usize, point: Vec3, pixel: Vec2, camera: CameraIntrinsics) -> Self {
        Self {
            params: [pose],
            point,
            pixel,
            camera,
            huber: Some(HuberLoss { threshold: CHI2_2D.sqrt() }),
        }
    }
}

impl Residual for FixedPointReprojection {
    fn dim(&self) -> usize {
        2
    }

    fn params(&self) -> &[usize] {
        &self.params
    }

    fn eval(
        &self,
        values: &[&ParamValue],
        residual: &mut DVector<f64>,
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) {
        let pose = values[0].as_se3();
        let p_cam = pose.transform_point(&self.point);
        let proj = project_clamped(&self.camera, &p_cam);
        residual[0] = proj.x - self.pixel.x;
        residual[1] = proj.y - self.pixel.y;
        if let Some(jacs) = jacobians {
            let jp = projection_jacobian(&self.camera, &p_cam);
            let r = pose.rotation.to_rotation_matrix().into_inner();
            let mut j_pose = DMatrix::zeros(2, 6);
            j_pose
                .view_mut((0, 0), (2, 3))
                .copy_from(&(jp * (-skew(&(r * self.point)))));
            j_pose.view_mut((0, 3), (2, 3)).copy_from(&jp);
            jacs[0] = j_pose;
        }
    }

    fn loss(&self) -> Option<HuberLoss> {
        self.huber
    }
}

/// Relative Sim(3) constraint r = log(T_ij · T_j · T_i⁻¹); 7-dim residual.
pub struct Sim3RelativeResidual {
    params: [usize; 2], // [i, j]
    pub measured: Sim3Transform,
    pub weight: f64,
}

impl Sim3RelativeResidual {
    pub fn new(i: usize, j: usize, measured: Sim3Transform) -> Self {
        Self { params: [i, j], measured, weight: 1.0 }
    }
}

impl Residual for Sim3RelativeResidual {
    fn dim(&self) -> usize {
        7
    }

    fn params(&self) -> &[usize] {
        &self.params
    }

    fn eval(
        &self,
        values: &[&ParamValue],
        residual: &mut DVector<f64>,
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) {
        let t_i = values[0].as_sim3();
        let t_j = values[1].as_sim3();
        let error = self.measured.compose(t_j).compose(&t_i.inverse());
        let r = error.log();
        let w = self.weight.sqrt();
        for k in 0..7 {
            residual[k] = w * r[k];
        }
        if let Some(jacs) = jacobians {
            // Left-multiplicative updates T <- exp(delta) T:
            //   d r / d delta_j =  J_l(r)^{-1} Adj(T_ij)
            //   d r / d delta_i = -J_l(-r)^{-1}
            let jl_inv = sim3_left_jacobian(&r).try_inverse().expect("J_l invertible");
            let jr_inv = sim3_left_jacobian(&(-r)).try_inverse().expect("J_r invertible");
            let j_j = jl_inv * self.measured.adjoint();
            let j_i = -jr_inv;
            jacs[0] = DMatrix::from_fn(7, 7, |a, b| w * j_i[(a, b)]);
            jacs[1] = DMatrix::from_fn(7, 7, |a, b| w * j_j[(a, b)]);
        }
    }
}

// ---------------------------------------------------------------------------
// Concrete problems
// ---------------------------------------------------------------------------

pub struct MotionOnlyBaResult {
    pub pose: SE3Pose,
    /// Per-match flag: true when the final reprojection error exceeds the
    /// chi-square gate and the caller should drop the match.
    pub outliers: Vec<bool>,
    pub outcome: OptimizationOutcome,
}

pub const MIN_MOTION_ONLY_MATCHES: usize = 6;

/// Optimizes a single frame pose against fixed landmarks.
///
/// Gross mismatches would dominate a purely quadratic cost, so the solve
/// alternates with chi-square outlier classification: optimize over the
/// current inlier set, re-gate every match against the new pose, and repeat
/// until the classification is stable (at most four rounds).
pub fn motion_only_ba(
    frame_pose: &SE3Pose,
    matches: &[(Vec3, Vec2)],
    k: &CameraIntrinsics,
    settings: &LMSettings,
) -> Result<MotionOnlyBaResult, OptimError> {
    if matches.len() < MIN_MOTION_ONLY_MATCHES {
        return Err(OptimError::TooFewMatches {
            needed: MIN_MOTION_ONLY_MATCHES,
            got: matches.len(),
        });
    }
    let classify = |pose: &SE3Pose| -> Vec<bool> {
        matches
            .iter()
            .map(|(point, pixel)| {
                let p_cam = pose.transform_point(point);
                if p_cam.z <= 0.0 {
                    return true;
                }
                let err = project_clamped(k, &p_cam) - pixel;
                err.norm_squared() > CHI2_2D
            })
            .collect()
    };
    let mut pose = *frame_pose;
    let mut outliers = vec![false; matches.len()];
    let mut outcome = OptimizationOutcome {
        iterations: 0,
        initial_cost: 0.0,
        final_cost: 0.0,
        termination: TerminationReason::Converged,
    };
    for _ in 0..4 {
        let active: Vec<&(Vec3, Vec2)> =
            matches.iter().zip(&outliers).filter_map(|(m, out)| (!out).then_some(m)).collect();
        if active.len() < MIN_MOTION_ONLY_MATCHES {
            break;
        }
        let mut problem = Problem::new();
        let pose_id = problem.add_block(ParamValue::Se3(pose));
        for (point, pixel) in &active {
            problem
                .add_residual(Box::new(FixedPointReprojection::new(pose_id, *point, *pixel, *k)));
        }
        outcome = problem.solve(settings)?;
        pose = *problem.value(pose_id).as_se3();
        let next = classify(&pose);
        let stable = next == outliers;
        outliers = next;
        if stable {
            break;
        }
    }
    Ok(MotionOnlyBaResult { pose, outliers, outcome })
}

/// An essential-graph edge: relative Sim(3) measurement between two nodes,
/// r = log(measured · T_to · T_from⁻¹).
#[derive(Debug, Clone)]
pub struct EssentialEdge {
    pub from: KfId,
    pub to: KfId,
    pub measured: Sim3Transform,
    pub weight: f64,
}

/// Optimizes Sim(3) node poses against relative constraints, distributing
/// loop-closure error (including scale drift) along the graph.
pub fn essential_graph_optimize(
    nodes: &mut BTreeMap<KfId, Sim3Transform>,
    edges: &[EssentialEdge],
    fixed: &BTreeSet<KfId>,
    settings: &LMSettings,
) -> Result<OptimizationOutcome, OptimError> {
    if nodes.is_empty() {
        return Err(OptimError::InvalidProblem("empty graph".into()));
    }
    if fixed.is_empty() {
        return Err(OptimError::InvalidProblem("at least one node must be fixed".into()));
    }
    // Connectivity over the edge set.
    let ids: Vec<KfId> = nodes.keys().copied().collect();
    let index: HashMap<KfId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for e in edges {
        let (a, b) = (index[&e.from], index[&e.to]);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let root = find(&mut parent, 0);
    for i in 1..ids.len() {
        if find(&mut parent, i) != root {
            return Err(OptimError::DisconnectedGraph);
        }
    }

    let mut problem = Problem::new();
    let mut block_of: HashMap<KfId, usize> = HashMap::new();
    for (id, t) in nodes.iter() {
        let b = problem.add_block(ParamValue::Sim3(*t));
        if fixed.contains(id) {
            problem.set_fixed(b, true);
        }
        block_of.insert(*id, b);
    }
    for e in edges {
        let mut res = Sim3RelativeResidual::new(block_of[&e.from], block_of[&e.to], e.measured);
        res.weight = e.weight;
        problem.add_residual(Box::new(res));
    }
    let outcome = problem.solve(settings)?;
    for (id, t) in nodes.iter_mut() {
        *t = *problem.value(block_of[id]).as_sim3();
    }
    Ok(outcome)
}

/// Joint optimization of keyframe poses and landmark positions against pixel
/// observations; landmark blocks are Schur-eliminated. Fixed sets provide
/// the gauge.
#[allow(clippy::too_many_arguments)]
pub fn bundle_adjust(
    poses: &mut BTreeMap<KfId, SE3Pose>,
    points: &mut BTreeMap<MpId, Vec3>,
    observations: &[(KfId, MpId, Vec2)],
    fixed_kfs: &BTreeSet<KfId>,
    fixed_mps: &BTreeSet<MpId>,
    k: &CameraIntrinsics,
    settings: &LMSettings,
) -> Result<OptimizationOutcome, OptimError> {
    let mut problem = Problem::new();
    let mut pose_block: HashMap<KfId, usize> = HashMap::new();
    let mut point_block: HashMap<MpId, usize> = HashMap::new();
    for (id, pose) in poses.iter() {
        let b = problem.add_block(ParamValue::Se3(*pose));
        if fixed_kfs.contains(id) {
            problem.set_fixed(b, true);
        }
        pose_block.insert(*id, b);
    }
    for (id, p) in points.iter() {
        let b = problem.add_block(ParamValue::Point(*p));
        if fixed_mps.contains(id) {
            problem.set_fixed(b, true);
        }
        point_block.insert(*id, b);
    }
    let mut used = 0;
    for (kf, mp, pixel) in observations {
        let (Some(&pb), Some(&mb)) = (pose_block.get(kf), point_block.get(mp)) else {
            continue;
        };
        problem.add_residual(Box::new(ReprojectionResidual::new(pb, mb, *pixel, *k)));
        used += 1;
    }
    if used == 0 {
        return Err(OptimError::InvalidProblem("no usable observations".into()));
    }
    let outcome = problem.solve(settings)?;
    for (id, pose) in poses.iter_mut() {
        *pose = *problem.value(pose_block[id]).as_se3();
    }
    for (id, p) in points.iter_mut() {
        *p = *problem.value(point_block[id]).as_point();
    }
    Ok(outcome)
}
