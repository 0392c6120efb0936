//! Trajectory evaluation: timestamp association, closed-form Sim(3)
//! alignment, ATE RMSE, RMSE per 100 m of path, and the joint multi-agent
//! cumulative error under a single shared alignment.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{SE3Pose, Sim3Transform, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no associations within the time tolerance")]
    NoAssociations,
    #[error("degenerate point configuration for Sim3 alignment")]
    DegenerateConfiguration,
    #[error("need at least 3 pose pairs for Sim3 alignment, got {0}")]
    TooFewPairs(usize),
    #[error("malformed trajectory CSV at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },
    #[error("timestamps must be strictly increasing (line {0})")]
    NonMonotonicTimestamps(usize),
}

/// Which frame a trajectory lives in; evaluation only needs it for labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameLabel {
    World,
    MapLocal,
}

/// Timestamped pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<(f64, SE3Pose)>,
    pub frame: FrameLabel,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, SE3Pose)>, frame: FrameLabel) -> Self {
        for w in poses.windows(2) {
            assert!(w[1].0 > w[0].0, "timestamps must be strictly increasing");
        }
        Self { poses, frame }
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.poses.iter().map(|(_, p)| p.center()).collect()
    }

    /// Polyline length of the camera-center path.
    pub fn length(&self) -> f64 {
        let pos = self.positions();
        pos.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

/// One associated sample: estimated and ground-truth camera centers plus the
/// ground-truth timestamp used for span accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePair {
    pub est_time: f64,
    pub gt_time: f64,
    pub est: Vec3,
    pub gt: Vec3,
}

/// Default association tolerance in seconds.
pub const DEFAULT_MAX_DT: f64 = 0.02;

/// Greedy one-to-one nearest-time matching: candidate pairs sorted by time
/// gap, accepted when both sides are still free and the gap is within
/// `max_dt`.
pub fn associate(
    est: &Trajectory,
    gt: &Trajectory,
    max_dt: f64,
) -> Result<Vec<PosePair>, EvalError> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    // Each estimate only needs its few nearest ground-truth samples; gt is
    // sorted, so binary search bounds the candidate window.
    for (i, (te, _)) in est.poses.iter().enumerate() {
        let idx = gt.poses.partition_point(|(tg, _)| tg < te);
        for j in idx.saturating_sub(1)..(idx + 1).min(gt.poses.len()) {
            let gap = (gt.poses[j].0 - te).abs();
            if gap <= max_dt {
                candidates.push((gap, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut est_used = vec![false; est.poses.len()];
    let mut gt_used = vec![false; gt.poses.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if est_used[i] || gt_used[j] {
            continue;
        }
        est_used[i] = true;
        gt_used[j] = true;
        pairs.push(PosePair {
            est_time: est.poses[i].0,
            gt_time: gt.poses[j].0,
            est: est.poses[i].1.center(),
            gt: gt.poses[j].1.center(),
        });
    }
    if pairs.is_empty() {
        return Err(EvalError::NoAssociations);
    }
    pairs.sort_by(|a, b| a.est_time.total_cmp(&b.est_time));
    Ok(pairs)
}

/// Closed-form least-squares similarity (Umeyama) mapping estimated positions
/// onto ground truth: minimizes sum of |gt_i - (s R est_i + t)|^2.
pub fn align_sim3(pairs: &[PosePair]) -> Result<Sim3Transform, EvalError> {
    let src: Vec<Vec3> = pairs.iter().map(|p| p.est).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|p| p.gt).collect();
    umeyama_alignment(&src, &dst)
}

/// Umeyama similarity over raw point sets: finds (s, R, t) minimizing
/// sum of |dst_i - (s R src_i + t)|^2.
pub fn umeyama_alignment(src: &[Vec3], dst: &[Vec3]) -> Result<Sim3Transform, EvalError> {
    assert_eq!(src.len(), dst.len());
    if src.len() < 3 {
        return Err(EvalError::TooFewPairs(src.len()));
    }
    let n = src.len() as f64;
    let mu_e: Vec3 = src.iter().sum::<Vec3>() / n;
    let mu_g: Vec3 = dst.iter().sum::<Vec3>() / n;
    let mut sigma = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in src.iter().zip(dst) {
        let de = e - mu_e;
        let dg = g - mu_g;
        sigma += dg * de.transpose();
        var_e += de.norm_squared();
    }
    sigma /= n;
    var_e /= n;
    if var_e < 1e-18 {
        return Err(EvalError::DegenerateConfiguration);
    }
    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or(EvalError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(EvalError::DegenerateConfiguration)?;
    // Collinear inputs leave the second singular value at zero and the
    // rotation about the line unconstrained.
    if svd.singular_values[1] <= 1e-9 * svd.singular_values[0].max(1.0) {
        return Err(EvalError::DegenerateConfiguration);
    }
    let mut s_mat = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_mat[(2, 2)] = -1.0;
    }
    let r = u * s_mat * v_t;
    let scale = (svd.singular_values.transpose() * s_mat.diagonal())[(0, 0)] / var_e;
    if !(scale > 0.0) {
        return Err(EvalError::DegenerateConfiguration);
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_g - scale * (rotation * mu_e);
    Ok(Sim3Transform::new(rotation, translation, scale))
}

/// ATE summary; `rmse_percent` is the ATE per 100 m of ground-truth path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub alignment: Sim3Transform,
    pub rmse_m: f64,
    pub rmse_percent: f64,
    pub pairs: usize,
    pub length_m: f64,
}

impl AteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("AteReport serializes")
    }
}

/// Per-pair residual after alignment; the norm feeds the RMSE.
pub fn residuals(pairs: &[PosePair], alignment: &Sim3Transform) -> Vec<Vec3> {
    pairs.iter().map(|p| p.gt - alignment.apply(&p.est)).collect()
}

/// RMSE of positional residuals under the given alignment, with the
/// trajectory length measured over the paired ground-truth span.
pub fn ate_rmse(pairs: &[PosePair], alignment: &Sim3Transform) -> AteReport {
    assert!(!pairs.is_empty());
    let res = residuals(pairs, alignment);
    let mse = res.iter().map(|r| r.norm_squared()).sum::<f64>() / res.len() as f64;
    let rmse_m = mse.sqrt();
    let mut ordered: Vec<&PosePair> = pairs.iter().collect();
    ordered.sort_by(|a, b| a.gt_time.total_cmp(&b.gt_time));
    let length_m: f64 = ordered.windows(2).map(|w| (w[1].gt - w[0].gt).norm()).sum();
    let rmse_percent = if length_m > 0.0 { rmse_m / length_m * 100.0 } else { f64::NAN };
    AteReport { alignment: *alignment, rmse_m, rmse_percent, pairs: pairs.len(), length_m }
}

/// Convenience: associate, align, report.
pub fn evaluate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<AteReport, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let alignment = align_sim3(&pairs)?;
    Ok(ate_rmse(&pairs, &alignment))
}

/// Joint multi-agent metric: one Sim(3) over the concatenation of all pair
/// sets, one RMSE, length summed per trajectory.
pub fn cumulative_error(pair_sets: &[Vec<PosePair>]) -> Result<AteReport, EvalError> {
    let all: Vec<PosePair> = pair_sets.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(EvalError::NoAssociations);
    }
    let alignment = align_sim3(&all)?;
    let res = residuals(&all, &alignment);
    let mse = res.iter().map(|r| r.norm_squared()).sum::<f64>() / res.len() as f64;
    let rmse_m = mse.sqrt();
    let length_m: f64 = pair_sets
        .iter()
        .map(|pairs| {
            let mut ordered: Vec<&PosePair> = pairs.iter().collect();
            ordered.sort_by(|a, b| a.gt_time.total_cmp(&b.gt_time));
            ordered.windows(2).map(|w| (w[1].gt - w[0].gt).norm()).sum::<f64>()
        })
        .sum();
    let rmse_percent = if length_m > 0.0 { rmse_m / length_m * 100.0 } else { f64::NAN };
    Ok(AteReport { alignment, rmse_m, rmse_percent, pairs: all.len(), length_m })
}

/// Serializes as `timestamp,tx,ty,tz,qx,qy,qz,qw` with a header line, where
/// (t, q) is the camera center and world-from-camera orientation.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = String::from("timestamp,tx,ty,tz,qx,qy,qz,qw\n");
    for (t, pose) in &traj.poses {
        let c = pose.center();
        let q = pose.rotation.inverse(); // world-from-camera
        out.push_str(&format!(
            "{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            t, c.x, c.y, c.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}

/// Parses the CSV pose format; a leading header line is optional.
pub fn trajectory_from_csv(text: &str, frame: FrameLabel) -> Result<Trajectory, EvalError> {
    let mut poses = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line_no == 0 && line.starts_with("timestamp") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(EvalError::MalformedCsv {
                line: line_no + 1,
                reason: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 8];
        for (k, f) in fields.iter().enumerate() {
            nums[k] = f.parse().map_err(|_| EvalError::MalformedCsv {
                line: line_no + 1,
                reason: format!("bad number {f:?}"),
            })?;
        }
        let center = Vec3::new(nums[1], nums[2], nums[3]);
        let q_wc = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            nums[7], nums[4], nums[5], nums[6],
        ));
        // CSV stores world-from-camera; internal poses are camera-from-world.
        let rotation = q_wc.inverse();
        let pose = SE3Pose::new(rotation, -(rotation * center));
        if let Some((prev, _)) = poses.last() {
            if nums[0] <= *prev {
                return Err(EvalError::NonMonotonicTimestamps(line_no + 1));
            }
        }
        poses.push((nums[0], pose));
    }
    if poses.is_empty() {
        return Err(EvalError::MalformedCsv { line: 0, reason: "no pose rows".into() });
    }
    Ok(Trajectory { poses, frame })
}

/// Residual CSV for plotting: one row per pair after alignment.
pub fn residuals_csv(pairs: &[PosePair], alignment: &Sim3Transform) -> String {
    let mut out = String::from("est_time,gt_time,ex,ey,ez,norm\n");
    for (p, r) in pairs.iter().zip(residuals(pairs, alignment)) {
        out.push_str(&format!(
            "{:.6},{:.6},{:.9},{:.9},{:.9},{:.9}\n",
            p.est_time,
            p.gt_time,
            r.x,
            r.y,
            r.z,
            r.norm()
        ));
    }
    out
}
