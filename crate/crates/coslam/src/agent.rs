//! The onboard pipeline of a single agent: two-view initialization, tracking
//! with motion-only BA and keyframe selection, local mapping (triangulation,
//! covisibility, local BA, trimming to N keyframes), and the communication
//! client that uploads dirty entities and absorbs server neighborhoods.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::geometry::{self, CameraIntrinsics, SE3Pose, Vec2, Vec3};
use crate::map::{CovisibilityGraph, KeyFrame, KfId, MapPoint, MpId};
use crate::netsim::{Link, NetSimError, PayloadKind};
use crate::optim::{self, LMSettings, OptimError};
use crate::placerec::Descriptor;
use crate::wire;
use crate::worldsim::{FrameObservation, Observation};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("insufficient parallax between initialization frames")]
    InsufficientParallax,
    #[error("only {0} common landmarks between initialization frames, need {1}")]
    TooFewCommonLandmarks(usize, usize),
    #[error("tracking lost with {0} matches")]
    TrackingLost(usize),
    #[error("optimization failed: {0}")]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy)]
pub struct AgentConfig {
    /// Local map capacity in keyframes.
    pub n_cap: usize,
    /// Covisibility edge threshold (shared map points).
    pub theta_covis: u32,
    /// A frame becomes a KF when it tracks fewer than this fraction of the
    /// reference KF's map points.
    pub kf_tracked_ratio: f64,
    /// ... or when this many frames have passed since the last KF.
    pub kf_max_gap: u32,
    /// Below this many matches the tracker declares loss.
    pub min_track_matches: usize,
    /// Minimum common landmarks between the two initialization frames.
    pub min_init_common: usize,
    /// Median triangulation angle below this is InsufficientParallax.
    pub min_parallax_deg: f64,
    /// Hamming radius for matching observations to fixed neighborhood points.
    pub fixed_match_max_distance: u32,
    /// Entities are re-sent if unacked for this many sim seconds.
    pub resend_interval: f64,
    pub motion_ba: LMSettings,
    pub local_ba: LMSettings,
    pub init_ba: LMSettings,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            n_cap: 50,
            theta_covis: 15,
            kf_tracked_ratio: 0.9,
            kf_max_gap: 20,
            min_track_matches: 15,
            min_init_common: 30,
            min_parallax_deg: 1.0,
            fixed_match_max_distance: 60,
            resend_interval: 1.0,
            motion_ba: LMSettings::default().with_max_iterations(10),
            local_ba: LMSettings::default().with_max_iterations(5),
            init_ba: LMSettings::default().with_max_iterations(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentMode {
    Initializing,
    Tracking,
    Lost,
}

/// What a frame produced, for the scheduler and event logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Waiting for an initialization partner frame.
    Buffered,
    /// Two-view initialization succeeded on this frame.
    Initialized,
    /// Tracked; flag says whether the frame was promoted to a keyframe.
    Tracked { new_keyframe: bool },
}

pub struct Agent {
    pub id: u32,
    camera: CameraIntrinsics,
    pub config: AgentConfig,
    pub mode: AgentMode,
    /// Optimizable local window, capped at `n_cap` after every mapping cycle.
    pub keyframes: BTreeMap<KfId, KeyFrame>,
    pub points: BTreeMap<MpId, MapPoint>,
    pub covis: CovisibilityGraph,
    /// Server-provided reference entities: matchable, never optimized, not
    /// counted against the cap.
    pub fixed_keyframes: BTreeMap<KfId, KeyFrame>,
    pub fixed_points: BTreeMap<MpId, MapPoint>,
    /// Front-end data association (simulated feature matching); never leaves
    /// the agent.
    landmark_to_mp: HashMap<u64, MpId>,
    /// Raw frame observations per KF, kept for triangulating new points.
    raw_obs: HashMap<KfId, Vec<Observation>>,
    next_kf_seq: u32,
    next_mp_seq: u32,
    last_kf: Option<KfId>,
    frames_since_kf: u32,
    current_pose: SE3Pose,
    /// Constant-velocity model: pose_next is predicted as velocity * pose.
    velocity: SE3Pose,
    pending_init: Option<FrameObservation>,
    /// Upload outbox: dirty snapshots held until the server acks them.
    outbox_kfs: BTreeMap<KfId, KeyFrame>,
    outbox_mps: BTreeMap<MpId, MapPoint>,
    last_sent_kf: BTreeMap<KfId, f64>,
    last_sent_mp: BTreeMap<MpId, f64>,
    next_sequence: u64,
    /// Per-frame pose estimates in the agent's local map frame.
    pub trajectory: Vec<(f64, SE3Pose)>,
    /// Max optimizable KF count ever seen at a mapping-cycle boundary.
    pub max_cycle_kfs: usize,
}

impl Agent {
    pub fn new(id: u32, camera: CameraIntrinsics, config: AgentConfig) -> Self {
        Self {
            id,
            camera,
            config,
            mode: AgentMode::Initializing,
            keyframes: BTreeMap::new(),
            points: BTreeMap::new(),
            covis: CovisibilityGraph::default(),
            fixed_keyframes: BTreeMap::new(),
            fixed_points: BTreeMap::new(),
            landmark_to_mp: HashMap::new(),
            raw_obs: HashMap::new(),
            next_kf_seq: 0,
            next_mp_seq: 0,
            last_kf: None,
            frames_since_kf: 0,
            current_pose: SE3Pose::identity(),
            velocity: SE3Pose::identity(),
            pending_init: None,
            outbox_kfs: BTreeMap::new(),
            outbox_mps: BTreeMap::new(),
            last_sent_kf: BTreeMap::new(),
            last_sent_mp: BTreeMap::new(),
            next_sequence: 0,
            trajectory: Vec::new(),
            max_cycle_kfs: 0,
        }
    }

    pub fn current_pose(&self) -> SE3Pose {
        self.current_pose
    }

    pub fn last_keyframe(&self) -> Option<KfId> {
        self.last_kf
    }

    /// Entities still awaiting server acknowledgment.
    pub fn outbox_len(&self) -> (usize, usize) {
        (self.outbox_kfs.len(), self.outbox_mps.len())
    }

    /// Processes one frame through the tracking/mapping front end. The
    /// communication step is separate (`sync`) so the scheduler can order
    /// tracking, mapping, and communication deterministically.
    pub fn step(&mut self, frame: &FrameObservation) -> Result<StepOutcome, AgentError> {
        match self.mode {
            AgentMode::Initializing => {
                let Some(first) = self.pending_init.clone() else {
                    self.pending_init = Some(frame.clone());
                    return Ok(StepOutcome::Buffered);
                };
                match self.initialize(&first, frame) {
                    Ok(()) => {
                        self.mode = AgentMode::Tracking;
                        Ok(StepOutcome::Initialized)
                    }
                    Err(e @ AgentError::InsufficientParallax) => {
                        // Keep the anchor frame: the baseline is still
                        // growing and a later frame may succeed.
                        Err(e)
                    }
                    Err(e @ AgentError::TooFewCommonLandmarks(..)) => {
                        // The anchor's view has drifted out of overlap; a
                        // stale anchor can never initialize, so restart the
                        // pair from the current frame.
                        self.pending_init = Some(frame.clone());
                        Err(e)
                    }
                    Err(e) => Err(e),
                }
            }
            AgentMode::Tracking => self.track_frame(frame),
            AgentMode::Lost => Err(AgentError::TrackingLost(0)),
        }
    }

    /// Two-view bootstrap: triangulates the common landmarks of two frames,
    /// refines with a two-view BA, and normalizes the baseline to 1 so the
    /// map keeps the monocular scale ambiguity.
    pub fn initialize(
        &mut self,
        first: &FrameObservation,
        second: &FrameObservation,
    ) -> Result<(), AgentError> {
        let by_id: HashMap<u64, &Observation> =
            first.observations.iter().map(|o| (o.landmark, o)).collect();
        let mut common: Vec<(&Observation, &Observation)> = second
            .observations
            .iter()
            .filter_map(|o| by_id.get(&o.landmark).map(|f| (*f, o)))
            .collect();
        common.sort_by_key(|(a, _)| a.landmark);
        if common.len() < self.config.min_init_common {
            return Err(AgentError::TooFewCommonLandmarks(
                common.len(),
                self.config.min_init_common,
            ));
        }
        // Zero image motion means zero parallax no matter the assumed
        // baseline; bail out before optimizing against it.
        let mut disparities: Vec<f64> =
            common.iter().map(|(a, b)| (a.pixel - b.pixel).norm()).collect();
        disparities.sort_by(f64::total_cmp);
        if disparities[disparities.len() / 2] < 0.5 {
            return Err(AgentError::InsufficientParallax);
        }

        // Eight-point essential matrix on normalized coordinates gives the
        // relative motion up to scale; triangulate and refine with a
        // two-view BA from there.
        let pose1 = SE3Pose::identity();
        let pairs: Vec<(Vec3, Vec3)> = common
            .iter()
            .map(|(oa, ob)| {
                (
                    geometry::unproject(&self.camera, &oa.pixel, 1.0),
                    geometry::unproject(&self.camera, &ob.pixel, 1.0),
                )
            })
            .collect();
        let (rot, t_dir) = geometry::relative_pose_from_correspondences(&pairs)
            .map_err(|_| AgentError::InsufficientParallax)?;
        let pose2_init = SE3Pose::new(rot, t_dir);

        let kf1 = KfId { agent: self.id, seq: 0 };
        let kf2 = KfId { agent: self.id, seq: 1 };
        let mut poses: BTreeMap<KfId, SE3Pose> = BTreeMap::new();
        poses.insert(kf1, pose1);
        poses.insert(kf2, pose2_init);
        let mut points: BTreeMap<MpId, Vec3> = BTreeMap::new();
        let mut observations = Vec::new();
        for (i, (oa, ob)) in common.iter().enumerate() {
            let mp = MpId { agent: self.id, seq: i as u32 };
            let p = match geometry::triangulate(
                &pose1,
                &pose2_init,
                &oa.pixel,
                &ob.pixel,
                &self.camera,
            ) {
                Ok(p) => p,
                Err(_) => geometry::unproject(&self.camera, &oa.pixel, 10.0),
            };
            points.insert(mp, p);
            observations.push((kf1, mp, oa.pixel));
            observations.push((kf2, mp, ob.pixel));
        }
        let fixed_kfs: BTreeSet<KfId> = [kf1].into_iter().collect();
        optim::bundle_adjust(
            &mut poses,
            &mut points,
            &observations,
            &fixed_kfs,
            &BTreeSet::new(),
            &self.camera,
            &self.config.init_ba,
        )
        .map_err(|_| AgentError::InsufficientParallax)?;
        let mut pose2 = poses[&kf2];

        // Gate out wrong associations and cheirality violations: a
        // mismatched landmark id reprojects far from its pixel in at least
        // one view even after the Huber-weighted refinement.
        let survivors: Vec<usize> = (0..common.len())
            .filter(|i| {
                let p = points[&MpId { agent: self.id, seq: *i as u32 }];
                let ca = pose1.transform_point(&p);
                let cb = pose2.transform_point(&p);
                if ca.z <= 0.0 || cb.z <= 0.0 {
                    return false;
                }
                let (Ok(pa), Ok(pb)) = (
                    geometry::project(&self.camera, &ca),
                    geometry::project(&self.camera, &cb),
                ) else {
                    return false;
                };
                (pa - common[*i].0.pixel).norm_squared() <= optim::CHI2_2D
                    && (pb - common[*i].1.pixel).norm_squared() <= optim::CHI2_2D
            })
            .collect();
        if survivors.len() * 10 < common.len() * 9 {
            return Err(AgentError::InsufficientParallax);
        }
        if survivors.len() < common.len() {
            // Refine once more on the clean set.
            let keep: BTreeSet<MpId> =
                survivors.iter().map(|i| MpId { agent: self.id, seq: *i as u32 }).collect();
            points.retain(|id, _| keep.contains(id));
            observations.retain(|(_, mp, _)| keep.contains(mp));
            optim::bundle_adjust(
                &mut poses,
                &mut points,
                &observations,
                &fixed_kfs,
                &BTreeSet::new(),
                &self.camera,
                &self.config.init_ba,
            )
            .map_err(|_| AgentError::InsufficientParallax)?;
            pose2 = poses[&kf2];
        }
        let common: Vec<(&Observation, &Observation)> =
            survivors.iter().map(|i| common[*i]).collect();
        let pts: Vec<Vec3> = survivors
            .iter()
            .map(|i| points[&MpId { agent: self.id, seq: *i as u32 }])
            .collect();

        let mut angles: Vec<f64> = pts
            .iter()
            .map(|p| geometry::triangulation_angle(&pose1, &pose2, p))
            .collect();
        angles.sort_by(f64::total_cmp);
        if angles[angles.len() / 2] < self.config.min_parallax_deg.to_radians() {
            return Err(AgentError::InsufficientParallax);
        }

        // Normalize the baseline to 1.
        let scale = 1.0 / pose2.center().norm();
        let center2 = pose2.center() * scale;
        let pose2 = SE3Pose::new(pose2.rotation, -(pose2.rotation * center2));
        let pts: Vec<Vec3> = pts.iter().map(|p| p * scale).collect();

        // Materialize the map.
        let kf1_id = self.fresh_kf_id();
        let kf2_id = self.fresh_kf_id();
        let mut kf1 = KeyFrame {
            id: kf1_id,
            timestamp: first.timestamp,
            pose: pose1,
            observations: Vec::new(),
            descriptors: Vec::new(),
            bow: None,
        };
        let mut kf2 = KeyFrame {
            id: kf2_id,
            timestamp: second.timestamp,
            pose: pose2,
            observations: Vec::new(),
            descriptors: Vec::new(),
            bow: None,
        };
        for ((oa, ob), p) in common.iter().zip(&pts) {
            let mp_id = self.fresh_mp_id();
            let mut observers = BTreeMap::new();
            observers.insert(kf1_id, kf1.observations.len());
            observers.insert(kf2_id, kf2.observations.len());
            kf1.observations.push((mp_id, oa.pixel));
            kf1.descriptors.push(oa.descriptor);
            kf2.observations.push((mp_id, ob.pixel));
            kf2.descriptors.push(ob.descriptor);
            self.points.insert(
                mp_id,
                MapPoint { id: mp_id, position: *p, observers, descriptor: ob.descriptor },
            );
            self.landmark_to_mp.insert(ob.landmark, mp_id);
            self.outbox_mps.insert(mp_id, self.points[&mp_id].clone());
        }
        self.covis.set(kf1_id, kf2_id, common.len() as u32);
        self.raw_obs.insert(kf1_id, first.observations.clone());
        self.raw_obs.insert(kf2_id, second.observations.clone());
        self.outbox_kfs.insert(kf1_id, kf1.clone());
        self.outbox_kfs.insert(kf2_id, kf2.clone());
        self.keyframes.insert(kf1_id, kf1);
        self.keyframes.insert(kf2_id, kf2);
        self.trajectory.push((first.timestamp, pose1));
        self.trajectory.push((second.timestamp, pose2));
        self.current_pose = pose2;
        self.velocity = SE3Pose::identity();
        self.last_kf = Some(kf2_id);
        self.frames_since_kf = 0;
        self.pending_init = None;
        self.max_cycle_kfs = self.max_cycle_kfs.max(self.keyframes.len());
        Ok(())
    }

    /// Constant-velocity prediction, id-based matching against the local map
    /// (descriptor-based against fixed neighborhood points), motion-only BA,
    /// and the keyframe decision.
    fn track_frame(&mut self, frame: &FrameObservation) -> Result<StepOutcome, AgentError> {
        let predicted = self.velocity.compose(&self.current_pose);

        // (position, pixel, mp id, landmark) matches.
        let mut matches: Vec<(Vec3, Vec2, MpId, u64)> = Vec::new();
        let mut unmatched: Vec<&Observation> = Vec::new();
        for obs in &frame.observations {
            match self.landmark_to_mp.get(&obs.landmark) {
                Some(mp_id) => {
                    let pos = self
                        .points
                        .get(mp_id)
                        .or_else(|| self.fixed_points.get(mp_id))
                        .map(|mp| mp.position);
                    match pos {
                        Some(p) => matches.push((p, obs.pixel, *mp_id, obs.landmark)),
                        None => unmatched.push(obs),
                    }
                }
                None => unmatched.push(obs),
            }
        }
        // Fixed neighborhood points have no front-end landmark id; match by
        // descriptor within a Hamming radius.
        if !self.fixed_points.is_empty() {
            let claimed: BTreeSet<MpId> = matches.iter().map(|m| m.2).collect();
            for obs in unmatched {
                let mut best: Option<(u32, &MapPoint)> = None;
                for mp in self.fixed_points.values() {
                    if claimed.contains(&mp.id) {
                        continue;
                    }
                    let d = obs.descriptor.distance(&mp.descriptor);
                    if d <= self.config.fixed_match_max_distance
                        && best.map_or(true, |(bd, _)| d < bd)
                    {
                        best = Some((d, mp));
                    }
                }
                if let Some((_, mp)) = best {
                    matches.push((mp.position, obs.pixel, mp.id, obs.landmark));
                }
            }
        }

        // Coarse visibility gate under the predicted pose: a match whose
        // point falls behind the camera or reprojects far from the observed
        // pixel is a stale or wrong association and would destabilize the
        // solve.
        matches.retain(|(p, px, _, _)| {
            let c = predicted.transform_point(p);
            c.z > 0.0
                && geometry::project(&self.camera, &c)
                    .map(|q| (q - px).norm() < 30.0)
                    .unwrap_or(false)
        });

        if matches.len() < self.config.min_track_matches {
            self.mode = AgentMode::Lost;
            return Err(AgentError::TrackingLost(matches.len()));
        }
        let ba_input: Vec<(Vec3, Vec2)> = matches.iter().map(|m| (m.0, m.1)).collect();
        let result =
            optim::motion_only_ba(&predicted, &ba_input, &self.camera, &self.config.motion_ba)?;
        let inliers: Vec<&(Vec3, Vec2, MpId, u64)> = matches
            .iter()
            .zip(&result.outliers)
            .filter_map(|(m, out)| (!out).then_some(m))
            .collect();
        if inliers.len() < self.config.min_track_matches {
            self.mode = AgentMode::Lost;
            return Err(AgentError::TrackingLost(inliers.len()));
        }
        self.velocity = result.pose.compose(&self.current_pose.inverse());
        self.current_pose = result.pose;
        self.trajectory.push((frame.timestamp, result.pose));
        self.frames_since_kf += 1;

        let ref_count = self
            .last_kf
            .and_then(|id| self.keyframes.get(&id))
            .map(|kf| kf.observations.len())
            .unwrap_or(0);
        let tracked_local =
            inliers.iter().filter(|m| self.points.contains_key(&m.2)).count();
        let make_kf = (tracked_local as f64) < self.config.kf_tracked_ratio * ref_count as f64
            || self.frames_since_kf >= self.config.kf_max_gap;
        if make_kf {
            let pose = result.pose;
            // Register observations with a looser gate than the pose-inlier
            // one: points just outside the chi-square gate are usually badly
            // triangulated rather than misassociated, and local BA can only
            // repair their depth if this KF observes them.
            let register: Vec<(Vec3, Vec2, MpId, u64)> = matches
                .iter()
                .filter(|(p, px, _, _)| {
                    let c = pose.transform_point(p);
                    c.z > 0.0
                        && geometry::project(&self.camera, &c)
                            .map(|q| (q - px).norm_squared() <= optim::CHI2_2D * 9.0)
                            .unwrap_or(false)
                })
                .copied()
                .collect();
            self.insert_keyframe(frame, pose, &register);
        }
        Ok(StepOutcome::Tracked { new_keyframe: make_kf })
    }

    /// Creates the KF, triangulates new points with the best covisible
    /// neighbor, refreshes covisibility, runs local BA, and trims to N.
    fn insert_keyframe(
        &mut self,
        frame: &FrameObservation,
        pose: SE3Pose,
        inlier_matches: &[(Vec3, Vec2, MpId, u64)],
    ) {
        let kf_id = self.fresh_kf_id();
        let mut kf = KeyFrame {
            id: kf_id,
            timestamp: frame.timestamp,
            pose,
            observations: Vec::new(),
            descriptors: Vec::new(),
            bow: None,
        };
        let desc_of: HashMap<u64, Descriptor> =
            frame.observations.iter().map(|o| (o.landmark, o.descriptor)).collect();
        for (_, pixel, mp_id, landmark) in inlier_matches {
            let Some(mp) = self.points.get_mut(mp_id) else {
                continue; // fixed-point match: pose evidence only
            };
            mp.observers.insert(kf_id, kf.observations.len());
            kf.observations.push((*mp_id, *pixel));
            kf.descriptors.push(desc_of.get(landmark).copied().unwrap_or(mp.descriptor));
        }
        self.raw_obs.insert(kf_id, frame.observations.clone());
        self.keyframes.insert(kf_id, kf);
        self.last_kf = Some(kf_id);
        self.frames_since_kf = 0;
        self.process_keyframe(kf_id);
    }

    /// Mapping cycle for a freshly inserted KF.
    fn process_keyframe(&mut self, kf_id: KfId) {
        self.triangulate_new_points(kf_id);
        let kf = self.keyframes[&kf_id].clone();
        self.covis.refresh_for(&kf, &self.keyframes, &self.points, self.config.theta_covis);
        self.local_ba(kf_id);
        self.trim_local_map();
        self.max_cycle_kfs = self.max_cycle_kfs.max(self.keyframes.len());
    }

    /// Triangulates landmarks seen by this KF but not yet mapped, using the
    /// best covisible neighbor that also observed them.
    fn triangulate_new_points(&mut self, kf_id: KfId) {
        let mut neighbors: Vec<(KfId, u32)> = self
            .keyframes
            .keys()
            .filter(|id| **id != kf_id)
            .map(|id| {
                let shared = self.shared_raw_landmarks(kf_id, *id);
                (*id, shared)
            })
            .collect();
        neighbors.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let Some(&(neighbor_id, shared)) = neighbors.first() else { return };
        if shared == 0 {
            return;
        }
        let neighbor_pose = self.keyframes[&neighbor_id].pose;
        let kf_pose = self.keyframes[&kf_id].pose;
        let neighbor_obs: HashMap<u64, Observation> = self.raw_obs[&neighbor_id]
            .iter()
            .map(|o| (o.landmark, o.clone()))
            .collect();
        let own_obs = self.raw_obs[&kf_id].clone();
        let mut created: Vec<(MpId, u64, Observation, Observation)> = Vec::new();
        for obs in &own_obs {
            if self.landmark_to_mp.contains_key(&obs.landmark) {
                continue;
            }
            let Some(nb) = neighbor_obs.get(&obs.landmark) else { continue };
            let Ok(p) = geometry::triangulate(
                &kf_pose,
                &neighbor_pose,
                &obs.pixel,
                &nb.pixel,
                &self.camera,
            ) else {
                continue;
            };
            if kf_pose.transform_point(&p).z <= 0.0
                || neighbor_pose.transform_point(&p).z <= 0.0
            {
                continue;
            }
            if geometry::triangulation_angle(&kf_pose, &neighbor_pose, &p)
                < 0.2f64.to_radians()
            {
                continue;
            }
            // Reprojection sanity gate against both views.
            let reproj_ok = [(kf_pose, obs.pixel), (neighbor_pose, nb.pixel)].iter().all(
                |(pose, px)| {
                    geometry::project(&self.camera, &pose.transform_point(&p))
                        .map(|q| (q - px).norm_squared() < optim::CHI2_2D * 4.0)
                        .unwrap_or(false)
                },
            );
            if !reproj_ok {
                continue;
            }
            let mp_id = self.fresh_mp_id();
            let mut observers = BTreeMap::new();
            observers.insert(kf_id, usize::MAX); // fixed up below
            self.points.insert(
                mp_id,
                MapPoint { id: mp_id, position: p, observers, descriptor: obs.descriptor },
            );
            self.landmark_to_mp.insert(obs.landmark, mp_id);
            created.push((mp_id, obs.landmark, obs.clone(), nb.clone()));
        }
        // Register observations in both keyframes.
        for (mp_id, _, own, nb) in created {
            let kf = self.keyframes.get_mut(&kf_id).unwrap();
            let idx = kf.observations.len();
            kf.observations.push((mp_id, own.pixel));
            kf.descriptors.push(own.descriptor);
            let nkf = self.keyframes.get_mut(&neighbor_id).unwrap();
            let nidx = nkf.observations.len();
            nkf.observations.push((mp_id, nb.pixel));
            nkf.descriptors.push(nb.descriptor);
            let mp = self.points.get_mut(&mp_id).unwrap();
            mp.observers.insert(kf_id, idx);
            mp.observers.insert(neighbor_id, nidx);
        }
    }

    fn shared_raw_landmarks(&self, a: KfId, b: KfId) -> u32 {
        let (Some(ra), Some(rb)) = (self.raw_obs.get(&a), self.raw_obs.get(&b)) else {
            return 0;
        };
        let set: BTreeSet<u64> = ra.iter().map(|o| o.landmark).collect();
        rb.iter().filter(|o| set.contains(&o.landmark)).count() as u32
    }

    /// Optimizes the covisible window around `anchor_kf` and its points;
    /// outside observers and fixed neighborhood entities provide the gauge.
    fn local_ba(&mut self, anchor_kf: KfId) {
        let mut window: BTreeSet<KfId> = [anchor_kf].into_iter().collect();
        for (id, _) in self.covis.neighbors(&anchor_kf) {
            if self.keyframes.contains_key(&id) {
                window.insert(id);
            }
        }
        let mut mp_ids: BTreeSet<MpId> = BTreeSet::new();
        for id in &window {
            for (mp, _) in &self.keyframes[id].observations {
                if self.points.contains_key(mp) {
                    mp_ids.insert(*mp);
                }
            }
        }
        let mut poses: BTreeMap<KfId, SE3Pose> = BTreeMap::new();
        let mut fixed_kfs: BTreeSet<KfId> = BTreeSet::new();
        for id in &window {
            poses.insert(*id, self.keyframes[id].pose);
        }
        // Outside observers are included but frozen.
        for mp in &mp_ids {
            for obs_kf in self.points[mp].observers.keys() {
                if !window.contains(obs_kf) {
                    if let Some(kf) = self.keyframes.get(obs_kf) {
                        poses.insert(*obs_kf, kf.pose);
                        fixed_kfs.insert(*obs_kf);
                    } else if let Some(kf) = self.fixed_keyframes.get(obs_kf) {
                        poses.insert(*obs_kf, kf.pose);
                        fixed_kfs.insert(*obs_kf);
                    }
                }
            }
        }
        if fixed_kfs.is_empty() {
            // Whole map in the window: pin the oldest KF as the gauge.
            let oldest = *window.iter().next().unwrap();
            fixed_kfs.insert(oldest);
        }
        let mut points: BTreeMap<MpId, Vec3> =
            mp_ids.iter().map(|id| (*id, self.points[id].position)).collect();
        let mut observations: Vec<(KfId, MpId, Vec2)> = Vec::new();
        for (kf_id, kf) in poses.keys().filter_map(|id| {
            self.keyframes
                .get(id)
                .or_else(|| self.fixed_keyframes.get(id))
                .map(|kf| (*id, kf))
        }) {
            for (mp, px) in &kf.observations {
                if points.contains_key(mp) {
                    observations.push((kf_id, *mp, *px));
                }
            }
        }
        if optim::bundle_adjust(
            &mut poses,
            &mut points,
            &observations,
            &fixed_kfs,
            &BTreeSet::new(),
            &self.camera,
            &self.config.local_ba,
        )
        .is_err()
        {
            return; // keep the unoptimized but consistent state
        }
        for id in &window {
            let kf = self.keyframes.get_mut(id).unwrap();
            kf.pose = poses[id];
            self.outbox_kfs.insert(*id, kf.clone());
        }
        for (id, p) in &points {
            let mp = self.points.get_mut(id).unwrap();
            mp.position = *p;
            self.outbox_mps.insert(*id, mp.clone());
        }
        if window.contains(&anchor_kf) {
            self.current_pose = self.keyframes[&anchor_kf].pose;
        }
    }

    /// Evicts oldest KFs beyond the cap plus any points left observer-less.
    /// Evicted entities stay known to the server; nothing is deleted there.
    pub fn trim_local_map(&mut self) -> Vec<KfId> {
        let mut evicted = Vec::new();
        while self.keyframes.len() > self.config.n_cap {
            let oldest = *self.keyframes.keys().next().unwrap();
            let kf = self.keyframes.remove(&oldest).unwrap();
            self.raw_obs.remove(&oldest);
            self.covis.remove_kf(&oldest);
            for (mp_id, _) in &kf.observations {
                if let Some(mp) = self.points.get_mut(mp_id) {
                    mp.observers.remove(&oldest);
                    if mp.observers.is_empty() {
                        let descriptor = mp.descriptor;
                        self.points.remove(mp_id);
                        // Re-observations start a fresh point.
                        self.landmark_to_mp.retain(|_, v| v != mp_id);
                        let _ = descriptor;
                    }
                }
            }
            evicted.push(oldest);
        }
        evicted
    }

    /// Communication cycle: absorb acks and neighborhoods from the downlink,
    /// then upload outbox entities within the uplink's currently available
    /// bandwidth budget (anything unsent stays dirty).
    pub fn sync(&mut self, now: f64, uplink: &mut Link, downlink: &mut Link) {
        for envelope in downlink.poll(now) {
            match envelope.kind {
                PayloadKind::Ack => {
                    if let Some(ack) = wire::decode::<wire::AckMessage>(&envelope) {
                        for id in ack.keyframes {
                            self.outbox_kfs.remove(&id);
                            self.last_sent_kf.remove(&id);
                        }
                        for id in ack.points {
                            self.outbox_mps.remove(&id);
                            self.last_sent_mp.remove(&id);
                        }
                    }
                }
                PayloadKind::NeighborhoodReply => {
                    if let Some(n) = wire::decode::<wire::NeighborhoodMessage>(&envelope) {
                        self.absorb_neighborhood(n);
                    }
                }
                PayloadKind::KeyFrame | PayloadKind::MapPoint => {}
            }
        }

        let mut budget = uplink.available_budget(now);
        let kf_ids: Vec<KfId> = self.outbox_kfs.keys().copied().collect();
        for id in kf_ids {
            if self.last_sent_kf.get(&id).is_some_and(|t| now - t < self.config.resend_interval)
            {
                continue;
            }
            let msg = wire::KfMessage { keyframe: self.outbox_kfs[&id].clone() };
            let env = wire::envelope(
                &msg,
                PayloadKind::KeyFrame,
                self.next_sequence,
                self.id,
                now,
            );
            if (env.size() as f64) > budget {
                break;
            }
            budget -= env.size() as f64;
            self.next_sequence += 1;
            match uplink.send(env, now) {
                Ok(()) => {
                    self.last_sent_kf.insert(id, now);
                }
                Err(NetSimError::LinkClosed) => return,
            }
        }
        let mp_ids: Vec<MpId> = self.outbox_mps.keys().copied().collect();
        for id in mp_ids {
            if self.last_sent_mp.get(&id).is_some_and(|t| now - t < self.config.resend_interval)
            {
                continue;
            }
            let msg = wire::MpMessage { point: self.outbox_mps[&id].clone() };
            let env = wire::envelope(
                &msg,
                PayloadKind::MapPoint,
                self.next_sequence,
                self.id,
                now,
            );
            if (env.size() as f64) > budget {
                break;
            }
            budget -= env.size() as f64;
            self.next_sequence += 1;
            match uplink.send(env, now) {
                Ok(()) => {
                    self.last_sent_mp.insert(id, now);
                }
                Err(NetSimError::LinkClosed) => return,
            }
        }
    }

    /// Inserts server-provided entities as fixed references, never counted
    /// against the N-cap and never optimized locally.
    pub fn absorb_neighborhood(&mut self, n: wire::NeighborhoodMessage) {
        for kf in n.keyframes {
            if !self.keyframes.contains_key(&kf.id) {
                self.fixed_keyframes.insert(kf.id, kf);
            }
        }
        for mp in n.points {
            if !self.points.contains_key(&mp.id) {
                self.fixed_points.insert(mp.id, mp);
            }
        }
    }

    fn fresh_kf_id(&mut self) -> KfId {
        let id = KfId { agent: self.id, seq: self.next_kf_seq };
        self.next_kf_seq += 1;
        id
    }

    fn fresh_mp_id(&mut self) -> MpId {
        let id = MpId { agent: self.id, seq: self.next_mp_seq };
        self.next_mp_seq += 1;
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{self, FrameLabel, Trajectory};
    use crate::netsim::LinkConfig;
    use crate::worldsim::{self, ObserveConfig, World, Zone};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480)
    }

    fn dense_world(seed: u64) -> World {
        worldsim::generate_world(
            seed,
            &[Zone { x: (0.0, 60.0), y: (0.0, 60.0), z: (0.0, 30.0), density: 0.004 }],
        )
    }

    fn clean_config() -> ObserveConfig {
        ObserveConfig {
            pixel_sigma: 0.0,
            mismatch_rate: 0.0,
            descriptor_flip_rate: 0.0,
            max_features: 400,
            ..Default::default()
        }
    }

    fn frame_at(world: &World, position: Vec3, forward: Vec3, t: f64, cfg: &ObserveConfig) -> FrameObservation {
        let pose = worldsim::camera_pose(position, forward);
        worldsim::observe(world, t, &pose, 0, &camera(), cfg, (t * 1000.0) as u64)
    }

    #[test]
    fn initialize_noiseless_exact() {
        let world = dense_world(1);
        let cfg = clean_config();
        let f1 = frame_at(&world, Vec3::new(10.0, 30.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.0, &cfg);
        let f2 = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.1, &cfg);
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        agent.initialize(&f1, &f2).unwrap();
        assert!(agent.points.len() >= 30);
        // Unit baseline by construction.
        let kf2 = agent.keyframes.values().nth(1).unwrap();
        assert!((kf2.pose.center().norm() - 1.0).abs() < 1e-9);
        // Reprojection residuals vanish on noiseless input.
        let mut max_err: f64 = 0.0;
        for kf in agent.keyframes.values() {
            for (mp, px) in &kf.observations {
                let p_cam = kf.pose.transform_point(&agent.points[mp].position);
                let proj = geometry::project(&camera(), &p_cam).unwrap();
                max_err = max_err.max((proj - px).norm());
            }
        }
        assert!(max_err < 1e-7, "max reprojection residual {max_err}");
    }

    #[test]
    fn initialize_identical_frames_rejected() {
        let world = dense_world(2);
        let cfg = clean_config();
        let f = frame_at(&world, Vec3::new(10.0, 30.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.0, &cfg);
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        assert_eq!(agent.initialize(&f, &f), Err(AgentError::InsufficientParallax));
    }

    #[test]
    fn initialize_with_noise_bounded_residual() {
        let world = dense_world(3);
        let cfg = ObserveConfig { pixel_sigma: 1.0, ..clean_config() };
        let f1 = frame_at(&world, Vec3::new(10.0, 30.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.0, &cfg);
        let f2 = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.1, &cfg);
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        agent.initialize(&f1, &f2).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for kf in agent.keyframes.values() {
            for (mp, px) in &kf.observations {
                let p_cam = kf.pose.transform_point(&agent.points[mp].position);
                sum += (geometry::project(&camera(), &p_cam).unwrap() - px).norm();
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 2.0, "mean reprojection residual {mean}");
    }

    #[test]
    fn straight_line_tracking_accuracy() {
        // Noiseless straight line; oracle is Sim3 alignment to ground truth
        // (scale is unobservable).
        let world = dense_world(4);
        let cfg = clean_config();
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        let mut gt = Vec::new();
        for i in 0..12 {
            // Mildly curved path: collinear centers would make the Sim3
            // alignment oracle degenerate.
            let pos = Vec3::new(
                8.0 + 0.05 * (i as f64 * 0.7).sin(),
                20.0 + 0.5 * i as f64,
                12.0 + 0.04 * (i as f64 * 0.9).cos(),
            );
            let t = i as f64 * 0.1;
            let frame = frame_at(&world, pos, Vec3::new(1.0, 0.0, 0.0), t, &cfg);
            match agent.step(&frame) {
                Ok(_) => gt.push((t, frame.true_pose)),
                // Early frames may lack parallax; the caller retries later.
                Err(AgentError::InsufficientParallax) => continue,
                Err(e) => panic!("step {i} failed: {e}"),
            }
        }
        assert_eq!(agent.mode, AgentMode::Tracking);
        assert!(gt.len() >= 8, "only {} frames tracked", gt.len());
        let est = Trajectory::new(agent.trajectory.clone(), FrameLabel::MapLocal);
        let gt = Trajectory::new(gt, FrameLabel::World);
        let report = eval::evaluate(&est, &gt, 0.02).unwrap();
        assert!(report.rmse_m < 1e-6, "aligned error {}", report.rmse_m);
    }

    #[test]
    fn kf_decision_rules() {
        let world = dense_world(5);
        let cfg = clean_config();
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        let f1 = frame_at(&world, Vec3::new(10.0, 30.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.0, &cfg);
        let f2 = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.1, &cfg);
        agent.step(&f1).unwrap();
        agent.step(&f2).unwrap();
        assert_eq!(agent.mode, AgentMode::Tracking);
        // Same viewpoint as the last KF: everything still tracked, no KF.
        let f3 = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.2, &cfg);
        match agent.step(&f3).unwrap() {
            StepOutcome::Tracked { new_keyframe } => assert!(!new_keyframe),
            other => panic!("unexpected outcome {other:?}"),
        }
        // Frame gap rule forces a KF even without appearance change.
        for i in 0..agent.config.kf_max_gap {
            let t = 0.3 + i as f64 * 0.1;
            let f = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), t, &cfg);
            let out = agent.step(&f).unwrap();
            if i + 2 == agent.config.kf_max_gap {
                assert_eq!(out, StepOutcome::Tracked { new_keyframe: true });
            }
        }
    }

    #[test]
    fn tracking_lost_below_match_floor() {
        let world = dense_world(6);
        let cfg = clean_config();
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        let f1 = frame_at(&world, Vec3::new(10.0, 30.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.0, &cfg);
        let f2 = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.1, &cfg);
        agent.step(&f1).unwrap();
        agent.step(&f2).unwrap();
        // Point the camera out of the mapped area.
        let away =
            frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(-1.0, 0.0, 0.0), 0.2, &cfg);
        assert!(matches!(agent.step(&away), Err(AgentError::TrackingLost(_))));
        assert_eq!(agent.mode, AgentMode::Lost);
    }

    #[test]
    fn trim_evicts_oldest_and_dangling_points() {
        let world = dense_world(7);
        let cfg = clean_config();
        let mut agent = Agent::new(
            0,
            camera(),
            AgentConfig { n_cap: 5, kf_max_gap: 1, ..AgentConfig::default() },
        );
        let mut t = 0.0;
        let f1 = frame_at(&world, Vec3::new(10.0, 20.0, 12.0), Vec3::new(1.0, 0.0, 0.0), t, &cfg);
        t += 0.1;
        let f2 = frame_at(&world, Vec3::new(10.0, 21.0, 12.0), Vec3::new(1.0, 0.0, 0.0), t, &cfg);
        agent.step(&f1).unwrap();
        agent.step(&f2).unwrap();
        // kf_max_gap = 1 promotes every frame, quickly overflowing the cap.
        for i in 0..10 {
            t += 0.1;
            let y = 21.0 + 0.6 * (i + 1) as f64;
            let f = frame_at(&world, Vec3::new(10.0, y, 12.0), Vec3::new(1.0, 0.0, 0.0), t, &cfg);
            agent.step(&f).unwrap();
            assert!(agent.keyframes.len() <= 5, "cap exceeded: {}", agent.keyframes.len());
        }
        // Oldest KFs are gone.
        assert!(!agent.keyframes.contains_key(&KfId { agent: 0, seq: 0 }));
        // Every surviving point has at least one surviving observer.
        for mp in agent.points.values() {
            assert!(mp.observers.keys().any(|k| agent.keyframes.contains_key(k)));
        }
        assert!(agent.max_cycle_kfs <= 5);
    }

    #[test]
    fn sync_respects_budget_and_resends_until_acked() {
        let world = dense_world(8);
        let cfg = clean_config();
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        let f1 = frame_at(&world, Vec3::new(10.0, 30.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.0, &cfg);
        let f2 = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.1, &cfg);
        agent.step(&f1).unwrap();
        agent.step(&f2).unwrap();
        let (kf_dirty, mp_dirty) = agent.outbox_len();
        assert_eq!(kf_dirty, 2);
        assert!(mp_dirty >= 30);
        // Budget admits roughly one KF message.
        let kf_size =
            wire::payload_size(&wire::KfMessage {
                keyframe: agent.keyframes.values().next().unwrap().clone(),
            });
        let mut uplink = Link::new(LinkConfig {
            delay: 0.0,
            jitter: 0.0,
            drop_probability: 0.0,
            bandwidth: kf_size as f64 * 1.5,
            seed: 0,
        });
        let mut downlink = Link::new(LinkConfig::default());
        agent.sync(0.2, &mut uplink, &mut downlink);
        let sent = uplink.poll(f64::INFINITY).len();
        assert!(sent >= 1 && sent < kf_dirty + mp_dirty, "sent {sent}");
        // Nothing acked yet: outbox unchanged.
        assert_eq!(agent.outbox_len(), (kf_dirty, mp_dirty));
    }

    #[test]
    fn neighborhood_entities_are_fixed_and_uncapped() {
        let world = dense_world(9);
        let cfg = clean_config();
        let mut agent = Agent::new(0, camera(), AgentConfig::default());
        let f1 = frame_at(&world, Vec3::new(10.0, 30.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.0, &cfg);
        let f2 = frame_at(&world, Vec3::new(10.0, 31.0, 12.0), Vec3::new(1.0, 0.0, 0.0), 0.1, &cfg);
        agent.step(&f1).unwrap();
        agent.step(&f2).unwrap();
        let before = agent.keyframes.len();
        let foreign_kf = KeyFrame {
            id: KfId { agent: 9, seq: 0 },
            timestamp: 0.0,
            pose: SE3Pose::identity(),
            observations: vec![(MpId { agent: 9, seq: 0 }, Vec2::new(100.0, 100.0))],
            descriptors: vec![Descriptor::zero()],
            bow: None,
        };
        let foreign_mp = MapPoint {
            id: MpId { agent: 9, seq: 0 },
            position: Vec3::new(1.0, 2.0, 3.0),
            observers: [(foreign_kf.id, 0usize)].into_iter().collect(),
            descriptor: Descriptor::zero(),
        };
        agent.absorb_neighborhood(wire::NeighborhoodMessage {
            keyframes: vec![foreign_kf],
            points: vec![foreign_mp],
        });
        assert_eq!(agent.keyframes.len(), before);
        assert_eq!(agent.fixed_keyframes.len(), 1);
        assert_eq!(agent.fixed_points.len(), 1);
    }
}
