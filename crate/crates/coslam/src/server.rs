//! The central ground station: per-agent server maps with Sim(3) anchors, an
//! incremental keyframe database for place recognition, Sim(3) solving over
//! 3D-3D correspondences, intra-map loop closure, inter-map fusion, and the
//! essential-graph plus GBA correction pipeline.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;
use crate::geometry::{CameraIntrinsics, SE3Pose, Sim3Transform, Vec3};
use crate::map::{spanning_tree, CovisibilityGraph, KeyFrame, KfId, MapPoint, MpId};
use crate::netsim::{Envelope, Link, PayloadKind};
use crate::optim::{self, EssentialEdge, LMSettings, OptimError};
use crate::placerec::{KeyframeDatabase, VocabularyTree};
use crate::wire;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("unknown agent {0}")]
    UnknownAgent(u32),
    #[error("only {got} Sim3 inliers, need {needed}")]
    InsufficientInliers { got: usize, needed: usize },
    #[error("correction raised reprojection cost from {before} to {after}")]
    CostIncreased { before: f64, after: f64 },
    #[error("optimization failed: {0}")]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    /// Minimum 3D-3D correspondences before attempting a Sim3 solve.
    pub min_corr: usize,
    /// Minimum RANSAC inliers to accept a loop or fusion.
    pub accept_inliers: usize,
    pub ransac_iterations: usize,
    /// Inlier distance threshold (meters) after applying the candidate Sim3.
    pub inlier_tau: f64,
    /// BoW score floor for place-recognition candidates.
    pub min_bow_score: f64,
    /// Covisibility weight admitting an edge into the essential graph.
    pub covis_strong: u32,
    pub theta_covis: u32,
    /// Keyframes returned by a neighborhood query.
    pub neighborhood_n: usize,
    /// Hamming radius for 3D-3D descriptor correspondence.
    pub descriptor_match_max: u32,
    /// Same-agent KFs within this sequence distance are never candidates
    /// (they are trivially nearby in time).
    pub temporal_exclusion: u32,
    /// Candidates attempted per ingest before giving up on the keyframe.
    pub max_correction_attempts: usize,
    /// Ingests a map sits out after an attempted correction.
    pub correction_cooldown: u32,
    pub essential: LMSettings,
    pub gba: LMSettings,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            min_corr: 10,
            accept_inliers: 20,
            ransac_iterations: 200,
            inlier_tau: 0.3,
            min_bow_score: 0.3,
            covis_strong: 100,
            theta_covis: 15,
            neighborhood_n: 10,
            descriptor_match_max: 60,
            temporal_exclusion: 30,
            max_correction_attempts: 3,
            correction_cooldown: 5,
            essential: LMSettings::default().with_max_iterations(20),
            gba: LMSettings::default().with_max_iterations(20),
            seed: 0,
        }
    }
}

/// One server-side map: entities in a common frame plus the Sim(3) anchor of
/// every participating agent (local frame -> this map's frame).
#[derive(Debug, Clone)]
pub struct ServerMap {
    pub id: u64,
    pub agents: BTreeSet<u32>,
    pub keyframes: BTreeMap<KfId, KeyFrame>,
    pub points: BTreeMap<MpId, MapPoint>,
    pub covis: CovisibilityGraph,
    pub anchors: BTreeMap<u32, Sim3Transform>,
    /// Gauge keyframe held fixed in every optimization of this map.
    pub origin: Option<KfId>,
    /// Accepted loop and fusion edges, kept permanently in the essential
    /// graph so once-connected regions stay connected.
    pub extra_edges: Vec<(KfId, KfId)>,
}

impl ServerMap {
    fn new(id: u64, agent: u32) -> Self {
        let mut anchors = BTreeMap::new();
        anchors.insert(agent, Sim3Transform::identity());
        Self {
            id,
            agents: [agent].into_iter().collect(),
            keyframes: BTreeMap::new(),
            points: BTreeMap::new(),
            covis: CovisibilityGraph::default(),
            anchors,
            origin: None,
            extra_edges: Vec::new(),
        }
    }

    /// Sum of squared pixel reprojection errors over all observations with a
    /// live map point; the loop-closure contract compares this before/after.
    pub fn reprojection_cost(&self, k: &CameraIntrinsics) -> f64 {
        let mut cost = 0.0;
        for kf in self.keyframes.values() {
            for (mp, px) in &kf.observations {
                let Some(point) = self.points.get(mp) else { continue };
                let p_cam = kf.pose.transform_point(&point.position);
                if p_cam.z <= 0.0 {
                    continue;
                }
                if let Ok(proj) = crate::geometry::project(k, &p_cam) {
                    cost += (proj - px).norm_squared();
                }
            }
        }
        cost
    }
}

/// A place-recognition candidate pairing with its 3D-3D support.
#[derive(Debug, Clone)]
pub struct MatchCandidate {
    pub query: KfId,
    pub candidate: KfId,
    pub same_map: bool,
    pub bow_score: f64,
    /// Matched map-point id pairs (query side, candidate side).
    pub correspondences: Vec<(MpId, MpId)>,
    pub transform: Option<Sim3Transform>,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ServerEvent {
    KeyframeIngested { time: f64, agent: u32, kf: KfId, map: u64 },
    LoopClosure { time: f64, map: u64, query: KfId, matched: KfId, inliers: usize },
    MapFusion { time: f64, source: u64, target: u64, fused: u64, query: KfId, matched: KfId, inliers: usize },
}

pub struct Server {
    pub config: ServerConfig,
    camera: CameraIntrinsics,
    vocab: VocabularyTree,
    db: KeyframeDatabase,
    pub maps: BTreeMap<u64, ServerMap>,
    map_of_agent: BTreeMap<u32, u64>,
    next_map_id: u64,
    /// Merged map-point redirects (removed id -> kept id).
    redirect: BTreeMap<MpId, MpId>,
    /// Latest uploaded keyframe per agent with its local-frame pose; used to
    /// re-anchor the agent's frame after a map correction.
    last_local: BTreeMap<u32, (KfId, SE3Pose)>,
    /// Remaining cool-down ingests per map after a correction attempt.
    correction_block: BTreeMap<u64, u32>,
    rng: ChaCha8Rng,
    pub events: Vec<ServerEvent>,
    next_sequence: BTreeMap<u32, u64>,
}

impl Server {
    pub fn new(
        camera: CameraIntrinsics,
        vocab: VocabularyTree,
        agents: &[u32],
        config: ServerConfig,
    ) -> Self {
        let mut maps = BTreeMap::new();
        let mut map_of_agent = BTreeMap::new();
        for (i, agent) in agents.iter().enumerate() {
            let id = i as u64;
            maps.insert(id, ServerMap::new(id, *agent));
            map_of_agent.insert(*agent, id);
        }
        let next_map_id = maps.len() as u64;
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            camera,
            vocab,
            db: KeyframeDatabase::new(),
            maps,
            map_of_agent,
            next_map_id,
            redirect: BTreeMap::new(),
            last_local: BTreeMap::new(),
            correction_block: BTreeMap::new(),
            events: Vec::new(),
            next_sequence: BTreeMap::new(),
        }
    }

    pub fn map_of_agent(&self, agent: u32) -> Option<&ServerMap> {
        self.map_of_agent.get(&agent).and_then(|id| self.maps.get(id))
    }

    pub fn live_map_count(&self) -> usize {
        self.maps.len()
    }

    /// Processes one uplink message, replying with acks and neighborhoods on
    /// the agent's downlink.
    pub fn handle_envelope(
        &mut self,
        agent: u32,
        envelope: &Envelope,
        now: f64,
        downlink: &mut Link,
    ) -> Result<(), ServerError> {
        if !self.map_of_agent.contains_key(&agent) {
            return Err(ServerError::UnknownAgent(agent));
        }
        match envelope.kind {
            PayloadKind::KeyFrame => {
                let Some(msg) = wire::decode::<wire::KfMessage>(envelope) else {
                    return Ok(());
                };
                let kf_id = msg.keyframe.id;
                self.ingest_keyframe(agent, msg.keyframe, now)?;
                self.send(
                    agent,
                    downlink,
                    PayloadKind::Ack,
                    &wire::AckMessage { keyframes: vec![kf_id], points: vec![] },
                    now,
                );
                let neighborhood = self.neighborhood_query(agent);
                if !neighborhood.keyframes.is_empty() {
                    self.send(agent, downlink, PayloadKind::NeighborhoodReply, &neighborhood, now);
                }
            }
            PayloadKind::MapPoint => {
                let Some(msg) = wire::decode::<wire::MpMessage>(envelope) else {
                    return Ok(());
                };
                let mp_id = msg.point.id;
                self.ingest_map_point(agent, msg.point)?;
                self.send(
                    agent,
                    downlink,
                    PayloadKind::Ack,
                    &wire::AckMessage { keyframes: vec![], points: vec![mp_id] },
                    now,
                );
            }
            PayloadKind::Ack | PayloadKind::NeighborhoodReply => {}
        }
        Ok(())
    }

    fn send<T: Serialize>(
        &mut self,
        agent: u32,
        downlink: &mut Link,
        kind: PayloadKind,
        payload: &T,
        now: f64,
    ) {
        let seq = self.next_sequence.entry(agent).or_insert(0);
        let envelope = wire::envelope(payload, kind, *seq, u32::MAX, now);
        *seq += 1;
        // A closed downlink only means the agent runs standalone.
        let _ = downlink.send(envelope, now);
    }

    /// Inserts a keyframe into the owning agent's live map (idempotent by
    /// global id), updates the database, and runs loop/fusion detection.
    pub fn ingest_keyframe(
        &mut self,
        agent: u32,
        mut kf: KeyFrame,
        now: f64,
    ) -> Result<(), ServerError> {
        let map_id = *self.map_of_agent.get(&agent).ok_or(ServerError::UnknownAgent(agent))?;
        let is_update;
        {
            let map = self.maps.get_mut(&map_id).unwrap();
            is_update = map.keyframes.contains_key(&kf.id);
            // Rewrite observations of merged points.
            for (mp, _) in kf.observations.iter_mut() {
                if let Some(kept) = self.redirect.get(mp) {
                    *mp = *kept;
                }
            }
            let anchor = map.anchors[&agent];
            // Track only the newest local pose: anchor refreshes re-express
            // the agent frame on it.
            let newest = self
                .last_local
                .get(&agent)
                .map_or(true, |(id, _)| kf.id.seq >= id.seq);
            if newest {
                self.last_local.insert(agent, (kf.id, kf.pose));
            }
            kf.pose = anchor.transport_pose(&kf.pose);
            kf.bow = Some(self.vocab.transform(&kf.descriptors));
            let kf_id = kf.id;
            for (idx, (mp, _)) in kf.observations.iter().enumerate() {
                if let Some(point) = map.points.get_mut(mp) {
                    point.observers.insert(kf_id, idx);
                }
            }
            if !is_update {
                if map.origin.is_none() {
                    map.origin = Some(kf_id);
                }
                let _ = self.db.add_keyframe(map_id, kf_id, kf.bow.clone().unwrap());
            }
            map.keyframes.insert(kf_id, kf.clone());
            let snapshot = map.keyframes[&kf_id].clone();
            map.covis.refresh_for(&snapshot, &map.keyframes, &map.points, self.config.theta_covis);
            if !is_update {
                self.events.push(ServerEvent::KeyframeIngested {
                    time: now,
                    agent,
                    kf: kf_id,
                    map: map_id,
                });
            }
        }
        if is_update {
            // Refined re-upload: state absorbed, no re-detection.
            return Ok(());
        }
        // Corrections are throttled: after an attempted closure or fusion the
        // map sits out a few ingests so optimization cost stays bounded.
        if let Some(c) = self.correction_block.get_mut(&map_id) {
            if *c > 0 {
                *c -= 1;
                return Ok(());
            }
        }
        self.detect_and_correct(map_id, kf.id, now)?;
        Ok(())
    }

    /// Inserts or updates (by id) an uploaded map point, transformed through
    /// the agent's anchor.
    pub fn ingest_map_point(&mut self, agent: u32, mut mp: MapPoint) -> Result<(), ServerError> {
        let map_id = *self.map_of_agent.get(&agent).ok_or(ServerError::UnknownAgent(agent))?;
        let map = self.maps.get_mut(&map_id).unwrap();
        let id = self.redirect.get(&mp.id).copied().unwrap_or(mp.id);
        let anchor = map.anchors[&agent];
        if let Some(existing) = map.points.get_mut(&id) {
            // Refined re-upload. Merged points keep the merge-time estimate:
            // two agents would otherwise keep stomping each other's refinement.
            if id == mp.id {
                existing.position = anchor.apply(&mp.position);
                existing.descriptor = mp.descriptor;
            }
            return Ok(());
        }
        mp.position = anchor.apply(&mp.position);
        // Observers are rebuilt from ingested keyframes; the agent-side list
        // references its local window only.
        mp.observers = BTreeMap::new();
        for (kf_id, kf) in &map.keyframes {
            if let Some(idx) = kf.observations.iter().position(|(m, _)| *m == id) {
                mp.observers.insert(*kf_id, idx);
            }
        }
        mp.id = id;
        map.points.insert(id, mp);
        Ok(())
    }

    /// Place recognition for a new keyframe: BoW query over the whole
    /// database minus the covisible/temporal neighborhood, split into
    /// same-map (loop) and cross-map (fusion) candidates carrying 3D-3D
    /// correspondences.
    pub fn detect_candidates(&self, map_id: u64, kf_id: KfId) -> Vec<MatchCandidate> {
        let map = &self.maps[&map_id];
        let Some(kf) = map.keyframes.get(&kf_id) else { return Vec::new() };
        let Some(bow) = kf.bow.as_ref() else { return Vec::new() };
        let mut exclude: HashSet<KfId> = HashSet::new();
        exclude.insert(kf_id);
        for (other, _) in map.covis.neighbors(&kf_id) {
            exclude.insert(other);
        }
        for other in map.keyframes.keys() {
            if other.agent == kf_id.agent
                && other.seq.abs_diff(kf_id.seq) <= self.config.temporal_exclusion
            {
                exclude.insert(*other);
            }
        }
        let hits = self.db.query(bow, &exclude, self.config.min_bow_score);
        let mut out = Vec::new();
        for hit in hits {
            let Some(other_map) = self.maps.get(&hit.map_id) else { continue };
            let Some(other_kf) = other_map.keyframes.get(&hit.kf_id) else { continue };
            let correspondences = self.match_points(map, kf, other_map, other_kf);
            if correspondences.len() < self.config.min_corr {
                continue;
            }
            out.push(MatchCandidate {
                query: kf_id,
                candidate: hit.kf_id,
                same_map: hit.map_id == map_id,
                bow_score: hit.score,
                correspondences,
                transform: None,
                inliers: 0,
            });
        }
        out
    }

    /// Mutual-nearest descriptor matching between the map points observed by
    /// two keyframes.
    fn match_points(
        &self,
        map_q: &ServerMap,
        kf_q: &KeyFrame,
        map_c: &ServerMap,
        kf_c: &KeyFrame,
    ) -> Vec<(MpId, MpId)> {
        let q_points: Vec<&MapPoint> = kf_q
            .observations
            .iter()
            .filter_map(|(mp, _)| map_q.points.get(mp))
            .collect();
        let c_points: Vec<&MapPoint> = kf_c
            .observations
            .iter()
            .filter_map(|(mp, _)| map_c.points.get(mp))
            .collect();
        let nearest = |from: &MapPoint, pool: &[&MapPoint]| -> Option<(MpId, u32)> {
            pool.iter()
                .map(|p| (p.id, from.descriptor.distance(&p.descriptor)))
                .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        };
        let mut pairs = Vec::new();
        for q in &q_points {
            let Some((c_id, d)) = nearest(q, &c_points) else { continue };
            if d > self.config.descriptor_match_max {
                continue;
            }
            let back = c_points.iter().find(|p| p.id == c_id).unwrap();
            if let Some((q_back, _)) = nearest(back, &q_points) {
                if q_back == q.id {
                    pairs.push((q.id, c_id));
                }
            }
        }
        pairs.sort();
        pairs.dedup();
        pairs
    }

    /// RANSAC + Umeyama over the candidate's 3D-3D correspondences; fills in
    /// the transform mapping query-side coordinates onto candidate-side ones.
    pub fn solve_sim3(&mut self, candidate: &mut MatchCandidate) -> Result<(), ServerError> {
        let map_q = self.map_containing(&candidate.query);
        let map_c = self.map_containing(&candidate.candidate);
        let (Some(map_q), Some(map_c)) = (map_q, map_c) else {
            return Err(ServerError::InsufficientInliers { got: 0, needed: self.config.min_corr });
        };
        let src: Vec<Vec3> = candidate
            .correspondences
            .iter()
            .map(|(q, _)| self.maps[&map_q].points[q].position)
            .collect();
        let dst: Vec<Vec3> = candidate
            .correspondences
            .iter()
            .map(|(_, c)| self.maps[&map_c].points[c].position)
            .collect();
        let (transform, inliers) = solve_sim3_ransac(
            &src,
            &dst,
            self.config.min_corr,
            self.config.accept_inliers,
            self.config.ransac_iterations,
            self.config.inlier_tau,
            &mut self.rng,
        )?;
        candidate.transform = Some(transform);
        candidate.inliers = inliers;
        Ok(())
    }

    fn map_containing(&self, kf: &KfId) -> Option<u64> {
        self.maps.values().find(|m| m.keyframes.contains_key(kf)).map(|m| m.id)
    }

    /// Runs detection and, on an accepted candidate, loop closure or fusion.
    /// At most one correction per ingested keyframe.
    fn detect_and_correct(&mut self, map_id: u64, kf_id: KfId, now: f64) -> Result<(), ServerError> {
        let mut candidates = self.detect_candidates(map_id, kf_id);
        // Prefer cross-map fusion opportunities, then by BoW score.
        candidates.sort_by(|a, b| {
            a.same_map
                .cmp(&b.same_map)
                .then(b.bow_score.total_cmp(&a.bow_score))
                .then(a.candidate.cmp(&b.candidate))
        });
        let mut attempts = 0;
        for mut cand in candidates {
            if attempts >= self.config.max_correction_attempts {
                break;
            }
            if self.solve_sim3(&mut cand).is_err() {
                continue;
            }
            attempts += 1;
            let result = if cand.same_map {
                self.close_loop(map_id, &cand, now).map(|_| ())
            } else {
                self.fuse_maps(&cand, now).map(|_| ())
            };
            match result {
                Ok(()) => {
                    let live = self.map_containing(&kf_id).unwrap_or(map_id);
                    self.correction_block.insert(live, self.config.correction_cooldown);
                    return Ok(());
                }
                // Rolled back; try the next candidate.
                Err(ServerError::Optim(_)) | Err(ServerError::CostIncreased { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        if attempts > 0 {
            self.correction_block.insert(map_id, self.config.correction_cooldown);
        }
        Ok(())
    }

    /// Corrects the query neighborhood with the loop Sim3, merges duplicate
    /// points, optimizes the essential graph, then runs GBA. On optimizer
    /// failure the map is restored bit-identically.
    pub fn close_loop(
        &mut self,
        map_id: u64,
        candidate: &MatchCandidate,
        now: f64,
    ) -> Result<(), ServerError> {
        let transform = candidate.transform.expect("candidate must be solved");
        let snapshot = self.maps[&map_id].clone();
        let redirect_snapshot = self.redirect.clone();
        let result = self.close_loop_inner(map_id, candidate, transform);
        match result {
            Ok(()) => {
                self.events.push(ServerEvent::LoopClosure {
                    time: now,
                    map: map_id,
                    query: candidate.query,
                    matched: candidate.candidate,
                    inliers: candidate.inliers,
                });
                Ok(())
            }
            Err(e) => {
                self.maps.insert(map_id, snapshot);
                self.redirect = redirect_snapshot;
                Err(e)
            }
        }
    }

    fn close_loop_inner(
        &mut self,
        map_id: u64,
        candidate: &MatchCandidate,
        transform: Sim3Transform,
    ) -> Result<(), ServerError> {
        let cost_before = self.maps[&map_id].reprojection_cost(&self.camera);
        let pre_poses: BTreeMap<KfId, SE3Pose> = self.maps[&map_id]
            .keyframes
            .iter()
            .map(|(id, kf)| (*id, kf.pose))
            .collect();

        // 1. Rigid (Sim3) correction of the query-side neighborhood.
        let mut corrected: BTreeSet<KfId> = [candidate.query].into_iter().collect();
        for (other, _) in self.maps[&map_id].covis.neighbors(&candidate.query) {
            corrected.insert(other);
        }
        {
            let map = self.maps.get_mut(&map_id).unwrap();
            for id in &corrected {
                let kf = map.keyframes.get_mut(id).unwrap();
                kf.pose = transform.transport_pose(&kf.pose);
            }
            // Points owned exclusively by the corrected neighborhood move
            // with it.
            let moved: Vec<MpId> = map
                .points
                .values()
                .filter(|mp| {
                    let obs: Vec<&KfId> = mp
                        .observers
                        .keys()
                        .filter(|k| map.keyframes.contains_key(k))
                        .collect();
                    !obs.is_empty() && obs.iter().all(|k| corrected.contains(k))
                })
                .map(|mp| mp.id)
                .collect();
            for id in moved {
                let mp = map.points.get_mut(&id).unwrap();
                mp.position = transform.apply(&mp.position);
            }
        }

        // 2. Merge the matched duplicate points, older id wins.
        self.merge_points(map_id, &candidate.correspondences);

        // 3. Essential graph over Sim3 nodes: spanning tree + strong
        // covisibility + the loop edge, measured from pre-correction
        // geometry except the loop constraint itself.
        let map = &self.maps[&map_id];
        let kf_ids: BTreeSet<KfId> = map.keyframes.keys().copied().collect();
        let mut edges: Vec<EssentialEdge> = Vec::new();
        let mut edge_set: BTreeSet<(KfId, KfId)> = BTreeSet::new();
        for (a, b) in spanning_tree(&kf_ids, &map.covis) {
            edge_set.insert(CovisibilityGraph::key(a, b));
            edges.push(relative_edge(&pre_poses, a, b, 1.0));
        }
        for ((a, b), w) in &map.covis.edges {
            if *w >= self.config.covis_strong && edge_set.insert((*a, *b)) {
                edges.push(relative_edge(&pre_poses, *a, *b, 1.0));
            }
        }
        for (a, b) in &map.extra_edges {
            if pre_poses.contains_key(a)
                && pre_poses.contains_key(b)
                && edge_set.insert(CovisibilityGraph::key(*a, *b))
            {
                edges.push(relative_edge(&pre_poses, *a, *b, 1.0));
            }
        }
        odometry_edges(&pre_poses, &mut edge_set, &mut edges);
        // Loop edge: the corrected query pose against the matched side.
        let q_corr = Sim3Transform::from_se3(&pre_poses[&candidate.query])
            .compose(&transform.inverse());
        let m_node = Sim3Transform::from_se3(&pre_poses[&candidate.candidate]);
        edges.push(EssentialEdge {
            from: candidate.candidate,
            to: candidate.query,
            measured: q_corr.compose(&m_node.inverse()).inverse(),
            weight: 1.0,
        });

        let mut nodes: BTreeMap<KfId, Sim3Transform> = map
            .keyframes
            .iter()
            .map(|(id, kf)| (*id, Sim3Transform::from_se3(&kf.pose)))
            .collect();
        let origin = map.origin.unwrap_or(*map.keyframes.keys().next().unwrap());
        let mut fixed: BTreeSet<KfId> = [origin, candidate.candidate].into_iter().collect();
        fixed.retain(|id| nodes.contains_key(id));
        optim::essential_graph_optimize(&mut nodes, &edges, &fixed, &self.config.essential)?;
        self.apply_sim3_nodes(map_id, &nodes);

        // 4. Global BA, then the non-increase contract on reprojection cost.
        self.global_ba(map_id)?;
        let cost_after = self.maps[&map_id].reprojection_cost(&self.camera);
        if cost_after > cost_before * (1.0 + 1e-9) + 1e-9 {
            return Err(ServerError::CostIncreased { before: cost_before, after: cost_after });
        }
        self.maps
            .get_mut(&map_id)
            .unwrap()
            .extra_edges
            .push((candidate.candidate, candidate.query));
        Ok(())
    }

    /// Applies optimized Sim3 nodes back onto SE3 keyframe poses and moves
    /// each point with its reference (first observing) keyframe.
    fn apply_sim3_nodes(&mut self, map_id: u64, nodes: &BTreeMap<KfId, Sim3Transform>) {
        let map = self.maps.get_mut(&map_id).unwrap();
        let old_nodes: BTreeMap<KfId, Sim3Transform> = map
            .keyframes
            .iter()
            .map(|(id, kf)| (*id, Sim3Transform::from_se3(&kf.pose)))
            .collect();
        for (id, kf) in map.keyframes.iter_mut() {
            let n = &nodes[id];
            kf.pose = SE3Pose::new(n.rotation, n.translation / n.scale);
        }
        for mp in map.points.values_mut() {
            let Some(reference) =
                mp.observers.keys().find(|k| old_nodes.contains_key(k)).copied()
            else {
                continue;
            };
            // p_new = node_new^{-1}(node_old(p_old)): the camera-frame
            // coordinates under the reference view are preserved.
            let moved = nodes[&reference].inverse().apply(&old_nodes[&reference].apply(&mp.position));
            mp.position = moved;
        }
        // Re-anchor each agent's local frame on its latest corrected
        // keyframe so future uploads land in the corrected map.
        let agents: Vec<u32> = map.agents.iter().copied().collect();
        for agent in agents {
            let Some((kf, local)) = self.last_local.get(&agent) else { continue };
            let Some(node) = nodes.get(kf) else { continue };
            map.anchors.insert(agent, node.inverse().compose(&Sim3Transform::from_se3(local)));
        }
    }

    fn merge_points(&mut self, map_id: u64, pairs: &[(MpId, MpId)]) {
        let map = self.maps.get_mut(&map_id).unwrap();
        for (a, b) in pairs {
            let a = self.redirect.get(a).copied().unwrap_or(*a);
            let b = self.redirect.get(b).copied().unwrap_or(*b);
            if a == b {
                continue;
            }
            let (keep, drop) = if a < b { (a, b) } else { (b, a) };
            if !map.points.contains_key(&keep) || !map.points.contains_key(&drop) {
                continue;
            }
            let dropped = map.points.remove(&drop).unwrap();
            // Rewrite observations in the dropped point's keyframes.
            for (kf_id, _) in &dropped.observers {
                if let Some(kf) = map.keyframes.get_mut(kf_id) {
                    for (mp, _) in kf.observations.iter_mut() {
                        if *mp == drop {
                            *mp = keep;
                        }
                    }
                }
            }
            let kept = map.points.get_mut(&keep).unwrap();
            for (kf_id, idx) in dropped.observers {
                kept.observers.entry(kf_id).or_insert(idx);
            }
            self.redirect.insert(drop, keep);
            // Keep the redirect map flat (old -> final id).
            let stale: Vec<MpId> = self
                .redirect
                .iter()
                .filter(|(_, v)| **v == drop)
                .map(|(k, _)| *k)
                .collect();
            for s in stale {
                self.redirect.insert(s, keep);
            }
        }
        // Covisibility changes where observations were rewritten.
        let ids: Vec<KfId> = map.keyframes.keys().copied().collect();
        for id in ids {
            let kf = map.keyframes[&id].clone();
            map.covis.refresh_for(&kf, &map.keyframes, &map.points, self.config.theta_covis);
        }
    }

    /// Joint bundle adjustment over every entity of a map; the origin
    /// keyframe provides the gauge.
    pub fn global_ba(&mut self, map_id: u64) -> Result<(), ServerError> {
        let map = &self.maps[&map_id];
        if map.keyframes.len() < 2 {
            return Ok(());
        }
        let mut poses: BTreeMap<KfId, SE3Pose> =
            map.keyframes.iter().map(|(id, kf)| (*id, kf.pose)).collect();
        let mut points: BTreeMap<MpId, Vec3> =
            map.points.iter().map(|(id, mp)| (*id, mp.position)).collect();
        let mut observations: Vec<(KfId, MpId, crate::geometry::Vec2)> = Vec::new();
        for (kf_id, kf) in &map.keyframes {
            for (mp, px) in &kf.observations {
                if points.contains_key(mp) {
                    observations.push((*kf_id, *mp, *px));
                }
            }
        }
        let origin = map.origin.unwrap_or(*map.keyframes.keys().next().unwrap());
        let fixed: BTreeSet<KfId> = [origin].into_iter().collect();
        optim::bundle_adjust(
            &mut poses,
            &mut points,
            &observations,
            &fixed,
            &BTreeSet::new(),
            &self.camera,
            &self.config.gba,
        )?;
        let map = self.maps.get_mut(&map_id).unwrap();
        for (id, kf) in map.keyframes.iter_mut() {
            kf.pose = poses[id];
        }
        for (id, mp) in map.points.iter_mut() {
            mp.position = points[id];
        }
        Ok(())
    }

    /// Replaces the two maps containing the candidate's endpoints with a
    /// fused map in the earlier (lower-id) map's frame.
    pub fn fuse_maps(&mut self, candidate: &MatchCandidate, now: f64) -> Result<u64, ServerError> {
        let transform = candidate.transform.expect("candidate must be solved");
        let map_q = self.map_containing(&candidate.query).expect("query map");
        let map_c = self.map_containing(&candidate.candidate).expect("candidate map");
        assert_ne!(map_q, map_c, "fuse_maps requires a cross-map candidate");
        // The solved transform maps query-map coordinates onto candidate-map
        // coordinates. The fused frame is the older map's.
        let (target_id, source_id, src_to_tgt) = if map_c < map_q {
            (map_c, map_q, transform)
        } else {
            (map_q, map_c, transform.inverse())
        };
        let target = &self.maps[&target_id];
        let source = &self.maps[&source_id];

        let fused_id = self.next_map_id;
        let mut fused = ServerMap::new(fused_id, *target.agents.iter().next().unwrap());
        fused.agents = target.agents.union(&source.agents).copied().collect();
        fused.anchors = target.anchors.clone();
        for (agent, anchor) in &source.anchors {
            fused.anchors.insert(*agent, src_to_tgt.compose(anchor));
        }
        fused.keyframes = target.keyframes.clone();
        fused.points = target.points.clone();
        fused.covis = target.covis.clone();
        fused.origin = target.origin.or(source.origin);
        fused.extra_edges = target.extra_edges.clone();
        fused.extra_edges.extend(source.extra_edges.iter().copied());
        fused.extra_edges.push((candidate.candidate, candidate.query));
        for (id, kf) in &source.keyframes {
            let mut kf = kf.clone();
            kf.pose = src_to_tgt.transport_pose(&kf.pose);
            fused.keyframes.insert(*id, kf);
        }
        for (id, mp) in &source.points {
            let mut mp = mp.clone();
            mp.position = src_to_tgt.apply(&mp.position);
            fused.points.insert(*id, mp);
        }
        for ((a, b), w) in &source.covis.edges {
            fused.covis.set(*a, *b, *w);
        }
        let kf_total = fused.keyframes.len();
        let mp_total = fused.points.len();

        // Stage the fused map, merge duplicates, optimize; commit only if
        // everything succeeds.
        let redirect_snapshot = self.redirect.clone();
        self.maps.insert(fused_id, fused);
        let correspondences: Vec<(MpId, MpId)> = candidate
            .correspondences
            .iter()
            .map(|(q, c)| (*q, *c))
            .collect();
        self.merge_points(fused_id, &correspondences);
        let merged = mp_total - self.maps[&fused_id].points.len();
        assert_eq!(self.maps[&fused_id].keyframes.len(), kf_total);
        assert!(merged <= correspondences.len());

        let result = (|| -> Result<(), ServerError> {
            self.essential_after_fusion(fused_id, candidate)?;
            self.global_ba(fused_id)?;
            Ok(())
        })();
        if let Err(e) = result {
            self.maps.remove(&fused_id);
            self.redirect = redirect_snapshot;
            return Err(e);
        }

        // Commit: retire the constituent maps.
        self.maps.remove(&target_id);
        self.maps.remove(&source_id);
        self.db.reassign_map(target_id, fused_id);
        self.db.reassign_map(source_id, fused_id);
        for agent in self.maps[&fused_id].agents.clone() {
            self.map_of_agent.insert(agent, fused_id);
        }
        self.next_map_id += 1;
        self.events.push(ServerEvent::MapFusion {
            time: now,
            source: source_id,
            target: target_id,
            fused: fused_id,
            query: candidate.query,
            matched: candidate.candidate,
            inliers: candidate.inliers,
        });
        debug_assert!(
            !self.maps.is_empty() && self.maps.len() <= self.map_of_agent.len(),
            "registry cardinality violated"
        );
        Ok(fused_id)
    }

    fn essential_after_fusion(
        &mut self,
        map_id: u64,
        candidate: &MatchCandidate,
    ) -> Result<(), ServerError> {
        let map = &self.maps[&map_id];
        let poses: BTreeMap<KfId, SE3Pose> =
            map.keyframes.iter().map(|(id, kf)| (*id, kf.pose)).collect();
        let kf_ids: BTreeSet<KfId> = map.keyframes.keys().copied().collect();
        let mut edges: Vec<EssentialEdge> = Vec::new();
        let mut edge_set: BTreeSet<(KfId, KfId)> = BTreeSet::new();
        for (a, b) in spanning_tree(&kf_ids, &map.covis) {
            edge_set.insert(CovisibilityGraph::key(a, b));
            edges.push(relative_edge(&poses, a, b, 1.0));
        }
        for ((a, b), w) in &map.covis.edges {
            if *w >= self.config.covis_strong && edge_set.insert((*a, *b)) {
                edges.push(relative_edge(&poses, *a, *b, 1.0));
            }
        }
        // Loop/fusion edges (including the new one) from the already
        // transform-consistent poses.
        for (a, b) in &map.extra_edges {
            if poses.contains_key(a)
                && poses.contains_key(b)
                && edge_set.insert(CovisibilityGraph::key(*a, *b))
            {
                edges.push(relative_edge(&poses, *a, *b, 1.0));
            }
        }
        odometry_edges(&poses, &mut edge_set, &mut edges);
        let mut nodes: BTreeMap<KfId, Sim3Transform> = poses
            .iter()
            .map(|(id, p)| (*id, Sim3Transform::from_se3(p)))
            .collect();
        let origin = map.origin.unwrap_or(*map.keyframes.keys().next().unwrap());
        let mut fixed: BTreeSet<KfId> = [origin, candidate.candidate].into_iter().collect();
        fixed.retain(|id| nodes.contains_key(id));
        optim::essential_graph_optimize(&mut nodes, &edges, &fixed, &self.config.essential)?;
        self.apply_sim3_nodes(map_id, &nodes);
        Ok(())
    }

    /// Top-n keyframes by covisibility with the agent's latest keyframe,
    /// excluding the agent's own recent window, expressed in the agent's
    /// local frame.
    pub fn neighborhood_query(&self, agent: u32) -> wire::NeighborhoodMessage {
        let Some(map) = self.map_of_agent(agent) else {
            return wire::NeighborhoodMessage::default();
        };
        if self.config.neighborhood_n == 0 {
            return wire::NeighborhoodMessage::default();
        }
        let Some(latest) = map
            .keyframes
            .keys()
            .filter(|id| id.agent == agent)
            .max_by_key(|id| id.seq)
            .copied()
        else {
            return wire::NeighborhoodMessage::default();
        };
        let mut ranked: Vec<(KfId, u32)> = map
            .covis
            .neighbors(&latest)
            .into_iter()
            .filter(|(id, _)| {
                // The agent still holds its own recent keyframes locally.
                !(id.agent == agent && latest.seq.saturating_sub(id.seq) < 60)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(self.config.neighborhood_n);
        let inverse_anchor = map.anchors[&agent].inverse();
        let mut keyframes = Vec::new();
        let mut point_ids: BTreeSet<MpId> = BTreeSet::new();
        for (id, _) in &ranked {
            let mut kf = map.keyframes[id].clone();
            kf.pose = inverse_anchor.transport_pose(&kf.pose);
            for (mp, _) in &kf.observations {
                point_ids.insert(*mp);
            }
            keyframes.push(kf);
        }
        let points: Vec<MapPoint> = point_ids
            .iter()
            .filter_map(|id| map.points.get(id))
            .map(|mp| {
                let mut mp = mp.clone();
                mp.position = inverse_anchor.apply(&mp.position);
                mp
            })
            .collect();
        wire::NeighborhoodMessage { keyframes, points }
    }

    /// Keyframe snapshot CSV: agent, sequence, then the standard pose row.
    pub fn keyframes_csv(&self) -> String {
        let mut out = String::from("map,agent,seq,timestamp,tx,ty,tz,qx,qy,qz,qw\n");
        for map in self.maps.values() {
            for (id, kf) in &map.keyframes {
                let c = kf.pose.center();
                let q = kf.pose.rotation.inverse();
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                    map.id, id.agent, id.seq, kf.timestamp, c.x, c.y, c.z, q.i, q.j, q.k, q.w
                ));
            }
        }
        out
    }

    pub fn map_points_csv(&self) -> String {
        let mut out = String::from("map,agent,seq,x,y,z,observers\n");
        for map in self.maps.values() {
            for (id, mp) in &map.points {
                out.push_str(&format!(
                    "{},{},{},{:.9},{:.9},{:.9},{}\n",
                    map.id,
                    id.agent,
                    id.seq,
                    mp.position.x,
                    mp.position.y,
                    mp.position.z,
                    mp.observers.len()
                ));
            }
        }
        out
    }

    /// Registry and event-log snapshot as JSON.
    pub fn registry_json(&self) -> String {
        #[derive(Serialize)]
        struct AnchorOut {
            agent: u32,
            qx: f64,
            qy: f64,
            qz: f64,
            qw: f64,
            tx: f64,
            ty: f64,
            tz: f64,
            scale: f64,
        }
        #[derive(Serialize)]
        struct MapOut {
            id: u64,
            agents: Vec<u32>,
            keyframes: usize,
            points: usize,
            anchors: Vec<AnchorOut>,
        }
        #[derive(Serialize)]
        struct Registry<'a> {
            maps: Vec<MapOut>,
            events: &'a [ServerEvent],
        }
        let maps = self
            .maps
            .values()
            .map(|m| MapOut {
                id: m.id,
                agents: m.agents.iter().copied().collect(),
                keyframes: m.keyframes.len(),
                points: m.points.len(),
                anchors: m
                    .anchors
                    .iter()
                    .map(|(agent, a)| AnchorOut {
                        agent: *agent,
                        qx: a.rotation.i,
                        qy: a.rotation.j,
                        qz: a.rotation.k,
                        qw: a.rotation.w,
                        tx: a.translation.x,
                        ty: a.translation.y,
                        tz: a.translation.z,
                        scale: a.scale,
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&Registry { maps, events: &self.events })
            .expect("registry serializes")
    }

    /// Estimated trajectory of one agent from its keyframes in the fused
    /// frame (server-side view, after corrections).
    pub fn agent_keyframe_trajectory(&self, agent: u32) -> Vec<(f64, SE3Pose)> {
        let Some(map) = self.map_of_agent(agent) else { return Vec::new() };
        let mut out: Vec<(f64, SE3Pose)> = map
            .keyframes
            .values()
            .filter(|kf| kf.id.agent == agent)
            .map(|kf| (kf.timestamp, kf.pose))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }
}

fn relative_edge(poses: &BTreeMap<KfId, SE3Pose>, from: KfId, to: KfId, weight: f64) -> EssentialEdge {
    let t_from = Sim3Transform::from_se3(&poses[&from]);
    let t_to = Sim3Transform::from_se3(&poses[&to]);
    EssentialEdge { from, to, measured: t_from.compose(&t_to.inverse()), weight }
}

/// Sequential edges between consecutive keyframes of the same agent. These
/// keep every agent's track connected even where covisibility alone would
/// leave islands (e.g. while a bandwidth-limited link is still delivering the
/// points shared with the rest of the map).
fn odometry_edges(
    poses: &BTreeMap<KfId, SE3Pose>,
    edge_set: &mut BTreeSet<(KfId, KfId)>,
    edges: &mut Vec<EssentialEdge>,
) {
    let mut prev: Option<KfId> = None;
    for id in poses.keys() {
        if let Some(p) = prev {
            if p.agent == id.agent && edge_set.insert(CovisibilityGraph::key(p, *id)) {
                edges.push(relative_edge(poses, p, *id, 1.0));
            }
        }
        prev = Some(*id);
    }
}

/// Standalone RANSAC Sim3 solver over 3D-3D correspondences; returns the
/// refit transform and its inlier count.
pub fn solve_sim3_ransac<R: Rng>(
    src: &[Vec3],
    dst: &[Vec3],
    min_corr: usize,
    accept_inliers: usize,
    iterations: usize,
    tau: f64,
    rng: &mut R,
) -> Result<(Sim3Transform, usize), ServerError> {
    assert_eq!(src.len(), dst.len());
    let n = src.len();
    if n < min_corr {
        return Err(ServerError::InsufficientInliers { got: n, needed: min_corr });
    }
    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..iterations {
        let mut idx = [0usize; 3];
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..n);
        }
        if idx[0] == idx[1] || idx[0] == idx[2] || idx[1] == idx[2] {
            continue;
        }
        let s: Vec<Vec3> = idx.iter().map(|i| src[*i]).collect();
        let d: Vec<Vec3> = idx.iter().map(|i| dst[*i]).collect();
        let Ok(t) = eval::umeyama_alignment(&s, &d) else { continue };
        let inliers: Vec<usize> = (0..n)
            .filter(|i| (dst[*i] - t.apply(&src[*i])).norm() < tau)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }
    if best_inliers.len() < accept_inliers.max(3) {
        return Err(ServerError::InsufficientInliers {
            got: best_inliers.len(),
            needed: accept_inliers,
        });
    }
    let s: Vec<Vec3> = best_inliers.iter().map(|i| src[*i]).collect();
    let d: Vec<Vec3> = best_inliers.iter().map(|i| dst[*i]).collect();
    let refit = eval::umeyama_alignment(&s, &d)
        .map_err(|_| ServerError::InsufficientInliers { got: best_inliers.len(), needed: accept_inliers })?;
    let final_inliers = (0..n)
        .filter(|i| (dst[*i] - refit.apply(&src[*i])).norm() < tau)
        .count();
    Ok((refit, final_inliers))
}
