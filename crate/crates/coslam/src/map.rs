//! Shared SLAM graph entities: keyframes, map points and covisibility
//! bookkeeping, used by both the agent-side local map and the server maps.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::geometry::{SE3Pose, Vec2, Vec3};
use crate::placerec::{BowVector, Descriptor};

/// Global keyframe id: owning agent plus per-agent sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KfId {
    pub agent: u32,
    pub seq: u32,
}

impl std::fmt::Display for KfId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "kf{}:{}", self.agent, self.seq)
    }
}

/// Global map-point id; ordering defines the "older id wins" merge rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MpId {
    pub agent: u32,
    pub seq: u32,
}

impl std::fmt::Display for MpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "mp{}:{}", self.agent, self.seq)
    }
}

/// A camera snapshot retained in the map. Pose is camera-from-world in the
/// owning map's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrame {
    pub id: KfId,
    pub timestamp: f64,
    pub pose: SE3Pose,
    /// (map point id, pixel observation), aligned with `descriptors`.
    pub observations: Vec<(MpId, Vec2)>,
    pub descriptors: Vec<Descriptor>,
    /// Filled server-side (or on demand) from `descriptors`.
    pub bow: Option<BowVector>,
}

impl KeyFrame {
    pub fn observation_of(&self, mp: &MpId) -> Option<Vec2> {
        self.observations.iter().find(|(id, _)| id == mp).map(|(_, px)| *px)
    }
}

/// A 3D landmark with observation back-links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub id: MpId,
    pub position: Vec3,
    /// Observing keyframes with the index into their observation list.
    /// Serialized as a pair list because JSON maps need string keys.
    #[serde(with = "observer_pairs")]
    pub observers: BTreeMap<KfId, usize>,
    pub descriptor: Descriptor,
}

mod observer_pairs {
    use super::KfId;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<KfId, usize>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<KfId, usize>, D::Error> {
        Ok(Vec::<(KfId, usize)>::deserialize(de)?.into_iter().collect())
    }
}

/// Covisibility edges over a set of keyframes: (a, b) with the shared-MP
/// count as weight, stored once with a < b.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovisibilityGraph {
    pub edges: BTreeMap<(KfId, KfId), u32>,
}

impl CovisibilityGraph {
    pub fn key(a: KfId, b: KfId) -> (KfId, KfId) {
        if a < b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn weight(&self, a: KfId, b: KfId) -> u32 {
        self.edges.get(&Self::key(a, b)).copied().unwrap_or(0)
    }

    pub fn set(&mut self, a: KfId, b: KfId, weight: u32) {
        if a == b {
            return;
        }
        if weight == 0 {
            self.edges.remove(&Self::key(a, b));
        } else {
            self.edges.insert(Self::key(a, b), weight);
        }
    }

    pub fn remove_kf(&mut self, kf: &KfId) {
        self.edges.retain(|(a, b), _| a != kf && b != kf);
    }

    pub fn neighbors(&self, kf: &KfId) -> Vec<(KfId, u32)> {
        self.edges
            .iter()
            .filter_map(|((a, b), &w)| {
                if a == kf {
                    Some((*b, w))
                } else if b == kf {
                    Some((*a, w))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Recomputes every edge incident to `kf` from actual shared-MP counts,
    /// dropping edges below `theta`.
    pub fn refresh_for(
        &mut self,
        kf: &KeyFrame,
        keyframes: &BTreeMap<KfId, KeyFrame>,
        points: &BTreeMap<MpId, MapPoint>,
        theta: u32,
    ) {
        self.remove_kf(&kf.id);
        let mut shared: HashMap<KfId, u32> = HashMap::new();
        for (mp_id, _) in &kf.observations {
            if let Some(mp) = points.get(mp_id) {
                for other in mp.observers.keys() {
                    if other != &kf.id && keyframes.contains_key(other) {
                        *shared.entry(*other).or_insert(0) += 1;
                    }
                }
            }
        }
        for (other, w) in shared {
            if w >= theta {
                self.set(kf.id, other, w);
            }
        }
    }
}

/// Kruskal-style spanning forest over covisibility weights (heaviest first);
/// used as the backbone of the essential graph.
pub fn spanning_tree(
    kf_ids: &BTreeSet<KfId>,
    covis: &CovisibilityGraph,
) -> Vec<(KfId, KfId)> {
    let mut edges: Vec<(&(KfId, KfId), &u32)> = covis
        .edges
        .iter()
        .filter(|((a, b), _)| kf_ids.contains(a) && kf_ids.contains(b))
        .collect();
    edges.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let ids: Vec<KfId> = kf_ids.iter().copied().collect();
    let index: HashMap<KfId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    let mut tree = Vec::new();
    for ((a, b), _) in edges {
        let (ra, rb) = (find(&mut parent, index[a]), find(&mut parent, index[b]));
        if ra != rb {
            parent[ra] = rb;
            tree.push((*a, *b));
        }
    }
    tree
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SE3Pose;

    fn kf_with_obs(id: KfId, mps: &[MpId]) -> KeyFrame {
        KeyFrame {
            id,
            timestamp: 0.0,
            pose: SE3Pose::identity(),
            observations: mps.iter().map(|m| (*m, Vec2::new(0.0, 0.0))).collect(),
            descriptors: mps.iter().map(|_| Descriptor::zero()).collect(),
            bow: None,
        }
    }

    fn mp(id: MpId, observers: &[KfId]) -> MapPoint {
        MapPoint {
            id,
            position: Vec3::zeros(),
            observers: observers.iter().enumerate().map(|(i, k)| (*k, i)).collect(),
            descriptor: Descriptor::zero(),
        }
    }

    #[test]
    fn covisibility_symmetric_and_thresholded() {
        let a = KfId { agent: 0, seq: 0 };
        let b = KfId { agent: 0, seq: 1 };
        let mps: Vec<MpId> = (0..20).map(|s| MpId { agent: 0, seq: s }).collect();
        let kf_a = kf_with_obs(a, &mps);
        let kf_b = kf_with_obs(b, &mps);
        let keyframes: BTreeMap<KfId, KeyFrame> =
            [(a, kf_a.clone()), (b, kf_b.clone())].into_iter().collect();
        let points: BTreeMap<MpId, MapPoint> =
            mps.iter().map(|m| (*m, mp(*m, &[a, b]))).collect();

        let mut covis = CovisibilityGraph::default();
        covis.refresh_for(&kf_a, &keyframes, &points, 15);
        assert_eq!(covis.weight(a, b), 20);
        assert_eq!(covis.weight(b, a), 20);

        let mut covis2 = CovisibilityGraph::default();
        let kf_b_few = kf_with_obs(b, &mps[0..10]);
        let keyframes2: BTreeMap<KfId, KeyFrame> =
            [(a, kf_a.clone()), (b, kf_b_few)].into_iter().collect();
        let both = [a, b];
        let only_a = [a];
        let points2: BTreeMap<MpId, MapPoint> = mps
            .iter()
            .enumerate()
            .map(|(i, m)| (*m, mp(*m, if i < 10 { &both } else { &only_a })))
            .collect();
        covis2.refresh_for(&kf_a, &keyframes2, &points2, 15);
        assert_eq!(covis2.weight(a, b), 0);
    }

    #[test]
    fn spanning_tree_connects_chain() {
        let ids: Vec<KfId> = (0..5).map(|s| KfId { agent: 0, seq: s }).collect();
        let mut covis = CovisibilityGraph::default();
        for w in ids.windows(2) {
            covis.set(w[0], w[1], 30);
        }
        covis.set(ids[0], ids[4], 5);
        let set: BTreeSet<KfId> = ids.iter().copied().collect();
        let tree = spanning_tree(&set, &covis);
        assert_eq!(tree.len(), 4);
        // heaviest-first keeps the chain, drops the weak shortcut
        assert!(!tree.contains(&(ids[0], ids[4])));
    }
}
