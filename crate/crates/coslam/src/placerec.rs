//! Hierarchical bag-of-words place recognition: binary descriptors, a
//! k-medians vocabulary tree, tf-idf BoW vectors, and a keyframe database
//! with an inverted index serving intra-map and inter-map queries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::KfId;

pub const DESCRIPTOR_BITS: u32 = 256;
const DESCRIPTOR_WORDS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum PlaceRecError {
    #[error("need at least {needed} training descriptors, got {got}")]
    InsufficientTraining { needed: usize, got: usize },
    #[error("keyframe {0:?} already stored")]
    DuplicateKeyframe(KfId),
    #[error("vocabulary file malformed: {0}")]
    BadVocabularyFile(String),
}

/// 256-bit binary descriptor with Hamming distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor(pub [u64; DESCRIPTOR_WORDS]);

impl Descriptor {
    pub fn zero() -> Self {
        Descriptor([0; DESCRIPTOR_WORDS])
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Descriptor([rng.gen(), rng.gen(), rng.gen(), rng.gen()])
    }

    pub fn distance(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn bit(&self, i: u32) -> bool {
        self.0[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    pub fn flip_bit(&mut self, i: u32) {
        self.0[(i / 64) as usize] ^= 1u64 << (i % 64);
    }

    /// Flips each bit independently with the given probability.
    pub fn with_noise<R: Rng>(mut self, rate: f64, rng: &mut R) -> Self {
        if rate <= 0.0 {
            return self;
        }
        for i in 0..DESCRIPTOR_BITS {
            if rng.gen::<f64>() < rate {
                self.flip_bit(i);
            }
        }
        self
    }

    /// Bitwise majority of a non-empty set.
    pub fn majority(descs: &[&Descriptor]) -> Descriptor {
        let mut out = Descriptor::zero();
        let half = descs.len() as u32;
        for i in 0..DESCRIPTOR_BITS {
            let ones: u32 = descs.iter().map(|d| d.bit(i) as u32).sum();
            if 2 * ones > half {
                out.flip_bit(i);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabNode {
    centroid: Descriptor,
    children: Vec<usize>,
    /// Leaf word id; interior nodes carry none.
    word: Option<u32>,
}

/// Hierarchical vocabulary: branching factor `k`, depth `levels`; leaves are
/// visual words with idf weights. Immutable after build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyTree {
    k: u32,
    levels: u32,
    nodes: Vec<VocabNode>,
    idf: Vec<f64>,
}

/// Sparse L1-normalized tf-idf vector over vocabulary words.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BowVector(pub BTreeMap<u32, f64>);

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// s(v, w) = 1 − ½‖v−w‖₁ ∈ [0, 1] for L1-normalized vectors.
    pub fn similarity(&self, other: &BowVector) -> f64 {
        let mut l1 = 0.0;
        for (w, v) in &self.0 {
            l1 += (v - other.0.get(w).copied().unwrap_or(0.0)).abs();
        }
        for (w, v) in &other.0 {
            if !self.0.contains_key(w) {
                l1 += v.abs();
            }
        }
        1.0 - 0.5 * l1
    }
}

impl VocabularyTree {
    /// Builds the tree by recursive k-medians clustering in Hamming space,
    /// deterministic for a fixed seed. idf weights come from the training
    /// distribution.
    pub fn build(
        training: &[Descriptor],
        k: u32,
        levels: u32,
        seed: u64,
    ) -> Result<VocabularyTree, PlaceRecError> {
        if training.len() < k as usize {
            return Err(PlaceRecError::InsufficientTraining {
                needed: k as usize,
                got: training.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = VocabularyTree { k, levels, nodes: Vec::new(), idf: Vec::new() };
        let root_centroid = Descriptor::majority(&training.iter().collect::<Vec<_>>());
        tree.nodes.push(VocabNode { centroid: root_centroid, children: Vec::new(), word: None });
        let all: Vec<usize> = (0..training.len()).collect();
        tree.split(0, &all, training, 1, &mut rng);

        // idf from the training distribution, one "document" per descriptor.
        let words = tree.nodes.iter().filter(|n| n.word.is_some()).count();
        let mut counts = vec![0usize; words];
        for d in training {
            counts[tree.word_for(d) as usize] += 1;
        }
        let n = training.len() as f64;
        tree.idf = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { (n / c as f64).ln().max(0.0) })
            .collect();
        Ok(tree)
    }

    fn split(
        &mut self,
        node: usize,
        items: &[usize],
        training: &[Descriptor],
        depth: u32,
        rng: &mut ChaCha8Rng,
    ) {
        if depth > self.levels || items.len() <= 1 {
            let word = self.nodes.iter().filter(|n| n.word.is_some()).count() as u32;
            self.nodes[node].word = Some(word);
            return;
        }
        let clusters = kmedians(items, training, self.k as usize, rng);
        if clusters.len() <= 1 {
            let word = self.nodes.iter().filter(|n| n.word.is_some()).count() as u32;
            self.nodes[node].word = Some(word);
            return;
        }
        for (centroid, members) in clusters {
            let child = self.nodes.len();
            self.nodes.push(VocabNode { centroid, children: Vec::new(), word: None });
            self.nodes[node].children.push(child);
            self.split(child, &members, training, depth + 1, rng);
        }
    }

    pub fn branching(&self) -> u32 {
        self.k
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn word_count(&self) -> usize {
        self.idf.len().max(self.nodes.iter().filter(|n| n.word.is_some()).count())
    }

    /// Descends the tree by nearest centroid per level; ties go to the
    /// first child in build order.
    pub fn word_for(&self, d: &Descriptor) -> u32 {
        let mut node = 0usize;
        loop {
            let n = &self.nodes[node];
            if let Some(w) = n.word {
                return w;
            }
            node = *n
                .children
                .iter()
                .min_by_key(|&&c| (self.nodes[c].centroid.distance(d), c))
                .expect("interior node has children");
        }
    }

    /// Converts a descriptor set to an L1-normalized tf-idf vector.
    pub fn transform(&self, descriptors: &[Descriptor]) -> BowVector {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for d in descriptors {
            *counts.entry(self.word_for(d)).or_insert(0) += 1;
        }
        let mut v: BTreeMap<u32, f64> = counts
            .iter()
            .map(|(&w, &c)| (w, c as f64 / descriptors.len() as f64 * self.idf[w as usize]))
            .filter(|(_, x)| *x > 0.0)
            .collect();
        let sum: f64 = v.values().sum();
        if sum > 0.0 {
            for x in v.values_mut() {
                *x /= sum;
            }
        } else if !counts.is_empty() {
            // Degenerate idf (every word in every training doc): fall back to tf.
            v = counts
                .iter()
                .map(|(&w, &c)| (w, c as f64 / descriptors.len() as f64))
                .collect();
            let sum: f64 = v.values().sum();
            for x in v.values_mut() {
                *x /= sum;
            }
        }
        BowVector(v)
    }

    /// Writes the documented binary format: header (magic, version, k, L, D),
    /// then nodes breadth-first, then idf weights. Bit-exact round trip.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"CVOC")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.k.to_le_bytes())?;
        w.write_all(&self.levels.to_le_bytes())?;
        w.write_all(&DESCRIPTOR_BITS.to_le_bytes())?;
        // Nodes are already stored so parents precede children; re-emit in
        // true BFS order with per-node child counts.
        let order = self.bfs_order();
        let mut new_index = vec![0usize; self.nodes.len()];
        for (i, &old) in order.iter().enumerate() {
            new_index[old] = i;
        }
        w.write_all(&(order.len() as u64).to_le_bytes())?;
        for &old in &order {
            let n = &self.nodes[old];
            for word in n.centroid.0 {
                w.write_all(&word.to_le_bytes())?;
            }
            let word_id: i64 = n.word.map_or(-1, |x| x as i64);
            w.write_all(&word_id.to_le_bytes())?;
            w.write_all(&(n.children.len() as u32).to_le_bytes())?;
            for &c in &n.children {
                w.write_all(&(new_index[c] as u64).to_le_bytes())?;
            }
        }
        w.write_all(&(self.idf.len() as u64).to_le_bytes())?;
        for x in &self.idf {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<VocabularyTree, PlaceRecError> {
        let bad = |m: &str| PlaceRecError::BadVocabularyFile(m.to_string());
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != b"CVOC" {
            return Err(bad("bad magic"));
        }
        if read_u32(r)? != 1 {
            return Err(bad("unsupported version"));
        }
        let k = read_u32(r)?;
        let levels = read_u32(r)?;
        if read_u32(r)? != DESCRIPTOR_BITS {
            return Err(bad("descriptor width mismatch"));
        }
        let node_count = read_u64(r)? as usize;
        let mut nodes = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            let mut c = [0u64; DESCRIPTOR_WORDS];
            for w in &mut c {
                *w = read_u64(r)?;
            }
            let word_id = read_i64(r)?;
            let child_count = read_u32(r)? as usize;
            let mut children = Vec::with_capacity(child_count);
            for _ in 0..child_count {
                children.push(read_u64(r)? as usize);
            }
            nodes.push(VocabNode {
                centroid: Descriptor(c),
                children,
                word: if word_id < 0 { None } else { Some(word_id as u32) },
            });
        }
        let idf_count = read_u64(r)? as usize;
        let mut idf = Vec::with_capacity(idf_count);
        for _ in 0..idf_count {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            idf.push(f64::from_le_bytes(b));
        }
        Ok(VocabularyTree { k, levels, nodes, idf })
    }

    fn bfs_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(n) = queue.pop_front() {
            order.push(n);
            queue.extend(self.nodes[n].children.iter().copied());
        }
        order
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), PlaceRecError> {
    r.read_exact(buf).map_err(|e| PlaceRecError::BadVocabularyFile(e.to_string()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PlaceRecError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, PlaceRecError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_i64<R: Read>(r: &mut R) -> Result<i64, PlaceRecError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(i64::from_le_bytes(b))
}

/// k-medians in Hamming space with bitwise-majority centroids.
/// Returns (centroid, member indices) per non-empty cluster.
fn kmedians(
    items: &[usize],
    training: &[Descriptor],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Descriptor, Vec<usize>)> {
    let k = k.min(items.len());
    // Farthest-point seeding: robust for well-separated clusters and
    // deterministic given the rng state.
    let first = *items.choose(rng).unwrap();
    let mut centroids: Vec<Descriptor> = vec![training[first]];
    while centroids.len() < k {
        let next = items
            .iter()
            .max_by_key(|&&i| {
                let d = centroids.iter().map(|c| c.distance(&training[i])).min().unwrap();
                (d, std::cmp::Reverse(i))
            })
            .copied()
            .unwrap();
        let dist = centroids.iter().map(|c| c.distance(&training[next])).min().unwrap();
        if dist == 0 {
            break; // fewer distinct descriptors than clusters
        }
        centroids.push(training[next]);
    }

    let mut assignment = vec![0usize; items.len()];
    for _ in 0..10 {
        let mut changed = false;
        for (slot, &item) in items.iter().enumerate() {
            let best = centroids
                .iter()
                .enumerate()
                .min_by_key(|(ci, c)| (c.distance(&training[item]), *ci))
                .map(|(ci, _)| ci)
                .unwrap();
            if assignment[slot] != best {
                assignment[slot] = best;
                changed = true;
            }
        }
        let mut next = Vec::with_capacity(centroids.len());
        for ci in 0..centroids.len() {
            let members: Vec<&Descriptor> = items
                .iter()
                .enumerate()
                .filter(|(slot, _)| assignment[*slot] == ci)
                .map(|(_, &i)| &training[i])
                .collect();
            if members.is_empty() {
                next.push(centroids[ci]);
            } else {
                next.push(Descriptor::majority(&members));
            }
        }
        centroids = next;
        if !changed {
            break;
        }
    }
    let mut clusters: Vec<(Descriptor, Vec<usize>)> =
        centroids.iter().map(|&c| (c, Vec::new())).collect();
    for (slot, &item) in items.iter().enumerate() {
        clusters[assignment[slot]].1.push(item);
    }
    clusters.retain(|(_, members)| !members.is_empty());
    clusters
}

/// A ranked place-recognition hit.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryHit {
    pub map_id: u64,
    pub kf_id: KfId,
    pub score: f64,
}

/// Inverted-index keyframe database, built incrementally from all acquired
/// KFs of every agent. Writers must be serialized externally.
#[derive(Debug, Default, Clone)]
pub struct KeyframeDatabase {
    inverted: HashMap<u32, Vec<(u64, KfId)>>,
    vectors: HashMap<KfId, (u64, BowVector)>,
}

impl KeyframeDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn add_keyframe(
        &mut self,
        map_id: u64,
        kf_id: KfId,
        bow: BowVector,
    ) -> Result<(), PlaceRecError> {
        if self.vectors.contains_key(&kf_id) {
            return Err(PlaceRecError::DuplicateKeyframe(kf_id));
        }
        for &w in bow.0.keys() {
            self.inverted.entry(w).or_default().push((map_id, kf_id));
        }
        self.vectors.insert(kf_id, (map_id, bow));
        Ok(())
    }

    pub fn remove_map(&mut self, map_id: u64) {
        self.vectors.retain(|_, (m, _)| *m != map_id);
        for list in self.inverted.values_mut() {
            list.retain(|(m, _)| *m != map_id);
        }
        self.inverted.retain(|_, list| !list.is_empty());
    }

    /// Re-points every KF of `from` to map `to` (map fusion bookkeeping).
    pub fn reassign_map(&mut self, from: u64, to: u64) {
        for (m, _) in self.vectors.values_mut() {
            if *m == from {
                *m = to;
            }
        }
        for list in self.inverted.values_mut() {
            for (m, _) in list.iter_mut() {
                if *m == from {
                    *m = to;
                }
            }
        }
    }

    /// Ranked candidates sharing at least one word with the probe, scored by
    /// L1 similarity, filtered by `min_score`, excluding `exclude`.
    /// Descending score; ties break toward the lower KF id.
    pub fn query(
        &self,
        probe: &BowVector,
        exclude: &HashSet<KfId>,
        min_score: f64,
    ) -> Vec<QueryHit> {
        let mut candidates: HashSet<KfId> = HashSet::new();
        for w in probe.0.keys() {
            if let Some(list) = self.inverted.get(w) {
                candidates.extend(list.iter().map(|(_, kf)| *kf));
            }
        }
        let mut hits: Vec<QueryHit> = candidates
            .into_iter()
            .filter(|kf| !exclude.contains(kf))
            .map(|kf| {
                let (map_id, bow) = &self.vectors[&kf];
                QueryHit { map_id: *map_id, kf_id: kf, score: probe.similarity(bow) }
            })
            .filter(|h| h.score >= min_score)
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.kf_id.cmp(&b.kf_id))
        });
        hits
    }

    /// Brute-force reference scoring over every stored vector (test oracle).
    pub fn brute_force_query(
        &self,
        probe: &BowVector,
        exclude: &HashSet<KfId>,
        min_score: f64,
    ) -> Vec<QueryHit> {
        let mut hits: Vec<QueryHit> = self
            .vectors
            .iter()
            .filter(|(kf, _)| !exclude.contains(kf))
            .map(|(kf, (map_id, bow))| QueryHit {
                map_id: *map_id,
                kf_id: *kf,
                score: probe.similarity(bow),
            })
            .filter(|h| h.score >= min_score && h.score > 0.0 && shares_word(probe, &self.vectors[&h.kf_id].1))
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.kf_id.cmp(&b.kf_id))
        });
        hits
    }

    pub fn bow_of(&self, kf: &KfId) -> Option<&BowVector> {
        self.vectors.get(kf).map(|(_, v)| v)
    }
}

fn shares_word(a: &BowVector, b: &BowVector) -> bool {
    a.0.keys().any(|w| b.0.contains_key(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    fn kf(seq: u32) -> KfId {
        KfId { agent: 0, seq }
    }

    #[test]
    fn build_scaled_vocabulary() {
        let mut rng = StdRng::seed_from_u64(1);
        let training: Vec<Descriptor> = (0..5000).map(|_| Descriptor::random(&mut rng)).collect();
        let vocab = VocabularyTree::build(&training, 10, 3, 7).unwrap();
        assert!(vocab.word_count() <= 1000);
        for d in &training {
            let w = vocab.word_for(d);
            assert!((w as usize) < vocab.word_count());
        }
    }

    #[test]
    fn build_two_separable_words() {
        let a = Descriptor([0, 0, 0, 0]);
        let b = Descriptor([u64::MAX; 4]);
        assert_eq!(a.distance(&b), 256);
        let vocab = VocabularyTree::build(&[a, b], 2, 1, 3).unwrap();
        assert_eq!(vocab.word_count(), 2);
        assert_ne!(vocab.word_for(&a), vocab.word_for(&b));
    }

    #[test]
    fn four_separated_clusters_pure_leaves() {
        // Oracle: exhaustive assignment check against generated cluster labels.
        // Clusters are separated at two scales so a depth-2 binary tree can
        // isolate each: two far-apart super-centers, two sub-centers each.
        let mut rng = StdRng::seed_from_u64(2);
        let mut descs = Vec::new();
        let mut labels = Vec::new();
        for super_cluster in 0..2 {
            let super_center = Descriptor::random(&mut rng);
            for sub in 0..2 {
                let mut sub_center = super_center;
                for _ in 0..40 {
                    sub_center.flip_bit(rng.gen_range(0..DESCRIPTOR_BITS));
                }
                for _ in 0..25 {
                    let mut d = sub_center;
                    for _ in 0..5 {
                        d.flip_bit(rng.gen_range(0..DESCRIPTOR_BITS));
                    }
                    descs.push(d);
                    labels.push(super_cluster * 2 + sub);
                }
            }
        }
        let vocab = VocabularyTree::build(&descs, 2, 2, 11).unwrap();
        assert_eq!(vocab.word_count(), 4);
        let mut leaf_of_cluster: HashMap<usize, u32> = HashMap::new();
        for (d, &l) in descs.iter().zip(labels.iter()) {
            let w = vocab.word_for(d);
            let entry = leaf_of_cluster.entry(l).or_insert(w);
            assert_eq!(*entry, w, "cluster {l} split across words");
        }
        assert_eq!(leaf_of_cluster.values().collect::<HashSet<_>>().len(), 4);
    }

    #[test]
    fn insufficient_training_rejected() {
        let d = Descriptor::zero();
        assert!(matches!(
            VocabularyTree::build(&[d], 2, 1, 0),
            Err(PlaceRecError::InsufficientTraining { .. })
        ));
    }

    #[test]
    fn vocabulary_deterministic_per_seed() {
        let mut rng = StdRng::seed_from_u64(3);
        let training: Vec<Descriptor> = (0..500).map(|_| Descriptor::random(&mut rng)).collect();
        let a = VocabularyTree::build(&training, 5, 2, 42).unwrap();
        let b = VocabularyTree::build(&training, 5, 2, 42).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.write_to(&mut buf_a).unwrap();
        b.write_to(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn transform_edge_cases() {
        let mut rng = StdRng::seed_from_u64(4);
        let training: Vec<Descriptor> = (0..200).map(|_| Descriptor::random(&mut rng)).collect();
        let vocab = VocabularyTree::build(&training, 4, 2, 0).unwrap();

        assert!(vocab.transform(&[]).is_empty());

        let single = vocab.transform(&[training[0]]);
        assert_eq!(single.0.len(), 1);
        assert!((single.0.values().sum::<f64>() - 1.0).abs() < 1e-9);

        // tf invariance under proportional duplication.
        let set: Vec<Descriptor> = training[0..10].to_vec();
        let doubled: Vec<Descriptor> = set.iter().chain(set.iter()).copied().collect();
        assert_eq!(vocab.transform(&set), vocab.transform(&doubled));
    }

    #[test]
    fn bow_vectors_l1_normalized() {
        let mut rng = StdRng::seed_from_u64(5);
        let training: Vec<Descriptor> = (0..300).map(|_| Descriptor::random(&mut rng)).collect();
        let vocab = VocabularyTree::build(&training, 5, 2, 1).unwrap();
        for _ in 0..20 {
            let descs: Vec<Descriptor> = (0..30).map(|_| Descriptor::random(&mut rng)).collect();
            let v = vocab.transform(&descs);
            assert!((v.0.values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn db_self_query_ranks_first() {
        let mut rng = StdRng::seed_from_u64(6);
        let training: Vec<Descriptor> = (0..300).map(|_| Descriptor::random(&mut rng)).collect();
        let vocab = VocabularyTree::build(&training, 5, 2, 1).unwrap();
        let mut db = KeyframeDatabase::new();
        let mut probe = BowVector::default();
        for i in 0..20 {
            let descs: Vec<Descriptor> = (0..25).map(|_| Descriptor::random(&mut rng)).collect();
            let bow = vocab.transform(&descs);
            if i == 7 {
                probe = bow.clone();
            }
            db.add_keyframe(0, kf(i), bow).unwrap();
        }
        let hits = db.query(&probe, &HashSet::new(), 0.0);
        assert_eq!(hits[0].kf_id, kf(7));
        assert!((hits[0].score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn db_disjoint_probe_empty() {
        let mut db = KeyframeDatabase::new();
        let mut stored = BowVector::default();
        stored.0.insert(3, 1.0);
        db.add_keyframe(0, kf(0), stored).unwrap();
        let mut probe = BowVector::default();
        probe.0.insert(9, 1.0);
        assert!(db.query(&probe, &HashSet::new(), 0.0).is_empty());
    }

    #[test]
    fn db_duplicate_and_remove_map() {
        let mut db = KeyframeDatabase::new();
        let mut bow = BowVector::default();
        bow.0.insert(1, 1.0);
        db.add_keyframe(4, kf(0), bow.clone()).unwrap();
        assert!(matches!(
            db.add_keyframe(4, kf(0), bow.clone()),
            Err(PlaceRecError::DuplicateKeyframe(_))
        ));
        assert_eq!(db.query(&bow, &HashSet::new(), 0.0).len(), 1);
        db.remove_map(4);
        assert!(db.query(&bow, &HashSet::new(), 0.0).is_empty());
    }

    #[test]
    fn query_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(7);
        let training: Vec<Descriptor> = (0..1000).map(|_| Descriptor::random(&mut rng)).collect();
        let vocab = VocabularyTree::build(&training, 6, 2, 5).unwrap();
        let mut db = KeyframeDatabase::new();
        for i in 0..200 {
            let descs: Vec<Descriptor> = (0..20).map(|_| Descriptor::random(&mut rng)).collect();
            db.add_keyframe(u64::from(i % 3), kf(i), vocab.transform(&descs)).unwrap();
        }
        for _ in 0..20 {
            let descs: Vec<Descriptor> = (0..20).map(|_| Descriptor::random(&mut rng)).collect();
            let probe = vocab.transform(&descs);
            let exclude: HashSet<KfId> = [kf(3), kf(100)].into_iter().collect();
            let fast = db.query(&probe, &exclude, 0.01);
            let slow = db.brute_force_query(&probe, &exclude, 0.01);
            assert_eq!(fast.len(), slow.len());
            for (f, s) in fast.iter().zip(slow.iter()) {
                assert_eq!(f.kf_id, s.kf_id);
                assert!((f.score - s.score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top1_recall_with_bit_noise() {
        // 100 stored places, probe with 10% bit flips, top-1 >= 90%.
        let mut hits = 0;
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut places: Vec<Vec<Descriptor>> = Vec::new();
            let mut training = Vec::new();
            for _ in 0..100 {
                let descs: Vec<Descriptor> = (0..20).map(|_| Descriptor::random(&mut rng)).collect();
                training.extend(descs.iter().copied());
                places.push(descs);
            }
            let vocab = VocabularyTree::build(&training, 10, 3, seed).unwrap();
            let mut db = KeyframeDatabase::new();
            for (i, p) in places.iter().enumerate() {
                db.add_keyframe(0, kf(i as u32), vocab.transform(p)).unwrap();
            }
            let target = rng.gen_range(0..100usize);
            let noisy: Vec<Descriptor> = places[target]
                .iter()
                .map(|d| d.with_noise(0.10, &mut rng))
                .collect();
            let probe = vocab.transform(&noisy);
            let result = db.query(&probe, &HashSet::new(), 0.0);
            if result.first().map(|h| h.kf_id) == Some(kf(target as u32)) {
                hits += 1;
            }
        }
        assert!(hits >= 90, "top-1 recall {hits}/100");
    }

    #[test]
    fn vocabulary_serialization_roundtrip() {
        let mut rng = StdRng::seed_from_u64(8);
        let training: Vec<Descriptor> = (0..400).map(|_| Descriptor::random(&mut rng)).collect();
        let vocab = VocabularyTree::build(&training, 4, 3, 9).unwrap();
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        let back = VocabularyTree::read_from(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        for d in &training {
            assert_eq!(vocab.word_for(d), back.word_for(d));
        }
    }
}
