//! Sound-unit cache (L1).
//!
//! Each cached utterance carries its own centroid alphabet: frame features
//! are clustered per utterance, the frame-to-centroid assignment is collapsed
//! into a sound-unit key, and queries soft-match by converting frame-to-
//! centroid distances into per-frame distributions that feed the blank-free
//! alignment loss.

use rand::Rng;
use thiserror::Error;

use crate::ctc::{self, CollapseMode, CtcError, LabelSequence, PosteriorSequence, Symbol};
use crate::dsp::FeatureSequence;
use crate::rng::rng_from;

pub const DEFAULT_K: usize = 70;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const MAX_KMEANS_ITERS: usize = 300;
/// Sharpness of the distance-to-probability softmax (see [`L1Config`]).
pub const DEFAULT_SHARPNESS: f64 = 24.0;

#[derive(Debug, Error)]
pub enum L1Error {
    #[error("cannot cluster an empty feature sequence")]
    EmptyFeatures,
    #[error("ctc: {0}")]
    Ctc(#[from] CtcError),
    #[error("entry record: {0}")]
    BadRecord(String),
}

/// How frame-to-centroid distances become per-frame distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceToProb {
    /// `softmax(-sharpness * d / median(d))`: proper distribution, scale
    /// robust, no hard zeros. The default.
    Softmax,
    /// `(max(d) - d) / sum(max(d) - d)`: the raw inverted-distance reading;
    /// assigns exactly zero to the farthest centroid.
    InverseLinear,
}

#[derive(Debug, Clone, Copy)]
pub struct L1Config {
    pub k: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub distance_to_prob: DistanceToProb,
    pub sharpness: f64,
}

impl Default for L1Config {
    fn default() -> Self {
        L1Config {
            k: DEFAULT_K,
            tol: DEFAULT_TOL,
            max_iters: MAX_KMEANS_ITERS,
            distance_to_prob: DistanceToProb::Softmax,
            sharpness: DEFAULT_SHARPNESS,
        }
    }
}

/// Per-utterance centroid alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<Vec<f32>>,
    pub utterance_id: String,
}

impl CentroidSet {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map(|c| c.len()).unwrap_or(0)
    }
}

/// One sound-unit cache entry.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Entry {
    pub centroids: CentroidSet,
    pub key: LabelSequence,
    pub intent: u32,
    pub transcript_id: u32,
    pub created_at: u64,
    pub last_hit: u64,
}

impl L1Entry {
    /// Serialized size: the KxN centroid matrix dominates.
    pub fn size_bytes(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"L1E1");
        let id_bytes = self.centroids.utterance_id.as_bytes();
        out.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(id_bytes);
        out.extend_from_slice(&(self.centroids.k() as u16).to_le_bytes());
        out.extend_from_slice(&(self.centroids.dim() as u16).to_le_bytes());
        for c in &self.centroids.centroids {
            for &x in c {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.key.len() as u16).to_le_bytes());
        for &s in &self.key.symbols {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.intent.to_le_bytes());
        out.extend_from_slice(&self.transcript_id.to_le_bytes());
        out.extend_from_slice(&self.created_at.to_le_bytes());
        out.extend_from_slice(&self.last_hit.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(L1Entry, usize), L1Error> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], L1Error> {
            if *pos + n > bytes.len() {
                return Err(L1Error::BadRecord("truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"L1E1" {
            return Err(L1Error::BadRecord("bad magic".into()));
        }
        let id_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let utterance_id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
            .map_err(|_| L1Error::BadRecord("utterance id not utf-8".into()))?;
        let k = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let dim = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let mut centroids = Vec::with_capacity(k);
        for _ in 0..k {
            let raw = take(&mut pos, dim * 4)?;
            centroids.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        let key_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let mut symbols = Vec::with_capacity(key_len);
        for _ in 0..key_len {
            symbols.push(u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()));
        }
        let intent = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let transcript_id = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let created_at = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let last_hit = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        Ok((
            L1Entry {
                centroids: CentroidSet {
                    centroids,
                    utterance_id,
                },
                key: LabelSequence::new(symbols),
                intent,
                transcript_id,
                created_at,
                last_hit,
            },
            pos,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct L1MatchResult {
    /// Index of the best entry in the queried slice.
    pub best_entry: Option<usize>,
    /// Length-normalized loss of the best entry (infinite on an empty cache).
    pub loss: f64,
    pub hit: bool,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Lloyd iterations with k-means++ seeding. Returns centroids, per-point
/// assignments and the inertia recorded after each assignment phase.
pub fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> (Vec<Vec<f32>>, Vec<usize>, Vec<f64>) {
    assert!(!points.is_empty() && k >= 1);
    let k = k.min(points.len());
    let dim = points[0].len();
    let mut rng = rng_from(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all points coincide with chosen centers; fall back to uniform
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let mut assignments = vec![0usize; points.len()];
    let mut inertia_history = Vec::new();
    for _ in 0..max_iters {
        // assignment phase
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assignments[i] = best;
            inertia += best_d;
        }
        inertia_history.push(inertia);

        // update phase
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(assignments.iter()) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x as f64;
            }
        }
        let mut movement = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                // reseed an empty cluster to the point farthest from its
                // current centroid
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        sq_dist(a, &centroids[j])
                            .partial_cmp(&sq_dist(b, &centroids[j]))
                            .unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                let new_c = points[far].clone();
                movement = movement.max(sq_dist(&new_c, &centroids[j]).sqrt());
                centroids[j] = new_c;
                continue;
            }
            let new_c: Vec<f32> = sums[j]
                .iter()
                .map(|&s| (s / counts[j] as f64) as f32)
                .collect();
            movement = movement.max(sq_dist(&new_c, &centroids[j]).sqrt());
            centroids[j] = new_c;
        }
        if movement < tol {
            break;
        }
    }

    // final assignment against the converged centroids
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = sq_dist(p, &centroids[0]);
        for (j, c) in centroids.iter().enumerate().skip(1) {
            let d = sq_dist(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        assignments[i] = best;
        inertia += best_d;
    }
    inertia_history.push(inertia);

    // keep centroids pairwise distinct: degenerate inputs would otherwise
    // collapse several clusters onto one point
    for j in 1..k {
        for prev in 0..j {
            if centroids[j] == centroids[prev] {
                let eps = 1e-6 * (j as f32 + 1.0);
                if let Some(x) = centroids[j].get_mut(0) {
                    *x += eps;
                }
            }
        }
    }

    (centroids, assignments, inertia_history)
}

/// Cluster an utterance's features into its private centroid alphabet.
///
/// `k` clamps to the frame count for short inputs.
pub fn discretize(
    features: &FeatureSequence,
    cfg: &L1Config,
    utterance_id: &str,
    seed: u64,
) -> Result<(CentroidSet, Vec<Symbol>), L1Error> {
    discretize_points(&features.frames, cfg, utterance_id, seed)
}

/// As [`discretize`], over an explicit point set (the cloud clusters the
/// union of an utterance's frames and its augmented variants).
pub fn discretize_points(
    points: &[Vec<f32>],
    cfg: &L1Config,
    utterance_id: &str,
    seed: u64,
) -> Result<(CentroidSet, Vec<Symbol>), L1Error> {
    if points.is_empty() {
        return Err(L1Error::EmptyFeatures);
    }
    let (centroids, assignments, _) = kmeans(points, cfg.k, cfg.tol, cfg.max_iters, seed);
    Ok((
        CentroidSet {
            centroids,
            utterance_id: utterance_id.to_string(),
        },
        assignments.iter().map(|&a| a as Symbol).collect(),
    ))
}

/// Build a cache entry for an utterance. The key is the adjacent-duplicate
/// collapse of the assignment sequence of `key_features` (the utterance's own
/// frames); clustering may see extra points (augmentations).
pub fn build_entry(
    key_features: &FeatureSequence,
    cluster_points: Option<&[Vec<f32>]>,
    cfg: &L1Config,
    intent: u32,
    transcript_id: u32,
    utterance_id: &str,
    seed: u64,
) -> Result<L1Entry, L1Error> {
    let (centroids, _) = match cluster_points {
        Some(points) => discretize_points(points, cfg, utterance_id, seed)?,
        None => discretize(key_features, cfg, utterance_id, seed)?,
    };
    // assign the utterance's own frames against the fitted centroids
    let ids: Vec<Symbol> = key_features
        .frames
        .iter()
        .map(|f| {
            let mut best = 0usize;
            let mut best_d = sq_dist(f, &centroids.centroids[0]);
            for (j, c) in centroids.centroids.iter().enumerate().skip(1) {
                let d = sq_dist(f, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best as Symbol
        })
        .collect();
    let key = ctc::collapse(&ids, CollapseMode::RepeatMerge, None)?;
    Ok(L1Entry {
        centroids,
        key,
        intent,
        transcript_id,
        created_at: 0,
        last_hit: 0,
    })
}

/// Per-frame distribution over one entry's centroids.
pub fn frame_distribution(frame: &[f32], centroids: &[Vec<f32>], cfg: &L1Config) -> Vec<f64> {
    let d: Vec<f64> = centroids.iter().map(|c| sq_dist(frame, c).sqrt()).collect();
    let k = d.len();
    match cfg.distance_to_prob {
        DistanceToProb::Softmax => {
            let mut sorted = d.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted[k / 2];
            let scale = if median > 1e-12 {
                cfg.sharpness / median
            } else {
                // all (or most) distances vanish; any positive scale gives
                // the same argmax
                let max = sorted[k - 1];
                if max > 1e-12 {
                    cfg.sharpness / max
                } else {
                    return vec![1.0 / k as f64; k];
                }
            };
            let min_d = sorted[0];
            let mut p: Vec<f64> = d.iter().map(|&x| (-(x - min_d) * scale).exp()).collect();
            let total: f64 = p.iter().sum();
            for x in &mut p {
                *x /= total;
            }
            p
        }
        DistanceToProb::InverseLinear => {
            let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let inv: Vec<f64> = d.iter().map(|&x| max - x).collect();
            let total: f64 = inv.iter().sum();
            if total <= 0.0 {
                return vec![1.0 / k as f64; k];
            }
            inv.into_iter().map(|x| x / total).collect()
        }
    }
}

/// Posterior rows of a query against one entry's centroid alphabet.
pub fn entry_posteriors(
    features: &FeatureSequence,
    entry: &L1Entry,
    cfg: &L1Config,
) -> Result<PosteriorSequence, L1Error> {
    let rows: Vec<Vec<f64>> = features
        .frames
        .iter()
        .map(|f| frame_distribution(f, &entry.centroids.centroids, cfg))
        .collect();
    Ok(PosteriorSequence::from_probs(&rows, None)?)
}

/// Normalized blank-free alignment loss of a query against one entry.
pub fn entry_loss(
    features: &FeatureSequence,
    entry: &L1Entry,
    cfg: &L1Config,
) -> Result<f64, L1Error> {
    let posts = entry_posteriors(features, entry, cfg)?;
    match ctc::ctc_loss(&posts, &entry.key, CollapseMode::RepeatMerge) {
        Ok(out) => Ok(out.normalized()),
        Err(CtcError::Infeasible { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e.into()),
    }
}

/// Match a query against every entry; lowest normalized loss wins, first
/// entry wins exact ties. Hit iff the winner clears `threshold_fn(key_len)`.
pub fn match_query(
    features: &FeatureSequence,
    entries: &[L1Entry],
    cfg: &L1Config,
    threshold_fn: &dyn Fn(usize) -> f64,
) -> Result<L1MatchResult, L1Error> {
    let mut best: Option<usize> = None;
    let mut best_loss = f64::INFINITY;
    for (i, entry) in entries.iter().enumerate() {
        let loss = entry_loss(features, entry, cfg)?;
        if loss < best_loss {
            best_loss = loss;
            best = Some(i);
        }
    }
    let hit = match best {
        Some(i) => best_loss <= threshold_fn(entries[i].key.len()),
        None => false,
    };
    Ok(L1MatchResult {
        best_entry: best,
        loss: best_loss,
        hit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn feats(frames: Vec<Vec<f32>>) -> FeatureSequence {
        let n = frames.len();
        FeatureSequence {
            frames,
            frame_times: (0..n).map(|i| i as f64 * 0.02).collect(),
        }
    }

    /// Tone-sequence features: `segments` base vectors, each repeated with
    /// jitter. Stands in for one utterance's spectral trace.
    fn tone_features(
        segments: usize,
        dim: usize,
        seed: u64,
        jitter: f32,
        base_seed: u64,
    ) -> FeatureSequence {
        let mut base_rng = rng_from(base_seed);
        let bases: Vec<Vec<f32>> = (0..segments)
            .map(|_| (0..dim).map(|_| base_rng.gen_range(-2.0f32..2.0)).collect())
            .collect();
        let mut rng = rng_from(seed);
        let mut frames = Vec::new();
        for b in &bases {
            let reps = rng.gen_range(6..12);
            for _ in 0..reps {
                frames.push(
                    b.iter()
                        .map(|&x| x + rng.gen_range(-jitter..jitter))
                        .collect(),
                );
            }
        }
        feats(frames)
    }

    #[test]
    fn exact_fit_when_k_equals_points() {
        let f = feats(vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]]);
        let cfg = L1Config {
            k: 3,
            ..L1Config::default()
        };
        let (set, ids) = discretize(&f, &cfg, "u", 7).unwrap();
        assert_eq!(set.k(), 3);
        // inertia 0: every frame sits on its centroid
        for (frame, &id) in f.frames.iter().zip(ids.iter()) {
            assert_eq!(frame, &set.centroids[id as usize]);
        }
        // all three ids distinct
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn two_clusters_on_split_points() {
        let f = feats(vec![vec![0.0], vec![0.0], vec![10.0], vec![10.0]]);
        let cfg = L1Config {
            k: 2,
            ..L1Config::default()
        };
        let (set, _) = discretize(&f, &cfg, "u", 3).unwrap();
        let mut cs: Vec<f32> = set.centroids.iter().map(|c| c[0]).collect();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((cs[0] - 0.0).abs() < 1e-6);
        assert!((cs[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn k_clamps_to_frame_count() {
        let f = tone_features(2, 4, 5, 0.01, 99);
        let cfg = L1Config {
            k: 500,
            ..L1Config::default()
        };
        let (set, _) = discretize(&f, &cfg, "u", 5).unwrap();
        assert_eq!(set.k(), f.len());
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = rng_from(31);
        for trial in 0..100 {
            let n = rng.gen_range(10..60);
            let dim = rng.gen_range(2..6);
            let points: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0f32..3.0)).collect())
                .collect();
            let k = rng.gen_range(2..8);
            let (_, _, history) = kmeans(&points, k, 1e-4, 300, trial);
            for w in history.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "trial {trial}: inertia rose {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn degenerate_identical_features_keep_distinct_centroids() {
        let f = feats(vec![vec![1.0, 1.0]; 6]);
        let cfg = L1Config {
            k: 3,
            ..L1Config::default()
        };
        let (set, ids) = discretize(&f, &cfg, "u", 11).unwrap();
        for i in 0..set.k() {
            for j in i + 1..set.k() {
                assert_ne!(set.centroids[i], set.centroids[j]);
            }
        }
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn deterministic_given_seed() {
        let f = tone_features(3, 6, 9, 0.05, 50);
        let cfg = L1Config::default();
        let a = build_entry(&f, None, &cfg, 1, 2, "u", 77).unwrap();
        let b = build_entry(&f, None, &cfg, 1, 2, "u", 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn key_has_no_adjacent_duplicates() {
        let f = tone_features(4, 6, 13, 0.05, 51);
        let entry = build_entry(&f, None, &L1Config::default(), 1, 2, "u", 3).unwrap();
        assert!(entry.key.is_collapsed());
        assert!(entry
            .key
            .symbols
            .iter()
            .all(|&s| (s as usize) < entry.centroids.k()));
    }

    #[test]
    fn frame_distributions_are_valid() {
        let mut rng = rng_from(15);
        let centroids: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
            .collect();
        for cfg in [
            L1Config::default(),
            L1Config {
                distance_to_prob: DistanceToProb::InverseLinear,
                ..L1Config::default()
            },
        ] {
            for _ in 0..50 {
                let frame: Vec<f32> = (0..5).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
                let p = frame_distribution(&frame, &centroids, &cfg);
                assert!(p.iter().all(|&x| x >= 0.0));
                let sum: f64 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frame_on_centroid_has_argmax_there() {
        let mut rng = rng_from(19);
        let centroids: Vec<Vec<f32>> = (0..8)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
            .collect();
        for cfg in [
            L1Config::default(),
            L1Config {
                distance_to_prob: DistanceToProb::InverseLinear,
                ..L1Config::default()
            },
        ] {
            for (j, c) in centroids.iter().enumerate() {
                let p = frame_distribution(c, &centroids, &cfg);
                let argmax = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, j);
            }
        }
    }

    #[test]
    fn self_match_loss_is_small() {
        // k sized to the natural segment count of the synthetic features:
        // oversized k splits a segment across near-duplicate centroids and
        // inflates the key with assignment flip-flops
        let cfg = L1Config {
            k: 4,
            ..L1Config::default()
        };
        for seed in 0..10u64 {
            let f = tone_features(4, 8, seed, 0.02, 60 + seed);
            let entry = build_entry(&f, None, &cfg, 1, 1, "u", seed).unwrap();
            let loss = entry_loss(&f, &entry, &cfg).unwrap();
            assert!(loss < 0.1, "seed {seed}: self loss {loss}");
        }
    }

    #[test]
    fn self_match_beats_random_entries() {
        let cfg = L1Config {
            k: 4,
            ..L1Config::default()
        };
        let own = tone_features(4, 8, 3, 0.02, 70);
        let mut entries = vec![build_entry(&own, None, &cfg, 0, 0, "own", 3).unwrap()];
        for seed in 0..10u64 {
            let other = tone_features(4, 8, 100 + seed, 0.02, 80 + seed);
            entries.push(build_entry(&other, None, &cfg, 1, 1, "other", seed).unwrap());
        }
        let result = match_query(&own, &entries, &cfg, &|_| 0.1).unwrap();
        assert_eq!(result.best_entry, Some(0));
        assert!(result.hit);
    }

    #[test]
    fn empty_cache_misses() {
        let f = tone_features(3, 6, 1, 0.02, 90);
        let result = match_query(&f, &[], &L1Config::default(), &|_| 10.0).unwrap();
        assert!(!result.hit);
        assert!(result.best_entry.is_none());
        assert!(result.loss.is_infinite());
    }

    #[test]
    fn match_is_permutation_invariant_mod_ties() {
        let cfg = L1Config::default();
        let query = tone_features(4, 6, 5, 0.03, 71);
        let mut entries: Vec<L1Entry> = (0..6)
            .map(|s| {
                let f = tone_features(4, 6, 200 + s, 0.03, 72 + s);
                build_entry(&f, None, &cfg, s as u32, s as u32, "e", s).unwrap()
            })
            .collect();
        let a = match_query(&query, &entries, &cfg, &|_| 1.0).unwrap();
        let best_a = a.best_entry.map(|i| entries[i].intent);
        entries.reverse();
        let b = match_query(&query, &entries, &cfg, &|_| 1.0).unwrap();
        let best_b = b.best_entry.map(|i| entries[i].intent);
        assert_eq!(best_a, best_b);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn cross_transcript_losses_separate_from_self() {
        let cfg = L1Config {
            k: 5,
            ..L1Config::default()
        };
        let mut ok = 0;
        let trials = 200;
        for t in 0..trials {
            let base_a = 1000 + t;
            let base_b = 2000 + t;
            let a1 = tone_features(4, 8, 3 * t, 0.05, base_a);
            let a2 = tone_features(4, 8, 3 * t + 1, 0.05, base_a); // same transcript, new jitter
            let b = tone_features(4, 8, 3 * t + 2, 0.05, base_b);
            let entry = build_entry(&a1, None, &cfg, 0, 0, "a", t).unwrap();
            let self_loss = entry_loss(&a2, &entry, &cfg).unwrap();
            let cross_loss = entry_loss(&b, &entry, &cfg).unwrap();
            if cross_loss > self_loss {
                ok += 1;
            }
        }
        assert!(
            ok as f64 >= 0.95 * trials as f64,
            "separation held in {ok}/{trials} trials"
        );
    }

    #[test]
    fn entry_record_round_trip() {
        let f = tone_features(3, 5, 21, 0.02, 95);
        let entry = build_entry(&f, None, &L1Config::default(), 9, 4, "utt-21", 8).unwrap();
        let bytes = entry.to_bytes();
        let (back, used) = L1Entry::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(entry, back);
        assert_eq!(entry.size_bytes(), bytes.len());
    }

    #[test]
    fn full_size_entry_record_is_kilobyte_scale() {
        // the KxN float32 centroid matrix dominates: 70 x 60 floats
        let entry = L1Entry {
            centroids: CentroidSet {
                centroids: vec![vec![0.5; 60]; 70],
                utterance_id: "u".into(),
            },
            key: LabelSequence::new((0..40).map(|i| i as Symbol % 70).collect()),
            intent: 1,
            transcript_id: 1,
            created_at: 0,
            last_hit: 0,
        };
        let kb = entry.size_bytes() as f64 / 1024.0;
        assert!(kb > 1.0, "L1 record should be KB scale, got {kb:.2} KB");
    }
}
