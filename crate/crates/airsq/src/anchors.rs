//! Masked K-Means over ground-truth trajectories, producing per-object-type
//! anchor sets, plus anchor assignment for supervision.
//!
//! Distances use the availability mask: the mean over jointly valid steps of
//! the squared Euclidean per-step distance. Centroid updates average each
//! time step over the members whose step is valid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{filter_corrupt, ObjectType, Scenario, Trajectory, Vec2, TRAJ_LEN};

/// Coordinate used for sentinel centroids that pad a small anchor set up to
/// a common K. Far enough that no real trajectory ever assigns to one.
pub const SENTINEL_COORD: f64 = 1e6;

/// Per-object-type anchor set: K centroid trajectories (all steps valid)
/// plus member counts from the last fit.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub kind: ObjectType,
    pub centroids: Vec<Trajectory>,
    pub counts: Vec<usize>,
}

impl AnchorSet {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Centroids padded to `k_max` with unreachable sentinel trajectories.
    /// Padded modes must be masked out of confidence softmaxes by callers.
    pub fn padded_centroids(&self, k_max: usize) -> Vec<Trajectory> {
        assert!(k_max >= self.k(), "k_max below fitted K");
        let mut out = self.centroids.clone();
        out.resize(
            k_max,
            Trajectory::constant(Vec2::new(SENTINEL_COORD, SENTINEL_COORD)),
        );
        out
    }
}

/// Ground-truth anchor indices for the two pair agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub i_star: usize,
    pub j_star: usize,
}

/// Mean over jointly valid steps of the squared Euclidean distance.
/// Errors when no step is valid in both trajectories.
pub fn masked_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..TRAJ_LEN {
        if a.valid[t] && b.valid[t] {
            sum += a.points[t].dist_sq(b.points[t]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoJointlyValidSteps);
    }
    Ok(sum / n as f64)
}

/// Argmin over centroids of [`masked_distance`]; ties go to the lowest index.
pub fn assign_anchor(trajectory: &Trajectory, anchors: &AnchorSet) -> Result<usize> {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in anchors.centroids.iter().enumerate() {
        let d = masked_distance(trajectory, c)?;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Outcome of one K-Means run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Trajectory>,
    pub counts: Vec<usize>,
    pub assignments: Vec<usize>,
    /// Total inertia (sum of members' masked distance to their centroid)
    /// recorded after each update step.
    pub inertia_history: Vec<f64>,
}

/// The K distinct member indices used to seed the centroids.
pub fn initial_centroid_indices(population: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, population, k).into_vec()
}

/// Fill a member trajectory's invalid steps so it can serve as an initial
/// centroid: forward-fill from the previous valid step, back-fill the head.
fn densify(traj: &Trajectory) -> Trajectory {
    let first_valid = traj
        .valid
        .iter()
        .position(|&v| v)
        .expect("trajectory has at least one valid step");
    let mut points = traj.points.clone();
    let mut last = points[first_valid];
    for t in 0..TRAJ_LEN {
        if traj.valid[t] {
            last = points[t];
        } else {
            points[t] = last;
        }
    }
    for t in (0..first_valid).rev() {
        points[t] = points[first_valid];
    }
    Trajectory {
        points,
        valid: vec![true; TRAJ_LEN],
    }
}

/// Masked K-Means: alternate nearest-centroid assignment (ties to the lowest
/// index) and per-time-step averaging over members with that step available.
/// A step no member covers keeps the previous centroid value; a cluster that
/// loses all members keeps its previous centroid. Runs `iters` rounds or
/// until assignments stop changing. Deterministic given `seed`.
pub fn kmeans_fit(
    trajectories: &[Trajectory],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    let n = trajectories.len();
    if k == 0 {
        return Err(Error::Config("cluster count must be positive".to_string()));
    }
    if k > n {
        return Err(Error::ClusterCountExceedsPopulation { k, n });
    }
    for (i, t) in trajectories.iter().enumerate() {
        if t.num_valid() == 0 {
            return Err(Error::invariant(
                "trajectory",
                format!("trajectory {i} has no valid steps"),
            ));
        }
    }

    let mut centroids: Vec<Trajectory> = initial_centroid_indices(n, k, seed)
        .into_iter()
        .map(|i| densify(&trajectories[i]))
        .collect();
    let mut assignments = vec![usize::MAX; n];
    let mut inertia_history = Vec::new();

    for _ in 0..iters.max(1) {
        // Assignment step.
        let mut changed = false;
        for (i, traj) in trajectories.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = masked_distance(traj, centroid)?;
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }

        // Update step: per-time-step mean over members with the step valid.
        let mut sums = vec![[Vec2::zero(); TRAJ_LEN]; k];
        let mut cnts = vec![[0usize; TRAJ_LEN]; k];
        for (traj, &a) in trajectories.iter().zip(assignments.iter()) {
            for t in 0..TRAJ_LEN {
                if traj.valid[t] {
                    sums[a][t] = sums[a][t] + traj.points[t];
                    cnts[a][t] += 1;
                }
            }
        }
        for c in 0..k {
            for t in 0..TRAJ_LEN {
                if cnts[c][t] > 0 {
                    centroids[c].points[t] = sums[c][t] * (1.0 / cnts[c][t] as f64);
                }
            }
        }

        let inertia: f64 = trajectories
            .iter()
            .zip(assignments.iter())
            .map(|(traj, &a)| masked_distance(traj, &centroids[a]).unwrap_or(f64::INFINITY))
            .sum();
        inertia_history.push(inertia);

        if !changed {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    Ok(KMeansFit {
        centroids,
        counts,
        assignments,
        inertia_history,
    })
}

/// Per-type cluster counts and fit options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k_vehicle: usize,
    pub k_pedestrian: usize,
    pub k_cyclist: usize,
    pub iters: usize,
    pub seed: u64,
    /// Corruption filter threshold applied before fitting.
    pub max_step: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_vehicle: 32,
            k_pedestrian: 8,
            k_cyclist: 30,
            iters: 50,
            seed: 0,
            max_step: crate::scenario::DEFAULT_MAX_STEP,
        }
    }
}

impl ClusterConfig {
    pub fn k_for(&self, kind: ObjectType) -> usize {
        match kind {
            ObjectType::Vehicle => self.k_vehicle,
            ObjectType::Pedestrian => self.k_pedestrian,
            ObjectType::Cyclist => self.k_cyclist,
        }
    }
}

/// Fit one anchor set per object type from the pair agents' ego-frame
/// futures, filtering corrupt trajectories first.
pub fn fit_all_types(
    scenarios: &[Scenario],
    config: &ClusterConfig,
) -> Result<BTreeMap<ObjectType, AnchorSet>> {
    let mut per_type: [Vec<Trajectory>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in scenarios {
        for slot in 0..2 {
            let agent = s.pair_agent(slot);
            if agent.future.num_valid() == 0 {
                continue;
            }
            per_type[agent.kind.index()].push(agent.ego_future()?);
        }
    }
    let mut out = BTreeMap::new();
    for kind in ObjectType::ALL {
        let k = config.k_for(kind);
        let kept = filter_corrupt(std::mem::take(&mut per_type[kind.index()]), config.max_step);
        if kept.kept.len() < k {
            return Err(Error::InsufficientExamples {
                kind: kind.name(),
                have: kept.kept.len(),
                need: k,
            });
        }
        let fit = kmeans_fit(&kept.kept, k, config.iters, config.seed)?;
        out.insert(
            kind,
            AnchorSet {
                kind,
                centroids: fit.centroids,
                counts: fit.counts,
            },
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Anchor file I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnchorSetWire {
    #[serde(rename = "type")]
    kind: String,
    k: usize,
    centroids: Vec<Vec<[f64; 2]>>,
    counts: Vec<usize>,
}

/// Write one anchor set as JSON.
pub fn save_anchor_set(path: impl AsRef<Path>, anchors: &AnchorSet) -> Result<()> {
    let wire = AnchorSetWire {
        kind: anchors.kind.name().to_string(),
        k: anchors.k(),
        centroids: anchors
            .centroids
            .iter()
            .map(|c| c.points.iter().map(|p| [p.x, p.y]).collect())
            .collect(),
        counts: anchors.counts.clone(),
    };
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer(&mut f, &wire).map_err(|e| Error::Parse { line: 0, source: e })?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_anchor_set(path: impl AsRef<Path>) -> Result<AnchorSet> {
    let data = std::fs::read_to_string(path)?;
    let wire: AnchorSetWire =
        serde_json::from_str(&data).map_err(|e| Error::Parse { line: 1, source: e })?;
    let kind = ObjectType::from_name(&wire.kind)
        .ok_or_else(|| Error::invariant("type", format!("unknown object type {:?}", wire.kind)))?;
    if wire.centroids.len() != wire.k {
        return Err(Error::invariant(
            "k",
            format!("k = {} but {} centroids", wire.k, wire.centroids.len()),
        ));
    }
    let centroids = wire
        .centroids
        .into_iter()
        .map(|c| {
            let points: Vec<Vec2> = c.into_iter().map(|[x, y]| Vec2::new(x, y)).collect();
            Trajectory::from_points(points)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnchorSet {
        kind,
        centroids,
        counts: wire.counts,
    })
}

/// Write `<type>.json` per anchor set into a directory.
pub fn save_anchor_dir(
    dir: impl AsRef<Path>,
    sets: &BTreeMap<ObjectType, AnchorSet>,
) -> Result<()> {
    std::fs::create_dir_all(&dir)?;
    for (kind, set) in sets {
        save_anchor_set(dir.as_ref().join(format!("{}.json", kind.name())), set)?;
    }
    Ok(())
}

/// Load every `<type>.json` present in a directory.
pub fn load_anchor_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<ObjectType, AnchorSet>> {
    let mut out = BTreeMap::new();
    for kind in ObjectType::ALL {
        let path = dir.as_ref().join(format!("{}.json", kind.name()));
        if path.exists() {
            out.insert(kind, load_anchor_set(path)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no anchor files found in {}",
            dir.as_ref().display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn offset_traj(base: Vec2, step: Vec2) -> Trajectory {
        let points = (0..TRAJ_LEN)
            .map(|t| base + step * t as f64)
            .collect();
        Trajectory::from_points(points).unwrap()
    }

    #[test]
    fn masked_distance_identical_is_zero() {
        let a = offset_traj(Vec2::new(1.0, 2.0), Vec2::new(0.5, 0.0));
        assert_eq!(masked_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn masked_distance_three_four_five() {
        let a = Trajectory::constant(Vec2::zero());
        let b = Trajectory::constant(Vec2::new(3.0, 4.0));
        assert!((masked_distance(&a, &b).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn masked_distance_uses_joint_mask_only() {
        // a valid on first 40 steps, offset (1, 0) there, garbage elsewhere.
        let mut a = Trajectory::constant(Vec2::new(1.0, 0.0));
        for t in 40..TRAJ_LEN {
            a.valid[t] = false;
            a.points[t] = Vec2::new(500.0, -900.0);
        }
        let b = Trajectory::constant(Vec2::zero());
        assert!((masked_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_distance_no_overlap_errors() {
        let mut a = Trajectory::constant(Vec2::zero());
        let mut b = Trajectory::constant(Vec2::zero());
        for t in 0..TRAJ_LEN {
            a.valid[t] = t < 40;
            b.valid[t] = t >= 40;
        }
        assert!(matches!(
            masked_distance(&a, &b),
            Err(Error::NoJointlyValidSteps)
        ));
    }

    #[test]
    fn kmeans_single_cluster_of_identical_inputs() {
        let t = offset_traj(Vec2::new(2.0, -1.0), Vec2::new(0.1, 0.2));
        let fit = kmeans_fit(&vec![t.clone(); 10], 1, 20, 3).unwrap();
        assert_eq!(fit.centroids[0], t);
        assert!(fit.inertia_history.last().unwrap().abs() < 1e-18);
    }

    #[test]
    fn kmeans_two_planted_groups() {
        let mut trajs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let jit = Vec2::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            trajs.push(Trajectory::constant(Vec2::zero() + jit));
        }
        for _ in 0..30 {
            let jit = Vec2::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            trajs.push(Trajectory::constant(Vec2::new(100.0, 100.0) + jit));
        }
        let fit = kmeans_fit(&trajs, 2, 50, 5).unwrap();
        // Each centroid near one of the group means.
        let mut near_origin = 0;
        let mut near_far = 0;
        for c in &fit.centroids {
            let p = c.points[0];
            if p.dist(Vec2::zero()) < 1.0 {
                near_origin += 1;
            }
            if p.dist(Vec2::new(100.0, 100.0)) < 1.0 {
                near_far += 1;
            }
        }
        assert_eq!((near_origin, near_far), (1, 1));
        // Assignments match a brute-force nearest-centroid oracle.
        let set = AnchorSet {
            kind: ObjectType::Vehicle,
            centroids: fit.centroids.clone(),
            counts: fit.counts.clone(),
        };
        for (i, t) in trajs.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in fit.centroids.iter().enumerate() {
                let d = masked_distance(t, centroid).unwrap();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(fit.assignments[i], best);
            assert_eq!(assign_anchor(t, &set).unwrap(), best);
        }
    }

    #[test]
    fn kmeans_k_equals_population() {
        let trajs: Vec<Trajectory> = (0..5)
            .map(|i| Trajectory::constant(Vec2::new(i as f64 * 10.0, 0.0)))
            .collect();
        let fit = kmeans_fit(&trajs, 5, 10, 9).unwrap();
        assert!(fit.inertia_history[0].abs() < 1e-18);
        assert_eq!(fit.counts, vec![1; 5]);
    }

    #[test]
    fn kmeans_k_too_large_errors() {
        let trajs = vec![Trajectory::constant(Vec2::zero()); 3];
        assert!(matches!(
            kmeans_fit(&trajs, 4, 10, 0),
            Err(Error::ClusterCountExceedsPopulation { k: 4, n: 3 })
        ));
    }

    #[test]
    fn kmeans_inertia_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut trajs = Vec::new();
        for _ in 0..120 {
            let base = Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let step = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mut t = offset_traj(base, step);
            for v in t.valid.iter_mut() {
                if rng.gen_bool(0.3) {
                    *v = false;
                }
            }
            if t.num_valid() == 0 {
                t.valid[0] = true;
            }
            trajs.push(t);
        }
        let fit = kmeans_fit(&trajs, 6, 40, 2).unwrap();
        for w in fit.inertia_history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0),
                "inertia increased: {w:?}"
            );
        }
    }

    #[test]
    fn kmeans_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let trajs: Vec<Trajectory> = (0..40)
            .map(|_| {
                Trajectory::constant(Vec2::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                ))
            })
            .collect();
        let a = kmeans_fit(&trajs, 4, 25, 17).unwrap();
        let b = kmeans_fit(&trajs, 4, 25, 17).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn assign_anchor_exact_centroid_and_tie_rule() {
        let centroids = vec![
            Trajectory::constant(Vec2::new(-10.0, 0.0)),
            Trajectory::constant(Vec2::new(0.0, 0.0)),
            Trajectory::constant(Vec2::new(10.0, 0.0)),
            Trajectory::constant(Vec2::new(20.0, 0.0)),
        ];
        let set = AnchorSet {
            kind: ObjectType::Vehicle,
            counts: vec![1; 4],
            centroids,
        };
        assert_eq!(assign_anchor(&Trajectory::constant(Vec2::new(20.0, 0.0)), &set).unwrap(), 3);
        // Equidistant between centroids 1 and 2: lowest index wins.
        assert_eq!(assign_anchor(&Trajectory::constant(Vec2::new(5.0, 0.0)), &set).unwrap(), 1);
    }

    #[test]
    fn assign_matches_bruteforce_scan_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let centroids: Vec<Trajectory> = (0..8)
            .map(|_| {
                offset_traj(
                    Vec2::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)),
                    Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                )
            })
            .collect();
        let set = AnchorSet {
            kind: ObjectType::Cyclist,
            counts: vec![0; 8],
            centroids: centroids.clone(),
        };
        for _ in 0..200 {
            let mut t = offset_traj(
                Vec2::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)),
                Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            );
            for v in t.valid.iter_mut() {
                if rng.gen_bool(0.2) {
                    *v = false;
                }
            }
            if t.num_valid() == 0 {
                t.valid[7] = true;
            }
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = masked_distance(&t, centroid).unwrap();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(assign_anchor(&t, &set).unwrap(), best);
        }
    }

    #[test]
    fn padded_centroids_are_unreachable() {
        let set = AnchorSet {
            kind: ObjectType::Pedestrian,
            centroids: vec![Trajectory::constant(Vec2::zero())],
            counts: vec![5],
        };
        let padded = set.padded_centroids(4);
        assert_eq!(padded.len(), 4);
        assert_eq!(padded[3].points[0].x, SENTINEL_COORD);
        // A nearby trajectory still assigns to the real centroid.
        let probe = Trajectory::constant(Vec2::new(3.0, 3.0));
        let padded_set = AnchorSet {
            kind: ObjectType::Pedestrian,
            centroids: padded,
            counts: vec![5, 0, 0, 0],
        };
        assert_eq!(assign_anchor(&probe, &padded_set).unwrap(), 0);
    }

    #[test]
    fn anchor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = AnchorSet {
            kind: ObjectType::Cyclist,
            centroids: vec![
                offset_traj(Vec2::new(0.3, -0.7), Vec2::new(0.11, 0.02)),
                offset_traj(Vec2::new(5.0, 2.0), Vec2::new(-0.2, 0.3)),
            ],
            counts: vec![12, 30],
        };
        let path = dir.path().join("cyclist.json");
        save_anchor_set(&path, &set).unwrap();
        let loaded = load_anchor_set(&path).unwrap();
        assert_eq!(loaded, set);
    }
}
