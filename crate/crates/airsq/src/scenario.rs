//! Scenario and trajectory data model: domain types, JSONL ingestion,
//! corruption filtering, balanced per-type sampling, and the rigid
//! world/ego coordinate transforms.
//!
//! All types are immutable after construction; loading and sampling are
//! pure given (inputs, seed).

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Future trajectory length: 8 s at 10 Hz.
pub const TRAJ_LEN: usize = 80;
/// Past state count: 1 s of history plus the current state at 10 Hz.
pub const PAST_LEN: usize = 11;

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// 2D point/vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self { x: 0.0, y: 0.0 }
    }

    /// Rotate counter-clockwise by `angle` radians.
    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
        }
    }

    pub fn dist(self, other: Self) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Self) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// Wrap an angle into [-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// A rigid frame: origin plus heading, with heading in [-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub origin: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(origin: Vec2, heading: f64) -> Self {
        Self { origin, heading }
    }

    /// World point -> ego frame (ego at origin, heading along +x).
    pub fn to_ego(&self, p: Vec2) -> Vec2 {
        (p - self.origin).rotate(-self.heading)
    }

    /// Ego point -> world frame. Inverse of [`Pose::to_ego`].
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.origin
    }

    /// Rotate a direction vector (velocity) into the ego frame.
    pub fn dir_to_ego(&self, v: Vec2) -> Vec2 {
        v.rotate(-self.heading)
    }

    /// Rotate a direction vector (velocity) out of the ego frame.
    pub fn dir_to_world(&self, v: Vec2) -> Vec2 {
        v.rotate(self.heading)
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Object category. Every agent has exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl ObjectType {
    pub const ALL: [ObjectType; 3] = [
        ObjectType::Vehicle,
        ObjectType::Pedestrian,
        ObjectType::Cyclist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectType::Vehicle => "vehicle",
            ObjectType::Pedestrian => "pedestrian",
            ObjectType::Cyclist => "cyclist",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "vehicle" => Some(ObjectType::Vehicle),
            "pedestrian" => Some(ObjectType::Pedestrian),
            "cyclist" => Some(ObjectType::Cyclist),
            _ => None,
        }
    }

    /// Stable index used for per-type tables.
    pub fn index(self) -> usize {
        match self {
            ObjectType::Vehicle => 0,
            ObjectType::Pedestrian => 1,
            ObjectType::Cyclist => 2,
        }
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An 80-step (x, y) path with a per-step validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Vec2>,
    pub valid: Vec<bool>,
}

impl Trajectory {
    /// Build a trajectory, enforcing the length and finiteness invariants.
    pub fn new(points: Vec<Vec2>, valid: Vec<bool>) -> Result<Self> {
        if points.len() != TRAJ_LEN {
            return Err(Error::invariant(
                "future length",
                format!("expected {} points, got {}", TRAJ_LEN, points.len()),
            ));
        }
        if valid.len() != TRAJ_LEN {
            return Err(Error::invariant(
                "future length",
                format!("expected {} validity flags, got {}", TRAJ_LEN, valid.len()),
            ));
        }
        for (t, (p, &v)) in points.iter().zip(valid.iter()).enumerate() {
            if v && !p.is_finite() {
                return Err(Error::invariant(
                    "future coordinates",
                    format!("non-finite coordinates at valid step {t}"),
                ));
            }
        }
        Ok(Self { points, valid })
    }

    /// All steps valid.
    pub fn from_points(points: Vec<Vec2>) -> Result<Self> {
        let valid = vec![true; points.len()];
        Self::new(points, valid)
    }

    /// Constant trajectory at `p`, fully valid.
    pub fn constant(p: Vec2) -> Self {
        Self {
            points: vec![p; TRAJ_LEN],
            valid: vec![true; TRAJ_LEN],
        }
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Index of the last valid step, if any.
    pub fn last_valid(&self) -> Option<usize> {
        self.valid.iter().rposition(|&v| v)
    }

    /// Apply a rigid transform into the given pose's ego frame.
    /// Invalid steps are zeroed.
    pub fn to_ego_frame(&self, pose: &Pose) -> Trajectory {
        let points = self
            .points
            .iter()
            .zip(self.valid.iter())
            .map(|(&p, &v)| if v { pose.to_ego(p) } else { Vec2::zero() })
            .collect();
        Trajectory {
            points,
            valid: self.valid.clone(),
        }
    }

    /// Apply a rigid transform from the given pose's ego frame to world.
    pub fn to_world_frame(&self, pose: &Pose) -> Trajectory {
        let points = self
            .points
            .iter()
            .zip(self.valid.iter())
            .map(|(&p, &v)| if v { pose.to_world(p) } else { Vec2::zero() })
            .collect();
        Trajectory {
            points,
            valid: self.valid.clone(),
        }
    }
}

/// One past observation of an agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PastState {
    pub pos: Vec2,
    pub vel: Vec2,
    pub heading: f64,
    pub valid: bool,
}

impl PastState {
    pub fn invalid() -> Self {
        Self {
            pos: Vec2::zero(),
            vel: Vec2::zero(),
            heading: 0.0,
            valid: false,
        }
    }
}

/// 11 past states (1 s history plus current, 10 Hz). The last entry is the
/// current state.
#[derive(Debug, Clone, PartialEq)]
pub struct PastStates {
    pub states: Vec<PastState>,
}

impl PastStates {
    pub fn new(states: Vec<PastState>) -> Result<Self> {
        if states.len() != PAST_LEN {
            return Err(Error::invariant(
                "past length",
                format!("expected {} states, got {}", PAST_LEN, states.len()),
            ));
        }
        for (t, s) in states.iter().enumerate() {
            if s.valid {
                if !s.pos.is_finite() || !s.vel.is_finite() || !s.heading.is_finite() {
                    return Err(Error::invariant(
                        "past state",
                        format!("non-finite values at valid step {t}"),
                    ));
                }
                if s.heading < -std::f64::consts::PI - 1e-12
                    || s.heading > std::f64::consts::PI + 1e-12
                {
                    return Err(Error::invariant(
                        "heading",
                        format!("heading {} outside [-pi, pi] at step {t}", s.heading),
                    ));
                }
            }
        }
        Ok(Self { states })
    }

    /// Current state = last entry.
    pub fn current(&self) -> &PastState {
        &self.states[PAST_LEN - 1]
    }

    /// Latest valid state, scanning backwards from the current one.
    pub fn last_valid(&self) -> Option<&PastState> {
        self.states.iter().rev().find(|s| s.valid)
    }
}

/// One agent of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: i64,
    pub kind: ObjectType,
    pub is_sdc: bool,
    pub past: PastStates,
    pub future: Trajectory,
}

impl Agent {
    /// Pose at the most recent valid past state.
    pub fn current_pose(&self) -> Option<Pose> {
        self.past
            .last_valid()
            .map(|s| Pose::new(s.pos, s.heading))
    }

    /// Ground-truth future in the agent's own ego frame.
    pub fn ego_future(&self) -> Result<Trajectory> {
        let pose = self.current_pose().ok_or_else(|| {
            Error::invariant("past", format!("agent {} has no valid past state", self.id))
        })?;
        Ok(self.future.to_ego_frame(&pose))
    }
}

/// A two-agent interaction scene plus context agents and road polylines.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub agents: Vec<Agent>,
    /// Indices into `agents` of the two interacting agents.
    pub pair: (usize, usize),
    pub roads: Vec<Vec<Vec2>>,
}

impl Scenario {
    pub fn new(agents: Vec<Agent>, pair: (usize, usize), roads: Vec<Vec<Vec2>>) -> Result<Self> {
        if agents.len() < 2 {
            return Err(Error::invariant(
                "agents",
                format!("need at least 2 agents, got {}", agents.len()),
            ));
        }
        if pair.0 == pair.1 || pair.0 >= agents.len() || pair.1 >= agents.len() {
            return Err(Error::invariant(
                "pair",
                format!(
                    "pair indices ({}, {}) must be distinct and < {}",
                    pair.0,
                    pair.1,
                    agents.len()
                ),
            ));
        }
        let mut ids: Vec<i64> = agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invariant("id", "agent ids must be unique".to_string()));
        }
        Ok(Self {
            agents,
            pair,
            roads,
        })
    }

    /// The interacting pair, in slot order.
    pub fn pair_agents(&self) -> (&Agent, &Agent) {
        (&self.agents[self.pair.0], &self.agents[self.pair.1])
    }

    /// Agent occupying the given pair slot (0 or 1).
    pub fn pair_agent(&self, slot: usize) -> &Agent {
        match slot {
            0 => &self.agents[self.pair.0],
            1 => &self.agents[self.pair.1],
            _ => panic!("pair slot must be 0 or 1"),
        }
    }

    /// Same scene with the pair slots swapped.
    pub fn with_swapped_pair(&self) -> Scenario {
        Scenario {
            agents: self.agents.clone(),
            pair: (self.pair.1, self.pair.0),
            roads: self.roads.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Corruption filtering
// ---------------------------------------------------------------------------

/// True if any two consecutive valid steps are more than `max_step` apart.
pub fn is_corrupt(traj: &Trajectory, max_step: f64) -> bool {
    for t in 0..TRAJ_LEN - 1 {
        if traj.valid[t] && traj.valid[t + 1] && traj.points[t].dist(traj.points[t + 1]) > max_step
        {
            return true;
        }
    }
    false
}

/// Result of [`filter_corrupt`]: surviving trajectories plus the drop count.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<Trajectory>,
    pub dropped: usize,
}

/// Keep exactly those trajectories where every pair of consecutive valid
/// steps moves at most `max_step` meters. Steps separated by an invalid gap
/// are not compared.
pub fn filter_corrupt(trajectories: Vec<Trajectory>, max_step: f64) -> FilterOutcome {
    assert!(max_step > 0.0, "max_step must be positive");
    let before = trajectories.len();
    let kept: Vec<Trajectory> = trajectories
        .into_iter()
        .filter(|t| !is_corrupt(t, max_step))
        .collect();
    let dropped = before - kept.len();
    FilterOutcome { kept, dropped }
}

/// Default corruption threshold: 10 m per 0.1 s step (100 m/s).
pub const DEFAULT_MAX_STEP: f64 = 10.0;

// ---------------------------------------------------------------------------
// Balanced sampling
// ---------------------------------------------------------------------------

/// Partition scenarios by the object type of pair slot 0.
pub fn split_by_primary_type(scenarios: &[Scenario]) -> [Vec<Scenario>; 3] {
    let mut out: [Vec<Scenario>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in scenarios {
        let kind = s.pair_agent(0).kind;
        out[kind.index()].push(s.clone());
    }
    out
}

/// Draw `n` scenarios: each draw picks one of the three type datasets
/// uniformly, then a uniform element of that dataset, with replacement.
/// Deterministic given `seed`.
pub fn balanced_sample(datasets: &[Vec<Scenario>; 3], n: usize, seed: u64) -> Result<Vec<Scenario>> {
    for kind in ObjectType::ALL {
        if datasets[kind.index()].is_empty() {
            return Err(Error::EmptyDataset(kind.name()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let d = rng.gen_range(0..3usize);
        let i = rng.gen_range(0..datasets[d].len());
        out.push(datasets[d][i].clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSONL ingestion
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AgentWire {
    id: i64,
    #[serde(rename = "type")]
    kind: String,
    is_sdc: bool,
    past: Vec<[f64; 6]>,
    future: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioWire {
    agents: Vec<AgentWire>,
    pair: [usize; 2],
    roads: Vec<Vec<[f64; 2]>>,
}

fn agent_from_wire(w: AgentWire, line: usize) -> Result<Agent> {
    let at = |e: Error| match e {
        Error::Invariant { field, detail } => Error::InvariantAt { line, field, detail },
        other => other,
    };
    let kind = ObjectType::from_name(&w.kind).ok_or_else(|| Error::InvariantAt {
        line,
        field: "type".to_string(),
        detail: format!("unknown object type {:?}", w.kind),
    })?;
    if w.past.len() != PAST_LEN {
        return Err(Error::InvariantAt {
            line,
            field: "past length".to_string(),
            detail: format!("expected {} states, got {}", PAST_LEN, w.past.len()),
        });
    }
    if w.future.len() != TRAJ_LEN {
        return Err(Error::InvariantAt {
            line,
            field: "future length".to_string(),
            detail: format!("expected {} points, got {}", TRAJ_LEN, w.future.len()),
        });
    }
    let states = w
        .past
        .iter()
        .map(|&[x, y, vx, vy, heading, valid]| PastState {
            pos: Vec2::new(x, y),
            vel: Vec2::new(vx, vy),
            heading,
            valid: valid != 0.0,
        })
        .collect();
    let past = PastStates::new(states).map_err(at)?;
    let mut points = Vec::with_capacity(TRAJ_LEN);
    let mut valid = Vec::with_capacity(TRAJ_LEN);
    for &[x, y, v] in &w.future {
        points.push(Vec2::new(x, y));
        valid.push(v != 0.0);
    }
    let future = Trajectory::new(points, valid).map_err(at)?;
    Ok(Agent {
        id: w.id,
        kind,
        is_sdc: w.is_sdc,
        past,
        future,
    })
}

fn agent_to_wire(a: &Agent) -> AgentWire {
    AgentWire {
        id: a.id,
        kind: a.kind.name().to_string(),
        is_sdc: a.is_sdc,
        past: a
            .past
            .states
            .iter()
            .map(|s| {
                [
                    s.pos.x,
                    s.pos.y,
                    s.vel.x,
                    s.vel.y,
                    s.heading,
                    if s.valid { 1.0 } else { 0.0 },
                ]
            })
            .collect(),
        future: a
            .future
            .points
            .iter()
            .zip(a.future.valid.iter())
            .map(|(p, &v)| [p.x, p.y, if v { 1.0 } else { 0.0 }])
            .collect(),
    }
}

fn scenario_from_wire(w: ScenarioWire, line: usize) -> Result<Scenario> {
    let agents = w
        .agents
        .into_iter()
        .map(|a| agent_from_wire(a, line))
        .collect::<Result<Vec<_>>>()?;
    let roads = w
        .roads
        .into_iter()
        .map(|poly| poly.into_iter().map(|[x, y]| Vec2::new(x, y)).collect())
        .collect();
    Scenario::new(agents, (w.pair[0], w.pair[1]), roads).map_err(|e| match e {
        Error::Invariant { field, detail } => Error::InvariantAt { line, field, detail },
        other => other,
    })
}

fn scenario_to_wire(s: &Scenario) -> ScenarioWire {
    ScenarioWire {
        agents: s.agents.iter().map(agent_to_wire).collect(),
        pair: [s.pair.0, s.pair.1],
        roads: s
            .roads
            .iter()
            .map(|poly| poly.iter().map(|p| [p.x, p.y]).collect())
            .collect(),
    }
}

/// Parse a scenario file: one JSON object per line. Blank lines are ignored.
pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: ScenarioWire = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            source: e,
        })?;
        out.push(scenario_from_wire(wire, line_no)?);
    }
    Ok(out)
}

/// Serialize scenarios to JSONL. Exact float round-trip: `load_scenarios`
/// after `save_scenarios` reproduces the input bit-for-bit.
pub fn save_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in scenarios {
        let wire = scenario_to_wire(s);
        serde_json::to_writer(&mut w, &wire).map_err(|e| Error::Parse { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
