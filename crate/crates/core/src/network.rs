//! Balanced single-phase radial feeder description.
//!
//! Buses are stored in breadth-first order from the substation, so every
//! bus appears after its parent. Bus `0` is the substation; every other bus
//! `k` owns exactly one branch, the one connecting it to its parent. Vectors
//! of length `N` (injections, flows, squared voltages and squared currents)
//! are indexed by that branch/bus pairing: slot `n` refers to bus `n + 1`
//! and to the branch feeding it.
//!
//! Everything is stored per-unit on the feeder's `s_base`. Voltage limits
//! and the substation voltage are kept squared, as the branch flow model
//! works with squared magnitudes.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network has no buses")]
    Empty,
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("branch {from}-{to} references unknown bus {bus}")]
    UnknownBus { from: u32, to: u32, bus: u32 },
    #[error("duplicate branch {from}-{to}")]
    DuplicateBranch { from: u32, to: u32 },
    #[error("branch {from}-{to} is a self loop")]
    SelfLoop { from: u32, to: u32 },
    #[error("branch {from}-{to} has nonpositive impedance magnitude")]
    NonPositiveImpedance { from: u32, to: u32 },
    #[error("branch {from}-{to} has negative resistance")]
    NegativeResistance { from: u32, to: u32 },
    #[error("cycle detected at branch {from}-{to}; network is not radial")]
    Cycle { from: u32, to: u32 },
    #[error("bus {0} is not connected to the substation")]
    Disconnected(u32),
    #[error("substation bus {0} cannot be a generation node")]
    GeneratorAtSubstation(u32),
    #[error("voltage limits must satisfy 0 < v_lo < v0 < v_hi (got v_lo={v_lo}, v0={v0}, v_hi={v_hi})")]
    InvalidVoltageLimits { v_lo: f64, v0: f64, v_hi: f64 },
    #[error("base quantities must be positive")]
    InvalidBase,
    #[error("unknown bus id {0}")]
    UnknownBusId(u32),
    #[error("(I - A) is singular; topology is not a tree")]
    SingularTopology,
    #[error("failed to read network file: {0}")]
    Read(String),
}

/// Voltage magnitude limits in per-unit (not squared).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimitsSpec {
    pub v_lo_pu: f64,
    pub v_hi_pu: f64,
}

impl Default for VoltageLimitsSpec {
    fn default() -> Self {
        Self {
            v_lo_pu: 0.95,
            v_hi_pu: 1.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSpec {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub p_demand_kw: f64,
    #[serde(default)]
    pub q_demand_kvar: f64,
    #[serde(default)]
    pub is_generator: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub from: u32,
    pub to: u32,
    pub r_pu: f64,
    pub x_pu: f64,
    /// Squared current limit in per-unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_max_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_max_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max_pu: Option<f64>,
}

/// On-disk feeder description. The substation is the first bus listed
/// unless `substation` names another one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    #[serde(default = "one")]
    pub v0_pu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substation: Option<u32>,
    pub buses: Vec<BusSpec>,
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub limits: VoltageLimitsSpec,
}

fn one() -> f64 {
    1.0
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(text).map_err(|e| NetworkError::Read(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetworkError::Read(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub name: Option<String>,
    /// Nominal active demand (pu). Negative values denote net production.
    pub p_demand: f64,
    /// Nominal reactive demand (pu).
    pub q_demand: f64,
    pub is_generator: bool,
}

/// Branch feeding bus `n + 1` from its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Parent bus position (0 = substation).
    pub parent: usize,
    pub r: f64,
    pub x: f64,
    pub l_max: f64,
    pub p_max: f64,
    pub q_max: f64,
}

impl Branch {
    pub fn z2(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }
}

/// Validated radial feeder. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    /// Squared substation voltage.
    pub v0: f64,
    /// Squared lower voltage limit.
    pub v_lo: f64,
    /// Squared upper voltage limit.
    pub v_hi: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    generators: Vec<usize>,
    children: Vec<Vec<usize>>,
    index_of: HashMap<u32, usize>,
}

impl Network {
    /// Number of branches, `N`. The feeder has `N + 1` buses.
    pub fn n(&self) -> usize {
        self.branches.len()
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    /// Branch `n` feeds bus `n + 1`.
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Slots (`0..N`) of the generation nodes, in ascending order.
    pub fn generator_slots(&self) -> &[usize] {
        &self.generators
    }

    /// External ids of the generation nodes, aligned with [`Self::generator_slots`].
    pub fn generator_ids(&self) -> Vec<u32> {
        self.generators.iter().map(|&s| self.buses[s + 1].id).collect()
    }

    /// Child slots of bus position `bus` (0 = substation).
    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Bus position of an external bus id.
    pub fn position(&self, id: u32) -> Result<usize, NetworkError> {
        self.index_of
            .get(&id)
            .copied()
            .ok_or(NetworkError::UnknownBusId(id))
    }

    /// Vector slot (`0..N`) of a non-substation bus id.
    pub fn slot(&self, id: u32) -> Result<usize, NetworkError> {
        match self.position(id)? {
            0 => Err(NetworkError::UnknownBusId(id)),
            k => Ok(k - 1),
        }
    }

    /// External id of the bus at vector slot `n`.
    pub fn slot_id(&self, n: usize) -> u32 {
        self.buses[n + 1].id
    }

    pub fn substation_id(&self) -> u32 {
        self.buses[0].id
    }

    /// Nominal demand vectors (pu), one entry per slot.
    pub fn nominal_demand(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.buses[1..].iter().map(|b| b.p_demand).collect();
        let q = self.buses[1..].iter().map(|b| b.q_demand).collect();
        (p, q)
    }

    /// MW per per-unit of active power.
    pub fn mw_per_pu(&self) -> f64 {
        self.s_base_mva
    }

    /// Bus position of the parent of slot `n`'s bus, as a slot if it is not
    /// the substation.
    pub fn parent_slot(&self, n: usize) -> Option<usize> {
        self.branches[n].parent.checked_sub(1)
    }

    /// Branch position list from the substation down to slot `n` (inclusive).
    pub fn path_to(&self, n: usize) -> Vec<usize> {
        let mut path = vec![n];
        let mut cur = n;
        while let Some(p) = self.parent_slot(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

/// Validates a feeder description and orders its buses from the substation.
pub fn build_network(spec: &NetworkSpec) -> Result<Network, NetworkError> {
    if spec.buses.is_empty() {
        return Err(NetworkError::Empty);
    }
    if !(spec.s_base_mva > 0.0 && spec.v_base_kv > 0.0 && spec.v0_pu > 0.0) {
        return Err(NetworkError::InvalidBase);
    }
    let v0 = spec.v0_pu * spec.v0_pu;
    let v_lo = spec.limits.v_lo_pu * spec.limits.v_lo_pu;
    let v_hi = spec.limits.v_hi_pu * spec.limits.v_hi_pu;
    if !(spec.limits.v_lo_pu > 0.0 && v_lo < v0 && v0 < v_hi) {
        return Err(NetworkError::InvalidVoltageLimits { v_lo, v0, v_hi });
    }

    let mut raw_index = HashMap::new();
    for (k, bus) in spec.buses.iter().enumerate() {
        if raw_index.insert(bus.id, k).is_some() {
            return Err(NetworkError::DuplicateBus(bus.id));
        }
    }
    let root_id = spec.substation.unwrap_or(spec.buses[0].id);
    let root = *raw_index
        .get(&root_id)
        .ok_or(NetworkError::UnknownBusId(root_id))?;

    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); spec.buses.len()];
    let mut seen_pairs = HashSet::new();
    for (e, br) in spec.branches.iter().enumerate() {
        let (from, to) = (br.from, br.to);
        let lookup = |bus: u32| {
            raw_index
                .get(&bus)
                .copied()
                .ok_or(NetworkError::UnknownBus { from, to, bus })
        };
        let (a, b) = (lookup(from)?, lookup(to)?);
        if a == b {
            return Err(NetworkError::SelfLoop { from, to });
        }
        if !seen_pairs.insert((a.min(b), a.max(b))) {
            return Err(NetworkError::DuplicateBranch { from, to });
        }
        if br.r_pu < 0.0 {
            return Err(NetworkError::NegativeResistance { from, to });
        }
        if !(br.r_pu * br.r_pu + br.x_pu * br.x_pu > 0.0) {
            return Err(NetworkError::NonPositiveImpedance { from, to });
        }
        adjacency[a].push((b, e));
        adjacency[b].push((a, e));
    }

    // Breadth-first walk from the substation; a revisit through an unused
    // branch closes a cycle.
    let mut order = vec![root];
    let mut parent_edge: Vec<Option<(usize, usize)>> = vec![None; spec.buses.len()];
    let mut visited = vec![false; spec.buses.len()];
    let mut used_edge = vec![false; spec.branches.len()];
    visited[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &(w, e) in &adjacency[u] {
            if used_edge[e] {
                continue;
            }
            used_edge[e] = true;
            if visited[w] {
                let br = &spec.branches[e];
                return Err(NetworkError::Cycle {
                    from: br.from,
                    to: br.to,
                });
            }
            visited[w] = true;
            parent_edge[w] = Some((u, e));
            order.push(w);
            queue.push_back(w);
        }
    }
    if let Some(k) = visited.iter().position(|v| !v) {
        return Err(NetworkError::Disconnected(spec.buses[k].id));
    }

    let mut position = vec![0usize; spec.buses.len()];
    for (pos, &raw) in order.iter().enumerate() {
        position[raw] = pos;
    }

    let buses: Vec<Bus> = order
        .iter()
        .map(|&raw| {
            let b = &spec.buses[raw];
            let to_pu = 1.0 / (1000.0 * spec.s_base_mva);
            Bus {
                id: b.id,
                name: b.name.clone(),
                p_demand: b.p_demand_kw * to_pu,
                q_demand: b.q_demand_kvar * to_pu,
                is_generator: b.is_generator,
            }
        })
        .collect();
    if buses[0].is_generator {
        return Err(NetworkError::GeneratorAtSubstation(buses[0].id));
    }

    let mut children = vec![Vec::new(); buses.len()];
    let branches: Vec<Branch> = order[1..]
        .iter()
        .enumerate()
        .map(|(slot, &raw)| {
            let (parent_raw, e) = parent_edge[raw].expect("non-root bus has a parent");
            let br = &spec.branches[e];
            let parent = position[parent_raw];
            children[parent].push(slot);
            Branch {
                parent,
                r: br.r_pu,
                x: br.x_pu,
                l_max: br.l_max_pu.unwrap_or(f64::INFINITY),
                p_max: br.p_max_pu.unwrap_or(f64::INFINITY),
                q_max: br.q_max_pu.unwrap_or(f64::INFINITY),
            }
        })
        .collect();

    let generators = (0..branches.len())
        .filter(|&s| buses[s + 1].is_generator)
        .collect();
    let index_of = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();

    Ok(Network {
        s_base_mva: spec.s_base_mva,
        v_base_kv: spec.v_base_kv,
        v0,
        v_lo,
        v_hi,
        buses,
        branches,
        generators,
        children,
        index_of,
    })
}

/// Loads and validates a network JSON file.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network, NetworkError> {
    build_network(&NetworkSpec::from_path(path)?)
}
