//! Static grid description, attack vectors and attack-modulated network data.

mod admittance;
mod case;

pub use admittance::{build_admittance, AdmittanceMatrix};
pub(crate) use admittance::branch_two_port;
pub use case::{parse_case, parse_case_file};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Load,
    Generator,
    Slack,
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// External bus number from the case file.
    pub id: usize,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    /// Fixed shunt admittance in p.u. (conductance + j susceptance).
    pub shunt: Complex64,
    /// Voltage magnitude and angle (rad) stored in the case, used for warm starts.
    pub v_init: f64,
    pub angle_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// Internal bus index.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Quadratic cost coefficients `(c2, c1, c0)` on the p.u. real power output.
    pub cost: [f64; 3],
    /// Fraction of `p_max` a generator may move between base and contingency dispatch.
    pub ramp: f64,
    pub p_init: f64,
    pub v_set: f64,
    pub outage_eligible: bool,
}

impl Generator {
    pub fn cost_at(&self, p: f64) -> f64 {
        let [c2, c1, c0] = self.cost;
        c2 * p * p + c1 * p + c0
    }

    pub fn marginal_cost(&self, p: f64) -> f64 {
        2.0 * self.cost[0] * p + self.cost[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series admittance `1 / (r + jx)` in p.u.
    pub admittance: Complex64,
    /// Total line-charging susceptance in p.u.
    pub charging: f64,
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
    pub outage_eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

/// A device that may be (partially) taken out of service by an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Device {
    Branch(usize),
    Generator(usize),
}

/// Immutable grid description. Build it with [`PowerSystem::new`] or [`parse_case`];
/// [`validate_system`] reports whether the invariants hold.
#[derive(Debug, Clone, Serialize)]
pub struct PowerSystem {
    base_mva: f64,
    buses: Vec<Bus>,
    generators: Vec<Generator>,
    branches: Vec<Branch>,
    loads: Vec<Load>,
    outage_devices: Vec<Device>,
    #[serde(skip)]
    index: SystemIndex,
}

#[derive(Debug, Clone, Default)]
struct SystemIndex {
    slack_bus: Option<usize>,
    slack_gen: Option<usize>,
    gen_at_bus: Vec<Option<usize>>,
    branch_device: Vec<Option<usize>>,
    gen_device: Vec<Option<usize>>,
    bus_demand: Vec<(f64, f64)>,
    non_slack_gens: Vec<usize>,
    dispatch_slot: Vec<Option<usize>>,
}

impl PowerSystem {
    /// Assembles a system without checking its invariants.
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        branches: Vec<Branch>,
        loads: Vec<Load>,
    ) -> Self {
        let mut outage_devices = Vec::new();
        outage_devices.extend(
            branches
                .iter()
                .enumerate()
                .filter(|(_, b)| b.outage_eligible)
                .map(|(i, _)| Device::Branch(i)),
        );
        outage_devices.extend(
            generators
                .iter()
                .enumerate()
                .filter(|(_, g)| g.outage_eligible)
                .map(|(i, _)| Device::Generator(i)),
        );
        let mut sys = PowerSystem {
            base_mva,
            buses,
            generators,
            branches,
            loads,
            outage_devices,
            index: SystemIndex::default(),
        };
        sys.index = sys.build_index();
        sys
    }

    fn build_index(&self) -> SystemIndex {
        let nb = self.buses.len();
        let slack_bus = self.buses.iter().position(|b| b.kind == BusKind::Slack);
        let mut gen_at_bus = vec![None; nb];
        for (g, gen) in self.generators.iter().enumerate() {
            if gen.bus < nb && gen_at_bus[gen.bus].is_none() {
                gen_at_bus[gen.bus] = Some(g);
            }
        }
        let slack_gen = slack_bus.and_then(|s| gen_at_bus[s]);
        let mut branch_device = vec![None; self.branches.len()];
        let mut gen_device = vec![None; self.generators.len()];
        for (j, d) in self.outage_devices.iter().enumerate() {
            match *d {
                Device::Branch(b) => branch_device[b] = Some(j),
                Device::Generator(g) => gen_device[g] = Some(j),
            }
        }
        let mut bus_demand = vec![(0.0, 0.0); nb];
        for load in &self.loads {
            if load.bus < nb {
                bus_demand[load.bus].0 += load.p;
                bus_demand[load.bus].1 += load.q;
            }
        }
        let non_slack_gens: Vec<usize> = (0..self.generators.len())
            .filter(|&g| Some(g) != slack_gen)
            .collect();
        let mut dispatch_slot = vec![None; self.generators.len()];
        for (slot, &g) in non_slack_gens.iter().enumerate() {
            dispatch_slot[g] = Some(slot);
        }
        SystemIndex {
            slack_bus,
            slack_gen,
            gen_at_bus,
            branch_device,
            gen_device,
            bus_demand,
            non_slack_gens,
            dispatch_slot,
        }
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }
    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }
    pub fn loads(&self) -> &[Load] {
        &self.loads
    }
    pub fn outage_devices(&self) -> &[Device] {
        &self.outage_devices
    }
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }
    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }
    pub fn n_outage(&self) -> usize {
        self.outage_devices.len()
    }

    /// Index of the slack bus. Panics on a system that failed validation.
    pub fn slack_bus(&self) -> usize {
        self.index.slack_bus.expect("system has no slack bus")
    }

    /// Index of the generator at the slack bus.
    pub fn slack_generator(&self) -> usize {
        self.index.slack_gen.expect("slack bus has no generator")
    }

    pub fn generator_at_bus(&self, bus: usize) -> Option<usize> {
        self.index.gen_at_bus[bus]
    }

    /// Generators whose real power is part of the dispatch, in dispatch order.
    pub fn dispatchable_generators(&self) -> &[usize] {
        &self.index.non_slack_gens
    }

    /// Position of generator `g`'s real power inside the dispatch, `None` for the slack unit.
    pub fn dispatch_slot(&self, g: usize) -> Option<usize> {
        self.index.dispatch_slot[g]
    }

    pub fn branch_device(&self, branch: usize) -> Option<usize> {
        self.index.branch_device[branch]
    }

    pub fn generator_device(&self, gen: usize) -> Option<usize> {
        self.index.gen_device[gen]
    }

    /// Aggregate (p, q) demand at a bus in p.u.
    pub fn bus_demand(&self, bus: usize) -> (f64, f64) {
        self.index.bus_demand[bus]
    }

    pub fn total_demand(&self) -> f64 {
        self.loads.iter().map(|l| l.p).sum()
    }

    pub fn device_label(&self, device: Device) -> String {
        match device {
            Device::Branch(b) => {
                let br = &self.branches[b];
                format!(
                    "branch {}-{}",
                    self.buses[br.from].id, self.buses[br.to].id
                )
            }
            Device::Generator(g) => format!("gen@{}", self.buses[self.generators[g].bus].id),
        }
    }

    /// Per-branch admittance scale `1 - y_j` (1 for branches that are not outage eligible).
    pub fn branch_scaling(&self, y: Option<&AttackVector>) -> Vec<f64> {
        (0..self.branches.len())
            .map(|b| match (y, self.index.branch_device[b]) {
                (Some(y), Some(j)) => 1.0 - y.values()[j],
                _ => 1.0,
            })
            .collect()
    }

    /// Attack fraction acting on generator `g` (0 when absent or not eligible).
    pub fn generator_outage(&self, g: usize, y: Option<&AttackVector>) -> f64 {
        match (y, self.index.gen_device[g]) {
            (Some(y), Some(j)) => y.values()[j],
            _ => 0.0,
        }
    }

    /// Sum of generator costs for real-power outputs indexed by generator.
    pub fn generation_cost(&self, pg: &[f64]) -> f64 {
        self.generators
            .iter()
            .zip(pg)
            .map(|(g, &p)| g.cost_at(p))
            .sum()
    }
}

/// Relaxed contingency `y ∈ [0,1]^{n_o}` with `Σ y ≤ k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackVector {
    values: Vec<f64>,
    budget: f64,
}

/// Slack allowed on the budget check; projection hits the budget to 1e-10.
pub const BUDGET_TOLERANCE: f64 = 1e-9;

impl AttackVector {
    pub fn new(values: Vec<f64>, budget: f64) -> Result<Self> {
        if !(budget >= 0.0) {
            return Err(Error::InvalidInput(format!("attack budget {budget} must be nonnegative")));
        }
        for (j, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("attack entry {j} = {v} outside [0, 1]")));
            }
        }
        let total: f64 = values.iter().sum();
        if total > budget + BUDGET_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "attack uses {total} of budget {budget}"
            )));
        }
        Ok(AttackVector { values, budget })
    }

    /// No attack on `n` devices.
    pub fn zeros(n: usize, budget: f64) -> Self {
        AttackVector {
            values: vec![0.0; n],
            budget,
        }
    }

    /// Discrete contingency: full outage of every listed device.
    pub fn discrete(n: usize, outaged: &[usize]) -> Result<Self> {
        let mut values = vec![0.0; n];
        for &j in outaged {
            if j >= n {
                return Err(Error::InvalidInput(format!("outage index {j} >= {n}")));
            }
            values[j] = 1.0;
        }
        AttackVector::new(values, outaged.len() as f64)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn budget(&self) -> f64 {
        self.budget
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn l1(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Limits of one generator after scaling by `1 - y_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorLimits {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

pub fn effective_generator_limits(sys: &PowerSystem, y: &AttackVector) -> Vec<GeneratorLimits> {
    sys.generators
        .iter()
        .enumerate()
        .map(|(g, gen)| {
            let scale = 1.0 - sys.generator_outage(g, Some(y));
            GeneratorLimits {
                p_min: gen.p_min * scale,
                p_max: gen.p_max * scale,
                q_min: gen.q_min * scale,
                q_max: gen.q_max * scale,
            }
        })
        .collect()
}

/// Connected components of the network, ignoring branches whose scale is zero.
/// Returns the component label of every bus.
pub fn bus_components(sys: &PowerSystem, scaling: &[f64]) -> Vec<usize> {
    let nb = sys.n_bus();
    let mut parent: Vec<usize> = (0..nb).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (b, br) in sys.branches.iter().enumerate() {
        if scaling[b] > 0.0 && br.from < nb && br.to < nb {
            let (a, c) = (find(&mut parent, br.from), find(&mut parent, br.to));
            if a != c {
                parent[a.max(c)] = a.min(c);
            }
        }
    }
    (0..nb).map(|i| find(&mut parent, i)).collect()
}

/// One diagnostic per violated invariant; empty iff the system is valid.
pub fn validate_system(sys: &PowerSystem) -> Vec<String> {
    let mut diags = Vec::new();
    let nb = sys.n_bus();
    if nb == 0 {
        diags.push("system has no buses".to_string());
        return diags;
    }
    if !(sys.base_mva > 0.0) {
        diags.push(format!("base MVA {} must be positive", sys.base_mva));
    }
    let slacks: Vec<usize> = sys
        .buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind == BusKind::Slack)
        .map(|(i, _)| i)
        .collect();
    match slacks.len() {
        0 => diags.push("no slack bus".to_string()),
        1 => {}
        n => diags.push(format!(
            "{n} slack buses (ids {:?}); exactly one is required",
            slacks.iter().map(|&i| sys.buses[i].id).collect::<Vec<_>>()
        )),
    }
    for bus in &sys.buses {
        if !(bus.v_min > 0.0 && bus.v_min < bus.v_max) {
            diags.push(format!(
                "bus {}: voltage limits [{}, {}] must satisfy 0 < v_min < v_max",
                bus.id, bus.v_min, bus.v_max
            ));
        }
    }
    let mut seen_gen_bus = vec![false; nb];
    for (g, gen) in sys.generators.iter().enumerate() {
        if gen.bus >= nb {
            diags.push(format!("generator {g} references nonexistent bus index {}", gen.bus));
            continue;
        }
        if seen_gen_bus[gen.bus] {
            diags.push(format!(
                "bus {} hosts more than one generator",
                sys.buses[gen.bus].id
            ));
        }
        seen_gen_bus[gen.bus] = true;
        if gen.p_min > gen.p_max {
            diags.push(format!("generator {g}: p_min > p_max"));
        }
        if gen.q_min > gen.q_max {
            diags.push(format!("generator {g}: q_min > q_max"));
        }
        if gen.cost[0] < 0.0 {
            diags.push(format!("generator {g}: quadratic cost coefficient is negative"));
        }
        if !(gen.ramp > 0.0 && gen.ramp <= 1.0) {
            diags.push(format!("generator {g}: ramp fraction {} outside (0, 1]", gen.ramp));
        }
    }
    if slacks.len() == 1 && sys.generator_at_bus(slacks[0]).is_none() {
        diags.push("slack bus has no generator".to_string());
    }
    for (l, load) in sys.loads.iter().enumerate() {
        if load.bus >= nb {
            diags.push(format!("load {l} references nonexistent bus index {}", load.bus));
        }
        if !(load.p.is_finite() && load.q.is_finite()) {
            diags.push(format!("load {l} is not finite"));
        }
    }
    for (b, br) in sys.branches.iter().enumerate() {
        if br.from >= nb || br.to >= nb {
            diags.push(format!("branch {b} references a nonexistent bus"));
            continue;
        }
        if br.from == br.to {
            diags.push(format!("branch {b} is a self loop"));
        }
        if !(br.admittance.norm() > 0.0) || !br.admittance.norm().is_finite() {
            diags.push(format!("branch {b}: series admittance must be finite and nonzero"));
        }
        if !(br.tap > 0.0) {
            diags.push(format!("branch {b}: tap ratio {} must be positive", br.tap));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for d in &sys.outage_devices {
        if !seen.insert(*d) {
            diags.push(format!("outage device {d:?} listed twice"));
        }
    }
    let components = bus_components(sys, &vec![1.0; sys.branches.len()]);
    let isolated: Vec<usize> = (0..nb)
        .filter(|&i| components[i] != components[0])
        .map(|i| sys.buses[i].id)
        .collect();
    if !isolated.is_empty() {
        diags.push(format!("base network is disconnected; buses {isolated:?} are not reachable"));
    }
    diags
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn two_bus(load_p: f64, load_q: f64) -> PowerSystem {
        let bus = |id, kind| Bus {
            id,
            kind,
            v_min: 0.9,
            v_max: 1.1,
            shunt: Complex64::new(0.0, 0.0),
            v_init: 1.0,
            angle_init: 0.0,
        };
        PowerSystem::new(
            100.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Load)],
            vec![Generator {
                bus: 0,
                p_min: 0.0,
                p_max: 2.0,
                q_min: -1.0,
                q_max: 1.0,
                cost: [1.0, 2.0, 3.0],
                ramp: 0.1,
                p_init: load_p,
                v_set: 1.0,
                outage_eligible: false,
            }],
            vec![Branch {
                from: 0,
                to: 1,
                admittance: Complex64::new(1.0, -10.0),
                charging: 0.02,
                tap: 1.0,
                shift: 0.0,
                outage_eligible: true,
            }],
            vec![Load {
                bus: 1,
                p: load_p,
                q: load_q,
            }],
        )
    }

    #[test]
    fn two_bus_is_valid() {
        assert!(validate_system(&two_bus(0.5, 0.1)).is_empty());
    }

    #[test]
    fn two_slacks_give_one_diagnostic() {
        let sys = two_bus(0.5, 0.1);
        let mut buses = sys.buses().to_vec();
        buses[1].kind = BusKind::Slack;
        let bad = PowerSystem::new(
            100.0,
            buses,
            sys.generators().to_vec(),
            sys.branches().to_vec(),
            sys.loads().to_vec(),
        );
        let diags = validate_system(&bad);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert!(diags[0].contains("slack"));
    }

    #[test]
    fn isolated_bus_is_reported() {
        let sys = two_bus(0.5, 0.1);
        let bad = PowerSystem::new(
            100.0,
            sys.buses().to_vec(),
            sys.generators().to_vec(),
            vec![],
            sys.loads().to_vec(),
        );
        let diags = validate_system(&bad);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].contains("disconnected"));
    }

    #[test]
    fn generator_limits_scale_with_outage() {
        let sys = two_bus(0.5, 0.1);
        let mut gens = sys.generators().to_vec();
        gens[0].outage_eligible = true;
        let sys = PowerSystem::new(
            100.0,
            sys.buses().to_vec(),
            gens,
            sys.branches().to_vec(),
            sys.loads().to_vec(),
        );
        assert_eq!(sys.n_outage(), 2);
        let j = sys.generator_device(0).unwrap();
        let mut y = vec![0.0; 2];
        y[j] = 0.25;
        let lim = effective_generator_limits(&sys, &AttackVector::new(y.clone(), 1.0).unwrap());
        assert!((lim[0].p_max - 1.5).abs() < 1e-15);
        y[j] = 1.0;
        let lim = effective_generator_limits(&sys, &AttackVector::new(y, 1.0).unwrap());
        assert_eq!((lim[0].p_min, lim[0].p_max), (0.0, 0.0));
        assert_eq!((lim[0].q_min, lim[0].q_max), (0.0, 0.0));
        let lim = effective_generator_limits(&sys, &AttackVector::zeros(2, 1.0));
        assert_eq!(lim[0].p_max, 2.0);
        assert_eq!(lim[0].q_min, -1.0);
    }

    #[test]
    fn attack_vector_rejects_invalid_entries() {
        assert!(AttackVector::new(vec![0.5, 0.6], 1.0).is_err());
        assert!(AttackVector::new(vec![-0.1], 1.0).is_err());
        assert!(AttackVector::new(vec![1.1], 2.0).is_err());
        assert!(AttackVector::new(vec![0.5, 0.5], 1.0).is_ok());
    }
}
