//! Security evaluation of a dispatch against discrete outage scenarios.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{AttackVector, PowerSystem};
use crate::opf::SolverConfig;
use crate::powerflow::Dispatch;
use crate::third_stage::solve_third_stage;

/// Full outage of every listed device, indices sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContingencyScenario {
    pub devices: Vec<usize>,
}

impl ContingencyScenario {
    pub fn new(sys: &PowerSystem, mut devices: Vec<usize>) -> Result<Self> {
        devices.sort_unstable();
        if devices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("scenario {devices:?} repeats a device")));
        }
        if let Some(&d) = devices.iter().find(|&&d| d >= sys.n_outage()) {
            return Err(Error::InvalidInput(format!("outage device {d} >= {}", sys.n_outage())));
        }
        Ok(ContingencyScenario { devices })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn attack(&self, n: usize) -> AttackVector {
        AttackVector::discrete(n, &self.devices).expect("scenario indices are validated")
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// Lexicographic `rank`-th `k`-subset of `0..n`.
fn unrank(n: usize, k: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for slot in 0..k {
        let mut c = next;
        loop {
            let block = binomial(n - c - 1, k - slot - 1);
            if rank < block {
                break;
            }
            rank -= block;
            c += 1;
        }
        out.push(c);
        next = c + 1;
    }
    out
}

/// Distinct `size`-subsets of the outage devices, sampled uniformly without
/// replacement. Returns every subset when `count` reaches their number.
pub fn sample_contingencies(sys: &PowerSystem, size: usize, count: usize, seed: u64) -> Vec<ContingencyScenario> {
    let n = sys.n_outage();
    let total = binomial(n, size);
    if size == 0 || total == 0 || count == 0 {
        return Vec::new();
    }
    let ranks: Vec<u128> = if count as u128 >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = usize::try_from(total).expect("scenario count fits in usize");
        let mut r: Vec<u128> = rand::seq::index::sample(&mut rng, len, count)
            .into_iter()
            .map(|i| i as u128)
            .collect();
        r.sort_unstable();
        r
    };
    ranks
        .into_iter()
        .map(|r| ContingencyScenario {
            devices: unrank(n, size, r),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ScenarioOutcome {
    Feasible { slack: f64 },
    Infeasible { slack: f64 },
    SolverFailure { message: String },
}

impl ScenarioOutcome {
    pub fn is_violation(&self) -> bool {
        !matches!(self, ScenarioOutcome::Feasible { .. })
    }
}

/// Redispatch under the full outage of `scenario`; feasible when the solve
/// converges with `|s|_inf <= tol` (p.u.).
pub fn check_feasibility(
    sys: &PowerSystem,
    x: &Dispatch,
    scenario: &ContingencyScenario,
    tol: f64,
    solver: &SolverConfig,
) -> ScenarioOutcome {
    let y = scenario.attack(sys.n_outage());
    match solve_third_stage(sys, x, &y, solver) {
        Ok(sol) => {
            let slack = sol.slack_norm();
            if slack <= tol {
                ScenarioOutcome::Feasible { slack }
            } else {
                ScenarioOutcome::Infeasible { slack }
            }
        }
        Err(e) => ScenarioOutcome::SolverFailure { message: e.to_string() },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationOptions {
    /// Slack infinity norm (p.u.) above which a scenario is a violation.
    pub tol: f64,
    pub parallelism: usize,
    /// Sampling seed, copied into the report.
    pub seed: Option<u64>,
    pub solver: SolverConfig,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions {
            tol: 1e-4,
            parallelism: 1,
            seed: None,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub devices: Vec<usize>,
    pub labels: Vec<String>,
    #[serde(flatten)]
    pub outcome: ScenarioOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeAggregate {
    pub size: usize,
    pub scenarios: usize,
    pub feasible: usize,
    pub infeasible: usize,
    pub solver_failures: usize,
    /// `infeasible + solver_failures`
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub tol: f64,
    pub seed: Option<u64>,
    /// SHA-256 of the sorted scenario list.
    pub scenario_digest: String,
    pub aggregates: Vec<SizeAggregate>,
    /// Pairs of evaluated scenarios where a subset is a violation.
    pub superset_pairs: usize,
    /// Of those, pairs whose superset is nonetheless feasible.
    pub superset_feasible: usize,
    pub results: Vec<ScenarioResult>,
}

impl ViolationReport {
    pub fn total_violations(&self) -> usize {
        self.aggregates.iter().map(|a| a.violations).sum()
    }

    pub fn total_scenarios(&self) -> usize {
        self.aggregates.iter().map(|a| a.scenarios).sum()
    }

    /// Fraction of violating-subset pairs whose superset is feasible.
    pub fn superset_feasible_rate(&self) -> Option<f64> {
        (self.superset_pairs > 0).then(|| self.superset_feasible as f64 / self.superset_pairs as f64)
    }

    /// Aggregate table, one row per scenario size.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,scenarios,feasible,infeasible,solver_failures,violations\n");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                a.size, a.scenarios, a.feasible, a.infeasible, a.solver_failures, a.violations
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn scenario_digest(scenarios: &[ContingencyScenario]) -> String {
    let mut h = Sha256::new();
    for s in scenarios {
        let line: Vec<String> = s.devices.iter().map(|d| d.to_string()).collect();
        h.update(line.join(","));
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Evaluates every scenario on a pool of `opts.parallelism` workers. The
/// report lists scenarios sorted, so it does not depend on input order.
pub fn evaluate_dispatch(
    sys: &PowerSystem,
    x: &Dispatch,
    scenarios: &[ContingencyScenario],
    opts: &EvaluationOptions,
) -> Result<ViolationReport> {
    if scenarios.is_empty() {
        return Err(Error::InvalidInput("no scenarios to evaluate".into()));
    }
    if opts.parallelism == 0 {
        return Err(Error::InvalidInput("parallelism must be at least 1".into()));
    }
    x.check(sys)?;
    let mut sorted = scenarios.to_vec();
    sorted.sort();
    for s in &sorted {
        ContingencyScenario::new(sys, s.devices.clone())?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism)
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    let outcomes: Vec<ScenarioOutcome> = pool.install(|| {
        sorted
            .par_iter()
            .map(|s| check_feasibility(sys, x, s, opts.tol, &opts.solver))
            .collect()
    });

    let mut aggregates: Vec<SizeAggregate> = Vec::new();
    for (s, o) in sorted.iter().zip(&outcomes) {
        let pos = match aggregates.iter().position(|a| a.size == s.len()) {
            Some(p) => p,
            None => {
                aggregates.push(SizeAggregate {
                    size: s.len(),
                    scenarios: 0,
                    feasible: 0,
                    infeasible: 0,
                    solver_failures: 0,
                    violations: 0,
                });
                aggregates.len() - 1
            }
        };
        let a = &mut aggregates[pos];
        a.scenarios += 1;
        match o {
            ScenarioOutcome::Feasible { .. } => a.feasible += 1,
            ScenarioOutcome::Infeasible { .. } => a.infeasible += 1,
            ScenarioOutcome::SolverFailure { .. } => a.solver_failures += 1,
        }
        if o.is_violation() {
            a.violations += 1;
        }
    }
    aggregates.sort_by_key(|a| a.size);

    let (mut pairs, mut feasible_supersets) = (0, 0);
    for (i, sub) in sorted.iter().enumerate() {
        if !outcomes[i].is_violation() {
            continue;
        }
        for (j, sup) in sorted.iter().enumerate() {
            if sup.len() > sub.len() && sub.devices.iter().all(|d| sup.devices.binary_search(d).is_ok()) {
                pairs += 1;
                if !outcomes[j].is_violation() {
                    feasible_supersets += 1;
                }
            }
        }
    }

    let devices = sys.outage_devices();
    let results = sorted
        .iter()
        .zip(outcomes)
        .map(|(s, outcome)| ScenarioResult {
            devices: s.devices.clone(),
            labels: s.devices.iter().map(|&d| sys.device_label(devices[d])).collect(),
            outcome,
        })
        .collect();
    Ok(ViolationReport {
        tol: opts.tol,
        seed: opts.seed,
        scenario_digest: scenario_digest(&sorted),
        aggregates,
        superset_pairs: pairs,
        superset_feasible: feasible_supersets,
        results,
    })
}
