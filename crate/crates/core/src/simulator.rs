//! Euler–Maruyama simulation of finite populations and of representative
//! agents facing the solved mean field, with discounted costs accumulated
//! along the way.
//!
//! Every agent owns the stream `agent_rng(seed, i)` and consumes it in a fixed
//! order: `n` normals for the initial state, then at each node `m` action
//! normals (drawn even in classical mode) followed by `r` Brownian normals
//! (except at the final node). A finite system and its representative twin
//! built from the same seed therefore share initial states, action noise and
//! Brownian increments agent by agent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::meanfield::MeanFieldSolution;
use crate::model::{expand_block, mixture_weights, PopulationSpec};
use crate::numerics::{agent_rng, mean_and_se, psd_factor, TimeGrid, Trajectory};
use crate::policy::{exploration_covariance, policy_entropy, GaussianPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Agents apply the feedback control itself.
    Classical,
    /// Agents sample from the Gaussian control distribution; the state drift
    /// uses the distribution means.
    Exploratory,
}

/// Which running cost to accumulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Original cost at the applied (possibly sampled) action.
    Classical,
    /// Original cost integrated against the control distribution.
    NoEntropy,
    /// `NoEntropy` minus `lambda` times the policy entropy.
    Regularized,
}

impl CostMode {
    pub const ALL: [CostMode; 3] = [CostMode::Classical, CostMode::NoEntropy, CostMode::Regularized];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Mean-shifted, variance-scaled version of the equilibrium policy played by
/// one agent, or by every agent when `agent` is `None` (useful for independent
/// representative agents).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub agent: Option<usize>,
    #[serde(with = "crate::serde_mat::vector")]
    pub shift: DVector<f64>,
    pub cov_scale: f64,
}

impl Deviation {
    pub fn new(agent: Option<usize>, shift: DVector<f64>, cov_scale: f64) -> Self {
        Deviation { agent, shift, cov_scale }
    }

    pub fn applies_to(&self, i: usize) -> bool {
        self.agent.is_none_or(|a| a == i)
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Agents per type, laid out type by type.
    pub counts: Vec<usize>,
    pub grid: TimeGrid,
    pub seed: u64,
    pub mode: Mode,
    /// Keep per-agent paths every `stride` nodes (plus the last node).
    pub record_stride: Option<usize>,
    pub deviation: Option<Deviation>,
    pub exec: Exec,
}

impl SimConfig {
    pub fn new(counts: Vec<usize>, grid: TimeGrid, seed: u64, mode: Mode) -> Self {
        SimConfig {
            counts,
            grid,
            seed,
            mode,
            record_stride: None,
            deviation: None,
            exec: Exec::default(),
        }
    }

    /// `n` agents split by the mixture weights (largest remainder).
    pub fn proportional(spec: &PopulationSpec, n: usize, grid: TimeGrid, seed: u64, mode: Mode) -> Self {
        Self::new(proportional_counts(&spec.pi, n), grid, seed, mode)
    }

    pub fn recording(mut self, stride: usize) -> Self {
        self.record_stride = Some(stride.max(1));
        self
    }

    pub fn with_deviation(mut self, deviation: Deviation) -> Self {
        self.deviation = Some(deviation);
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn agents(&self) -> usize {
        self.counts.iter().sum()
    }

    fn check(&self, spec: &PopulationSpec) -> Result<()> {
        if self.counts.len() != spec.types() {
            return Err(Error::Dimension("one agent count per type required".into()));
        }
        if self.agents() == 0 {
            return Err(Error::EmptyPopulation);
        }
        self.grid.validate()?;
        if let Some(dev) = &self.deviation {
            if let Some(agent) = dev.agent.filter(|&a| a >= self.agents()) {
                return Err(Error::IndexOutOfRange {
                    index: agent,
                    count: self.agents(),
                });
            }
            if dev.shift.len() != spec.m() || !(dev.cov_scale > 0.0) {
                return Err(Error::InvalidArgument("deviation needs an m-vector shift and a positive scale".into()));
            }
        }
        Ok(())
    }
}

pub fn proportional_counts(pi: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = pi.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let short = n.saturating_sub(counts.iter().sum());
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Recorded path of one agent; `dw[j]` is the increment leaving node `j`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentPath {
    pub times: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub dw: Vec<DVector<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationBatch {
    pub grid: TimeGrid,
    pub mode: Mode,
    pub rho: f64,
    pub record_stride: Option<usize>,
    pub counts: Vec<usize>,
    /// Mixture weights used in the coupling terms.
    pub weights: Vec<f64>,
    pub agent_type: Vec<usize>,
    pub deviation: Option<Deviation>,
    pub paths: Vec<AgentPath>,
    /// Stacked per-type averages of the states at every node.
    pub xbar_emp: Vec<DVector<f64>>,
    /// Stacked per-type averages of the means (exploratory) or actions (classical).
    pub mubar_emp: Vec<DVector<f64>>,
    /// Stacked mean state that entered drifts and costs: the empirical one
    /// for a finite population, the solved one for representative agents.
    pub field_x: Vec<DVector<f64>>,
    /// Discounted costs per agent, indexed by [`CostMode`].
    pub costs: Vec<[f64; 3]>,
    /// Largest `|running cost|` over the last tenth of the horizon.
    pub tail_levels: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mode: CostMode,
    pub mean: f64,
    pub std_err: f64,
    pub values: Vec<f64>,
    /// Bound on the discounted cost beyond the simulated horizon.
    pub truncation_bound: f64,
}

impl SimulationBatch {
    pub fn agents(&self) -> usize {
        self.agent_type.len()
    }

    /// Agents of type `k`.
    pub fn of_type(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.agents()).filter(move |&i| self.agent_type[i] == k)
    }

    pub fn cost(&self, agent: usize, mode: CostMode) -> f64 {
        self.costs[agent][mode.slot()]
    }

    /// `2 e^{-rho T} / rho` times the largest late running-cost level.
    pub fn truncation_bound(&self, agents: impl Iterator<Item = usize>, mode: CostMode) -> f64 {
        let level = agents.map(|i| self.tail_levels[i][mode.slot()]).fold(0.0, f64::max);
        if self.rho > 0.0 {
            2.0 * (-self.rho * self.grid.t1).exp() / self.rho * level
        } else {
            f64::INFINITY
        }
    }

    /// Online-accumulated costs of the type-`k` agents.
    pub fn cost_estimate(&self, k: usize, mode: CostMode, tol: f64) -> Result<CostEstimate> {
        let bound = self.truncation_bound(self.of_type(k), mode);
        if !(bound <= tol) {
            return Err(Error::HorizonTooShort { bound, tol });
        }
        let values: Vec<f64> = self.of_type(k).map(|i| self.cost(i, mode)).collect();
        if values.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        let (mean, std_err) = mean_and_se(&values);
        Ok(CostEstimate {
            mode,
            mean,
            std_err,
            values,
            truncation_bound: bound,
        })
    }

    /// State of every type-`k` agent at the recorded node nearest to `t`.
    pub fn states_at(&self, t: f64) -> Result<Vec<DVector<f64>>> {
        let stride = self
            .record_stride
            .ok_or_else(|| Error::InvalidArgument("paths were not recorded".into()))?;
        let j = self.grid.nearest(t);
        if j % stride != 0 && j != self.grid.steps {
            return Err(Error::InvalidArgument("time not on a recorded node".into()));
        }
        let slot = recorded_slot(j, stride, self.grid.steps);
        Ok(self.paths.iter().map(|p| p.x[slot].clone()).collect())
    }
}

fn is_recorded(j: usize, stride: usize, steps: usize) -> bool {
    j % stride == 0 || j == steps
}

fn recorded_slot(j: usize, stride: usize, steps: usize) -> usize {
    if j == steps && j % stride != 0 {
        steps / stride + 1
    } else {
        j / stride
    }
}

/// `out += alpha M x` for column-major `M`.
fn mv_add(out: &mut [f64], mat: &DMatrix<f64>, x: &[f64], alpha: f64) {
    let rows = mat.nrows();
    let data = mat.as_slice();
    for (c, &xc) in x.iter().enumerate() {
        let w = alpha * xc;
        if w != 0.0 {
            for (o, &a) in out.iter_mut().zip(&data[c * rows..(c + 1) * rows]) {
                *o += a * w;
            }
        }
    }
}

fn quad_form(mat: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let rows = mat.nrows();
    let data = mat.as_slice();
    let mut total = 0.0;
    for (c, &yc) in y.iter().enumerate() {
        if yc != 0.0 {
            let col: f64 = data[c * rows..(c + 1) * rows].iter().zip(x).map(|(a, b)| a * b).sum();
            total += col * yc;
        }
    }
    total
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything an agent of one type needs, tabulated on the simulation grid.
struct TypePlan {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    s: DMatrix<f64>,
    eta: Vec<f64>,
    nvec: Vec<f64>,
    gain: DMatrix<f64>,
    factor: DMatrix<f64>,
    /// `lambda`, `m` and the entropy of the undeviated policy (0 if `lambda = 0`).
    lambda: f64,
    entropy: f64,
    feedforward: Vec<Vec<f64>>,
    /// At the current node: target `psibar xbar` and exogenous drift `F xbar + H mubar + b`.
    target: Vec<f64>,
    forcing: Vec<f64>,
}

struct AgentState {
    k: usize,
    x: Vec<f64>,
    mean: Vec<f64>,
    act: Vec<f64>,
    z: Vec<f64>,
    scratch: Vec<f64>,
    shift: Option<Vec<f64>>,
    scale: f64,
    rng: ChaCha8Rng,
    costs: [f64; 3],
    tails: [f64; 3],
    path: AgentPath,
    failed: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Empirical,
    Solved,
}

fn run(spec: &PopulationSpec, mf: &MeanFieldSolution, config: &SimConfig, field: Field) -> Result<SimulationBatch> {
    config.check(spec)?;
    if mf.types() != spec.types() {
        return Err(Error::Dimension("solution and spec disagree on type count".into()));
    }
    let grid = config.grid;
    let (n, m, types) = (spec.n(), spec.m(), spec.types());
    let solved_time = solved_clock(spec, mf, grid)?;
    let weights = match field {
        Field::Empirical => mixture_weights(&config.counts)?,
        Field::Solved => spec.pi.clone(),
    };
    let exploratory = config.mode == Mode::Exploratory;
    let h = grid.dt();
    let sqrt_h = h.sqrt();

    let mut plans = Vec::with_capacity(types);
    for k in 0..types {
        let p = &spec.subpops[k];
        let policy = GaussianPolicy::new(mf, spec, k)?;
        let feedforward = (0..grid.len())
            .map(|j| Ok(policy.feedforward(solved_time(j))?.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let cov = exploration_covariance(p)?;
        plans.push(TypePlan {
            a: p.a.clone(),
            b: p.b.clone(),
            d: p.d.clone(),
            q: p.q.clone(),
            r: p.r.clone(),
            s: p.s.clone(),
            eta: p.eta.as_slice().to_vec(),
            nvec: p.nvec.as_slice().to_vec(),
            gain: policy.gain.clone(),
            factor: psd_factor(&cov)?,
            lambda: p.lambda_explore,
            entropy: if p.lambda_explore > 0.0 { policy_entropy(k, spec)? } else { 0.0 },
            feedforward,
            target: Vec::new(),
            forcing: Vec::new(),
        });
    }
    let couplings: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = spec
        .subpops
        .iter()
        .map(|p| (expand_block(&p.f, &weights), expand_block(&p.h, &weights), expand_block(&p.psi, &weights)))
        .collect();
    let solved: Option<Vec<(DVector<f64>, DVector<f64>)>> = match field {
        Field::Solved => Some(
            (0..grid.len())
                .map(|j| Ok((mf.xbar_at(solved_time(j))?, mf.mubar_at(solved_time(j))?)))
                .collect::<Result<_>>()?,
        ),
        Field::Empirical => None,
    };

    let x0_factor = psd_factor(&spec.x0_cov)?;
    let mut agents: Vec<AgentState> = Vec::with_capacity(config.agents());
    for (k, &count) in config.counts.iter().enumerate() {
        for _ in 0..count {
            let i = agents.len();
            let mut rng = agent_rng(config.seed, i);
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mut x = spec.x0_mean.as_slice().to_vec();
            mv_add(&mut x, &x0_factor, &z, 1.0);
            let (shift, scale) = match &config.deviation {
                Some(dev) if dev.applies_to(i) => (Some(dev.shift.as_slice().to_vec()), dev.cov_scale),
                _ => (None, 1.0),
            };
            agents.push(AgentState {
                k,
                x,
                mean: vec![0.0; m],
                act: vec![0.0; m],
                z: Vec::with_capacity(m.max(n)),
                scratch: vec![0.0; n],
                shift,
                scale,
                rng,
                costs: [0.0; 3],
                tails: [0.0; 3],
                path: AgentPath::default(),
                failed: false,
            });
        }
    }
    let agent_type: Vec<usize> = agents.iter().map(|a| a.k).collect();
    let tail_start = grid.steps - grid.steps / 10;

    let mut xbar_emp = Vec::with_capacity(grid.len());
    let mut mubar_emp = Vec::with_capacity(grid.len());
    let mut field_x = Vec::with_capacity(grid.len());

    for j in 0..grid.len() {
        let t = grid.time(j);
        let plans_ref = &plans;
        config.exec.for_each_mut(&mut agents, |_, ag| {
            let plan = &plans_ref[ag.k];
            ag.mean.copy_from_slice(&plan.feedforward[j]);
            mv_add(&mut ag.mean, &plan.gain, &ag.x, -1.0);
            if let Some(shift) = &ag.shift {
                ag.mean.iter_mut().zip(shift).for_each(|(a, b)| *a += b);
            }
            ag.z.clear();
            for _ in 0..m {
                let v: f64 = ag.rng.sample(StandardNormal);
                ag.z.push(v);
            }
            ag.act.copy_from_slice(&ag.mean);
            if exploratory {
                mv_add(&mut ag.act, &plan.factor, &ag.z, ag.scale.sqrt());
            }
        });

        let mut xs = DVector::zeros(n * types);
        let mut ms = DVector::zeros(m * types);
        for ag in &agents {
            let c = config.counts[ag.k] as f64;
            for (d, v) in ag.x.iter().enumerate() {
                xs[ag.k * n + d] += v / c;
            }
            let src = if exploratory { &ag.mean } else { &ag.act };
            for (d, v) in src.iter().enumerate() {
                ms[ag.k * m + d] += v / c;
            }
        }
        let (fx, fm) = match &solved {
            Some(tab) => tab[j].clone(),
            None => (xs.clone(), ms.clone()),
        };
        for (k, plan) in plans.iter_mut().enumerate() {
            let (fbar, hbar, psibar) = &couplings[k];
            plan.target = (psibar * &fx).as_slice().to_vec();
            let drift = fbar * &fx + hbar * &fm + spec.subpops[k].drift.eval(t);
            plan.forcing = drift.as_slice().to_vec();
        }
        xbar_emp.push(xs);
        mubar_emp.push(ms);
        field_x.push(fx);

        let weight = if j == 0 || j == grid.steps { 0.5 } else { 1.0 } * h * (-spec.rho * t).exp();
        let in_tail = j >= tail_start;
        let record = config.record_stride.filter(|&s| is_recorded(j, s, grid.steps));
        let plans_ref = &plans;
        config.exec.for_each_mut(&mut agents, |_, ag| {
            let plan = &plans_ref[ag.k];
            let running = running_costs(plan, &ag.x, &ag.mean, &ag.act, ag.scale, exploratory, &mut ag.scratch);
            for (slot, c) in running.iter().enumerate() {
                ag.costs[slot] += weight * c;
                if in_tail {
                    ag.tails[slot] = ag.tails[slot].max(c.abs());
                }
            }
            if record.is_some() {
                ag.path.times.push(t);
                ag.path.x.push(DVector::from_column_slice(&ag.x));
                ag.path.u.push(DVector::from_column_slice(&ag.act));
                ag.path.mu.push(DVector::from_column_slice(&ag.mean));
            }
            if j == grid.steps {
                return;
            }
            let r = plan.d.ncols();
            ag.z.clear();
            for _ in 0..r {
                let v: f64 = ag.rng.sample(StandardNormal);
                ag.z.push(v * sqrt_h);
            }
            if record.is_some() {
                ag.path.dw.push(DVector::from_column_slice(&ag.z));
            }
            let dx = &mut ag.scratch;
            dx.copy_from_slice(&plan.forcing);
            mv_add(dx, &plan.a, &ag.x, 1.0);
            mv_add(dx, &plan.b, if exploratory { &ag.mean } else { &ag.act }, 1.0);
            for (x, d) in ag.x.iter_mut().zip(dx.iter()) {
                *x += h * d;
            }
            mv_add(&mut ag.x, &plan.d, &ag.z, 1.0);
            ag.failed = ag.x.iter().any(|v| !v.is_finite());
        });
        if let Some(agent) = agents.iter().position(|a| a.failed) {
            return Err(Error::NonFiniteState {
                agent,
                t: grid.time(j + 1),
            });
        }
    }

    Ok(SimulationBatch {
        grid,
        mode: config.mode,
        rho: spec.rho,
        record_stride: config.record_stride,
        counts: config.counts.clone(),
        weights,
        agent_type,
        deviation: config.deviation.clone(),
        costs: agents.iter().map(|a| a.costs).collect(),
        tail_levels: agents.iter().map(|a| a.tails).collect(),
        paths: if config.record_stride.is_some() {
            agents.into_iter().map(|a| a.path).collect()
        } else {
            Vec::new()
        },
        xbar_emp,
        mubar_emp,
        field_x,
    })
}

/// Time at which to read the solved mean field for node `j`. Past the solved
/// horizon the solution has settled (the horizon is chosen that way), so with
/// time-invariant drifts its final values are reused.
fn solved_clock(spec: &PopulationSpec, mf: &MeanFieldSolution, grid: TimeGrid) -> Result<impl Fn(usize) -> f64> {
    let end = mf.grid.t1;
    if grid.t1 > end && !spec.subpops.iter().all(|p| p.drift.is_constant()) {
        return Err(Error::OutsideGrid {
            t: grid.t1,
            t0: mf.grid.t0,
            t1: end,
        });
    }
    Ok(move |j: usize| grid.time(j).min(end))
}

/// Running costs `[classical, no-entropy, regularized]` at one node.
fn running_costs(
    plan: &TypePlan,
    x: &[f64],
    mean: &[f64],
    act: &[f64],
    scale: f64,
    exploratory: bool,
    dx: &mut [f64],
) -> [f64; 3] {
    for ((d, a), b) in dx.iter_mut().zip(x).zip(&plan.target) {
        *d = a - b;
    }
    let dx = &*dx;
    let state = 0.5 * quad_form(&plan.q, dx, dx) + dot(&plan.eta, dx);
    let control = |u: &[f64]| quad_form(&plan.s, dx, u) + 0.5 * quad_form(&plan.r, u, u) + dot(&plan.nvec, u);
    let classical = state + control(act);
    let m = mean.len() as f64;
    let (spread, entropy) = if exploratory && plan.lambda > 0.0 {
        // tr(R scale lambda R^-1) / 2 and the entropy of N(., scale lambda R^-1).
        (0.5 * scale * plan.lambda * m, plan.entropy + 0.5 * m * scale.ln())
    } else {
        (0.0, 0.0)
    };
    let no_entropy = state + control(mean) + spread;
    [classical, no_entropy, no_entropy - plan.lambda * entropy]
}

/// Finite population: drifts and targets use the empirical averages.
pub fn simulate_population(spec: &PopulationSpec, mf: &MeanFieldSolution, config: &SimConfig) -> Result<SimulationBatch> {
    run(spec, mf, config, Field::Empirical)
}

/// Independent representative agents facing the solved `xbar`, `mubar`; agent
/// `i` shares its random stream with agent `i` of [`simulate_population`].
pub fn simulate_representatives(spec: &PopulationSpec, mf: &MeanFieldSolution, config: &SimConfig) -> Result<SimulationBatch> {
    run(spec, mf, config, Field::Solved)
}

/// One exploratory type-`k` representative path.
pub fn simulate_representative(
    spec: &PopulationSpec,
    mf: &MeanFieldSolution,
    k: usize,
    grid: TimeGrid,
    seed: u64,
) -> Result<Trajectory<DVector<f64>>> {
    if k >= spec.types() {
        return Err(Error::IndexOutOfRange {
            index: k,
            count: spec.types(),
        });
    }
    let mut counts = vec![0; spec.types()];
    counts[k] = 1;
    let config = SimConfig::new(counts, grid, seed, Mode::Exploratory)
        .recording(1)
        .with_exec(Exec::Sequential);
    let mut batch = simulate_representatives(spec, mf, &config)?;
    Ok(Trajectory {
        grid,
        values: std::mem::take(&mut batch.paths[0].x),
    })
}

/// Discounted trapezoid cost of the type-`k` agents recomputed from the
/// recorded paths (`record_stride = 1`).
pub fn empirical_cost(batch: &SimulationBatch, spec: &PopulationSpec, k: usize, mode: CostMode, tol: f64) -> Result<CostEstimate> {
    if batch.record_stride != Some(1) {
        return Err(Error::InvalidArgument("empirical cost needs every node recorded".into()));
    }
    let bound = batch.truncation_bound(batch.of_type(k), mode);
    if !(bound <= tol) {
        return Err(Error::HorizonTooShort { bound, tol });
    }
    let p = spec.subpops.get(k).ok_or(Error::IndexOutOfRange {
        index: k,
        count: spec.types(),
    })?;
    let psibar = expand_block(&p.psi, &batch.weights);
    let exploratory = batch.mode == Mode::Exploratory && p.lambda_explore > 0.0;
    let entropy = if exploratory { policy_entropy(k, spec)? } else { 0.0 };
    let grid = batch.grid;
    let values: Vec<f64> = batch
        .of_type(k)
        .map(|i| {
            let path = &batch.paths[i];
            let scale = match &batch.deviation {
                Some(d) if d.applies_to(i) => d.cov_scale,
                _ => 1.0,
            };
            let mut total = 0.0;
            for j in 0..grid.len() {
                let t = grid.time(j);
                let dx = &path.x[j] - &psibar * &batch.field_x[j];
                let state = 0.5 * dx.dot(&(&p.q * &dx)) + p.eta.dot(&dx);
                let control = |u: &DVector<f64>| (p.s.transpose() * &dx).dot(u) + 0.5 * u.dot(&(&p.r * u)) + p.nvec.dot(u);
                let m = p.m() as f64;
                let c = match mode {
                    CostMode::Classical => state + control(&path.u[j]),
                    CostMode::NoEntropy | CostMode::Regularized => {
                        let mut c = state + control(&path.mu[j]);
                        if exploratory {
                            c += 0.5 * scale * p.lambda_explore * m;
                            if mode == CostMode::Regularized {
                                c -= p.lambda_explore * (entropy + 0.5 * m * scale.ln());
                            }
                        }
                        c
                    }
                };
                let w = if j == 0 || j == grid.steps { 0.5 } else { 1.0 };
                total += w * grid.dt() * (-spec.rho * t).exp() * c;
            }
            total
        })
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let (mean, std_err) = mean_and_se(&values);
    Ok(CostEstimate {
        mode,
        mean,
        std_err,
        values,
        truncation_bound: bound,
    })
}
