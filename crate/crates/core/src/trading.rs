//! Optimal execution among `N` traders with permanent impact from the
//! average trading rate, the mapping of the problem into the LQG form, least
//! squares estimation of the market parameters and a model-based learning
//! loop that plans with the exploratory policy.
//!
//! Market: `dF = lambda nubar dt + sigma dw`, `dq^i = nu^i dt`,
//! `S^i = F + a int_0^t nu^i`, `dZ^i = -S^i dq^i`; trader cost
//! `phi/2 int q^2 - Z_T - q_T (F_T - psi q_T)`.
//!
//! Planning state is `x = (q, F - F0)` with control `nu`. The cash term
//! `F nu` is a state-control cross term and the terminal book value gives
//! `P(T) = [[2 psi, -1], [-1, 0]]`. Taken literally the model has no
//! quadratic control cost, which the Gaussian policy needs; the planner
//! therefore treats the temporary impact as rate based, `R = 2a`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{DriftTable, PopulationSpec, SubpopParams};
use crate::numerics::{agent_rng, derive_seed, integrate_ode, Direction, TimeGrid, Trajectory};
use crate::riccati::solve_differential_riccati;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub sigma: f64,
    pub lambda_perm: f64,
    pub a_temp: f64,
    pub phi_urgency: f64,
    pub psi_terminal: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "F0")]
    pub f0: f64,
    pub q0: f64,
}

impl MarketParams {
    pub fn check(&self) -> Result<()> {
        let nonneg = [self.lambda_perm, self.a_temp, self.phi_urgency, self.psi_terminal];
        if !(self.sigma > 0.0) || !(self.horizon > 0.0) || nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "market needs sigma > 0, T > 0 and nonnegative impacts and penalties".into(),
            ));
        }
        if !self.f0.is_finite() || !self.q0.is_finite() {
            return Err(Error::InvalidArgument("F0 and q0 must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.check()?;
        Ok(p)
    }

    /// Copy with the learnable parameters replaced by estimates. A negative
    /// permanent impact estimate is clipped to zero.
    pub fn with_estimates(&self, est: &Estimates) -> Self {
        MarketParams {
            sigma: est.sigma.max(f64::MIN_POSITIVE),
            lambda_perm: est.lambda_perm.max(0.0),
            a_temp: est.a_temp,
            ..self.clone()
        }
    }
}

/// Game data for the planner: the population spec (`rho = 0`), the terminal
/// quadratic weight and the terminal linear weight `(-F0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketLqg {
    pub spec: PopulationSpec,
    pub terminal: DMatrix<f64>,
    pub terminal_linear: DVector<f64>,
}

/// `n_types` identical trader types with equal weights.
pub fn to_lqg(params: &MarketParams, n_types: usize) -> MarketLqg {
    let types = n_types.max(1);
    let mat = |rows: usize, cols: usize, v: &[f64]| DMatrix::from_row_slice(rows, cols, v);
    let trader = SubpopParams {
        a: DMatrix::zeros(2, 2),
        b: mat(2, 1, &[1.0, 0.0]),
        f: DMatrix::zeros(2, 2),
        h: mat(2, 1, &[0.0, params.lambda_perm]),
        d: mat(2, 1, &[0.0, params.sigma]),
        drift: DriftTable::zeros(2),
        q: mat(2, 2, &[params.phi_urgency, 0.0, 0.0, 0.0]),
        r: mat(1, 1, &[2.0 * params.a_temp]),
        s: mat(2, 1, &[0.0, 1.0]),
        eta: DVector::zeros(2),
        nvec: DVector::from_element(1, params.f0),
        psi: DMatrix::zeros(2, 2),
        lambda_explore: 0.0,
        phi_lagrange: 0.0,
    };
    MarketLqg {
        spec: PopulationSpec {
            rho: 0.0,
            pi: vec![1.0 / types as f64; types],
            x0_mean: DVector::from_column_slice(&[params.q0, 0.0]),
            x0_cov: DMatrix::zeros(2, 2),
            subpops: vec![trader; types],
        },
        terminal: mat(2, 2, &[2.0 * params.psi_terminal, -1.0, -1.0, 0.0]),
        terminal_linear: DVector::from_column_slice(&[-params.f0, 0.0]),
    }
}

/// Finite-horizon equilibrium of the execution game: Riccati path, offset,
/// and the mean inventory / trading rate, on the planning grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub grid: TimeGrid,
    /// `K(t) = R^-1 (B^T P(t) + S^T)` per node (length-2 rows).
    pub gains: Vec<[f64; 2]>,
    /// `-R^-1 (B^T s(t) + n)` per node.
    pub feedforward: Vec<f64>,
    pub qbar: Vec<f64>,
    pub nubar: Vec<f64>,
    /// Exploration variance `lambda / (2a)`.
    pub variance: f64,
    pub iterations: usize,
}

pub trait TradingPolicy: Sync {
    /// Mean trading rate at node `j`.
    fn mean(&self, j: usize, q: f64, f_dev: f64) -> f64;
    fn std_dev(&self) -> f64;
}

/// Every trader trades at the same constant rate.
#[derive(Clone, Copy, Debug)]
pub struct ConstantRate(pub f64);

impl TradingPolicy for ConstantRate {
    fn mean(&self, _: usize, _: f64, _: f64) -> f64 {
        self.0
    }

    fn std_dev(&self) -> f64 {
        0.0
    }
}

impl TradingPolicy for ExecutionPlan {
    fn mean(&self, j: usize, q: f64, f_dev: f64) -> f64 {
        let k = self.gains[j];
        self.feedforward[j] - k[0] * q - k[1] * f_dev
    }

    fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Solves the finite-horizon consistency system by Picard iteration on the
/// mean trading rate.
pub fn plan_execution(params: &MarketParams, lambda_explore: f64, grid: TimeGrid) -> Result<ExecutionPlan> {
    params.check()?;
    if !(params.a_temp > 0.0) {
        return Err(Error::InvalidArgument("planning needs a positive temporary impact".into()));
    }
    if !(lambda_explore >= 0.0) {
        return Err(Error::InvalidArgument("lambda_explore must be ≥ 0".into()));
    }
    if (grid.t1 - params.horizon).abs() > 1e-9 * params.horizon || grid.t0 != 0.0 {
        return Err(Error::InvalidArgument("planning grid must span [0, T]".into()));
    }
    let lqg = to_lqg(params, 1);
    let p = &lqg.spec.subpops[0];
    let pis = solve_differential_riccati(p, 0.0, &lqg.terminal, grid)?;
    let r_inv = 1.0 / (2.0 * params.a_temp);
    let gain_at = |pi: &DMatrix<f64>| -> DMatrix<f64> { (p.b.transpose() * pi + p.s.transpose()) * r_inv };
    let gains: Vec<DMatrix<f64>> = pis.values.iter().map(gain_at).collect();

    let mut nubar = vec![0.0; grid.len()];
    let (tol, max_iters, damping) = (1e-10, 500, 0.5);
    for iteration in 1..=max_iters {
        let forcing = Trajectory {
            grid,
            values: nubar.iter().map(|&v| DVector::from_element(1, v)).collect(),
        };
        // s' = -A_cl^T s - P (H nubar - B R^-1 n) + S R^-1 n
        let s = integrate_ode(
            |t, s: &DVector<f64>| {
                let pi = pis.at(t).expect("time on grid");
                let a_cl = &p.a - &p.b * gain_at(&pi);
                let mu = forcing.at(t).expect("time on grid");
                -(a_cl.transpose() * s) - &pi * (&p.h * mu - &p.b * (&p.nvec * r_inv)) + &p.s * (&p.nvec * r_inv)
            },
            lqg.terminal_linear.clone(),
            grid,
            Direction::Backward,
        )?;
        let feedforward: Vec<f64> = s.values.iter().map(|s| -r_inv * ((p.b.transpose() * s)[0] + p.nvec[0])).collect();
        let ff_traj = Trajectory {
            grid,
            values: feedforward.iter().map(|&v| DVector::from_element(1, v)).collect(),
        };
        let gain_traj = Trajectory {
            grid,
            values: gains.iter().map(|g| DVector::from_column_slice(&[g[(0, 0)], g[(0, 1)]])).collect(),
        };
        let xbar = integrate_ode(
            |t, x: &DVector<f64>| {
                let g = gain_traj.at(t).expect("time on grid");
                let mu = ff_traj.at(t).expect("time on grid")[0] - g.dot(x);
                (&p.b + &p.h).column(0) * mu
            },
            lqg.spec.x0_mean.clone(),
            grid,
            Direction::Forward,
        )?;
        let fresh: Vec<f64> = (0..grid.len())
            .map(|j| feedforward[j] - (&gains[j] * &xbar.values[j])[0])
            .collect();
        let change = fresh.iter().zip(&nubar).fold(0.0, |a: f64, (x, y)| a.max((x - y).abs()));
        if !change.is_finite() {
            return Err(Error::ConsistencyDiverged("execution plan produced non-finite rates".into()));
        }
        let converged = change < tol;
        let step = if lqg.spec.is_uncoupled() || params.lambda_perm == 0.0 { 1.0 } else { damping };
        for (old, new) in nubar.iter_mut().zip(&fresh) {
            *old += step * (new - *old);
        }
        if converged || params.lambda_perm == 0.0 {
            return Ok(ExecutionPlan {
                grid,
                gains: gains.iter().map(|g| [g[(0, 0)], g[(0, 1)]]).collect(),
                feedforward,
                qbar: xbar.values.iter().map(|x| x[0]).collect(),
                nubar: fresh,
                variance: lambda_explore * r_inv,
                iterations: iteration,
            });
        }
    }
    Err(Error::ConsistencyDiverged(format!("execution plan did not converge in {max_iters} iterations")))
}

/// Node-indexed market paths; `q[i][j]` is trader `i` at node `j`. Rates,
/// execution prices and averages are recorded at the left node of each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketPaths {
    pub grid: TimeGrid,
    pub f: Vec<f64>,
    pub nubar: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub s_exec: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

/// Euler scheme for the market with `n` traders following `policy`.
pub fn simulate_market(params: &MarketParams, policy: &dyn TradingPolicy, n: usize, grid: TimeGrid, seed: u64) -> Result<MarketPaths> {
    params.check()?;
    if n == 0 {
        return Err(Error::EmptyPopulation);
    }
    let h = grid.dt();
    let sd = policy.std_dev();
    let mut market_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| agent_rng(seed, i)).collect();
    let mut f = vec![params.f0];
    let mut nubar = Vec::with_capacity(grid.steps);
    let mut q = vec![vec![params.q0]; n];
    let mut nu = vec![Vec::with_capacity(grid.steps); n];
    let mut s_exec = vec![Vec::with_capacity(grid.steps); n];
    let mut z = vec![vec![0.0]; n];
    for j in 0..grid.steps {
        let fj = f[j];
        let mut total = 0.0;
        for i in 0..n {
            let qi = q[i][j];
            let noise: f64 = rngs[i].sample(StandardNormal);
            let rate = policy.mean(j, qi, fj - params.f0) + sd * noise;
            let price = fj + params.a_temp * (qi - params.q0);
            nu[i].push(rate);
            s_exec[i].push(price);
            q[i].push(qi + rate * h);
            let zi = z[i][j] - price * rate * h;
            z[i].push(zi);
            total += rate;
        }
        let avg = total / n as f64;
        nubar.push(avg);
        let dw: f64 = market_rng.sample(StandardNormal);
        let next = fj + params.lambda_perm * avg * h + params.sigma * h.sqrt() * dw;
        if !next.is_finite() || q.iter().any(|qi| !qi[j + 1].is_finite()) {
            return Err(Error::NonFiniteState {
                agent: q.iter().position(|qi| !qi[j + 1].is_finite()).unwrap_or(0),
                t: grid.time(j + 1),
            });
        }
        f.push(next);
    }
    Ok(MarketPaths {
        grid,
        f,
        nubar,
        q,
        nu,
        s_exec,
        z,
    })
}

impl MarketPaths {
    pub fn traders(&self) -> usize {
        self.q.len()
    }

    /// Realized `phi/2 sum q^2 dt - Z_T - q_T (F_T - psi q_T)`.
    pub fn trader_cost(&self, params: &MarketParams, i: usize) -> f64 {
        let h = self.grid.dt();
        let steps = self.grid.steps;
        let urgency: f64 = self.q[i][..steps].iter().map(|q| q * q).sum::<f64>() * 0.5 * params.phi_urgency * h;
        let q_t = self.q[i][steps];
        urgency - self.z[i][steps] - q_t * (self.f[steps] - params.psi_terminal * q_t)
    }

    pub fn mean_cost(&self, params: &MarketParams) -> f64 {
        (0..self.traders()).map(|i| self.trader_cost(params, i)).sum::<f64>() / self.traders() as f64
    }

    pub fn append_to(&self, data: &mut MarketData) {
        let h = self.grid.dt();
        for j in 0..self.grid.steps {
            data.price.push(PriceRow {
                df: self.f[j + 1] - self.f[j],
                nubar: self.nubar[j],
                dt: h,
            });
        }
        for i in 0..self.traders() {
            for j in 0..self.grid.steps {
                data.exec.push(ExecRow {
                    spread: self.s_exec[i][j] - self.f[j],
                    cumulative: self.q[i][j] - self.q[i][0],
                });
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub df: f64,
    pub nubar: f64,
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecRow {
    pub spread: f64,
    pub cumulative: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketData {
    pub price: Vec<PriceRow>,
    pub exec: Vec<ExecRow>,
}

impl MarketData {
    pub fn rows(&self) -> usize {
        self.price.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub sigma: f64,
    pub sigma_se: f64,
    pub lambda_perm: f64,
    pub lambda_se: f64,
    pub a_temp: f64,
    pub a_se: f64,
    /// Fitted midprice drift not explained by order flow.
    pub drift: f64,
}

/// Least squares: `dF` on `[dt, nubar dt]`, volatility from the residual
/// quadratic variation, and `S - F` on the cumulative trade.
pub fn estimate_params(data: &MarketData) -> Result<Estimates> {
    let n = data.price.len();
    if n < 3 {
        return Err(Error::InvalidArgument("need at least 3 price rows".into()));
    }
    // Normal equations for dF = alpha dt + lambda (nubar dt) + e.
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for row in &data.price {
        let (x1, x2) = (row.dt, row.nubar * row.dt);
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        r1 += x1 * row.df;
        r2 += x2 * row.df;
    }
    let det = s11 * s22 - s12 * s12;
    if !(det > 1e-10 * s11 * s22) {
        return Err(Error::Unidentifiable("lambda_perm"));
    }
    let alpha = (s22 * r1 - s12 * r2) / det;
    let lambda = (s11 * r2 - s12 * r1) / det;
    let mut rss = 0.0;
    let mut time = 0.0;
    for row in &data.price {
        let e = row.df - alpha * row.dt - lambda * row.nubar * row.dt;
        rss += e * e;
        time += row.dt;
    }
    let sigma = (rss / time).sqrt();
    let resid_var = rss / (n - 2) as f64;
    let lambda_se = (resid_var * s11 / det).sqrt();

    let (mut sxx, mut sxy) = (0.0, 0.0);
    for row in &data.exec {
        sxx += row.cumulative * row.cumulative;
        sxy += row.cumulative * row.spread;
    }
    if !(sxx > 0.0) {
        return Err(Error::Unidentifiable("a_temp"));
    }
    let a = sxy / sxx;
    let a_rss: f64 = data.exec.iter().map(|r| (r.spread - a * r.cumulative).powi(2)).sum();
    let a_se = (a_rss / (data.exec.len().max(2) - 1) as f64 / sxx).sqrt();
    Ok(Estimates {
        sigma,
        sigma_se: sigma / (2.0 * n as f64).sqrt(),
        lambda_perm: lambda,
        lambda_se,
        a_temp: a,
        a_se,
        drift: alpha,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub traders: usize,
    /// Learning rounds after the initial base-policy round.
    pub iterations: usize,
    /// Planning/acting repeats (episodes) per round.
    pub episodes: usize,
    pub steps: usize,
    pub lambda_explore: f64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            traders: 10,
            iterations: 5,
            episodes: 5,
            steps: 200,
            lambda_explore: 0.1,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sigma_hat: f64,
    pub lambda_hat: f64,
    pub a_hat: f64,
    pub sigma_se: f64,
    pub lambda_se: f64,
    pub a_se: f64,
    /// Inventory gain `K_q` at `t = 0` of the policy that acted.
    pub gain_q: f64,
    /// Mean realized cost per trader over the round's episodes.
    pub cost: f64,
    pub n_rows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningTrace {
    pub records: Vec<IterationRecord>,
    pub failure: Option<String>,
}

impl LearningTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "iteration,sigma_hat,lambda_hat,a_hat,cost,n_rows")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{},{}", r.iteration, r.sigma_hat, r.lambda_hat, r.a_hat, r.cost, r.n_rows)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Learn-plan-act loop against a hidden market. Round 0 runs the base policy
/// planned from `init`; every later round re-estimates on all data so far,
/// re-plans and acts.
pub fn rl_loop(truth: &MarketParams, init: &MarketParams, config: &RlConfig) -> Result<LearningTrace> {
    truth.check()?;
    init.check()?;
    if config.traders == 0 || config.episodes == 0 {
        return Err(Error::EmptyPopulation);
    }
    let grid = TimeGrid::new(0.0, truth.horizon, config.steps)?;
    let mut data = MarketData::default();
    let mut trace = LearningTrace::default();
    let mut belief = init.clone();
    let mut est = Estimates {
        sigma: init.sigma,
        sigma_se: f64::NAN,
        lambda_perm: init.lambda_perm,
        lambda_se: f64::NAN,
        a_temp: init.a_temp,
        a_se: f64::NAN,
        drift: 0.0,
    };
    for round in 0..=config.iterations {
        if round > 0 {
            match estimate_params(&data) {
                Ok(e) => {
                    belief = init.with_estimates(&e);
                    est = e;
                }
                Err(e) => {
                    trace.failure = Some(format!("round {round}: estimation failed: {e}"));
                    break;
                }
            }
        }
        let plan = match plan_execution(&belief, config.lambda_explore, grid) {
            Ok(p) => p,
            Err(e) => {
                trace.failure = Some(format!("round {round}: planning failed: {e}"));
                break;
            }
        };
        let episodes = config.exec.try_map(config.episodes, |ep| {
            let seed = derive_seed(config.seed, (round * config.episodes + ep) as u64);
            simulate_market(truth, &plan, config.traders, grid, seed)
        })?;
        let mut cost = 0.0;
        for paths in &episodes {
            paths.append_to(&mut data);
            cost += paths.mean_cost(truth);
        }
        trace.records.push(IterationRecord {
            iteration: round,
            sigma_hat: est.sigma,
            lambda_hat: est.lambda_perm,
            a_hat: est.a_temp,
            sigma_se: est.sigma_se,
            lambda_se: est.lambda_se,
            a_se: est.a_se,
            gain_q: plan.gains[0][0],
            cost: cost / config.episodes as f64,
            n_rows: data.rows(),
        });
    }
    Ok(trace)
}

/// Reference market used in examples and tests.
pub fn reference_market() -> MarketParams {
    MarketParams {
        sigma: 0.05,
        lambda_perm: 0.1,
        a_temp: 0.01,
        phi_urgency: 0.1,
        psi_terminal: 1.0,
        horizon: 1.0,
        f0: 100.0,
        q0: 1.0,
    }
}
