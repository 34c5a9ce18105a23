//! Exact tabular solvers used as demonstrators and as ground truth.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{DemoSet, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{Action, GridSpec, Observation, StateIndex, TaskVector, N_ACTIONS, N_TRUE_FEATURES};
use crate::rng::SeedStream;

pub const VI_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Largest state count solved by dense LU; bigger models use fixed-point sweeps.
pub const DENSE_SOLVE_LIMIT: usize = 1500;

/// A finite controlled Markov process with per-(s, a) feature vectors.
///
/// Rows are indexed `s * n_actions + a`. Terminal states self-loop with zero
/// features, so discounted quantities are well defined everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub d: usize,
    pub features: Vec<f64>,
    pub gamma: f64,
    pub initial: Vec<(usize, f64)>,
    pub terminal: Vec<bool>,
    #[serde(skip)]
    pub observations: Option<Vec<Observation>>,
}

impl TabularModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} not in [0, 1)", self.gamma)));
        }
        let rows = self.n_states * self.n_actions;
        if self.transitions.len() != rows {
            return Err(Error::shape(rows, self.transitions.len()));
        }
        if self.features.len() != rows * self.d {
            return Err(Error::shape(rows * self.d, self.features.len()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 || row.iter().any(|&(s, p)| s >= self.n_states || p < 0.0) {
                return Err(Error::InvalidArgument(format!("transition row {i} is not a distribution")));
            }
        }
        if self.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidArgument("non-finite features".into()));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn feature(&self, s: usize, a: usize) -> &[f64] {
        let r = s * self.n_actions + a;
        &self.features[r * self.d..(r + 1) * self.d]
    }

    /// `R(s, a) = φ(s, a)ᵀ w`.
    pub fn reward(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.d {
            return Err(Error::shape(self.d, w.len()));
        }
        Ok(self
            .features
            .chunks(self.d)
            .map(|f| f.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn observation(&self, s: usize) -> Observation {
        match &self.observations {
            Some(obs) => obs[s].clone(),
            None => Observation::one_hot(self.n_states, s),
        }
    }

    /// Exact tabular model of a grid: deterministic moves, ground-truth
    /// features, and the start state as the initial distribution. States
    /// without coins are terminal.
    pub fn from_grid(spec: &GridSpec, gamma: f64, cap: usize) -> Result<(Self, StateIndex)> {
        Self::build_grid(spec, gamma, cap, |s| spec.is_terminal(s))
    }

    /// As [`TabularModel::from_grid`] with the episode ending where `task` ends it.
    pub fn from_grid_for(spec: &GridSpec, task: &TaskVector, gamma: f64, cap: usize) -> Result<(Self, StateIndex)> {
        Self::build_grid(spec, gamma, cap, |s| spec.is_terminal_for(s, task))
    }

    fn build_grid(
        spec: &GridSpec,
        gamma: f64,
        cap: usize,
        is_terminal: impl Fn(&crate::grid::EnvState) -> bool,
    ) -> Result<(Self, StateIndex)> {
        let index = StateIndex::new(spec, cap)?;
        let n = index.len();
        let zero = TaskVector::coins(0.0, 0.0, 0.0);
        let mut transitions = Vec::with_capacity(n * N_ACTIONS);
        let mut features = Vec::with_capacity(n * N_ACTIONS * N_TRUE_FEATURES);
        let mut terminal = Vec::with_capacity(n);
        for (i, s) in index.states().iter().enumerate() {
            let term = is_terminal(s);
            terminal.push(term);
            for a in Action::ALL {
                if term {
                    transitions.push(vec![(i, 1.0)]);
                    features.extend([0.0; N_TRUE_FEATURES]);
                } else {
                    let out = spec.step(s, a, &zero);
                    let j = index.get(&out.next).expect("successor is enumerated");
                    transitions.push(vec![(j, 1.0)]);
                    features.extend(out.features);
                }
            }
        }
        let start = index.get(&spec.initial_state()).expect("start is enumerated");
        let observations = index.states().iter().map(|s| spec.encode(s)).collect();
        let model = TabularModel {
            n_states: n,
            n_actions: N_ACTIONS,
            transitions,
            d: N_TRUE_FEATURES,
            features,
            gamma,
            initial: vec![(start, 1.0)],
            terminal,
            observations: Some(observations),
        };
        model.validate()?;
        Ok((model, index))
    }
}

/// Row-stochastic action probabilities with the temperature that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPolicy {
    pub n_actions: usize,
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl SoftPolicy {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            temperature: f64::INFINITY,
        }
    }

    /// A deterministic policy as a distribution.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_actions,
            probs,
            temperature: 0.0,
        }
    }

    /// `softmax(q(s, ·) / ν)` per state, with entries floored at the smallest
    /// positive normal so every action keeps non-zero mass.
    pub fn boltzmann(q: &[f64], n_actions: usize, temperature: f64) -> Self {
        let mut probs = Vec::with_capacity(q.len());
        for row in q.chunks(n_actions) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| ((x - m) / temperature).exp()).collect();
            let z: f64 = e.iter().sum();
            probs.extend(e.iter().map(|x| (x / z).max(f64::MIN_POSITIVE)));
        }
        Self {
            n_actions,
            probs,
            temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSF {
    pub d: usize,
    /// Row `s * n_actions + a`, `d` entries each.
    pub psi: Vec<f64>,
}

impl ExactSF {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.psi[r * self.d..(r + 1) * self.d]
    }

    /// `Q(s, a) = Ψ(s, a)ᵀ w`.
    pub fn q(&self, w: &[f64]) -> Vec<f64> {
        self.psi
            .chunks(self.d)
            .map(|p| p.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ViOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for ViOptions {
    fn default() -> Self {
        Self {
            tolerance: VI_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

pub fn greedy(q: &[f64], n_actions: usize) -> Vec<usize> {
    q.chunks(n_actions)
        .map(|row| {
            let mut best = 0;
            for (a, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

fn expect_next(model: &TabularModel, row: usize, v: &[f64]) -> f64 {
    model.transitions[row].iter().map(|&(s, p)| p * v[s]).sum()
}

/// Optimal Q by Bellman sweeps; the greedy policy breaks ties toward the
/// lowest action index.
pub fn value_iteration(model: &TabularModel, reward: &[f64], opts: ViOptions) -> Result<(Vec<f64>, Vec<usize>)> {
    if reward.len() != model.n_rows() {
        return Err(Error::shape(model.n_rows(), reward.len()));
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidArgument("non-finite reward".into()));
    }
    let na = model.n_actions;
    let mut q = vec![0.0; model.n_rows()];
    let mut v = vec![0.0; model.n_states];
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_sweeps {
        residual = 0.0;
        for r in 0..model.n_rows() {
            let nq = reward[r] + model.gamma * expect_next(model, r, &v);
            residual = f64::max(residual, (nq - q[r]).abs());
            q[r] = nq;
        }
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = q[s * na..(s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        if residual < opts.tolerance {
            let pi = greedy(&q, na);
            return Ok((q, pi));
        }
    }
    Err(Error::NonConvergence {
        sweeps: opts.max_sweeps,
        residual,
    })
}

/// The demonstrator model: Boltzmann over the hard-optimal Q with temperature ν.
pub fn soft_q_iteration(model: &TabularModel, reward: &[f64], temperature: f64, opts: ViOptions) -> Result<SoftPolicy> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let (q, _) = value_iteration(model, reward, opts)?;
    Ok(SoftPolicy::boltzmann(&q, model.n_actions, temperature))
}

/// Solves `(I - γ P_π) X = B` for a state-level right-hand side with `k` columns.
fn solve_state_system(model: &TabularModel, policy: &SoftPolicy, rhs: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = model.n_states;
    let na = model.n_actions;
    let g = model.gamma;
    if n <= DENSE_SOLVE_LIMIT {
        let mut m = DMatrix::<f64>::identity(n, n);
        for s in 0..n {
            for a in 0..na {
                let p_a = policy.probs[s * na + a];
                if p_a == 0.0 {
                    continue;
                }
                for &(sn, p) in &model.transitions[s * na + a] {
                    m[(s, sn)] -= g * p_a * p;
                }
            }
        }
        let lu = m.lu();
        let mut out = vec![0.0; n * k];
        for c in 0..k {
            let b = DVector::from_iterator(n, (0..n).map(|s| rhs[s * k + c]));
            let x = lu.solve(&b).ok_or(Error::SingularSystem)?;
            for s in 0..n {
                out[s * k + c] = x[s];
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularSystem);
        }
        Ok(out)
    } else {
        // Gauss-Seidel sweeps; contraction factor γ.
        let mut x = rhs.to_vec();
        for _ in 0..DEFAULT_MAX_SWEEPS {
            let mut delta = 0.0f64;
            for s in 0..n {
                for c in 0..k {
                    let mut acc = rhs[s * k + c];
                    for a in 0..na {
                        let p_a = policy.probs[s * na + a];
                        if p_a == 0.0 {
                            continue;
                        }
                        for &(sn, p) in &model.transitions[s * na + a] {
                            acc += g * p_a * p * x[sn * k + c];
                        }
                    }
                    delta = delta.max((acc - x[s * k + c]).abs());
                    x[s * k + c] = acc;
                }
            }
            if delta < 1e-13 {
                return Ok(x);
            }
        }
        Err(Error::NonConvergence {
            sweeps: DEFAULT_MAX_SWEEPS,
            residual: f64::NAN,
        })
    }
}

fn check_policy(model: &TabularModel, policy: &SoftPolicy) -> Result<()> {
    if policy.n_actions != model.n_actions || policy.probs.len() != model.n_rows() {
        return Err(Error::shape(model.n_rows(), policy.probs.len()));
    }
    for (s, row) in policy.probs.chunks(model.n_actions).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-10 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidArgument(format!("policy row {s} is not a distribution")));
        }
    }
    Ok(())
}

/// Ψ^π for vector cumulants `phi` (rows `s * n_actions + a`, `k` columns):
/// `Ψ = Φ + γ P^π Ψ`.
pub fn evaluate_vector(model: &TabularModel, policy: &SoftPolicy, phi: &[f64], k: usize) -> Result<Vec<f64>> {
    check_policy(model, policy)?;
    let na = model.n_actions;
    let n = model.n_states;
    if phi.len() != model.n_rows() * k {
        return Err(Error::shape(model.n_rows() * k, phi.len()));
    }
    let mut rhs = vec![0.0; n * k];
    for s in 0..n {
        for a in 0..na {
            let p_a = policy.probs[s * na + a];
            let r = s * na + a;
            for c in 0..k {
                rhs[s * k + c] += p_a * phi[r * k + c];
            }
        }
    }
    let v = solve_state_system(model, policy, &rhs, k)?;
    let mut psi = vec![0.0; model.n_rows() * k];
    for r in 0..model.n_rows() {
        for c in 0..k {
            let next: f64 = model.transitions[r].iter().map(|&(s, p)| p * v[s * k + c]).sum();
            psi[r * k + c] = phi[r * k + c] + model.gamma * next;
        }
    }
    Ok(psi)
}

/// Q^π for a scalar reward.
pub fn policy_evaluation(model: &TabularModel, policy: &SoftPolicy, reward: &[f64]) -> Result<Vec<f64>> {
    evaluate_vector(model, policy, reward, 1)
}

/// Largest violation of `Ψ = Φ + γ P^π Ψ` over all rows and dimensions.
pub fn sf_residual(model: &TabularModel, policy: &SoftPolicy, phi: &[f64], psi: &[f64], k: usize) -> f64 {
    let na = model.n_actions;
    let mut worst = 0.0f64;
    for r in 0..model.n_rows() {
        for c in 0..k {
            let mut next = 0.0;
            for &(s, p) in &model.transitions[r] {
                for a in 0..na {
                    next += p * policy.probs[s * na + a] * psi[(s * na + a) * k + c];
                }
            }
            let res = psi[r * k + c] - phi[r * k + c] - model.gamma * next;
            worst = worst.max(res.abs());
        }
    }
    worst
}

pub fn exact_successor_features(model: &TabularModel, policy: &SoftPolicy) -> Result<ExactSF> {
    let psi = evaluate_vector(model, policy, &model.features, model.d)?;
    Ok(ExactSF { d: model.d, psi })
}

/// Exact expected undiscounted return of `policy` from the initial
/// distribution over a `horizon`-step episode that also stops at terminal states.
pub fn finite_horizon_return(model: &TabularModel, policy: &SoftPolicy, reward: &[f64], horizon: usize) -> f64 {
    let na = model.n_actions;
    let mut v = vec![0.0; model.n_states];
    for _ in 0..horizon {
        let mut nv = vec![0.0; model.n_states];
        for s in 0..model.n_states {
            if model.terminal[s] {
                continue;
            }
            nv[s] = (0..na)
                .map(|a| {
                    let r = s * na + a;
                    policy.probs[r] * (reward[r] + expect_next(model, r, &v))
                })
                .sum();
        }
        v = nv;
    }
    model.initial.iter().map(|&(s, p)| p * v[s]).sum()
}

/// Best achievable undiscounted return within `horizon` steps.
pub fn finite_horizon_optimal_return(model: &TabularModel, reward: &[f64], horizon: usize) -> f64 {
    let na = model.n_actions;
    let mut v = vec![0.0; model.n_states];
    for _ in 0..horizon {
        let mut nv = vec![0.0; model.n_states];
        for s in 0..model.n_states {
            if model.terminal[s] {
                continue;
            }
            nv[s] = (0..na)
                .map(|a| {
                    let r = s * na + a;
                    reward[r] + expect_next(model, r, &v)
                })
                .fold(f64::NEG_INFINITY, f64::max);
        }
        v = nv;
    }
    model.initial.iter().map(|&(s, p)| p * v[s]).sum()
}

/// GPI: act greedily on the pointwise maximum of several Q tables.
pub fn gpi_policy(qs: &[Vec<f64>], n_actions: usize) -> Vec<usize> {
    let rows = qs[0].len();
    let upper: Vec<f64> = (0..rows)
        .map(|r| qs.iter().map(|q| q[r]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    greedy(&upper, n_actions)
}

fn sample_index<R: Rng>(dist: &[(usize, f64)], rng: &mut R) -> usize {
    if dist.len() == 1 {
        return dist[0].0;
    }
    let w = WeightedIndex::new(dist.iter().map(|d| d.1)).expect("valid distribution");
    dist[w.sample(rng)].0
}

pub fn sample_action<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    row.len() - 1
}

/// State visited at each step of one rollout, with the action taken, and
/// whether the horizon cut it short of a terminal state.
pub fn rollout<R: Rng>(model: &TabularModel, policy: &SoftPolicy, horizon: usize, rng: &mut R) -> (Vec<(usize, usize)>, bool) {
    let mut s = sample_index(&model.initial, rng);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        if model.terminal[s] {
            return (out, false);
        }
        let a = sample_action(policy.row(s), rng);
        out.push((s, a));
        s = sample_index(&model.transitions[s * model.n_actions + a], rng);
    }
    let truncated = !model.terminal[s];
    (out, truncated)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoOptions {
    pub temperature: f64,
    pub episodes_per_agent: usize,
    pub horizon: usize,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            episodes_per_agent: 200,
            horizon: crate::grid::DEFAULT_HORIZON,
        }
    }
}

fn check_demo_args(tasks: &[TaskVector], opts: &DemoOptions) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("at least one task is required".into()));
    }
    if opts.episodes_per_agent == 0 {
        return Err(Error::InvalidArgument("episodes_per_agent must be positive".into()));
    }
    Ok(())
}

fn demonstrate(model: &TabularModel, task: &TaskVector, k: usize, opts: &DemoOptions, stream: &SeedStream, set: &mut DemoSet) -> Result<()> {
    let reward = model.reward(&task.weights)?;
    let policy = soft_q_iteration(model, &reward, opts.temperature, ViOptions::default())?;
    let mut agent_stream = stream.fork(k as u64);
    for _ in 0..opts.episodes_per_agent {
        let mut rng = agent_stream.next_rng();
        let (visits, truncated) = rollout(model, &policy, opts.horizon, &mut rng);
        let steps: Vec<_> = visits.into_iter().map(|(s, a)| (model.observation(s), a)).collect();
        if steps.is_empty() {
            continue;
        }
        set.trajectories.push(Trajectory {
            agent_id: k,
            steps,
            truncated,
        });
    }
    Ok(())
}

/// Roll out one Boltzmann demonstrator per task. Agent `k` (1-based) follows
/// `tasks[k - 1]`; trajectories carry ids and no rewards.
pub fn generate_demonstrations(model: &TabularModel, tasks: &[TaskVector], opts: DemoOptions, seed: u64) -> Result<DemoSet> {
    check_demo_args(tasks, &opts)?;
    let mut set = DemoSet::new(tasks.len());
    let stream = SeedStream::new(seed);
    for (i, task) in tasks.iter().enumerate() {
        demonstrate(model, task, i + 1, &opts, &stream, &mut set)?;
    }
    Ok(set)
}

/// Grid demonstrations where each demonstrator's episode ends by its own task.
pub fn generate_grid_demonstrations(
    spec: &GridSpec,
    tasks: &[TaskVector],
    gamma: f64,
    opts: DemoOptions,
    seed: u64,
) -> Result<DemoSet> {
    check_demo_args(tasks, &opts)?;
    let mut set = DemoSet::new(tasks.len());
    let stream = SeedStream::new(seed);
    for (i, task) in tasks.iter().enumerate() {
        let (model, _) = TabularModel::from_grid_for(spec, task, gamma, crate::grid::DEFAULT_STATE_CAP)?;
        demonstrate(&model, task, i + 1, &opts, &stream, &mut set)?;
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RandomMdpOptions {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: usize,
    pub gamma: f64,
    /// Successor states per (s, a); 1 gives deterministic dynamics.
    pub branching: usize,
}

/// Random CMP with features uniform on `[0, 1)^d` and a uniform initial
/// distribution over states.
pub fn random_model<R: Rng>(opts: RandomMdpOptions, rng: &mut R) -> TabularModel {
    let rows = opts.n_states * opts.n_actions;
    let mut transitions = Vec::with_capacity(rows);
    for _ in 0..rows {
        let k = opts.branching.clamp(1, opts.n_states);
        let mut succ: Vec<usize> = Vec::with_capacity(k);
        while succ.len() < k {
            let s = rng.gen_range(0..opts.n_states);
            if !succ.contains(&s) {
                succ.push(s);
            }
        }
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
        let z: f64 = raw.iter().sum();
        let mut row: Vec<(usize, f64)> = succ.into_iter().zip(raw.iter().map(|p| p / z)).collect();
        let total: f64 = row.iter().map(|x| x.1).sum();
        row[0].1 += 1.0 - total;
        transitions.push(row);
    }
    let features = (0..rows * opts.d).map(|_| rng.gen::<f64>()).collect();
    let p0 = 1.0 / opts.n_states as f64;
    TabularModel {
        n_states: opts.n_states,
        n_actions: opts.n_actions,
        transitions,
        d: opts.d,
        features,
        gamma: opts.gamma,
        initial: (0..opts.n_states).map(|s| (s, p0)).collect(),
        terminal: vec![false; opts.n_states],
        observations: None,
    }
}
