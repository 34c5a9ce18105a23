//! The ego learner: GPI acting over demonstrator and ego SF heads, ITD on
//! demonstrations, reward grounding, and ego TD learning, interleaved with
//! environment interaction. Also the plain Q-learning and behaviour-cloning
//! comparators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{DemoPair, DemoSampler, DemoSet, EgoTransition, ReplayBuffer};
use crate::error::{Error, Result};
use crate::grid::{Action, GridSpec, Observation, TaskVector, DEFAULT_STATE_CAP, N_ACTIONS};
use crate::itd::{ItdConfig, ItdLearner};
use crate::loss::{bcq_loss, q_td_loss, reward_loss, sf_td_loss, EgoSample};
use crate::nn::{Adam, Arch, Block, Checkpoint, ParamStore, EGO};
use crate::oracle::{finite_horizon_optimal_return, finite_horizon_return, SoftPolicy, TabularModel};
use crate::rng::SeedStream;

pub const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsiPhiConfig {
    /// Demonstration side. Its `gamma` is overridden by `gamma`.
    pub itd: ItdConfig,
    pub d: usize,
    pub torso: Vec<usize>,
    pub gamma: f64,
    /// Learning rate of the ego losses.
    pub lr: f64,
    pub batch: usize,
    pub target_period: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `total_steps` over which epsilon decays linearly.
    pub epsilon_decay: f64,
    pub total_steps: usize,
    pub learning_starts: usize,
    /// Environment steps per learning phase.
    pub update_every: usize,
    /// ITD steps on the demonstrations per learning phase.
    pub itd_steps: usize,
    pub replay_capacity: usize,
    pub n_step: usize,
    pub gpi_enabled: bool,
    pub task_inference_enabled: bool,
    /// Most recent transitions used by task inference.
    pub inference_window: usize,
    /// Trains `Φ` and `w^ego` on ego rewards.
    pub reward_loss_enabled: bool,
    /// Weight of the ego SF TD loss; `None` means `1/d`.
    pub psi_loss_scale: Option<f64>,
    /// Environment steps between greedy evaluations; 0 disables them.
    pub eval_every: usize,
}

impl Default for PsiPhiConfig {
    fn default() -> Self {
        Self {
            itd: ItdConfig::default(),
            d: 4,
            torso: vec![64, 64],
            gamma: 0.9,
            lr: 1e-4,
            batch: 64,
            target_period: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.2,
            total_steps: 50_000,
            learning_starts: 500,
            update_every: 1,
            itd_steps: 1,
            replay_capacity: 100_000,
            n_step: 1,
            gpi_enabled: true,
            task_inference_enabled: true,
            inference_window: 5_000,
            reward_loss_enabled: true,
            psi_loss_scale: None,
            eval_every: 1_000,
        }
    }
}

impl PsiPhiConfig {
    /// Plain deep Q-learning: a single scalar "cumulant" with `w = [1]`,
    /// no demonstrator heads in the policy, no task inference.
    pub fn q_learning() -> Self {
        Self {
            d: 1,
            gpi_enabled: false,
            task_inference_enabled: false,
            reward_loss_enabled: false,
            psi_loss_scale: Some(0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.itd.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} must lie in [0, 1], got {e}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay) {
            return bad(format!("epsilon_decay must lie in [0, 1], got {}", self.epsilon_decay));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.d == 0 || self.batch == 0 || self.target_period == 0 || self.update_every == 0 {
            return bad("d, batch, target_period and update_every must be positive".into());
        }
        if self.replay_capacity == 0 || self.n_step == 0 || self.inference_window == 0 {
            return bad("replay_capacity, n_step and inference_window must be positive".into());
        }
        if !(self.lr >= 0.0) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if let Some(s) = self.psi_loss_scale {
            if !(s >= 0.0) {
                return bad(format!("psi_loss_scale must be non-negative, got {s}"));
            }
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        let span = self.epsilon_decay * self.total_steps as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let f = (step as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }

    pub fn psi_scale(&self) -> f64 {
        self.psi_loss_scale.unwrap_or(1.0 / self.d as f64)
    }

    pub fn arch(&self, n_inputs: usize, n_agents: usize) -> Arch {
        Arch {
            n_inputs,
            n_actions: N_ACTIONS,
            d: self.d,
            n_agents,
            torso: self.torso.clone(),
            head_hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub normalized_return: f64,
}

impl EvalPoint {
    pub const CSV_HEADER: &'static str = "env_steps,episodes,mean_return,normalized_return,seed";

    pub fn csv_row(&self, seed: u64) -> String {
        format!(
            "{},{},{},{},{}",
            self.env_steps, self.episodes, self.mean_return, self.normalized_return, seed
        )
    }
}

/// Exact reference returns of a task on a grid, for normalisation.
#[derive(Debug, Clone)]
pub struct TaskEvaluator {
    pub spec: GridSpec,
    pub task: TaskVector,
    pub random_return: f64,
    pub oracle_return: f64,
}

impl TaskEvaluator {
    pub fn new(spec: &GridSpec, task: &TaskVector) -> Result<Self> {
        let (model, _) = TabularModel::from_grid_for(spec, task, 0.9, DEFAULT_STATE_CAP)?;
        let r = model.reward(&task.weights)?;
        let h = spec.episode_horizon;
        Ok(Self {
            spec: spec.clone(),
            task: task.clone(),
            random_return: finite_horizon_return(&model, &SoftPolicy::uniform(model.n_states, model.n_actions), &r, h),
            oracle_return: finite_horizon_optimal_return(&model, &r, h),
        })
    }

    /// `(ret - random) / (oracle - random)`, clipped to `[-1, 1]`.
    pub fn normalize(&self, ret: f64) -> f64 {
        let span = self.oracle_return - self.random_return;
        if span.abs() < 1e-12 {
            return if (ret - self.oracle_return).abs() < 1e-12 { 1.0 } else { 0.0 };
        }
        ((ret - self.random_return) / span).clamp(-1.0, 1.0)
    }

    /// Undiscounted return of one episode under `policy`.
    pub fn episode_return(&self, mut policy: impl FnMut(&Observation) -> Result<usize>) -> Result<f64> {
        let mut s = self.spec.initial_state();
        let mut total = 0.0;
        loop {
            let a = policy(&self.spec.encode(&s))?;
            let out = self.spec.step(&s, action(a)?, &self.task);
            total += out.reward;
            if out.done {
                return Ok(total);
            }
            s = out.next;
        }
    }

    /// Mean raw and normalised return over `episodes` episodes.
    pub fn evaluate(&self, episodes: usize, mut policy: impl FnMut(&Observation) -> Result<usize>) -> Result<(f64, f64)> {
        let n = episodes.max(1);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += self.episode_return(&mut policy)?;
        }
        let mean = sum / n as f64;
        Ok((mean, self.normalize(mean)))
    }
}

fn action(a: usize) -> Result<Action> {
    Action::from_index(a).ok_or_else(|| Error::InvalidArgument(format!("action {a} out of range")))
}

/// Greedy GPI action over `heads`: maximises over heads the pessimistic
/// `min_m Ψ_m(s, a)ᵀ w`. Ties go to the lowest action, then the lowest head.
pub fn gpi_greedy(params: &ParamStore, obs: &Observation, w: &[f64], heads: &[usize]) -> Result<(usize, usize)> {
    let t = params.trace(obs)?;
    let mut best = (f64::NEG_INFINITY, 0, 0);
    let qs: Vec<Vec<f64>> = heads.iter().map(|&k| params.pessimistic_q(&t, k, w)).collect();
    for a in 0..params.n_actions() {
        for (i, &k) in heads.iter().enumerate() {
            if qs[i][a] > best.0 {
                best = (qs[i][a], a, k);
            }
        }
    }
    if !best.0.is_finite() && best.0 != f64::NEG_INFINITY {
        return Err(Error::NonFiniteLoss("gpi"));
    }
    Ok((best.1, best.2))
}

/// ε-greedy GPI over all heads, ego included.
pub fn gpi_act<R: Rng>(params: &ParamStore, obs: &Observation, w: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    let heads: Vec<usize> = (0..=params.n_agents()).collect();
    act_over(params, obs, w, &heads, epsilon, rng)
}

fn act_over<R: Rng>(params: &ParamStore, obs: &Observation, w: &[f64], heads: &[usize], epsilon: f64, rng: &mut R) -> Result<usize> {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..params.n_actions()));
    }
    Ok(gpi_greedy(params, obs, w, heads)?.0)
}

/// Ridge regression of ego rewards on the learned cumulants. Returns
/// `current` unchanged when fewer than `d` transitions are given.
pub fn infer_task<'a>(
    params: &ParamStore,
    transitions: impl IntoIterator<Item = &'a EgoTransition>,
    current: &[f64],
) -> Result<Vec<f64>> {
    let d = params.d();
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    let mut n = 0usize;
    for t in transitions {
        let phi = params.phi(&t.s)?;
        let x = DVector::from_row_slice(&phi[t.a * d..(t.a + 1) * d]);
        xtx += &x * x.transpose();
        xty += &x * t.r_ego;
        n += 1;
    }
    if n < d {
        return Ok(current.to_vec());
    }
    for i in 0..d {
        xtx[(i, i)] += RIDGE;
    }
    let w = xtx.cholesky().ok_or(Error::SingularSystem)?.solve(&xty);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss("infer_task"));
    }
    Ok(w.iter().copied().collect())
}

/// Where the ego reward comes from.
#[derive(Debug, Clone)]
pub enum EgoReward {
    /// The environment's own task reward.
    Task,
    /// `Φ(s, a)ᵀ wᵏ` of a trained model, e.g. an ITD-recovered reward.
    Learned { params: ParamStore, agent: usize },
}

/// Ego learner state. One instance carries parameters, optimisers, the
/// replay buffer and the seed streams across tasks.
#[derive(Debug, Clone)]
pub struct PsiPhiAgent {
    pub config: PsiPhiConfig,
    pub params: ParamStore,
    pub target: ParamStore,
    itd: Option<ItdLearner>,
    reward_opt: Adam,
    psi_opt: Adam,
    pub buffer: ReplayBuffer,
    pub env_steps: usize,
    pub episodes: usize,
    pub updates: usize,
    act_stream: SeedStream,
    learn_rng: ChaCha8Rng,
}

impl PsiPhiAgent {
    pub fn new(config: PsiPhiConfig, params: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        if params.d() != config.d {
            return Err(Error::shape(config.d, params.d()));
        }
        let mut itd_cfg = config.itd.clone();
        itd_cfg.gamma = config.gamma;
        let itd = if params.n_agents() > 0 {
            Some(ItdLearner::new(itd_cfg, &params)?)
        } else {
            None
        };
        let stream = SeedStream::new(seed);
        Ok(Self {
            reward_opt: Adam::for_blocks(config.lr, &params.layout, &[Block::Torso, Block::Phi, Block::W(EGO)]),
            psi_opt: Adam::for_blocks(config.lr, &params.layout, &[Block::Torso, Block::Psi(EGO)]),
            buffer: ReplayBuffer::new(config.replay_capacity),
            target: params.clone(),
            params,
            itd,
            env_steps: 0,
            episodes: 0,
            updates: 0,
            act_stream: stream.fork(10),
            learn_rng: stream.fork(11).next_rng(),
            config,
        })
    }

    /// Heads the behaviour policy maximises over.
    pub fn heads(&self) -> Vec<usize> {
        if self.config.gpi_enabled {
            (0..=self.params.n_agents()).collect()
        } else {
            vec![EGO]
        }
    }

    pub fn act<R: Rng>(&self, obs: &Observation, epsilon: f64, rng: &mut R) -> Result<usize> {
        act_over(&self.params, obs, self.params.w(EGO)?, &self.heads(), epsilon, rng)
    }

    pub fn greedy(&self, obs: &Observation) -> Result<usize> {
        Ok(gpi_greedy(&self.params, obs, self.params.w(EGO)?, &self.heads())?.0)
    }

    pub fn infer_task(&mut self) -> Result<()> {
        let w = infer_task(
            &self.params,
            self.buffer.recent(self.config.inference_window),
            self.params.w(EGO)?,
        )?;
        self.params.set_w(EGO, &w)
    }

    /// Runs one episode with ε-greedy GPI, pushing transitions and learning
    /// on schedule. Returns the episode's reward sum.
    pub fn run_episode(&mut self, env: &TaskEvaluator, reward: &EgoReward, demos: Option<&DemoSampler>) -> Result<f64> {
        if self.config.task_inference_enabled {
            self.infer_task()?;
        }
        let mut rng = self.act_stream.next_rng();
        let mut s = env.spec.initial_state();
        let mut total = 0.0;
        loop {
            let obs = env.spec.encode(&s);
            let eps = self.config.epsilon_at(self.env_steps);
            let a = self.act(&obs, eps, &mut rng)?;
            let out = env.spec.step(&s, action(a)?, &env.task);
            let r = match reward {
                EgoReward::Task => out.reward,
                EgoReward::Learned { params, agent } => crate::itd::recover_reward(params, *agent, &obs, a)?,
            };
            total += r;
            let terminal = env.spec.is_terminal_for(&out.next, &env.task);
            self.buffer.push(EgoTransition {
                s: obs,
                a,
                s_next: env.spec.encode(&out.next),
                r_ego: r,
                done: terminal,
                episode_end: out.done,
            })?;
            self.env_steps += 1;
            if self.env_steps >= self.config.learning_starts && self.env_steps % self.config.update_every == 0 {
                self.learn(demos)?;
            }
            if out.done {
                break;
            }
            s = out.next;
        }
        self.episodes += 1;
        Ok(total)
    }

    /// One learning phase: ITD on demonstrations, reward grounding, then the
    /// ego Q and SF TD losses.
    pub fn learn(&mut self, demos: Option<&DemoSampler>) -> Result<()> {
        if self.updates % self.config.target_period == 0 {
            self.target.values.copy_from_slice(&self.params.values);
        }
        self.updates += 1;
        if let (Some(itd), Some(sampler)) = (self.itd.as_mut(), demos) {
            if sampler.n_td_pairs() > 0 {
                for _ in 0..self.config.itd_steps {
                    itd.step(&mut self.params, &self.target, sampler, &mut self.learn_rng)?;
                }
            }
        }
        if self.buffer.is_empty() {
            return Ok(());
        }
        if self.config.reward_loss_enabled {
            let batch = self.buffer.sample(self.config.batch, &mut self.learn_rng)?;
            let rows: Vec<(&Observation, usize, f64)> = batch.iter().map(|t| (&t.s, t.a, t.r_ego)).collect();
            let (_, g) = reward_loss(&self.params, &rows)?;
            self.reward_opt.step(&mut self.params.values, &g);
        }
        let windows = self.buffer.sample_windows(self.config.batch, self.config.n_step, &mut self.learn_rng)?;
        let samples: Vec<EgoSample> = windows.iter().map(|w| EgoSample::from_window(w)).collect();
        let (_, mut g) = q_td_loss(&self.params, &self.target, &samples, self.config.gamma)?;
        let scale = self.config.psi_scale();
        if scale > 0.0 {
            let (_, gs) = sf_td_loss(&self.params, &self.target, &samples, self.config.gamma)?;
            g.iter_mut().zip(&gs).for_each(|(a, b)| *a += scale * b);
        }
        self.psi_opt.step(&mut self.params.values, &g);
        Ok(())
    }

    pub fn evaluate(&self, env: &TaskEvaluator) -> Result<EvalPoint> {
        let (mean, norm) = env.evaluate(1, |o| self.greedy(o))?;
        Ok(EvalPoint {
            env_steps: self.env_steps,
            episodes: self.episodes,
            mean_return: mean,
            normalized_return: norm,
        })
    }

    /// Trains until `env_steps` reaches `until`, evaluating every
    /// `eval_every` steps (and once at the start when evaluating at all).
    pub fn train(&mut self, env: &TaskEvaluator, reward: &EgoReward, demos: &DemoSet, until: usize) -> Result<Vec<EvalPoint>> {
        let sampler = DemoSampler::new(demos);
        let demo_ref = (!demos.is_empty()).then_some(&sampler);
        let mut evals = Vec::new();
        let every = self.config.eval_every;
        let mut next_eval = self.env_steps;
        while self.env_steps < until {
            if every > 0 && self.env_steps >= next_eval {
                evals.push(self.evaluate(env)?);
                next_eval = (self.env_steps / every + 1) * every;
            }
            self.run_episode(env, reward, demo_ref)?;
        }
        if every > 0 {
            if self.config.task_inference_enabled {
                self.infer_task()?;
            }
            evals.push(self.evaluate(env)?);
        }
        Ok(evals)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut optimizers = vec![
            ("reward".to_string(), self.reward_opt.clone()),
            ("psi".to_string(), self.psi_opt.clone()),
        ];
        if let Some(itd) = &self.itd {
            optimizers.push(("bcq".to_string(), itd.bcq_opt.clone()));
            optimizers.push(("itd".to_string(), itd.itd_opt.clone()));
        }
        Checkpoint {
            step: self.env_steps as u64,
            params: self.params.clone(),
            target: Some(self.target.clone()),
            optimizers,
            seeds: vec![("act".to_string(), self.act_stream)],
        }
    }
}

/// Fresh parameters for `config` on `spec` with `n_agents` demonstrator heads.
pub fn init_params(spec: &GridSpec, config: &PsiPhiConfig, n_agents: usize, seed: u64) -> Result<ParamStore> {
    let n_inputs = spec.observation_shape().iter().product();
    let mut p = ParamStore::init(config.arch(n_inputs, n_agents), &mut SeedStream::new(seed).fork(0).next_rng())?;
    if !config.reward_loss_enabled && !config.task_inference_enabled {
        // Without grounding the preferences stay fixed at one per dimension.
        p.set_w(EGO, &vec![1.0; config.d])?;
    }
    Ok(p)
}

/// The full learner from fresh parameters; heads are sized by `demos.n_agents`.
pub fn train_psiphi(
    spec: &GridSpec,
    task: &TaskVector,
    demos: &DemoSet,
    config: &PsiPhiConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<EvalPoint>)> {
    demos.validate()?;
    let env = TaskEvaluator::new(spec, task)?;
    let params = init_params(spec, config, demos.n_agents, seed)?;
    let mut agent = PsiPhiAgent::new(config.clone(), params, seed)?;
    let evals = agent.train(&env, &EgoReward::Task, demos, config.total_steps)?;
    Ok((agent.params, evals))
}

/// Q-learning comparator: `train_psiphi` without demonstrator heads.
pub fn q_baseline(
    spec: &GridSpec,
    task: &TaskVector,
    reward: &EgoReward,
    config: &PsiPhiConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<EvalPoint>)> {
    let env = TaskEvaluator::new(spec, task)?;
    let params = init_params(spec, config, 0, seed)?;
    let mut agent = PsiPhiAgent::new(config.clone(), params, seed)?;
    let evals = agent.train(&env, reward, &DemoSet::new(0), config.total_steps)?;
    Ok((agent.params, evals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub torso: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            torso: vec![64, 64],
            lr: 1e-3,
            batch: 64,
            steps: 10_000,
        }
    }
}

/// Behaviour cloning: action cross-entropy on the trajectories of `agent`,
/// or on all trajectories pooled without ids when `agent` is `None`. The
/// policy is the single head `1` of a `d = 1` model with `w = [1]`.
pub fn bc_baseline(demos: &DemoSet, agent: Option<usize>, config: &BcConfig, seed: u64) -> Result<ParamStore> {
    demos.validate()?;
    let mut pooled = DemoSet::new(1);
    for t in &demos.trajectories {
        if agent.is_none_or(|k| k == t.agent_id) {
            let mut t = t.clone();
            t.agent_id = 1;
            pooled.trajectories.push(t);
        }
    }
    let sampler = DemoSampler::new(&pooled);
    if sampler.n_pairs() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_inputs = pooled.trajectories[0].steps[0].0.len();
    let arch = Arch {
        n_inputs,
        n_actions: N_ACTIONS,
        d: 1,
        n_agents: 1,
        torso: config.torso.clone(),
        head_hidden: Vec::new(),
    };
    let stream = SeedStream::new(seed);
    let mut p = ParamStore::init(arch, &mut stream.fork(0).next_rng())?;
    p.set_w(1, &[1.0])?;
    let mut opt = Adam::for_blocks(config.lr, &p.layout, &[Block::Torso, Block::Psi(1)]);
    let mut rng = stream.fork(1).next_rng();
    for _ in 0..config.steps {
        let batch: Vec<DemoPair> = sampler.sample(config.batch, &mut rng)?;
        let (_, g) = bcq_loss(&p, &batch)?;
        opt.step(&mut p.values, &g);
    }
    Ok(p)
}

/// Greedy action of a behaviour-cloning model.
pub fn bc_act(params: &ParamStore, obs: &Observation) -> Result<usize> {
    crate::itd::agent_action(params, 1, obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Color, FOUR_ROOMS};
    use crate::oracle::{exact_successor_features, gpi_policy, value_iteration, ViOptions};
    use rand::SeedableRng;

    fn tiny() -> GridSpec {
        GridSpec::parse("R..\n.^.\n...\n").unwrap()
    }

    #[test]
    fn epsilon_schedule() {
        let c = PsiPhiConfig {
            total_steps: 1000,
            ..Default::default()
        };
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(100) - 0.525).abs() < 1e-12);
        assert!((c.epsilon_at(200) - 0.05).abs() < 1e-12);
        assert!((c.epsilon_at(999) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn config_errors() {
        let c = PsiPhiConfig {
            epsilon_start: 1.5,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = PsiPhiConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    fn transitions(n_inputs: usize, rows: &[(usize, usize, f64)]) -> Vec<EgoTransition> {
        rows.iter()
            .map(|&(s, a, r)| EgoTransition {
                s: Observation::one_hot(n_inputs, s),
                a,
                s_next: Observation::one_hot(n_inputs, s),
                r_ego: r,
                done: false,
                episode_end: false,
            })
            .collect()
    }

    #[test]
    fn task_inference_recovers_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let mut p = ParamStore::zeros(Arch::tabular(n, 3, 3, 0)).unwrap();
        let table: Vec<f64> = (0..n * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.set_table(crate::nn::Head::Phi, &table).unwrap();
        let w_true = [0.7, -1.3, 2.1];
        let rows: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|s| (0..3).map(move |a| (s, a)))
            .map(|(s, a)| {
                let phi = p.phi(&Observation::one_hot(n, s)).unwrap();
                let r: f64 = phi[a * 3..a * 3 + 3].iter().zip(&w_true).map(|(x, y)| x * y).sum();
                (s, a, r)
            })
            .collect();
        let w = infer_task(&p, &transitions(n, &rows), &[0.0; 3]).unwrap();
        for (a, b) in w.iter().zip(&w_true) {
            assert!((a - b).abs() < 1e-6, "{w:?}");
        }

        // All-zero rewards give exactly zero.
        let zeros: Vec<_> = rows.iter().map(|&(s, a, _)| (s, a, 0.0)).collect();
        assert_eq!(infer_task(&p, &transitions(n, &zeros), &[1.0; 3]).unwrap(), vec![0.0; 3]);

        // Too few transitions keep the current weights.
        assert_eq!(infer_task(&p, &transitions(n, &rows[..2]), &[4.0, 5.0, 6.0]).unwrap(), vec![4.0, 5.0, 6.0]);

        // Rank-deficient features stay finite.
        let mut q = p.clone();
        q.values.iter_mut().for_each(|v| *v = 0.0);
        let w = infer_task(&q, &transitions(n, &rows), &[0.0; 3]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gpi_prefers_dominating_head_and_breaks_ties_low() {
        let mut p = ParamStore::zeros(Arch::tabular(2, 3, 1, 2)).unwrap();
        // Head 1 dominates everywhere and prefers action 2.
        let h1: Vec<f64> = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let h2: Vec<f64> = vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        for m in 0..2 {
            p.set_table(crate::nn::Head::Psi { agent: 1, member: m }, &h1).unwrap();
            p.set_table(crate::nn::Head::Psi { agent: 2, member: m }, &h2).unwrap();
        }
        let obs = Observation::one_hot(2, 0);
        assert_eq!(gpi_greedy(&p, &obs, &[1.0], &[0, 1, 2]).unwrap(), (2, 1));
        // Everything ties at zero: lowest action, lowest head.
        let z = ParamStore::zeros(Arch::tabular(2, 3, 1, 2)).unwrap();
        assert_eq!(gpi_greedy(&z, &obs, &[1.0], &[0, 1, 2]).unwrap(), (0, 0));
        // K = 0 and ε = 0 is plain greedy on the ego head.
        let mut e = ParamStore::zeros(Arch::tabular(2, 3, 1, 0)).unwrap();
        for m in 0..2 {
            e.set_table(crate::nn::Head::Psi { agent: 0, member: m }, &[0.0, 5.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(gpi_act(&e, &obs, &[1.0], 0.0, &mut rng).unwrap(), 1);
    }

    #[test]
    fn gpi_on_exact_sfs_matches_brute_force() {
        let spec = GridSpec::parse(FOUR_ROOMS).unwrap();
        let (m, _) = TabularModel::from_grid(&spec, 0.9, DEFAULT_STATE_CAP).unwrap();
        let tasks = [TaskVector::coins(1.0, 0.0, 0.0), TaskVector::new(vec![0.0, 0.0, 0.0, -1.0]).unwrap()];
        let mut sfs = Vec::new();
        for t in &tasks {
            let (q, pi) = value_iteration(&m, &m.reward(&t.weights).unwrap(), ViOptions::default()).unwrap();
            let _ = q;
            sfs.push(exact_successor_features(&m, &SoftPolicy::deterministic(&pi, 3)).unwrap());
        }
        let w = [0.5, 0.0, 0.0, -0.5];
        let mut p = ParamStore::zeros(Arch::tabular(m.n_states, 3, 4, 2)).unwrap();
        for (k, sf) in sfs.iter().enumerate() {
            for member in 0..2 {
                p.set_table(crate::nn::Head::Psi { agent: k + 1, member }, &sf.psi).unwrap();
            }
        }
        let expected = gpi_policy(&sfs.iter().map(|sf| sf.q(&w)).collect::<Vec<_>>(), 3);
        for s in 0..m.n_states {
            let obs = Observation::one_hot(m.n_states, s);
            let (a, _) = gpi_greedy(&p, &obs, &w, &[1, 2]).unwrap();
            let qs: Vec<f64> = sfs.iter().map(|sf| sf.q(&w)[s * 3 + expected[s]]).collect();
            let got: Vec<f64> = sfs.iter().map(|sf| sf.q(&w)[s * 3 + a]).collect();
            let best = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((best(&qs) - best(&got)).abs() < 1e-9, "state {s}");
        }
    }

    #[test]
    fn evaluator_bounds() {
        let spec = tiny();
        let ev = TaskEvaluator::new(&spec, &TaskVector::collect(Color::Red)).unwrap();
        assert_eq!(ev.oracle_return, 1.0);
        assert!(ev.random_return > 0.0 && ev.random_return < 1.0);
        // Facing north from the centre: left, forward, right, forward reaches the coin.
        let plan = [0usize, 2, 1, 2];
        let mut i = 0;
        let (ret, norm) = ev
            .evaluate(1, |_| {
                let a = plan[i % 4];
                i += 1;
                Ok(a)
            })
            .unwrap();
        assert_eq!(ret, 1.0);
        assert_eq!(norm, 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let spec = tiny();
        let cfg = PsiPhiConfig {
            lr: 0.0,
            itd: ItdConfig {
                lr: 0.0,
                ..Default::default()
            },
            torso: vec![8],
            total_steps: 300,
            learning_starts: 10,
            batch: 8,
            eval_every: 100,
            ..Default::default()
        };
        let init = init_params(&spec, &cfg, 0, 5).unwrap();
        let mut agent = PsiPhiAgent::new(cfg.clone(), init.clone(), 5).unwrap();
        let ev = TaskEvaluator::new(&spec, &TaskVector::collect(Color::Red)).unwrap();
        let evals = agent.train(&ev, &EgoReward::Task, &DemoSet::new(0), 300).unwrap();
        // Only task inference may move w^ego; the networks are untouched.
        let w = agent.params.layout.range(Block::W(EGO));
        assert_eq!(agent.params.values[..w.start], init.values[..w.start]);
        assert_eq!(agent.params.values[w.end..], init.values[w.end..]);
        assert!(evals.len() >= 3);
        assert!(evals.iter().all(|e| e.normalized_return <= 1.0 + 1e-9));
    }

    #[test]
    fn q_learning_solves_single_coin_grid() {
        let spec = tiny();
        let cfg = PsiPhiConfig {
            lr: 1e-2,
            torso: vec![32],
            total_steps: 4000,
            learning_starts: 100,
            batch: 32,
            target_period: 100,
            eval_every: 0,
            ..PsiPhiConfig::q_learning()
        };
        let (p, _) = q_baseline(&spec, &TaskVector::collect(Color::Red), &EgoReward::Task, &cfg, 1).unwrap();
        let ev = TaskEvaluator::new(&spec, &TaskVector::collect(Color::Red)).unwrap();
        let (ret, norm) = ev.evaluate(1, |o| Ok(gpi_greedy(&p, o, &[1.0], &[EGO])?.0)).unwrap();
        assert_eq!(ret, ev.oracle_return, "normalized {norm}");
    }

    #[test]
    fn bc_memorizes_a_deterministic_demonstrator() {
        let spec = GridSpec::coingrid();
        let demos = crate::oracle::generate_grid_demonstrations(
            &spec,
            &[TaskVector::collect(Color::Red)],
            0.9,
            crate::oracle::DemoOptions {
                temperature: 1e-4,
                episodes_per_agent: 5,
                horizon: 50,
            },
            2,
        )
        .unwrap();
        let cfg = BcConfig {
            torso: vec![32],
            lr: 1e-2,
            steps: 600,
            ..Default::default()
        };
        let p = bc_baseline(&demos, Some(1), &cfg, 0).unwrap();
        let (hits, n) = demos
            .steps()
            .fold((0, 0), |(h, n), (o, a, _)| (h + (bc_act(&p, o).unwrap() == a) as usize, n + 1));
        assert!(hits as f64 / n as f64 >= 0.99, "{hits}/{n}");
    }
}
