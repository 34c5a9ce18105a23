//! Inverse temporal-difference learning on reward-free demonstrations.
//!
//! Alternates a behavioural-cloning step that fits each demonstrator's SF
//! heads and preferences with a TD step that fits the shared cumulants to be
//! consistent with those SFs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{DemoPair, DemoSampler, DemoSet};
use crate::error::{Error, Result};
use crate::grid::Observation;
use crate::loss::{bcq_loss, itd_loss, l1_loss, NextAction};
use crate::nn::{argmax, Adam, Arch, Block, ParamStore};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItdConfig {
    pub lambda_w: f64,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate reached at `max_steps` by linear decay; `None` keeps `lr`.
    pub lr_final: Option<f64>,
    pub max_steps: usize,
    pub gamma: f64,
    /// BC-Q steps per ITD step.
    pub alternate_ratio: usize,
    pub target_period: usize,
    pub next_action: NextAction,
    /// Rows of per-agent accuracy are computed every this many steps.
    pub eval_every: usize,
    /// Pairs per agent used for the logged accuracy.
    pub eval_pairs: usize,
}

impl Default for ItdConfig {
    fn default() -> Self {
        Self {
            lambda_w: 0.05,
            batch: 64,
            lr: 1e-4,
            lr_final: None,
            max_steps: 10_000,
            gamma: 0.9,
            alternate_ratio: 1,
            target_period: 1000,
            next_action: NextAction::Dataset,
            eval_every: 500,
            eval_pairs: 256,
        }
    }
}

impl ItdConfig {
    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_final {
            Some(lf) if self.max_steps > 1 => {
                let f = step.min(self.max_steps - 1) as f64 / (self.max_steps - 1) as f64;
                self.lr + (lf - self.lr) * f
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_w >= 0.0) {
            return Err(Error::Config(format!("lambda_w must be non-negative, got {}", self.lambda_w)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.batch == 0 || self.alternate_ratio == 0 || self.target_period == 0 {
            return Err(Error::Config("batch, alternate_ratio and target_period must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if let Some(lf) = self.lr_final {
            if !(lf >= 0.0) {
                return Err(Error::Config(format!("lr_final must be non-negative, got {lf}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItdLogRow {
    pub step: usize,
    pub loss_bcq: f64,
    pub loss_itd: f64,
    pub l1_w: f64,
    /// Per agent, only on evaluation steps.
    pub accuracy: Option<Vec<f64>>,
}

impl ItdLogRow {
    pub fn csv_header(n_agents: usize) -> String {
        let mut h = String::from("step,loss_bcq,loss_itd,l1_w");
        for k in 1..=n_agents {
            h.push_str(&format!(",accuracy_{k}"));
        }
        h
    }

    pub fn csv_row(&self, n_agents: usize) -> String {
        let mut r = format!("{},{},{},{}", self.step, self.loss_bcq, self.loss_itd, self.l1_w);
        for k in 0..n_agents {
            match &self.accuracy {
                Some(a) => r.push_str(&format!(",{}", a[k])),
                None => r.push(','),
            }
        }
        r
    }
}

/// Optimizer state for the two alternating updates on demonstrator heads.
#[derive(Debug, Clone)]
pub struct ItdLearner {
    pub config: ItdConfig,
    pub bcq_opt: Adam,
    pub itd_opt: Adam,
    agents: Vec<usize>,
}

impl ItdLearner {
    pub fn new(config: ItdConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let agents: Vec<usize> = (1..=params.n_agents()).collect();
        let mut bcq_blocks = vec![Block::Torso];
        let mut itd_blocks = vec![Block::Torso, Block::Phi];
        for &k in &agents {
            bcq_blocks.push(Block::Psi(k));
            bcq_blocks.push(Block::W(k));
            itd_blocks.push(Block::Psi(k));
        }
        Ok(Self {
            bcq_opt: Adam::for_blocks(config.lr, &params.layout, &bcq_blocks),
            itd_opt: Adam::for_blocks(config.lr, &params.layout, &itd_blocks),
            config,
            agents,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.bcq_opt.lr = lr;
        self.itd_opt.lr = lr;
    }

    /// One BC-Q (+ L1) update on `bcq_batch`. Returns `(loss_bcq, l1)`.
    pub fn bcq_step(&mut self, params: &mut ParamStore, batch: &[DemoPair]) -> Result<(f64, f64)> {
        let (lb, mut g) = bcq_loss(params, batch)?;
        let (l1, g1) = l1_loss(params, &self.agents, self.config.lambda_w)?;
        g.iter_mut().zip(&g1).for_each(|(a, b)| *a += b);
        self.bcq_opt.step(&mut params.values, &g);
        Ok((lb, l1))
    }

    pub fn itd_step(&mut self, params: &mut ParamStore, target: &ParamStore, batch: &[DemoPair]) -> Result<f64> {
        let (li, g) = itd_loss(params, target, batch, self.config.gamma, self.config.next_action)?;
        self.itd_opt.step(&mut params.values, &g);
        Ok(li)
    }

    /// `alternate_ratio` BC-Q steps followed by one ITD step.
    pub fn step<R: Rng>(
        &mut self,
        params: &mut ParamStore,
        target: &ParamStore,
        sampler: &DemoSampler,
        rng: &mut R,
    ) -> Result<(f64, f64, f64)> {
        let mut lb = 0.0;
        let mut l1 = 0.0;
        for _ in 0..self.config.alternate_ratio {
            let batch = sampler.sample(self.config.batch, rng)?;
            (lb, l1) = self.bcq_step(params, &batch)?;
        }
        let batch = sampler.sample_td(self.config.batch, rng)?;
        let li = self.itd_step(params, target, &batch)?;
        Ok((lb, li, l1))
    }
}

/// Greedy action of agent `k` in its pessimistic Q.
pub fn agent_action(params: &ParamStore, k: usize, obs: &Observation) -> Result<usize> {
    let t = params.trace(obs)?;
    Ok(argmax(&params.pessimistic_q(&t, k, params.w(k)?)))
}

/// Fraction of recorded steps of agent `k` whose action equals the modelled
/// agent's greedy action.
pub fn action_accuracy(params: &ParamStore, k: usize, demos: &DemoSet) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for traj in demos.trajectories.iter().filter(|t| t.agent_id == k) {
        for (obs, a) in &traj.steps {
            n += 1;
            if agent_action(params, k, obs)? == *a {
                hits += 1;
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { hits as f64 / n as f64 })
}

fn subset_accuracy(params: &ParamStore, pairs: &[Vec<DemoPair>]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, ps)| {
            if ps.is_empty() {
                return Ok(f64::NAN);
            }
            let mut hits = 0;
            for p in ps {
                if agent_action(params, i + 1, p.obs)? == p.action {
                    hits += 1;
                }
            }
            Ok(hits as f64 / ps.len() as f64)
        })
        .collect()
}

/// Trains from scratch. Returns the trained store and one log row per step.
pub fn run_itd(demos: &DemoSet, arch: Arch, config: &ItdConfig, seed: u64) -> Result<(ParamStore, Vec<ItdLogRow>)> {
    let stream = SeedStream::new(seed);
    let params = ParamStore::init(arch, &mut stream.fork(0).next_rng())?;
    train_itd(demos, params, config, seed)
}

/// Continues training `params` on `demos`.
pub fn train_itd(
    demos: &DemoSet,
    mut params: ParamStore,
    config: &ItdConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<ItdLogRow>)> {
    config.validate()?;
    demos.validate()?;
    if demos.n_agents > params.n_agents() {
        return Err(Error::UnknownAgentId(demos.n_agents));
    }
    let sampler = DemoSampler::new(demos);
    if sampler.n_pairs() == 0 {
        return Err(Error::EmptyDataset);
    }
    let stream = SeedStream::new(seed);
    let mut rng = stream.fork(1).next_rng();
    let mut eval_rng = stream.fork(2).next_rng();
    let k = params.n_agents();
    let mut eval_pairs: Vec<Vec<DemoPair>> = vec![Vec::new(); k];
    for i in 0..sampler.n_pairs() {
        let p = sampler.pair(i);
        eval_pairs[p.agent_id - 1].push(p);
    }
    for ps in eval_pairs.iter_mut() {
        if ps.len() > config.eval_pairs {
            // Partial Fisher-Yates keeps the subset fixed for the whole run.
            for i in 0..config.eval_pairs {
                let j = eval_rng.gen_range(i..ps.len());
                ps.swap(i, j);
            }
            ps.truncate(config.eval_pairs);
        }
    }
    let mut learner = ItdLearner::new(config.clone(), &params)?;
    let mut target = params.clone();
    let mut log = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        if step % config.target_period == 0 {
            target.values.copy_from_slice(&params.values);
        }
        learner.set_lr(config.lr_at(step));
        let (lb, li, l1) = learner.step(&mut params, &target, &sampler, &mut rng)?;
        let eval = config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || step + 1 == config.max_steps);
        log.push(ItdLogRow {
            step: step + 1,
            loss_bcq: lb,
            loss_itd: li,
            l1_w: l1,
            accuracy: if eval { Some(subset_accuracy(&params, &eval_pairs)?) } else { None },
        });
    }
    Ok((params, log))
}

/// `Φ(s, a)ᵀ wᵏ`.
pub fn recover_reward(params: &ParamStore, k: usize, obs: &Observation, action: usize) -> Result<f64> {
    params.check_agent(k)?;
    if action >= params.n_actions() {
        return Err(Error::InvalidArgument(format!("action {action} out of range")));
    }
    let d = params.d();
    let phi = params.phi(obs)?;
    Ok(phi[action * d..(action + 1) * d]
        .iter()
        .zip(params.w(k)?)
        .map(|(a, b)| a * b)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::Trajectory;
    use crate::nn::Head;

    fn chain_demos() -> DemoSet {
        let mut set = DemoSet::new(1);
        for _ in 0..3 {
            set.trajectories.push(Trajectory {
                agent_id: 1,
                steps: (0..4).map(|s| (Observation::one_hot(4, s), s % 2)).collect(),
                truncated: false,
            });
        }
        set
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let demos = chain_demos();
        let arch = Arch::tabular(4, 2, 2, 1);
        let config = ItdConfig {
            max_steps: 0,
            ..Default::default()
        };
        let (p, log) = run_itd(&demos, arch.clone(), &config, 5).unwrap();
        let init = ParamStore::init(arch, &mut SeedStream::new(5).fork(0).next_rng()).unwrap();
        assert_eq!(p, init);
        assert!(log.is_empty());
    }

    #[test]
    fn deterministic_given_seed_and_logs_every_step() {
        let demos = chain_demos();
        let arch = Arch::tabular(4, 2, 2, 1);
        let config = ItdConfig {
            max_steps: 50,
            eval_every: 10,
            lr: 1e-2,
            ..Default::default()
        };
        let (a, la) = run_itd(&demos, arch.clone(), &config, 1).unwrap();
        let (b, lb) = run_itd(&demos, arch, &config, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 50);
        assert!(la[9].accuracy.is_some() && la[8].accuracy.is_none());
        assert_eq!(ItdLogRow::csv_header(1), "step,loss_bcq,loss_itd,l1_w,accuracy_1");
        assert_eq!(la[8].csv_row(1).split(',').count(), 5);
    }

    #[test]
    fn first_bcq_loss_is_ln_actions() {
        let demos = chain_demos();
        let config = ItdConfig {
            max_steps: 1,
            ..Default::default()
        };
        let (_, log) = run_itd(&demos, Arch::tabular(4, 2, 2, 1), &config, 0).unwrap();
        assert!((log[0].loss_bcq - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn recover_reward_cases() {
        let mut p = ParamStore::zeros(Arch::tabular(3, 2, 1, 1)).unwrap();
        let o = Observation::one_hot(3, 1);
        assert_eq!(recover_reward(&p, 1, &o, 1).unwrap(), 0.0);
        p.set_table(Head::Phi, &[1.0; 6]).unwrap();
        p.set_w(1, &[2.5]).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(recover_reward(&p, 1, &Observation::one_hot(3, s), a).unwrap(), 2.5);
            }
        }
        assert!(matches!(recover_reward(&p, 2, &o, 0), Err(Error::UnknownAgentId(2))));
    }

    #[test]
    fn rejects_bad_config_and_empty_demos() {
        let arch = Arch::tabular(4, 2, 2, 1);
        let bad = ItdConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(matches!(run_itd(&chain_demos(), arch.clone(), &bad, 0), Err(Error::Config(_))));
        let empty = DemoSet::new(1);
        assert!(matches!(
            run_itd(&empty, arch, &ItdConfig::default(), 0),
            Err(Error::EmptyDataset)
        ));
    }
}
