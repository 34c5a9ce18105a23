//! Experiment drivers: IRL quality, imitation, few-shot transfer, learning
//! acceleration, cumulant dumps, the cumulant-dimension sweep and the exact
//! checks of the policy-invariance and generalisation results. Every driver
//! is a pure function of its config and seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{bc_act, bc_baseline, init_params, q_baseline, BcConfig, EgoReward, EvalPoint, PsiPhiAgent, PsiPhiConfig, TaskEvaluator};
use crate::demo::DemoSet;
use crate::error::{Error, Result};
use crate::grid::{Action, Color, EnvState, GridSpec, Orientation, TaskVector, N_ACTIONS, N_TRUE_FEATURES};
use crate::itd::{action_accuracy, recover_reward, run_itd, ItdConfig, ItdLearner};
use crate::loss::NextAction;
use crate::nn::{Arch, ParamStore};
use crate::oracle::{
    exact_successor_features, generate_demonstrations, generate_grid_demonstrations, gpi_policy, policy_evaluation,
    random_model, value_iteration, DemoOptions, RandomMdpOptions, SoftPolicy, TabularModel, ViOptions,
};
use crate::rng::SeedStream;

// ---------------------------------------------------------------------------
// Tasks

/// Parses `R`, `G`, `Y` or signed sums such as `R+G`, `R-G`, `-R-G`.
pub fn parse_task(name: &str) -> Result<TaskVector> {
    let mut w = [0.0; 3];
    let mut sign = 1.0;
    let mut seen = false;
    for ch in name.chars().filter(|c| !c.is_whitespace()) {
        match ch {
            '+' => sign = 1.0,
            '-' | '−' => sign = -1.0,
            'R' | 'G' | 'Y' => {
                let i = match ch {
                    'R' => Color::Red,
                    'G' => Color::Green,
                    _ => Color::Yellow,
                }
                .index();
                w[i] += sign;
                sign = 1.0;
                seen = true;
            }
            _ => return Err(Error::Config(format!("bad task name {name:?}"))),
        }
    }
    if !seen {
        return Err(Error::Config(format!("bad task name {name:?}")));
    }
    Ok(TaskVector::coins(w[0], w[1], w[2]))
}

pub fn parse_tasks(names: &[String]) -> Result<Vec<TaskVector>> {
    names.iter().map(|n| parse_task(n)).collect()
}

/// A transfer target together with its evaluation budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferTask {
    pub name: String,
    pub w_true: TaskVector,
    pub shots: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlConfig {
    pub demo_tasks: Vec<String>,
    pub seeds: Vec<u64>,
    /// Run the random-reward control as well.
    pub random_reward_control: bool,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            demo_tasks: vec!["R".into(), "G".into()],
            seeds: vec![0, 1, 2],
            random_reward_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImitationConfig {
    pub demo_tasks: Vec<String>,
    /// Ego task of each phase; the task changes at every phase boundary.
    pub ego_tasks: Vec<String>,
    pub steps_per_phase: usize,
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            demo_tasks: vec!["R".into(), "G".into(), "Y".into()],
            ego_tasks: vec!["R+G".into(), "G+Y".into(), "R+Y".into()],
            steps_per_phase: 10_000,
            train_fraction: 0.8,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub demo_tasks: Vec<String>,
    /// Task the ego trains on before transfer.
    pub pretrain_task: String,
    pub pretrain_steps: usize,
    pub tasks: Vec<String>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            demo_tasks: vec!["R".into(), "G".into()],
            pretrain_task: "R+G".into(),
            pretrain_steps: 20_000,
            tasks: vec!["R+G".into(), "R-G".into(), "-R+G".into(), "-R-G".into()],
            shots: vec![0, 1, 25],
            seeds: vec![0, 1, 2],
        }
    }
}

impl TransferConfig {
    pub fn transfer_tasks(&self) -> Result<Vec<TransferTask>> {
        self.tasks
            .iter()
            .map(|n| {
                Ok(TransferTask {
                    name: n.clone(),
                    w_true: parse_task(n)?,
                    shots: self.shots.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccelerationConfig {
    pub demo_tasks: Vec<String>,
    pub ego_task: String,
    pub threshold: f64,
    pub seeds: Vec<u64>,
}

impl Default for AccelerationConfig {
    fn default() -> Self {
        Self {
            demo_tasks: vec!["R".into(), "G".into()],
            ego_task: "R".into(),
            threshold: 0.9,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub dims: Vec<usize>,
    pub demo_tasks: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dims: vec![1, 4, 8, 16],
            demo_tasks: vec!["R".into(), "G".into()],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvarianceConfig {
    pub n_mdps: usize,
    pub n_states: usize,
    pub d: usize,
    /// Task weights are uniform on `(-weight_scale, weight_scale)`.
    pub weight_scale: f64,
    pub temperature: f64,
    pub episodes: usize,
    pub horizon: usize,
    /// Required agreement on demo-visited states, per MDP.
    pub threshold: f64,
    pub itd: ItdConfig,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            n_mdps: 20,
            n_states: 50,
            d: 3,
            weight_scale: 0.3,
            temperature: 0.05,
            episodes: 10_000,
            horizon: 30,
            threshold: 0.95,
            itd: ItdConfig {
                lr: 0.05,
                lr_final: Some(5e-4),
                max_steps: 150_000,
                batch: 64,
                target_period: 100,
                next_action: NextAction::Greedy,
                eval_every: 0,
                ..ItdConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoremConfig {
    pub n_mdps: usize,
    pub max_states: usize,
    pub max_d: usize,
    pub n_policies: usize,
    /// Half-width of the uniform noise added to the source rewards.
    pub reward_noise: f64,
    /// Half-width of the uniform noise added to each SF entry.
    pub sf_noise: f64,
    pub invariance: InvarianceConfig,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            n_mdps: 100,
            max_states: 50,
            max_d: 4,
            n_policies: 3,
            reward_noise: 0.05,
            sf_noise: 0.1,
            invariance: InvarianceConfig::default(),
        }
    }
}

/// Everything a CLI run needs. Model-wide settings (`d`, `torso`, `gamma`)
/// live in `agent` and apply to stand-alone ITD runs as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Map file; the canonical CoinGrid when absent.
    pub map: Option<String>,
    pub demos: DemoOptions,
    pub itd: ItdConfig,
    pub agent: PsiPhiConfig,
    /// Q-learning agent trained on recovered or true rewards.
    pub rl: PsiPhiConfig,
    pub bc: BcConfig,
    pub irl: IrlConfig,
    pub imitation: ImitationConfig,
    pub transfer: TransferConfig,
    pub acceleration: AccelerationConfig,
    pub sweep: SweepConfig,
    pub theorems: TheoremConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            map: None,
            demos: DemoOptions {
                temperature: 0.05,
                episodes_per_agent: 500,
                horizon: crate::grid::DEFAULT_HORIZON,
            },
            itd: ItdConfig {
                lr: 1e-3,
                max_steps: 30_000,
                eval_every: 5_000,
                ..ItdConfig::default()
            },
            agent: PsiPhiConfig::default(),
            rl: PsiPhiConfig {
                lr: 1e-3,
                total_steps: 30_000,
                target_period: 500,
                eval_every: 0,
                ..PsiPhiConfig::q_learning()
            },
            bc: BcConfig::default(),
            irl: IrlConfig::default(),
            imitation: ImitationConfig::default(),
            transfer: TransferConfig::default(),
            acceleration: AccelerationConfig::default(),
            sweep: SweepConfig::default(),
            theorems: TheoremConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Propagates the model-wide settings into the nested configs.
    pub fn sync(&mut self) {
        self.itd.gamma = self.agent.gamma;
        self.agent.itd = self.itd.clone();
        self.rl.gamma = self.agent.gamma;
    }

    pub fn validate(&self) -> Result<()> {
        self.itd.validate()?;
        self.agent.validate()?;
        self.rl.validate()?;
        if !(self.demos.temperature > 0.0) {
            return Err(Error::Config("demos.temperature must be positive".into()));
        }
        if self.demos.episodes_per_agent == 0 || self.demos.horizon == 0 {
            return Err(Error::Config("demos.episodes_per_agent and demos.horizon must be positive".into()));
        }
        if !(self.imitation.train_fraction > 0.0 && self.imitation.train_fraction < 1.0) {
            return Err(Error::Config("imitation.train_fraction must lie in (0, 1)".into()));
        }
        for names in [
            &self.irl.demo_tasks,
            &self.imitation.demo_tasks,
            &self.imitation.ego_tasks,
            &self.transfer.demo_tasks,
            &self.transfer.tasks,
            &self.acceleration.demo_tasks,
            &self.sweep.demo_tasks,
        ] {
            parse_tasks(names)?;
        }
        parse_task(&self.transfer.pretrain_task)?;
        parse_task(&self.acceleration.ego_task)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        match &self.map {
            Some(p) => GridSpec::load(Path::new(p)),
            None => Ok(GridSpec::coingrid()),
        }
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn demos_for(&self, spec: &GridSpec, names: &[String], seed: u64) -> Result<DemoSet> {
        let tasks = parse_tasks(names)?;
        generate_grid_demonstrations(spec, &tasks, self.agent.gamma, self.demos, derive(seed, SEED_DEMOS))
    }

    /// Architecture with `n_agents` demonstrator heads and cumulant width `d`.
    pub fn arch(&self, spec: &GridSpec, d: usize, n_agents: usize) -> Arch {
        let n_inputs = spec.observation_shape().iter().product();
        PsiPhiConfig { d, ..self.agent.clone() }.arch(n_inputs, n_agents)
    }
}

const SEED_DEMOS: u64 = 1;
const SEED_ITD: u64 = 2;
const SEED_RL: u64 = 3;
const SEED_BC: u64 = 4;
const SEED_AGENT: u64 = 5;
const SEED_SPLIT: u64 = 6;

/// Independent sub-seed of `seed` for one component.
pub fn derive(seed: u64, label: u64) -> u64 {
    SeedStream::new(seed).fork(label).seed
}

// ---------------------------------------------------------------------------
// Output

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub rustc_version: String,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, seed: u64, files: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            rustc_version: option_env!("PSIPHI_RUSTC_VERSION").unwrap_or("unknown").to_string(),
            files,
        }
    }

    /// Writes `manifest.json` and the resolved `config.toml` into `dir`.
    pub fn write(&self, dir: &Path, config: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        std::fs::write(dir.join("config.toml"), config.to_toml())?;
        Ok(())
    }
}

/// A CSV table with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// IRL quality

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlRow {
    pub seed: u64,
    pub method: String,
    pub agent: usize,
    pub task: String,
    pub mean_return: f64,
    pub normalized_return: f64,
}

impl IrlRow {
    pub fn table(rows: &[IrlRow]) -> Table {
        let mut t = Table::new(&["seed", "method", "agent", "task", "mean_return", "normalized_return"]);
        for r in rows {
            t.push(vec![
                r.seed.to_string(),
                r.method.clone(),
                r.agent.to_string(),
                r.task.clone(),
                f(r.mean_return),
                f(r.normalized_return),
            ]);
        }
        t
    }
}

/// ITD with cumulant width `d` on `demos`.
pub fn itd_on(spec: &GridSpec, demos: &DemoSet, cfg: &ExperimentConfig, d: usize, seed: u64) -> Result<ParamStore> {
    let arch = cfg.arch(spec, d, demos.n_agents);
    let itd = ItdConfig {
        eval_every: 0,
        ..cfg.itd.clone()
    };
    Ok(run_itd(demos, arch, &itd, derive(seed, SEED_ITD))?.0)
}

/// Greedy return of a Q-learning agent trained on `reward`, scored on `task`.
pub fn rl_on(spec: &GridSpec, task: &TaskVector, reward: &EgoReward, cfg: &ExperimentConfig, seed: u64) -> Result<(f64, f64)> {
    let (p, _) = q_baseline(spec, task, reward, &cfg.rl, derive(seed, SEED_RL))?;
    let env = TaskEvaluator::new(spec, task)?;
    let w = p.w(crate::nn::EGO)?.to_vec();
    env.evaluate(1, |o| Ok(crate::agent::gpi_greedy(&p, o, &w, &[crate::nn::EGO])?.0))
}

/// Score of ITD-recovered rewards: one Q-learning agent per demonstrator,
/// trained on `Φᵀwᵏ` and scored on the demonstrator's true task.
pub fn score_recovered(
    spec: &GridSpec,
    itd: &ParamStore,
    tasks: &[TaskVector],
    names: &[String],
    cfg: &ExperimentConfig,
    seed: u64,
    method: &str,
) -> Result<Vec<IrlRow>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let reward = EgoReward::Learned {
                params: itd.clone(),
                agent: i + 1,
            };
            let (ret, norm) = rl_on(spec, task, &reward, cfg, seed)?;
            Ok(IrlRow {
                seed,
                method: method.into(),
                agent: i + 1,
                task: names[i].clone(),
                mean_return: ret,
                normalized_return: norm,
            })
        })
        .collect()
}

/// ITD, the ground-truth-reward agent, pooled and per-agent BC.
pub fn eval_irl(spec: &GridSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<IrlRow>> {
    let names = &cfg.irl.demo_tasks;
    let tasks = parse_tasks(names)?;
    let demos = cfg.demos_for(spec, names, seed)?;
    let itd = itd_on(spec, &demos, cfg, cfg.agent.d, seed)?;
    let mut rows = score_recovered(spec, &itd, &tasks, names, cfg, seed, "itd")?;
    let row = |method: &str, i: usize, (ret, norm): (f64, f64)| IrlRow {
        seed,
        method: method.into(),
        agent: i + 1,
        task: names[i].clone(),
        mean_return: ret,
        normalized_return: norm,
    };
    let pooled = bc_baseline(&demos, None, &cfg.bc, derive(seed, SEED_BC))?;
    for (i, task) in tasks.iter().enumerate() {
        let env = TaskEvaluator::new(spec, task)?;
        rows.push(row("ground_truth", i, rl_on(spec, task, &EgoReward::Task, cfg, seed)?));
        rows.push(row("bc_pooled", i, env.evaluate(1, |o| bc_act(&pooled, o))?));
        let own = bc_baseline(&demos, Some(i + 1), &cfg.bc, derive(seed, SEED_BC))?;
        rows.push(row("bc_per_agent", i, env.evaluate(1, |o| bc_act(&own, o))?));
        if cfg.irl.random_reward_control {
            let random = init_params(spec, &PsiPhiConfig { d: cfg.agent.d, ..cfg.agent.clone() }, tasks.len(), derive(seed, 99))?;
            let reward = EgoReward::Learned { params: random, agent: i + 1 };
            rows.push(row("random_reward", i, rl_on(spec, task, &reward, cfg, seed)?));
        }
    }
    Ok(rows)
}

/// Mean normalised return of `method` per seed.
pub fn per_seed(rows: &[IrlRow], method: &str) -> Vec<f64> {
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    seeds
        .into_iter()
        .filter_map(|s| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.seed == s && r.method == method)
                .map(|r| r.normalized_return)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cumulant-dimension sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub seed: u64,
    pub normalized_return: f64,
}

pub fn sweep_cumulant_dim(spec: &GridSpec, cfg: &ExperimentConfig, dims: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("dims must be non-empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("seeds must be non-empty".into()));
    }
    let names = &cfg.sweep.demo_tasks;
    let tasks = parse_tasks(names)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let demos = cfg.demos_for(spec, names, seed)?;
        for &d in dims {
            let itd = itd_on(spec, &demos, cfg, d, seed)?;
            let scores = score_recovered(spec, &itd, &tasks, names, cfg, seed, "itd")?;
            let n = scores.iter().map(|r| r.normalized_return).sum::<f64>() / scores.len() as f64;
            rows.push(SweepRow { d, seed, normalized_return: n });
        }
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&["d", "seed", "normalized_return"]);
    for r in rows {
        t.push(vec![r.d.to_string(), r.seed.to_string(), f(r.normalized_return)]);
    }
    t
}

// ---------------------------------------------------------------------------
// Imitation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationRow {
    pub seed: u64,
    pub method: String,
    pub phase: usize,
    pub itd_steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn imitation_table(rows: &[ImitationRow]) -> Table {
    let mut t = Table::new(&["seed", "method", "phase", "itd_steps", "train_accuracy", "test_accuracy"]);
    for r in rows {
        t.push(vec![
            r.seed.to_string(),
            r.method.clone(),
            r.phase.to_string(),
            r.itd_steps.to_string(),
            f(r.train_accuracy),
            f(r.test_accuracy),
        ]);
    }
    t
}

/// Accuracy pooled over all demonstrators' recorded steps.
pub fn pooled_accuracy(params: &ParamStore, demos: &DemoSet) -> Result<f64> {
    let mut hits = 0.0;
    let mut n = 0usize;
    for k in 1..=demos.n_agents {
        let m = demos.for_agent(k).n_steps();
        if m > 0 {
            hits += action_accuracy(params, k, demos)? * m as f64;
            n += m;
        }
    }
    Ok(if n == 0 { f64::NAN } else { hits / n as f64 })
}

/// Held-out action prediction of ITD alone against ΨΦ whose ego task changes
/// every phase. Both see the same number of ITD steps at each phase end.
pub fn eval_imitation(spec: &GridSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ImitationRow>> {
    let ic = &cfg.imitation;
    if ic.demo_tasks.len() < 2 {
        return Err(Error::InvalidArgument("imitation needs at least two demonstrators".into()));
    }
    let demos = cfg.demos_for(spec, &ic.demo_tasks, seed)?;
    let (train, test) = shuffled_split(&demos, ic.train_fraction, derive(seed, SEED_SPLIT));
    let ego_tasks = parse_tasks(&ic.ego_tasks)?;
    let k = demos.n_agents;
    let mut rows = Vec::new();

    // ΨΦ with task phase changes.
    let agent_cfg = PsiPhiConfig {
        total_steps: ic.steps_per_phase * ego_tasks.len(),
        eval_every: 0,
        ..cfg.agent.clone()
    };
    let params = init_params(spec, &agent_cfg, k, derive(seed, SEED_AGENT))?;
    let mut agent = PsiPhiAgent::new(agent_cfg, params, derive(seed, SEED_AGENT))?;
    let mut marks = Vec::new();
    for (phase, task) in ego_tasks.iter().enumerate() {
        let env = TaskEvaluator::new(spec, task)?;
        agent.buffer.clear();
        agent.train(&env, &EgoReward::Task, &train, (phase + 1) * ic.steps_per_phase)?;
        marks.push(agent.updates);
        rows.push(ImitationRow {
            seed,
            method: "psiphi".into(),
            phase,
            itd_steps: agent.updates * cfg.agent.itd_steps,
            train_accuracy: pooled_accuracy(&agent.params, &train)?,
            test_accuracy: pooled_accuracy(&agent.params, &test)?,
        });
    }

    // ITD alone, same initial parameters and ITD step counts.
    let mut params = init_params(spec, &agent.config, k, derive(seed, SEED_AGENT))?;
    let mut itd_cfg = cfg.itd.clone();
    itd_cfg.eval_every = 0;
    let mut learner = ItdLearner::new(itd_cfg.clone(), &params)?;
    let sampler = crate::demo::DemoSampler::new(&train);
    let mut target = params.clone();
    let mut rng = SeedStream::new(derive(seed, SEED_ITD)).next_rng();
    let mut done = 0usize;
    for (phase, &updates) in marks.iter().enumerate() {
        let until = updates * cfg.agent.itd_steps;
        while done < until {
            if done % itd_cfg.target_period == 0 {
                target.values.copy_from_slice(&params.values);
            }
            learner.step(&mut params, &target, &sampler, &mut rng)?;
            done += 1;
        }
        rows.push(ImitationRow {
            seed,
            method: "itd".into(),
            phase,
            itd_steps: done,
            train_accuracy: pooled_accuracy(&params, &train)?,
            test_accuracy: pooled_accuracy(&params, &test)?,
        });
    }

    // Per-demonstrator behaviour cloning, for the memorisation floor.
    let mut hits = (0.0, 0.0);
    let mut n = (0usize, 0usize);
    for a in 1..=k {
        let bc = bc_baseline(&train, Some(a), &cfg.bc, derive(seed, SEED_BC))?;
        for (set, h, c) in [(&train, &mut hits.0, &mut n.0), (&test, &mut hits.1, &mut n.1)] {
            for (obs, act, id) in set.steps() {
                if id == a {
                    *c += 1;
                    if bc_act(&bc, obs)? == act {
                        *h += 1.0;
                    }
                }
            }
        }
    }
    rows.push(ImitationRow {
        seed,
        method: "bc".into(),
        phase: ego_tasks.len() - 1,
        itd_steps: 0,
        train_accuracy: hits.0 / n.0 as f64,
        test_accuracy: hits.1 / n.1 as f64,
    });
    Ok(rows)
}

/// Trajectory-level split after a seeded shuffle.
pub fn shuffled_split(demos: &DemoSet, train_fraction: f64, seed: u64) -> (DemoSet, DemoSet) {
    let mut shuffled = demos.clone();
    let mut rng = SeedStream::new(seed).next_rng();
    for i in (1..shuffled.trajectories.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.trajectories.swap(i, j);
    }
    shuffled.split(train_fraction)
}

// ---------------------------------------------------------------------------
// Few-shot transfer and acceleration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub seed: u64,
    pub task: String,
    pub shots: usize,
    pub mean_return: f64,
    pub normalized_return: f64,
}

pub fn transfer_table(rows: &[TransferRow]) -> Table {
    let mut t = Table::new(&["seed", "task", "shots", "mean_return", "normalized_return"]);
    for r in rows {
        t.push(vec![
            r.seed.to_string(),
            r.task.clone(),
            r.shots.to_string(),
            f(r.mean_return),
            f(r.normalized_return),
        ]);
    }
    t
}

/// Trains ΨΦ on `task` from fresh parameters.
pub fn pretrain(spec: &GridSpec, cfg: &ExperimentConfig, demos: &DemoSet, task: &TaskVector, steps: usize, seed: u64) -> Result<(PsiPhiAgent, Vec<EvalPoint>)> {
    let agent_cfg = PsiPhiConfig {
        total_steps: steps,
        ..cfg.agent.clone()
    };
    let params = init_params(spec, &agent_cfg, demos.n_agents, derive(seed, SEED_AGENT))?;
    let mut agent = PsiPhiAgent::new(agent_cfg, params, derive(seed, SEED_AGENT))?;
    let env = TaskEvaluator::new(spec, task)?;
    let evals = agent.train(&env, &EgoReward::Task, demos, steps)?;
    Ok((agent, evals))
}

/// Few-shot adaptation of an agent pretrained with R-only and G-only
/// demonstrators. Zero shots evaluates the pretrained preferences; `n`
/// shots first runs `n` episodes on the new task, with task inference.
pub fn eval_few_shot(spec: &GridSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TransferRow>> {
    let tc = &cfg.transfer;
    let demos = cfg.demos_for(spec, &tc.demo_tasks, seed)?;
    let (pre, _) = pretrain(spec, cfg, &demos, &parse_task(&tc.pretrain_task)?, tc.pretrain_steps, seed)?;
    let mut rows = Vec::new();
    for t in tc.transfer_tasks()? {
        let env = TaskEvaluator::new(spec, &t.w_true)?;
        let mut agent = pre.clone();
        agent.buffer.clear();
        let mut shots = t.shots.clone();
        shots.sort_unstable();
        let sampler = crate::demo::DemoSampler::new(&demos);
        let mut run = 0usize;
        for n in shots {
            while run < n {
                agent.run_episode(&env, &EgoReward::Task, Some(&sampler))?;
                run += 1;
            }
            if agent.config.task_inference_enabled {
                agent.infer_task()?;
            }
            let p = agent.evaluate(&env)?;
            rows.push(TransferRow {
                seed,
                task: t.name.clone(),
                shots: n,
                mean_return: p.mean_return,
                normalized_return: p.normalized_return,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub method: String,
    pub point: EvalPoint,
}

pub fn curve_table(rows: &[CurveRow]) -> Table {
    let mut t = Table::new(&["seed", "method", "env_steps", "episodes", "mean_return", "normalized_return"]);
    for r in rows {
        t.push(vec![
            r.seed.to_string(),
            r.method.clone(),
            r.point.env_steps.to_string(),
            r.point.episodes.to_string(),
            f(r.point.mean_return),
            f(r.point.normalized_return),
        ]);
    }
    t
}

/// Learning curves of ΨΦ with demonstrations and of the ablation without
/// demonstrator heads or GPI.
pub fn eval_acceleration(spec: &GridSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<CurveRow>> {
    let ac = &cfg.acceleration;
    let task = parse_task(&ac.ego_task)?;
    let demos = cfg.demos_for(spec, &ac.demo_tasks, seed)?;
    let steps = cfg.agent.total_steps;
    let (_, with) = pretrain(spec, cfg, &demos, &task, steps, seed)?;
    let ablation = ExperimentConfig {
        agent: PsiPhiConfig {
            gpi_enabled: false,
            ..cfg.agent.clone()
        },
        ..cfg.clone()
    };
    let (_, without) = pretrain(spec, &ablation, &DemoSet::new(0), &task, steps, seed)?;
    let mut rows: Vec<CurveRow> = with
        .into_iter()
        .map(|p| CurveRow { seed, method: "psiphi".into(), point: p })
        .collect();
    rows.extend(without.into_iter().map(|p| CurveRow { seed, method: "ablation".into(), point: p }));
    Ok(rows)
}

/// First evaluated step count at which `method` reaches `threshold`.
pub fn steps_to_threshold(rows: &[CurveRow], seed: u64, method: &str, threshold: f64) -> Option<usize> {
    rows.iter()
        .filter(|r| r.seed == seed && r.method == method)
        .find(|r| r.point.normalized_return >= threshold)
        .map(|r| r.point.env_steps)
}

// ---------------------------------------------------------------------------
// Cumulant dumps

/// One `height × width` grid per cumulant dimension: `Φ_i` at the state with
/// the agent one cell before `cell`, facing it, taking FORWARD onto it. Coins
/// keep their initial layout. Cells that cannot be entered (walls, or no free
/// neighbour) hold NaN.
pub fn dump_cumulants(params: &ParamStore, spec: &GridSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = params.d();
    let mut grids = vec![vec![vec![f64::NAN; spec.width]; spec.height]; d];
    let fwd = Action::Forward.index();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let cell = crate::grid::Cell { x, y };
            if !spec.is_free(cell) {
                continue;
            }
            let Some(state) = approach(spec, cell) else { continue };
            let phi = params.phi(&spec.encode(&state))?;
            for (i, g) in grids.iter_mut().enumerate() {
                g[y][x] = phi[fwd * d + i];
            }
        }
    }
    Ok(grids)
}

/// A state whose FORWARD move enters `cell`, preferring the neighbour south
/// of it, then west, north, east.
fn approach(spec: &GridSpec, cell: crate::grid::Cell) -> Option<EnvState> {
    let start = spec.initial_state();
    [Orientation::North, Orientation::East, Orientation::South, Orientation::West]
        .into_iter()
        .find_map(|o| {
            // The neighbour that faces `cell` when oriented `o`.
            let back = spec.faced_cell(cell, o.turn_left().turn_left())?;
            if !spec.is_free(back) {
                return None;
            }
            Some(EnvState {
                agent_cell: back,
                orientation: o,
                coin_mask: start.coin_mask,
                step: 0,
            })
        })
}

pub fn cumulant_tables(grids: &[Vec<Vec<f64>>]) -> Vec<Table> {
    grids
        .iter()
        .map(|g| {
            let w = g.first().map_or(0, |r| r.len());
            let header: Vec<String> = std::iter::once("y".to_string()).chain((0..w).map(|x| format!("x{x}"))).collect();
            let mut t = Table {
                header,
                rows: Vec::new(),
            };
            for (y, row) in g.iter().enumerate() {
                t.push(std::iter::once(y.to_string()).chain(row.iter().map(|v| f(*v))).collect());
            }
            t
        })
        .collect()
}

/// Best ratio, over assignments of distinct dimensions to colours, of mean
/// `|Φ_i|` on the matching colour's coin cells to mean `|Φ_i|` elsewhere.
/// Returns the ratio per colour under the assignment maximising how many
/// colours reach `factor`.
pub fn cumulant_color_ratios(grids: &[Vec<Vec<f64>>], spec: &GridSpec, colors: &[Color]) -> Vec<f64> {
    let coins = spec.coin_list();
    let ratio = |i: usize, c: Color| {
        let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0, 0.0, 0);
        for (y, row) in grids[i].iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                if v.is_nan() {
                    continue;
                }
                if coins.iter().any(|(cell, col)| cell.x == x && cell.y == y && *col == c) {
                    on += v.abs();
                    n_on += 1;
                } else {
                    off += v.abs();
                    n_off += 1;
                }
            }
        }
        let off = if n_off == 0 { 0.0 } else { off / n_off as f64 };
        let on = if n_on == 0 { 0.0 } else { on / n_on as f64 };
        if off == 0.0 {
            if on > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            on / off
        }
    };
    // Greedy over the (small) colour list: exhaustive over dimension choices.
    let d = grids.len();
    let mut best: Vec<f64> = vec![0.0; colors.len()];
    let mut best_key = (0usize, f64::NEG_INFINITY);
    let mut choice = vec![0usize; colors.len()];
    fn rec(
        pos: usize,
        d: usize,
        choice: &mut Vec<usize>,
        colors: &[Color],
        ratio: &dyn Fn(usize, Color) -> f64,
        best: &mut Vec<f64>,
        best_key: &mut (usize, f64),
    ) {
        if pos == colors.len() {
            let r: Vec<f64> = choice.iter().zip(colors).map(|(&i, &c)| ratio(i, c)).collect();
            let key = (r.iter().filter(|&&x| x >= 3.0).count(), r.iter().map(|x| x.min(1e6)).sum::<f64>());
            if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 > best_key.1) {
                *best_key = key;
                *best = r;
            }
            return;
        }
        for i in 0..d {
            if choice[..pos].contains(&i) {
                continue;
            }
            choice[pos] = i;
            rec(pos + 1, d, choice, colors, ratio, best, best_key);
        }
    }
    if d >= colors.len() {
        rec(0, d, &mut choice, colors, &ratio, &mut best, &mut best_key);
    } else {
        for (j, &c) in colors.iter().enumerate() {
            best[j] = (0..d).map(|i| ratio(i, c)).fold(0.0, f64::max);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Exact theorem checks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub mdp_id: usize,
    pub state: usize,
    pub action: usize,
    pub gap: f64,
    pub rhs: f64,
    pub delta_r: f64,
    pub delta_psi: f64,
    pub phi_max: f64,
    pub w_distance: f64,
}

impl BoundRecord {
    pub fn violated(&self) -> bool {
        self.gap > self.rhs + 1e-6
    }
}

/// Right-hand side of the GPI generalisation bound.
pub fn bound_rhs(gamma: f64, phi_max: f64, w_distance: f64, delta_r: f64, w_norm: f64, delta_psi: f64) -> f64 {
    2.0 / (1.0 - gamma) * (phi_max * w_distance + 2.0 * delta_r + w_norm * delta_psi + delta_r / (1.0 - gamma))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// GPI on a new task from approximate SFs of policies that are optimal for
/// noisy source rewards. `rewards[j]` is the reward policy `j` optimises,
/// `psi_noise[j]` is added to its exact SFs. The target reward is `Φᵀw_new`.
pub fn bound_check(
    mdp_id: usize,
    model: &TabularModel,
    tasks: &[Vec<f64>],
    rewards: &[Vec<f64>],
    psi_noise: &[Vec<f64>],
    w_new: &[f64],
) -> Result<Vec<BoundRecord>> {
    let na = model.n_actions;
    let d = model.d;
    let mut delta_r = 0.0f64;
    let mut delta_psi = 0.0f64;
    let mut qs = Vec::with_capacity(tasks.len());
    for (j, w) in tasks.iter().enumerate() {
        let exact_r = model.reward(w)?;
        delta_r = rewards[j].iter().zip(&exact_r).fold(delta_r, |m, (a, b)| m.max((a - b).abs()));
        let (_, pi) = value_iteration(model, &rewards[j], ViOptions::default())?;
        let sf = exact_successor_features(model, &SoftPolicy::deterministic(&pi, na))?;
        let approx: Vec<f64> = sf.psi.iter().zip(&psi_noise[j]).map(|(a, b)| a + b).collect();
        for r in 0..model.n_rows() {
            delta_psi = delta_psi.max(norm(&psi_noise[j][r * d..(r + 1) * d]));
        }
        qs.push(
            approx
                .chunks(d)
                .map(|p| p.iter().zip(w_new).map(|(a, b)| a * b).sum())
                .collect::<Vec<f64>>(),
        );
    }
    let phi_max = (0..model.n_rows()).map(|r| norm(&model.features[r * d..(r + 1) * d])).fold(0.0, f64::max);
    let w_distance = tasks
        .iter()
        .map(|w| norm(&w.iter().zip(w_new).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .fold(f64::INFINITY, f64::min);
    let target = model.reward(w_new)?;
    let (q_star, _) = value_iteration(model, &target, ViOptions::default())?;
    let pi = gpi_policy(&qs, na);
    let q_pi = policy_evaluation(model, &SoftPolicy::deterministic(&pi, na), &target)?;
    let rhs = bound_rhs(model.gamma, phi_max, w_distance, delta_r, norm(w_new), delta_psi);
    Ok((0..model.n_rows())
        .map(|r| BoundRecord {
            mdp_id,
            state: r / na,
            action: r % na,
            gap: q_star[r] - q_pi[r],
            rhs,
            delta_r,
            delta_psi,
            phi_max,
            w_distance,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaRecord {
    pub mdp_id: usize,
    pub gamma: f64,
    /// `‖Q^π − Ψ^π w‖_∞`.
    pub gap: f64,
    /// `δ_max / (1 − γ)`.
    pub bound: f64,
    pub delta_max: f64,
}

impl LemmaRecord {
    pub fn violated(&self) -> bool {
        self.gap > self.bound + 1e-8
    }
}

/// Value error of a linear reward model: `Q^π` of `reward` against `Ψ^π w`.
pub fn lemma_check(mdp_id: usize, model: &TabularModel, policy: &SoftPolicy, reward: &[f64], w: &[f64]) -> Result<LemmaRecord> {
    let linear = model.reward(w)?;
    let delta_max = reward.iter().zip(&linear).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let q = policy_evaluation(model, policy, reward)?;
    let psi_w = exact_successor_features(model, policy)?.q(w);
    let gap = q.iter().zip(&psi_w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(LemmaRecord {
        mdp_id,
        gamma: model.gamma,
        gap,
        bound: delta_max / (1.0 - model.gamma),
        delta_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub mdp_id: usize,
    pub visited: usize,
    pub agreement: f64,
}

/// Policy invariance of the ITD-recovered reward on one random MDP: value
/// iteration on `Φᵀw¹` against the demonstrator's greedy policy, over the
/// states its demonstrations visit.
pub fn policy_invariance(mdp_id: usize, cfg: &InvarianceConfig, seed: u64) -> Result<InvarianceRecord> {
    let stream = SeedStream::new(seed).fork(3);
    let mut rng = stream.rng_at(mdp_id as u64);
    let model = random_model(
        RandomMdpOptions {
            n_states: cfg.n_states,
            n_actions: N_ACTIONS,
            d: cfg.d,
            gamma: cfg.itd.gamma,
            branching: 1,
        },
        &mut rng,
    );
    let w: Vec<f64> = (0..cfg.d).map(|_| rng.gen_range(-cfg.weight_scale..cfg.weight_scale)).collect();
    let r = model.reward(&w)?;
    let (_, pi) = value_iteration(&model, &r, ViOptions::default())?;
    let demos = generate_demonstrations(
        &model,
        &[TaskVector { weights: w }],
        DemoOptions {
            temperature: cfg.temperature,
            episodes_per_agent: cfg.episodes,
            horizon: cfg.horizon,
        },
        derive(stream.seed, mdp_id as u64),
    )?;
    let visited: BTreeSet<usize> = demos.steps().map(|(o, _, _)| o.active()[0]).collect();
    let arch = Arch::tabular(cfg.n_states, N_ACTIONS, cfg.d, 1);
    let (p, _) = run_itd(&demos, arch, &cfg.itd, derive(stream.seed, 1000 + mdp_id as u64))?;
    let rhat = (0..model.n_rows())
        .map(|x| recover_reward(&p, 1, &model.observation(x / N_ACTIONS), x % N_ACTIONS))
        .collect::<Result<Vec<f64>>>()?;
    let (_, pihat) = value_iteration(&model, &rhat, ViOptions::default())?;
    let agree = visited.iter().filter(|&&s| pihat[s] == pi[s]).count();
    Ok(InvarianceRecord {
        mdp_id,
        visited: visited.len(),
        agreement: agree as f64 / visited.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TheoremReport {
    pub bounds: Vec<BoundRecord>,
    pub lemma: Vec<LemmaRecord>,
    pub invariance: Vec<InvarianceRecord>,
}

impl TheoremReport {
    pub fn bound_violations(&self) -> usize {
        self.bounds.iter().filter(|b| b.violated()).count()
    }

    pub fn lemma_violations(&self) -> usize {
        self.lemma.iter().filter(|l| l.violated()).count()
    }

    pub fn invariance_failures(&self, threshold: f64) -> usize {
        self.invariance.iter().filter(|r| r.agreement < threshold).count()
    }

    pub fn tables(&self) -> [(&'static str, Table); 3] {
        let mut b = Table::new(&["mdp_id", "state", "action", "gap", "rhs", "delta_r", "delta_psi", "phi_max", "w_distance", "violated"]);
        for r in &self.bounds {
            b.push(vec![
                r.mdp_id.to_string(),
                r.state.to_string(),
                r.action.to_string(),
                f(r.gap),
                f(r.rhs),
                f(r.delta_r),
                f(r.delta_psi),
                f(r.phi_max),
                f(r.w_distance),
                r.violated().to_string(),
            ]);
        }
        let mut l = Table::new(&["mdp_id", "gamma", "gap", "bound", "delta_max", "violated"]);
        for r in &self.lemma {
            l.push(vec![
                r.mdp_id.to_string(),
                f(r.gamma),
                f(r.gap),
                f(r.bound),
                f(r.delta_max),
                r.violated().to_string(),
            ]);
        }
        let mut i = Table::new(&["mdp_id", "visited", "agreement"]);
        for r in &self.invariance {
            i.push(vec![r.mdp_id.to_string(), r.visited.to_string(), f(r.agreement)]);
        }
        [("bounds.csv", b), ("lemma.csv", l), ("invariance.csv", i)]
    }
}

/// Random MDP `i` of the bound suite with its tasks and perturbations.
pub fn bound_instance(cfg: &TheoremConfig, i: usize, seed: u64) -> Result<Vec<BoundRecord>> {
    let mut rng = SeedStream::new(seed).fork(4).rng_at(i as u64);
    let n_states = rng.gen_range(5..=cfg.max_states.max(5));
    let d = rng.gen_range(1..=cfg.max_d.max(1));
    let model = random_model(
        RandomMdpOptions {
            n_states,
            n_actions: N_ACTIONS,
            d,
            gamma: 0.9,
            branching: rng.gen_range(1..=3),
        },
        &mut rng,
    );
    let mut unit = |n: usize, h: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-h..=h)).collect() };
    let tasks: Vec<Vec<f64>> = (0..cfg.n_policies).map(|_| unit(d, 1.0)).collect();
    let rows = model.n_rows();
    let rewards: Vec<Vec<f64>> = tasks
        .iter()
        .map(|w| {
            let r = model.reward(w)?;
            let noise = unit(rows, cfg.reward_noise);
            Ok(r.iter().zip(noise).map(|(a, b)| a + b).collect())
        })
        .collect::<Result<_>>()?;
    let psi_noise: Vec<Vec<f64>> = (0..cfg.n_policies).map(|_| unit(rows * d, cfg.sf_noise)).collect();
    let w_new = unit(d, 1.0);
    bound_check(i, &model, &tasks, &rewards, &psi_noise, &w_new)
}

/// Lemma records of MDP `i`: at the MDP's discount and at zero discount.
pub fn lemma_instance(cfg: &TheoremConfig, i: usize, seed: u64) -> Result<Vec<LemmaRecord>> {
    let mut rng = SeedStream::new(seed).fork(5).rng_at(i as u64);
    let n_states = rng.gen_range(5..=cfg.max_states.max(5));
    let d = rng.gen_range(1..=cfg.max_d.max(1));
    let mut model = random_model(
        RandomMdpOptions {
            n_states,
            n_actions: N_ACTIONS,
            d,
            gamma: 0.9,
            branching: rng.gen_range(1..=3),
        },
        &mut rng,
    );
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let reward: Vec<f64> = model
        .reward(&w)?
        .into_iter()
        .map(|r| r + rng.gen_range(-cfg.reward_noise..=cfg.reward_noise))
        .collect();
    let logits: Vec<f64> = (0..model.n_rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let policy = SoftPolicy::boltzmann(&logits, N_ACTIONS, 1.0);
    let mut out = vec![lemma_check(i, &model, &policy, &reward, &w)?];
    model.gamma = 0.0;
    out.push(lemma_check(i, &model, &policy, &reward, &w)?);
    Ok(out)
}

/// The bound and lemma over `cfg.n_mdps` random MDPs, and the policy
/// invariance over `cfg.invariance.n_mdps`.
pub fn check_theorems(cfg: &TheoremConfig, seed: u64) -> Result<TheoremReport> {
    if cfg.n_mdps == 0 {
        return Err(Error::InvalidArgument("n_mdps must be at least 1".into()));
    }
    let mut report = TheoremReport::default();
    for i in 0..cfg.n_mdps {
        report.bounds.extend(bound_instance(cfg, i, seed)?);
        report.lemma.extend(lemma_instance(cfg, i, seed)?);
    }
    for i in 0..cfg.invariance.n_mdps {
        report.invariance.push(policy_invariance(i, &cfg.invariance, seed)?);
    }
    Ok(report)
}

/// One line per task summarising a transfer table: mean ± stderr per shot.
pub fn transfer_summary(rows: &[TransferRow]) -> String {
    let mut out = String::new();
    let tasks: Vec<String> = rows.iter().fold(Vec::new(), |mut v, r| {
        if !v.contains(&r.task) {
            v.push(r.task.clone());
        }
        v
    });
    let shots: BTreeSet<usize> = rows.iter().map(|r| r.shots).collect();
    for t in tasks {
        let _ = write!(out, "{t}:");
        for &s in &shots {
            let xs: Vec<f64> = rows.iter().filter(|r| r.task == t && r.shots == s).map(|r| r.normalized_return).collect();
            let (m, se) = mean_stderr(&xs);
            let _ = write!(out, " {s}-shot {m:.3}±{se:.3}");
        }
        out.push('\n');
    }
    out
}

/// Unused features count towards `N_TRUE_FEATURES`; tasks parsed here never
/// set the step-cost weight.
const _: () = assert!(N_TRUE_FEATURES == 4);
