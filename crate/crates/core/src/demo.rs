//! Reward-free demonstrations and the ego replay buffer.
//!
//! A [`Trajectory`] only ever holds observations, actions and the id of the
//! agent that produced it; there is no reward field anywhere in a [`DemoSet`].

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Observation;

pub const DEMO_FORMAT: &str = "psiphi-demos";
pub const DEMO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    /// 1-based agent id.
    pub agent_id: usize,
    pub steps: Vec<(Observation, usize)>,
    /// Stopped by the horizon rather than a terminal state, so the last
    /// step's successor is unknown.
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DemoSet {
    pub n_agents: usize,
    pub trajectories: Vec<Trajectory>,
}

/// One `(s_t, a_t, s_{t+1}, a_{t+1}, k)` sample. The last recorded step of
/// a trajectory has no recorded successor: `bootstrap` is false and the next
/// fields repeat the step itself.
#[derive(Debug, Clone, Copy)]
pub struct DemoPair<'a> {
    pub obs: &'a Observation,
    pub action: usize,
    pub next_obs: &'a Observation,
    pub next_action: usize,
    pub agent_id: usize,
    pub bootstrap: bool,
}

impl DemoSet {
    pub fn new(n_agents: usize) -> Self {
        Self {
            n_agents,
            trajectories: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut shape = None;
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.agent_id == 0 || t.agent_id > self.n_agents {
                return Err(Error::UnknownAgentId(t.agent_id));
            }
            if t.steps.is_empty() {
                return Err(Error::InvalidArgument(format!("trajectory {i} is empty")));
            }
            for (o, _) in &t.steps {
                match shape {
                    None => shape = Some(o.shape),
                    Some(s) if s != o.shape => {
                        return Err(Error::shape(format!("{s:?}"), format!("{:?}", o.shape)))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Hook for demonstrations observed online while the ego agent acts.
    pub fn append(&mut self, trajectory: Trajectory) -> Result<()> {
        if trajectory.agent_id == 0 || trajectory.agent_id > self.n_agents {
            return Err(Error::UnknownAgentId(trajectory.agent_id));
        }
        self.trajectories.push(trajectory);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn obs_shape(&self) -> Option<[usize; 3]> {
        self.trajectories
            .iter()
            .find_map(|t| t.steps.first().map(|(o, _)| o.shape))
    }

    pub fn for_agent(&self, agent_id: usize) -> DemoSet {
        DemoSet {
            n_agents: self.n_agents,
            trajectories: self
                .trajectories
                .iter()
                .filter(|t| t.agent_id == agent_id)
                .cloned()
                .collect(),
        }
    }

    /// Per agent, the first `train_fraction` of its trajectories go to the
    /// first set and the rest to the second.
    pub fn split(&self, train_fraction: f64) -> (DemoSet, DemoSet) {
        let mut train = DemoSet::new(self.n_agents);
        let mut test = DemoSet::new(self.n_agents);
        for k in 1..=self.n_agents {
            let own: Vec<_> = self.trajectories.iter().filter(|t| t.agent_id == k).collect();
            let cut = (own.len() as f64 * train_fraction).round() as usize;
            for (i, t) in own.into_iter().enumerate() {
                if i < cut {
                    train.trajectories.push(t.clone());
                } else {
                    test.trajectories.push(t.clone());
                }
            }
        }
        (train, test)
    }

    /// Every `(s, a, k)` step across all trajectories.
    pub fn steps(&self) -> impl Iterator<Item = (&Observation, usize, usize)> {
        self.trajectories
            .iter()
            .flat_map(|t| t.steps.iter().map(move |(o, a)| (o, *a, t.agent_id)))
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = DemoHeader {
            format: DEMO_FORMAT.into(),
            version: DEMO_VERSION,
            n_agents: self.n_agents,
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for t in &self.trajectories {
            let shape = t.steps.first().map(|(o, _)| o.shape).unwrap_or([0, 0, 0]);
            let rec = TrajectoryRecord {
                agent_id: t.agent_id,
                obs_shape: shape,
                steps: t.steps.iter().map(|(o, a)| (pack_bits(&o.bits), *a)).collect(),
                truncated: t.truncated,
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        out.flush()?;
        Ok(self.trajectories.len())
    }

    pub fn load(path: &Path) -> Result<DemoSet> {
        let reader = BufReader::new(File::open(path)?);
        let malformed = |line: usize, reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = reader.lines().enumerate();
        let header: DemoHeader = match lines.next() {
            Some((_, l)) => serde_json::from_str(&l?).map_err(|e| malformed(1, e.to_string()))?,
            None => return Err(malformed(1, "missing header".into())),
        };
        if header.format != DEMO_FORMAT || header.version != DEMO_VERSION {
            return Err(malformed(
                1,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut set = DemoSet::new(header.n_agents);
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
            let n_bits = rec.obs_shape.iter().product::<usize>();
            let mut steps = Vec::with_capacity(rec.steps.len());
            for (hexbits, a) in rec.steps {
                let bits = unpack_bits(&hexbits, n_bits).map_err(|e| malformed(lineno, e))?;
                steps.push((
                    Observation {
                        shape: rec.obs_shape,
                        bits,
                    },
                    a,
                ));
            }
            if rec.agent_id == 0 || rec.agent_id > set.n_agents {
                return Err(malformed(lineno, format!("agent id {} out of range", rec.agent_id)));
            }
            set.trajectories.push(Trajectory {
                agent_id: rec.agent_id,
                steps,
                truncated: rec.truncated,
            });
        }
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct DemoHeader {
    format: String,
    version: u32,
    n_agents: usize,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    agent_id: usize,
    obs_shape: [usize; 3],
    steps: Vec<(String, usize)>,
    #[serde(default)]
    truncated: bool,
}

fn pack_bits(bits: &[bool]) -> String {
    let bytes: Vec<u8> = bits
        .chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i)))
        .collect();
    hex::encode(bytes)
}

fn unpack_bits(s: &str, n: usize) -> std::result::Result<Vec<bool>, String> {
    let bytes = hex::decode(s).map_err(|e| e.to_string())?;
    if bytes.len() != n.div_ceil(8) {
        return Err(format!("expected {} packed bytes, got {}", n.div_ceil(8), bytes.len()));
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// Uniform sampler over consecutive step pairs of a demonstration set.
#[derive(Debug, Clone)]
pub struct DemoSampler<'a> {
    demos: &'a DemoSet,
    candidates: Vec<(u32, u32)>,
    /// Indices into `candidates` excluding the last step of truncated
    /// trajectories, whose TD target is unknown.
    td_candidates: Vec<u32>,
}

impl<'a> DemoSampler<'a> {
    pub fn new(demos: &'a DemoSet) -> Self {
        let candidates: Vec<(u32, u32)> = demos
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| (i as u32, s as u32)))
            .collect();
        let td_candidates = candidates
            .iter()
            .enumerate()
            .filter(|(_, &(ti, s))| {
                let t = &demos.trajectories[ti as usize];
                !(t.truncated && s as usize + 1 == t.len())
            })
            .map(|(i, _)| i as u32)
            .collect();
        Self {
            demos,
            candidates,
            td_candidates,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.candidates.len()
    }

    /// Pairs usable as TD samples.
    pub fn n_td_pairs(&self) -> usize {
        self.td_candidates.len()
    }

    pub fn pair(&self, index: usize) -> DemoPair<'a> {
        let (ti, t) = self.candidates[index];
        let traj = &self.demos.trajectories[ti as usize];
        let t = t as usize;
        let n = (t + 1).min(traj.len() - 1);
        DemoPair {
            obs: &traj.steps[t].0,
            action: traj.steps[t].1,
            next_obs: &traj.steps[n].0,
            next_action: traj.steps[n].1,
            agent_id: traj.agent_id,
            bootstrap: t + 1 < traj.len(),
        }
    }

    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<DemoPair<'a>>> {
        if batch == 0 {
            return Ok(Vec::new());
        }
        if self.candidates.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok((0..batch)
            .map(|_| self.pair(rng.gen_range(0..self.candidates.len())))
            .collect())
    }

    /// Like `sample`, restricted to pairs with a known TD target.
    pub fn sample_td<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<DemoPair<'a>>> {
        if batch == 0 {
            return Ok(Vec::new());
        }
        if self.td_candidates.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok((0..batch)
            .map(|_| self.pair(self.td_candidates[rng.gen_range(0..self.td_candidates.len())] as usize))
            .collect())
    }
}

pub fn sample_demo_batch<'a, R: Rng>(
    demos: &'a DemoSet,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<DemoPair<'a>>> {
    DemoSampler::new(demos).sample(batch, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoTransition {
    pub s: Observation,
    pub a: usize,
    pub s_next: Observation,
    pub r_ego: f64,
    /// The next state is terminal: no bootstrapping past it.
    pub done: bool,
    /// The episode stopped here (terminal or time limit).
    pub episode_end: bool,
}

/// FIFO ring of ego transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<EgoTransition>,
    capacity: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            pushed: 0,
        }
    }

    pub fn push(&mut self, t: EgoTransition) -> Result<()> {
        if !t.r_ego.is_finite() {
            return Err(Error::InvalidArgument("ego reward must be finite".into()));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.pushed += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &EgoTransition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &EgoTransition> {
        self.items.iter()
    }

    /// The most recent `n` transitions, oldest first.
    pub fn recent(&self, n: usize) -> impl Iterator<Item = &EgoTransition> {
        self.items.iter().skip(self.items.len().saturating_sub(n))
    }

    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<&EgoTransition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }

    /// Windows of up to `n` consecutive transitions starting at a uniformly
    /// drawn index; a window stops after an episode end or at the newest item.
    pub fn sample_windows<R: Rng>(
        &self,
        batch: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<&EgoTransition>>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let n = n.max(1);
        Ok((0..batch)
            .map(|_| {
                let start = rng.gen_range(0..self.items.len());
                let mut w = Vec::with_capacity(n);
                for i in start..(start + n).min(self.items.len()) {
                    let t = &self.items[i];
                    w.push(t);
                    if t.episode_end {
                        break;
                    }
                }
                w
            })
            .collect())
    }

    pub fn stats(&self) -> BufferStats {
        let n = self.items.len();
        let sum: f64 = self.items.iter().map(|t| t.r_ego).sum();
        BufferStats {
            size: n,
            capacity: self.capacity,
            pushed: self.pushed,
            mean_reward: if n == 0 { 0.0 } else { sum / n as f64 },
            nonzero_rewards: self.items.iter().filter(|t| t.r_ego != 0.0).count(),
            terminals: self.items.iter().filter(|t| t.done).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferStats {
    pub size: usize,
    pub capacity: usize,
    pub pushed: u64,
    pub mean_reward: f64,
    pub nonzero_rewards: usize,
    pub terminals: usize,
}

impl BufferStats {
    pub const CSV_HEADER: &'static str = "size,capacity,pushed,mean_reward,nonzero_rewards,terminals";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.size, self.capacity, self.pushed, self.mean_reward, self.nonzero_rewards, self.terminals
        )
    }
}
