//! Small dense networks over a flat parameter vector with hand-written
//! reverse-mode gradients.
//!
//! One model holds a shared torso, a cumulant head Φ, and for every head id
//! (0 is the ego agent, 1..=K the demonstrators) an ensemble of two SF heads
//! Ψ plus a preference vector w. Head outputs are laid out `a * d + j`.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Observation;
use crate::rng::SeedStream;

pub const ENSEMBLE: usize = 2;
pub const EGO: usize = 0;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub n_inputs: usize,
    pub n_actions: usize,
    pub d: usize,
    /// Number of demonstrator heads K; the ego head is always present.
    pub n_agents: usize,
    pub torso: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Arch {
    /// Flattened observation → two ReLU layers of width 64 → linear heads.
    pub fn mlp(n_inputs: usize, n_actions: usize, d: usize, n_agents: usize) -> Self {
        Self {
            n_inputs,
            n_actions,
            d,
            n_agents,
            torso: vec![64, 64],
            head_hidden: Vec::new(),
        }
    }

    /// Linear heads directly on a one-hot state: every head is a lookup table.
    pub fn tabular(n_states: usize, n_actions: usize, d: usize, n_agents: usize) -> Self {
        Self {
            n_inputs: n_states,
            n_actions,
            d,
            n_agents,
            torso: Vec::new(),
            head_hidden: Vec::new(),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_agents + 1
    }

    fn validate(&self) -> Result<()> {
        if self.n_inputs == 0 || self.n_actions == 0 || self.d == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        if self.torso.iter().chain(&self.head_hidden).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Phi,
    Psi { agent: usize, member: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Torso,
    Phi,
    /// Both ensemble members of one agent's SF head.
    Psi(usize),
    W(usize),
}

/// Offsets of one affine layer; weights are row-major `[n_out][n_in]`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn end(&self) -> usize {
        self.b + self.n_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub arch: Arch,
    torso: Vec<Dense>,
    phi: Vec<Dense>,
    psi: Vec<Vec<Dense>>,
    w: Vec<usize>,
    len: usize,
}

impl Layout {
    pub fn new(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let mut len = 0;
        let mut stack = |n_in: usize, widths: &[usize]| {
            let mut layers = Vec::with_capacity(widths.len());
            let mut n_in = n_in;
            for &n_out in widths {
                let l = Dense {
                    w: len,
                    b: len + n_out * n_in,
                    n_in,
                    n_out,
                };
                len = l.end();
                layers.push(l);
                n_in = n_out;
            }
            layers
        };
        let torso = stack(arch.n_inputs, &arch.torso);
        let feat = arch.torso.last().copied().unwrap_or(arch.n_inputs);
        let mut head_widths = arch.head_hidden.clone();
        head_widths.push(arch.n_actions * arch.d);
        let phi = stack(feat, &head_widths);
        let psi = (0..arch.n_heads() * ENSEMBLE).map(|_| stack(feat, &head_widths)).collect();
        let mut w = Vec::with_capacity(arch.n_heads());
        for _ in 0..arch.n_heads() {
            w.push(len);
            len += arch.d;
        }
        Ok(Self {
            arch,
            torso,
            phi,
            psi,
            w,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn head_layers(&self, head: Head) -> &[Dense] {
        match head {
            Head::Phi => &self.phi,
            Head::Psi { agent, member } => &self.psi[agent * ENSEMBLE + member],
        }
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let span = |ls: &[Dense]| match (ls.first(), ls.last()) {
            (Some(a), Some(b)) => a.w..b.end(),
            _ => 0..0,
        };
        match block {
            Block::Torso => span(&self.torso),
            Block::Phi => span(&self.phi),
            Block::Psi(k) => {
                let a = span(&self.psi[k * ENSEMBLE]);
                let b = span(&self.psi[k * ENSEMBLE + ENSEMBLE - 1]);
                a.start..b.end
            }
            Block::W(k) => self.w[k]..self.w[k] + self.arch.d,
        }
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent > self.arch.n_agents {
            return Err(Error::UnknownAgentId(agent));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Input<'a> {
    Sparse(&'a [usize]),
    Dense(&'a [f64]),
}

fn affine(p: &[f64], l: &Dense, x: Input) -> Vec<f64> {
    let mut out = p[l.b..l.b + l.n_out].to_vec();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &p[l.w + o * l.n_in..l.w + (o + 1) * l.n_in];
        match x {
            Input::Sparse(idx) => {
                for &i in idx {
                    *y += row[i];
                }
            }
            Input::Dense(v) => {
                *y += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

fn affine_backward(p: &[f64], g: &mut [f64], l: &Dense, x: Input, dout: &[f64], mut din: Option<&mut [f64]>) {
    for (o, &dy) in dout.iter().enumerate() {
        if dy == 0.0 {
            continue;
        }
        g[l.b + o] += dy;
        let row = l.w + o * l.n_in;
        match x {
            Input::Sparse(idx) => {
                for &i in idx {
                    g[row + i] += dy;
                }
            }
            Input::Dense(v) => {
                for (gi, vi) in g[row..row + l.n_in].iter_mut().zip(v) {
                    *gi += dy * vi;
                }
            }
        }
        if let Some(din) = din.as_deref_mut() {
            for (di, wi) in din.iter_mut().zip(&p[row..row + l.n_in]) {
                *di += dy * wi;
            }
        }
    }
}

/// Post-activation output of every layer; hidden layers use ReLU.
fn mlp_forward(p: &[f64], layers: &[Dense], x: Input, relu_last: bool) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let input = if i == 0 { x } else { Input::Dense(&acts[i - 1]) };
        let mut y = affine(p, l, input);
        if relu_last || i + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(y);
    }
    acts
}

#[allow(clippy::too_many_arguments)]
fn mlp_backward(
    p: &[f64],
    g: &mut [f64],
    layers: &[Dense],
    x: Input,
    acts: &[Vec<f64>],
    dout: &[f64],
    relu_last: bool,
    din: Option<&mut [f64]>,
) {
    let mut delta = dout.to_vec();
    let mut din = din;
    for i in (0..layers.len()).rev() {
        if relu_last || i + 1 < layers.len() {
            for (d, a) in delta.iter_mut().zip(&acts[i]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        if i == 0 {
            affine_backward(p, g, &layers[0], x, &delta, din.take());
        } else {
            let mut next = vec![0.0; layers[i].n_in];
            affine_backward(p, g, &layers[i], Input::Dense(&acts[i - 1]), &delta, Some(&mut next));
            delta = next;
        }
    }
}

/// Cached torso pass for one observation.
#[derive(Debug, Clone)]
pub struct Trace {
    active: Vec<usize>,
    torso: Vec<Vec<f64>>,
}

/// Cached head pass; `out()` is the `n_actions × d` output.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    acts: Vec<Vec<f64>>,
}

impl HeadTrace {
    pub fn out(&self) -> &[f64] {
        self.acts.last().expect("heads have at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub phi: Vec<f64>,
    /// Indexed by head id, then ensemble member.
    pub psi: Vec<[Vec<f64>; ENSEMBLE]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(arch: Arch) -> Result<Self> {
        let layout = Layout::new(arch)?;
        let values = vec![0.0; layout.len()];
        Ok(Self { layout, values })
    }

    /// Weights uniform in ±1/√fan_in, biases and preferences zero.
    pub fn init<R: Rng>(arch: Arch, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let layers: Vec<Dense> = p
            .layout
            .torso
            .iter()
            .chain(&p.layout.phi)
            .chain(p.layout.psi.iter().flatten())
            .copied()
            .collect();
        for l in layers {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for v in &mut p.values[l.w..l.b] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> &Arch {
        &self.layout.arch
    }

    pub fn d(&self) -> usize {
        self.layout.arch.d
    }

    pub fn n_actions(&self) -> usize {
        self.layout.arch.n_actions
    }

    pub fn n_agents(&self) -> usize {
        self.layout.arch.n_agents
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.values[self.layout.range(b)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let r = self.layout.range(b);
        &mut self.values[r]
    }

    pub fn w(&self, agent: usize) -> Result<&[f64]> {
        self.layout.check_agent(agent)?;
        Ok(self.block(Block::W(agent)))
    }

    pub fn set_w(&mut self, agent: usize, w: &[f64]) -> Result<()> {
        self.layout.check_agent(agent)?;
        if w.len() != self.d() {
            return Err(Error::shape(self.d(), w.len()));
        }
        self.block_mut(Block::W(agent)).copy_from_slice(w);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_agent(&self, agent: usize) -> Result<()> {
        self.layout.check_agent(agent)
    }

    pub fn trace(&self, obs: &Observation) -> Result<Trace> {
        if obs.len() != self.layout.arch.n_inputs {
            return Err(Error::shape(self.layout.arch.n_inputs, obs.len()));
        }
        let active = obs.active();
        let torso = mlp_forward(&self.values, &self.layout.torso, Input::Sparse(&active), true);
        Ok(Trace { active, torso })
    }

    fn feature_input<'a>(&self, t: &'a Trace) -> Input<'a> {
        match t.torso.last() {
            Some(h) => Input::Dense(h),
            None => Input::Sparse(&t.active),
        }
    }

    pub fn head(&self, t: &Trace, head: Head) -> HeadTrace {
        let acts = mlp_forward(&self.values, self.layout.head_layers(head), self.feature_input(t), false);
        HeadTrace { acts }
    }

    /// Accumulates the head's parameter gradient for output gradient `dout`,
    /// and the gradient w.r.t. the torso output into `dfeat` when there is a torso.
    pub fn head_backward(&self, g: &mut [f64], t: &Trace, head: Head, h: &HeadTrace, dout: &[f64], dfeat: &mut [f64]) {
        let din = if t.torso.is_empty() { None } else { Some(dfeat) };
        mlp_backward(
            &self.values,
            g,
            self.layout.head_layers(head),
            self.feature_input(t),
            &h.acts,
            dout,
            false,
            din,
        );
    }

    /// Width of the torso output gradient buffer expected by `head_backward`.
    pub fn feature_width(&self) -> usize {
        self.layout.arch.torso.last().copied().unwrap_or(0)
    }

    pub fn torso_backward(&self, g: &mut [f64], t: &Trace, dfeat: &[f64]) {
        if t.torso.is_empty() || dfeat.iter().all(|&v| v == 0.0) {
            return;
        }
        mlp_backward(
            &self.values,
            g,
            &self.layout.torso,
            Input::Sparse(&t.active),
            &t.torso,
            dfeat,
            true,
            None,
        );
    }

    /// Loads a table with rows `s * n_actions + a` and `d` columns into a head
    /// of a tabular model (no torso, no hidden head layers).
    pub fn set_table(&mut self, head: Head, table: &[f64]) -> Result<()> {
        let a = self.layout.arch.clone();
        if !a.torso.is_empty() || !a.head_hidden.is_empty() {
            return Err(Error::InvalidArgument("set_table needs a tabular architecture".into()));
        }
        if let Head::Psi { agent, .. } = head {
            self.check_agent(agent)?;
        }
        let n_out = a.n_actions * a.d;
        if table.len() != a.n_inputs * n_out {
            return Err(Error::shape(a.n_inputs * n_out, table.len()));
        }
        let l = self.layout.head_layers(head)[0];
        for s in 0..a.n_inputs {
            for o in 0..n_out {
                self.values[l.w + o * l.n_in + s] = table[s * n_out + o];
            }
        }
        self.values[l.b..l.end()].iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    pub fn phi(&self, obs: &Observation) -> Result<Vec<f64>> {
        let t = self.trace(obs)?;
        Ok(self.head(&t, Head::Phi).out().to_vec())
    }

    pub fn psi(&self, obs: &Observation, agent: usize) -> Result<[Vec<f64>; ENSEMBLE]> {
        self.check_agent(agent)?;
        let t = self.trace(obs)?;
        Ok(self.psi_traced(&t, agent))
    }

    pub fn psi_traced(&self, t: &Trace, agent: usize) -> [Vec<f64>; ENSEMBLE] {
        std::array::from_fn(|member| self.head(t, Head::Psi { agent, member }).out().to_vec())
    }

    pub fn forward(&self, obs: &Observation) -> Result<Forward> {
        let t = self.trace(obs)?;
        Ok(Forward {
            phi: self.head(&t, Head::Phi).out().to_vec(),
            psi: (0..self.layout.arch.n_heads()).map(|k| self.psi_traced(&t, k)).collect(),
        })
    }

    /// `min_m Ψ_m(s, a)ᵀ w` for every action.
    pub fn pessimistic_q(&self, t: &Trace, agent: usize, w: &[f64]) -> Vec<f64> {
        let psi = self.psi_traced(t, agent);
        let qs: Vec<Vec<f64>> = psi.iter().map(|p| contract(p, w)).collect();
        min_over(&qs)
    }
}

/// `out[a] = Σ_j m[a * d + j] w[j]` for an `n × d` matrix.
pub fn contract(m: &[f64], w: &[f64]) -> Vec<f64> {
    m.chunks(w.len()).map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
}

/// Elementwise minimum over equally long vectors.
pub fn min_over(qs: &[Vec<f64>]) -> Vec<f64> {
    (0..qs[0].len())
        .map(|a| qs.iter().map(|q| q[a]).fold(f64::INFINITY, f64::min))
        .collect()
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Adaptive-moment optimizer restricted to a set of parameter ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub ranges: Vec<Range<usize>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize, ranges: Vec<Range<usize>>) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            ranges,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn for_blocks(lr: f64, layout: &Layout, blocks: &[Block]) -> Self {
        let ranges = blocks.iter().map(|&b| layout.range(b)).filter(|r| !r.is_empty()).collect();
        Self::new(lr, layout.len(), ranges)
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for r in &self.ranges {
            for i in r.clone() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSIPHICK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamStore,
    pub target: Option<ParamStore>,
    pub optimizers: Vec<(String, Adam)>,
    pub seeds: Vec<(String, SeedStream)>,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.u64(v.to_bits())
    }
    fn usizes(&mut self, v: &[usize]) -> Result<()> {
        self.u64(v.len() as u64)?;
        v.iter().try_for_each(|&x| self.u64(x as u64))
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.u64(v.len() as u64)?;
        v.iter().try_for_each(|&x| self.f64(x))
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (1 << 32) {
            return Err(Error::InvalidArgument(format!("implausible length {n} in checkpoint")));
        }
        Ok(n as usize)
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let a = self.params.arch();
        for v in [a.n_inputs, a.n_actions, a.d, a.n_agents] {
            w.u64(v as u64)?;
        }
        w.usizes(&a.torso)?;
        w.usizes(&a.head_hidden)?;
        w.u64(self.step)?;
        w.f64s(&self.params.values)?;
        match &self.target {
            Some(t) => {
                w.u64(1)?;
                w.f64s(&t.values)?;
            }
            None => w.u64(0)?,
        }
        w.u64(self.optimizers.len() as u64)?;
        for (name, opt) in &self.optimizers {
            w.str(name)?;
            for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                w.f64(v)?;
            }
            w.u64(opt.t)?;
            w.u64(opt.ranges.len() as u64)?;
            for r in &opt.ranges {
                w.u64(r.start as u64)?;
                w.u64(r.end as u64)?;
            }
            w.f64s(&opt.m)?;
            w.f64s(&opt.v)?;
        }
        w.u64(self.seeds.len() as u64)?;
        for (name, s) in &self.seeds {
            w.str(name)?;
            w.u64(s.seed)?;
            w.u64(s.counter)?;
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut r = Reader(&bytes[12..]);
        let arch = Arch {
            n_inputs: r.u64()? as usize,
            n_actions: r.u64()? as usize,
            d: r.u64()? as usize,
            n_agents: r.u64()? as usize,
            torso: r.usizes()?,
            head_hidden: r.usizes()?,
        };
        let layout = Layout::new(arch)?;
        let step = r.u64()?;
        let values = r.f64s()?;
        if values.len() != layout.len() {
            return Err(Error::shape(layout.len(), values.len()));
        }
        let target = match r.u64()? {
            0 => None,
            _ => {
                let tv = r.f64s()?;
                if tv.len() != layout.len() {
                    return Err(Error::shape(layout.len(), tv.len()));
                }
                Some(ParamStore {
                    layout: layout.clone(),
                    values: tv,
                })
            }
        };
        let n_opt = r.len()?;
        let mut optimizers = Vec::with_capacity(n_opt);
        for _ in 0..n_opt {
            let name = r.str()?;
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let t = r.u64()?;
            let n_ranges = r.len()?;
            let mut ranges = Vec::with_capacity(n_ranges);
            for _ in 0..n_ranges {
                let (a, b) = (r.u64()? as usize, r.u64()? as usize);
                if a > b || b > layout.len() {
                    return Err(bad("optimizer range out of bounds"));
                }
                ranges.push(a..b);
            }
            let m = r.f64s()?;
            let v = r.f64s()?;
            if m.len() != layout.len() || v.len() != layout.len() {
                return Err(Error::shape(layout.len(), m.len()));
            }
            optimizers.push((
                name,
                Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    t,
                    ranges,
                    m,
                    v,
                },
            ));
        }
        let n_seeds = r.len()?;
        let mut seeds = Vec::with_capacity(n_seeds);
        for _ in 0..n_seeds {
            let name = r.str()?;
            let seed = r.u64()?;
            let counter = r.u64()?;
            seeds.push((name, SeedStream { seed, counter }));
        }
        if !r.0.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            step,
            params: ParamStore { layout, values },
            target,
            optimizers,
            seeds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Arch {
        Arch {
            n_inputs: 6,
            n_actions: 3,
            d: 2,
            n_agents: 1,
            torso: vec![4],
            head_hidden: vec![],
        }
    }

    fn obs(bits: &[u8]) -> Observation {
        Observation {
            shape: [1, bits.len(), 1],
            bits: bits.iter().map(|&b| b == 1).collect(),
        }
    }

    #[test]
    fn layout_blocks_tile_the_vector() {
        let l = Layout::new(small_arch()).unwrap();
        let mut blocks = vec![Block::Torso, Block::Phi];
        for k in 0..2 {
            blocks.push(Block::Psi(k));
        }
        for k in 0..2 {
            blocks.push(Block::W(k));
        }
        let mut end = 0;
        for b in blocks {
            let r = l.range(b);
            assert_eq!(r.start, end, "{b:?}");
            end = r.end;
        }
        assert_eq!(end, l.len());
        // 6*4+4, (4*6+6) * (1 + 2*2), 2*2
        assert_eq!(l.len(), 28 + 30 * 5 + 4);
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = ParamStore::zeros(small_arch()).unwrap();
        let f = p.forward(&obs(&[1, 0, 1, 1, 0, 0])).unwrap();
        assert!(f.phi.iter().all(|&v| v == 0.0));
        assert!(f.psi.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParamStore::init(small_arch(), &mut rng).unwrap();
        let o = obs(&[0, 1, 1, 0, 0, 1]);
        assert_eq!(p.forward(&o).unwrap(), p.forward(&o.clone()).unwrap());
        assert!(matches!(p.forward(&obs(&[1, 0])), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(p.psi(&o, 2), Err(Error::UnknownAgentId(2))));
    }

    #[test]
    fn golden_forward_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ParamStore::init(small_arch(), &mut rng).unwrap();
        let f = p.forward(&obs(&[0, 1, 0, 1, 1, 0])).unwrap();
        let got: Vec<f64> = f.phi.iter().chain(&f.psi[1][1]).copied().collect();
        assert_eq!(got.len(), GOLDEN.len());
        for (g, e) in got.iter().zip(GOLDEN) {
            assert!((g - e).abs() < 1e-12, "{got:?}");
        }
    }

    /// Recorded from the first verified build.
    const GOLDEN: [f64; 12] = [
        -0.007970946792494153,
        0.2101648249392769,
        -0.07086003686831076,
        -0.20329065376504754,
        0.1215544052869826,
        -0.046276516468002425,
        0.05906181679492726,
        0.05719790033877645,
        -0.08966214469443963,
        -0.1360556671858249,
        0.18908272336723841,
        0.17200079386112885,
    ];

    #[test]
    fn pessimistic_q_is_below_each_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamStore::init(small_arch(), &mut rng).unwrap();
        let t = p.trace(&obs(&[1, 1, 0, 0, 1, 0])).unwrap();
        let w = [0.7, -1.3];
        let q = p.pessimistic_q(&t, 1, &w);
        for m in p.psi_traced(&t, 1) {
            for (a, b) in q.iter().zip(contract(&m, &w)) {
                assert!(*a <= b);
            }
        }
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let mut params = vec![0.5];
        let mut opt = Adam::new(0.01, 1, vec![0..1]);
        opt.step(&mut params, &[0.0]);
        assert_eq!(params, vec![0.5]);
        let g = 3.0;
        opt = Adam::new(0.01, 1, vec![0..1]);
        opt.step(&mut params, &[g]);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        assert!((params[0] - (0.5 - 0.01 * g / (g.abs() + 1e-8))).abs() < 1e-15);
        let (m, v) = opt.moments();
        let (m0, v0) = (m[0], v[0]);
        let before = params[0];
        opt.step(&mut params, &[0.0]);
        let (m, v) = opt.moments();
        assert!(m[0].abs() < m0.abs() && v[0] < v0);
        assert_ne!(params[0], before);
    }

    #[test]
    fn adam_respects_ranges() {
        let mut params = vec![1.0; 4];
        let mut opt = Adam::new(0.1, 4, vec![1..3]);
        opt.step(&mut params, &[1.0; 4]);
        assert_eq!(params[0], 1.0);
        assert_eq!(params[3], 1.0);
        assert!(params[1] < 1.0 && params[2] < 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ParamStore::init(small_arch(), &mut rng).unwrap();
        let mut opt = Adam::for_blocks(1e-3, &p.layout, &[Block::Phi, Block::W(0)]);
        let mut q = p.clone();
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64).sin()).collect();
        opt.step(&mut q.values, &g);
        let ck = Checkpoint {
            step: 17,
            params: q,
            target: Some(p),
            optimizers: vec![("reward".into(), opt)],
            seeds: vec![("actor".into(), SeedStream { seed: 9, counter: 4 })],
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
