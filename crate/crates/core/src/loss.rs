//! Training losses and their analytic gradients.
//!
//! Every function returns the mean loss and a gradient vector congruent with
//! the parameter store. Targets are read from a separate frozen store and
//! never receive gradient.

use crate::demo::{DemoPair, EgoTransition};
use crate::error::{Error, Result};
use crate::grid::Observation;
use crate::nn::{argmax, contract, Head, ParamStore, Trace, EGO, ENSEMBLE};

pub const L1_DEAD_ZONE: f64 = 1e-8;

/// Which successor action the demo TD target bootstraps from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum NextAction {
    /// The action recorded in the same trajectory.
    #[default]
    Dataset,
    /// Expectation under the agent's current Boltzmann policy.
    Expected,
    /// Greedy in the agent's pessimistic target Q.
    Greedy,
}

/// An n-step slice of ego experience: `steps[0]` is the predicted pair and
/// `bootstrap` is the state after the last step unless it was terminal.
#[derive(Debug, Clone)]
pub struct EgoSample<'a> {
    pub steps: Vec<(&'a Observation, usize, f64)>,
    pub bootstrap: Option<&'a Observation>,
}

impl<'a> EgoSample<'a> {
    pub fn from_window(window: &[&'a EgoTransition]) -> Self {
        let last = window.last().expect("window is non-empty");
        Self {
            steps: window.iter().map(|t| (&t.s, t.a, t.r_ego)).collect(),
            bootstrap: (!last.done).then_some(&last.s_next),
        }
    }

    pub fn one(t: &'a EgoTransition) -> Self {
        Self::from_window(&[t])
    }
}

fn non_empty(n: usize, what: &'static str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    Ok(())
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(what))
    }
}

fn same_layout(p: &ParamStore, target: &ParamStore) -> Result<()> {
    if p.layout != target.layout {
        return Err(Error::shape(format!("{:?}", p.arch()), format!("{:?}", target.arch())));
    }
    Ok(())
}

/// Backpropagates output gradients of several heads that share one trace.
fn backprop(p: &ParamStore, g: &mut [f64], t: &Trace, heads: &[(Head, crate::nn::HeadTrace, Vec<f64>)]) {
    let mut dfeat = vec![0.0; p.feature_width()];
    for (head, ht, dout) in heads {
        p.head_backward(g, t, *head, ht, dout, &mut dfeat);
    }
    p.torso_backward(g, t, &dfeat);
}

fn log_softmax_at(logits: &[f64], a: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + z.ln();
    let probs = logits.iter().map(|l| (l - lse).exp()).collect();
    (logits[a] - lse, probs)
}

/// Behavioural-cloning Q loss: `−log softmax(Ψᵏ(s, ·)ᵀ wᵏ)[a]`, averaged over
/// the batch and the ensemble. Gradients reach the agent's SF heads, its
/// preference vector and the torso; never the cumulant head.
pub fn bcq_loss(p: &ParamStore, batch: &[DemoPair]) -> Result<(f64, Vec<f64>)> {
    non_empty(batch.len(), "bcq")?;
    let d = p.d();
    let c = 1.0 / (batch.len() * ENSEMBLE) as f64;
    let mut g = p.zero_grads();
    let mut total = 0.0;
    for pair in batch {
        let k = pair.agent_id;
        p.check_agent(k)?;
        let w = p.w(k)?.to_vec();
        let w_range = p.layout.range(crate::nn::Block::W(k));
        let t = p.trace(pair.obs)?;
        let mut heads = Vec::with_capacity(ENSEMBLE);
        for member in 0..ENSEMBLE {
            let head = Head::Psi { agent: k, member };
            let ht = p.head(&t, head);
            let psi = ht.out();
            let logits = contract(psi, &w);
            let (lp, probs) = log_softmax_at(&logits, pair.action);
            total -= lp;
            let mut dout = vec![0.0; psi.len()];
            for (a, pa) in probs.iter().enumerate() {
                let dl = c * (pa - if a == pair.action { 1.0 } else { 0.0 });
                for j in 0..d {
                    dout[a * d + j] = dl * w[j];
                    g[w_range.start + j] += dl * psi[a * d + j];
                }
            }
            heads.push((head, ht, dout));
        }
        backprop(p, &mut g, &t, &heads);
    }
    Ok((finite(total * c, "bcq")?, g))
}

/// `λ Σ_k ‖wᵏ‖₁` over the listed agents, with subgradient `λ sign(w)` outside
/// a dead zone of `|w| ≤ 1e−8`.
pub fn l1_loss(p: &ParamStore, agents: &[usize], lambda: f64) -> Result<(f64, Vec<f64>)> {
    let mut g = p.zero_grads();
    let mut total = 0.0;
    for &k in agents {
        p.check_agent(k)?;
        let r = p.layout.range(crate::nn::Block::W(k));
        for i in r {
            let w = p.values[i];
            total += lambda * w.abs();
            if w.abs() > L1_DEAD_ZONE {
                g[i] = lambda * w.signum();
            }
        }
    }
    Ok((finite(total, "l1")?, g))
}

/// Inverse TD loss: `‖Ψᵏ(s, a) − Φ(s, a) − γ Ψ̃ᵏ(s', a')‖²` averaged over the
/// batch and the ensemble. Pairs without bootstrap drop the target term.
/// Gradients reach Φ, the SF heads and the torso; never the preferences.
pub fn itd_loss(
    p: &ParamStore,
    target: &ParamStore,
    batch: &[DemoPair],
    gamma: f64,
    next: NextAction,
) -> Result<(f64, Vec<f64>)> {
    non_empty(batch.len(), "itd")?;
    same_layout(p, target)?;
    let d = p.d();
    let c = 1.0 / (batch.len() * ENSEMBLE) as f64;
    let mut g = p.zero_grads();
    let mut total = 0.0;
    for pair in batch {
        let k = pair.agent_id;
        p.check_agent(k)?;
        let a = pair.action;
        let boot: Option<[Vec<f64>; ENSEMBLE]> = if pair.bootstrap && gamma != 0.0 {
            let tt = target.trace(pair.next_obs)?;
            let psi_next = target.psi_traced(&tt, k);
            let w = p.w(k)?;
            Some(std::array::from_fn(|m| {
                next_sf(&psi_next, m, pair.next_action, w, d, next, |x| target.pessimistic_q(&tt, k, x))
            }))
        } else {
            None
        };
        let t = p.trace(pair.obs)?;
        let phi_t = p.head(&t, Head::Phi);
        let phi = &phi_t.out()[a * d..(a + 1) * d];
        let mut dphi = vec![0.0; phi_t.out().len()];
        let mut heads = Vec::with_capacity(ENSEMBLE + 1);
        for member in 0..ENSEMBLE {
            let head = Head::Psi { agent: k, member };
            let ht = p.head(&t, head);
            let mut dout = vec![0.0; ht.out().len()];
            for j in 0..d {
                let tgt = phi[j] + boot.as_ref().map_or(0.0, |b| gamma * b[member][j]);
                let delta = ht.out()[a * d + j] - tgt;
                total += delta * delta;
                dout[a * d + j] = 2.0 * c * delta;
                dphi[a * d + j] -= 2.0 * c * delta;
            }
            heads.push((head, ht, dout));
        }
        heads.push((Head::Phi, phi_t, dphi));
        backprop(p, &mut g, &t, &heads);
    }
    Ok((finite(total * c, "itd")?, g))
}

/// Target SF row for ensemble member `m` at the successor state.
fn next_sf(
    psi_next: &[Vec<f64>; ENSEMBLE],
    m: usize,
    dataset_action: usize,
    w: &[f64],
    d: usize,
    mode: NextAction,
    pessimistic: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let row = |a: usize| psi_next[m][a * d..(a + 1) * d].to_vec();
    match mode {
        NextAction::Dataset => row(dataset_action),
        NextAction::Greedy => row(argmax(&pessimistic(w))),
        NextAction::Expected => {
            let logits = contract(&psi_next[m], w);
            let (_, probs) = log_softmax_at(&logits, 0);
            let mut out = vec![0.0; d];
            for (a, pa) in probs.iter().enumerate() {
                for j in 0..d {
                    out[j] += pa * psi_next[m][a * d + j];
                }
            }
            out
        }
    }
}

/// Reward regression `(Φ(s, a)ᵀ w^ego − r)²` on single transitions; gradients
/// reach Φ, the torso and the ego preferences.
pub fn reward_loss(p: &ParamStore, batch: &[(&Observation, usize, f64)]) -> Result<(f64, Vec<f64>)> {
    non_empty(batch.len(), "reward")?;
    let d = p.d();
    let c = 1.0 / batch.len() as f64;
    let w = p.w(EGO)?.to_vec();
    let w_range = p.layout.range(crate::nn::Block::W(EGO));
    let mut g = p.zero_grads();
    let mut total = 0.0;
    for &(obs, a, r) in batch {
        let t = p.trace(obs)?;
        let ht = p.head(&t, Head::Phi);
        let phi = &ht.out()[a * d..(a + 1) * d];
        let e: f64 = phi.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() - r;
        total += e * e;
        let mut dout = vec![0.0; ht.out().len()];
        for j in 0..d {
            dout[a * d + j] = 2.0 * c * e * w[j];
            g[w_range.start + j] += 2.0 * c * e * phi[j];
        }
        backprop(p, &mut g, &t, &[(Head::Phi, ht, dout)]);
    }
    Ok((finite(total * c, "reward")?, g))
}

fn discounted_rewards(s: &EgoSample, gamma: f64) -> (f64, f64) {
    let mut ret = 0.0;
    let mut disc = 1.0;
    for &(_, _, r) in &s.steps {
        ret += disc * r;
        disc *= gamma;
    }
    (ret, disc)
}

/// Q-learning loss on the ego SF heads with `w^ego` held fixed:
/// `(Ψ_m(s, a)ᵀ w − G)²`, where `G` is the n-step return bootstrapped with
/// `max_a' min_m Ψ̃_m(s', a')ᵀ w`.
pub fn q_td_loss(p: &ParamStore, target: &ParamStore, batch: &[EgoSample], gamma: f64) -> Result<(f64, Vec<f64>)> {
    non_empty(batch.len(), "q_td")?;
    same_layout(p, target)?;
    let d = p.d();
    let c = 1.0 / (batch.len() * ENSEMBLE) as f64;
    let w = p.w(EGO)?.to_vec();
    let mut g = p.zero_grads();
    let mut total = 0.0;
    for s in batch {
        let (ret, disc) = discounted_rewards(s, gamma);
        let boot = match s.bootstrap {
            Some(o) if gamma != 0.0 => {
                let tt = target.trace(o)?;
                let q = target.pessimistic_q(&tt, EGO, &w);
                q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
            _ => 0.0,
        };
        let y = ret + disc * boot;
        let (obs, a, _) = s.steps[0];
        let t = p.trace(obs)?;
        let mut heads = Vec::with_capacity(ENSEMBLE);
        for member in 0..ENSEMBLE {
            let head = Head::Psi { agent: EGO, member };
            let ht = p.head(&t, head);
            let row = &ht.out()[a * d..(a + 1) * d];
            let e: f64 = row.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() - y;
            total += e * e;
            let mut dout = vec![0.0; ht.out().len()];
            for j in 0..d {
                dout[a * d + j] = 2.0 * c * e * w[j];
            }
            heads.push((head, ht, dout));
        }
        backprop(p, &mut g, &t, &heads);
    }
    Ok((finite(total * c, "q_td")?, g))
}

/// SF TD loss on the ego heads: `‖Ψ_m(s, a) − Σ γⁱ Φ̃(sᵢ, aᵢ) − γⁿ Ψ̃_m(s', a*)‖²`
/// with frozen cumulants and `a*` greedy in the pessimistic target Q.
pub fn sf_td_loss(p: &ParamStore, target: &ParamStore, batch: &[EgoSample], gamma: f64) -> Result<(f64, Vec<f64>)> {
    non_empty(batch.len(), "sf_td")?;
    same_layout(p, target)?;
    let d = p.d();
    let c = 1.0 / (batch.len() * ENSEMBLE) as f64;
    let w = p.w(EGO)?.to_vec();
    let mut g = p.zero_grads();
    let mut total = 0.0;
    for s in batch {
        let mut cum = vec![0.0; d];
        let mut disc = 1.0;
        for &(obs, a, _) in &s.steps {
            let tt = target.trace(obs)?;
            let phi = target.head(&tt, Head::Phi);
            for j in 0..d {
                cum[j] += disc * phi.out()[a * d + j];
            }
            disc *= gamma;
        }
        let boot: Option<[Vec<f64>; ENSEMBLE]> = match s.bootstrap {
            Some(o) if gamma != 0.0 => {
                let tt = target.trace(o)?;
                let star = argmax(&target.pessimistic_q(&tt, EGO, &w));
                let psi = target.psi_traced(&tt, EGO);
                Some(std::array::from_fn(|m| psi[m][star * d..(star + 1) * d].to_vec()))
            }
            _ => None,
        };
        let (obs, a, _) = s.steps[0];
        let t = p.trace(obs)?;
        let mut heads = Vec::with_capacity(ENSEMBLE);
        for member in 0..ENSEMBLE {
            let head = Head::Psi { agent: EGO, member };
            let ht = p.head(&t, head);
            let mut dout = vec![0.0; ht.out().len()];
            for j in 0..d {
                let tgt = cum[j] + boot.as_ref().map_or(0.0, |b| disc * b[member][j]);
                let delta = ht.out()[a * d + j] - tgt;
                total += delta * delta;
                dout[a * d + j] = 2.0 * c * delta;
            }
            heads.push((head, ht, dout));
        }
        backprop(p, &mut g, &t, &heads);
    }
    Ok((finite(total * c, "sf_td")?, g))
}

/// Central finite differences of `f` at every parameter.
pub fn finite_difference(p: &ParamStore, h: f64, f: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.len())
        .map(|i| {
            let x = q.values[i];
            q.values[i] = x + h;
            let up = f(&q);
            q.values[i] = x - h;
            let down = f(&q);
            q.values[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, Block};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;

    fn tiny(seed: u64) -> (ParamStore, ParamStore) {
        let arch = Arch {
            n_inputs: 4,
            n_actions: 2,
            d: 2,
            n_agents: 1,
            torso: vec![3],
            head_hidden: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::init(arch.clone(), &mut rng).unwrap();
        // Random biases and preferences keep ReLUs away from their kinks.
        for v in p.values.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let mut t = ParamStore::init(arch, &mut rng).unwrap();
        for v in t.values.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        assert!(p.len() <= 100, "{}", p.len());
        (p, t)
    }

    fn observations(seed: u64, n: usize) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Observation {
                shape: [1, 4, 1],
                bits: (0..4).map(|_| rng.gen_bool(0.5)).collect(),
            })
            .collect()
    }

    fn pairs(obs: &[Observation]) -> Vec<DemoPair<'_>> {
        (0..obs.len() - 1)
            .map(|i| DemoPair {
                obs: &obs[i],
                action: i % 2,
                next_obs: &obs[i + 1],
                next_action: (i / 2) % 2,
                agent_id: i % 2,
                bootstrap: i % 3 != 0,
            })
            .collect()
    }

    fn ego(obs: &[Observation]) -> Vec<EgoSample<'_>> {
        (0..obs.len() - 2)
            .map(|i| EgoSample {
                steps: (i..i + 1 + i % 2).map(|j| (&obs[j], j % 2, j as f64 * 0.3 - 0.5)).collect(),
                bootstrap: (i % 3 != 0).then(|| &obs[i + 2]),
            })
            .collect()
    }

    /// Finite differences over every parameter except the stop-gradient
    /// blocks in `frozen`, which the loss reads as constants.
    fn check(analytic: &[f64], f: impl Fn(&ParamStore) -> f64, p: &ParamStore, frozen: &[Block]) {
        let mut numeric = finite_difference(p, H, f);
        for &b in frozen {
            for i in p.layout.range(b) {
                numeric[i] = analytic[i];
            }
        }
        let err = max_relative_error(analytic, &numeric, FLOOR);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn zero_on(p: &ParamStore, g: &[f64], blocks: &[Block]) {
        for &b in blocks {
            assert!(g[p.layout.range(b)].iter().all(|&x| x == 0.0), "{b:?}");
        }
    }

    #[test]
    fn bcq_gradients_and_boundaries() {
        let (p, _) = tiny(1);
        let obs = observations(2, 9);
        let batch = pairs(&obs);
        let (_, g) = bcq_loss(&p, &batch).unwrap();
        check(&g, |q| bcq_loss(q, &batch).unwrap().0, &p, &[]);
        zero_on(&p, &g, &[Block::Phi]);
    }

    #[test]
    fn itd_gradients_and_boundaries() {
        let (p, t) = tiny(3);
        let obs = observations(4, 9);
        let batch = pairs(&obs);
        for mode in [NextAction::Dataset, NextAction::Expected, NextAction::Greedy] {
            let (_, g) = itd_loss(&p, &t, &batch, 0.9, mode).unwrap();
            let frozen: &[Block] = if mode == NextAction::Dataset { &[] } else { &[Block::W(0), Block::W(1)] };
            check(&g, |q| itd_loss(q, &t, &batch, 0.9, mode).unwrap().0, &p, frozen);
            zero_on(&p, &g, &[Block::W(0), Block::W(1)]);
        }
    }

    #[test]
    fn reward_gradients_and_boundaries() {
        let (p, _) = tiny(5);
        let obs = observations(6, 6);
        let batch: Vec<_> = obs.iter().enumerate().map(|(i, o)| (o, i % 2, i as f64 - 2.0)).collect();
        let (_, g) = reward_loss(&p, &batch).unwrap();
        check(&g, |q| reward_loss(q, &batch).unwrap().0, &p, &[]);
        zero_on(&p, &g, &[Block::Psi(0), Block::Psi(1), Block::W(1)]);
    }

    #[test]
    fn td_gradients_and_boundaries() {
        let (p, t) = tiny(7);
        let obs = observations(8, 8);
        let batch = ego(&obs);
        let (_, g) = q_td_loss(&p, &t, &batch, 0.9).unwrap();
        check(&g, |q| q_td_loss(q, &t, &batch, 0.9).unwrap().0, &p, &[Block::W(0)]);
        zero_on(&p, &g, &[Block::Phi, Block::Psi(1), Block::W(0), Block::W(1)]);
        let (_, g) = sf_td_loss(&p, &t, &batch, 0.9).unwrap();
        check(&g, |q| sf_td_loss(q, &t, &batch, 0.9).unwrap().0, &p, &[Block::W(0)]);
        zero_on(&p, &g, &[Block::Phi, Block::Psi(1), Block::W(0), Block::W(1)]);
    }

    #[test]
    fn l1_subgradient() {
        let (mut p, _) = tiny(9);
        p.set_w(1, &[0.5, -2.0]).unwrap();
        p.set_w(0, &[1e-9, 0.0]).unwrap();
        let (v, g) = l1_loss(&p, &[0, 1], 0.05).unwrap();
        assert!((v - 0.05 * (2.5 + 1e-9)).abs() < 1e-15);
        let r1 = p.layout.range(Block::W(1));
        assert_eq!(&g[r1], &[0.05, -0.05]);
        let r0 = p.layout.range(Block::W(0));
        assert_eq!(&g[r0], &[0.0, 0.0]);
        assert!(matches!(l1_loss(&p, &[2], 0.05), Err(Error::UnknownAgentId(2))));
    }

    #[test]
    fn bcq_is_ln_actions_at_zero_preferences() {
        let (mut p, _) = tiny(10);
        p.set_w(0, &[0.0, 0.0]).unwrap();
        p.set_w(1, &[0.0, 0.0]).unwrap();
        let obs = observations(11, 5);
        let (v, _) = bcq_loss(&p, &pairs(&obs)).unwrap();
        assert_eq!(v, 2f64.ln());
    }

    #[test]
    fn bcq_translation_invariance() {
        // A shift of every action's logit by c(s) through the head biases.
        let arch = Arch::tabular(3, 3, 1, 1);
        let mut p = ParamStore::zeros(arch).unwrap();
        let table = [0.3, -1.0, 2.0, 0.0, 0.5, 0.1, 1.5, 1.5, -0.2];
        for m in 0..2 {
            p.set_table(Head::Psi { agent: 1, member: m }, &table).unwrap();
        }
        p.set_w(1, &[1.7]).unwrap();
        let obs: Vec<_> = (0..3).map(|s| Observation::one_hot(3, s)).collect();
        let batch: Vec<_> = (0..3)
            .map(|s| DemoPair {
                obs: &obs[s],
                action: (s + 1) % 3,
                next_obs: &obs[s],
                next_action: 0,
                agent_id: 1,
                bootstrap: false,
            })
            .collect();
        let base = bcq_loss(&p, &batch).unwrap().0;
        let shift = [4.0, -7.5, 0.25];
        let shifted: Vec<f64> = table.iter().enumerate().map(|(i, v)| v + shift[i / 3]).collect();
        for m in 0..2 {
            p.set_table(Head::Psi { agent: 1, member: m }, &shifted).unwrap();
        }
        let moved = bcq_loss(&p, &batch).unwrap().0;
        assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn degenerate_fixed_points() {
        let arch = Arch::tabular(4, 2, 2, 1);
        let p = ParamStore::zeros(arch.clone()).unwrap();
        let obs: Vec<_> = (0..4).map(|s| Observation::one_hot(4, s)).collect();
        let batch = pairs(&obs);
        assert_eq!(itd_loss(&p, &p, &batch, 0.9, NextAction::Dataset).unwrap().0, 0.0);
        let e = ego(&obs);
        assert_eq!(sf_td_loss(&p, &p, &e, 0.9).unwrap().0, 0.0);

        // γ = 0 with Ψ tied to Φ.
        let mut p = ParamStore::zeros(arch).unwrap();
        let table: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        p.set_table(Head::Phi, &table).unwrap();
        for k in 0..2 {
            for m in 0..2 {
                p.set_table(Head::Psi { agent: k, member: m }, &table).unwrap();
            }
        }
        assert_eq!(itd_loss(&p, &p, &batch, 0.0, NextAction::Dataset).unwrap().0, 0.0);
        assert_eq!(sf_td_loss(&p, &p, &e, 0.0).unwrap().0, 0.0);
    }

    #[test]
    fn reward_loss_on_constant_cumulant() {
        // d = 1, Φ ≡ 1: optimum at mean(r) with residual var(r).
        let arch = Arch::tabular(2, 1, 1, 0);
        let mut p = ParamStore::zeros(arch).unwrap();
        p.set_table(Head::Phi, &[1.0, 1.0]).unwrap();
        let obs: Vec<_> = (0..2).map(|s| Observation::one_hot(2, s)).collect();
        let rs = [1.0, 2.0, 6.0, -1.0];
        let batch: Vec<_> = rs.iter().enumerate().map(|(i, &r)| (&obs[i % 2], 0, r)).collect();
        let mean = rs.iter().sum::<f64>() / 4.0;
        let var = rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 4.0;
        p.set_w(EGO, &[mean]).unwrap();
        let (v, g) = reward_loss(&p, &batch).unwrap();
        assert!((v - var).abs() < 1e-12);
        assert!(g[p.layout.range(Block::W(EGO))][0].abs() < 1e-12);
        p.set_w(EGO, &[0.0]).unwrap();
        let zero: Vec<_> = batch.iter().map(|&(o, a, _)| (o, a, 0.0)).collect();
        assert_eq!(reward_loss(&p, &zero).unwrap().0, 0.0);
    }

    #[test]
    fn q_td_fixed_point_and_gamma_zero() {
        let arch = Arch::tabular(1, 1, 1, 0);
        let mut p = ParamStore::zeros(arch).unwrap();
        for m in 0..2 {
            p.set_table(Head::Psi { agent: EGO, member: m }, &[10.0]).unwrap();
        }
        p.set_w(EGO, &[1.0]).unwrap();
        let o = Observation::one_hot(1, 0);
        let s = EgoSample {
            steps: vec![(&o, 0, 1.0)],
            bootstrap: Some(&o),
        };
        assert!(q_td_loss(&p, &p, &[s.clone()], 0.9).unwrap().0 < 1e-24);
        for m in 0..2 {
            p.set_table(Head::Psi { agent: EGO, member: m }, &[1.0]).unwrap();
        }
        assert_eq!(q_td_loss(&p, &p, &[s], 0.0).unwrap().0, 0.0);
    }

    #[test]
    fn errors() {
        let (p, t) = tiny(12);
        assert!(bcq_loss(&p, &[]).is_err());
        let obs = observations(13, 3);
        let mut batch = pairs(&obs);
        batch[0].agent_id = 5;
        assert!(matches!(bcq_loss(&p, &batch), Err(Error::UnknownAgentId(5))));
        assert!(matches!(
            itd_loss(&p, &t, &batch, 0.9, NextAction::Dataset),
            Err(Error::UnknownAgentId(5))
        ));
        let mut bad = p.clone();
        bad.set_w(1, &[f64::NAN, 0.0]).unwrap();
        let batch = pairs(&obs);
        assert!(matches!(bcq_loss(&bad, &batch), Err(Error::NonFiniteLoss(_))));
    }
}
