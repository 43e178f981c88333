//! Subgoal selection: an MLP action-value network over the extrinsic state,
//! trained with double Q-learning on subgoal-level transitions.

use std::io::Write;
use std::path::Path;

use m3t_nn::{Activation, Mlp, MlpCache, Param, Parameterized, Tensor2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hmdp::{ExtrinsicState, Subgoal, EXTRINSIC_DIM, NUM_SUBGOALS};
use crate::lob_data::TRANCHES;
use crate::rl::{self, AgentConfig, DqnAgent, QFunction, Transition};

#[derive(Clone, Debug)]
pub struct MetaQNet {
    pub mlp: Mlp,
}

impl MetaQNet {
    /// `hidden` widths between the extrinsic input and `actions` outputs.
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], actions: usize, rng: &mut R) -> Self {
        let mut dims = vec![EXTRINSIC_DIM];
        dims.extend_from_slice(hidden);
        dims.push(actions);
        Self {
            mlp: Mlp::new("meta", &dims, Activation::Relu, Activation::Identity, rng),
        }
    }

    fn batch(states: &[&ExtrinsicState]) -> Tensor2 {
        let data = states.iter().flat_map(|s| s.features).collect();
        Tensor2::from_vec(states.len(), EXTRINSIC_DIM, data).expect("sized")
    }
}

impl Parameterized for MetaQNet {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

impl QFunction for MetaQNet {
    type State = ExtrinsicState;
    type Cache = MlpCache;

    fn num_actions(&self) -> usize {
        self.mlp.output_dim()
    }

    fn forward(&self, states: &[&ExtrinsicState]) -> m3t_nn::Result<Tensor2> {
        self.mlp.forward(&Self::batch(states))
    }

    fn forward_cached(&self, states: &[&ExtrinsicState]) -> m3t_nn::Result<(Tensor2, MlpCache)> {
        let cache = self.mlp.forward_cached(&Self::batch(states))?;
        Ok((cache.output().clone(), cache))
    }

    fn backward(&mut self, cache: &MlpCache, grad: &Tensor2) -> m3t_nn::Result<()> {
        self.mlp.backward(cache, grad).map(|_| ())
    }
}

pub type MetaTransition = Transition<ExtrinsicState>;

pub struct MetaTrader {
    agent: DqnAgent<MetaQNet>,
}

impl MetaTrader {
    pub fn new(cfg: AgentConfig, hidden: &[usize], seed: u64) -> rl::Result<Self> {
        Self::with_actions(cfg, hidden, NUM_SUBGOALS, seed)
    }

    /// A reduced action set, used for small constructed problems.
    pub fn with_actions(cfg: AgentConfig, hidden: &[usize], actions: usize, seed: u64) -> rl::Result<Self> {
        let net = MetaQNet::new(hidden, actions, &mut crate::seeded_rng(seed, 1));
        Ok(Self {
            agent: DqnAgent::new(net, cfg, seed)?,
        })
    }

    pub fn agent(&self) -> &DqnAgent<MetaQNet> {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut DqnAgent<MetaQNet> {
        &mut self.agent
    }

    pub fn values(&self, s: &ExtrinsicState) -> rl::Result<Vec<f64>> {
        self.agent.q_values(s)
    }

    pub fn select_index(&mut self, s: &ExtrinsicState, eps: f64) -> rl::Result<usize> {
        self.agent.act(s, eps)
    }

    pub fn select_subgoal(&mut self, s: &ExtrinsicState, eps: f64) -> rl::Result<Subgoal> {
        let i = self.agent.act(s, eps)?;
        Ok(Subgoal::from_index(i).expect("nine-way head"))
    }

    pub fn observe(&mut self, t: MetaTransition) {
        self.agent.observe(t);
    }

    pub fn learn(&mut self) -> rl::Result<f64> {
        self.agent.learn()
    }

    pub fn save(&self, path: &Path) -> m3t_nn::Result<()> {
        m3t_nn::checkpoint::save(path, self.agent.online())
    }

    pub fn load(&mut self, path: &Path) -> rl::Result<()> {
        let tensors = m3t_nn::checkpoint::load(path)?;
        m3t_nn::checkpoint::assign(self.agent.online_mut(), &tensors)?;
        self.agent.sync_target()
    }
}

/// Per-tranche histogram of chosen subgoals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubgoalCounts {
    pub counts: [[u64; NUM_SUBGOALS]; TRANCHES],
}

impl SubgoalCounts {
    pub fn record(&mut self, tranche: usize, g: Subgoal) {
        self.counts[tranche][g.index()] += 1;
    }

    pub fn merge(&mut self, other: &SubgoalCounts) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Mean subgoal speed per tranche; `None` where nothing was chosen.
    pub fn speeds(&self) -> [Option<f64>; TRANCHES] {
        std::array::from_fn(|t| subgoal_speed(&self.counts[t]).ok())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tranche,subgoal_id,count")?;
        for (t, row) in self.counts.iter().enumerate() {
            for (i, c) in row.iter().enumerate() {
                writeln!(w, "{},{},{}", t + 1, i + 1, c)?;
            }
        }
        Ok(())
    }

    pub fn write_speed_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tranche,speed")?;
        for (t, s) in self.speeds().iter().enumerate() {
            match s {
                Some(v) => writeln!(w, "{},{v:.6}", t + 1)?,
                None => writeln!(w, "{},", t + 1)?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("no subgoals were counted")]
pub struct EmptyCounts;

/// Count-weighted mean of `size_fraction / (steps / 100)` over subgoals.
pub fn subgoal_speed(counts: &[u64; NUM_SUBGOALS]) -> Result<f64, EmptyCounts> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(EmptyCounts);
    }
    // weights first, so a single subgoal returns its own speed exactly
    Ok(Subgoal::all()
        .iter()
        .zip(counts)
        .map(|(g, &n)| n as f64 / total as f64 * (g.size_fraction() / (g.max_steps() as f64 / 100.0)))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::TargetKind;
    use proptest::prelude::*;
    use rand::Rng;

    fn state(v: f64) -> ExtrinsicState {
        ExtrinsicState {
            features: [v, 0.4, 0.1, 0.0, 0.0, 1.0],
        }
    }

    fn set_output_bias(m: &mut MetaTrader, bias: &[f64]) {
        let net = m.agent_mut().online_mut();
        let last = net.mlp.layers.last_mut().unwrap();
        last.weight.value.fill(0.0);
        last.bias.value = Tensor2::row_vector(bias);
    }

    #[test]
    fn greedy_follows_hand_set_head() {
        let mut m = MetaTrader::new(AgentConfig::default(), &[64, 64], 0).unwrap();
        let mut bias = [0.0; 9];
        bias[6] = 1.0;
        set_output_bias(&mut m, &bias);
        assert_eq!(m.select_subgoal(&state(0.3), 0.0).unwrap().id(), 7);
        let mut bias = [0.0; 9];
        bias[1] = 2.0;
        bias[7] = 2.0;
        set_output_bias(&mut m, &bias);
        assert_eq!(m.select_subgoal(&state(0.3), 0.0).unwrap().id(), 2);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut m = MetaTrader::new(AgentConfig::default(), &[64, 64], 5).unwrap();
        let mut counts = [0f64; 9];
        for _ in 0..10_000 {
            counts[m.select_subgoal(&state(0.3), 1.0).unwrap().index()] += 1.0;
        }
        let e = 10_000.0 / 9.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        assert!((chi2 - 8.0).abs() <= 3.0 * 16f64.sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn fixed_point_batch_is_a_no_op() {
        let cfg = AgentConfig {
            batch_size: 4,
            ..AgentConfig::default()
        };
        let mut m = MetaTrader::new(cfg, &[64, 64], 2).unwrap();
        let s = state(0.7);
        let q = m.values(&s).unwrap();
        let t = Transition {
            state: s,
            action: 3,
            reward: q[3],
            next_state: s,
            terminal: true,
            span: 100,
        };
        let before: Vec<Tensor2> = m.agent().online().params().iter().map(|p| p.value.clone()).collect();
        let batch = vec![&t; 4];
        let loss = m.agent_mut().learn_on(&batch).unwrap();
        assert_eq!(loss, 0.0);
        let after: Vec<Tensor2> = m.agent().online().params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn underfilled_learn_errors() {
        let mut m = MetaTrader::new(AgentConfig::default(), &[8], 0).unwrap();
        assert!(matches!(m.learn(), Err(rl::RlError::Underfilled { .. })));
    }

    #[test]
    fn pure_five_speed() {
        let mut c = [0u64; 9];
        c[4] = 7;
        assert_eq!(subgoal_speed(&c), Ok(0.16));
        assert_eq!(subgoal_speed(&[0; 9]), Err(EmptyCounts));
        let mut c = [0u64; 9];
        c[0] = 3;
        assert!((subgoal_speed(&c).unwrap() - 0.13 / 0.8).abs() < 1e-15);
        c[8] = 3;
        assert!((subgoal_speed(&c).unwrap() - (0.13 / 0.8 + 0.19 / 1.2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn counts_csv_layout() {
        let mut c = SubgoalCounts::default();
        c.record(0, Subgoal::new(5).unwrap());
        c.record(0, Subgoal::new(5).unwrap());
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 8 * 9);
        assert!(text.contains("\n1,5,2\n"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.ckpt");
        let a = MetaTrader::new(AgentConfig::default(), &[16], 1).unwrap();
        a.save(&p).unwrap();
        let mut b = MetaTrader::new(AgentConfig::default(), &[16], 2).unwrap();
        b.load(&p).unwrap();
        assert_eq!(a.values(&state(0.2)).unwrap(), b.values(&state(0.2)).unwrap());
        assert_eq!(b.values(&state(0.2)).unwrap(), {
            let t = b.agent().target().forward(&[&state(0.2)]).unwrap();
            t.row(0).to_vec()
        });
    }

    #[test]
    fn random_batches_give_finite_loss() {
        let cfg = AgentConfig {
            batch_size: 16,
            ..AgentConfig::default()
        };
        let mut m = MetaTrader::new(cfg, &[32, 32], 9).unwrap();
        let mut rng = crate::seeded_rng(9, 7);
        for _ in 0..64 {
            let s = ExtrinsicState {
                features: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
            };
            let n = ExtrinsicState {
                features: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
            };
            m.observe(Transition {
                state: s,
                action: rng.gen_range(0..9),
                reward: rng.gen_range(-99.0..5.0),
                next_state: n,
                terminal: rng.gen_bool(0.2),
                span: 100,
            });
        }
        for _ in 0..5 {
            let l = m.learn().unwrap();
            assert!(l.is_finite() && l >= 0.0);
        }
    }

    /// A single state with two terminal choices worth +10 and -10.
    fn two_armed_run(seed: u64) -> bool {
        let cfg = AgentConfig {
            kind: TargetKind::DoubleDqn,
            ..AgentConfig::default()
        };
        let mut m = MetaTrader::with_actions(cfg, &[64, 64], 2, seed).unwrap();
        let s = state(0.5);
        let reward = |a: usize| if a == 0 { 10.0 } else { -10.0 };
        let push = |m: &mut MetaTrader, a: usize| {
            m.observe(Transition {
                state: s,
                action: a,
                reward: reward(a),
                next_state: s,
                terminal: true,
                span: 1,
            })
        };
        for _ in 0..128 {
            let a = m.select_index(&s, 1.0).unwrap();
            push(&mut m, a);
        }
        let sched = rl::EpsilonSchedule::default();
        for ep in 0..500 {
            let a = m.select_index(&s, sched.value(ep)).unwrap();
            push(&mut m, a);
            m.learn().unwrap();
        }
        m.select_index(&s, 0.0).unwrap() == 0
    }

    #[test]
    fn two_armed_problem_is_solved() {
        let wins = (0..10).filter(|&s| two_armed_run(s)).count();
        assert!(wins >= 9, "{wins}/10 seeds");
    }

    proptest! {
        #[test]
        fn bias_shift_keeps_choice(shift in -50.0f64..50.0, v in 0.0f64..1.0) {
            let mut m = MetaTrader::new(AgentConfig::default(), &[16, 16], 4).unwrap();
            let s = state(v);
            let before = m.select_subgoal(&s, 0.0).unwrap();
            let last = m.agent_mut().online_mut().mlp.layers.last_mut().unwrap();
            last.bias.value = last.bias.value.map(|b| b + shift);
            prop_assert_eq!(m.select_subgoal(&s, 0.0).unwrap(), before);
        }
    }
}
