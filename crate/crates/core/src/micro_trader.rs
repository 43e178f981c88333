//! Child-order execution: a subgoal-conditioned action-value network over
//! the order-book window, progress counters and the subgoal one-hot.

use std::path::Path;

use m3t_nn::{
    Activation, Linear, MhsaConfig, MhsaEncoder, MhsaEncoderCache, Mlp, MlpCache, Param, Parameterized, Tensor2,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hmdp::{Action, IntrinsicState, LOB_FEATURES, NUM_SUBGOALS, PROGRESS_DIM, WINDOW};
use crate::rl::{self, AgentConfig, DqnAgent, QFunction, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroNetConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    /// Width of the progress and subgoal branches.
    pub branch_dim: usize,
    pub positional: bool,
}

impl Default for MicroNetConfig {
    fn default() -> Self {
        Self {
            model_dim: 16,
            heads: 4,
            ff_dim: 32,
            layers: 3,
            branch_dim: 16,
            positional: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MicroQNet {
    pub encoder: MhsaEncoder,
    pub progress: Linear,
    pub subgoal: Mlp,
    pub fusion: Linear,
}

pub struct MicroCache {
    enc: MhsaEncoderCache,
    prog_in: Tensor2,
    prog_out: Tensor2,
    sub: MlpCache,
    fused_in: Tensor2,
}

impl MicroQNet {
    pub fn new<R: Rng + ?Sized>(cfg: &MicroNetConfig, rng: &mut R) -> m3t_nn::Result<Self> {
        let enc_cfg = MhsaConfig {
            input_dim: LOB_FEATURES,
            model_dim: cfg.model_dim,
            heads: cfg.heads,
            ff_dim: cfg.ff_dim,
            layers: cfg.layers,
            seq_len: WINDOW,
            positional: cfg.positional,
        };
        let h = cfg.branch_dim;
        Ok(Self {
            encoder: MhsaEncoder::new("micro.enc", enc_cfg, rng)?,
            progress: Linear::new("micro.prog", PROGRESS_DIM, h, rng),
            subgoal: Mlp::new("micro.goal", &[NUM_SUBGOALS, h, h, h], Activation::Relu, Activation::Relu, rng),
            fusion: Linear::new("micro.fuse", cfg.model_dim + 2 * h, Action::ALL.len(), rng),
        })
    }

    fn inputs(states: &[&IntrinsicState]) -> (Tensor2, Tensor2, Tensor2) {
        let b = states.len();
        let mut win = Vec::with_capacity(b * WINDOW * LOB_FEATURES);
        let mut prog = Vec::with_capacity(b * PROGRESS_DIM);
        let mut goal = Vec::with_capacity(b * NUM_SUBGOALS);
        for s in states {
            win.extend_from_slice(&s.window);
            prog.extend_from_slice(&s.progress);
            goal.extend_from_slice(&s.subgoal_onehot);
        }
        (
            Tensor2::from_vec(b * WINDOW, LOB_FEATURES, win).expect("window size"),
            Tensor2::from_vec(b, PROGRESS_DIM, prog).expect("sized"),
            Tensor2::from_vec(b, NUM_SUBGOALS, goal).expect("sized"),
        )
    }

    fn run(&self, states: &[&IntrinsicState]) -> m3t_nn::Result<(Tensor2, MicroCache)> {
        let b = states.len();
        let (win, prog_in, goal) = Self::inputs(states);
        let (encoded, enc) = self.encoder.forward(&win)?;
        let d = encoded.cols();
        let mut pooled = Tensor2::zeros(b, d);
        for i in 0..b {
            let dst = pooled.row_mut(i);
            for r in 0..WINDOW {
                for (a, v) in dst.iter_mut().zip(encoded.row(i * WINDOW + r)) {
                    *a += v / WINDOW as f64;
                }
            }
        }
        let prog_out = Activation::Relu.apply(&self.progress.forward(&prog_in)?);
        let sub = self.subgoal.forward_cached(&goal)?;
        let fused_in = Tensor2::hstack(&[&pooled, &prog_out, sub.output()])?;
        let q = self.fusion.forward(&fused_in)?;
        Ok((
            q,
            MicroCache {
                enc,
                prog_in,
                prog_out,
                sub,
                fused_in,
            },
        ))
    }
}

impl Parameterized for MicroQNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.progress.params());
        v.extend(self.subgoal.params());
        v.extend(self.fusion.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.progress.params_mut());
        v.extend(self.subgoal.params_mut());
        v.extend(self.fusion.params_mut());
        v
    }
}

impl QFunction for MicroQNet {
    type State = IntrinsicState;
    type Cache = MicroCache;

    fn num_actions(&self) -> usize {
        Action::ALL.len()
    }

    fn forward(&self, states: &[&IntrinsicState]) -> m3t_nn::Result<Tensor2> {
        Ok(self.run(states)?.0)
    }

    fn forward_cached(&self, states: &[&IntrinsicState]) -> m3t_nn::Result<(Tensor2, MicroCache)> {
        self.run(states)
    }

    fn backward(&mut self, cache: &MicroCache, grad: &Tensor2) -> m3t_nn::Result<()> {
        let g = self.fusion.backward(&cache.fused_in, grad)?;
        let d = self.encoder.config().model_dim;
        let h = cache.prog_out.cols();
        let b = g.rows();

        let mut g_enc = Tensor2::zeros(b * WINDOW, d);
        for i in 0..b {
            let src = &g.row(i)[..d];
            for r in 0..WINDOW {
                for (a, v) in g_enc.row_mut(i * WINDOW + r).iter_mut().zip(src) {
                    *a = v / WINDOW as f64;
                }
            }
        }
        self.encoder.backward(&cache.enc, &g_enc)?;

        let g_prog = Activation::Relu.backward(&cache.prog_out, &g.slice_cols(d, d + h));
        self.progress.backward(&cache.prog_in, &g_prog)?;
        self.subgoal.backward(&cache.sub, &g.slice_cols(d + h, d + 2 * h))?;
        Ok(())
    }
}

pub type MicroTransition = Transition<IntrinsicState>;

/// Also used, with a zeroed subgoal one-hot, as the flat single-level agent.
pub struct MicroTrader {
    agent: DqnAgent<MicroQNet>,
}

impl MicroTrader {
    pub fn new(cfg: AgentConfig, net: &MicroNetConfig, seed: u64) -> rl::Result<Self> {
        let q = MicroQNet::new(net, &mut crate::seeded_rng(seed, 2))?;
        Ok(Self {
            agent: DqnAgent::new(q, cfg, seed)?,
        })
    }

    pub fn agent(&self) -> &DqnAgent<MicroQNet> {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut DqnAgent<MicroQNet> {
        &mut self.agent
    }

    pub fn values(&self, s: &IntrinsicState) -> rl::Result<Vec<f64>> {
        self.agent.q_values(s)
    }

    pub fn select_action(&mut self, s: &IntrinsicState, eps: f64) -> rl::Result<Action> {
        let i = self.agent.act(s, eps)?;
        Ok(Action::from_id(i).expect("three-way head"))
    }

    pub fn observe(&mut self, t: MicroTransition) {
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

/// Drops the subgoal conditioning.
pub fn without_subgoal(mut s: IntrinsicState) -> IntrinsicState {
    s.subgoal_onehot = [0.0; NUM_SUBGOALS];
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmdp::{EnvConfig, HmdpEnv, Subgoal};
    use crate::lob_data::{fixtures, generate_synthetic_day, SynthParams};
    use crate::rl::TargetKind;
    use m3t_nn::gradcheck::{numeric_param_grads, relative_error, weighted_sum};

    fn random_state(rng: &mut impl Rng, g: Option<Subgoal>) -> IntrinsicState {
        IntrinsicState {
            window: (0..WINDOW * LOB_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            subgoal_onehot: g.map(|g| g.one_hot()).unwrap_or([0.0; NUM_SUBGOALS]),
            progress: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        }
    }

    fn small() -> MicroNetConfig {
        MicroNetConfig {
            model_dim: 8,
            heads: 4,
            ff_dim: 8,
            branch_dim: 4,
            ..MicroNetConfig::default()
        }
    }

    #[test]
    fn fused_gradient_matches_finite_differences() {
        for seed in 0..2 {
            let mut rng = crate::seeded_rng(seed, 9);
            let mut net = MicroQNet::new(&small(), &mut rng).unwrap();
            let goals = Subgoal::all();
            let states: Vec<IntrinsicState> = (0..2).map(|i| random_state(&mut rng, Some(goals[i * 4]))).collect();
            let refs: Vec<&IntrinsicState> = states.iter().collect();
            let w = Tensor2::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            net.zero_grad();
            let (_, cache) = net.forward_cached(&refs).unwrap();
            net.backward(&cache, &w).unwrap();
            let analytic: Vec<Tensor2> = net.params().iter().map(|p| p.grad.clone()).collect();
            let numeric = numeric_param_grads(&mut net, 1e-5, |m| weighted_sum(&m.forward(&refs).unwrap(), &w));
            for (a, n) in analytic.iter().zip(&numeric) {
                let e = relative_error(a, n);
                assert!(e <= 1e-4, "seed {seed}: relative error {e}");
            }
        }
    }

    #[test]
    fn zero_padded_window_is_finite() {
        let mut net = MicroQNet::new(&MicroNetConfig::default(), &mut crate::seeded_rng(1, 0)).unwrap();
        let s = IntrinsicState {
            window: vec![0.0; WINDOW * LOB_FEATURES],
            subgoal_onehot: Subgoal::new(5).unwrap().one_hot(),
            progress: [0.0, 0.0],
        };
        let (q, cache) = net.forward_cached(&[&s]).unwrap();
        assert!(q.is_finite());
        net.zero_grad();
        net.backward(&cache, &Tensor2::filled(1, 3, 1.0)).unwrap();
        assert!(net.params().iter().all(|p| p.grad.is_finite()));
    }

    #[test]
    fn exploration_is_uniform_and_greedy_follows_head() {
        let mut m = MicroTrader::new(AgentConfig::default(), &small(), 3).unwrap();
        let mut rng = crate::seeded_rng(3, 1);
        let s = random_state(&mut rng, Subgoal::new(2).ok());
        let mut counts = [0f64; 3];
        for _ in 0..10_000 {
            counts[m.select_action(&s, 1.0).unwrap().id()] += 1.0;
        }
        let e = 10_000.0 / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        assert!((chi2 - 2.0).abs() <= 3.0 * 2.0, "chi2 {chi2}");

        let fusion = &mut m.agent_mut().online_mut().fusion;
        fusion.weight.value.fill(0.0);
        fusion.bias.value = Tensor2::row_vector(&[0.0, 0.5, 1.0]);
        assert_eq!(m.select_action(&s, 0.0).unwrap(), Action::Wait);
    }

    #[test]
    fn values_depend_on_subgoal() {
        let net = MicroQNet::new(&MicroNetConfig::default(), &mut crate::seeded_rng(4, 0)).unwrap();
        let mut rng = crate::seeded_rng(4, 1);
        let a = random_state(&mut rng, Subgoal::new(1).ok());
        let mut b = a.clone();
        b.subgoal_onehot = Subgoal::new(9).unwrap().one_hot();
        let qa = net.forward(&[&a]).unwrap();
        let qb = net.forward(&[&b]).unwrap();
        assert_ne!(qa, qb);
    }

    #[test]
    fn terminal_batch_targets_are_rewards() {
        let cfg = AgentConfig {
            batch_size: 3,
            ..AgentConfig::default()
        };
        let m = MicroTrader::new(cfg, &small(), 0).unwrap();
        let mut rng = crate::seeded_rng(0, 1);
        let ts: Vec<MicroTransition> = (0..3)
            .map(|i| Transition {
                state: random_state(&mut rng, None),
                action: i,
                reward: i as f64 - 0.25,
                next_state: random_state(&mut rng, None),
                terminal: true,
                span: 1,
            })
            .collect();
        let refs: Vec<&MicroTransition> = ts.iter().collect();
        assert_eq!(m.agent().targets_for(&refs).unwrap(), vec![-0.25, 0.75, 1.75]);
    }

    #[test]
    fn flat_and_hierarchical_share_architecture() {
        let a = MicroTrader::new(AgentConfig::default(), &MicroNetConfig::default(), 11).unwrap();
        let b = MicroTrader::new(
            AgentConfig {
                kind: TargetKind::Dqn,
                ..AgentConfig::default()
            },
            &MicroNetConfig::default(),
            11,
        )
        .unwrap();
        let mut rng = crate::seeded_rng(11, 5);
        for _ in 0..5 {
            let s = without_subgoal(random_state(&mut rng, Subgoal::new(5).ok()));
            assert_eq!(a.values(&s).unwrap(), b.values(&s).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("micro.ckpt");
        let a = MicroTrader::new(AgentConfig::default(), &small(), 1).unwrap();
        a.save(&p).unwrap();
        let mut b = MicroTrader::new(AgentConfig::default(), &small(), 2).unwrap();
        b.load(&p).unwrap();
        let s = random_state(&mut crate::seeded_rng(0, 0), None);
        assert_eq!(a.values(&s).unwrap(), b.values(&s).unwrap());
    }

    /// Distinct real order-book windows from the start of a subgoal.
    fn book_states(n: usize) -> Vec<IntrinsicState> {
        let day = generate_synthetic_day(0, 17, &SynthParams::default()).unwrap();
        let mut env = HmdpEnv::new(&day, EnvConfig::default()).unwrap();
        env.begin_tranche(0, 10_000).unwrap();
        let mut out = vec![env.begin_subgoal(Subgoal::new(9).unwrap()).unwrap()];
        while out.len() < n {
            out.push(env.micro_step(Action::Wait).unwrap().state);
        }
        out
    }

    /// One-step episodes: crossing at the bid pays 1, anything else 0.
    fn toy_run(seed: u64, states: &[IntrinsicState]) -> bool {
        let cfg = AgentConfig::default();
        let mut m = MicroTrader::new(cfg, &MicroNetConfig::default(), seed).unwrap();
        let mut rng = crate::seeded_rng(seed, 3);
        let sched = rl::EpsilonSchedule::default();
        let target = Action::Cross;
        for ep in 0..300 {
            let s = states[rng.gen_range(0..states.len())].clone();
            let a = m.select_action(&s, sched.value(ep)).unwrap();
            m.observe(Transition {
                next_state: s.clone(),
                state: s,
                action: a.id(),
                reward: if a == target { 1.0 } else { 0.0 },
                terminal: true,
                span: 1,
            });
            if m.agent().can_learn() {
                m.learn().unwrap();
            }
        }
        states.iter().all(|s| m.select_action(s, 0.0).unwrap() == target)
    }

    #[test]
    fn toy_book_converges_to_crossing() {
        let states = book_states(8);
        let wins = (0..10).filter(|&s| toy_run(s, &states)).count();
        assert!(wins >= 9, "{wins}/10 seeds");
    }

    #[test]
    fn flat_fixture_states_are_finite() {
        let day = fixtures::flat_day(0, 1000, 1001, 500, &[]);
        let mut env = HmdpEnv::new(&day, EnvConfig::default()).unwrap();
        env.begin_tranche(0, 1000).unwrap();
        let s = env.begin_subgoal(Subgoal::new(1).unwrap()).unwrap();
        let m = MicroTrader::new(AgentConfig::default(), &MicroNetConfig::default(), 0).unwrap();
        assert!(m.values(&s).unwrap().iter().all(|v| v.is_finite()));
    }
}
