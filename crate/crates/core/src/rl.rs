//! Experience replay, exploration schedule and (double) Q-learning targets,
//! plus a generic online/target-network learner shared by both trader levels.

use m3t_nn::{mse, Adam, NnError, Parameterized, Tensor2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("replay holds {size} transitions, batch needs {batch}")]
    Underfilled { size: usize, batch: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, RlError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition<S> {
    pub state: S,
    pub action: usize,
    /// Reward accumulated over the transition's span.
    pub reward: f64,
    pub next_state: S,
    pub terminal: bool,
    /// Environment steps covered; 1 for single-step transitions.
    pub span: usize,
}

/// Fixed-capacity ring buffer with uniform sampling with replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    head: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.len() < batch || batch == 0 {
            return Err(RlError::Underfilled {
                size: self.items.len(),
                batch,
            });
        }
        Ok((0..batch).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&T>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// `ε = max(ε_min, ε₀ · decay^⌊episode / every⌋)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub decay: f64,
    pub every: usize,
    pub min: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            decay: 0.99,
            every: 5,
            min: 0.05,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, episode: usize) -> f64 {
        let k = (episode / self.every.max(1)).min(i32::MAX as usize) as i32;
        (self.initial * self.decay.powi(k)).clamp(self.min, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// Bootstrap with the target network's own maximum.
    Dqn,
    /// Select with the online network, evaluate with the target network.
    DoubleDqn,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniform action with probability `eps`, otherwise the greedy one.
pub fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64], eps: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < eps {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// One-step bootstrapped targets. `next_online` is only consulted for
/// [`TargetKind::DoubleDqn`] action selection.
pub fn td_targets(
    rewards: &[f64],
    terminals: &[bool],
    next_online: &Tensor2,
    next_target: &Tensor2,
    gamma: f64,
    kind: TargetKind,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if terminals.len() != n || next_target.rows() != n {
        return Err(RlError::ShapeMismatch(format!(
            "{n} rewards, {} terminal flags, {} target rows",
            terminals.len(),
            next_target.rows()
        )));
    }
    if kind == TargetKind::DoubleDqn && next_online.shape() != next_target.shape() {
        return Err(RlError::ShapeMismatch(format!(
            "online {:?} vs target {:?}",
            next_online.shape(),
            next_target.shape()
        )));
    }
    Ok((0..n)
        .map(|i| {
            if terminals[i] {
                return rewards[i];
            }
            let bootstrap = match kind {
                TargetKind::Dqn => next_target.row(i)[argmax(next_target.row(i))],
                TargetKind::DoubleDqn => next_target.row(i)[argmax(next_online.row(i))],
            };
            rewards[i] + gamma * bootstrap
        })
        .collect())
}

/// Fires on every `every`-th tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnSchedule {
    pub every: usize,
    count: usize,
}

impl LearnSchedule {
    pub fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            count: 0,
        }
    }

    pub fn tick(&mut self) -> bool {
        self.count += 1;
        if self.count >= self.every {
            self.count = 0;
            true
        } else {
            false
        }
    }
}

/// A batched action-value network with a hand-written backward pass.
pub trait QFunction: Clone + Parameterized {
    type State: Clone;
    type Cache;

    fn num_actions(&self) -> usize;
    fn forward(&self, states: &[&Self::State]) -> m3t_nn::Result<Tensor2>;
    fn forward_cached(&self, states: &[&Self::State]) -> m3t_nn::Result<(Tensor2, Self::Cache)>;
    /// Accumulates parameter gradients for `d loss / d Q`.
    fn backward(&mut self, cache: &Self::Cache, grad: &Tensor2) -> m3t_nn::Result<()>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Gradient updates between hard target-network copies.
    pub target_sync: u64,
    pub kind: TargetKind,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 5e-5,
            batch_size: 128,
            replay_capacity: 10_000,
            target_sync: 200,
            kind: TargetKind::DoubleDqn,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RlError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.replay_capacity < self.batch_size || self.target_sync == 0 {
            return Err(RlError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Online and target networks, their replay memory and optimizer.
#[derive(Clone)]
pub struct DqnAgent<Q: QFunction> {
    online: Q,
    target: Q,
    opt: Adam,
    replay: ReplayBuffer<Transition<Q::State>>,
    cfg: AgentConfig,
    updates: u64,
    rng: ChaCha8Rng,
}

impl<Q: QFunction> DqnAgent<Q> {
    pub fn new(q: Q, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            target: q.clone(),
            online: q,
            opt: Adam::new(cfg.lr),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            cfg,
            updates: 0,
            rng: crate::seeded_rng(seed, 0),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn online(&self) -> &Q {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut Q {
        &mut self.online
    }

    pub fn target(&self) -> &Q {
        &self.target
    }

    pub fn target_mut(&mut self) -> &mut Q {
        &mut self.target
    }

    pub fn replay(&self) -> &ReplayBuffer<Transition<Q::State>> {
        &self.replay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn q_values(&self, state: &Q::State) -> Result<Vec<f64>> {
        Ok(self.online.forward(&[state])?.row(0).to_vec())
    }

    pub fn greedy(&self, state: &Q::State) -> Result<usize> {
        Ok(argmax(&self.q_values(state)?))
    }

    pub fn act(&mut self, state: &Q::State, eps: f64) -> Result<usize> {
        if eps >= 1.0 {
            let n = self.online.num_actions();
            let _ = self.rng.gen::<f64>();
            return Ok(self.rng.gen_range(0..n));
        }
        let q = self.q_values(state)?;
        Ok(epsilon_greedy(&q, eps, &mut self.rng))
    }

    pub fn observe(&mut self, t: Transition<Q::State>) {
        self.replay.push(t);
    }

    pub fn can_learn(&self) -> bool {
        self.replay.len() >= self.cfg.batch_size
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.online)?;
        Ok(())
    }

    pub fn targets_for(&self, batch: &[&Transition<Q::State>]) -> Result<Vec<f64>> {
        if batch.iter().all(|t| t.terminal) {
            return Ok(batch.iter().map(|t| t.reward).collect());
        }
        let next: Vec<&Q::State> = batch.iter().map(|t| &t.next_state).collect();
        let next_target = self.target.forward(&next)?;
        let next_online = match self.cfg.kind {
            TargetKind::DoubleDqn => self.online.forward(&next)?,
            TargetKind::Dqn => Tensor2::zeros(0, 0),
        };
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let terminals: Vec<bool> = batch.iter().map(|t| t.terminal).collect();
        td_targets(&rewards, &terminals, &next_online, &next_target, self.cfg.gamma, self.cfg.kind)
    }

    /// One optimizer step on a replay sample; returns the batch loss.
    pub fn learn(&mut self) -> Result<f64> {
        let idx = self.replay.sample_indices(self.cfg.batch_size, &mut self.rng)?;
        let items: Vec<&Transition<Q::State>> = idx.iter().map(|&i| &self.replay.items[i]).collect();
        let batch: Vec<Transition<Q::State>> = items.into_iter().cloned().collect();
        let refs: Vec<&Transition<Q::State>> = batch.iter().collect();
        self.learn_on(&refs)
    }

    /// One optimizer step on an explicit batch: mean squared TD error over
    /// the taken actions.
    pub fn learn_on(&mut self, batch: &[&Transition<Q::State>]) -> Result<f64> {
        let targets = self.targets_for(batch)?;
        let states: Vec<&Q::State> = batch.iter().map(|t| &t.state).collect();
        let (q, cache) = self.online.forward_cached(&states)?;
        let n = batch.len();
        let taken: Vec<f64> = batch.iter().enumerate().map(|(i, t)| q.get(i, t.action)).collect();
        let (loss, g) = mse(
            &Tensor2::from_vec(n, 1, taken).map_err(RlError::Nn)?,
            &Tensor2::from_vec(n, 1, targets).map_err(RlError::Nn)?,
        )?;
        let mut grad = Tensor2::zeros(q.rows(), q.cols());
        for (i, t) in batch.iter().enumerate() {
            grad.set(i, t.action, g.get(i, 0));
        }
        self.online.zero_grad();
        self.online.backward(&cache, &grad)?;
        let mut params = self.online.params_mut();
        self.opt.step(&mut params)?;
        self.updates += 1;
        if self.updates % self.cfg.target_sync == 0 {
            self.sync_target()?;
        }
        Ok(loss)
    }
}
