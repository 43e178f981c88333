//! Experiment orchestration: configuration, training loops, backtests and
//! report files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, run_flat_tranche, run_rule_tranche, BaselineError, RuleKind};
use crate::exchange::{fills_vwap, Fill, Side, SimError};
use crate::hmdp::{slippage_bp, trace_to_ndjson, EnvConfig, EnvError, HmdpEnv, RewardConfig, RewardMode, TraceEvent};
use crate::kv::{self, KvError};
use crate::lob_data::{
    compute_profile, load_replay_dir, DataError, SynthParams, SynthSeries, TradingDay, VolumeProfile, LOT, TRANCHES,
};
use crate::macro_trader::{
    self, allocate, build_samples, forecast_ma, Estimator, EstimatorKind, MacroError, ProfileHistory, TrainHyper,
    HISTORY_DAYS,
};
use crate::meta_trader::{MetaTrader, SubgoalCounts};
use crate::micro_trader::{MicroNetConfig, MicroTrader};
use crate::rl::{AgentConfig, EpsilonSchedule, LearnSchedule, RlError, TargetKind, Transition};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("data missing: {0}")]
    DataMissing(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint missing: {0}")]
    CheckpointMissing(PathBuf),
    #[error("test day {0} appears in the training log")]
    Hygiene(u32),
    #[error("day {day}: filled {filled} of {parent} shares")]
    Unfilled { day: u32, filled: u64, parent: u64 },
    #[error("day {day}: slippage {bp} bp outside the sanity bound")]
    SlippageBound { day: u32, bp: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Macro(#[from] MacroError),
    #[error(transparent)]
    Nn(#[from] m3t_nn::NnError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Daily slippage beyond this is treated as a simulator fault.
pub const SLIPPAGE_SANITY_BP: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Vwap,
    Ap,
    Dqn,
    Ddqn,
    M3t,
}

impl AgentKind {
    /// Report row order.
    pub const ALL: [AgentKind; 5] = [AgentKind::Vwap, AgentKind::Ap, AgentKind::Dqn, AgentKind::Ddqn, AgentKind::M3t];

    pub fn id(self) -> &'static str {
        match self {
            AgentKind::Vwap => "vwap",
            AgentKind::Ap => "ap",
            AgentKind::Dqn => "dqn",
            AgentKind::Ddqn => "ddqn",
            AgentKind::M3t => "m3t",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgentKind::Vwap => "VWAP",
            AgentKind::Ap => "AP",
            AgentKind::Dqn => "DQN",
            AgentKind::Ddqn => "DDQN",
            AgentKind::M3t => "M3T",
        }
    }

    pub fn learns(self) -> bool {
        matches!(self, AgentKind::Dqn | AgentKind::Ddqn | AgentKind::M3t)
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| format!("unknown agent {s:?}"))
    }
}

fn parse_side(key: &str, v: &str) -> std::result::Result<Side, KvError> {
    match v {
        "sell" => Ok(Side::Sell),
        "buy" => Ok(Side::Buy),
        _ => Err(KvError::BadValue {
            key: key.into(),
            value: v.into(),
        }),
    }
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Sell => "sell",
        Side::Buy => "buy",
    }
}

pub fn parse_reward(v: &str) -> std::result::Result<RewardMode, String> {
    match v {
        "dense" => Ok(RewardMode::Dense),
        "sparse" => Ok(RewardMode::Sparse),
        _ => Err(format!("unknown reward mode {v:?}")),
    }
}

fn reward_name(m: RewardMode) -> &'static str {
    match m {
        RewardMode::Dense => "dense",
        RewardMode::Sparse => "sparse",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Replay directory; synthetic data when absent.
    pub data_dir: Option<PathBuf>,
    pub stock: String,
    pub data_seed: u64,
    pub synth: SynthParams,
    pub drift_amplitude: f64,
    pub drift_period_days: f64,
    /// Warm-up days that only feed profile history.
    pub history_days: usize,
    /// Trading days split 80/20 into training and backtest days.
    pub month_days: usize,
    pub parent_shares: u64,
    pub side: Side,
    pub agent: AgentKind,
    pub reward: RewardMode,
    pub seed: u64,
    pub episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync: u64,
    /// Micro steps between gradient updates.
    pub learn_every: usize,
    pub eps: EpsilonSchedule,
    pub tranche_min: u64,
    pub tranche_max: u64,
    pub tranche_divisor: u64,
    pub meta_hidden: usize,
    pub micro: MicroNetConfig,
    pub macro_hyper: TrainHyper,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            stock: "SYN".into(),
            data_seed: 7,
            synth: SynthParams::default(),
            drift_amplitude: 0.0,
            drift_period_days: 60.0,
            history_days: HISTORY_DAYS,
            month_days: 21,
            parent_shares: 120_000,
            side: Side::Sell,
            agent: AgentKind::M3t,
            reward: RewardMode::Dense,
            seed: 0,
            episodes: 10_000,
            gamma: 0.99,
            lr: 5e-5,
            batch_size: 128,
            replay_capacity: 10_000,
            target_sync: 200,
            learn_every: 4,
            eps: EpsilonSchedule::default(),
            tranche_min: 100_000,
            tranche_max: 200_000,
            tranche_divisor: 10,
            meta_hidden: 64,
            micro: MicroNetConfig::default(),
            macro_hyper: TrainHyper::default(),
            checkpoint_every: 1_000,
            trace: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in &kv::parse(text)? {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "data_dir" => self.data_dir = (!v.is_empty() && v != "synthetic").then(|| PathBuf::from(v)),
            "stock" => self.stock = v.to_string(),
            "data_seed" => self.data_seed = kv::value(k, v)?,
            "base_price_ticks" => self.synth.base_price_ticks = kv::value(k, v)?,
            "tick_size" => self.synth.tick_size = kv::value(k, v)?,
            "u_amplitude" => self.synth.u_amplitude = kv::value(k, v)?,
            "noise_scale" => self.synth.noise_scale = kv::value(k, v)?,
            "avg_daily_volume" => self.synth.avg_daily_volume = kv::value(k, v)?,
            "drift_amplitude" => self.drift_amplitude = kv::value(k, v)?,
            "drift_period_days" => self.drift_period_days = kv::value(k, v)?,
            "history_days" => self.history_days = kv::value(k, v)?,
            "month_days" => self.month_days = kv::value(k, v)?,
            "parent_shares" => self.parent_shares = kv::value(k, v)?,
            "side" => self.side = parse_side(k, v)?,
            "agent" => self.agent = kv::value(k, v)?,
            "reward" => {
                self.reward = parse_reward(v).map_err(|_| KvError::BadValue {
                    key: k.into(),
                    value: v.into(),
                })?
            }
            "seed" => self.seed = kv::value(k, v)?,
            "episodes" => self.episodes = kv::value(k, v)?,
            "gamma" => self.gamma = kv::value(k, v)?,
            "lr" => self.lr = kv::value(k, v)?,
            "batch_size" => self.batch_size = kv::value(k, v)?,
            "replay_capacity" => self.replay_capacity = kv::value(k, v)?,
            "target_sync" => self.target_sync = kv::value(k, v)?,
            "learn_every" => self.learn_every = kv::value(k, v)?,
            "eps_initial" => self.eps.initial = kv::value(k, v)?,
            "eps_decay" => self.eps.decay = kv::value(k, v)?,
            "eps_every" => self.eps.every = kv::value(k, v)?,
            "eps_min" => self.eps.min = kv::value(k, v)?,
            "tranche_min" => self.tranche_min = kv::value(k, v)?,
            "tranche_max" => self.tranche_max = kv::value(k, v)?,
            "tranche_divisor" => self.tranche_divisor = kv::value(k, v)?,
            "meta_hidden" => self.meta_hidden = kv::value(k, v)?,
            "micro_model_dim" => self.micro.model_dim = kv::value(k, v)?,
            "micro_heads" => self.micro.heads = kv::value(k, v)?,
            "micro_ff_dim" => self.micro.ff_dim = kv::value(k, v)?,
            "micro_layers" => self.micro.layers = kv::value(k, v)?,
            "micro_branch_dim" => self.micro.branch_dim = kv::value(k, v)?,
            "micro_positional" => self.micro.positional = kv::value(k, v)?,
            "macro_epochs" => self.macro_hyper.epochs = kv::value(k, v)?,
            "macro_lr" => self.macro_hyper.lr = kv::value(k, v)?,
            "macro_mlp_hidden" => self.macro_hyper.mlp_hidden = kv::value(k, v)?,
            "macro_lstm_hidden" => self.macro_hyper.lstm_hidden = kv::value(k, v)?,
            "checkpoint_every" => self.checkpoint_every = kv::value(k, v)?,
            "trace" => self.trace = kv::value(k, v)?,
            _ => return Err(KvError::UnknownKey(k.to_string()).into()),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let data = self.data_dir.as_ref().map_or("synthetic".to_string(), |p| p.display().to_string());
        let rows: Vec<(&str, String)> = vec![
            ("data_dir", data),
            ("stock", self.stock.clone()),
            ("data_seed", self.data_seed.to_string()),
            ("base_price_ticks", self.synth.base_price_ticks.to_string()),
            ("tick_size", self.synth.tick_size.to_string()),
            ("u_amplitude", self.synth.u_amplitude.to_string()),
            ("noise_scale", self.synth.noise_scale.to_string()),
            ("avg_daily_volume", self.synth.avg_daily_volume.to_string()),
            ("drift_amplitude", self.drift_amplitude.to_string()),
            ("drift_period_days", self.drift_period_days.to_string()),
            ("history_days", self.history_days.to_string()),
            ("month_days", self.month_days.to_string()),
            ("parent_shares", self.parent_shares.to_string()),
            ("side", side_name(self.side).into()),
            ("agent", self.agent.id().into()),
            ("reward", reward_name(self.reward).into()),
            ("seed", self.seed.to_string()),
            ("episodes", self.episodes.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("replay_capacity", self.replay_capacity.to_string()),
            ("target_sync", self.target_sync.to_string()),
            ("learn_every", self.learn_every.to_string()),
            ("eps_initial", self.eps.initial.to_string()),
            ("eps_decay", self.eps.decay.to_string()),
            ("eps_every", self.eps.every.to_string()),
            ("eps_min", self.eps.min.to_string()),
            ("tranche_min", self.tranche_min.to_string()),
            ("tranche_max", self.tranche_max.to_string()),
            ("tranche_divisor", self.tranche_divisor.to_string()),
            ("meta_hidden", self.meta_hidden.to_string()),
            ("micro_model_dim", self.micro.model_dim.to_string()),
            ("micro_heads", self.micro.heads.to_string()),
            ("micro_ff_dim", self.micro.ff_dim.to_string()),
            ("micro_layers", self.micro.layers.to_string()),
            ("micro_branch_dim", self.micro.branch_dim.to_string()),
            ("micro_positional", self.micro.positional.to_string()),
            ("macro_epochs", self.macro_hyper.epochs.to_string()),
            ("macro_lr", self.macro_hyper.lr.to_string()),
            ("macro_mlp_hidden", self.macro_hyper.mlp_hidden.to_string()),
            ("macro_lstm_hidden", self.macro_hyper.lstm_hidden.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("trace", self.trace.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::ConfigInvalid(m.to_string()));
        if self.episodes == 0 {
            return bad("episodes must be at least 1");
        }
        if self.parent_shares == 0 || self.parent_shares % LOT != 0 {
            return bad("parent_shares must be a positive whole number of lots");
        }
        if self.history_days != HISTORY_DAYS {
            return bad("history_days must equal the estimator window of 20");
        }
        if self.month_days < 2 {
            return bad("month_days must allow at least one training and one test day");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("lr must be positive and gamma in [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size || self.target_sync == 0 || self.learn_every == 0 {
            return bad("batch, replay, target sync and learn period must be positive");
        }
        if self.tranche_divisor == 0 || self.tranche_min == 0 || self.tranche_min > self.tranche_max {
            return bad("tranche size range must be positive and ordered");
        }
        if self.tranche_max / self.tranche_divisor < LOT {
            return bad("scaled tranche sizes must be at least one lot");
        }
        if !(0.0..=1.0).contains(&self.eps.min) || self.eps.initial < self.eps.min || self.eps.every == 0 {
            return bad("invalid exploration schedule");
        }
        if self.meta_hidden == 0 || self.micro.model_dim % self.micro.heads.max(1) != 0 {
            return bad("invalid network widths");
        }
        self.synth.validate()?;
        Ok(())
    }

    pub fn agent_config(&self, kind: TargetKind) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma,
            lr: self.lr,
            batch_size: self.batch_size,
            replay_capacity: self.replay_capacity,
            target_sync: self.target_sync,
            kind,
        }
    }

    pub fn env_config(&self, agent: AgentKind) -> EnvConfig {
        EnvConfig {
            side: self.side,
            reward: RewardConfig {
                mode: self.reward,
                ..RewardConfig::default()
            },
            meta_blame: agent == AgentKind::M3t,
        }
    }
}

/// Draws a training tranche quota: uniform whole lots in the scaled range.
pub fn sample_tranche_quota<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> u64 {
    let lo = (cfg.tranche_min / cfg.tranche_divisor).div_ceil(LOT).max(1);
    let hi = (cfg.tranche_max / cfg.tranche_divisor / LOT).max(lo);
    rng.gen_range(lo..=hi) * LOT
}

/// Chronological days: `history_days` of warm-up followed by the month.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub stock: String,
    pub days: Vec<TradingDay>,
    pub history_days: usize,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let days = match &cfg.data_dir {
            Some(dir) => {
                let days = load_replay_dir(dir)?;
                if days.len() < cfg.history_days + 2 {
                    return Err(HarnessError::DataMissing(format!(
                        "{} usable days in {}, need at least {}",
                        days.len(),
                        dir.display(),
                        cfg.history_days + 2
                    )));
                }
                days
            }
            None => {
                let series = SynthSeries {
                    params: cfg.synth.clone(),
                    drift_amplitude: cfg.drift_amplitude,
                    drift_period_days: cfg.drift_period_days,
                };
                series.days(cfg.data_seed, 0..cfg.history_days + cfg.month_days)?
            }
        };
        Ok(Self {
            stock: cfg.stock.clone(),
            days,
            history_days: cfg.history_days,
        })
    }

    /// Indices of training and test days; the first 80% of the month trains.
    pub fn split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.days.len() - self.history_days;
        let train = (n * 8 / 10).clamp(1, n - 1);
        let cut = self.history_days + train;
        (self.history_days..cut, cut..self.days.len())
    }

    pub fn profiles(&self) -> Result<Vec<VolumeProfile>> {
        Ok(self.days.iter().map(compute_profile).collect::<std::result::Result<_, _>>()?)
    }
}

fn history_for(profiles: &[VolumeProfile], index: usize) -> Result<ProfileHistory> {
    if index < HISTORY_DAYS {
        return Err(HarnessError::DataMissing(format!("day index {index} lacks 20 days of history")));
    }
    Ok(ProfileHistory::new(profiles[index - HISTORY_DAYS..index].to_vec())?)
}

/// LSTM profile estimator trained only on days before the first test day.
pub fn fit_macro(cfg: &ExperimentConfig, data: &Dataset) -> Result<macro_trader::TrainedEstimator> {
    let (_, test) = data.split();
    let profiles = data.profiles()?;
    let samples = build_samples(&profiles[..test.start])?;
    Ok(macro_trader::train_estimator(EstimatorKind::Lstm, &samples, &cfg.macro_hyper, crate::derive_seed(cfg.seed, 3))?)
}

/// One tranche worked by a Meta/Micro pair.
pub fn run_m3t_tranche(
    env: &mut HmdpEnv<'_>,
    meta: &mut MetaTrader,
    micro: &mut MicroTrader,
    tranche: usize,
    order: u64,
    eps: f64,
    mut learn: Option<&mut LearnSchedule>,
    mut counts: Option<&mut SubgoalCounts>,
) -> Result<baselines::TrancheRun> {
    let mut run = baselines::TrancheRun::default();
    let mut se = env.begin_tranche(tranche, order)?;
    while !env.tranche_done()? {
        let g = meta.select_subgoal(&se, eps)?;
        if let Some(c) = counts.as_deref_mut() {
            c.record(tranche, g);
        }
        run.subgoals.push(g.id());
        let mut s = env.begin_subgoal(g)?;
        while !env.subgoal_done()? {
            let a = micro.select_action(&s, eps)?;
            let o = env.micro_step(a)?;
            run.micro_reward += o.reward;
            if let Some(sched) = learn.as_deref_mut() {
                micro.observe(Transition {
                    state: s,
                    action: a.id(),
                    reward: o.reward,
                    next_state: o.state.clone(),
                    terminal: o.done,
                    span: 1,
                });
                if sched.tick() && micro.agent().can_learn() {
                    run.loss_sum += micro.learn()?;
                    run.updates += 1;
                }
            }
            s = o.state;
        }
        let m = env.end_subgoal()?;
        run.meta_reward += m.reward;
        if learn.is_some() {
            meta.observe(Transition {
                state: se,
                action: g.index(),
                reward: m.reward,
                next_state: m.state,
                terminal: m.tranche_done,
                span: m.steps,
            });
            if meta.agent().can_learn() {
                meta.learn()?;
            }
        }
        se = m.state;
    }
    run.result = env.finish_tranche()?;
    Ok(run)
}

enum Agents {
    M3t { meta: MetaTrader, micro: MicroTrader },
    Flat(MicroTrader),
}

impl Agents {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let micro_seed = crate::derive_seed(cfg.seed, 1);
        match cfg.agent {
            AgentKind::M3t => Ok(Agents::M3t {
                meta: MetaTrader::new(
                    cfg.agent_config(TargetKind::DoubleDqn),
                    &[cfg.meta_hidden, cfg.meta_hidden],
                    crate::derive_seed(cfg.seed, 2),
                )?,
                micro: MicroTrader::new(cfg.agent_config(TargetKind::DoubleDqn), &cfg.micro, micro_seed)?,
            }),
            AgentKind::Dqn | AgentKind::Ddqn => {
                let kind = if cfg.agent == AgentKind::Dqn {
                    TargetKind::Dqn
                } else {
                    TargetKind::DoubleDqn
                };
                Ok(Agents::Flat(baselines::flat_agent(kind, cfg.agent_config(kind), &cfg.micro, micro_seed)?))
            }
            k => Err(HarnessError::ConfigInvalid(format!("{} is a fixed rule with nothing to train", k.id()))),
        }
    }

    fn run(
        &mut self,
        env: &mut HmdpEnv<'_>,
        tranche: usize,
        order: u64,
        eps: f64,
        learn: Option<&mut LearnSchedule>,
        counts: Option<&mut SubgoalCounts>,
    ) -> Result<baselines::TrancheRun> {
        match self {
            Agents::M3t { meta, micro } => run_m3t_tranche(env, meta, micro, tranche, order, eps, learn, counts),
            Agents::Flat(a) => Ok(run_flat_tranche(env, a, tranche, order, eps, learn)?),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Agents::M3t { meta, micro } => {
                meta.save(&dir.join("meta.ckpt"))?;
                micro.save(&dir.join("micro.ckpt"))?;
            }
            Agents::Flat(a) => a.save(&dir.join("agent.ckpt"))?,
        }
        Ok(())
    }

    fn load(&mut self, dir: &Path) -> Result<()> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(HarnessError::CheckpointMissing(p))
            }
        };
        match self {
            Agents::M3t { meta, micro } => {
                meta.load(&need("meta.ckpt")?)?;
                micro.load(&need("micro.ckpt")?)?;
            }
            Agents::Flat(a) => a.load(&need("agent.ckpt")?)?,
        }
        Ok(())
    }
}

/// One training episode: every tranche of one training day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub day_id: u32,
    /// Sum of the sampled tranche quotas.
    pub quota: u64,
    pub filled: u64,
    pub tranches: usize,
    pub epsilon: f64,
    pub micro_reward: f64,
    pub meta_reward: f64,
    /// Against the day's market VWAP.
    pub slippage_bp: f64,
    pub subgoals: usize,
    pub updates: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub agent: AgentKind,
    pub seed: u64,
    pub episodes: Vec<EpisodeLog>,
    pub train_day_ids: Vec<u32>,
    pub test_day_ids: Vec<u32>,
    pub macro_test_mse: f64,
}

pub const LEARNING_CURVE_FILE: &str = "learning_curve.csv";
pub const TRAIN_DAYS_FILE: &str = "train_days.txt";
pub const MACRO_CKPT: &str = "macro.ckpt";

pub fn write_learning_curve(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let mut s = String::from(
        "episode,day_id,quota,filled,tranches,epsilon,micro_reward,meta_reward,slippage_bp,subgoals,updates,mean_loss\n",
    );
    for l in logs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6}",
            l.episode,
            l.day_id,
            l.quota,
            l.filled,
            l.tranches,
            l.epsilon,
            l.micro_reward,
            l.meta_reward,
            l.slippage_bp,
            l.subgoals,
            l.updates,
            l.mean_loss
        );
    }
    fs::write(path, s)?;
    Ok(())
}

/// Trains the configured agent and writes checkpoints plus a learning curve
/// to `out`. Each episode works all tranches of a random training day, with
/// tranche quotas drawn from the scaled training range.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<TrainingSummary> {
    cfg.validate()?;
    let data = Dataset::load(cfg)?;
    let mut agents = Agents::new(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_kv())?;

    let (train, test) = data.split();
    let macro_fit = fit_macro(cfg, &data)?;
    m3t_nn::checkpoint::save(&out.join(MACRO_CKPT), &macro_fit.estimator)?;

    let mut rng = crate::seeded_rng(cfg.seed, 10);
    let mut sched = LearnSchedule::new(cfg.learn_every);
    let mut logs = Vec::with_capacity(cfg.episodes);
    let mut used = BTreeSet::new();
    for ep in 0..cfg.episodes {
        let day = &data.days[rng.gen_range(train.clone())];
        let eps = cfg.eps.value(ep);
        used.insert(day.day_id);
        let mut env = HmdpEnv::new(day, cfg.env_config(cfg.agent))?;
        let mut log = EpisodeLog {
            episode: ep + 1,
            day_id: day.day_id,
            quota: 0,
            filled: 0,
            tranches: 0,
            epsilon: eps,
            micro_reward: 0.0,
            meta_reward: 0.0,
            slippage_bp: 0.0,
            subgoals: 0,
            updates: 0,
            mean_loss: 0.0,
        };
        let mut fills = Vec::new();
        let mut loss_sum = 0.0;
        for tranche in 0..TRANCHES {
            let quota = sample_tranche_quota(cfg, &mut rng);
            let run = agents.run(&mut env, tranche, quota, eps, Some(&mut sched), None)?;
            log.quota += quota;
            log.tranches += 1;
            log.micro_reward += run.micro_reward;
            log.meta_reward += run.meta_reward;
            log.subgoals += run.subgoals.len();
            log.updates += run.updates;
            loss_sum += run.loss_sum;
            fills.extend(run.result.fills);
        }
        log.filled = fills.iter().map(|f| f.volume).sum();
        if log.filled != log.quota {
            return Err(HarnessError::Unfilled {
                day: day.day_id,
                filled: log.filled,
                parent: log.quota,
            });
        }
        log.slippage_bp = daily_slippage_bp(cfg.side, &fills, day).unwrap_or(0.0);
        if log.updates > 0 {
            log.mean_loss = loss_sum / log.updates as f64;
        }
        logs.push(log);
        if cfg.checkpoint_every > 0 && (ep + 1) % cfg.checkpoint_every == 0 {
            agents.save(out)?;
        }
    }
    agents.save(out)?;
    write_learning_curve(&out.join(LEARNING_CURVE_FILE), &logs)?;
    let ids: Vec<String> = used.iter().map(|d| d.to_string()).collect();
    fs::write(out.join(TRAIN_DAYS_FILE), ids.join("\n") + "\n")?;
    Ok(TrainingSummary {
        agent: cfg.agent,
        seed: cfg.seed,
        episodes: logs,
        train_day_ids: used.into_iter().collect(),
        test_day_ids: data.days[test].iter().map(|d| d.day_id).collect(),
        macro_test_mse: macro_fit.test_mse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayResult {
    pub day_id: u32,
    pub slippage_bp: f64,
    pub filled: u64,
    pub parent: u64,
    pub allocation: [u64; TRANCHES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: AgentKind,
    pub stock: String,
    pub seed: u64,
    pub days: Vec<DayResult>,
    pub subgoal_counts: Option<SubgoalCounts>,
}

impl BacktestReport {
    pub fn mean(&self) -> f64 {
        self.days.iter().map(|d| d.slippage_bp).sum::<f64>() / self.days.len().max(1) as f64
    }

    /// Sample standard deviation over days.
    pub fn std(&self) -> f64 {
        let n = self.days.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.days.iter().map(|d| (d.slippage_bp - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn cell(&self) -> String {
        format_cell(self.mean(), self.std())
    }
}

pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

/// Side-signed slippage of our fills against the day's market VWAP.
pub fn daily_slippage_bp(side: Side, fills: &[Fill], day: &TradingDay) -> Option<f64> {
    Some(slippage_bp(side, fills_vwap(fills)?, day.daily_vwap()?))
}

fn read_train_days(dir: &Path) -> Result<BTreeSet<u32>> {
    let p = dir.join(TRAIN_DAYS_FILE);
    let text = fs::read_to_string(&p).map_err(|_| HarnessError::CheckpointMissing(p.clone()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse().map_err(|_| {
                HarnessError::ConfigInvalid(format!("bad day id {l:?} in {}", p.display()))
            })
        })
        .collect()
}

/// Executes the parent order on every test day with exploration off.
/// Learning strategies need the checkpoint directory written by
/// [`run_training`]; rule strategies allocate with the moving average.
pub fn run_backtest(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<BacktestReport> {
    cfg.validate()?;
    let data = Dataset::load(cfg)?;
    let (_, test) = data.split();
    let profiles = data.profiles()?;

    let mut agents = None;
    let mut estimator = None;
    if cfg.agent.learns() {
        let dir = checkpoint.ok_or_else(|| HarnessError::CheckpointMissing(PathBuf::from("<none>")))?;
        let trained = read_train_days(dir)?;
        if let Some(d) = data.days[test.clone()].iter().find(|d| trained.contains(&d.day_id)) {
            return Err(HarnessError::Hygiene(d.day_id));
        }
        let mut a = Agents::new(cfg)?;
        a.load(dir)?;
        agents = Some(a);
        let ckpt = dir.join(MACRO_CKPT);
        if !ckpt.exists() {
            return Err(HarnessError::CheckpointMissing(ckpt));
        }
        let mut est = Estimator::new(EstimatorKind::Lstm, &cfg.macro_hyper, 0);
        m3t_nn::checkpoint::assign(&mut est, &m3t_nn::checkpoint::load(&ckpt)?)?;
        estimator = Some(est);
    }

    fs::create_dir_all(out)?;
    let trace_dir = out.join("traces");
    if cfg.trace && agents.is_some() {
        fs::create_dir_all(&trace_dir)?;
    }
    let mut counts = SubgoalCounts::default();
    let mut days = Vec::new();
    for idx in test {
        let day = &data.days[idx];
        let hist = history_for(&profiles, idx)?;
        let forecast = match &estimator {
            Some(e) => macro_trader::forecast_lstm(&hist, e)?,
            None => forecast_ma(&hist),
        };
        let alloc = allocate(cfg.parent_shares as i64, &forecast)?;
        let mut fills = Vec::new();
        let mut trace: Vec<TraceEvent> = Vec::new();
        for (tranche, &quota) in alloc.shares.iter().enumerate() {
            if quota == 0 {
                continue;
            }
            let result = match (&mut agents, cfg.agent) {
                (None, AgentKind::Vwap) => run_rule_tranche(day, tranche, quota, cfg.side, RuleKind::Twap)?,
                (None, AgentKind::Ap) => run_rule_tranche(day, tranche, quota, cfg.side, RuleKind::ArrivalPrice)?,
                (Some(a), _) => {
                    let mut env = HmdpEnv::new(day, cfg.env_config(cfg.agent))?;
                    if cfg.trace {
                        env.enable_trace();
                    }
                    let run = a.run(&mut env, tranche, quota, 0.0, None, Some(&mut counts))?;
                    trace.extend(env.take_trace());
                    run.result
                }
                (None, k) => return Err(HarnessError::ConfigInvalid(format!("no runner for {}", k.id()))),
            };
            fills.extend(result.fills);
        }
        let filled: u64 = fills.iter().map(|f| f.volume).sum();
        if filled != cfg.parent_shares {
            return Err(HarnessError::Unfilled {
                day: day.day_id,
                filled,
                parent: cfg.parent_shares,
            });
        }
        let bp = daily_slippage_bp(cfg.side, &fills, day)
            .ok_or_else(|| HarnessError::DataMissing(format!("day {} has no trades", day.day_id)))?;
        if bp.abs() >= SLIPPAGE_SANITY_BP {
            return Err(HarnessError::SlippageBound { day: day.day_id, bp });
        }
        if cfg.trace && agents.is_some() {
            fs::write(trace_dir.join(format!("{:04}.ndjson", day.day_id)), trace_to_ndjson(&trace))?;
        }
        days.push(DayResult {
            day_id: day.day_id,
            slippage_bp: bp,
            filled,
            parent: cfg.parent_shares,
            allocation: alloc.shares,
        });
    }
    let report = BacktestReport {
        strategy: cfg.agent,
        stock: data.stock.clone(),
        seed: cfg.seed,
        days,
        subgoal_counts: (cfg.agent == AgentKind::M3t).then_some(counts),
    };
    fs::write(out.join("results.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    emit_report(std::slice::from_ref(&report), out)?;
    Ok(report)
}

/// Strategy × stock grid of `mean±std` daily slippage.
pub fn slippage_table(reports: &[BacktestReport]) -> String {
    let stocks: BTreeSet<&str> = reports.iter().map(|r| r.stock.as_str()).collect();
    let mut s = String::from("model");
    for st in &stocks {
        let _ = write!(s, ",{st}");
    }
    s.push('\n');
    for kind in AgentKind::ALL {
        let rows: Vec<&BacktestReport> = reports.iter().filter(|r| r.strategy == kind).collect();
        if rows.is_empty() {
            continue;
        }
        s.push_str(kind.label());
        for st in &stocks {
            s.push(',');
            if let Some(r) = rows.iter().find(|r| r.stock == *st) {
                s.push_str(&r.cell());
            }
        }
        s.push('\n');
    }
    s
}

pub fn daily_table(reports: &[BacktestReport]) -> String {
    let mut s = String::from("model,stock,day_id,slippage_bp,filled,parent\n");
    let mut sorted: Vec<&BacktestReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (a.strategy, &a.stock).cmp(&(b.strategy, &b.stock)));
    for r in sorted {
        for d in &r.days {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{},{}",
                r.strategy.label(),
                r.stock,
                d.day_id,
                d.slippage_bp,
                d.filled,
                d.parent
            );
        }
    }
    s
}

/// Writes `slippage.csv`, `daily.csv` and, for subgoal-level agents,
/// per-stock subgoal count and speed files.
pub fn emit_report(reports: &[BacktestReport], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("slippage.csv".into(), slippage_table(reports).into_bytes())?;
    put("daily.csv".into(), daily_table(reports).into_bytes())?;
    for r in reports {
        if let Some(c) = &r.subgoal_counts {
            let mut counts = Vec::new();
            c.write_csv(&mut counts)?;
            put(format!("subgoal_counts_{}.csv", r.stock), counts)?;
            let mut speed = Vec::new();
            c.write_speed_csv(&mut speed)?;
            put(format!("subgoal_speed_{}.csv", r.stock), speed)?;
        }
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<BacktestReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub model: String,
    pub stock: String,
    pub test_mse: f64,
}

/// Moving average and the three trained estimators on a 60/20/20 split of
/// the dataset's profiles.
pub fn run_macro_study(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<MseRow>> {
    let samples = build_samples(&data.profiles()?)?;
    let (_, _, test) = macro_trader::chronological_split(samples.len());
    let mut rows = vec![MseRow {
        model: "MA".into(),
        stock: data.stock.clone(),
        test_mse: macro_trader::ma_mse(&samples[test]),
    }];
    for (kind, label) in [
        (EstimatorKind::Linear, "Linear"),
        (EstimatorKind::Mlp, "MLP"),
        (EstimatorKind::Lstm, "LSTM"),
    ] {
        let t = macro_trader::train_estimator(kind, &samples, &cfg.macro_hyper, crate::derive_seed(cfg.seed, 3))?;
        rows.push(MseRow {
            model: label.into(),
            stock: data.stock.clone(),
            test_mse: t.test_mse,
        });
    }
    Ok(rows)
}

pub fn mse_table(rows: &[MseRow]) -> String {
    let mut s = String::from("model,stock,test_mse_e-3\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6}", r.model, r.stock, r.test_mse * 1e3);
    }
    s
}
