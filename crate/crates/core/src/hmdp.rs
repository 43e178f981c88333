//! Two-level execution environment over the replay simulator.
//!
//! A tranche (600 steps) is worked as a sequence of mini-tranches. Each one
//! is opened by a subgoal `(T_g, V_g)`: sell `V_g` of the tranche order
//! within `T_g` steps. The execution agent then chooses one action per step
//! until the mini-tranche fills or its step budget runs out, at which point
//! the remainder is sold at market and the failure is blamed on one level.

use serde::{Deserialize, Serialize};

use crate::exchange::{fills_vwap, Accounting, ExchangeSim, Fill, FillKind, PriceChoice, Side, SimError};
use crate::lob_data::{TradingDay, LEVELS, LOT, STEPS_PER_TRANCHE, TRANCHES};

pub const NUM_SUBGOALS: usize = 9;
pub const SUBGOAL_STEPS: [usize; 3] = [80, 100, 120];
pub const SUBGOAL_FRACTIONS: [f64; 3] = [0.13, 0.16, 0.19];
/// Snapshots in the execution agent's window.
pub const WINDOW: usize = 20;
/// Per-snapshot features: prices then volumes, bids before asks.
pub const LOB_FEATURES: usize = 4 * LEVELS;
pub const EXTRINSIC_DIM: usize = 6;
pub const PROGRESS_DIM: usize = 2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("tranche index {0} past the end of the day")]
    DayExhausted(usize),
    #[error("subgoal id {0} outside 1..=9")]
    InvalidSubgoal(u8),
    #[error("tranche order {0} is not a positive number of lots")]
    InvalidOrder(u64),
    #[error("no active tranche")]
    NoActiveTranche,
    #[error("tranche already filled")]
    TrancheFilled,
    #[error("a subgoal is still active")]
    SubgoalActive,
    #[error("no active subgoal")]
    NoActiveSubgoal,
    #[error("subgoal has not terminated")]
    SubgoalRunning,
    #[error("invalid reward configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Signed slippage in basis points: positive when the execution price beats
/// the market for the given side.
pub fn slippage_bp(side: Side, order_price: f64, market_price: f64) -> f64 {
    side.sign() * (order_price - market_price) / market_price * 1e4
}

/// Subgoal `#id`, numbered row by row over steps × size fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subgoal(u8);

impl Subgoal {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=NUM_SUBGOALS as u8).contains(&id) {
            Ok(Self(id))
        } else {
            Err(EnvError::InvalidSubgoal(id))
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(u8::try_from(index + 1).unwrap_or(u8::MAX))
    }

    pub fn all() -> [Subgoal; NUM_SUBGOALS] {
        std::array::from_fn(|i| Subgoal(i as u8 + 1))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    /// `T_g`.
    pub fn max_steps(self) -> usize {
        SUBGOAL_STEPS[self.index() / 3]
    }

    /// `V_g`.
    pub fn size_fraction(self) -> f64 {
        SUBGOAL_FRACTIONS[self.index() % 3]
    }

    pub fn one_hot(self) -> [f64; NUM_SUBGOALS] {
        let mut v = [0.0; NUM_SUBGOALS];
        v[self.index()] = 1.0;
        v
    }
}

/// Nearest whole lot, at least one.
pub fn round_to_lot(shares: f64) -> u64 {
    ((shares / LOT as f64).round() as u64).max(1) * LOT
}

/// Child-order actions. For a seller the passive touch is ask1 and the
/// crossing price is bid1; a buyer mirrors both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Passive = 0,
    Cross = 1,
    Wait = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Passive, Action::Cross, Action::Wait];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn price_choice(self, side: Side) -> Option<PriceChoice> {
        match (self, side) {
            (Action::Wait, _) => None,
            (Action::Passive, Side::Sell) | (Action::Cross, Side::Buy) => Some(PriceChoice::AtAsk1),
            (Action::Passive, Side::Buy) | (Action::Cross, Side::Sell) => Some(PriceChoice::AtBid1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Sparse,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mode: RewardMode,
    /// Reward for an unfinished subgoal, in basis points.
    pub fail_penalty: f64,
    pub meta_blame_step_ratio: f64,
    pub meta_blame_liquidity_ratio: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Dense,
            fail_penalty: -99.0,
            meta_blame_step_ratio: 0.30,
            meta_blame_liquidity_ratio: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("meta_blame_step_ratio", self.meta_blame_step_ratio),
            ("meta_blame_liquidity_ratio", self.meta_blame_liquidity_ratio),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(EnvError::Config(format!("{name} = {r} outside (0, 1)")));
            }
        }
        if !self.fail_penalty.is_finite() {
            return Err(EnvError::Config("fail_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub side: Side,
    pub reward: RewardConfig,
    /// When false every failure is charged to the execution agent (flat
    /// agents have no subgoal layer to blame).
    pub meta_blame: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            side: Side::Sell,
            reward: RewardConfig::default(),
            meta_blame: true,
        }
    }
}

/// Subgoal-level observation: `[bid depth, ask depth, spread, elapsed,
/// filled, last-window volume]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicState {
    pub features: [f64; EXTRINSIC_DIM],
}

impl ExtrinsicState {
    pub fn elapsed(&self) -> f64 {
        self.features[3]
    }

    pub fn filled(&self) -> f64 {
        self.features[4]
    }
}

/// Step-level observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicState {
    /// `WINDOW × LOB_FEATURES`, oldest row first, row-major.
    pub window: Vec<f64>,
    pub subgoal_onehot: [f64; NUM_SUBGOALS],
    /// `[steps used / budget, filled / mini-tranche size]`.
    pub progress: [f64; PROGRESS_DIM],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blame {
    Meta,
    Micro,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroOutcome {
    pub state: IntrinsicState,
    pub reward: f64,
    pub done: bool,
    pub fills: Vec<Fill>,
    /// Slippage of this step's fills before any penalty; `None` without fills.
    pub step_slippage_bp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaOutcome {
    pub reward: f64,
    pub state: ExtrinsicState,
    pub tranche_done: bool,
    pub blame: Option<Blame>,
    /// Steps the subgoal spanned.
    pub steps: usize,
    /// Mini-tranche slippage against its window benchmark, before penalties.
    pub slippage_bp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub tranche: usize,
    pub subgoal: u8,
    pub action: Action,
    pub fills: u64,
    pub reward_i: f64,
    pub reward_e: Option<f64>,
}

pub fn trace_to_ndjson(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrancheResult {
    pub tranche: usize,
    pub order: u64,
    pub fills: Vec<Fill>,
    pub accounting: Accounting,
}

#[derive(Clone, Debug)]
struct SubgoalState {
    g: Subgoal,
    size: u64,
    start: usize,
    budget: usize,
    taken: usize,
    filled: u64,
    benchmark: f64,
    window_volume: u64,
    fills: Vec<Fill>,
    done: bool,
    blame: Option<Blame>,
}

#[derive(Clone, Debug)]
struct TrancheState<'a> {
    index: usize,
    order: u64,
    sim: ExchangeSim<'a>,
    start: usize,
    first_mid: f64,
    last_window_volume: f64,
    subgoal: Option<SubgoalState>,
}

/// One trading day's environment; tranches are worked one at a time.
#[derive(Clone, Debug)]
pub struct HmdpEnv<'a> {
    day: &'a TradingDay,
    cfg: EnvConfig,
    tranche: Option<TrancheState<'a>>,
    trace: Option<Vec<TraceEvent>>,
}

impl<'a> HmdpEnv<'a> {
    pub fn new(day: &'a TradingDay, cfg: EnvConfig) -> Result<Self> {
        cfg.reward.validate()?;
        Ok(Self {
            day,
            cfg,
            tranche: None,
            trace: None,
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn day(&self) -> &'a TradingDay {
        self.day
    }

    fn tranche(&self) -> Result<&TrancheState<'a>> {
        self.tranche.as_ref().ok_or(EnvError::NoActiveTranche)
    }

    pub fn current_step(&self) -> Result<usize> {
        Ok(self.tranche()?.sim.step())
    }

    pub fn tranche_filled(&self) -> Result<u64> {
        Ok(self.tranche()?.sim.ledger().total_volume())
    }

    pub fn tranche_remaining(&self) -> Result<u64> {
        let t = self.tranche()?;
        Ok(t.order - t.sim.ledger().total_volume())
    }

    pub fn tranche_done(&self) -> Result<bool> {
        Ok(self.tranche_remaining()? == 0)
    }

    pub fn accounting(&self) -> Result<Accounting> {
        Ok(self.tranche()?.sim.accounting())
    }

    pub fn begin_tranche(&mut self, index: usize, order: u64) -> Result<ExtrinsicState> {
        if index >= TRANCHES {
            return Err(EnvError::DayExhausted(index));
        }
        if order < LOT || order % LOT != 0 {
            return Err(EnvError::InvalidOrder(order));
        }
        let range = TradingDay::tranche_range(index);
        let sim = ExchangeSim::new(self.day, range.start, range.end - 1)?;
        self.tranche = Some(TrancheState {
            index,
            order,
            sim,
            start: range.start,
            first_mid: self.day.snapshot(range.start).mid(),
            last_window_volume: 0.0,
            subgoal: None,
        });
        self.extrinsic_state()
    }

    pub fn extrinsic_state(&self) -> Result<ExtrinsicState> {
        let t = self.tranche()?;
        let snap = t.sim.snapshot();
        Ok(ExtrinsicState {
            features: [
                (snap.bid_depth() as f64).ln_1p() / 10.0,
                (snap.ask_depth() as f64).ln_1p() / 10.0,
                snap.spread() as f64 / 10.0,
                (t.sim.step() - t.start) as f64 / STEPS_PER_TRANCHE as f64,
                t.sim.ledger().total_volume() as f64 / t.order as f64,
                t.last_window_volume,
            ],
        })
    }

    /// Opens a mini-tranche of `round_to_lot(V_g × order)` shares (clipped to
    /// what is left) with a budget of `T_g` steps. When `T_g` reaches the end
    /// of the tranche the subgoal instead takes the whole remainder and the
    /// remaining steps.
    pub fn begin_subgoal(&mut self, g: Subgoal) -> Result<IntrinsicState> {
        let day = self.day;
        let side = self.cfg.side;
        let t = self.tranche.as_mut().ok_or(EnvError::NoActiveTranche)?;
        if t.subgoal.is_some() {
            return Err(EnvError::SubgoalActive);
        }
        let remaining = t.order - t.sim.ledger().total_volume();
        if remaining == 0 {
            return Err(EnvError::TrancheFilled);
        }
        let step = t.sim.step();
        let steps_left = t.sim.end_step() - step;
        let (size, budget) = if g.max_steps() >= steps_left {
            (remaining, steps_left)
        } else {
            (round_to_lot(g.size_fraction() * t.order as f64).min(remaining), g.max_steps())
        };
        let window = step + 1..step + 1 + budget;
        let benchmark = day.vwap_in(window.clone()).unwrap_or_else(|| day.snapshot(step).mid());
        let mut sg = SubgoalState {
            g,
            size,
            start: step,
            budget,
            taken: 0,
            filled: 0,
            benchmark,
            window_volume: day.volume_in(window),
            fills: Vec::new(),
            done: false,
            blame: None,
        };
        if budget == 0 {
            let fills = t.sim.liquidate_market(side, size)?;
            sg.filled = size;
            sg.fills = fills;
            sg.done = true;
            sg.blame = Some(Self::blame_for(&self.cfg, &sg));
        }
        t.subgoal = Some(sg);
        self.intrinsic_state()
    }

    fn blame_for(cfg: &EnvConfig, sg: &SubgoalState) -> Blame {
        let min_steps = sg.size.div_ceil(LOT) as f64;
        let too_fast = min_steps > cfg.reward.meta_blame_step_ratio * sg.g.max_steps() as f64;
        let too_big = sg.size as f64 > cfg.reward.meta_blame_liquidity_ratio * sg.window_volume as f64;
        if cfg.meta_blame && (too_fast || too_big) {
            Blame::Meta
        } else {
            Blame::Micro
        }
    }

    /// Whether the open subgoal has terminated (it can end on entry when no
    /// steps remain).
    pub fn subgoal_done(&self) -> Result<bool> {
        let t = self.tranche()?;
        t.subgoal.as_ref().map(|sg| sg.done).ok_or(EnvError::NoActiveSubgoal)
    }

    pub fn intrinsic_state(&self) -> Result<IntrinsicState> {
        let t = self.tranche()?;
        let sg = t.subgoal.as_ref().ok_or(EnvError::NoActiveSubgoal)?;
        let step = t.sim.step();
        let mut window = vec![0.0; WINDOW * LOB_FEATURES];
        for (row, chunk) in window.chunks_mut(LOB_FEATURES).enumerate() {
            let Some(idx) = (step + row + 1).checked_sub(WINDOW) else {
                continue;
            };
            if idx < t.start {
                continue;
            }
            let s = self.day.snapshot(idx);
            for l in 0..LEVELS {
                chunk[l] = (s.bid_prices[l] as f64 - t.first_mid) / t.first_mid * 100.0;
                chunk[LEVELS + l] = (s.ask_prices[l] as f64 - t.first_mid) / t.first_mid * 100.0;
                chunk[2 * LEVELS + l] = (s.bid_volumes[l] as f64).ln_1p() / 10.0;
                chunk[3 * LEVELS + l] = (s.ask_volumes[l] as f64).ln_1p() / 10.0;
            }
        }
        let progress = if sg.budget == 0 {
            [1.0, 1.0]
        } else {
            [sg.taken as f64 / sg.budget as f64, sg.filled as f64 / sg.size as f64]
        };
        Ok(IntrinsicState {
            window,
            subgoal_onehot: sg.g.one_hot(),
            progress,
        })
    }

    /// Applies one action, advances the market one step, and on the last
    /// step of the subgoal sells any remainder at market.
    pub fn micro_step(&mut self, action: Action) -> Result<MicroOutcome> {
        let side = self.cfg.side;
        let reward_cfg = self.cfg.reward;
        let cfg = self.cfg;
        let t = self.tranche.as_mut().ok_or(EnvError::NoActiveTranche)?;
        let tranche_index = t.index;
        let sg = match t.subgoal.as_mut() {
            Some(sg) if !sg.done => sg,
            _ => return Err(EnvError::NoActiveSubgoal),
        };
        let mut fills = Vec::new();
        if let Some(choice) = action.price_choice(side) {
            let child = LOT.min(sg.size - sg.filled);
            if child > 0 {
                fills.extend(t.sim.issue_order(side, choice, child)?);
            }
        }
        fills.extend(t.sim.advance_step()?.fills);
        sg.taken += 1;
        sg.filled += fills.iter().map(|f| f.volume).sum::<u64>();
        if sg.filled >= sg.size {
            sg.done = true;
        } else if sg.taken >= sg.budget {
            t.sim.cancel();
            let liq = t.sim.liquidate_market(side, sg.size - sg.filled)?;
            sg.filled = sg.size;
            fills.extend(liq);
            sg.done = true;
            sg.blame = Some(Self::blame_for(&cfg, sg));
        }
        sg.fills.extend_from_slice(&fills);

        let step_slippage_bp = fills_vwap(&fills).map(|p| slippage_bp(side, p, sg.benchmark));
        let mut reward = match reward_cfg.mode {
            RewardMode::Dense => step_slippage_bp.unwrap_or(0.0),
            RewardMode::Sparse if sg.done => {
                fills_vwap(&sg.fills).map_or(0.0, |p| slippage_bp(side, p, sg.benchmark))
            }
            RewardMode::Sparse => 0.0,
        };
        if sg.blame == Some(Blame::Micro) {
            reward = reward_cfg.fail_penalty;
        }
        let done = sg.done;
        let event = TraceEvent {
            step: t.sim.step(),
            tranche: tranche_index,
            subgoal: sg.g.id(),
            action,
            fills: fills.iter().map(|f| f.volume).sum(),
            reward_i: reward,
            reward_e: None,
        };
        if let Some(trace) = self.trace.as_mut() {
            trace.push(event);
        }
        Ok(MicroOutcome {
            state: self.intrinsic_state()?,
            reward,
            done,
            fills,
            step_slippage_bp,
        })
    }

    /// Closes a terminated subgoal and returns the subgoal-level reward and
    /// the next subgoal-level state.
    pub fn end_subgoal(&mut self) -> Result<MetaOutcome> {
        let side = self.cfg.side;
        let penalty = self.cfg.reward.fail_penalty;
        let day = self.day;
        let t = self.tranche.as_mut().ok_or(EnvError::NoActiveTranche)?;
        match t.subgoal.as_ref() {
            None => return Err(EnvError::NoActiveSubgoal),
            Some(sg) if !sg.done => return Err(EnvError::SubgoalRunning),
            Some(_) => {}
        }
        let sg = t.subgoal.take().expect("checked above");
        let slippage = fills_vwap(&sg.fills).map_or(0.0, |p| slippage_bp(side, p, sg.benchmark));
        let reward = match sg.blame {
            None => slippage,
            Some(Blame::Meta) => penalty,
            Some(Blame::Micro) => 0.0,
        };
        let step = t.sim.step();
        let executed = day.volume_in(sg.start + 1..step + 1) as f64 / sg.taken.max(1) as f64;
        let day_mean = day.volume_in(0..step + 1) as f64 / (step + 1) as f64;
        t.last_window_volume = if day_mean > 0.0 { executed / day_mean } else { 0.0 };
        if let Some(last) = self.trace.as_mut().and_then(|tr| tr.last_mut()) {
            last.reward_e = Some(reward);
        }
        Ok(MetaOutcome {
            reward,
            state: self.extrinsic_state()?,
            tranche_done: self.tranche_done()?,
            blame: sg.blame,
            steps: sg.taken,
            slippage_bp: slippage,
        })
    }

    /// Ends the tranche and hands back its fills.
    pub fn finish_tranche(&mut self) -> Result<TrancheResult> {
        if self.tranche()?.subgoal.is_some() {
            return Err(EnvError::SubgoalActive);
        }
        let t = self.tranche.take().expect("checked above");
        Ok(TrancheResult {
            tranche: t.index,
            order: t.order,
            fills: t.sim.ledger().fills().to_vec(),
            accounting: t.sim.accounting(),
        })
    }
}

/// Volume of liquidation fills among `fills`.
pub fn liquidated_volume(fills: &[Fill]) -> u64 {
    fills.iter().filter(|f| f.kind == FillKind::Liquidation).map(|f| f.volume).sum()
}
