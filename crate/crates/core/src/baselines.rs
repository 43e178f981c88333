//! Reference strategies: a time-sliced passive schedule ("VWAP" when fed a
//! volume-profile allocation), arrival-price pacing, flat single-level
//! Q-learning agents, and a market-mirroring oracle.

use serde::{Deserialize, Serialize};

use crate::exchange::{ExchangeSim, Fill, FillKind, PriceChoice, Side, SimError};
use crate::hmdp::{Action, EnvError, HmdpEnv, Subgoal, TrancheResult};
use crate::lob_data::{TradingDay, LOT, STEPS_PER_TRANCHE};
use crate::micro_trader::{without_subgoal, MicroNetConfig, MicroTrader};
use crate::rl::{AgentConfig, LearnSchedule, RlError, TargetKind, Transition};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// What a rule sees before each step of a tranche.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RulePolicyState {
    pub quota: u64,
    pub filled: u64,
    /// Steps already taken in the tranche.
    pub elapsed: usize,
    /// Child orders issued so far, in lots.
    pub issued_lots: u64,
    /// A resting order already sits at the passive touch.
    pub resting_at_touch: bool,
}

impl RulePolicyState {
    pub fn time_ratio(&self) -> f64 {
        self.elapsed as f64 / STEPS_PER_TRANCHE as f64
    }

    pub fn fill_ratio(&self) -> f64 {
        if self.quota == 0 {
            1.0
        } else {
            self.filled as f64 / self.quota as f64
        }
    }
}

/// Lots that should have been issued by the end of the current step.
pub fn twap_schedule(quota: u64, elapsed: usize) -> u64 {
    let lots = quota.div_ceil(LOT);
    (lots * (elapsed as u64 + 1)).div_ceil(STEPS_PER_TRANCHE as u64).min(lots)
}

/// One passive lot whenever issuance lags the linear schedule.
pub fn twap_policy_step(s: &RulePolicyState) -> Action {
    if s.filled < s.quota && s.issued_lots < twap_schedule(s.quota, s.elapsed) {
        Action::Passive
    } else {
        Action::Wait
    }
}

/// Cross when behind the clock, quote passively when up to ten points
/// ahead, and stop issuing beyond that.
pub fn ap_policy_step(s: &RulePolicyState) -> Action {
    if s.filled >= s.quota {
        return Action::Wait;
    }
    let (fill, time) = (s.fill_ratio(), s.time_ratio());
    if fill < time {
        Action::Cross
    } else if fill <= time + 0.10 && !s.resting_at_touch {
        Action::Passive
    } else {
        Action::Wait
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Twap,
    ArrivalPrice,
}

impl RuleKind {
    pub fn step(self, s: &RulePolicyState) -> Action {
        match self {
            RuleKind::Twap => twap_policy_step(s),
            RuleKind::ArrivalPrice => ap_policy_step(s),
        }
    }
}

/// Runs a rule over one tranche and sells any remainder at market on the
/// final snapshot.
pub fn run_rule_tranche(day: &TradingDay, tranche: usize, quota: u64, side: Side, rule: RuleKind) -> Result<TrancheResult> {
    let range = TradingDay::tranche_range(tranche);
    let mut sim = ExchangeSim::new(day, range.start, range.end - 1)?;
    let mut issued_lots = 0;
    while !sim.finished() {
        let filled = sim.ledger().total_volume();
        let passive_price = match Action::Passive.price_choice(side).expect("priced") {
            PriceChoice::AtBid1 => sim.snapshot().bid_prices[0],
            PriceChoice::AtAsk1 => sim.snapshot().ask_prices[0],
        };
        let state = RulePolicyState {
            quota,
            filled,
            elapsed: sim.step() - range.start,
            issued_lots,
            resting_at_touch: sim.order().is_some_and(|o| o.price == passive_price && !o.crossing),
        };
        let action = rule.step(&state);
        if let Some(choice) = action.price_choice(side) {
            match sim.issue_order(side, choice, LOT.min(quota - filled)) {
                Ok(_) => issued_lots += 1,
                // an empty touch is skipped, the clock still runs
                Err(SimError::NoQuote(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        sim.advance_step()?;
    }
    sim.cancel();
    let left = quota - sim.ledger().total_volume();
    sim.liquidate_market(side, left)?;
    Ok(TrancheResult {
        tranche,
        order: quota,
        fills: sim.ledger().fills().to_vec(),
        accounting: sim.accounting(),
    })
}

/// Fills that copy every market trade of the day one-for-one.
pub fn mirror_market_fills(day: &TradingDay) -> Vec<Fill> {
    (1..day.num_steps())
        .flat_map(|k| {
            day.trade_slice(k).iter().map(move |t| Fill {
                step: k,
                price: t.price,
                volume: t.volume,
                kind: FillKind::Passive,
            })
        })
        .collect()
}

/// Subgoal standing in for a fixed pace: 16% of the tranche per 100 steps.
pub const FLAT_SUBGOAL: u8 = 5;

pub fn flat_agent(kind: TargetKind, cfg: AgentConfig, net: &MicroNetConfig, seed: u64) -> Result<MicroTrader> {
    Ok(MicroTrader::new(AgentConfig { kind, ..cfg }, net, seed)?)
}

/// Outcome of one agent-driven tranche with the rewards and updates it saw.
#[derive(Clone, Debug, Default)]
pub struct TrancheRun {
    pub result: TrancheResult,
    pub micro_reward: f64,
    pub meta_reward: f64,
    /// Subgoal ids in the order they were chosen.
    pub subgoals: Vec<u8>,
    pub loss_sum: f64,
    pub updates: usize,
}

/// One tranche for a single-level agent: a fixed chain of equal mini-tranches,
/// with the subgoal input zeroed. `learn` enables replay and updates.
pub fn run_flat_tranche(
    env: &mut HmdpEnv<'_>,
    agent: &mut MicroTrader,
    tranche: usize,
    order: u64,
    eps: f64,
    mut learn: Option<&mut LearnSchedule>,
) -> Result<TrancheRun> {
    let g = Subgoal::new(FLAT_SUBGOAL)?;
    let mut run = TrancheRun::default();
    env.begin_tranche(tranche, order)?;
    while !env.tranche_done()? {
        let mut s = without_subgoal(env.begin_subgoal(g)?);
        run.subgoals.push(g.id());
        while !env.subgoal_done()? {
            let a = agent.select_action(&s, eps)?;
            let o = env.micro_step(a)?;
            run.micro_reward += o.reward;
            let next = without_subgoal(o.state);
            if let Some(sched) = learn.as_deref_mut() {
                agent.observe(Transition {
                    state: s,
                    action: a.id(),
                    reward: o.reward,
                    next_state: next.clone(),
                    terminal: o.done,
                    span: 1,
                });
                if sched.tick() && agent.agent().can_learn() {
                    run.loss_sum += agent.learn()?;
                    run.updates += 1;
                }
            }
            s = next;
        }
        run.meta_reward += env.end_subgoal()?.reward;
    }
    run.result = env.finish_tranche()?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmdp::EnvConfig;
    use crate::lob_data::{fixtures, generate_synthetic_day, SynthParams};

    fn state(quota_lots: u64, filled_lots: u64, elapsed: usize) -> RulePolicyState {
        RulePolicyState {
            quota: quota_lots * LOT,
            filled: filled_lots * LOT,
            elapsed,
            issued_lots: 0,
            resting_at_touch: false,
        }
    }

    #[test]
    fn ap_examples() {
        // time ratio 0.5 at step 300
        assert_eq!(ap_policy_step(&state(100, 30, 300)), Action::Cross);
        assert_eq!(ap_policy_step(&state(100, 55, 300)), Action::Passive);
        assert_eq!(ap_policy_step(&state(100, 65, 300)), Action::Wait);
        assert_eq!(ap_policy_step(&state(100, 50, 300)), Action::Passive);
        let resting = RulePolicyState {
            resting_at_touch: true,
            ..state(100, 55, 300)
        };
        assert_eq!(ap_policy_step(&resting), Action::Wait);
    }

    #[test]
    fn twap_schedule_examples() {
        assert!(twap_schedule(24 * LOT, 299) >= 12);
        assert_eq!(twap_schedule(24 * LOT, STEPS_PER_TRANCHE - 1), 24);
        assert_eq!(twap_policy_step(&state(0, 0, 10)), Action::Wait);
        let mut s = state(24, 0, 0);
        assert_eq!(twap_policy_step(&s), Action::Passive);
        s.issued_lots = 1;
        assert_eq!(twap_policy_step(&s), Action::Wait);
    }

    #[test]
    fn twap_tracks_linear_schedule() {
        for lots in [1u64, 7, 24, 150, 599] {
            let mut issued = 0;
            for e in 0..STEPS_PER_TRANCHE {
                let s = RulePolicyState {
                    issued_lots: issued,
                    ..state(lots, 0, e)
                };
                if twap_policy_step(&s) == Action::Passive {
                    issued += 1;
                }
                let ideal = lots as f64 * (e + 1) as f64 / STEPS_PER_TRANCHE as f64;
                assert!((issued as f64 - ideal).abs() < 1.0, "lots {lots} step {e}");
            }
            assert_eq!(issued, lots);
        }
    }

    #[test]
    fn twap_on_a_day_issues_on_schedule() {
        let day = generate_synthetic_day(0, 4, &SynthParams::default()).unwrap();
        let r = run_rule_tranche(&day, 2, 2400, Side::Sell, RuleKind::Twap).unwrap();
        assert_eq!(r.fills.iter().map(|f| f.volume).sum::<u64>(), 2400);
        assert_eq!(r.accounting.issued, 2400);
    }

    #[test]
    fn liquidation_covers_unfilled_lots() {
        // nobody trades, so every lot is left for the final market sale
        let day = fixtures::flat_day(0, 1000, 1001, 10_000, &[]);
        let r = run_rule_tranche(&day, 0, 300, Side::Sell, RuleKind::Twap).unwrap();
        let liq: u64 = r.fills.iter().filter(|f| f.kind == FillKind::Liquidation).map(|f| f.volume).sum();
        assert_eq!(liq, 300);
        assert_eq!(r.accounting.liquidated, 300);
    }

    #[test]
    fn rules_always_fill() {
        for seed in 0..3 {
            let day = generate_synthetic_day(seed as u32, seed, &SynthParams::default()).unwrap();
            for rule in [RuleKind::Twap, RuleKind::ArrivalPrice] {
                for tranche in [0, 7] {
                    let r = run_rule_tranche(&day, tranche, 15_000, Side::Sell, rule).unwrap();
                    assert_eq!(r.fills.iter().map(|f| f.volume).sum::<u64>(), 15_000);
                    assert!(r.accounting.balances(0));
                }
            }
        }
    }

    #[test]
    fn mirror_oracle_matches_market_vwap() {
        let day = generate_synthetic_day(0, 9, &SynthParams::default()).unwrap();
        let fills = mirror_market_fills(&day);
        let ours = crate::exchange::fills_vwap(&fills).unwrap();
        assert!((ours - day.daily_vwap().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn flat_tranche_fills_completely() {
        let day = generate_synthetic_day(0, 5, &SynthParams::default()).unwrap();
        let cfg = EnvConfig {
            meta_blame: false,
            ..EnvConfig::default()
        };
        let mut env = HmdpEnv::new(&day, cfg).unwrap();
        let small = MicroNetConfig {
            model_dim: 8,
            ff_dim: 8,
            branch_dim: 4,
            ..MicroNetConfig::default()
        };
        let mut agent = flat_agent(TargetKind::Dqn, AgentConfig::default(), &small, 0).unwrap();
        let mut sched = LearnSchedule::new(4);
        let r = run_flat_tranche(&mut env, &mut agent, 3, 5_000, 1.0, Some(&mut sched)).unwrap().result;
        assert_eq!(r.fills.iter().map(|f| f.volume).sum::<u64>(), 5_000);
        // one transition per step until the quota is done
        let n = agent.agent().replay().len();
        assert!(n > 0 && n < STEPS_PER_TRANCHE, "{n}");
    }
}
