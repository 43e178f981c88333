//! Replay execution simulator with a single resting child order.
//!
//! The market data is never modified: our orders neither move prices nor
//! consume displayed depth. A resting order gets a queue position estimated
//! from displayed volume and is filled only from historical trade flow that
//! reaches its price after the queue ahead has traded.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lob_data::{LobSnapshot, TradingDay, LOT};

/// Divisor turning displayed same-price volume into estimated queue ahead.
pub const IOTA: u64 = 3;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("no quote on the {0:?} side")]
    NoQuote(Side),
    #[error("simulation ended at step {0}")]
    SimulationEnded(usize),
    #[error("empty book")]
    EmptyBook,
    #[error("invalid order size {0}")]
    InvalidSize(u64),
    #[error("step range {start}..={end} outside the day")]
    BadRange { start: usize, end: usize },
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    /// +1 for a seller, -1 for a buyer.
    pub fn sign(self) -> f64 {
        match self {
            Side::Sell => 1.0,
            Side::Buy => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriceChoice {
    AtBid1,
    AtAsk1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillKind {
    Passive,
    Aggressive,
    Liquidation,
}

impl FillKind {
    fn as_str(self) -> &'static str {
        match self {
            FillKind::Passive => "passive",
            FillKind::Aggressive => "aggressive",
            FillKind::Liquidation => "liquidation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fill {
    pub step: usize,
    pub price: i64,
    pub volume: u64,
    pub kind: FillKind,
}

/// Volume-weighted price of a set of fills, in ticks.
pub fn fills_vwap(fills: &[Fill]) -> Option<f64> {
    let vol: u64 = fills.iter().map(|f| f.volume).sum();
    if vol == 0 {
        return None;
    }
    let notional: i128 = fills.iter().map(|f| f.price as i128 * f.volume as i128).sum();
    Some(notional as f64 / vol as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FillLedger {
    fills: Vec<Fill>,
    volume: u64,
    notional: i128,
}

impl FillLedger {
    pub fn record(&mut self, fill: Fill) {
        debug_assert!(fill.volume > 0);
        self.volume += fill.volume;
        self.notional += fill.price as i128 * fill.volume as i128;
        self.fills.push(fill);
    }

    pub fn fills(&self) -> &[Fill] {
        &self.fills
    }

    pub fn total_volume(&self) -> u64 {
        self.volume
    }

    pub fn volume_of(&self, kind: FillKind) -> u64 {
        self.fills.iter().filter(|f| f.kind == kind).map(|f| f.volume).sum()
    }

    pub fn vwap(&self) -> Option<f64> {
        (self.volume > 0).then(|| self.notional as f64 / self.volume as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,price,volume,kind\n");
        for f in &self.fills {
            writeln!(out, "{},{},{},{}", f.step, f.price, f.volume, f.kind.as_str()).expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_csv())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChildOrder {
    pub side: Side,
    pub price: i64,
    /// Unfilled shares still resting.
    pub size: u64,
    pub queue_ahead: u64,
    pub issued_step: usize,
    pub crossing: bool,
}

/// Share accounting for the child orders of one simulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accounting {
    pub issued: u64,
    pub filled_passive: u64,
    pub filled_aggressive: u64,
    /// Unfilled shares of canceled orders.
    pub returned: u64,
    pub liquidated: u64,
}

impl Accounting {
    /// `issued = filled + returned + still resting`.
    pub fn balances(&self, resting: u64) -> bool {
        self.issued == self.filled_passive + self.filled_aggressive + self.returned + resting
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub fills: Vec<Fill>,
    /// Historical volume in this step's slice at prices our order could trade at.
    pub eligible_volume: u64,
}

/// Simulates one order stream over snapshots `start..=end` of a day.
#[derive(Clone, Debug)]
pub struct ExchangeSim<'a> {
    day: &'a TradingDay,
    step: usize,
    end: usize,
    order: Option<ChildOrder>,
    ledger: FillLedger,
    accounting: Accounting,
}

impl<'a> ExchangeSim<'a> {
    pub fn new(day: &'a TradingDay, start: usize, end: usize) -> Result<Self> {
        if start > end || end >= day.num_steps() {
            return Err(SimError::BadRange { start, end });
        }
        Ok(Self {
            day,
            step: start,
            end,
            order: None,
            ledger: FillLedger::default(),
            accounting: Accounting::default(),
        })
    }

    pub fn day(&self) -> &'a TradingDay {
        self.day
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn end_step(&self) -> usize {
        self.end
    }

    pub fn finished(&self) -> bool {
        self.step >= self.end
    }

    pub fn snapshot(&self) -> &'a LobSnapshot {
        self.day.snapshot(self.step)
    }

    pub fn order(&self) -> Option<&ChildOrder> {
        self.order.as_ref()
    }

    pub fn resting(&self) -> u64 {
        self.order.map_or(0, |o| o.size)
    }

    pub fn ledger(&self) -> &FillLedger {
        &self.ledger
    }

    pub fn accounting(&self) -> Accounting {
        self.accounting
    }

    /// Cancels the resting order, returning its unfilled size.
    pub fn cancel(&mut self) -> u64 {
        let size = self.order.take().map_or(0, |o| o.size);
        self.accounting.returned += size;
        size
    }

    /// Replaces any resting order with a new one at the chosen touch.
    ///
    /// An order priced at the opposite touch crosses and fills immediately
    /// up to the displayed level-1 volume; any excess rests at that price
    /// with nothing ahead. Otherwise it joins the back of the estimated queue.
    /// Returns the immediate fills.
    pub fn issue_order(&mut self, side: Side, choice: PriceChoice, size: u64) -> Result<Vec<Fill>> {
        if self.finished() {
            return Err(SimError::SimulationEnded(self.step));
        }
        if size == 0 || size > LOT {
            return Err(SimError::InvalidSize(size));
        }
        let snap = self.snapshot();
        let (price, same_side_volume, opposite_volume, crossing) = match (side, choice) {
            (Side::Sell, PriceChoice::AtBid1) => (snap.bid_prices[0], 0, snap.bid_volumes[0], true),
            (Side::Sell, PriceChoice::AtAsk1) => (snap.ask_prices[0], snap.ask_volumes[0], 0, false),
            (Side::Buy, PriceChoice::AtAsk1) => (snap.ask_prices[0], 0, snap.ask_volumes[0], true),
            (Side::Buy, PriceChoice::AtBid1) => (snap.bid_prices[0], snap.bid_volumes[0], 0, false),
        };
        let quoted = if crossing { opposite_volume } else { same_side_volume };
        if quoted == 0 {
            let empty = match choice {
                PriceChoice::AtBid1 => Side::Buy,
                PriceChoice::AtAsk1 => Side::Sell,
            };
            return Err(SimError::NoQuote(empty));
        }
        self.cancel();
        self.accounting.issued += size;
        let mut fills = Vec::new();
        let mut remaining = size;
        if crossing {
            let v = remaining.min(opposite_volume);
            let fill = Fill {
                step: self.step,
                price,
                volume: v,
                kind: FillKind::Aggressive,
            };
            self.ledger.record(fill);
            self.accounting.filled_aggressive += v;
            fills.push(fill);
            remaining -= v;
        }
        if remaining > 0 {
            self.order = Some(ChildOrder {
                side,
                price,
                size: remaining,
                queue_ahead: if crossing { 0 } else { same_side_volume / IOTA },
                issued_step: self.step,
                crossing,
            });
        }
        Ok(fills)
    }

    /// Moves to the next snapshot and matches the resting order against the
    /// trades printed in between.
    pub fn advance_step(&mut self) -> Result<StepReport> {
        if self.finished() {
            return Err(SimError::SimulationEnded(self.step));
        }
        self.step += 1;
        let mut report = StepReport {
            step: self.step,
            fills: Vec::new(),
            eligible_volume: 0,
        };
        let Some(mut order) = self.order else {
            return Ok(report);
        };
        for t in self.day.trade_slice(self.step) {
            let eligible = match order.side {
                Side::Sell => t.price >= order.price,
                Side::Buy => t.price <= order.price,
            };
            if !eligible {
                continue;
            }
            report.eligible_volume += t.volume;
            let ahead = order.queue_ahead.min(t.volume);
            order.queue_ahead -= ahead;
            let available = t.volume - ahead;
            let v = available.min(order.size);
            if v > 0 {
                order.size -= v;
                let fill = Fill {
                    step: self.step,
                    price: order.price,
                    volume: v,
                    kind: FillKind::Passive,
                };
                self.ledger.record(fill);
                self.accounting.filled_passive += v;
                report.fills.push(fill);
            }
        }
        self.order = (order.size > 0).then_some(order);
        Ok(report)
    }

    /// Market order for `remaining` shares against the current snapshot.
    ///
    /// Walks the opposite book from level 1; whatever exceeds displayed depth
    /// fills at the deepest displayed price.
    pub fn liquidate_market(&mut self, side: Side, remaining: u64) -> Result<Vec<Fill>> {
        if remaining == 0 {
            return Ok(Vec::new());
        }
        let snap = self.snapshot();
        let (prices, volumes) = match side {
            Side::Sell => (&snap.bid_prices, &snap.bid_volumes),
            Side::Buy => (&snap.ask_prices, &snap.ask_volumes),
        };
        if volumes[0] == 0 {
            return Err(SimError::EmptyBook);
        }
        let mut fills = Vec::new();
        let mut left = remaining;
        for (&p, &v) in prices.iter().zip(volumes) {
            if v == 0 || left == 0 {
                break;
            }
            let take = left.min(v);
            fills.push(Fill {
                step: self.step,
                price: p,
                volume: take,
                kind: FillKind::Liquidation,
            });
            left -= take;
        }
        if left > 0 {
            fills.last_mut().expect("level 1 is populated").volume += left;
        }
        for f in &fills {
            self.ledger.record(*f);
            self.accounting.liquidated += f.volume;
        }
        Ok(fills)
    }
}
