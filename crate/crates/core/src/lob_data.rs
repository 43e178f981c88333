//! Level-2 market data: snapshots, trades, whole trading days, CSV ingest,
//! the synthetic day generator and tranche volume profiles.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::kv::{self, KvError};

/// Quote levels kept per side.
pub const LEVELS: usize = 5;
pub const TRANCHES: usize = 8;
pub const STEPS_PER_TRANCHE: usize = 600;
pub const STEPS_PER_DAY: usize = TRANCHES * STEPS_PER_TRANCHE;
pub const SNAPSHOT_INTERVAL_MS: i64 = 3_000;
/// Minimum trade unit in shares.
pub const LOT: u64 = 100;

/// File in a replay directory listing day ids to skip (one per line).
pub const EXCLUSION_FILE: &str = "excluded_days.txt";

const SNAPSHOT_HEADER: &str = "ts,bp1,bp2,bp3,bp4,bp5,bv1,bv2,bv3,bv4,bv5,ap1,ap2,ap3,ap4,ap5,av1,av2,av3,av4,av5";
const TRADE_HEADER: &str = "ts,price,volume";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("crossed book at line {0}")]
    CrossedBook(usize),
    #[error("short day: {0} snapshots")]
    ShortDay(usize),
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("day has zero traded volume")]
    ZeroVolumeDay,
    #[error("invalid volume profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LobSnapshot {
    /// Milliseconds since the day's open.
    pub timestamp: i64,
    pub bid_prices: [i64; LEVELS],
    pub bid_volumes: [u64; LEVELS],
    pub ask_prices: [i64; LEVELS],
    pub ask_volumes: [u64; LEVELS],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BookViolation {
    Crossed,
    NonMonotone,
    HoleInDepth,
}

impl LobSnapshot {
    pub fn validate(&self) -> std::result::Result<(), BookViolation> {
        if self.ask_prices[0] <= self.bid_prices[0] {
            return Err(BookViolation::Crossed);
        }
        for i in 1..LEVELS {
            if self.bid_prices[i] >= self.bid_prices[i - 1] || self.ask_prices[i] <= self.ask_prices[i - 1] {
                return Err(BookViolation::NonMonotone);
            }
        }
        for vols in [&self.bid_volumes, &self.ask_volumes] {
            if let Some(first_empty) = vols.iter().position(|&v| v == 0) {
                if vols[first_empty..].iter().any(|&v| v > 0) {
                    return Err(BookViolation::HoleInDepth);
                }
            }
        }
        Ok(())
    }

    pub fn mid(&self) -> f64 {
        (self.bid_prices[0] + self.ask_prices[0]) as f64 / 2.0
    }

    pub fn spread(&self) -> i64 {
        self.ask_prices[0] - self.bid_prices[0]
    }

    pub fn bid_depth(&self) -> u64 {
        self.bid_volumes.iter().sum()
    }

    pub fn ask_depth(&self) -> u64 {
        self.ask_volumes.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TradeRecord {
    pub timestamp: i64,
    pub price: i64,
    pub volume: u64,
}

/// One validated day: exactly [`STEPS_PER_DAY`] snapshots.
///
/// Step `k` owns the trades with `snapshot[k-1].ts < ts <= snapshot[k].ts`;
/// step 0 owns everything up to the first snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct TradingDay {
    pub day_id: u32,
    snapshots: Vec<LobSnapshot>,
    trades: Vec<TradeRecord>,
    slice_end: Vec<usize>,
    cum_volume: Vec<u64>,
    cum_notional: Vec<i128>,
}

impl TradingDay {
    /// Validates and indexes a day. Reported line numbers assume one header
    /// line, i.e. row `i` is line `i + 2`.
    pub fn new(day_id: u32, snapshots: Vec<LobSnapshot>, trades: Vec<TradeRecord>) -> Result<Self> {
        if snapshots.len() != STEPS_PER_DAY {
            return Err(DataError::ShortDay(snapshots.len()));
        }
        for (i, s) in snapshots.iter().enumerate() {
            match s.validate() {
                Ok(()) => {}
                Err(BookViolation::Crossed) => return Err(DataError::CrossedBook(i + 2)),
                Err(v) => {
                    return Err(DataError::MalformedRow {
                        line: i + 2,
                        reason: format!("{v:?}"),
                    })
                }
            }
            if i > 0 && s.timestamp <= snapshots[i - 1].timestamp {
                return Err(DataError::MalformedRow {
                    line: i + 2,
                    reason: "snapshot timestamps must increase".into(),
                });
            }
        }
        let last_ts = snapshots[STEPS_PER_DAY - 1].timestamp;
        for (i, t) in trades.iter().enumerate() {
            let bad = if t.volume == 0 {
                Some("zero trade volume")
            } else if t.price <= 0 {
                Some("non-positive trade price")
            } else if i > 0 && t.timestamp < trades[i - 1].timestamp {
                Some("trade timestamps decrease")
            } else if t.timestamp > last_ts {
                Some("trade after the last snapshot")
            } else {
                None
            };
            if let Some(reason) = bad {
                return Err(DataError::MalformedRow {
                    line: i + 2,
                    reason: reason.into(),
                });
            }
        }

        let mut slice_end = Vec::with_capacity(STEPS_PER_DAY);
        let mut cum_volume = Vec::with_capacity(STEPS_PER_DAY);
        let mut cum_notional = Vec::with_capacity(STEPS_PER_DAY);
        let (mut j, mut vol, mut notional) = (0usize, 0u64, 0i128);
        for s in &snapshots {
            while j < trades.len() && trades[j].timestamp <= s.timestamp {
                vol += trades[j].volume;
                notional += trades[j].price as i128 * trades[j].volume as i128;
                j += 1;
            }
            slice_end.push(j);
            cum_volume.push(vol);
            cum_notional.push(notional);
        }
        Ok(Self {
            day_id,
            snapshots,
            trades,
            slice_end,
            cum_volume,
            cum_notional,
        })
    }

    pub fn snapshots(&self) -> &[LobSnapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, step: usize) -> &LobSnapshot {
        &self.snapshots[step]
    }

    pub fn trades(&self) -> &[TradeRecord] {
        &self.trades
    }

    pub fn num_steps(&self) -> usize {
        self.snapshots.len()
    }

    /// Trades executed during step `step`.
    pub fn trade_slice(&self, step: usize) -> &[TradeRecord] {
        let start = if step == 0 { 0 } else { self.slice_end[step - 1] };
        &self.trades[start..self.slice_end[step]]
    }

    pub fn tranche_range(tranche: usize) -> Range<usize> {
        tranche * STEPS_PER_TRANCHE..(tranche + 1) * STEPS_PER_TRANCHE
    }

    pub fn tranche_boundaries() -> [Range<usize>; TRANCHES] {
        std::array::from_fn(Self::tranche_range)
    }

    /// Market volume over the trade slices of `steps`.
    pub fn volume_in(&self, steps: Range<usize>) -> u64 {
        if steps.is_empty() {
            return 0;
        }
        let before = if steps.start == 0 { 0 } else { self.cum_volume[steps.start - 1] };
        self.cum_volume[steps.end - 1] - before
    }

    /// Market VWAP in ticks over the trade slices of `steps`; `None` without trades.
    pub fn vwap_in(&self, steps: Range<usize>) -> Option<f64> {
        let vol = self.volume_in(steps.clone());
        if vol == 0 {
            return None;
        }
        let before = if steps.start == 0 { 0 } else { self.cum_notional[steps.start - 1] };
        Some((self.cum_notional[steps.end - 1] - before) as f64 / vol as f64)
    }

    pub fn total_volume(&self) -> u64 {
        self.cum_volume.last().copied().unwrap_or(0)
    }

    pub fn daily_vwap(&self) -> Option<f64> {
        self.vwap_in(0..self.num_steps())
    }
}

/// Per-tranche share of daily traded volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeProfile {
    pub fractions: [f64; TRANCHES],
}

impl VolumeProfile {
    pub fn new(fractions: [f64; TRANCHES]) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DataError::InvalidProfile(format!("fraction outside [0,1]: {fractions:?}")));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidProfile(format!("fractions sum to {sum}")));
        }
        Ok(Self { fractions })
    }

    pub fn uniform() -> Self {
        Self {
            fractions: [1.0 / TRANCHES as f64; TRANCHES],
        }
    }
}

pub fn tranche_volumes(day: &TradingDay) -> [u64; TRANCHES] {
    std::array::from_fn(|i| day.volume_in(TradingDay::tranche_range(i)))
}

pub fn compute_profile(day: &TradingDay) -> Result<VolumeProfile> {
    let vols = tranche_volumes(day);
    let total: u64 = vols.iter().sum();
    if total == 0 {
        return Err(DataError::ZeroVolumeDay);
    }
    VolumeProfile::new(vols.map(|v| v as f64 / total as f64))
}

fn parse_row<const N: usize>(line: &str, line_no: usize) -> Result<[i64; N]> {
    let mut out = [0i64; N];
    let mut fields = line.trim_end().split(',');
    for slot in out.iter_mut() {
        let field = fields.next().ok_or_else(|| DataError::MalformedRow {
            line: line_no,
            reason: format!("expected {N} fields"),
        })?;
        *slot = field.trim().parse().map_err(|_| DataError::MalformedRow {
            line: line_no,
            reason: format!("not an integer: {field:?}"),
        })?;
    }
    if fields.next().is_some() {
        return Err(DataError::MalformedRow {
            line: line_no,
            reason: format!("expected {N} fields"),
        });
    }
    Ok(out)
}

fn read_rows<const N: usize>(path: &Path, header: &str) -> Result<Vec<[i64; N]>> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        _ => {
            return Err(DataError::MalformedRow {
                line: 1,
                reason: format!("expected header {header:?}"),
            })
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_row::<N>(l, i + 2))
        .collect()
}

fn non_negative(v: i64, line: usize) -> Result<u64> {
    u64::try_from(v).map_err(|_| DataError::MalformedRow {
        line,
        reason: "negative volume".into(),
    })
}

fn snapshot_from_row(row: &[i64; 21], line: usize) -> Result<LobSnapshot> {
    let mut s = LobSnapshot {
        timestamp: row[0],
        bid_prices: [0; LEVELS],
        bid_volumes: [0; LEVELS],
        ask_prices: [0; LEVELS],
        ask_volumes: [0; LEVELS],
    };
    for l in 0..LEVELS {
        s.bid_prices[l] = row[1 + l];
        s.bid_volumes[l] = non_negative(row[6 + l], line)?;
        s.ask_prices[l] = row[11 + l];
        s.ask_volumes[l] = non_negative(row[16 + l], line)?;
    }
    Ok(s)
}

/// Last-observation-carried-forward onto the fixed snapshot grid, keeping
/// the first [`STEPS_PER_DAY`] grid points.
fn resample(rows: &[LobSnapshot]) -> Vec<LobSnapshot> {
    let t0 = rows[0].timestamp;
    let last = rows[rows.len() - 1].timestamp;
    let mut out = Vec::with_capacity(STEPS_PER_DAY);
    let mut j = 0;
    let mut t = t0;
    while t <= last && out.len() < STEPS_PER_DAY {
        while j + 1 < rows.len() && rows[j + 1].timestamp <= t {
            j += 1;
        }
        out.push(LobSnapshot { timestamp: t, ..rows[j] });
        t += SNAPSHOT_INTERVAL_MS;
    }
    out
}

/// Loads one day from the snapshot and trade CSV files.
///
/// Denser snapshot feeds are resampled onto the 3 s grid; trades after the
/// last kept grid point are then dropped. At the native cadence a trade after
/// the last snapshot is a malformed row.
pub fn load_day(day_id: u32, snapshot_file: &Path, trade_file: &Path) -> Result<TradingDay> {
    let rows = read_rows::<21>(snapshot_file, SNAPSHOT_HEADER)?;
    let mut snapshots = rows
        .iter()
        .enumerate()
        .map(|(i, r)| snapshot_from_row(r, i + 2))
        .collect::<Result<Vec<_>>>()?;
    if snapshots.len() < STEPS_PER_DAY {
        return Err(DataError::ShortDay(snapshots.len()));
    }
    let resampled = snapshots.len() > STEPS_PER_DAY;
    if resampled {
        for (i, s) in snapshots.iter().enumerate() {
            if s.validate() == Err(BookViolation::Crossed) {
                return Err(DataError::CrossedBook(i + 2));
            }
        }
        snapshots = resample(&snapshots);
        if snapshots.len() < STEPS_PER_DAY {
            return Err(DataError::ShortDay(snapshots.len()));
        }
    }
    let trade_rows = read_rows::<3>(trade_file, TRADE_HEADER)?;
    let mut trades = Vec::with_capacity(trade_rows.len());
    for (i, r) in trade_rows.iter().enumerate() {
        trades.push(TradeRecord {
            timestamp: r[0],
            price: r[1],
            volume: non_negative(r[2], i + 2)?,
        });
    }
    if resampled {
        let last = snapshots[STEPS_PER_DAY - 1].timestamp;
        trades.retain(|t| t.timestamp <= last);
    }
    TradingDay::new(day_id, snapshots, trades)
}

pub fn write_day(day: &TradingDay, snapshot_file: &Path, trade_file: &Path) -> Result<()> {
    let mut out = String::with_capacity(day.snapshots.len() * 96);
    out.push_str(SNAPSHOT_HEADER);
    out.push('\n');
    for s in &day.snapshots {
        write!(out, "{}", s.timestamp).expect("string write");
        for v in s.bid_prices {
            write!(out, ",{v}").expect("string write");
        }
        for v in s.bid_volumes {
            write!(out, ",{v}").expect("string write");
        }
        for v in s.ask_prices {
            write!(out, ",{v}").expect("string write");
        }
        for v in s.ask_volumes {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(snapshot_file, out)?;

    let mut out = String::with_capacity(day.trades.len() * 24);
    out.push_str(TRADE_HEADER);
    out.push('\n');
    for t in &day.trades {
        writeln!(out, "{},{},{}", t.timestamp, t.price, t.volume).expect("string write");
    }
    fs::write(trade_file, out)?;
    Ok(())
}

pub fn day_file_paths(dir: &Path, day_id: u32) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{day_id:04}.snapshots.csv")),
        dir.join(format!("{day_id:04}.trades.csv")),
    )
}

/// Day ids listed in the directory's exclusion file (price-limit days).
pub fn excluded_days(dir: &Path) -> Result<BTreeSet<u32>> {
    let path = dir.join(EXCLUSION_FILE);
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.insert(line.parse().map_err(|_| DataError::MalformedRow {
            line: i + 1,
            reason: format!("bad day id {line:?}"),
        })?);
    }
    Ok(out)
}

/// Loads every `NNNN.snapshots.csv` / `NNNN.trades.csv` pair in `dir`,
/// ordered by day id, skipping excluded days.
pub fn load_replay_dir(dir: &Path) -> Result<Vec<TradingDay>> {
    if !dir.is_dir() {
        return Err(DataError::MissingFile(dir.to_path_buf()));
    }
    let excluded = excluded_days(dir)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".snapshots.csv") {
            if let Ok(id) = stem.parse::<u32>() {
                if !excluded.contains(&id) {
                    ids.push(id);
                }
            }
        }
    }
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let (s, t) = day_file_paths(dir, id);
            load_day(id, &s, &t)
        })
        .collect()
}

/// Parameters of the synthetic day generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub base_price_ticks: i64,
    /// Currency units per tick.
    pub tick_size: f64,
    /// Depth of the intraday U-shape, in `[0, 1]`.
    pub u_amplitude: f64,
    /// Standard deviation of the mid-price random walk, ticks per step.
    pub noise_scale: f64,
    pub avg_daily_volume: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            base_price_ticks: 1_000,
            tick_size: 0.01,
            u_amplitude: 0.6,
            noise_scale: 0.25,
            avg_daily_volume: 6_000_000.0,
        }
    }
}

/// Expected trades per step at unit intensity.
const TRADES_PER_STEP: f64 = 2.5;

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.base_price_ticks <= 0 || !(self.tick_size > 0.0) {
            return Err(DataError::InvalidParams("price and tick size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.u_amplitude) {
            return Err(DataError::InvalidParams(format!(
                "u_amplitude {} outside [0, 1]",
                self.u_amplitude
            )));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(DataError::InvalidParams("noise_scale must be finite and >= 0".into()));
        }
        if !(self.avg_daily_volume >= LOT as f64) || !self.avg_daily_volume.is_finite() {
            return Err(DataError::InvalidParams("avg_daily_volume below one lot".into()));
        }
        Ok(())
    }

    /// Relative trading intensity at day fraction `x ∈ [0, 1]`; integrates to 1.
    pub fn intensity(&self, x: f64) -> f64 {
        let c = 2.0 * x - 1.0;
        1.0 + self.u_amplitude * (3.0 * c * c - 1.0)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = kv::parse(text)?;
        let mut p = Self::default();
        for (key, value) in &map {
            match key.as_str() {
                "base_price_ticks" => p.base_price_ticks = kv::value(key, value)?,
                "tick_size" => p.tick_size = kv::value(key, value)?,
                "u_amplitude" => p.u_amplitude = kv::value(key, value)?,
                "noise_scale" => p.noise_scale = kv::value(key, value)?,
                "avg_daily_volume" => p.avg_daily_volume = kv::value(key, value)?,
                _ => return Err(KvError::UnknownKey(key.clone()).into()),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "base_price_ticks = {}\ntick_size = {}\nu_amplitude = {}\nnoise_scale = {}\navg_daily_volume = {}\n",
            self.base_price_ticks, self.tick_size, self.u_amplitude, self.noise_scale, self.avg_daily_volume
        )
    }
}

/// Deterministic synthetic day: random-walk mid, 1-2 tick spread, five
/// populated levels per side, Poisson trade flow with U-shaped intensity at
/// the previous snapshot's touch (occasionally one tick through it).
pub fn generate_synthetic_day(day_id: u32, seed: u64, params: &SynthParams) -> Result<TradingDay> {
    params.validate()?;
    let mut rng = crate::seeded_rng(seed, 0);
    let base = params.base_price_ticks as f64;
    let lo = (base * 0.92).max(LEVELS as f64 + 3.0);
    let hi = base * 1.08;
    let walk = Normal::new(0.0, params.noise_scale.max(1e-12)).expect("finite sigma");
    let mean_lots = (params.avg_daily_volume / (STEPS_PER_DAY as f64 * TRADES_PER_STEP * LOT as f64)).max(1.0);
    let extra_lots = if mean_lots > 1.0 {
        Some(Poisson::new(mean_lots - 1.0).expect("positive rate"))
    } else {
        None
    };

    let mut x = base;
    let mut snapshots = Vec::with_capacity(STEPS_PER_DAY);
    let mut trades = Vec::new();
    for k in 0..STEPS_PER_DAY {
        let ts = k as i64 * SNAPSHOT_INTERVAL_MS;
        if k > 0 {
            let prev: &LobSnapshot = &snapshots[k - 1];
            let frac = (k as f64 - 0.5) / STEPS_PER_DAY as f64;
            let rate = TRADES_PER_STEP * params.intensity(frac);
            let n = if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize
            } else {
                0
            };
            let mut stamps: Vec<i64> = (0..n)
                .map(|_| prev.timestamp + rng.gen_range(1..=SNAPSHOT_INTERVAL_MS))
                .collect();
            stamps.sort_unstable();
            for t in stamps {
                let buyer = rng.gen_bool(0.5);
                let through = rng.gen_bool(0.1);
                let price = match (buyer, through) {
                    (true, false) => prev.ask_prices[0],
                    (true, true) => prev.ask_prices[0] + 1,
                    (false, false) => prev.bid_prices[0],
                    (false, true) => prev.bid_prices[0] - 1,
                };
                let lots = 1 + extra_lots.map_or(0, |d| d.sample(&mut rng) as u64);
                trades.push(TradeRecord {
                    timestamp: t,
                    price,
                    volume: lots * LOT,
                });
            }
            x = (x + walk.sample(&mut rng)).clamp(lo, hi);
        }
        let spread: i64 = if rng.gen_bool(0.7) { 1 } else { 2 };
        let bid1 = (x - spread as f64 / 2.0).round() as i64;
        let ask1 = bid1 + spread;
        let mut s = LobSnapshot {
            timestamp: ts,
            bid_prices: std::array::from_fn(|l| bid1 - l as i64),
            bid_volumes: [0; LEVELS],
            ask_prices: std::array::from_fn(|l| ask1 + l as i64),
            ask_volumes: [0; LEVELS],
        };
        for l in 0..LEVELS {
            s.bid_volumes[l] = rng.gen_range(2..=30u64) * LOT;
            s.ask_volumes[l] = rng.gen_range(2..=30u64) * LOT;
        }
        snapshots.push(s);
    }
    TradingDay::new(day_id, snapshots, trades)
}

/// A sequence of synthetic days whose U-shape depth drifts sinusoidally
/// around the base amplitude, giving profile histories a slow trend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSeries {
    pub params: SynthParams,
    pub drift_amplitude: f64,
    pub drift_period_days: f64,
}

impl SynthSeries {
    pub fn stationary(params: SynthParams) -> Self {
        Self {
            params,
            drift_amplitude: 0.0,
            drift_period_days: 1.0,
        }
    }

    pub fn params_for_day(&self, day_index: usize) -> SynthParams {
        let phase = 2.0 * std::f64::consts::PI * day_index as f64 / self.drift_period_days;
        SynthParams {
            u_amplitude: (self.params.u_amplitude + self.drift_amplitude * phase.sin()).clamp(0.0, 1.0),
            ..self.params.clone()
        }
    }

    pub fn day(&self, seed: u64, day_index: usize) -> Result<TradingDay> {
        let day_seed = crate::derive_seed(seed, day_index as u64);
        generate_synthetic_day(day_index as u32, day_seed, &self.params_for_day(day_index))
    }

    pub fn days(&self, seed: u64, range: Range<usize>) -> Result<Vec<TradingDay>> {
        range.map(|d| self.day(seed, d)).collect()
    }
}

/// Hand-built days for tests and examples.
pub mod fixtures {
    use super::*;

    /// Constant book (`bid1`/`ask1` with `depth` shares on every level) and
    /// trades given as `(step, price, volume)`; each trade lands inside its
    /// step's slice.
    pub fn flat_day(day_id: u32, bid1: i64, ask1: i64, depth: u64, trades: &[(usize, i64, u64)]) -> TradingDay {
        let snapshots = (0..STEPS_PER_DAY)
            .map(|k| LobSnapshot {
                timestamp: k as i64 * SNAPSHOT_INTERVAL_MS,
                bid_prices: std::array::from_fn(|l| bid1 - l as i64),
                bid_volumes: [depth; LEVELS],
                ask_prices: std::array::from_fn(|l| ask1 + l as i64),
                ask_volumes: [depth; LEVELS],
            })
            .collect();
        let mut sorted = trades.to_vec();
        sorted.sort_by_key(|t| t.0);
        let trades = sorted
            .iter()
            .map(|&(step, price, volume)| TradeRecord {
                timestamp: step as i64 * SNAPSHOT_INTERVAL_MS - if step == 0 { 0 } else { 1 },
                price,
                volume,
            })
            .collect();
        TradingDay::new(day_id, snapshots, trades).expect("fixture day is valid")
    }

    /// Flat book with `volume` shares per tranche split into one trade per
    /// step of 100-share trades at mid-spread alternating sides.
    pub fn day_with_tranche_volumes(day_id: u32, tranche_volumes: [u64; TRANCHES]) -> TradingDay {
        let mut trades = Vec::new();
        for (i, &v) in tranche_volumes.iter().enumerate() {
            let lots = v / LOT;
            let start = TradingDay::tranche_range(i).start + 1;
            for j in 0..lots as usize {
                let price = if j % 2 == 0 { 1001 } else { 1000 };
                trades.push((start + j % (STEPS_PER_TRANCHE - 1), price, LOT));
            }
        }
        flat_day(day_id, 1000, 1001, 1000, &trades)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn day_splits_into_eight_tranches_of_600() {
        let day = generate_synthetic_day(0, 1, &SynthParams::default()).unwrap();
        let b = TradingDay::tranche_boundaries();
        assert_eq!(b.len(), 8);
        for (i, r) in b.iter().enumerate() {
            assert_eq!(r.len(), 600);
            assert_eq!(r.start, 600 * i);
        }
        assert_eq!(day.num_steps(), 4800);
    }

    #[test]
    fn crossed_row_is_rejected_with_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let day = generate_synthetic_day(0, 3, &SynthParams::default()).unwrap();
        let (s, t) = day_file_paths(dir.path(), 0);
        write_day(&day, &s, &t).unwrap();
        let text = fs::read_to_string(&s).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // line 11 = row 9; set ask1 equal to bid1
        let mut f: Vec<i64> = lines[10].split(',').map(|v| v.parse().unwrap()).collect();
        f[11] = f[1];
        lines[10] = f.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        fs::write(&s, lines.join("\n") + "\n").unwrap();
        assert!(matches!(load_day(0, &s, &t), Err(DataError::CrossedBook(11))));
    }

    #[test]
    fn short_file_reports_its_count() {
        let dir = tempfile::tempdir().unwrap();
        let day = generate_synthetic_day(0, 3, &SynthParams::default()).unwrap();
        let (s, t) = day_file_paths(dir.path(), 0);
        write_day(&day, &s, &t).unwrap();
        let text = fs::read_to_string(&s).unwrap();
        let kept: Vec<&str> = text.lines().take(1 + 4799).collect();
        fs::write(&s, kept.join("\n") + "\n").unwrap();
        assert!(matches!(load_day(0, &s, &t), Err(DataError::ShortDay(4799))));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = day_file_paths(dir.path(), 7);
        assert!(matches!(load_day(7, &s, &t), Err(DataError::MissingFile(_))));
    }

    #[test]
    fn malformed_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let day = generate_synthetic_day(0, 3, &SynthParams::default()).unwrap();
        let (s, t) = day_file_paths(dir.path(), 0);
        write_day(&day, &s, &t).unwrap();
        let text = fs::read_to_string(&t).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "12,abc,100";
        fs::write(&t, lines.join("\n") + "\n").unwrap();
        assert!(matches!(
            load_day(0, &s, &t),
            Err(DataError::MalformedRow { line: 4, .. })
        ));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let day = generate_synthetic_day(4, 11, &SynthParams::default()).unwrap();
        let (s, t) = day_file_paths(dir.path(), 4);
        write_day(&day, &s, &t).unwrap();
        let (s0, t0) = (fs::read(&s).unwrap(), fs::read(&t).unwrap());
        let loaded = load_day(4, &s, &t).unwrap();
        assert_eq!(loaded, day);
        write_day(&loaded, &s, &t).unwrap();
        assert_eq!(fs::read(&s).unwrap(), s0);
        assert_eq!(fs::read(&t).unwrap(), t0);
    }

    #[test]
    fn dense_feed_is_resampled_onto_three_second_grid() {
        let dir = tempfile::tempdir().unwrap();
        let day = generate_synthetic_day(0, 5, &SynthParams::default()).unwrap();
        // 1 s feed: each 3 s snapshot repeated at +0, +1000, +2000 ms
        let mut text = String::from(SNAPSHOT_HEADER);
        text.push('\n');
        for s in day.snapshots() {
            for off in [0, 1000, 2000] {
                let mut row = vec![s.timestamp + off];
                row.extend(s.bid_prices);
                row.extend(s.bid_volumes.map(|v| v as i64));
                row.extend(s.ask_prices);
                row.extend(s.ask_volumes.map(|v| v as i64));
                text.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
                text.push('\n');
            }
        }
        let (s, t) = day_file_paths(dir.path(), 0);
        write_day(&day, &s, &t).unwrap();
        fs::write(&s, text).unwrap();
        let loaded = load_day(0, &s, &t).unwrap();
        assert_eq!(loaded.snapshots(), day.snapshots());
        assert_eq!(loaded.trades(), day.trades());
    }

    #[test]
    fn exclusion_file_skips_days() {
        let dir = tempfile::tempdir().unwrap();
        for id in 0..3 {
            let day = generate_synthetic_day(id, id as u64, &SynthParams::default()).unwrap();
            let (s, t) = day_file_paths(dir.path(), id);
            write_day(&day, &s, &t).unwrap();
        }
        fs::write(dir.path().join(EXCLUSION_FILE), "# limit hit\n1\n").unwrap();
        let ids: Vec<u32> = load_replay_dir(dir.path()).unwrap().iter().map(|d| d.day_id).collect();
        assert_eq!(ids, vec![0, 2]);
    }

    #[test]
    fn same_seed_same_day() {
        let p = SynthParams::default();
        assert_eq!(generate_synthetic_day(1, 42, &p).unwrap(), generate_synthetic_day(1, 42, &p).unwrap());
        assert_ne!(generate_synthetic_day(1, 42, &p).unwrap(), generate_synthetic_day(1, 43, &p).unwrap());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SynthParams {
            base_price_ticks: 0,
            ..SynthParams::default()
        };
        assert!(matches!(generate_synthetic_day(0, 0, &p), Err(DataError::InvalidParams(_))));
        let p = SynthParams {
            tick_size: -0.01,
            ..SynthParams::default()
        };
        assert!(matches!(generate_synthetic_day(0, 0, &p), Err(DataError::InvalidParams(_))));
    }

    fn mean_profile(params: &SynthParams, days: u64) -> [f64; 8] {
        let mut acc = [0.0; 8];
        for seed in 0..days {
            let p = compute_profile(&generate_synthetic_day(0, 1000 + seed, params).unwrap()).unwrap();
            for i in 0..8 {
                acc[i] += p.fractions[i] / days as f64;
            }
        }
        acc
    }

    #[test]
    fn flat_intensity_gives_uniform_profile() {
        let p = SynthParams {
            u_amplitude: 0.0,
            ..SynthParams::default()
        };
        for f in mean_profile(&p, 50) {
            assert!((f - 0.125).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn default_profile_is_u_shaped() {
        let m = mean_profile(&SynthParams::default(), 50);
        assert!(m[0] > m[3] && m[7] > m[3], "{m:?}");
    }

    #[test]
    fn profile_examples() {
        let mut v = [0u64; 8];
        v[2] = 5000;
        let p = compute_profile(&day_with_tranche_volumes(0, v)).unwrap();
        let mut e3 = [0.0; 8];
        e3[2] = 1.0;
        assert_eq!(p.fractions, e3);

        let p = compute_profile(&day_with_tranche_volumes(0, [3000; 8])).unwrap();
        assert_eq!(p.fractions, [0.125; 8]);

        let p = compute_profile(&day_with_tranche_volumes(0, [2000, 1000, 1000, 1000, 1000, 1000, 1000, 0])).unwrap();
        assert_eq!(p.fractions, [0.25, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.0]);

        assert!(matches!(
            compute_profile(&flat_day(0, 1000, 1001, 100, &[])),
            Err(DataError::ZeroVolumeDay)
        ));
    }

    #[test]
    fn slice_bounds_follow_snapshot_timestamps() {
        let day = flat_day(0, 1000, 1001, 100, &[(1, 1000, 100), (1, 1001, 200), (5, 1000, 300)]);
        assert_eq!(day.trade_slice(0).len(), 0);
        assert_eq!(day.trade_slice(1).len(), 2);
        assert_eq!(day.trade_slice(5)[0].volume, 300);
        assert_eq!(day.volume_in(0..6), 600);
        assert_eq!(day.vwap_in(1..2), Some((1000.0 * 100.0 + 1001.0 * 200.0) / 300.0));
        assert_eq!(day.vwap_in(2..5), None);
    }

    #[test]
    fn params_kv_round_trip() {
        let p = SynthParams {
            u_amplitude: 0.35,
            noise_scale: 0.5,
            ..SynthParams::default()
        };
        assert_eq!(SynthParams::from_kv(&p.to_kv()).unwrap(), p);
        assert!(SynthParams::from_kv("bogus = 1").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn generator_books_always_valid(seed in any::<u64>()) {
            let p = SynthParams { noise_scale: 1.5, ..SynthParams::default() };
            let day = generate_synthetic_day(0, seed, &p).unwrap();
            for (k, s) in day.snapshots().iter().enumerate() {
                prop_assert!(s.validate().is_ok());
                if k > 0 {
                    let prev = day.snapshot(k - 1);
                    for t in day.trade_slice(k) {
                        prop_assert!(t.price >= prev.bid_prices[0] - 1 && t.price <= prev.ask_prices[0] + 1);
                    }
                }
            }
        }

        #[test]
        fn profile_on_simplex(vols in proptest::array::uniform8(0u64..200)) {
            prop_assume!(vols.iter().any(|&v| v > 0));
            let day = day_with_tranche_volumes(0, vols.map(|v| v * LOT));
            let p = compute_profile(&day).unwrap();
            prop_assert!(p.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
            prop_assert!((p.fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
