//! Intraday volume-profile forecasting and parent-order allocation.

use std::io::{BufRead, Write};
use std::ops::Range;

use m3t_nn::{mse, Activation, Adam, Linear, Lstm, Mlp, NnError, Param, Parameterized, Tensor2};
use serde::{Deserialize, Serialize};

use crate::lob_data::{VolumeProfile, LOT, TRANCHES};

/// Days of history fed to every estimator.
pub const HISTORY_DAYS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum MacroError {
    #[error("bad history: {0}")]
    BadHistory(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("negative parent order {0}")]
    NegativeParent(i64),
    #[error("parent order {0} is not a whole number of lots")]
    NotLotAligned(i64),
    #[error("malformed profile file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MacroError>;

/// The most recent profiles, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileHistory {
    rows: Vec<VolumeProfile>,
}

impl ProfileHistory {
    pub fn new(rows: Vec<VolumeProfile>) -> Result<Self> {
        if rows.len() != HISTORY_DAYS {
            return Err(MacroError::BadHistory(format!(
                "{} rows, need {HISTORY_DAYS}",
                rows.len()
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.fractions.iter().sum();
            if (s - 1.0).abs() > 1e-9 || r.fractions.iter().any(|f| !(*f >= 0.0)) {
                return Err(MacroError::BadHistory(format!("row {i} is off the simplex")));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[VolumeProfile] {
        &self.rows
    }
}

/// Clips at zero and renormalizes; all-zero input maps to uniform.
pub fn project_to_simplex(raw: &[f64; TRANCHES]) -> VolumeProfile {
    let clipped = raw.map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 });
    let s: f64 = clipped.iter().sum();
    if s <= 0.0 {
        return VolumeProfile::uniform();
    }
    VolumeProfile {
        fractions: clipped.map(|v| v / s),
    }
}

pub fn forecast_ma(hist: &ProfileHistory) -> VolumeProfile {
    let mut acc = [0.0; TRANCHES];
    for r in &hist.rows {
        for (a, f) in acc.iter_mut().zip(r.fractions) {
            *a += f;
        }
    }
    project_to_simplex(&acc)
}

// Estimators see centred, scaled fractions.
const CENTRE: f64 = 1.0 / TRANCHES as f64;
const SCALE: f64 = TRANCHES as f64;

fn encode(f: f64) -> f64 {
    (f - CENTRE) * SCALE
}

fn decode(z: f64) -> f64 {
    z / SCALE + CENTRE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Linear,
    Mlp,
    Lstm,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Linear => "linear",
            EstimatorKind::Mlp => "mlp",
            EstimatorKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            "lstm" => Ok(Self::Lstm),
            other => Err(format!("unknown estimator {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub mlp_hidden: usize,
    pub lstm_hidden: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 5_000,
            lr: 1e-4,
            mlp_hidden: 64,
            lstm_hidden: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Estimator {
    Linear(Linear),
    Mlp(Mlp),
    /// Joint model: one 8-vector per day in, all 8 fractions out.
    Lstm { lstm: Lstm, head: Linear },
}

enum Cache {
    Linear(Tensor2),
    Mlp(m3t_nn::MlpCache),
    Lstm { cache: m3t_nn::LstmCache, last: Tensor2, steps: usize },
}

impl Estimator {
    pub fn new(kind: EstimatorKind, hyper: &TrainHyper, seed: u64) -> Self {
        let rng = &mut crate::seeded_rng(seed, 4);
        let flat = HISTORY_DAYS * TRANCHES;
        match kind {
            EstimatorKind::Linear => Estimator::Linear(Linear::new("macro.linear", flat, TRANCHES, rng)),
            EstimatorKind::Mlp => Estimator::Mlp(Mlp::new(
                "macro.mlp",
                &[flat, hyper.mlp_hidden, hyper.mlp_hidden, TRANCHES],
                Activation::Relu,
                Activation::Identity,
                rng,
            )),
            EstimatorKind::Lstm => Estimator::Lstm {
                lstm: Lstm::new("macro.lstm", TRANCHES, hyper.lstm_hidden, rng),
                head: Linear::new("macro.head", hyper.lstm_hidden, TRANCHES, rng),
            },
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Linear(_) => EstimatorKind::Linear,
            Estimator::Mlp(_) => EstimatorKind::Mlp,
            Estimator::Lstm { .. } => EstimatorKind::Lstm,
        }
    }

    fn flat_inputs(hists: &[&ProfileHistory]) -> Tensor2 {
        let data = hists
            .iter()
            .flat_map(|h| h.rows.iter().flat_map(|r| r.fractions.map(encode)))
            .collect();
        Tensor2::from_vec(hists.len(), HISTORY_DAYS * TRANCHES, data).expect("sized")
    }

    fn seq_inputs(hists: &[&ProfileHistory]) -> Vec<Tensor2> {
        (0..HISTORY_DAYS)
            .map(|t| {
                let data = hists.iter().flat_map(|h| h.rows[t].fractions.map(encode)).collect();
                Tensor2::from_vec(hists.len(), TRANCHES, data).expect("sized")
            })
            .collect()
    }

    /// Raw outputs in encoded space, `B × 8`.
    fn forward_cached(&self, hists: &[&ProfileHistory]) -> m3t_nn::Result<(Tensor2, Cache)> {
        match self {
            Estimator::Linear(l) => {
                let x = Self::flat_inputs(hists);
                Ok((l.forward(&x)?, Cache::Linear(x)))
            }
            Estimator::Mlp(m) => {
                let c = m.forward_cached(&Self::flat_inputs(hists))?;
                Ok((c.output().clone(), Cache::Mlp(c)))
            }
            Estimator::Lstm { lstm, head } => {
                let xs = Self::seq_inputs(hists);
                let (hs, cache) = lstm.forward(&xs)?;
                let last = hs.last().expect("non-empty sequence").clone();
                Ok((
                    head.forward(&last)?,
                    Cache::Lstm {
                        cache,
                        last,
                        steps: xs.len(),
                    },
                ))
            }
        }
    }

    fn backward(&mut self, cache: &Cache, grad: &Tensor2) -> m3t_nn::Result<()> {
        match (self, cache) {
            (Estimator::Linear(l), Cache::Linear(x)) => l.backward(x, grad).map(|_| ()),
            (Estimator::Mlp(m), Cache::Mlp(c)) => m.backward(c, grad).map(|_| ()),
            (Estimator::Lstm { lstm, head }, Cache::Lstm { cache, last, steps }) => {
                let g_last = head.backward(last, grad)?;
                let mut gs = vec![Tensor2::zeros(g_last.rows(), g_last.cols()); *steps];
                gs[*steps - 1] = g_last;
                lstm.backward(cache, &gs).map(|_| ())
            }
            _ => Err(NnError::Config("estimator/cache mismatch".into())),
        }
    }

    pub fn forecast_batch(&self, hists: &[&ProfileHistory]) -> Result<Vec<VolumeProfile>> {
        let (raw, _) = self.forward_cached(hists)?;
        Ok((0..raw.rows())
            .map(|i| project_to_simplex(&std::array::from_fn(|j| decode(raw.get(i, j)))))
            .collect())
    }

    pub fn forecast(&self, hist: &ProfileHistory) -> Result<VolumeProfile> {
        Ok(self.forecast_batch(&[hist])?.remove(0))
    }
}

impl Parameterized for Estimator {
    fn params(&self) -> Vec<&Param> {
        match self {
            Estimator::Linear(l) => l.params(),
            Estimator::Mlp(m) => m.params(),
            Estimator::Lstm { lstm, head } => {
                let mut v = lstm.params();
                v.extend(head.params());
                v
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Estimator::Linear(l) => l.params_mut(),
            Estimator::Mlp(m) => m.params_mut(),
            Estimator::Lstm { lstm, head } => {
                let mut v = lstm.params_mut();
                v.extend(head.params_mut());
                v
            }
        }
    }
}

/// LSTM forecast from an estimator of that kind.
pub fn forecast_lstm(hist: &ProfileHistory, est: &Estimator) -> Result<VolumeProfile> {
    if est.kind() != EstimatorKind::Lstm {
        return Err(MacroError::Nn(NnError::Config("not an LSTM estimator".into())));
    }
    est.forecast(hist)
}

/// One supervised example: the 20 preceding profiles and the day's own.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub day_index: usize,
    pub history: ProfileHistory,
    pub target: VolumeProfile,
}

/// Every day with a full window of predecessors, in time order.
pub fn build_samples(profiles: &[VolumeProfile]) -> Result<Vec<Sample>> {
    if profiles.len() <= HISTORY_DAYS {
        return Err(MacroError::EmptyDataset);
    }
    (HISTORY_DAYS..profiles.len())
        .map(|t| {
            Ok(Sample {
                day_index: t,
                history: ProfileHistory::new(profiles[t - HISTORY_DAYS..t].to_vec())?,
                target: profiles[t],
            })
        })
        .collect()
}

/// Chronological 60/20/20 train/validation/test ranges.
pub fn chronological_split(n: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
    let a = n * 6 / 10;
    let b = n * 8 / 10;
    (0..a, a..b, b..n)
}

/// Mean squared error in fraction space over all samples and tranches.
pub fn profile_mse(pred: &[VolumeProfile], truth: &[VolumeProfile]) -> f64 {
    let n = (pred.len() * TRANCHES).max(1) as f64;
    pred.iter()
        .zip(truth)
        .flat_map(|(p, t)| p.fractions.iter().zip(t.fractions).map(|(a, b)| (a - b).powi(2)))
        .sum::<f64>()
        / n
}

pub fn ma_mse(samples: &[Sample]) -> f64 {
    let pred: Vec<VolumeProfile> = samples.iter().map(|s| forecast_ma(&s.history)).collect();
    let truth: Vec<VolumeProfile> = samples.iter().map(|s| s.target).collect();
    profile_mse(&pred, &truth)
}

#[derive(Clone, Debug)]
pub struct TrainedEstimator {
    pub estimator: Estimator,
    /// Training loss in encoded space, one entry per epoch, before the step.
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub val_mse: f64,
    pub test_mse: f64,
}

impl TrainedEstimator {
    /// Test MSE in units of 1e-3.
    pub fn test_mse_e3(&self) -> f64 {
        self.test_mse * 1e3
    }
}

pub fn estimator_mse(est: &Estimator, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hists: Vec<&ProfileHistory> = samples.iter().map(|s| &s.history).collect();
    let pred = est.forecast_batch(&hists)?;
    let truth: Vec<VolumeProfile> = samples.iter().map(|s| s.target).collect();
    Ok(profile_mse(&pred, &truth))
}

/// Full-batch Adam on the chronological training split, keeping the
/// parameters with the best validation error.
pub fn train_estimator(
    kind: EstimatorKind,
    samples: &[Sample],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainedEstimator> {
    let (tr, va, te) = chronological_split(samples.len());
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        return Err(MacroError::EmptyDataset);
    }
    let (train, val, test) = (&samples[tr], &samples[va], &samples[te]);
    let mut est = Estimator::new(kind, hyper, seed);
    let mut opt = Adam::new(hyper.lr);
    let hists: Vec<&ProfileHistory> = train.iter().map(|s| &s.history).collect();
    let targets = Tensor2::from_vec(
        train.len(),
        TRANCHES,
        train.iter().flat_map(|s| s.target.fractions.map(encode)).collect(),
    )?;

    let mut best = est.clone();
    let mut best_val = estimator_mse(&est, val)?;
    let mut best_epoch = 0;
    let mut train_curve = Vec::with_capacity(hyper.epochs);
    let mut val_curve = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        let (pred, cache) = est.forward_cached(&hists)?;
        let (loss, grad) = mse(&pred, &targets)?;
        train_curve.push(loss);
        est.zero_grad();
        est.backward(&cache, &grad)?;
        opt.step(&mut est.params_mut())?;
        let v = estimator_mse(&est, val)?;
        val_curve.push(v);
        if v < best_val {
            best_val = v;
            best_epoch = epoch;
            best = est.clone();
        }
    }
    let test_mse = estimator_mse(&best, test)?;
    Ok(TrainedEstimator {
        estimator: best,
        train_curve,
        val_curve,
        best_epoch,
        val_mse: best_val,
        test_mse,
    })
}

/// Lot-aligned per-tranche share counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrancheAllocation {
    pub shares: [u64; TRANCHES],
}

impl TrancheAllocation {
    pub fn total(&self) -> u64 {
        self.shares.iter().sum()
    }
}

/// Splits the parent order in proportion to the profile, rounding lots by
/// largest remainder (ties to the earlier tranche).
pub fn allocate(parent: i64, profile: &VolumeProfile) -> Result<TrancheAllocation> {
    if parent < 0 {
        return Err(MacroError::NegativeParent(parent));
    }
    if parent as u64 % LOT != 0 {
        return Err(MacroError::NotLotAligned(parent));
    }
    let lots = parent as u64 / LOT;
    let quotas = profile.fractions.map(|f| lots as f64 * f);
    let mut out = quotas.map(|q| q.floor() as u64);
    let left = lots.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..TRANCHES).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(left as usize) {
        out[i] += 1;
    }
    Ok(TrancheAllocation {
        shares: out.map(|l| l * LOT),
    })
}

/// `day_id,f1..f8` rows.
pub fn write_profiles_csv<W: Write>(mut w: W, rows: &[(u32, VolumeProfile)]) -> std::io::Result<()> {
    writeln!(w, "day_id,f1,f2,f3,f4,f5,f6,f7,f8")?;
    for (id, p) in rows {
        let cols: Vec<String> = p.fractions.iter().map(|f| format!("{f:.17}")).collect();
        writeln!(w, "{id},{}", cols.join(","))?;
    }
    Ok(())
}

pub fn read_profiles_csv<R: BufRead>(r: R) -> Result<Vec<(u32, VolumeProfile)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| MacroError::Malformed { line: i + 1, reason };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != TRANCHES + 1 {
            return Err(bad(format!("{} columns", cols.len())));
        }
        let id = cols[0].parse().map_err(|e| bad(format!("{e}")))?;
        let mut f = [0.0; TRANCHES];
        for (dst, c) in f.iter_mut().zip(&cols[1..]) {
            *dst = c.parse().map_err(|e| bad(format!("{e}")))?;
        }
        let p = VolumeProfile::new(f).map_err(|e| bad(e.to_string()))?;
        out.push((id, p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_profile(rng: &mut impl Rng) -> VolumeProfile {
        let raw: [f64; TRANCHES] = std::array::from_fn(|_| rng.gen_range(0.01..1.0));
        let s: f64 = raw.iter().sum();
        VolumeProfile::new(raw.map(|v| v / s)).unwrap()
    }

    fn hist(rows: Vec<VolumeProfile>) -> ProfileHistory {
        ProfileHistory::new(rows).unwrap()
    }

    #[test]
    fn ma_of_constant_history() {
        let p = random_profile(&mut crate::seeded_rng(0, 0));
        let f = forecast_ma(&hist(vec![p; 20]));
        for (a, b) in f.fractions.iter().zip(p.fractions) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ma_of_alternating_history() {
        let mut rng = crate::seeded_rng(1, 0);
        let (a, b) = (random_profile(&mut rng), random_profile(&mut rng));
        let rows = (0..20).map(|i| if i % 2 == 0 { a } else { b }).collect();
        let f = forecast_ma(&hist(rows));
        for i in 0..TRANCHES {
            assert!((f.fractions[i] - (a.fractions[i] + b.fractions[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bad_history_rejected() {
        assert!(matches!(
            ProfileHistory::new(vec![VolumeProfile::uniform(); 19]),
            Err(MacroError::BadHistory(_))
        ));
    }

    #[test]
    fn allocation_examples() {
        let u = VolumeProfile::uniform();
        assert_eq!(allocate(120_000, &u).unwrap().shares, [15_000; 8]);
        let mut one = [0.0; 8];
        one[0] = 1.0;
        let p = VolumeProfile::new(one).unwrap();
        assert_eq!(allocate(800, &p).unwrap().shares, [800, 0, 0, 0, 0, 0, 0, 0]);
        let p = VolumeProfile::new([0.13, 0.13, 0.13, 0.13, 0.12, 0.12, 0.12, 0.12]).unwrap();
        // ten lots: eight floor to 1, two leftovers go to the earliest 0.3 remainders
        assert_eq!(
            allocate(1000, &p).unwrap().shares,
            [200, 200, 100, 100, 100, 100, 100, 100]
        );
        assert!(matches!(allocate(-100, &u), Err(MacroError::NegativeParent(-100))));
        assert!(matches!(allocate(150, &u), Err(MacroError::NotLotAligned(150))));
    }

    #[test]
    fn split_is_chronological() {
        let (a, b, c) = chronological_split(180);
        assert_eq!((a, b, c), (0..108, 108..144, 144..180));
    }

    #[test]
    fn random_params_give_simplex_forecasts() {
        let mut rng = crate::seeded_rng(2, 0);
        let h = hist((0..20).map(|_| random_profile(&mut rng)).collect());
        for kind in [EstimatorKind::Linear, EstimatorKind::Mlp, EstimatorKind::Lstm] {
            for seed in 0..3 {
                let e = Estimator::new(kind, &TrainHyper::default(), seed);
                let f = e.forecast(&h).unwrap();
                assert!((f.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(f.fractions.iter().all(|&v| v >= 0.0));
            }
        }
        let lstm = Estimator::new(EstimatorKind::Lstm, &TrainHyper::default(), 0);
        assert!(forecast_lstm(&h, &lstm).is_ok());
        let lin = Estimator::new(EstimatorKind::Linear, &TrainHyper::default(), 0);
        assert!(forecast_lstm(&h, &lin).is_err());
    }

    #[test]
    fn zero_epochs_leave_params_untouched() {
        let mut rng = crate::seeded_rng(3, 0);
        let profiles: Vec<VolumeProfile> = (0..60).map(|_| random_profile(&mut rng)).collect();
        let samples = build_samples(&profiles).unwrap();
        let hyper = TrainHyper {
            epochs: 0,
            ..TrainHyper::default()
        };
        let trained = train_estimator(EstimatorKind::Mlp, &samples, &hyper, 5).unwrap();
        let fresh = Estimator::new(EstimatorKind::Mlp, &hyper, 5);
        let a: Vec<&Tensor2> = trained.estimator.params().iter().map(|p| &p.value).collect::<Vec<_>>();
        let b: Vec<&Tensor2> = fresh.params().iter().map(|p| &p.value).collect::<Vec<_>>();
        assert_eq!(a, b);
        assert_eq!(trained.best_epoch, 0);
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(matches!(
            build_samples(&vec![VolumeProfile::uniform(); 20]),
            Err(MacroError::EmptyDataset)
        ));
        let samples = build_samples(&vec![VolumeProfile::uniform(); 22]).unwrap();
        assert!(matches!(
            train_estimator(EstimatorKind::Linear, &samples, &TrainHyper::default(), 0),
            Err(MacroError::EmptyDataset)
        ));
    }

    /// Targets produced by a fixed linear map of the encoded history, so the
    /// linear estimator can represent them exactly.
    fn realizable_samples() -> Vec<Sample> {
        let mut rng = crate::seeded_rng(6, 0);
        let flat = HISTORY_DAYS * TRANCHES;
        let w: Vec<f64> = (0..flat * TRANCHES).map(|_| rng.gen_range(-0.02..0.02)).collect();
        (0..400)
            .map(|i| {
                let history = hist((0..20).map(|_| random_profile(&mut rng)).collect());
                let x: Vec<f64> = history.rows.iter().flat_map(|r| r.fractions.map(encode)).collect();
                let mut z = [0.0; TRANCHES];
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = (0..flat).map(|k| x[k] * w[k * TRANCHES + j]).sum();
                }
                // centre so the decoded target lies on the simplex
                let mean = z.iter().sum::<f64>() / TRANCHES as f64;
                let target = VolumeProfile::new(z.map(|v| decode(v - mean))).unwrap();
                Sample {
                    day_index: i,
                    history,
                    target,
                }
            })
            .collect()
    }

    #[test]
    fn linear_fits_realizable_targets() {
        let samples = realizable_samples();
        let hyper = TrainHyper {
            lr: 1e-2,
            epochs: 3_000,
            ..TrainHyper::default()
        };
        let t = train_estimator(EstimatorKind::Linear, &samples, &hyper, 0).unwrap();
        assert!(t.test_mse < 1e-8, "test mse {}", t.test_mse);
    }

    #[test]
    fn full_batch_loss_descends() {
        let samples = realizable_samples();
        let hyper = TrainHyper {
            epochs: 1_000,
            ..TrainHyper::default()
        };
        let t = train_estimator(EstimatorKind::Linear, &samples, &hyper, 0).unwrap();
        let tail = &t.train_curve[100..];
        let rises = tail.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-9)).count();
        assert_eq!(rises, 0);
    }

    /// U-shaped profile whose amplitude cycles with a 20-day period.
    fn periodic_profiles(n: usize) -> Vec<VolumeProfile> {
        (0..n)
            .map(|d| {
                let a = 0.6 + 0.3 * (2.0 * std::f64::consts::PI * d as f64 / 20.0).sin();
                let raw: [f64; TRANCHES] = std::array::from_fn(|i| {
                    let x = (i as f64 + 0.5) / TRANCHES as f64;
                    1.0 + a * (3.0 * (2.0 * x - 1.0).powi(2) - 1.0)
                });
                let s: f64 = raw.iter().sum();
                VolumeProfile::new(raw.map(|v| v / s)).unwrap()
            })
            .collect()
    }

    #[test]
    fn lstm_learns_periodic_pattern() {
        let samples = build_samples(&periodic_profiles(140)).unwrap();
        let t = train_estimator(EstimatorKind::Lstm, &samples, &TrainHyper::default(), 1).unwrap();
        let train_mse = estimator_mse(&t.estimator, &samples[chronological_split(samples.len()).0]).unwrap();
        assert!(train_mse < 1e-5, "train mse {train_mse}");
        assert!(t.test_mse < 1e-5, "test mse {}", t.test_mse);
    }

    #[test]
    fn profiles_csv_round_trip() {
        let mut rng = crate::seeded_rng(8, 0);
        let rows: Vec<(u32, VolumeProfile)> = (0..5).map(|i| (i, random_profile(&mut rng))).collect();
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &rows).unwrap();
        let back = read_profiles_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 5);
        for ((a, p), (b, q)) in rows.iter().zip(&back) {
            assert_eq!(a, b);
            for (x, y) in p.fractions.iter().zip(q.fractions) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn allocation_conserves(lots in 0u64..5_000, raw in proptest::array::uniform8(0.0f64..1.0)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-6);
            let p = VolumeProfile { fractions: raw.map(|v| v / s) };
            let a = allocate((lots * LOT) as i64, &p).unwrap();
            prop_assert_eq!(a.total(), lots * LOT);
            prop_assert!(a.shares.iter().all(|s| s % LOT == 0));
        }
    }

    proptest! {
        #[test]
        fn forecasts_on_simplex(seed in 0u64..1000) {
            let mut rng = crate::seeded_rng(seed, 1);
            let h = hist((0..20).map(|_| random_profile(&mut rng)).collect());
            let f = forecast_ma(&h);
            prop_assert!((f.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let raw: [f64; TRANCHES] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let p = project_to_simplex(&raw);
            prop_assert!((p.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.fractions.iter().all(|&v| v >= 0.0));
        }
    }
}
