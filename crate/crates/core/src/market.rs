//! Scenario data (prices, committed volumes, fleet roster) and the
//! per-slot cost of covering the committed volume.
//!
//! A positive volume is energy still owed at that slot; whatever the fleet
//! does not deliver is bought at the intraday price `rho`. A negative
//! volume is surplus; whatever the fleet does not absorb is penalized at
//! `sigma` per kWh.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{ConstraintLevel, EvSpec, FleetCtx, Level, DEFAULT_SLOT_HOURS};
use crate::sched::Schedule;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("scenario validation failed: {0}")]
    Invalid(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("empty scenario: no data rows")]
    EmptyScenario,
    #[error("slot index {k} out of range (N = {n})")]
    SlotOutOfRange { k: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Fleet(#[from] crate::fleet::FleetError),
}

/// One optimization instance: horizon, prices, committed volumes, fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_slots: usize,
    pub slot_hours: f64,
    /// Intraday buy price per slot (EUR/kWh). Markets allow negative prices.
    pub rho: Vec<f64>,
    /// Cost of excess energy per slot (EUR/kWh), strictly positive.
    pub sigma: Vec<f64>,
    /// Committed volume per slot (kWh); negative means surplus.
    pub volumes: Vec<f64>,
    pub fleet: Vec<EvSpec>,
    pub level: ConstraintLevel,
    pub seed: u64,
}

impl Scenario {
    pub fn fleet_size(&self) -> usize {
        self.fleet.len()
    }

    pub fn ctx(&self) -> FleetCtx<'_> {
        FleetCtx::new(&self.fleet, &self.level, self.slot_hours)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if self.n_slots == 0 {
            return Err(MarketError::Invalid("n_slots must be >= 1".into()));
        }
        if !(self.slot_hours > 0.0) {
            return Err(MarketError::Invalid("slot_hours must be positive".into()));
        }
        for (name, v) in [("rho", &self.rho), ("sigma", &self.sigma), ("volumes", &self.volumes)]
        {
            if v.len() != self.n_slots {
                return Err(MarketError::Invalid(format!(
                    "{name} has length {}, expected {}",
                    v.len(),
                    self.n_slots
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(MarketError::Invalid(format!("{name} contains non-finite values")));
            }
        }
        if self.sigma.iter().any(|&s| s <= 0.0) {
            return Err(MarketError::Invalid("sigma must be strictly positive".into()));
        }
        for spec in &self.fleet {
            spec.validate()?;
        }
        self.level.validate(&self.fleet)?;
        Ok(())
    }

    /// Canonical JSON: fixed key order, floats rounded to 9 significant
    /// digits. Loading and re-saving a canonical file is byte-identical.
    pub fn to_canonical_json(&self) -> String {
        let mut c = self.clone();
        for v in [&mut c.rho, &mut c.sigma, &mut c.volumes] {
            for x in v.iter_mut() {
                *x = round_sig9(*x);
            }
        }
        c.slot_hours = round_sig9(c.slot_hours);
        for spec in &mut c.fleet {
            spec.capacity_kwh = round_sig9(spec.capacity_kwh);
            spec.min_soc_kwh = round_sig9(spec.min_soc_kwh);
            spec.max_rate_kw = round_sig9(spec.max_rate_kw);
            spec.initial_soc_kwh = round_sig9(spec.initial_soc_kwh);
            spec.target_soc_kwh = round_sig9(spec.target_soc_kwh);
        }
        c.level.site_charge_cap_kw = c.level.site_charge_cap_kw.map(round_sig9);
        c.level.site_discharge_cap_kw = c.level.site_discharge_cap_kw.map(round_sig9);
        let mut out = serde_json::to_string_pretty(&c).expect("scenario serializes");
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MarketError> {
        std::fs::write(path, self.to_canonical_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MarketError> {
        let text = std::fs::read_to_string(path)?;
        let scenario: Scenario = serde_json::from_str(&text)?;
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Rounds to 9 significant decimal digits; idempotent on its own output.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    let exp = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(8 - exp);
    (x * factor).round() / factor
}

/// Cost and bought/excess split of a single slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotCost {
    pub bought_kwh: f64,
    pub excess_kwh: f64,
    pub cost_eur: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total_eur: f64,
    pub per_slot: Vec<SlotCost>,
}

/// Cost of slot `k` when the fleet's deltas sum to `action_sum_kwh`.
///
/// net = v_k + sum; cost = rho_k * max(0, net) - sigma_k * min(0, net).
pub fn stage_cost(k: usize, action_sum_kwh: f64, scenario: &Scenario) -> Result<SlotCost, MarketError> {
    if k >= scenario.n_slots {
        return Err(MarketError::SlotOutOfRange {
            k,
            n: scenario.n_slots,
        });
    }
    let net = scenario.volumes[k] + action_sum_kwh;
    let bought = net.max(0.0);
    let excess = (-net).max(0.0);
    Ok(SlotCost {
        bought_kwh: bought,
        excess_kwh: excess,
        cost_eur: scenario.rho[k] * bought + scenario.sigma[k] * excess,
    })
}

/// Total cost of a schedule, slot by slot in order.
pub fn total_cost(schedule: &Schedule, scenario: &Scenario) -> Result<CostBreakdown, MarketError> {
    if schedule.actions.len() != scenario.n_slots {
        return Err(MarketError::DimensionMismatch(format!(
            "schedule has {} slots, scenario has {}",
            schedule.actions.len(),
            scenario.n_slots
        )));
    }
    let mut per_slot = Vec::with_capacity(scenario.n_slots);
    let mut total = 0.0;
    for (k, row) in schedule.actions.iter().enumerate() {
        if row.len() != scenario.fleet_size() {
            return Err(MarketError::DimensionMismatch(format!(
                "slot {k} has {} deltas, fleet size is {}",
                row.len(),
                scenario.fleet_size()
            )));
        }
        let sum: f64 = row.iter().sum();
        let sc = stage_cost(k, sum, scenario)?;
        total += sc.cost_eur;
        per_slot.push(sc);
    }
    Ok(CostBreakdown {
        total_eur: total,
        per_slot,
    })
}

/// Row granularity of a price CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Hourly,
    Quarter,
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hourly" => Ok(Granularity::Hourly),
            "quarter" => Ok(Granularity::Quarter),
            other => Err(format!("granularity must be `hourly` or `quarter`, got `{other}`")),
        }
    }
}

/// Reads a price CSV (`timestamp,price_eur_per_mwh`) into EUR/kWh slot
/// prices. Hourly rows are expanded to four 15-minute slots.
pub fn ingest_prices(path: &Path, granularity: Granularity) -> Result<Vec<f64>, MarketError> {
    let text = std::fs::read_to_string(path)?;
    parse_prices(&text, granularity)
}

pub fn parse_prices(text: &str, granularity: Granularity) -> Result<Vec<f64>, MarketError> {
    const HEADER: &str = "timestamp,price_eur_per_mwh";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        Some((_, h)) => {
            return Err(MarketError::Parse {
                line: 1,
                reason: format!("expected header `{HEADER}`, got `{}`", h.trim()),
            })
        }
        None => return Err(MarketError::EmptyScenario),
    }
    let mut prices = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (ts, price_str) = line.split_once(',').ok_or_else(|| MarketError::Parse {
            line: lineno,
            reason: "expected `timestamp,price`".into(),
        })?;
        if ts.trim().is_empty() {
            return Err(MarketError::Parse {
                line: lineno,
                reason: "empty timestamp".into(),
            });
        }
        let eur_per_mwh: f64 = price_str.trim().parse().map_err(|e| MarketError::Parse {
            line: lineno,
            reason: format!("price: {e}"),
        })?;
        if eur_per_mwh.is_nan() {
            return Err(MarketError::Parse {
                line: lineno,
                reason: "price is NaN".into(),
            });
        }
        let eur_per_kwh = eur_per_mwh / 1000.0;
        match granularity {
            Granularity::Hourly => prices.extend_from_slice(&[eur_per_kwh; 4]),
            Granularity::Quarter => prices.push(eur_per_kwh),
        }
    }
    if prices.is_empty() {
        return Err(MarketError::EmptyScenario);
    }
    Ok(prices)
}

/// Parameters for synthetic scenario generation.
#[derive(Debug, Clone, Copy)]
pub struct GenParams {
    pub level: Level,
    pub fleet_size: usize,
    pub n_slots: usize,
    pub seed: u64,
    pub slot_hours: f64,
}

impl GenParams {
    pub fn new(level: Level, fleet_size: usize, n_slots: usize, seed: u64) -> Self {
        GenParams {
            level,
            fleet_size,
            n_slots,
            seed,
            slot_hours: DEFAULT_SLOT_HOURS,
        }
    }
}

const EV_CAPACITY_KWH: f64 = 100.0;
const EV_MIN_SOC_KWH: f64 = 10.0;
const EV_RATE_KW: f64 = 10.0;

/// Generates a scenario with the standard fleet parameters: 100 kWh packs,
/// 10 kWh floor, +/-10 kW rate. L0 fleets start at 30 kWh and must reach
/// 80 kWh; from L1 up the initial charge is uniform in [10, 50] and the
/// target uniform in [70, 100]. From L2 up the site caps both directions
/// at 90% of the fleet's combined rate.
///
/// Prices follow a sinusoidal day shape with Gaussian noise; volumes are a
/// phase-shifted sinusoid scaled by fleet size so the per-EV shortfall is
/// size-independent. `sigma` is half of `rho`, floored just above zero.
pub fn generate_scenario(params: GenParams) -> Scenario {
    assert!(params.fleet_size >= 1, "fleet_size must be >= 1");
    assert!(params.n_slots >= 1, "n_slots must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.n_slots;
    let d = params.fleet_size;
    let tau = std::f64::consts::TAU;

    let phase_price: f64 = rng.random_range(0.0..tau);
    let phase_volume: f64 = rng.random_range(0.0..tau);
    let price_noise = Normal::new(0.0, 0.005).unwrap();
    let volume_noise = Normal::new(0.0, 0.2).unwrap();

    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for k in 0..n {
        let base = 0.06 + 0.03 * (tau * k as f64 / n as f64 + phase_price).sin();
        let p = (base + price_noise.sample(&mut rng)).max(-0.02);
        let p = round_sig9(p);
        rho.push(p);
        sigma.push(round_sig9((0.5 * p).max(1e-4)));
    }
    let mut volumes = Vec::with_capacity(n);
    for k in 0..n {
        let shape = 0.8 * (tau * k as f64 / n as f64 + phase_volume).sin();
        let v = d as f64 * (shape + volume_noise.sample(&mut rng));
        volumes.push(round_sig9(v));
    }

    // Charging moves in steps of r, so each EV's target is snapped onto
    // its own reachable lattice (the nearest step, capped at the last
    // step below capacity); otherwise a target between the top lattice
    // point and the capacity could never be hit exactly.
    let r = EV_RATE_KW * params.slot_hours;
    let fleet: Vec<EvSpec> = (0..d as u32)
        .map(|id| {
            let (initial, target) = if params.level == Level::L0 {
                (30.0, 80.0)
            } else {
                let i: f64 = rng.random_range(10.0..50.0);
                let t: f64 = rng.random_range(70.0..100.0);
                let i = round_sig9(i);
                let steps = ((t - i) / r).round().max(0.0);
                let top_steps = ((EV_CAPACITY_KWH - i) / r).floor();
                (i, round_sig9(i + steps.min(top_steps) * r))
            };
            EvSpec {
                id,
                capacity_kwh: EV_CAPACITY_KWH,
                min_soc_kwh: EV_MIN_SOC_KWH,
                max_rate_kw: EV_RATE_KW,
                initial_soc_kwh: initial,
                target_soc_kwh: target,
            }
        })
        .collect();

    let level = if params.level >= Level::L2 {
        let cap = round_sig9(0.9 * d as f64 * EV_RATE_KW);
        ConstraintLevel::with_site_caps(params.level, cap, cap)
    } else {
        ConstraintLevel::new(params.level)
    };

    let scenario = Scenario {
        n_slots: n,
        slot_hours: params.slot_hours,
        rho,
        sigma,
        volumes,
        fleet,
        level,
        seed: params.seed,
    };
    debug_assert!(scenario.validate().is_ok());
    scenario
}
