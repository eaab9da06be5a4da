//! Fleet state, the deterministic transition function, and admissibility
//! checks for the four constraint levels.
//!
//! Levels stack: L0 is a homogeneous always-connected fleet, L1 allows
//! per-EV capacities and charge requirements, L2 adds site-wide power caps
//! on collective charging/discharging, and L3 caps each EV to one
//! charge/discharge reversal per hour window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slot length used throughout unless a scenario overrides it (15 minutes).
pub const DEFAULT_SLOT_HOURS: f64 = 0.25;

/// Tolerance for energy comparisons (kWh). Lattice arithmetic is exact for
/// typical rates, but replayed sums may differ from bounds by float noise.
pub const EPS_KWH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("invalid EV spec for id {id}: {reason}")]
    InvalidSpec { id: u32, reason: String },
    #[error("invalid constraint level: {0}")]
    InvalidLevel(String),
    #[error("action rejected: {}", describe_violations(.0))]
    Inadmissible(Vec<Violation>),
    #[error("terminal check requires slot {expected}, state is at slot {actual}")]
    NotAtHorizon { expected: usize, actual: usize },
    #[error("roster parse error at line {line}: {reason}")]
    RosterParse { line: usize, reason: String },
    #[error("roster i/o error: {0}")]
    RosterIo(#[from] std::io::Error),
}

fn describe_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Direction of the last nonzero energy delta an EV applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Charging,
    Discharging,
}

/// Static limits and requirements of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSpec {
    pub id: u32,
    pub capacity_kwh: f64,
    pub min_soc_kwh: f64,
    pub max_rate_kw: f64,
    pub initial_soc_kwh: f64,
    pub target_soc_kwh: f64,
}

impl EvSpec {
    pub fn validate(&self) -> Result<(), FleetError> {
        let err = |reason: &str| FleetError::InvalidSpec {
            id: self.id,
            reason: reason.to_string(),
        };
        if !(self.min_soc_kwh >= 0.0) {
            return Err(err("min_soc_kwh must be >= 0"));
        }
        if !(self.min_soc_kwh <= self.initial_soc_kwh) {
            return Err(err("initial_soc_kwh below min_soc_kwh"));
        }
        if !(self.initial_soc_kwh <= self.capacity_kwh) {
            return Err(err("initial_soc_kwh above capacity_kwh"));
        }
        if !(self.min_soc_kwh <= self.target_soc_kwh && self.target_soc_kwh <= self.capacity_kwh) {
            return Err(err("target_soc_kwh outside [min_soc_kwh, capacity_kwh]"));
        }
        if !(self.max_rate_kw > 0.0) {
            return Err(err("max_rate_kw must be positive"));
        }
        Ok(())
    }

    /// Energy one slot of full-rate operation moves (kWh).
    pub fn rate_kwh(&self, slot_hours: f64) -> f64 {
        self.max_rate_kw * slot_hours
    }
}

/// Dynamic state of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvState {
    pub soc_kwh: f64,
    pub last_direction: Option<Direction>,
    /// Whether a charge/discharge reversal already happened in the current
    /// hour window (L3 bookkeeping; reset at each window boundary).
    pub reversal_used_in_hour: bool,
}

impl EvState {
    pub fn fresh(soc_kwh: f64) -> Self {
        EvState {
            soc_kwh,
            last_direction: None,
            reversal_used_in_hour: false,
        }
    }
}

/// State of the whole fleet at one slot boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub slot: usize,
    pub ev_states: Vec<EvState>,
}

impl FleetState {
    /// Slot-0 state with every EV at its initial state of charge.
    pub fn initial(specs: &[EvSpec]) -> Self {
        FleetState {
            slot: 0,
            ev_states: specs
                .iter()
                .map(|s| EvState::fresh(s.initial_soc_kwh))
                .collect(),
        }
    }
}

/// Complexity-ladder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(try_from = "u8", into = "u8")]
pub enum Level {
    L0,
    L1,
    L2,
    L3,
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        match l {
            Level::L0 => 0,
            Level::L1 => 1,
            Level::L2 => 2,
            Level::L3 => 3,
        }
    }
}

impl TryFrom<u8> for Level {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Level::L0),
            1 => Ok(Level::L1),
            2 => Ok(Level::L2),
            3 => Ok(Level::L3),
            other => Err(format!("level must be 0..=3, got {other}")),
        }
    }
}

/// Constraint level plus the site-wide power caps that apply from L2 up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintLevel {
    pub level: Level,
    pub site_charge_cap_kw: Option<f64>,
    pub site_discharge_cap_kw: Option<f64>,
}

impl ConstraintLevel {
    pub fn new(level: Level) -> Self {
        ConstraintLevel {
            level,
            site_charge_cap_kw: None,
            site_discharge_cap_kw: None,
        }
    }

    pub fn with_site_caps(level: Level, charge_kw: f64, discharge_kw: f64) -> Self {
        ConstraintLevel {
            level,
            site_charge_cap_kw: Some(charge_kw),
            site_discharge_cap_kw: Some(discharge_kw),
        }
    }

    /// Site caps are enforced at L2 and above only.
    pub fn caps_active(&self) -> bool {
        self.level >= Level::L2
    }

    pub fn tracks_reversals(&self) -> bool {
        self.level == Level::L3
    }

    pub fn validate(&self, specs: &[EvSpec]) -> Result<(), FleetError> {
        for cap in [self.site_charge_cap_kw, self.site_discharge_cap_kw] {
            if let Some(c) = cap {
                if !(c > 0.0) {
                    return Err(FleetError::InvalidLevel(
                        "site caps must be positive when present".into(),
                    ));
                }
            }
        }
        if self.caps_active()
            && (self.site_charge_cap_kw.is_none() || self.site_discharge_cap_kw.is_none())
        {
            return Err(FleetError::InvalidLevel(format!(
                "level {:?} requires both site caps",
                self.level
            )));
        }
        if self.level == Level::L0 {
            // Homogeneous fleet: every field but the id must match.
            if let Some(first) = specs.first() {
                for s in &specs[1..] {
                    let same = s.capacity_kwh == first.capacity_kwh
                        && s.min_soc_kwh == first.min_soc_kwh
                        && s.max_rate_kw == first.max_rate_kw
                        && s.initial_soc_kwh == first.initial_soc_kwh
                        && s.target_soc_kwh == first.target_soc_kwh;
                    if !same {
                        return Err(FleetError::InvalidLevel(format!(
                            "L0 requires identical EV specs; ev {} differs from ev {}",
                            s.id, first.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-EV energy deltas for one slot. Positive = charging (drawn from the
/// grid), negative = discharging (delivered to the grid).
#[derive(Debug, Clone, PartialEq)]
pub struct PerEvAction {
    pub deltas_kwh: Vec<f64>,
}

impl PerEvAction {
    pub fn idle(d: usize) -> Self {
        PerEvAction {
            deltas_kwh: vec![0.0; d],
        }
    }

    pub fn sum_kwh(&self) -> f64 {
        self.deltas_kwh.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    SocLower,
    SocUpper,
    RateLimit,
    SiteChargeCap,
    SiteDischargeCap,
    ReversalBudget,
    LengthMismatch,
}

/// One admissibility failure; `ev_id` is None for fleet-wide violations.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub ev_id: Option<u32>,
    pub kind: ViolationKind,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.ev_id {
            Some(id) => write!(f, "{:?} (ev {})", self.kind, id),
            None => write!(f, "{:?} (fleet)", self.kind),
        }
    }
}

/// Borrowed bundle of everything the fleet dynamics need.
#[derive(Debug, Clone, Copy)]
pub struct FleetCtx<'a> {
    pub specs: &'a [EvSpec],
    pub level: &'a ConstraintLevel,
    pub slot_hours: f64,
}

impl<'a> FleetCtx<'a> {
    pub fn new(specs: &'a [EvSpec], level: &'a ConstraintLevel, slot_hours: f64) -> Self {
        FleetCtx {
            specs,
            level,
            slot_hours,
        }
    }

    pub fn fleet_size(&self) -> usize {
        self.specs.len()
    }

    pub fn slots_per_hour(&self) -> usize {
        (1.0 / self.slot_hours).round().max(1.0) as usize
    }

    /// Full-rate energy step of EV `j` (kWh per slot).
    pub fn rate_kwh(&self, j: usize) -> f64 {
        self.specs[j].rate_kwh(self.slot_hours)
    }

    pub fn site_charge_cap_kwh(&self) -> Option<f64> {
        if self.level.caps_active() {
            self.level.site_charge_cap_kw.map(|kw| kw * self.slot_hours)
        } else {
            None
        }
    }

    pub fn site_discharge_cap_kwh(&self) -> Option<f64> {
        if self.level.caps_active() {
            self.level
                .site_discharge_cap_kw
                .map(|kw| kw * self.slot_hours)
        } else {
            None
        }
    }

    /// Reversal flag as seen by an action taken at `slot`: the flag resets
    /// at every window boundary before the action applies.
    fn effective_reversal_flag(&self, ev: &EvState, slot: usize) -> bool {
        if slot % self.slots_per_hour() == 0 {
            false
        } else {
            ev.reversal_used_in_hour
        }
    }

    fn is_reversal(ev: &EvState, delta: f64) -> bool {
        match ev.last_direction {
            Some(Direction::Charging) => delta < -EPS_KWH,
            Some(Direction::Discharging) => delta > EPS_KWH,
            None => false,
        }
    }

    /// Whether EV `j` may charge at `slot` without breaking its L3 reversal
    /// budget. Always true below L3.
    pub fn can_charge_now(&self, ev: &EvState, slot: usize) -> bool {
        !self.level.tracks_reversals()
            || ev.last_direction != Some(Direction::Discharging)
            || !self.effective_reversal_flag(ev, slot)
    }

    pub fn can_discharge_now(&self, ev: &EvState, slot: usize) -> bool {
        !self.level.tracks_reversals()
            || ev.last_direction != Some(Direction::Charging)
            || !self.effective_reversal_flag(ev, slot)
    }

    /// Checks an action against every constraint of the active level and
    /// returns all violations found (empty = admissible).
    pub fn violations(&self, state: &FleetState, action: &PerEvAction) -> Vec<Violation> {
        let mut out = Vec::new();
        if action.deltas_kwh.len() != self.specs.len() {
            out.push(Violation {
                ev_id: None,
                kind: ViolationKind::LengthMismatch,
            });
            return out;
        }
        for (j, (&delta, spec)) in action.deltas_kwh.iter().zip(self.specs).enumerate() {
            let ev = &state.ev_states[j];
            if delta.abs() > self.rate_kwh(j) + EPS_KWH {
                out.push(Violation {
                    ev_id: Some(spec.id),
                    kind: ViolationKind::RateLimit,
                });
            }
            let next_soc = ev.soc_kwh + delta;
            if next_soc < spec.min_soc_kwh - EPS_KWH {
                out.push(Violation {
                    ev_id: Some(spec.id),
                    kind: ViolationKind::SocLower,
                });
            }
            if next_soc > spec.capacity_kwh + EPS_KWH {
                out.push(Violation {
                    ev_id: Some(spec.id),
                    kind: ViolationKind::SocUpper,
                });
            }
            if self.level.tracks_reversals()
                && Self::is_reversal(ev, delta)
                && self.effective_reversal_flag(ev, state.slot)
            {
                out.push(Violation {
                    ev_id: Some(spec.id),
                    kind: ViolationKind::ReversalBudget,
                });
            }
        }
        if let Some(cap) = self.site_charge_cap_kwh() {
            let charged: f64 = action.deltas_kwh.iter().map(|d| d.max(0.0)).sum();
            if charged > cap + EPS_KWH {
                out.push(Violation {
                    ev_id: None,
                    kind: ViolationKind::SiteChargeCap,
                });
            }
        }
        if let Some(cap) = self.site_discharge_cap_kwh() {
            let discharged: f64 = action.deltas_kwh.iter().map(|d| (-d).max(0.0)).sum();
            if discharged > cap + EPS_KWH {
                out.push(Violation {
                    ev_id: None,
                    kind: ViolationKind::SiteDischargeCap,
                });
            }
        }
        out
    }

    pub fn is_admissible(&self, state: &FleetState, action: &PerEvAction) -> bool {
        self.violations(state, action).is_empty()
    }

    /// Applies an admissible action, producing the state at the next slot.
    pub fn transition(
        &self,
        state: &FleetState,
        action: &PerEvAction,
    ) -> Result<FleetState, FleetError> {
        let violations = self.violations(state, action);
        if !violations.is_empty() {
            return Err(FleetError::Inadmissible(violations));
        }
        Ok(self.transition_unchecked(state, action))
    }

    /// Transition without re-checking admissibility. Callers must have
    /// established admissibility themselves (the solvers do).
    pub fn transition_unchecked(&self, state: &FleetState, action: &PerEvAction) -> FleetState {
        let ev_states = state
            .ev_states
            .iter()
            .zip(&action.deltas_kwh)
            .map(|(ev, &delta)| {
                let mut flag = self.effective_reversal_flag(ev, state.slot);
                let mut dir = ev.last_direction;
                if delta > EPS_KWH {
                    if Self::is_reversal(ev, delta) {
                        flag = true;
                    }
                    dir = Some(Direction::Charging);
                } else if delta < -EPS_KWH {
                    if Self::is_reversal(ev, delta) {
                        flag = true;
                    }
                    dir = Some(Direction::Discharging);
                }
                EvState {
                    soc_kwh: ev.soc_kwh + delta,
                    last_direction: dir,
                    reversal_used_in_hour: flag,
                }
            })
            .collect();
        FleetState {
            slot: state.slot + 1,
            ev_states,
        }
    }

    /// Whether every EV meets its target at the horizon.
    pub fn terminal_ok(&self, state: &FleetState, n_slots: usize) -> Result<bool, FleetError> {
        if state.slot != n_slots {
            return Err(FleetError::NotAtHorizon {
                expected: n_slots,
                actual: state.slot,
            });
        }
        Ok(state
            .ev_states
            .iter()
            .zip(self.specs)
            .all(|(ev, spec)| ev.soc_kwh >= spec.target_soc_kwh - EPS_KWH))
    }

    /// Upper bound on the state of charge EV `j` can reach by the horizon.
    ///
    /// At L3 an EV whose reversal budget is spent after a discharge cannot
    /// charge again until the next hour window, so those slots are excluded.
    pub fn reachability_bound(
        &self,
        ev: &EvState,
        j: usize,
        slot: usize,
        n_slots: usize,
    ) -> f64 {
        let spec = &self.specs[j];
        let remaining = n_slots.saturating_sub(slot);
        let mut usable = remaining;
        if self.level.tracks_reversals() && remaining > 0 && !self.can_charge_now(ev, slot) {
            let blocked = self.slots_per_hour() - slot % self.slots_per_hour();
            usable = remaining.saturating_sub(blocked);
        }
        (ev.soc_kwh + usable as f64 * self.rate_kwh(j)).min(spec.capacity_kwh)
    }

    /// Number of full-rate charge slots EV `j` still needs to reach target.
    pub fn needed_charge_slots(&self, ev: &EvState, j: usize) -> usize {
        let deficit = self.specs[j].target_soc_kwh - ev.soc_kwh;
        if deficit <= EPS_KWH {
            0
        } else {
            ((deficit - EPS_KWH) / self.rate_kwh(j)).ceil() as usize
        }
    }
}

/// Parses a fleet roster CSV with header
/// `id,capacity_kwh,min_soc_kwh,max_rate_kw,initial_soc_kwh,target_soc_kwh`.
pub fn read_roster(path: &std::path::Path) -> Result<Vec<EvSpec>, FleetError> {
    let text = std::fs::read_to_string(path)?;
    parse_roster(&text)
}

pub fn parse_roster(text: &str) -> Result<Vec<EvSpec>, FleetError> {
    const HEADER: &str = "id,capacity_kwh,min_soc_kwh,max_rate_kw,initial_soc_kwh,target_soc_kwh";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        Some((_, h)) => {
            return Err(FleetError::RosterParse {
                line: 1,
                reason: format!("expected header `{HEADER}`, got `{}`", h.trim()),
            })
        }
        None => {
            return Err(FleetError::RosterParse {
                line: 1,
                reason: "empty roster".into(),
            })
        }
    }
    let mut specs = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(FleetError::RosterParse {
                line: lineno,
                reason: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, name: &str| -> Result<f64, FleetError> {
            s.trim().parse::<f64>().map_err(|e| FleetError::RosterParse {
                line: lineno,
                reason: format!("{name}: {e}"),
            })
        };
        let spec = EvSpec {
            id: fields[0]
                .trim()
                .parse()
                .map_err(|e| FleetError::RosterParse {
                    line: lineno,
                    reason: format!("id: {e}"),
                })?,
            capacity_kwh: parse_f(fields[1], "capacity_kwh")?,
            min_soc_kwh: parse_f(fields[2], "min_soc_kwh")?,
            max_rate_kw: parse_f(fields[3], "max_rate_kw")?,
            initial_soc_kwh: parse_f(fields[4], "initial_soc_kwh")?,
            target_soc_kwh: parse_f(fields[5], "target_soc_kwh")?,
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

pub fn write_roster(specs: &[EvSpec]) -> String {
    let mut out =
        String::from("id,capacity_kwh,min_soc_kwh,max_rate_kw,initial_soc_kwh,target_soc_kwh\n");
    for s in specs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.id, s.capacity_kwh, s.min_soc_kwh, s.max_rate_kw, s.initial_soc_kwh, s.target_soc_kwh
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: u32) -> EvSpec {
        EvSpec {
            id,
            capacity_kwh: 100.0,
            min_soc_kwh: 10.0,
            max_rate_kw: 10.0,
            initial_soc_kwh: 30.0,
            target_soc_kwh: 80.0,
        }
    }

    fn l3() -> ConstraintLevel {
        ConstraintLevel::with_site_caps(Level::L3, 1800.0, 1800.0)
    }

    #[test]
    fn transition_applies_delta_and_direction() {
        let specs = vec![spec(0)];
        let level = ConstraintLevel::new(Level::L0);
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let state = FleetState::initial(&specs);
        let next = ctx
            .transition(
                &state,
                &PerEvAction {
                    deltas_kwh: vec![2.5],
                },
            )
            .unwrap();
        assert_eq!(next.slot, 1);
        assert_eq!(next.ev_states[0].soc_kwh, 32.5);
        assert_eq!(next.ev_states[0].last_direction, Some(Direction::Charging));
    }

    #[test]
    fn idle_preserves_soc_and_direction() {
        let specs = vec![spec(0)];
        let level = ConstraintLevel::new(Level::L0);
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let mut state = FleetState::initial(&specs);
        state.ev_states[0].last_direction = Some(Direction::Discharging);
        let next = ctx.transition(&state, &PerEvAction::idle(1)).unwrap();
        assert_eq!(next.ev_states[0].soc_kwh, 30.0);
        assert_eq!(
            next.ev_states[0].last_direction,
            Some(Direction::Discharging)
        );
    }

    #[test]
    fn second_reversal_in_same_window_rejected() {
        let specs = vec![spec(0)];
        let level = l3();
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let mut state = FleetState::initial(&specs);
        // Charge at slot 0, reverse to discharge at slot 1 (first reversal).
        state = ctx
            .transition(&state, &PerEvAction { deltas_kwh: vec![2.5] })
            .unwrap();
        state = ctx
            .transition(&state, &PerEvAction { deltas_kwh: vec![-2.5] })
            .unwrap();
        assert!(state.ev_states[0].reversal_used_in_hour);
        assert_eq!(
            state.ev_states[0].last_direction,
            Some(Direction::Discharging)
        );
        // Second reversal at slot 2, same window: rejected.
        let again = ctx.transition(&state, &PerEvAction { deltas_kwh: vec![2.5] });
        match again {
            Err(FleetError::Inadmissible(v)) => {
                assert_eq!(v[0].kind, ViolationKind::ReversalBudget);
                assert_eq!(v[0].ev_id, Some(0));
            }
            other => panic!("expected reversal violation, got {other:?}"),
        }
        // Same direction is still fine.
        assert!(ctx
            .transition(&state, &PerEvAction { deltas_kwh: vec![-2.5] })
            .is_ok());
    }

    #[test]
    fn window_boundary_resets_reversal_budget() {
        let specs = vec![spec(0)];
        let level = l3();
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let mut state = FleetState::initial(&specs);
        for delta in [2.5, -2.5, 0.0, 0.0] {
            state = ctx
                .transition(&state, &PerEvAction { deltas_kwh: vec![delta] })
                .unwrap();
        }
        assert_eq!(state.slot, 4);
        // New window: the reversal back to charging is the window's first.
        let next = ctx
            .transition(&state, &PerEvAction { deltas_kwh: vec![2.5] })
            .unwrap();
        assert!(next.ev_states[0].reversal_used_in_hour);
    }

    #[test]
    fn site_charge_cap_violation() {
        let specs: Vec<EvSpec> = (0..200).map(spec).collect();
        let level = ConstraintLevel::with_site_caps(Level::L2, 1800.0, 1800.0);
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let state = FleetState::initial(&specs);
        // 200 EVs x 2.5 kWh = 500 kWh > 450 kWh cap.
        let action = PerEvAction {
            deltas_kwh: vec![2.5; 200],
        };
        let violations = ctx.violations(&state, &action);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].kind, ViolationKind::SiteChargeCap);
    }

    #[test]
    fn soc_upper_bound_violation() {
        let mut s = spec(0);
        s.initial_soc_kwh = 100.0;
        s.target_soc_kwh = 80.0;
        let specs = vec![s];
        let level = ConstraintLevel::new(Level::L1);
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let state = FleetState::initial(&specs);
        let violations = ctx.violations(&state, &PerEvAction { deltas_kwh: vec![2.5] });
        assert_eq!(violations[0].kind, ViolationKind::SocUpper);
    }

    #[test]
    fn idle_always_admissible() {
        let specs: Vec<EvSpec> = (0..5).map(spec).collect();
        for level in [
            ConstraintLevel::new(Level::L0),
            ConstraintLevel::new(Level::L1),
            ConstraintLevel::with_site_caps(Level::L2, 45.0, 45.0),
            ConstraintLevel::with_site_caps(Level::L3, 45.0, 45.0),
        ] {
            let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
            let state = FleetState::initial(&specs);
            assert!(ctx.is_admissible(&state, &PerEvAction::idle(5)));
        }
    }

    #[test]
    fn terminal_check() {
        let mut a = spec(0);
        a.target_soc_kwh = 80.0;
        let mut b = spec(1);
        b.target_soc_kwh = 80.0;
        let specs = vec![a, b];
        let level = ConstraintLevel::new(Level::L1);
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let mk = |socs: [f64; 2], slot| FleetState {
            slot,
            ev_states: socs.iter().map(|&s| EvState::fresh(s)).collect(),
        };
        assert!(ctx.terminal_ok(&mk([80.0, 85.0], 4), 4).unwrap());
        assert!(!ctx.terminal_ok(&mk([80.0, 77.5], 4), 4).unwrap());
        assert!(matches!(
            ctx.terminal_ok(&mk([80.0, 85.0], 3), 4),
            Err(FleetError::NotAtHorizon { .. })
        ));
    }

    #[test]
    fn terminal_vacuous_for_empty_fleet() {
        let specs: Vec<EvSpec> = vec![];
        let level = ConstraintLevel::new(Level::L1);
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let state = FleetState {
            slot: 4,
            ev_states: vec![],
        };
        assert!(ctx.terminal_ok(&state, 4).unwrap());
    }

    #[test]
    fn reachability_bound_basic() {
        let specs = vec![spec(0)];
        let level = ConstraintLevel::new(Level::L1);
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let ev = EvState::fresh(70.0);
        assert_eq!(ctx.reachability_bound(&ev, 0, 0, 8), 90.0);
        assert_eq!(ctx.reachability_bound(&ev, 0, 1, 8), 87.5);
        let full = EvState::fresh(100.0);
        assert_eq!(ctx.reachability_bound(&full, 0, 0, 8), 100.0);
    }

    #[test]
    fn reachability_bound_accounts_for_blocked_window() {
        let specs = vec![spec(0)];
        let level = l3();
        let ctx = FleetCtx::new(&specs, &level, DEFAULT_SLOT_HOURS);
        let blocked = EvState {
            soc_kwh: 70.0,
            last_direction: Some(Direction::Discharging),
            reversal_used_in_hour: true,
        };
        // At slot 1 the EV must idle through slots 1..3; charging resumes
        // at slot 4, so only 4 of the 7 remaining slots are usable.
        assert_eq!(ctx.reachability_bound(&blocked, 0, 1, 8), 80.0);
        // At a window boundary the flag has reset.
        assert_eq!(ctx.reachability_bound(&blocked, 0, 4, 8), 80.0);
        assert_eq!(ctx.reachability_bound(&blocked, 0, 0, 8), 90.0);
    }

    #[test]
    fn roster_round_trip() {
        let specs: Vec<EvSpec> = (0..3).map(spec).collect();
        let text = write_roster(&specs);
        let parsed = parse_roster(&text).unwrap();
        assert_eq!(parsed, specs);
    }

    #[test]
    fn roster_rejects_bad_rows() {
        let text = "id,capacity_kwh,min_soc_kwh,max_rate_kw,initial_soc_kwh,target_soc_kwh\n0,100,10,10,30\n";
        match parse_roster(text) {
            Err(FleetError::RosterParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn l0_requires_homogeneous_fleet() {
        let mut b = spec(1);
        b.initial_soc_kwh = 40.0;
        let specs = vec![spec(0), b];
        let level = ConstraintLevel::new(Level::L0);
        assert!(level.validate(&specs).is_err());
        let level1 = ConstraintLevel::new(Level::L1);
        assert!(level1.validate(&specs).is_ok());
    }
}
