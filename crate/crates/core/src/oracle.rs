//! Ground-truth generators: exhaustive enumeration of the action lattice
//! for tiny instances, and a CPLEX-LP MILP export for cross-checking
//! against external solvers.

use sha2::{Digest, Sha256};

use crate::fleet::{FleetState, Level, PerEvAction};
use crate::market::{stage_cost, total_cost, Scenario};
use crate::sched::{decode_lattice_action, Schedule, SolveError};

/// Default cap on the raw sequence space 3^(N*d).
pub const DEFAULT_ENUM_BUDGET: f64 = 1e7;

#[derive(Debug, Clone)]
pub struct EnumerationOutcome {
    pub min_cost_eur: f64,
    pub schedule: Schedule,
    /// Number of admissible sequences that reached the terminal set.
    pub feasible_sequences: u64,
}

/// Evaluates every action-lattice sequence and returns the global minimum.
///
/// Sequences are explored in lexicographic order (slot-major, EV 0 least
/// significant, digits -r < 0 < +r) and ties keep the first minimum, so
/// the argmin is deterministic. Inadmissible prefixes are cut early; every
/// extension of an inadmissible prefix is itself inadmissible, so the cut
/// never drops a candidate.
pub fn enumerate(scenario: &Scenario) -> Result<EnumerationOutcome, SolveError> {
    enumerate_with_budget(scenario, DEFAULT_ENUM_BUDGET)
}

pub fn enumerate_with_budget(
    scenario: &Scenario,
    budget: f64,
) -> Result<EnumerationOutcome, SolveError> {
    scenario.validate()?;
    let d = scenario.fleet_size();
    let n = scenario.n_slots;
    let sequences = 3f64.powi((n * d) as i32);
    if sequences > budget {
        return Err(SolveError::BudgetExceeded { sequences, budget });
    }

    let ctx = scenario.ctx();
    let n_actions = 3usize.pow(d as u32);
    let mut search = Search {
        scenario,
        n_actions,
        best_cost: f64::INFINITY,
        best_actions: None,
        feasible: 0,
        stack: Vec::with_capacity(n),
        deltas: Vec::with_capacity(d),
    };
    let root = FleetState::initial(&scenario.fleet);
    search.visit(&ctx, root, 0.0)?;

    match search.best_actions {
        Some(actions) => {
            let mut schedule = Schedule {
                actions,
                aggregate_labels: None,
                objective_eur: 0.0,
            };
            schedule.objective_eur = total_cost(&schedule, scenario)?.total_eur;
            debug_assert_eq!(schedule.objective_eur, search.best_cost);
            Ok(EnumerationOutcome {
                min_cost_eur: schedule.objective_eur,
                schedule,
                feasible_sequences: search.feasible,
            })
        }
        None => Err(SolveError::Infeasible),
    }
}

struct Search<'a> {
    scenario: &'a Scenario,
    n_actions: usize,
    best_cost: f64,
    best_actions: Option<Vec<Vec<f64>>>,
    feasible: u64,
    stack: Vec<Vec<f64>>,
    deltas: Vec<f64>,
}

impl Search<'_> {
    fn visit(
        &mut self,
        ctx: &crate::fleet::FleetCtx,
        state: FleetState,
        cost: f64,
    ) -> Result<(), SolveError> {
        let n = self.scenario.n_slots;
        if state.slot == n {
            if ctx.terminal_ok(&state, n).expect("slot matches horizon") {
                self.feasible += 1;
                if cost < self.best_cost {
                    self.best_cost = cost;
                    self.best_actions = Some(self.stack.clone());
                }
            }
            return Ok(());
        }
        let k = state.slot;
        for code in 0..self.n_actions {
            decode_lattice_action(code, ctx, &mut self.deltas);
            let action = PerEvAction {
                deltas_kwh: std::mem::take(&mut self.deltas),
            };
            if ctx.is_admissible(&state, &action) {
                let next = ctx.transition_unchecked(&state, &action);
                let stage = stage_cost(k, action.sum_kwh(), self.scenario)?;
                self.stack.push(action.deltas_kwh.clone());
                self.visit(ctx, next, cost + stage.cost_eur)?;
                self.stack.pop();
            }
            self.deltas = action.deltas_kwh;
        }
        Ok(())
    }
}

/// Writes the MILP formulation of a scenario in CPLEX LP format.
///
/// Unlike the solver lattice, charge and discharge rates are continuous in
/// [0, r], so the MILP optimum can be strictly below the lattice optimum.
pub fn emit_milp_lp(scenario: &Scenario, out_path: &std::path::Path) -> Result<(), SolveError> {
    let text = milp_lp_string(scenario)?;
    std::fs::write(out_path, text).map_err(crate::market::MarketError::Io)?;
    Ok(())
}

pub fn milp_lp_string(scenario: &Scenario) -> Result<String, SolveError> {
    scenario.validate()?;
    for k in 0..scenario.n_slots {
        if scenario.rho[k] + scenario.sigma[k] <= 0.0 {
            return Err(SolveError::Market(crate::market::MarketError::Invalid(
                format!(
                    "slot {k}: rho + sigma must be positive for the buy/excess split \
                     to linearize the stage cost (rho={}, sigma={})",
                    scenario.rho[k], scenario.sigma[k]
                ),
            )));
        }
    }

    let d = scenario.fleet_size();
    let n = scenario.n_slots;
    let ctx = scenario.ctx();
    let sph = ctx.slots_per_hour();
    let l3 = scenario.level.level == Level::L3;
    let caps = scenario.level.caps_active();
    let n_windows = n.div_ceil(sph);

    let hash = {
        let mut h = Sha256::new();
        h.update(scenario.to_canonical_json().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
    };

    let n_cont = d * (n + 1) + 2 * d * n + 2 * n;
    let n_bin = 2 * d * n + if l3 { d * (n - 1) } else { 0 };
    // Switch variables exist from slot 1 on; with a single slot the L3
    // machinery vanishes entirely.
    let l3_rows = if l3 && n > 1 {
        2 * d * (n - 1) + d * n_windows
    } else {
        0
    };
    let n_rows = d * n            // soc balance
        + n                       // net split
        + 2 * d * n               // rate links
        + d * n                   // direction exclusivity
        + if caps { 2 * n } else { 0 }
        + l3_rows;

    let mut out = String::new();
    out.push_str("\\ EV fleet dispatch MILP\n");
    out.push_str(&format!(
        "\\ generator: fleetdp-core v{}\n",
        env!("CARGO_PKG_VERSION")
    ));
    out.push_str(&format!("\\ scenario sha256: {hash}\n"));
    out.push_str(&format!(
        "\\ level: L{}, fleet: {d} EVs, horizon: {n} slots x {} h\n",
        u8::from(scenario.level.level),
        scenario.slot_hours
    ));
    out.push_str(&format!(
        "\\ continuous vars: soc d*(N+1) + c,d 2*d*N + b,e 2*N = {n_cont}\n"
    ));
    out.push_str(&format!(
        "\\ binary vars: yc,yd 2*d*N{} = {n_bin}\n",
        if l3 { " + s d*(N-1)" } else { "" }
    ));
    out.push_str(&format!(
        "\\ constraints: balance d*N + net N + links 2*d*N + dir d*N{}{} = {n_rows}\n",
        if caps { " + site 2*N" } else { "" },
        if l3 {
            " + switch 2*d*(N-1) + window d*ceil(N/sph)"
        } else {
            ""
        }
    ));

    out.push_str("Minimize\n");
    let mut row = RowWriter::new(" obj:");
    for k in 0..n {
        row.term(scenario.rho[k], &format!("b_{k}"));
        row.term(scenario.sigma[k], &format!("e_{k}"));
    }
    out.push_str(&row.finish_expr());
    out.push('\n');

    out.push_str("Subject To\n");
    for j in 0..d {
        for k in 0..n {
            let mut row = RowWriter::new(&format!(" balance_{j}_{k}:"));
            row.term(1.0, &format!("soc_{j}_{}", k + 1));
            row.term(-1.0, &format!("soc_{j}_{k}"));
            row.term(-1.0, &format!("c_{j}_{k}"));
            row.term(1.0, &format!("d_{j}_{k}"));
            out.push_str(&row.finish(" = 0"));
        }
    }
    for k in 0..n {
        let mut row = RowWriter::new(&format!(" net_{k}:"));
        row.term(1.0, &format!("b_{k}"));
        row.term(-1.0, &format!("e_{k}"));
        for j in 0..d {
            row.term(-1.0, &format!("c_{j}_{k}"));
            row.term(1.0, &format!("d_{j}_{k}"));
        }
        out.push_str(&row.finish(&format!(" = {}", fmt_num(scenario.volumes[k]))));
    }
    for j in 0..d {
        let r = ctx.rate_kwh(j);
        for k in 0..n {
            let mut row = RowWriter::new(&format!(" clink_{j}_{k}:"));
            row.term(1.0, &format!("c_{j}_{k}"));
            row.term(-r, &format!("yc_{j}_{k}"));
            out.push_str(&row.finish(" <= 0"));
            let mut row = RowWriter::new(&format!(" dlink_{j}_{k}:"));
            row.term(1.0, &format!("d_{j}_{k}"));
            row.term(-r, &format!("yd_{j}_{k}"));
            out.push_str(&row.finish(" <= 0"));
        }
    }
    for j in 0..d {
        for k in 0..n {
            let mut row = RowWriter::new(&format!(" dir_{j}_{k}:"));
            row.term(1.0, &format!("yc_{j}_{k}"));
            row.term(1.0, &format!("yd_{j}_{k}"));
            out.push_str(&row.finish(" <= 1"));
        }
    }
    if caps {
        let cap_c = ctx.site_charge_cap_kwh().expect("caps validated");
        let cap_d = ctx.site_discharge_cap_kwh().expect("caps validated");
        for k in 0..n {
            let mut row = RowWriter::new(&format!(" sitec_{k}:"));
            for j in 0..d {
                row.term(1.0, &format!("c_{j}_{k}"));
            }
            out.push_str(&row.finish(&format!(" <= {}", fmt_num(cap_c))));
            let mut row = RowWriter::new(&format!(" sited_{k}:"));
            for j in 0..d {
                row.term(1.0, &format!("d_{j}_{k}"));
            }
            out.push_str(&row.finish(&format!(" <= {}", fmt_num(cap_d))));
        }
    }
    if l3 {
        for j in 0..d {
            for k in 1..n {
                let mut row = RowWriter::new(&format!(" swc_{j}_{k}:"));
                row.term(1.0, &format!("s_{j}_{k}"));
                row.term(-1.0, &format!("yc_{j}_{k}"));
                row.term(-1.0, &format!("yd_{j}_{}", k - 1));
                out.push_str(&row.finish(" >= -1"));
                let mut row = RowWriter::new(&format!(" swd_{j}_{k}:"));
                row.term(1.0, &format!("s_{j}_{k}"));
                row.term(-1.0, &format!("yd_{j}_{k}"));
                row.term(-1.0, &format!("yc_{j}_{}", k - 1));
                out.push_str(&row.finish(" >= -1"));
            }
            for h in 0..n_windows {
                let mut row = RowWriter::new(&format!(" window_{j}_{h}:"));
                let mut any = false;
                for k in (h * sph).max(1)..((h + 1) * sph).min(n) {
                    row.term(1.0, &format!("s_{j}_{k}"));
                    any = true;
                }
                if any {
                    out.push_str(&row.finish(" <= 1"));
                }
            }
        }
    }

    out.push_str("Bounds\n");
    for (j, spec) in scenario.fleet.iter().enumerate() {
        out.push_str(&format!(" soc_{j}_0 = {}\n", fmt_num(spec.initial_soc_kwh)));
        for k in 1..n {
            out.push_str(&format!(
                " {} <= soc_{j}_{k} <= {}\n",
                fmt_num(spec.min_soc_kwh),
                fmt_num(spec.capacity_kwh)
            ));
        }
        out.push_str(&format!(
            " {} <= soc_{j}_{n} <= {}\n",
            fmt_num(spec.target_soc_kwh),
            fmt_num(spec.capacity_kwh)
        ));
        let r = ctx.rate_kwh(j);
        for k in 0..n {
            out.push_str(&format!(" c_{j}_{k} <= {}\n", fmt_num(r)));
            out.push_str(&format!(" d_{j}_{k} <= {}\n", fmt_num(r)));
        }
    }

    out.push_str("Binaries\n");
    let mut line = String::new();
    let push_bin = |out: &mut String, line: &mut String, name: String| {
        if line.len() + name.len() + 1 > 200 {
            out.push_str(line);
            out.push('\n');
            line.clear();
        }
        line.push(' ');
        line.push_str(&name);
    };
    for j in 0..d {
        for k in 0..n {
            push_bin(&mut out, &mut line, format!("yc_{j}_{k}"));
            push_bin(&mut out, &mut line, format!("yd_{j}_{k}"));
        }
        if l3 {
            for k in 1..n {
                push_bin(&mut out, &mut line, format!("s_{j}_{k}"));
            }
        }
    }
    if !line.is_empty() {
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("End\n");
    Ok(out)
}

/// Shortest round-trip decimal for LP coefficients.
fn fmt_num(x: f64) -> String {
    format!("{x}")
}

/// Builds one objective/constraint row, wrapping lines near 200 columns.
struct RowWriter {
    buf: String,
    line_len: usize,
    any_term: bool,
}

impl RowWriter {
    fn new(prefix: &str) -> Self {
        RowWriter {
            buf: prefix.to_string(),
            line_len: prefix.len(),
            any_term: false,
        }
    }

    fn term(&mut self, coef: f64, var: &str) {
        let piece = if coef < 0.0 {
            format!(" - {} {var}", fmt_num(-coef))
        } else if self.any_term {
            format!(" + {} {var}", fmt_num(coef))
        } else {
            format!(" {} {var}", fmt_num(coef))
        };
        if self.line_len + piece.len() > 200 {
            self.buf.push('\n');
            self.buf.push_str("   ");
            self.line_len = 3;
        }
        self.buf.push_str(&piece);
        self.line_len += piece.len();
        self.any_term = true;
    }

    fn finish(mut self, tail: &str) -> String {
        self.buf.push_str(tail);
        self.buf.push('\n');
        self.buf
    }

    fn finish_expr(mut self) -> String {
        self.buf.push('\n');
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{ConstraintLevel, EvSpec, Level};
    use crate::market::Scenario;

    fn ev(id: u32, initial: f64, target: f64) -> EvSpec {
        EvSpec {
            id,
            capacity_kwh: 100.0,
            min_soc_kwh: 10.0,
            max_rate_kw: 10.0,
            initial_soc_kwh: initial,
            target_soc_kwh: target,
        }
    }

    fn one_ev_scenario(n: usize, initial: f64, target: f64) -> Scenario {
        Scenario {
            n_slots: n,
            slot_hours: 0.25,
            rho: vec![0.1; n],
            sigma: vec![0.05; n],
            volumes: vec![0.0; n],
            fleet: vec![ev(0, initial, target)],
            level: ConstraintLevel::new(Level::L1),
            seed: 0,
        }
    }

    #[test]
    fn enumerate_counts_feasible_sequences() {
        // One EV, two slots, no target pressure: all 9 sequences that stay
        // in bounds and end at >= 30 kWh are feasible.
        let s = one_ev_scenario(2, 30.0, 10.0);
        let out = enumerate(&s).unwrap();
        assert_eq!(out.feasible_sequences, 9);
        assert_eq!(out.min_cost_eur, 0.0);
    }

    #[test]
    fn enumerate_infeasible_when_target_unreachable() {
        let s = one_ev_scenario(2, 30.0, 40.0);
        assert!(matches!(enumerate(&s), Err(SolveError::Infeasible)));
    }

    #[test]
    fn enumerate_budget_guard() {
        let s = one_ev_scenario(2, 30.0, 30.0);
        assert!(matches!(
            enumerate_with_budget(&s, 8.0),
            Err(SolveError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn lp_minimal_instance_structure() {
        let s = one_ev_scenario(1, 30.0, 30.0);
        let text = milp_lp_string(&s).unwrap();
        assert!(text.contains("Minimize"));
        assert!(text.contains("Subject To"));
        assert!(text.contains("balance_0_0:"));
        assert!(text.contains("net_0:"));
        assert!(text.contains("Binaries"));
        assert!(text.trim_end().ends_with("End"));
        // 2 continuous action vars + 2 direction binaries for d=1, N=1.
        assert!(text.contains("c_0_0"));
        assert!(text.contains("d_0_0"));
        assert!(text.contains("yc_0_0"));
        assert!(text.contains("yd_0_0"));
        assert!(!text.contains("s_0_"));
    }

    #[test]
    fn lp_deterministic() {
        let s = crate::market::generate_scenario(crate::market::GenParams::new(Level::L3, 3, 8, 5));
        assert_eq!(milp_lp_string(&s).unwrap(), milp_lp_string(&s).unwrap());
    }

    #[test]
    fn lp_rejects_degenerate_price_pair() {
        let mut s = one_ev_scenario(1, 30.0, 30.0);
        s.rho[0] = -0.1;
        s.sigma[0] = 0.05;
        assert!(milp_lp_string(&s).is_err());
    }
}
