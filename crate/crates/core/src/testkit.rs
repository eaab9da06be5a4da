//! Test support: seeded small-instance scenarios sized for exhaustive
//! enumeration, and an LP-file syntax checker that is written against the
//! CPLEX LP grammar rather than sharing any code with the emitter.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fleet::{ConstraintLevel, EvSpec, Level};
use crate::market::{round_sig9, Scenario};

/// A randomized desk-scale instance: lattice-friendly initial charges,
/// reachable targets, mixed-sign volumes and a wide price spread so that
/// acting on the market is usually worth something. Site caps at L2/L3 are
/// sized to bind without making single-EV fleets inert.
pub fn small_scenario(level: Level, d: usize, n_slots: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ca1e);
    let rate_kw = 10.0;
    let r = rate_kw * 0.25;

    let mut fleet = Vec::with_capacity(d);
    let draw_pair = |rng: &mut ChaCha8Rng| {
        let init_steps: i64 = rng.random_range(0..=36);
        let initial = 10.0 + r * init_steps as f64;
        // Offset in [-3, min(n/2+1, headroom)]; negative offsets leave room
        // to discharge, positive ones force some charging.
        let headroom = ((100.0 - initial) / r).floor() as i64;
        let hi = (n_slots as i64 / 2 + 1).min(headroom);
        let lo = (-3i64).max(-init_steps);
        let offset = if lo >= hi { lo } else { rng.random_range(lo..=hi) };
        let target = (initial + r * offset as f64).clamp(10.0, 100.0);
        (initial, target)
    };
    if level == Level::L0 {
        let (initial, target) = draw_pair(&mut rng);
        for id in 0..d as u32 {
            fleet.push(EvSpec {
                id,
                capacity_kwh: 100.0,
                min_soc_kwh: 10.0,
                max_rate_kw: rate_kw,
                initial_soc_kwh: initial,
                target_soc_kwh: target,
            });
        }
    } else {
        for id in 0..d as u32 {
            let (initial, target) = draw_pair(&mut rng);
            fleet.push(EvSpec {
                id,
                capacity_kwh: 100.0,
                min_soc_kwh: 10.0,
                max_rate_kw: rate_kw,
                initial_soc_kwh: initial,
                target_soc_kwh: target,
            });
        }
    }

    let constraint = if level >= Level::L2 {
        let cap = (0.9 * d as f64 * rate_kw).max(rate_kw);
        ConstraintLevel::with_site_caps(level, cap, cap)
    } else {
        ConstraintLevel::new(level)
    };

    let mut rho = Vec::with_capacity(n_slots);
    let mut sigma = Vec::with_capacity(n_slots);
    let mut volumes = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let p: f64 = rng.random_range(0.02..0.14);
        rho.push(round_sig9(p));
        sigma.push(round_sig9(0.5 * p));
        let v: f64 = rng.random_range(-1.2..1.2) * r * d as f64;
        volumes.push(round_sig9(v));
    }

    let scenario = Scenario {
        n_slots,
        slot_hours: 0.25,
        rho,
        sigma,
        volumes,
        fleet,
        level: constraint,
        seed,
    };
    scenario.validate().expect("small scenario is valid");
    scenario
}

/// Summary of a syntactically valid LP file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LpSummary {
    pub objective_terms: usize,
    pub n_constraints: usize,
    pub n_bounds: usize,
    pub n_binaries: usize,
    pub variables: BTreeSet<String>,
}

/// Validates CPLEX LP syntax: section order, linear expressions, bound
/// forms and the trailing `End`. Returns counts for cross-checking.
pub fn check_lp_syntax(text: &str) -> Result<LpSummary, String> {
    let mut sections: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('\\') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lower = trimmed.to_ascii_lowercase();
        let header = match lower.as_str() {
            "minimize" | "maximize" | "min" | "max" => Some("objective"),
            "subject to" | "st" | "s.t." | "such that" => Some("constraints"),
            "bounds" | "bound" => Some("bounds"),
            "binaries" | "binary" | "bin" => Some("binaries"),
            "generals" | "general" | "gen" => Some("generals"),
            "end" => Some("end"),
            _ => None,
        };
        match header {
            Some(name) => sections.push((name.to_string(), Vec::new())),
            None => match sections.last_mut() {
                Some((_, lines)) => lines.push(trimmed.to_string()),
                None => {
                    return Err(format!(
                        "line {}: content before the objective section",
                        lineno + 1
                    ))
                }
            },
        }
    }

    let names: Vec<&str> = sections.iter().map(|(n, _)| n.as_str()).collect();
    if names.first() != Some(&"objective") {
        return Err("file must start with Minimize/Maximize".into());
    }
    if names.last() != Some(&"end") {
        return Err("file must end with End".into());
    }
    let expected_order = ["objective", "constraints", "bounds", "binaries", "generals", "end"];
    let mut order_cursor = 0;
    for name in &names {
        let pos = expected_order
            .iter()
            .position(|e| e == name)
            .ok_or_else(|| format!("unknown section {name}"))?;
        if pos < order_cursor {
            return Err(format!("section {name} out of order"));
        }
        order_cursor = pos;
    }

    let mut variables = BTreeSet::new();
    let mut summary = LpSummary {
        objective_terms: 0,
        n_constraints: 0,
        n_bounds: 0,
        n_binaries: 0,
        variables: BTreeSet::new(),
    };

    for (name, lines) in &sections {
        let body = lines.join(" ");
        match name.as_str() {
            "objective" => {
                let expr = strip_label(&body);
                summary.objective_terms = parse_linear_expr(expr, &mut variables)?;
            }
            "constraints" => {
                summary.n_constraints = parse_constraints(&body, &mut variables)?;
            }
            "bounds" => {
                for line in lines {
                    parse_bound_line(line, &mut variables)?;
                    summary.n_bounds += 1;
                }
            }
            "binaries" | "generals" => {
                for tok in body.split_whitespace() {
                    if !is_var_name(tok) {
                        return Err(format!("invalid variable name `{tok}` in {name}"));
                    }
                    if name == "binaries" {
                        summary.n_binaries += 1;
                    }
                    if !variables.contains(tok) {
                        return Err(format!("{name} lists `{tok}` which never appears"));
                    }
                }
            }
            "end" => {
                if !lines.is_empty() {
                    return Err("content after End".into());
                }
            }
            _ => unreachable!(),
        }
    }
    summary.variables = variables;
    Ok(summary)
}

fn strip_label(expr: &str) -> &str {
    match expr.split_once(':') {
        Some((_, rest)) => rest,
        None => expr,
    }
}

fn is_var_name(tok: &str) -> bool {
    let mut chars = tok.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn is_number(tok: &str) -> bool {
    tok.parse::<f64>().is_ok()
}

/// Parses `[+|-] [num] var [+|-] [num] var ...`; returns the term count.
fn parse_linear_expr(expr: &str, variables: &mut BTreeSet<String>) -> Result<usize, String> {
    let tokens: Vec<&str> = expr.split_whitespace().collect();
    let mut i = 0;
    let mut terms = 0;
    while i < tokens.len() {
        if tokens[i] == "+" || tokens[i] == "-" {
            i += 1;
            if i >= tokens.len() {
                return Err("dangling sign in expression".into());
            }
        }
        if is_number(tokens[i]) {
            i += 1;
            if i >= tokens.len() {
                return Err("coefficient without variable".into());
            }
        }
        if !is_var_name(tokens[i]) {
            return Err(format!("expected variable, got `{}`", tokens[i]));
        }
        variables.insert(tokens[i].to_string());
        terms += 1;
        i += 1;
    }
    if terms == 0 {
        return Err("empty linear expression".into());
    }
    Ok(terms)
}

/// Splits a constraint body on relational operators. Each constraint is
/// `[label:] expr (<=|>=|=|<|>) number`.
fn parse_constraints(body: &str, variables: &mut BTreeSet<String>) -> Result<usize, String> {
    let tokens: Vec<&str> = body.split_whitespace().collect();
    let mut count = 0;
    let mut start = 0;
    let mut i = 0;
    while i < tokens.len() {
        let is_op = matches!(tokens[i], "<=" | ">=" | "=" | "<" | ">" | "=<" | "=>");
        if is_op {
            if i + 1 >= tokens.len() || !is_number(tokens[i + 1]) {
                return Err(format!("operator `{}` not followed by a number", tokens[i]));
            }
            let expr = tokens[start..i].join(" ");
            parse_linear_expr(strip_label(&expr), variables)?;
            count += 1;
            i += 2;
            start = i;
        } else {
            i += 1;
        }
    }
    if start != tokens.len() {
        return Err("trailing tokens after last constraint".into());
    }
    if count == 0 {
        return Err("constraint section is empty".into());
    }
    Ok(count)
}

fn parse_bound_line(line: &str, variables: &mut BTreeSet<String>) -> Result<(), String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let ok = match tokens.as_slice() {
        [var, "free"] => is_var_name(var),
        [a, "<=", b] | [a, ">=", b] => {
            (is_var_name(a) && is_number(b)) || (is_number(a) && is_var_name(b))
        }
        [var, "=", num] => is_var_name(var) && is_number(num),
        [lo, "<=", var, "<=", hi] => is_number(lo) && is_var_name(var) && is_number(hi),
        _ => false,
    };
    if !ok {
        return Err(format!("invalid bound line `{line}`"));
    }
    for tok in tokens {
        if is_var_name(tok) && tok != "free" {
            variables.insert(tok.to_string());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_scenarios_are_deterministic() {
        let a = small_scenario(Level::L2, 2, 4, 9);
        let b = small_scenario(Level::L2, 2, 4, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn checker_accepts_minimal_lp() {
        let text = "\\ comment\nMinimize\n obj: 2 x + 3 y\nSubject To\n c1: x + y <= 4\n c2: x - y >= 0\nBounds\n 0 <= x <= 10\n y free\nBinaries\n x\nEnd\n";
        let summary = check_lp_syntax(text).unwrap();
        assert_eq!(summary.objective_terms, 2);
        assert_eq!(summary.n_constraints, 2);
        assert_eq!(summary.n_bounds, 2);
        assert_eq!(summary.n_binaries, 1);
    }

    #[test]
    fn checker_rejects_missing_end() {
        let text = "Minimize\n obj: x\nSubject To\n c: x <= 1\n";
        assert!(check_lp_syntax(text).is_err());
    }

    #[test]
    fn checker_rejects_garbage_expression() {
        let text = "Minimize\n obj: + <= q\nSubject To\n c: x <= 1\nEnd\n";
        assert!(check_lp_syntax(text).is_err());
    }

    #[test]
    fn checker_handles_wrapped_constraints() {
        let text = "Minimize\n obj: x\nSubject To\n c1: x + y\n   + z <= 3\nEnd\n";
        let summary = check_lp_syntax(text).unwrap();
        assert_eq!(summary.n_constraints, 1);
        assert!(summary.variables.contains("z"));
    }
}
