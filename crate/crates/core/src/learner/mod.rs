//! Learning a fleet-level dispatch policy from solver output.
//!
//! States are summarized into ten fixed-size features so one model serves
//! any fleet size. A decision tree ranks the features, the top five feed a
//! one-vs-rest soft-margin RBF classifier over the three aggregate
//! actions, trained with a deterministic SMO variant.

pub mod svm;
pub mod tree;

use std::path::Path;

use thiserror::Error;

use crate::fleet::{FleetState, EPS_KWH};
use crate::market::Scenario;
use crate::sched::AggregateAction;

pub use svm::{train_svc, BinarySvm, SvcConfig, SvcModel, TrainingMeta, MODEL_VERSION};
pub use tree::{fit_tree, DecisionTree, TreeParams};

pub const FEATURE_COUNT: usize = 10;
pub const SELECTED_FEATURE_COUNT: usize = 5;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("model version mismatch: file has {found}, this build expects {expected}")]
    ModelVersion { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One (state, label) pair with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub scenario_id: u64,
    pub slot: usize,
    pub features: [f64; FEATURE_COUNT],
    pub label: AggregateAction,
}

/// Summarizes a fleet state into the ten candidate features, in order:
/// normalized time, mean/min/max state-of-charge fraction, fraction of EVs
/// at target, per-EV volume, buy price, excess price, and the mean price
/// and per-EV volume over the next three slots (falling back to the
/// current values at the end of the horizon).
pub fn extract_features(
    state: &FleetState,
    scenario: &Scenario,
    k: usize,
) -> [f64; FEATURE_COUNT] {
    let n = scenario.n_slots;
    let d = scenario.fleet_size();
    assert!(k < n, "slot {k} out of range (N = {n})");
    assert!(d >= 1, "features need a non-empty fleet");

    let mut mean_frac = 0.0;
    let mut min_frac = f64::INFINITY;
    let mut max_frac = f64::NEG_INFINITY;
    let mut at_target = 0usize;
    for (ev, spec) in state.ev_states.iter().zip(&scenario.fleet) {
        let frac = ev.soc_kwh / spec.capacity_kwh;
        mean_frac += frac;
        min_frac = min_frac.min(frac);
        max_frac = max_frac.max(frac);
        if ev.soc_kwh >= spec.target_soc_kwh - EPS_KWH {
            at_target += 1;
        }
    }
    mean_frac /= d as f64;

    let window = (k + 1)..(k + 4).min(n);
    let (mean_rho, mean_vol) = if window.is_empty() {
        (scenario.rho[k], scenario.volumes[k] / d as f64)
    } else {
        let len = window.len() as f64;
        let rho: f64 = scenario.rho[window.clone()].iter().sum();
        let vol: f64 = scenario.volumes[window].iter().sum();
        (rho / len, vol / (len * d as f64))
    };

    [
        k as f64 / n as f64,
        mean_frac,
        min_frac,
        max_frac,
        at_target as f64 / d as f64,
        scenario.volumes[k] / d as f64,
        scenario.rho[k],
        scenario.sigma[k],
        mean_rho,
        mean_vol,
    ]
}

/// Ranks features with a single Gini decision tree fitted on standardized
/// data and returns the five most important indices. Constant features are
/// excluded; ties break toward the lower index.
pub fn select_features(samples: &[TrainingSample]) -> Result<Vec<usize>, LearnError> {
    if samples.len() < 50 {
        return Err(LearnError::DegenerateData(format!(
            "need at least 50 samples, got {}",
            samples.len()
        )));
    }
    let mut classes: Vec<AggregateAction> = samples.iter().map(|s| s.label).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(LearnError::DegenerateData(
            "need at least two classes".into(),
        ));
    }

    let n = samples.len();
    let (mean, std) = feature_moments(samples);
    let candidates: Vec<usize> = (0..FEATURE_COUNT).filter(|&f| std[f] > 1e-12).collect();
    if candidates.len() < SELECTED_FEATURE_COUNT {
        return Err(LearnError::DegenerateData(format!(
            "only {} non-constant features",
            candidates.len()
        )));
    }

    let x: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            (0..FEATURE_COUNT)
                .map(|f| {
                    if std[f] > 1e-12 {
                        (s.features[f] - mean[f]) / std[f]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let y: Vec<usize> = samples
        .iter()
        .map(|s| class_index(s.label))
        .collect();

    let tree = fit_tree(&x, &y, 3, &candidates, TreeParams::default());
    let mut ranked: Vec<usize> = candidates.clone();
    ranked.sort_by(|&a, &b| {
        tree.importances[b]
            .partial_cmp(&tree.importances[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    ranked.truncate(SELECTED_FEATURE_COUNT);
    debug_assert_eq!(ranked.len(), SELECTED_FEATURE_COUNT);
    let _ = n;
    Ok(ranked)
}

pub(crate) fn class_index(label: AggregateAction) -> usize {
    match label {
        AggregateAction::Charge => 0,
        AggregateAction::Idle => 1,
        AggregateAction::Discharge => 2,
    }
}

pub(crate) fn feature_moments(samples: &[TrainingSample]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; FEATURE_COUNT];
    for s in samples {
        for f in 0..FEATURE_COUNT {
            mean[f] += s.features[f];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; FEATURE_COUNT];
    for s in samples {
        for f in 0..FEATURE_COUNT {
            let dev = s.features[f] - mean[f];
            var[f] += dev * dev;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

/// Deterministic prediction for a fleet state.
pub fn predict(model: &SvcModel, state: &FleetState, scenario: &Scenario, k: usize) -> AggregateAction {
    model.predict_features(&extract_features(state, scenario, k))
}

const TRAINING_CSV_HEADER: &str = "scenario_id,slot,f1,f2,f3,f4,f5,f6,f7,f8,f9,f10,label";

pub fn training_samples_to_csv(samples: &[TrainingSample]) -> String {
    let mut out = String::from(TRAINING_CSV_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!("{},{}", s.scenario_id, s.slot));
        for f in s.features {
            out.push_str(&format!(",{f}"));
        }
        out.push_str(&format!(",{}\n", s.label));
    }
    out
}

pub fn read_training_csv(path: &Path) -> Result<Vec<TrainingSample>, LearnError> {
    parse_training_csv(&std::fs::read_to_string(path)?)
}

pub fn parse_training_csv(text: &str) -> Result<Vec<TrainingSample>, LearnError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRAINING_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(LearnError::Parse {
                line: 1,
                reason: format!("expected header `{TRAINING_CSV_HEADER}`, got `{}`", h.trim()),
            })
        }
        None => {
            return Err(LearnError::Parse {
                line: 1,
                reason: "empty file".into(),
            })
        }
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != FEATURE_COUNT + 3 {
            return Err(LearnError::Parse {
                line: lineno,
                reason: format!("expected {} fields, got {}", FEATURE_COUNT + 3, fields.len()),
            });
        }
        let mut features = [0.0; FEATURE_COUNT];
        for (f, value) in features.iter_mut().enumerate() {
            let parsed: f64 = fields[f + 2].parse().map_err(|e| LearnError::Parse {
                line: lineno,
                reason: format!("f{}: {e}", f + 1),
            })?;
            if !parsed.is_finite() {
                return Err(LearnError::Parse {
                    line: lineno,
                    reason: format!("f{} is not finite", f + 1),
                });
            }
            *value = parsed;
        }
        samples.push(TrainingSample {
            scenario_id: fields[0].parse().map_err(|e| LearnError::Parse {
                line: lineno,
                reason: format!("scenario_id: {e}"),
            })?,
            slot: fields[1].parse().map_err(|e| LearnError::Parse {
                line: lineno,
                reason: format!("slot: {e}"),
            })?,
            features,
            label: fields[FEATURE_COUNT + 2]
                .parse()
                .map_err(|e| LearnError::Parse {
                    line: lineno,
                    reason: e,
                })?,
        });
    }
    Ok(samples)
}
