//! One-vs-rest soft-margin kernel classifier trained with a deterministic
//! SMO variant (working pair chosen by maximal error difference, ties by
//! index, no randomness).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{class_index, LearnError, TrainingSample, SELECTED_FEATURE_COUNT};
use crate::sched::AggregateAction;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SvcConfig {
    /// Soft-margin penalty.
    pub c: f64,
    /// KKT tolerance; training stops when no multiplier violates it.
    pub tol: f64,
    /// Hard ceiling on full sweeps before giving up.
    pub max_passes: usize,
}

impl Default for SvcConfig {
    fn default() -> Self {
        SvcConfig {
            c: 1.0,
            tol: 1e-3,
            max_passes: 200,
        }
    }
}

/// One binary machine of the one-vs-rest ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinarySvm {
    pub support_vectors: Vec<Vec<f64>>,
    /// alpha_i * y_i per support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64], gamma: f64) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, &coef)| coef * rbf(sv, x, gamma))
            .sum::<f64>()
            + self.bias
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub sample_count: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub converged: bool,
}

/// Trained classifier: scaler, kernel width, and three binary machines in
/// class order C, I, D.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvcModel {
    pub version: u32,
    pub selected_feature_indices: Vec<usize>,
    pub scaler_mean: Vec<f64>,
    pub scaler_std: Vec<f64>,
    pub gamma: f64,
    pub machines: Vec<BinarySvm>,
    pub meta: TrainingMeta,
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * sq).exp()
}

impl SvcModel {
    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        self.selected_feature_indices
            .iter()
            .enumerate()
            .map(|(pos, &f)| (raw[f] - self.scaler_mean[pos]) / self.scaler_std[pos])
            .collect()
    }

    pub fn decision_values(&self, raw_features: &[f64]) -> [f64; 3] {
        let x = self.standardize(raw_features);
        let mut out = [0.0; 3];
        for (slot, machine) in out.iter_mut().zip(&self.machines) {
            *slot = machine.decision(&x, self.gamma);
        }
        out
    }

    /// Argmax over decision values; ties resolve in class order C, I, D.
    pub fn predict_features(&self, raw_features: &[f64]) -> AggregateAction {
        let values = self.decision_values(raw_features);
        let mut best = 0;
        for c in 1..3 {
            if values[c] > values[best] {
                best = c;
            }
        }
        AggregateAction::ALL[best]
    }

    pub fn converged(&self) -> bool {
        self.machines.iter().all(|m| m.converged)
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let text = std::fs::read_to_string(path)?;
        let model: SvcModel = serde_json::from_str(&text)?;
        if model.version != MODEL_VERSION {
            return Err(LearnError::ModelVersion {
                found: model.version,
                expected: MODEL_VERSION,
            });
        }
        Ok(model)
    }
}

/// Trains the one-vs-rest ensemble on the selected features.
///
/// Features are z-scored with population statistics; the kernel width is
/// 1 / (k * mean feature variance) of the standardized data, which reduces
/// to 1/k up to rounding. A machine that still violates KKT conditions
/// after `max_passes` sweeps is kept but flagged unconverged.
pub fn train_svc(
    samples: &[TrainingSample],
    selected: &[usize],
    config: SvcConfig,
    seed: u64,
) -> Result<SvcModel, LearnError> {
    assert_eq!(selected.len(), SELECTED_FEATURE_COUNT);
    let n = samples.len();
    if n < 2 {
        return Err(LearnError::DegenerateData("need at least 2 samples".into()));
    }
    let mut present = [false; 3];
    for s in samples {
        present[class_index(s.label)] = true;
    }
    if present.iter().any(|p| !p) {
        return Err(LearnError::DegenerateData(
            "all three classes must be represented".into(),
        ));
    }

    // Scaler over the selected columns.
    let mut mean = vec![0.0; selected.len()];
    for s in samples {
        for (pos, &f) in selected.iter().enumerate() {
            mean[pos] += s.features[f];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; selected.len()];
    for s in samples {
        for (pos, &f) in selected.iter().enumerate() {
            let dev = s.features[f] - mean[pos];
            var[pos] += dev * dev;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    if std.iter().any(|&s| s <= 1e-12) {
        return Err(LearnError::DegenerateData(
            "selected feature has zero variance".into(),
        ));
    }

    let x: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            selected
                .iter()
                .enumerate()
                .map(|(pos, &f)| (s.features[f] - mean[pos]) / std[pos])
                .collect()
        })
        .collect();

    // Mean per-feature variance of the standardized data is 1 by
    // construction; computing it keeps the width honest if that changes.
    let mean_var: f64 = (0..selected.len())
        .map(|pos| {
            let m: f64 = x.iter().map(|r| r[pos]).sum::<f64>() / n as f64;
            x.iter().map(|r| (r[pos] - m) * (r[pos] - m)).sum::<f64>() / n as f64
        })
        .sum::<f64>()
        / selected.len() as f64;
    let gamma = 1.0 / (selected.len() as f64 * mean_var);

    // Shared Gram matrix.
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| rbf(&x[i], &x[j], gamma)).collect())
        .collect();

    let mut machines = Vec::with_capacity(3);
    for class in AggregateAction::ALL {
        let y: Vec<f64> = samples
            .iter()
            .map(|s| if s.label == class { 1.0 } else { -1.0 })
            .collect();
        let (alphas, bias, converged) = smo(&gram, &y, config);
        let mut support_vectors = Vec::new();
        let mut dual_coefs = Vec::new();
        for i in 0..n {
            if alphas[i] > 1e-12 {
                support_vectors.push(x[i].clone());
                dual_coefs.push(alphas[i] * y[i]);
            }
        }
        machines.push(BinarySvm {
            support_vectors,
            dual_coefs,
            bias,
            converged,
        });
    }

    let mut model = SvcModel {
        version: MODEL_VERSION,
        selected_feature_indices: selected.to_vec(),
        scaler_mean: mean,
        scaler_std: std,
        gamma,
        machines,
        meta: TrainingMeta {
            seed,
            sample_count: n,
            train_accuracy: 0.0,
            holdout_accuracy: None,
            converged: false,
        },
    };
    let correct = samples
        .iter()
        .filter(|s| model.predict_features(&s.features) == s.label)
        .count();
    model.meta.train_accuracy = correct as f64 / n as f64;
    model.meta.converged = model.converged();
    Ok(model)
}

/// Dual optimizer: repeatedly takes the maximal-violating pair and
/// solves the two-variable subproblem analytically, working on bias-free
/// gradients so the loop cannot zigzag on a bias offset. Converges when
/// the violating-pair gap closes to 2*tol; the bias is then the midpoint
/// of the feasible interval. Fully deterministic: ties in pair selection
/// go to the lowest index.
fn smo(gram: &[Vec<f64>], y: &[f64], config: SvcConfig) -> (Vec<f64>, f64, bool) {
    let n = y.len();
    let c = config.c;
    let tol = config.tol;
    let mut alphas = vec![0.0; n];
    // F_i = sum_j alpha_j y_j K_ij - y_i (no bias term).
    let mut f: Vec<f64> = y.iter().map(|&yi| -yi).collect();
    let max_iters = config.max_passes.saturating_mul(n).max(1_000);
    let mut converged = false;

    for _ in 0..max_iters {
        let (lo_idx, b_lo, up_idx, b_up) = bias_bounds(&alphas, &f, y, c);
        if b_lo - b_up <= 2.0 * tol {
            converged = true;
            break;
        }
        let (i, j) = (lo_idx, up_idx);
        if take_step(&mut alphas, &mut f, gram, y, c, i, j) {
            continue;
        }
        // The extreme pair can refuse to move when clamped; fall back to
        // any partner that makes progress before declaring a dead end.
        let mut moved = false;
        for cand in 0..n {
            if cand != i && in_upper_set(alphas[cand], y[cand], c)
                && take_step(&mut alphas, &mut f, gram, y, c, i, cand)
            {
                moved = true;
                break;
            }
        }
        if !moved {
            for cand in 0..n {
                if cand != j && in_lower_set(alphas[cand], y[cand], c)
                    && take_step(&mut alphas, &mut f, gram, y, c, cand, j)
                {
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            break;
        }
    }

    let (_, b_lo, _, b_up) = bias_bounds(&alphas, &f, y, c);
    let bias = if b_lo.is_finite() && b_up.is_finite() {
        0.5 * (b_lo + b_up)
    } else if b_lo.is_finite() {
        b_lo
    } else if b_up.is_finite() {
        b_up
    } else {
        0.0
    };
    (alphas, bias, converged)
}

const ALPHA_EPS: f64 = 1e-12;

/// Multipliers that may still increase their contribution from below.
fn in_lower_set(alpha: f64, y: f64, c: f64) -> bool {
    let at_zero = alpha <= ALPHA_EPS;
    let at_c = alpha >= c - ALPHA_EPS;
    (at_zero && y > 0.0) || (at_c && y < 0.0) || (!at_zero && !at_c)
}

fn in_upper_set(alpha: f64, y: f64, c: f64) -> bool {
    let at_zero = alpha <= ALPHA_EPS;
    let at_c = alpha >= c - ALPHA_EPS;
    (at_zero && y < 0.0) || (at_c && y > 0.0) || (!at_zero && !at_c)
}

/// Feasible-bias bounds implied by the KKT conditions: every index in the
/// lower set demands b >= -F_i, every index in the upper set b <= -F_i.
/// Returns (argmax index, max lower bound, argmin index, min upper bound).
fn bias_bounds(alphas: &[f64], f: &[f64], y: &[f64], c: f64) -> (usize, f64, usize, f64) {
    let mut lo_idx = 0;
    let mut b_lo = f64::NEG_INFINITY;
    let mut up_idx = 0;
    let mut b_up = f64::INFINITY;
    for i in 0..y.len() {
        if in_lower_set(alphas[i], y[i], c) && -f[i] > b_lo {
            b_lo = -f[i];
            lo_idx = i;
        }
        if in_upper_set(alphas[i], y[i], c) && -f[i] < b_up {
            b_up = -f[i];
            up_idx = i;
        }
    }
    (lo_idx, b_lo, up_idx, b_up)
}

/// Analytic two-variable update; returns whether the multipliers moved.
fn take_step(
    alphas: &mut [f64],
    f: &mut [f64],
    gram: &[Vec<f64>],
    y: &[f64],
    c: f64,
    i: usize,
    j: usize,
) -> bool {
    if i == j {
        return false;
    }
    let (lo, hi) = if y[i] != y[j] {
        (
            (alphas[j] - alphas[i]).max(0.0),
            (c + alphas[j] - alphas[i]).min(c),
        )
    } else {
        (
            (alphas[i] + alphas[j] - c).max(0.0),
            (alphas[i] + alphas[j]).min(c),
        )
    };
    if lo >= hi {
        return false;
    }
    let eta = 2.0 * gram[i][j] - gram[i][i] - gram[j][j];
    if eta >= -1e-15 {
        return false;
    }
    // E_i - E_j equals F_i - F_j; any bias cancels.
    let alpha_j = (alphas[j] - y[j] * (f[i] - f[j]) / eta).clamp(lo, hi);
    let delta_j = alpha_j - alphas[j];
    if delta_j.abs() < 1e-10 {
        return false;
    }
    let delta_i = -y[i] * y[j] * delta_j;
    alphas[i] += delta_i;
    alphas[j] = alpha_j;
    for k in 0..y.len() {
        f[k] += y[i] * delta_i * gram[i][k] + y[j] * delta_j * gram[j][k];
    }
    true
}


/// Worst KKT violation of a machine's multipliers on its training set.
/// Exposed for verification.
pub fn kkt_residual(gram: &[Vec<f64>], y: &[f64], alphas: &[f64], bias: f64, c: f64) -> f64 {
    let n = y.len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let f_i: f64 = (0..n).map(|j| alphas[j] * y[j] * gram[i][j]).sum::<f64>() + bias;
        let margin = y[i] * f_i;
        let violation = if alphas[i] <= 1e-12 {
            (1.0 - margin).max(0.0)
        } else if alphas[i] >= c - 1e-12 {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(violation);
    }
    worst
}

/// Raw SMO access for verification of dual feasibility.
pub fn smo_for_tests(gram: &[Vec<f64>], y: &[f64], config: SvcConfig) -> (Vec<f64>, f64, bool) {
    smo(gram, y, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Three well-separated Gaussian blobs in the first five features.
    fn blob_samples(per_class: usize, seed: u64) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [
            ([4.0, 0.0, 0.0, 2.0, -2.0], AggregateAction::Charge),
            ([-4.0, 4.0, 0.0, -2.0, 2.0], AggregateAction::Idle),
            ([0.0, -4.0, 4.0, 0.0, 0.0], AggregateAction::Discharge),
        ];
        let mut out = Vec::new();
        for (center, label) in centers {
            for i in 0..per_class {
                let mut features = [0.0; 10];
                for (f, slot) in features.iter_mut().enumerate() {
                    let base = if f < 5 { center[f] } else { 0.0 };
                    *slot = base + rng.random_range(-0.5..0.5);
                }
                out.push(TrainingSample {
                    scenario_id: i as u64,
                    slot: 0,
                    features,
                    label,
                });
            }
        }
        out
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let samples = blob_samples(100, 11);
        let model = train_svc(&samples, &[0, 1, 2, 3, 4], SvcConfig::default(), 11).unwrap();
        assert!(model.meta.train_accuracy >= 0.99, "accuracy {}", model.meta.train_accuracy);
        assert!(model.converged());
    }

    #[test]
    fn duplicated_samples_leave_predictions_unchanged() {
        let samples = blob_samples(50, 3);
        let mut doubled = samples.clone();
        doubled.extend(samples.iter().cloned());
        let a = train_svc(&samples, &[0, 1, 2, 3, 4], SvcConfig::default(), 3).unwrap();
        let b = train_svc(&doubled, &[0, 1, 2, 3, 4], SvcConfig::default(), 3).unwrap();
        for s in &samples {
            assert_eq!(
                a.predict_features(&s.features),
                b.predict_features(&s.features)
            );
        }
    }

    #[test]
    fn support_vector_predicts_its_own_label() {
        let samples = blob_samples(60, 7);
        let model = train_svc(&samples, &[0, 1, 2, 3, 4], SvcConfig::default(), 7).unwrap();
        for s in &samples {
            assert_eq!(model.predict_features(&s.features), s.label);
        }
    }

    #[test]
    fn dual_feasibility_and_kkt_hold_at_convergence() {
        let samples = blob_samples(40, 19);
        let config = SvcConfig::default();
        // Rebuild the standardized Gram the same way train_svc does.
        let model = train_svc(&samples, &[0, 1, 2, 3, 4], config, 19).unwrap();
        let x: Vec<Vec<f64>> = samples.iter().map(|s| model.standardize(&s.features)).collect();
        let n = x.len();
        let gram: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| rbf(&x[i], &x[j], model.gamma)).collect())
            .collect();
        for class in AggregateAction::ALL {
            let y: Vec<f64> = samples
                .iter()
                .map(|s| if s.label == class { 1.0 } else { -1.0 })
                .collect();
            let (alphas, bias, converged) = smo_for_tests(&gram, &y, config);
            assert!(converged);
            assert!(alphas.iter().all(|&a| (-1e-12..=config.c + 1e-12).contains(&a)));
            let balance: f64 = alphas.iter().zip(&y).map(|(a, yi)| a * yi).sum();
            assert!(balance.abs() <= config.tol, "sum alpha*y = {balance}");
            let residual = kkt_residual(&gram, &y, &alphas, bias, config.c);
            assert!(residual <= config.tol, "kkt residual {residual}");
        }
    }

    #[test]
    fn kernel_is_a_valid_rbf() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let gamma = 0.2;
        for p in &points {
            assert!((rbf(p, p, gamma) - 1.0).abs() < 1e-15);
        }
        let n = points.len();
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                gram[i][j] = rbf(&points[i], &points[j], gamma);
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert_eq!(gram[i][j], gram[j][i]);
            }
        }
        // PSD within -1e-8: the ridged matrix must admit a Cholesky factor.
        assert!(
            cholesky_ok(&gram, 1e-8),
            "Gram matrix is not PSD within tolerance"
        );
    }

    fn cholesky_ok(a: &[Vec<f64>], ridge: f64) -> bool {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i][j] + if i == j { ridge } else { 0.0 };
                for k in 0..j {
                    sum -= l[i][k] * l[j][k];
                }
                if i == j {
                    if sum <= 0.0 {
                        return false;
                    }
                    l[i][j] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        true
    }

    #[test]
    fn scaler_round_trip() {
        let samples = blob_samples(30, 23);
        let model = train_svc(&samples, &[0, 1, 2, 3, 4], SvcConfig::default(), 23).unwrap();
        for s in &samples {
            let z = model.standardize(&s.features);
            for (pos, &f) in model.selected_feature_indices.iter().enumerate() {
                let back = z[pos] * model.scaler_std[pos] + model.scaler_mean[pos];
                assert!((back - s.features[f]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_json_round_trip_preserves_predictions() {
        let samples = blob_samples(80, 31);
        let model = train_svc(&samples, &[0, 1, 2, 3, 4], SvcConfig::default(), 31).unwrap();
        let dir = std::env::temp_dir().join(format!("fleetdp-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        model.save(&path).unwrap();
        let restored = SvcModel::load(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut probe = [0.0; 10];
            for p in probe.iter_mut() {
                *p = rng.random_range(-5.0..5.0);
            }
            assert_eq!(
                model.decision_values(&probe),
                restored.decision_values(&probe)
            );
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let samples = blob_samples(30, 37);
        let mut model = train_svc(&samples, &[0, 1, 2, 3, 4], SvcConfig::default(), 37).unwrap();
        model.version = 99;
        let dir = std::env::temp_dir().join(format!("fleetdp-ver-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let text = serde_json::to_string(&model).unwrap();
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            SvcModel::load(&path),
            Err(LearnError::ModelVersion { found: 99, .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
