//! When to ask: fixed and learnable entropy thresholds, or a fixed period.
//!
//! The learnable trigger is `q = sigmoid(H - alpha_hat)`, fit by binary
//! cross-entropy against labels that say whether a dialogue turn happened at
//! that step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{sigmoid, softplus};

/// Fixed-threshold presets in nats.
pub const FIXED_PRESETS: [f64; 3] = [0.9, 1.0, 1.1];

/// Periodic presets in steps.
pub const PERIODIC_PRESETS: [usize; 3] = [4, 5, 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AskPolicy {
    Learnable {
        alpha_hat: f64,
        /// Draw the trigger from Bernoulli(q) instead of thresholding at 0.5.
        #[serde(default)]
        stochastic: bool,
    },
    Fixed {
        alpha: f64,
    },
    Periodic {
        k: usize,
    },
    Never,
}

impl AskPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            AskPolicy::Learnable { alpha_hat: a, .. } | AskPolicy::Fixed { alpha: a } if !a.is_finite() => {
                Err(Error::InvalidConfig(format!("threshold must be finite, got {a}")))
            }
            AskPolicy::Periodic { k: 0 } => Err(Error::InvalidConfig("period must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            AskPolicy::Learnable { alpha_hat, .. } => format!("learnable({alpha_hat:.4})"),
            AskPolicy::Fixed { alpha } => format!("fixed({alpha})"),
            AskPolicy::Periodic { k } => format!("periodic({k})"),
            AskPolicy::Never => "never".into(),
        }
    }
}

/// `q = 1 / (1 + exp(alpha_hat - h))`.
pub fn trigger_probability(alpha_hat: f64, h: f64) -> f64 {
    sigmoid(h - alpha_hat)
}

/// Binary cross-entropy of `q` against `asked`, and its derivative with
/// respect to `alpha_hat`, which is `asked - q`.
pub fn bce_loss_and_gradient(alpha_hat: f64, h: f64, asked: bool) -> (f64, f64) {
    let z = h - alpha_hat;
    let y = if asked { 1.0 } else { 0.0 };
    // -[y ln s(z) + (1-y) ln(1-s(z))] = softplus(z) - y z
    let loss = softplus(z) - y * z;
    (loss, y - sigmoid(z))
}

/// Decision at 1-based step `t` with action entropy `h`. The generator is
/// used only by the stochastic learnable mode.
pub fn should_ask(policy: &AskPolicy, h: f64, t: usize, rng: &mut impl Rng) -> bool {
    match policy {
        AskPolicy::Fixed { alpha } => h > *alpha,
        AskPolicy::Learnable { alpha_hat, stochastic: false } => h > *alpha_hat,
        AskPolicy::Learnable { alpha_hat, stochastic: true } => rng.random::<f64>() < trigger_probability(*alpha_hat, h),
        AskPolicy::Periodic { k } => t > 0 && t.is_multiple_of(*k),
        AskPolicy::Never => false,
    }
}

/// Per-episode asking state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AskState {
    pub policy: AskPolicy,
    pub time_step: usize,
    pub questions_asked: usize,
}

impl AskState {
    pub fn new(policy: AskPolicy) -> Self {
        AskState {
            policy,
            time_step: 0,
            questions_asked: 0,
        }
    }
}

/// Entropy of the navigator's action distribution at one step, with the
/// label saying whether a dialogue turn happened there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    #[serde(rename = "H")]
    pub entropy: f64,
    #[serde(with = "bool_as_int")]
    pub asked: bool,
    pub episode: String,
    pub t: usize,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            n => Err(serde::de::Error::custom(format!("expected 0 or 1, got {n}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight each class by half the inverse of its frequency, so both
    /// labels contribute equally to the mean.
    pub balanced: bool,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            epochs: 500,
            lr: 1.0,
            balanced: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub alpha_hat: f64,
    /// Mean BCE before each update, then after the last one.
    pub losses: Vec<f64>,
    /// Set when the log held a single label value.
    pub degenerate: bool,
}

/// Mean BCE and mean gradient over the log.
pub fn mean_bce(alpha_hat: f64, log: &[(f64, bool)]) -> (f64, f64) {
    weighted_bce(alpha_hat, log, 1.0, 1.0)
}

/// Class-balanced mean BCE: each label carries half the total weight.
pub fn balanced_bce(alpha_hat: f64, log: &[(f64, bool)]) -> (f64, f64) {
    let n = log.len() as f64;
    let pos = log.iter().filter(|(_, y)| *y).count() as f64;
    weighted_bce(alpha_hat, log, n / (2.0 * pos), n / (2.0 * (n - pos)))
}

fn weighted_bce(alpha_hat: f64, log: &[(f64, bool)], w_pos: f64, w_neg: f64) -> (f64, f64) {
    let n = log.len() as f64;
    let (l, g) = log.iter().fold((0.0, 0.0), |(l, g), (h, y)| {
        let (li, gi) = bce_loss_and_gradient(alpha_hat, *h, *y);
        let w = if *y { w_pos } else { w_neg };
        (l + w * li, g + w * gi)
    });
    (l / n, g / n)
}

/// Full-batch gradient descent on mean BCE, starting from the mean entropy.
pub fn train_threshold(log: &[(f64, bool)], config: &ThresholdConfig) -> Result<ThresholdReport> {
    if log.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if log.iter().any(|(h, _)| !h.is_finite()) {
        return Err(Error::InvalidConfig("entropy log contains non-finite values".into()));
    }
    let positives = log.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == log.len() {
        let hs = log.iter().map(|(h, _)| *h);
        let alpha_hat = if positives == 0 {
            hs.fold(f64::NEG_INFINITY, f64::max)
        } else {
            hs.fold(f64::INFINITY, f64::min)
        };
        log::warn!("{}; threshold set to {alpha_hat}", Error::DegenerateLabels);
        return Ok(ThresholdReport {
            alpha_hat,
            losses: vec![mean_bce(alpha_hat, log).0],
            degenerate: true,
        });
    }
    let objective = if config.balanced { balanced_bce } else { mean_bce };
    let mut alpha_hat = log.iter().map(|(h, _)| h).sum::<f64>() / log.len() as f64;
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = objective(alpha_hat, log);
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { epoch });
        }
        losses.push(loss);
        alpha_hat -= config.lr * grad;
    }
    losses.push(objective(alpha_hat, log).0);
    Ok(ThresholdReport {
        alpha_hat,
        losses,
        degenerate: false,
    })
}

/// Fraction of the log whose label agrees with `H > alpha_hat`.
pub fn trigger_accuracy(alpha_hat: f64, log: &[(f64, bool)]) -> f64 {
    let hits = log.iter().filter(|(h, y)| (*h > alpha_hat) == *y).count();
    hits as f64 / log.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;

    #[test]
    fn probability_at_the_threshold() {
        assert_eq!(trigger_probability(1.3, 1.3), 0.5);
        let q = trigger_probability(1.0, 2.0);
        assert!((q - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((q - 0.7311).abs() < 1e-4);
        assert!(trigger_probability(0.0, -800.0) < 1e-300);
        assert_eq!(trigger_probability(0.0, 800.0), 1.0);
        // Increasing in H, decreasing in alpha_hat.
        assert!(trigger_probability(1.0, 1.5) > trigger_probability(1.0, 1.4));
        assert!(trigger_probability(1.1, 1.5) < trigger_probability(1.0, 1.5));
    }

    #[test]
    fn bce_plug_in_values() {
        let (l, g) = bce_loss_and_gradient(0.7, 0.7, true);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, 0.5);
        assert_eq!(bce_loss_and_gradient(0.7, 0.7, false).1, -0.5);
        let (l, _) = bce_loss_and_gradient(0.0, 1000.0, false);
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_differences() {
        use rand::Rng;
        let mut r = rng(3);
        for _ in 0..200 {
            let a = r.random_range(-3.0..3.0);
            let h = r.random_range(0.0..3.0);
            let y = r.random_bool(0.5);
            let eps = 1e-6;
            let fd = (bce_loss_and_gradient(a + eps, h, y).0 - bce_loss_and_gradient(a - eps, h, y).0) / (2.0 * eps);
            let g = bce_loss_and_gradient(a, h, y).1;
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3));
        }
    }

    #[test]
    fn decisions() {
        let mut r = rng(0);
        assert!(should_ask(&AskPolicy::Fixed { alpha: 1.0 }, 4f64.ln(), 3, &mut r));
        let fired: Vec<usize> = (1..=12).filter(|t| should_ask(&AskPolicy::Periodic { k: 5 }, 0.0, *t, &mut r)).collect();
        assert_eq!(fired, vec![5, 10]);
        let learn = AskPolicy::Learnable {
            alpha_hat: 1.0,
            stochastic: false,
        };
        assert!(!should_ask(&learn, 0.2, 1, &mut r));
        assert!(should_ask(&learn, 1.2, 1, &mut r));
        assert!(!should_ask(&AskPolicy::Never, 9.0, 5, &mut r));
        assert!(AskPolicy::Periodic { k: 0 }.validate().is_err());
    }

    #[test]
    fn degenerate_logs_warn() {
        let log = vec![(0.3, false), (1.5, false), (0.9, false)];
        let rep = train_threshold(&log, &ThresholdConfig::default()).unwrap();
        assert!(rep.degenerate);
        assert_eq!(rep.alpha_hat, 1.5);
        assert_eq!(trigger_accuracy(rep.alpha_hat, &log), 1.0);
    }

    #[test]
    fn convex_two_point_log_descends() {
        let log = vec![(0.4, false), (1.6, true)];
        let rep = train_threshold(&log, &ThresholdConfig {
                epochs: 200,
                lr: 0.5,
                balanced: false,
            }).unwrap();
        for w in rep.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn balancing_keeps_the_boundary_between_classes() {
        // One positive in ten, separated at 1.2 nats.
        let log: Vec<(f64, bool)> = (0..200)
            .map(|i| {
                let asked = i % 10 == 0;
                let h = if asked { 1.6 + (i % 7) as f64 * 0.05 } else { 0.4 + (i % 9) as f64 * 0.05 };
                (h, asked)
            })
            .collect();
        let balanced = train_threshold(&log, &ThresholdConfig::default()).unwrap();
        assert!(balanced.alpha_hat > 0.8 && balanced.alpha_hat < 1.6, "{}", balanced.alpha_hat);
        assert!(trigger_accuracy(balanced.alpha_hat, &log) == 1.0);
        let plain = train_threshold(
            &log,
            &ThresholdConfig {
                balanced: false,
                ..ThresholdConfig::default()
            },
        )
        .unwrap();
        assert!(plain.alpha_hat > balanced.alpha_hat);
    }

    #[test]
    fn entropy_record_schema() {
        let rec = EntropyRecord {
            entropy: 1.25,
            asked: true,
            episode: "e#0".into(),
            t: 3,
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert_eq!(s, r#"{"H":1.25,"asked":1,"episode":"e#0","t":3}"#);
        assert_eq!(serde_json::from_str::<EntropyRecord>(&s).unwrap(), rec);
    }
}
