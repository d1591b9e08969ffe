use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-cycle learning-rate policy with cosine ramps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub init_lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    /// Fraction of all steps spent ramping up.
    pub warmup_fraction: f64,
}

fn cosine(from: f64, to: f64, t: f64) -> f64 {
    let w = (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
    from * w + to * (1.0 - w)
}

impl OneCycle {
    pub fn warmup_end(&self, total_steps: usize) -> usize {
        ((self.warmup_fraction * total_steps as f64).round() as usize).min(total_steps)
    }

    /// Learning rate at `step ∈ [0, total_steps]`. Rises from `init_lr` to
    /// exactly `max_lr` at the end of warmup, then decays to `final_lr`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        if total_steps == 0 {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        if step > total_steps {
            return Err(Error::InvalidInput(format!("step {step} beyond total {total_steps}")));
        }
        let peak = self.warmup_end(total_steps);
        Ok(match step.cmp(&peak) {
            Ordering::Equal => self.max_lr,
            Ordering::Less => cosine(self.init_lr, self.max_lr, step as f64 / peak as f64),
            Ordering::Greater => cosine(
                self.max_lr,
                self.final_lr,
                (step - peak) as f64 / (total_steps - peak) as f64,
            ),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Float slack so that an improvement of exactly `min_delta` in decimal
/// terms is not lost to rounding.
const DELTA_SLACK: f64 = 1e-12;

/// Number of epochs since the last counted improvement. An epoch counts when
/// it beats the last counted value by at least `min_delta`.
pub fn epochs_since_improvement(val_f1: &[f64], min_delta: f64) -> usize {
    let mut best: Option<f64> = None;
    let mut since = 0;
    for &v in val_f1 {
        match best {
            Some(b) if v < b + min_delta - DELTA_SLACK => since += 1,
            _ => {
                best = Some(v);
                since = 0;
            }
        }
    }
    since
}

pub fn early_stop_check(val_f1: &[f64], patience: usize, min_delta: f64) -> StopDecision {
    if !val_f1.is_empty() && epochs_since_improvement(val_f1, min_delta) >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Train/validation F1 of one epoch; epochs are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub epoch: usize,
    pub train_f1: f64,
    pub val_f1: f64,
}

impl Candidate {
    pub fn gap(&self) -> f64 {
        (self.train_f1 - self.val_f1).abs()
    }
}

/// Total preference order: `Greater` means `a` is the better checkpoint.
///
/// Epochs above `threshold` beat all others and are ranked by smallest
/// train/validation gap, then higher validation F1, then earlier epoch.
/// Epochs at or below it are ranked by validation F1, then earlier epoch.
pub fn compare_candidates(a: &Candidate, b: &Candidate, threshold: f64) -> Ordering {
    let (ea, eb) = (a.val_f1 > threshold, b.val_f1 > threshold);
    let earlier = b.epoch.cmp(&a.epoch);
    match (ea, eb) {
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (true, true) => b
            .gap()
            .total_cmp(&a.gap())
            .then(a.val_f1.total_cmp(&b.val_f1))
            .then(earlier),
        (false, false) => a.val_f1.total_cmp(&b.val_f1).then(earlier),
    }
}

pub fn select_checkpoint(candidates: &[Candidate], threshold: f64) -> Option<Candidate> {
    candidates
        .iter()
        .copied()
        .max_by(|a, b| compare_candidates(a, b, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> OneCycle {
        OneCycle {
            init_lr: 1e-4,
            max_lr: 1e-3,
            final_lr: 1e-8,
            warmup_fraction: 0.3,
        }
    }

    #[test]
    fn peak_at_end_of_warmup() {
        let s = sched();
        assert_eq!(s.lr_at(300, 1000).unwrap(), 1e-3);
        assert_eq!(s.lr_at(0, 1000).unwrap(), 1e-4);
        assert!(s.lr_at(0, 0).is_err());
        assert!(s.lr_at(11, 10).is_err());
    }

    #[test]
    fn dense_trace_has_one_peak() {
        let s = sched();
        let total = 1000;
        let trace: Vec<f64> = (0..=total).map(|k| s.lr_at(k, total).unwrap()).collect();
        let peak = trace.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, 1e-3);
        assert_eq!(trace.iter().filter(|&&v| v == peak).count(), 1);
        let argmax = trace.iter().position(|&v| v == peak).unwrap();
        assert!(trace[..=argmax].windows(2).all(|w| w[1] >= w[0]));
        assert!(trace[argmax..].windows(2).all(|w| w[1] <= w[0]));
        // continuity: no jump larger than the steepest cosine slope allows
        let max_jump = trace.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_jump < 1e-3 * std::f64::consts::PI / (2.0 * 300.0) * 1.01);
        assert!(trace[total] <= trace[0]);
    }

    #[test]
    fn rising_f1_never_stops() {
        let h: Vec<f64> = (0..60).map(|i| 0.3 + 0.01 * i as f64).collect();
        for k in 1..=h.len() {
            assert_eq!(early_stop_check(&h[..k], 10, 0.002), StopDecision::Continue);
        }
    }

    #[test]
    fn plateau_stops_at_tenth_epoch() {
        let mut h = vec![0.80, 0.85, 0.90];
        for k in 1..=10 {
            h.push(0.90);
            let expected = if k == 10 {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            };
            assert_eq!(early_stop_check(&h, 10, 0.002), expected, "after {k} flat epochs");
        }
    }

    #[test]
    fn exact_min_delta_counts() {
        let h = [0.900, 0.902];
        assert_eq!(epochs_since_improvement(&h, 0.002), 0);
        let h = [0.900, 0.9019];
        assert_eq!(epochs_since_improvement(&h, 0.002), 1);
    }

    #[test]
    fn small_gains_do_not_reset_the_reference() {
        // with 0.001 steps only every second epoch clears the reference
        let h = [0.900, 0.901, 0.902, 0.903];
        assert_eq!(epochs_since_improvement(&h, 0.002), 1);
    }

    #[test]
    fn gap_beats_raw_f1_above_threshold() {
        let a = Candidate {
            epoch: 1,
            train_f1: 0.95,
            val_f1: 0.90,
        };
        let b = Candidate {
            epoch: 2,
            train_f1: 0.89,
            val_f1: 0.88,
        };
        assert_eq!(select_checkpoint(&[a, b], 0.85).unwrap().epoch, 2);
    }

    #[test]
    fn below_threshold_uses_best_f1() {
        let a = Candidate {
            epoch: 1,
            train_f1: 0.5,
            val_f1: 0.6,
        };
        let b = Candidate {
            epoch: 2,
            train_f1: 0.9,
            val_f1: 0.7,
        };
        assert_eq!(select_checkpoint(&[a, b], 0.85).unwrap().epoch, 2);
        assert_eq!(select_checkpoint(&[a], 0.85).unwrap(), a);
        assert!(select_checkpoint(&[], 0.85).is_none());
    }

    #[test]
    fn ties_prefer_higher_f1_then_earlier_epoch() {
        // equal gaps of 0.125, exactly representable
        let a = Candidate {
            epoch: 3,
            train_f1: 0.75,
            val_f1: 0.875,
        };
        let b = Candidate {
            epoch: 5,
            train_f1: 0.875,
            val_f1: 1.0,
        };
        let c = Candidate {
            epoch: 7,
            train_f1: 0.875,
            val_f1: 1.0,
        };
        assert_eq!(select_checkpoint(&[a, b, c], 0.85).unwrap().epoch, 5);
    }

    proptest! {
        #[test]
        fn selection_is_order_independent(v in prop::collection::vec((0.5f64..1.0, 0.5f64..1.0), 1..30), rot in 0usize..30) {
            let cands: Vec<Candidate> = v.iter().enumerate()
                .map(|(i, &(t, val))| Candidate { epoch: i + 1, train_f1: t, val_f1: val }).collect();
            let mut shuffled = cands.clone();
            shuffled.rotate_left(rot % cands.len());
            prop_assert_eq!(select_checkpoint(&cands, 0.85), select_checkpoint(&shuffled, 0.85));
        }

        #[test]
        fn running_best_equals_batch_selection(v in prop::collection::vec((0.5f64..1.0, 0.5f64..1.0), 1..30)) {
            let cands: Vec<Candidate> = v.iter().enumerate()
                .map(|(i, &(t, val))| Candidate { epoch: i + 1, train_f1: t, val_f1: val }).collect();
            let mut best = cands[0];
            for c in &cands[1..] {
                if compare_candidates(c, &best, 0.85) == Ordering::Greater {
                    best = *c;
                }
            }
            prop_assert_eq!(Some(best), select_checkpoint(&cands, 0.85));
        }
    }
}
