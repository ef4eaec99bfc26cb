//! Warmup learning-rate schedule:
//! `lr(step) = d_model^(-1/2) * min(step^(-1/2), step * warmup^(-3/2))`,
//! linear ramp to the peak at `step = warmup_steps`, inverse-root decay after.

use super::TrainError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub d_model: usize,
    pub warmup_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            d_model: 120,
            warmup_steps: 4000,
        }
    }
}

/// Learning rate at `step >= 1`.
pub fn lr_schedule(cfg: &ScheduleConfig, step: u64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::ZeroStep);
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    let lr = (cfg.d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5));
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig {
            d_model: 120,
            warmup_steps: 4000,
        }
    }

    #[test]
    fn closed_form_anchors() {
        // Independently computed closed forms.
        let c = cfg();
        let base = 1.0 / (120.0f64).sqrt();
        let want_1 = base * 1.0 / (4000.0f64 * 4000.0f64.sqrt());
        let got_1 = lr_schedule(&c, 1).unwrap();
        assert!((got_1 - want_1).abs() < 1e-9);
        assert!((got_1 - 3.6084391824351615e-7).abs() < 1e-12);

        let want_4000 = base / 4000.0f64.sqrt();
        let got_4000 = lr_schedule(&c, 4000).unwrap();
        assert!((got_4000 - want_4000).abs() < 1e-9);
        assert!((got_4000 - 1.4433756729740645e-3).abs() < 1e-9);

        let want_16000 = base / 16000.0f64.sqrt();
        let got_16000 = lr_schedule(&c, 16000).unwrap();
        assert!((got_16000 - want_16000).abs() < 1e-9);
    }

    #[test]
    fn both_branches_meet_at_warmup() {
        let c = cfg();
        let s = c.warmup_steps as f64;
        let ramp = s * (s).powf(-1.5);
        let decay = s.powf(-0.5);
        assert!((ramp - decay).abs() < 1e-15);
    }

    #[test]
    fn monotone_up_then_down() {
        let c = cfg();
        let grid: Vec<u64> = (1..40).map(|i| i * 100).collect();
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (la, lb) = (lr_schedule(&c, a).unwrap(), lr_schedule(&c, b).unwrap());
            if b <= c.warmup_steps as u64 {
                assert!(la < lb, "ramp must increase: {a}->{b}");
            }
            if a >= c.warmup_steps as u64 {
                assert!(la > lb, "decay must decrease: {a}->{b}");
            }
            assert!(la > 0.0 && lb > 0.0);
        }
    }

    #[test]
    fn zero_step_rejected() {
        assert!(matches!(lr_schedule(&cfg(), 0), Err(TrainError::ZeroStep)));
    }
}
