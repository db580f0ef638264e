//! Learning-rate and batch-size schedules and per-modality loss rescaling.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::sequence::Modality;

/// Linear warmup to `peak`, then constant.
pub fn wsd_lr(step: usize, warmup_steps: usize, peak: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        peak
    } else {
        peak * step as f64 / warmup_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    Linear,
    Cosine,
}

/// Optional anneal from `peak` to `final_lr` over `steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decay {
    pub shape: DecayShape,
    pub start: usize,
    pub steps: usize,
    pub final_lr: f64,
}

/// Warmup-stable schedule with an optional decay plug-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub peak: f64,
    #[serde(default)]
    pub decay: Option<Decay>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { warmup_steps: 20, peak: 3e-3, decay: None }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let base = wsd_lr(step, self.warmup_steps, self.peak);
        let Some(d) = self.decay else { return base };
        if step < d.start {
            return base;
        }
        let frac = if d.steps == 0 { 1.0 } else { ((step - d.start) as f64 / d.steps as f64).min(1.0) };
        let mix = match d.shape {
            DecayShape::Linear => frac,
            DecayShape::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * frac).cos()),
        };
        base + (d.final_lr - base) * mix
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok_decay = self.decay.map_or(true, |d| d.final_lr >= 0.0 && d.final_lr.is_finite());
        if self.peak > 0.0 && self.peak.is_finite() && ok_decay {
            Ok(())
        } else {
            Err(HarnessError::ConfigInvalid("learning rates must be positive and finite".into()))
        }
    }
}

/// `start + ⌊(end − start)·step / ramp_steps⌋` until the ramp completes,
/// `end` afterwards. Works for shrinking ramps too.
pub fn batch_ramp(step: usize, start_size: usize, end_size: usize, ramp_steps: usize) -> usize {
    if ramp_steps == 0 || step >= ramp_steps {
        return end_size;
    }
    let delta = end_size as i128 - start_size as i128;
    (start_size as i128 + delta * step as i128 / ramp_steps as i128) as usize
}

/// Per-modality exponential moving averages of raw losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRescaler {
    pub decay: f64,
    /// Zero means "not observed yet".
    pub ema: [f64; 3],
}

impl LossRescaler {
    pub fn new(decay: f64) -> Self {
        Self { decay, ema: [0.0; 3] }
    }

    /// Folds observed losses into the EMA; the first observation of a
    /// modality initializes it.
    pub fn observe(&mut self, raw: &[Option<f64>; 3]) {
        for (ema, r) in self.ema.iter_mut().zip(raw) {
            if let Some(v) = *r {
                *ema = if *ema == 0.0 { v } else { self.decay * *ema + (1.0 - self.decay) * v };
            }
        }
    }

    /// Multipliers `1 / EMA` for the present modalities.
    pub fn factors(&self, raw: &[Option<f64>; 3]) -> Result<[Option<f64>; 3], HarnessError> {
        let mut out = [None; 3];
        for m in Modality::ALL {
            let i = m.index();
            if raw[i].is_some() {
                if self.ema[i] == 0.0 || !self.ema[i].is_finite() {
                    return Err(HarnessError::EmaNotWarm(m));
                }
                out[i] = Some(1.0 / self.ema[i]);
            }
        }
        Ok(out)
    }
}

/// Each present loss divided by its modality's EMA.
pub fn modality_loss_rescale(raw: &[Option<f64>; 3], stats: &LossRescaler) -> Result<[Option<f64>; 3], HarnessError> {
    let f = stats.factors(raw)?;
    Ok([0, 1, 2].map(|i| raw[i].zip(f[i]).map(|(r, s)| r * s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn warmup_then_constant() {
        assert_eq!(wsd_lr(0, 100, 0.5), 0.0);
        assert_eq!(wsd_lr(100, 100, 0.5), 0.5);
        assert_eq!(wsd_lr(50, 100, 0.5), 0.25);
        assert_eq!(wsd_lr(10_000, 100, 0.5), 0.5);
        assert_eq!(wsd_lr(0, 0, 0.5), 0.5);
    }

    #[test]
    fn decay_plugins() {
        let lin = LrSchedule {
            warmup_steps: 10,
            peak: 1.0,
            decay: Some(Decay { shape: DecayShape::Linear, start: 20, steps: 10, final_lr: 0.0 }),
        };
        assert_eq!(lin.at(15), 1.0);
        assert_eq!(lin.at(25), 0.5);
        assert_eq!(lin.at(40), 0.0);
        let cos = LrSchedule { decay: Some(Decay { shape: DecayShape::Cosine, ..lin.decay.unwrap() }), ..lin };
        assert!((cos.at(25) - 0.5).abs() < 1e-15);
        assert!(cos.at(22) > lin.at(22));
    }

    #[test]
    fn ramp_endpoints_and_midpoint() {
        assert_eq!(batch_ramp(0, 14, 56, 100), 14);
        assert_eq!(batch_ramp(100, 14, 56, 100), 56);
        assert_eq!(batch_ramp(500, 14, 56, 100), 56);
        assert_eq!(batch_ramp(50, 14, 56, 100), 35);
        assert_eq!(batch_ramp(33, 14, 56, 100), 27);
        assert_eq!(batch_ramp(50, 8, 4, 100), 6);
    }

    #[test]
    fn ema_equal_to_loss_gives_one() {
        let stats = LossRescaler { decay: 0.99, ema: [2.5, 0.0, 0.0] };
        assert_eq!(modality_loss_rescale(&[Some(2.5), None, None], &stats).unwrap(), [Some(1.0), None, None]);
    }

    #[test]
    fn cold_ema_is_rejected() {
        let stats = LossRescaler::new(0.99);
        assert!(matches!(
            modality_loss_rescale(&[None, Some(1.0), None], &stats),
            Err(HarnessError::EmaNotWarm(Modality::Vision))
        ));
    }

    #[test]
    fn stationary_stream_scales_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stats = LossRescaler::new(0.99);
        let mut late = Vec::new();
        for step in 0..200 {
            let raw = [Some(4.0 + rng.gen_range(-0.4..0.4)), None, None];
            stats.observe(&raw);
            let scaled = modality_loss_rescale(&raw, &stats).unwrap()[0].unwrap();
            if step >= 100 {
                late.push(scaled);
            }
        }
        let mean = late.iter().sum::<f64>() / late.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
    }
}
