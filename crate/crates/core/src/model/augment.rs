//! Label-preserving signal augmentations for the pre-training views.
//!
//! Order of application: amplitude scale, circular time shift, random crop
//! (window kept, remainder zeroed, length preserved), additive Gaussian
//! noise at a sampled SNR. Every draw comes from the caller's stream, so a
//! fixed seed replays the exact same view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Amplitude scale range, inclusive.
    pub scale: (f64, f64),
    /// Maximum circular shift in samples, both directions.
    pub shift_max: usize,
    /// Additive-noise SNR range in dB; None disables noise.
    pub snr_db: Option<(f64, f64)>,
    /// Fraction of the signal kept by the crop window; 1.0 disables.
    pub crop_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale: (0.8, 1.2),
            shift_max: 64,
            snr_db: Some((20.0, 40.0)),
            crop_frac: 0.9,
        }
    }
}

impl AugmentConfig {
    /// Identity transform: every knob at its neutral setting.
    pub fn identity() -> Self {
        AugmentConfig {
            scale: (1.0, 1.0),
            shift_max: 0,
            snr_db: None,
            crop_frac: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.0 > 0.0 && self.scale.1 >= self.scale.0) {
            return Err(Error::InvalidArg {
                context: "AugmentConfig",
                detail: format!("scale range ({}, {})", self.scale.0, self.scale.1),
            });
        }
        if let Some((lo, hi)) = self.snr_db {
            if !(hi >= lo) {
                return Err(Error::InvalidArg {
                    context: "AugmentConfig",
                    detail: format!("snr range ({lo}, {hi})"),
                });
            }
        }
        if !(self.crop_frac > 0.0 && self.crop_frac <= 1.0) {
            return Err(Error::InvalidArg {
                context: "AugmentConfig",
                detail: format!("crop_frac {} outside (0, 1]", self.crop_frac),
            });
        }
        Ok(())
    }
}

/// Produce one augmented view of a (channels, time) signal. The output has
/// the same shape as the input.
pub fn augment(x: &Matrix, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Matrix> {
    cfg.validate()?;
    let t = x.cols();
    let keep = (cfg.crop_frac * t as f64).ceil() as usize;
    if t == 0 || keep == 0 {
        return Err(Error::InvalidArg {
            context: "augment",
            detail: format!("signal length {t} too short for crop fraction {}", cfg.crop_frac),
        });
    }

    let gain = if cfg.scale.0 == cfg.scale.1 {
        cfg.scale.0
    } else {
        rng.range_f64(cfg.scale.0, cfg.scale.1)
    };
    let shift = if cfg.shift_max == 0 {
        0isize
    } else {
        let span = 2 * cfg.shift_max + 1;
        rng.usize_below(span) as isize - cfg.shift_max as isize
    };

    let mut out = Matrix::zeros(x.rows(), t);
    for c in 0..x.rows() {
        let src = x.row(c);
        let dst = out.row_mut(c);
        for i in 0..t {
            // Destination i takes the sample shifted into it, circularly.
            let j = (i as isize - shift).rem_euclid(t as isize) as usize;
            dst[i] = gain * src[j];
        }
    }

    if keep < t {
        let start = rng.usize_below(t - keep + 1);
        for c in 0..out.rows() {
            let row = out.row_mut(c);
            for (i, v) in row.iter_mut().enumerate() {
                if i < start || i >= start + keep {
                    *v = 0.0;
                }
            }
        }
    }

    if let Some((lo, hi)) = cfg.snr_db {
        let snr = if lo == hi { lo } else { rng.range_f64(lo, hi) };
        let power: f64 =
            out.data().iter().map(|v| v * v).sum::<f64>() / out.data().len() as f64;
        if power > 0.0 {
            let noise_std = (power / 10f64.powf(snr / 10.0)).sqrt();
            for v in out.data_mut() {
                *v += noise_std * rng.normal();
            }
        }
    }
    Ok(out)
}
