//! Differential-entropy features: per channel and band, the Gaussian
//! closed form `DE = 0.5 * ln(2*pi*e * var)` over the band-limited variance,
//! with the variance taken from summed DFT bin power inside `[lo, hi)`.
//!
//! Convention: the channel mean is removed before the transform; no taper.

use super::DataError;
use crate::autodiff::HostTensor;
use rustfft::{num_complex::Complex, FftPlanner};

/// The five standard bands (Hz): delta, theta, alpha, beta, gamma.
pub const DEFAULT_BANDS: [(f64, f64); 5] = [
    (1.0, 4.0),
    (4.0, 8.0),
    (8.0, 14.0),
    (14.0, 30.0),
    (30.0, 50.0),
];

/// Variance floor substituted when a band carries no power.
pub const VAR_FLOOR: f64 = 1e-12;

/// A band whose spectral power hit the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeWarning {
    pub channel: usize,
    pub band: usize,
}

/// `0.5 * ln(2*pi*e * var)`, in nats.
pub fn de_from_variance(var: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln()
}

/// Per-channel, per-band DE of a multichannel window. `signal` is `[N, T]`
/// with at least one second of data (`T >= sample_rate`).
pub fn compute_de(
    signal: &HostTensor,
    sample_rate: f64,
    bands: &[(f64, f64)],
) -> Result<(HostTensor, Vec<DeWarning>), DataError> {
    if signal.shape.len() != 2 {
        return Err(DataError::Invalid {
            message: format!("signal must be [channels, samples], got {:?}", signal.shape),
        });
    }
    let (n, t) = (signal.shape[0], signal.shape[1]);
    if (t as f64) < sample_rate {
        return Err(DataError::Invalid {
            message: format!("window of {t} samples is shorter than one second at {sample_rate} Hz"),
        });
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(t);
    let mut out = HostTensor::zeros(&[n, bands.len()]);
    let mut warnings = Vec::new();
    for ch in 0..n {
        let row = &signal.data[ch * t..(ch + 1) * t];
        let mean = row.iter().sum::<f64>() / t as f64;
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .map(|&v| Complex::new(v - mean, 0.0))
            .collect();
        fft.process(&mut buf);
        // Parseval with mean removed: band variance is the summed bin power
        // scaled by 1/T^2, doubled for the mirrored positive frequencies.
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let mut power = 0.0;
            let half = t / 2;
            for (k, bin) in buf.iter().enumerate().take(half + 1).skip(1) {
                let freq = k as f64 * sample_rate / t as f64;
                if freq >= lo && freq < hi {
                    let mag2 = bin.norm_sqr();
                    let weight = if t % 2 == 0 && k == half { 1.0 } else { 2.0 };
                    power += weight * mag2;
                }
            }
            let mut var = power / (t as f64 * t as f64);
            if var < VAR_FLOOR {
                var = VAR_FLOOR;
                warnings.push(DeWarning { channel: ch, band: b });
            }
            out.data[ch * bands.len() + b] = de_from_variance(var);
        }
    }
    Ok((out, warnings))
}
