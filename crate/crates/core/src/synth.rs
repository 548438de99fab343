//! Reproducible synthetic layers.
//!
//! `Gaussian` draws i.i.d. `N(0, σ²)` weights. `HeavyTailedSpikes` then
//! overwrites a fraction of the entries with `±spike_scale · σ`, all placed
//! inside a random subset of output channels, which mimics the salient-channel
//! outliers of trained weights. Activations are i.i.d. standard normal.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Gaussian,
    HeavyTailedSpikes,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SynthKind::Gaussian),
            "heavy-tailed-spikes" | "spikes" => Ok(SynthKind::HeavyTailedSpikes),
            _ => Err(Error::InvalidConfig(format!(
                "unknown synthetic kind {s:?} (expected gaussian or heavy-tailed-spikes)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub d_out: usize,
    pub d_in: usize,
    pub samples: usize,
    /// Bulk standard deviation σ.
    pub sigma: f64,
    /// Share of all weights that become spikes.
    pub spike_fraction: f64,
    /// Spike magnitude in units of σ.
    pub spike_scale: f64,
    /// Share of output channels that host the spikes.
    pub spike_channel_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::HeavyTailedSpikes,
            d_out: 256,
            d_in: 256,
            samples: 512,
            sigma: 1.0,
            spike_fraction: 0.01,
            spike_scale: 8.0,
            spike_channel_fraction: 0.10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthLayer {
    pub weights: Matrix,
    /// `d_in × samples`
    pub activations: Matrix,
    /// Rows holding spikes, ascending.
    pub spike_channels: Vec<usize>,
    pub spike_count: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.d_in == 0 || self.samples == 0 {
            return Err(Error::InvalidConfig("synthetic shape must be positive".into()));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        for (name, v) in [
            ("spike fraction", self.spike_fraction),
            ("spike channel fraction", self.spike_channel_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !self.spike_scale.is_finite() || self.spike_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "spike scale must be non-negative, got {}",
                self.spike_scale
            )));
        }
        if self.kind == SynthKind::HeavyTailedSpikes && self.spike_count() > 0 {
            let capacity = self.spike_channel_count() * self.d_in;
            if self.spike_count() > capacity {
                return Err(Error::InvalidConfig(format!(
                    "{} spikes do not fit in {} spike channels",
                    self.spike_count(),
                    self.spike_channel_count()
                )));
            }
        }
        Ok(())
    }

    pub fn spike_count(&self) -> usize {
        match self.kind {
            SynthKind::Gaussian => 0,
            SynthKind::HeavyTailedSpikes => {
                (self.spike_fraction * (self.d_out * self.d_in) as f64).round() as usize
            }
        }
    }

    pub fn spike_channel_count(&self) -> usize {
        ((self.spike_channel_fraction * self.d_out as f64).round() as usize).clamp(1, self.d_out)
    }

    pub fn generate(&self) -> Result<SynthLayer> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let bulk = Normal::new(0.0, self.sigma).expect("validated sigma");
        let mut weights = Matrix::from_fn(self.d_out, self.d_in, |_, _| bulk.sample(&mut rng));

        let spike_count = self.spike_count();
        let mut spike_channels = Vec::new();
        if spike_count > 0 {
            spike_channels = sample(&mut rng, self.d_out, self.spike_channel_count()).into_vec();
            spike_channels.sort_unstable();
            let slots = sample(&mut rng, spike_channels.len() * self.d_in, spike_count);
            let magnitude = self.spike_scale * self.sigma;
            for slot in slots {
                let row = spike_channels[slot / self.d_in];
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                weights[(row, slot % self.d_in)] = sign * magnitude;
            }
        }

        let activations = Matrix::from_fn(self.d_in, self.samples, |_, _| StandardNormal.sample(&mut rng));
        Ok(SynthLayer {
            weights,
            activations,
            spike_channels,
            spike_count,
        })
    }
}

/// Sample excess kurtosis of all entries.
pub fn excess_kurtosis(m: &Matrix) -> f64 {
    let data = m.as_slice();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let m2 = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = data.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: SynthKind, seed: u64) -> SynthConfig {
        SynthConfig {
            kind,
            d_out: 64,
            d_in: 64,
            samples: 32,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = small(SynthKind::HeavyTailedSpikes, 9).generate().unwrap();
        let b = small(SynthKind::HeavyTailedSpikes, 9).generate().unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.activations, b.activations);
        let c = small(SynthKind::HeavyTailedSpikes, 10).generate().unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn zero_spike_fraction_is_gaussian() {
        let mut cfg = small(SynthKind::HeavyTailedSpikes, 1);
        cfg.spike_fraction = 0.0;
        let spiky = cfg.generate().unwrap();
        cfg.kind = SynthKind::Gaussian;
        let plain = cfg.generate().unwrap();
        assert_eq!(spiky.spike_count, 0);
        assert_eq!(spiky.weights, plain.weights);
    }

    #[test]
    fn spikes_live_in_spike_channels() {
        let layer = small(SynthKind::HeavyTailedSpikes, 3).generate().unwrap();
        assert_eq!(layer.spike_count, 41);
        assert_eq!(layer.spike_channels.len(), 6);
        let spikes: Vec<(usize, usize)> = (0..64)
            .flat_map(|i| (0..64).map(move |j| (i, j)))
            .filter(|&(i, j)| layer.weights[(i, j)].abs() == 8.0)
            .collect();
        assert_eq!(spikes.len(), 41);
        assert!(spikes.iter().all(|(i, _)| layer.spike_channels.contains(i)));
    }

    #[test]
    fn spikes_raise_kurtosis() {
        let spiky = SynthConfig {
            spike_fraction: 0.01,
            seed: 4,
            ..SynthConfig::default()
        };
        let plain = SynthConfig {
            kind: SynthKind::Gaussian,
            ..spiky
        };
        let k_spiky = excess_kurtosis(&spiky.generate().unwrap().weights);
        let k_plain = excess_kurtosis(&plain.generate().unwrap().weights);
        assert!(k_plain.abs() < 0.2, "{k_plain}");
        assert!(k_spiky > k_plain + 1.0, "{k_spiky} vs {k_plain}");
    }

    #[test]
    fn invalid_fractions() {
        let mut cfg = small(SynthKind::HeavyTailedSpikes, 0);
        cfg.spike_fraction = 1.5;
        assert!(cfg.generate().is_err());
        cfg.spike_fraction = 0.5;
        cfg.spike_channel_fraction = 0.1;
        assert!(cfg.generate().is_err());
        cfg.spike_fraction = 0.01;
        cfg.d_out = 0;
        assert!(cfg.generate().is_err());
    }
}
