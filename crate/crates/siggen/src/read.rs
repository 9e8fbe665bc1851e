//! Single-read synthesis: sequence, per-base event durations from a
//! truncated geometric mixture scaled by a drifting speed multiplier, and
//! the noisy signal itself.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pore::PoreModel;
use crate::{Error, Result};

/// How long the pore dwells on one base, in readouts.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub enum DurationLaw {
    /// Mixture of two truncated geometrics: short-mean component with the
    /// given weight, long-mean component with the rest. Support [1, max].
    Mixture {
        short_mean: f64,
        long_mean: f64,
        short_weight: f64,
        max: u32,
    },
    /// Every event takes exactly this many readouts.
    Constant(u32),
}

impl Default for DurationLaw {
    fn default() -> Self {
        DurationLaw::Mixture {
            short_mean: 9.0,
            long_mean: 25.0,
            short_weight: 0.85,
            max: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub kmer: usize,
    /// Scales every k-mer's noise sigma; 0 silences noise entirely.
    pub noise_scale: f64,
    /// Per-read speed multiplier is log-uniform in [speed_min, speed_max].
    pub speed_min: f64,
    pub speed_max: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Bases per piecewise-constant drift segment; the local multiplier is
    /// the read multiplier scaled by a uniform draw from [drift_low, drift_high].
    pub drift_segment: usize,
    pub drift_low: f64,
    pub drift_high: f64,
    pub duration: DurationLaw,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            kmer: 5,
            noise_scale: 1.0,
            speed_min: 0.7,
            speed_max: 1.4,
            seq_len_min: 220,
            seq_len_max: 500,
            drift_segment: 250,
            drift_low: 0.9,
            drift_high: 1.1,
            duration: DurationLaw::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::InvalidConfig(format!(
                "speed profile [{}, {}] must satisfy 0 < min <= max",
                self.speed_min, self.speed_max
            )));
        }
        if self.seq_len_min < self.kmer || self.seq_len_max < self.seq_len_min {
            return Err(Error::InvalidConfig(format!(
                "sequence length range [{}, {}] must be >= k-mer order {}",
                self.seq_len_min, self.seq_len_max, self.kmer
            )));
        }
        if !(self.drift_low > 0.0 && self.drift_high >= self.drift_low) {
            return Err(Error::InvalidConfig("drift bounds must satisfy 0 < low <= high".into()));
        }
        if self.drift_segment == 0 {
            return Err(Error::InvalidConfig("drift segment length must be positive".into()));
        }
        if let DurationLaw::Mixture {
            short_mean,
            long_mean,
            short_weight,
            max,
        } = self.duration
        {
            let fastest = self.speed_max * self.drift_high;
            if short_mean / fastest <= 1.0 || long_mean / fastest <= 1.0 {
                return Err(Error::InvalidConfig(
                    "duration means must stay above 1 readout at the fastest speed".into(),
                ));
            }
            if !(0.0..=1.0).contains(&short_weight) || max < 1 {
                return Err(Error::InvalidConfig("mixture weight or cap out of range".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadRecord {
    pub read_id: String,
    pub sequence: String,
    /// Ground-truth speed in bases per 100 readouts: 100 * |seq| / |signal|.
    pub speed: f32,
    /// Start readout index of each base's event; strictly increasing, one
    /// entry per base.
    pub event_bounds: Vec<u32>,
    pub signal: Vec<f32>,
}

fn box_muller<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inverse-CDF draw from a geometric on {1, 2, ...} with the given mean,
/// conditioned on the outcome being at most `max`.
fn truncated_geometric<R: Rng>(rng: &mut R, mean: f64, max: u32) -> u32 {
    let p = mean.recip().min(0.999);
    let q = 1.0 - p;
    let cap = 1.0 - q.powi(max as i32);
    let u: f64 = rng.random::<f64>() * cap;
    let d = ((1.0 - u).ln() / q.ln()).ceil() as u32;
    d.clamp(1, max)
}

fn draw_duration<R: Rng>(rng: &mut R, law: &DurationLaw, multiplier: f64) -> u32 {
    match *law {
        DurationLaw::Constant(d) => d,
        DurationLaw::Mixture {
            short_mean,
            long_mean,
            short_weight,
            max,
        } => {
            let pick_short = rng.random::<f64>() < short_weight;
            let mean = if pick_short { short_mean } else { long_mean } / multiplier;
            truncated_geometric(rng, mean.max(1.01), max)
        }
    }
}

/// Generate one read. `read_seed` fully determines the outcome.
pub fn generate_read(
    pore: &PoreModel,
    cfg: &GenConfig,
    read_seed: u64,
    read_id: String,
) -> Result<ReadRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(read_seed);

    let seq_len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
    let sequence: Vec<u8> = (0..seq_len)
        .map(|_| b"ACGT"[rng.random_range(0..4)])
        .collect();

    let read_mult = (rng.random::<f64>() * (cfg.speed_max.ln() - cfg.speed_min.ln())
        + cfg.speed_min.ln())
    .exp();

    let mut signal: Vec<f32> = Vec::with_capacity(seq_len * 10);
    let mut bounds: Vec<u32> = Vec::with_capacity(seq_len);
    let mut seg_mult = read_mult;
    for j in 0..seq_len {
        if j % cfg.drift_segment == 0 {
            seg_mult = read_mult
                * (cfg.drift_low + (cfg.drift_high - cfg.drift_low) * rng.random::<f64>());
        }
        let dur = draw_duration(&mut rng, &cfg.duration, seg_mult);
        let code = pore.kmer_code(&sequence, j);
        let level = pore.levels[code] as f64;
        let sigma = pore.sigmas[code] as f64 * cfg.noise_scale;
        bounds.push(signal.len() as u32);
        for _ in 0..dur {
            let sample = if sigma > 0.0 {
                level + sigma * box_muller(&mut rng)
            } else {
                level
            };
            signal.push(sample as f32);
        }
    }

    let speed = (100.0 * seq_len as f64 / signal.len() as f64) as f32;
    Ok(ReadRecord {
        read_id,
        sequence: String::from_utf8(sequence).expect("ACGT bytes"),
        speed,
        event_bounds: bounds,
        signal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_cfg() -> GenConfig {
        GenConfig {
            noise_scale: 0.0,
            speed_min: 1.0,
            speed_max: 1.0,
            drift_low: 1.0,
            drift_high: 1.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn constant_durations_make_equal_runs() {
        let pore = PoreModel::new(5, 3);
        let cfg = GenConfig {
            duration: DurationLaw::Constant(8),
            seq_len_min: 40,
            seq_len_max: 40,
            ..quiet_cfg()
        };
        let read = generate_read(&pore, &cfg, 11, "r0".into()).unwrap();
        assert_eq!(read.signal.len(), 40 * 8);
        assert_eq!(read.event_bounds.len(), 40);
        for (j, &b) in read.event_bounds.iter().enumerate() {
            assert_eq!(b as usize, j * 8);
            let run = &read.signal[b as usize..b as usize + 8];
            assert!(run.iter().all(|&v| v == run[0]), "event {j} not constant");
        }
        assert_eq!(read.speed, 100.0 * 40.0 / 320.0);
    }

    #[test]
    fn mixture_mean_lands_between_8_and_10_at_unit_speed() {
        let pore = PoreModel::new(5, 5);
        let cfg = GenConfig {
            seq_len_min: 500,
            seq_len_max: 500,
            ..quiet_cfg()
        };
        let mut total_bases = 0usize;
        let mut total_signal = 0usize;
        let mut histogram = [0usize; 41];
        let mut seed = 0u64;
        while total_bases < 100_000 {
            let read = generate_read(&pore, &cfg, 900 + seed, format!("r{seed}")).unwrap();
            total_bases += read.sequence.len();
            total_signal += read.signal.len();
            for w in read.event_bounds.windows(2) {
                histogram[(w[1] - w[0]) as usize] += 1;
            }
            seed += 1;
        }
        let mean = total_signal as f64 / total_bases as f64;
        assert!((8.0..=10.0).contains(&mean), "mean event length {mean}");
        assert!(histogram[1] > 0, "no single-readout events");
        let long: usize = histogram[30..].iter().sum();
        assert!(long > 0, "no events of 30+ readouts");
    }

    #[test]
    fn speed_is_definitionally_exact() {
        let pore = PoreModel::new(5, 9);
        let cfg = GenConfig::default();
        for seed in 0..20 {
            let read = generate_read(&pore, &cfg, seed, format!("r{seed}")).unwrap();
            let want = (100.0 * read.sequence.len() as f64 / read.signal.len() as f64) as f32;
            assert_eq!(read.speed, want);
        }
    }

    #[test]
    fn bounds_are_strictly_increasing_and_cover_signal() {
        let pore = PoreModel::new(5, 13);
        let cfg = GenConfig::default();
        for seed in 0..10 {
            let read = generate_read(&pore, &cfg, 100 + seed, format!("r{seed}")).unwrap();
            assert_eq!(read.event_bounds.len(), read.sequence.len());
            assert_eq!(read.event_bounds[0], 0);
            for w in read.event_bounds.windows(2) {
                assert!(w[0] < w[1]);
            }
            let last = *read.event_bounds.last().unwrap() as usize;
            assert!(last < read.signal.len());
        }
    }

    #[test]
    fn faster_speed_shortens_reads() {
        let pore = PoreModel::new(5, 17);
        let slow = GenConfig {
            speed_min: 0.7,
            speed_max: 0.7,
            seq_len_min: 400,
            seq_len_max: 400,
            ..quiet_cfg()
        };
        let fast = GenConfig {
            speed_min: 1.4,
            speed_max: 1.4,
            seq_len_min: 400,
            seq_len_max: 400,
            ..quiet_cfg()
        };
        let total = |cfg: &GenConfig| -> usize {
            (0..10)
                .map(|s| generate_read(&pore, cfg, s, format!("r{s}")).unwrap().signal.len())
                .sum()
        };
        let slow_len = total(&slow);
        let fast_len = total(&fast);
        assert!(
            (slow_len as f64) > 1.5 * fast_len as f64,
            "slow {slow_len} fast {fast_len}"
        );
    }

    #[test]
    fn signal_mean_tracks_duration_weighted_levels() {
        // With ground truth in hand the expected signal mean is the
        // duration-weighted level mean; noise shifts it by at most
        // 3 * sqrt(sum(d_j sigma_j^2)) / N.
        let pore = PoreModel::new(5, 21);
        let cfg = GenConfig {
            seq_len_min: 400,
            seq_len_max: 400,
            speed_min: 1.0,
            speed_max: 1.0,
            drift_low: 1.0,
            drift_high: 1.0,
            ..GenConfig::default()
        };
        for seed in 0..5 {
            let read = generate_read(&pore, &cfg, 3000 + seed, format!("r{seed}")).unwrap();
            let n = read.signal.len() as f64;
            let seq = read.sequence.as_bytes();
            let mut ends: Vec<u32> = read.event_bounds[1..].to_vec();
            ends.push(read.signal.len() as u32);
            let mut expected = 0.0f64;
            let mut noise_var = 0.0f64;
            for (j, (&start, &end)) in read.event_bounds.iter().zip(&ends).enumerate() {
                let d = (end - start) as f64;
                let code = pore.kmer_code(seq, j);
                expected += d * pore.levels[code] as f64;
                noise_var += d * (pore.sigmas[code] as f64).powi(2);
            }
            expected /= n;
            let tol = 3.0 * noise_var.sqrt() / n;
            let got = read.signal.iter().map(|&v| v as f64).sum::<f64>() / n;
            assert!(
                (got - expected).abs() <= tol,
                "seed {seed}: mean {got} vs expected {expected} (tol {tol})"
            );
        }
    }

    #[test]
    fn invalid_speed_profile_is_rejected() {
        let cfg = GenConfig {
            speed_min: 1.5,
            speed_max: 0.7,
            ..GenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let cfg2 = GenConfig {
            speed_min: -1.0,
            ..GenConfig::default()
        };
        assert!(cfg2.validate().is_err());
    }
}
