//! The k-mer level table: each k-mer maps to a current level and a noise
//! width. A k-mer's level is a center-weighted sum of per-position base
//! contributions, standardized to zero mean and unit variance over the
//! table, so generated signal is unit-scale by construction and each base
//! leaves a footprint in k consecutive events.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALPHABET: usize = 4;

#[derive(Clone, Debug)]
pub struct PoreModel {
    pub k: usize,
    /// One level per k-mer code, zero mean and unit variance over the table.
    pub levels: Vec<f32>,
    /// Per-k-mer noise sigma, uniform in [0.1, 0.3].
    pub sigmas: Vec<f32>,
}

fn box_muller<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl PoreModel {
    pub fn new(k: usize, seed: u64) -> Self {
        let n = ALPHABET.pow(k as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // contrib[p][b]: level contribution of base b at window position p,
        // weighted by a profile that halves per step away from the center.
        let mut contrib = vec![[0.0f64; ALPHABET]; k];
        for row in contrib.iter_mut() {
            for v in row.iter_mut() {
                *v = box_muller(&mut rng);
            }
        }
        let center = (k - 1) as f64 / 2.0;
        let profile: Vec<f64> =
            (0..k).map(|p| 0.5f64.powf((p as f64 - center).abs())).collect();
        let mut raw: Vec<f64> = (0..n)
            .map(|code| {
                let mut level = 0.0;
                let mut c = code;
                for p in (0..k).rev() {
                    level += profile[p] * contrib[p][c % ALPHABET];
                    c /= ALPHABET;
                }
                level
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = var.sqrt().recip();
        for v in raw.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        let sigmas = (0..n)
            .map(|_| (0.1 + 0.2 * rng.random::<f64>()) as f32)
            .collect();
        PoreModel {
            k,
            levels: raw.into_iter().map(|v| v as f32).collect(),
            sigmas,
        }
    }

    pub fn table_len(&self) -> usize {
        self.levels.len()
    }

    /// Code of the k-mer window around base `j`: the window is centered on
    /// `j` and clamped to the sequence, so every base has a full k-mer.
    pub fn kmer_code(&self, seq: &[u8], j: usize) -> usize {
        let n = seq.len();
        debug_assert!(n >= self.k);
        let start = j
            .saturating_sub(self.k / 2)
            .min(n - self.k);
        let mut code = 0usize;
        for &b in &seq[start..start + self.k] {
            code = code * ALPHABET
                + match b {
                    b'A' => 0,
                    b'C' => 1,
                    b'G' => 2,
                    b'T' => 3,
                    _ => unreachable!("generator alphabet is ACGT"),
                };
        }
        code
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_standardized() {
        let pore = PoreModel::new(5, 42);
        assert_eq!(pore.table_len(), 1024);
        let mean: f64 = pore.levels.iter().map(|&v| v as f64).sum::<f64>() / 1024.0;
        let var: f64 = pore
            .levels
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / 1024.0;
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((var - 1.0).abs() < 1e-6, "{var}");
        for &s in &pore.sigmas {
            assert!((0.1..=0.3).contains(&s));
        }
    }

    #[test]
    fn same_seed_same_table() {
        let a = PoreModel::new(5, 7);
        let b = PoreModel::new(5, 7);
        assert_eq!(a.levels, b.levels);
        assert_eq!(a.sigmas, b.sigmas);
        let c = PoreModel::new(5, 8);
        assert_ne!(a.levels, c.levels);
    }

    #[test]
    fn levels_are_additive_and_center_weighted() {
        let pore = PoreModel::new(5, 42);
        let level = |bases: [usize; 5]| {
            let code = bases.iter().fold(0usize, |acc, &b| acc * 4 + b);
            pore.levels[code] as f64
        };
        // swapping one base shifts the level by the same amount in any
        // flanking context
        for pos in [0usize, 2] {
            let mut deltas = Vec::new();
            for ctx in [[0, 1, 0, 2, 3], [3, 2, 1, 1, 0], [2, 2, 3, 3, 1]] {
                let mut a = ctx;
                let mut b = ctx;
                a[pos] = 0;
                b[pos] = 1;
                deltas.push(level(a) - level(b));
            }
            assert!((deltas[0] - deltas[1]).abs() < 1e-5, "pos {pos}: {deltas:?}");
            assert!((deltas[0] - deltas[2]).abs() < 1e-5, "pos {pos}: {deltas:?}");
        }
        // center swaps move the level more than edge swaps on average
        let swap_mean = |pos: usize| {
            let mut total = 0.0;
            let mut n = 0;
            for x in 0..4usize {
                for y in 0..4usize {
                    if x == y {
                        continue;
                    }
                    let mut a = [0usize; 5];
                    let mut b = [0usize; 5];
                    a[pos] = x;
                    b[pos] = y;
                    total += (level(a) - level(b)).abs();
                    n += 1;
                }
            }
            total / n as f64
        };
        assert!(swap_mean(2) > swap_mean(0), "center should dominate");
        assert!(swap_mean(2) > swap_mean(4), "center should dominate");
    }

    #[test]
    fn kmer_window_clamps_at_edges() {
        let pore = PoreModel::new(5, 1);
        let seq = b"ACGTACGT";
        // leading bases share the first window, trailing share the last
        assert_eq!(pore.kmer_code(seq, 0), pore.kmer_code(seq, 1));
        assert_eq!(pore.kmer_code(seq, 0), pore.kmer_code(seq, 2));
        assert_eq!(pore.kmer_code(seq, 6), pore.kmer_code(seq, 7));
        assert_ne!(pore.kmer_code(seq, 2), pore.kmer_code(seq, 3));
        // interior windows are centered
        let code3 = pore.kmer_code(seq, 3); // window 1..6 = CGTAC
        let want = [1usize, 2, 3, 0, 1]
            .iter()
            .fold(0, |acc, &d| acc * 4 + d);
        assert_eq!(code3, want);
    }
}
