//! Learning-rate schedule: linear warmup, then cosine annealing to zero
//! inside cycles whose lengths double, each restarting at the maximum rate.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub max_lr: f64,
    pub warmup: u64,
    pub first_cycle: u64,
    pub cycles: u32,
}

impl ScheduleSpec {
    pub fn cycle_len(&self, c: u32) -> u64 {
        self.first_cycle << c
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup + (0..self.cycles).map(|c| self.cycle_len(c)).sum::<u64>()
    }

    /// Last step index of each cycle; checkpoints are written after these.
    pub fn cycle_ends(&self) -> Vec<u64> {
        let mut ends = Vec::with_capacity(self.cycles as usize);
        let mut at = self.warmup;
        for c in 0..self.cycles {
            at += self.cycle_len(c);
            ends.push(at - 1);
        }
        ends
    }

    pub fn is_cycle_end(&self, step: u64) -> bool {
        self.cycle_ends().contains(&step)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.max_lr * step as f64 / self.warmup as f64;
        }
        let mut u = step - self.warmup;
        for c in 0..self.cycles {
            let len = self.cycle_len(c);
            if u < len {
                if u == 0 {
                    return self.max_lr;
                }
                let phase = std::f64::consts::PI * u as f64 / len as f64;
                return self.max_lr * 0.5 * (1.0 + phase.cos());
            }
            u -= len;
        }
        0.0
    }
}
