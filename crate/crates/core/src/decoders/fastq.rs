//! FASTQ records with per-base qualities derived from forced-alignment
//! emission probabilities.

use super::{indices_to_string, Alignment};

/// Phred quality of a base the model emitted with probability `p`:
/// q = -10 log10(1 - p), clamped to [0, 40].
pub fn phred(p: f64) -> u8 {
    let err = (1.0 - p).max(0.0);
    let q = if err <= 0.0 { 40.0 } else { -10.0 * err.log10() };
    q.clamp(0.0, 40.0).round() as u8
}

pub fn quality_string(alignment: &Alignment) -> String {
    alignment
        .emit_probs
        .iter()
        .map(|&p| (phred(p) + 33) as char)
        .collect()
}

/// One four-line FASTQ record. An empty call yields empty sequence and
/// quality lines.
pub fn fastq_record(id: &str, seq: &[usize], quals: &str) -> String {
    debug_assert_eq!(seq.len(), quals.len());
    format!("@{id}\n{}\n+\n{quals}\n", indices_to_string(seq))
}
