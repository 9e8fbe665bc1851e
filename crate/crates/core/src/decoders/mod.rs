//! Sequence decoders: losses that marginalize over emission alignments,
//! greedy and beam decoding, and forced alignment for per-base qualities.
//!
//! Emission vectors order the alphabet as [A, C, G, T, eps] where eps (index
//! 4) emits nothing.

pub mod ctc;
pub mod fastq;
pub mod rna;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BASES: [u8; 4] = [b'A', b'C', b'G', b'T'];
pub const NUM_BASES: usize = 4;
pub const NUM_SYMBOLS: usize = 5;
pub const EPS: usize = 4;

/// How emission strings reduce to a base sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Drop eps symbols, keep everything else (repeats survive).
    Drop,
    /// Collapse consecutive repeats, then drop eps.
    CollapseDrop,
}

pub fn base_index(ch: u8) -> Result<usize> {
    match ch {
        b'A' | b'a' => Ok(0),
        b'C' | b'c' => Ok(1),
        b'G' | b'g' => Ok(2),
        b'T' | b't' => Ok(3),
        _ => Err(Error::invalid("base_index", "sequence contains a non-ACGT byte")),
    }
}

pub fn string_to_indices(s: &str) -> Result<Vec<usize>> {
    s.bytes().map(base_index).collect()
}

pub fn indices_to_string(idx: &[usize]) -> String {
    idx.iter().map(|&i| BASES[i] as char).collect()
}

/// Forced alignment of a target sequence to emission steps: for each target
/// base, the step that emitted it on the best path and the probability the
/// model gave that base there.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub emit_steps: Vec<usize>,
    pub emit_probs: Vec<f64>,
}

pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn log_softmax5(logits: &[f64; 5]) -> [f64; 5] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    [
        logits[0] - z,
        logits[1] - z,
        logits[2] - z,
        logits[3] - z,
        logits[4] - z,
    ]
}

/// Interpret a tensor whose last dimension is 5 as a run of emission rows.
pub(crate) fn emission_rows<T: Scalar>(x: &Tensor<T>) -> Result<(usize, Vec<[f64; 5]>)> {
    let shape = x.shape();
    if shape.is_empty() || shape[shape.len() - 1] != NUM_SYMBOLS {
        return Err(Error::shape(
            "emission_rows",
            "[..., 5]",
            format!("{shape:?}"),
        ));
    }
    let t = x.numel() / NUM_SYMBOLS;
    let mut rows = Vec::with_capacity(t);
    for i in 0..t {
        let mut row = [0.0; 5];
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = x.data()[i * NUM_SYMBOLS + k].to_f64().unwrap();
        }
        rows.push(row);
    }
    Ok((t, rows))
}

pub(crate) fn validate_target(op: &'static str, target: &[usize]) -> Result<()> {
    if target.iter().any(|&z| z >= NUM_BASES) {
        return Err(Error::invalid(op, "target symbol out of range"));
    }
    Ok(())
}
