//! Activations composed from primitive ops.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Gated linear unit over channel halves: `[B, T, 2C] -> [B, T, C]`,
/// `g(x1, x2) = x1 * sigmoid(x2)` with `x1` the first half.
pub fn glu<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let xs = tape.value(x).shape();
    if xs.len() != 3 {
        return Err(Error::shape("glu", "[B, T, 2C]", format!("{xs:?}")));
    }
    let c2 = xs[2];
    if c2 % 2 != 0 {
        return Err(Error::invalid("glu", format!("odd channel count {c2}")));
    }
    let x1 = ops::slice_channels(tape, x, 0, c2 / 2)?;
    let x2 = ops::slice_channels(tape, x, c2 / 2, c2)?;
    let gate = ops::sigmoid(tape, x2);
    ops::mul(tape, x1, gate)
}

pub use crate::ops::swish;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn glu_with_equal_halves_is_swish() {
        let vals = vec![-2.0, -0.5, 0.0, 0.3, 1.7];
        let mut tape = Tape::<f64>::new();
        let doubled: Vec<f64> = vals.iter().chain(vals.iter()).copied().collect();
        // [1, 1, 10] with halves equal per time step requires channel layout
        // [x1.., x2..]; build T=1 so the halves are exactly vals twice.
        let x = tape.leaf(Tensor::new(vec![1, 1, 10], doubled).unwrap());
        let g = glu(&mut tape, x).unwrap();
        let xs = tape.leaf(Tensor::new(vec![1, 1, 5], vals.clone()).unwrap());
        let s = swish(&mut tape, xs);
        assert_eq!(tape.value(g).data(), tape.value(s).data());
    }

    #[test]
    fn glu_with_zero_gate_halves_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![4.0, 0.0, -6.0, 0.0]).unwrap());
        let g = glu(&mut tape, x).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, -3.0]);
    }

    #[test]
    fn glu_rejects_odd_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 3]));
        assert!(glu(&mut tape, x).is_err());
    }

    #[test]
    fn swish_limits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, 40.0, -40.0]).unwrap());
        let y = swish(&mut tape, x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 40.0).abs() < 1e-9);
        assert!(d[2].abs() < 1e-9);
    }
}
