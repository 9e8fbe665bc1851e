//! Per-channel batch normalization over `[B, T, C]` with running statistics.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::{Ctx, Mode, NodeId};
use crate::tensor::Tensor;

pub struct BatchNorm1d {
    pub c: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm1d {
            c,
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(vec![c], T::one()), true),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(vec![c]), true),
            running_mean: store.insert(format!("{name}.rmean"), Tensor::zeros(vec![c]), false),
            running_var: store.insert(format!("{name}.rvar"), Tensor::full(vec![c], T::one()), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let xs = cx.tape.value(x).shape();
        if xs.len() != 3 || xs[2] != self.c {
            return Err(Error::shape("batch_norm", format!("[B, T, {}]", self.c), format!("{xs:?}")));
        }
        let (bsz, t, c) = (xs[0], xs[1], xs[2]);
        let rows = bsz * t;
        let eps = sc::<T>(self.eps);
        match cx.mode {
            Mode::Train => {
                if rows <= 1 {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("train mode needs B*T > 1, got {rows}"),
                    ));
                }
                let xv = cx.tape.value_rc(x);
                let n = sc::<T>(rows as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for r in 0..rows {
                    let row = &xv.data()[r * c..(r + 1) * c];
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / n;
                }
                for r in 0..rows {
                    let row = &xv.data()[r * c..(r + 1) * c];
                    for ci in 0..c {
                        let d = row[ci] - mean[ci];
                        var[ci] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / n;
                }
                let ivar: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

                let mut xhat = Tensor::zeros(vec![bsz, t, c]);
                for r in 0..rows {
                    for ci in 0..c {
                        xhat.data_mut()[r * c + ci] = (xv.data()[r * c + ci] - mean[ci]) * ivar[ci];
                    }
                }
                let xhat = Rc::new(xhat);

                let gamma = cx.param(self.gamma);
                let beta = cx.param(self.beta);
                let gv = cx.tape.value_rc(gamma);
                let bv = cx.tape.value(beta);
                let mut y = Tensor::zeros(vec![bsz, t, c]);
                for r in 0..rows {
                    for ci in 0..c {
                        y.data_mut()[r * c + ci] =
                            gv.data()[ci] * xhat.data()[r * c + ci] + bv.data()[ci];
                    }
                }

                // Queue the exponential-moving-average update of running stats.
                let mom = sc::<T>(self.momentum);
                let keep = T::one() - mom;
                let old_mean = cx.param_value(self.running_mean).clone();
                let old_var = cx.param_value(self.running_var).clone();
                let new_mean = Tensor::new(
                    vec![c],
                    (0..c).map(|ci| keep * old_mean.data()[ci] + mom * mean[ci]).collect(),
                )?;
                let new_var = Tensor::new(
                    vec![c],
                    (0..c).map(|ci| keep * old_var.data()[ci] + mom * var[ci]).collect(),
                )?;
                cx.push_pending(self.running_mean, new_mean);
                cx.push_pending(self.running_var, new_var);

                let xh = Rc::clone(&xhat);
                Ok(cx.tape.record(
                    "batch_norm",
                    vec![x, gamma, beta],
                    y,
                    Box::new(move |g| {
                        let gd = g.data();
                        let mut dgamma = Tensor::zeros(vec![c]);
                        let mut dbeta = Tensor::zeros(vec![c]);
                        let mut sum_dxhat = vec![T::zero(); c];
                        let mut sum_dxhat_xhat = vec![T::zero(); c];
                        for r in 0..rows {
                            for ci in 0..c {
                                let gi = gd[r * c + ci];
                                let xh_i = xh.data()[r * c + ci];
                                dbeta.data_mut()[ci] += gi;
                                dgamma.data_mut()[ci] += gi * xh_i;
                                let dxh = gi * gv.data()[ci];
                                sum_dxhat[ci] += dxh;
                                sum_dxhat_xhat[ci] += dxh * xh_i;
                            }
                        }
                        let mut dx = Tensor::zeros(vec![bsz, t, c]);
                        for r in 0..rows {
                            for ci in 0..c {
                                let gi = gd[r * c + ci];
                                let xh_i = xh.data()[r * c + ci];
                                let dxh = gi * gv.data()[ci];
                                dx.data_mut()[r * c + ci] = ivar[ci] / n
                                    * (n * dxh - sum_dxhat[ci] - xh_i * sum_dxhat_xhat[ci]);
                            }
                        }
                        vec![Some(dx), Some(dgamma), Some(dbeta)]
                    }),
                ))
            }
            Mode::Eval => {
                let xv = cx.tape.value_rc(x);
                let rmean = cx.param_value(self.running_mean).clone();
                let rvar = cx.param_value(self.running_var).clone();
                let ivar: Vec<T> =
                    rvar.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let gamma = cx.param(self.gamma);
                let beta = cx.param(self.beta);
                let gv = cx.tape.value_rc(gamma);
                let bv = cx.tape.value(beta);
                let mut y = Tensor::zeros(vec![bsz, t, c]);
                for r in 0..rows {
                    for ci in 0..c {
                        let xhat = (xv.data()[r * c + ci] - rmean.data()[ci]) * ivar[ci];
                        y.data_mut()[r * c + ci] = gv.data()[ci] * xhat + bv.data()[ci];
                    }
                }
                Ok(cx.tape.record(
                    "batch_norm",
                    vec![x, gamma, beta],
                    y,
                    Box::new(move |g| {
                        let gd = g.data();
                        let mut dx = Tensor::zeros(vec![bsz, t, c]);
                        let mut dgamma = Tensor::zeros(vec![c]);
                        let mut dbeta = Tensor::zeros(vec![c]);
                        for r in 0..rows {
                            for ci in 0..c {
                                let gi = gd[r * c + ci];
                                let xhat = (xv.data()[r * c + ci] - rmean.data()[ci]) * ivar[ci];
                                dx.data_mut()[r * c + ci] = gi * gv.data()[ci] * ivar[ci];
                                dgamma.data_mut()[ci] += gi * xhat;
                                dbeta.data_mut()[ci] += gi;
                            }
                        }
                        vec![Some(dx), Some(dgamma), Some(dbeta)]
                    }),
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;
    use crate::tape::apply_pending;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, b: usize, t: usize, c: usize) -> Tensor<f64> {
        let data = (0..b * t * c).map(|_| 3.0 * normal(rng) + 1.5).collect();
        Tensor::new(vec![b, t, c], data).unwrap()
    }

    #[test]
    fn train_output_standardized() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm1d::init(&mut store, "bn", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, 2, 50, 3);
        let mut cx = Ctx::new(&store, Mode::Train);
        let xn = cx.tape.leaf(x);
        let y = bn.forward(&mut cx, xn).unwrap();
        let yv = cx.tape.value(y);
        for ci in 0..3 {
            let vals: Vec<f64> = yv.data().iter().skip(ci).step_by(3).copied().collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm1d::init(&mut store, "bn", 1);
        store.get_mut(bn.beta).value = Tensor::new(vec![1], vec![0.7]).unwrap();
        let mut cx = Ctx::new(&store, Mode::Train);
        let xn = cx.tape.leaf(Tensor::full(vec![1, 10, 1], 4.2));
        let y = bn.forward(&mut cx, xn).unwrap();
        for &v in cx.tape.value(y).data() {
            assert!((v - 0.7).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn eval_converges_to_train_after_identical_batches() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm1d::init(&mut store, "bn", 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_input(&mut rng, 4, 25, 2);
        let mut train_out = Vec::new();
        for _ in 0..120 {
            let mut cx = Ctx::new(&store, Mode::Train);
            let xn = cx.tape.leaf(x.clone());
            let y = bn.forward(&mut cx, xn).unwrap();
            train_out = cx.tape.value(y).data().to_vec();
            let pending = cx.take_pending();
            apply_pending(&mut store, pending);
        }
        let mut cx = Ctx::new(&store, Mode::Eval);
        let xn = cx.tape.leaf(x.clone());
        let y = bn.forward(&mut cx, xn).unwrap();
        for (a, b) in cx.tape.value(y).data().iter().zip(&train_out) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn train_rejects_single_element_batch() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm1d::init(&mut store, "bn", 1);
        let mut cx = Ctx::new(&store, Mode::Train);
        let xn = cx.tape.leaf(Tensor::full(vec![1, 1, 1], 1.0));
        assert!(bn.forward(&mut cx, xn).is_err());
    }
}
