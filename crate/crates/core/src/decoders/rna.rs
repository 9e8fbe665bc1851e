//! Context-conditioned emission head: each step's emission distribution over
//! [A, C, G, T, eps] depends on the hidden vector and on the last `k` bases
//! already emitted, through a per-context affine map. Short histories are
//! left-padded with A and disambiguated by a learned per-length start bias.


use super::{
    log_softmax5, lse2, validate_target, Alignment, EPS, NUM_BASES, NUM_SYMBOLS,
};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::normal;
use crate::scalar::{sc, Scalar};
use crate::tape::{Ctx, NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;

/// Base-4 code of the last `min(len, k)` symbols of `prefix`, newest symbol
/// least significant. Padding with A (code 0) leaves the value unchanged, so
/// histories shorter than `k` reuse low table rows.
pub fn context_code(prefix: &[usize], k: usize) -> usize {
    let n = prefix.len().min(k);
    let mut code = 0;
    for &s in &prefix[prefix.len() - n..] {
        code = code * NUM_BASES + s;
    }
    code
}

pub struct RnaHead {
    pub k: usize,
    pub hidden: usize,
    /// [4^k, 5, H]
    pub w: ParamId,
    /// [4^k, 5]
    pub b: ParamId,
    /// [k, 5], row j biases emissions made with history length j.
    pub start_bias: ParamId,
}

/// Tape bindings of the head parameters, shared across the reads of a batch.
pub struct RnaNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub start_bias: NodeId,
}

impl RnaHead {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || hidden == 0 {
            return Err(Error::invalid("rna_head", "context length and hidden width must be positive"));
        }
        let contexts = NUM_BASES.pow(k as u32);
        let std = (hidden as f64).sqrt().recip();
        let w_data: Vec<T> = (0..contexts * NUM_SYMBOLS * hidden)
            .map(|_| sc::<T>(normal(rng) * std))
            .collect();
        let w = store.insert(
            format!("{name}.w"),
            Tensor::new(vec![contexts, NUM_SYMBOLS, hidden], w_data)?,
            true,
        );
        let b = store.insert(
            format!("{name}.b"),
            Tensor::zeros(vec![contexts, NUM_SYMBOLS]),
            true,
        );
        let start_bias = store.insert(
            format!("{name}.start"),
            Tensor::zeros(vec![k, NUM_SYMBOLS]),
            true,
        );
        Ok(RnaHead { k, hidden, w, b, start_bias })
    }

    pub fn bind<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> RnaNodes {
        RnaNodes {
            w: cx.param(self.w),
            b: cx.param(self.b),
            start_bias: cx.param(self.start_bias),
        }
    }

    /// Negative log probability of `target` given hidden rows `h`, summing
    /// over all stay/emit alignments.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        nodes: &RnaNodes,
        h: NodeId,
        target: &[usize],
    ) -> Result<NodeId> {
        rna_loss(tape, h, nodes, target, self.k, self.hidden)
    }

    pub fn emissions<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
        h: &'a Tensor<T>,
    ) -> Result<RnaEmissions<'a, T>> {
        let t = hidden_rows(h, self.hidden)?;
        Ok(RnaEmissions {
            k: self.k,
            hidden: self.hidden,
            w: &store.get(self.w).value,
            b: &store.get(self.b).value,
            sb: &store.get(self.start_bias).value,
            h,
            t,
        })
    }

    /// Prefix beam search of the given width over total sequence probability.
    /// Ties break lexicographically; per-step log probabilities are floored
    /// at -30 to keep scores finite.
    pub fn beam_decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        width: usize,
    ) -> Result<Vec<usize>> {
        let em = self.emissions(store, h)?;
        let width = width.max(1);
        let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        for i in 0..em.t {
            let mut next: std::collections::HashMap<Vec<usize>, f64> =
                std::collections::HashMap::new();
            for (prefix, mass) in &beam {
                let lq = em.log_q(i, prefix);
                let floor = |v: f64| v.max(-30.0);
                let stay = next.entry(prefix.clone()).or_insert(f64::NEG_INFINITY);
                *stay = lse2(*stay, mass + floor(lq[EPS]));
                for base in 0..NUM_BASES {
                    let mut ext = prefix.clone();
                    ext.push(base);
                    let slot = next.entry(ext).or_insert(f64::NEG_INFINITY);
                    *slot = lse2(*slot, mass + floor(lq[base]));
                }
            }
            let mut merged: Vec<(Vec<usize>, f64)> = next.into_iter().collect();
            merged.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            merged.truncate(width);
            beam = merged;
        }
        Ok(beam.into_iter().next().map(|(p, _)| p).unwrap_or_default())
    }

    /// Best-path forced alignment of `target` to the hidden rows.
    pub fn viterbi<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        target: &[usize],
    ) -> Result<Alignment> {
        validate_target("rna_viterbi", target)?;
        let em = self.emissions(store, h)?;
        let (t, l) = (em.t, target.len());
        if t < l {
            return Err(Error::Unalignable { target_len: l, steps: t });
        }
        let lq = state_log_q(&em, target);
        let cols = l + 1;
        let ninf = f64::NEG_INFINITY;
        let mut delta = vec![ninf; (t + 1) * cols];
        let mut from_emit = vec![false; (t + 1) * cols];
        delta[0] = 0.0;
        for i in 1..=t {
            for j in 0..=l.min(i) {
                let stay = delta[(i - 1) * cols + j] + lq[(i - 1) * cols + j][EPS];
                let emit = if j > 0 {
                    delta[(i - 1) * cols + j - 1] + lq[(i - 1) * cols + j - 1][target[j - 1]]
                } else {
                    ninf
                };
                if emit > stay {
                    delta[i * cols + j] = emit;
                    from_emit[i * cols + j] = true;
                } else {
                    delta[i * cols + j] = stay;
                }
            }
        }
        let mut steps = vec![0usize; l];
        let mut probs = vec![0.0f64; l];
        let (mut i, mut j) = (t, l);
        while i > 0 {
            if from_emit[i * cols + j] {
                steps[j - 1] = i - 1;
                probs[j - 1] = lq[(i - 1) * cols + j - 1][target[j - 1]].exp();
                j -= 1;
            }
            i -= 1;
        }
        Ok(Alignment { emit_steps: steps, emit_probs: probs })
    }
}

/// Per-context emission evaluator over a fixed run of hidden rows.
pub struct RnaEmissions<'a, T: Scalar> {
    k: usize,
    hidden: usize,
    w: &'a Tensor<T>,
    b: &'a Tensor<T>,
    sb: &'a Tensor<T>,
    h: &'a Tensor<T>,
    pub t: usize,
}

impl<T: Scalar> RnaEmissions<'_, T> {
    pub fn log_q(&self, i: usize, prefix: &[usize]) -> [f64; 5] {
        let ctx = context_code(prefix, self.k);
        let bias_row = if prefix.len() < self.k {
            Some(prefix.len())
        } else {
            None
        };
        let mut logits = [0.0f64; 5];
        let hrow = &self.h.data()[i * self.hidden..(i + 1) * self.hidden];
        for (c, slot) in logits.iter_mut().enumerate() {
            let wrow = &self.w.data()
                [(ctx * NUM_SYMBOLS + c) * self.hidden..(ctx * NUM_SYMBOLS + c + 1) * self.hidden];
            let mut acc = T::zero();
            for (wv, hv) in wrow.iter().zip(hrow) {
                acc += *wv * *hv;
            }
            acc += self.b.data()[ctx * NUM_SYMBOLS + c];
            if let Some(r) = bias_row {
                acc += self.sb.data()[r * NUM_SYMBOLS + c];
            }
            *slot = acc.to_f64().unwrap();
        }
        log_softmax5(&logits)
    }
}

fn hidden_rows<T: Scalar>(h: &Tensor<T>, hidden: usize) -> Result<usize> {
    let shape = h.shape();
    if shape.is_empty() || shape[shape.len() - 1] != hidden {
        return Err(Error::shape(
            "rna_head",
            format!("[..., {hidden}]"),
            format!("{shape:?}"),
        ));
    }
    Ok(h.numel() / hidden)
}

/// Log emission rows for every (step, alignment state): state j conditions on
/// the first j target symbols.
fn state_log_q<T: Scalar>(em: &RnaEmissions<'_, T>, target: &[usize]) -> Vec<[f64; 5]> {
    let l = target.len();
    let cols = l + 1;
    let mut lq = vec![[0.0f64; 5]; em.t * cols];
    lq.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = em.log_q(i, &target[..j]);
        }
    });
    lq
}

/// Loss op on the tape: inputs are the hidden rows and the three head
/// parameter tensors; backward distributes softmax-minus-posterior terms
/// through the per-context affine maps.
pub fn rna_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h: NodeId,
    nodes: &RnaNodes,
    target: &[usize],
    k: usize,
    hidden: usize,
) -> Result<NodeId> {
    validate_target("rna_loss", target)?;
    let hv = tape.value_rc(h);
    let wv = tape.value_rc(nodes.w);
    let bv = tape.value_rc(nodes.b);
    let sv = tape.value_rc(nodes.start_bias);
    if !hv.all_finite() {
        return Err(Error::NonFinite { op: "rna_loss" });
    }
    let t = hidden_rows(&hv, hidden)?;
    let l = target.len();
    if t < l {
        return Err(Error::Unalignable { target_len: l, steps: t });
    }
    let target = target.to_vec();
    let cols = l + 1;

    let em = RnaEmissions {
        k,
        hidden,
        w: &wv,
        b: &bv,
        sb: &sv,
        h: &hv,
        t,
    };
    let lq = state_log_q(&em, &target);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; (t + 1) * cols];
    alpha[0] = 0.0;
    for i in 1..=t {
        for j in 0..=l.min(i) {
            let stay = alpha[(i - 1) * cols + j] + lq[(i - 1) * cols + j][EPS];
            let emit = if j > 0 {
                alpha[(i - 1) * cols + j - 1] + lq[(i - 1) * cols + j - 1][target[j - 1]]
            } else {
                ninf
            };
            alpha[i * cols + j] = lse2(stay, emit);
        }
    }
    let log_p = alpha[t * cols + l];

    let mut beta = vec![ninf; (t + 1) * cols];
    beta[t * cols + l] = 0.0;
    for i in (0..t).rev() {
        for j in 0..=l {
            let stay = lq[i * cols + j][EPS] + beta[(i + 1) * cols + j];
            let emit = if j < l {
                lq[i * cols + j][target[j]] + beta[(i + 1) * cols + j + 1]
            } else {
                ninf
            };
            beta[i * cols + j] = lse2(stay, emit);
        }
    }

    let loss = Tensor::new(vec![1], vec![sc::<T>(-log_p)])?;
    let h_shape = hv.shape().to_vec();
    let ctxs: Vec<usize> = (0..=l).map(|j| context_code(&target[..j], k)).collect();
    let node = tape.record(
        "rna_loss",
        vec![h, nodes.w, nodes.b, nodes.start_bias],
        loss,
        Box::new(move |g| {
            let gval = g.data()[0].to_f64().unwrap();
            let mut dh = Tensor::zeros(h_shape.clone());
            let mut dw = Tensor::zeros(wv.shape().to_vec());
            let mut db = Tensor::zeros(bv.shape().to_vec());
            let mut dsb = Tensor::zeros(sv.shape().to_vec());
            if t == 0 {
                return vec![Some(dh), Some(dw), Some(db), Some(dsb)];
            }
            // fixed row chunking with an in-order reduce keeps the result
            // independent of the thread count
            let chunk_rows = t.div_ceil(8);
            let (hd, wd) = (hv.data(), wv.data());
            let (wn, bn, sn) = (wv.numel(), bv.numel(), sv.numel());
            let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = dh
                .data_mut()
                .par_chunks_mut(chunk_rows * hidden)
                .enumerate()
                .map(|(ci, dhc)| {
                    let mut dwc = vec![T::zero(); wn];
                    let mut dbc = vec![T::zero(); bn];
                    let mut dsc = vec![T::zero(); sn];
                    let i0 = ci * chunk_rows;
                    for li in 0..dhc.len() / hidden {
                        let i = i0 + li;
                        for j in 0..=l {
                            let a = alpha[i * cols + j];
                            if a == ninf {
                                continue;
                            }
                            let row = &lq[i * cols + j];
                            let stay = (a + row[EPS] + beta[(i + 1) * cols + j] - log_p).exp();
                            let emit = if j < l {
                                (a + row[target[j]] + beta[(i + 1) * cols + j + 1] - log_p).exp()
                            } else {
                                0.0
                            };
                            let occ = stay + emit;
                            if occ == 0.0 {
                                continue;
                            }
                            // d(-log P)/d logits = occupancy * q - expected one-hots
                            let mut dlog = [0.0f64; 5];
                            for c in 0..NUM_SYMBOLS {
                                dlog[c] = occ * row[c].exp();
                            }
                            dlog[EPS] -= stay;
                            if j < l {
                                dlog[target[j]] -= emit;
                            }
                            let ctx = ctxs[j];
                            let hrow = &hd[i * hidden..(i + 1) * hidden];
                            for c in 0..NUM_SYMBOLS {
                                let d = sc::<T>(dlog[c] * gval);
                                if d == T::zero() {
                                    continue;
                                }
                                let wbase = (ctx * NUM_SYMBOLS + c) * hidden;
                                let dwrow = &mut dwc[wbase..wbase + hidden];
                                let wrow = &wd[wbase..wbase + hidden];
                                for u in 0..hidden {
                                    dhc[li * hidden + u] += wrow[u] * d;
                                    dwrow[u] += hrow[u] * d;
                                }
                                dbc[ctx * NUM_SYMBOLS + c] += d;
                                if j < k {
                                    dsc[j * NUM_SYMBOLS + c] += d;
                                }
                            }
                        }
                    }
                    (dwc, dbc, dsc)
                })
                .collect();
            let dwd = dw.data_mut();
            let dbd = db.data_mut();
            let dsd = dsb.data_mut();
            for (dwc, dbc, dsc) in partials {
                for (a, v) in dwd.iter_mut().zip(dwc) {
                    *a += v;
                }
                for (a, v) in dbd.iter_mut().zip(dbc) {
                    *a += v;
                }
                for (a, v) in dsd.iter_mut().zip(dsc) {
                    *a += v;
                }
            }
            vec![Some(dh), Some(dw), Some(db), Some(dsb)]
        }),
    );
    Ok(node)
}
