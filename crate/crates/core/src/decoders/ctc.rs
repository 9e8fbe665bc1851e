//! Alignment-marginalizing loss over per-step emission logits, with greedy
//! and prefix beam decoding and Viterbi forced alignment.
//!
//! The lattice state is the number of target symbols emitted so far. Under
//! [`Reduction::Drop`] each step either emits eps (stay) or the next target
//! symbol (advance). Under [`Reduction::CollapseDrop`] the usual extended
//! lattice with interleaved eps states handles repeat collapsing.

use std::collections::HashMap;

use super::{
    emission_rows, log_softmax5, lse2, validate_target, Alignment, Reduction, EPS,
    NUM_BASES, NUM_SYMBOLS,
};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

fn min_steps(target: &[usize], reduction: Reduction) -> usize {
    match reduction {
        Reduction::Drop => target.len(),
        Reduction::CollapseDrop => {
            let dups = target.windows(2).filter(|w| w[0] == w[1]).count();
            target.len() + dups
        }
    }
}

/// Negative log probability of `target` under the emission distribution,
/// summed over all alignments. Backward produces softmax minus posterior
/// expected emission counts for every logit.
pub fn ctc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    target: &[usize],
    reduction: Reduction,
) -> Result<NodeId> {
    validate_target("ctc_loss", target)?;
    let lv = tape.value_rc(logits);
    if !lv.all_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }
    let (t, raw) = emission_rows(&*lv)?;
    if t < min_steps(target, reduction) {
        return Err(Error::Unalignable {
            target_len: target.len(),
            steps: t,
        });
    }
    let lq: Vec<[f64; 5]> = raw.iter().map(log_softmax5).collect();
    let target = target.to_vec();
    let (log_p, grad_rows) = match reduction {
        Reduction::Drop => drop_loss_grad(&lq, &target),
        Reduction::CollapseDrop => collapse_loss_grad(&lq, &target),
    };
    let loss = Tensor::new(vec![1], vec![sc::<T>(-log_p)])?;
    let shape = lv.shape().to_vec();
    let node = tape.record(
        "ctc_loss",
        vec![logits],
        loss,
        Box::new(move |g| {
            let gval = g.data()[0].to_f64().unwrap();
            let mut dl = Tensor::zeros(shape.clone());
            for (i, row) in grad_rows.iter().enumerate() {
                for k in 0..NUM_SYMBOLS {
                    dl.data_mut()[i * NUM_SYMBOLS + k] = sc::<T>(gval * row[k]);
                }
            }
            vec![Some(dl)]
        }),
    );
    Ok(node)
}

/// Forward/backward on the stay-or-advance lattice. Returns (log P, d(-log P)/d logits).
fn drop_loss_grad(lq: &[[f64; 5]], target: &[usize]) -> (f64, Vec<[f64; 5]>) {
    let t = lq.len();
    let l = target.len();
    let ninf = f64::NEG_INFINITY;
    let cols = l + 1;
    // alpha[i][j]: prob of consuming first i steps and emitting j symbols.
    let mut alpha = vec![ninf; (t + 1) * cols];
    alpha[0] = 0.0;
    for i in 1..=t {
        let row = &lq[i - 1];
        for j in 0..=l.min(i) {
            let stay = alpha[(i - 1) * cols + j] + row[EPS];
            let emit = if j > 0 {
                alpha[(i - 1) * cols + j - 1] + row[target[j - 1]]
            } else {
                ninf
            };
            alpha[i * cols + j] = lse2(stay, emit);
        }
    }
    let log_p = alpha[t * cols + l];

    // beta[i][j]: prob of completing from state j using steps i+1..t.
    let mut beta = vec![ninf; (t + 1) * cols];
    beta[t * cols + l] = 0.0;
    for i in (0..t).rev() {
        let row = &lq[i];
        for j in 0..=l {
            let stay = row[EPS] + beta[(i + 1) * cols + j];
            let emit = if j < l {
                row[target[j]] + beta[(i + 1) * cols + j + 1]
            } else {
                ninf
            };
            beta[i * cols + j] = lse2(stay, emit);
        }
    }

    let mut grad = vec![[0.0; 5]; t];
    for i in 0..t {
        let row = &lq[i];
        let mut gamma = [0.0; 5];
        for j in 0..=l {
            let a = alpha[i * cols + j];
            if a == ninf {
                continue;
            }
            let stay = a + row[EPS] + beta[(i + 1) * cols + j] - log_p;
            gamma[EPS] += stay.exp();
            if j < l {
                let emit = a + row[target[j]] + beta[(i + 1) * cols + j + 1] - log_p;
                gamma[target[j]] += emit.exp();
            }
        }
        for k in 0..NUM_SYMBOLS {
            grad[i][k] = row[k].exp() - gamma[k];
        }
    }
    (log_p, grad)
}

/// Extended-lattice forward/backward: eps states interleave target symbols so
/// consecutive repeats must be separated by an explicit eps.
fn collapse_loss_grad(lq: &[[f64; 5]], target: &[usize]) -> (f64, Vec<[f64; 5]>) {
    let t = lq.len();
    let l = target.len();
    let ninf = f64::NEG_INFINITY;
    let states = 2 * l + 1;
    let sym = |s: usize| -> usize {
        if s % 2 == 0 {
            EPS
        } else {
            target[(s - 1) / 2]
        }
    };
    let skip_ok = |s: usize| -> bool {
        // into state s from s-2: s must be a symbol state differing from s-2
        s % 2 == 1 && s >= 2 && (s == 1 || sym(s) != sym(s - 2))
    };
    let mut alpha = vec![ninf; t * states];
    alpha[0] = lq[0][EPS];
    if l > 0 {
        alpha[1] = lq[0][target[0]];
    }
    for i in 1..t {
        let row = &lq[i];
        for s in 0..states {
            let mut acc = alpha[(i - 1) * states + s];
            if s >= 1 {
                acc = lse2(acc, alpha[(i - 1) * states + s - 1]);
            }
            if s >= 2 && skip_ok(s) {
                acc = lse2(acc, alpha[(i - 1) * states + s - 2]);
            }
            alpha[i * states + s] = acc + row[sym(s)];
        }
    }
    let log_p = if l > 0 {
        lse2(
            alpha[(t - 1) * states + 2 * l],
            alpha[(t - 1) * states + 2 * l - 1],
        )
    } else {
        alpha[(t - 1) * states]
    };

    let mut beta = vec![ninf; t * states];
    beta[(t - 1) * states + 2 * l] = 0.0;
    if l > 0 {
        beta[(t - 1) * states + 2 * l - 1] = 0.0;
    }
    for i in (0..t - 1).rev() {
        let next = &lq[i + 1];
        for s in 0..states {
            let mut acc = next[sym(s)] + beta[(i + 1) * states + s];
            if s + 1 < states {
                acc = lse2(acc, next[sym(s + 1)] + beta[(i + 1) * states + s + 1]);
            }
            if s + 2 < states && skip_ok(s + 2) {
                acc = lse2(acc, next[sym(s + 2)] + beta[(i + 1) * states + s + 2]);
            }
            beta[i * states + s] = acc;
        }
    }

    let mut grad = vec![[0.0; 5]; t];
    for i in 0..t {
        let row = &lq[i];
        let mut gamma = [0.0; 5];
        for s in 0..states {
            let occ = alpha[i * states + s] + beta[i * states + s] - log_p;
            if occ != ninf {
                gamma[sym(s)] += occ.exp();
            }
        }
        for k in 0..NUM_SYMBOLS {
            grad[i][k] = row[k].exp() - gamma[k];
        }
    }
    (log_p, grad)
}

/// Per-step argmax reduced by `reduction`.
pub fn greedy_decode<T: Scalar>(logits: &Tensor<T>, reduction: Reduction) -> Result<Vec<usize>> {
    let (_, rows) = emission_rows(logits)?;
    let mut out = Vec::new();
    let mut prev = EPS;
    for row in &rows {
        let mut best = 0;
        for k in 1..NUM_SYMBOLS {
            if row[k] > row[best] {
                best = k;
            }
        }
        match reduction {
            Reduction::Drop => {
                if best != EPS {
                    out.push(best);
                }
            }
            Reduction::CollapseDrop => {
                if best != EPS && best != prev {
                    out.push(best);
                }
                prev = best;
            }
        }
    }
    Ok(out)
}

fn prune(beam: &mut Vec<(Vec<usize>, f64)>, width: usize) {
    beam.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    beam.truncate(width);
}

/// Prefix beam search over total sequence probability.
pub fn beam_decode<T: Scalar>(
    logits: &Tensor<T>,
    width: usize,
    reduction: Reduction,
) -> Result<Vec<usize>> {
    match reduction {
        Reduction::Drop => beam_decode_drop(logits, width),
        Reduction::CollapseDrop => beam_decode_collapse(logits, width),
    }
}

fn beam_decode_drop<T: Scalar>(logits: &Tensor<T>, width: usize) -> Result<Vec<usize>> {
    let (_, raw) = emission_rows(logits)?;
    let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for row in raw.iter().map(log_softmax5) {
        let mut next: HashMap<Vec<usize>, f64> = HashMap::new();
        for (prefix, mass) in &beam {
            let stay = next.entry(prefix.clone()).or_insert(f64::NEG_INFINITY);
            *stay = lse2(*stay, mass + row[EPS]);
            for b in 0..NUM_BASES {
                let mut ext = prefix.clone();
                ext.push(b);
                let slot = next.entry(ext).or_insert(f64::NEG_INFINITY);
                *slot = lse2(*slot, mass + row[b]);
            }
        }
        let mut merged: Vec<(Vec<usize>, f64)> = next.into_iter().collect();
        prune(&mut merged, width);
        beam = merged;
    }
    Ok(beam.into_iter().next().map(|(p, _)| p).unwrap_or_default())
}

fn beam_decode_collapse<T: Scalar>(logits: &Tensor<T>, width: usize) -> Result<Vec<usize>> {
    let (_, raw) = emission_rows(logits)?;
    let ninf = f64::NEG_INFINITY;
    // Mass split by whether the last emission was eps, so a repeat extension
    // can tell runs apart.
    let mut beam: Vec<(Vec<usize>, (f64, f64))> = vec![(Vec::new(), (0.0, ninf))];
    for row in raw.iter().map(log_softmax5) {
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, (pb, pnb)) in &beam {
            let total = lse2(*pb, *pnb);
            {
                let slot = next.entry(prefix.clone()).or_insert((ninf, ninf));
                slot.0 = lse2(slot.0, total + row[EPS]);
                if let Some(&last) = prefix.last() {
                    slot.1 = lse2(slot.1, pnb + row[last]);
                }
            }
            for b in 0..NUM_BASES {
                let mass = if prefix.last() == Some(&b) {
                    pb + row[b]
                } else {
                    total + row[b]
                };
                let mut ext = prefix.clone();
                ext.push(b);
                let slot = next.entry(ext).or_insert((ninf, ninf));
                slot.1 = lse2(slot.1, mass);
            }
        }
        let mut merged: Vec<(Vec<usize>, f64)> = next
            .iter()
            .map(|(p, &(pb, pnb))| (p.clone(), lse2(pb, pnb)))
            .collect();
        prune(&mut merged, width);
        beam = merged
            .into_iter()
            .map(|(p, _)| {
                let m = next[&p];
                (p, m)
            })
            .collect();
    }
    Ok(beam
        .into_iter()
        .max_by(|a, b| {
            let ta = lse2(a.1 .0, a.1 .1);
            let tb = lse2(b.1 .0, b.1 .1);
            ta.partial_cmp(&tb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.0.cmp(&a.0))
        })
        .map(|(p, _)| p)
        .unwrap_or_default())
}

/// Best-path forced alignment of `target`, recording the emitting step and
/// emission probability of every target base.
pub fn viterbi_align<T: Scalar>(
    logits: &Tensor<T>,
    target: &[usize],
    reduction: Reduction,
) -> Result<Alignment> {
    validate_target("viterbi_align", target)?;
    let (t, raw) = emission_rows(logits)?;
    if t < min_steps(target, reduction) {
        return Err(Error::Unalignable {
            target_len: target.len(),
            steps: t,
        });
    }
    let lq: Vec<[f64; 5]> = raw.iter().map(log_softmax5).collect();
    match reduction {
        Reduction::Drop => viterbi_drop(&lq, target),
        Reduction::CollapseDrop => viterbi_collapse(&lq, target),
    }
}

fn viterbi_drop(lq: &[[f64; 5]], target: &[usize]) -> Result<Alignment> {
    let t = lq.len();
    let l = target.len();
    let ninf = f64::NEG_INFINITY;
    let cols = l + 1;
    let mut delta = vec![ninf; (t + 1) * cols];
    let mut from_emit = vec![false; (t + 1) * cols];
    delta[0] = 0.0;
    for i in 1..=t {
        let row = &lq[i - 1];
        for j in 0..=l.min(i) {
            let stay = delta[(i - 1) * cols + j] + row[EPS];
            let emit = if j > 0 {
                delta[(i - 1) * cols + j - 1] + row[target[j - 1]]
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
            probs[j - 1] = lq[i - 1][target[j - 1]].exp();
            j -= 1;
        }
        i -= 1;
    }
    Ok(Alignment {
        emit_steps: steps,
        emit_probs: probs,
    })
}

fn viterbi_collapse(lq: &[[f64; 5]], target: &[usize]) -> Result<Alignment> {
    let t = lq.len();
    let l = target.len();
    let ninf = f64::NEG_INFINITY;
    let states = 2 * l + 1;
    let sym = |s: usize| -> usize {
        if s % 2 == 0 {
            EPS
        } else {
            target[(s - 1) / 2]
        }
    };
    let skip_ok = |s: usize| s % 2 == 1 && s >= 2 && sym(s) != sym(s - 2);
    let mut delta = vec![ninf; t * states];
    let mut back = vec![0usize; t * states];
    delta[0] = lq[0][EPS];
    if l > 0 {
        delta[1] = lq[0][target[0]];
        back[1] = 1;
    }
    for i in 1..t {
        let row = &lq[i];
        for s in 0..states {
            let mut best = delta[(i - 1) * states + s];
            let mut arg = s;
            if s >= 1 && delta[(i - 1) * states + s - 1] > best {
                best = delta[(i - 1) * states + s - 1];
                arg = s - 1;
            }
            if s >= 2 && skip_ok(s) && delta[(i - 1) * states + s - 2] > best {
                best = delta[(i - 1) * states + s - 2];
                arg = s - 2;
            }
            delta[i * states + s] = best + row[sym(s)];
            back[i * states + s] = arg;
        }
    }
    let mut s = if l == 0 {
        0
    } else if delta[(t - 1) * states + 2 * l] >= delta[(t - 1) * states + 2 * l - 1] {
        2 * l
    } else {
        2 * l - 1
    };
    let mut steps = vec![0usize; l];
    let mut probs = vec![0.0f64; l];
    for i in (0..t).rev() {
        if s % 2 == 1 {
            let j = (s - 1) / 2;
            // entering an odd state emits its base; record the earliest step
            // of the run as the emission step
            steps[j] = i;
            probs[j] = lq[i][target[j]].exp();
        }
        if i > 0 {
            s = back[i * states + s];
        }
    }
    Ok(Alignment {
        emit_steps: steps,
        emit_probs: probs,
    })
}
