//! Enumeration oracles for the sequence losses: for short runs, sum the
//! probability of every possible emission string directly and compare with
//! the dynamic-programming losses and the beam decoders.

use poolcall_core::decoders::ctc::{beam_decode, ctc_loss};
use poolcall_core::decoders::rna::RnaHead;
use poolcall_core::decoders::Reduction;
use poolcall_core::rng::uniform;
use poolcall_core::tape::{Ctx, Mode, Tape};
use poolcall_core::{ParamStore, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS_SYM: usize = 4;

fn softmax5(row: &[f64]) -> [f64; 5] {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    [
        exps[0] / z,
        exps[1] / z,
        exps[2] / z,
        exps[3] / z,
        exps[4] / z,
    ]
}

fn reduce(emissions: &[usize], reduction: Reduction) -> Vec<usize> {
    match reduction {
        Reduction::Drop => emissions.iter().cloned().filter(|&s| s != EPS_SYM).collect(),
        Reduction::CollapseDrop => {
            let mut out = Vec::new();
            let mut prev = usize::MAX;
            for &s in emissions {
                if s != prev && s != EPS_SYM {
                    out.push(s);
                }
                prev = s;
            }
            out
        }
    }
}

/// Every emission string of length t over the 5-symbol alphabet.
fn all_strings(t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..5).map(move |c| {
                    let mut s2 = s.clone();
                    s2.push(c);
                    s2
                })
            })
            .collect();
    }
    out
}

fn enumerated_prob(q: &[[f64; 5]], target: &[usize], reduction: Reduction) -> f64 {
    all_strings(q.len())
        .into_iter()
        .filter(|pi| reduce(pi, reduction) == target)
        .map(|pi| pi.iter().enumerate().map(|(i, &s)| q[i][s]).product::<f64>())
        .sum()
}

#[test]
fn ctc_loss_matches_enumeration_both_reductions() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 4 + (seed % 2) as usize;
        let logits: Vec<f64> = (0..t * 5).map(|_| uniform(&mut rng, -1.5, 1.5)).collect();
        let q: Vec<[f64; 5]> = (0..t).map(|i| softmax5(&logits[i * 5..(i + 1) * 5])).collect();
        let l = 1 + (seed % 3) as usize;
        let target: Vec<usize> = (0..l).map(|_| uniform(&mut rng, 0.0, 4.0) as usize).collect();
        for reduction in [Reduction::Drop, Reduction::CollapseDrop] {
            let want = enumerated_prob(&q, &target, reduction);
            let mut tape = Tape::<f64>::new();
            let node = tape.leaf(Tensor::new(vec![t, 5], logits.clone()).unwrap());
            let loss = ctc_loss(&mut tape, node, &target, reduction).unwrap();
            let got = (-tape.value(loss).data()[0]).exp();
            assert!(
                (got - want).abs() < 1e-5 * want.max(1e-12),
                "seed {seed} {reduction:?}: enumerated {want}, dp {got}"
            );
        }
    }
}

#[test]
fn ctc_total_probability_is_one_under_drop() {
    // Summing P(z) over every distinct reduced sequence must give 1.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let t = 4;
    let logits: Vec<f64> = (0..t * 5).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let mut total = 0.0;
    let mut seen = std::collections::HashSet::new();
    for pi in all_strings(t) {
        let z = reduce(&pi, Reduction::Drop);
        if !seen.insert(z.clone()) {
            continue;
        }
        let mut tape = Tape::<f64>::new();
        let node = tape.leaf(Tensor::new(vec![t, 5], logits.clone()).unwrap());
        let loss = ctc_loss(&mut tape, node, &z, Reduction::Drop).unwrap();
        total += (-tape.value(loss).data()[0]).exp();
    }
    assert!((total - 1.0).abs() < 1e-10, "{total}");
}

#[test]
fn wide_beam_finds_exhaustive_argmax() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let t = 4;
        let logits: Vec<f64> = (0..t * 5).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let q: Vec<[f64; 5]> = (0..t).map(|i| softmax5(&logits[i * 5..(i + 1) * 5])).collect();
        // exhaustive best sequence by total probability, ties lexicographic
        let mut seen = std::collections::HashSet::new();
        let mut best: (Vec<usize>, f64) = (Vec::new(), -1.0);
        for pi in all_strings(t) {
            let z = reduce(&pi, Reduction::Drop);
            if !seen.insert(z.clone()) {
                continue;
            }
            let p = enumerated_prob(&q, &z, Reduction::Drop);
            if p > best.1 || (p == best.1 && z < best.0) {
                best = (z, p);
            }
        }
        let tensor = Tensor::new(vec![t, 5], logits).unwrap();
        let decoded = beam_decode(&tensor, 2000, Reduction::Drop).unwrap();
        assert_eq!(decoded, best.0, "seed {seed}, best prob {}", best.1);
    }
}

fn tiny_head(seed: u64) -> (ParamStore<f64>, RnaHead) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = RnaHead::init(&mut store, "head", 3, 2, &mut rng).unwrap();
    (store, head)
}

/// Emission distribution of the head at step i given an emitted prefix,
/// recomputed straight from the parameter tensors.
fn head_q(
    store: &ParamStore<f64>,
    head: &RnaHead,
    h: &Tensor<f64>,
    i: usize,
    prefix: &[usize],
) -> [f64; 5] {
    let hidden = head.hidden;
    let n = prefix.len().min(head.k);
    let mut ctx = 0usize;
    for &s in &prefix[prefix.len() - n..] {
        ctx = ctx * 4 + s;
    }
    let w = &store.get(head.w).value;
    let b = &store.get(head.b).value;
    let sb = &store.get(head.start_bias).value;
    let mut logits = [0.0f64; 5];
    for (c, slot) in logits.iter_mut().enumerate() {
        let mut acc = 0.0;
        for u in 0..hidden {
            acc += w.data()[(ctx * 5 + c) * hidden + u] * h.data()[i * hidden + u];
        }
        acc += b.data()[ctx * 5 + c];
        if prefix.len() < head.k {
            acc += sb.data()[prefix.len() * 5 + c];
        }
        *slot = acc;
    }
    softmax5(&logits)
}

#[test]
fn rna_loss_matches_enumeration() {
    for seed in 0..20u64 {
        let (store, head) = tiny_head(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let t = 4;
        let h = Tensor::new(
            vec![t, 3],
            (0..t * 3).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
        )
        .unwrap();
        let l = 1 + (seed % 3) as usize;
        let target: Vec<usize> = (0..l).map(|_| uniform(&mut rng, 0.0, 4.0) as usize).collect();

        // oracle: walk every emission string, multiplying the context-aware
        // step distributions, and keep those that reduce to the target
        let mut want = 0.0f64;
        for pi in all_strings(t) {
            let mut prefix: Vec<usize> = Vec::new();
            let mut p = 1.0f64;
            for (i, &s) in pi.iter().enumerate() {
                let q = head_q(&store, &head, &h, i, &prefix);
                p *= q[s];
                if s != EPS_SYM {
                    prefix.push(s);
                }
            }
            if prefix == target {
                want += p;
            }
        }

        let mut cx = Ctx::new(&store, Mode::Train);
        let hn = cx.tape.leaf(h.clone());
        let nodes = head.bind(&mut cx);
        let loss = head.loss(&mut cx.tape, &nodes, hn, &target).unwrap();
        let got = (-cx.tape.value(loss).data()[0]).exp();
        assert!(
            (got - want).abs() < 1e-5 * want.max(1e-12),
            "seed {seed}: enumerated {want}, dp {got}"
        );
    }
}

#[test]
fn rna_viterbi_path_probability_is_attainable() {
    // The product of per-emission probabilities on the Viterbi path must not
    // exceed the total sequence probability, and must be one alignment's mass.
    let (store, head) = tiny_head(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = 6;
    let h = Tensor::new(
        vec![t, 3],
        (0..t * 3).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
    )
    .unwrap();
    let target = [2usize, 0, 1];
    let align = head.viterbi(&store, &h, &target).unwrap();

    // reconstruct that alignment's probability independently
    let mut p = 1.0f64;
    let mut prefix: Vec<usize> = Vec::new();
    let mut next_emit = 0usize;
    for i in 0..t {
        let q = head_q(&store, &head, &h, i, &prefix);
        if next_emit < target.len() && align.emit_steps[next_emit] == i {
            p *= q[target[next_emit]];
            assert!((q[target[next_emit]] - align.emit_probs[next_emit]).abs() < 1e-10);
            prefix.push(target[next_emit]);
            next_emit += 1;
        } else {
            p *= q[EPS_SYM];
        }
    }
    assert_eq!(next_emit, target.len());

    let mut cx = Ctx::new(&store, Mode::Eval);
    let hn = cx.tape.leaf(h.clone());
    let nodes = head.bind(&mut cx);
    let loss = head.loss(&mut cx.tape, &nodes, hn, &target).unwrap();
    let total = (-cx.tape.value(loss).data()[0]).exp();
    assert!(p <= total + 1e-12, "path {p} exceeds total {total}");
    assert!(p > 0.0);
}
