//! The training loop: randomly windowed batches on one tape, AdamW under the
//! warm-restart schedule, JSONL step logs, and a checkpoint at every cycle
//! end. A non-finite loss or gradient aborts the run; the checkpoint from
//! the last completed cycle stays on disk.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use poolcall_core::decoders::{base_index, indices_to_string};
use poolcall_core::{
    apply_pending, checkpoint, ops, Ctx, Gradients, Mode, ParamId, ParamStore, Tape, Tensor,
};
use poolcall_siggen::{read_records, ReadRecord};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basecall::call_read;
use crate::eval::{accuracy, median};
use crate::model::{Model, ModelCfg};
use crate::optim::{AdamW, AdamWCfg};
use crate::schedule::ScheduleSpec;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCfg {
    pub model: ModelCfg,
    pub schedule: ScheduleSpec,
    pub optim: AdamWCfg,
    pub batch_size: usize,
    /// Signals per training window.
    pub window: usize,
    pub seed: u64,
    /// Validation reads decoded at each cycle end.
    pub valid_reads: usize,
    /// Optional checkpoint to resume from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
}

/// Desk-scale defaults for a named preset.
pub fn default_train_cfg(preset: &str, seed: u64) -> Result<TrainCfg> {
    let model = crate::model::preset(preset)?;
    let (schedule, batch_size, window) = if preset == "smoke" {
        (ScheduleSpec { max_lr: 2e-3, warmup: 20, first_cycle: 60, cycles: 2 }, 8, 800)
    } else {
        (ScheduleSpec { max_lr: 1e-3, warmup: 100, first_cycle: 400, cycles: 4 }, 16, 1200)
    };
    Ok(TrainCfg {
        model,
        schedule,
        optim: AdamWCfg::default(),
        batch_size,
        window,
        seed,
        valid_reads: 8,
        init_from: None,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_mean_length_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_accuracy: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub final_valid_accuracy: Option<f64>,
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Indices of the bases whose whole event lies inside `[a, a + w)`.
pub fn window_targets(rec: &ReadRecord, a: usize, w: usize) -> Vec<usize> {
    let seq = rec.sequence.as_bytes();
    let n = rec.event_bounds.len();
    let mut out = Vec::new();
    for j in 0..n {
        let start = rec.event_bounds[j] as usize;
        let end = if j + 1 < n { rec.event_bounds[j + 1] as usize } else { rec.signal.len() };
        if start >= a && end <= a + w {
            out.push(base_index(seq[j]).expect("ACGT sequence"));
        }
    }
    out
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    reads: &[ReadRecord],
    batch: usize,
    window: usize,
) -> (Tensor<f32>, Vec<Vec<usize>>) {
    let mut data = vec![0.0f32; batch * window];
    let mut targets = Vec::with_capacity(batch);
    for b in 0..batch {
        let rec = &reads[rng.random_range(0..reads.len())];
        let a = if rec.signal.len() > window {
            rng.random_range(0..=rec.signal.len() - window)
        } else {
            0
        };
        let take = window.min(rec.signal.len());
        data[b * window..b * window + take].copy_from_slice(&rec.signal[a..a + take]);
        targets.push(window_targets(rec, a, window));
    }
    (Tensor::new(vec![batch, window, 1], data).unwrap(), targets)
}

type PassOutput = (Tape<f32>, Gradients<f32>, Vec<(ParamId, Tensor<f32>)>, f64, Option<f64>);

/// One forward/backward pass over a batch. Returns the tape, gradients,
/// pending non-trainable updates, the mean loss, and for dynamic-pooling
/// models the batch mean length factor.
fn batch_pass(
    model: &Model,
    store: &ParamStore<f32>,
    x: Tensor<f32>,
    targets: &[Vec<usize>],
) -> Result<PassOutput> {
    let batch = targets.len();
    let t_in = x.shape()[1];
    let mut cx = Ctx::new(store, Mode::Train);
    let xn = cx.tape.leaf(x);
    let (h, traces) = model.forward(&mut cx, xn)?;
    let nodes = model.bind_head(&mut cx);

    let mlf = traces.as_ref().map(|ts| {
        ts.iter().map(|t| t.mean_length_factor).sum::<f64>() / ts.len().max(1) as f64
    });
    let mut total = None;
    for (b, target) in targets.iter().enumerate() {
        let rows_len = model.out_rows(t_in, traces.as_ref().map(|ts| &ts[b]));
        let rows = ops::slice_read(&mut cx.tape, h, b)?;
        let rows = ops::crop_time(&mut cx.tape, rows, rows_len.max(1))?;
        let loss_b = model.read_loss(&mut cx, &nodes, rows, target)?;
        total = Some(match total {
            None => loss_b,
            Some(acc) => ops::add(&mut cx.tape, acc, loss_b)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let mean = ops::scale(&mut cx.tape, total, 1.0 / batch as f32);
    let loss = cx.tape.value(mean).data()[0] as f64;
    let grads = cx.tape.backward(mean)?;
    let pending = cx.take_pending();
    let tape = std::mem::take(&mut cx.tape);
    Ok((tape, grads, pending, loss, mlf))
}

/// Median greedy accuracy over up to `cap` validation reads.
pub fn validation_accuracy(
    model: &Model,
    store: &ParamStore<f32>,
    reads: &[ReadRecord],
    cap: usize,
) -> Result<f64> {
    let mut accs = Vec::new();
    for rec in reads.iter().take(cap) {
        let call = call_read(model, store, &rec.signal, 1)?;
        let called = indices_to_string(&call.seq);
        accs.push(accuracy(called.as_bytes(), rec.sequence.as_bytes()));
    }
    Ok(median(&accs))
}

/// Mean per-read loss over held-out reads, eval mode, centered windows.
pub fn mean_eval_loss(
    model: &Model,
    store: &ParamStore<f32>,
    reads: &[ReadRecord],
    window: usize,
    cap: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for rec in reads.iter().take(cap) {
        let w = window.min(rec.signal.len());
        let a = (rec.signal.len() - w) / 2;
        let x = Tensor::new(vec![1, w, 1], rec.signal[a..a + w].to_vec())?;
        let target = window_targets(rec, a, w);
        let mut cx = Ctx::new(store, Mode::Eval);
        let xn = cx.tape.leaf(x);
        let (h, traces) = model.forward(&mut cx, xn)?;
        let nodes = model.bind_head(&mut cx);
        let rows_len = model.out_rows(w, traces.as_ref().map(|ts| &ts[0]));
        let rows = ops::crop_time(&mut cx.tape, h, rows_len.max(1))?;
        let loss = model.read_loss(&mut cx, &nodes, rows, &target)?;
        total += cx.tape.value(loss).data()[0] as f64;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

fn is_divergence(err: &Error) -> bool {
    matches!(err, Error::Core(poolcall_core::Error::NonFinite { .. }))
}

/// Train on the dataset in `data_dir`, writing under `out_dir`:
/// `model.json`, `model.dpk` (updated at every cycle end),
/// `ckpt_cycle{c}.dpk`, and `train.log` (one JSON record per step).
pub fn train(data_dir: &Path, out_dir: &Path, cfg: &TrainCfg) -> Result<TrainSummary> {
    let train_path = data_dir.join("train.bin");
    if !train_path.exists() {
        return Err(Error::MissingFile(train_path));
    }
    let train_reads = read_records(&train_path)?;
    let valid_reads = read_records(&data_dir.join("valid.bin"))?;
    if train_reads.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut store = ParamStore::<f32>::new();
    let model = Model::init(&mut store, &cfg.model, cfg.seed)?;
    if let Some(ckpt) = &cfg.init_from {
        checkpoint::load(&mut store, ckpt)?;
    }
    let model_path = out_dir.join("model.dpk");
    std::fs::write(
        out_dir.join("model.json"),
        serde_json::to_string_pretty(&cfg.model).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    checkpoint::save(&store, &model_path)?;

    let log_path = out_dir.join("train.log");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut opt = AdamW::new(cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut checkpoints = Vec::new();
    let mut final_loss = f64::NAN;
    let mut final_valid = None;
    let mut cycle = 0u32;

    for step in 0..cfg.schedule.total_steps() {
        let t0 = Instant::now();
        let lr = cfg.schedule.lr_at(step);
        let (x, targets) = sample_batch(&mut rng, &train_reads, cfg.batch_size, cfg.window);
        let (tape, grads, pending, loss, mlf) = match batch_pass(&model, &store, x, &targets) {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        store.zero_grads();
        tape.accumulate_param_grads(&grads, &mut store);
        apply_pending(&mut store, pending);
        opt.step(&mut store, lr)?;
        final_loss = loss;

        let mut record = LogRecord {
            step,
            lr,
            loss,
            batch_mean_length_factor: mlf,
            valid_accuracy: None,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if cfg.schedule.is_cycle_end(step) {
            let acc = validation_accuracy(&model, &store, &valid_reads, cfg.valid_reads)?;
            record.valid_accuracy = Some(acc);
            final_valid = Some(acc);
            let ckpt = out_dir.join(format!("ckpt_cycle{cycle}.dpk"));
            checkpoint::save(&store, &ckpt)?;
            checkpoint::save(&store, &model_path)?;
            checkpoints.push(ckpt);
            cycle += 1;
            record.wall_ms = t0.elapsed().as_millis() as u64;
        }
        serde_json::to_writer(&mut log, &record).map_err(|e| Error::Config(e.to_string()))?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    Ok(TrainSummary {
        steps: cfg.schedule.total_steps(),
        final_loss,
        final_valid_accuracy: final_valid,
        model_path,
        log_path,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use poolcall_siggen::{generate_dataset, GenConfig};

    fn tiny_dataset(name: &str, n: usize) -> PathBuf {
        let dir = std::env::temp_dir().join(name);
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = GenConfig { seq_len_min: 120, seq_len_max: 160, ..GenConfig::default() };
        generate_dataset(&dir, 400, n, &cfg).unwrap();
        dir
    }

    fn mini_smoke_cfg(seed: u64) -> TrainCfg {
        let mut cfg = default_train_cfg("smoke", seed).unwrap();
        cfg.schedule = ScheduleSpec { max_lr: 2e-3, warmup: 2, first_cycle: 4, cycles: 2 };
        cfg.batch_size = 4;
        cfg.window = 600;
        cfg.valid_reads = 2;
        cfg
    }

    #[test]
    fn window_targets_take_fully_contained_events() {
        let rec = ReadRecord {
            read_id: "r".into(),
            sequence: "ACGT".into(),
            speed: 1.0,
            event_bounds: vec![0, 10, 20, 30],
            signal: vec![0.0; 40],
        };
        assert_eq!(window_targets(&rec, 0, 40), vec![0, 1, 2, 3]);
        assert_eq!(window_targets(&rec, 5, 30), vec![1, 2]);
        assert_eq!(window_targets(&rec, 10, 10), vec![1]);
    }

    #[test]
    fn short_run_writes_loadable_checkpoint_and_parseable_log() {
        let data = tiny_dataset("trainer-smoke-run", 12);
        let out = std::env::temp_dir().join("trainer-smoke-out");
        let _ = std::fs::remove_dir_all(&out);
        let cfg = mini_smoke_cfg(5);
        let summary = train(&data, &out, &cfg).unwrap();
        assert_eq!(summary.steps, 2 + 4 + 8);
        assert_eq!(summary.checkpoints.len(), 2);
        assert!(summary.final_valid_accuracy.is_some());

        let (loaded_cfg, _, _) = crate::basecall::load_model_dir(&out).unwrap();
        assert_eq!(loaded_cfg, cfg.model);

        let log = std::fs::read_to_string(&summary.log_path).unwrap();
        let records: Vec<LogRecord> =
            log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 14);
        for rec in &records {
            assert!(rec.loss.is_finite());
            let mlf = rec.batch_mean_length_factor.unwrap();
            assert!((mlf - cfg.model.s_target()).abs() < 1e-5, "step {}: {mlf}", rec.step);
        }
    }

    #[test]
    fn resuming_from_corrupt_checkpoint_aborts_and_keeps_previous_model() {
        let data = tiny_dataset("trainer-abort-run", 12);
        let out = std::env::temp_dir().join("trainer-abort-out");
        let _ = std::fs::remove_dir_all(&out);
        let cfg = mini_smoke_cfg(7);
        train(&data, &out, &cfg).unwrap();
        let good = std::fs::read(out.join("model.dpk")).unwrap();

        let mut store = ParamStore::<f32>::new();
        Model::init(&mut store, &cfg.model, cfg.seed).unwrap();
        checkpoint::load(&mut store, &out.join("model.dpk")).unwrap();
        let id = store.id_of("stem.w").unwrap();
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = Tensor::full(shape, f32::NAN);
        let bad = out.join("bad.dpk");
        checkpoint::save(&store, &bad).unwrap();

        let out2 = std::env::temp_dir().join("trainer-abort-out2");
        let _ = std::fs::remove_dir_all(&out2);
        let mut resume = cfg.clone();
        resume.init_from = Some(bad);
        let err = train(&data, &out2, &resume).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0 }), "{err}");
        assert_eq!(std::fs::read(out.join("model.dpk")).unwrap(), good);
    }

    #[test]
    fn training_reduces_held_out_loss() {
        let data = tiny_dataset("trainer-improve-run", 20);
        let out = std::env::temp_dir().join("trainer-improve-out");
        let _ = std::fs::remove_dir_all(&out);
        let mut cfg = mini_smoke_cfg(11);
        cfg.schedule = ScheduleSpec { max_lr: 2e-3, warmup: 20, first_cycle: 60, cycles: 2 };
        let valid = read_records(&data.join("valid.bin")).unwrap();

        let mut store = ParamStore::<f32>::new();
        let model = Model::init(&mut store, &cfg.model, cfg.seed).unwrap();
        let before = mean_eval_loss(&model, &store, &valid, cfg.window, 2).unwrap();

        train(&data, &out, &cfg).unwrap();
        checkpoint::load(&mut store, &out.join("model.dpk")).unwrap();
        let after = mean_eval_loss(&model, &store, &valid, cfg.window, 2).unwrap();
        assert!(after < before, "held-out loss {before} -> {after}");
    }

    #[test]
    #[ignore]
    fn probe_step_cost() {
        let data = tiny_dataset("trainer-cost-data", 8);
        let reads = read_records(&data.join("train.bin")).unwrap();
        for preset in
            ["smoke", "fast-mini-stride", "fast-mini-dynpool", "hac-mini-stride", "hac-mini-dynpool"]
        {
            let cfg = default_train_cfg(preset, 3).unwrap();
            let mut store = ParamStore::<f32>::new();
            let model = Model::init(&mut store, &cfg.model, cfg.seed).unwrap();
            let mut opt = AdamW::new(cfg.optim);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let (x, targets) = sample_batch(&mut rng, &reads, cfg.batch_size, cfg.window);
                let t0 = Instant::now();
                let (tape, grads, pending, _, _) =
                    batch_pass(&model, &store, x, &targets).unwrap();
                store.zero_grads();
                tape.accumulate_param_grads(&grads, &mut store);
                apply_pending(&mut store, pending);
                opt.step(&mut store, 1e-3).unwrap();
                best = best.min(t0.elapsed().as_secs_f64());
            }
            println!(
                "{preset}: {:.0} ms/step (batch {}, window {})",
                best * 1e3,
                cfg.batch_size,
                cfg.window
            );
        }
    }

    #[test]
    #[ignore]
    fn probe_fast_convergence() {
        let data = std::env::temp_dir().join("trainer-fast-data");
        let _ = std::fs::remove_dir_all(&data);
        generate_dataset(&data, 400, 60, &GenConfig::default()).unwrap();
        let valid = read_records(&data.join("valid.bin")).unwrap();
        let mut cfg = default_train_cfg("fast-mini-dynpool", 0).unwrap();
        cfg.schedule.cycles = 3;
        cfg.valid_reads = 6;
        let out = std::env::temp_dir().join("trainer-fast-out");
        let _ = std::fs::remove_dir_all(&out);
        let t0 = Instant::now();
        let summary = train(&data, &out, &cfg).unwrap();
        println!("total wall {:.1}s, final loss {:.2}", t0.elapsed().as_secs_f64(), summary.final_loss);
        let log = std::fs::read_to_string(&summary.log_path).unwrap();
        for line in log.lines() {
            let rec: LogRecord = serde_json::from_str(line).unwrap();
            if rec.valid_accuracy.is_some() {
                println!(
                    "step {}: loss {:.2}, valid acc {:?}",
                    rec.step, rec.loss, rec.valid_accuracy
                );
            }
        }
        let mut store = ParamStore::<f32>::new();
        let model = Model::init(&mut store, &cfg.model, cfg.seed).unwrap();
        checkpoint::load(&mut store, &out.join("model.dpk")).unwrap();
        println!(
            "eval loss {:.2}",
            mean_eval_loss(&model, &store, &valid, cfg.window, 6).unwrap()
        );
        for rec in valid.iter().take(3) {
            let call = call_read(&model, &store, &rec.signal, 1).unwrap();
            let called = indices_to_string(&call.seq);
            println!(
                "  {}: ref {} bases, call {} bases, acc {:.3}",
                rec.read_id,
                rec.sequence.len(),
                called.len(),
                accuracy(called.as_bytes(), rec.sequence.as_bytes()),
            );
            println!("    ref  {}", &rec.sequence[..60.min(rec.sequence.len())]);
            println!("    call {}", &called[..60.min(called.len())]);
        }
    }

    #[test]
    #[ignore]
    fn probe_smoke_convergence() {
        let data = tiny_dataset("trainer-probe-data", 60);
        let valid = read_records(&data.join("valid.bin")).unwrap();
        let mut cfg = default_train_cfg("smoke", 3).unwrap();
        cfg.valid_reads = 4;
        let mut store = ParamStore::<f32>::new();
        let model = Model::init(&mut store, &cfg.model, cfg.seed).unwrap();
        println!(
            "init eval loss {:.2}",
            mean_eval_loss(&model, &store, &valid, cfg.window, 4).unwrap()
        );
        for round in 0..4 {
            let out = std::env::temp_dir().join(format!("trainer-probe-out{round}"));
            let _ = std::fs::remove_dir_all(&out);
            let mut c = cfg.clone();
            c.schedule = ScheduleSpec { max_lr: 2e-3, warmup: 20, first_cycle: 60, cycles: 2 };
            if round > 0 {
                c.init_from =
                    Some(std::env::temp_dir().join(format!("trainer-probe-out{}", round - 1)).join("model.dpk"));
            }
            let t0 = Instant::now();
            let summary = train(&data, &out, &c).unwrap();
            checkpoint::load(&mut store, &out.join("model.dpk")).unwrap();
            println!(
                "after {} more steps: train loss {:.2}, eval loss {:.2}, valid acc {:?}, wall {:.1}s",
                summary.steps,
                summary.final_loss,
                mean_eval_loss(&model, &store, &valid, cfg.window, 4).unwrap(),
                summary.final_valid_accuracy,
                t0.elapsed().as_secs_f64(),
            );
            for rec in valid.iter().take(3) {
                let call = call_read(&model, &store, &rec.signal, 1).unwrap();
                let called = indices_to_string(&call.seq);
                println!(
                    "  {}: ref {} bases, call {} bases, acc {:.3}",
                    rec.read_id,
                    rec.sequence.len(),
                    called.len(),
                    accuracy(called.as_bytes(), rec.sequence.as_bytes()),
                );
                println!("    ref  {}", &rec.sequence[..60.min(rec.sequence.len())]);
                println!("    call {}", &called[..60.min(called.len())]);
            }
        }
    }
}
