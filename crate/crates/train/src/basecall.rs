//! Batch base calling: load a trained model directory, decode reads in
//! parallel, and write FASTQ calls plus per-read pooling traces.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use poolcall_core::decoders::fastq::{fastq_record, quality_string};
use poolcall_core::dynpool::PoolingTrace;
use poolcall_core::{checkpoint, ops, Ctx, Mode, ParamStore, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelCfg};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BasecallCfg {
    /// 1 decodes greedily; larger widths run the prefix beam.
    pub beam_width: usize,
    pub threads: usize,
}

impl Default for BasecallCfg {
    fn default() -> Self {
        BasecallCfg { beam_width: 1, threads: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasecallSummary {
    pub n_reads: usize,
    pub total_signals: usize,
    pub wall_s: f64,
    pub signals_per_sec: f64,
    pub threads: usize,
    pub beam_width: usize,
}

pub struct ReadCall {
    pub seq: Vec<usize>,
    pub quals: String,
    pub trace: Option<PoolingTrace>,
}

/// Rebuild a model from `model.json` and `model.dpk` in `dir`.
pub fn load_model_dir(dir: &Path) -> Result<(ModelCfg, ParamStore<f32>, Model)> {
    let cfg_path = dir.join("model.json");
    let ckpt_path = dir.join("model.dpk");
    for p in [&cfg_path, &ckpt_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let cfg: ModelCfg = serde_json::from_str(&std::fs::read_to_string(&cfg_path)?)
        .map_err(|e| Error::Config(format!("model.json: {e}")))?;
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, &cfg, 0)?;
    checkpoint::load(&mut store, &ckpt_path)?;
    Ok((cfg, store, model))
}

/// Decode one read. An empty signal yields an empty call.
pub fn call_read(
    model: &Model,
    store: &ParamStore<f32>,
    signal: &[f32],
    width: usize,
) -> Result<ReadCall> {
    if signal.is_empty() {
        return Ok(ReadCall { seq: Vec::new(), quals: String::new(), trace: None });
    }
    let t = signal.len();
    let mut cx = Ctx::new(store, Mode::Eval);
    let x = cx.tape.leaf(Tensor::new(vec![1, t, 1], signal.to_vec())?);
    let (h, traces) = model.forward(&mut cx, x)?;
    let trace = traces.map(|mut v| v.remove(0));
    let rows_len = model.out_rows(t, trace.as_ref());
    if rows_len == 0 {
        return Ok(ReadCall { seq: Vec::new(), quals: String::new(), trace });
    }
    let cropped = ops::crop_time(&mut cx.tape, h, rows_len)?;
    let rows = cx.tape.value(cropped).clone();
    let seq = model.decode(store, &rows, width)?;
    let quals = if seq.is_empty() {
        String::new()
    } else {
        quality_string(&model.align(store, &rows, &seq)?)
    };
    Ok(ReadCall { seq, quals, trace })
}

/// Call every read in `data_bin` with the model in `model_dir`, writing
/// `calls.fastq`, `traces.tsv` (dynamic-pooling models only), and
/// `basecall.json` under `out_dir`.
pub fn basecall(
    model_dir: &Path,
    data_bin: &Path,
    out_dir: &Path,
    cfg: &BasecallCfg,
) -> Result<BasecallSummary> {
    let (_, store, model) = load_model_dir(model_dir)?;
    if !data_bin.exists() {
        return Err(Error::MissingFile(PathBuf::from(data_bin)));
    }
    let records = poolcall_siggen::read_records(data_bin)?;
    std::fs::create_dir_all(out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let width = cfg.beam_width.max(1);
    let start = Instant::now();
    let calls: Vec<ReadCall> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| call_read(&model, &store, &rec.signal, width))
            .collect::<Result<Vec<_>>>()
    })?;
    let wall_s = start.elapsed().as_secs_f64();

    let mut fastq = std::fs::File::create(out_dir.join("calls.fastq"))?;
    for (rec, call) in records.iter().zip(&calls) {
        fastq.write_all(fastq_record(&rec.read_id, &call.seq, &call.quals).as_bytes())?;
    }

    if calls.iter().any(|c| c.trace.is_some()) {
        let mut tsv = std::fs::File::create(out_dir.join("traces.tsv"))?;
        writeln!(tsv, "read_id\tinput_len\toutput_len\tmean_length_factor")?;
        for (rec, call) in records.iter().zip(&calls) {
            if let Some(tr) = &call.trace {
                writeln!(
                    tsv,
                    "{}\t{}\t{}\t{:.6}",
                    rec.read_id, tr.input_len, tr.output_len, tr.mean_length_factor
                )?;
            } else {
                writeln!(tsv, "{}\t{}\t0\tnan", rec.read_id, rec.signal.len())?;
            }
        }
    }

    let total_signals: usize = records.iter().map(|r| r.signal.len()).sum();
    let summary = BasecallSummary {
        n_reads: records.len(),
        total_signals,
        wall_s,
        signals_per_sec: if wall_s > 0.0 { total_signals as f64 / wall_s } else { 0.0 },
        threads: cfg.threads.max(1),
        beam_width: width,
    };
    std::fs::write(
        out_dir.join("basecall.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;
    use poolcall_siggen::{write_records, ReadRecord};

    fn model_dir(name: &str, preset_name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = preset(preset_name).unwrap();
        let mut store = ParamStore::<f32>::new();
        Model::init(&mut store, &cfg, 11).unwrap();
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&cfg).unwrap())
            .unwrap();
        checkpoint::save(&store, &dir.join("model.dpk")).unwrap();
        dir
    }

    fn toy_data(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let mk = |id: &str, n: usize| ReadRecord {
            read_id: id.into(),
            sequence: "ACGT".repeat(n.max(4) / 4),
            speed: 1.0,
            event_bounds: (0..n.max(4) as u32).step_by(4).collect(),
            signal: (0..n).map(|i| ((i * 13 % 7) as f32) / 7.0 - 0.5).collect(),
        };
        let recs = vec![mk("read-000000", 48), mk("read-000001", 0), mk("read-000002", 31)];
        write_records(&dir.join("data.bin"), &recs).unwrap();
        dir
    }

    #[test]
    fn basecall_is_deterministic_and_handles_empty_signal() {
        let mdir = model_dir("basecall-model-smoke", "smoke");
        let data = toy_data("basecall-data");
        let cfg = BasecallCfg { beam_width: 1, threads: 1 };
        let out1 = std::env::temp_dir().join("basecall-out1");
        let out2 = std::env::temp_dir().join("basecall-out2");
        for out in [&out1, &out2] {
            let _ = std::fs::remove_dir_all(out);
            let summary = basecall(&mdir, &data.join("data.bin"), out, &cfg).unwrap();
            assert_eq!(summary.n_reads, 3);
        }
        let fq1 = std::fs::read(out1.join("calls.fastq")).unwrap();
        let fq2 = std::fs::read(out2.join("calls.fastq")).unwrap();
        assert_eq!(fq1, fq2);
        assert_eq!(
            std::fs::read(out1.join("traces.tsv")).unwrap(),
            std::fs::read(out2.join("traces.tsv")).unwrap()
        );

        // the zero-length read yields an empty record in place
        let text = String::from_utf8(fq1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[4], "@read-000001");
        assert_eq!(lines[5], "");
        assert_eq!(lines[7], "");
    }

    #[test]
    fn stride_models_write_no_traces() {
        let mdir = model_dir("basecall-model-stride", "fast-mini-stride");
        let data = toy_data("basecall-data-stride");
        let out = std::env::temp_dir().join("basecall-out-stride");
        let _ = std::fs::remove_dir_all(&out);
        basecall(&mdir, &data.join("data.bin"), &out, &BasecallCfg::default()).unwrap();
        assert!(out.join("calls.fastq").exists());
        assert!(!out.join("traces.tsv").exists());
    }

    #[test]
    fn variant_mismatch_names_the_missing_tensors() {
        let stride = model_dir("basecall-mismatch-stride", "fast-mini-stride");
        let pooled = model_dir("basecall-mismatch-pool", "fast-mini-dynpool");
        // pooled config with stride weights: the dynamic-pooling tensors
        // are absent from the checkpoint
        std::fs::copy(stride.join("model.dpk"), pooled.join("model.dpk")).unwrap();
        let err = load_model_dir(&pooled).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("missing tensors"), "{msg}");
        assert!(msg.contains("ds."), "{msg}");
    }

    #[test]
    fn missing_model_dir_is_reported() {
        let dir = std::env::temp_dir().join("basecall-no-model");
        let _ = std::fs::remove_dir_all(&dir);
        let err = load_model_dir(&dir).err().unwrap();
        assert!(matches!(err, Error::MissingFile(_)), "{err}");
    }
}
