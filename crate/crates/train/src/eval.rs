//! Accuracy evaluation: global unit-cost alignment of calls against
//! references, per-read and median accuracy, and the least-squares fit of
//! mean length factor against ground-truth speed.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Global alignment with match 0 / mismatch 1 / indel 1. `matches` and
/// `columns` come from the canonical traceback (diagonal preferred, then the
/// call gap, then the reference gap).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignStats {
    pub cost: usize,
    pub matches: usize,
    pub columns: usize,
}

pub fn align(call: &[u8], reference: &[u8]) -> AlignStats {
    let (n, m) = (call.len(), reference.len());
    let cols = m + 1;
    let mut dp = vec![0usize; (n + 1) * cols];
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        dp[i * cols] = i;
        for j in 1..=m {
            let sub = dp[(i - 1) * cols + j - 1] + usize::from(call[i - 1] != reference[j - 1]);
            let del = dp[(i - 1) * cols + j] + 1;
            let ins = dp[i * cols + j - 1] + 1;
            dp[i * cols + j] = sub.min(del).min(ins);
        }
    }
    let cost = dp[n * cols + m];

    let (mut i, mut j) = (n, m);
    let mut matches = 0usize;
    let mut columns = 0usize;
    while i > 0 || j > 0 {
        let here = dp[i * cols + j];
        if i > 0 && j > 0 && here == dp[(i - 1) * cols + j - 1] + usize::from(call[i - 1] != reference[j - 1])
        {
            matches += usize::from(call[i - 1] == reference[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dp[(i - 1) * cols + j] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
        columns += 1;
    }
    AlignStats { cost, matches, columns }
}

/// Fraction of matching columns; 0 for an empty call.
pub fn accuracy(call: &[u8], reference: &[u8]) -> f64 {
    if call.is_empty() {
        return 0.0;
    }
    let stats = align(call, reference);
    if stats.columns == 0 {
        return 0.0;
    }
    stats.matches as f64 / stats.columns as f64
}

/// Middle order statistic; the mean of the two middle values for even n.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of y on x. A zero-variance target gives r^2 = 1 when
/// residuals vanish and 0 otherwise.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|&v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|&v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let e = b - (slope * a + intercept);
            e * e
        })
        .sum();
    let r2 = if syy == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Some(LinearFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReadEval {
    pub read_id: String,
    pub accuracy: f64,
    pub call_len: usize,
    pub ref_len: usize,
    pub empty: bool,
    pub speed: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_length_factor: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_reads: usize,
    pub n_empty: usize,
    pub median_accuracy: f64,
    pub mean_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_factor_fit: Option<LinearFit>,
}

/// Summarize per-read evaluations; the fit uses only reads with a recorded
/// mean length factor.
pub fn report(reads: &[ReadEval]) -> EvalReport {
    let accuracies: Vec<f64> = reads.iter().map(|r| r.accuracy).collect();
    let n_empty = reads.iter().filter(|r| r.empty).count();
    let mean_accuracy = if reads.is_empty() {
        f64::NAN
    } else {
        accuracies.iter().sum::<f64>() / reads.len() as f64
    };
    let (xs, ys): (Vec<f64>, Vec<f64>) = reads
        .iter()
        .filter_map(|r| r.mean_length_factor.map(|m| (r.speed as f64, m)))
        .unzip();
    EvalReport {
        n_reads: reads.len(),
        n_empty,
        median_accuracy: median(&accuracies),
        mean_accuracy,
        length_factor_fit: linear_fit(&xs, &ys),
    }
}

/// Parse a FASTQ file into (read id, sequence) pairs.
pub fn parse_fastq(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() % 4 != 0 {
        return Err(Error::Config(format!(
            "{}: line count {} is not a multiple of 4",
            path.display(),
            lines.len()
        )));
    }
    let mut out = Vec::with_capacity(lines.len() / 4);
    for chunk in lines.chunks(4) {
        let id = chunk[0].strip_prefix('@').ok_or_else(|| {
            Error::Config(format!("{}: header {:?} does not start with '@'", path.display(), chunk[0]))
        })?;
        if !chunk[2].starts_with('+') {
            return Err(Error::Config(format!(
                "{}: separator {:?} does not start with '+'",
                path.display(),
                chunk[2]
            )));
        }
        if chunk[3].len() != chunk[1].len() {
            return Err(Error::Config(format!(
                "{}: quality length {} does not match sequence length {} for {id}",
                path.display(),
                chunk[3].len(),
                chunk[1].len()
            )));
        }
        out.push((id.to_string(), chunk[1].to_string()));
    }
    Ok(out)
}

/// Parse a basecall traces TSV into read id -> mean length factor; rows
/// without a finite factor are skipped.
pub fn parse_traces(path: &Path) -> Result<HashMap<String, f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if !line.starts_with("read_id\t") {
                return Err(Error::Config(format!(
                    "{}: unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "{}: line {} has {} fields, expected 4",
                path.display(),
                ln + 1,
                fields.len()
            )));
        }
        let mlf: f64 = fields[3].parse().map_err(|_| {
            Error::Config(format!("{}: bad mean length factor {:?}", path.display(), fields[3]))
        })?;
        if mlf.is_finite() {
            map.insert(fields[0].to_string(), mlf);
        }
    }
    Ok(map)
}

/// Score `calls_fastq` against the references in `data_bin`, writing
/// `per_read.tsv` and `report.json` under `out_dir`. Every call must have a
/// reference; pooling traces attach mean length factors to the fit.
pub fn evaluate_files(
    calls_fastq: &Path,
    data_bin: &Path,
    traces_tsv: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalReport> {
    for p in [calls_fastq, data_bin] {
        if !p.exists() {
            return Err(Error::MissingFile(PathBuf::from(p)));
        }
    }
    if let Some(p) = traces_tsv {
        if !p.exists() {
            return Err(Error::MissingFile(PathBuf::from(p)));
        }
    }
    let calls = parse_fastq(calls_fastq)?;
    let refs: HashMap<String, (String, f32)> = poolcall_siggen::read_records(data_bin)?
        .into_iter()
        .map(|r| (r.read_id, (r.sequence, r.speed)))
        .collect();
    let traces = match traces_tsv {
        Some(p) => parse_traces(p)?,
        None => HashMap::new(),
    };

    let mut rows = Vec::with_capacity(calls.len());
    for (id, call) in &calls {
        let (reference, speed) = refs.get(id).ok_or_else(|| {
            Error::Config(format!("call {id} has no reference in {}", data_bin.display()))
        })?;
        rows.push(ReadEval {
            read_id: id.clone(),
            accuracy: accuracy(call.as_bytes(), reference.as_bytes()),
            call_len: call.len(),
            ref_len: reference.len(),
            empty: call.is_empty(),
            speed: *speed,
            mean_length_factor: traces.get(id).copied(),
        });
    }
    let rep = report(&rows);

    std::fs::create_dir_all(out_dir)?;
    let mut tsv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("per_read.tsv"))?);
    writeln!(tsv, "read_id\taccuracy\tcall_len\tref_len\tempty\tspeed\tmean_length_factor")?;
    for r in &rows {
        let mlf = match r.mean_length_factor {
            Some(v) => format!("{v:.6}"),
            None => "nan".into(),
        };
        writeln!(
            tsv,
            "{}\t{:.6}\t{}\t{}\t{}\t{:.6}\t{}",
            r.read_id,
            r.accuracy,
            r.call_len,
            r.ref_len,
            u8::from(r.empty),
            r.speed,
            mlf
        )?;
    }
    tsv.flush()?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&rep).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(rep)
}
