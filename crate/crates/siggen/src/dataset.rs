//! Dataset assembly: deterministic read generation, train/valid/test split,
//! and a length-prefixed little-endian record format on disk.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pore::PoreModel;
use crate::read::{generate_read, GenConfig, ReadRecord};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Valid => "valid.bin",
            Split::Test => "test.bin",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n_reads: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub config: GenConfig,
}

impl DatasetMeta {
    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u32(w, b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
}

/// Write records to `path`, concatenated with per-field length prefixes.
pub fn write_records(path: &Path, records: &[ReadRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        write_bytes(&mut w, rec.read_id.as_bytes())?;
        write_bytes(&mut w, rec.sequence.as_bytes())?;
        w.write_all(&rec.speed.to_le_bytes())?;
        write_u32(&mut w, rec.event_bounds.len() as u32)?;
        for &b in &rec.event_bounds {
            write_u32(&mut w, b)?;
        }
        write_u32(&mut w, rec.signal.len() as u32)?;
        for &s in &rec.signal {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all records back from a file written by [`write_records`].
pub fn read_records(path: &Path) -> Result<Vec<ReadRecord>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match r.read_exact(&mut first) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id_len = u32::from_le_bytes(first) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let read_id = String::from_utf8(id)
            .map_err(|_| Error::Format("read id is not valid UTF-8".into()))?;
        let sequence = read_string(&mut r, "sequence")?;
        let mut sp = [0u8; 4];
        r.read_exact(&mut sp)?;
        let speed = f32::from_le_bytes(sp);
        let n_bounds = read_u32(&mut r)? as usize;
        let mut event_bounds = Vec::with_capacity(n_bounds);
        for _ in 0..n_bounds {
            event_bounds.push(read_u32(&mut r)?);
        }
        let n_sig = read_u32(&mut r)? as usize;
        let mut signal = Vec::with_capacity(n_sig);
        for _ in 0..n_sig {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            signal.push(f32::from_le_bytes(b));
        }
        out.push(ReadRecord {
            read_id,
            sequence,
            speed,
            event_bounds,
            signal,
        });
    }
    Ok(out)
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(dir.join("meta.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("meta.json: {e}")))
}

/// Generate `n_reads` reads under `dir`, split 80/10/10 into train/valid/test
/// files plus a `meta.json`. The same seed and config always produce byte
/// identical output. Refuses to overwrite an existing dataset.
pub fn generate_dataset(dir: &Path, seed: u64, n_reads: usize, cfg: &GenConfig) -> Result<DatasetMeta> {
    cfg.validate()?;
    let meta_path = dir.join("meta.json");
    if meta_path.exists() {
        return Err(Error::Collision(meta_path));
    }
    std::fs::create_dir_all(dir)?;

    let pore = PoreModel::new(cfg.kmer, seed);
    let mut seen: HashSet<String> = HashSet::with_capacity(n_reads);
    let mut reads = Vec::with_capacity(n_reads);
    for idx in 0..n_reads {
        let read_id = format!("read-{idx:06}");
        if !seen.insert(read_id.clone()) {
            return Err(Error::Collision(PathBuf::from(read_id)));
        }
        reads.push(generate_read(&pore, cfg, seed ^ idx as u64, read_id)?);
    }

    let n_train = n_reads * 8 / 10;
    let n_valid = n_reads / 10;
    let n_test = n_reads - n_train - n_valid;
    write_records(&dir.join(Split::Train.file_name()), &reads[..n_train])?;
    write_records(&dir.join(Split::Valid.file_name()), &reads[n_train..n_train + n_valid])?;
    write_records(&dir.join(Split::Test.file_name()), &reads[n_train + n_valid..])?;

    let meta = DatasetMeta {
        seed,
        n_reads,
        n_train,
        n_valid,
        n_test,
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&meta_path, text)?;
    Ok(meta)
}
