//! Checkpoint container: magic bytes `EARN`, a format version, a textual
//! header listing tensor name/shape/byte-offset, then raw little-endian
//! f32 payloads. Save → load round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use earn_core::model::{ModelConfig, RegisterSpec, Weights};

pub const MAGIC: &[u8; 4] = b"EARN";
pub const VERSION: u32 = 1;

pub fn save(weights: &Weights, path: &Path) -> Result<()> {
    let params = weights.params();
    let mut header = String::new();
    let mut offset = 0u64;
    for (name, (rows, cols), data) in &params {
        header.push_str(&format!("{name} {rows}x{cols} {offset}\n"));
        offset += (data.len() * 4) as u64;
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(header.as_bytes())?;
    for (_, _, data) in &params {
        for v in *data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path, config: &ModelConfig, spec: &RegisterSpec) -> Result<Weights> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("checkpoint {}: bad magic bytes", path.display());
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        bail!("checkpoint {}: unsupported version {version}", path.display());
    }
    let mut dword = [0u8; 8];
    f.read_exact(&mut dword)?;
    let header_len = u64::from_le_bytes(dword) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let header = String::from_utf8(header).context("checkpoint header is not UTF-8")?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    // parse and sanity-check the tensor table
    struct Entry {
        name: String,
        rows: usize,
        cols: usize,
        offset: u64,
    }
    let mut entries = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let mut parse = || -> Option<Entry> {
            let name = parts.next()?.to_string();
            let shape = parts.next()?;
            let offset = parts.next()?.parse().ok()?;
            let (r, c) = shape.split_once('x')?;
            Some(Entry {
                name,
                rows: r.parse().ok()?,
                cols: c.parse().ok()?,
                offset,
            })
        };
        let entry = parse()
            .with_context(|| format!("checkpoint header line {} is malformed", i + 1))?;
        entries.push(entry);
    }
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|e| {
            let len = (e.rows * e.cols * 4) as u64;
            (e.offset, e.offset + len, e.name.as_str())
        })
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            bail!("checkpoint tensors {} and {} overlap", w[0].2, w[1].2);
        }
    }
    if let Some(last) = spans.last() {
        if last.1 > payload.len() as u64 {
            bail!("checkpoint tensor {} extends past the payload", last.2);
        }
    }

    let mut weights = Weights::zeros(config, spec);
    let mut expected = weights.params_mut();
    if expected.len() != entries.len() {
        bail!(
            "checkpoint holds {} tensors, the configuration needs {}",
            entries.len(),
            expected.len()
        );
    }
    for (entry, (name, (rows, cols), data)) in entries.iter().zip(expected.iter_mut()) {
        if entry.name != *name {
            bail!("checkpoint tensor {} where {} was expected", entry.name, name);
        }
        if entry.rows != *rows || entry.cols != *cols {
            bail!(
                "checkpoint tensor {}: shape {}x{} does not match configured {}x{}",
                entry.name,
                entry.rows,
                entry.cols,
                rows,
                cols
            );
        }
        let start = entry.offset as usize;
        for (i, v) in data.iter_mut().enumerate() {
            let at = start + i * 4;
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
        }
    }
    Ok(weights)
}
