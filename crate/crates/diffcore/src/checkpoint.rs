use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{DiffError, Result};

/// Write named tensors as `<stem>.manifest` (text, key-value) plus
/// `<stem>.bin` (flat little-endian f64). Round-trips bit-exactly.
pub fn save_checkpoint(dir: &Path, stem: &str, entries: &[(String, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(format!("{stem}.manifest")))?);
    let mut bin = BufWriter::new(fs::File::create(dir.join(format!("{stem}.bin")))?);
    writeln!(manifest, "format=1 dtype=f64 byte_order=le count={}", entries.len())?;
    let mut offset = 0usize;
    for (name, t) in entries {
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(manifest, "name={name} shape={shape} offset={offset} len={}", t.numel())?;
        for v in t.data() {
            bin.write_all(&v.to_le_bytes())?;
        }
        offset += t.numel();
    }
    manifest.flush()?;
    bin.flush()?;
    Ok(())
}

/// Read back a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let manifest = fs::read_to_string(dir.join(format!("{stem}.manifest")))?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut bytes)?;

    let mut lines = manifest.lines();
    let header = lines.next().ok_or_else(|| DiffError::Format("empty manifest".into()))?;
    if !header.starts_with("format=1") {
        return Err(DiffError::Format(format!("unsupported header: {header}")));
    }

    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut name = None;
        let mut shape: Vec<usize> = Vec::new();
        let mut offset = 0usize;
        let mut len = 0usize;
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| DiffError::Format(format!("bad field `{field}`")))?;
            match key {
                "name" => name = Some(value.to_string()),
                "shape" => {
                    shape = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|s| s.parse().map_err(|_| DiffError::Format(format!("bad shape `{value}`"))))
                            .collect::<Result<_>>()?
                    }
                }
                "offset" => offset = value.parse().map_err(|_| DiffError::Format(format!("bad offset `{value}`")))?,
                "len" => len = value.parse().map_err(|_| DiffError::Format(format!("bad len `{value}`")))?,
                _ => {}
            }
        }
        let name = name.ok_or_else(|| DiffError::Format(format!("entry without name: {line}")))?;
        let start = offset * 8;
        let end = (offset + len) * 8;
        if end > bytes.len() {
            return Err(DiffError::Format(format!("entry `{name}` exceeds binary size")));
        }
        let data: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(data, &shape)));
    }
    Ok(out)
}
