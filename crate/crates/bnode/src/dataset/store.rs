//! On-disk dataset format: `manifest.json` plus one raw little-endian f32
//! binary file per array (row-major, no header). Round-trips bit-exactly.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Array2, Array3, DatasetStats, Split, TrajectoryDataset};
use crate::odeint::TimeGrid;
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    byte_order: String,
    layout: String,
    grid: TimeGrid,
    arrays: ArrayShapes,
    splits: Vec<Split>,
    stats: DatasetStats,
    generator: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayShapes {
    states: [usize; 3],
    outputs: [usize; 3],
    controls: [usize; 3],
    parameters: [usize; 2],
    time: [usize; 1],
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expect * 4 {
        return Err(Error::Dataset(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expect * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_dataset(dir: &Path, ds: &TrajectoryDataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        byte_order: "little".into(),
        layout: "row-major".into(),
        grid: ds.grid,
        arrays: ArrayShapes {
            states: [ds.states.n, ds.states.t, ds.states.c],
            outputs: [ds.outputs.n, ds.outputs.t, ds.outputs.c],
            controls: [ds.controls.n, ds.controls.t, ds.controls.c],
            parameters: [ds.parameters.n, ds.parameters.c],
            time: [ds.points()],
        },
        splits: ds.splits.clone(),
        stats: ds.stats.clone(),
        generator: ds.generator.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    write_f32(&dir.join("states.bin"), ds.states.raw())?;
    write_f32(&dir.join("outputs.bin"), ds.outputs.raw())?;
    write_f32(&dir.join("controls.bin"), ds.controls.raw())?;
    write_f32(&dir.join("parameters.bin"), ds.parameters.raw())?;
    let time: Vec<f32> = ds.grid.times().iter().map(|t| *t as f32).collect();
    write_f32(&dir.join("time.bin"), &time)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    let s = manifest.arrays.states;
    let o = manifest.arrays.outputs;
    let c = manifest.arrays.controls;
    let p = manifest.arrays.parameters;
    let ds = TrajectoryDataset {
        states: Array3::from_f32(read_f32(&dir.join("states.bin"), s[0] * s[1] * s[2])?, s[0], s[1], s[2]),
        outputs: Array3::from_f32(read_f32(&dir.join("outputs.bin"), o[0] * o[1] * o[2])?, o[0], o[1], o[2]),
        controls: Array3::from_f32(read_f32(&dir.join("controls.bin"), c[0] * c[1] * c[2])?, c[0], c[1], c[2]),
        parameters: Array2::from_f32(read_f32(&dir.join("parameters.bin"), p[0] * p[1])?, p[0], p[1]),
        grid: manifest.grid,
        splits: manifest.splits,
        stats: manifest.stats,
        generator: manifest.generator,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::shf_dataset;

    #[test]
    fn roundtrip_is_bit_exact() {
        let ds = shf_dataset(5, 13);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.states.raw(), back.states.raw());
        assert_eq!(ds.outputs.raw(), back.outputs.raw());
        assert_eq!(ds.controls.raw(), back.controls.raw());
        assert_eq!(ds.parameters.raw(), back.parameters.raw());
        assert_eq!(ds.splits, back.splits);
        assert_eq!(ds.stats, back.stats);
        assert_eq!(ds.grid, back.grid);
        // and the files themselves are stable across saves
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &back).unwrap();
        for f in ["manifest.json", "states.bin", "outputs.bin", "controls.bin", "parameters.bin", "time.bin"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs");
        }
    }
}
