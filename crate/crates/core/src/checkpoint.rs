//! Checkpoint directory: `config.txt`, `manifest.txt` (one `name role shape`
//! line per parameter, in store order) and `params.ten1` holding the
//! concatenated TEN1 records in the same order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use tokenmotion_tensor::Tensor;

use crate::backbone::Model;
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::params::{ParamStore, Role};

pub const MANIFEST: &str = "manifest.txt";
pub const PARAMS: &str = "params.ten1";
pub const CONFIG: &str = "config.txt";

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn manifest(store: &ParamStore) -> String {
    store
        .iter()
        .map(|(_, p)| {
            format!(
                "{} {} {}\n",
                p.name,
                p.role.as_str(),
                shape_str(p.value.shape())
            )
        })
        .collect()
}

pub fn save(dir: &Path, config: &RunConfig, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let put = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    };
    put(CONFIG, config.to_text())?;
    put(MANIFEST, manifest(store))?;
    let path = dir.join(PARAMS);
    let file = File::create(&path).map_err(|e| CoreError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (_, p) in store.iter() {
        p.value.write_ten1(&mut w)?;
    }
    w.flush().map_err(|e| CoreError::io(&path, e))
}

/// Rebuilds the model described by `config.txt` and loads its weights,
/// rejecting any difference between the stored manifest and the model's.
pub fn load(dir: &Path) -> Result<(RunConfig, Model)> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))
    };
    let config = RunConfig::parse(&read(CONFIG)?)?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let stored = read(MANIFEST)?;
    let expected = manifest(&model.store);
    if stored != expected {
        let first = stored
            .lines()
            .zip(expected.lines())
            .position(|(a, b)| a != b)
            .map(|i| format!("line {}", i + 1))
            .unwrap_or_else(|| "parameter count".into());
        return Err(CoreError::Checkpoint(format!(
            "manifest does not match the configured model ({first})"
        )));
    }
    let path = dir.join(PARAMS);
    let file = File::open(&path).map_err(|e| CoreError::io(&path, e))?;
    let mut r = BufReader::new(file);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let value = Tensor::read_ten1(&mut r)?;
        model
            .store
            .set(id, value)
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    }
    Ok((config, model))
}

/// Parses one manifest line into `(name, role, shape)`.
pub fn parse_manifest_line(line: &str) -> Option<(String, Role, Vec<usize>)> {
    let mut it = line.split_whitespace();
    let name = it.next()?.to_string();
    let role = Role::parse(it.next()?)?;
    let shape = it
        .next()?
        .split('x')
        .map(|d| d.parse().ok())
        .collect::<Option<Vec<usize>>>()?;
    Some((name, role, shape))
}
