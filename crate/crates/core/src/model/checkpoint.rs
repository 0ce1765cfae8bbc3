use std::io::{BufRead, Read};

use super::config::ModelConfig;
use super::network::TgcnnModel;
use crate::autodiff::{Array, Params};
use crate::cohort::DemographicEncoder;
use crate::error::{Error, Result};

const MAGIC: &str = "TGCNN v1";

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

/// Serialises a model: the magic line, `key = value` lines for the
/// configuration and dimensions, an `arrays = N` line, then per array a
/// `name d1 d2 ...` line followed by its values as little-endian f64.
pub fn save_checkpoint(model: &TgcnnModel) -> Vec<u8> {
    let mut out = format!("{MAGIC}\n");
    out.push_str(&model.config.to_kv());
    out.push_str(&format!("n_nodes = {}\n", model.n_nodes));
    out.push_str(&format!("n_slots = {}\n", model.n_slots));
    out.push_str(&format!("age_mean = {}\n", model.encoder.age_mean));
    out.push_str(&format!("age_sd = {}\n", model.encoder.age_sd));
    let arrays: Vec<(&str, &Array)> = model.params.iter().chain(model.buffers.iter()).collect();
    out.push_str(&format!("arrays = {}\n", arrays.len()));
    let mut bytes = out.into_bytes();
    for (name, a) in arrays {
        let dims: Vec<String> = a.shape().iter().map(ToString::to_string).collect();
        bytes.extend_from_slice(format!("{name} {}\n", dims.join(" ")).as_bytes());
        for v in a.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<TgcnnModel> {
    let mut reader = bytes;
    let mut line = String::new();
    let mut next_line = |reader: &mut &[u8]| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Err(bad("unexpected end of checkpoint"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(bad("not a TGCNN v1 checkpoint"));
    }
    let mut config = ModelConfig::default();
    let (mut n_nodes, mut n_slots) = (None, None);
    let mut encoder = DemographicEncoder::default();
    let n_arrays: usize = loop {
        let l = next_line(&mut reader)?;
        let (key, value) = l
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed header line '{l}'")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number for {key}")));
        match key {
            "n_nodes" => n_nodes = Some(value.parse().map_err(|_| bad("bad n_nodes"))?),
            "n_slots" => n_slots = Some(value.parse().map_err(|_| bad("bad n_slots"))?),
            "age_mean" => encoder.age_mean = num(value)?,
            "age_sd" => encoder.age_sd = num(value)?,
            "arrays" => break value.parse().map_err(|_| bad("bad array count"))?,
            _ => config.set(key, value)?,
        }
    };
    let mut params = Params::new();
    let mut buffers = Params::new();
    for _ in 0..n_arrays {
        let l = next_line(&mut reader)?;
        let mut parts = l.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("array without name"))?;
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape for {name}"))))
            .collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        reader
            .read_exact(&mut raw)
            .map_err(|_| bad(format!("truncated data for {name}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let target = if is_buffer(name) { &mut buffers } else { &mut params };
        target.insert(name, Array::new(shape, data));
    }
    if !reader.is_empty() {
        return Err(bad("trailing bytes after last array"));
    }
    let (Some(n_nodes), Some(n_slots)) = (n_nodes, n_slots) else {
        return Err(bad("missing n_nodes or n_slots"));
    };
    let model = TgcnnModel {
        config,
        n_nodes,
        n_slots,
        params,
        buffers,
        encoder,
    };
    let expected = TgcnnModel::init(&model.config, n_nodes, n_slots, encoder)?;
    for (name, a) in expected.params.iter().chain(expected.buffers.iter()) {
        let found = model.params.get(name).or_else(|| model.buffers.get(name));
        match found {
            Some(b) if b.shape() == a.shape() => {}
            Some(b) => return Err(bad(format!("{name} has shape {:?}, expected {:?}", b.shape(), a.shape()))),
            None => return Err(bad(format!("missing array {name}"))),
        }
    }
    if model.params.len() + model.buffers.len() != expected.params.len() + expected.buffers.len() {
        return Err(bad("unexpected extra arrays"));
    }
    Ok(model)
}
