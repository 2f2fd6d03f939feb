//! Parameter container files: one JSON manifest line (layer shapes and
//! activations), a newline, then little-endian f64 flat arrays in manifest
//! order (per layer: W row-major, then b).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{QamError, Result};
use crate::nn::adam::AdamState;
use crate::nn::mlp::{Activation, Layer, ParameterSet};

#[derive(Debug, Serialize, Deserialize)]
struct LayerSpec {
    inp: usize,
    out: usize,
    act: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
}

fn layer_specs(params: &ParameterSet) -> Vec<LayerSpec> {
    params
        .layers
        .iter()
        .map(|l| LayerSpec { inp: l.in_dim(), out: l.out_dim(), act: l.act })
        .collect()
}

fn write_flat(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_f64(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_manifest(r: &mut impl Read) -> Result<Manifest> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(QamError::Format("manifest line exceeds 1 MiB".into()));
        }
    }
    Ok(serde_json::from_slice(&line)?)
}

fn read_params_body(r: &mut impl Read, specs: &[LayerSpec]) -> Result<ParameterSet> {
    let mut layers = Vec::with_capacity(specs.len());
    for s in specs {
        let w_flat = read_exact_f64(r, s.out * s.inp)?;
        let b_flat = read_exact_f64(r, s.out)?;
        let w = Array2::from_shape_vec((s.out, s.inp), w_flat)
            .map_err(|e| QamError::Format(e.to_string()))?;
        layers.push(Layer { w, b: Array1::from_vec(b_flat), act: s.act });
    }
    Ok(ParameterSet { layers })
}

pub fn save_params(path: &Path, params: &ParameterSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let manifest = Manifest {
        version: 1,
        kind: "params".into(),
        layers: layer_specs(params),
        step: None,
        lr: None,
    };
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for l in &params.layers {
        write_flat(&mut w, l.w.iter().copied())?;
        write_flat(&mut w, l.b.iter().copied())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParameterSet> {
    let mut r = BufReader::new(File::open(path)?);
    let manifest = read_manifest(&mut r)?;
    if manifest.kind != "params" {
        return Err(QamError::Format(format!(
            "expected kind 'params', found '{}'",
            manifest.kind
        )));
    }
    let params = read_params_body(&mut r, &manifest.layers)?;
    params.validate()?;
    Ok(params)
}

/// Adam moments use the same container with `kind: "adam"`: the manifest
/// carries the step counter and learning rate, the body holds the first
/// moments for every layer followed by the second moments.
pub fn save_adam(path: &Path, state: &AdamState, like: &ParameterSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let manifest = Manifest {
        version: 1,
        kind: "adam".into(),
        layers: layer_specs(like),
        step: Some(state.step),
        lr: Some(state.lr),
    };
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    let (m, v) = state.moments();
    for (mw, mb) in m {
        write_flat(&mut w, mw.iter().copied())?;
        write_flat(&mut w, mb.iter().copied())?;
    }
    for (vw, vb) in v {
        write_flat(&mut w, vw.iter().copied())?;
        write_flat(&mut w, vb.iter().copied())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_adam(path: &Path, like: &ParameterSet) -> Result<AdamState> {
    let mut r = BufReader::new(File::open(path)?);
    let manifest = read_manifest(&mut r)?;
    if manifest.kind != "adam" {
        return Err(QamError::Format(format!(
            "expected kind 'adam', found '{}'",
            manifest.kind
        )));
    }
    let lr = manifest.lr.unwrap_or(3e-4);
    let mut state = AdamState::new(like, lr);
    state.step = manifest.step.unwrap_or(0);
    let m_set = read_params_body(&mut r, &manifest.layers)?;
    let v_set = read_params_body(&mut r, &manifest.layers)?;
    let (m, v) = state.moments_mut();
    for (slot, l) in m.iter_mut().zip(m_set.layers) {
        slot.0 = l.w;
        slot.1 = l.b;
    }
    for (slot, l) in v.iter_mut().zip(v_set.layers) {
        slot.0 = l.w;
        slot.1 = l.b;
    }
    Ok(state)
}
