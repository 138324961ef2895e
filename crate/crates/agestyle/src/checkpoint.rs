//! Versioned binary checkpoints. Layout: an 8-byte magic, a u32 format
//! version, a u64 header length, a JSON header (config, step counter, RNG
//! state, optimizer step counts, tensor directory), then every tensor as
//! raw little-endian f32 in directory order: generator parameters,
//! discriminator parameters, and the four moment sets.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Discriminator, Generator, ParamSet};
use crate::trainer::{AdamState, TrainState};

const MAGIC: &[u8; 8] = b"AGSTCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: crate::trainer::TrainConfig,
    step: u64,
    rng: ChaCha8Rng,
    opt_g_t: u64,
    opt_d_t: u64,
    g_params: Vec<(String, Vec<usize>)>,
    d_params: Vec<(String, Vec<usize>)>,
}

fn directory(params: &ParamSet) -> Vec<(String, Vec<usize>)> {
    params
        .iter()
        .map(|(name, a)| (name.to_string(), a.shape().to_vec()))
        .collect()
}

fn write_tensor<W: Write>(w: &mut W, a: &ArrayD<f32>) -> std::io::Result<()> {
    for &v in a.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        rng: state.rng.clone(),
        opt_g_t: state.opt_g.t,
        opt_d_t: state.opt_d.t,
        g_params: directory(&state.generator.params),
        d_params: directory(&state.discriminator.params),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("header serialization: {e}"),
    })?;

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for a in state.generator.params.arrays() {
        write_tensor(&mut w, a).map_err(io_err)?;
    }
    for a in state.discriminator.params.arrays() {
        write_tensor(&mut w, a).map_err(io_err)?;
    }
    for moments in [&state.opt_g, &state.opt_d] {
        for a in moments.m.iter().chain(moments.v.iter()) {
            write_tensor(&mut w, a).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_tensor(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Option<ArrayD<f32>> {
    let n: usize = shape.iter().product();
    let end = offset.checked_add(4 * n)?;
    if end > bytes.len() {
        return None;
    }
    let mut values = Vec::with_capacity(n);
    for chunk in bytes[*offset..end].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    *offset = end;
    ArrayD::from_shape_vec(IxDyn(shape), values).ok()
}

fn read_set(
    bytes: &[u8],
    offset: &mut usize,
    dir: &[(String, Vec<usize>)],
) -> Option<Vec<(String, ArrayD<f32>)>> {
    dir.iter()
        .map(|(name, shape)| Some((name.clone(), read_tensor(bytes, offset, shape)?)))
        .collect()
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 20 {
        return Err(fail("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(header_len)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| fail("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| fail(&format!("header parse: {e}")))?;

    // The tensor directory must match what the config would build, so a
    // loaded state is indistinguishable from a freshly constructed one.
    let template_g = Generator::init(header.config.generator_spec(), 0)?;
    let template_d = Discriminator::init(header.config.discriminator_spec(), 0)?;
    if directory(&template_g.params) != header.g_params {
        return Err(fail("generator parameter layout does not match config"));
    }
    if directory(&template_d.params) != header.d_params {
        return Err(fail("discriminator parameter layout does not match config"));
    }

    let mut offset = body_start;
    let truncated = || fail("tensor data truncated");
    let g_entries = read_set(&bytes, &mut offset, &header.g_params).ok_or_else(truncated)?;
    let d_entries = read_set(&bytes, &mut offset, &header.d_params).ok_or_else(truncated)?;
    let mut moment_set = |dir: &[(String, Vec<usize>)]| -> Result<Vec<ArrayD<f32>>> {
        dir.iter()
            .map(|(_, shape)| read_tensor(&bytes, &mut offset, shape).ok_or_else(truncated))
            .collect()
    };
    let opt_g = AdamState {
        t: header.opt_g_t,
        m: moment_set(&header.g_params)?,
        v: moment_set(&header.g_params)?,
    };
    let opt_d = AdamState {
        t: header.opt_d_t,
        m: moment_set(&header.d_params)?,
        v: moment_set(&header.d_params)?,
    };
    if offset != bytes.len() {
        return Err(fail("trailing bytes after tensor data"));
    }

    Ok(TrainState {
        step: header.step,
        generator: Generator {
            spec: header.config.generator_spec(),
            params: ParamSet::new(g_entries),
        },
        discriminator: Discriminator {
            spec: header.config.discriminator_spec(),
            params: ParamSet::new(d_entries),
        },
        opt_g,
        opt_d,
        rng: header.rng,
        config: header.config,
    })
}
