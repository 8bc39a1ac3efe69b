//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`, parameters little-endian `f32`):
//!
//! ```text
//! "STEERNN1"
//! input rank, input extents...
//! layer count
//! per layer: kind tag (u8), kind config, tensor count,
//!            per tensor: rank, extents..., values...
//! ```
//!
//! Kind config is `out, kh, kw` for Conv, `units` for Dense, the rate as `f32`
//! for Dropout and empty otherwise.

use std::io::{Read, Write};

use crate::{LayerKind, Network, NnError, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STEERNN1";

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NnError::Checkpoint(format!("{v} does not fit u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint<W: Write>(net: &Network<f32>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, net.input_shape().len())?;
    for &e in net.input_shape() {
        put_u32(&mut w, e)?;
    }
    put_u32(&mut w, net.layers().len())?;
    for layer in net.layers() {
        let kind = layer.kind();
        w.write_all(&[kind.tag()])?;
        match kind {
            LayerKind::Conv {
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                put_u32(&mut w, out_channels)?;
                put_u32(&mut w, kernel_h)?;
                put_u32(&mut w, kernel_w)?;
            }
            LayerKind::Dense { out_units } => put_u32(&mut w, out_units)?,
            LayerKind::Dropout { rate } => w.write_all(&rate.to_le_bytes())?,
            _ => {}
        }
        put_u32(&mut w, layer.params().len())?;
        for p in layer.params() {
            put_u32(&mut w, p.shape().len())?;
            for &e in p.shape() {
                put_u32(&mut w, e)?;
            }
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a checkpoint into a fresh network in eval mode.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Network<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let rank = get_u32(&mut r)?;
    if rank == 0 || rank > 8 {
        return Err(NnError::Checkpoint(format!("implausible input rank {rank}")));
    }
    let input: Vec<usize> = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<_>>()?;
    let n_layers = get_u32(&mut r)?;
    let mut kinds = Vec::with_capacity(n_layers);
    let mut tensors = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = match tag[0] {
            0 => LayerKind::Conv {
                out_channels: get_u32(&mut r)?,
                kernel_h: get_u32(&mut r)?,
                kernel_w: get_u32(&mut r)?,
            },
            1 => LayerKind::MaxPool,
            2 => LayerKind::Dense {
                out_units: get_u32(&mut r)?,
            },
            3 => LayerKind::Relu,
            4 => LayerKind::Tanh,
            5 => LayerKind::Softmax,
            6 => {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                LayerKind::Dropout {
                    rate: f32::from_le_bytes(b),
                }
            }
            t => return Err(NnError::Checkpoint(format!("unknown layer tag {t}"))),
        };
        kinds.push(kind);
        let count = get_u32(&mut r)?;
        let mut layer_tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = get_u32(&mut r)?;
            let shape: Vec<usize> = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            layer_tensors.push(Tensor::new(shape, data)?);
        }
        tensors.push(layer_tensors);
    }
    let mut net = Network::<f32>::from_kinds(&input, &kinds, 0)
        .map_err(|e| NnError::Checkpoint(format!("inconsistent topology: {e}")))?;
    for (i, layer_tensors) in tensors.into_iter().enumerate() {
        let layer = net.layer_mut(i);
        if layer.params().len() != layer_tensors.len()
            || layer
                .params()
                .iter()
                .zip(&layer_tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NnError::Checkpoint(format!("layer {i} parameter shapes disagree with topology")));
        }
        layer.params_mut().clone_from_slice(&layer_tensors);
    }
    net.set_mode(crate::Mode::Eval);
    Ok(net)
}
