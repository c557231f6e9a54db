//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DHPC` | version u32 | layer count u32 |
//! rho u32 | variant u8 | Hough bins u32 | mu f32 | l1 weight f32, then per
//! layer: layer index u32, in channels u32, hidden u32, out channels u32,
//! followed by `mlp.w1, mlp.b1, mlp.w2, mlp.b2, transform.w, transform.b` as
//! f32. A CRC-32 of everything before it closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gating::{GateVariant, GatingModule, LayerParams};
use crate::matching::HoughConfig;
use crate::training::{ModelParams, PipelineConfig};
use crate::util::{write_atomic, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DHPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn variant_code(v: GateVariant) -> u8 {
    match v {
        GateVariant::Gumbel => 0,
        GateVariant::Sigmoid => 1,
        GateVariant::SigmoidMu => 2,
        GateVariant::SigmoidL1 => 3,
    }
}

fn variant_from_code(c: u8) -> Result<GateVariant> {
    Ok(match c {
        0 => GateVariant::Gumbel,
        1 => GateVariant::Sigmoid,
        2 => GateVariant::SigmoidMu,
        3 => GateVariant::SigmoidL1,
        other => return Err(Error::Format(format!("unknown gate variant code {other}"))),
    })
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.num_layers() as u32).to_le_bytes());
    out.extend_from_slice(&(c.rho as u32).to_le_bytes());
    out.push(variant_code(c.variant));
    out.extend_from_slice(&(c.hough.bins_per_axis as u32).to_le_bytes());
    out.extend_from_slice(&(c.mu as f32).to_le_bytes());
    out.extend_from_slice(&(c.l1_lambda as f32).to_le_bytes());
    for m in &params.modules {
        for v in [m.layer_index, m.in_channels, m.hidden, m.out_channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for g in m.params.groups() {
            for v in g {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 8 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let mut r = ByteReader::new(body);
    r.take(4)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Validation("checkpoint checksum mismatch".into()));
    }
    let layers = r.u32()? as usize;
    let rho = r.u32()? as usize;
    let variant = variant_from_code(r.take(1)?[0])?;
    let bins = r.u32()? as usize;
    let mu = r.f32()? as f64;
    let l1_lambda = r.f32()? as f64;
    let config = PipelineConfig {
        rho,
        mu,
        hough: HoughConfig {
            bins_per_axis: bins,
            ..HoughConfig::default()
        },
        variant,
        l1_lambda,
    };
    config.validate().map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
    let mut modules = Vec::with_capacity(layers);
    for l in 0..layers {
        let layer_index = r.u32()? as usize;
        let c = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let out = r.u32()? as usize;
        if layer_index != l || rho == 0 || c == 0 || c % rho != 0 || out != c / rho || hidden == 0 {
            return Err(Error::Validation(format!("inconsistent record for layer {l}")));
        }
        let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| Ok(r.f32()? as f64)).collect() };
        let params = LayerParams {
            mlp_w1: read(hidden * c)?,
            mlp_b1: read(hidden)?,
            mlp_w2: read(2 * hidden)?,
            mlp_b2: read(2)?,
            tf_w: read(c * out)?,
            tf_b: read(out)?,
        };
        modules.push(GatingModule {
            layer_index,
            in_channels: c,
            hidden,
            out_channels: out,
            params,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Validation(format!("{} trailing bytes in checkpoint", r.remaining())));
    }
    Ok(ModelParams { modules, config })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
