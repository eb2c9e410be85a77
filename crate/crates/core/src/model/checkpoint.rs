//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "AVGZCKPT"
//! version      u32      currently 1
//! dims         5 x u32  d_in_a, d_in_v, d_model, d_hidden, d_out
//! dropout      f64
//! switches     4 x u8   label embedding, modality, loss-term bits, reserved (0)
//! seed         u64
//! 8 blocks in BLOCK_NAMES order, each:
//!   in, out    2 x u32
//!   momentum   f64
//!   eps        f64
//!   weight     in*out x f32 (row-major, in x out)
//!   bias, gamma, beta, running_mean, running_var   out x f32 each
//! ```
//!
//! Nothing may follow the last block.

use std::path::Path;

use super::config::{AblationSwitches, ModelDims};
use super::params::{block_shapes, ModelParams, BLOCK_NAMES};
use crate::error::{Error, Result};
use crate::nn::{AffineParams, BatchNormState, FFBlockParams, Matrix};

pub const MAGIC: &[u8; 8] = b"AVGZCKPT";
pub const VERSION: u32 = 1;

impl ModelParams<f32> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * 6 * self.learnable_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let d = &self.dims;
        for v in [d.d_in_a, d.d_in_v, d.d_model, d.d_hidden, d.d_out] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&d.dropout_rate.to_le_bytes());
        out.extend_from_slice(&[
            self.switches.label_code(),
            self.switches.modality_code(),
            self.switches.loss_terms.to_bits(),
            0,
        ]);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for b in self.blocks() {
            out.extend_from_slice(&(b.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(b.out_dim() as u32).to_le_bytes());
            out.extend_from_slice(&b.bn.momentum.to_le_bytes());
            out.extend_from_slice(&b.bn.eps.to_le_bytes());
            for xs in [
                b.affine.weight.as_slice(),
                &b.affine.bias,
                &b.bn.gamma,
                &b.bn.beta,
                &b.bn.running_mean,
                &b.bn.running_var,
            ] {
                for x in xs {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mut dim = || -> Result<usize> { Ok(r.u32()? as usize) };
        let (d_in_a, d_in_v, d_model, d_hidden, d_out) = (dim()?, dim()?, dim()?, dim()?, dim()?);
        let dims = ModelDims {
            d_in_a,
            d_in_v,
            d_model,
            d_hidden,
            d_out,
            dropout_rate: r.f64()?,
        };
        dims.validate()
            .map_err(|e| Error::Checkpoint(format!("header dims: {e}")))?;
        let codes = r.take(4)?;
        let switches = AblationSwitches::from_codes(codes[0], codes[1], codes[2])
            .filter(|_| codes[3] == 0)
            .ok_or_else(|| Error::Checkpoint(format!("bad switch codes {codes:?}")))?;
        switches
            .validate()
            .map_err(|e| Error::Checkpoint(format!("header switches: {e}")))?;
        let seed = r.u64()?;

        let shapes = block_shapes(&dims, &switches);
        let mut blocks = Vec::with_capacity(8);
        for (name, (want_in, want_out)) in BLOCK_NAMES.iter().zip(shapes) {
            let (i, o) = (r.u32()? as usize, r.u32()? as usize);
            if (i, o) != (want_in, want_out) {
                return Err(Error::Checkpoint(format!(
                    "block {name} is {i}x{o}, header dims imply {want_in}x{want_out}"
                )));
            }
            let momentum = r.f64()?;
            let eps = r.f64()?;
            if !(momentum > 0.0 && momentum <= 1.0 && eps > 0.0) {
                return Err(Error::Checkpoint(format!(
                    "block {name} has invalid batch-norm settings"
                )));
            }
            let weight = Matrix::from_vec(i, o, r.f32s(i * o)?)?;
            let bias = r.f32s(o)?;
            let gamma = r.f32s(o)?;
            let beta = r.f32s(o)?;
            let running_mean = r.f32s(o)?;
            let running_var = r.f32s(o)?;
            if running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::Checkpoint(format!("block {name} has negative running variance")));
            }
            blocks.push(FFBlockParams {
                affine: AffineParams { weight, bias },
                bn: BatchNormState {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum,
                    eps,
                },
                dropout_rate: dims.dropout_rate,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("eight blocks");
        let params = ModelParams {
            dims,
            switches,
            seed,
            o_enc: next(),
            o_proj1: next(),
            o_proj2: next(),
            w_enc: next(),
            w_proj: next(),
            d_o1: next(),
            d_o2: next(),
            d_w: next(),
        };
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_checkpoint_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Checkpoint("block size overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
