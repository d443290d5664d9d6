//! Learned weights of the residual module and their on-disk container.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "S2CP"
//! version    u32      FORMAT_VERSION
//! dtype      u32      0 = f32, 1 = f64
//! text_dim   u32
//! shape_dim  u32
//! attn_dim   u32
//! hidden_dim u32
//! heads      u32
//! blocks     u32
//! tensors    u32      number of tensor records
//! per tensor:
//!   name_len u16, name (UTF-8), ndim u8, dims u32 × ndim, values (dtype) × prod(dims)
//! checksum   u64      first 8 bytes of SHA-256 over everything above
//! ```
//!
//! Tensors appear in [`Shape2ClipParams::named_tensors`] order.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_rng, hash64, normal_vec};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BLOCKS: usize = 6;
const MAGIC: &[u8; 4] = b"S2CP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub text_dim: usize,
    pub shape_dim: usize,
    /// Total query/key width across heads.
    pub attn_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl ModelDims {
    pub fn new(text_dim: usize, shape_dim: usize, attn_dim: usize, hidden_dim: usize) -> Self {
        Self {
            text_dim,
            shape_dim,
            attn_dim,
            hidden_dim,
            heads: 1,
            blocks: DEFAULT_BLOCKS,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("text_dim", self.text_dim),
            ("shape_dim", self.shape_dim),
            ("attn_dim", self.attn_dim),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.attn_dim % self.heads != 0 {
            return Err(Error::invalid(
                "heads",
                format!("attn_dim {} is not divisible by {} heads", self.attn_dim, self.heads),
            ));
        }
        Ok(())
    }
}

/// One cross-attention block: pre-norm attention sublayer then pre-norm MLP sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_norm_gamma: Array1<f64>,
    pub attn_norm_beta: Array1<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub mlp_norm_gamma: Array1<f64>,
    pub mlp_norm_beta: Array1<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape2ClipParams {
    pub dims: ModelDims,
    pub blocks: Vec<BlockParams>,
    pub final_norm_gamma: Array1<f64>,
    pub final_norm_beta: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

fn scaled_normal(seed: u64, label: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = derive_rng(seed, label);
    // rounded through f32 so default checkpoints round-trip losslessly
    let vals = normal_vec(&mut rng, rows * cols, 1.0 / (rows as f64).sqrt())
        .into_iter()
        .map(|v| v as f32 as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), vals).expect("sized")
}

/// Seeded scaled-normal weights; the output projection starts at zero.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<Shape2ClipParams> {
    dims.validate()?;
    let ModelDims {
        text_dim: dt,
        shape_dim: ds,
        attn_dim: d,
        hidden_dim: dh,
        ..
    } = dims;
    let blocks = (0..dims.blocks)
        .map(|b| BlockParams {
            attn_norm_gamma: Array1::ones(dt),
            attn_norm_beta: Array1::zeros(dt),
            w_q: scaled_normal(seed, &format!("block{b}.w_q"), dt, d),
            w_k: scaled_normal(seed, &format!("block{b}.w_k"), ds, d),
            w_v: scaled_normal(seed, &format!("block{b}.w_v"), ds, d),
            w_o: scaled_normal(seed, &format!("block{b}.w_o"), d, dt),
            mlp_norm_gamma: Array1::ones(dt),
            mlp_norm_beta: Array1::zeros(dt),
            mlp_w1: scaled_normal(seed, &format!("block{b}.mlp_w1"), dt, dh),
            mlp_b1: Array1::zeros(dh),
            mlp_w2: scaled_normal(seed, &format!("block{b}.mlp_w2"), dh, dt),
            mlp_b2: Array1::zeros(dt),
        })
        .collect();
    Ok(Shape2ClipParams {
        dims,
        blocks,
        final_norm_gamma: Array1::ones(dt),
        final_norm_beta: Array1::zeros(dt),
        w_out: Array2::zeros((dt, dt)),
        b_out: Array1::zeros(dt),
    })
}

impl Shape2ClipParams {
    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.named_tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 12 + 4);
        for (b, blk) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}.attn_norm_gamma"), blk.attn_norm_gamma.view().into_dyn()));
            out.push((format!("block{b}.attn_norm_beta"), blk.attn_norm_beta.view().into_dyn()));
            out.push((format!("block{b}.w_q"), blk.w_q.view().into_dyn()));
            out.push((format!("block{b}.w_k"), blk.w_k.view().into_dyn()));
            out.push((format!("block{b}.w_v"), blk.w_v.view().into_dyn()));
            out.push((format!("block{b}.w_o"), blk.w_o.view().into_dyn()));
            out.push((format!("block{b}.mlp_norm_gamma"), blk.mlp_norm_gamma.view().into_dyn()));
            out.push((format!("block{b}.mlp_norm_beta"), blk.mlp_norm_beta.view().into_dyn()));
            out.push((format!("block{b}.mlp_w1"), blk.mlp_w1.view().into_dyn()));
            out.push((format!("block{b}.mlp_b1"), blk.mlp_b1.view().into_dyn()));
            out.push((format!("block{b}.mlp_w2"), blk.mlp_w2.view().into_dyn()));
            out.push((format!("block{b}.mlp_b2"), blk.mlp_b2.view().into_dyn()));
        }
        out.push(("final_norm_gamma".into(), self.final_norm_gamma.view().into_dyn()));
        out.push(("final_norm_beta".into(), self.final_norm_beta.view().into_dyn()));
        out.push(("w_out".into(), self.w_out.view().into_dyn()));
        out.push(("b_out".into(), self.b_out.view().into_dyn()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 12 + 4);
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{b}.attn_norm_gamma"), blk.attn_norm_gamma.view_mut().into_dyn()));
            out.push((format!("block{b}.attn_norm_beta"), blk.attn_norm_beta.view_mut().into_dyn()));
            out.push((format!("block{b}.w_q"), blk.w_q.view_mut().into_dyn()));
            out.push((format!("block{b}.w_k"), blk.w_k.view_mut().into_dyn()));
            out.push((format!("block{b}.w_v"), blk.w_v.view_mut().into_dyn()));
            out.push((format!("block{b}.w_o"), blk.w_o.view_mut().into_dyn()));
            out.push((format!("block{b}.mlp_norm_gamma"), blk.mlp_norm_gamma.view_mut().into_dyn()));
            out.push((format!("block{b}.mlp_norm_beta"), blk.mlp_norm_beta.view_mut().into_dyn()));
            out.push((format!("block{b}.mlp_w1"), blk.mlp_w1.view_mut().into_dyn()));
            out.push((format!("block{b}.mlp_b1"), blk.mlp_b1.view_mut().into_dyn()));
            out.push((format!("block{b}.mlp_w2"), blk.mlp_w2.view_mut().into_dyn()));
            out.push((format!("block{b}.mlp_b2"), blk.mlp_b2.view_mut().into_dyn()));
        }
        out.push(("final_norm_gamma".into(), self.final_norm_gamma.view_mut().into_dyn()));
        out.push(("final_norm_beta".into(), self.final_norm_beta.view_mut().into_dyn()));
        out.push(("w_out".into(), self.w_out.view_mut().into_dyn()));
        out.push(("b_out".into(), self.b_out.view_mut().into_dyn()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.named_tensors();
        for ((_, mut dst), (_, s)) in self.named_tensors_mut().into_iter().zip(src) {
            dst.scaled_add(scale, &s);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.named_tensors()
            .iter()
            .zip(other.named_tensors())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let lossless_f32 = self
            .named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|&v| (v as f32) as f64 == v || v.is_nan()));
        let dims = self.dims;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            if lossless_f32 { 0 } else { 1 },
            dims.text_dim as u32,
            dims.shape_dim as u32,
            dims.attn_dim as u32,
            dims.hidden_dim as u32,
            dims.heads as u32,
            dims.blocks as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let tensors = self.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.iter() {
                if lossless_f32 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let checksum = hash64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptFile("missing magic header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != hash64(body) {
            return Err(Error::CorruptFile("checksum mismatch (truncated or modified file)".into()));
        }
        let dtype = r.u32()?;
        if dtype > 1 {
            return Err(Error::CorruptFile(format!("unknown dtype code {dtype}")));
        }
        let dims = ModelDims {
            text_dim: r.u32()? as usize,
            shape_dim: r.u32()? as usize,
            attn_dim: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            heads: r.u32()? as usize,
            blocks: r.u32()? as usize,
        };
        dims.validate().map_err(|e| Error::CorruptFile(e.to_string()))?;
        let mut params = init_params(dims, 0)?;
        let count = r.u32()? as usize;
        let mut slots = params.named_tensors_mut();
        if count != slots.len() {
            return Err(Error::CorruptFile(format!("expected {} tensors, found {count}", slots.len())));
        }
        for (name, slot) in slots.iter_mut() {
            let name_len = r.u16()? as usize;
            let found =
                std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::CorruptFile("tensor name is not UTF-8".into()))?;
            if found != name {
                return Err(Error::CorruptFile(format!("expected tensor `{name}`, found `{found}`")));
            }
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::CorruptFile(format!(
                    "tensor `{name}` has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            for v in slot.iter_mut() {
                *v = if dtype == 0 {
                    f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))
                };
            }
        }
        drop(slots);
        if r.pos != body.len() {
            return Err(Error::CorruptFile("trailing bytes after tensors".into()));
        }
        Ok(params)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

pub fn save_params(params: &Shape2ClipParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a parameter file; with `expected` set, its dims must match exactly.
pub fn load_params(path: impl AsRef<Path>, expected: Option<&ModelDims>) -> Result<Shape2ClipParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = Shape2ClipParams::from_bytes(&bytes)?;
    if let Some(exp) = expected {
        if &params.dims != exp {
            return Err(Error::dims(
                format!("parameter file {}", path.display()),
                format!("{exp:?}"),
                format!("{:?}", params.dims),
            ));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims::new(16, 8, 12, 24)
    }

    fn perturbed(seed: u64) -> Shape2ClipParams {
        let mut p = init_params(dims(), seed).unwrap();
        let mut rng = derive_rng(seed, "perturb");
        for (_, mut t) in p.named_tensors_mut() {
            let noise = normal_vec(&mut rng, t.len(), 0.3);
            for (v, n) in t.iter_mut().zip(noise) {
                *v += n;
            }
        }
        p
    }

    #[test]
    fn init_is_seeded_and_final_layer_zero() {
        let a = init_params(dims(), 1).unwrap();
        assert_eq!(a, init_params(dims(), 1).unwrap());
        let b = init_params(dims(), 2).unwrap();
        assert!(a.blocks.iter().zip(&b.blocks).any(|(x, y)| x.w_q != y.w_q));
        assert!(a.w_out.iter().all(|&v| v == 0.0));
        assert!(a.b_out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_params(ModelDims::new(0, 8, 4, 4), 0).is_err());
        assert!(init_params(ModelDims::new(16, 8, 6, 4).with_heads(4), 0).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32_and_f64_payloads() {
        let dir = tempfile::tempdir().unwrap();
        for p in [init_params(dims(), 5).unwrap(), perturbed(6)] {
            let path = dir.path().join("p.bin");
            save_params(&p, &path).unwrap();
            let back = load_params(&path, Some(&p.dims)).unwrap();
            assert_eq!(back.max_abs_diff(&p), 0.0);
            for ((_, a), (_, b)) in back.named_tensors().iter().zip(p.named_tensors()) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = init_params(dims(), 5).unwrap().to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Shape2ClipParams::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptFile(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = init_params(dims(), 5).unwrap().to_bytes();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Shape2ClipParams::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn loading_into_other_dims_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_params(&init_params(dims(), 1).unwrap(), &path).unwrap();
        let want = ModelDims::new(32, 8, 12, 24);
        assert!(matches!(
            load_params(&path, Some(&want)),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
