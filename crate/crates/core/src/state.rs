//! Final-state save/load (`.dppt`): trained weights, biases and pruning
//! logits plus the settings evaluation needs. Little-endian throughout.

use crate::error::{DppError, Result};
use crate::granularity::{GranularityLevel, GranularitySpec, LayerDims, LayerKind};
use crate::mask::build_logits;
use crate::model::{ArchId, ConvMeta, Layer, ModelState, Network};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"DPPT";
const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(DppError::Format(format!(
                "state file truncated at byte {}",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(state.network.arch.tag());
    out.push(state.bits);
    out.extend_from_slice(&state.beta.to_le_bytes());
    out.push(state.network.layers.len() as u8);
    for layer in &state.network.layers {
        out.push(match layer.kind {
            LayerKind::Fc => 0,
            LayerKind::Conv => 1,
        });
        out.push(match layer.logits.structure.level {
            GranularityLevel::Fine => 0,
            GranularityLevel::Medium => 1,
            GranularityLevel::Coarse => 2,
        });
        let meta = layer.conv.unwrap_or(ConvMeta { kh: 1, kw: 1, stride: 1 });
        out.push(meta.kh as u8);
        out.push(meta.kw as u8);
        out.push(meta.stride as u8);
        put_u32(&mut out, layer.dims.n_in as u32);
        put_u32(&mut out, layer.dims.a as u32);
        put_u32(&mut out, layer.dims.n_out as u32);
        put_u32(&mut out, layer.logits.structure.k as u32);
        put_f32s(&mut out, layer.weights.data());
        put_f32s(&mut out, layer.bias.data());
        put_f32s(&mut out, layer.logits.values.data());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(DppError::Format("not a .dppt state file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(DppError::Format(format!("unsupported state version {version}")));
    }
    let arch = ArchId::from_tag(r.u8()?)?;
    let bits = r.u8()?;
    let beta = r.f64()?;
    let n_layers = r.u8()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = match r.u8()? {
            0 => LayerKind::Fc,
            1 => LayerKind::Conv,
            other => return Err(DppError::Format(format!("bad layer kind {other}"))),
        };
        let level = match r.u8()? {
            0 => GranularityLevel::Fine,
            1 => GranularityLevel::Medium,
            2 => GranularityLevel::Coarse,
            other => return Err(DppError::Format(format!("bad granularity {other}"))),
        };
        let kh = r.u8()? as usize;
        let kw = r.u8()? as usize;
        let stride = r.u8()? as usize;
        let n_in = r.u32()? as usize;
        let a = r.u32()? as usize;
        let n_out = r.u32()? as usize;
        let k = r.u32()? as usize;
        let dims = LayerDims { n_in, a, n_out };
        let weights = Tensor::new(vec![n_in, a, n_out], r.f32s(dims.weight_count())?)?;
        let bias = Tensor::new(vec![n_out], r.f32s(n_out)?)?;
        let mut logits = build_logits(kind, dims, GranularitySpec { level, k }, 0.0f32)?;
        let lv = r.f32s(logits.values.numel())?;
        logits.values.data_mut().copy_from_slice(&lv);
        layers.push(Layer {
            kind,
            conv: match kind {
                LayerKind::Conv => Some(ConvMeta { kh, kw, stride }),
                LayerKind::Fc => None,
            },
            dims,
            weights,
            bias,
            logits,
        });
    }
    if r.at != bytes.len() {
        return Err(DppError::Format("trailing bytes in state file".into()));
    }
    Ok(ModelState {
        network: Network { arch, layers },
        bits,
        beta,
    })
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| DppError::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn state_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut network = Network::build(
            ArchId::LeNet5Caffe,
            &[
                GranularitySpec { level: GranularityLevel::Fine, k: 13 },
                GranularitySpec { level: GranularityLevel::Fine, k: 5 },
                GranularitySpec { level: GranularityLevel::Fine, k: 10 },
                GranularitySpec { level: GranularityLevel::Fine, k: 50 },
            ],
            &mut rng,
        )
        .unwrap();
        for layer in &mut network.layers {
            for v in layer.logits.values.data_mut() {
                *v = rng.random::<f32>() - 0.5;
            }
        }
        let state = ModelState { network, bits: 2, beta: 0.7 };
        let back = decode(&encode(&state)).unwrap();
        assert_eq!(back.bits, 2);
        assert_eq!(back.beta, 0.7);
        assert_eq!(back.network.arch, ArchId::LeNet5Caffe);
        for (a, b) in state.network.layers.iter().zip(&back.network.layers) {
            assert_eq!(a.weights.data(), b.weights.data());
            assert_eq!(a.bias.data(), b.bias.data());
            assert_eq!(a.logits.values.data(), b.logits.values.data());
            assert_eq!(a.conv, b.conv);
        }
    }

    #[test]
    fn garbage_rejected() {
        assert!(decode(b"nope").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let network = Network::build(
            ArchId::LeNet300_100,
            &[
                GranularitySpec { level: GranularityLevel::Fine, k: 15 },
                GranularitySpec { level: GranularityLevel::Fine, k: 6 },
                GranularitySpec { level: GranularityLevel::Fine, k: 6 },
            ],
            &mut rng,
        )
        .unwrap();
        let state = ModelState { network, bits: 32, beta: 1.0 };
        let bytes = encode(&state);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
