//! Structured-sparse model serialization (`.dpps`) and compression
//! accounting.
//!
//! Layout: little-endian, 4-byte magic "DPPS", version u16, architecture
//! tag u8, layer count u8, then length-prefixed per-layer records. Each
//! record stores the granularity, dims, K, bit width, a bit-packed index
//! stream, a bit-packed value stream and a 32-bit bias stream, padded to
//! byte boundaries.
//!
//! Storage accounting follows the per-granularity stored-value counts
//! (fine: 2S, medium: S + K*n_out, coarse: S) with indices accounted at the
//! same width as values; the physical index stream is packed at the minimal
//! decodable width instead, which only ever makes the file smaller than the
//! accounted size.

use crate::error::{DppError, Result};
use crate::granularity::{GranularityLevel, GranularitySpec, LayerDims, LayerKind, MaskStructure};
use crate::model::{ArchId, ConvMeta, Layer, ModelState, Network};
use crate::quant::QuantSpec;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DPPS";
pub const VERSION: u16 = 1;

// ---------------------------------------------------------------- bit io

struct BitWriter {
    bytes: Vec<u8>,
    bit: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), bit: 0 }
    }

    fn put(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value < (1u64 << width));
        for i in 0..width {
            if self.bit == 0 {
                self.bytes.push(0);
            }
            let b = (value >> i) & 1;
            *self.bytes.last_mut().unwrap() |= (b as u8) << self.bit;
            self.bit = (self.bit + 1) % 8;
        }
    }

    fn align(&mut self) {
        self.bit = 0;
    }

    fn into_bytes(mut self) -> Vec<u8> {
        self.align();
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn get(&mut self, width: u32) -> Result<u64> {
        let mut v = 0u64;
        for i in 0..width {
            let byte = self.pos / 8;
            if byte >= self.bytes.len() {
                return Err(DppError::Format("bit stream exhausted".into()));
            }
            let bit = (self.bytes[byte] >> (self.pos % 8)) & 1;
            v |= (bit as u64) << i;
            self.pos += 1;
        }
        Ok(v)
    }

    fn align(&mut self) {
        self.pos = self.pos.div_ceil(8) * 8;
    }

    fn byte_offset(&self) -> usize {
        self.pos / 8
    }
}

/// Bits needed to address `c` classes (0 when there is a single class).
fn index_width(c: usize) -> u32 {
    if c <= 1 {
        0
    } else {
        usize::BITS - (c - 1).leading_zeros()
    }
}

// ------------------------------------------------------------- accounting

/// Stored-value count of a sparse layer: active values plus the indexing
/// overhead of the granularity.
pub fn stored_values(level: GranularityLevel, s: u64, k: usize, n_out: usize) -> u64 {
    match level {
        GranularityLevel::Fine => 2 * s,
        GranularityLevel::Medium => s + (k * n_out) as u64,
        GranularityLevel::Coarse => s,
    }
}

/// Compression rate of a layer versus its 32-bit dense form: `p` dense
/// weights against the stored values at width `bits`.
pub fn compression_rate(
    p: u64,
    s: u64,
    bits: u8,
    level: GranularityLevel,
    k: usize,
    n_out: usize,
) -> f64 {
    let v = stored_values(level, s, k, n_out);
    (p as f64 * 32.0) / (v as f64 * bits as f64)
}

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub index: usize,
    pub kind: LayerKind,
    pub level: GranularityLevel,
    pub bits: u8,
    pub k: usize,
    /// Dense weight count of the original (unshrunk) layer.
    pub dense_params: u64,
    /// Active weights stored.
    pub active: u64,
    pub stored_values: u64,
    pub remaining_fraction: f64,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    pub total_dense: u64,
    pub total_active: u64,
    pub total_stored_values: u64,
    pub bits: u8,
    pub total_rate: f64,
    pub remaining_fraction: f64,
}

// ----------------------------------------------------------------- export

fn effective_mask(structure: &MaskStructure, full: &Tensor<f32>) -> Result<Vec<Vec<usize>>> {
    if full.numel() != structure.dims.weight_count() {
        return Err(DppError::ShapeMismatch(format!(
            "mask has {} entries for dims {:?}",
            full.numel(),
            structure.dims
        )));
    }
    let mut per_d = Vec::with_capacity(structure.d);
    for d in 0..structure.d {
        let mut selected = Vec::with_capacity(structure.k);
        for c in 0..structure.c {
            let v = full.data()[structure.weight_index(d, c, 0)];
            for t in 1..structure.tie_block {
                if full.data()[structure.weight_index(d, c, t)] != v {
                    return Err(DppError::Format(format!(
                        "mask breaks tying at distribution {d}, class {c}"
                    )));
                }
            }
            if v == 1.0 {
                selected.push(c);
            } else if v != 0.0 {
                return Err(DppError::Format(format!(
                    "mask entry {v} is not binary at distribution {d}, class {c}"
                )));
            }
        }
        if selected.len() != structure.k {
            return Err(DppError::Format(format!(
                "mask popcount {} != K = {} in distribution {d}",
                selected.len(),
                structure.k
            )));
        }
        per_d.push(selected);
    }
    Ok(per_d)
}

fn put_value(w: &mut BitWriter, value: f32, quant: QuantSpec) {
    if quant.is_identity() {
        w.put(value.to_bits() as u64, 32);
    } else {
        w.put(quant.encode(value as f64), quant.bits as u32);
    }
}

fn weight_at(layer: &Layer, ci: usize, ka: usize, co: usize) -> f32 {
    layer.weights.data()[(ci * layer.dims.a + ka) * layer.dims.n_out + co]
}

/// Serialize a model with one frozen hard mask per layer. Coarse layers are
/// physically shrunk: pruned filters (and their biases) are dropped, along
/// with the matching input channels of the following layer.
pub fn export(state: &ModelState, masks: &[Tensor<f32>]) -> Result<Vec<u8>> {
    let net = &state.network;
    if masks.len() != net.layers.len() {
        return Err(DppError::ShapeMismatch(format!(
            "{} masks for {} layers",
            masks.len(),
            net.layers.len()
        )));
    }
    let quant = QuantSpec::new(state.bits)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(net.arch.tag());
    out.push(net.layers.len() as u8);

    // channels of the previous layer kept by a coarse shrink, if any
    let mut kept_in: Option<Vec<usize>> = None;
    for (li, (layer, mask)) in net.layers.iter().zip(masks).enumerate() {
        let st = layer.logits.structure;
        let selected = effective_mask(&st, mask)?;
        let orig = layer.dims;

        // restrict input channels if the previous layer was coarse-pruned
        let in_rows: Vec<usize> = match &kept_in {
            None => (0..orig.n_in).collect(),
            Some(kept) => {
                let mult = orig.n_in / prev_channel_count(li, &net.layers)?;
                let mut rows = Vec::with_capacity(kept.len() * mult);
                for &ch in kept {
                    rows.extend(ch * mult..(ch + 1) * mult);
                }
                if matches!(
                    (st.level, st.kind),
                    (GranularityLevel::Medium, _) | (GranularityLevel::Fine, LayerKind::Fc)
                ) {
                    for (d, sel) in selected.iter().enumerate() {
                        if sel.iter().any(|c| !rows.contains(c)) {
                            return Err(DppError::Format(format!(
                                "layer {li} distribution {d} selects an input channel dropped \
                                 by the previous coarse layer; this chain is not exportable"
                            )));
                        }
                    }
                }
                rows
            }
        };
        let n_in = in_rows.len();

        let mut w = BitWriter::new();
        let mut bias_keep: Vec<usize> = (0..orig.n_out).collect();
        let (n_out, k) = match st.level {
            GranularityLevel::Coarse => {
                let kept = &selected[0];
                bias_keep = kept.clone();
                kept_in = Some(kept.clone());
                (kept.len(), st.k)
            }
            _ => {
                kept_in = None;
                (orig.n_out, st.k)
            }
        };

        // index stream; distributions over dropped input rows are skipped so
        // the stream matches the shrunk dims the record declares
        match st.level {
            GranularityLevel::Coarse => {}
            _ => {
                let width = index_width(match (st.level, st.kind) {
                    (GranularityLevel::Fine, LayerKind::Conv) => orig.a,
                    _ => n_in,
                });
                for (d, sel) in selected.iter().enumerate() {
                    if matches!((st.level, st.kind), (GranularityLevel::Fine, LayerKind::Conv)) {
                        let ci = d / orig.n_out;
                        if !in_rows.contains(&ci) {
                            continue;
                        }
                    }
                    for &c in sel {
                        let c_out = match (st.level, st.kind) {
                            (GranularityLevel::Fine, LayerKind::Conv) => c,
                            // remap input-channel classes into the shrunk space
                            _ => in_rows.binary_search(&c).map_err(|_| {
                                DppError::Format(format!("selected channel {c} was dropped"))
                            })?,
                        };
                        w.put(c_out as u64, width);
                    }
                }
                w.align();
            }
        }

        // value stream
        match (st.level, st.kind) {
            (GranularityLevel::Fine, LayerKind::Conv) => {
                // d = (ci, co) over original dims; skip dropped input rows
                for (d, sel) in selected.iter().enumerate() {
                    let ci = d / orig.n_out;
                    let co = d % orig.n_out;
                    if !in_rows.contains(&ci) {
                        continue;
                    }
                    for &ka in sel {
                        put_value(&mut w, weight_at(layer, ci, ka, co), quant);
                    }
                }
            }
            (GranularityLevel::Fine, LayerKind::Fc) | (GranularityLevel::Medium, _) => {
                for (co, sel) in selected.iter().enumerate() {
                    for &ci in sel {
                        for ka in 0..orig.a {
                            put_value(&mut w, weight_at(layer, ci, ka, co), quant);
                        }
                    }
                }
            }
            (GranularityLevel::Coarse, _) => {
                for &co in &selected[0] {
                    for &ci in &in_rows {
                        for ka in 0..orig.a {
                            put_value(&mut w, weight_at(layer, ci, ka, co), quant);
                        }
                    }
                }
            }
        }
        w.align();
        // bias stream, 32-bit always
        for &co in &bias_keep {
            w.put(layer.bias.data()[co].to_bits() as u64, 32);
        }
        let streams = w.into_bytes();

        let mut rec = Vec::new();
        rec.push(match layer.kind {
            LayerKind::Fc => 0u8,
            LayerKind::Conv => 1,
        });
        rec.push(match st.level {
            GranularityLevel::Fine => 0u8,
            GranularityLevel::Medium => 1,
            GranularityLevel::Coarse => 2,
        });
        rec.push(state.bits);
        let meta = layer.conv.unwrap_or(ConvMeta { kh: 1, kw: 1, stride: 1 });
        rec.push(meta.kh as u8);
        rec.push(meta.kw as u8);
        rec.push(meta.stride as u8);
        for v in [
            n_in as u32,
            orig.a as u32,
            n_out as u32,
            k as u32,
            orig.n_in as u32,
            orig.n_out as u32,
        ] {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        rec.extend_from_slice(&streams);

        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    Ok(out)
}

/// Channel count a coarse shrink divides the next layer's inputs by
/// (conv -> conv is 1:1; conv -> fc carries the spatial positions per
/// channel as a contiguous block).
fn prev_channel_count(li: usize, layers: &[Layer]) -> Result<usize> {
    let prev = &layers[li - 1];
    let this = &layers[li];
    if this.dims.n_in % prev.dims.n_out != 0 {
        return Err(DppError::Format(format!(
            "layer {li} input {} is not a multiple of previous output {}",
            this.dims.n_in, prev.dims.n_out
        )));
    }
    Ok(prev.dims.n_out)
}

// ----------------------------------------------------------------- import

#[derive(Debug, Clone)]
pub struct ImportedLayer {
    pub kind: LayerKind,
    pub level: GranularityLevel,
    pub bits: u8,
    pub k: usize,
    pub conv: Option<ConvMeta>,
    /// Physical dims of the stored record.
    pub dims: LayerDims,
    /// Original dense dims before any coarse shrink.
    pub orig: LayerDims,
    /// Dense weights with zeros at pruned positions; values dequantized.
    pub weights: Tensor<f32>,
    pub bias: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct SparseModel {
    pub arch: ArchId,
    pub layers: Vec<ImportedLayer>,
}

fn get_value(r: &mut BitReader, quant: QuantSpec) -> Result<f32> {
    if quant.is_identity() {
        Ok(f32::from_bits(r.get(32)? as u32))
    } else {
        Ok(quant.level_value(r.get(quant.bits as u32)?) as f32)
    }
}

pub fn import(bytes: &[u8]) -> Result<SparseModel> {
    let fail = |reason: &str, offset: usize| DppError::CorruptFile {
        path: "<dpps stream>".into(),
        reason: reason.into(),
        offset: offset as u64,
    };
    if bytes.len() < 8 {
        return Err(fail("truncated header", bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err(fail("bad magic", 0));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}"), 4));
    }
    let arch = ArchId::from_tag(bytes[6])?;
    let layer_count = bytes[7] as usize;
    let mut at = 8usize;
    let mut layers = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        if at + 4 > bytes.len() {
            return Err(fail("truncated record length", at));
        }
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        if at + len > bytes.len() {
            return Err(fail(&format!("record {li} overruns file"), at));
        }
        let rec = &bytes[at..at + len];
        at += len;
        if rec.len() < 30 {
            return Err(fail(&format!("record {li} too short"), at));
        }
        let kind = match rec[0] {
            0 => LayerKind::Fc,
            1 => LayerKind::Conv,
            other => return Err(fail(&format!("bad layer kind {other}"), at)),
        };
        let level = match rec[1] {
            0 => GranularityLevel::Fine,
            1 => GranularityLevel::Medium,
            2 => GranularityLevel::Coarse,
            other => return Err(fail(&format!("bad granularity {other}"), at)),
        };
        let bits = rec[2];
        let quant = QuantSpec::new(bits)?;
        let conv = match kind {
            LayerKind::Conv => Some(ConvMeta {
                kh: rec[3] as usize,
                kw: rec[4] as usize,
                stride: rec[5] as usize,
            }),
            LayerKind::Fc => None,
        };
        let mut nums = [0u32; 6];
        for (i, n) in nums.iter_mut().enumerate() {
            *n = u32::from_le_bytes(rec[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        }
        let [n_in, a, n_out, k, orig_n_in, orig_n_out] = nums.map(|v| v as usize);
        let dims = LayerDims { n_in, a, n_out };
        let orig = LayerDims { n_in: orig_n_in, a, n_out: orig_n_out };
        let st = GranularitySpec { level, k }.structure(kind, dims)?;

        let mut r = BitReader::new(&rec[30..]);
        let mut selected: Vec<Vec<usize>> = Vec::with_capacity(st.d);
        match level {
            GranularityLevel::Coarse => {
                selected.push((0..n_out).collect());
            }
            _ => {
                let width = index_width(st.c);
                for d in 0..st.d {
                    let mut sel = Vec::with_capacity(k);
                    for _ in 0..k {
                        let c = r.get(width)? as usize;
                        if c >= st.c {
                            return Err(fail(
                                &format!("index {c} out of range in record {li} distribution {d}"),
                                at,
                            ));
                        }
                        sel.push(c);
                    }
                    selected.push(sel);
                }
                r.align();
            }
        }

        let mut weights = Tensor::zeros(vec![n_in, a, n_out]);
        match (level, kind) {
            (GranularityLevel::Fine, LayerKind::Conv) => {
                for (d, sel) in selected.iter().enumerate() {
                    let ci = d / n_out;
                    let co = d % n_out;
                    for &ka in sel {
                        weights.data_mut()[(ci * a + ka) * n_out + co] = get_value(&mut r, quant)?;
                    }
                }
            }
            (GranularityLevel::Fine, LayerKind::Fc) | (GranularityLevel::Medium, _) => {
                for (co, sel) in selected.iter().enumerate() {
                    for &ci in sel {
                        for ka in 0..a {
                            weights.data_mut()[(ci * a + ka) * n_out + co] =
                                get_value(&mut r, quant)?;
                        }
                    }
                }
            }
            (GranularityLevel::Coarse, _) => {
                for co in 0..n_out {
                    for ci in 0..n_in {
                        for ka in 0..a {
                            weights.data_mut()[(ci * a + ka) * n_out + co] =
                                get_value(&mut r, quant)?;
                        }
                    }
                }
            }
        }
        r.align();
        let mut bias = Tensor::zeros(vec![n_out]);
        for b in bias.data_mut() {
            *b = f32::from_bits(r.get(32)? as u32);
        }
        if r.byte_offset() != rec.len() - 30 {
            return Err(fail(
                &format!(
                    "record {li} has {} trailing bytes",
                    rec.len() - 30 - r.byte_offset()
                ),
                at,
            ));
        }
        layers.push(ImportedLayer {
            kind,
            level,
            bits,
            k,
            conv,
            dims,
            orig,
            weights,
            bias,
        });
    }
    if at != bytes.len() {
        return Err(fail("trailing bytes after last record", at));
    }
    Ok(SparseModel { arch, layers })
}

impl SparseModel {
    /// Rebuild an inference network; weights are already masked and
    /// dequantized, so callers evaluate with all-ones masks at 32 bits.
    pub fn to_network(&self) -> Result<Network> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    kind: l.kind,
                    conv: l.conv,
                    dims: l.dims,
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                    logits: crate::mask::build_logits(
                        l.kind,
                        l.dims,
                        GranularitySpec { level: l.level, k: l.k },
                        0.0f32,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { arch: self.arch, layers })
    }

    pub fn all_ones_masks(&self) -> Vec<Tensor<f32>> {
        self.layers
            .iter()
            .map(|l| Tensor::filled(vec![l.dims.n_in, l.dims.a, l.dims.n_out], 1.0f32))
            .collect()
    }

    pub fn report(&self) -> CompressionReport {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut total_dense = 0u64;
        let mut total_active = 0u64;
        let mut total_stored = 0u64;
        let mut total_bits = 0u64;
        let mut bits = 32u8;
        for (i, l) in self.layers.iter().enumerate() {
            let st = GranularitySpec { level: l.level, k: l.k }
                .structure(l.kind, l.dims)
                .expect("imported record already validated");
            let dense = l.orig.weight_count() as u64;
            let active = st.active_weights() as u64;
            let stored = stored_values(l.level, active, l.k, l.dims.n_out);
            let rate = compression_rate(dense, active, l.bits, l.level, l.k, l.dims.n_out);
            layers.push(LayerReport {
                index: i,
                kind: l.kind,
                level: l.level,
                bits: l.bits,
                k: l.k,
                dense_params: dense,
                active,
                stored_values: stored,
                remaining_fraction: active as f64 / dense as f64,
                rate,
            });
            total_dense += dense;
            total_active += active;
            total_stored += stored;
            total_bits += stored * l.bits as u64;
            bits = l.bits;
        }
        CompressionReport {
            layers,
            total_dense,
            total_active,
            total_stored_values: total_stored,
            bits,
            total_rate: (total_dense as f64 * 32.0) / total_bits as f64,
            remaining_fraction: total_active as f64 / total_dense as f64,
        }
    }
}

impl CompressionReport {
    /// CSV rows, one per layer plus a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,kind,granularity,bits,k,dense_params,active,stored_values,remaining,rate\n",
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.6},{:.4}\n",
                l.index,
                match l.kind {
                    LayerKind::Fc => "fc",
                    LayerKind::Conv => "conv",
                },
                match l.level {
                    GranularityLevel::Fine => "fine",
                    GranularityLevel::Medium => "medium",
                    GranularityLevel::Coarse => "coarse",
                },
                l.bits,
                l.k,
                l.dense_params,
                l.active,
                l.stored_values,
                l.remaining_fraction,
                l.rate
            ));
        }
        out.push_str(&format!(
            "total,,,{},,{},{},{},{:.6},{:.4}\n",
            self.bits,
            self.total_dense,
            self.total_active,
            self.total_stored_values,
            self.remaining_fraction,
            self.total_rate
        ));
        out
    }

    /// JSON-lines rows, one per layer plus a total object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&format!(
                "{{\"layer\":{},\"kind\":\"{}\",\"granularity\":\"{}\",\"bits\":{},\"k\":{},\
                 \"dense_params\":{},\"active\":{},\"stored_values\":{},\"remaining\":{:.6},\
                 \"rate\":{:.4}}}\n",
                l.index,
                match l.kind {
                    LayerKind::Fc => "fc",
                    LayerKind::Conv => "conv",
                },
                match l.level {
                    GranularityLevel::Fine => "fine",
                    GranularityLevel::Medium => "medium",
                    GranularityLevel::Coarse => "coarse",
                },
                l.bits,
                l.k,
                l.dense_params,
                l.active,
                l.stored_values,
                l.remaining_fraction,
                l.rate
            ));
        }
        out.push_str(&format!(
            "{{\"total\":true,\"bits\":{},\"dense_params\":{},\"active\":{},\
             \"stored_values\":{},\"remaining\":{:.6},\"rate\":{:.4}}}\n",
            self.bits,
            self.total_dense,
            self.total_active,
            self.total_stored_values,
            self.remaining_fraction,
            self.total_rate
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::GranularityLevel::{Coarse, Fine, Medium};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bit_roundtrip() {
        let mut w = BitWriter::new();
        w.put(0b101, 3);
        w.put(0x7fff, 15);
        w.align();
        w.put(f32::to_bits(-1.25) as u64, 32);
        let bytes = w.into_bytes();
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.get(3).unwrap(), 0b101);
        assert_eq!(r.get(15).unwrap(), 0x7fff);
        r.align();
        assert_eq!(f32::from_bits(r.get(32).unwrap() as u32), -1.25);
    }

    #[test]
    fn index_width_edges() {
        assert_eq!(index_width(1), 0);
        assert_eq!(index_width(2), 1);
        assert_eq!(index_width(25), 5);
        assert_eq!(index_width(784), 10);
        assert_eq!(index_width(1024), 10);
        assert_eq!(index_width(1025), 11);
    }

    #[test]
    fn table_compression_figures() {
        let close = |got: f64, want: f64| (got - want).abs() / want < 0.005;
        // LeNet300-100, fine
        let p = 266_200u64;
        assert!(close(compression_rate(p, 5191, 32, Fine, 15, 300), 25.64));
        assert!(close(
            compression_rate(p, (0.0671 * p as f64).round() as u64, 8, Fine, 15, 300),
            29.80
        ));
        assert!(close(
            compression_rate(p, (0.21 * p as f64).round() as u64, 2, Fine, 15, 300),
            38.09
        ));
        // LeNet5-Caffe, fine
        let p = 430_500u64;
        assert!(close(
            compression_rate(p, (0.025 * p as f64).round() as u64, 32, Fine, 5, 50),
            20.0
        ));
        assert!(close(
            compression_rate(p, (0.041 * p as f64).round() as u64, 8, Fine, 5, 50),
            48.78
        ));
        assert!(close(
            compression_rate(p, (0.041 * p as f64).round() as u64, 2, Fine, 5, 50),
            195.12
        ));
    }

    #[test]
    fn stored_value_counts_match_granularity() {
        // randomized dims, all three levels
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let dims = LayerDims {
                n_in: rng.random_range(2..12),
                a: rng.random_range(1..10usize).pow(2).min(25),
                n_out: rng.random_range(2..12),
            };
            for level in [Fine, Medium, Coarse] {
                let cmax = match level {
                    Fine => dims.a,
                    Medium => dims.n_in,
                    Coarse => dims.n_out,
                };
                let k = rng.random_range(1..=cmax);
                let st = GranularitySpec { level, k }
                    .structure(LayerKind::Conv, dims)
                    .unwrap();
                let s = st.active_weights() as u64;
                let expect = match level {
                    Fine => 2 * s,
                    Medium => s + (k * dims.n_out) as u64,
                    Coarse => s,
                };
                assert_eq!(stored_values(level, s, k, dims.n_out), expect);
                assert_eq!(st.stored_values() as u64, expect);
            }
        }
    }

    fn demo_state(bits: u8, seed: u64) -> (ModelState, Vec<Tensor<f32>>) {
        use crate::granularity::GranularitySpec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut network = Network::build(
            ArchId::LeNet300_100,
            &[
                GranularitySpec { level: Fine, k: 15 },
                GranularitySpec { level: Fine, k: 6 },
                GranularitySpec { level: Fine, k: 6 },
            ],
            &mut rng,
        )
        .unwrap();
        for layer in &mut network.layers {
            for v in layer.logits.values.data_mut() {
                *v = rng.random::<f32>() * 4.0 - 2.0;
            }
            for b in layer.bias.data_mut() {
                *b = rng.random::<f32>() - 0.5;
            }
            if bits < 32 {
                crate::quant::clip_latent(&mut layer.weights);
            }
        }
        let state = ModelState { network, bits, beta: 1.0 };
        let masks = state.network.draw_masks(1.0, &mut rng).unwrap();
        (state, masks)
    }

    #[test]
    fn fine_fc_stream_lengths() {
        let (state, masks) = demo_state(32, 3);
        let bytes = export(&state, &masks).unwrap();
        let model = import(&bytes).unwrap();
        let l0 = &model.layers[0];
        let st = GranularitySpec { level: Fine, k: 15 }
            .structure(LayerKind::Fc, l0.dims)
            .unwrap();
        assert_eq!(st.active_weights(), 300 * 15);
        let nonzero = l0.weights.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 300 * 15);
        let rep = model.report();
        assert_eq!(rep.layers[0].stored_values, 2 * 300 * 15);
    }

    #[test]
    fn export_import_identity_on_masked_weights() {
        for bits in [32u8, 8, 2, 1] {
            let (state, masks) = demo_state(bits, 11 + bits as u64);
            let bytes = export(&state, &masks).unwrap();
            let model = import(&bytes).unwrap();
            let quant = QuantSpec::new(bits).unwrap();
            for ((layer, mask), imp) in state
                .network
                .layers
                .iter()
                .zip(&masks)
                .zip(&model.layers)
            {
                let expect = crate::mask::apply_mask(
                    &crate::quant::quantize_forward(&layer.weights, quant).unwrap(),
                    mask,
                )
                .unwrap();
                assert_eq!(imp.weights.data(), expect.data(), "bits {bits}");
                assert_eq!(imp.bias.data(), layer.bias.data());
            }
        }
    }

    #[test]
    fn corrupted_streams_rejected() {
        let (state, masks) = demo_state(32, 5);
        let bytes = export(&state, &masks).unwrap();
        assert!(import(&bytes[..6]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(import(&bad).is_err());
        let mut short = bytes.clone();
        short.truncate(bytes.len() - 10);
        assert!(import(&short).is_err());
    }

    #[test]
    fn mask_popcount_mismatch_rejected() {
        let (state, mut masks) = demo_state(32, 6);
        // flip one selected weight off in layer 0
        let idx = masks[0].data().iter().position(|&v| v == 1.0).unwrap();
        masks[0].data_mut()[idx] = 0.0;
        assert!(export(&state, &masks).is_err());
    }

    #[test]
    fn coarse_layer_shrinks_and_roundtrips() {
        use crate::granularity::GranularitySpec;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // small conv -> conv net exercised as raw layers
        let mut network = Network {
            arch: ArchId::LeNet5Caffe,
            layers: vec![
                Layer {
                    kind: LayerKind::Conv,
                    conv: Some(ConvMeta { kh: 3, kw: 3, stride: 1 }),
                    dims: LayerDims { n_in: 2, a: 9, n_out: 6 },
                    weights: Tensor::zeros(vec![2, 9, 6]),
                    bias: Tensor::zeros(vec![6]),
                    logits: crate::mask::build_logits(
                        LayerKind::Conv,
                        LayerDims { n_in: 2, a: 9, n_out: 6 },
                        GranularitySpec { level: Coarse, k: 2 },
                        0.0f32,
                    )
                    .unwrap(),
                },
                Layer {
                    kind: LayerKind::Conv,
                    conv: Some(ConvMeta { kh: 3, kw: 3, stride: 1 }),
                    dims: LayerDims { n_in: 6, a: 9, n_out: 4 },
                    weights: Tensor::zeros(vec![6, 9, 4]),
                    bias: Tensor::zeros(vec![4]),
                    logits: crate::mask::build_logits(
                        LayerKind::Conv,
                        LayerDims { n_in: 6, a: 9, n_out: 4 },
                        GranularitySpec { level: Fine, k: 4 },
                        0.0f32,
                    )
                    .unwrap(),
                },
            ],
        };
        for layer in &mut network.layers {
            for v in layer.weights.data_mut() {
                *v = rng.random::<f32>() - 0.5;
            }
            for v in layer.logits.values.data_mut() {
                *v = rng.random::<f32>() * 3.0;
            }
        }
        let state = ModelState { network, bits: 32, beta: 1.0 };
        let masks = state.network.draw_masks(1.0, &mut rng).unwrap();
        let bytes = export(&state, &masks).unwrap();
        let model = import(&bytes).unwrap();
        // coarse layer keeps K = 2 filters
        assert_eq!(model.layers[0].dims.n_out, 2);
        assert_eq!(model.layers[0].orig.n_out, 6);
        assert_eq!(model.layers[0].bias.numel(), 2);
        // next layer's input channels shrink to match
        assert_eq!(model.layers[1].dims.n_in, 2);
        // coarse stored values = S with no index overhead
        let rep = model.report();
        assert_eq!(rep.layers[0].stored_values, rep.layers[0].active);
        // kept filter weights survive exactly
        let kept: Vec<usize> = (0..6)
            .filter(|&co| masks[0].data()[co] == 1.0)
            .collect();
        for (new_co, &co) in kept.iter().enumerate() {
            for ci in 0..2 {
                for ka in 0..9 {
                    assert_eq!(
                        model.layers[0].weights.data()[(ci * 9 + ka) * 2 + new_co],
                        state.network.layers[0].weights.data()[(ci * 9 + ka) * 6 + co]
                    );
                }
            }
        }
    }

    #[test]
    fn coarse_full_k_equals_dense_layout() {
        use crate::granularity::GranularitySpec;
        let st = GranularitySpec { level: Coarse, k: 7 }
            .structure(LayerKind::Conv, LayerDims { n_in: 3, a: 4, n_out: 7 })
            .unwrap();
        // K = n_out stores every weight once, like a dense layout
        assert_eq!(st.active_weights(), 3 * 4 * 7);
        assert_eq!(st.stored_values(), 3 * 4 * 7);
    }
}
