//! Scalar reference quantization: Q4_0 weight blocks, per-group INT8
//! activations, and the W4A8 / W4A16 matrix-vector products.
//!
//! Q4_0 stores 32 weights as one f16 scale plus 32 unsigned 4-bit codes
//! centered at 8, packed split-style: byte j holds code j in its low nibble
//! and code j+16 in its high nibble. 18 bytes per block. The W4A8 product
//! uses deferred bias correction: per block,
//! result += d * s_x * (sumi - 8 * sum_x), with sumi and sum_x accumulated
//! in exact integer arithmetic.

use std::io::{Read, Write};

use half::f16;

use crate::error::{NveError, Result};

/// Elements per quantization block / activation group.
pub const QK: usize = 32;
/// Serialized Q4_0 block size in bytes.
pub const Q4_0_BLOCK_BYTES: usize = 18;

pub const QUANT_MATRIX_MAGIC: &[u8; 5] = b"NVEQ1";
const BLOCK_FORMAT_Q4_0: u8 = 0;

/// One Q4_0 block: f16 scale + 32 packed 4-bit codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantBlockQ4 {
    pub d: f16,
    pub qs: [u8; QK / 2],
}

/// One INT8 activation group: f32 scale + 32 signed codes in [-127, 127].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGroupQ8 {
    pub s: f32,
    pub qs: [i8; QK],
}

fn round_half_away_from_zero(x: f32) -> f32 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

fn check_finite(block: &[f32]) -> Result<()> {
    if block.iter().any(|x| !x.is_finite()) {
        return Err(NveError::NonFiniteInput);
    }
    Ok(())
}

/// Quantize 32 values to a Q4_0 block.
///
/// The scale is d = m / -8 where m is the max-magnitude element (first
/// occurrence on ties), so the extreme value is exactly representable.
/// An all-zero block gets d = 0 and codes 8.
pub fn quantize_q4_0(block: &[f32; QK]) -> Result<QuantBlockQ4> {
    check_finite(block)?;
    let mut m = 0.0f32;
    for &x in block {
        if x.abs() > m.abs() {
            m = x;
        }
    }
    let d = f16::from_f32(m / -8.0);
    let dv = d.to_f32();
    let mut codes = [8u8; QK];
    if dv != 0.0 {
        for (c, &x) in codes.iter_mut().zip(block.iter()) {
            let q = round_half_away_from_zero(x / dv) + 8.0;
            *c = q.clamp(0.0, 15.0) as u8;
        }
    }
    let mut qs = [0u8; QK / 2];
    for j in 0..QK / 2 {
        qs[j] = (codes[j] & 0x0f) | (codes[j + QK / 2] << 4);
    }
    Ok(QuantBlockQ4 { d, qs })
}

impl QuantBlockQ4 {
    /// Unpacked unsigned codes in element order.
    pub fn codes(&self) -> [u8; QK] {
        let mut out = [0u8; QK];
        for j in 0..QK / 2 {
            out[j] = self.qs[j] & 0x0f;
            out[j + QK / 2] = self.qs[j] >> 4;
        }
        out
    }

    pub fn to_bytes(&self) -> [u8; Q4_0_BLOCK_BYTES] {
        let mut out = [0u8; Q4_0_BLOCK_BYTES];
        out[0..2].copy_from_slice(&self.d.to_le_bytes());
        out[2..].copy_from_slice(&self.qs);
        out
    }

    pub fn from_bytes(bytes: &[u8; Q4_0_BLOCK_BYTES]) -> QuantBlockQ4 {
        let d = f16::from_le_bytes([bytes[0], bytes[1]]);
        let mut qs = [0u8; QK / 2];
        qs.copy_from_slice(&bytes[2..]);
        QuantBlockQ4 { d, qs }
    }
}

/// Dequantize: element_i = d * (code_i - 8).
pub fn dequantize_q4_0(b: &QuantBlockQ4) -> [f32; QK] {
    let d = b.d.to_f32();
    let codes = b.codes();
    let mut out = [0.0f32; QK];
    for (o, c) in out.iter_mut().zip(codes.iter()) {
        *o = d * (*c as i32 - 8) as f32;
    }
    out
}

/// Quantize a 32-element activation group to INT8: s = amax / 127.
pub fn quantize_activations_q8(group: &[f32; QK]) -> Result<QuantGroupQ8> {
    check_finite(group)?;
    let amax = group.iter().fold(0.0f32, |a, x| a.max(x.abs()));
    if amax == 0.0 {
        return Ok(QuantGroupQ8 {
            s: 0.0,
            qs: [0; QK],
        });
    }
    let s = amax / 127.0;
    let mut qs = [0i8; QK];
    for (q, &x) in qs.iter_mut().zip(group.iter()) {
        *q = round_half_away_from_zero(x / s).clamp(-127.0, 127.0) as i8;
    }
    Ok(QuantGroupQ8 { s, qs })
}

pub fn dequantize_q8(g: &QuantGroupQ8) -> [f32; QK] {
    let mut out = [0.0f32; QK];
    for (o, q) in out.iter_mut().zip(g.qs.iter()) {
        *o = g.s * *q as f32;
    }
    out
}

/// Quantize a full vector in 32-element groups; length must divide by 32.
pub fn quantize_vector_q8(x: &[f32]) -> Result<Vec<QuantGroupQ8>> {
    if !x.len().is_multiple_of(QK) {
        return Err(NveError::DimensionMismatch(format!(
            "vector length {} not divisible by {QK}",
            x.len()
        )));
    }
    x.chunks_exact(QK)
        .map(|c| quantize_activations_q8(c.try_into().expect("exact chunk")))
        .collect()
}

/// Row-major Q4_0 matrix; cols divisible by 32.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMatrix {
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<QuantBlockQ4>,
}

impl QuantMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: &[f32]) -> Result<QuantMatrix> {
        if !cols.is_multiple_of(QK) {
            return Err(NveError::DimensionMismatch(format!(
                "cols {cols} not divisible by {QK}"
            )));
        }
        if data.len() != rows * cols {
            return Err(NveError::DimensionMismatch(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        let blocks = data
            .chunks_exact(QK)
            .map(|c| quantize_q4_0(c.try_into().expect("exact chunk")))
            .collect::<Result<_>>()?;
        Ok(QuantMatrix { rows, cols, blocks })
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / QK
    }

    pub fn row_blocks(&self, r: usize) -> &[QuantBlockQ4] {
        let bpr = self.blocks_per_row();
        &self.blocks[r * bpr..(r + 1) * bpr]
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for b in &self.blocks {
            out.extend_from_slice(&dequantize_q4_0(b));
        }
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(QUANT_MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&[BLOCK_FORMAT_Q4_0])?;
        for b in &self.blocks {
            w.write_all(&b.to_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<QuantMatrix> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != QUANT_MATRIX_MAGIC {
            return Err(NveError::BadMagic {
                expected: String::from_utf8_lossy(QUANT_MATRIX_MAGIC).into_owned(),
                got: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut fmt = [0u8; 1];
        r.read_exact(&mut fmt)?;
        if fmt[0] != BLOCK_FORMAT_Q4_0 {
            return Err(NveError::MalformedArtifact(format!(
                "unknown block format id {}",
                fmt[0]
            )));
        }
        if !cols.is_multiple_of(QK) {
            return Err(NveError::MalformedArtifact(format!(
                "cols {cols} not divisible by {QK}"
            )));
        }
        let n_blocks = rows * cols / QK;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let mut buf = [0u8; Q4_0_BLOCK_BYTES];
            r.read_exact(&mut buf)?;
            blocks.push(QuantBlockQ4::from_bytes(&buf));
        }
        Ok(QuantMatrix { rows, cols, blocks })
    }
}

/// Deferred-bias-correction W4A8 product for one block pair.
///
/// Returns (sumi, sum_x) in exact i32 arithmetic; the caller combines them
/// as d * s * (sumi - 8 * sum_x).
pub fn block_dot_deferred(w: &QuantBlockQ4, x: &QuantGroupQ8) -> (i32, i32) {
    let codes = w.codes();
    let mut sumi = 0i32;
    let mut sum_x = 0i32;
    for (c, q) in codes.iter().zip(x.qs.iter()) {
        sumi += *c as i32 * *q as i32;
        sum_x += *q as i32;
    }
    (sumi, sum_x)
}

/// W4A8 matvec: INT4 weights against INT8 activation groups.
pub fn matvec_w4a8(w: &QuantMatrix, x: &[QuantGroupQ8]) -> Result<Vec<f32>> {
    if x.len() != w.blocks_per_row() {
        return Err(NveError::DimensionMismatch(format!(
            "activation group count {} != cols/{QK} = {}",
            x.len(),
            w.blocks_per_row()
        )));
    }
    let mut out = Vec::with_capacity(w.rows);
    for r in 0..w.rows {
        let mut acc = 0.0f64;
        for (wb, xg) in w.row_blocks(r).iter().zip(x) {
            let (sumi, sum_x) = block_dot_deferred(wb, xg);
            acc += wb.d.to_f32() as f64 * xg.s as f64 * (sumi - 8 * sum_x) as f64;
        }
        out.push(acc as f32);
    }
    Ok(out)
}

/// W4A16 matvec: dequantized weights against f32 activations, f32
/// accumulation in a fixed order.
pub fn matvec_w4a16(w: &QuantMatrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols {
        return Err(NveError::DimensionMismatch(format!(
            "input length {} != cols {}",
            x.len(),
            w.cols
        )));
    }
    let mut out = Vec::with_capacity(w.rows);
    for r in 0..w.rows {
        let mut acc = 0.0f32;
        for (bi, wb) in w.row_blocks(r).iter().enumerate() {
            let deq = dequantize_q4_0(wb);
            let xs = &x[bi * QK..(bi + 1) * QK];
            for (wv, xv) in deq.iter().zip(xs) {
                acc += wv * xv;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Weighted average of per-layer storage bits per weight element.
/// Entries are (bits_per_weight, element_count). Q4_0 is 18*8/32 = 4.5 bits.
pub const Q4_0_BITS_PER_WEIGHT: f64 = Q4_0_BLOCK_BYTES as f64 * 8.0 / QK as f64;

pub fn effective_bpw(entries: &[(f64, u64)]) -> f64 {
    let total: u64 = entries.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return 0.0;
    }
    entries
        .iter()
        .map(|(bits, n)| bits * *n as f64)
        .sum::<f64>()
        / total as f64
}
