//! Little-endian binary files for quantized tensors (`AQT1`) and importance
//! matrices (`IMX1`).
//!
//! ```text
//! AQT1: magic | u32 rows | u32 cols | u8 bits | u32 block_size
//!       then per block: f32 scale | f32 min | ceil(block_size*bits/8) code bytes
//! IMX1: magic | u32 cols | u64 count | f64 sums[cols]
//! ```

use std::io::{Read, Write};

use super::pack::{packed_len, padding_is_clear};
use super::{ImportanceMatrix, QuantBlock, QuantError, QuantizedTensor};

const TENSOR_MAGIC: &[u8; 4] = b"AQT1";
const IMPORTANCE_MAGIC: &[u8; 4] = b"IMX1";

fn to_u32(v: usize, what: &str) -> Result<u32, QuantError> {
    u32::try_from(v).map_err(|_| QuantError::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_tensor<W: Write>(tensor: &QuantizedTensor, mut w: W) -> Result<(), QuantError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&to_u32(tensor.rows, "rows")?.to_le_bytes())?;
    w.write_all(&to_u32(tensor.cols, "cols")?.to_le_bytes())?;
    w.write_all(&[tensor.bits])?;
    w.write_all(&to_u32(tensor.block_size, "block_size")?.to_le_bytes())?;
    for b in &tensor.blocks {
        w.write_all(&b.scale.to_le_bytes())?;
        w.write_all(&b.min.to_le_bytes())?;
        w.write_all(&b.packed)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QuantError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| QuantError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], QuantError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, QuantError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn finish(&self) -> Result<(), QuantError> {
        if self.pos != self.buf.len() {
            return Err(QuantError::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<QuantizedTensor, QuantError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if &c.array::<4>()? != TENSOR_MAGIC {
        return Err(QuantError::Format("bad magic, expected AQT1".into()));
    }
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let bits = c.array::<1>()?[0];
    let block_size = c.u32()? as usize;
    if !super::SUPPORTED_BITS.contains(&bits) {
        return Err(QuantError::Bits(bits));
    }
    if block_size < 2 || !cols.is_multiple_of(block_size) {
        return Err(QuantError::BlockSize { block_size, cols });
    }
    let n_blocks = rows
        .checked_mul(cols)
        .map(|n| n / block_size)
        .ok_or_else(|| QuantError::Format("dimensions overflow".into()))?;
    let code_bytes = packed_len(block_size, bits);
    let remaining = buf.len() - c.pos;
    if remaining != n_blocks * (8 + code_bytes) {
        return Err(QuantError::Format(format!(
            "{n_blocks} blocks need {} bytes, found {remaining}",
            n_blocks * (8 + code_bytes)
        )));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let scale = f32::from_le_bytes(c.array()?);
        let min = f32::from_le_bytes(c.array()?);
        if !scale.is_finite() || !min.is_finite() {
            return Err(QuantError::Format(format!("block {i} has non-finite parameters")));
        }
        let packed = c.take(code_bytes)?.to_vec();
        if !padding_is_clear(&packed, block_size, bits) {
            return Err(QuantError::Format(format!("block {i} has stray padding bits")));
        }
        blocks.push(QuantBlock { scale, min, packed });
    }
    c.finish()?;
    QuantizedTensor::from_parts(rows, cols, bits, block_size, blocks)
}

pub fn write_importance<W: Write>(imx: &ImportanceMatrix, mut w: W) -> Result<(), QuantError> {
    w.write_all(IMPORTANCE_MAGIC)?;
    w.write_all(&to_u32(imx.cols(), "cols")?.to_le_bytes())?;
    w.write_all(&imx.count().to_le_bytes())?;
    for s in imx.sums() {
        w.write_all(&s.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_importance<R: Read>(mut r: R) -> Result<ImportanceMatrix, QuantError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if &c.array::<4>()? != IMPORTANCE_MAGIC {
        return Err(QuantError::Format("bad magic, expected IMX1".into()));
    }
    let cols = c.u32()? as usize;
    let count = u64::from_le_bytes(c.array()?);
    if buf.len() - c.pos != cols * 8 {
        return Err(QuantError::Format(format!(
            "{cols} columns need {} bytes, found {}",
            cols * 8,
            buf.len() - c.pos
        )));
    }
    let sums = (0..cols)
        .map(|_| c.array().map(f64::from_le_bytes))
        .collect::<Result<Vec<_>, _>>()?;
    c.finish()?;
    ImportanceMatrix::from_parts(sums, count).map_err(|e| QuantError::Format(format!("invalid importance sums: {e}")))
}
