//! LSB-first bit packing of small unsigned codes.

/// Bytes needed for `n` codes of `bits` bits.
pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Code `i` occupies bits `[i*bits, (i+1)*bits)` of the little-endian bit
/// stream. Codes must already fit in `bits`.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    debug_assert!((1..=8).contains(&bits));
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut pos = 0usize;
    for &c in codes {
        debug_assert!(u16::from(c) < (1u16 << bits));
        let byte = pos / 8;
        let shift = pos % 8;
        let v = u16::from(c) << shift;
        out[byte] |= v as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (v >> 8) as u8;
        }
        pos += bits as usize;
    }
    out
}

pub fn unpack_codes(packed: &[u8], n: usize, bits: u8) -> Vec<u8> {
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        let byte = pos / 8;
        let shift = pos % 8;
        let mut v = u16::from(packed[byte]);
        if shift + bits as usize > 8 {
            v |= u16::from(packed[byte + 1]) << 8;
        }
        out.push(((v >> shift) & mask) as u8);
        pos += bits as usize;
    }
    out
}

/// True when the bits after the last code in the final byte are zero.
pub fn padding_is_clear(packed: &[u8], n: usize, bits: u8) -> bool {
    let used = n * bits as usize;
    let rem = used % 8;
    if rem == 0 {
        return true;
    }
    packed.last().is_none_or(|b| b >> rem == 0)
}
