//! LSB-first bit packing: code `k` occupies bits `[k·bits, (k+1)·bits)` of
//! the little-endian byte stream; codes may straddle bytes and the final
//! byte is zero-padded.

use crate::error::{Error, Result};

pub const MAX_BITS: u32 = 32;

/// Bytes needed for `n` codes of `bits` bits.
pub fn packed_len(n: usize, bits: u32) -> usize {
    (n * bits as usize).div_ceil(8)
}

pub fn pack_bits(codes: &[u32], bits: u32) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let mut out = Vec::with_capacity(packed_len(codes.len(), bits));
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for &code in codes {
        if bits < 32 && code >> bits != 0 {
            return Err(Error::CodeOverflow { code, bits });
        }
        acc |= (code as u64) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn unpack_bits(bytes: &[u8], bits: u32, n: usize) -> Result<Vec<u32>> {
    check_bits(bits)?;
    let need = packed_len(n, bits);
    if bytes.len() < need {
        return Err(Error::CorruptPacking(format!(
            "{n} codes of {bits} bits need {need} bytes, got {}",
            bytes.len()
        )));
    }
    let mask: u64 = if bits == 32 { u32::MAX as u64 } else { (1u64 << bits) - 1 };
    let mut out = Vec::with_capacity(n);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut next = bytes.iter();
    for _ in 0..n {
        while filled < bits {
            acc |= (*next.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits;
    }
    Ok(out)
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::InvalidConfig(format!("bit width {bits} is outside 1..=32")));
    }
    Ok(())
}
