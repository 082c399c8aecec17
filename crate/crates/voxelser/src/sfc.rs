//! Space-filling-curve keys over a cubic 3D lattice.
//!
//! Two curves are supported: Z-order (Morton) via bit interleaving and Hilbert
//! via the iterative transpose/Gray-code construction. Keys use at most 3*20 = 60
//! bits, so a `u64` always suffices.
//!
//! Axis convention for Z-order: the x axis owns the least-significant bit of each
//! 3-bit digit, i.e. bit `j` of x lands at key bit `3j`, y at `3j+1`, z at `3j+2`.

use crate::error::{Error, Result};

pub const MAX_BITS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurveKind {
    ZOrder,
    Hilbert,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::ZOrder => "zorder",
            CurveKind::Hilbert => "hilbert",
        }
    }
}

impl std::str::FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zorder" | "z-order" | "morton" => Ok(CurveKind::ZOrder),
            "hilbert" => Ok(CurveKind::Hilbert),
            other => Err(Error::Invalid(format!("unknown curve kind '{other}'"))),
        }
    }
}

/// Encode a 3D coordinate to its 1D curve key.
pub fn encode(kind: CurveKind, bits_per_axis: u32, coord: (u32, u32, u32)) -> Result<u64> {
    check_bits(bits_per_axis)?;
    let limit = 1u32 << bits_per_axis;
    let (x, y, z) = coord;
    if x >= limit || y >= limit || z >= limit {
        return Err(Error::CoordinateOutOfRange { coord, bits: bits_per_axis });
    }
    Ok(match kind {
        CurveKind::ZOrder => morton_encode(x as u64, y as u64, z as u64),
        CurveKind::Hilbert => hilbert_encode(bits_per_axis, x as u64, y as u64, z as u64),
    })
}

/// Decode a curve key back to its 3D coordinate. Inverse of [`encode`].
pub fn decode(kind: CurveKind, bits_per_axis: u32, key: u64) -> Result<(u32, u32, u32)> {
    check_bits(bits_per_axis)?;
    if key >= 1u64 << (3 * bits_per_axis) {
        return Err(Error::KeyOutOfRange { key, bits: bits_per_axis });
    }
    let (x, y, z) = match kind {
        CurveKind::ZOrder => morton_decode(key),
        CurveKind::Hilbert => hilbert_decode(bits_per_axis, key),
    };
    Ok((x as u32, y as u32, z as u32))
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitsOutOfRange(bits))
    }
}

fn morton_encode(x: u64, y: u64, z: u64) -> u64 {
    spread_2(x) | (spread_2(y) << 1) | (spread_2(z) << 2)
}

fn morton_decode(key: u64) -> (u64, u64, u64) {
    (compact_2(key), compact_2(key >> 1), compact_2(key >> 2))
}

// "Insert" two 0 bits after each of the 21 low bits of x.
fn spread_2(mut x: u64) -> u64 {
    x &= 0x1fffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    (x | (x << 2)) & 0x1249249249249249
}

// Inverse of spread_2.
fn compact_2(mut x: u64) -> u64 {
    x &= 0x1249249249249249;
    x = (x ^ (x >> 2)) & 0x10c30c30c30c30c3;
    x = (x ^ (x >> 4)) & 0x100f00f00f00f00f;
    x = (x ^ (x >> 8)) & 0x1f0000ff0000ff;
    x = (x ^ (x >> 16)) & 0x1f00000000ffff;
    (x ^ (x >> 32)) & 0x1fffff
}

// Hilbert curve via Skilling's transpose form: each axis word carries every
// third bit of the Hilbert index; AxesToTranspose/TransposeToAxes convert
// between lattice coordinates and that form in place.

fn hilbert_encode(bits: u32, x: u64, y: u64, z: u64) -> u64 {
    let mut a = [x, y, z];
    axes_to_transpose(&mut a, bits);
    let mut key = 0u64;
    for j in (0..bits).rev() {
        for w in a.iter() {
            key = (key << 1) | ((w >> j) & 1);
        }
    }
    key
}

fn hilbert_decode(bits: u32, key: u64) -> (u64, u64, u64) {
    let mut a = [0u64; 3];
    for j in (0..bits).rev() {
        for (i, w) in a.iter_mut().enumerate() {
            let pos = 3 * j + (2 - i as u32);
            *w = (*w << 1) | ((key >> pos) & 1);
        }
    }
    transpose_to_axes(&mut a, bits);
    (a[0], a[1], a[2])
}

fn axes_to_transpose(x: &mut [u64; 3], bits: u32) {
    let n = 3;
    let m = 1u64 << (bits - 1);

    // Inverse undo
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..n {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }

    // Gray encode
    for i in 1..n {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[n - 1] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for w in x.iter_mut() {
        *w ^= t;
    }
}

fn transpose_to_axes(x: &mut [u64; 3], bits: u32) {
    let n = 3;
    let m = 1u64 << (bits - 1);

    // Gray decode by halving
    let t = x[n - 1] >> 1;
    for i in (1..n).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;

    // Undo excess work
    let mut q = 2;
    while q != m << 1 {
        let p = q - 1;
        for i in (0..n).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manhattan(a: (u32, u32, u32), b: (u32, u32, u32)) -> u32 {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1) + a.2.abs_diff(b.2)
    }

    #[test]
    fn zorder_fixed_points() {
        assert_eq!(encode(CurveKind::ZOrder, 4, (0, 0, 0)).unwrap(), 0);
        assert_eq!(encode(CurveKind::ZOrder, 4, (1, 1, 1)).unwrap(), 7);
        assert_eq!(decode(CurveKind::ZOrder, 4, 0).unwrap(), (0, 0, 0));
        assert_eq!(decode(CurveKind::ZOrder, 4, 7).unwrap(), (1, 1, 1));
    }

    // Independent bit-interleave oracle: x owns bit 3j, y bit 3j+1, z bit 3j+2.
    fn morton_oracle(bits: u32, x: u32, y: u32, z: u32) -> u64 {
        let mut key = 0u64;
        for j in 0..bits {
            key |= (((x >> j) & 1) as u64) << (3 * j);
            key |= (((y >> j) & 1) as u64) << (3 * j + 1);
            key |= (((z >> j) & 1) as u64) << (3 * j + 2);
        }
        key
    }

    #[test]
    fn zorder_matches_interleave_oracle() {
        assert_eq!(encode(CurveKind::ZOrder, 4, (1, 0, 0)).unwrap(), morton_oracle(4, 1, 0, 0));
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    assert_eq!(
                        encode(CurveKind::ZOrder, 3, (x, y, z)).unwrap(),
                        morton_oracle(3, x, y, z)
                    );
                }
            }
        }
    }

    #[test]
    fn roundtrip_exhaustive_small_cubes() {
        for kind in [CurveKind::ZOrder, CurveKind::Hilbert] {
            for bits in 1..=5u32 {
                let side = 1u32 << bits;
                let mut seen = vec![false; 1 << (3 * bits)];
                for x in 0..side {
                    for y in 0..side {
                        for z in 0..side {
                            let k = encode(kind, bits, (x, y, z)).unwrap();
                            assert!(!seen[k as usize], "{kind:?} key {k} repeated");
                            seen[k as usize] = true;
                            assert_eq!(decode(kind, bits, k).unwrap(), (x, y, z));
                        }
                    }
                }
                assert!(seen.iter().all(|&s| s), "{kind:?} not a bijection at {bits} bits");
            }
        }
    }

    #[test]
    fn hilbert_step_adjacency() {
        for bits in 1..=3u32 {
            let total = 1u64 << (3 * bits);
            for k in 0..total - 1 {
                let a = decode(CurveKind::Hilbert, bits, k).unwrap();
                let b = decode(CurveKind::Hilbert, bits, k + 1).unwrap();
                assert_eq!(manhattan(a, b), 1, "keys {k},{} at {bits} bits", k + 1);
            }
        }
    }

    #[test]
    fn zorder_mean_step_exceeds_hilbert() {
        let bits = 3;
        let total = 1u64 << (3 * bits);
        let mean = |kind| {
            let mut acc = 0u64;
            for k in 0..total - 1 {
                let a = decode(kind, bits, k).unwrap();
                let b = decode(kind, bits, k + 1).unwrap();
                acc += manhattan(a, b) as u64;
            }
            acc as f64 / (total - 1) as f64
        };
        let hil = mean(CurveKind::Hilbert);
        let zed = mean(CurveKind::ZOrder);
        assert_eq!(hil, 1.0);
        assert!(zed > hil, "z-order mean step {zed} should exceed 1");
    }

    #[test]
    fn zorder_monotone_prefix() {
        for bits in 1..=4u32 {
            let side = 1u32 << bits;
            for x in (0..side).step_by(3) {
                for y in (0..side).step_by(2) {
                    for z in 0..side {
                        let lo = encode(CurveKind::ZOrder, bits, (x, y, z)).unwrap();
                        let hi = encode(CurveKind::ZOrder, bits + 1, (2 * x, 2 * y, 2 * z)).unwrap();
                        assert_eq!(hi, 8 * lo);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_errors() {
        assert!(matches!(
            encode(CurveKind::ZOrder, 2, (4, 0, 0)),
            Err(Error::CoordinateOutOfRange { .. })
        ));
        assert!(matches!(
            decode(CurveKind::Hilbert, 2, 64),
            Err(Error::KeyOutOfRange { .. })
        ));
        assert!(matches!(encode(CurveKind::ZOrder, 0, (0, 0, 0)), Err(Error::BitsOutOfRange(0))));
        assert!(matches!(encode(CurveKind::ZOrder, 21, (0, 0, 0)), Err(Error::BitsOutOfRange(21))));
    }
}
