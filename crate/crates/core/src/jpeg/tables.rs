//! Quantization tables: the standard base tables scaled by a quality
//! factor with the libjpeg convention.

use crate::error::{Error, Result};

/// Base luminance table (zig-zag-free row-major order).
pub const BASE_LUMA: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// Base chrominance table.
pub const BASE_CHROMA: [[u16; 8]; 8] = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTableSet {
    pub luma: [[u16; 8]; 8],
    pub chroma: [[u16; 8]; 8],
    pub qf: u32,
}

fn scale_table(base: &[[u16; 8]; 8], scale: u32) -> [[u16; 8]; 8] {
    let mut out = [[0u16; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let v = (base[i][j] as u32 * scale + 50) / 100;
            out[i][j] = v.clamp(1, 255) as u16;
        }
    }
    out
}

/// Tables for a quality factor in [1,100]. Deterministic; monotone
/// non-increasing per cell as qf rises.
pub fn quant_tables(qf: u32) -> Result<QuantTableSet> {
    if !(1..=100).contains(&qf) {
        return Err(Error::Domain(format!("quality factor {qf} outside [1,100]")));
    }
    let scale = if qf < 50 { 5000 / qf } else { 200 - 2 * qf };
    Ok(QuantTableSet {
        luma: scale_table(&BASE_LUMA, scale),
        chroma: scale_table(&BASE_CHROMA, scale),
        qf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn qf50_is_the_base_table() {
        let t = quant_tables(50).unwrap();
        assert_eq!(t.luma, BASE_LUMA);
        assert_eq!(t.chroma, BASE_CHROMA);
    }

    #[test]
    fn qf100_is_all_ones() {
        let t = quant_tables(100).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(t.luma[i][j], 1);
                assert_eq!(t.chroma[i][j], 1);
            }
        }
    }

    #[test]
    fn qf5_luma_dc_matches_reference_encoder() {
        // Frozen from an independent libjpeg run at quality 5 before this
        // module was written.
        assert_eq!(quant_tables(5).unwrap().luma[0][0], 160);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(quant_tables(0).is_err());
        assert!(quant_tables(101).is_err());
    }

    #[test]
    fn entries_always_in_bounds() {
        for qf in 1..=100 {
            let t = quant_tables(qf).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    assert!((1..=255).contains(&t.luma[i][j]));
                    assert!((1..=255).contains(&t.chroma[i][j]));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_non_increasing_in_qf(qf in 5u32..95) {
            let lo = quant_tables(qf).unwrap();
            let hi = quant_tables(qf + 1).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    prop_assert!(lo.luma[i][j] >= hi.luma[i][j]);
                    prop_assert!(lo.chroma[i][j] >= hi.chroma[i][j]);
                }
            }
        }
    }
}
