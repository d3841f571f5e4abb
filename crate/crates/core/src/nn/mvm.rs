//! Reference fixed-point matrix-vector products.
//!
//! `W` is row-major `rows x cols`. Products are summed exactly in 64-bit
//! accumulators and rounded once when the sum is converted back to Q16.16,
//! so the result does not depend on summation order: the column-wise
//! decomposition (sum of `column_j * x_j` partial vectors), the row-wise dot
//! product and any tiling of either give identical codes.

use crate::fixnum::{Fx16, Fx32, Quantizer};

fn finish(acc: i64, bias: Option<Fx32>) -> Fx32 {
    let b = bias.map_or(0, |b| b.raw() as i64);
    Fx32::saturate(b + (acc >> 16))
}

fn finish_half(acc: i64, q: &Quantizer, bias: Option<Fx32>) -> Fx32 {
    let b = bias.map_or(0, |b| b.raw() as i64);
    Fx32::saturate(b.saturating_add(q.rescale(acc)))
}

/// `W x + bias` with 32-bit activations.
pub fn mvm(w: &[Fx32], rows: usize, cols: usize, x: &[Fx32], bias: Option<&[Fx32]>) -> Vec<Fx32> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            let acc: i64 = row.iter().zip(x).map(|(w, x)| w.raw() as i64 * x.raw() as i64).sum();
            finish(acc, bias.map(|b| b[i]))
        })
        .collect()
}

/// `W x + bias` where `x` holds re-centred 16-bit codes. The zero-point
/// correction `offset * sum_j W[i][j]` is added to each accumulator, which
/// makes the result equal to [`mvm`] on the dequantized activations.
pub fn mvm_half(
    w: &[Fx32],
    rows: usize,
    cols: usize,
    codes: &[Fx16],
    q: &Quantizer,
    bias: Option<&[Fx32]>,
) -> Vec<Fx32> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(codes.len(), cols);
    let offset = q.offset();
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            let mut acc = 0i64;
            let mut row_sum = 0i64;
            for (w, c) in row.iter().zip(codes) {
                acc += w.raw() as i64 * c.raw() as i64;
                row_sum += w.raw() as i64;
            }
            finish_half(acc + offset * row_sum, q, bias.map(|b| b[i]))
        })
        .collect()
}

/// `W^T e`: each row of `W` scaled by the matching error element and
/// accumulated, i.e. the column-wise decomposition of the transposed matrix.
pub fn mvm_t(w: &[Fx32], rows: usize, cols: usize, e: &[Fx32]) -> Vec<Fx32> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(e.len(), rows);
    let mut acc = vec![0i64; cols];
    for (i, &ei) in e.iter().enumerate() {
        let ei = ei.raw() as i64;
        if ei == 0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (a, w) in acc.iter_mut().zip(row) {
            *a += w.raw() as i64 * ei;
        }
    }
    acc.into_iter().map(|a| finish(a, None)).collect()
}

/// `W^T e` with a quantized vector.
pub fn mvm_t_half(w: &[Fx32], rows: usize, cols: usize, codes: &[Fx16], q: &Quantizer) -> Vec<Fx32> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(codes.len(), rows);
    let offset = q.offset();
    let mut acc = vec![0i64; cols];
    let mut col_sum = vec![0i64; cols];
    for (i, c) in codes.iter().enumerate() {
        let c = c.raw() as i64;
        let row = &w[i * cols..(i + 1) * cols];
        for ((a, s), w) in acc.iter_mut().zip(col_sum.iter_mut()).zip(row) {
            *a += w.raw() as i64 * c;
            *s += w.raw() as i64;
        }
    }
    acc.into_iter()
        .zip(col_sum)
        .map(|(a, s)| finish_half(a + offset * s, q, None))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn fx(v: &[f64]) -> Vec<Fx32> {
        v.iter().map(|&x| Fx32::from_real(x)).collect()
    }

    #[test]
    fn hand_mvm() {
        let w = fx(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mvm(&w, 2, 2, &fx(&[5.0, 6.0]), None), fx(&[17.0, 39.0]));
        assert_eq!(mvm_t(&w, 2, 2, &fx(&[5.0, 6.0])), fx(&[23.0, 34.0]));
        let w = fx(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            mvm(&w, 2, 3, &fx(&[1.0, 1.0, 1.0]), Some(&fx(&[0.5, -1.0]))),
            fx(&[6.5, 14.0])
        );
    }

    #[test]
    fn half_matches_full_on_dequantized_inputs() {
        let mut rng = SplitMix64::new(11);
        for trial in 0..200 {
            let (rows, cols) = (1 + rng.below(20) as usize, 1 + rng.below(40) as usize);
            let w: Vec<Fx32> = (0..rows * cols)
                .map(|_| Fx32::from_real(rng.uniform(-2.0, 2.0)))
                .collect();
            let lo = rng.uniform(-5.0, 0.5);
            let q = Quantizer::fit(lo, lo + rng.uniform(0.01, 8.0), if trial % 2 == 0 { 16 } else { 8 }).unwrap();
            let codes: Vec<Fx16> = (0..cols.max(rows))
                .map(|_| q.quantize(Fx32::from_real(rng.uniform(lo - 1.0, lo + 9.0))))
                .collect();
            let deq: Vec<Fx32> = codes.iter().map(|&c| q.dequantize(c)).collect();
            let bias: Vec<Fx32> = (0..rows).map(|_| Fx32::from_real(rng.uniform(-1.0, 1.0))).collect();
            assert_eq!(
                mvm_half(&w, rows, cols, &codes[..cols], &q, Some(&bias)),
                mvm(&w, rows, cols, &deq[..cols], Some(&bias))
            );
            assert_eq!(
                mvm_t_half(&w, rows, cols, &codes[..rows], &q),
                mvm_t(&w, rows, cols, &deq[..rows])
            );
        }
    }
}
