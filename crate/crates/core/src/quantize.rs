//! Post-training quantization of scenario-specific embedding tables.
//!
//! Per-row symmetric linear quantization: each row stores integer codes plus
//! one f64 scale. The memory ratio is reported against a float32 baseline by
//! byte count; a dequantized copy backs the inference path.

use crate::embeddings::ParamStore;
use crate::error::{GsvrError, Result};
use crate::numerics::ParamId;

#[derive(Debug, Clone)]
pub enum Codes {
    I8(Vec<i8>),
    I16(Vec<i16>),
}

impl Codes {
    fn bytes(&self) -> usize {
        match self {
            Codes::I8(v) => v.len(),
            Codes::I16(v) => v.len() * 2,
        }
    }

    fn get(&self, i: usize) -> i32 {
        match self {
            Codes::I8(v) => v[i] as i32,
            Codes::I16(v) => v[i] as i32,
        }
    }
}

/// One quantized table: per-row scales and row-major integer codes.
#[derive(Debug, Clone)]
pub struct QuantizedTable {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub bits: u32,
    pub scales: Vec<f64>,
    pub codes: Codes,
}

impl QuantizedTable {
    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.vocab_size * self.dim)
            .map(|i| self.codes.get(i) as f64 * self.scales[i / self.dim])
            .collect()
    }

    /// Stored bytes: codes plus one f64 scale per row.
    pub fn quantized_bytes(&self) -> usize {
        self.codes.bytes() + self.vocab_size * 8
    }

    /// Float32 baseline bytes for the same weights.
    pub fn baseline_bytes_f32(&self) -> usize {
        self.vocab_size * self.dim * 4
    }
}

/// Byte accounting and reconstruction error over a set of quantized tables.
#[derive(Debug, Clone, serde::Serialize)]
pub struct QuantReport {
    pub bits: u32,
    pub quantized_bytes: usize,
    pub baseline_bytes_f32: usize,
    pub memory_ratio: f64,
    pub max_abs_error: f64,
}

/// Quantize one table's weights. Supported widths: 8 and 16 bits.
pub fn quantize_weights(
    name: &str,
    vocab_size: usize,
    dim: usize,
    weights: &[f64],
    bits: u32,
) -> Result<QuantizedTable> {
    if bits != 8 && bits != 16 {
        return Err(GsvrError::Config(format!(
            "unsupported quantization width {bits} (use 8 or 16)"
        )));
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let mut scales = Vec::with_capacity(vocab_size);
    let mut codes_i32 = Vec::with_capacity(weights.len());
    for r in 0..vocab_size {
        let row = &weights[r * dim..(r + 1) * dim];
        let max_abs = row.iter().fold(0.0f64, |acc, &w| acc.max(w.abs()));
        let scale = if max_abs == 0.0 { 0.0 } else { max_abs / qmax };
        scales.push(scale);
        for &w in row {
            let code = if scale == 0.0 {
                0
            } else {
                (w / scale).round().clamp(-qmax, qmax) as i32
            };
            codes_i32.push(code);
        }
    }
    let codes = match bits {
        8 => Codes::I8(codes_i32.iter().map(|&c| c as i8).collect()),
        _ => Codes::I16(codes_i32.iter().map(|&c| c as i16).collect()),
    };
    Ok(QuantizedTable {
        name: name.to_string(),
        vocab_size,
        dim,
        bits,
        scales,
        codes,
    })
}

/// Quantize the given tables in place (weights are replaced by their
/// dequantized values so inference runs on what quantized storage would
/// reconstruct). Returns the quantized tables and the byte accounting.
pub fn quantize_scenario_embeddings(
    store: &mut ParamStore,
    targets: &[ParamId],
    bits: u32,
) -> Result<(Vec<QuantizedTable>, QuantReport)> {
    let mut tables = Vec::with_capacity(targets.len());
    let mut quantized_bytes = 0;
    let mut baseline = 0;
    let mut max_err = 0.0f64;
    for &id in targets {
        let (name, vocab, dim, weights) = {
            let t = store.get(id);
            (t.name.clone(), t.vocab_size, t.dim, t.weights.clone())
        };
        let q = quantize_weights(&name, vocab, dim, &weights, bits)?;
        let deq = q.dequantize();
        for (w, d) in weights.iter().zip(deq.iter()) {
            max_err = max_err.max((w - d).abs());
        }
        quantized_bytes += q.quantized_bytes();
        baseline += q.baseline_bytes_f32();
        store.get_mut(id).weights = deq;
        tables.push(q);
    }
    let report = QuantReport {
        bits,
        quantized_bytes,
        baseline_bytes_f32: baseline,
        memory_ratio: quantized_bytes as f64 / baseline.max(1) as f64,
        max_abs_error: max_err,
    };
    Ok((tables, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_row_is_exact() {
        let q = quantize_weights("t", 2, 3, &[0.0, 0.0, 0.0, 1.0, -2.0, 0.5], 8).unwrap();
        assert_eq!(q.scales[0], 0.0);
        let deq = q.dequantize();
        assert_eq!(&deq[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ratio_for_dim_40_is_point_three() {
        let weights = vec![0.5; 100 * 40];
        let q = quantize_weights("t", 100, 40, &weights, 8).unwrap();
        let ratio = q.quantized_bytes() as f64 / q.baseline_bytes_f32() as f64;
        assert!((ratio - 0.30).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn reconstruction_error_bounded_by_half_scale() {
        let mut rng = Rng::new(9);
        for bits in [8u32, 16] {
            let weights: Vec<f64> = (0..50 * 12).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let q = quantize_weights("t", 50, 12, &weights, bits).unwrap();
            let deq = q.dequantize();
            for r in 0..50 {
                let scale = q.scales[r];
                for j in 0..12 {
                    let err = (weights[r * 12 + j] - deq[r * 12 + j]).abs();
                    assert!(err <= scale / 2.0 + 1e-15, "bits {bits}: err {err} scale {scale}");
                }
            }
        }
    }

    #[test]
    fn max_values_quantize_without_clipping() {
        let weights = vec![-1.0, 1.0, 0.25, -0.125];
        let q = quantize_weights("t", 1, 4, &weights, 8).unwrap();
        let deq = q.dequantize();
        assert!((deq[0] - -1.0).abs() < 1e-12);
        assert!((deq[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unsupported_bits_is_config_error() {
        assert!(quantize_weights("t", 1, 2, &[0.0, 0.0], 12).is_err());
        assert!(quantize_weights("t", 1, 2, &[0.0, 0.0], 4).is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dequantize_error_within_half_scale(
            row in proptest::collection::vec(-10.0f64..10.0, 1..24),
        ) {
            let q = quantize_weights("t", 1, row.len(), &row, 8).unwrap();
            let deq = q.dequantize();
            for (w, d) in row.iter().zip(deq.iter()) {
                prop_assert!((w - d).abs() <= q.scales[0] / 2.0 + 1e-15);
            }
        }
    }
}
