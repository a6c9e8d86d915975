use crate::error::{Error, Result};

/// Sinusoidal position table, row-major `t_max × d_model`.
///
/// Row `pos` (0-based) holds `sin(pos / 10000^(2i/d))` at column `2i` and
/// `cos(...)` at column `2i + 1`.
pub fn positional_encoding(t_max: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("d_model must be positive and even, got {d_model}")));
    }
    let mut table = vec![0.0; t_max * d_model];
    for pos in 0..t_max {
        for i in 0..d_model / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 / freq;
            table[pos * d_model + 2 * i] = angle.sin();
            table[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let pe = positional_encoding(4, 8).unwrap();
        for (i, v) in pe[..8].iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn bounded_and_known_value() {
        let pe = positional_encoding(128, 64).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe[64] - 0.841471).abs() < 1e-6);
        assert_eq!(pe[64], 1f64.sin());
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(matches!(positional_encoding(4, 7), Err(Error::Config(_))));
    }
}
