use super::tensor::Tensor;

/// Sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, dim]);
    for pair in 0..dim.div_ceil(2) {
        let freq = 1.0 / 10000f64.powf((2 * pair) as f64 / dim as f64);
        for t in 0..len {
            let angle = t as f64 * freq;
            let row = pe.row_mut(t);
            row[2 * pair] = angle.sin();
            if 2 * pair + 1 < dim {
                row[2 * pair + 1] = angle.cos();
            }
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let pe = positional_encoding(4, 128);
        for (j, &v) in pe.row(0).iter().enumerate() {
            assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn entries_are_bounded() {
        let pe = positional_encoding(300, 128);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn first_column_is_sin_t() {
        let pe = positional_encoding(300, 128);
        for t in 0..300 {
            assert_eq!(pe.at(t, 0), (t as f64).sin());
            assert_eq!(pe.at(t, 1), (t as f64).cos());
        }
    }
}
