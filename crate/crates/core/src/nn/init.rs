use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Xavier-uniform `rows x cols` matrix: entries drawn in row-major order as
/// `-a + 2a * u` with `u` from [`SplitMix64::next_f64`] and
/// `a = sqrt(6 / (rows + cols))` (fan_in = cols, fan_out = rows).
pub fn xavier_uniform(rows: usize, cols: usize, seed: u64) -> Result<Array2<f64>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("cannot initialize a {rows}x{cols} tensor")));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    Ok(Array2::from_shape_simple_fn((rows, cols), || {
        -bound + 2.0 * bound * rng.next_f64()
    }))
}

/// Initial value for a parameter of the given shape: Xavier-uniform for
/// matrices, zeros for vectors (biases).
pub fn init_params(shape: &[usize], seed: u64) -> Result<ndarray::ArrayD<f64>> {
    match *shape {
        [n] if n > 0 => Ok(Array1::zeros(n).into_dyn()),
        [rows, cols] => Ok(xavier_uniform(rows, cols, seed)?.into_dyn()),
        _ => Err(Error::Config(format!("cannot initialize a tensor of shape {shape:?}"))),
    }
}
