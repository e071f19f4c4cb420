//! Point-forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
}

/// MAE and MSE over every entry. Fails if the inputs disagree in shape or
/// the result breaks `MAE ≤ √MSE`.
pub fn metrics(y_hat: &Tensor, y: &Tensor) -> Result<Metrics> {
    if y_hat.shape() != y.shape() {
        return Err(shape_err("metrics", y_hat.shape(), y.shape()));
    }
    let n = y.numel() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (a, b) in y_hat.data().iter().zip(y.data()) {
        let d = a - b;
        abs += d.abs();
        sq += d * d;
    }
    let m = Metrics {
        mae: abs / n,
        mse: sq / n,
    };
    if !(m.mae <= m.mse.sqrt() * (1.0 + 1e-12) + 1e-300) {
        return Err(Error::Contract(format!(
            "MAE {} exceeds sqrt(MSE) {}",
            m.mae,
            m.mse.sqrt()
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_and_shifted() {
        let y = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(metrics(&y, &y).unwrap(), Metrics { mae: 0.0, mse: 0.0 });
        let shifted = y.map(|v| v + 1.0);
        assert_eq!(
            metrics(&shifted, &y).unwrap(),
            Metrics { mae: 1.0, mse: 1.0 }
        );
        assert!(metrics(&y, &Tensor::zeros(&[3, 2])).is_err());
    }
}
