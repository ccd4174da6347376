use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Cached layer inputs (`d_in × n`) with a fixed train/validation split.
///
/// The validation part is the last `⌈val_fraction · n⌉` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    pub x: Matrix,
    pub n_train: usize,
}

impl CalibrationBatch {
    pub fn split_tail(x: Matrix, val_fraction: f64) -> Result<Self> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::invalid(format!("val_fraction must be in (0, 1), got {val_fraction}")));
        }
        let n = x.cols();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 calibration samples, got {n}")));
        }
        let n_val = ((val_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        Ok(Self { x, n_train: n - n_val })
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }

    pub fn d_in(&self) -> usize {
        self.x.rows()
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.n_train..self.n()
    }

    pub fn train(&self) -> Matrix {
        self.x.submatrix(0..self.d_in(), self.train_indices())
    }

    pub fn val(&self) -> Matrix {
        self.x.submatrix(0..self.d_in(), self.val_indices())
    }
}
