use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("tensor contains a non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("index ({row}, {col}) out of bounds for {rows}x{cols} tensor")]
    OutOfBounds { row: usize, col: usize, rows: usize, cols: usize },
}

/// Dense 2-D array of f64 in row-major order. Shape is fixed at construction
/// and every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch { rows, cols, len: data.len() });
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    row: if cols == 0 { 0 } else { idx / cols },
                    col: if cols == 0 { 0 } else { idx % cols },
                });
            }
        }
        Ok(Tensor { rows, cols, data, requires_grad: false })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::LengthMismatch { rows: r, cols: c, len: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols], requires_grad: false }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        debug_assert!(value.is_finite());
        Tensor { rows, cols, data: vec![value; rows * cols], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::from_vec(1, 1, vec![value])
    }

    /// Marks the tensor as a trainable leaf when inserted into a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Scalar payload of a 1x1 tensor.
    pub fn item(&self) -> Option<f64> {
        if self.is_scalar() { Some(self.data[0]) } else { None }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Internal constructor for op outputs; validates finiteness so the
    /// invariant survives overflowing primitives like exp.
    pub(crate) fn checked(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::from_vec(rows, cols, data)
    }

    /// Internal constructor for backward intermediates, which are finite
    /// whenever the forward values were; skips the validation scan.
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data, requires_grad: false }
    }
}
