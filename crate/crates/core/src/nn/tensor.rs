use super::NnError;

/// Dense row-major `f64` array; 4-D tensors are laid out NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, NnError> {
        Self::from_vec(shape, self.data)
    }

    /// Leading dimension (batch size).
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn debug_check_finite(&self, what: &str) {
        debug_assert!(self.all_finite(), "non-finite values in {what}");
    }

    /// Shape of a 4-D tensor as `(n, c, h, w)`.
    pub(crate) fn nchw(&self) -> Result<(usize, usize, usize, usize), NnError> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(NnError::Shape(format!("expected an NCHW tensor, got shape {s:?}"))),
        }
    }

    /// Shape of a 2-D tensor as `(rows, cols)`.
    pub(crate) fn matrix(&self) -> Result<(usize, usize), NnError> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            ref s => Err(NnError::Shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }
}
