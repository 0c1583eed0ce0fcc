use super::{NnError, Scalar};

/// Dense `(batch, channels, height, width)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(NnError::Shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape,
            data: (0..shape.iter().product()).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(self, shape: [usize; 4]) -> Result<Self, NnError> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Concatenates `(B, C1, 1, 1)` and `(B, C2, 1, 1)` feature vectors.
    pub fn concat_features(a: &Self, b: &Self) -> Result<Self, NnError> {
        if a.shape[0] != b.shape[0] {
            return Err(NnError::Shape(format!(
                "cannot concatenate batches {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let (la, lb) = (a.item_len(), b.item_len());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.shape[0] {
            data.extend_from_slice(&a.data[i * la..(i + 1) * la]);
            data.extend_from_slice(&b.data[i * lb..(i + 1) * lb]);
        }
        Ok(Self {
            shape: [a.shape[0], la + lb, 1, 1],
            data,
        })
    }

    /// Inverse of [`Tensor4::concat_features`]: splits after `first` features.
    pub fn split_features(&self, first: usize) -> (Self, Self) {
        let n = self.item_len();
        let b = self.shape[0];
        let mut x = Vec::with_capacity(b * first);
        let mut y = Vec::with_capacity(b * (n - first));
        for row in self.data.chunks_exact(n) {
            x.extend_from_slice(&row[..first]);
            y.extend_from_slice(&row[first..]);
        }
        (
            Self {
                shape: [b, first, 1, 1],
                data: x,
            },
            Self {
                shape: [b, n - first, 1, 1],
                data: y,
            },
        )
    }
}
