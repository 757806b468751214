//! Feature-major activation matrices.
//!
//! `Acts` stores `dim` features for `batch` independent samples, with the
//! batch values of one feature contiguous. Concatenating along the feature
//! axis is therefore a plain append.

#[derive(Clone, Debug, PartialEq)]
pub struct Acts {
    batch: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Acts {
    pub fn zeros(dim: usize, batch: usize) -> Self {
        Acts {
            batch,
            dim,
            data: vec![0.0; dim * batch],
        }
    }

    pub fn filled(dim: usize, batch: usize, value: f64) -> Self {
        Acts {
            batch,
            dim,
            data: vec![value; dim * batch],
        }
    }

    /// Builds from feature-major data (`data[feature * batch + sample]`).
    pub fn from_feature_major(dim: usize, batch: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * batch, "Acts: data length");
        Acts { batch, dim, data }
    }

    /// A single sample as a column.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Acts {
            batch: 1,
            dim: values.len(),
            data: values,
        }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.data[i * self.batch..(i + 1) * self.batch]
    }

    #[inline]
    pub fn feature_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.batch..(i + 1) * self.batch]
    }

    #[inline]
    pub fn get(&self, feature: usize, sample: usize) -> f64 {
        self.data[feature * self.batch + sample]
    }

    #[inline]
    pub fn set(&mut self, feature: usize, sample: usize, v: f64) {
        self.data[feature * self.batch + sample] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Values of one sample across all features.
    pub fn sample(&self, s: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, s)).collect()
    }

    pub fn concat(parts: &[&Acts]) -> Acts {
        let batch = parts.first().map_or(0, |p| p.batch);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!(p.batch, batch, "Acts::concat: batch mismatch");
            data.extend_from_slice(&p.data);
        }
        Acts {
            batch,
            dim: data.len() / batch.max(1),
            data,
        }
    }

    /// Inverse of [`Acts::concat`] for the given feature widths.
    pub fn split(&self, dims: &[usize]) -> Vec<Acts> {
        assert_eq!(dims.iter().sum::<usize>(), self.dim, "Acts::split: widths");
        let mut out = Vec::with_capacity(dims.len());
        let mut start = 0;
        for &d in dims {
            let end = start + d * self.batch;
            out.push(Acts {
                batch: self.batch,
                dim: d,
                data: self.data[start..end].to_vec(),
            });
            start = end;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Acts) {
        assert_eq!((self.dim, self.batch), (other.dim, other.batch));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}
