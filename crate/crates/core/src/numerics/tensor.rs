use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    /// Size of the trailing dimension.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Nearest-neighbour resize of an `[H0, W0, C]` raster to `[h, w, C]`.
///
/// Output pixel `(i, j)` copies source pixel `(floor(i*H0/h), floor(j*W0/w))`.
pub fn resize_nearest(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = target;
    if input.shape().len() != 3 {
        return Err(Error::shape(
            "resize_nearest",
            format!("expected [H, W, C], got {:?}", input.shape()),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("resize_nearest", "target size must be positive"));
    }
    let (h0, w0, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if (h0, w0) == (h, w) {
        return Ok(input.clone());
    }
    let src = input.data();
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        let si = i * h0 / h;
        for j in 0..w {
            let sj = j * w0 / w;
            let base = (si * w0 + sj) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::new(vec![3, 2, 1], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        assert_eq!(resize_nearest(&t, (3, 2)).unwrap(), t);
        let ones = Tensor::filled(&[7, 5, 3], 1.0);
        let r = resize_nearest(&ones, (4, 9)).unwrap();
        assert_eq!(r.shape(), &[4, 9, 3]);
        assert!(r.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resize_half_left_mask() {
        // 4x4, left two columns ones
        let mut data = vec![0.0; 16];
        for r in 0..4 {
            data[r * 4] = 1.0;
            data[r * 4 + 1] = 1.0;
        }
        let t = Tensor::new(vec![4, 4, 1], data).unwrap();
        let r = resize_nearest(&t, (2, 2)).unwrap();
        // index-mapping oracle: (i, j) <- (2i, 2j)
        assert_eq!(r.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn resize_stays_binary() {
        let data: Vec<f64> = (0..5 * 7 * 2).map(|i| ((i * 7919) % 3 == 0) as u8 as f64).collect();
        let t = Tensor::new(vec![5, 7, 2], data).unwrap();
        for (h, w) in [(1, 1), (3, 11), (10, 14), (2, 3)] {
            let r = resize_nearest(&t, (h, w)).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
