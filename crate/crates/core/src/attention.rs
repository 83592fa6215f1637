//! Box-attention maps and additive conditioning of feature maps.
//!
//! An attention map is a binary `[H, W, 3]` raster. Channel 0 marks the
//! pixels of the conditioning box; channels 1 and 2 flag whether a box is
//! present (`0, 1`) or the map is empty (`1, 0`), so that units with small
//! receptive fields still know which query they are answering.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{resize_nearest, Graph, Padding, Parameter, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    raster: Tensor,
    source_box: Option<BBox>,
}

impl AttentionMap {
    pub fn raster(&self) -> &Tensor {
        &self.raster
    }

    pub fn source_box(&self) -> Option<&BBox> {
        self.source_box.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.source_box.is_none()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.raster.shape()[0], self.raster.shape()[1])
    }

    /// The map with no subject box.
    pub fn empty(image_size: (usize, usize)) -> Self {
        encode(None, image_size)
    }
}

/// Pixel `(r, c)` belongs to `b` iff its center lies in the half-open box
/// `[x_min, x_max) x [y_min, y_max)`.
pub fn pixel_in_box(b: &BBox, r: usize, c: usize, size: (usize, usize)) -> bool {
    let cy = (r as f64 + 0.5) / size.0 as f64;
    let cx = (c as f64 + 0.5) / size.1 as f64;
    cx >= b.x_min() && cx < b.x_max() && cy >= b.y_min() && cy < b.y_max()
}

/// Builds the 3-channel attention raster for `bbox` (or the empty map).
///
/// A box too small to contain any pixel center marks the single pixel that
/// contains its center, so a present box never yields an empty channel 0.
pub fn encode(bbox: Option<&BBox>, image_size: (usize, usize)) -> AttentionMap {
    let (h, w) = image_size;
    assert!(h > 0 && w > 0, "attention map needs a positive size");
    let mut data = vec![0.0; h * w * 3];
    match bbox {
        None => {
            for px in data.chunks_mut(3) {
                px[1] = 1.0;
            }
        }
        Some(b) => {
            let mut any = false;
            for r in 0..h {
                for c in 0..w {
                    let px = &mut data[(r * w + c) * 3..(r * w + c + 1) * 3];
                    px[2] = 1.0;
                    if pixel_in_box(b, r, c, image_size) {
                        px[0] = 1.0;
                        any = true;
                    }
                }
            }
            if !any {
                let (cx, cy) = b.center();
                let r = ((cy * h as f64) as usize).min(h - 1);
                let c = ((cx * w as f64) as usize).min(w - 1);
                data[(r * w + c) * 3] = 1.0;
            }
        }
    }
    AttentionMap {
        raster: Tensor::new(vec![h, w, 3], data).expect("consistent shape"),
        source_box: bbox.copied(),
    }
}

/// Zero-initialized 3x3 convolution mapping the attention raster to the
/// channel count of the host feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSite {
    pub kernel: Parameter,
}

impl ConditioningSite {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        ConditioningSite {
            kernel: Parameter::new(name, Tensor::zeros(&[3, 3, 3, channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.kernel.value.shape()[3]
    }
}

/// `u + conv3x3(resize_nearest(m, size(u)), kernel)`.
///
/// `kernel` is the graph handle bound to a [`ConditioningSite`] kernel.
pub fn condition(g: &mut Graph, u: Var, m: &AttentionMap, kernel: Var) -> Result<Var> {
    let us = g.value(u).shape().to_vec();
    let ks = g.value(kernel).shape().to_vec();
    if us.len() != 3 {
        return Err(Error::shape(
            "condition",
            format!("feature map must be [H, W, K], got {us:?}"),
        ));
    }
    if ks != [3, 3, 3, us[2]] {
        return Err(Error::shape(
            "condition",
            format!("kernel {ks:?} does not produce {} channels", us[2]),
        ));
    }
    let resized = resize_nearest(m.raster(), (us[0], us[1]))?;
    let mv = g.constant(resized);
    let delta = g.conv2d(mv, kernel, 1, Padding::Same)?;
    g.add(u, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel(m: &AttentionMap, ch: usize) -> Vec<f64> {
        m.raster().data().chunks(3).map(|p| p[ch]).collect()
    }

    #[test]
    fn empty_map_channels() {
        let m = encode(None, (4, 4));
        assert!(channel(&m, 0).iter().all(|&v| v == 0.0));
        assert!(channel(&m, 1).iter().all(|&v| v == 1.0));
        assert!(channel(&m, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_image_box_channels() {
        let m = encode(Some(&BBox::full()), (4, 4));
        assert!(channel(&m, 0).iter().all(|&v| v == 1.0));
        assert!(channel(&m, 1).iter().all(|&v| v == 0.0));
        assert!(channel(&m, 2).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn left_half_box() {
        let b = BBox::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let m = encode(Some(&b), (4, 4));
        let ch0 = channel(&m, 0);
        // pixel-center enumeration: columns 0,1 have centers 0.125, 0.375 < 0.5
        for r in 0..4 {
            assert_eq!(&ch0[r * 4..r * 4 + 4], &[1.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn tiny_box_marks_its_center_pixel() {
        let b = BBox::new(0.30, 0.30, 0.31, 0.31).unwrap();
        let m = encode(Some(&b), (4, 4));
        let ch0 = channel(&m, 0);
        assert_eq!(ch0.iter().sum::<f64>(), 1.0);
        assert_eq!(ch0[4 + 1], 1.0);
    }

    #[test]
    fn zero_kernel_leaves_features_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Tensor::new(vec![4, 5, 2], (0..40).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let site = ConditioningSite::new("c", 2);
        let m = encode(Some(&BBox::new(0.1, 0.2, 0.6, 0.9).unwrap()), (16, 20));
        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let k = g.leaf(site.kernel.value.clone());
        let out = condition(&mut g, uv, &m, k).unwrap();
        assert_eq!(g.value(out), &u);
    }

    #[test]
    fn different_boxes_give_different_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::zeros(&[6, 6, 3]);
        let kernel = Tensor::new(vec![3, 3, 3, 3], (0..81).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let run = |b: BBox| {
            let mut g = Graph::new();
            let uv = g.constant(u.clone());
            let k = g.constant(kernel.clone());
            let m = encode(Some(&b), (24, 24));
            let out = condition(&mut g, uv, &m, k).unwrap();
            g.value(out).clone()
        };
        for _ in 0..20 {
            let x0 = rng.random_range(0.0..0.5);
            let y0 = rng.random_range(0.0..0.5);
            let a = BBox::new(x0, y0, x0 + 0.3, y0 + 0.3).unwrap();
            let b = BBox::new(x0 + 0.2, y0 + 0.1, x0 + 0.5, y0 + 0.45).unwrap();
            assert_ne!(run(a), run(b));
        }
    }

    #[test]
    fn kernel_shape_must_match_channels() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::zeros(&[4, 4, 5]));
        let k = g.leaf(Tensor::zeros(&[3, 3, 3, 4]));
        assert!(condition(&mut g, u, &AttentionMap::empty((8, 8)), k).is_err());
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Tensor::new(vec![5, 5, 2], (0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let k = Tensor::new(vec![3, 3, 3, 2], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![5, 5, 2], (0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let m = encode(Some(&BBox::new(0.2, 0.1, 0.7, 0.6).unwrap()), (10, 10));
        let err = grad_check(
            |g, v| {
                let y = condition(g, v[0], &m, v[1])?;
                let s = g.sigmoid(y);
                g.dot(s, w.clone())
            },
            &[u, k],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
