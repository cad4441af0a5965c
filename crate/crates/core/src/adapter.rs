//! Model adapter trait: the only interface the explanation engine
//! uses to talk to a segmentation model.

use ndarray::Array3;

use crate::error::{MisureError, Result};
use crate::types::{Image, ProbabilityMap};

/// What an adapter can do beyond plain forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    /// Vector-Jacobian products against the input image.
    pub vjp: bool,
    /// Intermediate activations and their gradients (for CAM methods).
    pub activations: bool,
    /// Safe to call concurrently from multiple threads.
    pub thread_safe: bool,
}

impl Capabilities {
    pub const FORWARD_ONLY: Capabilities = Capabilities {
        vjp: false,
        activations: false,
        thread_safe: true,
    };
}

/// Input geometry an adapter accepts. `None` spatial dims mean the
/// adapter is fully convolutional in that axis (any compatible size).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: Option<usize>,
    pub width: Option<usize>,
}

/// A segmentation model seen through a minimal functional interface.
///
/// `forward` maps a `[C][H][W]` image to per-pixel class probabilities
/// `[L][H][W]`. The gradient entry points are optional; callers must
/// check `capabilities()` and will get `Capability` errors otherwise.
/// Implementors must be shareable across threads; the `thread_safe`
/// capability additionally states that concurrent *calls* are allowed.
pub trait SegmentationAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn num_classes(&self) -> usize;

    fn input_shape(&self) -> InputShape {
        InputShape {
            channels: 1,
            height: None,
            width: None,
        }
    }

    fn capabilities(&self) -> Capabilities;

    fn forward(&self, image: &Image) -> Result<ProbabilityMap>;

    /// Vector-Jacobian product: gradient of `<cotangent, forward(image)>`
    /// with respect to the image. `cotangent` is `[L][H][W]`; the result
    /// is `[C][H][W]`.
    fn vjp(&self, _image: &Image, _cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        Err(MisureError::Capability {
            adapter: self.name().into(),
            capability: "vjp".into(),
        })
    }

    /// Activations `[K][H'][W']` of a named internal layer.
    fn activations(&self, _image: &Image, _layer: &str) -> Result<Array3<f64>> {
        Err(MisureError::Capability {
            adapter: self.name().into(),
            capability: "activations".into(),
        })
    }

    /// Gradient of `<cotangent, forward(image)>` with respect to the
    /// named layer's activations, same shape as `activations`.
    fn activation_gradient(
        &self,
        _image: &Image,
        _layer: &str,
        _cotangent: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        Err(MisureError::Capability {
            adapter: self.name().into(),
            capability: "activations".into(),
        })
    }
}

/// Central-difference reference for `vjp`: perturbs every input pixel
/// by `±step` and differences `<cotangent, forward>`. Costs `2*C*H*W`
/// forward passes; intended for tests and adapter validation only.
pub fn finite_difference_vjp(
    adapter: &dyn SegmentationAdapter,
    image: &Image,
    cotangent: &Array3<f64>,
    step: f64,
) -> Result<Array3<f64>> {
    let (c, h, w) = image.shape();
    let inner = |img: &Array3<f64>| -> Result<f64> {
        let probs = adapter.forward(&Image::new_unchecked(img.clone()))?;
        Ok((probs.data() * cotangent).sum())
    };
    let mut grad = Array3::<f64>::zeros((c, h, w));
    let mut work = image.data().clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let orig = work[[ch, y, x]];
                work[[ch, y, x]] = orig + step;
                let plus = inner(&work)?;
                work[[ch, y, x]] = orig - step;
                let minus = inner(&work)?;
                work[[ch, y, x]] = orig;
                grad[[ch, y, x]] = (plus - minus) / (2.0 * step);
            }
        }
    }
    Ok(grad)
}

/// Max relative error between two gradient fields, normalized by the
/// larger magnitude with an absolute floor to ignore joint near-zeros.
pub fn max_relative_error(a: &Array3<f64>, b: &Array3<f64>, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Softmax over a fixed per-pixel linear map of the single input
    /// channel: logits = (a*v, b*v). Jacobian is known in closed form.
    struct LinearSoftmax {
        a: f64,
        b: f64,
    }

    impl SegmentationAdapter for LinearSoftmax {
        fn name(&self) -> &str {
            "linear-softmax"
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                vjp: true,
                activations: false,
                thread_safe: true,
            }
        }
        fn forward(&self, image: &Image) -> Result<ProbabilityMap> {
            let (_, h, w) = image.shape();
            let mut p = Array3::<f64>::zeros((2, h, w));
            for y in 0..h {
                for x in 0..w {
                    let v = image.data()[[0, y, x]];
                    let (ea, eb) = ((self.a * v).exp(), (self.b * v).exp());
                    p[[0, y, x]] = ea / (ea + eb);
                    p[[1, y, x]] = eb / (ea + eb);
                }
            }
            Ok(ProbabilityMap::new_unchecked(p))
        }
        fn vjp(&self, image: &Image, cotangent: &Array3<f64>) -> Result<Array3<f64>> {
            let (_, h, w) = image.shape();
            let probs = self.forward(image)?;
            let p = probs.data();
            let mut grad = Array3::<f64>::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    // d p0/dv = p0*p1*(a-b); d p1/dv = p0*p1*(b-a).
                    let pp = p[[0, y, x]] * p[[1, y, x]];
                    grad[[0, y, x]] = cotangent[[0, y, x]] * pp * (self.a - self.b)
                        + cotangent[[1, y, x]] * pp * (self.b - self.a);
                }
            }
            Ok(grad)
        }
    }

    /// Constant output regardless of input.
    struct ConstantAdapter;

    impl SegmentationAdapter for ConstantAdapter {
        fn name(&self) -> &str {
            "constant"
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities::FORWARD_ONLY
        }
        fn forward(&self, image: &Image) -> Result<ProbabilityMap> {
            let (_, h, w) = image.shape();
            let mut p = Array3::<f64>::zeros((2, h, w));
            p.index_axis_mut(ndarray::Axis(0), 0).fill(0.25);
            p.index_axis_mut(ndarray::Axis(0), 1).fill(0.75);
            Ok(ProbabilityMap::new_unchecked(p))
        }
    }

    fn test_image(h: usize, w: usize) -> Image {
        Image::new_unchecked(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            ((y * w + x) as f64 * 0.37).sin().abs().min(1.0)
        }))
    }

    #[test]
    fn forward_only_adapter_reports_capability_errors() {
        let adapter = ConstantAdapter;
        let img = test_image(2, 2);
        let cot = Array3::<f64>::zeros((2, 2, 2));
        assert!(matches!(
            adapter.vjp(&img, &cot),
            Err(MisureError::Capability { .. })
        ));
        assert!(matches!(
            adapter.activations(&img, "bottleneck"),
            Err(MisureError::Capability { .. })
        ));
    }

    #[test]
    fn fd_gradient_of_constant_model_is_zero() {
        let adapter = ConstantAdapter;
        let img = test_image(3, 3);
        let mut cot = Array3::<f64>::zeros((2, 3, 3));
        cot.fill(1.0);
        let g = finite_difference_vjp(&adapter, &img, &cot, 1e-4).unwrap();
        for &v in g.iter() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_vjp_matches_finite_differences() {
        let adapter = LinearSoftmax { a: 1.5, b: -0.5 };
        let img = test_image(4, 3);
        let cot = Array3::from_shape_fn((2, 4, 3), |(l, y, x)| {
            ((l + 2 * y + 3 * x) as f64 * 0.21).cos()
        });
        let analytic = adapter.vjp(&img, &cot).unwrap();
        let fd = finite_difference_vjp(&adapter, &img, &cot, 1e-4).unwrap();
        let err = max_relative_error(&analytic, &fd, 1e-6);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let adapter = LinearSoftmax { a: 0.8, b: 0.1 };
        let img = test_image(3, 3);
        let c1 = Array3::from_shape_fn((2, 3, 3), |(l, y, x)| (l + y + x) as f64 * 0.1);
        let c2 = Array3::from_shape_fn((2, 3, 3), |(l, y, x)| ((l * 2 + y) as f64 - x as f64) * 0.05);
        let combo = &c1 * 2.0 + &c2 * 3.0;
        let lhs = adapter.vjp(&img, &combo).unwrap();
        let g1 = adapter.vjp(&img, &c1).unwrap();
        let g2 = adapter.vjp(&img, &c2).unwrap();
        let rhs = &g1 * 2.0 + &g2 * 3.0;
        for (&a, &b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
