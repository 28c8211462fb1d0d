//! Toy encoder-decoder backbone producing per-pixel features at 1/4
//! resolution, plus classic-momentum SGD.
//!
//! Architecture is fixed: 3x3 stride-2 conv, relu, 3x3 stride-2 conv,
//! relu, 3x3 stride-1 conv, relu, 1x1 conv to the feature width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial reduction of the fixed architecture (two stride-2 convs).
pub const DOWNSAMPLE_FACTOR: usize = 4;

/// A named parameter buffer, mutated in place by the optimizer.
#[derive(Clone)]
pub struct Param<T: Scalar> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
}

#[derive(Clone)]
struct ConvLayer<T: Scalar> {
    weight: Param<T>,
    bias: Param<T>,
    stride: usize,
    padding: usize,
    relu: bool,
}

#[derive(Clone)]
pub struct Backbone<T: Scalar> {
    layers: Vec<ConvLayer<T>>,
    /// Feature width C of the output embedding.
    pub feature_dim: usize,
}

fn xavier_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> Param<T> {
    let fan_in = (cin * k * k) as f64;
    let fan_out = (cout * k * k) as f64;
    let a = (6.0 / (fan_in + fan_out)).sqrt();
    let value = (0..cout * cin * k * k)
        .map(|_| T::from_f64(rng.gen_range(-a..a)))
        .collect();
    Param { value, shape: vec![cout, cin, k, k] }
}

impl<T: Scalar> Backbone<T> {
    /// Seeded initialization: Xavier-uniform kernels, zero biases.
    pub fn init(seed: u64, feature_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = feature_dim;
        let specs: [(usize, usize, usize, usize, usize, bool); 4] = [
            (c, 3, 3, 2, 1, true),
            (c, c, 3, 2, 1, true),
            (c, c, 3, 1, 1, true),
            (c, c, 1, 1, 0, false),
        ];
        let layers = specs
            .iter()
            .map(|&(cout, cin, k, stride, padding, relu)| ConvLayer {
                weight: xavier_uniform(&mut rng, cout, cin, k),
                bias: Param { value: vec![T::zero(); cout], shape: vec![cout] },
                stride,
                padding,
                relu,
            })
            .collect();
        Backbone { layers, feature_dim }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flat view of all parameters: weight then bias per layer.
    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Materializes parameter leaves on a fresh graph for one training
    /// step. Leaf order matches `params()`.
    pub fn bind(&self) -> Result<BoundBackbone<T>> {
        let mut leaves = Vec::new();
        for p in self.params() {
            leaves.push(Tensor::param(p.value.clone(), &p.shape)?);
        }
        Ok(BoundBackbone {
            leaves,
            meta: self
                .layers
                .iter()
                .map(|l| (l.stride, l.padding, l.relu))
                .collect(),
        })
    }

    /// Inference-only forward pass (no graph recording).
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.bind()?.forward_detached(image)
    }
}

/// Backbone parameters bound onto a graph as leaf tensors.
pub struct BoundBackbone<T: Scalar> {
    pub leaves: Vec<Tensor<T>>,
    meta: Vec<(usize, usize, bool)>,
}

impl<T: Scalar> BoundBackbone<T> {
    /// `image: [3,H,W]` with H, W divisible by the downsample factor.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("expected [3,H,W] image, got {:?}", s)));
        }
        if s[1] % DOWNSAMPLE_FACTOR != 0 || s[2] % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Dimension(format!(
                "image {}x{} not divisible by downsample factor {}",
                s[1], s[2], DOWNSAMPLE_FACTOR
            )));
        }
        let mut x = image.clone();
        for (i, &(stride, padding, relu)) in self.meta.iter().enumerate() {
            let w = &self.leaves[2 * i];
            let b = &self.leaves[2 * i + 1];
            x = x.conv2d(w, Some(b), stride, padding)?;
            if relu {
                x = x.relu();
            }
        }
        Ok(x)
    }

    fn forward_detached(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(image)?.detach())
    }

    /// Gradients per parameter after backward(); errors if any is missing.
    pub fn grads(&self) -> Result<Vec<Vec<T>>> {
        self.leaves
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.grad()
                    .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", i)))
            })
            .collect()
    }
}

/// Classic momentum SGD: v <- 0.9 v + g + wd p; p <- p - lr v.
pub struct OptimizerState<T: Scalar> {
    pub learning_rate: T,
    pub weight_decay: T,
    buffers: Vec<Vec<T>>,
}

pub const SGD_MOMENTUM: f64 = 0.9;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(backbone: &Backbone<T>, learning_rate: T, weight_decay: T) -> Self {
        let buffers = backbone
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.value.len()])
            .collect();
        OptimizerState { learning_rate, weight_decay, buffers }
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut Vec<Vec<T>> {
        &mut self.buffers
    }
}

pub fn sgd_step<T: Scalar>(
    backbone: &mut Backbone<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let mut params = backbone.params_mut();
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let beta = T::from_f64(SGD_MOMENTUM);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        if g.len() != p.value.len() {
            return Err(Error::Contract("gradient shape mismatch".into()));
        }
        for i in 0..p.value.len() {
            v[i] = beta * v[i] + g[i] + state.weight_decay * p.value[i];
            p.value[i] = p.value[i] - state.learning_rate * v[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::Rng;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a: Backbone<f64> = Backbone::init(9, 8);
        let b: Backbone<f64> = Backbone::init(9, 8);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
        }
        // biases zero, kernels inside the Xavier bound
        for l in &a.layers {
            assert!(l.bias.value.iter().all(|v| *v == 0.0));
            let k = l.weight.shape[2];
            let bound = (6.0 / ((l.weight.shape[1] * k * k + l.weight.shape[0] * k * k) as f64)).sqrt();
            assert!(l.weight.value.iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let bb: Backbone<f64> = Backbone::init(1, 16);
        let img = Tensor::full(&[3, 32, 32], 0.25);
        let f1 = bb.forward(&img).unwrap();
        let f2 = bb.forward(&img).unwrap();
        assert_eq!(f1.shape(), &[16, 8, 8]);
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let bb: Backbone<f64> = Backbone::init(2, 8);
        let img = Tensor::zeros(&[3, 16, 16]);
        let f = bb.forward(&img).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let bb: Backbone<f64> = Backbone::init(0, 8);
        let img = Tensor::zeros(&[3, 10, 12]);
        assert!(matches!(bb.forward(&img), Err(Error::Dimension(_))));
    }

    #[test]
    fn sgd_single_step_and_lr_zero() {
        let mut bb: Backbone<f64> = Backbone::init(4, 4);
        bb.params_mut()[0].value[0] = 1.0;
        let zero_grads: Vec<Vec<f64>> =
            bb.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        let before: Vec<Vec<f64>> = bb.params().iter().map(|p| p.value.clone()).collect();

        // g=0, v=0, wd=0: unchanged
        let mut st = OptimizerState::new(&bb, 0.1, 0.0);
        sgd_step(&mut bb, &zero_grads, &mut st).unwrap();
        for (p, b) in bb.params().iter().zip(&before) {
            assert_eq!(&p.value, b);
        }

        // lr=0 never changes parameters even with nonzero grads
        let ones: Vec<Vec<f64>> = bb.params().iter().map(|p| vec![1.0; p.value.len()]).collect();
        let mut st0 = OptimizerState::new(&bb, 0.0, 0.0);
        sgd_step(&mut bb, &ones, &mut st0).unwrap();
        for (p, b) in bb.params().iter().zip(&before) {
            assert_eq!(&p.value, b);
        }

        // p=1, g=1, v=0, lr=0.1, wd=0 -> p=0.9
        let mut st1 = OptimizerState::new(&bb, 0.1, 0.0);
        sgd_step(&mut bb, &ones, &mut st1).unwrap();
        assert!((bb.params()[0].value[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_two_steps_match_hand_unrolled_recurrence() {
        let mut bb: Backbone<f64> = Backbone::init(4, 4);
        let p0 = bb.params()[0].value[0];
        let (g, lr, wd) = (0.5, 0.01, 0.1);
        let grads: Vec<Vec<f64>> = bb
            .params()
            .iter()
            .map(|p| vec![g; p.value.len()])
            .collect();
        let mut st = OptimizerState::new(&bb, lr, wd);
        sgd_step(&mut bb, &grads, &mut st).unwrap();
        sgd_step(&mut bb, &grads, &mut st).unwrap();
        // Hand-unrolled: v1 = g + wd*p0; p1 = p0 - lr*v1;
        //                v2 = 0.9*v1 + g + wd*p1; p2 = p1 - lr*v2
        let v1 = g + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = 0.9 * v1 + g + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((bb.params()[0].value[0] - p2).abs() < 1e-12);
    }

    #[test]
    fn sgd_missing_gradient_is_contract_error() {
        let mut bb: Backbone<f64> = Backbone::init(4, 4);
        let mut st = OptimizerState::new(&bb, 0.1, 0.0);
        assert!(matches!(
            sgd_step(&mut bb, &[], &mut st),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        // Check d(loss)/d(weights of layer 0) via FD at 64-bit.
        let bb: Backbone<f64> = Backbone::init(3, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let img_data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::new(img_data, &[3, 8, 8]).unwrap();
        let w0 = bb.params()[0];
        let w0_t = Tensor::new(w0.value.clone(), &w0.shape).unwrap();
        let bb2 = bb.clone();
        let f = move |w: &Tensor<f64>| {
            let bound = bb2.bind()?;
            // splice the probed weight in place of layer 0's leaf
            let mut leaves = bound.leaves.clone();
            leaves[0] = w.clone();
            let spliced = BoundBackbone { leaves, meta: bound.meta.clone() };
            Ok(spliced.forward(&img)?.square().mean_all())
        };
        let err = finite_diff_check(f, &w0_t, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {}", err);
    }
}
