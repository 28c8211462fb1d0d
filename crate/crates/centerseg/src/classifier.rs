//! Similarity-based classification: pixel-to-prototype Euclidean
//! distances, the 1/(1+alpha t) similarity, winner-take-all prediction,
//! and per-class logits for the training losses.

use crate::error::{Error, Result};
use crate::prototype::PrototypeBank;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softening constant inside the square root; removes the kink at zero
/// distance.
pub const EPS_DIST: f64 = 1e-12;

/// Euclidean distances from every pixel feature to every sub-prototype,
/// shaped `[K*m, H', W']`. Differentiable with respect to the features;
/// the bank is a constant.
pub fn pairwise_distances<T: Scalar>(
    features: &Tensor<T>,
    bank: &PrototypeBank<T>,
) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != bank.feature_dim {
        return Err(Error::Dimension(format!(
            "features {:?} incompatible with bank C={}",
            s, bank.feature_dim
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let rows = bank.num_classes * bank.per_class;
    let fd = features.data();
    let pd = &bank.data;
    let eps = T::from_f64(EPS_DIST);

    let mut out = vec![T::zero(); rows * hw];
    for r in 0..rows {
        let proto = &pd[r * c..(r + 1) * c];
        for px in 0..hw {
            let mut acc = eps;
            for ch in 0..c {
                let d = fd[ch * hw + px] - proto[ch];
                acc = acc + d * d;
            }
            out[r * hw + px] = acc.sqrt();
        }
    }

    let pf = features.clone();
    let proto_data = pd.clone();
    let vjp = Box::new(move |g: &[T], y: &[T]| {
        let fd = pf.data();
        let mut gf = vec![T::zero(); c * hw];
        for r in 0..rows {
            let proto = &proto_data[r * c..(r + 1) * c];
            for px in 0..hw {
                let go = g[r * hw + px];
                if go == T::zero() {
                    continue;
                }
                let scale = go / y[r * hw + px];
                for ch in 0..c {
                    gf[ch * hw + px] =
                        gf[ch * hw + px] + scale * (fd[ch * hw + px] - proto[ch]);
                }
            }
        }
        vec![gf]
    });
    Ok(Tensor::from_op(out, vec![rows, h, w], vec![features.clone()], vjp))
}

/// `f_cls(t) = 1/(1 + alpha t)`: strictly decreasing, range (0, 1].
pub fn similarity<T: Scalar>(distances: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    if alpha <= T::zero() {
        return Err(Error::Config("alpha must be positive".into()));
    }
    distances.mul_scalar(alpha).add_scalar(T::one()).reciprocal()
}

/// Winner-take-all label map: each pixel takes the class owning the
/// globally nearest sub-prototype. Ties resolve to the lowest
/// (class, prototype) index. Pure inference path, no graph.
pub fn predict<T: Scalar>(features: &Tensor<T>, bank: &PrototypeBank<T>) -> Result<Vec<usize>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != bank.feature_dim {
        return Err(Error::Dimension(format!(
            "features {:?} incompatible with bank C={}",
            s, bank.feature_dim
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let fd = features.data();
    let rows = bank.num_classes * bank.per_class;
    let mut labels = vec![0usize; hw];
    for px in 0..hw {
        let mut best = T::infinity();
        let mut best_row = 0usize;
        for r in 0..rows {
            let proto = &bank.data[r * c..(r + 1) * c];
            let mut acc = T::zero();
            for ch in 0..c {
                let d = fd[ch * hw + px] - proto[ch];
                acc = acc + d * d;
            }
            if acc < best {
                best = acc;
                best_row = r;
            }
        }
        labels[px] = best_row / bank.per_class;
    }
    Ok(labels)
}

/// Per-class training logits: the max similarity over the class's
/// sub-prototypes, `[K, H', W']`. Its argmax over classes agrees with
/// `predict`.
pub fn class_logits<T: Scalar>(distances: &Tensor<T>, bank_shape: (usize, usize), alpha: T) -> Result<Tensor<T>> {
    let (k, m) = bank_shape;
    let s = distances.shape();
    if s.len() != 3 || s[0] != k * m {
        return Err(Error::Dimension(format!(
            "distance map {:?} incompatible with K={}, m={}",
            s, k, m
        )));
    }
    let sim = similarity(distances, alpha)?;
    sim.reshape(&[k, m, s[1], s[2]])?.max_axis(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_from(data: Vec<f64>, k: usize, m: usize, c: usize) -> PrototypeBank<f64> {
        let mut b = PrototypeBank::init(k, m, c, 0, 0.999);
        b.data = data;
        b
    }

    #[test]
    fn distance_anchors() {
        // pixel equal to a prototype -> sqrt(eps)
        let f = Tensor::new(vec![1.0, 2.0], &[2, 1, 1]).unwrap();
        let bank = bank_from(vec![1.0, 2.0], 1, 1, 2);
        let d = pairwise_distances(&f, &bank).unwrap();
        assert!((d.data()[0] - EPS_DIST.sqrt()).abs() < 1e-15);
        // 3-4-5 triangle
        let f = Tensor::new(vec![0.0, 0.0], &[2, 1, 1]).unwrap();
        let bank = bank_from(vec![3.0, 4.0], 1, 1, 2);
        let d = pairwise_distances(&f, &bank).unwrap();
        assert!((d.data()[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn distances_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (k, m, c, h, w) = (2usize, 3usize, 4usize, 2usize, 3usize);
        let fdata: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pdata: Vec<f64> = (0..k * m * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = Tensor::new(fdata.clone(), &[c, h, w]).unwrap();
        let bank = bank_from(pdata.clone(), k, m, c);
        let d = pairwise_distances(&f, &bank).unwrap();
        for r in 0..k * m {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = EPS_DIST;
                    for ch in 0..c {
                        let diff = fdata[(ch * h + y) * w + x] - pdata[r * c + ch];
                        acc += diff * diff;
                    }
                    let want = acc.sqrt();
                    let got = d.data()[(r * h + y) * w + x];
                    assert!((got - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn similarity_values_and_config_error() {
        let d: Tensor<f64> = Tensor::new(vec![0.0, 1.0, 3.0], &[3]).unwrap();
        let s = similarity(&d, 1.0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!((s.data()[1] - 0.5).abs() < 1e-12);
        let s2 = similarity(&d, 0.5).unwrap();
        assert!((s2.data()[2] - 0.4).abs() < 1e-12);
        assert!(matches!(similarity(&d, 0.0), Err(Error::Config(_))));
        // range (0,1]
        for v in s.data() {
            assert!(*v > 0.0 && *v <= 1.0);
        }
    }

    #[test]
    fn predict_dominant_and_nearest_basis() {
        // prototypes at e1 and e2, pixel at e1 -> class 0
        let f = Tensor::new(vec![1.0, 0.0], &[2, 1, 1]).unwrap();
        let bank = bank_from(vec![1.0, 0.0, 0.0, 1.0], 2, 1, 2);
        assert_eq!(predict(&f, &bank).unwrap(), vec![0]);
        // pixel equal to prototype (k=1, i=1) of a 2-class 2-prototype bank
        let bank = bank_from(
            vec![9.0, 9.0, 8.0, 8.0, 7.0, 7.0, 0.5, 0.5],
            2,
            2,
            2,
        );
        let f = Tensor::new(vec![0.5, 0.5], &[2, 1, 1]).unwrap();
        assert_eq!(predict(&f, &bank).unwrap(), vec![1]);
    }

    #[test]
    fn predict_matches_exhaustive_scan_and_class_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (k, m, c, h, w) = (3usize, 2usize, 4usize, 3usize, 3usize);
            let fdata: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pdata: Vec<f64> = (0..k * m * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = Tensor::new(fdata.clone(), &[c, h, w]).unwrap();
            let bank = bank_from(pdata.clone(), k, m, c);
            let pred = predict(&f, &bank).unwrap();
            // exhaustive min-distance scan oracle
            for px in 0..h * w {
                let mut best = f64::INFINITY;
                let mut best_class = 0;
                for r in 0..k * m {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let d = fdata[ch * h * w + px] - pdata[r * c + ch];
                        acc += d * d;
                    }
                    if acc < best {
                        best = acc;
                        best_class = r / m;
                    }
                }
                assert_eq!(pred[px], best_class);
            }
            // argmax over class_logits agrees with predict
            let d = pairwise_distances(&f, &bank).unwrap();
            let logits = class_logits(&d, (k, m), 1.0).unwrap();
            let (arg, _) = logits.argmax_axis(0).unwrap();
            assert_eq!(arg, pred);
        }
    }

    #[test]
    fn predict_invariant_to_alpha() {
        // alpha never enters predict; check the logits argmax too
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (k, m, c) = (3usize, 2usize, 4usize);
        let fdata: Vec<f64> = (0..c * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pdata: Vec<f64> = (0..k * m * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = Tensor::new(fdata, &[c, 2, 2]).unwrap();
        let bank = bank_from(pdata, k, m, c);
        let d = pairwise_distances(&f, &bank).unwrap();
        let args: Vec<Vec<usize>> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&a| class_logits(&d, (k, m), a).unwrap().argmax_axis(0).unwrap().0)
            .collect();
        assert_eq!(args[0], args[1]);
        assert_eq!(args[1], args[2]);
        assert_eq!(args[0], predict(&f, &bank).unwrap());
    }

    #[test]
    fn class_logits_collapse_and_coincidence() {
        // m=1: logit is the plain similarity
        let f = Tensor::new(vec![0.0, 0.0], &[2, 1, 1]).unwrap();
        let bank = bank_from(vec![3.0, 4.0, 0.0, 0.0], 2, 1, 2);
        let d = pairwise_distances(&f, &bank).unwrap();
        let logits = class_logits(&d, (2, 1), 1.0).unwrap();
        assert!((logits.data()[0] - 1.0 / 6.0).abs() < 1e-9);
        // pixel on a prototype of class 1 -> logit ~= 1
        assert!((logits.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn similarity_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, m, c, h, w) = (2usize, 2usize, 3usize, 2usize, 2usize);
        let fdata: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pdata: Vec<f64> = (0..k * m * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bank = bank_from(pdata, k, m, c);
        let f = Tensor::new(fdata, &[c, h, w]).unwrap();
        let err = finite_diff_check(
            move |t| {
                let d = pairwise_distances(t, &bank)?;
                Ok(similarity(&d, 0.7)?.sum_all())
            },
            &f,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {}", err);
    }
}
