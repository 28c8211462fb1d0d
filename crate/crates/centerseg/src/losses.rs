//! Training objectives: cross-entropy and Dice on the similarity
//! logits, prototype-to-prototype regularizers on the Grassmann
//! manifold (intraclass orthogonality, inter-class subspace
//! separation), feats-to-prototype attraction/margin terms, and the
//! weighted composite.

use crate::error::{Error, Result};
use crate::prototype::SoftMask;
use crate::scalar::Scalar;
use crate::tensor::ops::stack;
use crate::tensor::Tensor;

/// Smooth constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Residual threshold below which a prototype block is treated as
/// rank-deficient during orthonormalization.
const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights<T: Scalar> {
    pub lambda_pp: T,
    pub lambda_fp: T,
    pub lambda_dice: T,
    /// Margin of the feats-to-prototype hinge.
    pub margin: T,
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.lambda_pp, self.lambda_fp, self.lambda_dice];
        if vals.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !self.margin.is_finite() || self.margin <= T::zero() {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            lambda_pp: T::from_f64(0.01),
            lambda_fp: T::from_f64(0.01),
            lambda_dice: T::from_f64(1.0),
            margin: T::from_f64(1.0),
        }
    }
}

/// Per-term scalar values of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub ce: f64,
    pub dice: f64,
    pub pp1: f64,
    pub pp2: f64,
    pub fp1: f64,
    pub fp2: f64,
    pub total: f64,
}

/// Hard per-cell class masks derived from the soft target: cell class is
/// the dominant fraction, ignore-dominated cells (> 0.5) are excluded.
pub struct CellMasks<T: Scalar> {
    /// One `[H'*W']` 0/1 mask per class.
    pub masks: Vec<Vec<T>>,
    /// Included-cell count per class.
    pub counts: Vec<usize>,
    /// 0/1 inclusion mask over cells.
    pub include: Vec<T>,
}

pub fn cell_masks<T: Scalar>(target: &SoftMask<T>) -> CellMasks<T> {
    let hw = target.height * target.width;
    let k = target.num_classes;
    let mut masks = vec![vec![T::zero(); hw]; k];
    let mut counts = vec![0usize; k];
    let mut include = vec![T::zero(); hw];
    for cell in 0..hw {
        if let Some(c) = target.cell_class(cell) {
            masks[c][cell] = T::one();
            counts[c] += 1;
            include[cell] = T::one();
        }
    }
    CellMasks { masks, counts, include }
}

/// Soft-target cross-entropy over included cells. Returns the scalar
/// loss and a flag that is set when every cell was ignored (loss zero).
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    target: &SoftMask<T>,
) -> Result<(Tensor<T>, bool)> {
    let s = logits.shape();
    let (k, h, w) = (target.num_classes, target.height, target.width);
    if s != [k, h, w] {
        return Err(Error::Dimension(format!(
            "logits {:?} vs target [{},{},{}]",
            s, k, h, w
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in cross_entropy".into()));
    }
    let hw = h * w;
    let half = T::from_f64(0.5);
    let included: Vec<usize> = (0..hw).filter(|&i| target.ignore_frac[i] <= half).collect();
    if included.is_empty() {
        return Ok((Tensor::scalar(T::zero()), true));
    }
    let n_eff = T::from_f64(included.len() as f64);
    let ld = logits.data();
    let mut total = T::zero();
    for &cell in &included {
        let mut mx = ld[cell];
        for kk in 1..k {
            if ld[kk * hw + cell] > mx {
                mx = ld[kk * hw + cell];
            }
        }
        let mut se = T::zero();
        for kk in 0..k {
            se = se + (ld[kk * hw + cell] - mx).exp();
        }
        let lse = mx + se.ln();
        for kk in 0..k {
            let y = target.class_frac[kk * hw + cell];
            if y > T::zero() {
                total = total + y * (lse - ld[kk * hw + cell]);
            }
        }
    }
    let value = total / n_eff;

    let y_frac = target.class_frac.clone();
    let incl = included.clone();
    let parent = logits.clone();
    let vjp = Box::new(move |g: &[T], _y: &[T]| {
        let ld = parent.data();
        let mut gl = vec![T::zero(); k * hw];
        let scale = g[0] / n_eff;
        for &cell in &incl {
            let mut mx = ld[cell];
            for kk in 1..k {
                if ld[kk * hw + cell] > mx {
                    mx = ld[kk * hw + cell];
                }
            }
            let mut se = T::zero();
            for kk in 0..k {
                se = se + (ld[kk * hw + cell] - mx).exp();
            }
            let mut ysum = T::zero();
            for kk in 0..k {
                ysum = ysum + y_frac[kk * hw + cell];
            }
            for kk in 0..k {
                let p = (ld[kk * hw + cell] - mx).exp() / se;
                gl[kk * hw + cell] = scale * (ysum * p - y_frac[kk * hw + cell]);
            }
        }
        vec![gl]
    });
    Ok((
        Tensor::from_op(vec![value], vec![1], vec![logits.clone()], vjp),
        false,
    ))
}

/// Macro-averaged soft Dice over included cells.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, target: &SoftMask<T>) -> Result<Tensor<T>> {
    let (k, h, w) = (target.num_classes, target.height, target.width);
    if probs.shape() != [k, h, w] {
        return Err(Error::Dimension(format!(
            "probs {:?} vs target [{},{},{}]",
            probs.shape(),
            k,
            h,
            w
        )));
    }
    let cm = cell_masks(target);
    let include = Tensor::new(cm.include.clone(), &[h, w])?;
    // Target fractions with excluded cells zeroed.
    let hw = h * w;
    let mut yd = target.class_frac.clone();
    for kk in 0..k {
        for cell in 0..hw {
            yd[kk * hw + cell] = yd[kk * hw + cell] * cm.include[cell];
        }
    }
    let y = Tensor::new(yd, &[k, h, w])?;
    let smooth = T::from_f64(DICE_SMOOTH);

    let inter = probs.mul(&y)?.reshape(&[k, hw])?.sum_axis(1)?;
    let psum = probs.mul(&include)?.reshape(&[k, hw])?.sum_axis(1)?;
    let ysum = y.reshape(&[k, hw])?.sum_axis(1)?;
    let dice = inter
        .mul_scalar(T::from_f64(2.0))
        .add_scalar(smooth)
        .div(&psum.add(&ysum)?.add_scalar(smooth))?;
    Ok(dice.mean_all().neg().add_scalar(T::one()))
}

/// Intraclass orthogonality: mean over classes of the squared Frobenius
/// gap between each class's prototype Gram matrix and the identity.
/// `blocks[k]` holds the class's m prototypes as rows, `[m, C]`.
pub fn loss_pp1<T: Scalar>(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
    if blocks.is_empty() {
        return Err(Error::Contract("no prototype blocks".into()));
    }
    let mut acc: Option<Tensor<T>> = None;
    for b in blocks {
        let s = b.shape();
        if s.len() != 2 {
            return Err(Error::Dimension("prototype block must be 2-D".into()));
        }
        let (m, c) = (s[0], s[1]);
        if c < m {
            return Err(Error::Config(format!(
                "need C >= m for orthonormal prototypes, got C={} m={}",
                c, m
            )));
        }
        let gram = b.matmul(&b.transpose2d()?)?;
        let mut eye = vec![T::zero(); m * m];
        for i in 0..m {
            eye[i * m + i] = T::one();
        }
        let gap = gram.sub(&Tensor::new(eye, &[m, m])?)?.square().sum_all();
        acc = Some(match acc {
            Some(a) => a.add(&gap)?,
            None => gap,
        });
    }
    Ok(acc.unwrap().mul_scalar(T::one() / T::from_f64(blocks.len() as f64)))
}

/// Differentiable modified Gram-Schmidt over the rows of `[m, C]`.
/// Errors when a residual collapses (rank-deficient block).
pub fn orthonormalize_rows<T: Scalar>(block: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
    let s = block.shape();
    if s.len() != 2 {
        return Err(Error::Dimension("orthonormalize_rows expects 2-D".into()));
    }
    let m = s[0];
    let tol = T::from_f64(RANK_TOL);
    let mut basis: Vec<Tensor<T>> = Vec::with_capacity(m);
    for j in 0..m {
        let mut v = block.index_axis0(j)?;
        for u in &basis {
            let coef = u.mul(&v)?.sum_all();
            v = v.sub(&u.mul(&coef)?)?;
        }
        let norm = v.square().sum_all().sqrt()?;
        if norm.item() <= tol {
            return Err(Error::Numeric(format!(
                "rank-deficient prototype block for class {}",
                label
            )));
        }
        basis.push(v.div(&norm)?);
    }
    stack(&basis)
}

/// Grassmann projection metric between the row spans of two blocks:
/// `(1/sqrt(2)) * ||U1ᵀU1 − U2ᵀU2||_F` after orthonormalization.
pub fn projection_metric<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    projection_metric_labeled(a, b, 0, 1)
}

fn projection_metric_labeled<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    la: usize,
    lb: usize,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension("projection_metric blocks differ in shape".into()));
    }
    let ua = orthonormalize_rows(a, la)?;
    let ub = orthonormalize_rows(b, lb)?;
    let pa = ua.transpose2d()?.matmul(&ua)?;
    let pb = ub.transpose2d()?.matmul(&ub)?;
    Ok(pa
        .sub(&pb)?
        .frobenius_norm()
        .mul_scalar(T::one() / T::from_f64(2.0f64.sqrt())))
}

/// Negated sum of pairwise projection metrics, so gradient descent
/// pushes class subspaces apart.
pub fn loss_pp2<T: Scalar>(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
    let k = blocks.len();
    let mut acc = Tensor::scalar(T::zero());
    for k1 in 0..k {
        for k2 in (k1 + 1)..k {
            let phi = projection_metric_labeled(&blocks[k1], &blocks[k2], k1, k2)?;
            acc = acc.add(&phi)?;
        }
    }
    Ok(acc.neg())
}

/// Pixel-to-own-class attraction: per class, the mean over the class's
/// cells of the distance to the nearest own sub-prototype.
pub fn loss_fp1<T: Scalar>(
    distances: &Tensor<T>,
    target: &SoftMask<T>,
    per_class: usize,
) -> Result<Tensor<T>> {
    let (k, h, w) = (target.num_classes, target.height, target.width);
    if distances.shape() != [k * per_class, h, w] {
        return Err(Error::Dimension("distance map shape mismatch".into()));
    }
    let cm = cell_masks(target);
    let mut acc = Tensor::scalar(T::zero());
    for kk in 0..k {
        if cm.counts[kk] == 0 {
            continue;
        }
        let rows: Vec<usize> = (kk * per_class..(kk + 1) * per_class).collect();
        let own_min = distances.select_axis0(&rows)?.min_axis(0)?;
        let mask = Tensor::new(cm.masks[kk].clone(), &[h, w])?;
        let term = own_min
            .reshape(&[h, w])?
            .mul(&mask)?
            .sum_all()
            .mul_scalar(T::one() / T::from_f64(cm.counts[kk] as f64));
        acc = acc.add(&term)?;
    }
    Ok(acc)
}

/// Pixel-to-other-class margin: hinge on the distance to the nearest
/// sub-prototype of any other class, active inside the margin.
pub fn loss_fp2<T: Scalar>(
    distances: &Tensor<T>,
    target: &SoftMask<T>,
    per_class: usize,
    margin: T,
) -> Result<Tensor<T>> {
    if margin <= T::zero() {
        return Err(Error::Config("margin must be positive".into()));
    }
    let (k, h, w) = (target.num_classes, target.height, target.width);
    if distances.shape() != [k * per_class, h, w] {
        return Err(Error::Dimension("distance map shape mismatch".into()));
    }
    let cm = cell_masks(target);
    let mut acc = Tensor::scalar(T::zero());
    for kk in 0..k {
        if cm.counts[kk] == 0 {
            continue;
        }
        let rows: Vec<usize> = (0..k * per_class)
            .filter(|r| r / per_class != kk)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let other_min = distances.select_axis0(&rows)?.min_axis(0)?;
        let hinge = other_min.neg().add_scalar(margin).relu();
        let mask = Tensor::new(cm.masks[kk].clone(), &[h, w])?;
        let term = hinge
            .reshape(&[h, w])?
            .mul(&mask)?
            .sum_all()
            .mul_scalar(T::one() / T::from_f64(cm.counts[kk] as f64));
        acc = acc.add(&term)?;
    }
    Ok(acc)
}

/// Scalar loss tensors feeding the composite.
pub struct LossTerms<T: Scalar> {
    pub ce: Tensor<T>,
    pub dice: Tensor<T>,
    pub pp1: Tensor<T>,
    pub pp2: Tensor<T>,
    pub fp1: Tensor<T>,
    pub fp2: Tensor<T>,
}

/// `L = ce + lambda_pp (pp1+pp2) + lambda_fp (fp1+fp2) + lambda_dice dice`.
pub fn total_loss<T: Scalar>(
    terms: &LossTerms<T>,
    weights: &LossWeights<T>,
) -> Result<(Tensor<T>, LossReport)> {
    weights.validate()?;
    let pp = terms.pp1.add(&terms.pp2)?;
    let fp = terms.fp1.add(&terms.fp2)?;
    let total = terms
        .ce
        .add(&pp.mul_scalar(weights.lambda_pp))?
        .add(&fp.mul_scalar(weights.lambda_fp))?
        .add(&terms.dice.mul_scalar(weights.lambda_dice))?;
    let report = LossReport {
        ce: terms.ce.item().to_f64(),
        dice: terms.dice.item().to_f64(),
        pp1: terms.pp1.item().to_f64(),
        pp2: terms.pp2.item().to_f64(),
        fp1: terms.fp1.item().to_f64(),
        fp2: terms.fp2.item().to_f64(),
        total: total.item().to_f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::{downsample_labels, IGNORE_INDEX};
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hard_mask(labels: &[u8], h: usize, w: usize, k: usize) -> SoftMask<f64> {
        downsample_labels(labels, h, w, k, 1, IGNORE_INDEX).unwrap()
    }

    #[test]
    fn ce_uniform_logits_give_log2() {
        let labels = vec![0u8, 1, 0, 1];
        let target = hard_mask(&labels, 2, 2, 2);
        let logits = Tensor::zeros(&[2, 2, 2]);
        let (loss, warned) = cross_entropy(&logits, &target).unwrap();
        assert!(!warned);
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_tends_to_zero() {
        let labels = vec![0u8; 4];
        let target = hard_mask(&labels, 2, 2, 2);
        let mut data = vec![0.0; 8];
        for v in data.iter_mut().take(4) {
            *v = 50.0; // huge logit for the true class
        }
        let logits = Tensor::new(data, &[2, 2, 2]).unwrap();
        let (loss, _) = cross_entropy(&logits, &target).unwrap();
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn ce_all_ignored_returns_zero_with_flag() {
        let labels = vec![IGNORE_INDEX; 4];
        let target = hard_mask(&labels, 2, 2, 2);
        let logits = Tensor::zeros(&[2, 2, 2]);
        let (loss, warned) = cross_entropy(&logits, &target).unwrap();
        assert!(warned);
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn ce_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..2) as u8).collect();
        let target = hard_mask(&labels, 2, 2, 2);
        let ldata: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Tensor::new(ldata.clone(), &[2, 2, 2]).unwrap();
        let (loss, _) = cross_entropy(&logits, &target).unwrap();
        // direct per-pixel summation
        let mut want = 0.0;
        for cell in 0..4 {
            let l0 = ldata[cell];
            let l1 = ldata[4 + cell];
            let z = l0.exp() + l1.exp();
            let y0 = target.class_frac[cell];
            let y1 = target.class_frac[4 + cell];
            want += y0 * (z.ln() - l0) + y1 * (z.ln() - l1);
        }
        want /= 4.0;
        assert!((loss.item() - want).abs() < 1e-6);
    }

    #[test]
    fn dice_perfect_overlap_small_and_disjoint_near_one() {
        // 10x10 single-class map: perfect probs -> near zero (smooth bias)
        let labels = vec![0u8; 144];
        let target = hard_mask(&labels, 12, 12, 2);
        let mut p = vec![0.0; 2 * 144];
        for v in p.iter_mut().take(144) {
            *v = 1.0;
        }
        let probs = Tensor::new(p, &[2, 12, 12]).unwrap();
        let loss = dice_loss(&probs, &target).unwrap();
        assert!(loss.item().abs() < 1e-2, "loss = {}", loss.item());

        // disjoint hard maps -> close to 1
        let mut p = vec![0.0; 2 * 144];
        for v in p.iter_mut().skip(144) {
            *v = 1.0; // predicts class 1 everywhere, truth is class 0
        }
        let probs = Tensor::new(p, &[2, 12, 12]).unwrap();
        let loss = dice_loss(&probs, &target).unwrap();
        assert!(loss.item() > 0.98, "loss = {}", loss.item());
    }

    #[test]
    fn dice_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let labels: Vec<u8> = (0..9).map(|_| rng.gen_range(0..3) as u8).collect();
        let target = hard_mask(&labels, 3, 3, 3);
        let raw: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probs = Tensor::new(raw, &[3, 3, 3]).unwrap().softmax_axis(0).unwrap();
        let loss = dice_loss(&probs, &target).unwrap();
        let mut acc = 0.0;
        for k in 0..3 {
            let mut inter = 0.0;
            let mut ps = 0.0;
            let mut ys = 0.0;
            for cell in 0..9 {
                let y = target.class_frac[k * 9 + cell];
                let p = probs.data()[k * 9 + cell];
                inter += p * y;
                ps += p;
                ys += y;
            }
            acc += (2.0 * inter + 1.0) / (ps + ys + 1.0);
        }
        let want = 1.0 - acc / 3.0;
        assert!((loss.item() - want).abs() < 1e-6);
    }

    #[test]
    fn pp1_anchors() {
        // orthonormal rows -> 0
        let b: Tensor<f64> = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[2, 3]).unwrap();
        assert!(loss_pp1(&[b]).unwrap().item() < 1e-12);
        // both prototypes the same unit vector: Gram [[1,1],[1,1]], loss 2
        let b: Tensor<f64> = Tensor::new(vec![1.0, 0.0, 1.0, 0.0], &[2, 2]).unwrap();
        assert!((loss_pp1(&[b]).unwrap().item() - 2.0).abs() < 1e-12);
        // C < m is a config error
        let b = Tensor::new(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        assert!(matches!(loss_pp1(&[b]), Err(Error::Config(_))));
    }

    #[test]
    fn pp1_matches_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (k, m, c) = (3usize, 2usize, 4usize);
        let blocks: Vec<Tensor<f64>> = (0..k)
            .map(|_| {
                Tensor::new((0..m * c).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[m, c])
                    .unwrap()
            })
            .collect();
        let got = loss_pp1(&blocks).unwrap().item();
        let mut want = 0.0;
        for b in &blocks {
            let d = b.data();
            for i in 0..m {
                for j in 0..m {
                    let mut g = 0.0;
                    for ch in 0..c {
                        g += d[i * c + ch] * d[j * c + ch];
                    }
                    let target = if i == j { 1.0 } else { 0.0 };
                    want += (g - target) * (g - target);
                }
            }
        }
        want /= k as f64;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn projection_metric_anchors() {
        let e1: Tensor<f64> = Tensor::new(vec![1.0, 0.0, 0.0], &[1, 3]).unwrap();
        let e2 = Tensor::new(vec![0.0, 1.0, 0.0], &[1, 3]).unwrap();
        assert_eq!(projection_metric(&e1, &e1).unwrap().item(), 0.0);
        assert!((projection_metric(&e1, &e2).unwrap().item() - 1.0).abs() < 1e-6);
        // orthogonal m-dim subspaces: sqrt(m)
        let m = 2;
        let a = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[2, 4]).unwrap();
        let b = Tensor::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[2, 4]).unwrap();
        let phi = projection_metric(&a, &b).unwrap().item();
        assert!((phi - (m as f64).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn projection_metric_is_span_invariant_pseudometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Tensor<f64> =
            Tensor::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 4]).unwrap();
        let b: Tensor<f64> =
            Tensor::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 4]).unwrap();
        // symmetry
        let ab = projection_metric(&a, &b).unwrap().item();
        let ba = projection_metric(&b, &a).unwrap().item();
        assert!((ab - ba).abs() < 1e-9);
        // invariance to invertible recombination of rows
        let ad = a.data();
        let rec: Vec<f64> = (0..8)
            .map(|i| {
                let (r, c) = (i / 4, i % 4);
                // [2 1; 1 1] times the row block
                if r == 0 {
                    2.0 * ad[c] + ad[4 + c]
                } else {
                    ad[c] + ad[4 + c]
                }
            })
            .collect();
        let a2 = Tensor::new(rec, &[2, 4]).unwrap();
        let ab2 = projection_metric(&a2, &b).unwrap().item();
        assert!((ab - ab2).abs() < 1e-6, "{} vs {}", ab, ab2);
    }

    #[test]
    fn projection_metric_rank_deficiency_error() {
        let a = Tensor::new(vec![1.0, 0.0, 2.0, 0.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        match projection_metric(&a, &b) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("class 0")),
            other => panic!("expected numeric error, got {:?}", other.map(|t| t.item())),
        }
    }

    #[test]
    fn pp2_anchors_and_pair_enumeration() {
        // identical subspaces -> 0
        let a: Tensor<f64> = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(loss_pp2(&[a.clone(), a.clone()]).unwrap().item(), 0.0);
        // two orthogonal 1-dim spans -> -1
        let e1: Tensor<f64> = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        let e2 = Tensor::new(vec![0.0, 1.0], &[1, 2]).unwrap();
        assert!((loss_pp2(&[e1, e2]).unwrap().item() + 1.0).abs() < 1e-9);
        // K=3 vs explicit pair enumeration
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let blocks: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                Tensor::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 4]).unwrap()
            })
            .collect();
        let got = loss_pp2(&blocks).unwrap().item();
        let mut want = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                want -= projection_metric(&blocks[i], &blocks[j]).unwrap().item();
            }
        }
        assert!((got - want).abs() < 1e-9);
    }

    fn toy_distances(
        rng: &mut ChaCha8Rng,
        k: usize,
        m: usize,
        h: usize,
        w: usize,
    ) -> Tensor<f64> {
        Tensor::new(
            (0..k * m * h * w).map(|_| rng.gen_range(0.1..3.0)).collect(),
            &[k * m, h, w],
        )
        .unwrap()
    }

    #[test]
    fn fp1_matches_min_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (k, m, h, w) = (3usize, 2usize, 3usize, 3usize);
        let labels: Vec<u8> = (0..9).map(|_| rng.gen_range(0..k) as u8).collect();
        let target = hard_mask(&labels, h, w, k);
        let d = toy_distances(&mut rng, k, m, h, w);
        let got = loss_fp1(&d, &target, m).unwrap().item();
        // per-pixel min-scan oracle
        let cm = cell_masks(&target);
        let mut want = 0.0;
        for kk in 0..k {
            if cm.counts[kk] == 0 {
                continue;
            }
            let mut sum = 0.0;
            for cell in 0..h * w {
                if cm.masks[kk][cell] == 1.0 {
                    let mn = (0..m)
                        .map(|i| d.data()[(kk * m + i) * h * w + cell])
                        .fold(f64::INFINITY, f64::min);
                    sum += mn;
                }
            }
            want += sum / cm.counts[kk] as f64;
        }
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn fp1_singleton_contribution() {
        // one class-0 pixel at distance 2 from its nearest own prototype
        let labels = vec![0u8, 1, 1, 1];
        let target = hard_mask(&labels, 2, 2, 2);
        let mut dd = vec![1.0; 2 * 4];
        dd[0] = 2.0; // class-0 prototype distance at the class-0 pixel
        let d = Tensor::new(dd, &[2, 2, 2]).unwrap();
        let got = loss_fp1(&d, &target, 1).unwrap().item();
        // class 0 contributes 2/1; class 1 contributes (1+1+1)/3 = 1
        assert!((got - 3.0).abs() < 1e-9);
    }

    #[test]
    fn fp2_hinge_behavior_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let (k, m, h, w) = (3usize, 2usize, 3usize, 3usize);
        let labels: Vec<u8> = (0..9).map(|_| rng.gen_range(0..k) as u8).collect();
        let target = hard_mask(&labels, h, w, k);
        // all distances beyond the margin -> 0
        let far = Tensor::new(vec![5.0; k * m * h * w], &[k * m, h, w]).unwrap();
        assert_eq!(loss_fp2(&far, &target, m, 1.0).unwrap().item(), 0.0);
        // oracle on a random instance
        let eps = 1.5;
        let d = toy_distances(&mut rng, k, m, h, w);
        let got = loss_fp2(&d, &target, m, eps).unwrap().item();
        let cm = cell_masks(&target);
        let mut want = 0.0;
        for kk in 0..k {
            if cm.counts[kk] == 0 {
                continue;
            }
            let mut sum = 0.0;
            for cell in 0..h * w {
                if cm.masks[kk][cell] == 1.0 {
                    let mn = (0..k * m)
                        .filter(|r| r / m != kk)
                        .map(|r| d.data()[r * h * w + cell])
                        .fold(f64::INFINITY, f64::min);
                    sum += (eps - mn).max(0.0);
                }
            }
            want += sum / cm.counts[kk] as f64;
        }
        assert!((got - want).abs() < 1e-6);
        // maximal violation: a pixel sitting on a wrong-class prototype
        let labels = vec![0u8; 4];
        let t = hard_mask(&labels, 2, 2, 2);
        let mut dd = vec![9.0; 2 * 4];
        dd[4] = 0.0; // class-1 prototype at distance 0 from a class-0 pixel
        let d = Tensor::new(dd, &[2, 2, 2]).unwrap();
        let got = loss_fp2(&d, &t, 1, 1.0).unwrap().item();
        assert!((got - 1.0 / 4.0).abs() < 1e-9); // eps / N(k)
    }

    #[test]
    fn total_loss_arithmetic_and_report() {
        let terms: LossTerms<f64> = LossTerms {
            ce: Tensor::scalar(1.0),
            dice: Tensor::scalar(0.5),
            pp1: Tensor::scalar(0.15),
            pp2: Tensor::scalar(0.05),
            fp1: Tensor::scalar(0.25),
            fp2: Tensor::scalar(0.05),
        };
        let w = LossWeights { lambda_pp: 1.0, lambda_fp: 1.0, lambda_dice: 1.0, margin: 1.0 };
        let (total, report) = total_loss(&terms, &w).unwrap();
        assert!((total.item() - 2.0).abs() < 1e-12);
        let recomputed = report.ce
            + 1.0 * (report.pp1 + report.pp2)
            + 1.0 * (report.fp1 + report.fp2)
            + 1.0 * report.dice;
        assert!((report.total - recomputed).abs() < 1e-6);

        // all lambdas zero -> total = ce
        let w0 = LossWeights { lambda_pp: 0.0, lambda_fp: 0.0, lambda_dice: 0.0, margin: 1.0 };
        let (t0, _) = total_loss(&terms, &w0).unwrap();
        assert_eq!(t0.item(), 1.0);
    }

    #[test]
    fn total_loss_linear_in_each_lambda() {
        let terms: LossTerms<f64> = LossTerms {
            ce: Tensor::scalar(0.7),
            dice: Tensor::scalar(0.3),
            pp1: Tensor::scalar(0.2),
            pp2: Tensor::scalar(-0.1),
            fp1: Tensor::scalar(0.4),
            fp2: Tensor::scalar(0.1),
        };
        let at = |lpp: f64, lfp: f64, ld: f64| {
            let w = LossWeights { lambda_pp: lpp, lambda_fp: lfp, lambda_dice: ld, margin: 1.0 };
            total_loss(&terms, &w).unwrap().0.item()
        };
        let base = at(0.0, 0.2, 0.3);
        let one = at(1.0, 0.2, 0.3);
        let two = at(2.0, 0.2, 0.3);
        assert!(((two - one) - (one - base)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (k, m, h, w) = (2usize, 2usize, 3usize, 3usize);
        let labels: Vec<u8> = (0..9).map(|_| rng.gen_range(0..k) as u8).collect();
        let target = hard_mask(&labels, h, w, k);
        let d0 = toy_distances(&mut rng, k, m, h, w);

        let t1 = target.clone();
        let err = finite_diff_check(
            move |d| loss_fp1(d, &t1, m),
            &d0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "fp1 err {}", err);

        let t2 = target.clone();
        let err = finite_diff_check(move |d| loss_fp2(d, &t2, m, 1.5), &d0, 1e-5).unwrap();
        assert!(err < 1e-4, "fp2 err {}", err);

        let logits0 = Tensor::new(
            (0..k * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[k, h, w],
        )
        .unwrap();
        let t3 = target.clone();
        let err =
            finite_diff_check(move |l| Ok(cross_entropy(l, &t3)?.0), &logits0, 1e-5).unwrap();
        assert!(err < 1e-4, "ce err {}", err);

        let t4 = target.clone();
        let err = finite_diff_check(
            move |l| dice_loss(&l.softmax_axis(0)?, &t4),
            &logits0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "dice err {}", err);

        let block0 = Tensor::new(
            (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[3, 4],
        )
        .unwrap();
        let err = finite_diff_check(move |b| loss_pp1(&[b.clone()]), &block0, 1e-5).unwrap();
        assert!(err < 1e-4, "pp1 err {}", err);

        let other = Tensor::new(
            (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[3, 4],
        )
        .unwrap();
        let err = finite_diff_check(
            move |b| loss_pp2(&[b.clone(), other.clone()]),
            &block0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "pp2 err {}", err);
    }

    #[test]
    fn pp1_descent_reaches_orthonormality() {
        // gradient descent on pp1 alone from a random full-rank bank
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, m, c) = (3usize, 4usize, 16usize);
        let mut data: Vec<f64> = (0..k * m * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lr = 0.1;
        for _ in 0..2000 {
            let leaf = Tensor::param(data.clone(), &[k, m, c]).unwrap();
            let blocks: Vec<Tensor<f64>> = (0..k).map(|i| leaf.index_axis0(i).unwrap()).collect();
            let loss = loss_pp1(&blocks).unwrap();
            loss.backward().unwrap();
            let g = leaf.grad().unwrap();
            for (d, gi) in data.iter_mut().zip(&g) {
                *d -= lr * gi;
            }
        }
        // check ||P_k^T P_k - I||_F < 1e-2 per class
        for kk in 0..k {
            let mut gap = 0.0;
            for i in 0..m {
                for j in 0..m {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += data[(kk * m + i) * c + ch] * data[(kk * m + j) * c + ch];
                    }
                    let t = if i == j { 1.0 } else { 0.0 };
                    gap += (dot - t) * (dot - t);
                }
            }
            assert!(gap.sqrt() < 1e-2, "class {} gap {}", kk, gap.sqrt());
        }
    }
}
