//! Training-time prototype pipeline: soft label downsampling, spatial
//! patch splitting, masked class-center aggregation, Gumbel hard
//! attention with straight-through gradients, batch prototype
//! formation, and the momentum bank.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IGNORE_INDEX: u8 = 255;

/// Mass below which a (class, patch) center is considered absent.
const EPS_MASS: f64 = 1e-12;

/// Per-cell class fractions at feature resolution, with a separate
/// ignore-fraction channel. Per cell, fractions plus ignore sum to 1.
#[derive(Clone)]
pub struct SoftMask<T: Scalar> {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[K, H', W']` row-major.
    pub class_frac: Vec<T>,
    /// `[H', W']`.
    pub ignore_frac: Vec<T>,
}

impl<T: Scalar> SoftMask<T> {
    /// Hard class of a cell: argmax fraction (lowest index on ties), or
    /// `None` when the cell is ignore-dominated (> 0.5 ignore).
    pub fn cell_class(&self, cell: usize) -> Option<usize> {
        let half = T::from_f64(0.5);
        if self.ignore_frac[cell] > half {
            return None;
        }
        let hw = self.height * self.width;
        let mut best = self.class_frac[cell];
        let mut best_k = 0;
        for k in 1..self.num_classes {
            let v = self.class_frac[k * hw + cell];
            if v > best {
                best = v;
                best_k = k;
            }
        }
        Some(best_k)
    }
}

/// Converts an integer label map to per-cell class fractions at 1/d
/// resolution: `Y[k,i,j]` is the fraction of the d x d source block
/// carrying label k; ignore pixels feed the ignore channel.
pub fn downsample_labels<T: Scalar>(
    labels: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    factor: usize,
    ignore_index: u8,
) -> Result<SoftMask<T>> {
    if labels.len() != height * width {
        return Err(Error::Dimension("label map size mismatch".into()));
    }
    if height % factor != 0 || width % factor != 0 {
        return Err(Error::Dimension(format!(
            "label map {}x{} not divisible by {}",
            height, width, factor
        )));
    }
    let (dh, dw) = (height / factor, width / factor);
    let mut class_frac = vec![T::zero(); num_classes * dh * dw];
    let mut ignore_frac = vec![T::zero(); dh * dw];
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    for y in 0..height {
        for x in 0..width {
            let l = labels[y * width + x];
            let cell = (y / factor) * dw + (x / factor);
            if l == ignore_index {
                ignore_frac[cell] = ignore_frac[cell] + inv;
            } else if (l as usize) < num_classes {
                class_frac[(l as usize) * dh * dw + cell] =
                    class_frac[(l as usize) * dh * dw + cell] + inv;
            } else {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes",
                    l, num_classes
                )));
            }
        }
    }
    Ok(SoftMask { num_classes, height: dh, width: dw, class_frac, ignore_frac })
}

/// The soft mask rearranged into the same patch layout as the features.
#[derive(Clone)]
pub struct MaskPatches<T: Scalar> {
    pub num_patches: usize,
    pub num_classes: usize,
    pub pixels_per_patch: usize,
    /// `[n, K, ph*pw]`.
    pub class_frac: Vec<T>,
    /// `[n, ph*pw]`.
    pub ignore_frac: Vec<T>,
}

fn patch_permutation(
    channels: usize,
    height: usize,
    width: usize,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<(Vec<usize>, usize, usize, usize)> {
    if grid_rows == 0 || grid_cols == 0 || height % grid_rows != 0 || width % grid_cols != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} map not divisible by {}x{} patch grid",
            height, width, grid_rows, grid_cols
        )));
    }
    let (ph, pw) = (height / grid_rows, width / grid_cols);
    let n = grid_rows * grid_cols;
    // out[p, c, py*pw + px] = in[c, pr*ph + py, pc*pw + px], patches in raster order
    let mut idx = Vec::with_capacity(n * channels * ph * pw);
    for pr in 0..grid_rows {
        for pc in 0..grid_cols {
            for c in 0..channels {
                for py in 0..ph {
                    for px in 0..pw {
                        idx.push((c * height + pr * ph + py) * width + pc * pw + px);
                    }
                }
            }
        }
    }
    Ok((idx, n, ph, pw))
}

/// Splits features `[C,H',W']` and the soft mask into `n` non-overlapping
/// patches in raster order: features `[n, C, ph*pw]`, mask `[n, K, ph*pw]`.
pub fn split_patches<T: Scalar>(
    features: &Tensor<T>,
    mask: &SoftMask<T>,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<(Tensor<T>, MaskPatches<T>)> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [C,H,W] features, got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if mask.height != h || mask.width != w {
        return Err(Error::Dimension("mask and feature resolutions differ".into()));
    }
    let (fidx, n, ph, pw) = patch_permutation(c, h, w, grid_rows, grid_cols)?;
    let f_l = features.gather(Rc::new(fidx), &[n, c, ph * pw])?;

    let (yidx, _, _, _) = patch_permutation(mask.num_classes, h, w, grid_rows, grid_cols)?;
    let class_frac = yidx.iter().map(|&i| mask.class_frac[i]).collect();
    let (iidx, _, _, _) = patch_permutation(1, h, w, grid_rows, grid_cols)?;
    let ignore_frac = iidx.iter().map(|&i| mask.ignore_frac[i]).collect();
    Ok((
        f_l,
        MaskPatches {
            num_patches: n,
            num_classes: mask.num_classes,
            pixels_per_patch: ph * pw,
            class_frac,
            ignore_frac,
        },
    ))
}

/// Inverse of `split_patches` on the feature tensor.
pub fn reassemble_patches<T: Scalar>(
    patches: &Tensor<T>,
    channels: usize,
    height: usize,
    width: usize,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<Tensor<T>> {
    let (perm, n, ph, pw) = patch_permutation(channels, height, width, grid_rows, grid_cols)?;
    if patches.shape() != [n, channels, ph * pw] {
        return Err(Error::Dimension("patch tensor shape mismatch".into()));
    }
    let mut inv = vec![0usize; perm.len()];
    for (out_i, &in_i) in perm.iter().enumerate() {
        inv[in_i] = out_i;
    }
    patches.gather(Rc::new(inv), &[channels, height, width])
}

/// Per-patch class centers with validity flags.
pub struct ClassCenters<T: Scalar> {
    /// `[K, n, C]`; invalid entries are exactly zero.
    pub centers: Tensor<T>,
    /// `[K, n]` flattened; true iff the class has positive mass in the patch.
    pub validity: Vec<bool>,
    /// `[K, n]` effective pixel mass per (class, patch).
    pub mass: Vec<T>,
}

/// Masked mean of patch features per class: the center is the average
/// feature over the class's effective pixels in the patch.
/// Differentiable with respect to the features.
pub fn extract_centers<T: Scalar>(
    features: &Tensor<T>,
    mask: &MaskPatches<T>,
) -> Result<ClassCenters<T>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != mask.num_patches || s[2] != mask.pixels_per_patch {
        return Err(Error::Dimension(format!(
            "feature patches {:?} inconsistent with mask ({} patches, {} px)",
            s, mask.num_patches, mask.pixels_per_patch
        )));
    }
    let (n, c, pp) = (s[0], s[1], s[2]);
    let k = mask.num_classes;
    let fd = features.data();
    let eps = T::from_f64(EPS_MASS);

    let mut mass = vec![T::zero(); k * n];
    for p in 0..n {
        for kk in 0..k {
            let mut m = T::zero();
            for px in 0..pp {
                m = m + mask.class_frac[(p * k + kk) * pp + px];
            }
            mass[kk * n + p] = m;
        }
    }
    let validity: Vec<bool> = mass.iter().map(|&m| m > T::zero()).collect();

    let mut centers = vec![T::zero(); k * n * c];
    for kk in 0..k {
        for p in 0..n {
            if !validity[kk * n + p] {
                continue;
            }
            let denom = if mass[kk * n + p] > eps { mass[kk * n + p] } else { eps };
            for ch in 0..c {
                let mut acc = T::zero();
                for px in 0..pp {
                    acc = acc
                        + mask.class_frac[(p * k + kk) * pp + px] * fd[(p * c + ch) * pp + px];
                }
                centers[(kk * n + p) * c + ch] = acc / denom;
            }
        }
    }

    let y = mask.class_frac.clone();
    let mass_c = mass.clone();
    let validity_c = validity.clone();
    let vjp = Box::new(move |g: &[T], _out: &[T]| {
        let mut gf = vec![T::zero(); n * c * pp];
        for kk in 0..k {
            for p in 0..n {
                if !validity_c[kk * n + p] {
                    continue;
                }
                let m = mass_c[kk * n + p];
                let denom = if m > eps { m } else { eps };
                for ch in 0..c {
                    let gs = g[(kk * n + p) * c + ch];
                    if gs == T::zero() {
                        continue;
                    }
                    let scaled = gs / denom;
                    for px in 0..pp {
                        gf[(p * c + ch) * pp + px] =
                            gf[(p * c + ch) * pp + px] + scaled * y[(p * k + kk) * pp + px];
                    }
                }
            }
        }
        vec![gf]
    });
    let centers = Tensor::from_op(centers, vec![k, n, c], vec![features.clone()], vjp);
    Ok(ClassCenters { centers, validity, mass })
}

/// i.i.d. Gumbel(0,1) samples: -log(-log u), u uniform clamped away
/// from 0 and 1.
pub fn sample_gumbel<T: Scalar>(rng: &mut ChaCha8Rng, count: usize) -> Vec<T> {
    (0..count)
        .map(|_| {
            let u = rng.gen_range(0.0f64..1.0).clamp(1e-12, 1.0 - 1e-12);
            T::from_f64(-(-u.ln()).ln())
        })
        .collect()
}

/// Soft and hard (straight-through) assignment of class centers to the
/// class's sub-prototypes.
pub struct Assignment<T: Scalar> {
    /// Soft Gumbel-softmax weights `[n_v, m]`.
    pub soft: Tensor<T>,
    /// Straight-through one-hot rows `[n_v, m]`; gradient equals `soft`'s.
    pub hard: Tensor<T>,
}

/// Logits are inner products center x prototype; noise (when provided)
/// perturbs them before the temperature-scaled softmax over prototypes.
pub fn gumbel_assign<T: Scalar>(
    centers: &Tensor<T>,
    prototypes: &Tensor<T>,
    noise: Option<&[T]>,
    temperature: T,
) -> Result<Assignment<T>> {
    let cs = centers.shape();
    let ps = prototypes.shape();
    if cs.len() != 2 || ps.len() != 2 || cs[1] != ps[1] {
        return Err(Error::Dimension(format!(
            "centers {:?} and prototypes {:?} disagree",
            cs, ps
        )));
    }
    if temperature <= T::zero() {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let (nv, m) = (cs[0], ps[0]);
    let mut logits = centers.matmul(&prototypes.transpose2d()?)?;
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite assignment logits".into()));
    }
    if let Some(noise) = noise {
        if noise.len() != nv * m {
            return Err(Error::Dimension("gumbel noise size mismatch".into()));
        }
        logits = logits.add(&Tensor::new(noise.to_vec(), &[nv, m])?)?;
    }
    let soft = logits.mul_scalar(T::one() / temperature).softmax_axis(1)?;
    let hard = soft.straight_through_onehot()?;
    Ok(Assignment { soft, hard })
}

/// Mean of the centers hard-assigned to each sub-prototype, plus the
/// assignment counts; empty slots come back as zero rows with count 0.
pub fn batch_prototypes<T: Scalar>(
    assignment: &Assignment<T>,
    centers: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let hs = assignment.hard.shape();
    let (nv, m) = (hs[0], hs[1]);
    if centers.shape()[0] != nv {
        return Err(Error::Dimension("assignment rows != center count".into()));
    }
    let hd = assignment.hard.data();
    let mut counts = vec![0usize; m];
    for r in 0..nv {
        for j in 0..m {
            if hd[r * m + j] == T::one() {
                counts[j] += 1;
            }
        }
    }
    let sums = assignment.hard.transpose2d()?.matmul(centers)?;
    let scales: Vec<T> = counts
        .iter()
        .map(|&c| if c > 0 { T::one() / T::from_f64(c as f64) } else { T::zero() })
        .collect();
    Ok((sums.scale_rows(&scales)?, counts))
}

/// The momentum-updated prototype memory. A plain buffer: no gradient
/// ever flows into it.
#[derive(Clone)]
pub struct PrototypeBank<T: Scalar> {
    pub num_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub momentum: T,
    /// `[K, m, C]` row-major.
    pub data: Vec<T>,
    /// Per-(class, prototype) update counts, `[K, m]`.
    pub update_counts: Vec<u64>,
}

impl<T: Scalar> PrototypeBank<T> {
    /// Rows i.i.d. unit-normal, then L2-normalized. Seeded.
    pub fn init(num_classes: usize, per_class: usize, feature_dim: usize, seed: u64, momentum: T) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![T::zero(); num_classes * per_class * feature_dim];
        for row in 0..num_classes * per_class {
            let mut norm_sq = 0.0f64;
            let mut vals = Vec::with_capacity(feature_dim);
            for _ in 0..feature_dim {
                // Box-Muller from two uniforms.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                norm_sq += z * z;
                vals.push(z);
            }
            let norm = norm_sq.sqrt().max(1e-30);
            for (c, v) in vals.into_iter().enumerate() {
                data[row * feature_dim + c] = T::from_f64(v / norm);
            }
        }
        PrototypeBank {
            num_classes,
            per_class,
            feature_dim,
            momentum,
            data,
            update_counts: vec![0; num_classes * per_class],
        }
    }

    /// The m x C block of one class as a detached constant tensor.
    pub fn class_tensor(&self, class: usize) -> Tensor<T> {
        let (m, c) = (self.per_class, self.feature_dim);
        Tensor::new(
            self.data[class * m * c..(class + 1) * m * c].to_vec(),
            &[m, c],
        )
        .unwrap()
    }

    pub fn tensor(&self) -> Tensor<T> {
        Tensor::new(
            self.data.clone(),
            &[self.num_classes, self.per_class, self.feature_dim],
        )
        .unwrap()
    }

    /// EMA update `P <- mu P + (1-mu) P_hat` on slots with a positive
    /// assignment count; untouched slots stay bit-identical.
    pub fn momentum_update(
        &mut self,
        class: usize,
        batch_prototypes: &[T],
        counts: &[usize],
    ) -> Result<()> {
        let (m, c) = (self.per_class, self.feature_dim);
        if batch_prototypes.len() != m * c || counts.len() != m {
            return Err(Error::Dimension("batch prototype shape mismatch".into()));
        }
        let mu = self.momentum;
        let one_minus = T::one() - mu;
        for i in 0..m {
            if counts[i] == 0 {
                continue;
            }
            let base = (class * m + i) * c;
            for ch in 0..c {
                self.data[base + ch] =
                    mu * self.data[base + ch] + one_minus * batch_prototypes[i * c + ch];
            }
            self.update_counts[class * m + i] += 1;
        }
        Ok(())
    }
}
