//! Prototype interpretability: map every prototype to the nearest class
//! center among all training patches ("this looks like that"), plus a
//! deterministic 2-D PCA projection of feature vectors for cluster
//! plots.

use std::fmt::Write as _;

use crate::backbone::{Backbone, DOWNSAMPLE_FACTOR};
use crate::data::{load_sample, Manifest, Sample};
use crate::error::{Error, Result};
use crate::prototype::{
    downsample_labels, extract_centers, split_patches, PrototypeBank, IGNORE_INDEX,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One training-patch class center seen during a scan.
#[derive(Clone, Debug)]
pub struct ScannedCenter {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    /// Class whose masked mean produced this center.
    pub class: usize,
    /// Class with the largest pixel mass in the whole patch, if any.
    pub dominant_class: Option<usize>,
    pub center: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PrototypeExemplar {
    pub class: usize,
    pub proto: usize,
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    pub distance: f64,
    pub dominant_class: Option<usize>,
    /// Set when the class never appeared in the scanned split.
    pub missing: bool,
}

/// Runs the backbone over a split and collects every valid patch center
/// with its grid coordinates; deterministic scan order (sample, patch,
/// class).
pub fn scan_centers<T: Scalar>(
    backbone: &Backbone<T>,
    manifest: &Manifest,
    split: &str,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<Vec<ScannedCenter>> {
    let k = manifest.spec.num_classes;
    let count = manifest.split(split)?.len();
    let mut out = Vec::new();
    for idx in 0..count {
        let sample: Sample<T> = load_sample(manifest, split, idx)?;
        let image = Tensor::new(sample.image.clone(), &[3, sample.height, sample.width])?;
        let features = backbone.forward(&image)?;
        let mask = downsample_labels(
            &sample.labels,
            sample.height,
            sample.width,
            k,
            DOWNSAMPLE_FACTOR,
            IGNORE_INDEX,
        )?;
        let (patches, mpatches) = split_patches(&features, &mask, grid_rows, grid_cols)?;
        let cc = extract_centers(&patches, &mpatches)?;
        let cd = cc.centers.data();
        let n = mpatches.num_patches;
        let c = patches.shape()[1];
        let pp = mpatches.pixels_per_patch;
        for p in 0..n {
            // dominant class of the patch by total pixel mass
            let mut dom: Option<usize> = None;
            let mut dom_mass = T::zero();
            for kk in 0..k {
                let mut m = T::zero();
                for px in 0..pp {
                    m = m + mpatches.class_frac[(p * k + kk) * pp + px];
                }
                if m > dom_mass {
                    dom_mass = m;
                    dom = Some(kk);
                }
            }
            for kk in 0..k {
                if !cc.validity[kk * n + p] {
                    continue;
                }
                let center: Vec<f64> = (0..c)
                    .map(|ch| Scalar::to_f64(cd[(kk * n + p) * c + ch]))
                    .collect();
                out.push(ScannedCenter {
                    sample: idx,
                    row: p / grid_cols,
                    col: p % grid_cols,
                    class: kk,
                    dominant_class: dom,
                    center,
                });
            }
        }
    }
    Ok(out)
}

/// For every prototype (k, i), the globally nearest scanned class-k
/// center; ties keep the earliest in scan order.
pub fn find_exemplars<T: Scalar>(
    bank: &PrototypeBank<T>,
    centers: &[ScannedCenter],
) -> Vec<PrototypeExemplar> {
    let c = bank.feature_dim;
    let mut out = Vec::with_capacity(bank.num_classes * bank.per_class);
    for k in 0..bank.num_classes {
        for i in 0..bank.per_class {
            let proto: Vec<f64> = (0..c)
                .map(|ch| Scalar::to_f64(bank.data[(k * bank.per_class + i) * c + ch]))
                .collect();
            let mut best: Option<(&ScannedCenter, f64)> = None;
            for sc in centers.iter().filter(|sc| sc.class == k) {
                let d: f64 = sc
                    .center
                    .iter()
                    .zip(&proto)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if best.as_ref().map_or(true, |(_, bd)| d < *bd) {
                    best = Some((sc, d));
                }
            }
            match best {
                Some((sc, d)) => out.push(PrototypeExemplar {
                    class: k,
                    proto: i,
                    sample: sc.sample,
                    row: sc.row,
                    col: sc.col,
                    distance: d,
                    dominant_class: sc.dominant_class,
                    missing: false,
                }),
                None => out.push(PrototypeExemplar {
                    class: k,
                    proto: i,
                    sample: 0,
                    row: 0,
                    col: 0,
                    distance: f64::INFINITY,
                    dominant_class: None,
                    missing: true,
                }),
            }
        }
    }
    out
}

pub fn exemplars_to_csv(exemplars: &[PrototypeExemplar]) -> String {
    let mut s = String::from("class,proto,sample,row,col,distance,dominant_class,missing\n");
    for e in exemplars {
        let dom = e
            .dominant_class
            .map(|d| d.to_string())
            .unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{},{}",
            e.class, e.proto, e.sample, e.row, e.col, e.distance, dom, e.missing
        );
    }
    s
}

const PCA_TOL: f64 = 1e-8;
const PCA_MAX_ITERS: usize = 1000;

/// Projects N×C row vectors onto their top-2 principal components via
/// power iteration with deflation. Rank-0 data yields all-zero
/// coordinates and a raised warning flag.
pub fn pca_project(data: &[f64], n: usize, c: usize) -> Result<(Vec<f64>, bool)> {
    if data.len() != n * c {
        return Err(Error::Dimension("pca data size mismatch".into()));
    }
    if n < 2 {
        return Err(Error::Contract("pca needs at least 2 points".into()));
    }
    let mut mean = vec![0.0; c];
    for row in 0..n {
        for ch in 0..c {
            mean[ch] += data[row * c + ch];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let xc: Vec<f64> = (0..n * c).map(|i| data[i] - mean[i % c]).collect();
    // covariance C×C
    let mut cov = vec![0.0; c * c];
    for row in 0..n {
        for a in 0..c {
            for b in 0..c {
                cov[a * c + b] += xc[row * c + a] * xc[row * c + b];
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= n as f64;
    }
    let total_var: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    if total_var <= 1e-30 {
        return Ok((vec![0.0; n * 2], true));
    }

    let mut coords = vec![0.0; n * 2];
    let mut found: Vec<Vec<f64>> = Vec::new();
    for comp in 0..2usize {
        // deterministic start, slightly tilted so it is never orthogonal
        // to the leading eigenvector by symmetry
        let mut v: Vec<f64> = (0..c).map(|i| 1.0 + 0.01 * i as f64).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERS {
            let mut w = vec![0.0; c];
            for a in 0..c {
                for b in 0..c {
                    w[a] += cov[a * c + b] * v[b];
                }
            }
            // keep strictly orthogonal to already-found components
            for u in &found {
                let d: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
                for (wi, ui) in w.iter_mut().zip(u) {
                    *wi -= d * ui;
                }
            }
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if wn <= 1e-30 {
                lambda = 0.0;
                break;
            }
            for x in w.iter_mut() {
                *x /= wn;
            }
            let align: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            let delta = (1.0 - align.abs()).abs();
            v = w;
            lambda = wn;
            if delta < PCA_TOL {
                break;
            }
        }
        if lambda <= 1e-12 * total_var {
            continue; // remaining variance is numerically zero
        }
        for row in 0..n {
            let score: f64 = (0..c).map(|ch| xc[row * c + ch] * v[ch]).sum();
            coords[row * 2 + comp] = score;
        }
        // deflate the found component
        for a in 0..c {
            for b in 0..c {
                cov[a * c + b] -= lambda * v[a] * v[b];
            }
        }
        found.push(v);
    }
    Ok((coords, false))
}

pub fn projection_to_csv(coords: &[f64], classes: &[usize]) -> String {
    let mut s = String::from("x,y,class\n");
    for (i, &k) in classes.iter().enumerate() {
        let _ = writeln!(s, "{:.6},{:.6},{}", coords[i * 2], coords[i * 2 + 1], k);
    }
    s
}
