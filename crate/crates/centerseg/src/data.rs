//! Synthetic multimode segmentation data: Voronoi mosaics whose
//! regions draw a class *and* a latent appearance mode, so classes have
//! deliberately large intraclass variance. Also the on-disk dataset
//! format (binary PPM/PGM + a key=value manifest) and prediction
//! rendering.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::DOWNSAMPLE_FACTOR;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.modes_per_class < 1 {
            return Err(Error::Config("modes_per_class must be >= 1".into()));
        }
        if self.height % DOWNSAMPLE_FACTOR != 0 || self.width % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Config(format!(
                "image size must be divisible by {}",
                DOWNSAMPLE_FACTOR
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn split_count(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train_count),
            "val" => Ok(self.val_count),
            "test" => Ok(self.test_count),
            other => Err(Error::Config(format!("unknown split '{}'", other))),
        }
    }
}

/// Appearance signature of one (class, mode) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeSignature {
    pub class: usize,
    pub mode: usize,
    pub base_rgb: [u8; 3],
    /// 0 = solid, 1 = stripes, 2 = checker.
    pub texture: u8,
}

pub fn texture_name(t: u8) -> &'static str {
    match t {
        0 => "solid",
        1 => "stripes",
        _ => "checker",
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Mode signatures on an interleaved hue wheel: global index r*K + k, so
/// each class's modes sit far apart and neighbouring hues belong to
/// different classes.
pub fn mode_signatures(num_classes: usize, modes_per_class: usize) -> Vec<ModeSignature> {
    let total = num_classes * modes_per_class;
    let mut out = Vec::with_capacity(total);
    for k in 0..num_classes {
        for r in 0..modes_per_class {
            let j = r * num_classes + k;
            let hue = 360.0 * j as f64 / total as f64;
            out.push(ModeSignature {
                class: k,
                mode: r,
                base_rgb: hsv_to_rgb(hue, 0.85, 0.9),
                texture: (r % 3) as u8,
            });
        }
    }
    out
}

fn sample_seed(spec_seed: u64, split: &str, index: usize) -> u64 {
    let split_id = SPLITS.iter().position(|s| *s == split).unwrap_or(3) as u64;
    // splitmix64 over a combined word keeps per-sample streams independent
    let mut z = spec_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split_id.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, first deviate only
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Voronoi regions of one image: seed points plus per-region class/mode.
struct Mosaic {
    seeds: Vec<(f64, f64)>,
    region_class: Vec<usize>,
    region_mode: Vec<usize>,
}

fn sample_mosaic(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Mosaic {
    let n = rng.gen_range(6..=20usize);
    let mut seeds = Vec::with_capacity(n);
    let mut region_class = Vec::with_capacity(n);
    let mut region_mode = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen_range(0.0..spec.width as f64);
        let y: f64 = rng.gen_range(0.0..spec.height as f64);
        seeds.push((x, y));
        region_class.push(rng.gen_range(0..spec.num_classes));
        region_mode.push(rng.gen_range(0..spec.modes_per_class));
    }
    Mosaic { seeds, region_class, region_mode }
}

fn nearest_region(m: &Mosaic, x: usize, y: usize) -> usize {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, (sx, sy)) in m.seeds.iter().enumerate() {
        let d = (px - sx) * (px - sx) + (py - sy) * (py - sy);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn mode_pixel(sig: &ModeSignature, x: usize, y: usize) -> [u8; 3] {
    let dark = |c: u8| (c as f64 * 0.45).round() as u8;
    let alt = [dark(sig.base_rgb[0]), dark(sig.base_rgb[1]), dark(sig.base_rgb[2])];
    let use_alt = match sig.texture {
        0 => false,
        1 => (x / 4) % 2 == 1,
        _ => (x / 4 + y / 4) % 2 == 1,
    };
    if use_alt {
        alt
    } else {
        sig.base_rgb
    }
}

/// Deterministically render sample `index` of `split`: interleaved RGB
/// bytes plus a label byte per pixel.
pub fn generate_sample(
    spec: &DatasetSpec,
    split: &str,
    index: usize,
) -> Result<(Vec<u8>, Vec<u8>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, index));
    let mosaic = sample_mosaic(spec, &mut rng);
    let sigs = mode_signatures(spec.num_classes, spec.modes_per_class);
    let (h, w) = (spec.height, spec.width);
    let mut rgb = vec![0u8; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let region = nearest_region(&mosaic, x, y);
            let k = mosaic.region_class[region];
            let r = mosaic.region_mode[region];
            let sig = &sigs[k * spec.modes_per_class + r];
            let base = mode_pixel(sig, x, y);
            labels[y * w + x] = k as u8;
            for ch in 0..3 {
                let v = base[ch] as f64 / 255.0 + spec.noise_sigma * gaussian(&mut rng);
                rgb[(y * w + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok((rgb, labels))
}

// ---------------------------------------------------------------- file io

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Dimension("ppm payload size mismatch".into()));
    }
    let mut buf = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    buf.extend_from_slice(rgb);
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Dimension("pgm payload size mismatch".into()));
    }
    let mut buf = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    buf.extend_from_slice(gray);
    fs::write(path, buf)?;
    Ok(())
}

fn parse_netpbm(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and '#' comment lines in the header
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != magic {
        return Err(Error::Data(format!("expected {} image", magic)));
    }
    let width: usize = token()?.parse().map_err(|_| Error::Data("bad width".into()))?;
    let height: usize = token()?.parse().map_err(|_| Error::Data("bad height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| Error::Data("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data("only maxval 255 supported".into()));
    }
    let data_start = pos + 1; // single whitespace byte after maxval
    let need = channels * width * height;
    if bytes.len() < data_start + need {
        return Err(Error::Data("truncated netpbm payload".into()));
    }
    Ok((width, height, bytes[data_start..data_start + need].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_netpbm(&fs::read(path)?, "P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_netpbm(&fs::read(path)?, "P5", 1)
}

// --------------------------------------------------------------- manifest

#[derive(Clone, Debug)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub root: PathBuf,
    pub modes: Vec<ModeSignature>,
    /// split -> list of (image path, label path) relative to root.
    pub files: BTreeMap<String, Vec<(String, String)>>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[(String, String)]> {
        self.files
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("split '{}' not in manifest", name)))
    }
}

/// Generates all splits under `out_dir` and writes `manifest.txt`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut files: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for split in SPLITS {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir)?;
        let count = spec.split_count(split)?;
        let mut list = Vec::with_capacity(count);
        for i in 0..count {
            let (rgb, labels) = generate_sample(spec, split, i)?;
            let img_rel = format!("{}/img_{}.ppm", split, i);
            let lbl_rel = format!("{}/lbl_{}.pgm", split, i);
            write_ppm(&out_dir.join(&img_rel), spec.width, spec.height, &rgb)?;
            write_pgm(&out_dir.join(&lbl_rel), spec.width, spec.height, &labels)?;
            list.push((img_rel, lbl_rel));
        }
        files.insert(split.to_string(), list);
    }
    let modes = mode_signatures(spec.num_classes, spec.modes_per_class);

    let mut text = String::new();
    text.push_str(&format!("num_classes={}\n", spec.num_classes));
    text.push_str(&format!("modes_per_class={}\n", spec.modes_per_class));
    text.push_str(&format!("height={}\n", spec.height));
    text.push_str(&format!("width={}\n", spec.width));
    text.push_str(&format!("train_count={}\n", spec.train_count));
    text.push_str(&format!("val_count={}\n", spec.val_count));
    text.push_str(&format!("test_count={}\n", spec.test_count));
    text.push_str(&format!("noise_sigma={}\n", spec.noise_sigma));
    text.push_str(&format!("seed={}\n", spec.seed));
    for (j, m) in modes.iter().enumerate() {
        text.push_str(&format!(
            "mode_{}=class:{} mode:{} rgb:{},{},{} texture:{}\n",
            j,
            m.class,
            m.mode,
            m.base_rgb[0],
            m.base_rgb[1],
            m.base_rgb[2],
            texture_name(m.texture)
        ));
    }
    for split in SPLITS {
        for (i, (img, lbl)) in files[split].iter().enumerate() {
            text.push_str(&format!("file_{}_{}={} {}\n", split, i, img, lbl));
        }
    }
    let mut f = fs::File::create(out_dir.join("manifest.txt"))?;
    f.write_all(text.as_bytes())?;

    Ok(Manifest { spec: spec.clone(), root: out_dir.to_path_buf(), modes, files })
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(root.join("manifest.txt"))?;
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad manifest line '{}'", line)))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Data(format!("manifest missing '{}'", k)))
    };
    let parse_usize =
        |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Data(format!("bad '{}'", k))) };
    let spec = DatasetSpec {
        num_classes: parse_usize("num_classes")?,
        modes_per_class: parse_usize("modes_per_class")?,
        height: parse_usize("height")?,
        width: parse_usize("width")?,
        train_count: parse_usize("train_count")?,
        val_count: parse_usize("val_count")?,
        test_count: parse_usize("test_count")?,
        noise_sigma: get("noise_sigma")?
            .parse()
            .map_err(|_| Error::Data("bad noise_sigma".into()))?,
        seed: get("seed")?.parse().map_err(|_| Error::Data("bad seed".into()))?,
    };
    let mut files: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for split in SPLITS {
        let count = spec.split_count(split)?;
        let mut list = Vec::with_capacity(count);
        for i in 0..count {
            let v = get(&format!("file_{}_{}", split, i))?;
            let (img, lbl) = v
                .split_once(' ')
                .ok_or_else(|| Error::Data("bad file entry".into()))?;
            list.push((img.to_string(), lbl.to_string()));
        }
        files.insert(split.to_string(), list);
    }
    Ok(Manifest {
        modes: mode_signatures(spec.num_classes, spec.modes_per_class),
        spec,
        root: root.to_path_buf(),
        files,
    })
}

// ----------------------------------------------------------------- sample

/// One decoded sample: planar `[3, H, W]` image in `[0, 1]` plus a byte
/// label map.
pub struct Sample<T: Scalar> {
    pub image: Vec<T>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

pub fn load_sample<T: Scalar>(manifest: &Manifest, split: &str, index: usize) -> Result<Sample<T>> {
    let list = manifest.split(split)?;
    if index >= list.len() {
        return Err(Error::Contract(format!(
            "sample index {} out of range for split '{}' ({} samples)",
            index,
            split,
            list.len()
        )));
    }
    let (img_rel, lbl_rel) = &list[index];
    let (w, h, rgb) = read_ppm(&manifest.root.join(img_rel))?;
    let (lw, lh, labels) = read_pgm(&manifest.root.join(lbl_rel))?;
    if (w, h) != (lw, lh) {
        return Err(Error::Data("image/label size mismatch".into()));
    }
    let k = manifest.spec.num_classes as u8;
    if labels.iter().any(|&l| l >= k && l != crate::prototype::IGNORE_INDEX) {
        return Err(Error::Data("label value out of range".into()));
    }
    // interleaved bytes -> planar floats
    let mut image = vec![T::zero(); 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            image[ch * h * w + p] = T::from_f64(rgb[p * 3 + ch] as f64 / 255.0);
        }
    }
    Ok(Sample { image, labels, height: h, width: w })
}

// --------------------------------------------------------------- palette

/// Fully saturated hue-wheel palette for rendering label maps.
pub fn class_palette(num_classes: usize) -> Vec<[u8; 3]> {
    (0..num_classes)
        .map(|k| hsv_to_rgb(360.0 * k as f64 / num_classes as f64, 1.0, 1.0))
        .collect()
}

/// Renders a label map to a lossless color image file. Ignore pixels
/// come out black.
pub fn render_prediction(
    path: &Path,
    labels: &[u8],
    height: usize,
    width: usize,
    palette: &[[u8; 3]],
) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::Dimension("label map size mismatch".into()));
    }
    let needed = labels
        .iter()
        .filter(|&&l| l != crate::prototype::IGNORE_INDEX)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    if palette.len() < needed {
        return Err(Error::Config(format!(
            "palette covers {} classes, need {}",
            palette.len(),
            needed
        )));
    }
    let mut rgb = vec![0u8; 3 * height * width];
    for (p, &l) in labels.iter().enumerate() {
        if l != crate::prototype::IGNORE_INDEX {
            rgb[p * 3..p * 3 + 3].copy_from_slice(&palette[l as usize]);
        }
    }
    write_ppm(path, width, height, &rgb)
}
