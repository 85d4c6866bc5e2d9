//! Procedural radiograph-like grayscale images with ground-truth labels,
//! and the on-disk dataset layout (PGM files + tab-separated manifest +
//! hidden-label sidecar).
//!
//! A normal image is a mid-gray field holding two bright-rimmed ellipses
//! with dark interiors ("lung fields") plus smooth low-amplitude texture;
//! an abnormal image additionally has 1-3 bright Gaussian blobs placed
//! inside an interior. All geometry and intensity parameters are jittered
//! per image from the image's own generator stream.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm, GrayImage};
use crate::masking::round_half_up;
use crate::par::par_map_range;
use crate::rng::Rng;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const SIDECAR_NAME: &str = "hidden_labels.tsv";

/// One ellipse: center and semi-axes in pixel units.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Normalized quadratic form; < 1 inside the ellipse.
    fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy
    }
}

/// A generated normal image together with its construction ground truth:
/// the two lung ellipses and the boolean interior mask.
#[derive(Debug, Clone)]
pub struct NormalImage {
    pub image: GrayImage,
    pub ellipses: [Ellipse; 2],
    pub interior: Vec<bool>,
}

/// An abnormal image plus its blob ground truth.
#[derive(Debug, Clone)]
pub struct AbnormalImage {
    pub image: GrayImage,
    pub ellipses: [Ellipse; 2],
    pub blob_centers: Vec<(f64, f64)>,
}

const RIM_OUTER: f64 = 1.9;

fn smooth_noise(rng: &mut Rng, size: usize) -> Vec<f64> {
    // coarse normal grid, bilinearly upsampled
    const GRID: usize = 8;
    let coarse: Vec<f64> = (0..(GRID + 1) * (GRID + 1))
        .map(|_| rng.normal() * 0.022)
        .collect();
    let mut out = vec![0.0; size * size];
    let scale = GRID as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 * scale;
            let fy = y as f64 * scale;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g = |gx: usize, gy: usize| coarse[gy * (GRID + 1) + gx];
            out[y * size + x] = g(ix, iy) * (1.0 - tx) * (1.0 - ty)
                + g(ix + 1, iy) * tx * (1.0 - ty)
                + g(ix, iy + 1) * (1.0 - tx) * ty
                + g(ix + 1, iy + 1) * tx * ty;
        }
    }
    out
}

fn jitter(rng: &mut Rng, center: f64, half_range: f64) -> f64 {
    center + rng.uniform(-half_range, half_range)
}

/// Generate a normal image with its ground-truth geometry.
pub fn gen_normal_detailed(rng: &mut Rng, size: usize) -> NormalImage {
    let s = size as f64;
    let background = jitter(rng, 0.47, 0.03);
    let rim_value = jitter(rng, 0.81, 0.04);
    let interior_value = jitter(rng, 0.19, 0.04);

    let mut ellipses = [Ellipse {
        cx: 0.0,
        cy: 0.0,
        rx: 1.0,
        ry: 1.0,
    }; 2];
    for (i, cx0) in [(0usize, 0.30), (1usize, 0.70)] {
        ellipses[i] = Ellipse {
            cx: jitter(rng, cx0, 0.015) * s,
            cy: jitter(rng, 0.54, 0.02) * s,
            rx: jitter(rng, 0.1475, 0.0125) * s,
            ry: jitter(rng, 0.255, 0.015) * s,
        };
    }

    let noise = smooth_noise(rng, size);
    let mut image = GrayImage::new(size, size);
    let mut interior = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let e0 = ellipses[0].eval(fx, fy);
            let e1 = ellipses[1].eval(fx, fy);
            let e = e0.min(e1);
            let v = if e < 1.0 {
                interior[y * size + x] = true;
                interior_value
            } else if e < RIM_OUTER {
                rim_value
            } else {
                background
            };
            let grain = (rng.f64() - 0.5) * 0.012;
            image.pixels[y * size + x] = v + noise[y * size + x] + grain;
        }
    }
    image.clamp01();
    NormalImage {
        image,
        ellipses,
        interior,
    }
}

pub fn gen_normal(rng: &mut Rng, size: usize) -> GrayImage {
    gen_normal_detailed(rng, size).image
}

/// Normal image plus 1-3 bright opacity blobs inside the lung interiors,
/// blob amplitude uniform in [amp_lo, amp_hi].
pub fn gen_abnormal_with(rng: &mut Rng, size: usize, amp_lo: f64, amp_hi: f64) -> AbnormalImage {
    let base = gen_normal_detailed(rng, size);
    let mut image = base.image;
    let s = size as f64;
    let count = rng.int_inclusive(1, 3);
    let mut blob_centers = Vec::with_capacity(count);
    for _ in 0..count {
        let ell = base.ellipses[rng.index(2)];
        // uniform point in the unit disc, shrunk to stay inside
        let (dx, dy) = loop {
            let dx = rng.uniform(-1.0, 1.0);
            let dy = rng.uniform(-1.0, 1.0);
            if dx * dx + dy * dy < 1.0 {
                break (dx, dy);
            }
        };
        let px = ell.cx + dx * ell.rx * 0.75;
        let py = ell.cy + dy * ell.ry * 0.75;
        let sigma = rng.uniform(0.045, 0.115) * s;
        let amplitude = rng.uniform(amp_lo, amp_hi);
        blob_centers.push((px, py));
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let r2 = (fx - px) * (fx - px) + (fy - py) * (fy - py);
                image.pixels[y * size + x] += amplitude * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    image.clamp01();
    AbnormalImage {
        image,
        ellipses: base.ellipses,
        blob_centers,
    }
}

pub fn gen_abnormal(rng: &mut Rng, size: usize) -> GrayImage {
    gen_abnormal_with(rng, size, 0.2, 0.5).image
}

// ── splits ─────────────────────────────────────────────────────────────

/// One portion of a dataset: images, their relative paths, and labels.
/// For the unlabeled portion the labels are the *hidden* ground truth —
/// they go to the sidecar, never the manifest.
#[derive(Debug, Clone, Default)]
pub struct SplitPart {
    pub images: Vec<GrayImage>,
    pub paths: Vec<String>,
    pub labels: Vec<u8>,
}

impl SplitPart {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub seed: u64,
    pub anomaly_ratio: f64,
    pub image_size: usize,
    pub normal_train: SplitPart,
    pub unlabeled_train: SplitPart,
    pub test: SplitPart,
}

impl DatasetSplit {
    /// All training images (the normal and unlabeled pools).
    pub fn train_images(&self) -> Vec<GrayImage> {
        let mut v = self.normal_train.images.clone();
        v.extend(self.unlabeled_train.images.iter().cloned());
        v
    }
}

/// Build a dataset in memory: `n` normal training images, `m` unlabeled
/// training images of which round(ar * m) are abnormal, and `s` test
/// images split 50/50. Every image draws from its own stream derived
/// from the global image index, so the splits never share a seed.
pub fn build_split(n: usize, m: usize, s: usize, ar: f64, seed: u64, size: usize) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&ar) {
        return Err(Error::InvalidAnomalyRatio(ar));
    }
    let root = Rng::new(seed);

    let mut unlabeled_labels = vec![0u8; m];
    for l in unlabeled_labels.iter_mut().take(round_half_up(ar * m as f64)) {
        *l = 1;
    }
    let mut order_rng = root.derive_str("unlabeled-order");
    order_rng.shuffle(&mut unlabeled_labels);

    let mut test_labels = vec![0u8; s];
    for l in test_labels.iter_mut().take(round_half_up(0.5 * s as f64)) {
        *l = 1;
    }
    let mut order_rng = root.derive_str("test-order");
    order_rng.shuffle(&mut test_labels);

    let image_rng = root.derive_str("image");
    let gen_one = |global_idx: usize, label: u8| -> GrayImage {
        let mut rng = image_rng.derive(global_idx as u64);
        if label == 1 {
            gen_abnormal(&mut rng, size)
        } else {
            gen_normal(&mut rng, size)
        }
    };

    let normal_images = par_map_range(n, |i| gen_one(i, 0));
    let unlabeled_images = par_map_range(m, |i| gen_one(n + i, unlabeled_labels[i]));
    let test_images = par_map_range(s, |i| gen_one(n + m + i, test_labels[i]));

    let path_of = |dir: &str, global: usize| format!("{dir}/img_{global:05}.pgm");
    Ok(DatasetSplit {
        seed,
        anomaly_ratio: ar,
        image_size: size,
        normal_train: SplitPart {
            paths: (0..n).map(|i| path_of("normal_train", i)).collect(),
            images: normal_images,
            labels: vec![0; n],
        },
        unlabeled_train: SplitPart {
            paths: (0..m).map(|i| path_of("unlabeled_train", n + i)).collect(),
            images: unlabeled_images,
            labels: unlabeled_labels,
        },
        test: SplitPart {
            paths: (0..s).map(|i| path_of("test", n + m + i)).collect(),
            images: test_images,
            labels: test_labels,
        },
    })
}

/// Write PGM files plus a public manifest and the hidden-label sidecar.
///
/// Manifest lines are `path<TAB>split<TAB>label`; unlabeled images carry
/// `?` so their ground truth never leaks into the public file. The
/// sidecar holds `path<TAB>label` for the unlabeled pool only.
pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    for sub in ["normal_train", "unlabeled_train", "test"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::new();
    manifest.push_str(&format!("# seed\t{}\n", split.seed));
    manifest.push_str(&format!("# anomaly_ratio\t{}\n", split.anomaly_ratio));
    manifest.push_str(&format!("# image_size\t{}\n", split.image_size));

    let mut write_part = |part: &SplitPart, tag: &str, public_labels: bool| -> Result<()> {
        for i in 0..part.len() {
            write_pgm(&dir.join(&part.paths[i]), &part.images[i], None)?;
            let label = if public_labels {
                part.labels[i].to_string()
            } else {
                "?".to_string()
            };
            manifest.push_str(&format!("{}\t{}\t{}\n", part.paths[i], tag, label));
        }
        Ok(())
    };
    write_part(&split.normal_train, "normal_train", true)?;
    write_part(&split.unlabeled_train, "unlabeled_train", false)?;
    write_part(&split.test, "test", true)?;

    let manifest_path = dir.join(MANIFEST_NAME);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let mut sidecar = String::new();
    for i in 0..split.unlabeled_train.len() {
        sidecar.push_str(&format!(
            "{}\t{}\n",
            split.unlabeled_train.paths[i], split.unlabeled_train.labels[i]
        ));
    }
    let sidecar_path = dir.join(SIDECAR_NAME);
    fs::write(&sidecar_path, sidecar).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

/// Load a dataset directory back. Hidden labels come from the sidecar
/// when it exists; without it the unlabeled part has empty labels (use
/// [`load_hidden_labels`] to demand them).
pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;

    let mut split = DatasetSplit {
        seed: 0,
        anomaly_ratio: 0.0,
        image_size: 0,
        normal_train: SplitPart::default(),
        unlabeled_train: SplitPart::default(),
        test: SplitPart::default(),
    };

    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let parse_err = |detail: String| Error::ManifestParse {
            path: manifest_path.clone(),
            line: line_no,
            detail,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            let mut kv = rest.splitn(2, '\t');
            match (kv.next(), kv.next()) {
                (Some("seed"), Some(v)) => {
                    split.seed = v.parse().map_err(|_| parse_err(format!("bad seed {v:?}")))?
                }
                (Some("anomaly_ratio"), Some(v)) => {
                    split.anomaly_ratio =
                        v.parse().map_err(|_| parse_err(format!("bad ratio {v:?}")))?
                }
                (Some("image_size"), Some(v)) => {
                    split.image_size =
                        v.parse().map_err(|_| parse_err(format!("bad size {v:?}")))?
                }
                _ => {}
            }
            continue;
        }
        let mut fields = line.split('\t');
        let (path, tag, label) = match (fields.next(), fields.next(), fields.next()) {
            (Some(p), Some(t), Some(l)) if fields.next().is_none() => (p, t, l),
            _ => return Err(parse_err("expected path<TAB>split<TAB>label".into())),
        };
        let image = read_pgm(&dir.join(path))?;
        let part = match tag {
            "normal_train" => &mut split.normal_train,
            "unlabeled_train" => &mut split.unlabeled_train,
            "test" => &mut split.test,
            other => return Err(parse_err(format!("unknown split tag {other:?}"))),
        };
        let label_value = match (tag, label) {
            ("unlabeled_train", "?") => 255, // placeholder, replaced from the sidecar
            ("unlabeled_train", other) => {
                return Err(parse_err(format!(
                    "unlabeled rows must carry '?', found {other:?}"
                )))
            }
            (_, l) => l
                .parse::<u8>()
                .ok()
                .filter(|v| *v <= 1)
                .ok_or_else(|| parse_err(format!("bad label {l:?}")))?,
        };
        part.paths.push(path.to_string());
        part.images.push(image);
        part.labels.push(label_value);
    }

    if split.image_size == 0 {
        split.image_size = split
            .normal_train
            .images
            .first()
            .or(split.unlabeled_train.images.first())
            .or(split.test.images.first())
            .map_or(0, |img| img.width);
    }

    // hidden labels from the sidecar, if present
    match load_hidden_labels(dir, &split.unlabeled_train.paths) {
        Ok(labels) => split.unlabeled_train.labels = labels,
        Err(Error::MissingSidecar(_)) => split.unlabeled_train.labels = Vec::new(),
        Err(e) => return Err(e),
    }
    Ok(split)
}

/// Hidden unlabeled-pool labels, aligned with `paths`. Errors with
/// [`Error::MissingSidecar`] when the sidecar file is absent.
pub fn load_hidden_labels(dir: &Path, paths: &[String]) -> Result<Vec<u8>> {
    let sidecar_path: PathBuf = dir.join(SIDECAR_NAME);
    if !sidecar_path.exists() {
        return Err(Error::MissingSidecar(sidecar_path));
    }
    let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let mut by_path = std::collections::HashMap::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (path, label) = match (fields.next(), fields.next()) {
            (Some(p), Some(l)) => (p, l),
            _ => {
                return Err(Error::ManifestParse {
                    path: sidecar_path.clone(),
                    line: line_no + 1,
                    detail: "expected path<TAB>label".into(),
                })
            }
        };
        let v: u8 = label.parse().map_err(|_| Error::ManifestParse {
            path: sidecar_path.clone(),
            line: line_no + 1,
            detail: format!("bad label {label:?}"),
        })?;
        by_path.insert(path.to_string(), v);
    }
    paths
        .iter()
        .map(|p| {
            by_path.get(p).copied().ok_or_else(|| Error::ManifestParse {
                path: sidecar_path.clone(),
                line: 0,
                detail: format!("no hidden label for {p}"),
            })
        })
        .collect()
}
