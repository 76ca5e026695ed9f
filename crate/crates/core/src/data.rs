//! Synthetic fine-grained dataset and the on-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.csv        image_id,label,file   (header line first)
//! <dir>/patches.csv         image_id,x_tl,y_tl,x_br,y_br
//! <dir>/tensors/<id>.tnsr
//! ```
//!
//! Every synthetic image carries the same low-frequency background (with a
//! random phase). Classes differ only by a small motif stamped at a random
//! position inside the central part region, so the discriminative evidence
//! is small and localised.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::patches::{self, grid_patches, PatchSpec};
use crate::tensor::tnsr;
use crate::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub motif_size: usize,
    pub noise_std: f64,
    pub motif_amplitude: f64,
    pub background_amplitude: f64,
    /// Motifs of random classes stamped outside every local patch.
    pub distractors: usize,
    /// Side of the central part region as a fraction of the image.
    pub part_scale: f64,
    /// Scales of the centred patches offered to the local stream; the first
    /// one is used for evaluation.
    pub patch_scales: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            train_per_class: 100,
            test_per_class: 40,
            channels: 1,
            height: 32,
            width: 32,
            motif_size: 5,
            noise_std: 0.3,
            motif_amplitude: 2.0,
            background_amplitude: 0.5,
            distractors: 1,
            part_scale: 0.5,
            patch_scales: vec![0.5, 0.625],
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Tensor,
    pub label: usize,
    pub patches: Vec<PatchSpec>,
}

/// Where the class motif was stamped in a generated image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MotifPlacement {
    pub x: usize,
    pub y: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid!("need at least 2 classes, got {}", self.classes));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.motif_size == 0 {
            return Err(invalid!("image and motif extents must be positive"));
        }
        let part = self.part_region()?;
        if self.motif_size > part.width() || self.motif_size > part.height() {
            return Err(invalid!(
                "motif {}×{} does not fit the {}×{} part region of a {}×{} image",
                self.motif_size,
                self.motif_size,
                part.width(),
                part.height(),
                self.width,
                self.height
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid!("noise_std must be non-negative"));
        }
        if self.patch_scales.is_empty() {
            return Err(invalid!("at least one patch scale is required"));
        }
        for &s in &self.patch_scales {
            let p = grid_patches(self.width, self.height, 1, s)?[0];
            if p.width() < part.width() || p.height() < part.height() {
                return Err(invalid!("patch scale {s} is smaller than the part region"));
            }
        }
        if self.distractors > 0 {
            let hull = self.patch_hull()?;
            let room = hull
                .x_tl
                .max(self.width - hull.x_br)
                .max(hull.y_tl)
                .max(self.height - hull.y_br);
            if room < self.motif_size {
                return Err(invalid!(
                    "no room for a {}-pixel distractor outside the patches ({room} pixels free)",
                    self.motif_size
                ));
            }
        }
        Ok(())
    }

    pub fn part_region(&self) -> Result<PatchSpec> {
        Ok(grid_patches(self.width, self.height, 1, self.part_scale)?[0])
    }

    /// Bounding box of all local patches.
    pub fn patch_hull(&self) -> Result<PatchSpec> {
        let ps = self.patches()?;
        Ok(PatchSpec::new(
            ps.iter().map(|p| p.x_tl).min().unwrap_or(0),
            ps.iter().map(|p| p.y_tl).min().unwrap_or(0),
            ps.iter().map(|p| p.x_br).max().unwrap_or(self.width),
            ps.iter().map(|p| p.y_br).max().unwrap_or(self.height),
        ))
    }

    fn patches(&self) -> Result<Vec<PatchSpec>> {
        let mut out = Vec::with_capacity(self.patch_scales.len());
        for &s in &self.patch_scales {
            out.extend(grid_patches(self.width, self.height, 1, s)?);
        }
        Ok(out)
    }

    /// Class templates. Each class gets an oriented grating (`±1` after
    /// thresholding) at its own angle, made zero-mean per channel.
    pub fn motifs(&self) -> Vec<Tensor> {
        let m = self.motif_size;
        let centre = (m as f64 - 1.0) / 2.0;
        (0..self.classes)
            .map(|k| {
                let theta = std::f64::consts::PI * k as f64 / self.classes as f64;
                let (s, c) = theta.sin_cos();
                let mut data = Vec::with_capacity(self.channels * m * m);
                for ch in 0..self.channels {
                    for y in 0..m {
                        for x in 0..m {
                            let u = (x as f64 - centre) * c + (y as f64 - centre) * s;
                            let v = (std::f64::consts::TAU * u / PERIOD + 0.25 + ch as f64).cos();
                            data.push(if v >= 0.0 { 1.0 } else { -1.0 });
                        }
                    }
                }
                for plane in data.chunks_mut(m * m) {
                    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                    for v in plane {
                        *v -= mean;
                    }
                }
                Tensor::from_parts(vec![self.channels, m, m], data)
            })
            .collect()
    }
}

const PERIOD: f64 = 3.0;

fn stamp(image: &mut [f64], spec: &SyntheticSpec, motif: &Tensor, x0: usize, y0: usize, amp: f64) {
    let m = spec.motif_size;
    let (h, w) = (spec.height, spec.width);
    for c in 0..spec.channels {
        for dy in 0..m {
            for dx in 0..m {
                image[(c * h + y0 + dy) * w + x0 + dx] += amp * motif.data()[(c * m + dy) * m + dx];
            }
        }
    }
}

fn overlaps(a: (usize, usize), b: (usize, usize), m: usize) -> bool {
    a.0 < b.0 + m && b.0 < a.0 + m && a.1 < b.1 + m && b.1 < a.1 + m
}

fn render(
    spec: &SyntheticSpec,
    motifs: &[Tensor],
    label: usize,
    rng: &mut Rng,
) -> (Tensor, MotifPlacement) {
    let (c, h, w, m) = (spec.channels, spec.height, spec.width, spec.motif_size);
    let part = spec.part_region().expect("validated");
    let keep_out = spec.patch_hull().expect("validated");
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let period = (w.max(h) as f64) / 2.0;
    let mut image = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5 * y as f64) / period;
                image[(ci * h + y) * w + x] =
                    spec.background_amplitude * (std::f64::consts::TAU * u + phase).sin();
            }
        }
    }
    let x = part.x_tl + rng.below(part.width() - m + 1);
    let y = part.y_tl + rng.below(part.height() - m + 1);
    stamp(&mut image, spec, &motifs[label], x, y, spec.motif_amplitude);

    let mut placed = vec![(x, y)];
    for _ in 0..spec.distractors {
        // rejection sampling of a spot no local patch can see
        for _ in 0..256 {
            let dx = rng.below(w - m + 1);
            let dy = rng.below(h - m + 1);
            let rect = PatchSpec::new(dx, dy, dx + m, dy + m);
            let clear = rect.x_br <= keep_out.x_tl
                || rect.x_tl >= keep_out.x_br
                || rect.y_br <= keep_out.y_tl
                || rect.y_tl >= keep_out.y_br;
            if clear && placed.iter().all(|&p| !overlaps(p, (dx, dy), m)) {
                let k = rng.below(spec.classes);
                stamp(&mut image, spec, &motifs[k], dx, dy, spec.motif_amplitude);
                placed.push((dx, dy));
                break;
            }
        }
    }
    if spec.noise_std > 0.0 {
        for v in &mut image {
            *v += spec.noise_std * rng.normal();
        }
    }
    (
        Tensor::from_parts(vec![1, c, h, w], image),
        MotifPlacement { x, y },
    )
}

pub type Annotated = Vec<(Sample, MotifPlacement)>;

/// Like [`generate`] but also reports where each motif was placed.
pub fn generate_annotated(spec: &SyntheticSpec) -> Result<(Annotated, Annotated)> {
    spec.validate()?;
    let motifs = spec.motifs();
    let patches = spec.patches()?;
    let root = Rng::new(spec.seed);
    let split = |name: &str, per_class: usize, stream: u64| -> Annotated {
        let mut rng = root.fork(stream);
        let mut labels: Vec<usize> = (0..spec.classes)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        rng.shuffle(&mut labels);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let (image, at) = render(spec, &motifs, label, &mut rng);
                (
                    Sample {
                        image_id: format!("{name}_{i:05}"),
                        image,
                        label,
                        patches: patches.clone(),
                    },
                    at,
                )
            })
            .collect()
    };
    Ok((
        split("train", spec.train_per_class, 1),
        split("test", spec.test_per_class, 2),
    ))
}

/// Deterministic `(train, test)` split with exact class balance.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, test) = generate_annotated(spec)?;
    let strip = |v: Annotated| v.into_iter().map(|(s, _)| s).collect();
    Ok((strip(train), strip(test)))
}

pub const MANIFEST: &str = "manifest.csv";
pub const PATCHES: &str = "patches.csv";
pub const TENSORS: &str = "tensors";
const MANIFEST_HEADER: &str = "image_id,label,file";

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(invalid!("image_id {id:?} must be [A-Za-z0-9_.-]+"))
    }
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let tdir = dir.join(TENSORS);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for s in samples {
        check_id(&s.image_id)?;
        let file = format!("{TENSORS}/{}.tnsr", s.image_id);
        tnsr::save(&s.image, &dir.join(&file))?;
        manifest.push_str(&format!("{},{},{}\n", s.image_id, s.label, file));
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let text = patches::format_patch_list(
        samples.iter().map(|s| (s.image_id.as_str(), s.patches.as_slice())),
    );
    let ppath = dir.join(PATCHES);
    fs::write(&ppath, text).map_err(|e| Error::io(&ppath, e))
}

/// Reads a dataset directory. Images without an entry in `patches.csv` (or
/// when the file is absent) get a single full-image patch.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::format(&mpath, format!("missing header {MANIFEST_HEADER:?}"))),
    }
    let ppath = dir.join(PATCHES);
    let mut patch_list = if ppath.exists() {
        patches::load_patch_list(&ppath, None)?
    } else {
        Default::default()
    };
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(&mpath, format!("line {}: {msg}", i + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("label {:?} is not an integer", fields[1])))?;
        let image = tnsr::load(&dir.join(fields[2]))?;
        if image.rank() != 4 || image.shape()[0] != 1 {
            return Err(Error::format(
                dir.join(fields[2]),
                format!("expected a [1×C×H×W] image, got {:?}", image.shape()),
            ));
        }
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let patches = match patch_list.remove(fields[0]) {
            Some(ps) => {
                for p in &ps {
                    if !p.is_valid_for(w, h) {
                        return Err(invalid!("image {}: patch {p} outside {w}×{h}", fields[0]));
                    }
                }
                ps
            }
            None => vec![PatchSpec::full(w, h)],
        };
        samples.push(Sample {
            image_id: fields[0].to_string(),
            image,
            label,
            patches,
        });
    }
    Ok(samples)
}
