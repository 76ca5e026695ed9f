//! Per-step Grad-CAM on the local stream, and PGM/CSV export.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{dim_err, invalid, Error, Result};
use crate::model::TwoStreamModel;
use crate::refiner::RefinerParams;
use crate::tensor::ops;
use crate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[h, w]`, values in `[0, 1]`.
    pub values: Tensor,
    /// 1-based time step.
    pub step: usize,
    pub class_id: usize,
    pub patch_id: String,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// `<image_id>_<patch_id>_t<t>_c<class>.pgm`
    pub fn file_name(&self, image_id: &str) -> String {
        format!(
            "{image_id}_{}_t{}_c{}.pgm",
            self.patch_id, self.step, self.class_id
        )
    }
}

/// Divides by the maximum; an all-zero (or all-negative) map stays zero.
pub fn normalize_max(raw: &Tensor) -> Tensor {
    let relu = raw.map(|v| v.max(0.0));
    let max = relu.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        relu.map(|v| v / max)
    } else {
        relu
    }
}

/// Grad-CAM from a feature map `[1, C, h, w]` and the score's gradient
/// w.r.t. it: channel weights are spatial means of the gradient.
pub fn cam_from_gradients(map: &Tensor, grad: &Tensor) -> Result<Tensor> {
    map.expect_rank(4, "grad-cam map")?;
    map.expect_same_shape(grad)?;
    if map.shape()[0] != 1 {
        return Err(dim_err!("grad-cam expects a single map, got batch {}", map.shape()[0]));
    }
    let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
    let area = h * w;
    let mut cam = vec![0.0; area];
    for ch in 0..c {
        let g = &grad.data()[ch * area..(ch + 1) * area];
        let weight = g.iter().sum::<f64>() / area as f64;
        let m = &map.data()[ch * area..(ch + 1) * area];
        for (o, v) in cam.iter_mut().zip(m) {
            *o += weight * v;
        }
    }
    Ok(normalize_max(&Tensor::from_parts(vec![h, w], cam)))
}

/// Heatmap of the class-`class_id` local-head logit computed from the
/// step-`t` refiner state alone.
pub fn grad_cam_step(
    model: &TwoStreamModel,
    patch: &Tensor,
    t: usize,
    class_id: usize,
    patch_id: &str,
) -> Result<Heatmap> {
    let cfg = &model.config;
    if !cfg.mode.uses_refiner() {
        return Err(invalid!("per-step saliency needs a model with a refiner"));
    }
    if t == 0 || t > cfg.time_steps {
        return Err(invalid!("time step {t} outside [1, {}]", cfg.time_steps));
    }
    if class_id >= cfg.classes {
        return Err(invalid!("class {class_id} outside [0, {})", cfg.classes));
    }
    let (map, _) = model.local_backbone.extract_map(patch)?;
    let (f, gap) = ops::gap(&map)?;
    let (hs, unroll) = model.refiner.unroll(&Tensor::vector(f.into_data()))?;
    let (_, head) = model.head(&hs[t - 1])?;

    let mut onehot = Tensor::zeros(&[1, cfg.classes]);
    onehot.data_mut()[class_id] = 1.0;
    let mut scratch = TwoStreamModel::zeros(cfg.clone())?;
    let dh = TwoStreamModel::head_backward(head, &onehot, &mut scratch)?;
    let mut dhs: Vec<Option<Tensor>> = vec![None; hs.len()];
    dhs[t - 1] = Some(dh);
    let mut rgrads = RefinerParams::zeros(
        model.refiner.input_size(),
        model.refiner.hidden_size(),
        model.refiner.layers.len(),
        model.refiner.time_steps,
    )?;
    let df = unroll.backward(&dhs, &model.refiner, &mut rgrads)?;
    let grad_map = gap.backward(&Tensor::from_parts(vec![1, df.len()], df.into_data()))?;
    Ok(Heatmap {
        values: cam_from_gradients(&map, &grad_map)?,
        step: t,
        class_id,
        patch_id: patch_id.to_string(),
    })
}

/// Heatmaps for steps `1..=T`.
pub fn grad_cam_sweep(
    model: &TwoStreamModel,
    patch: &Tensor,
    class_id: usize,
    patch_id: &str,
) -> Result<Vec<Heatmap>> {
    (1..=model.config.time_steps)
        .map(|t| grad_cam_step(model, patch, t, class_id, patch_id))
        .collect()
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Binary PGM bytes for a heatmap.
pub fn encode_pgm(hm: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", hm.width(), hm.height()).into_bytes();
    out.extend(hm.values.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_csv(hm: &Heatmap) -> String {
    let mut s = String::new();
    for row in hm.values.data().chunks_exact(hm.width()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes the PGM at `path` and the raw values next to it as `.csv`.
/// Returns the CSV path.
pub fn export_heatmap(hm: &Heatmap, path: &Path) -> Result<PathBuf> {
    fs::write(path, encode_pgm(hm)).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, encode_csv(hm)).map_err(|e| Error::io(&csv, e))?;
    Ok(csv)
}

/// Parses a binary PGM written by [`encode_pgm`] into `(width, height, bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("bad magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let payload = bytes.get(pos + 1..).unwrap_or(&[]);
    if payload.len() != w * h {
        return Err(format!("expected {} pixels, found {}", w * h, payload.len()));
    }
    Ok((w, h, payload.to_vec()))
}
