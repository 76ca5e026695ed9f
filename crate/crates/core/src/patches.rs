//! Patch boxes, the deterministic grid proposer, crop-and-resize, and the
//! external patch-list CSV (`image_id,x_tl,y_tl,x_br,y_br`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{dim_err, invalid, Error, Result};
use crate::{Rng, Tensor};

/// Pixel box with exclusive bottom-right corner; origin top-left, x grows
/// rightwards and y downwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchSpec {
    pub x_tl: usize,
    pub y_tl: usize,
    pub x_br: usize,
    pub y_br: usize,
}

impl PatchSpec {
    pub fn new(x_tl: usize, y_tl: usize, x_br: usize, y_br: usize) -> Self {
        Self {
            x_tl,
            y_tl,
            x_br,
            y_br,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> usize {
        self.x_br.saturating_sub(self.x_tl)
    }

    pub fn height(&self) -> usize {
        self.y_br.saturating_sub(self.y_tl)
    }

    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.x_tl < self.x_br && self.x_br <= width && self.y_tl < self.y_br && self.y_br <= height
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.is_valid_for(width, height) {
            Ok(())
        } else {
            Err(invalid!("patch {self} not inside a {width}×{height} image"))
        }
    }

    pub fn contains(&self, other: &PatchSpec) -> bool {
        self.x_tl <= other.x_tl
            && self.y_tl <= other.y_tl
            && other.x_br <= self.x_br
            && other.y_br <= self.y_br
    }
}

impl fmt::Display for PatchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[({}, {}), ({}, {})]",
            self.x_tl, self.y_tl, self.x_br, self.y_br
        )
    }
}

/// `n` patches of size `scale·W × scale·H` centred on a `√n × √n` grid and
/// clamped inside the image, in row-major grid order.
pub fn grid_patches(width: usize, height: usize, n: usize, scale: f64) -> Result<Vec<PatchSpec>> {
    let side = match n {
        1 => 1,
        4 => 2,
        9 => 3,
        _ => return Err(invalid!("grid patch count must be 1, 4 or 9, got {n}")),
    };
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(invalid!("grid patch scale must be in (0, 1], got {scale}"));
    }
    if width == 0 || height == 0 {
        return Err(invalid!("image extent must be positive, got {width}×{height}"));
    }
    let pw = ((scale * width as f64).round() as usize).clamp(1, width);
    let ph = ((scale * height as f64).round() as usize).clamp(1, height);
    let place = |i: usize, extent: usize, size: usize| -> usize {
        let centre = (i as f64 + 0.5) * extent as f64 / side as f64;
        let start = (centre - size as f64 / 2.0).round().max(0.0) as usize;
        start.min(extent - size)
    };
    let mut out = Vec::with_capacity(n);
    for gy in 0..side {
        for gx in 0..side {
            let x = place(gx, width, pw);
            let y = place(gy, height, ph);
            out.push(PatchSpec::new(x, y, x + pw, y + ph));
        }
    }
    Ok(out)
}

/// Crops `p` out of `[1×C×H×W]` and resizes to `out_h × out_w` with bilinear
/// interpolation on half-pixel centres. A crop already at the output size is
/// copied verbatim.
pub fn crop_resize(image: &Tensor, p: &PatchSpec, out_h: usize, out_w: usize) -> Result<Tensor> {
    image.expect_rank(4, "crop_resize")?;
    let s = image.shape();
    if s[0] != 1 {
        return Err(dim_err!("crop_resize expects a single image, got {s:?}"));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    p.validate(w, h)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("output size must be positive, got {out_h}×{out_w}"));
    }
    let (ch, cw) = (p.height(), p.width());
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    if ch == out_h && cw == out_w {
        for ci in 0..c {
            for y in p.y_tl..p.y_br {
                let row = (ci * h + y) * w;
                out.extend_from_slice(&src[row + p.x_tl..row + p.x_br]);
            }
        }
        return Ok(Tensor::from_parts(vec![1, c, out_h, out_w], out));
    }
    let source = |o: usize, crop: usize, n_out: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * crop as f64 / n_out as f64 - 0.5).clamp(0.0, (crop - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(crop - 1);
        (lo, hi, pos - lo as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|ox| source(ox, cw, out_w)).collect();
    for ci in 0..c {
        let at = |y: usize, x: usize| src[(ci * h + p.y_tl + y) * w + p.x_tl + x];
        for oy in 0..out_h {
            let (y0, y1, fy) = source(oy, ch, out_h);
            for &(x0, x1, fx) in &xs {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![1, c, out_h, out_w], out))
}

/// Uniform choice over a non-empty patch list.
pub fn select_patch(rng: &mut Rng, patches: &[PatchSpec]) -> Result<PatchSpec> {
    if patches.is_empty() {
        return Err(invalid!("cannot select from an empty patch list"));
    }
    Ok(patches[rng.below(patches.len())])
}

pub type PatchList = BTreeMap<String, Vec<PatchSpec>>;

fn parse_patch_line(line: &str, lineno: usize) -> Result<(String, PatchSpec)> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 5 fields, found {}", fields.len()),
        });
    }
    if fields[0].is_empty() {
        return Err(Error::Parse {
            line: lineno,
            msg: "empty image_id".into(),
        });
    }
    let mut coords = [0usize; 4];
    for (slot, raw) in coords.iter_mut().zip(&fields[1..]) {
        *slot = raw.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("coordinate {raw:?} is not a non-negative integer"),
        })?;
    }
    let [x_tl, y_tl, x_br, y_br] = coords;
    Ok((fields[0].to_string(), PatchSpec::new(x_tl, y_tl, x_br, y_br)))
}

/// Parses patch-list text. Boxes must be non-degenerate; when `bounds` is
/// given, they must also lie inside that `(width, height)`.
pub fn parse_patch_list(text: &str, bounds: Option<(usize, usize)>) -> Result<PatchList> {
    let mut map = PatchList::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, p) = parse_patch_line(line, i + 1)?;
        let (w, h) = bounds.unwrap_or((usize::MAX, usize::MAX));
        if !p.is_valid_for(w, h) {
            return Err(invalid!("image {id}: invalid patch {p} on line {}", i + 1));
        }
        map.entry(id).or_default().push(p);
    }
    Ok(map)
}

pub fn load_patch_list(path: &Path, bounds: Option<(usize, usize)>) -> Result<PatchList> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_patch_list(&text, bounds)
}

pub fn format_patch_list<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [PatchSpec])>) -> String {
    let mut s = String::new();
    for (id, patches) in entries {
        for p in patches {
            s.push_str(&format!("{id},{},{},{},{}\n", p.x_tl, p.y_tl, p.x_br, p.y_br));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_full_grid_patch() {
        assert_eq!(grid_patches(32, 24, 1, 1.0).unwrap(), vec![PatchSpec::full(32, 24)]);
    }

    #[test]
    fn quadrant_grid() {
        let ps = grid_patches(32, 32, 4, 0.5).unwrap();
        assert_eq!(
            ps,
            vec![
                PatchSpec::new(0, 0, 16, 16),
                PatchSpec::new(16, 0, 32, 16),
                PatchSpec::new(0, 16, 16, 32),
                PatchSpec::new(16, 16, 32, 32),
            ]
        );
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(grid_patches(32, 32, 2, 0.5).is_err());
        assert!(grid_patches(32, 32, 4, 0.0).is_err());
        assert!(grid_patches(32, 32, 4, 1.5).is_err());
    }

    #[test]
    fn grid_fuzz_respects_invariants() {
        let mut rng = Rng::new(17);
        for _ in 0..1000 {
            let w = 1 + rng.below(200);
            let h = 1 + rng.below(200);
            let n = [1, 4, 9][rng.below(3)];
            let scale = rng.uniform(1e-3, 1.0);
            for p in grid_patches(w, h, n, scale).unwrap() {
                assert!(p.is_valid_for(w, h), "{p} in {w}×{h}");
            }
        }
    }

    #[test]
    fn crop_identity_bit_exact() {
        let mut rng = Rng::new(2);
        let img = Tensor::uniform(&[1, 2, 7, 5], 3.0, &mut rng);
        let out = crop_resize(&img, &PatchSpec::full(5, 7), 7, 5).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn bilinear_centre_of_two_by_two() {
        let img = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = crop_resize(&img, &PatchSpec::full(2, 2), 1, 1).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::full(&[1, 1, 9, 11], 0.375);
        for (p, oh, ow) in [
            (PatchSpec::new(1, 2, 6, 7), 13, 3),
            (PatchSpec::new(0, 0, 11, 9), 4, 4),
            (PatchSpec::new(3, 3, 4, 4), 5, 8),
        ] {
            let out = crop_resize(&img, &p, oh, ow).unwrap();
            assert_eq!(out.shape(), &[1, 1, oh, ow]);
            assert!(out.data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
        }
    }

    #[test]
    fn crop_rejects_out_of_bounds() {
        let img = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(
            crop_resize(&img, &PatchSpec::new(0, 0, 5, 4), 2, 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn patch_list_parsing() {
        assert!(parse_patch_list("", None).unwrap().is_empty());
        let m = parse_patch_list("img7,2,3,10,12\nimg7,0,0,1,1\nimg2,1,1,2,2\n", None).unwrap();
        assert_eq!(m["img7"], vec![PatchSpec::new(2, 3, 10, 12), PatchSpec::new(0, 0, 1, 1)]);
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn patch_list_errors() {
        match parse_patch_list("a,1,1,2,2\nb,1,2,3\n", None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_patch_list("img9,5,0,5,4\n", None) {
            Err(Error::Validation(msg)) => assert!(msg.contains("img9"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(parse_patch_list("a,0,0,40,4\n", Some((32, 32))).is_err());
        assert!(parse_patch_list("a,-1,0,4,4\n", None).is_err());
    }

    #[test]
    fn patch_list_text_round_trip() {
        let ps = grid_patches(20, 20, 9, 0.4).unwrap();
        let text = format_patch_list([("x", &ps[..])]);
        assert_eq!(parse_patch_list(&text, Some((20, 20))).unwrap()["x"], ps);
    }

    #[test]
    fn selection() {
        let one = [PatchSpec::full(4, 4)];
        assert_eq!(select_patch(&mut Rng::new(0), &one).unwrap(), one[0]);
        assert!(select_patch(&mut Rng::new(0), &[]).is_err());
        let four = grid_patches(8, 8, 4, 0.5).unwrap();
        let draw = |seed| {
            let mut r = Rng::new(seed);
            (0..20).map(|_| select_patch(&mut r, &four).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn selection_frequencies_within_three_sigma() {
        let four = grid_patches(8, 8, 4, 0.5).unwrap();
        let mut rng = Rng::new(1234);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let p = select_patch(&mut rng, &four).unwrap();
            counts[four.iter().position(|q| *q == p).unwrap()] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 2500.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }
}
