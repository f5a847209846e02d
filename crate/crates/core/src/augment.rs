//! View generation with exact tracking of where every view pixel came from.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synth::SourceImage;

pub const MIN_CROP_AREA: f64 = 0.5;
pub const FLIP_PROBABILITY: f64 = 0.5;
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.25;

/// Axis-aligned crop in source pixel-center coordinates. View pixel `(r, c)`
/// of an `H × W` output samples the source at
/// `(top + r·height/H, left + c·width/W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub crop: Crop,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    /// Gaussian blur standard deviation in pixels; 0 disables.
    pub blur_sigma: f64,
    /// `(mean, std)` standardization applied last.
    pub normalize: Option<(f64, f64)>,
}

impl TransformSpec {
    pub fn identity(size: usize) -> Self {
        let s = size as f64;
        TransformSpec {
            crop: Crop {
                top: 0.0,
                left: 0.0,
                height: s,
                width: s,
            },
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: 0.0,
            normalize: None,
        }
    }

    pub fn crop_area_fraction(&self, size: usize) -> f64 {
        self.crop.height * self.crop.width / (size * size) as f64
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.crop;
        write!(
            f,
            "crop:{},{},{},{} flip:{} jitter:{},{} blur:{}",
            c.top,
            c.left,
            c.height,
            c.width,
            u8::from(self.flip),
            self.brightness,
            self.contrast,
            self.blur_sigma
        )?;
        match self.normalize {
            Some((m, s)) => write!(f, " norm:{m},{s}"),
            None => write!(f, " norm:none"),
        }
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |d: &str| Error::format("transform spec", format!("{d} in `{line}`"));
        let mut spec = TransformSpec::identity(0);
        let mut seen = 0;
        for token in line.split_whitespace() {
            let (op, args) = token.split_once(':').ok_or_else(|| bad("missing `:`"))?;
            let nums = || -> Result<Vec<f64>> {
                args.split(',')
                    .map(|a| a.parse::<f64>().map_err(|_| bad(a)))
                    .collect()
            };
            match op {
                "crop" => {
                    let v = nums()?;
                    if v.len() != 4 {
                        return Err(bad("crop needs 4 values"));
                    }
                    spec.crop = Crop {
                        top: v[0],
                        left: v[1],
                        height: v[2],
                        width: v[3],
                    };
                }
                "flip" => {
                    spec.flip = match args {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad("flip must be 0 or 1")),
                    }
                }
                "jitter" => {
                    let v = nums()?;
                    if v.len() != 2 {
                        return Err(bad("jitter needs 2 values"));
                    }
                    spec.brightness = v[0];
                    spec.contrast = v[1];
                }
                "blur" => {
                    let v = nums()?;
                    if v.len() != 1 {
                        return Err(bad("blur needs 1 value"));
                    }
                    spec.blur_sigma = v[0];
                }
                "norm" => {
                    spec.normalize = if args == "none" {
                        None
                    } else {
                        let v = nums()?;
                        if v.len() != 2 {
                            return Err(bad("norm needs 2 values"));
                        }
                        Some((v[0], v[1]))
                    };
                }
                other => return Err(bad(other)),
            }
            seen += 1;
        }
        if seen != 5 {
            return Err(bad("expected crop, flip, jitter, blur and norm"));
        }
        Ok(spec)
    }
}

/// Per-pixel source coordinates `(row, col)`; `None` marks pixels with no source.
#[derive(Debug, Clone, PartialEq)]
pub struct PosMap {
    rows: usize,
    cols: usize,
    coords: Vec<Option<[f64; 2]>>,
}

impl PosMap {
    pub fn identity(rows: usize, cols: usize) -> Self {
        let coords = (0..rows * cols)
            .map(|k| Some([(k / cols) as f64, (k % cols) as f64]))
            .collect();
        PosMap { rows, cols, coords }
    }

    pub fn from_coords(rows: usize, cols: usize, coords: Vec<Option<[f64; 2]>>) -> Result<Self> {
        if coords.len() != rows * cols {
            return Err(Error::contract("position map length does not match extent"));
        }
        Ok(PosMap { rows, cols, coords })
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> Option<[f64; 2]> {
        self.coords[r * self.cols + c]
    }

    pub fn coords(&self) -> &[Option<[f64; 2]>] {
        &self.coords
    }

    /// Bilinear interpolation at a real coordinate; sentinel when outside the
    /// map or when any contributing neighbour is a sentinel.
    fn sample(&self, r: f64, c: f64) -> Option<[f64; 2]> {
        let mut acc = [0.0; 2];
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (rr, cc, w) in bilinear_taps(r, c, self.rows, self.cols)? {
            let p = self.get(rr, cc)?;
            for k in 0..2 {
                acc[k] += w * p[k];
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        // Interpolation stays inside the hull of its taps.
        Some([acc[0].clamp(lo[0], hi[0]), acc[1].clamp(lo[1], hi[1])])
    }

    /// Averages valid coordinates inside each `factor × factor` cell.
    pub fn downsample(&self, factor: usize) -> PosMap {
        let (rows, cols) = (self.rows / factor, self.cols / factor);
        let mut coords = Vec::with_capacity(rows * cols);
        for br in 0..rows {
            for bc in 0..cols {
                let mut acc = [0.0; 2];
                let mut n = 0usize;
                for r in br * factor..(br + 1) * factor {
                    for c in bc * factor..(bc + 1) * factor {
                        if let Some(p) = self.get(r, c) {
                            acc[0] += p[0];
                            acc[1] += p[1];
                            n += 1;
                        }
                    }
                }
                coords.push((n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64]));
            }
        }
        PosMap { rows, cols, coords }
    }
}

/// Neighbour taps with non-zero weight; `None` when the point lies outside
/// `[0, rows-1] × [0, cols-1]`.
fn bilinear_taps(r: f64, c: f64, rows: usize, cols: usize) -> Option<Vec<(usize, usize, f64)>> {
    const SLACK: f64 = 1e-9;
    let (rmax, cmax) = ((rows - 1) as f64, (cols - 1) as f64);
    if !(r >= -SLACK && r <= rmax + SLACK && c >= -SLACK && c <= cmax + SLACK) {
        return None;
    }
    let r = r.clamp(0.0, rmax);
    let c = c.clamp(0.0, cmax);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let mut taps = Vec::with_capacity(4);
    for (rr, wr) in [(r0, 1.0 - fr), (r0 + 1, fr)] {
        for (cc, wc) in [(c0, 1.0 - fc), (c0 + 1, fc)] {
            let w = wr * wc;
            if w > 0.0 {
                taps.push((rr, cc, w));
            }
        }
    }
    Some(taps)
}

fn sample_pixel(img: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (rows, cols) = img.dim();
    match bilinear_taps(r, c, rows, cols) {
        Some(taps) => taps.iter().map(|&(rr, cc, w)| w * img[[rr, cc]]).sum(),
        None => 0.0,
    }
}

fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (rows, cols) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            tmp[[r, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * img[[r, clamp(c as isize + k as isize - radius, cols)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            out[[r, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[[clamp(r as isize + k as isize - radius, rows), c]])
                .sum();
        }
    }
    out
}

/// Draws one transform from the family: crop covering 50–100% of the area
/// (aspect ratio in [3/4, 4/3]) rescaled to the canvas, horizontal flip with
/// probability 0.5, brightness/contrast jitter, blur with probability 0.5 and
/// standardization.
pub fn sample_transform(rng: &mut Rng, size: usize) -> TransformSpec {
    let s = size as f64;
    let area: f64 = rng.random_range(MIN_CROP_AREA..=1.0);
    let log_ratio: f64 = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let (mut height, mut width) = ((area * ratio).sqrt() * s, (area / ratio).sqrt() * s);
    if height > s {
        height = s;
        width = area * s;
    }
    if width > s {
        width = s;
        height = area * s;
    }
    // Keep the last sampled coordinate, top + (H-1)·height/H, on the canvas.
    let max_top = (s - 1.0 - (s - 1.0) * height / s).max(0.0);
    let max_left = (s - 1.0 - (s - 1.0) * width / s).max(0.0);
    let top = rng.random_range(0.0..=max_top);
    let left = rng.random_range(0.0..=max_left);
    let flip = rng.random_bool(FLIP_PROBABILITY);
    let brightness = rng.random_range(-0.05..=0.05);
    let contrast = rng.random_range(0.9..=1.1);
    let blur_sigma = if rng.random_bool(0.5) {
        rng.random_range(0.3..=1.0)
    } else {
        0.0
    };
    TransformSpec {
        crop: Crop {
            top,
            left,
            height,
            width,
        },
        flip,
        brightness,
        contrast,
        blur_sigma,
        normalize: Some((NORM_MEAN, NORM_STD)),
    }
}

/// Applies `spec` to an image whose pixels already carry provenance `pos`,
/// composing the geometric part with the incoming map.
pub fn apply_tracked(
    pixels: &Array2<f64>,
    pos: &PosMap,
    spec: &TransformSpec,
) -> (Array2<f64>, PosMap) {
    let (rows, cols) = pixels.dim();
    let crop = &spec.crop;
    let (sy, sx) = (crop.height / rows as f64, crop.width / cols as f64);
    let mut view = Array2::zeros((rows, cols));
    let mut coords = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cc = if spec.flip { cols - 1 - c } else { c };
            let src_r = (crop.top + r as f64 * sy).clamp(0.0, (rows - 1) as f64);
            let src_c = (crop.left + cc as f64 * sx).clamp(0.0, (cols - 1) as f64);
            view[[r, c]] = sample_pixel(pixels, src_r, src_c);
            coords.push(pos.sample(src_r, src_c));
        }
    }
    let shift = 0.5 * (1.0 - spec.contrast) + spec.brightness;
    view.mapv_inplace(|v| (v * spec.contrast + shift).clamp(0.0, 1.0));
    if spec.blur_sigma > 0.0 {
        view = gaussian_blur(&view, spec.blur_sigma);
    }
    if let Some((mean, std)) = spec.normalize {
        view.mapv_inplace(|v| (v - mean) / std);
    }
    (view, PosMap { rows, cols, coords })
}

pub fn apply(image: &SourceImage, spec: &TransformSpec) -> (Array2<f64>, PosMap) {
    let (rows, cols) = image.pixels.dim();
    apply_tracked(&image.pixels, &PosMap::identity(rows, cols), spec)
}

#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_s: Array2<f64>,
    pub view_t: Array2<f64>,
    pub pos_s: PosMap,
    pub pos_t: PosMap,
    pub spec_s: TransformSpec,
    pub spec_t: TransformSpec,
    pub source_index: usize,
}

/// One pair of independently transformed views per batch image, in batch order.
pub fn make_view_pairs(batch: &[&SourceImage], rng: &mut Rng) -> Result<Vec<ViewPair>> {
    if batch.is_empty() {
        return Err(Error::param("cannot build views for an empty batch"));
    }
    let specs: Vec<(TransformSpec, TransformSpec)> = batch
        .iter()
        .map(|img| {
            let s = sample_transform(rng, img.size());
            let t = sample_transform(rng, img.size());
            (s, t)
        })
        .collect();
    Ok(batch
        .par_iter()
        .zip(specs.par_iter())
        .enumerate()
        .map(|(i, (img, (spec_s, spec_t)))| {
            let (view_s, pos_s) = apply(img, spec_s);
            let (view_t, pos_t) = apply(img, spec_t);
            ViewPair {
                view_s,
                view_t,
                pos_s,
                pos_t,
                spec_s: *spec_s,
                spec_t: *spec_t,
                source_index: i,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::generate_corpus;

    const N: usize = 64;

    fn image() -> SourceImage {
        generate_corpus(5, 1, 0.0).unwrap().images.remove(0)
    }

    fn in_bounds(pos: &PosMap) -> bool {
        pos.coords().iter().flatten().all(|p| {
            (0.0..=(N - 1) as f64).contains(&p[0]) && (0.0..=(N - 1) as f64).contains(&p[1])
        })
    }

    #[test]
    fn identity_is_exact() {
        let img = image();
        let (view, pos) = apply(&img, &TransformSpec::identity(N));
        assert_eq!(view, img.pixels);
        assert_eq!(pos, PosMap::identity(N, N));
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = image();
        let spec = TransformSpec {
            flip: true,
            ..TransformSpec::identity(N)
        };
        let (view, pos) = apply(&img, &spec);
        for r in 0..N {
            for c in 0..N {
                assert_eq!(pos.get(r, c), Some([r as f64, (N - 1 - c) as f64]));
                assert_eq!(view[[r, c]], img.pixels[[r, N - 1 - c]]);
            }
        }
        // Flip is its own inverse: applying it to the flipped map restores identity.
        let (_, back) = apply_tracked(&view, &pos, &spec);
        assert_eq!(back, PosMap::identity(N, N));
    }

    #[test]
    fn quadrant_crop_upscale() {
        let spec = TransformSpec {
            crop: Crop {
                top: 0.0,
                left: 0.0,
                height: 32.0,
                width: 32.0,
            },
            ..TransformSpec::identity(N)
        };
        let (_, pos) = apply(&image(), &spec);
        for r in 0..N {
            for c in 0..N {
                let p = pos.get(r, c).unwrap();
                assert!((p[0] - r as f64 / 2.0).abs() < 1e-12);
                assert!((p[1] - c as f64 / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_specs() {
        let mut r = rng::stream(3, rng::AUGMENT);
        let mut flips = 0;
        for _ in 0..10_000 {
            let s = sample_transform(&mut r, N);
            let a = s.crop_area_fraction(N);
            assert!((MIN_CROP_AREA - 1e-12..=1.0 + 1e-12).contains(&a), "area {a}");
            flips += usize::from(s.flip);
        }
        let rate = flips as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.03, "flip rate {rate}");
        let a = sample_transform(&mut rng::stream(9, rng::AUGMENT), N);
        let b = sample_transform(&mut rng::stream(9, rng::AUGMENT), N);
        assert_eq!(a, b);
    }

    #[test]
    fn spec_line_round_trip() {
        let mut r = rng::stream(4, rng::AUGMENT);
        for _ in 0..50 {
            let s = sample_transform(&mut r, N);
            let line = s.to_string();
            assert!(!line.contains('\n'));
            assert_eq!(line.parse::<TransformSpec>().unwrap(), s);
        }
        assert_eq!(
            TransformSpec::identity(N).to_string().parse::<TransformSpec>().unwrap(),
            TransformSpec::identity(N)
        );
        assert!("crop:1,2 flip:0".parse::<TransformSpec>().is_err());
    }

    #[test]
    fn composition_matches_affine_maps() {
        let mut r = rng::stream(8, rng::AUGMENT);
        let img = image();
        for _ in 0..20 {
            let a = sample_transform(&mut r, N);
            let b = sample_transform(&mut r, N);
            let (va, pa) = apply(&img, &a);
            let (_, pab) = apply_tracked(&va, &pa, &b);
            let map = |s: &TransformSpec, r: f64, c: f64| {
                let c = if s.flip { (N - 1) as f64 - c } else { c };
                [
                    s.crop.top + r * s.crop.height / N as f64,
                    s.crop.left + c * s.crop.width / N as f64,
                ]
            };
            for rr in 0..N {
                for cc in 0..N {
                    let inner = map(&b, rr as f64, cc as f64);
                    let expect = map(&a, inner[0], inner[1]);
                    let got = pab.get(rr, cc).unwrap();
                    assert!((got[0] - expect[0]).abs() < 1e-9);
                    assert!((got[1] - expect[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn view_pairs() {
        let corpus = generate_corpus(2, 100, 0.0).unwrap();
        let batch: Vec<&SourceImage> = corpus.images.iter().collect();
        let pairs = make_view_pairs(&batch, &mut rng::stream(2, rng::AUGMENT)).unwrap();
        assert_eq!(pairs.len(), 100);
        let distinct = pairs.iter().filter(|p| p.view_s != p.view_t).count();
        assert_eq!(distinct, 100);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.source_index, i);
            assert_eq!(p.pos_s.dim(), p.view_s.dim());
            assert!(in_bounds(&p.pos_s) && in_bounds(&p.pos_t));
            assert!(p.pos_s.coords().iter().all(Option::is_some));
        }
        assert!(make_view_pairs(&[], &mut rng::stream(2, rng::AUGMENT)).is_err());
    }

    #[test]
    fn downsample_averages_cells() {
        let pos = PosMap::identity(N, N).downsample(8);
        assert_eq!(pos.dim(), (8, 8));
        assert_eq!(pos.get(0, 0), Some([3.5, 3.5]));
        assert_eq!(pos.get(7, 1), Some([59.5, 11.5]));
        let mut coords = vec![None; 4];
        coords[3] = Some([1.0, 1.0]);
        let sparse = PosMap::from_coords(2, 2, coords).unwrap().downsample(2);
        assert_eq!(sparse.get(0, 0), Some([1.0, 1.0]));
        let empty = PosMap::from_coords(2, 2, vec![None; 4]).unwrap().downsample(2);
        assert_eq!(empty.get(0, 0), None);
    }
}
