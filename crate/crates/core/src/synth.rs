//! Seeded synthetic grayscale corpus with controllable near-duplicates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const CANVAS: usize = 64;

/// Sub-pixel displacement applied when re-rendering a duplicate.
pub const DUP_JITTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Ring,
    Bar,
    Cross,
    Blob,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Disk,
        ShapeFamily::Ring,
        ShapeFamily::Bar,
        ShapeFamily::Cross,
        ShapeFamily::Blob,
    ];

    pub fn tag(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub pixels: Array2<f64>,
    pub class_tag: u32,
    pub dup_group: Option<u32>,
}

impl SourceImage {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub images: Vec<SourceImage>,
    pub seed: u64,
    pub dup_fraction: f64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Members of every duplicate group, keyed by group id order.
    pub fn dup_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, img) in self.images.iter().enumerate() {
            if let Some(g) = img.dup_group {
                let g = g as usize;
                if groups.len() <= g {
                    groups.resize(g + 1, Vec::new());
                }
                groups[g].push(i);
            }
        }
        groups
    }
}

/// Everything needed to render one image deterministically.
#[derive(Debug, Clone)]
struct ShapeParams {
    family: ShapeFamily,
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
    fg: f64,
    bg: f64,
    tex_freq: f64,
    tex_angle: f64,
    tex_amp: f64,
    tex_phase: f64,
    harmonics: [(f64, f64); 3],
    noise_seed: u64,
}

impl ShapeParams {
    fn draw(rng: &mut Rng) -> Self {
        let family = ShapeFamily::ALL[rng.random_range(0..ShapeFamily::ALL.len())];
        let mut harmonics = [(0.0, 0.0); 3];
        for h in &mut harmonics {
            *h = (rng.random_range(0.05..0.2), rng.random_range(0.0..std::f64::consts::TAU));
        }
        ShapeParams {
            family,
            cy: rng.random_range(20.0..44.0),
            cx: rng.random_range(20.0..44.0),
            radius: rng.random_range(7.0..16.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            fg: rng.random_range(0.55..0.95),
            bg: rng.random_range(0.05..0.4),
            tex_freq: rng.random_range(0.08..0.45),
            tex_angle: rng.random_range(0.0..std::f64::consts::PI),
            tex_amp: rng.random_range(0.1..0.25),
            tex_phase: rng.random_range(0.0..std::f64::consts::TAU),
            harmonics,
            noise_seed: rng.random(),
        }
    }

    /// Signed distance (pixels) from `(y, x)` to the shape boundary, negative inside.
    fn signed_distance(&self, y: f64, x: f64, dy: f64, dx: f64) -> f64 {
        let py = y - (self.cy + dy);
        let px = x - (self.cx + dx);
        let r = self.radius;
        let (s, c) = self.angle.sin_cos();
        let u = c * px + s * py;
        let v = -s * px + c * py;
        let rect = |hu: f64, hv: f64, u: f64, v: f64| {
            let qu = u.abs() - hu;
            let qv = v.abs() - hv;
            let outside = (qu.max(0.0).powi(2) + qv.max(0.0).powi(2)).sqrt();
            outside + qu.max(qv).min(0.0)
        };
        match self.family {
            ShapeFamily::Disk => (px * px + py * py).sqrt() - r,
            ShapeFamily::Ring => ((px * px + py * py).sqrt() - r).abs() - 0.3 * r,
            ShapeFamily::Bar => rect(r, 0.35 * r, u, v),
            ShapeFamily::Cross => rect(r, 0.25 * r, u, v).min(rect(0.25 * r, r, u, v)),
            ShapeFamily::Blob => {
                let theta = py.atan2(px);
                let scale: f64 = 1.0
                    + self
                        .harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, phi))| a * ((k as f64 + 2.0) * theta + phi).cos())
                        .sum::<f64>();
                (px * px + py * py).sqrt() - r * scale
            }
        }
    }

    fn render(&self, size: usize, dy: f64, dx: f64) -> Array2<f64> {
        let mut noise = rng::indexed_stream(self.noise_seed, "pixel-noise", 0);
        let (ts, tc) = self.tex_angle.sin_cos();
        let mut out = Array2::zeros((size, size));
        for y in 0..size {
            for x in 0..size {
                let (yf, xf) = (y as f64, x as f64);
                let coverage = (0.5 - self.signed_distance(yf, xf, dy, dx)).clamp(0.0, 1.0);
                let tex = self.tex_amp
                    * (self.tex_freq * (tc * xf + ts * yf) * std::f64::consts::TAU + self.tex_phase)
                        .sin();
                let grain: f64 = noise.random_range(-0.02..0.02);
                let value = self.bg + coverage * (self.fg - self.bg) + tex + grain;
                out[[y, x]] = value.clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Generates `count` images; about `dup_fraction · count` of them belong to
/// near-duplicate pairs rendered from the same parameters with a half-pixel
/// shape displacement.
pub fn generate_corpus(seed: u64, count: usize, dup_fraction: f64) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::param("corpus count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&dup_fraction) {
        return Err(Error::param(format!(
            "dup_fraction {dup_fraction} outside [0, 1]"
        )));
    }
    let dup_images = (dup_fraction * count as f64).round() as usize;
    let pairs = dup_images.min(count) / 2;
    let singles = count - 2 * pairs;

    // Unit u < pairs is a duplicate pair; the rest are singletons.
    let mut units: Vec<usize> = (0..pairs + singles).collect();
    units.shuffle(&mut rng::stream(seed, rng::CORPUS));

    let mut images = Vec::with_capacity(count);
    let mut next_group = 0u32;
    for unit in units {
        let mut unit_rng = rng::indexed_stream(seed, rng::CORPUS, unit as u64);
        let params = ShapeParams::draw(&mut unit_rng);
        let class_tag = params.family.tag();
        if unit < pairs {
            let phi: f64 = unit_rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (DUP_JITTER * phi.sin(), DUP_JITTER * phi.cos());
            let group = Some(next_group);
            next_group += 1;
            images.push(SourceImage {
                pixels: params.render(CANVAS, 0.0, 0.0),
                class_tag,
                dup_group: group,
            });
            images.push(SourceImage {
                pixels: params.render(CANVAS, dy, dx),
                class_tag,
                dup_group: group,
            });
        } else {
            images.push(SourceImage {
                pixels: params.render(CANVAS, 0.0, 0.0),
                class_tag,
                dup_group: None,
            });
        }
    }
    Ok(Corpus {
        images,
        seed,
        dup_fraction,
    })
}

/// Draws `batch_size` distinct indices from `pool` without replacement. The
/// returned order is the canonical vertex order for both graphs.
pub fn sample_indices(pool: &[usize], rng: &mut Rng, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size > pool.len() {
        return Err(Error::param(format!(
            "batch size {batch_size} exceeds pool of {}",
            pool.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, pool.len(), batch_size)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

pub fn sample_batch<'a>(
    corpus: &'a Corpus,
    rng: &mut Rng,
    batch_size: usize,
) -> Result<Vec<&'a SourceImage>> {
    let pool: Vec<usize> = (0..corpus.len()).collect();
    Ok(sample_indices(&pool, rng, batch_size)?
        .into_iter()
        .map(|i| &corpus.images[i])
        .collect())
}

fn pgm_bytes(pixels: &Array2<f64>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn parse_pgm(bytes: &[u8]) -> Result<Array2<f64>> {
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format("pgm", format!("bad magic {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format("pgm", format!("bad header field {s}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("pgm", "only 8-bit rasters are supported"));
    }
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::format("pgm", "truncated raster"))?;
    let data = raster.iter().map(|&b| f64::from(b) / maxval as f64).collect();
    Array2::from_shape_vec((h, w), data).map_err(|e| Error::format("pgm", e.to_string()))
}

/// Writes `NNNNN.pgm` per image plus `manifest.txt` with `index class_tag dup_group`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, img) in corpus.images.iter().enumerate() {
        fs::write(dir.join(format!("{i:05}.pgm")), pgm_bytes(&img.pixels))?;
        let group = img
            .dup_group
            .map_or_else(|| "-".to_string(), |g| g.to_string());
        writeln!(manifest, "{i} {} {group}", img.class_tag).expect("writing to a String");
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads a directory produced by [`write_corpus`]. Pixels come back quantized to 8 bits.
pub fn read_corpus(dir: &Path, seed: u64) -> Result<Corpus> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut images = Vec::new();
    for (line_no, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format("manifest", format!("line {}: `{line}`", line_no + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let index: usize = parts[0].parse().map_err(|_| bad())?;
        let class_tag: u32 = parts[1].parse().map_err(|_| bad())?;
        let dup_group = match parts[2] {
            "-" => None,
            g => Some(g.parse().map_err(|_| bad())?),
        };
        let pixels = parse_pgm(&fs::read(dir.join(format!("{index:05}.pgm")))?)?;
        images.push(SourceImage {
            pixels,
            class_tag,
            dup_group,
        });
    }
    if images.is_empty() {
        return Err(Error::format("manifest", "no images listed"));
    }
    let dups = images.iter().filter(|i| i.dup_group.is_some()).count();
    let dup_fraction = dups as f64 / images.len() as f64;
    Ok(Corpus {
        images,
        seed,
        dup_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn zero_duplicates() {
        let c = generate_corpus(7, 4, 0.0).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.images.iter().all(|i| i.dup_group.is_none()));
        for img in &c.images {
            assert_eq!(img.pixels.dim(), (CANVAS, CANVAS));
            assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn duplicate_fraction_and_closeness() {
        let c = generate_corpus(7, 100, 0.25).unwrap();
        let dups = c.images.iter().filter(|i| i.dup_group.is_some()).count();
        assert!((dups as i64 - 25).abs() <= 1, "{dups} duplicates");
        for group in c.dup_groups() {
            assert_eq!(group.len(), 2);
            let (a, b) = (&c.images[group[0]], &c.images[group[1]]);
            assert_eq!(a.class_tag, b.class_tag);
            let d = mean_abs_diff(&a.pixels, &b.pixels);
            assert!(d > 0.0 && d < 0.05, "mean abs diff {d}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_corpus(7, 12, 0.5).unwrap(),
            generate_corpus(7, 12, 0.5).unwrap()
        );
        assert_ne!(
            generate_corpus(7, 3, 0.0).unwrap().images[0].pixels,
            generate_corpus(8, 3, 0.0).unwrap().images[0].pixels
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(generate_corpus(1, 4, 1.5), Err(Error::Parameter(_))));
        assert!(matches!(generate_corpus(1, 0, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn batches() {
        let c = generate_corpus(3, 16, 0.0).unwrap();
        let mut r1 = rng::stream(1, rng::BATCH);
        let full = sample_batch(&c, &mut r1, 16).unwrap();
        let mut seen: Vec<_> = full
            .iter()
            .map(|img| c.images.iter().position(|x| std::ptr::eq(x, *img)).unwrap())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());

        let pool: Vec<usize> = (0..16).collect();
        let a = sample_indices(&pool, &mut rng::stream(5, rng::BATCH), 8).unwrap();
        let b = sample_indices(&pool, &mut rng::stream(5, rng::BATCH), 8).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_indices(&pool, &mut r1, 17),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn pgm_round_trip() {
        let c = generate_corpus(11, 3, 0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&c, dir.path()).unwrap();
        let back = read_corpus(dir.path(), 11).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in c.images.iter().zip(&back.images) {
            assert_eq!(a.class_tag, b.class_tag);
            assert_eq!(a.dup_group, b.dup_group);
            assert!(mean_abs_diff(&a.pixels, &b.pixels) < 1.0 / 255.0);
        }
    }
}
