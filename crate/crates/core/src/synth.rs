//! Procedural image datasets for running the pipeline without external
//! downloads.
//!
//! `Shapes` draws one of ten anti-aliased shapes over a textured colour
//! gradient (3×32×32). `Glyphs` draws seven-segment digits in grayscale,
//! channel-tripled to 3×32×32. Each sample is a function of `(seed, index)`
//! only, so `generate(kind, n, seed)` is a prefix of any longer run.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::numerics::{Shape4, Tensor4};

pub const SIZE: usize = 32;
pub const NUM_CLASSES: usize = 10;
/// Standard deviation of the per-pixel sensor noise.
const PIXEL_NOISE: f64 = 0.006;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Shapes,
    Glyphs,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Shapes => "shapes",
            SynthKind::Glyphs => "glyphs",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shapes" => Ok(SynthKind::Shapes),
            "glyphs" => Ok(SynthKind::Glyphs),
            _ => Err(Error::InvalidArgument(format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

/// `n` samples with balanced labels (`index % 10`).
pub fn generate(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    generate_range(kind, 0, n, seed)
}

/// Samples `start..start + n` of the stream for `seed`.
pub fn generate_range(kind: SynthKind, start: usize, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        bail!(InvalidArgument, "synthetic dataset needs at least one sample");
    }
    let item = 3 * SIZE * SIZE;
    let mut pixels = Vec::with_capacity(n * item);
    let mut labels = Vec::with_capacity(n);
    for index in start..start + n {
        let label = index % NUM_CLASSES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let img = match kind {
            SynthKind::Shapes => shape_image(label, &mut rng),
            SynthKind::Glyphs => glyph_image(label, &mut rng),
        };
        pixels.extend(img.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0));
        labels.push(label);
    }
    let images = Tensor4::new(Shape4::new(n, 3, SIZE, SIZE), pixels)?;
    Dataset::new(kind.name(), images, labels, NUM_CLASSES)
}

fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn sd_box(u: f64, v: f64, a: f64, b: f64) -> f64 {
    let (qx, qy) = (u.abs() - a, v.abs() - b);
    qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0)
}

fn sd_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (pax, pay) = (p.0 - a.0, p.1 - a.1);
    let (bax, bay) = (b.0 - a.0, b.1 - a.1);
    let h = ((pax * bax + pay * bay) / (bax * bax + bay * bay)).clamp(0.0, 1.0);
    (pax - bax * h).hypot(pay - bay * h)
}

/// Signed distance to shape `label` of size `r`, in the shape's own frame
/// (`v` grows downwards).
fn shape_sdf(label: usize, u: f64, v: f64, r: f64) -> f64 {
    match label {
        0 => u.hypot(v) - r,
        1 => sd_box(u, v, 0.8 * r, 0.8 * r),
        2 => {
            // Edges with outward normals pointing down, up-right and up-left.
            let rho = 0.5 * r;
            [(0.0, 1.0), (0.866_025_4, -0.5), (-0.866_025_4, -0.5)]
                .iter()
                .map(|(nx, ny)| nx * u + ny * v)
                .fold(f64::MIN, f64::max)
                - rho
        }
        3 => (u.hypot(v) - 0.75 * r).abs() - 0.2 * r,
        4 => sd_box(u, v, r, 0.25 * r).min(sd_box(u, v, 0.25 * r, r)),
        5 => {
            let (a, b) = ((u + v) * FRAC_1_SQRT_2, (v - u) * FRAC_1_SQRT_2);
            sd_box(a, b, r, 0.25 * r).min(sd_box(a, b, 0.25 * r, r))
        }
        6 => (u.abs() + v.abs()) * FRAC_1_SQRT_2 - 0.7 * r,
        7 => sd_box(u, v, r, 0.3 * r),
        8 => sd_box(u, v, 0.3 * r, r),
        _ => ((u - 0.55 * r).hypot(v) - 0.4 * r).min((u + 0.55 * r).hypot(v) - 0.4 * r),
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Smooth field of a few low-frequency plane waves, amplitude ≲ 0.1.
struct Texture(Vec<(f64, f64, f64, f64)>);

impl Texture {
    fn new(rng: &mut ChaCha8Rng, waves: usize, max_amp: f64) -> Self {
        Texture(
            (0..waves)
                .map(|_| {
                    let dir = rng.random_range(0.0..2.0 * PI);
                    let freq = rng.random_range(0.1..0.6);
                    (
                        rng.random_range(0.0..max_amp),
                        freq * dir.cos(),
                        freq * dir.sin(),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect(),
        )
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.0.iter().map(|(a, fx, fy, ph)| a * (fx * x + fy * y + ph).sin()).sum()
    }
}

fn shape_image(label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c0 = colour(rng);
    let c1 = colour(rng);
    let grad_dir = rng.random_range(0.0..2.0 * PI);
    let texture = Texture::new(rng, 3, 0.06);
    let bg_lum = luminance([0, 1, 2].map(|k| (c0[k] + c1[k]) / 2.0));
    let mut fg = colour(rng);
    for _ in 0..20 {
        if (luminance(fg) - bg_lum).abs() > 0.3 {
            break;
        }
        fg = colour(rng);
    }
    if (luminance(fg) - bg_lum).abs() <= 0.3 {
        fg = fg.map(|v| if bg_lum > 0.5 { v * 0.2 } else { 0.8 + v * 0.2 });
    }
    let half = SIZE as f64 / 2.0;
    let cx = half + rng.random_range(-5.0..5.0);
    let cy = half + rng.random_range(-5.0..5.0);
    let r = rng.random_range(6.0..11.0);
    let angle: f64 = rng.random_range(-0.3..0.3);
    let (sin, cos) = angle.sin_cos();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");

    let mut out = vec![0.0; 3 * SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (0.5 + ((px - half) * grad_dir.cos() + (py - half) * grad_dir.sin()) / SIZE as f64)
                .clamp(0.0, 1.0);
            let tex = texture.at(px, py);
            let (dx, dy) = (px - cx, py - cy);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let a = coverage(shape_sdf(label, u, v, r));
            for k in 0..3 {
                let bg = c0[k] + (c1[k] - c0[k]) * t + tex;
                out[k * SIZE * SIZE + y * SIZE + x] = bg + (fg[k] - bg) * a + noise.sample(rng);
            }
        }
    }
    out
}

/// Segments a..g of a seven-segment display, per digit.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn glyph_image(label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = rng.random_range(9.0..14.0);
    let h = rng.random_range(16.0..24.0);
    let thickness = rng.random_range(2.0..3.5);
    let slant = rng.random_range(-0.2..0.2);
    let half = SIZE as f64 / 2.0;
    let cx = half + rng.random_range(-4.0..4.0);
    let cy = half + rng.random_range(-3.0..3.0);
    let bg0 = rng.random_range(0.0..0.35);
    let bg_slope = rng.random_range(-0.006..0.006);
    let ink = rng.random_range(0.6..1.0);
    let texture = Texture::new(rng, 2, 0.04);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");

    let (l, r, t, m, b) = (-w / 2.0, w / 2.0, -h / 2.0, 0.0, h / 2.0);
    let ends = [
        ((l, t), (r, t)),
        ((r, t), (r, m)),
        ((r, m), (r, b)),
        ((l, b), (r, b)),
        ((l, m), (l, b)),
        ((l, t), (l, m)),
        ((l, m), (r, m)),
    ];
    let strokes: Vec<_> = ends
        .iter()
        .zip(SEGMENTS[label])
        .filter(|(_, on)| *on)
        .map(|(e, _)| *e)
        .collect();

    let mut plane = vec![0.0; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let v = py - cy;
            let u = px - cx + slant * v;
            let d = strokes
                .iter()
                .map(|&(a, e)| sd_segment((u, v), a, e))
                .fold(f64::MAX, f64::min)
                - thickness / 2.0;
            let bg = bg0 + bg_slope * (px - half) + texture.at(px, py);
            plane[y * SIZE + x] = bg + (ink - bg) * coverage(d) + noise.sample(rng);
        }
    }
    let mut out = Vec::with_capacity(3 * SIZE * SIZE);
    for _ in 0..3 {
        out.extend_from_slice(&plane);
    }
    out
}
