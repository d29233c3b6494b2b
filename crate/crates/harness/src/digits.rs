//! Procedural handwritten-style digits for MNIST-format experiments.
//!
//! Each class is a set of strokes in the unit square. A sample applies a
//! random affine warp, jitters stroke thickness and intensity, rasterizes
//! with an anti-aliased distance falloff and adds pixel noise.

use ibrar_core::{Dataset, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Pt = (f64, f64);

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Vec<Pt> {
    let n = (((to_deg - from_deg).abs() / 20.0).ceil() as usize).max(2);
    (0..=n)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / n as f64).to_radians();
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn line(points: &[Pt]) -> Vec<Pt> {
    points.to_vec()
}

/// Stroke polylines per digit; y grows downwards, angles run clockwise.
fn strokes(digit: usize) -> Vec<Vec<Pt>> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.26, 0.38, 0.0, 360.0)],
        1 => vec![line(&[(0.36, 0.24), (0.52, 0.12), (0.52, 0.88)])],
        2 => {
            let mut s = arc(0.5, 0.33, 0.24, 0.21, 190.0, 380.0);
            s.extend([(0.26, 0.86), (0.76, 0.86)]);
            vec![s]
        }
        3 => vec![
            arc(0.47, 0.31, 0.24, 0.19, 200.0, 450.0),
            arc(0.47, 0.68, 0.27, 0.2, 270.0, 520.0),
        ],
        4 => vec![line(&[(0.62, 0.88), (0.62, 0.12), (0.22, 0.64), (0.8, 0.64)])],
        5 => {
            let mut s = line(&[(0.74, 0.13), (0.33, 0.13), (0.3, 0.46)]);
            s.extend(arc(0.48, 0.64, 0.26, 0.23, 230.0, 500.0));
            vec![s]
        }
        6 => {
            let mut s = line(&[(0.66, 0.12), (0.4, 0.4)]);
            s.extend(arc(0.49, 0.65, 0.23, 0.23, 200.0, 560.0));
            vec![s]
        }
        7 => vec![line(&[(0.22, 0.14), (0.78, 0.14), (0.42, 0.88)])],
        8 => vec![
            arc(0.5, 0.3, 0.2, 0.18, 0.0, 360.0),
            arc(0.5, 0.69, 0.25, 0.2, 0.0, 360.0),
        ],
        9 => {
            let mut s = arc(0.5, 0.34, 0.22, 0.21, 0.0, 360.0);
            s.extend([(0.72, 0.34), (0.62, 0.88)]);
            vec![s]
        }
        _ => unreachable!("ten digit classes"),
    }
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Deformation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DigitStyle {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_shear: f64,
    /// Translation bound as a fraction of the image side.
    pub max_shift: f64,
    /// Stroke width range as a fraction of the image side.
    pub thickness: (f64, f64),
    pub noise_sigma: f64,
    /// Per-point stroke jitter as a fraction of the image side.
    pub jitter: f64,
}

impl Default for DigitStyle {
    fn default() -> Self {
        DigitStyle {
            max_rotation_deg: 15.0,
            scale: (0.8, 1.05),
            max_shear: 0.2,
            max_shift: 0.08,
            thickness: (0.08, 0.14),
            noise_sigma: 0.05,
            jitter: 0.025,
        }
    }
}

/// Renders one `size × size` sample of `digit` with values in `[0, 1]`.
pub fn render_digit<R: Rng + ?Sized>(digit: usize, size: usize, style: &DigitStyle, rng: &mut R) -> Vec<f64> {
    let rot = rng
        .random_range(-style.max_rotation_deg..=style.max_rotation_deg)
        .to_radians();
    let sx = rng.random_range(style.scale.0..=style.scale.1);
    let sy = sx * rng.random_range(0.9..=1.1);
    let shear = rng.random_range(-style.max_shear..=style.max_shear);
    let tx = rng.random_range(-style.max_shift..=style.max_shift);
    let ty = rng.random_range(-style.max_shift..=style.max_shift);
    let width = rng.random_range(style.thickness.0..=style.thickness.1);
    let ink = rng.random_range(0.75..=1.0);
    let (c, s) = (rot.cos(), rot.sin());
    let warp = |(x, y): Pt| {
        let (x, y) = ((x - 0.5) * sx + shear * (y - 0.5) * sy, (y - 0.5) * sy);
        (0.5 + c * x - s * y + tx, 0.5 + s * x + c * y + ty)
    };
    let polys: Vec<Vec<Pt>> = strokes(digit)
        .into_iter()
        .map(|poly| {
            poly.into_iter()
                .map(|p| {
                    let (x, y) = warp(p);
                    (
                        x + rng.random_range(-style.jitter..=style.jitter),
                        y + rng.random_range(-style.jitter..=style.jitter),
                    )
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let half = width / 2.0;
    let aa = 1.0 / size as f64;
    let mut img = Vec::with_capacity(size * size);
    for r in 0..size {
        for col in 0..size {
            let p = ((col as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64);
            let d = polys
                .iter()
                .flat_map(|poly| poly.windows(2).map(move |w| seg_dist(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = ink * (1.0 - (d - half) / aa).clamp(0.0, 1.0);
            let n = if style.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            img.push((v + n).clamp(0.0, 1.0));
        }
    }
    img
}

/// `n` samples with labels cycling through the ten classes, then shuffled.
pub fn synthetic_digits(n: usize, size: usize, style: &DigitStyle, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let mut data = Vec::with_capacity(n * size * size);
    for &y in &labels {
        data.extend(render_digit(y, size, style, &mut rng));
    }
    let images = Tensor::new(vec![n, 1, size, size], data).expect("consistent sizes");
    Dataset::new(images, labels, 10).expect("labels below ten")
}

/// Quantizes `[0, 1]` pixels to bytes as stored in IDX files.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
