//! Procedural fundus-like images for tests, benchmarks and demo corpora.
//!
//! A phantom has a dark surround, a vignetted orange disk, a bright optic
//! disc, a darker macula and a tree of dark vessels leaving the disc.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::degradation::{self, SamplingRanges};
use crate::image::FundusImage;
use crate::rng;

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
}

fn grow_vessel(
    rng: &mut ChaCha8Rng,
    segments: &mut Vec<Segment>,
    start: (f64, f64),
    mut angle: f64,
    width: f64,
    step: f64,
    steps: usize,
    depth: usize,
) {
    let mut p = start;
    let mut w = width;
    for k in 0..steps {
        angle += rng.random_range(-0.3..0.3);
        let q = (p.0 + step * angle.sin(), p.1 + step * angle.cos());
        segments.push(Segment { a: p, b: q, width: w });
        if depth > 0 && k > 2 && rng.random::<f64>() < 0.12 {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let branch = angle + side * rng.random_range(0.4..0.9);
            grow_vessel(
                rng,
                segments,
                q,
                branch,
                w * 0.7,
                step,
                steps - k,
                depth - 1,
            );
        }
        w = (w * 0.985).max(0.6);
        p = q;
    }
}

fn segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let (dy, dx) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * dy + (p.1 - s.a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cy, cx) = (s.a.0 + t * dy, s.a.1 + t * dx);
    ((p.0 - cy).powi(2) + (p.1 - cx).powi(2)).sqrt()
}

fn vessel_map(h: usize, w: usize, segments: &[Segment]) -> Array2<f64> {
    let mut map = Array2::zeros((h, w));
    for s in segments {
        let reach = 3.0 * s.width;
        let y0 = (s.a.0.min(s.b.0) - reach).floor().max(0.0) as usize;
        let y1 = ((s.a.0.max(s.b.0) + reach).ceil().max(0.0) as usize).min(h);
        let x0 = (s.a.1.min(s.b.1) - reach).floor().max(0.0) as usize;
        let x1 = ((s.a.1.max(s.b.1) + reach).ceil().max(0.0) as usize).min(w);
        for i in y0..y1 {
            for j in x0..x1 {
                let d = segment_distance((i as f64, j as f64), s) / s.width;
                let v = (-d * d).exp();
                if v > map[[i, j]] {
                    map[[i, j]] = v;
                }
            }
        }
    }
    map
}

/// A clear fundus-like image with its field-of-view mask attached.
pub fn clear_fundus(height: usize, width: usize, seed: u64) -> FundusImage {
    let mut rng = rng::stream(seed, "phantom", &[]);
    let (h, w) = (height as f64, width as f64);
    let radius = 0.47 * h.min(w);
    let center = (
        h / 2.0 + rng.random_range(-0.02..0.02) * h,
        w / 2.0 + rng.random_range(-0.02..0.02) * w,
    );
    let base = [
        0.80 * rng.random_range(0.9..1.1),
        0.40 * rng.random_range(0.85..1.15),
        0.18 * rng.random_range(0.8..1.2),
    ];

    let disc_angle: f64 = rng.random_range(-0.5..0.5) + if rng.random::<bool>() { 0.0 } else { std::f64::consts::PI };
    let disc_dist = radius * rng.random_range(0.3..0.42);
    let disc = (
        center.0 + disc_dist * disc_angle.sin(),
        center.1 + disc_dist * disc_angle.cos(),
    );
    let disc_r = radius * rng.random_range(0.08..0.11);
    let macula = (
        center.0 - 0.6 * disc_dist * disc_angle.sin(),
        center.1 - 0.6 * disc_dist * disc_angle.cos(),
    );
    let macula_r = radius * 0.12;

    let mut segments = Vec::new();
    let trunks = rng.random_range(5..8);
    let step = radius * 0.05;
    for t in 0..trunks {
        let angle = t as f64 / trunks as f64 * std::f64::consts::TAU + rng.random_range(-0.3..0.3);
        let width_px = (radius * 0.022).max(1.0) * rng.random_range(0.8..1.2);
        grow_vessel(&mut rng, &mut segments, disc, angle, width_px, step, 22, 2);
    }
    let vessels = vessel_map(height, width, &segments);

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.04),
                rng.random_range(0.5..3.0) / h,
                rng.random_range(0.5..3.0) / w,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise: Vec<f64> = (0..height * width).map(|_| rng.random_range(-0.012..0.012)).collect();

    let mut mask = Array2::from_elem((height, width), false);
    let pixels = Array3::from_shape_fn((3, height, width), |(c, i, j)| {
        let (y, x) = (i as f64, j as f64);
        let d = ((y - center.0).powi(2) + (x - center.1).powi(2)).sqrt();
        let edge = (radius - d + 0.5).clamp(0.0, 1.0);
        if edge <= 0.0 {
            return 0.0;
        }
        let mut v = base[c] * (1.0 - 0.35 * (d / radius).powi(2));
        for &(amp, fy, fx, ph) in &waves {
            v += amp * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin() * base[c];
        }
        let dd = ((y - disc.0).powi(2) + (x - disc.1).powi(2)).sqrt() / disc_r;
        v += [0.22, 0.35, 0.25][c] * (-dd.powi(4)).exp();
        let dm = ((y - macula.0).powi(2) + (x - macula.1).powi(2)).sqrt() / macula_r;
        v *= 1.0 - 0.3 * (-dm * dm / 2.0).exp();
        v *= 1.0 - [0.35, 0.6, 0.55][c] * vessels[[i, j]];
        v += noise[i * width + j];
        (v * edge).clamp(0.0, 1.0)
    });
    for ((i, j), m) in mask.indexed_iter_mut() {
        let d = ((i as f64 - center.0).powi(2) + (j as f64 - center.1).powi(2)).sqrt();
        *m = d <= radius;
    }
    FundusImage::new(pixels, Some(mask)).expect("phantom shape")
}

/// A phantom degraded with the default sampling distribution.
pub fn simulated_pair(height: usize, width: usize, seed: u64) -> (FundusImage, FundusImage) {
    let clear = clear_fundus(height, width, seed);
    let params = degradation::sample_params(height, width, rng::derive_seed(seed, "pair", &[]));
    let degraded = degradation::simulate_cataract(&clear, &params).expect("sampled params are valid");
    (clear, degraded)
}

/// A stand-in for a real cataract photograph: heavier, more diffuse haze
/// than the default simulation, a yellow cast and sensor noise. Returns the
/// degraded image; `clear` is its reference.
pub fn target_cataract(clear: &FundusImage, seed: u64) -> FundusImage {
    let ranges = SamplingRanges {
        alpha: (0.55, 0.8),
        beta: (0.45, 0.8),
        center_box: 0.6,
        r_b: (6, 14),
        r_l: (30, 50),
    };
    let params = degradation::sample_params_with(clear.height(), clear.width(), seed, &ranges);
    let mut out = degradation::simulate_cataract(clear, &params).expect("sampled params are valid");
    let mut rng = rng::stream(seed, "target-noise", &[]);
    let cast = [1.0, 0.93, 0.72];
    let mask = clear.mask_or_full();
    for ((c, i, j), v) in out.pixels_mut().indexed_iter_mut() {
        if mask[[i, j]] {
            *v = (*v * cast[c] + rng.random_range(-0.015..0.015)).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_valid_and_reproducible() {
        let a = clear_fundus(64, 64, 3);
        assert_eq!(a, clear_fundus(64, 64, 3));
        assert_ne!(a, clear_fundus(64, 64, 4));
        assert!(a.is_in_unit_range());
        assert_eq!(a.pixels()[[0, 0, 0]], 0.0);
        let m = a.mask().unwrap();
        assert!(m[[32, 32]] && !m[[0, 0]]);
    }

    #[test]
    fn degraded_versions_differ_from_clear() {
        let (clear, degraded) = simulated_pair(64, 64, 1);
        assert!(degraded.is_in_unit_range());
        assert_ne!(clear, degraded);
        let target = target_cataract(&clear, 9);
        assert!(target.is_in_unit_range());
        assert_ne!(target, degraded);
    }
}
