use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Ratio between the largest and smallest class counts; `None` or 1.0
    /// gives balanced classes.
    #[serde(default)]
    pub imbalance: Option<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 7,
            train_count: 2000,
            test_count: 500,
            image_size: 64,
            noise_sigma: 0.1,
            seed: 1,
            imbalance: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.train_count < 1 || self.test_count < 1 {
            return Err(Error::Config("train and test counts must be >= 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if let Some(r) = self.imbalance {
            if !(r >= 1.0) || !r.is_finite() {
                return Err(Error::Config(format!("imbalance must be >= 1, got {r}")));
            }
        }
        Ok(())
    }

    /// Per-class counts for `total` samples. Class `c` gets weight
    /// `r^(-c/(K-1))`; remainders go to the largest fractional parts.
    pub fn class_counts(&self, total: usize) -> Vec<usize> {
        let k = self.num_classes;
        let ratio = self.imbalance.unwrap_or(1.0);
        let weights: Vec<f64> = (0..k)
            .map(|c| ratio.powf(-(c as f64) / (k - 1) as f64))
            .collect();
        let wsum: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for c in order {
            if rest == 0 {
                break;
            }
            counts[c] += 1;
            rest -= 1;
        }
        counts
    }
}

/// Expression parameters of one rendered face, each roughly in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceParams {
    /// Positive = smile (corners up), negative = frown.
    pub mouth_curve: f64,
    /// 0 = closed line, 1 = wide open.
    pub mouth_open: f64,
    /// Positive = inner brow ends pulled down (anger), negative = raised.
    pub brow_tilt: f64,
    /// Vertical eye opening, 0.2..1.
    pub eye_open: f64,
}

const BASE_CLASSES: [FaceParams; 7] = [
    // neutral
    FaceParams { mouth_curve: 0.0, mouth_open: 0.0, brow_tilt: 0.0, eye_open: 0.6 },
    // happy
    FaceParams { mouth_curve: 1.0, mouth_open: 0.35, brow_tilt: 0.0, eye_open: 0.45 },
    // sad
    FaceParams { mouth_curve: -1.0, mouth_open: 0.0, brow_tilt: -0.8, eye_open: 0.5 },
    // surprise
    FaceParams { mouth_curve: 0.0, mouth_open: 1.0, brow_tilt: -0.3, eye_open: 1.0 },
    // fear
    FaceParams { mouth_curve: -0.4, mouth_open: 0.6, brow_tilt: -1.0, eye_open: 0.9 },
    // disgust
    FaceParams { mouth_curve: -0.6, mouth_open: 0.25, brow_tilt: 0.5, eye_open: 0.25 },
    // anger
    FaceParams { mouth_curve: -0.2, mouth_open: 0.0, brow_tilt: 1.0, eye_open: 0.4 },
];

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

impl FaceParams {
    /// Prototype parameters of a class. The first seven are hand-designed
    /// expressions; further classes are spread over parameter space with a
    /// Halton sequence.
    pub fn for_class(class: usize) -> Self {
        if let Some(p) = BASE_CLASSES.get(class) {
            return *p;
        }
        let i = class + 1;
        Self {
            mouth_curve: halton(i, 2) * 2.0 - 1.0,
            mouth_open: halton(i, 3),
            brow_tilt: halton(i, 5) * 2.0 - 1.0,
            eye_open: 0.2 + 0.8 * halton(i, 7),
        }
    }
}

fn smooth_fill(dist: f64, aa: f64) -> f64 {
    // 1 inside (dist < 0), 0 outside, linear ramp one pixel wide.
    (0.5 - dist / aa).clamp(0.0, 1.0)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders one face without noise. Coordinates are normalised to `[-1, 1]`
/// with `v` pointing down.
pub fn render_face(size: usize, p: &FaceParams, skin: f64) -> Image {
    const BACKGROUND: f64 = 0.1;
    const INK: f64 = 0.05;
    let aa = 2.0 / size as f64;
    let (head_cx, head_cy, head_rx, head_ry) = (0.0, 0.05, 0.78, 0.92);
    let eye_r = 0.14;
    let eye_ry = (eye_r * p.eye_open).max(0.025);
    let brow_y = -0.45;
    let mouth_y = 0.45;
    let mouth_w = 0.34;
    let curve = |u: f64| {
        let t = (u / mouth_w).clamp(-1.0, 1.0);
        mouth_y + p.mouth_curve * 0.16 * (0.5 - t * t)
    };
    const MOUTH_SAMPLES: usize = 24;
    let mouth_pts: Vec<(f64, f64)> = (0..=MOUTH_SAMPLES)
        .map(|i| {
            let u = -mouth_w + 2.0 * mouth_w * i as f64 / MOUTH_SAMPLES as f64;
            (u, curve(u))
        })
        .collect();

    Array2::from_shape_fn((size, size), |(y, x)| {
        let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;

        let e = (((u - head_cx) / head_rx).powi(2) + ((v - head_cy) / head_ry).powi(2)).sqrt();
        let head = smooth_fill((e - 1.0) * head_rx.min(head_ry), aa);
        let mut val = BACKGROUND + (skin - BACKGROUND) * head;

        let mut ink: f64 = 0.0;
        for side in [-1.0, 1.0] {
            let ex = side * 0.33;
            let ey = -0.12;
            let d = (((u - ex) / eye_r).powi(2) + ((v - ey) / eye_ry).powi(2)).sqrt();
            ink = ink.max(smooth_fill((d - 1.0) * eye_ry.min(eye_r), aa));

            let inner = (side * 0.14, brow_y + p.brow_tilt * 0.1);
            let outer = (side * 0.52, brow_y - p.brow_tilt * 0.1);
            let d = segment_distance((u, v), inner, outer) - 0.045;
            ink = ink.max(smooth_fill(d, aa));
        }

        let mut md = f64::INFINITY;
        for w in mouth_pts.windows(2) {
            md = md.min(segment_distance((u, v), w[0], w[1]));
        }
        ink = ink.max(smooth_fill(md - 0.04, aa));
        if u.abs() < mouth_w && p.mouth_open > 0.0 {
            let t = u / mouth_w;
            let half = p.mouth_open * 0.13 * (1.0 - t * t).sqrt();
            let d = (v - curve(u)).abs() - half;
            ink = ink.max(smooth_fill(d, aa));
        }

        val += (INK - val) * ink * head;
        val.clamp(0.0, 1.0)
    })
}

fn render_split(spec: &SynthSpec, total: usize, stream_id: u64) -> Vec<Sample> {
    let mut rng = rng_for(spec.seed, stream_id, 0);
    let counts = spec.class_counts(total);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect();
    labels.shuffle(&mut rng);

    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            let mut p = FaceParams::for_class(label);
            p.mouth_curve += rng.gen_range(-0.1..0.1);
            p.mouth_open = (p.mouth_open + rng.gen_range(-0.06..0.06)).max(0.0);
            p.brow_tilt += rng.gen_range(-0.1..0.1);
            p.eye_open = (p.eye_open + rng.gen_range(-0.06..0.06)).clamp(0.15, 1.0);
            let skin = 0.7 + rng.gen_range(-0.05..0.05);
            let mut image = render_face(spec.image_size, &p, skin);
            if let Some(n) = &noise {
                image.mapv_inplace(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0));
            }
            Sample {
                id,
                image,
                true_label: Some(label),
            }
        })
        .collect()
}

/// Renders `(train, test)` splits of parametric faces; fully determined by
/// `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let train = render_split(spec, spec.train_count, stream::SYNTH_TRAIN);
    let test = render_split(spec, spec.test_count, stream::SYNTH_TEST);
    Ok((train, test))
}
