//! Synthetic co-occurring-attribute image generator.
//!
//! Each attribute is a full-frame texture motif. A training image drawn for
//! class i renders motif i plus every other motif j independently with
//! probability q[i][j], but carries only the single weak label i. Test images
//! are drawn the same way and keep the full rendered-motif set as ground
//! truth. Motifs overlap spatially everywhere — attributes here are textures,
//! not regions, so the task cannot be solved by carving up the frame.

use crate::data::{DataItem, Split, WeakDataset};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A parameterized pixel generator; per-image phase/offset jitter comes from
/// the dataset stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Motif {
    /// Sinusoidal stripes at a fixed angle; the phase is per-image.
    Stripes { angle_deg: f64, frequency: f64 },
    /// Binary checkerboard with a per-image offset.
    Checker { cells: usize },
    /// Low-frequency blob field (product of two sines), per-image phases.
    Blobs { scale: f64 },
    /// Radial brightness falloff from a per-image center.
    Radial,
    /// Bright square marker in the top-left corner.
    Corner { size_frac: f64 },
}

impl Motif {
    /// How many jitter parameters this motif draws per image.
    fn parameter_count(&self) -> usize {
        match self {
            Motif::Stripes { .. } => 1,
            Motif::Checker { .. } => 2,
            Motif::Blobs { .. } => 2,
            Motif::Radial => 2,
            Motif::Corner { .. } => 0,
        }
    }

    /// Value in [0, 1] at normalized coordinates (x, y).
    fn value(&self, x: f64, y: f64, params: &[f64]) -> f64 {
        use std::f64::consts::TAU;
        match *self {
            Motif::Stripes {
                angle_deg,
                frequency,
            } => {
                let theta = angle_deg.to_radians();
                let u = theta.cos() * x + theta.sin() * y;
                0.5 + 0.5 * (TAU * frequency * u + TAU * params[0]).sin()
            }
            Motif::Checker { cells } => {
                let cx = ((x + params[0]) * cells as f64).floor() as i64;
                let cy = ((y + params[1]) * cells as f64).floor() as i64;
                ((cx + cy).rem_euclid(2)) as f64
            }
            Motif::Blobs { scale } => {
                let a = (TAU * scale * x + TAU * params[0]).sin();
                let b = (TAU * scale * y + TAU * params[1]).sin();
                0.5 + 0.5 * a * b
            }
            Motif::Radial => {
                let cx = 0.3 + 0.4 * params[0];
                let cy = 0.3 + 0.4 * params[1];
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (1.0 - d / 0.7).clamp(0.0, 1.0)
            }
            Motif::Corner { size_frac } => {
                if x < size_frac && y < size_frac {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Fixed RGB tint so color carries motif identity when channels == 3.
    fn tint(&self, index: usize) -> [f64; 3] {
        match index % 3 {
            0 => [1.0, 0.7, 0.5],
            1 => [0.5, 1.0, 0.7],
            _ => [0.7, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub attributes: Vec<String>,
    pub motifs: Vec<Motif>,
    pub image_size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Row-major M x M; q[i][j] is the probability that motif j also appears
    /// in an image drawn for class i. The diagonal must be 1.
    pub cooccurrence: Vec<f64>,
    /// Blend weight of per-pixel uniform noise, in [0, 1).
    pub noise: f64,
    pub seed: u64,
    /// Probability that a train image is additionally filed under one of its
    /// co-occurring classes (with that class's weak label). Default 0.
    pub overlap_fraction: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitCounts {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let m = self.attributes.len();
        let fail = |msg: String| Err(Error::InvalidInput(format!("synth spec: {msg}")));
        if m == 0 {
            return fail("no attributes".into());
        }
        if self.motifs.len() != m {
            return fail(format!("{} motifs for {m} attributes", self.motifs.len()));
        }
        if self.cooccurrence.len() != m * m {
            return fail(format!(
                "co-occurrence matrix has {} entries, expected {}",
                self.cooccurrence.len(),
                m * m
            ));
        }
        for i in 0..m {
            if self.cooccurrence[i * m + i] != 1.0 {
                return fail(format!("q[{i}][{i}] must be 1"));
            }
            for j in 0..m {
                let q = self.cooccurrence[i * m + j];
                if !(0.0..=1.0).contains(&q) {
                    return fail(format!("q[{i}][{j}] = {q} outside [0, 1]"));
                }
            }
        }
        if self.image_size < 8 {
            return fail("image size must be at least 8".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return fail("channels must be 1 or 3".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail(format!("noise {} outside [0, 1)", self.noise));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return fail(format!(
                "overlap fraction {} outside [0, 1)",
                self.overlap_fraction
            ));
        }
        Ok(())
    }
}

/// Renders one image given the set of present motifs. Active motifs are
/// average-blended, then mixed with uniform noise and quantized to the 8-bit
/// grid so a disk round trip is bit-exact.
fn render(
    spec: &SynthSpec,
    present: &[usize],
    params: &[Vec<f64>],
    rng: &mut Rng,
) -> Tensor {
    let s = spec.image_size;
    let c = spec.channels;
    let mut data = vec![0.0f64; c * s * s];
    let inv = 1.0 / s as f64;
    for py in 0..s {
        for px in 0..s {
            let (x, y) = (px as f64 * inv, py as f64 * inv);
            let mut acc = [0.0f64; 3];
            for (slot, &m) in present.iter().enumerate() {
                let v = spec.motifs[m].value(x, y, &params[slot]);
                if c == 1 {
                    acc[0] += v;
                } else {
                    let tint = spec.motifs[m].tint(m);
                    for ch in 0..3 {
                        acc[ch] += v * tint[ch];
                    }
                }
            }
            let noise = rng.next_f64();
            for ch in 0..c {
                let signal = acc[ch] / present.len() as f64;
                let v = (1.0 - spec.noise) * signal + spec.noise * noise;
                let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                data[ch * s * s + py * s + px] = q;
            }
        }
    }
    Tensor::from_vec(&[c, s, s], data).expect("render shape is valid")
}

/// Draws the present-motif set and jitter for one image of anchor class i.
fn draw_image(spec: &SynthSpec, anchor: usize, rng: &mut Rng) -> (Vec<usize>, Tensor) {
    let m = spec.attributes.len();
    let mut present = vec![anchor];
    for j in 0..m {
        if j != anchor && rng.bernoulli(spec.cooccurrence[anchor * m + j]) {
            present.push(j);
        }
    }
    present.sort_unstable();
    let params: Vec<Vec<f64>> = present
        .iter()
        .map(|&mi| {
            (0..spec.motifs[mi].parameter_count())
                .map(|_| rng.next_f64())
                .collect()
        })
        .collect();
    let pixels = render(spec, &present, &params, rng);
    (present, pixels)
}

/// Generates a weakly supervised dataset. Deterministic for a given spec and
/// seed; train/val items keep only their anchor class as the weak label.
pub fn generate_synthetic(spec: &SynthSpec, counts: &SplitCounts) -> Result<WeakDataset> {
    spec.validate()?;
    if counts.train_per_class == 0 {
        return Err(Error::InvalidInput(
            "synth spec: train_per_class must be >= 1".into(),
        ));
    }
    let m = spec.attributes.len();
    let mut rng = Rng::from_seed(spec.seed);
    let mut items = Vec::new();

    for (split, per_class) in [
        (Split::Train, counts.train_per_class),
        (Split::Val, counts.val_per_class),
        (Split::Test, counts.test_per_class),
    ] {
        let mut test_serial = 0usize;
        for class in 0..m {
            for n in 0..per_class {
                let (present, pixels) = draw_image(spec, class, &mut rng);
                match split {
                    Split::Train | Split::Val => {
                        let class_name = &spec.attributes[class];
                        items.push(DataItem {
                            id: format!("{}/{}/img_{:04}", split.dir_name(), class_name, n),
                            pixels: pixels.clone(),
                            split,
                            weak_label: Some(class),
                            full_labels: vec![],
                        });
                        // permitted overlap: the same image filed under a
                        // co-occurring class with that class's label
                        if split == Split::Train
                            && spec.overlap_fraction > 0.0
                            && rng.bernoulli(spec.overlap_fraction)
                        {
                            let others: Vec<usize> =
                                present.iter().copied().filter(|&j| j != class).collect();
                            if !others.is_empty() {
                                let j = others[rng.below(others.len())];
                                items.push(DataItem {
                                    id: format!(
                                        "train/{}/img_{:04}_ov{}",
                                        spec.attributes[j], n, class
                                    ),
                                    pixels,
                                    split,
                                    weak_label: Some(j),
                                    full_labels: vec![],
                                });
                            }
                        }
                    }
                    Split::Test => {
                        items.push(DataItem {
                            id: format!("img_{:04}", class * per_class + test_serial % per_class),
                            pixels,
                            split,
                            weak_label: None,
                            full_labels: present,
                        });
                        test_serial += 1;
                    }
                }
            }
        }
    }

    WeakDataset::from_parts(spec.attributes.clone(), items)
}

/// The default four-texture spec used by the examples and tests: horizontal,
/// vertical and diagonal stripes plus a checkerboard.
pub fn default_motifs(m: usize) -> Vec<Motif> {
    let base = [
        Motif::Stripes {
            angle_deg: 90.0,
            frequency: 4.0,
        },
        Motif::Stripes {
            angle_deg: 0.0,
            frequency: 4.0,
        },
        Motif::Stripes {
            angle_deg: 45.0,
            frequency: 4.0,
        },
        Motif::Checker { cells: 6 },
        Motif::Blobs { scale: 2.0 },
        Motif::Radial,
    ];
    (0..m).map(|i| base[i % base.len()].clone()).collect()
}

/// Uniform off-diagonal co-occurrence matrix.
pub fn uniform_cooccurrence(m: usize, q: f64) -> Vec<f64> {
    let mut mat = vec![q; m * m];
    for i in 0..m {
        mat[i * m + i] = 1.0;
    }
    mat
}
