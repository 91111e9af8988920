use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{GeneratorInfo, Manifest, SampleEntry, Split, MANIFEST_VERSION};
use super::{save_sample, Sample};
use crate::kernels::{map_indexed, Exec};
use crate::{Error, Result, Tensor};

/// Placement attempts per shape before the whole layout is redrawn.
const MAX_TRIES: usize = 200;
/// Full layouts drawn before generation gives up.
const MAX_LAYOUTS: usize = 50;
/// Radius scale of the largest shape relative to the smaller image extent.
const LARGEST_RADIUS: f64 = 0.25;
/// Radius ratio between consecutive classes.
const RADIUS_DECAY: f64 = 0.5;
const SMALLEST_RADIUS: f64 = 1.5;
/// Width of each class's intensity band; bands start 0.12 apart, so
/// neighbouring classes overlap.
const BAND_WIDTH: f64 = 0.3;
const BAND_STEP: f64 = 0.12;

/// Parameters of a phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub count: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    /// scales both background texture and additive noise; 0 gives
    /// piecewise-constant images
    pub noise: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            count: 32,
            num_classes: 4,
            height: 64,
            width: 64,
            channels: 1,
            seed: 0,
            noise: 0.5,
            val_fraction: 0.25,
            test_fraction: 0.0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.height < 8 || self.width < 8 || self.channels == 0 {
            return fail(format!(
                "image must be at least 8x8 with one channel, got {}x{}x{}",
                self.channels, self.height, self.width
            ));
        }
        if !(0.0..=10.0).contains(&self.noise) {
            return fail(format!("noise must be in [0, 10], got {}", self.noise));
        }
        let held_out = self.val_fraction + self.test_fraction;
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || held_out >= 1.0 {
            return fail("split fractions must be non-negative and sum below 1".into());
        }
        if self.count == 0 {
            return fail("count must be positive".into());
        }
        Ok(())
    }

    /// Split of every sample index, seeded: a shuffled prefix goes to
    /// validation, the next block to test, the rest to training.
    pub fn splits(&self) -> Vec<Split> {
        let n = self.count;
        let n_val = (n as f64 * self.val_fraction).round() as usize;
        let n_test = ((n as f64 * self.test_fraction).round() as usize).min(n - n_val.min(n));
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        order.shuffle(&mut rng);
        let mut splits = vec![Split::Train; n];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_val {
                splits[i] = Split::Val;
            } else if rank < n_val + n_test {
                splits[i] = Split::Test;
            }
        }
        splits
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { rx: f64, ry: f64, angle: f64 },
    Rect { rx: f64, ry: f64 },
}

impl Shape {
    fn reach(&self) -> f64 {
        match *self {
            Shape::Ellipse { rx, ry, .. } | Shape::Rect { rx, ry } => rx.max(ry),
        }
    }

    /// Whether the pixel centre `(y, x)` lies inside the shape centred at
    /// `(cy, cx)`.
    fn contains(&self, cy: f64, cx: f64, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - cy, x - cx);
        match *self {
            Shape::Ellipse { rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { rx, ry } => dx.abs() <= rx && dy.abs() <= ry,
        }
    }
}

/// Mask of one phantom: classes `1..K` placed largest first, each shape
/// kept at least one pixel away from the others.
fn place_shapes(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    for _ in 0..MAX_LAYOUTS {
        if let Some(mask) = try_layout(spec, rng)? {
            return Ok(mask);
        }
    }
    Err(Error::Generation(format!(
        "could not place all classes without overlap in {MAX_LAYOUTS} layouts; \
         use fewer classes, smaller shapes or a larger image"
    )))
}

/// One layout attempt; `None` when some shape found no free spot.
fn try_layout(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Option<Vec<u8>>> {
    let (h, w) = (spec.height, spec.width);
    let mut mask = vec![0u8; h * w];
    let extent = h.min(w) as f64;
    for class in 1..spec.num_classes {
        let r = (LARGEST_RADIUS * extent * RADIUS_DECAY.powi(class as i32 - 1)).max(SMALLEST_RADIUS);
        let rx = r * rng.random_range(0.7..=1.0);
        let ry = r * rng.random_range(0.7..=1.0);
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                rx,
                ry,
                angle: rng.random_range(0.0..PI),
            }
        } else {
            Shape::Rect { rx, ry }
        };
        let reach = shape.reach();
        let (lo, hi_y, hi_x) = (reach + 1.0, h as f64 - reach - 2.0, w as f64 - reach - 2.0);
        if hi_y < lo || hi_x < lo {
            return Err(Error::Generation(format!(
                "class {class} (radius {reach:.1}) does not fit a {h}x{w} image; use fewer classes or a larger image"
            )));
        }
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let cy = rng.random_range(lo..=hi_y);
            let cx = rng.random_range(lo..=hi_x);
            let y0 = (cy - reach - 1.0).floor().max(0.0) as usize;
            let y1 = ((cy + reach + 1.0).ceil() as usize).min(h - 1);
            let x0 = (cx - reach - 1.0).floor().max(0.0) as usize;
            let x1 = ((cx + reach + 1.0).ceil() as usize).min(w - 1);
            let mut cells = Vec::new();
            let mut clash = false;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if !shape.contains(cy, cx, y as f64, x as f64) {
                        continue;
                    }
                    // the pixel and its 8-neighbourhood must be background
                    let free = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                        .all(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|xx| mask[yy * w + xx] == 0));
                    if !free {
                        clash = true;
                        break;
                    }
                    cells.push(y * w + x);
                }
                if clash {
                    break;
                }
            }
            if !clash && !cells.is_empty() {
                for i in cells {
                    mask[i] = class as u8;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }
    Ok(Some(mask))
}

fn render(spec: &PhantomSpec, mask: &[u8], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w) = (spec.height, spec.width);
    let background = rng.random_range(0.1..0.2);
    let levels: Vec<f64> = (0..spec.num_classes)
        .map(|c| {
            if c == 0 {
                background
            } else {
                let lo = 0.3 + BAND_STEP * (c - 1) as f64;
                lo + BAND_WIDTH * rng.random::<f64>()
            }
        })
        .collect();
    // low-frequency background texture: three random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(spec.channels * h * w);
    for _ in 0..spec.channels {
        for y in 0..h {
            for x in 0..w {
                let class = mask[y * w + x] as usize;
                let mut v = levels[class];
                if spec.noise > 0.0 {
                    if class == 0 {
                        let t: f64 = waves
                            .iter()
                            .map(|&(fy, fx, phase)| {
                                (2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase).sin()
                            })
                            .sum::<f64>()
                            / 3.0;
                        v += 0.1 * spec.noise * t;
                    }
                    let z: f64 = StandardNormal.sample(rng);
                    v += 0.08 * spec.noise * z;
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new([spec.channels, h, w], data).expect("shape matches buffer")
}

/// Sample `index` of the dataset described by `spec`; a pure function of
/// `(spec, index)`.
fn phantom(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let mask = place_shapes(spec, &mut rng)?;
    let image = render(spec, &mask, &mut rng);
    Sample::new(image, mask)
}

/// Generates `spec.count` samples in index order.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    map_indexed(Exec::default(), spec.count, |i| phantom(spec, i))
        .into_iter()
        .collect()
}

/// Generates the dataset and writes it under `dir`: the manifest at the
/// root and one sample file per split subdirectory entry.
pub fn generate_dataset(spec: &PhantomSpec, name: &str, dir: &Path) -> Result<Manifest> {
    let samples = generate_phantoms(spec)?;
    let splits = spec.splits();
    let mut entries = Vec::with_capacity(samples.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        if splits.contains(&split) {
            let sub = dir.join(split.as_str());
            std::fs::create_dir_all(&sub).map_err(Error::io(&sub))?;
        }
    }
    for (i, (sample, &split)) in samples.iter().zip(&splits).enumerate() {
        let file = format!("{}/phantom_{i:04}.tcs", split.as_str());
        save_sample(sample, &dir.join(&file))?;
        entries.push(SampleEntry { file, split });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        name: name.to_string(),
        num_classes: spec.num_classes,
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
        generator: Some(GeneratorInfo {
            kind: "phantom".into(),
            spec: spec.clone(),
        }),
        samples: entries,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            count: 6,
            height: 32,
            width: 32,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn masks_hold_every_class_exactly_once_as_a_region() {
        for s in generate_phantoms(&small(1)).unwrap() {
            assert!(s.mask.iter().all(|&c| c < 4));
            for c in 0..4u8 {
                assert!(s.mask.contains(&c), "class {c} missing");
            }
        }
    }

    #[test]
    fn zero_noise_is_piecewise_constant_per_region() {
        let spec = PhantomSpec { noise: 0.0, ..small(2) };
        for s in generate_phantoms(&spec).unwrap() {
            let mut level = [None; 4];
            for (&c, &v) in s.mask.iter().zip(s.image.data()) {
                let slot = &mut level[c as usize];
                match slot {
                    None => *slot = Some(v),
                    Some(l) => assert_eq!(*l, v),
                }
            }
        }
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        let spec = PhantomSpec { noise: 3.0, ..small(3) };
        for s in generate_phantoms(&spec).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_samples_different_seed_different() {
        let a = generate_phantoms(&small(4)).unwrap();
        let b = generate_phantoms(&small(4)).unwrap();
        let c = generate_phantoms(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_content_does_not_depend_on_count() {
        let a = generate_phantoms(&small(6)).unwrap();
        let more = generate_phantoms(&PhantomSpec { count: 9, ..small(6) }).unwrap();
        assert_eq!(a[..], more[..6]);
    }

    #[test]
    fn class_sizes_span_an_order_of_magnitude() {
        let spec = PhantomSpec {
            count: 100,
            ..Default::default()
        };
        let mut totals = [0usize; 4];
        for s in generate_phantoms(&spec).unwrap() {
            for &c in &s.mask {
                totals[c as usize] += 1;
            }
        }
        let fg = &totals[1..];
        let (max, min) = (*fg.iter().max().unwrap(), *fg.iter().min().unwrap());
        assert!(max >= 10 * min, "class pixel totals {totals:?}");
    }

    #[test]
    fn unplaceable_shapes_report_a_generation_error() {
        let spec = PhantomSpec {
            num_classes: 30,
            height: 8,
            width: 8,
            ..small(0)
        };
        let err = generate_phantoms(&spec).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "{err}");
        assert!(err.to_string().contains("fewer classes"));
    }

    #[test]
    fn splits_are_seeded_and_sized() {
        let spec = PhantomSpec {
            count: 20,
            val_fraction: 0.25,
            test_fraction: 0.1,
            ..Default::default()
        };
        let s = spec.splits();
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 5);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 2);
        assert_eq!(s, spec.splits());
    }
}
