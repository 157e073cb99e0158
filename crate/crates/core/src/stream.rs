//! Synthetic fundus-like scenes under parametric domain corruption.
//!
//! Each scene is a background with a smooth illumination ramp and two nested
//! ellipses: an outer disc and an inner cup sharing its center and
//! orientation. Scene geometry is drawn from a stream keyed only by the
//! sample index, so the mask of a scene does not depend on which domain
//! corrupts it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::{Purpose, Rng};

pub const BACKGROUND: u8 = 0;
pub const DISC: u8 = 1;
pub const CUP: u8 = 2;
pub const NUM_CLASSES: usize = 3;
/// Default side length of generated images.
pub const IMAGE_SIZE: usize = 48;

/// Intensity corruption applied to a clean render:
/// `clamp(gain * blur(x)^gamma + bias + noise, 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl DomainSpec {
    pub fn source() -> Self {
        Self {
            id: "source".into(),
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gain == 1.0
            && self.bias == 0.0
            && self.gamma == 1.0
            && self.noise_sigma == 0.0
            && self.blur_radius == 0
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "DomainSpec";
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid(
                OP,
                format!("gamma must be positive, got {}", self.gamma),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(OP, "noise_sigma must be non-negative"));
        }
        if !self.gain.is_finite() || !self.bias.is_finite() {
            return Err(invalid(OP, "gain and bias must be finite"));
        }
        Ok(())
    }

    /// Corruption before clamping and noise, for one clean intensity.
    pub fn transfer(&self, clean: f64) -> f64 {
        self.gain * clean.max(0.0).powf(self.gamma) + self.bias
    }
}

/// The two target domains of the default stream.
pub fn default_target_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            id: "dim".into(),
            gain: 0.75,
            bias: 0.12,
            gamma: 1.25,
            noise_sigma: 0.04,
            blur_radius: 0,
        },
        DomainSpec {
            id: "washed".into(),
            gain: 0.85,
            bias: 0.1,
            gamma: 0.7,
            noise_sigma: 0.06,
            blur_radius: 1,
        },
    ]
}

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape(
                "Image::new",
                format!(
                    "{height}x{width} needs {} pixels, got {}",
                    height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSample {
    /// Scene index; geometry depends on this alone.
    pub scene: u64,
    pub domain_id: String,
    pub image: Image,
    /// Per-pixel labels, evaluation and source training only.
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
struct Scene {
    cy: f64,
    cx: f64,
    disc_a: f64,
    disc_b: f64,
    cup_ratio: f64,
    angle: f64,
    ramp_dir: f64,
    ramp_amp: f64,
    tex_freq: f64,
    tex_phase: f64,
}

impl Scene {
    fn draw(seed: u64, index: u64, size: usize) -> Self {
        let mut rng = Rng::indexed(seed, Purpose::Scene, index);
        let s = size as f64;
        Self {
            cy: s * rng.uniform_range(0.38, 0.62),
            cx: s * rng.uniform_range(0.38, 0.62),
            disc_a: s * rng.uniform_range(0.17, 0.26),
            disc_b: s * rng.uniform_range(0.15, 0.24),
            cup_ratio: rng.uniform_range(0.4, 0.65),
            angle: rng.uniform_range(0.0, std::f64::consts::PI),
            ramp_dir: rng.uniform_range(0.0, 2.0 * std::f64::consts::PI),
            ramp_amp: rng.uniform_range(0.03, 0.1),
            tex_freq: rng.uniform_range(0.15, 0.4),
            tex_phase: rng.uniform_range(0.0, 2.0 * std::f64::consts::PI),
        }
    }

    /// Elliptic radius of `(r, c)`: below 1 inside the disc.
    fn radius(&self, r: f64, c: f64) -> f64 {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let (s, co) = self.angle.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        ((u / self.disc_a).powi(2) + (v / self.disc_b).powi(2)).sqrt()
    }

    fn render(&self, size: usize) -> (Vec<f64>, Vec<u8>) {
        let mut img = Vec::with_capacity(size * size);
        let mut mask = Vec::with_capacity(size * size);
        let s = size as f64;
        let (dy, dx) = (self.ramp_dir.sin(), self.ramp_dir.cos());
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let rad = self.radius(y, x);
                let label = if rad < self.cup_ratio {
                    CUP
                } else if rad < 1.0 {
                    DISC
                } else {
                    BACKGROUND
                };
                let base = match label {
                    CUP => 0.85,
                    DISC => 0.58,
                    _ => 0.2,
                };
                let ramp = self.ramp_amp * ((y / s - 0.5) * dy + (x / s - 0.5) * dx);
                let texture = 0.025
                    * (self.tex_freq * x + self.tex_phase).sin()
                    * (self.tex_freq * y - self.tex_phase).cos();
                img.push(base + ramp + texture);
                mask.push(label);
            }
        }
        (img, mask)
    }
}

/// Clean render and mask of one scene.
pub fn render_scene(seed: u64, index: u64, size: usize) -> (Image, Vec<u8>) {
    let (data, mask) = Scene::draw(seed, index, size).render(size);
    (
        Image {
            height: size,
            width: size,
            data,
        },
        mask,
    )
}

/// Applies a domain corruption; `noise_rng` supplies the additive noise.
pub fn corrupt(clean: &Image, domain: &DomainSpec, noise_rng: &mut Rng) -> Image {
    let blurred = box_blur(clean, domain.blur_radius);
    let data = blurred
        .data
        .iter()
        .map(|&v| {
            let mut x = domain.transfer(v);
            if domain.noise_sigma > 0.0 {
                x += domain.noise_sigma * noise_rng.normal();
            }
            x.clamp(0.0, 1.0)
        })
        .collect();
    Image {
        height: clean.height,
        width: clean.width,
        data,
    }
}

/// Mean filter over a `(2r+1)^2` window with reflected borders.
pub fn box_blur(img: &Image, radius: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let rad = radius as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for o in -rad..=rad {
                    let (rr, cc) = if horizontal {
                        (r, reflect(c as isize + o, w))
                    } else {
                        (reflect(r as isize + o, h), c)
                    };
                    acc += src[rr * w + cc];
                }
                out[r * w + c] = acc / (2 * radius + 1) as f64;
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    Image {
        height: h,
        width: w,
        data: pass(&tmp, false),
    }
}

/// Reflect-101 border handling (`-1 -> 1`, `n -> n - 2`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Builds an ordered stream: `steps_per_domain` scenes per domain in
/// sequence, or all of them shuffled together when `shuffle` is set.
pub fn generate_stream(
    seed: u64,
    domains: &[DomainSpec],
    steps_per_domain: usize,
    shuffle: bool,
    size: usize,
) -> Result<Vec<StreamSample>> {
    if domains.is_empty() {
        return Err(Error::Empty {
            op: "generate_stream",
        });
    }
    if steps_per_domain == 0 {
        return Err(invalid(
            "generate_stream",
            "steps_per_domain must be at least 1",
        ));
    }
    if size == 0 {
        return Err(invalid("generate_stream", "image size must be positive"));
    }
    for d in domains {
        d.validate()?;
    }
    let mut samples = Vec::with_capacity(domains.len() * steps_per_domain);
    for (d, domain) in domains.iter().enumerate() {
        for s in 0..steps_per_domain {
            let scene = (d * steps_per_domain + s) as u64;
            let (clean, mask) = render_scene(seed, scene, size);
            let mut noise = Rng::indexed(seed, Purpose::Noise, scene);
            samples.push(StreamSample {
                scene,
                domain_id: domain.id.clone(),
                image: corrupt(&clean, domain, &mut noise),
                mask,
            });
        }
    }
    if shuffle {
        Rng::new(seed, Purpose::Shuffle).shuffle(&mut samples);
    }
    Ok(samples)
}

/// Scene indices of source images start here so they never coincide with
/// stream scenes drawn from the same seed.
pub const SOURCE_SCENE_OFFSET: u64 = 1 << 32;

/// Labeled, uncorrupted images for source training.
pub fn source_samples(seed: u64, count: usize, size: usize) -> Result<Vec<StreamSample>> {
    if count == 0 || size == 0 {
        return Err(invalid(
            "source_samples",
            format!("{count} images of size {size}"),
        ));
    }
    let id = DomainSpec::source().id;
    Ok((0..count as u64)
        .map(|i| {
            let scene = SOURCE_SCENE_OFFSET + i;
            let (image, mask) = render_scene(seed, scene, size);
            StreamSample {
                scene,
                domain_id: id.clone(),
                image,
                mask,
            }
        })
        .collect())
}

/// Dice overlap `2|A∩B| / (|A| + |B|)` of one class; 1 when both are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if class as usize >= NUM_CLASSES {
        return Err(Error::UnknownClass(class));
    }
    if pred.len() != gt.len() {
        return Err(shape(
            "dice_score",
            format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            ),
        ));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (ip, ig) = (p == class, g == class);
        a += ip as usize;
        b += ig as usize;
        inter += (ip && ig) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Mean of the disc and cup Dice scores, plus each of them.
pub fn foreground_dice(pred: &[u8], gt: &[u8]) -> Result<[f64; 2]> {
    Ok([dice_score(pred, gt, DISC)?, dice_score(pred, gt, CUP)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_domain_leaves_render_untouched() {
        let (clean, _) = render_scene(3, 0, 24);
        let mut rng = Rng::new(3, Purpose::Noise);
        let out = corrupt(&clean, &DomainSpec::source(), &mut rng);
        let expected: Vec<f64> = clean.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        assert_eq!(out.data, expected);
    }

    #[test]
    fn gain_is_linear_before_clamping() {
        let d = DomainSpec {
            gain: 2.0,
            ..DomainSpec::source()
        };
        assert!((d.transfer(0.3) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_stream() {
        let doms = default_target_domains();
        let a = generate_stream(11, &doms, 3, false, 24).unwrap();
        let b = generate_stream(11, &doms, 3, false, 24).unwrap();
        assert_eq!(a, b);
        let c = generate_stream(11, &doms, 3, true, 24).unwrap();
        let d = generate_stream(11, &doms, 3, true, 24).unwrap();
        assert_eq!(c, d);
        assert_ne!(
            a.iter().map(|s| s.scene).collect::<Vec<_>>(),
            c.iter().map(|s| s.scene).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mask_is_independent_of_domain() {
        let (_, m0) = render_scene(5, 9, 32);
        let doms = default_target_domains();
        let a = generate_stream(5, &doms[..1], 10, false, 32).unwrap();
        let b = generate_stream(5, &doms[1..], 10, false, 32).unwrap();
        assert_eq!(a[9].mask, m0);
        assert_eq!(a[9].mask, b[9].mask);
        assert_ne!(a[9].image, b[9].image);
    }

    #[test]
    fn cup_nested_in_disc() {
        for i in 0..20 {
            let (_, mask) = render_scene(1, i, 48);
            let cup = mask.iter().filter(|&&m| m == CUP).count();
            let disc = mask.iter().filter(|&&m| m == DISC).count();
            assert!(
                cup > 0 && disc > cup / 2,
                "scene {i}: cup {cup}, disc {disc}"
            );
        }
    }

    #[test]
    fn stream_errors() {
        assert!(generate_stream(0, &[], 1, false, 8).is_err());
        assert!(generate_stream(0, &[DomainSpec::source()], 0, false, 8).is_err());
        let bad = DomainSpec {
            gamma: 0.0,
            ..DomainSpec::source()
        };
        assert!(generate_stream(0, &[bad], 1, false, 8).is_err());
    }

    #[test]
    fn reflect_borders() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn dice_reference_values() {
        let gt = [1, 1, 0, 0, 0];
        assert_eq!(dice_score(&gt, &gt, 1).unwrap(), 1.0);
        // pred has 4 pixels, gt 2, overlap 2.
        let pred = [1, 1, 1, 1, 0];
        assert!((dice_score(&pred, &gt, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let disjoint = [0, 0, 1, 1, 0];
        assert_eq!(dice_score(&disjoint, &gt, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert_eq!(dice_score(&gt, &gt, 3), Err(Error::UnknownClass(3)));
        assert!(dice_score(&gt, &gt[..2], 1).is_err());
    }
}
