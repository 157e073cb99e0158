//! Patch-MLP segmentation backbone.
//!
//! Every pixel is classified from its reflect-padded 5x5 neighbourhood:
//! `linear(25 -> hidden) -> ReLU -> dropout -> linear(hidden -> features)`
//! gives the per-pixel feature vector, and `linear(features -> 3)` followed
//! by a softmax gives the class distribution.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::{sgd_update, OptimizerState};
use crate::rng::{Purpose, Rng};
use crate::stream::{foreground_dice, reflect, Image, StreamSample, NUM_CLASSES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

pub const PATCH: usize = 5;
pub const PATCH_LEN: usize = PATCH * PATCH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            feature_dim: 16,
            dropout: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.feature_dim == 0 {
            return Err(invalid("BackboneConfig", "layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(
                "BackboneConfig",
                format!("dropout {} outside [0, 1)", self.dropout),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
    pub wh: Tensor2,
    pub bh: Tensor2,
}

/// Per-pixel outputs of a full-image pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    /// `pixels x feature_dim`.
    pub features: Tensor2,
    /// `pixels x 3`, rows are distributions.
    pub probs: Tensor2,
}

impl BackboneOutput {
    pub fn argmax(&self) -> Vec<u8> {
        argmax_rows(&self.probs)
    }
}

pub fn argmax_rows(probs: &Tensor2) -> Vec<u8> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Tape handles for the backbone weights.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub wh: Var,
    pub bh: Var,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let (h, f) = (config.hidden, config.feature_dim);
        Ok(Self {
            w1: uniform(PATCH_LEN, h, he(PATCH_LEN), rng),
            b1: Tensor2::zeros(1, h),
            w2: uniform(h, f, he(h), rng),
            b2: Tensor2::zeros(1, f),
            wh: uniform(f, NUM_CLASSES, 1.0 / (f as f64).sqrt(), rng),
            bh: Tensor2::zeros(1, NUM_CLASSES),
            config,
        })
    }

    /// Checks that every weight has the shape its config implies.
    pub fn check(&self) -> Result<()> {
        let (h, f) = (self.config.hidden, self.config.feature_dim);
        let expected = [
            ("w1", &self.w1, (PATCH_LEN, h)),
            ("b1", &self.b1, (1, h)),
            ("w2", &self.w2, (h, f)),
            ("b2", &self.b2, (1, f)),
            ("wh", &self.wh, (f, NUM_CLASSES)),
            ("bh", &self.bh, (1, NUM_CLASSES)),
        ];
        for (name, t, shape) in expected {
            if t.shape() != shape {
                return Err(Error::Uninitialized(format!(
                    "{name} is {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Uninitialized(format!(
                    "{name} has non-finite entries"
                )));
            }
        }
        self.config.validate()
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.wh, &self.bh]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wh,
            &mut self.bh,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
            wh: tape.param(self.wh.clone()),
            bh: tape.param(self.bh.clone()),
        }
    }

    /// Inverted-dropout mask for `rows` pixels: entries are 0 with
    /// probability `dropout`, else `1 / (1 - dropout)`.
    pub fn dropout_mask(&self, rows: usize, rng: &mut Rng) -> Tensor2 {
        let rate = self.config.dropout;
        let keep = 1.0 / (1.0 - rate);
        let mut mask = Tensor2::filled(rows, self.config.hidden, keep);
        if rate > 0.0 {
            for v in mask.data_mut() {
                if rng.uniform() < rate {
                    *v = 0.0;
                }
            }
        }
        mask
    }

    /// Full-image pass; a fresh dropout mask is drawn from `dropout` when
    /// given, otherwise the pass is deterministic.
    pub fn forward(&self, image: &Image, dropout: Option<&mut Rng>) -> Result<BackboneOutput> {
        self.check()?;
        let all: Vec<usize> = (0..image.pixels()).collect();
        let patches = extract_patches(image, &all)?;
        let mask = dropout.map(|rng| self.dropout_mask(all.len(), rng));
        self.forward_patches(&patches, mask.as_ref())
    }

    pub fn forward_patches(
        &self,
        patches: &Tensor2,
        mask: Option<&Tensor2>,
    ) -> Result<BackboneOutput> {
        let mut hidden = patches
            .matmul(&self.w1)?
            .add_row(&self.b1)?
            .map(|x| x.max(0.0));
        if let Some(m) = mask {
            hidden = hidden.zip_map(m, |x, k| x * k)?;
        }
        let features = hidden.matmul(&self.w2)?.add_row(&self.b2)?;
        let probs = self.head(&features)?;
        Ok(BackboneOutput { features, probs })
    }

    pub fn head(&self, features: &Tensor2) -> Result<Tensor2> {
        let logits = features.matmul(&self.wh)?.add_row(&self.bh)?;
        let mut probs = logits;
        for i in 0..probs.rows() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        if !probs.all_finite() {
            return Err(Error::NonFinite {
                op: "backbone head",
            });
        }
        Ok(probs)
    }
}

/// Taped encoder pass over constant `patches`; returns the feature node.
pub fn encode_tape(
    tape: &mut Tape,
    vars: &BackboneVars,
    patches: Tensor2,
    mask: Option<Tensor2>,
) -> Result<Var> {
    let x = tape.constant(patches);
    let pre = tape.matmul(x, vars.w1)?;
    let pre = tape.add_row(pre, vars.b1)?;
    let mut hidden = tape.relu(pre)?;
    if let Some(m) = mask {
        let m = tape.constant(m);
        hidden = tape.mul(hidden, m)?;
    }
    let feat = tape.matmul(hidden, vars.w2)?;
    tape.add_row(feat, vars.b2)
}

/// Taped head: per-row class distributions from a feature node.
pub fn head_tape(tape: &mut Tape, vars: &BackboneVars, features: Var) -> Result<Var> {
    let logits = tape.matmul(features, vars.wh)?;
    let logits = tape.add_row(logits, vars.bh)?;
    tape.softmax_rows(logits)
}

/// `len x 25` matrix of reflect-padded 5x5 patches around the given pixels
/// (row-major indices), centered by subtracting 0.5.
pub fn extract_patches(image: &Image, pixels: &[usize]) -> Result<Tensor2> {
    if image.height < PATCH || image.width < PATCH {
        return Err(invalid(
            "extract_patches",
            format!(
                "image {}x{} smaller than the {PATCH}x{PATCH} patch",
                image.height, image.width
            ),
        ));
    }
    let half = (PATCH / 2) as isize;
    let mut data = Vec::with_capacity(pixels.len() * PATCH_LEN);
    for &p in pixels {
        if p >= image.pixels() {
            return Err(invalid(
                "extract_patches",
                format!("pixel {p} out of range"),
            ));
        }
        let (r, c) = ((p / image.width) as isize, (p % image.width) as isize);
        for dr in -half..=half {
            let rr = reflect(r + dr, image.height);
            for dc in -half..=half {
                let cc = reflect(c + dc, image.width);
                data.push(image.get(rr, cc) - 0.5);
            }
        }
    }
    Tensor2::from_vec(pixels.len(), PATCH_LEN, data)
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub source_images: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Pixels drawn per image and step; 0 uses every pixel.
    pub pixels_per_image: usize,
    pub backbone: BackboneConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            source_images: 48,
            epochs: 200,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 8,
            pixels_per_image: 256,
            backbone: BackboneConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "PretrainConfig";
        if self.source_images == 0 || self.batch_size == 0 {
            return Err(invalid(OP, "source_images and batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(OP, "lr must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(OP, "momentum must lie in [0, 1)"));
        }
        self.backbone.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Mean disc/cup Dice on the training set after training.
    pub source_dice: f64,
}

/// Mean per-pixel cross-entropy of the dropout-free model on `samples`.
pub fn source_loss(model: &Backbone, samples: &[StreamSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let out = model.forward(&s.image, None)?;
        for (i, &y) in s.mask.iter().enumerate() {
            total -= out.probs.get(i, y as usize).max(1e-12).ln();
        }
        count += s.mask.len();
    }
    Ok(total / count as f64)
}

/// Mean disc/cup Dice of the dropout-free model on `samples`.
pub fn mean_dice(model: &Backbone, samples: &[StreamSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = model.forward(&s.image, None)?.argmax();
        let [d, c] = foreground_dice(&pred, &s.mask)?;
        total += 0.5 * (d + c);
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Supervised source training with per-pixel cross-entropy and SGD with
/// momentum. Dropout is active during training.
pub fn pretrain(
    model: &mut Backbone,
    samples: &[StreamSample],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    config.validate()?;
    model.check()?;
    if samples.is_empty() {
        return Err(Error::Empty { op: "pretrain" });
    }
    let initial_loss = source_loss(model, samples)?;
    let mut state = OptimizerState::new(config.lr, config.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut last_loss = initial_loss;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        Rng::indexed(seed, Purpose::Batches, epoch as u64).shuffle(&mut order);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let mut drop_rng = Rng::indexed(seed, Purpose::Dropout, step);
            let mut pixel_rng = Rng::indexed(seed, Purpose::PixelSubset, step);
            step += 1;
            let diverged = || Error::Diverged { epoch, last_loss };
            let (loss, grads) = batch_gradient(
                model,
                samples,
                chunk,
                config.pixels_per_image,
                &mut pixel_rng,
                &mut drop_rng,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => diverged(),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            let mut params = model.params_mut();
            sgd_update(&mut params, &grads, &mut state)?;
            epoch_total += loss;
            batches += 1;
            last_loss = loss;
        }
        epoch_losses.push(epoch_total / batches as f64);
    }

    let final_loss = source_loss(model, samples)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
            last_loss,
        });
    }
    Ok(PretrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        source_dice: mean_dice(model, samples)?,
    })
}

fn batch_gradient(
    model: &Backbone,
    samples: &[StreamSample],
    batch: &[usize],
    pixels_per_image: usize,
    pixel_rng: &mut Rng,
    drop_rng: &mut Rng,
) -> Result<(f64, Vec<Tensor2>)> {
    let mut patches = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    for &i in batch {
        let s = &samples[i];
        let mut pixels: Vec<usize> = (0..s.image.pixels()).collect();
        if pixels_per_image > 0 && pixels_per_image < pixels.len() {
            pixel_rng.shuffle(&mut pixels);
            pixels.truncate(pixels_per_image);
            pixels.sort_unstable();
        }
        patches.push(extract_patches(&s.image, &pixels)?);
        labels.extend(pixels.iter().map(|&p| s.mask[p]));
    }
    let refs: Vec<&Tensor2> = patches.iter().collect();
    let patches = Tensor2::concat_rows(&refs)?;
    let n = patches.rows();
    let mask = model.dropout_mask(n, drop_rng);
    let mut onehot = Tensor2::zeros(n, NUM_CLASSES);
    for (i, &y) in labels.iter().enumerate() {
        onehot.set(i, y as usize, 1.0);
    }

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let feats = encode_tape(&mut tape, &vars, patches, Some(mask))?;
    let probs = head_tape(&mut tape, &vars, feats)?;
    let probs = tape.clamp_min(probs, 1e-12)?;
    let logp = tape.log(probs)?;
    let target = tape.constant(onehot);
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0 / n as f64)?;
    let grads = tape.backward(loss)?;
    let g = [vars.w1, vars.b1, vars.w2, vars.b2, vars.wh, vars.bh]
        .iter()
        .map(|&v| grads.get(v))
        .collect();
    Ok((tape.scalar(loss), g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{generate_stream, DomainSpec};

    fn small_image(size: usize) -> Image {
        let data = (0..size * size).map(|i| (i % 7) as f64 / 7.0).collect();
        Image::new(size, size, data).unwrap()
    }

    fn model(dropout: f64) -> Backbone {
        let cfg = BackboneConfig {
            dropout,
            ..Default::default()
        };
        Backbone::new(cfg, &mut Rng::new(0, Purpose::Init)).unwrap()
    }

    #[test]
    fn inactive_dropout_is_deterministic() {
        let m = model(0.1);
        let img = small_image(8);
        assert_eq!(
            m.forward(&img, None).unwrap(),
            m.forward(&img, None).unwrap()
        );
    }

    #[test]
    fn active_dropout_draws_fresh_masks() {
        let m = model(0.3);
        let img = small_image(8);
        let mut rng = Rng::new(1, Purpose::Dropout);
        let a = m.forward(&img, Some(&mut rng)).unwrap();
        let b = m.forward(&img, Some(&mut rng)).unwrap();
        assert_ne!(a.features, b.features);
    }

    #[test]
    fn zero_rate_dropout_matches_inactive() {
        let m = model(0.0);
        let img = small_image(8);
        let mut rng = Rng::new(1, Purpose::Dropout);
        assert_eq!(
            m.forward(&img, Some(&mut rng)).unwrap(),
            m.forward(&img, None).unwrap()
        );
    }

    #[test]
    fn zero_head_predicts_uniform() {
        let mut m = model(0.1);
        m.wh = Tensor2::zeros(16, 3);
        let out = m.forward(&small_image(6), None).unwrap();
        for v in out.probs.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn predictions_are_distributions() {
        let m = model(0.1);
        let out = m.forward(&small_image(9), None).unwrap();
        for i in 0..out.probs.rows() {
            let s: f64 = out.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn uninitialized_model_is_rejected() {
        let mut m = model(0.1);
        m.w2 = Tensor2::zeros(0, 0);
        assert!(matches!(
            m.forward(&small_image(6), None),
            Err(Error::Uninitialized(_))
        ));
        let m = model(0.1);
        assert!(m.forward(&small_image(4), None).is_err());
    }

    #[test]
    fn reflect_padded_patch_at_corner() {
        let img = Image::new(5, 5, (0..25).map(|v| v as f64).collect()).unwrap();
        let p = extract_patches(&img, &[0]).unwrap();
        // Row offsets -2..=2 map to rows 2,1,0,1,2.
        let first_row: Vec<f64> = p.row(0)[..5].iter().map(|v| v + 0.5).collect();
        assert_eq!(first_row, vec![12.0, 11.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut m = model(0.1);
        let before = m.clone();
        let samples = generate_stream(0, &[DomainSpec::source()], 2, false, 12).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let rep = pretrain(&mut m, &samples, &cfg, 0).unwrap();
        assert_eq!(m, before);
        assert_eq!(rep.initial_loss, rep.final_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = model(0.1);
        let samples = generate_stream(0, &[DomainSpec::source()], 2, false, 12).unwrap();
        let cfg = PretrainConfig {
            epochs: 3,
            lr: 1e200,
            ..Default::default()
        };
        let err = pretrain(&mut m, &samples, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }
}
