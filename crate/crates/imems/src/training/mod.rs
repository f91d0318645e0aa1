//! Training loops for the six segmentation methods, epoch selection by
//! validation loss, whole-image prediction, and the lambda grid search.
//!
//! All randomness (weight init, epoch shuffling, dropout) flows from
//! decorrelated streams of the one seed in [`TrainConfig`], so a config
//! reproduces its run exactly. Inputs of any size are padded symmetrically
//! to the network stride; losses and their gradients live on the original
//! (cropped) region, except the adversarial term, which scores the padded
//! canvas the discriminator actually sees.

pub mod optim;

use std::fmt;

use ndarray::{concatenate, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetItem};
use crate::embedding::{self, RgbImage, SegMap};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, ConfusionMatrix, MetricsReport};
use crate::losses::{self, LossWeights};
use crate::nets::{
    self, crop_to, discriminator_spec, embed_cropped_grad, generator_spec, pad_to_multiple,
    CheckpointMeta, Head, LevelGrads, MultiTaskNet, Network, Parameters, PatchDiscriminator,
    UNet,
};

pub use optim::Adam;

/// The six training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Adversarial image-to-image regression onto embedded channels.
    Imems,
    /// Plain UNet classifier with pixel cross-entropy.
    UnetCSingle,
    /// Adversarial classifier: generator emits a softmax label map, the
    /// discriminator compares it against the one-hot ground truth.
    CganCSingle,
    /// Plain UNet regression onto embedded channels with L1.
    UnetRSingle,
    /// Multi-task UNet: classification plus input reconstruction.
    UnetCMulti,
    /// Multi-task UNet with the per-level interconnection term.
    UnetCMultiInt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Imems,
        Method::UnetCSingle,
        Method::CganCSingle,
        Method::UnetRSingle,
        Method::UnetCMulti,
        Method::UnetCMultiInt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Imems => "imems",
            Method::UnetCSingle => "unet-c-single",
            Method::CganCSingle => "cgan-c-single",
            Method::UnetRSingle => "unet-r-single",
            Method::UnetCMulti => "unet-c-multi",
            Method::UnetCMultiInt => "unet-c-multi-int",
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Method::Imems | Method::CganCSingle)
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, Method::UnetCMulti | Method::UnetCMultiInt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|e| Error::parse("method name", e.to_string()))
    }
}

fn d_epochs() -> usize {
    300
}
fn d_batch() -> usize {
    1
}
fn d_lambda_l1() -> f64 {
    100.0
}
fn d_lr() -> f64 {
    2e-4
}
fn d_seed() -> u64 {
    0
}
fn d_depth() -> usize {
    4
}
fn d_base() -> usize {
    64
}
fn d_dropout() -> f64 {
    0.2
}
fn d_val_fraction() -> f64 {
    0.2
}

/// Full training configuration. Every field except `method` has the
/// published default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lambda_l1")]
    pub lambda_l1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_seg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_rec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_int: Option<f64>,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_base")]
    pub base_filters: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            epochs: d_epochs(),
            batch_size: d_batch(),
            lambda_l1: d_lambda_l1(),
            lambda_seg: None,
            lambda_rec: None,
            lambda_int: None,
            lr: d_lr(),
            seed: d_seed(),
            depth: d_depth(),
            base_filters: d_base(),
            dropout: d_dropout(),
            val_fraction: d_val_fraction(),
        }
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        serde_json::from_str(raw).map_err(|e| Error::parse("train config", e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
            .map_err(|e| Error::parse(format!("train config {}", path.display()), e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::config("lambda_l1 must be finite and >= 0"));
        }
        if !(1..=8).contains(&self.depth) {
            return Err(Error::config(format!(
                "depth must be in 1..=8, got {}",
                self.depth
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::config("base_filters must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.method.is_adversarial() && self.batch_size != 1 {
            return Err(Error::config(
                "adversarial methods support batch_size = 1 only",
            ));
        }
        if self.method.is_multitask() {
            let seg = self.lambda_seg.ok_or_else(|| {
                Error::config(format!("{} requires lambda_seg", self.method))
            })?;
            if !(0.0..=1.0).contains(&seg) {
                return Err(Error::config(format!(
                    "lambda_seg must be in [0, 1], got {seg}"
                )));
            }
            if let Some(rec) = self.lambda_rec {
                if (rec - (1.0 - seg)).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "lambda_rec must equal 1 - lambda_seg = {}, got {rec}",
                        1.0 - seg
                    )));
                }
            }
            match (self.method, self.lambda_int) {
                (Method::UnetCMultiInt, None) => {
                    return Err(Error::config("unet-c-multi-int requires lambda_int"));
                }
                (Method::UnetCMultiInt, Some(int)) if !(int >= 0.0 && int.is_finite()) => {
                    return Err(Error::config("lambda_int must be finite and >= 0"));
                }
                (Method::UnetCMulti, Some(_)) => {
                    return Err(Error::config(
                        "lambda_int only applies to unet-c-multi-int",
                    ));
                }
                _ => {}
            }
        } else if self.lambda_seg.is_some()
            || self.lambda_rec.is_some()
            || self.lambda_int.is_some()
        {
            return Err(Error::config(format!(
                "lambda_seg/lambda_rec/lambda_int only apply to multitask methods, not {}",
                self.method
            )));
        }
        Ok(())
    }

    /// Validate and fill derived fields (`lambda_rec = 1 - lambda_seg`), so
    /// the echoed configuration is complete.
    pub fn resolved(&self) -> Result<TrainConfig> {
        self.validate()?;
        let mut cfg = self.clone();
        if cfg.method.is_multitask() && cfg.lambda_rec.is_none() {
            cfg.lambda_rec = Some(1.0 - cfg.lambda_seg.expect("validated"));
        }
        Ok(cfg)
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_l1: self.lambda_l1,
            lambda_seg: self.lambda_seg.unwrap_or(0.0),
            lambda_rec: self.lambda_rec.unwrap_or(0.0),
            lambda_int: self.lambda_int.unwrap_or(0.0),
        }
    }
}

/// Per-epoch losses and the selected (1-based) epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub selected_epoch: usize,
}

impl TrainHistory {
    fn new() -> Self {
        TrainHistory {
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            selected_epoch: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    /// CSV with the fixed header `epoch,train_loss,val_loss` and six
    /// decimals, so identical runs write identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            out.push_str(&format!("{},{t:.6},{v:.6}\n", i + 1));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// A borrowed image/mask pair, the unit all trainers consume.
#[derive(Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a RgbImage,
    pub mask: &'a SegMap,
}

impl<'a> From<&'a DatasetItem> for Sample<'a> {
    fn from(item: &'a DatasetItem) -> Self {
        Sample {
            image: &item.image,
            mask: &item.mask,
        }
    }
}

pub fn dataset_samples<'a>(items: &[&'a DatasetItem]) -> Vec<Sample<'a>> {
    items.iter().map(|&i| Sample::from(i)).collect()
}

/// A trained network plus the provenance that goes into its checkpoint.
pub struct TrainedModel {
    pub net: Network<f32>,
    pub meta: CheckpointMeta,
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_INIT_D: u64 = 3;
const STREAM_VAL_SPLIT: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, stream))
}

/// Carve a seeded validation subset out of `indices` (used when a manifest
/// has no explicit validation split). Returns (train, val), both sorted.
pub fn split_validation(
    indices: &[usize],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if indices.len() < 2 {
        return Err(Error::config(
            "need at least 2 training items to carve out a validation set",
        ));
    }
    let n = indices.len();
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut rng_for(seed, STREAM_VAL_SPLIT));
    let mut val: Vec<usize> = shuffled[..n_val].to_vec();
    let mut train: Vec<usize> = shuffled[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Precomputed per-sample tensors.
struct Prep {
    /// Padded normalized input.
    x: Array3<f32>,
    /// Unpadded normalized input (reconstruction target).
    x_core: Array3<f32>,
    /// Original (height, width).
    hw: (usize, usize),
    mask: SegMap,
    /// Unpadded regression target: embedded channels or one-hot labels.
    channels: Option<Array3<f32>>,
    /// Discriminator input for the real pair: image + padded target.
    real_in: Option<Array3<f32>>,
}

fn prepare(samples: &[Sample<'_>], method: Method, stride: usize) -> Result<Vec<Prep>> {
    samples
        .iter()
        .map(|s| {
            if s.image.width() != s.mask.width() || s.image.height() != s.mask.height() {
                return Err(Error::shape(format!(
                    "image is {}x{} but mask is {}x{}",
                    s.image.width(),
                    s.image.height(),
                    s.mask.width(),
                    s.mask.height()
                )));
            }
            let x_core = data::normalize::<f32>(s.image);
            let (x, hw) = pad_to_multiple(&x_core, stride);
            let channels = match method {
                Method::Imems | Method::UnetRSingle => {
                    let gray = embedding::to_grayscale(s.image);
                    let embedded = embedding::encode(&gray, s.mask)?;
                    Some(embedded.to_normalized::<f32>())
                }
                Method::CganCSingle => Some(s.mask.to_onehot::<f32>()),
                _ => None,
            };
            let real_in = if method.is_adversarial() {
                let t = channels.as_ref().expect("adversarial methods have targets");
                let (tp, _) = pad_to_multiple(t, stride);
                Some(concatenate(Axis(0), &[x.view(), tp.view()]).expect("channel concat"))
            } else {
                None
            };
            Ok(Prep {
                x,
                x_core,
                hw,
                mask: s.mask.clone(),
                channels,
                real_in,
            })
        })
        .collect()
}

fn snapshot<P: Parameters<f32> + ?Sized>(net: &mut P) -> Vec<f32> {
    let mut out = Vec::new();
    net.visit_params("", &mut |_, slots| out.extend(slots.value.iter().copied()));
    out
}

fn restore<P: Parameters<f32> + ?Sized>(net: &mut P, snap: &[f32]) {
    let mut cursor = 0;
    net.visit_params("", &mut |_, mut slots| {
        for dst in slots.value.iter_mut() {
            *dst = snap[cursor];
            cursor += 1;
        }
    });
    assert_eq!(cursor, snap.len(), "snapshot matches parameter count");
}

/// Tracks the lowest validation loss seen so far; NaN never wins, and the
/// first epoch always sets a baseline so a best snapshot always exists.
struct Selection {
    best_val: f64,
    snap: Vec<f32>,
    epoch: usize,
}

impl Selection {
    fn empty() -> Self {
        Selection {
            best_val: f64::INFINITY,
            snap: Vec::new(),
            epoch: 0,
        }
    }

    fn offer<P: Parameters<f32> + ?Sized>(&mut self, val: f64, epoch: usize, net: &mut P) {
        let improves =
            self.epoch == 0 || val < self.best_val || (self.best_val.is_nan() && !val.is_nan());
        if improves {
            self.best_val = val;
            self.snap = snapshot(net);
            self.epoch = epoch;
        }
    }
}

fn plain_loss_grad(method: Method, out: &Array3<f32>, p: &Prep) -> Result<(f64, Array3<f32>)> {
    let (h, w) = p.hw;
    let (_, ph, pw) = out.dim();
    let out_c = crop_to(out, h, w);
    match method {
        Method::UnetCSingle => {
            let loss = losses::seg_loss(out_c.view(), &p.mask)?;
            let g = losses::seg_grad(out_c.view(), &p.mask)?;
            Ok((loss, embed_cropped_grad(&g, ph, pw)))
        }
        Method::UnetRSingle => {
            let t = p.channels.as_ref().expect("regression target");
            let loss = losses::l1_loss(out_c.view(), t.view())?;
            let g = losses::l1_grad(out_c.view(), t.view())?;
            Ok((loss, embed_cropped_grad(&g, ph, pw)))
        }
        other => unreachable!("plain trainer got {other}"),
    }
}

fn train_plain(
    train: &[Prep],
    val: &[Prep],
    cfg: &TrainConfig,
    k: usize,
) -> Result<(Network<f32>, TrainHistory)> {
    let head = if cfg.method == Method::UnetCSingle {
        Head::Softmax
    } else {
        Head::Linear
    };
    let spec = generator_spec(k, head, cfg.depth, cfg.base_filters, cfg.dropout);
    let mut net = UNet::new(spec, &mut rng_for(cfg.seed, STREAM_INIT))?;
    let mut shuffle_rng = rng_for(cfg.seed, STREAM_SHUFFLE);
    let mut drop_rng = rng_for(cfg.seed, STREAM_DROPOUT);
    let mut adam = Adam::new(cfg.lr);
    let mut history = TrainHistory::new();
    let mut sel = Selection::empty();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut train_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            nets::zero_grads(&mut net);
            for &i in chunk {
                let p = &train[i];
                let out = net.forward(&p.x, true, &mut drop_rng)?;
                let (loss, g) = plain_loss_grad(cfg.method, &out, p)?;
                train_sum += loss;
                net.backward(&g);
            }
            adam.step(&mut net, 1.0 / chunk.len() as f64);
        }
        let mut val_sum = 0.0;
        for p in val {
            let out = net.forward(&p.x, false, &mut drop_rng)?;
            let (loss, _) = plain_loss_grad(cfg.method, &out, p)?;
            val_sum += loss;
        }
        let val_loss = val_sum / val.len() as f64;
        history.train_loss.push(train_sum / train.len() as f64);
        history.val_loss.push(val_loss);
        sel.offer(val_loss, epoch, &mut net);
    }
    restore(&mut net, &sel.snap);
    history.selected_epoch = sel.epoch;
    Ok((Network::Generator(net), history))
}

fn train_gan(
    train: &[Prep],
    val: &[Prep],
    cfg: &TrainConfig,
    k: usize,
) -> Result<(Network<f32>, TrainHistory)> {
    let head = if cfg.method == Method::Imems {
        Head::Linear
    } else {
        Head::Softmax
    };
    let g_spec = generator_spec(k, head, cfg.depth, cfg.base_filters, cfg.dropout);
    let d_spec = discriminator_spec(k, cfg.depth, cfg.base_filters, cfg.dropout);
    let mut g_net = UNet::new(g_spec, &mut rng_for(cfg.seed, STREAM_INIT))?;
    let mut d_net = PatchDiscriminator::new(d_spec, &mut rng_for(cfg.seed, STREAM_INIT_D))?;
    let mut shuffle_rng = rng_for(cfg.seed, STREAM_SHUFFLE);
    let mut drop_rng = rng_for(cfg.seed, STREAM_DROPOUT);
    let mut adam_g = Adam::new(cfg.lr);
    let mut adam_d = Adam::new(cfg.lr);
    let mut history = TrainHistory::new();
    let mut sel = Selection::empty();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut train_sum = 0.0;
        for &i in &order {
            let p = &train[i];
            let real_in = p.real_in.as_ref().expect("prepared real pair");
            let target = p.channels.as_ref().expect("prepared target");
            let (h, w) = p.hw;

            // Generator forward; the fake conditioned pair reuses the same
            // padded input image.
            let fake = g_net.forward(&p.x, true, &mut drop_rng)?;
            let fake_in = concatenate(Axis(0), &[p.x.view(), fake.view()])
                .expect("channel concat");

            // Discriminator update: one step on the real and fake pair.
            // Backward runs right after each forward (single-slot caches);
            // the fake's input gradient is discarded, detaching the
            // generator.
            nets::zero_grads(&mut d_net);
            let d_real = d_net.forward(real_in, true, &mut drop_rng)?;
            let loss_real = losses::bce_loss(d_real.view(), true);
            let g_real = losses::bce_grad(d_real.view(), true).mapv(|v| v * 0.5);
            d_net.backward(&g_real);
            let d_fake = d_net.forward(&fake_in, true, &mut drop_rng)?;
            let loss_fake = losses::bce_loss(d_fake.view(), false);
            let g_fake_d = losses::bce_grad(d_fake.view(), false).mapv(|v| v * 0.5);
            d_net.backward(&g_fake_d);
            adam_d.step(&mut d_net, 1.0);
            let _d_loss = 0.5 * (loss_real + loss_fake);

            // Generator update through the freshly updated discriminator.
            nets::zero_grads(&mut g_net);
            nets::zero_grads(&mut d_net);
            let d_fake2 = d_net.forward(&fake_in, true, &mut drop_rng)?;
            let g_adv = losses::bce_loss(d_fake2.view(), true);
            let g_through_d = d_net.backward(&losses::bce_grad(d_fake2.view(), true));
            let mut g_out = g_through_d.slice(ndarray::s![3.., .., ..]).to_owned();

            let fake_c = crop_to(&fake, h, w);
            let l1 = losses::l1_loss(fake_c.view(), target.view())?;
            let gl1 = losses::l1_grad(fake_c.view(), target.view())?
                .mapv(|v| v * cfg.lambda_l1 as f32);
            let (_, ph, pw) = fake.dim();
            g_out += &embed_cropped_grad(&gl1, ph, pw);

            g_net.backward(&g_out);
            adam_g.step(&mut g_net, 1.0);
            train_sum += losses::gan_generator_loss(g_adv, l1, cfg.lambda_l1);
        }

        // Validation selects on L1 alone; the adversarial term is not
        // comparable across epochs while the discriminator moves.
        let mut val_sum = 0.0;
        for p in val {
            let out = g_net.forward(&p.x, false, &mut drop_rng)?;
            let out_c = crop_to(&out, p.hw.0, p.hw.1);
            let target = p.channels.as_ref().expect("prepared target");
            val_sum += losses::l1_loss(out_c.view(), target.view())?;
        }
        let val_loss = val_sum / val.len() as f64;
        history.train_loss.push(train_sum / train.len() as f64);
        history.val_loss.push(val_loss);
        sel.offer(val_loss, epoch, &mut g_net);
    }
    restore(&mut g_net, &sel.snap);
    history.selected_epoch = sel.epoch;
    Ok((Network::Generator(g_net), history))
}

struct MultiStep {
    loss: f64,
    g_seg: Array3<f32>,
    g_rec: Array3<f32>,
    level: Option<LevelGrads<f32>>,
}

fn multitask_losses(
    out: &nets::MultiOut<f32>,
    p: &Prep,
    w: &LossWeights,
    use_int: bool,
) -> Result<MultiStep> {
    let (h, wd) = p.hw;
    let (_, ph, pw) = out.seg.dim();
    let seg_c = crop_to(&out.seg, h, wd);
    let rec_c = crop_to(&out.rec, h, wd);
    let seg = losses::seg_loss(seg_c.view(), &p.mask)?;
    let rec = losses::rec_loss(rec_c.view(), p.x_core.view())?;
    let int = if use_int {
        Some(losses::int_loss(&out.enc_levels, &out.rec_levels)?)
    } else {
        None
    };
    let loss = losses::joint_loss(seg, rec, int, w);

    let g_seg = losses::seg_grad(seg_c.view(), &p.mask)?.mapv(|v| v * w.lambda_seg as f32);
    let g_rec =
        losses::rec_grad(rec_c.view(), p.x_core.view())?.mapv(|v| v * w.lambda_rec as f32);
    let level = if use_int {
        let (ge, gd) = losses::int_grads(&out.enc_levels, &out.rec_levels)?;
        let li = w.lambda_int as f32;
        Some(LevelGrads {
            enc: ge.into_iter().map(|g| g.mapv(|v| v * li)).collect(),
            rec: gd.into_iter().map(|g| g.mapv(|v| v * li)).collect(),
        })
    } else {
        None
    };
    Ok(MultiStep {
        loss,
        g_seg: embed_cropped_grad(&g_seg, ph, pw),
        g_rec: embed_cropped_grad(&g_rec, ph, pw),
        level,
    })
}

fn train_multitask(
    train: &[Prep],
    val: &[Prep],
    cfg: &TrainConfig,
    k: usize,
) -> Result<(Network<f32>, TrainHistory)> {
    let spec = generator_spec(k, Head::Softmax, cfg.depth, cfg.base_filters, cfg.dropout);
    let mut net = MultiTaskNet::new(spec, &mut rng_for(cfg.seed, STREAM_INIT))?;
    let mut shuffle_rng = rng_for(cfg.seed, STREAM_SHUFFLE);
    let mut drop_rng = rng_for(cfg.seed, STREAM_DROPOUT);
    let mut adam = Adam::new(cfg.lr);
    let w = cfg.weights();
    let use_int = cfg.method == Method::UnetCMultiInt;
    let mut history = TrainHistory::new();
    let mut sel = Selection::empty();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut train_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            nets::zero_grads(&mut net);
            for &i in chunk {
                let p = &train[i];
                let out = net.forward(&p.x, true, use_int, &mut drop_rng)?;
                let step = multitask_losses(&out, p, &w, use_int)?;
                train_sum += step.loss;
                net.backward(&step.g_seg, &step.g_rec, step.level.as_ref());
            }
            adam.step(&mut net, 1.0 / chunk.len() as f64);
        }
        let mut val_sum = 0.0;
        for p in val {
            let out = net.forward(&p.x, false, use_int, &mut drop_rng)?;
            val_sum += multitask_losses(&out, p, &w, use_int)?.loss;
        }
        let val_loss = val_sum / val.len() as f64;
        history.train_loss.push(train_sum / train.len() as f64);
        history.val_loss.push(val_loss);
        sel.offer(val_loss, epoch, &mut net);
    }
    restore(&mut net, &sel.snap);
    history.selected_epoch = sel.epoch;
    Ok((Network::Multitask(net), history))
}

/// Train `cfg.method` on the given samples, selecting the epoch with the
/// lowest validation loss. Returns the selected model and the loss history.
pub fn train(
    train_set: &[Sample<'_>],
    val_set: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    let cfg = cfg.resolved()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let k = train_set[0].mask.num_labels();
    for s in train_set.iter().chain(val_set) {
        if s.mask.num_labels() != k {
            return Err(Error::LabelRange(format!(
                "samples disagree on label count: {} vs {k}",
                s.mask.num_labels()
            )));
        }
    }
    let stride = 1usize << cfg.depth;
    let train_prep = prepare(train_set, cfg.method, stride)?;
    let val_prep = prepare(val_set, cfg.method, stride)?;

    let (net, history) = match cfg.method {
        Method::UnetCSingle | Method::UnetRSingle => {
            train_plain(&train_prep, &val_prep, &cfg, k)?
        }
        Method::Imems | Method::CganCSingle => train_gan(&train_prep, &val_prep, &cfg, k)?,
        Method::UnetCMulti | Method::UnetCMultiInt => {
            train_multitask(&train_prep, &val_prep, &cfg, k)?
        }
    };
    let meta = CheckpointMeta {
        method: cfg.method.name().to_string(),
        num_labels: k,
        seed: cfg.seed,
        epochs_run: cfg.epochs,
        selected_epoch: history.selected_epoch,
    };
    Ok((TrainedModel { net, meta }, history))
}

/// Channel estimates for an image of any size: pad to the network stride,
/// run in eval mode, crop back. Generators return their head output;
/// multi-task nets return the segmentation probabilities.
pub fn predict_channels(net: &mut Network<f32>, image: &RgbImage) -> Result<Array3<f32>> {
    let x = data::normalize::<f32>(image);
    let stride = net.spec().stride();
    let (xp, (h, w)) = pad_to_multiple(&x, stride);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = match net {
        Network::Generator(g) => g.forward(&xp, false, &mut rng)?,
        Network::Multitask(m) => m.forward(&xp, false, false, &mut rng)?.seg,
        Network::Discriminator(_) => {
            return Err(Error::config(
                "a discriminator checkpoint cannot produce a segmentation",
            ))
        }
    };
    Ok(crop_to(&out, h, w))
}

/// Predicted label map: argmax over [`predict_channels`].
pub fn predict(net: &mut Network<f32>, image: &RgbImage) -> Result<SegMap> {
    let channels = predict_channels(net, image)?;
    embedding::decode_channels(channels.view())
}

/// Pooled metrics of a model over a sample set.
pub fn evaluate_model(net: &mut Network<f32>, samples: &[Sample<'_>]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let k = samples[0].mask.num_labels();
    let mut cm = ConfusionMatrix::new(k)?;
    for s in samples {
        let pred = predict(net, s.image)?;
        cm.accumulate(s.mask, &pred)?;
    }
    compute_metrics(&cm)
}

/// One evaluated grid point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub lambda: f64,
    pub report: MetricsReport,
}

/// Parse a lambda grid: either a single value or `start:stop:step`
/// (inclusive of `stop` when the step divides the range).
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |detail: &str| Error::parse(format!("grid '{s}'"), detail.to_string());
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [single] => {
            let v: f64 = single.parse().map_err(|_| bad("not a number"))?;
            Ok(vec![v])
        }
        [start, stop, step] => {
            let start: f64 = start.parse().map_err(|_| bad("bad start"))?;
            let stop: f64 = stop.parse().map_err(|_| bad("bad stop"))?;
            let step: f64 = step.parse().map_err(|_| bad("bad step"))?;
            if !(step > 0.0) || !step.is_finite() {
                return Err(bad("step must be positive"));
            }
            if stop < start {
                return Err(bad("stop must be >= start"));
            }
            let span = stop - start;
            let n_exact = span / step;
            let n_round = n_exact.round();
            let count = if (start + n_round * step - stop).abs() < 1e-9 {
                n_round as usize + 1
            } else {
                (n_exact + 1e-9).floor() as usize + 1
            };
            Ok((0..count)
                .map(|i| {
                    let v = start + i as f64 * step;
                    (v * 1e12).round() / 1e12
                })
                .collect())
        }
        _ => Err(bad("expected a number or start:stop:step")),
    }
}

/// Train one model per grid value and score each on `eval_set`; the swept
/// parameter is `lambda_seg` for unet-c-multi and `lambda_int` for
/// unet-c-multi-int. All points share the same seed. Returns the winning
/// lambda (highest average F; earliest wins ties) and every point's report.
pub fn grid_search(
    train_set: &[Sample<'_>],
    val_set: &[Sample<'_>],
    eval_set: &[Sample<'_>],
    base: &TrainConfig,
    grid: &[f64],
) -> Result<(f64, Vec<GridPoint>)> {
    if grid.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    if !base.method.is_multitask() {
        return Err(Error::config(format!(
            "grid search applies to multitask methods, not {}",
            base.method
        )));
    }
    for &v in grid {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!(
                "grid values must be in [0, 1], got {v}"
            )));
        }
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let mut cfg = base.clone();
        match cfg.method {
            Method::UnetCMulti => {
                cfg.lambda_seg = Some(lambda);
                cfg.lambda_rec = None;
            }
            Method::UnetCMultiInt => {
                cfg.lambda_int = Some(lambda);
            }
            _ => unreachable!("checked above"),
        }
        let (mut model, _) = train(train_set, val_set, &cfg)?;
        let report = evaluate_model(&mut model.net, eval_set)?;
        let score = if report.average_f.is_nan() {
            f64::NEG_INFINITY
        } else {
            report.average_f
        };
        if best.map_or(true, |(b, _)| score > b) {
            best = Some((score, lambda));
        }
        points.push(GridPoint { lambda, report });
    }
    Ok((best.expect("nonempty grid").1, points))
}
