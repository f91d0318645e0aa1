//! Training objectives and their analytic input gradients.
//!
//! Every loss is a mean over its elements (cross-entropy terms average over
//! pixels), so values are comparable across image sizes. Probabilities are
//! clamped at [`CLAMP_EPS`] before any logarithm; inside a clamped region the
//! loss is constant, so the matching gradient there is zero. Loss values are
//! reported in `f64` regardless of the tensor element type.

use ndarray::{Array3, ArrayView3};

use crate::embedding::SegMap;
use crate::error::{Error, Result};
use crate::Scalar;

/// Lower clamp for probabilities entering a logarithm (and the mirrored
/// upper clamp `1 - CLAMP_EPS` for their complements).
pub const CLAMP_EPS: f64 = 1e-7;

fn check_same_shape<F: Scalar>(
    what: &str,
    a: ArrayView3<F>,
    b: ArrayView3<F>,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<F: Scalar>(est: ArrayView3<F>, target: ArrayView3<F>) -> Result<f64> {
    check_same_shape("l1 operands", est, target)?;
    let n = est.len() as f64;
    let mut sum = 0.0;
    ndarray::Zip::from(&est).and(&target).for_each(|&e, &t| {
        sum += (e - t).to_f64().abs();
    });
    Ok(sum / n)
}

/// d(l1)/d(est): sign(est - target) / N, with sign(0) = 0.
pub fn l1_grad<F: Scalar>(est: ArrayView3<F>, target: ArrayView3<F>) -> Result<Array3<F>> {
    check_same_shape("l1 operands", est, target)?;
    let inv_n = F::from_f64(1.0 / est.len() as f64);
    let mut grad = est.to_owned();
    ndarray::Zip::from(&mut grad).and(&target).for_each(|g, &t| {
        let d = *g - t;
        *g = if d > F::zero() {
            inv_n
        } else if d < F::zero() {
            -inv_n
        } else {
            F::zero()
        };
    });
    Ok(grad)
}

/// Mean squared difference.
pub fn rec_loss<F: Scalar>(rec: ArrayView3<F>, target: ArrayView3<F>) -> Result<f64> {
    check_same_shape("reconstruction operands", rec, target)?;
    let n = rec.len() as f64;
    let mut sum = 0.0;
    ndarray::Zip::from(&rec).and(&target).for_each(|&r, &t| {
        let d = (r - t).to_f64();
        sum += d * d;
    });
    Ok(sum / n)
}

/// d(mse)/d(rec): 2 (rec - target) / N.
pub fn rec_grad<F: Scalar>(rec: ArrayView3<F>, target: ArrayView3<F>) -> Result<Array3<F>> {
    check_same_shape("reconstruction operands", rec, target)?;
    let scale = F::from_f64(2.0 / rec.len() as f64);
    let mut grad = rec.to_owned();
    ndarray::Zip::from(&mut grad).and(&target).for_each(|g, &t| {
        *g = (*g - t) * scale;
    });
    Ok(grad)
}

/// Binary cross-entropy of a probability map against a constant target
/// (true = 1, false = 0), averaged over elements.
pub fn bce_loss<F: Scalar>(probs: ArrayView3<F>, target_real: bool) -> f64 {
    let n = probs.len() as f64;
    let mut sum = 0.0;
    for &p in probs.iter() {
        let pc = p.to_f64().clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        sum -= if target_real { pc.ln() } else { (1.0 - pc).ln() };
    }
    sum / n
}

/// d(bce)/d(probs). Zero where the input sits in a clamped region.
pub fn bce_grad<F: Scalar>(probs: ArrayView3<F>, target_real: bool) -> Array3<F> {
    let inv_n = 1.0 / probs.len() as f64;
    probs.mapv(|p| {
        let pf = p.to_f64();
        if !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&pf) {
            return F::zero();
        }
        let g = if target_real { -1.0 / pf } else { 1.0 / (1.0 - pf) };
        F::from_f64(g * inv_n)
    })
}

/// Discriminator and generator sides of the adversarial objective for one
/// real/fake pair of patch grids:
/// d_loss = (bce(D(real), 1) + bce(D(fake), 0)) / 2, g_loss = bce(D(fake), 1).
pub fn adversarial_losses<F: Scalar>(
    d_real: ArrayView3<F>,
    d_fake: ArrayView3<F>,
) -> (f64, f64) {
    let d_loss = 0.5 * (bce_loss(d_real, true) + bce_loss(d_fake, false));
    let g_loss = bce_loss(d_fake, true);
    (d_loss, g_loss)
}

fn check_seg_operands<F: Scalar>(probs: ArrayView3<F>, gt: &SegMap) -> Result<()> {
    let (k, h, w) = probs.dim();
    if k != gt.num_labels() || h != gt.height() as usize || w != gt.width() as usize {
        return Err(Error::shape(format!(
            "probability map is {:?} but ground truth is ({}, {}, {})",
            probs.dim(),
            gt.num_labels(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Pixel-wise cross-entropy: mean over pixels of -ln p[true label].
pub fn seg_loss<F: Scalar>(probs: ArrayView3<F>, gt: &SegMap) -> Result<f64> {
    check_seg_operands(probs, gt)?;
    let (_, h, w) = probs.dim();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let l = gt.get(x as u32, y as u32) as usize;
            let p = probs[[l, y, x]].to_f64().max(CLAMP_EPS);
            sum -= p.ln();
        }
    }
    Ok(sum / (h * w) as f64)
}

/// d(seg_loss)/d(probs): -1 / (N p) at the true channel of each pixel, zero
/// elsewhere and zero below the clamp.
pub fn seg_grad<F: Scalar>(probs: ArrayView3<F>, gt: &SegMap) -> Result<Array3<F>> {
    check_seg_operands(probs, gt)?;
    let (k, h, w) = probs.dim();
    let inv_n = 1.0 / (h * w) as f64;
    let mut grad = Array3::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = gt.get(x as u32, y as u32) as usize;
            let p = probs[[l, y, x]].to_f64();
            if p > CLAMP_EPS {
                grad[[l, y, x]] = F::from_f64(-inv_n / p);
            }
        }
    }
    Ok(grad)
}

/// Sum over levels of the mean squared difference between paired feature
/// maps (one encoder and one decoder map per level).
pub fn int_loss<F: Scalar>(enc: &[Array3<F>], dec: &[Array3<F>]) -> Result<f64> {
    if enc.len() != dec.len() {
        return Err(Error::shape(format!(
            "interconnection lists differ in length: {} vs {}",
            enc.len(),
            dec.len()
        )));
    }
    let mut total = 0.0;
    for (e, d) in enc.iter().zip(dec) {
        total += rec_loss(e.view(), d.view())?;
    }
    Ok(total)
}

/// Per-level gradients of [`int_loss`] with respect to the encoder maps and
/// the decoder maps (the latter is the negation of the former).
#[allow(clippy::type_complexity)]
pub fn int_grads<F: Scalar>(
    enc: &[Array3<F>],
    dec: &[Array3<F>],
) -> Result<(Vec<Array3<F>>, Vec<Array3<F>>)> {
    if enc.len() != dec.len() {
        return Err(Error::shape(format!(
            "interconnection lists differ in length: {} vs {}",
            enc.len(),
            dec.len()
        )));
    }
    let mut ge = Vec::with_capacity(enc.len());
    let mut gd = Vec::with_capacity(enc.len());
    for (e, d) in enc.iter().zip(dec) {
        let g = rec_grad(e.view(), d.view())?;
        gd.push(g.mapv(|v| -v));
        ge.push(g);
    }
    Ok((ge, gd))
}

/// Relative weights of the composite objectives.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_seg: f64,
    pub lambda_rec: f64,
    pub lambda_int: f64,
}

/// Weighted multi-task objective; the interconnection term participates only
/// when a value is supplied.
pub fn joint_loss(seg: f64, rec: f64, int: Option<f64>, w: &LossWeights) -> f64 {
    w.lambda_seg * seg + w.lambda_rec * rec + int.map_or(0.0, |i| w.lambda_int * i)
}

/// Full generator objective of the adversarial methods.
pub fn gan_generator_loss(g_adv: f64, l1: f64, lambda_l1: f64) -> f64 {
    g_adv + lambda_l1 * l1
}
