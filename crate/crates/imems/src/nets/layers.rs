//! Network building blocks on (C, H, W) ndarray tensors.
//!
//! Layers run one sample at a time and keep a single-slot cache from the
//! last forward pass, so backward must follow its forward before the layer
//! runs again. Convolutions lower to im2col plus one matrix product. Every
//! parameter carries its gradient and Adam moment buffers; [`Slots`] exposes
//! all four to visitors (optimizer steps, checkpoints, counting).

use ndarray::{s, Array1, Array2, Array3, ArrayViewMutD, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Scalar;

/// Standard deviation of the weight initialization.
pub const INIT_STDDEV: f64 = 0.02;

/// Mutable views over one parameter tensor: value, gradient, and the two
/// Adam moment accumulators.
pub struct Slots<'a, F> {
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
    pub m: ArrayViewMutD<'a, F>,
    pub v: ArrayViewMutD<'a, F>,
}

/// Anything holding trainable parameters. Traversal order is fixed by the
/// module structure, which makes checkpoints and updates deterministic.
pub trait Parameters<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slots<'_, F>));
}

pub fn zero_grads<F: Scalar, P: Parameters<F> + ?Sized>(net: &mut P) {
    net.visit_params("", &mut |_, mut slots| slots.grad.fill(F::zero()));
}

pub fn param_count<F: Scalar, P: Parameters<F> + ?Sized>(net: &mut P) -> usize {
    let mut n = 0;
    net.visit_params("", &mut |_, slots| n += slots.value.len());
    n
}

fn draw_normal<F: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    let dist = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
    (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
}

pub(crate) fn relu_inplace<F: Scalar>(x: &mut Array3<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Zero the gradient wherever the cached post-activation is zero.
pub(crate) fn relu_backward_inplace<F: Scalar>(g: &mut Array3<F>, activated: &Array3<F>) {
    Zip::from(g).and(activated).for_each(|gv, &av| {
        if av <= F::zero() {
            *gv = F::zero();
        }
    });
}

/// Lower a (C, H, W) tensor to a (C*k*k, H*W) patch matrix with zero padding
/// of k/2, so a stride-1 convolution becomes `weights.dot(&cols)`.
fn im2col<F: Scalar>(x: &Array3<F>, k: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((c * k * k, h * w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let off_x = kx as isize - pad;
                let x0 = (-off_x).max(0) as usize;
                let x1 = ((w as isize - off_x).min(w as isize)) as usize;
                if x0 >= x1 {
                    continue;
                }
                let sx0 = (x0 as isize + off_x) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ci, sy as usize, sx0..sx0 + (x1 - x0)]);
                    let mut dst = cols.slice_mut(s![row, y * w + x0..y * w + x1]);
                    dst.assign(&src);
                }
            }
        }
    }
    cols
}

/// Scatter-add the transpose of [`im2col`]: accumulate patch-matrix
/// gradients back onto the input layout.
fn col2im<F: Scalar>(cols: &Array2<F>, c: usize, h: usize, w: usize, k: usize) -> Array3<F> {
    let pad = (k / 2) as isize;
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let off_x = kx as isize - pad;
                let x0 = (-off_x).max(0) as usize;
                let x1 = ((w as isize - off_x).min(w as isize)) as usize;
                if x0 >= x1 {
                    continue;
                }
                let sx0 = (x0 as isize + off_x) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = cols.slice(s![row, y * w + x0..y * w + x1]);
                    let mut dst = x.slice_mut(s![ci, sy as usize, sx0..sx0 + (x1 - x0)]);
                    dst += &src;
                }
            }
        }
    }
    x
}

/// Stride-1 same-padding convolution with a k x k kernel (k odd). Weights
/// are stored flattened as (c_out, c_in * k * k).
pub struct Conv2d<F> {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    w: Array2<F>,
    b: Array1<F>,
    gw: Array2<F>,
    gb: Array1<F>,
    mw: Array2<F>,
    vw: Array2<F>,
    mb: Array1<F>,
    vb: Array1<F>,
    cols: Option<Array2<F>>,
    in_hw: (usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let cols = c_in * k * k;
        let w = Array2::from_shape_vec((c_out, cols), draw_normal(c_out * cols, rng))
            .expect("shape matches draw count");
        Conv2d {
            c_in,
            c_out,
            k,
            w,
            b: Array1::zeros(c_out),
            gw: Array2::zeros((c_out, cols)),
            gb: Array1::zeros(c_out),
            mw: Array2::zeros((c_out, cols)),
            vw: Array2::zeros((c_out, cols)),
            mb: Array1::zeros(c_out),
            vb: Array1::zeros(c_out),
            cols: None,
            in_hw: (0, 0),
        }
    }

    pub fn forward(&mut self, x: &Array3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let cols = im2col(x, self.k);
        let mut out = self.w.dot(&cols);
        for (mut row, &bv) in out.outer_iter_mut().zip(self.b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        self.cols = Some(cols);
        self.in_hw = (h, w);
        out.into_shape_with_order((self.c_out, h, w))
            .expect("conv output reshapes")
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gout: &Array3<F>) -> Array3<F> {
        let (h, w) = self.in_hw;
        let cols = self.cols.take().expect("backward follows forward");
        let gmat = gout
            .to_shape((self.c_out, h * w))
            .expect("gradient reshapes");
        self.gw += &gmat.dot(&cols.t());
        self.gb += &gmat.sum_axis(ndarray::Axis(1));
        let gcols = self.w.t().dot(&gmat);
        col2im(&gcols, self.c_in, h, w, self.k)
    }
}

impl<F: Scalar> Parameters<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slots<'_, F>)) {
        f(
            &format!("{prefix}.w"),
            Slots {
                value: self.w.view_mut().into_dyn(),
                grad: self.gw.view_mut().into_dyn(),
                m: self.mw.view_mut().into_dyn(),
                v: self.vw.view_mut().into_dyn(),
            },
        );
        f(
            &format!("{prefix}.b"),
            Slots {
                value: self.b.view_mut().into_dyn(),
                grad: self.gb.view_mut().into_dyn(),
                m: self.mb.view_mut().into_dyn(),
                v: self.vb.view_mut().into_dyn(),
            },
        );
    }
}

/// 2x2 max pooling with stride 2. Requires even spatial dimensions; ties go
/// to the first element in scan order.
pub struct MaxPool2 {
    argmax: Option<Vec<u32>>,
    in_dim: (usize, usize, usize),
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 {
            argmax: None,
            in_dim: (0, 0, 0),
        }
    }

    pub fn forward<F: Scalar>(&mut self, x: &Array3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pool input must have even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array3::zeros((c, oh, ow));
        let mut argmax = vec![0u32; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = x[[ci, 2 * y, 2 * xx]];
                    let mut arg = (2 * y * w + 2 * xx) as u32;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        let v = x[[ci, sy, sx]];
                        if v > best {
                            best = v;
                            arg = (sy * w + sx) as u32;
                        }
                    }
                    out[[ci, y, xx]] = best;
                    argmax[(ci * oh + y) * ow + xx] = arg;
                }
            }
        }
        self.argmax = Some(argmax);
        self.in_dim = (c, h, w);
        out
    }

    pub fn backward<F: Scalar>(&mut self, gout: &Array3<F>) -> Array3<F> {
        let (c, h, w) = self.in_dim;
        let argmax = self.argmax.take().expect("backward follows forward");
        let (oh, ow) = (h / 2, w / 2);
        let mut gin = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let flat = argmax[(ci * oh + y) * ow + xx] as usize;
                    gin[[ci, flat / w, flat % w]] += gout[[ci, y, xx]];
                }
            }
        }
        gin
    }
}

/// Nearest-neighbor 2x upsampling.
pub struct Upsample2;

impl Upsample2 {
    pub fn forward<F: Scalar>(&self, x: &Array3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
    }

    pub fn backward<F: Scalar>(&self, gout: &Array3<F>) -> Array3<F> {
        let (c, h2, w2) = gout.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gin = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    gin[[ci, y / 2, xx / 2]] += gout[[ci, y, xx]];
                }
            }
        }
        gin
    }
}

/// Inverted dropout: active only in training mode, scales kept activations
/// by 1/(1-rate) so evaluation needs no rescaling. Rate 0 draws nothing.
pub struct Dropout<F> {
    pub rate: f64,
    mask: Option<Array3<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Dropout { rate, mask: None }
    }

    pub fn forward(&mut self, x: Array3<F>, train: bool, rng: &mut ChaCha8Rng) -> Array3<F> {
        if !train || self.rate == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - self.rate));
        let n = x.len();
        let draws: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = Array3::from_shape_vec(x.dim(), draws).expect("mask matches input");
        let out = &x * &mask;
        self.mask = Some(mask);
        out
    }

    pub fn backward(&mut self, gout: Array3<F>) -> Array3<F> {
        match self.mask.take() {
            Some(mask) => gout * &mask,
            None => gout,
        }
    }
}

/// Two 3x3 conv + ReLU layers followed by dropout: the repeated unit of both
/// the encoder and the decoder.
pub struct ConvBlock<F> {
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
    dropout: Dropout<F>,
    a1: Option<Array3<F>>,
    a2: Option<Array3<F>>,
}

impl<F: Scalar> ConvBlock<F> {
    pub fn new(c_in: usize, c_out: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv1: Conv2d::new(c_in, c_out, 3, rng),
            conv2: Conv2d::new(c_out, c_out, 3, rng),
            dropout: Dropout::new(dropout),
            a1: None,
            a2: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, train: bool, rng: &mut ChaCha8Rng) -> Array3<F> {
        let mut a1 = self.conv1.forward(x);
        relu_inplace(&mut a1);
        let mut a2 = self.conv2.forward(&a1);
        relu_inplace(&mut a2);
        self.a1 = Some(a1);
        let out = self.dropout.forward(a2.clone(), train, rng);
        self.a2 = Some(a2);
        out
    }

    pub fn backward(&mut self, gout: Array3<F>) -> Array3<F> {
        let mut g = self.dropout.backward(gout);
        relu_backward_inplace(&mut g, &self.a2.take().expect("cached activation"));
        let mut g = self.conv2.backward(&g);
        relu_backward_inplace(&mut g, &self.a1.take().expect("cached activation"));
        self.conv1.backward(&g)
    }
}

impl<F: Scalar> Parameters<F> for ConvBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slots<'_, F>)) {
        self.conv1.visit_params(&format!("{prefix}.c1"), f);
        self.conv2.visit_params(&format!("{prefix}.c2"), f);
    }
}

/// Nearest upsample followed by a 3x3 conv + ReLU; the channel-reducing step
/// at the head of each decoder stage.
pub struct UpConv<F> {
    up: Upsample2,
    conv: Conv2d<F>,
    a: Option<Array3<F>>,
}

impl<F: Scalar> UpConv<F> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        UpConv {
            up: Upsample2,
            conv: Conv2d::new(c_in, c_out, 3, rng),
            a: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<F>) -> Array3<F> {
        let up = self.up.forward(x);
        let mut a = self.conv.forward(&up);
        relu_inplace(&mut a);
        self.a = Some(a.clone());
        a
    }

    pub fn backward(&mut self, mut gout: Array3<F>) -> Array3<F> {
        relu_backward_inplace(&mut gout, &self.a.take().expect("cached activation"));
        let g = self.conv.backward(&gout);
        self.up.backward(&g)
    }
}

impl<F: Scalar> Parameters<F> for UpConv<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slots<'_, F>)) {
        self.conv.visit_params(&format!("{prefix}.c"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn identity_kernel_convolution_reproduces_input() {
        let mut conv = Conv2d::<f64>::new(1, 1, 3, &mut rng());
        conv.visit_params("", &mut |name, mut s| {
            if name.ends_with(".w") {
                s.value.fill(0.0);
                s.value[ndarray::IxDyn(&[0, 4])] = 1.0; // center tap
            }
        });
        let x = arr3(&[[[1.0, 2.0], [3.0, 4.0]]]);
        assert_eq!(conv.forward(&x), x);
    }

    #[test]
    fn box_kernel_matches_hand_computed_sums() {
        let mut conv = Conv2d::<f64>::new(1, 1, 3, &mut rng());
        conv.visit_params("", &mut |name, mut s| {
            if name.ends_with(".w") {
                s.value.fill(1.0);
            } else {
                s.value.fill(0.5);
            }
        });
        let x = arr3(&[[[1.0, 2.0], [3.0, 4.0]]]);
        // Zero padding: each output is the sum of the in-range neighbors.
        let y = conv.forward(&x);
        assert_eq!(y, arr3(&[[[10.5, 10.5], [10.5, 10.5]]]));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        // f64 end-to-end so central differences are tight.
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut r);
        let x = Array3::from_shape_vec(
            (2, 4, 4),
            (0..32).map(|i| (i as f64 * 0.37).sin() * 0.5).collect(),
        )
        .unwrap();
        let upstream = Array3::from_shape_vec(
            (3, 4, 4),
            (0..48).map(|i| (i as f64 * 0.23).cos() * 0.5).collect(),
        )
        .unwrap();

        let loss = |conv: &mut Conv2d<f64>, x: &Array3<f64>| -> f64 {
            (&conv.forward(x) * &upstream).sum()
        };

        conv.forward(&x);
        let gin = conv.backward(&upstream);

        // Input gradient.
        let h = 1e-6;
        let mut xp = x.clone();
        for idx in ndarray::indices(x.dim()) {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let up = loss(&mut conv, &xp);
            xp[idx] = orig - h;
            let down = loss(&mut conv, &xp);
            xp[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (gin[idx] - numeric).abs() < 1e-6,
                "input grad at {idx:?}: {} vs {numeric}",
                gin[idx]
            );
        }

        // Weight and bias gradients from the same backward pass.
        let mut checked = 0;
        let mut names = Vec::new();
        conv.visit_params("conv", &mut |name, s| {
            names.push((name.to_string(), s.grad.to_owned()));
        });
        for (name, analytic) in names {
            let shape: Vec<usize> = analytic.shape().to_vec();
            for flat in 0..analytic.len().min(24) {
                let idx = flat_to_idx(flat, &shape);
                let probe = |delta: f64, conv: &mut Conv2d<f64>| {
                    conv.visit_params("conv", &mut |n, mut s| {
                        if n == name {
                            s.value[ndarray::IxDyn(&idx)] += delta;
                        }
                    });
                };
                probe(h, &mut conv);
                let up = loss(&mut conv, &x);
                probe(-2.0 * h, &mut conv);
                let down = loss(&mut conv, &x);
                probe(h, &mut conv);
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[ndarray::IxDyn(&idx)];
                assert!(
                    (a - numeric).abs() < 1e-5,
                    "{name} grad at {idx:?}: {a} vs {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    fn flat_to_idx(mut flat: usize, shape: &[usize]) -> Vec<usize> {
        let mut idx = vec![0; shape.len()];
        for d in (0..shape.len()).rev() {
            idx[d] = flat % shape[d];
            flat /= shape[d];
        }
        idx
    }

    #[test]
    fn maxpool_selects_max_and_routes_gradient() {
        let x = arr3(&[[
            [1.0, 5.0, 2.0, 2.0],
            [3.0, 4.0, 2.0, 8.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 9.0, 1.0, 1.0],
        ]]);
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x);
        assert_eq!(y, arr3(&[[[5.0, 8.0], [9.0, 1.0]]]));
        let g = pool.backward(&arr3(&[[[1.0, 2.0], [3.0, 4.0]]]));
        assert_eq!(g[[0, 0, 1]], 1.0);
        assert_eq!(g[[0, 1, 3]], 2.0);
        assert_eq!(g[[0, 3, 1]], 3.0);
        // Tied 2x2 block of ones: first element in scan order wins.
        assert_eq!(g[[0, 2, 2]], 4.0);
        assert_eq!(g.sum(), 10.0);
    }

    #[test]
    fn upsample_copies_and_backward_sums() {
        let x = arr3(&[[[1.0, 2.0], [3.0, 4.0]]]);
        let up = Upsample2;
        let y = up.forward(&x);
        assert_eq!(y.dim(), (1, 4, 4));
        assert_eq!(y[[0, 0, 0]], 1.0);
        assert_eq!(y[[0, 0, 1]], 1.0);
        assert_eq!(y[[0, 3, 3]], 4.0);
        let g = up.backward(&Array3::from_elem((1, 4, 4), 1.0));
        assert_eq!(g, arr3(&[[[4.0, 4.0], [4.0, 4.0]]]));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_at_rate_zero() {
        let x = Array3::<f32>::from_elem((2, 3, 3), 1.0);
        let mut r = rng();
        let mut d0 = Dropout::new(0.0);
        assert_eq!(d0.forward(x.clone(), true, &mut r), x);
        let mut d = Dropout::<f32>::new(0.5);
        assert_eq!(d.forward(x.clone(), false, &mut r), x);

        // Training mode: kept entries are scaled by 1/(1-rate).
        let y = d.forward(x.clone(), true, &mut r);
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        // Backward routes through the same mask.
        let g = d.backward(Array3::from_elem((2, 3, 3), 1.0));
        Zip::from(&y).and(&g).for_each(|&yv, &gv| {
            assert_eq!(yv == 0.0, gv == 0.0);
        });
    }

    #[test]
    fn conv_block_gradient_matches_finite_differences() {
        let mut r = rng();
        let mut block = ConvBlock::<f64>::new(2, 3, 0.0, &mut r);
        let x = Array3::from_shape_vec(
            (2, 4, 4),
            (0..32).map(|i| (i as f64 * 0.41).sin()).collect(),
        )
        .unwrap();
        let upstream = Array3::from_shape_vec(
            (3, 4, 4),
            (0..48).map(|i| (i as f64 * 0.17).cos()).collect(),
        )
        .unwrap();
        let mut eval_rng = rng();
        block.forward(&x, false, &mut eval_rng);
        let gin = block.backward(upstream.clone());

        let h = 1e-6;
        let mut xp = x.clone();
        for flat in 0..8 {
            let idx = [flat / 4 % 2, flat % 4, (flat * 3) % 4];
            let orig = xp[idx];
            xp[idx] = orig + h;
            let up = (&block.forward(&xp, false, &mut eval_rng) * &upstream).sum();
            xp[idx] = orig - h;
            let down = (&block.forward(&xp, false, &mut eval_rng) * &upstream).sum();
            xp[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (gin[idx] - numeric).abs() < 1e-5,
                "block input grad at {idx:?}: {} vs {numeric}",
                gin[idx]
            );
        }
    }
}
