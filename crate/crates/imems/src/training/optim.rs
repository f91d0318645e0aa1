//! Adam with the bias-corrected update, computed in the tensor element type.

use ndarray::Zip;

use crate::nets::{Parameters, Slots};
use crate::Scalar;

/// Adam optimizer. One instance owns the shared step counter for a network;
/// moment buffers live inside the layers.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    /// Learning-rate only constructor with beta1 = 0.5 (the adversarial
    /// setting, used everywhere for consistency), beta2 = 0.999.
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from the accumulated gradients, scaled by
    /// `grad_scale` (1 / batch size for averaged batches). Gradients are
    /// left untouched; callers zero them before the next accumulation.
    pub fn step<F: Scalar, P: Parameters<F> + ?Sized>(&mut self, net: &mut P, grad_scale: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let scale = F::from_f64(grad_scale);
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        net.visit_params("", &mut |_, slots| {
            let Slots {
                mut value,
                grad,
                mut m,
                mut v,
            } = slots;
            Zip::from(&mut value)
                .and(&grad)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g0, m, v| {
                    let g = g0 * scale;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    /// One-tensor parameter holder for exercising the optimizer.
    struct Single {
        p: Array1<f64>,
        g: Array1<f64>,
        m: Array1<f64>,
        v: Array1<f64>,
    }

    impl Single {
        fn new(p0: f64) -> Self {
            Single {
                p: Array1::from_elem(1, p0),
                g: Array1::zeros(1),
                m: Array1::zeros(1),
                v: Array1::zeros(1),
            }
        }
    }

    impl Parameters<f64> for Single {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, Slots<'_, f64>)) {
            f(
                "p",
                Slots {
                    value: self.p.view_mut().into_dyn(),
                    grad: self.g.view_mut().into_dyn(),
                    m: self.m.view_mut().into_dyn(),
                    v: self.v.view_mut().into_dyn(),
                },
            );
        }
    }

    #[test]
    fn first_step_moves_by_about_the_learning_rate() {
        // With bias correction, mhat = g and vhat = g^2, so the first update
        // is lr * g / (|g| + eps) ~ lr * sign(g) for any gradient scale.
        for g in [0.001, 1.0, 250.0] {
            let mut s = Single::new(1.0);
            s.g[0] = g;
            let mut adam = Adam::new(0.01);
            adam.step(&mut s, 1.0);
            assert!((s.p[0] - (1.0 - 0.01)).abs() < 1e-6, "g = {g}: {}", s.p[0]);
        }
    }

    #[test]
    fn grad_scale_divides_the_accumulated_gradient() {
        // Accumulating the same gradient four times and scaling by 1/4 must
        // match a single unscaled step.
        let mut a = Single::new(0.3);
        a.g[0] = 0.8;
        let mut b = Single::new(0.3);
        b.g[0] = 4.0 * 0.8;
        let mut opt_a = Adam::new(2e-4);
        let mut opt_b = Adam::new(2e-4);
        opt_a.step(&mut a, 1.0);
        opt_b.step(&mut b, 0.25);
        assert_eq!(a.p[0], b.p[0]);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize (p - 3)^2 from p = 0.
        let mut s = Single::new(0.0);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            s.g[0] = 2.0 * (s.p[0] - 3.0);
            adam.step(&mut s, 1.0);
            s.g[0] = 0.0;
        }
        assert!(
            (s.p[0] - 3.0).abs() < 1e-3,
            "did not converge: {}",
            s.p[0]
        );
        assert_eq!(adam.steps_taken(), 2000);
    }
}
