//! Adam with bias correction. Moments are keyed by parameter name and
//! created lazily, so one optimizer can cover several stores (the
//! generator and projection head share one).

use std::collections::HashMap;

use ndarray::ArrayD;

const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    t: u64,
    moments: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Advance the shared step counter; call once per optimizer step,
    /// before the per-parameter updates.
    pub fn start_step(&mut self) {
        self.t += 1;
    }

    /// One Adam update of a single parameter tensor.
    pub fn update(&mut self, name: &str, param: &mut ArrayD<f64>, grad: &ArrayD<f64>, lr: f64) {
        assert!(self.t > 0, "start_step before update");
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(param.raw_dim()), ArrayD::zeros(param.raw_dim())));
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (mi, vi)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }

    /// Stored first/second moments for a parameter, if any update has
    /// touched it.
    pub fn moments(&self, name: &str) -> Option<(&ArrayD<f64>, &ArrayD<f64>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// Restore a moment pair (checkpoint load).
    pub fn set_moments(&mut self, name: &str, m: ArrayD<f64>, v: ArrayD<f64>) {
        self.moments.insert(name.to_string(), (m, v));
    }

    /// Restore the step counter (checkpoint load).
    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // with bias correction, |update| == lr on the first step
        let mut opt = Adam::new(0.9, 0.999);
        let mut p = arr1(&[1.0, -2.0]).into_dyn();
        let g = arr1(&[0.3, -0.7]).into_dyn();
        opt.start_step();
        opt.update("p", &mut p, &g, 0.01);
        assert!((p[[0]] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[[1]] - (-2.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2
        let mut opt = Adam::new(0.5, 0.999);
        let mut p = arr1(&[-4.0]).into_dyn();
        for _ in 0..4000 {
            let g = arr1(&[2.0 * (p[[0]] - 3.0)]).into_dyn();
            opt.start_step();
            opt.update("x", &mut p, &g, 0.01);
        }
        assert!((p[[0]] - 3.0).abs() < 1e-3, "got {}", p[[0]]);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut opt = Adam::new(0.5, 0.999);
            let mut p = arr1(&[0.1, 0.2, 0.3]).into_dyn();
            for k in 0..50 {
                let g = p.mapv(|x| (x * (k as f64 + 1.0)).sin());
                opt.start_step();
                opt.update("p", &mut p, &g, 2e-4);
            }
            p
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
