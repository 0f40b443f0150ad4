use alloc::vec::Vec;

use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    params: AdamWParams,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u32,
}

impl AdamW {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, params: AdamWParams) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self { params, m, v, t: 0 }
    }

    pub fn step(&mut self, weights: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - libm::pow(p.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(p.beta2, self.t as f64);
        for ((w, g), (m, v)) in weights
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let w = w.as_mut_slice();
            let g = g.as_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for k in 0..w.len() {
                m[k] = p.beta1 * m[k] + (1.0 - p.beta1) * g[k];
                v[k] = p.beta2 * v[k] + (1.0 - p.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * (p.weight_decay * w[k] + m_hat / (libm::sqrt(v_hat) + p.eps));
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns `(norm before, norm after)`.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> (f64, f64) {
    let sq: f64 = grads
        .iter()
        .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm {
        let f = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(f));
        (norm, norm * f)
    } else {
        (norm, norm)
    }
}

/// Linear warmup to `peak` at step `round(warmup_frac * steps)`, then a
/// cosine down to `peak * final_frac` at step `steps - 1`.
pub fn lr_at(step: usize, steps: usize, peak: f64, warmup_frac: f64, final_frac: f64) -> f64 {
    let warm = libm::round(warmup_frac * steps as f64) as usize;
    if step <= warm {
        return peak * (step + 1) as f64 / (warm + 1) as f64;
    }
    let span = steps.saturating_sub(1).saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    let floor = peak * final_frac;
    floor + (peak - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec;

    #[test]
    fn schedule_shape() {
        let steps = 1000;
        assert_eq!(lr_at(100, steps, 1e-3, 0.1, 0.0), 1e-3);
        assert!(lr_at(999, steps, 1e-3, 0.1, 0.0).abs() < 1e-18);
        assert!((lr_at(999, steps, 1e-3, 0.1, 0.1) - 1e-4).abs() < 1e-15);
        assert!(lr_at(0, steps, 1e-3, 0.1, 0.0) > 0.0);
        for s in 1..steps {
            let (a, b) = (lr_at(s - 1, steps, 1.0, 0.1, 0.0), lr_at(s, steps, 1.0, 0.1, 0.0));
            if s <= 100 {
                assert!(b > a);
            } else {
                assert!(b <= a);
            }
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()];
        let (pre, post) = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 5.0);
        assert!(post <= 1.0 + 1e-12);
        assert!((g[0].frobenius_norm() - 1.0).abs() < 1e-12);
        let mut small = vec![Matrix::from_vec(1, 1, vec![0.5]).unwrap()];
        assert_eq!(clip_global_norm(&mut small, 1.0), (0.5, 0.5));
    }

    #[test]
    fn adamw_first_step_is_sign_like() {
        let mut w = vec![Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap()];
        let g = vec![Matrix::from_vec(1, 2, vec![0.3, -2.0]).unwrap()];
        let mut opt = AdamW::new([(1, 2)], AdamWParams { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut w, &g, 0.1);
        assert!((w[0].get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w[0].get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut w = vec![Matrix::from_vec(1, 1, vec![2.0]).unwrap()];
        let g = vec![Matrix::zeros(1, 1)];
        let mut opt = AdamW::new([(1, 1)], AdamWParams::default());
        opt.step(&mut w, &g, 0.5);
        assert!((w[0].get(0, 0) - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
