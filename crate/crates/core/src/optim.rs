//! Adam and central finite differences.

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Points at which a central difference evaluates `f`: `x + h_i e_i` then
/// `x - h_i e_i` for each coordinate.
pub fn central_difference_points(x: &[f64], steps: &[f64]) -> Vec<Vec<f64>> {
    let mut pts = Vec::with_capacity(2 * x.len());
    for i in 0..x.len() {
        for sign in [1.0, -1.0] {
            let mut p = x.to_vec();
            p[i] += sign * steps[i];
            pts.push(p);
        }
    }
    pts
}

/// Gradient from values at [`central_difference_points`].
pub fn central_difference_gradient(values: &[f64], steps: &[f64]) -> Vec<f64> {
    steps
        .iter()
        .enumerate()
        .map(|(i, h)| (values[2 * i] - values[2 * i + 1]) / (2.0 * h))
        .collect()
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], steps: &[f64]) -> Vec<f64> {
    let values: Vec<f64> = central_difference_points(x, steps)
        .iter()
        .map(|p| f(p))
        .collect();
    central_difference_gradient(&values, steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = [1.0, 1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(2, 0.05);
        let mut p = [2.0, -3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 20.0 * (p[1] + 0.5)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn central_difference_is_exact_on_quadratics() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1];
        let g = central_difference(f, &[0.5, -1.0], &[1e-3, 1e-2]);
        assert!((g[0] - (6.0 * 0.5 + 2.0)).abs() < 1e-9);
        assert!((g[1] - (-1.0 + 1.0)).abs() < 1e-9);
    }
}
