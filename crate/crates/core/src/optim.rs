//! Adam with a step-halving learning-rate schedule.

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter learning-rate multipliers; empty means all ones.
    scales: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], scales: Vec::new(), t: 0 }
    }

    /// Multiplies the step of parameter `i` by `scales[i]`.
    pub fn with_scales(mut self, scales: Vec<f64>) -> Self {
        assert_eq!(scales.len(), self.m.len());
        self.scales = scales;
        self
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of `params` against `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            let s = self.scales.get(i).copied().unwrap_or(1.0);
            params[i] -= s * lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// `initial * 0.5^(epoch / every)`; `every = 0` keeps the rate constant.
pub fn halving_schedule(initial: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return initial;
    }
    initial * 0.5f64.powi((epoch / every) as i32)
}
