/// Adam moment estimates for a fixed-size parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<const N: usize> {
    m: [f64; N],
    v: [f64; N],
    t: i32,
}

impl<const N: usize> Default for AdamState<N> {
    fn default() -> Self {
        Self {
            m: [0.0; N],
            v: [0.0; N],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<const N: usize> AdamState<N> {
    /// Folds in `grad` and returns the bias-corrected step direction
    /// `m̂ / (√v̂ + ε)`; the caller scales it by the learning rate.
    pub fn step(&mut self, grad: &[f64; N], p: &AdamParams) -> [f64; N] {
        self.t += 1;
        let c1 = 1.0 - p.beta1.powi(self.t);
        let c2 = 1.0 - p.beta2.powi(self.t);
        let mut out = [0.0; N];
        for k in 0..N {
            self.m[k] = p.beta1 * self.m[k] + (1.0 - p.beta1) * grad[k];
            self.v[k] = p.beta2 * self.v[k] + (1.0 - p.beta2) * grad[k] * grad[k];
            out[k] = (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + p.eps);
        }
        out
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}
