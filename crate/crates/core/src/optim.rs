/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Per-row Adam moments for a parameter group whose rows come and go with the
/// Gaussian set. Each row keeps its own step count so new rows get the usual
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAdam {
    pub lr: f64,
    pub width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: Vec<u32>,
}

impl RowAdam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-15;

    pub fn new(width: usize, lr: f64) -> Self {
        RowAdam {
            lr,
            width,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    pub fn push_rows(&mut self, n: usize) {
        self.m.extend(std::iter::repeat_n(0.0, n * self.width));
        self.v.extend(std::iter::repeat_n(0.0, n * self.width));
        self.steps.extend(std::iter::repeat_n(0, n));
    }

    /// Keeps the rows whose flag is true, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        let w = self.width;
        let mut r = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                if r != i {
                    self.m.copy_within(i * w..(i + 1) * w, r * w);
                    self.v.copy_within(i * w..(i + 1) * w, r * w);
                    self.steps[r] = self.steps[i];
                }
                r += 1;
            }
        }
        self.m.truncate(r * w);
        self.v.truncate(r * w);
        self.steps.truncate(r);
    }

    /// Updates one row in place. Rows with an all-zero gradient are skipped
    /// (they did not contribute to the rendered view).
    pub fn step_row(&mut self, row: usize, params: &mut [f64], grads: &[f64]) {
        if grads.iter().all(|&g| g == 0.0) {
            return;
        }
        let w = self.width;
        self.steps[row] += 1;
        let t = self.steps[row] as i32;
        let bc1 = 1.0 - Self::BETA1.powi(t);
        let bc2 = 1.0 - Self::BETA2.powi(t);
        let m = &mut self.m[row * w..(row + 1) * w];
        let v = &mut self.v[row * w..(row + 1) * w];
        for i in 0..w {
            let g = grads[i];
            m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
            v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
            params[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05, 0.9);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn row_retain_compacts() {
        let mut r = RowAdam::new(2, 0.1);
        r.push_rows(3);
        r.m = vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        r.steps = vec![5, 6, 7];
        r.retain(&[true, false, true]);
        assert_eq!(r.m, vec![0.0, 0.0, 2.0, 2.0]);
        assert_eq!(r.steps, vec![5, 7]);
    }
}
