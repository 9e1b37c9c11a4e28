//! Warmup adaptation: dual averaging of the step size and windowed estimation
//! of a diagonal inverse metric.

/// Dual-averaging step-size adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeAdapter {
    pub delta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub t0: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl StepSizeAdapter {
    pub fn new(delta: f64) -> Self {
        StepSizeAdapter { delta, gamma: 0.05, kappa: 0.75, t0: 10.0, mu: 0.0, counter: 0.0, s_bar: 0.0, x_bar: 0.0 }
    }

    /// Restarts the averaging around `log(10 * step)`.
    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Updates with the latest acceptance statistic and returns the next step.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Final step size after warmup.
    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sample variance with the `n - 1` denominator.
    pub fn variance(&self) -> Vec<f64> {
        let denom = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }

    pub fn restart(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Minimum warmup length that fits the default buffers and one base window.
pub const MIN_WARMUP: usize = 150;

/// Expanding-window schedule: an initial fast buffer, slow windows that
/// double in length, and a terminal fast buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedVariance {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    estimator: Welford,
}

impl WindowedVariance {
    pub fn new(dim: usize, n_warmup: usize) -> Self {
        let (init_buffer, term_buffer, base_window) = (75, 50, 25);
        WindowedVariance {
            n_warmup,
            init_buffer,
            term_buffer,
            window_size: base_window,
            next_window: init_buffer + base_window - 1,
            counter: 0,
            estimator: Welford::new(dim),
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer && self.counter < self.n_warmup - self.term_buffer && self.counter != self.n_warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_window && self.counter != self.n_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.n_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.n_warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }

    /// Feeds one warmup position. Returns the regularized variance when a slow
    /// window closes.
    pub fn learn(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        if self.in_window() {
            self.estimator.add(q);
        }
        let mut out = None;
        if self.window_ends() {
            self.compute_next_window();
            let n = self.estimator.count() as f64;
            let var = self.estimator.variance();
            out = Some(var.iter().map(|v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))).collect());
            self.estimator.restart();
        }
        self.counter += 1;
        out
    }
}
