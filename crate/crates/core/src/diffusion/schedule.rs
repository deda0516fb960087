use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

pub const T_STEPS: usize = 200;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DDIM_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `alpha_bars[t] = Π_{s ≤ t} alphas[s]`.
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(T_STEPS, BETA_START, BETA_END).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    /// Betas evenly spaced from `b0` to `b1` inclusive.
    pub fn linear(t: usize, b0: f64, b1: f64) -> Result<Self> {
        if t < 2 || !(0.0 < b0 && b0 <= b1 && b1 < 1.0) {
            return Err(Error::Parameter(format!("invalid schedule T={t} betas {b0}..{b1}")));
        }
        let betas: Vec<f64> = (0..t).map(|i| b0 + (b1 - b0) * i as f64 / (t - 1) as f64).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Parameter(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
    pub fn forward_diffuse<T: Real>(&self, x0: &[T], t: usize, eps: &[T]) -> Result<Vec<T>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Dimension(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
        }
        let a = T::lit(self.alpha_bars[t].sqrt());
        let b = T::lit((1.0 - self.alpha_bars[t]).sqrt());
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// Evenly strided subsequence `0, c, 2c, …` with `c = T / steps`, in ascending order.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Parameter(format!("DDIM steps {steps} outside [1, {}]", self.len())));
        }
        let c = self.len() / steps;
        Ok((0..steps).map(|i| i * c).collect())
    }

    /// Deterministic (η = 0) DDIM from `x_T` down to the clean estimate.
    ///
    /// `eps_fn(x_t, t)` predicts the noise. Returns the final sample in model
    /// space, before any rescaling or clamping.
    pub fn ddim_sample<T: Real>(
        &self,
        steps: usize,
        x_t: Tensor<T>,
        mut eps_fn: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let seq = self.ddim_timesteps(steps)?;
        let mut x = x_t;
        for (k, &t) in seq.iter().enumerate().rev() {
            let ab = self.alpha_bars[t];
            let ab_prev = if k == 0 { 1.0 } else { self.alpha_bars[seq[k - 1]] };
            let eps = eps_fn(&x, t)?;
            if eps.shape() != x.shape() {
                return Err(Error::Dimension(format!("eps shape {:?} vs x {:?}", eps.shape(), x.shape())));
            }
            let inv_sqrt_ab = T::lit(1.0 / ab.sqrt());
            let s1 = T::lit((1.0 - ab).sqrt());
            let a_prev = T::lit(ab_prev.sqrt());
            let s_prev = T::lit((1.0 - ab_prev).sqrt());
            let data: Vec<T> = x
                .data()
                .iter()
                .zip(eps.data())
                .map(|(&xt, &e)| {
                    let x0 = (xt - s1 * e) * inv_sqrt_ab;
                    a_prev * x0 + s_prev * e
                })
                .collect();
            x = Tensor::new(x.shape().to_vec(), data)?;
            x.check_finite("ddim step")?;
        }
        Ok(x)
    }
}
