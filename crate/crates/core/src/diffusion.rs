//! Forward diffusion processes with closed-form Gaussian marginals.
//!
//! Two processes are supported: the variance-preserving SDE with a linear
//! rate `beta(t) = beta_min + beta_slope * t`, and a discrete-time Gaussian
//! chain with `beta_t = beta_base + beta_step * t` for `t = 1..=steps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, NoiseSource};
use crate::scalar::Scalar;

/// Continuous variance-preserving SDE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VpSde<S> {
    beta_min: S,
    beta_slope: S,
    horizon: S,
}

impl<S: Scalar> VpSde<S> {
    pub fn new(beta_min: S, beta_slope: S, horizon: S) -> Result<Self> {
        if !(beta_min > S::zero()) || !(beta_slope >= S::zero()) || !(horizon > S::zero()) {
            return Err(Error::Domain(format!(
                "invalid VP-SDE: beta_min={beta_min}, beta_slope={beta_slope}, horizon={horizon}"
            )));
        }
        Ok(Self {
            beta_min,
            beta_slope,
            horizon,
        })
    }

    pub fn beta_min(&self) -> S {
        self.beta_min
    }

    pub fn beta_slope(&self) -> S {
        self.beta_slope
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    fn check(&self, t: S) -> Result<()> {
        if t >= S::zero() && t <= self.horizon {
            Ok(())
        } else {
            Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon)))
        }
    }

    pub fn beta(&self, t: S) -> S {
        self.beta_min + self.beta_slope * t
    }

    /// `B(t)`, the integral of `beta` over `[0, t]`.
    pub fn integrated_beta(&self, t: S) -> Result<S> {
        self.check(t)?;
        Ok(self.beta_min * t + S::of(0.5) * self.beta_slope * t * t)
    }

    /// `(mean_coef, std)` of the forward kernel at time `t`.
    pub fn marginal(&self, t: S) -> Result<(S, S)> {
        let b = self.integrated_beta(t)?;
        let mean = (-S::of(0.5) * b).exp();
        let var = -(-b).exp_m1();
        Ok((mean, var.max(S::zero()).sqrt()))
    }
}

/// Discrete-time Gaussian chain with a linear beta schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Ddpm<S> {
    beta_base: S,
    beta_step: S,
    betas: Vec<S>,
    alpha_bars: Vec<S>,
}

impl<S: Scalar> Ddpm<S> {
    pub fn new(beta_base: S, beta_step: S, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("discrete schedule needs at least one step".into()));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut log_bar = 0.0f64;
        for t in 1..=steps {
            let beta = beta_base.f64() + beta_step.f64() * t as f64;
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::Domain(format!("beta_{t} = {beta} outside (0, 1)")));
            }
            log_bar += (1.0 - beta).ln();
            betas.push(S::of(beta));
            alpha_bars.push(S::of(log_bar.exp()));
        }
        Ok(Self {
            beta_base,
            beta_step,
            betas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_base(&self) -> S {
        self.beta_base
    }

    pub fn beta_step(&self) -> S {
        self.beta_step
    }

    /// `(beta_t, alpha_t, alpha_bar_t)` for `1 <= t <= steps`.
    pub fn schedule(&self, t: usize) -> Result<(S, S, S)> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("step {t} outside 1..={}", self.steps())));
        }
        let beta = self.betas[t - 1];
        Ok((beta, S::one() - beta, self.alpha_bars[t - 1]))
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`; step 0 is the data itself.
    pub fn marginal(&self, t: usize) -> Result<(S, S)> {
        if t == 0 {
            return Ok((S::one(), S::zero()));
        }
        let (_, _, bar) = self.schedule(t)?;
        Ok((bar.sqrt(), (S::one() - bar).sqrt()))
    }
}

/// Serializable description of a forward process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessSpec {
    Continuous {
        beta_min: f64,
        beta_slope: f64,
        horizon: f64,
    },
    Discrete {
        beta_base: f64,
        beta_step: f64,
        steps: usize,
    },
}

impl Default for ProcessSpec {
    fn default() -> Self {
        ProcessSpec::Continuous {
            beta_min: 0.1,
            beta_slope: 0.9,
            horizon: 1.0,
        }
    }
}

impl ProcessSpec {
    pub fn discrete_default() -> Self {
        ProcessSpec::Discrete {
            beta_base: 1e-4,
            beta_step: 1e-5,
            steps: 1000,
        }
    }

    pub fn horizon(&self) -> f64 {
        match *self {
            ProcessSpec::Continuous { horizon, .. } => horizon,
            ProcessSpec::Discrete { steps, .. } => steps as f64,
        }
    }

    pub fn build<S: Scalar>(&self) -> Result<Process<S>> {
        Ok(match *self {
            ProcessSpec::Continuous {
                beta_min,
                beta_slope,
                horizon,
            } => Process::Continuous(VpSde::new(S::of(beta_min), S::of(beta_slope), S::of(horizon))?),
            ProcessSpec::Discrete {
                beta_base,
                beta_step,
                steps,
            } => Process::Discrete(Ddpm::new(S::of(beta_base), S::of(beta_step), steps)?),
        })
    }
}

// Shortest decimal form, so f32 parameters report the configured value.
fn decimal<S: Scalar>(x: S) -> f64 {
    x.to_string().parse().unwrap_or_else(|_| x.f64())
}

/// A forward process of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Process<S> {
    Continuous(VpSde<S>),
    Discrete(Ddpm<S>),
}

impl<S: Scalar> Process<S> {
    pub fn spec(&self) -> ProcessSpec {
        match self {
            Process::Continuous(sde) => ProcessSpec::Continuous {
                beta_min: decimal(sde.beta_min),
                beta_slope: decimal(sde.beta_slope),
                horizon: decimal(sde.horizon),
            },
            Process::Discrete(d) => ProcessSpec::Discrete {
                beta_base: decimal(d.beta_base),
                beta_step: decimal(d.beta_step),
                steps: d.steps(),
            },
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Process::Continuous(sde) => sde.horizon.f64(),
            Process::Discrete(d) => d.steps() as f64,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Process::Discrete(_))
    }

    /// Marginal coefficients at time `t`. Discrete times are rounded to the
    /// nearest step.
    pub fn marginal(&self, t: f64) -> Result<(S, S)> {
        match self {
            Process::Continuous(sde) => sde.marginal(S::of(t)),
            Process::Discrete(d) => {
                if !(0.0..=d.steps() as f64).contains(&t) {
                    return Err(Error::Domain(format!("step {t} outside [0, {}]", d.steps())));
                }
                d.marginal(t.round() as usize)
            }
        }
    }
}

/// A forward-diffused object together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<S> {
    pub x_t: Vec<S>,
    pub eps: Vec<S>,
    pub t: f64,
    pub mean_coef: S,
    pub std: S,
}

pub fn perturb<S: Scalar>(
    process: &Process<S>,
    x0: &[S],
    t: f64,
    rng: &mut impl NoiseSource<S>,
) -> Result<Perturbation<S>> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in object to perturb".into()));
    }
    let (mean_coef, std) = process.marginal(t)?;
    let eps = normal_vec(rng, x0.len());
    let x_t = x0.iter().zip(&eps).map(|(&x, &e)| mean_coef * x + std * e).collect();
    Ok(Perturbation {
        x_t,
        eps,
        t,
        mean_coef,
        std,
    })
}

/// Conditional score `-eps / std` of the Gaussian perturbation kernel.
pub fn score_target<S: Scalar>(p: &Perturbation<S>) -> Result<Vec<S>> {
    if !(p.std > S::zero()) {
        return Err(Error::Numeric(format!(
            "score target is singular at t = {} (std = 0)",
            p.t
        )));
    }
    Ok(p.eps.iter().map(|&e| -e / p.std).collect())
}

/// One draw from the standard normal prior.
pub fn prior_sample<S: Scalar>(dim: usize, rng: &mut impl NoiseSource<S>) -> Result<Vec<S>> {
    if dim == 0 {
        return Err(Error::Domain("prior dimension must be at least 1".into()));
    }
    Ok(normal_vec(rng, dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stage};

    fn sde() -> VpSde<f64> {
        VpSde::new(0.1, 0.9, 1.0).unwrap()
    }

    /// Composite Simpson quadrature of beta over [0, t].
    fn simpson_beta(s: &VpSde<f64>, t: f64) -> f64 {
        let n = 1000;
        let h = t / n as f64;
        let mut acc = s.beta(0.0) + s.beta(t);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * s.beta(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn integrated_beta_matches_quadrature() {
        let s = sde();
        assert_eq!(s.integrated_beta(0.0).unwrap(), 0.0);
        // Frozen from the quadrature oracle.
        let q1 = simpson_beta(&s, 1.0);
        let q05 = simpson_beta(&s, 0.5);
        assert!((q1 - 0.55).abs() < 1e-12);
        assert!((q05 - 0.1625).abs() < 1e-12);
        assert!((s.integrated_beta(1.0).unwrap() - 0.55).abs() < 1e-15);
        assert!((s.integrated_beta(0.5).unwrap() - 0.1625).abs() < 1e-15);
    }

    #[test]
    fn integrated_beta_rejects_out_of_range() {
        let s = sde();
        assert!(matches!(s.integrated_beta(-0.1), Err(Error::Domain(_))));
        assert!(matches!(s.integrated_beta(1.5), Err(Error::Domain(_))));
    }

    /// Euler-Maruyama simulation of dx = -0.5 beta x dt + sqrt(beta) dW from a
    /// point mass at 1; returns (mean, std) at `t`.
    fn simulate_forward(s: &VpSde<f64>, t: f64, paths: usize) -> (f64, f64) {
        let steps = 200;
        let dt = t / steps as f64;
        let mut rng = stream(11, Stage::Discover, &[t.to_bits()]);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..paths {
            let mut x = 1.0f64;
            for k in 0..steps {
                let tk = k as f64 * dt;
                let b = s.beta(tk + 0.5 * dt);
                let z: f64 = normal_vec::<f64>(&mut rng, 1)[0];
                x += -0.5 * b * x * dt + (b * dt).sqrt() * z;
            }
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / paths as f64;
        (mean, (sum2 / paths as f64 - mean * mean).sqrt())
    }

    #[test]
    fn marginal_matches_simulated_sde() {
        let s = sde();
        assert_eq!(s.marginal(0.0).unwrap(), (1.0, 0.0));
        for (t, mean, std) in [(1.0, 0.75957, 0.65042), (0.5, 0.92196, 0.38728)] {
            let (m, sd) = s.marginal(t).unwrap();
            assert!((m - mean).abs() < 1e-5, "{m} vs {mean}");
            assert!((sd - std).abs() < 1e-5, "{sd} vs {std}");
            let (mc_m, mc_sd) = simulate_forward(&s, t, 100_000);
            assert!((mc_m - m).abs() < 0.01 * m, "mc mean {mc_m}");
            assert!((mc_sd - sd).abs() < 0.01 * sd + 0.003, "mc std {mc_sd}");
        }
    }

    #[test]
    fn marginal_is_monotone_on_grid() {
        let s = sde();
        let mut prev = s.marginal(0.0).unwrap();
        for k in 1..=1000 {
            let cur = s.marginal(k as f64 / 1000.0).unwrap();
            assert!(cur.0 < prev.0 && cur.1 > prev.1);
            assert!(cur.0 * cur.0 + cur.1 * cur.1 <= 1.0 + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn perturb_reconstructs_and_is_deterministic() {
        let p = Process::Continuous(sde());
        let mut a = stream(3, Stage::Train, &[]);
        let mut b = stream(3, Stage::Train, &[]);
        let pa = perturb(&p, &[1.0, 0.0], 0.5, &mut a).unwrap();
        let pb = perturb(&p, &[1.0, 0.0], 0.5, &mut b).unwrap();
        assert_eq!(pa, pb);
        for i in 0..2 {
            let x0 = [1.0, 0.0][i];
            assert_eq!(pa.x_t[i], pa.mean_coef * x0 + pa.std * pa.eps[i]);
        }
        let p0 = perturb(&p, &[3.0, -2.0], 0.0, &mut a).unwrap();
        assert_eq!(p0.x_t, vec![3.0, -2.0]);
        assert!(matches!(perturb(&p, &[f64::NAN], 0.5, &mut a), Err(Error::Data(_))));
    }

    #[test]
    fn perturb_of_origin_has_std_squared_covariance() {
        let p = Process::Continuous(sde());
        let mut rng = stream(5, Stage::Train, &[]);
        let n = 100_000;
        let (_, std) = sde().marginal(0.7).unwrap();
        let mut c = [[0.0f64; 2]; 2];
        for _ in 0..n {
            let q = perturb(&p, &[0.0, 0.0], 0.7, &mut rng).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += q.x_t[i] * q.x_t[j];
                }
            }
        }
        let v = std * std;
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { v } else { 0.0 };
                assert!((c[i][j] / n as f64 - expect).abs() < 0.02 * v);
            }
        }
    }

    #[test]
    fn score_target_cases() {
        let p = Perturbation {
            x_t: vec![0.5, -1.0],
            eps: vec![1.0, -2.0],
            t: 0.3,
            mean_coef: 1.0,
            std: 0.5,
        };
        assert_eq!(score_target(&p).unwrap(), vec![-2.0, 4.0]);
        let zero = Perturbation {
            eps: vec![0.0, 0.0],
            ..p.clone()
        };
        assert_eq!(score_target(&zero).unwrap(), vec![0.0, 0.0]);
        let singular = Perturbation { std: 0.0, ..p };
        assert!(matches!(score_target(&singular), Err(Error::Numeric(_))));
    }

    #[test]
    fn score_target_second_moment() {
        let proc_ = Process::Continuous(sde());
        let mut rng = stream(9, Stage::Train, &[]);
        let n = 100_000;
        let dim = 3;
        let mut acc = 0.0;
        let mut std = 0.0;
        for _ in 0..n {
            let x0 = normal_vec::<f64>(&mut rng, dim);
            let p = perturb(&proc_, &x0, 0.4, &mut rng).unwrap();
            std = p.std;
            acc += score_target(&p).unwrap().iter().map(|v| v * v).sum::<f64>();
        }
        let expect = dim as f64 / (std * std);
        assert!((acc / n as f64 - expect).abs() < 0.02 * expect);
    }

    #[test]
    fn prior_sample_moments() {
        let mut rng = stream(1, Stage::Sample, &[]);
        assert!(matches!(prior_sample::<f64>(0, &mut rng), Err(Error::Domain(_))));
        assert_eq!(prior_sample::<f64>(1, &mut rng).unwrap().len(), 1);
        let n = 100_000;
        let mut s = [0.0; 2];
        let mut s2 = [0.0; 2];
        for _ in 0..n {
            let v = prior_sample::<f64>(2, &mut rng).unwrap();
            for i in 0..2 {
                s[i] += v[i];
                s2[i] += v[i] * v[i];
            }
        }
        for i in 0..2 {
            let m = s[i] / n as f64;
            assert!(m.abs() < 0.02);
            assert!((s2[i] / n as f64 - m * m - 1.0).abs() < 0.02);
        }
        let a = prior_sample::<f32>(4, &mut stream(2, Stage::Sample, &[])).unwrap();
        let b = prior_sample::<f32>(4, &mut stream(2, Stage::Sample, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddpm_schedule_values() {
        let d = Ddpm::<f64>::new(1e-4, 1e-5, 1000).unwrap();
        assert!((d.schedule(1).unwrap().0 - 0.00011).abs() < 1e-15);
        assert!((d.schedule(1000).unwrap().0 - 0.0101).abs() < 1e-15);
        assert!(d.schedule(0).is_err() && d.schedule(1001).is_err());
        let sum_beta: f64 = (1..=1000).map(|t| d.schedule(t).unwrap().0).sum();
        let log_sum: f64 = (1..=1000).map(|t| (1.0 - d.schedule(t).unwrap().0).ln()).sum();
        let bar = d.schedule(1000).unwrap().2;
        assert!((bar.ln() / log_sum - 1.0).abs() < 1e-12);
        // first-order approximation, compared on the log scale
        assert!((bar.ln() / -sum_beta - 1.0).abs() < 0.01);
        for t in 1..1000 {
            assert!(d.schedule(t + 1).unwrap().2 < d.schedule(t).unwrap().2);
        }
    }

    #[test]
    fn process_spec_builds_both_kinds() {
        let p: Process<f32> = ProcessSpec::default().build().unwrap();
        assert_eq!(p.horizon(), 1.0);
        let d: Process<f32> = ProcessSpec::discrete_default().build().unwrap();
        assert_eq!(d.horizon(), 1000.0);
        assert_eq!(d.spec(), ProcessSpec::discrete_default());
        assert!(VpSde::new(0.0, 1.0, 1.0).is_err());
    }
}
