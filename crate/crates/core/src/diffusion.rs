//! DDPM machinery: linear noise schedule, closed-form forward corruption,
//! the x0-parameterised reverse step, the sampling loop and the training
//! loss.
//!
//! Steps are indexed `1..=T`; `alpha_bar(0)` is defined as 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Denoise;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// The three numbers that define a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Upper clamp for rescaled betas.
const MAX_BETA: f64 = 0.999;

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }

    /// The same noise range over a different number of steps: `beta * T` is
    /// held fixed, with betas clamped below 1.
    pub fn with_steps(&self, steps: usize) -> Self {
        let r = self.steps as f64 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: (self.beta_start * r).min(MAX_BETA),
            beta_end: (self.beta_end * r).min(MAX_BETA),
        }
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    // Cumulative product in log space keeps the tail accurate for large T.
    let mut log_acc = 0.0;
    let alpha_bar = beta
        .iter()
        .map(|b| {
            log_acc += (-b).ln_1p();
            log_acc.exp()
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of `alpha` up to step `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Checks `0 < beta < 1` and strictly decreasing `alpha_bar` in `(0, 1)`.
    pub fn check_invariants(&self) -> Result<()> {
        if !self.beta.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err(Error::Config("beta outside (0, 1)".into()));
        }
        if !self.alpha_bar.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::Config("alpha_bar not strictly decreasing".into()));
        }
        let last = self.alpha_bar[self.steps() - 1];
        if !(last > 0.0 && last < 1.0) {
            return Err(Error::Config(format!("final alpha_bar {last} outside (0, 1)")));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?}, noise {:?}", x0.shape(), noise.shape()),
        ));
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_fn(x0.shape(), |i| a * x0.data()[i] + b * noise.data()[i]))
}

/// Posterior `q(x_{t-1} | x_t, x0)` coefficients: `(c_x0, c_xt, variance)`.
pub fn posterior_coefficients(abar_prev: f64, abar_t: f64, beta_t: f64) -> (f64, f64, f64) {
    let alpha_t = 1.0 - beta_t;
    let denom = 1.0 - abar_t;
    (
        abar_prev.sqrt() * beta_t / denom,
        alpha_t.sqrt() * (1.0 - abar_prev) / denom,
        beta_t * (1.0 - abar_prev) / denom,
    )
}

/// Mean of the reverse step given the clean-sample estimate.
pub fn posterior_mean(x_t: &Tensor, t: usize, x0_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Config("reverse step needs t >= 1".into()));
    }
    s.check(t)?;
    if x_t.shape() != x0_hat.shape() {
        return Err(Error::shape(
            "p_sample_step",
            format!("x_t {:?}, x0_hat {:?}", x_t.shape(), x0_hat.shape()),
        ));
    }
    let (c0, ct, _) = posterior_coefficients(s.alpha_bar(t - 1), s.alpha_bar(t), s.beta(t));
    Ok(Tensor::from_fn(x_t.shape(), |i| c0 * x0_hat.data()[i] + ct * x_t.data()[i]))
}

/// Draws `x_{t-1}`. The final step (`t = 1`) and `deterministic` mode add no
/// noise.
pub fn p_sample_step(
    x_t: &Tensor,
    t: usize,
    x0_hat: &Tensor,
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> Result<Tensor> {
    let mut mean = posterior_mean(x_t, t, x0_hat, s)?;
    if t > 1 && !deterministic {
        let (_, _, var) = posterior_coefficients(s.alpha_bar(t - 1), s.alpha_bar(t), s.beta(t));
        let z = Tensor::randn(x_t.shape(), var.sqrt(), rng);
        mean.add_assign(&z)?;
    }
    Ok(mean)
}

/// Full reverse loop from `x_T ~ N(0, I)` down to `x_0`.
pub fn generate(
    model: &dyn Denoise,
    music: &Tensor,
    shape: [usize; 3],
    s: &NoiseSchedule,
    seed: u64,
    deterministic: bool,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&shape, 1.0, &mut rng);
    let at_step = |t: usize| {
        move |e: Error| match e {
            Error::Numeric { block } => Error::Numeric {
                block: format!("sampling step {t}: {block}"),
            },
            other => other,
        }
    };
    for t in (1..=s.steps()).rev() {
        let x0_hat = model.predict_x0(&x, music, t).map_err(at_step(t))?;
        x = p_sample_step(&x, t, &x0_hat, s, &mut rng, deterministic).map_err(at_step(t))?;
        x.ensure_finite("sampling").map_err(at_step(t))?;
    }
    Ok(x)
}

/// Weights and channel selections of the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_vel: f64,
    pub lambda_contact: f64,
    pub position_channels: Vec<usize>,
    pub contact_channels: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pos: 1.0,
            lambda_vel: 1.0,
            lambda_contact: 1.0,
            position_channels: vec![0, 1],
            contact_channels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub simple: f64,
    pub pos: f64,
    pub vel: f64,
    pub contact: f64,
}

/// Evaluates the four-term loss. `mask` is `N x L` with entries in {0, 1};
/// `None` disables the contact term.
pub fn loss(x0: &Tensor, x0_hat: &Tensor, mask: Option<&Tensor>, w: &LossWeights) -> Result<LossParts> {
    Ok(loss_with_grad(x0, x0_hat, mask, w, false)?.0)
}

/// Loss plus its gradient with respect to `x0_hat` when `want_grad` is set.
pub fn loss_with_grad(
    x0: &Tensor,
    x0_hat: &Tensor,
    mask: Option<&Tensor>,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(LossParts, Option<Tensor>)> {
    let (n, l, c) = match x0.shape() {
        [n, l, c] => (*n, *l, *c),
        s => return Err(Error::shape("loss", format!("expected N x L x d, got {s:?}"))),
    };
    if x0_hat.shape() != x0.shape() {
        return Err(Error::shape(
            "loss",
            format!("x0 {:?}, x0_hat {:?}", x0.shape(), x0_hat.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != [n, l] {
            return Err(Error::shape("loss", format!("contact mask {:?}", m.shape())));
        }
    }
    if w.lambda_pos < 0.0 || w.lambda_vel < 0.0 || w.lambda_contact < 0.0 {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    for &ch in w.position_channels.iter().chain(&w.contact_channels) {
        if ch >= c {
            return Err(Error::Config(format!("loss channel {ch} out of range for d = {c}")));
        }
    }
    let (a, b) = (x0.data(), x0_hat.data());
    let idx = |dn: usize, f: usize, ch: usize| (dn * l + f) * c + ch;
    let mut grad = want_grad.then(|| vec![0.0; a.len()]);

    let count = a.len() as f64;
    let mut simple = 0.0;
    for i in 0..a.len() {
        let r = b[i] - a[i];
        simple += r * r;
    }
    simple /= count;
    if let Some(g) = grad.as_mut() {
        for i in 0..a.len() {
            g[i] += 2.0 * (b[i] - a[i]) / count;
        }
    }

    let mut pos = 0.0;
    let pos_count = (n * l * w.position_channels.len()) as f64;
    if pos_count > 0.0 {
        for dn in 0..n {
            for f in 0..l {
                for &ch in &w.position_channels {
                    let i = idx(dn, f, ch);
                    let r = b[i] - a[i];
                    pos += r * r;
                    if let Some(g) = grad.as_mut() {
                        g[i] += w.lambda_pos * 2.0 * r / pos_count;
                    }
                }
            }
        }
        pos /= pos_count;
    }

    let mut vel = 0.0;
    let vel_count = (n * l.saturating_sub(1) * c) as f64;
    if vel_count > 0.0 {
        for dn in 0..n {
            for f in 1..l {
                for ch in 0..c {
                    let (i, j) = (idx(dn, f, ch), idx(dn, f - 1, ch));
                    let r = (b[i] - b[j]) - (a[i] - a[j]);
                    vel += r * r;
                    if let Some(g) = grad.as_mut() {
                        let s = w.lambda_vel * 2.0 * r / vel_count;
                        g[i] += s;
                        g[j] -= s;
                    }
                }
            }
        }
        vel /= vel_count;
    }

    let mut contact = 0.0;
    if let Some(m) = mask {
        let mut terms = Vec::new();
        for dn in 0..n {
            for f in 1..l {
                if m.data()[dn * l + f] != 0.0 {
                    for &ch in &w.contact_channels {
                        terms.push((idx(dn, f, ch), idx(dn, f - 1, ch)));
                    }
                }
            }
        }
        if !terms.is_empty() {
            let k = terms.len() as f64;
            for &(i, j) in &terms {
                let v = b[i] - b[j];
                contact += v * v;
                if let Some(g) = grad.as_mut() {
                    let s = w.lambda_contact * 2.0 * v / k;
                    g[i] += s;
                    g[j] -= s;
                }
            }
            contact /= k;
        }
    }

    let total = simple + w.lambda_pos * pos + w.lambda_vel * vel + w.lambda_contact * contact;
    if !total.is_finite() {
        return Err(Error::numeric("loss"));
    }
    let parts = LossParts {
        total,
        simple,
        pos,
        vel,
        contact,
    };
    let grad = grad.map(|g| Tensor::new(x0.shape(), g)).transpose()?;
    Ok((parts, grad))
}
