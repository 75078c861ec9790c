//! Adam, the training configuration and the toy training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{MotionSample, NormStats};
use crate::diffusion::{
    loss_with_grad, make_schedule, q_sample, LossParts, LossWeights, NoiseSchedule, ScheduleSpec,
};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::model::{Denoiser, DenoiserConfig};
use crate::param::ParameterStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update with learning rate `lr`, then zeroes gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParameterStore, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Mismatch(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.grad.shape() != m.shape() {
                return Err(Error::Mismatch(format!("optimizer moment shape for {}", p.name)));
            }
            if !p.grad.is_finite() {
                return Err(Error::numeric(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for (i, &gi) in g.iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` after every quarter of the epochs.
    StepDecay { factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per optimizer step; 0 means the whole dataset.
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub loss: LossWeights,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Noise levels drawn per sample and epoch.
    pub t_per_sample: usize,
    /// Fixed noise levels per sample in the evaluation probe set; 0 disables
    /// the evaluation loss.
    pub eval_levels: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Epochs between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 0,
            lr: 2e-4,
            schedule: LrSchedule::StepDecay { factor: 0.5 },
            seed: 0,
            loss: LossWeights::default(),
            diffusion_steps: 50,
            beta_start: 2e-3,
            beta_end: 0.4,
            t_per_sample: 1,
            eval_levels: 4,
            clip: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let LrSchedule::StepDecay { factor } = self.schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::Config(format!("lr decay factor {factor} outside (0, 1]")));
            }
        }
        if self.t_per_sample == 0 {
            return Err(Error::Config("t_per_sample must be at least 1".into()));
        }
        if self.clip < 0.0 {
            return Err(Error::Config("clip must be nonnegative".into()));
        }
        make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule_spec().build()
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::StepDecay { factor } => {
                let quarter = (self.epochs / 4).max(1);
                self.lr * factor.powi((epoch / quarter).min(3) as i32)
            }
        }
    }

    pub fn to_kv(&self) -> String {
        let (sched, factor) = match self.schedule {
            LrSchedule::Constant => ("constant", 1.0),
            LrSchedule::StepDecay { factor } => ("step", factor),
        };
        format!(
            "epochs={}\nbatch_size={}\nlr={}\nlr_schedule={sched}\nlr_decay={factor}\nseed={}\n\
             lambda_pos={}\nlambda_vel={}\nlambda_contact={}\ncontact_channels={}\n\
             diffusion_steps={}\nbeta_start={}\nbeta_end={}\nt_per_sample={}\neval_levels={}\nclip={}\n\
             checkpoint_every={}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            self.seed,
            self.loss.lambda_pos,
            self.loss.lambda_vel,
            self.loss.lambda_contact,
            kv::join(&self.loss.contact_channels),
            self.diffusion_steps,
            self.beta_start,
            self.beta_end,
            self.t_per_sample,
            self.eval_levels,
            self.clip,
            self.checkpoint_every,
        )
    }

    /// Consumes the training keys from `kv`. Position channels for the loss
    /// come from the model configuration.
    pub fn take_from(kv: &mut KvMap, position_channels: [usize; 2]) -> Result<Self> {
        let d = Self::default();
        let schedule = match kv.take_raw("lr_schedule").as_deref() {
            None | Some("step") => LrSchedule::StepDecay {
                factor: kv.take_or("lr_decay", 0.5)?,
            },
            Some("constant") => {
                kv.take_raw("lr_decay");
                LrSchedule::Constant
            }
            Some(other) => {
                return Err(Error::Config(format!("lr_schedule={other}; valid: step, constant")))
            }
        };
        let contact_channels = match kv.take_raw("contact_channels") {
            Some(raw) => kv::split(&raw)?,
            None => Vec::new(),
        };
        let cfg = Self {
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            lr: kv.take_or("lr", d.lr)?,
            schedule,
            seed: kv.take_or("seed", d.seed)?,
            loss: LossWeights {
                lambda_pos: kv.take_or("lambda_pos", d.loss.lambda_pos)?,
                lambda_vel: kv.take_or("lambda_vel", d.loss.lambda_vel)?,
                lambda_contact: kv.take_or("lambda_contact", d.loss.lambda_contact)?,
                position_channels: position_channels.to_vec(),
                contact_channels,
            },
            diffusion_steps: kv.take_or("diffusion_steps", d.diffusion_steps)?,
            beta_start: kv.take_or("beta_start", d.beta_start)?,
            beta_end: kv.take_or("beta_end", d.beta_end)?,
            t_per_sample: kv.take_or("t_per_sample", d.t_per_sample)?,
            eval_levels: kv.take_or("eval_levels", d.eval_levels)?,
            clip: kv.take_or("clip", d.clip)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean loss parts over one epoch's training draws, plus the loss on the
/// fixed evaluation probes after the epoch's updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub parts: LossParts,
    pub eval: Option<LossParts>,
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,total,simple,pos,vel,contact,eval_total\n");
    for e in curve {
        let p = e.parts;
        let eval = e.eval.map_or(String::new(), |v| v.total.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{eval}\n",
            e.epoch, p.total, p.simple, p.pos, p.vel, p.contact
        ));
    }
    out
}

fn add_parts(acc: &mut LossParts, p: &LossParts) {
    acc.total += p.total;
    acc.simple += p.simple;
    acc.pos += p.pos;
    acc.vel += p.vel;
    acc.contact += p.contact;
}

fn scale_parts(p: &LossParts, s: f64) -> LossParts {
    LossParts {
        total: p.total * s,
        simple: p.simple * s,
        pos: p.pos * s,
        vel: p.vel * s,
        contact: p.contact * s,
    }
}

/// A fixed `(sample, t, x_t)` triple re-evaluated after every epoch.
struct Probe {
    sample: usize,
    t: usize,
    x_t: Tensor,
}

fn build_probes(normalized: &[Tensor], cfg: &TrainConfig, schedule: &NoiseSchedule) -> Result<Vec<Probe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED_E7A1));
    let t_max = schedule.steps();
    let mut probes = Vec::new();
    for (sample, x0) in normalized.iter().enumerate() {
        for j in 0..cfg.eval_levels {
            // Midpoints of equal slices of 1..=T.
            let t = (1 + ((2 * j + 1) * t_max) / (2 * cfg.eval_levels)).min(t_max);
            let noise = Tensor::randn(x0.shape(), 1.0, &mut rng);
            probes.push(Probe {
                sample,
                t,
                x_t: q_sample(x0, t, &noise, schedule)?,
            });
        }
    }
    Ok(probes)
}

fn evaluate(
    model: &Denoiser,
    probes: &[Probe],
    dataset: &[MotionSample],
    normalized: &[Tensor],
    weights: &LossWeights,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for p in probes {
        let x0_hat = model.forward(&p.x_t, &dataset[p.sample].music, p.t)?;
        let parts = loss_with_grad(
            &normalized[p.sample],
            &x0_hat,
            Some(&dataset[p.sample].contact_mask),
            weights,
            false,
        )?
        .0;
        add_parts(&mut acc, &parts);
    }
    Ok(scale_parts(&acc, 1.0 / probes.len() as f64))
}

/// Loss of `model` on the evaluation probes of `cfg` (used to report the
/// loss of an untrained model).
pub fn evaluation_loss(
    dataset: &[MotionSample],
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<Option<LossParts>> {
    if cfg.eval_levels == 0 {
        return Ok(None);
    }
    let schedule = cfg.noise_schedule()?;
    let normalized: Vec<Tensor> = dataset.iter().map(|s| state.stats.normalize(&s.motion)).collect();
    let probes = build_probes(&normalized, cfg, &schedule)?;
    evaluate(&state.model, &probes, dataset, &normalized, &cfg.loss).map(Some)
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub adam: AdamState,
    pub stats: NormStats,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(model_cfg: DenoiserConfig, dataset: &[MotionSample], seed: u64) -> Result<Self> {
        let motions: Vec<&Tensor> = dataset.iter().map(|s| &s.motion).collect();
        let stats = NormStats::from_motions(&motions)?;
        let model = Denoiser::new(model_cfg, seed)?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            adam,
            stats,
            epoch: 0,
        })
    }
}

fn check_dataset(dataset: &[MotionSample], cfg: &DenoiserConfig) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config("training needs at least one sample".into()))?;
    let shape = first.motion.shape();
    for (i, s) in dataset.iter().enumerate() {
        if s.motion.shape() != shape || s.music.shape() != first.music.shape() {
            return Err(Error::Config(format!("sample {i} does not share the dataset shape")));
        }
    }
    let (_, l, d) = first.dims();
    if d != cfg.d_in || first.music.shape() != [l, cfg.music_dim] {
        return Err(Error::Mismatch(format!(
            "data has d_in={d}, music {:?}; model expects d_in={}, music_dim={}",
            first.music.shape(),
            cfg.d_in,
            cfg.music_dim
        )));
    }
    Ok(())
}

fn clip_gradients(params: &mut ParameterStore, max_norm: f64) {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Runs epochs `state.epoch..cfg.epochs`. `on_epoch` sees the state after
/// every epoch (checkpointing, progress).
pub fn train(
    dataset: &[MotionSample],
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState, &EpochLoss) -> Result<()>,
) -> Result<(TrainState, Vec<EpochLoss>)> {
    cfg.validate()?;
    check_dataset(dataset, state.model.config())?;
    let schedule = cfg.noise_schedule()?;
    let normalized: Vec<Tensor> = dataset.iter().map(|s| state.stats.normalize(&s.motion)).collect();
    let batch = if cfg.batch_size == 0 {
        dataset.len()
    } else {
        cfg.batch_size.min(dataset.len())
    };
    let t_max = schedule.steps();
    let probes = build_probes(&normalized, cfg, &schedule)?;
    let mut curve = Vec::new();

    for epoch in state.epoch..cfg.epochs {
        // Each epoch has its own stream so resumed runs match uninterrupted ones.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let lr = cfg.lr_at(epoch);
        let mut sum = LossParts::default();
        let draws_per_epoch = dataset.len() * cfg.t_per_sample;
        // Stratified noise levels: draw `k` lands in slice `slots[k]` of
        // 1..=T, with the slice assignment shuffled every epoch.
        let mut slots: Vec<usize> = (0..draws_per_epoch).collect();
        slots.shuffle(&mut rng);
        let mut draw = 0usize;
        for chunk_start in (0..dataset.len()).step_by(batch) {
            let chunk = chunk_start..(chunk_start + batch).min(dataset.len());
            let weight = 1.0 / (chunk.len() * cfg.t_per_sample) as f64;
            for idx in chunk {
                let sample = &dataset[idx];
                for _ in 0..cfg.t_per_sample {
                    let slot = slots[draw];
                    let lo = slot * t_max / draws_per_epoch;
                    let hi = ((slot + 1) * t_max / draws_per_epoch).max(lo + 1);
                    let t = 1 + rng.gen_range(lo..hi).min(t_max - 1);
                    draw += 1;
                    let noise = Tensor::randn(normalized[idx].shape(), 1.0, &mut rng);
                    let x_t = q_sample(&normalized[idx], t, &noise, &schedule)?;
                    let (x0_hat, cache) = state
                        .model
                        .forward_train(&x_t, &sample.music, t)
                        .map_err(|e| diverged(epoch, e))?;
                    let (parts, grad) = loss_with_grad(
                        &normalized[idx],
                        &x0_hat,
                        Some(&sample.contact_mask),
                        &cfg.loss,
                        true,
                    )
                    .map_err(|e| diverged(epoch, e))?;
                    let grad = grad.expect("gradient requested").scale(weight);
                    state.model.backward(&cache, &grad)?;
                    add_parts(&mut sum, &parts);
                }
            }
            if cfg.clip > 0.0 {
                clip_gradients(state.model.params_mut(), cfg.clip);
            }
            state
                .adam
                .step(state.model.params_mut(), lr)
                .map_err(|e| diverged(epoch, e))?;
        }
        let parts = scale_parts(&sum, 1.0 / draws_per_epoch as f64);
        let eval = if probes.is_empty() {
            None
        } else {
            Some(
                evaluate(&state.model, &probes, dataset, &normalized, &cfg.loss)
                    .map_err(|e| diverged(epoch, e))?,
            )
        };
        if !parts.total.is_finite() {
            return Err(Error::Divergence {
                step: epoch + 1,
                detail: "mean loss is not finite".into(),
            });
        }
        state.epoch = epoch + 1;
        let entry = EpochLoss {
            epoch: epoch + 1,
            parts,
            eval,
        };
        curve.push(entry);
        on_epoch(&state, &entry)?;
    }
    Ok((state, curve))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric { block } => Error::Divergence {
            step: epoch + 1,
            detail: format!("non-finite value in {block}"),
        },
        other => other,
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|i| {
            let s = (i + 1).saturating_sub(w);
            values[s..=i].iter().sum::<f64>() / (i + 1 - s) as f64
        })
        .collect()
}
