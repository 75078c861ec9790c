//! `STGD-CKPT-1` checkpoints: a `key=value` header (model config, noise
//! schedule, progress, normalisation statistics) followed by named
//! little-endian tensors.
//!
//! Tensor record: `u64 name length, name bytes, u64 rank, u64 dims..., f64
//! payload`. Optimizer moments, when present, are stored as
//! `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use crate::binio::{self, Reader};
use crate::data::NormStats;
use crate::diffusion::{generate, ScheduleSpec};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::model::{Denoise, Denoiser, DenoiserConfig};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainState};

pub const CKPT_MAGIC: &str = "STGD-CKPT-1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub stats: NormStats,
    /// Schedule the model was trained under.
    pub schedule: ScheduleSpec,
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_state(s: &TrainState, schedule: ScheduleSpec) -> Self {
        Self {
            model: s.model.clone(),
            stats: s.stats.clone(),
            schedule,
            epoch: s.epoch,
            adam: Some(s.adam.clone()),
        }
    }

    /// Training state for resumption; fails when no optimizer moments were
    /// stored.
    pub fn into_train_state(self) -> Result<TrainState> {
        let adam = self
            .adam
            .ok_or_else(|| Error::Mismatch("checkpoint carries no optimizer state".into()))?;
        Ok(TrainState {
            model: self.model,
            adam,
            stats: self.stats,
            epoch: self.epoch,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .collect();
        if let Some(a) = &self.adam {
            for (p, (m, v)) in self.model.params().iter().zip(a.m.iter().zip(&a.v)) {
                tensors.push((format!("adam.m.{}", p.name), m));
                tensors.push((format!("adam.v.{}", p.name), v));
            }
        }
        let adam_step = self.adam.as_ref().map_or(0, |a| a.step);
        let mut header = format!("{CKPT_MAGIC}\n{}", self.model.config().to_kv());
        header.push_str(&format!(
            "diffusion_steps={}\nbeta_start={}\nbeta_end={}\nepoch={}\nadam_step={adam_step}\n\
             norm_mean={}\nnorm_std={}\ntensors={}\n\n",
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.epoch,
            kv::join(&self.stats.mean),
            kv::join(&self.stats.std),
            tensors.len()
        ));
        let mut buf = header.into_bytes();
        for (name, t) in tensors {
            binio::put_u64(&mut buf, name.len() as u64);
            buf.extend_from_slice(name.as_bytes());
            binio::put_u64(&mut buf, t.shape().len() as u64);
            for &d in t.shape() {
                binio::put_u64(&mut buf, d as u64);
            }
            binio::put_f64s(&mut buf, t.data());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, payload) = binio::split_header(bytes, CKPT_MAGIC)?;
        let parse = || -> Result<_> {
            let mut kv = KvMap::parse(text)?;
            let cfg = DenoiserConfig::take_from(&mut kv)?;
            let schedule = ScheduleSpec {
                steps: kv.take_required("diffusion_steps")?,
                beta_start: kv.take_required("beta_start")?,
                beta_end: kv.take_required("beta_end")?,
            };
            schedule.build()?;
            let epoch: usize = kv.take_required("epoch")?;
            let adam_step: u64 = kv.take_required("adam_step")?;
            let mean: Vec<f64> = kv::split(&kv.take_raw("norm_mean").unwrap_or_default())?;
            let std: Vec<f64> = kv::split(&kv.take_raw("norm_std").unwrap_or_default())?;
            let count: usize = kv.take_required("tensors")?;
            kv.finish()?;
            if mean.len() != cfg.d_in || std.len() != cfg.d_in {
                return Err(Error::Config("normalization statistics do not match d_in".into()));
            }
            Ok((cfg, schedule, epoch, adam_step, NormStats { mean, std }, count))
        };
        let (cfg, schedule, epoch, adam_step, stats, count) = parse().map_err(binio::header_error)?;
        let mut r = Reader::new(bytes, payload);
        let mut named = Vec::with_capacity(count);
        let mut moments = Vec::new();
        for _ in 0..count {
            let at = r.offset();
            let len = r.u64("tensor name length")? as usize;
            let name = std::str::from_utf8(r.bytes(len, "tensor name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    detail: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u64("tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("tensor {name} has implausible rank {rank}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::Format {
                    offset: at,
                    detail: format!("tensor {name} is too large"),
                }
            })?;
            let t = Tensor::new(&shape, r.f64s(n, "tensor payload")?)?;
            if name.starts_with("adam.") {
                moments.push((name, t));
            } else {
                named.push((name, t));
            }
        }
        r.finish()?;
        let model = Denoiser::from_named(cfg, named)?;
        let adam = if moments.is_empty() {
            None
        } else {
            let mut adam = AdamState::new(model.params());
            adam.step = adam_step;
            for (name, t) in moments {
                let (kind, pname) = name["adam.".len()..]
                    .split_once('.')
                    .ok_or_else(|| Error::Mismatch(format!("bad optimizer tensor {name}")))?;
                let idx = model
                    .params()
                    .iter()
                    .position(|p| p.name == pname)
                    .ok_or_else(|| Error::Mismatch(format!("optimizer tensor for unknown {pname}")))?;
                let slot = match kind {
                    "m" => &mut adam.m[idx],
                    "v" => &mut adam.v[idx],
                    _ => return Err(Error::Mismatch(format!("bad optimizer tensor {name}"))),
                };
                if slot.shape() != t.shape() {
                    return Err(Error::Mismatch(format!("optimizer tensor {name} has wrong shape")));
                }
                *slot = t;
            }
            Some(adam)
        };
        Ok(Self {
            model,
            stats,
            schedule,
            epoch,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    /// Samples `n_dancers` dancers for the conditioning `music` (`L x
    /// music_dim`) and maps the result back to data units. `steps` defaults
    /// to the training schedule; other counts keep the same noise range.
    pub fn sample(
        &self,
        music: &Tensor,
        n_dancers: usize,
        steps: Option<usize>,
        seed: u64,
        deterministic: bool,
    ) -> Result<Tensor> {
        let cfg = self.model.config();
        if music.shape().len() != 2 || music.cols() != cfg.music_dim {
            return Err(Error::Mismatch(format!(
                "conditioning {:?} does not match the checkpoint's music_dim {}",
                music.shape(),
                cfg.music_dim
            )));
        }
        let steps = steps.unwrap_or(self.schedule.steps);
        if steps == 0 || n_dancers == 0 || music.rows() == 0 {
            return Err(Error::Config("need steps, dancers and frames of at least 1".into()));
        }
        let schedule = self.schedule.with_steps(steps).build()?;
        let model = Rescaled {
            inner: &self.model,
            train_steps: self.schedule.steps,
            steps,
        };
        let x = generate(&model, music, [n_dancers, music.rows(), cfg.d_in], &schedule, seed, deterministic)?;
        Ok(self.stats.denormalize(&x))
    }
}

/// Evaluates a model trained with `train_steps` steps at step `t` of a
/// schedule with `steps` steps, mapping `t` to the same noise fraction.
struct Rescaled<'a> {
    inner: &'a Denoiser,
    train_steps: usize,
    steps: usize,
}

impl Denoise for Rescaled<'_> {
    fn predict_x0(&self, x_t: &Tensor, music: &Tensor, t: usize) -> Result<Tensor> {
        let mapped = ((t * self.train_steps) as f64 / self.steps as f64).round() as usize;
        self.inner.forward(x_t, music, mapped.clamp(1, self.train_steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_ckpt(with_adam: bool) -> Checkpoint {
        let model = Denoiser::new(DenoiserConfig::tiny(), 4).unwrap();
        let mut adam = AdamState::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in adam.m.iter_mut() {
            *m = Tensor::randn(m.shape(), 1.0, &mut rng);
        }
        adam.step = 7;
        Checkpoint {
            model,
            stats: NormStats {
                mean: (0..8).map(|i| i as f64 * 0.1).collect(),
                std: vec![1.0 / 3.0; 8],
            },
            schedule: ScheduleSpec {
                steps: 50,
                beta_start: 2e-3,
                beta_end: 0.4,
            },
            epoch: 3,
            adam: with_adam.then_some(adam),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_adam in [false, true] {
            let c = sample_ckpt(with_adam);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            assert_eq!(back.model.params(), c.model.params());
            assert_eq!(back.model.config(), c.model.config());
            assert_eq!(back.stats, c.stats);
            assert_eq!(back.epoch, 3);
            assert_eq!(back.schedule, c.schedule);
            assert_eq!(back.adam, c.adam);
            assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }

    #[test]
    fn config_mismatch_is_reported() {
        let bytes = sample_ckpt(false).to_bytes();
        let text = String::from_utf8_lossy(&bytes).replacen("d_model=8", "d_model=16", 1);
        let mut fixed = text.as_bytes().to_vec();
        // Keep the payload byte-identical; only the header changed length.
        let header_end = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        let new_end = fixed.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        fixed.truncate(new_end);
        fixed.extend_from_slice(&bytes[header_end..]);
        assert!(matches!(Checkpoint::from_bytes(&fixed), Err(Error::Mismatch(_))));
    }

    #[test]
    fn corrupt_checkpoints() {
        let bytes = sample_ckpt(true).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[3] = b'?';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
