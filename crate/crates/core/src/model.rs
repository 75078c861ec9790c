//! The spatial-temporal denoiser.
//!
//! Pipeline for a noisy group motion `x_t` (`N x L x d_in`):
//!
//! 1. input projection to `d_model`
//! 2. group fusion (per-dancer identity embedding + shared mix)
//! 3. per-frame distance graph from the root channels of `x_t`, followed by
//!    `gcn_layers` graph convolutions with a residual connection
//! 4. per-dancer temporal decoder: alternating differential-attention and
//!    linear-attention layers, each `x + FiLM(attn(LN(x)), cond)` followed by
//!    `x + FF(LN(x))`; `cond` is a projection of the music features
//!    concatenated with the timestep embedding
//! 5. final layer norm and output head back to `d_in`
//!
//! The network predicts the clean sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    diff_attention_backward, diff_attention_cached, diff_attention, film_backward, film_cached,
    ldt_attention, ldt_attention_backward, ldt_attention_cached, DiffAttnCache, DiffAttnWeights,
    FilmCache, LdtCache, LdtWeights, LDT_GUARD,
};
use crate::error::{Error, Result};
use crate::graph::{gcn_layer_backward, gcn_layer_cached, DistanceGraph, GcnCache, GraphConfig};
use crate::kv::{self, KvMap};
use crate::layers::{
    group_fusion_backward, group_fusion_cached, layer_norm, layer_norm_backward,
    sinusoidal_embedding, FusionCache, NormCache,
};
use crate::param::{ParamId, ParameterStore};
use crate::tensor::{linear_backward, linear_forward, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Motion channels per dancer and frame.
    pub d_in: usize,
    /// Raw music-conditioning channels per frame.
    pub music_dim: usize,
    pub d_model: usize,
    pub gcn_layers: usize,
    /// Alternating differential / linear attention layers; even, at least 2.
    pub decoder_layers: usize,
    pub heads: usize,
    pub window: usize,
    pub top_k: usize,
    pub epsilon: f64,
    /// Width of the FiLM conditioning features.
    pub cond_dim: usize,
    /// Width of the timestep embedding (even).
    pub time_dim: usize,
    pub ff_mult: usize,
    /// Size of the dancer identity-embedding table.
    pub max_dancers: usize,
    pub position_channels: [usize; 2],
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            music_dim: 7,
            d_model: 64,
            gcn_layers: 2,
            decoder_layers: 4,
            heads: 4,
            window: 64,
            top_k: 8,
            epsilon: 0.1,
            cond_dim: 16,
            time_dim: 16,
            ff_mult: 2,
            max_dancers: 16,
            position_channels: [0, 1],
        }
    }
}

impl DenoiserConfig {
    /// The tiny configuration used by end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            heads: 2,
            window: 4,
            cond_dim: 4,
            time_dim: 4,
            max_dancers: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.decoder_layers < 2 || !self.decoder_layers.is_multiple_of(2) {
            return bad(format!("decoder_layers must be even and >= 2, got {}", self.decoder_layers));
        }
        let [px, py] = self.position_channels;
        if px >= self.d_in || py >= self.d_in || px == py {
            return bad(format!("position channels {px},{py} invalid for d_in {}", self.d_in));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim must be even, got {}", self.time_dim));
        }
        if self.window == 0 || self.top_k == 0 || self.max_dancers == 0 || self.ff_mult == 0 {
            return bad("window, top_k, max_dancers and ff_mult must be positive".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.d_model == 0 || self.cond_dim == 0 {
            return bad("d_model and cond_dim must be positive".into());
        }
        Ok(())
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            epsilon: self.epsilon,
            top_k: self.top_k,
        }
    }

    pub fn to_kv(&self) -> String {
        format!(
            "d_in={}\nmusic_dim={}\nd_model={}\ngcn_layers={}\ndecoder_layers={}\nheads={}\n\
             window={}\ntop_k={}\nepsilon={}\ncond_dim={}\ntime_dim={}\nff_mult={}\n\
             max_dancers={}\nposition_channels={}\n",
            self.d_in,
            self.music_dim,
            self.d_model,
            self.gcn_layers,
            self.decoder_layers,
            self.heads,
            self.window,
            self.top_k,
            self.epsilon,
            self.cond_dim,
            self.time_dim,
            self.ff_mult,
            self.max_dancers,
            kv::join(&self.position_channels),
        )
    }

    /// Consumes the model keys from `kv`, defaulting absent ones.
    pub fn take_from(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let pos = match kv.take_raw("position_channels") {
            None => d.position_channels,
            Some(raw) => {
                let v: Vec<usize> = kv::split(&raw)?;
                <[usize; 2]>::try_from(v)
                    .map_err(|_| Error::Config(format!("position_channels={raw} needs two entries")))?
            }
        };
        let cfg = Self {
            d_in: kv.take_or("d_in", d.d_in)?,
            music_dim: kv.take_or("music_dim", d.music_dim)?,
            d_model: kv.take_or("d_model", d.d_model)?,
            gcn_layers: kv.take_or("gcn_layers", d.gcn_layers)?,
            decoder_layers: kv.take_or("decoder_layers", d.decoder_layers)?,
            heads: kv.take_or("heads", d.heads)?,
            window: kv.take_or("window", d.window)?,
            top_k: kv.take_or("top_k", d.top_k)?,
            epsilon: kv.take_or("epsilon", d.epsilon)?,
            cond_dim: kv.take_or("cond_dim", d.cond_dim)?,
            time_dim: kv.take_or("time_dim", d.time_dim)?,
            ff_mult: kv.take_or("ff_mult", d.ff_mult)?,
            max_dancers: kv.take_or("max_dancers", d.max_dancers)?,
            position_channels: pos,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Decoder layer kinds, alternating starting with differential attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Diff,
    Linear,
}

impl AttnKind {
    pub fn for_layer(i: usize) -> Self {
        if i.is_multiple_of(2) {
            AttnKind::Diff
        } else {
            AttnKind::Linear
        }
    }
}

#[derive(Debug, Clone)]
enum AttnIds {
    Diff {
        w_q: ParamId,
        w_k: ParamId,
        w_v: ParamId,
        lambda: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
    Linear {
        w_q: ParamId,
        w_k: ParamId,
        w_v: ParamId,
    },
}

#[derive(Debug, Clone)]
struct DecoderIds {
    attn: AttnIds,
    film_gamma: ParamId,
    film_beta: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    input_w: ParamId,
    input_b: ParamId,
    embed: ParamId,
    mix_w: ParamId,
    mix_b: ParamId,
    gcn: Vec<ParamId>,
    time_w: ParamId,
    time_b: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    decoder: Vec<DecoderIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Denoiser weights plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParameterStore,
    ids: Layout,
}

/// Anything that maps `(x_t, music, t)` to a clean-sample prediction.
pub trait Denoise {
    fn predict_x0(&self, x_t: &Tensor, music: &Tensor, t: usize) -> Result<Tensor>;
}

impl Denoise for Denoiser {
    fn predict_x0(&self, x_t: &Tensor, music: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(x_t, music, t)
    }
}

fn glorot(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
}

impl Denoiser {
    /// Builds a randomly initialised denoiser.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        let cond_in = cfg.music_dim + cfg.time_dim;
        let reg = |store: &mut ParameterStore, name: String, t: Tensor| store.register(name, t);

        let input_w = reg(&mut store, "input.w".into(), glorot(&[cfg.d_in, d], &mut rng))?;
        let input_b = reg(&mut store, "input.b".into(), Tensor::zeros(&[d]))?;
        let embed = reg(
            &mut store,
            "fusion.embed".into(),
            Tensor::randn(&[cfg.max_dancers, d], 0.5, &mut rng),
        )?;
        let mix_w = reg(&mut store, "fusion.mix.w".into(), glorot(&[d, d], &mut rng))?;
        let mix_b = reg(&mut store, "fusion.mix.b".into(), Tensor::zeros(&[d]))?;
        let mut gcn = Vec::new();
        for g in 0..cfg.gcn_layers {
            gcn.push(reg(&mut store, format!("gcn.{g}.w"), glorot(&[d, d], &mut rng))?);
        }
        let time_w = reg(
            &mut store,
            "time.w".into(),
            glorot(&[cfg.time_dim, cfg.time_dim], &mut rng),
        )?;
        let time_b = reg(&mut store, "time.b".into(), Tensor::zeros(&[cfg.time_dim]))?;
        let cond_w = reg(&mut store, "cond.w".into(), glorot(&[cond_in, cfg.cond_dim], &mut rng))?;
        let cond_b = reg(&mut store, "cond.b".into(), Tensor::zeros(&[cfg.cond_dim]))?;

        let mut decoder = Vec::new();
        for i in 0..cfg.decoder_layers {
            let p = format!("dec.{i}");
            let attn = match AttnKind::for_layer(i) {
                AttnKind::Diff => AttnIds::Diff {
                    w_q: reg(&mut store, format!("{p}.diff.w_q"), glorot(&[d, 2 * d], &mut rng))?,
                    w_k: reg(&mut store, format!("{p}.diff.w_k"), glorot(&[d, 2 * d], &mut rng))?,
                    w_v: reg(&mut store, format!("{p}.diff.w_v"), glorot(&[d, 2 * d], &mut rng))?,
                    lambda: reg(
                        &mut store,
                        format!("{p}.diff.lambda"),
                        Tensor::filled(&[cfg.heads], 0.5),
                    )?,
                    out_w: reg(&mut store, format!("{p}.diff.out.w"), glorot(&[2 * d, d], &mut rng))?,
                    out_b: reg(&mut store, format!("{p}.diff.out.b"), Tensor::zeros(&[d]))?,
                },
                AttnKind::Linear => AttnIds::Linear {
                    w_q: reg(&mut store, format!("{p}.ldt.w_q"), glorot(&[d, d], &mut rng))?,
                    w_k: reg(&mut store, format!("{p}.ldt.w_k"), glorot(&[d, d], &mut rng))?,
                    w_v: reg(&mut store, format!("{p}.ldt.w_v"), glorot(&[d, d], &mut rng))?,
                },
            };
            let film_gamma = reg(
                &mut store,
                format!("{p}.film.w_gamma"),
                Tensor::randn(&[cfg.cond_dim, d], 0.1 / (cfg.cond_dim as f64).sqrt(), &mut rng),
            )?;
            let film_beta = reg(
                &mut store,
                format!("{p}.film.w_beta"),
                Tensor::randn(&[cfg.cond_dim, d], 0.1 / (cfg.cond_dim as f64).sqrt(), &mut rng),
            )?;
            let ff1_w = reg(&mut store, format!("{p}.ff1.w"), glorot(&[d, ff], &mut rng))?;
            let ff1_b = reg(&mut store, format!("{p}.ff1.b"), Tensor::zeros(&[ff]))?;
            let ff2_w = reg(&mut store, format!("{p}.ff2.w"), glorot(&[ff, d], &mut rng))?;
            let ff2_b = reg(&mut store, format!("{p}.ff2.b"), Tensor::zeros(&[d]))?;
            decoder.push(DecoderIds {
                attn,
                film_gamma,
                film_beta,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
            });
        }
        let out_w = reg(&mut store, "output.w".into(), glorot(&[d, cfg.d_in], &mut rng))?;
        let out_b = reg(&mut store, "output.b".into(), Tensor::zeros(&[cfg.d_in]))?;

        Ok(Self {
            cfg,
            params: store,
            ids: Layout {
                input_w,
                input_b,
                embed,
                mix_w,
                mix_b,
                gcn,
                time_w,
                time_b,
                cond_w,
                cond_b,
                decoder,
                out_w,
                out_b,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn v(&self, id: ParamId) -> &Tensor {
        self.params.value(id)
    }

    fn diff_weights(&self, ids: &AttnIds) -> Option<DiffAttnWeights> {
        match ids {
            AttnIds::Diff {
                w_q, w_k, w_v, lambda, ..
            } => Some(DiffAttnWeights {
                w_q: self.v(*w_q).clone(),
                w_k: self.v(*w_k).clone(),
                w_v: self.v(*w_v).clone(),
                lambda: self.v(*lambda).clone(),
                heads: self.cfg.heads,
            }),
            AttnIds::Linear { .. } => None,
        }
    }

    fn ldt_weights(&self, ids: &AttnIds) -> Option<LdtWeights> {
        match ids {
            AttnIds::Linear { w_q, w_k, w_v } => Some(LdtWeights {
                w_q: self.v(*w_q).clone(),
                w_k: self.v(*w_k).clone(),
                w_v: self.v(*w_v).clone(),
                window: self.cfg.window,
                guard: LDT_GUARD,
            }),
            AttnIds::Diff { .. } => None,
        }
    }

    /// Learned timestep features: sinusoidal embedding followed by a linear
    /// projection.
    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor> {
        let raw = sinusoidal_embedding(t, self.cfg.time_dim)?.reshape(&[1, self.cfg.time_dim])?;
        linear_forward(&raw, self.v(self.ids.time_w), self.v(self.ids.time_b))
    }

    /// Predicts `x_0` from `x_t` (`N x L x d_in`) and music (`L x music_dim`).
    pub fn forward(&self, x_t: &Tensor, music: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self.run(x_t, music, t, false)?.0)
    }

    /// Forward pass that also returns the intermediates for [`Self::backward`].
    pub fn forward_train(&self, x_t: &Tensor, music: &Tensor, t: usize) -> Result<(Tensor, ForwardCache)> {
        let (out, cache) = self.run(x_t, music, t, true)?;
        Ok((out, cache.expect("training forward keeps its cache")))
    }

    fn check_inputs(&self, x_t: &Tensor, music: &Tensor) -> Result<(usize, usize)> {
        let (n, l) = match x_t.shape() {
            [n, l, d] if *d == self.cfg.d_in && *n >= 1 && *l >= 1 => (*n, *l),
            s => {
                return Err(Error::shape(
                    "denoiser",
                    format!("x_t {s:?}, expected N x L x {}", self.cfg.d_in),
                ))
            }
        };
        if music.shape() != [l, self.cfg.music_dim] {
            return Err(Error::shape(
                "denoiser",
                format!("music {:?}, expected [{l}, {}]", music.shape(), self.cfg.music_dim),
            ));
        }
        Ok((n, l))
    }

    fn run(
        &self,
        x_t: &Tensor,
        music: &Tensor,
        t: usize,
        keep: bool,
    ) -> Result<(Tensor, Option<ForwardCache>)> {
        let (n, l) = self.check_inputs(x_t, music)?;
        let cfg = &self.cfg;
        let d = cfg.d_model;
        x_t.ensure_finite("denoiser input")?;

        let flat = x_t.clone().reshape(&[n * l, cfg.d_in])?;
        let h0 = linear_forward(&flat, self.v(self.ids.input_w), self.v(self.ids.input_b))?
            .reshape(&[n, l, d])?;
        let (h1, fusion) = group_fusion_cached(
            &h0,
            self.v(self.ids.embed),
            self.v(self.ids.mix_w),
            self.v(self.ids.mix_b),
        )?;
        h1.ensure_finite("group fusion")?;

        // Spatial stage, frame-major.
        let [px, py] = cfg.position_channels;
        let mut graphs = Vec::with_capacity(l);
        let mut frames = Vec::with_capacity(l);
        for f in 0..l {
            let pos = Tensor::from_fn(&[n, 2], |i| {
                let (dancer, axis) = (i / 2, i % 2);
                x_t.data()[(dancer * l + f) * cfg.d_in + if axis == 0 { px } else { py }]
            });
            graphs.push(DistanceGraph::build(&pos, cfg.graph())?.normalized);
            frames.push(Tensor::from_fn(&[n, d], |i| {
                let (dancer, c) = (i / d, i % d);
                h1.data()[(dancer * l + f) * d + c]
            }));
        }
        let mut gcn_caches = Vec::with_capacity(cfg.gcn_layers);
        for &w in &self.ids.gcn {
            let mut layer_caches = Vec::with_capacity(l);
            for (frame, graph) in frames.iter_mut().zip(&graphs) {
                let (out, c) = gcn_layer_cached(frame, graph, self.v(w))?;
                *frame = out;
                layer_caches.push(c);
            }
            gcn_caches.push(layer_caches);
        }
        let mut h2 = h1.clone();
        for (f, frame) in frames.iter().enumerate() {
            for dancer in 0..n {
                let row = &mut h2.data_mut()[(dancer * l + f) * d..(dancer * l + f + 1) * d];
                for (a, b) in row.iter_mut().zip(frame.row(dancer)) {
                    *a += b;
                }
            }
        }
        h2.ensure_finite("spatial gcn")?;

        // Conditioning shared by every FiLM block.
        let temb = self.timestep_embedding(t)?;
        let cond_in_dim = cfg.music_dim + cfg.time_dim;
        let cond_in = Tensor::from_fn(&[l, cond_in_dim], |i| {
            let (f, c) = (i / cond_in_dim, i % cond_in_dim);
            if c < cfg.music_dim {
                music.data()[f * cfg.music_dim + c]
            } else {
                temb.data()[c - cfg.music_dim]
            }
        });
        let cond = linear_forward(&cond_in, self.v(self.ids.cond_w), self.v(self.ids.cond_b))?;
        cond.ensure_finite("conditioning")?;

        let diff_w: Vec<Option<DiffAttnWeights>> =
            self.ids.decoder.iter().map(|ids| self.diff_weights(&ids.attn)).collect();
        let ldt_w: Vec<Option<LdtWeights>> =
            self.ids.decoder.iter().map(|ids| self.ldt_weights(&ids.attn)).collect();

        let mut out = Vec::with_capacity(n * l * cfg.d_in);
        let mut dancer_caches = Vec::new();
        for dancer in 0..n {
            let mut x = Tensor::new(&[l, d], h2.data()[dancer * l * d..(dancer + 1) * l * d].to_vec())?;
            let mut layer_caches = Vec::new();
            for (i, ids) in self.ids.decoder.iter().enumerate() {
                let (a, ln1) = layer_norm(&x);
                let (attn_out, attn_cache) = match (&diff_w[i], &ldt_w[i], &ids.attn) {
                    (Some(p), _, AttnIds::Diff { out_w, out_b, .. }) => {
                        let (wide, c) = if keep {
                            let (o, c) = diff_attention_cached(&a, p)?;
                            (o, Some(c))
                        } else {
                            (diff_attention(&a, p)?, None)
                        };
                        let o = linear_forward(&wide, self.v(*out_w), self.v(*out_b))?;
                        (o, c.map(|c| AttnCache::Diff { cache: c, wide }))
                    }
                    (_, Some(p), AttnIds::Linear { .. }) => {
                        if keep {
                            let (o, c) = ldt_attention_cached(&a, p)?;
                            (o, Some(AttnCache::Linear(c)))
                        } else {
                            (ldt_attention(&a, p)?, None)
                        }
                    }
                    _ => unreachable!("attention weights follow the layer kind"),
                };
                attn_out.ensure_finite(&format!("decoder layer {i} attention"))?;
                let (modulated, film) = film_cached(
                    &attn_out,
                    &cond,
                    self.v(ids.film_gamma),
                    self.v(ids.film_beta),
                )?;
                x.add_assign(&modulated)?;
                let (b, ln2) = layer_norm(&x);
                let pre = linear_forward(&b, self.v(ids.ff1_w), self.v(ids.ff1_b))?;
                let hidden = crate::tensor::relu(&pre);
                let ff = linear_forward(&hidden, self.v(ids.ff2_w), self.v(ids.ff2_b))?;
                x.add_assign(&ff)?;
                x.ensure_finite(&format!("decoder layer {i}"))?;
                if keep {
                    layer_caches.push(LayerCache {
                        ln1,
                        attn: attn_cache.expect("cache kept"),
                        film,
                        ln2,
                        pre,
                        hidden,
                    });
                }
            }
            let (z, ln_out) = layer_norm(&x);
            let y = linear_forward(&z, self.v(self.ids.out_w), self.v(self.ids.out_b))?;
            y.ensure_finite("output head")?;
            out.extend_from_slice(y.data());
            if keep {
                dancer_caches.push(DancerCache {
                    layers: layer_caches,
                    ln_out,
                });
            }
        }
        let out = Tensor::new(&[n, l, cfg.d_in], out)?;
        let cache = keep.then(|| ForwardCache {
            n,
            l,
            flat,
            fusion,
            graphs,
            gcn: gcn_caches,
            cond_in,
            temb_raw: sinusoidal_embedding(t, cfg.time_dim)
                .and_then(|e| e.reshape(&[1, cfg.time_dim]))
                .expect("validated time_dim"),
            cond,
            dancers: dancer_caches,
        });
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for `grad_out = dLoss/d(output)`.
    pub fn backward(&mut self, cache: &ForwardCache, grad_out: &Tensor) -> Result<()> {
        let cfg = self.cfg.clone();
        let (n, l, d) = (cache.n, cache.l, cfg.d_model);
        if grad_out.shape() != [n, l, cfg.d_in] {
            return Err(Error::shape("denoiser backward", format!("{:?}", grad_out.shape())));
        }
        let ids = self.ids.clone();
        let diff_w: Vec<Option<DiffAttnWeights>> =
            ids.decoder.iter().map(|i| self.diff_weights(&i.attn)).collect();
        let ldt_w: Vec<Option<LdtWeights>> =
            ids.decoder.iter().map(|i| self.ldt_weights(&i.attn)).collect();

        let mut dcond = Tensor::zeros(&[l, cfg.cond_dim]);
        let mut dh2 = vec![0.0; n * l * d];
        for (dancer, dc) in cache.dancers.iter().enumerate() {
            let dy = Tensor::new(
                &[l, cfg.d_in],
                grad_out.data()[dancer * l * cfg.d_in..(dancer + 1) * l * cfg.d_in].to_vec(),
            )?;
            let g = linear_backward(&dc.ln_out.y, self.v(ids.out_w), &dy)?;
            self.params.accumulate(ids.out_w, &g.dw)?;
            self.params.accumulate(ids.out_b, &g.db)?;
            let mut dx = layer_norm_backward(&dc.ln_out, &g.dx);
            for (i, lc) in dc.layers.iter().enumerate().rev() {
                let li = &ids.decoder[i];
                // feed-forward sublayer
                let g2 = linear_backward(&lc.hidden, self.v(li.ff2_w), &dx)?;
                self.params.accumulate(li.ff2_w, &g2.dw)?;
                self.params.accumulate(li.ff2_b, &g2.db)?;
                let mut dpre = g2.dx;
                for (gv, &p) in dpre.data_mut().iter_mut().zip(lc.pre.data()) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
                let g1 = linear_backward(&lc.ln2.y, self.v(li.ff1_w), &dpre)?;
                self.params.accumulate(li.ff1_w, &g1.dw)?;
                self.params.accumulate(li.ff1_b, &g1.db)?;
                dx.add_assign(&layer_norm_backward(&lc.ln2, &g1.dx))?;
                // attention sublayer
                let gf = film_backward(&lc.film, self.v(li.film_gamma), self.v(li.film_beta), &dx)?;
                self.params.accumulate(li.film_gamma, &gf.dw_gamma)?;
                self.params.accumulate(li.film_beta, &gf.dw_beta)?;
                dcond.add_assign(&gf.dcond)?;
                let da = match (&lc.attn, &li.attn) {
                    (
                        AttnCache::Diff { cache: ac, wide },
                        AttnIds::Diff {
                            w_q,
                            w_k,
                            w_v,
                            lambda,
                            out_w,
                            out_b,
                        },
                    ) => {
                        let go = linear_backward(wide, self.v(*out_w), &gf.dx)?;
                        self.params.accumulate(*out_w, &go.dw)?;
                        self.params.accumulate(*out_b, &go.db)?;
                        let p = diff_w[i].as_ref().expect("diff layer");
                        let ga = diff_attention_backward(ac, p, &go.dx)?;
                        self.params.accumulate(*w_q, &ga.dw_q)?;
                        self.params.accumulate(*w_k, &ga.dw_k)?;
                        self.params.accumulate(*w_v, &ga.dw_v)?;
                        self.params.accumulate(*lambda, &ga.dlambda)?;
                        ga.dx
                    }
                    (AttnCache::Linear(ac), AttnIds::Linear { w_q, w_k, w_v }) => {
                        let p = ldt_w[i].as_ref().expect("linear layer");
                        let ga = ldt_attention_backward(ac, p, &gf.dx)?;
                        self.params.accumulate(*w_q, &ga.dw_q)?;
                        self.params.accumulate(*w_k, &ga.dw_k)?;
                        self.params.accumulate(*w_v, &ga.dw_v)?;
                        ga.dx
                    }
                    _ => unreachable!("cache kind follows the layer kind"),
                };
                dx.add_assign(&layer_norm_backward(&lc.ln1, &da))?;
            }
            dh2[dancer * l * d..(dancer + 1) * l * d].copy_from_slice(dx.data());
        }

        // Spatial stage: residual plus GCN stack.
        let mut dframes: Vec<Tensor> = (0..l)
            .map(|f| {
                Tensor::from_fn(&[n, d], |i| {
                    let (dancer, c) = (i / d, i % d);
                    dh2[(dancer * l + f) * d + c]
                })
            })
            .collect();
        for (layer, &w) in ids.gcn.iter().enumerate().rev() {
            let mut dw = Tensor::zeros(&[d, d]);
            for (f, dframe) in dframes.iter_mut().enumerate() {
                let g = gcn_layer_backward(&cache.gcn[layer][f], &cache.graphs[f], self.v(w), dframe)?;
                dw.add_assign(&g.dw)?;
                *dframe = g.dh;
            }
            self.params.accumulate(w, &dw)?;
        }
        let mut dh1 = dh2;
        for (f, dframe) in dframes.iter().enumerate() {
            for dancer in 0..n {
                let row = &mut dh1[(dancer * l + f) * d..(dancer * l + f + 1) * d];
                for (a, b) in row.iter_mut().zip(dframe.row(dancer)) {
                    *a += b;
                }
            }
        }
        let dh1 = Tensor::new(&[n, l, d], dh1)?;

        // Conditioning.
        let gc = linear_backward(&cache.cond_in, self.v(ids.cond_w), &dcond)?;
        self.params.accumulate(ids.cond_w, &gc.dw)?;
        self.params.accumulate(ids.cond_b, &gc.db)?;
        let cin = cfg.music_dim + cfg.time_dim;
        let dtemb = Tensor::from_fn(&[1, cfg.time_dim], |c| {
            (0..l).map(|f| gc.dx.data()[f * cin + cfg.music_dim + c]).sum()
        });
        let gt = linear_backward(&cache.temb_raw, self.v(ids.time_w), &dtemb)?;
        self.params.accumulate(ids.time_w, &gt.dw)?;
        self.params.accumulate(ids.time_b, &gt.db)?;

        // Group fusion and input projection.
        let gfu = group_fusion_backward(&cache.fusion, self.v(ids.embed), self.v(ids.mix_w), &dh1)?;
        self.params.accumulate(ids.embed, &gfu.dembed)?;
        self.params.accumulate(ids.mix_w, &gfu.dmix_w)?;
        self.params.accumulate(ids.mix_b, &gfu.dmix_b)?;
        let dh0 = gfu.dx.reshape(&[n * l, d])?;
        let gi = linear_backward(&cache.flat, self.v(ids.input_w), &dh0)?;
        self.params.accumulate(ids.input_w, &gi.dw)?;
        self.params.accumulate(ids.input_b, &gi.db)?;
        Ok(())
    }

    /// Rebuilds a denoiser for `cfg` and fills it from `(name, value)` pairs.
    /// Names and shapes must match the layout exactly.
    pub fn from_named(cfg: DenoiserConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint has {} tensors, config expects {}",
                named.len(),
                model.params.len()
            )));
        }
        for (name, value) in named {
            let p = model
                .params
                .by_name_mut(&name)
                .ok_or_else(|| Error::Mismatch(format!("unexpected tensor {name}")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::Mismatch(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }
}

enum AttnCache {
    Diff { cache: DiffAttnCache, wide: Tensor },
    Linear(LdtCache),
}

struct LayerCache {
    ln1: NormCache,
    attn: AttnCache,
    film: FilmCache,
    ln2: NormCache,
    pre: Tensor,
    hidden: Tensor,
}

struct DancerCache {
    layers: Vec<LayerCache>,
    ln_out: NormCache,
}

/// Intermediates of [`Denoiser::forward_train`].
pub struct ForwardCache {
    n: usize,
    l: usize,
    flat: Tensor,
    fusion: FusionCache,
    graphs: Vec<Tensor>,
    gcn: Vec<Vec<GcnCache>>,
    cond_in: Tensor,
    temb_raw: Tensor,
    cond: Tensor,
    dancers: Vec<DancerCache>,
}

impl ForwardCache {
    pub fn conditioning(&self) -> &Tensor {
        &self.cond
    }
}
