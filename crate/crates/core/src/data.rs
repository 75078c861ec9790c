//! Synthetic group choreography and the `STGD-MOT-1` motion file format.
//!
//! Every sample has `d_in` channels per dancer and frame: two root-position
//! channels followed by smooth tempo-locked "limb" features. Conditioning is
//! `[sin beat phase, cos beat phase, style one-hot (4), tempo]`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::tensor::Tensor;

pub const MOTION_MAGIC: &str = "STGD-MOT-1";
/// Conditioning width produced by the generator.
pub const COND_DIM: usize = 7;
/// Largest root coordinate or limb value the generator may emit.
pub const VALUE_BOUND: f64 = 10.0;
/// Largest per-frame change the generator may emit.
pub const STEP_BOUND: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Style {
    Circle,
    Line,
    Figure8,
    Crossover,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Circle, Style::Line, Style::Figure8, Style::Crossover];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Circle => "circle",
            Style::Line => "line",
            Style::Figure8 => "figure8",
            Style::Crossover => "crossover",
        }
    }

    fn index(self) -> usize {
        Style::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn valid_names() -> String {
        Style::ALL.map(Style::as_str).join(", ")
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown style {s:?}; valid styles: {}", Style::valid_names())))
    }
}

/// Generator settings. Distances are in scene units, tempo in beats per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_dancers: usize,
    pub length: usize,
    pub d_in: usize,
    pub tempo: f64,
    pub radius: f64,
    pub spacing: f64,
    pub clearance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::short()
    }
}

impl SynthConfig {
    /// Three dancers, 120 frames.
    pub fn short() -> Self {
        Self {
            n_dancers: 3,
            length: 120,
            d_in: 8,
            tempo: 1.0 / 30.0,
            radius: 2.0,
            spacing: 2.0,
            clearance: 0.5,
        }
    }

    /// Three dancers, 400 frames.
    pub fn long() -> Self {
        Self {
            length: 400,
            ..Self::short()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "short" => Ok(Self::short()),
            "long" => Ok(Self::long()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; valid presets: short, long"))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_dancers == 0 || self.length < 2 {
            return Err(Error::Config(format!(
                "need at least 1 dancer and 2 frames, got {} and {}",
                self.n_dancers, self.length
            )));
        }
        if self.d_in < 2 {
            return Err(Error::Config("d_in must include the two root channels".into()));
        }
        if !(self.tempo > 0.0 && self.tempo <= 0.25) {
            return Err(Error::Config(format!("tempo {} outside (0, 0.25]", self.tempo)));
        }
        if !(self.radius > 0.0 && self.spacing > 0.0 && self.clearance >= 0.0) {
            return Err(Error::Config("radius and spacing must be positive".into()));
        }
        Ok(())
    }
}

/// One group performance.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    /// `N x L x d_in`, scene units.
    pub motion: Tensor,
    /// `L x COND_DIM`.
    pub music: Tensor,
    /// `N x L`, entries in {0, 1}.
    pub contact_mask: Tensor,
    pub style: Option<Style>,
    pub seed: u64,
    pub tempo: f64,
}

impl MotionSample {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self.motion.shape() {
            [n, l, d] => (*n, *l, *d),
            _ => unreachable!("motion is rank 3"),
        }
    }

    /// Root `(x, y)` of `dancer` at `frame`.
    pub fn root(&self, dancer: usize, frame: usize, position_channels: [usize; 2]) -> (f64, f64) {
        root_of(&self.motion, dancer, frame, position_channels)
    }
}

pub fn root_of(motion: &Tensor, dancer: usize, frame: usize, pc: [usize; 2]) -> (f64, f64) {
    let (l, d) = (motion.shape()[1], motion.shape()[2]);
    let base = (dancer * l + frame) * d;
    (motion.data()[base + pc[0]], motion.data()[base + pc[1]])
}

/// Smallest root distance between any two dancers over all frames;
/// infinite for a single dancer.
pub fn min_pairwise_distance(motion: &Tensor, pc: [usize; 2]) -> f64 {
    let (n, l) = (motion.shape()[0], motion.shape()[1]);
    let mut best = f64::INFINITY;
    for f in 0..l {
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (root_of(motion, i, f, pc), root_of(motion, j, f, pc));
                best = best.min(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            }
        }
    }
    best
}

/// Per-frame beat/style/tempo features.
pub fn conditioning(length: usize, style: Style, tempo: f64) -> Tensor {
    let mut out = Vec::with_capacity(length * COND_DIM);
    for f in 0..length {
        let phase = 2.0 * PI * tempo * f as f64;
        out.push(phase.sin());
        out.push(phase.cos());
        for s in 0..4 {
            out.push(if s == style.index() { 1.0 } else { 0.0 });
        }
        out.push(tempo);
    }
    Tensor::new(&[length, COND_DIM], out).expect("sized above")
}

/// Generates one collision-free sample. Fails when the configured geometry
/// cannot respect the clearance or the value bounds.
pub fn gen_synthetic(cfg: &SynthConfig, style: Style, seed: u64) -> Result<MotionSample> {
    cfg.validate()?;
    let (n, l, d) = (cfg.n_dancers, cfg.length, cfg.d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One loop of every formation takes four beats.
    let omega = 2.0 * PI * cfg.tempo / 4.0;
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let offset = |i: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * cfg.spacing;

    let guaranteed = match style {
        Style::Circle if n > 1 => 2.0 * cfg.radius * (PI / n as f64).sin(),
        Style::Line => cfg.spacing,
        Style::Figure8 => cfg.spacing - 2.0 * 0.4,
        Style::Crossover => 0.5 * cfg.spacing,
        Style::Circle => f64::INFINITY,
    };
    if n > 1 && guaranteed < cfg.clearance {
        return Err(Error::Config(format!(
            "{style} formation for {n} dancers keeps only {guaranteed:.3} units apart, clearance is {}",
            cfg.clearance
        )));
    }

    let sway = (rng.gen_range(0.2..0.5), rng.gen_range(0.1..0.3));
    let eight_phase: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let root = |i: usize, f: usize| -> (f64, f64) {
        let phi = omega * f as f64 + phase0;
        match style {
            Style::Circle => {
                let th = 2.0 * PI * i as f64 / n as f64 + phi;
                (cfg.radius * th.cos(), cfg.radius * th.sin())
            }
            Style::Line => (offset(i) + sway.0 * phi.sin(), sway.1 * (2.0 * phi).sin()),
            Style::Figure8 => {
                let p = phi + eight_phase[i];
                (offset(i) + 0.4 * p.sin(), 0.4 * p.sin() * p.cos())
            }
            Style::Crossover => {
                // The line rotates along an ellipse, so dancers swap sides
                // while pair distances never drop below half the spacing.
                let x = offset(i);
                (x * phi.cos() + sway.0 * (0.5 * phi).sin(), 0.5 * x * phi.sin())
            }
        }
    };

    let limbs = d - 2;
    let harmonics = [0.5, 1.0, 2.0];
    let mut limb_params = Vec::with_capacity(n * limbs);
    for _ in 0..n * limbs {
        limb_params.push((rng.gen_range(0.3..1.0), rng.gen_range(0.0..2.0 * PI)));
    }

    let mut data = Vec::with_capacity(n * l * d);
    for i in 0..n {
        for f in 0..l {
            let (x, y) = root(i, f);
            data.push(x);
            data.push(y);
            for k in 0..limbs {
                let (amp, ph) = limb_params[i * limbs + k];
                let h = harmonics[k % harmonics.len()];
                data.push(amp * (2.0 * PI * cfg.tempo * h * f as f64 + ph).sin());
            }
        }
    }
    let motion = Tensor::new(&[n, l, d], data)?;
    check_bounds(&motion)?;
    Ok(MotionSample {
        motion,
        music: conditioning(l, style, cfg.tempo),
        contact_mask: Tensor::zeros(&[n, l]),
        style: Some(style),
        seed,
        tempo: cfg.tempo,
    })
}

fn check_bounds(motion: &Tensor) -> Result<()> {
    let (n, l, d) = (motion.shape()[0], motion.shape()[1], motion.shape()[2]);
    let v = motion.data();
    for i in 0..n {
        for f in 0..l {
            for c in 0..d {
                let x = v[(i * l + f) * d + c];
                if x.abs() > VALUE_BOUND {
                    return Err(Error::Config(format!(
                        "dancer {i} frame {f} channel {c} reaches {x:.3}, beyond the scene bound"
                    )));
                }
                if f > 0 && (x - v[(i * l + f - 1) * d + c]).abs() > STEP_BOUND {
                    return Err(Error::Config(format!(
                        "dancer {i} frame {f} channel {c} jumps by more than {STEP_BOUND}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Per-channel z-normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Pooled over all dancers, frames and samples. Near-constant channels
    /// get unit scale.
    pub fn from_motions(motions: &[&Tensor]) -> Result<Self> {
        let d = match motions.first() {
            Some(m) => *m.shape().last().expect("rank 3"),
            None => return Err(Error::Config("no motion to compute statistics from".into())),
        };
        if motions.iter().any(|m| m.shape().last() != Some(&d)) {
            return Err(Error::shape("normalization", "channel counts differ"));
        }
        let rows: usize = motions.iter().map(|m| m.len() / d).sum();
        let mut mean = vec![0.0; d];
        for m in motions {
            for row in m.data().chunks(d) {
                for (a, v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().for_each(|a| *a /= rows as f64);
        let mut var = vec![0.0; d];
        for m in motions {
            for row in m.data().chunks(d) {
                for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / rows as f64).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, motion: &Tensor) -> Tensor {
        let d = self.mean.len();
        Tensor::from_fn(motion.shape(), |i| (motion.data()[i] - self.mean[i % d]) / self.std[i % d])
    }

    pub fn denormalize(&self, motion: &Tensor) -> Tensor {
        let d = self.mean.len();
        Tensor::from_fn(motion.shape(), |i| motion.data()[i] * self.std[i % d] + self.mean[i % d])
    }
}

fn header_text(sample: &MotionSample, stats: &NormStats, pc: [usize; 2]) -> String {
    let (n, l, d) = sample.dims();
    let names: Vec<String> = (0..d)
        .map(|c| {
            if c == pc[0] {
                "root_x".to_string()
            } else if c == pc[1] {
                "root_y".to_string()
            } else {
                format!("feature_{c}")
            }
        })
        .collect();
    format!(
        "n_dancers={n}\nlength={l}\nd_in={d}\ncond_dim={}\nchannels={}\nposition_channels={}\n\
         mean={}\nstd={}\nstyle={}\nseed={}\ntempo={}\n",
        sample.music.cols(),
        names.join(","),
        kv::join(&pc),
        kv::join(&stats.mean),
        kv::join(&stats.std),
        sample.style.map_or("none", Style::as_str),
        sample.seed,
        sample.tempo,
    )
}

/// A motion file: the sample plus the statistics and root channels that
/// travel with it.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFile {
    pub sample: MotionSample,
    pub stats: NormStats,
    pub position_channels: [usize; 2],
}

impl MotionFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.sample;
        let mut buf = format!("{MOTION_MAGIC}\n{}\n", header_text(s, &self.stats, self.position_channels))
            .into_bytes();
        binio::put_f64s(&mut buf, s.motion.data());
        binio::put_u64(&mut buf, s.music.len() as u64);
        binio::put_f64s(&mut buf, s.music.data());
        binio::put_u64(&mut buf, s.contact_mask.len() as u64);
        binio::put_f64s(&mut buf, s.contact_mask.data());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, payload) = binio::split_header(bytes, MOTION_MAGIC)?;
        let parse = || -> Result<_> {
            let mut kv = KvMap::parse(text)?;
            let n: usize = kv.take_required("n_dancers")?;
            let l: usize = kv.take_required("length")?;
            let d: usize = kv.take_required("d_in")?;
            let c: usize = kv.take_required("cond_dim")?;
            let channels: Vec<String> = kv::split(&kv.take_raw("channels").unwrap_or_default())?;
            let pc: Vec<usize> = kv::split(&kv.take_raw("position_channels").unwrap_or_default())?;
            let mean: Vec<f64> = kv::split(&kv.take_raw("mean").unwrap_or_default())?;
            let std: Vec<f64> = kv::split(&kv.take_raw("std").unwrap_or_default())?;
            let style = match kv.take_raw("style").as_deref() {
                None | Some("none") => None,
                Some(s) => Some(s.parse::<Style>()?),
            };
            let seed: u64 = kv.take_or("seed", 0)?;
            let tempo: f64 = kv.take_or("tempo", 0.0)?;
            kv.finish()?;
            if channels.len() != d || mean.len() != d || std.len() != d {
                return Err(Error::Config(format!(
                    "header lists {} channels, {} means, {} stds for d_in={d}",
                    channels.len(),
                    mean.len(),
                    std.len()
                )));
            }
            let pc: [usize; 2] = pc
                .try_into()
                .map_err(|_| Error::Config("position_channels needs two entries".into()))?;
            if pc[0] >= d || pc[1] >= d {
                return Err(Error::Config(format!("position channels {pc:?} outside d_in={d}")));
            }
            if n == 0 || l == 0 || d == 0 {
                return Err(Error::Config("empty motion dimensions".into()));
            }
            Ok((n, l, d, c, pc, NormStats { mean, std }, style, seed, tempo))
        };
        let (n, l, d, c, pc, stats, style, seed, tempo) = parse().map_err(binio::header_error)?;
        let mut r = Reader::new(bytes, payload);
        let motion = r.f64s(n * l * d, "motion payload")?;
        r.len_field(l * c, "conditioning payload")?;
        let music = r.f64s(l * c, "conditioning payload")?;
        r.len_field(n * l, "contact mask payload")?;
        let mask = r.f64s(n * l, "contact mask payload")?;
        r.finish()?;
        Ok(Self {
            sample: MotionSample {
                motion: Tensor::new(&[n, l, d], motion)?,
                music: Tensor::new(&[l, c], music)?,
                contact_mask: Tensor::new(&[n, l], mask)?,
                style,
                seed,
                tempo,
            },
            stats,
            position_channels: pc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    /// Long-form `frame,dancer,channel,value` rows.
    pub fn to_csv(&self) -> String {
        let (n, l, d) = self.sample.dims();
        let mut out = String::from("frame,dancer,channel,value\n");
        for f in 0..l {
            for i in 0..n {
                for c in 0..d {
                    let v = self.sample.motion.data()[(i * l + f) * d + c];
                    out.push_str(&format!("{f},{i},{c},{v}\n"));
                }
            }
        }
        out
    }
}

/// The standard training set: two seeds of each style at the short preset.
pub fn default_dataset(seed: u64) -> Result<Vec<MotionSample>> {
    let cfg = SynthConfig::short();
    let mut out = Vec::new();
    for rep in 0..2u64 {
        for style in Style::ALL {
            out.push(gen_synthetic(&cfg, style, seed.wrapping_mul(1000).wrapping_add(rep * 10 + style.index() as u64))?);
        }
    }
    Ok(out)
}
