//! Central-difference gradient checks for every learnable block.
//!
//! Each block output `y` is scalarised as `sum(probe * y)` with a fixed random
//! probe, so the analytic side is one backward pass seeded with the probe.
//! [`coverage`] ties the registry to the denoiser: every parameter tensor must
//! map to a registered block.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    diff_attention_backward, diff_attention_cached, film_backward, film_cached,
    full_attention_backward, full_attention_cached, ldt_attention_backward, ldt_attention_cached,
    DiffAttnWeights, FullAttnWeights, LdtWeights, LDT_GUARD,
};
use crate::diffusion::{loss_with_grad, make_schedule, q_sample, LossWeights};
use crate::error::{Error, Result};
use crate::graph::{gcn_layer_backward, gcn_layer_cached, DistanceGraph, GraphConfig};
use crate::layers::{group_fusion_backward, group_fusion_cached, layer_norm, layer_norm_backward};
use crate::model::{AttnKind, Denoiser, DenoiserConfig};
use crate::tensor::{linear_backward, linear_forward, Tensor};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;
/// Departure from linearity of the four half-step slopes around a
/// coordinate, relative to their size, that marks it as straddling a ReLU
/// kink. A smooth function departs by `O(h^2)`.
pub const KINK_THRESHOLD: f64 = 1e-4;
/// Slope magnitude below which the kink test is absolute.
pub const KINK_FLOOR: f64 = 1e-2;
/// Largest share of coordinates a block may skip as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.05;
/// Fraction of denoiser parameter scalars checked end to end.
pub const END_TO_END_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Linear,
    GcnLayer,
    FullAttention,
    DiffAttention,
    Ldt,
    Film,
    GroupFusion,
    LayerNorm,
    OutputHead,
    EndToEnd,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::Linear,
        Block::GcnLayer,
        Block::FullAttention,
        Block::DiffAttention,
        Block::Ldt,
        Block::Film,
        Block::GroupFusion,
        Block::LayerNorm,
        Block::OutputHead,
        Block::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Linear => "linear",
            Block::GcnLayer => "gcn_layer",
            Block::FullAttention => "full_attention",
            Block::DiffAttention => "diff_attention",
            Block::Ldt => "ldt_attention",
            Block::Film => "film",
            Block::GroupFusion => "group_fusion",
            Block::LayerNorm => "layer_norm",
            Block::OutputHead => "output_head",
            Block::EndToEnd => "end_to_end",
        }
    }

    fn case(self, seed: u64) -> Result<Case> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (self as u64).wrapping_mul(0x9E37_79B9));
        match self {
            Block::Linear => linear_case(&mut rng),
            Block::GcnLayer => gcn_case(&mut rng),
            Block::FullAttention => full_attention_case(&mut rng),
            Block::DiffAttention => diff_attention_case(&mut rng),
            Block::Ldt => ldt_case(&mut rng),
            Block::Film => film_case(&mut rng),
            Block::GroupFusion => fusion_case(&mut rng),
            Block::LayerNorm => layer_norm_case(&mut rng),
            Block::OutputHead => output_head_case(&mut rng),
            Block::EndToEnd => end_to_end_case(&mut rng),
        }
    }
}

/// The registered block responsible for a denoiser parameter.
pub fn block_for_param(name: &str) -> Option<Block> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["input" | "time" | "cond", "w" | "b"] => Some(Block::Linear),
        ["fusion", "embed"] | ["fusion", "mix", "w" | "b"] => Some(Block::GroupFusion),
        ["gcn", _, "w"] => Some(Block::GcnLayer),
        ["output", "w" | "b"] => Some(Block::OutputHead),
        ["dec", _, "diff", "w_q" | "w_k" | "w_v" | "lambda"] => Some(Block::DiffAttention),
        ["dec", _, "diff", "out", "w" | "b"] => Some(Block::Linear),
        ["dec", _, "ldt", "w_q" | "w_k" | "w_v"] => Some(Block::Ldt),
        ["dec", _, "film", "w_gamma" | "w_beta"] => Some(Block::Film),
        ["dec", _, "ff1" | "ff2", "w" | "b"] => Some(Block::Linear),
        _ => None,
    }
}

pub fn block_for_attention(kind: AttnKind) -> Block {
    match kind {
        AttnKind::Diff => Block::DiffAttention,
        AttnKind::Linear => Block::Ldt,
    }
}

/// Fails when a denoiser built from `cfg` has a parameter no block checks.
pub fn coverage(cfg: &DenoiserConfig) -> Result<()> {
    let model = Denoiser::new(cfg.clone(), 0)?;
    let orphans: Vec<&str> = model
        .params()
        .iter()
        .filter(|p| block_for_param(&p.name).is_none())
        .map(|p| p.name.as_str())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Coverage(format!(
            "parameters without a gradient check: {}",
            orphans.join(", ")
        )));
    }
    Ok(())
}

type Eval = Box<dyn Fn(&[Tensor]) -> Result<f64>>;
type Grad = Box<dyn Fn(&[Tensor]) -> Result<Vec<Tensor>>>;

/// A scalar function of named tensors with its analytic gradient.
pub struct Case {
    names: Vec<String>,
    inputs: Vec<Tensor>,
    /// `(input, element)` coordinates to probe; `None` means all of them.
    coords: Option<Vec<(usize, usize)>>,
    eval: Eval,
    grad: Grad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates within `h` of a ReLU kink, excluded from the error.
    pub kinks: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error, as `input[index]`.
    pub worst: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    /// Error of the checker on a quadratic with known gradient.
    pub calibration_err: f64,
    /// Whether a deliberately corrupted gradient was flagged.
    pub self_test_caught: bool,
    pub coverage: std::result::Result<(), String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
            && self.calibration_err <= DEFAULT_TOLERANCE
            && self.self_test_caught
            && self.coverage.is_ok()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn check_case(name: &str, case: &Case, h: f64, tol: f64, corrupt: bool) -> Result<BlockReport> {
    let mut grads = (case.grad)(&case.inputs)?;
    if corrupt {
        let g = grads[0].data_mut();
        g[0] = g[0] * 1.01 + 1e-2;
    }
    for (g, (x, n)) in grads.iter().zip(case.inputs.iter().zip(&case.names)) {
        if g.shape() != x.shape() {
            return Err(Error::shape("gradcheck", format!("gradient of {n} is {:?}", g.shape())));
        }
    }
    let coords: Vec<(usize, usize)> = match &case.coords {
        Some(c) => c.clone(),
        None => case
            .inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
    };
    let mut inputs = case.inputs.clone();
    let base = (case.eval)(&inputs)?;
    let (mut worst, mut worst_at, mut kinks) = (0.0f64, String::new(), 0);
    for &(i, j) in &coords {
        let x = inputs[i].data()[j];
        let mut at = |offset: f64| -> Result<f64> {
            inputs[i].data_mut()[j] = x + offset;
            let f = (case.eval)(&inputs);
            inputs[i].data_mut()[j] = x;
            f
        };
        let (minus, minus_half, plus_half, plus) = (at(-h)?, at(-h / 2.0)?, at(h / 2.0)?, at(h)?);
        let hh = h / 2.0;
        let s = [
            (minus_half - minus) / hh,
            (base - minus_half) / hh,
            (plus_half - base) / hh,
            (plus - plus_half) / hh,
        ];
        let bend = (s[0] - 2.0 * s[1] + s[2]).abs().max((s[1] - 2.0 * s[2] + s[3]).abs());
        let size = s.iter().fold(KINK_FLOOR, |m, v| m.max(v.abs()));
        if bend > KINK_THRESHOLD * size {
            kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let e = rel_err(grads[i].data()[j], numeric);
        if !(e <= worst) {
            worst = e;
            worst_at = format!("{}[{j}]", case.names[i]);
        }
    }
    let kinks_ok = kinks as f64 <= MAX_KINK_FRACTION * coords.len() as f64;
    Ok(BlockReport {
        name: name.to_string(),
        checked: coords.len() - kinks,
        kinks,
        max_rel_err: worst,
        worst: worst_at,
        passed: worst <= tol && worst.is_finite() && kinks_ok,
    })
}

/// Runs one registered block.
pub fn check_block(block: Block, seed: u64, h: f64, tol: f64) -> Result<BlockReport> {
    check_case(block.name(), &block.case(seed)?, h, tol, false)
}

/// Runs one block with its first analytic gradient entry deliberately
/// corrupted, as a fixture for harness tests.
pub fn check_block_corrupted(block: Block, seed: u64, h: f64, tol: f64) -> Result<BlockReport> {
    check_case(block.name(), &block.case(seed)?, h, tol, true)
}

impl std::str::FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Block::ALL.iter().map(|b| b.name()).collect();
            Error::Config(format!("unknown block {s:?}; valid: {}", names.join(", ")))
        })
    }
}

/// Checker error on `f(x) = x^T A x / 2 + b^T x` with `A` symmetric positive
/// definite; the central difference is exact there up to rounding.
pub fn calibrate(seed: u64, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let m = Tensor::randn(&[n, n], 1.0, &mut rng);
    let a = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        (0..n).map(|r| m.data()[r * n + i] * m.data()[r * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }
    });
    let b = Tensor::randn(&[n], 1.0, &mut rng);
    let x = Tensor::randn(&[n], 1.0, &mut rng);
    let (a2, b2) = (a.clone(), b.clone());
    let case = Case {
        names: vec!["x".into()],
        inputs: vec![x],
        coords: None,
        eval: Box::new(move |xs| {
            let x = xs[0].data();
            let mut f = 0.0;
            for i in 0..n {
                for j in 0..n {
                    f += 0.5 * x[i] * a.data()[i * n + j] * x[j];
                }
                f += b.data()[i] * x[i];
            }
            Ok(f)
        }),
        grad: Box::new(move |xs| {
            let x = xs[0].data();
            let g = (0..n)
                .map(|i| b2.data()[i] + (0..n).map(|j| a2.data()[i * n + j] * x[j]).sum::<f64>())
                .collect();
            Ok(vec![Tensor::new(&[n], g)?])
        }),
    };
    Ok(check_case("quadratic", &case, h, f64::INFINITY, false)?.max_rel_err)
}

/// True when the checker flags a linear-layer gradient corrupted by about 1%.
pub fn self_test(seed: u64, h: f64, tol: f64) -> Result<bool> {
    let case = Block::Linear.case(seed)?;
    Ok(!check_case("corrupted", &case, h, tol, true)?.passed)
}

/// Runs the calibration, the self-test, the coverage gate and every block.
pub fn run_all(seed: u64, h: f64, tol: f64, mut on_block: impl FnMut(&BlockReport)) -> Result<GradCheckReport> {
    let calibration_err = calibrate(seed, h)?;
    let self_test_caught = self_test(seed, h, tol)?;
    let coverage = coverage(&DenoiserConfig::default())
        .and_then(|_| coverage(&DenoiserConfig::tiny()))
        .map_err(|e| e.to_string());
    let mut blocks = Vec::with_capacity(Block::ALL.len());
    for b in Block::ALL {
        let r = check_block(b, seed, h, tol)?;
        on_block(&r);
        blocks.push(r);
    }
    Ok(GradCheckReport {
        blocks,
        calibration_err,
        self_test_caught,
        coverage,
    })
}

fn probe_dot(probe: &Tensor, y: &Tensor) -> Result<f64> {
    probe.dot(y)
}

fn named(names: &[&str], inputs: Vec<Tensor>) -> (Vec<String>, Vec<Tensor>) {
    (names.iter().map(|s| s.to_string()).collect(), inputs)
}

fn linear_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (names, inputs) = named(
        &["w", "b", "x"],
        vec![
            Tensor::randn(&[3, 5], 0.5, rng),
            Tensor::randn(&[5], 0.5, rng),
            Tensor::randn(&[4, 3], 1.0, rng),
        ],
    );
    let probe = Tensor::randn(&[4, 5], 1.0, rng);
    let p2 = probe.clone();
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &linear_forward(&v[2], &v[0], &v[1])?)),
        grad: Box::new(move |v| {
            let g = linear_backward(&v[2], &v[0], &p2)?;
            Ok(vec![g.dw, g.db, g.dx])
        }),
    })
}

fn gcn_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = 6;
    let pos = Tensor::randn(&[n, 2], 2.0, rng);
    let graph = DistanceGraph::build(&pos, GraphConfig { epsilon: 0.1, top_k: 2 })?.normalized;
    let (names, inputs) = named(
        &["w", "h"],
        vec![Tensor::randn(&[4, 5], 0.5, rng), Tensor::randn(&[n, 4], 1.0, rng)],
    );
    let probe = Tensor::randn(&[n, 5], 1.0, rng);
    let (g2, p2) = (graph.clone(), probe.clone());
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &gcn_layer_cached(&v[1], &graph, &v[0])?.0)),
        grad: Box::new(move |v| {
            let (_, c) = gcn_layer_cached(&v[1], &g2, &v[0])?;
            let g = gcn_layer_backward(&c, &g2, &v[0], &p2)?;
            Ok(vec![g.dw, g.dh])
        }),
    })
}

fn full_attention_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (l, d) = (6, 4);
    let (names, inputs) = named(
        &["w_q", "w_k", "w_v", "x"],
        vec![
            Tensor::randn(&[d, d], 0.5, rng),
            Tensor::randn(&[d, d], 0.5, rng),
            Tensor::randn(&[d, d], 0.5, rng),
            Tensor::randn(&[l, d], 1.0, rng),
        ],
    );
    let probe = Tensor::randn(&[l, d], 1.0, rng);
    let p2 = probe.clone();
    let weights = |v: &[Tensor]| FullAttnWeights {
        w_q: v[0].clone(),
        w_k: v[1].clone(),
        w_v: v[2].clone(),
    };
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &full_attention_cached(&v[3], &weights(v))?.0)),
        grad: Box::new(move |v| {
            let w = weights(v);
            let (_, c) = full_attention_cached(&v[3], &w)?;
            let g = full_attention_backward(&c, &w, &p2)?;
            Ok(vec![g.dw_q, g.dw_k, g.dw_v, g.dx])
        }),
    })
}

fn diff_attention_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (l, d, heads) = (6, 4, 2);
    let (names, inputs) = named(
        &["w_q", "w_k", "w_v", "lambda", "x"],
        vec![
            Tensor::randn(&[d, 2 * d], 0.5, rng),
            Tensor::randn(&[d, 2 * d], 0.5, rng),
            Tensor::randn(&[d, 2 * d], 0.5, rng),
            Tensor::new(&[heads], vec![0.3, 0.7])?,
            Tensor::randn(&[l, d], 1.0, rng),
        ],
    );
    let probe = Tensor::randn(&[l, 2 * d], 1.0, rng);
    let p2 = probe.clone();
    let weights = move |v: &[Tensor]| DiffAttnWeights {
        w_q: v[0].clone(),
        w_k: v[1].clone(),
        w_v: v[2].clone(),
        lambda: v[3].clone(),
        heads,
    };
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &diff_attention_cached(&v[4], &weights(v))?.0)),
        grad: Box::new(move |v| {
            let w = weights(v);
            let (_, c) = diff_attention_cached(&v[4], &w)?;
            let g = diff_attention_backward(&c, &w, &p2)?;
            Ok(vec![g.dw_q, g.dw_k, g.dw_v, g.dlambda, g.dx])
        }),
    })
}

fn ldt_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    // Seven frames in windows of three leave a partial final window.
    let (l, d) = (7, 4);
    let (names, inputs) = named(
        &["w_q", "w_k", "w_v", "x"],
        vec![
            Tensor::randn(&[d, d], 0.5, rng),
            Tensor::randn(&[d, d], 0.5, rng),
            Tensor::randn(&[d, d], 0.5, rng),
            Tensor::randn(&[l, d], 1.0, rng),
        ],
    );
    let probe = Tensor::randn(&[l, d], 1.0, rng);
    let p2 = probe.clone();
    let weights = |v: &[Tensor]| LdtWeights {
        w_q: v[0].clone(),
        w_k: v[1].clone(),
        w_v: v[2].clone(),
        window: 3,
        guard: LDT_GUARD,
    };
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &ldt_attention_cached(&v[3], &weights(v))?.0)),
        grad: Box::new(move |v| {
            let w = weights(v);
            let (_, c) = ldt_attention_cached(&v[3], &w)?;
            let g = ldt_attention_backward(&c, &w, &p2)?;
            Ok(vec![g.dw_q, g.dw_k, g.dw_v, g.dx])
        }),
    })
}

fn film_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (l, d, c) = (5, 4, 3);
    let (names, inputs) = named(
        &["w_gamma", "w_beta", "x", "cond"],
        vec![
            Tensor::randn(&[c, d], 0.5, rng),
            Tensor::randn(&[c, d], 0.5, rng),
            Tensor::randn(&[l, d], 1.0, rng),
            Tensor::randn(&[l, c], 1.0, rng),
        ],
    );
    let probe = Tensor::randn(&[l, d], 1.0, rng);
    let p2 = probe.clone();
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &film_cached(&v[2], &v[3], &v[0], &v[1])?.0)),
        grad: Box::new(move |v| {
            let (_, c) = film_cached(&v[2], &v[3], &v[0], &v[1])?;
            let g = film_backward(&c, &v[0], &v[1], &p2)?;
            Ok(vec![g.dw_gamma, g.dw_beta, g.dx, g.dcond])
        }),
    })
}

fn fusion_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (n, l, d) = (3, 4, 4);
    let (names, inputs) = named(
        &["embed", "mix_w", "mix_b", "x"],
        vec![
            Tensor::randn(&[5, d], 0.5, rng),
            Tensor::randn(&[d, d], 0.5, rng),
            Tensor::randn(&[d], 0.5, rng),
            Tensor::randn(&[n, l, d], 1.0, rng),
        ],
    );
    let probe = Tensor::randn(&[n, l, d], 1.0, rng);
    let p2 = probe.clone();
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &group_fusion_cached(&v[3], &v[0], &v[1], &v[2])?.0)),
        grad: Box::new(move |v| {
            let (_, c) = group_fusion_cached(&v[3], &v[0], &v[1], &v[2])?;
            let g = group_fusion_backward(&c, &v[0], &v[1], &p2)?;
            Ok(vec![g.dembed, g.dmix_w, g.dmix_b, g.dx])
        }),
    })
}

fn layer_norm_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (names, inputs) = named(&["x"], vec![Tensor::randn(&[4, 6], 1.5, rng)]);
    let probe = Tensor::randn(&[4, 6], 1.0, rng);
    let p2 = probe.clone();
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &layer_norm(&v[0]).0)),
        grad: Box::new(move |v| {
            let (_, c) = layer_norm(&v[0]);
            Ok(vec![layer_norm_backward(&c, &p2)])
        }),
    })
}

/// Final normalisation followed by the output projection.
fn output_head_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (l, d, dout) = (5, 6, 3);
    let (names, inputs) = named(
        &["w", "b", "x"],
        vec![
            Tensor::randn(&[d, dout], 0.5, rng),
            Tensor::randn(&[dout], 0.5, rng),
            Tensor::randn(&[l, d], 1.0, rng),
        ],
    );
    let probe = Tensor::randn(&[l, dout], 1.0, rng);
    let p2 = probe.clone();
    Ok(Case {
        names,
        inputs,
        coords: None,
        eval: Box::new(move |v| probe_dot(&probe, &linear_forward(&layer_norm(&v[2]).0, &v[0], &v[1])?)),
        grad: Box::new(move |v| {
            let (y, c) = layer_norm(&v[2]);
            let g = linear_backward(&y, &v[0], &p2)?;
            Ok(vec![g.dw, g.db, layer_norm_backward(&c, &g.dx)])
        }),
    })
}

/// Training loss of a small denoiser (`N = 2`, `L = 8`, `d_model = 8`) with
/// respect to a seeded sample of its parameters, at least one per tensor.
fn end_to_end_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = DenoiserConfig::tiny();
    let (n, l) = (2, 8);
    let model = Denoiser::new(cfg.clone(), 11)?;
    let schedule = make_schedule(10, 1e-2, 0.2)?;
    let t = 4;
    let mut x0 = Tensor::randn(&[n, l, cfg.d_in], 1.0, rng);
    // Keep the two dancers apart so the graph stays away from ties.
    for f in 0..l {
        x0.data_mut()[(l + f) * cfg.d_in] += 3.0;
    }
    let noise = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = q_sample(&x0, t, &noise, &schedule)?;
    let music = Tensor::randn(&[l, cfg.music_dim], 1.0, rng);
    let weights = LossWeights::default();

    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let k = ((t.len() as f64 * END_TO_END_FRACTION).ceil() as usize).clamp(1, t.len());
        let mut picked: Vec<usize> = sample(rng, t.len(), k).into_vec();
        picked.sort_unstable();
        coords.extend(picked.into_iter().map(|j| (i, j)));
    }

    let build = {
        let (cfg, names) = (cfg.clone(), names.clone());
        move |v: &[Tensor]| Denoiser::from_named(cfg.clone(), names.iter().cloned().zip(v.iter().cloned()).collect())
    };
    let build2 = build.clone();
    let (x0b, xtb, mb, wb) = (x0.clone(), x_t.clone(), music.clone(), weights.clone());
    Ok(Case {
        names,
        inputs,
        coords: Some(coords),
        eval: Box::new(move |v| {
            let m = build(v)?;
            let out = m.forward(&x_t, &music, t)?;
            Ok(loss_with_grad(&x0, &out, None, &weights, false)?.0.total)
        }),
        grad: Box::new(move |v| {
            let mut m = build2(v)?;
            let (out, cache) = m.forward_train(&xtb, &mb, t)?;
            let (_, g) = loss_with_grad(&x0b, &out, None, &wb, true)?;
            m.params_mut().zero_grads();
            m.backward(&cache, &g.expect("gradient requested"))?;
            Ok(m.params().iter().map(|p| p.grad.clone()).collect())
        }),
    })
}
