//! Wall-time scaling benchmarks and the analytic multiply-accumulate model
//! of a denoiser forward pass.
//!
//! Timings are single-threaded medians over `reps` repetitions, interleaved
//! across grid sizes, each preceded by `warmup` untimed runs. Slopes are
//! least-squares fits of log time against log size.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    diff_attention, full_attention, ldt_attention, DiffAttnWeights, LdtWeights, LDT_GUARD,
};
use crate::error::{Error, Result};
use crate::graph::{gcn_layer, DistanceGraph, GraphConfig};
use crate::model::DenoiserConfig;
use crate::tensor::Tensor;

/// Smallest median that is trusted; faster points are dropped.
pub const MIN_RESOLVABLE_SECONDS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Full,
    Ldt,
    Diff,
    Gcn,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Full, Kernel::Ldt, Kernel::Diff, Kernel::Gcn];

    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Full => "full",
            Kernel::Ldt => "ldt",
            Kernel::Diff => "diff",
            Kernel::Gcn => "gcn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel {s:?}; valid: full, ldt, diff, gcn")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    /// Must be 1: the harness measures single-threaded kernels only.
    pub threads: usize,
    pub seed: u64,
    pub heads: usize,
    pub window: usize,
    pub top_k: usize,
    pub epsilon: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reps: 5,
            warmup: 1,
            threads: 1,
            seed: 0,
            heads: 4,
            window: 64,
            top_k: 8,
            epsilon: 0.1,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        if self.threads != 1 {
            return Err(Error::Bench(format!(
                "refusing to measure with {} threads; timings must be single-threaded",
                self.threads
            )));
        }
        if self.reps < 5 {
            return Err(Error::Bench(format!("need at least 5 repetitions, got {}", self.reps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub size: usize,
    pub median_seconds: f64,
    /// Multiply-accumulates of one run, from the analytic model.
    pub flops_estimate: u64,
    /// Multiply-accumulates of one run, counted by the kernels.
    pub flops_counted: u64,
    /// Sum of the kernel output; identical across runs with one seed.
    pub checksum: f64,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub kernel: Kernel,
    pub points: Vec<BenchPoint>,
    /// Sizes whose median fell below the timer resolution.
    pub dropped: Vec<usize>,
    pub slope: f64,
    pub r2: f64,
}

/// Least-squares slope and R² of `ln y` against `ln x`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in lx.iter().zip(&ly) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn check_grid(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 4 {
        return Err(Error::Bench(format!("need at least 4 grid points, got {}", sizes.len())));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) || sizes[0] == 0 {
        return Err(Error::Bench("grid sizes must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// Times `run` (which returns a checksum) and fits the slope.
fn measure(
    kernel: Kernel,
    sizes: &[usize],
    cfg: &BenchConfig,
    estimate: impl Fn(usize) -> u64,
    mut prepare: impl FnMut(usize) -> Result<Box<dyn FnMut() -> Result<f64>>>,
    warn: &mut dyn FnMut(String),
) -> Result<BenchResult> {
    // Repetitions are interleaved across sizes so that a burst of outside
    // load shifts every grid point a little rather than one point a lot.
    let mut runners = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut run = prepare(size)?;
        let (checksum, counted) = crate::counter::measure(&mut run);
        runners.push((run, checksum?, counted, Vec::with_capacity(cfg.reps)));
    }
    for _ in 0..cfg.reps {
        for (run, checksum, _, samples) in runners.iter_mut() {
            // Warm the caches that the previous size evicted.
            for _ in 0..cfg.warmup {
                run()?;
            }
            let start = Instant::now();
            let c = run()?;
            samples.push(start.elapsed().as_secs_f64());
            if c.to_bits() != checksum.to_bits() {
                return Err(Error::Bench(format!("{} kernel is not deterministic", kernel.as_str())));
            }
        }
    }
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for (&size, (_, checksum, counted, samples)) in sizes.iter().zip(runners) {
        let med = median(&samples);
        if med < MIN_RESOLVABLE_SECONDS {
            warn(format!(
                "{} size {size}: median {med:.2e}s is below timer resolution; point dropped",
                kernel.as_str()
            ));
            dropped.push(size);
            continue;
        }
        points.push(BenchPoint {
            size,
            median_seconds: med,
            flops_estimate: estimate(size),
            flops_counted: counted,
            checksum,
            samples,
        });
    }
    if points.len() < 3 {
        return Err(Error::Bench(format!(
            "{}: only {} grid points survived timing",
            kernel.as_str(),
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.size as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_seconds).collect();
    let (slope, r2) = loglog_fit(&xs, &ys);
    Ok(BenchResult {
        kernel,
        points,
        dropped,
        slope,
        r2,
    })
}

fn checksum(t: &Tensor) -> f64 {
    t.data().iter().sum()
}

/// Times one attention kernel across sequence lengths at width `d`.
pub fn bench_attention(
    kernel: Kernel,
    lengths: &[usize],
    d: usize,
    cfg: &BenchConfig,
    warn: &mut dyn FnMut(String),
) -> Result<BenchResult> {
    cfg.validate()?;
    check_grid(lengths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = 1.0 / (d as f64).sqrt();
    let heads = cfg.heads;
    let window = cfg.window;
    if d == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("d = {d} must be a positive multiple of heads = {heads}")));
    }
    match kernel {
        Kernel::Full => {
            let (wq, wk, wv) = (
                Tensor::randn(&[d, d], std, &mut rng),
                Tensor::randn(&[d, d], std, &mut rng),
                Tensor::randn(&[d, d], std, &mut rng),
            );
            measure(
                kernel,
                lengths,
                cfg,
                |l| (3 * l * d * d + 2 * l * l * d) as u64,
                |l| {
                    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
                    let (wq, wk, wv) = (wq.clone(), wk.clone(), wv.clone());
                    Ok(Box::new(move || full_attention(&x, &wq, &wk, &wv).map(|o| checksum(&o))))
                },
                warn,
            )
        }
        Kernel::Ldt => {
            let p = LdtWeights {
                w_q: Tensor::randn(&[d, d], std, &mut rng),
                w_k: Tensor::randn(&[d, d], std, &mut rng),
                w_v: Tensor::randn(&[d, d], std, &mut rng),
                window,
                guard: LDT_GUARD,
            };
            measure(
                kernel,
                lengths,
                cfg,
                |l| (3 * l * d * d + l * d * d + l * d * (d + 1)) as u64,
                |l| {
                    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
                    let p = p.clone();
                    Ok(Box::new(move || ldt_attention(&x, &p).map(|o| checksum(&o))))
                },
                warn,
            )
        }
        Kernel::Diff => {
            let p = DiffAttnWeights {
                w_q: Tensor::randn(&[d, 2 * d], std, &mut rng),
                w_k: Tensor::randn(&[d, 2 * d], std, &mut rng),
                w_v: Tensor::randn(&[d, 2 * d], std, &mut rng),
                lambda: Tensor::filled(&[heads], 0.5),
                heads,
            };
            measure(
                kernel,
                lengths,
                cfg,
                |l| (6 * l * d * d + 4 * l * l * d) as u64,
                |l| {
                    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
                    let p = p.clone();
                    Ok(Box::new(move || diff_attention(&x, &p).map(|o| checksum(&o))))
                },
                warn,
            )
        }
        Kernel::Gcn => Err(Error::Config("use bench_gcn for the graph kernel".into())),
    }
}

/// Times graph construction, pruning, normalisation and one GCN layer over
/// `length` frames, across dancer counts.
pub fn bench_gcn(
    dancer_counts: &[usize],
    length: usize,
    d: usize,
    cfg: &BenchConfig,
    warn: &mut dyn FnMut(String),
) -> Result<BenchResult> {
    cfg.validate()?;
    check_grid(dancer_counts)?;
    run_gcn_grid(dancer_counts, length, d, cfg, warn)
}

fn run_gcn_grid(
    dancer_counts: &[usize],
    length: usize,
    d: usize,
    cfg: &BenchConfig,
    warn: &mut dyn FnMut(String),
) -> Result<BenchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
    measure(
        Kernel::Gcn,
        dancer_counts,
        cfg,
        |n| gcn_layer_macs(n, length, d),
        |n| Ok(gcn_runner(n, length, &w, cfg, &mut rng)),
        warn,
    )
}

/// Graph build plus one GCN layer for every frame of a random scene.
fn gcn_runner(
    n: usize,
    length: usize,
    w: &Tensor,
    cfg: &BenchConfig,
    rng: &mut ChaCha8Rng,
) -> Box<dyn FnMut() -> Result<f64>> {
    let d = w.rows();
    let graph_cfg = GraphConfig {
        epsilon: cfg.epsilon,
        top_k: cfg.top_k,
    };
    let positions: Vec<Tensor> = (0..length).map(|_| Tensor::randn(&[n, 2], 2.0, rng)).collect();
    let feats: Vec<Tensor> = (0..length).map(|_| Tensor::randn(&[n, d], 1.0, rng)).collect();
    let w = w.clone();
    Box::new(move || {
        let mut total = 0.0;
        for (pos, h) in positions.iter().zip(&feats) {
            let g = DistanceGraph::build(pos, graph_cfg)?;
            total += checksum(&gcn_layer(h, &g.normalized, &w)?);
        }
        Ok(total)
    })
}

/// Runs the GCN pipeline for a single size without the grid requirements,
/// which admits degenerate graphs such as `N = 1`.
pub fn bench_gcn_point(n: usize, length: usize, d: usize, cfg: &BenchConfig) -> Result<BenchPoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
    let mut run = gcn_runner(n, length, &w, cfg, &mut rng);
    let (c, counted) = crate::counter::measure(&mut run);
    let checksum = c?;
    let mut samples = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(BenchPoint {
        size: n,
        median_seconds: median(&samples),
        flops_estimate: gcn_layer_macs(n, length, d),
        flops_counted: counted,
        checksum,
        samples,
    })
}

/// `L (N^2 d + N d^2)` multiply-accumulates of one GCN layer over `L` frames.
pub fn gcn_layer_macs(n: usize, length: usize, d: usize) -> u64 {
    (length * (n * n * d + n * d * d)) as u64
}

/// Analytic multiply-accumulate count of one denoiser forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopEstimate {
    /// Graph convolutions: `gcn_layers L (N^2 D + N D^2)`.
    pub spatial: u64,
    /// Per-dancer decoder: attention, FiLM and feed-forward blocks.
    pub temporal: u64,
    /// Input/output projections, group fusion and conditioning.
    pub io: u64,
    /// Linear-attention kernels alone: `(layers/2) N L (D^2 + D (D+1))`.
    pub ldt_kernel: u64,
    /// What those layers would cost as softmax attention: `(layers/2) N 2 L^2 D`.
    pub full_attention_equivalent: u64,
}

impl FlopEstimate {
    pub fn total(&self) -> u64 {
        self.spatial + self.temporal + self.io
    }
}

pub fn flop_estimate(cfg: &DenoiserConfig, n: usize, l: usize) -> FlopEstimate {
    let (dm, din, c) = (cfg.d_model, cfg.d_in, cfg.cond_dim);
    let ff = dm * cfg.ff_mult;
    let cond_in = cfg.music_dim + cfg.time_dim;
    let spatial = cfg.gcn_layers * l * (n * n * dm + n * dm * dm);
    let io = n * l * din * dm
        + n * l * dm * dm
        + cfg.time_dim * cfg.time_dim
        + l * cond_in * c
        + n * l * dm * din;
    let diff_layers = cfg.decoder_layers / 2;
    let ldt_layers = cfg.decoder_layers - diff_layers;
    let diff = 3 * l * dm * 2 * dm + 4 * l * l * dm + l * 2 * dm * dm;
    let ldt_kernel = l * dm * dm + l * dm * (dm + 1);
    let ldt = 3 * l * dm * dm + ldt_kernel;
    let shared = 2 * l * c * dm + 2 * l * dm * ff;
    let temporal = n * (diff_layers * diff + ldt_layers * ldt + cfg.decoder_layers * shared);
    FlopEstimate {
        spatial: spatial as u64,
        temporal: temporal as u64,
        io: io as u64,
        ldt_kernel: (ldt_layers * n * ldt_kernel) as u64,
        full_attention_equivalent: (ldt_layers * n * 2 * l * l * dm) as u64,
    }
}

/// Smallest dancer count at which the spatial term reaches the temporal
/// term for sequences of length `l`, searching `1..=max_n`.
pub fn spatial_temporal_crossover(cfg: &DenoiserConfig, l: usize, max_n: usize) -> Option<usize> {
    (1..=max_n).find(|&n| {
        let f = flop_estimate(cfg, n, l);
        f.spatial >= f.temporal
    })
}

/// CSV rows `kernel,size,median_seconds,flops_estimate,checksum` followed by
/// a `# kernel,slope,r2` summary block and raw samples.
pub fn results_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("kernel,size,median_seconds,flops_estimate,checksum\n");
    for r in results {
        for p in &r.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.kernel.as_str(),
                p.size,
                p.median_seconds,
                p.flops_estimate,
                p.checksum
            ));
        }
    }
    out.push_str("# summary: kernel,slope,r2,dropped\n");
    for r in results {
        let dropped: Vec<String> = r.dropped.iter().map(ToString::to_string).collect();
        out.push_str(&format!(
            "# {},{},{},{}\n",
            r.kernel.as_str(),
            r.slope,
            r.r2,
            dropped.join(";")
        ));
    }
    out.push_str("# samples: kernel,size,seconds...\n");
    for r in results {
        for p in &r.points {
            let s: Vec<String> = p.samples.iter().map(ToString::to_string).collect();
            out.push_str(&format!("# {},{},{}\n", r.kernel.as_str(), p.size, s.join(",")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Denoiser;

    #[test]
    fn fit_recovers_exact_power_laws() {
        let xs = [4.0, 8.0, 16.0, 32.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        let (slope, r2) = loglog_fit(&xs, &ys);
        assert!((slope - 1.5).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refuses_parallel_or_short_grids() {
        let mut warn = |_: String| {};
        let cfg = BenchConfig {
            threads: 2,
            ..BenchConfig::default()
        };
        assert!(matches!(
            bench_attention(Kernel::Ldt, &[8, 16, 32, 64], 8, &cfg, &mut warn),
            Err(Error::Bench(_))
        ));
        let cfg = BenchConfig::default();
        assert!(bench_attention(Kernel::Ldt, &[8, 16, 32], 8, &cfg, &mut warn).is_err());
        assert!(bench_attention(Kernel::Ldt, &[8, 8, 16, 32], 8, &cfg, &mut warn).is_err());
    }

    #[test]
    fn counted_macs_match_estimates() {
        let mut warn = |_: String| {};
        let cfg = BenchConfig {
            window: 4,
            heads: 2,
            ..BenchConfig::default()
        };
        for k in [Kernel::Full, Kernel::Ldt, Kernel::Diff] {
            let r = bench_attention(k, &[64, 96, 128, 160], 8, &cfg, &mut warn).unwrap();
            for p in &r.points {
                assert_eq!(p.flops_counted, p.flops_estimate, "{:?} at {}", k, p.size);
            }
        }
        let r = bench_gcn(&[2, 4, 8, 16], 8, 4, &cfg, &mut warn).unwrap();
        for p in &r.points {
            assert_eq!(p.flops_counted, p.flops_estimate);
        }
    }

    #[test]
    fn single_dancer_graph_runs() {
        let p = bench_gcn_point(1, 4, 3, &BenchConfig::default()).unwrap();
        assert_eq!(p.flops_counted, gcn_layer_macs(1, 4, 3));
    }

    #[test]
    fn closed_form_scaling() {
        let cfg = DenoiserConfig::default();
        let a = flop_estimate(&cfg, 3, 100);
        let b = flop_estimate(&cfg, 3, 200);
        assert_eq!(b.ldt_kernel, 2 * a.ldt_kernel);
        assert_eq!(b.full_attention_equivalent, 4 * a.full_attention_equivalent);
        let n2 = |n: usize| (cfg.gcn_layers * 100 * n * n * cfg.d_model) as u64;
        let (s4, s8) = (flop_estimate(&cfg, 4, 100).spatial, flop_estimate(&cfg, 8, 100).spatial);
        assert_eq!(s8 - s4 - (n2(8) - n2(4)), flop_estimate(&cfg, 8, 100).spatial - n2(8) - (s4 - n2(4)));
        assert_eq!(n2(8), 4 * n2(4));
    }

    #[test]
    fn crossover_matches_counted_split() {
        let cfg = DenoiserConfig {
            d_model: 16,
            heads: 2,
            window: 8,
            ..DenoiserConfig::default()
        };
        let cfg = DenoiserConfig { max_dancers: 512, ..cfg };
        let l = 12;
        let n = spatial_temporal_crossover(&cfg, l, 512).unwrap();
        let below = flop_estimate(&cfg, n - 1, l);
        let at = flop_estimate(&cfg, n, l);
        assert!(below.spatial < below.temporal && at.spatial >= at.temporal);
        // One graph layer's counted share is the difference between a two-layer
        // and a one-layer stack.
        let model = Denoiser::new(cfg.clone(), 0).unwrap();
        let flat = Denoiser::new(DenoiserConfig { gcn_layers: 1, ..cfg.clone() }, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[n, l, cfg.d_in], 1.0, &mut rng);
        let m = Tensor::randn(&[l, cfg.music_dim], 1.0, &mut rng);
        let (_, with) = crate::counter::measure(|| model.forward(&x, &m, 1).unwrap());
        let (_, without) = crate::counter::measure(|| flat.forward(&x, &m, 1).unwrap());
        let spatial = (with - without) as f64 * cfg.gcn_layers as f64;
        assert!((spatial - at.spatial as f64).abs() <= 0.01 * at.spatial as f64);
    }

    #[test]
    fn forward_count_matches_estimate() {
        let cfg = DenoiserConfig {
            d_model: 16,
            heads: 2,
            window: 8,
            ..DenoiserConfig::default()
        };
        let model = Denoiser::new(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, l) in [(2, 10), (4, 24), (6, 17)] {
            let x = Tensor::randn(&[n, l, cfg.d_in], 1.0, &mut rng);
            let m = Tensor::randn(&[l, cfg.music_dim], 1.0, &mut rng);
            let (out, counted) = crate::counter::measure(|| model.forward(&x, &m, 3));
            out.unwrap();
            let est = flop_estimate(&cfg, n, l).total();
            let rel = (counted as f64 - est as f64).abs() / est as f64;
            assert!(rel <= 0.01, "n={n} l={l}: counted {counted}, estimated {est}");
        }
    }
}
