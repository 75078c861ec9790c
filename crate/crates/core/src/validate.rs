//! The invariant suite behind the `validate` command: kernel equivalences
//! against [`crate::reference`], schedule and posterior identities, graph
//! spectra, equivariance and the full gradient-check registry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{diff_attention, full_attention, ldt_attention, DiffAttnWeights, LdtWeights, LDT_GUARD};
use crate::diffusion::{make_schedule, p_sample_step};
use crate::error::Result;
use crate::gradcheck::{self, Block, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::graph::{gcn_layer, DistanceGraph, GraphConfig};
use crate::model::DenoiserConfig;
use crate::reference;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Corrupts this block's analytic gradient (harness self-test fixture).
    pub perturb: Option<Block>,
}

fn result(name: &str, passed: bool, detail: String) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn max_err(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

fn schedules() -> Result<SuiteResult> {
    for t in [10, 50, 1000] {
        if let Err(e) = make_schedule(t, 1e-4, 0.02).and_then(|s| s.check_invariants()) {
            return Ok(result("schedule_invariants", false, format!("T={t}: {e}")));
        }
    }
    Ok(result("schedule_invariants", true, "T in {10, 50, 1000}".into()))
}

fn attention_oracles(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut diff_worst, mut ldt_worst, mut red_worst) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..10 {
        let l = rng.gen_range(2..48);
        let heads = [1, 2, 4][case % 3];
        let d = heads * rng.gen_range(1..4);
        let x = Tensor::randn(&[l, d], 1.0, &mut rng);
        let w = |r: &mut ChaCha8Rng, c: usize| Tensor::randn(&[d, c], 0.5, r);
        let (wq, wk, wv) = (w(&mut rng, 2 * d), w(&mut rng, 2 * d), w(&mut rng, 2 * d));
        let lambda: Vec<f64> = (0..heads).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = DiffAttnWeights {
            w_q: wq.clone(),
            w_k: wk.clone(),
            w_v: wv.clone(),
            lambda: Tensor::new(&[heads], lambda.clone())?,
            heads,
        };
        let fast = diff_attention(&x, &p)?;
        diff_worst = diff_worst.max(max_err(&fast, &reference::diff_attention(&x, &wq, &wk, &wv, &lambda)?));

        let window = rng.gen_range(1..l + 2);
        let lp = LdtWeights {
            w_q: w(&mut rng, d),
            w_k: w(&mut rng, d),
            w_v: w(&mut rng, d),
            window,
            guard: LDT_GUARD,
        };
        let fast = ldt_attention(&x, &lp)?;
        let slow = reference::ldt_attention(&x, &lp.w_q, &lp.w_k, &lp.w_v, window, LDT_GUARD)?;
        ldt_worst = ldt_worst.max(max_err(&fast, &slow));

        // With one head and lambda = 0 the differential form is plain
        // attention on the first query/key group.
        let p0 = DiffAttnWeights {
            lambda: Tensor::zeros(&[1]),
            heads: 1,
            ..p
        };
        let first = |m: &Tensor| Tensor::from_fn(&[d, d], |k| m.data()[(k / d) * 2 * d + k % d]);
        let reduced = full_attention(&x, &first(&wq), &first(&wk), &wv)?;
        red_worst = red_worst.max(max_err(&diff_attention(&x, &p0)?, &reduced));
    }
    Ok(vec![
        result("diff_attention_oracle", diff_worst <= 1e-10, format!("max abs error {diff_worst:.3e}")),
        result("ldt_attention_oracle", ldt_worst <= 1e-10, format!("max abs error {ldt_worst:.3e}")),
        result("lambda_zero_reduction", red_worst <= 1e-12, format!("max abs error {red_worst:.3e}")),
    ])
}

fn graphs(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let (mut asym, mut radius, mut equiv) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..30 {
        let n = rng.gen_range(1..=16);
        let top_k = if case % 2 == 0 { n } else { rng.gen_range(1..=n.max(1)) };
        let pos = Tensor::from_fn(&[n, 2], |_| rng.gen_range(-4.0..4.0));
        let g = DistanceGraph::build(&pos, GraphConfig { epsilon: 0.1, top_k })?.normalized;
        for i in 0..n {
            for j in 0..n {
                asym = asym.max((g.data()[i * n + j] - g.data()[j * n + i]).abs());
            }
        }
        radius = radius.max(reference::spectral_radius_symmetric(&g)?);

        let h = Tensor::randn(&[n, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let out = gcn_layer(&h, &g, &w)?;
        let slow = reference::gcn_layer(&h, &g, &w)?;
        equiv = equiv.max(max_err(&out, &slow));
        // Relabel dancers by reversing their order.
        let perm: Vec<usize> = (0..n).rev().collect();
        let ppos = Tensor::from_fn(&[n, 2], |k| pos.data()[perm[k / 2] * 2 + k % 2]);
        let ph = Tensor::from_fn(&[n, 3], |k| h.data()[perm[k / 3] * 3 + k % 3]);
        let pg = DistanceGraph::build(&ppos, GraphConfig { epsilon: 0.1, top_k })?.normalized;
        let pout = gcn_layer(&ph, &pg, &w)?;
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                equiv = equiv.max((pout.data()[i * 4 + c] - out.data()[src * 4 + c]).abs());
            }
        }
    }
    Ok(vec![
        result("graph_symmetry", asym == 0.0, format!("max asymmetry {asym:.3e}")),
        result("graph_spectral_radius", radius <= 1.0 + 1e-9, format!("max radius {radius:.12}")),
        result("gcn_equivariance", equiv <= 1e-12, format!("max deviation {equiv:.3e}")),
    ])
}

fn final_step(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = make_schedule(50, 2e-3, 0.4)?;
    let x0 = Tensor::randn(&[3, 12, 8], 1.0, &mut rng);
    let x1 = Tensor::randn(&[3, 12, 8], 1.0, &mut rng);
    let out = p_sample_step(&x1, 1, &x0, &s, &mut rng, false)?;
    let err = max_err(&out, &x0);
    Ok(result("posterior_final_step", err <= 1e-12, format!("max abs error {err:.3e}")))
}

/// Runs every suite, reporting each result through `on_result` as it lands.
pub fn run(opts: &ValidateOptions, mut on_result: impl FnMut(&SuiteResult)) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let mut push = |r: SuiteResult, out: &mut Vec<SuiteResult>| {
        on_result(&r);
        out.push(r);
    };
    push(schedules()?, &mut out);
    for r in attention_oracles(opts.seed)? {
        push(r, &mut out);
    }
    for r in graphs(opts.seed)? {
        push(r, &mut out);
    }
    push(final_step(opts.seed)?, &mut out);

    let cal = gradcheck::calibrate(opts.seed, DEFAULT_STEP)?;
    push(
        result("gradcheck:calibration", cal <= DEFAULT_TOLERANCE, format!("quadratic error {cal:.3e}")),
        &mut out,
    );
    let caught = gradcheck::self_test(opts.seed, DEFAULT_STEP, DEFAULT_TOLERANCE)?;
    push(
        result("gradcheck:self_test", caught, format!("corrupted gradient flagged: {caught}")),
        &mut out,
    );
    let cov = gradcheck::coverage(&DenoiserConfig::default()).and_then(|_| gradcheck::coverage(&DenoiserConfig::tiny()));
    let blocks: Vec<&str> = Block::ALL.iter().map(|b| b.name()).collect();
    push(
        match cov {
            Ok(()) => result("gradcheck:coverage", true, format!("registered: {}", blocks.join(", "))),
            Err(e) => result("gradcheck:coverage", false, e.to_string()),
        },
        &mut out,
    );
    for b in Block::ALL {
        let r = if opts.perturb == Some(b) {
            gradcheck::check_block_corrupted(b, opts.seed, DEFAULT_STEP, DEFAULT_TOLERANCE)?
        } else {
            gradcheck::check_block(b, opts.seed, DEFAULT_STEP, DEFAULT_TOLERANCE)?
        };
        push(
            result(
                &format!("gradcheck:{}", b.name()),
                r.passed,
                format!(
                    "{} coordinates, {} kinks skipped, max rel error {:.3e} at {}",
                    r.checked, r.kinks, r.max_rel_err, r.worst
                ),
            ),
            &mut out,
        );
    }
    Ok(out)
}
