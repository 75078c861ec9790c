//! Distance-aware dancer graph and graph-convolution propagation.
//!
//! Each frame gets a fully connected graph over dancers weighted by inverse
//! root distance, optionally pruned to the strongest `k` edges per node, then
//! symmetrically normalised before features are propagated through it.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub epsilon: f64,
    /// Edge budget per node. Values `>= N - 1` disable pruning.
    pub top_k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            top_k: 8,
        }
    }
}

/// One frame's dancer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGraph {
    pub adjacency: Tensor,
    pub normalized: Tensor,
    pub k: usize,
    pub epsilon: f64,
}

impl DistanceGraph {
    /// Builds, prunes and normalises the graph for `positions` (`N x 2`).
    pub fn build(positions: &Tensor, cfg: GraphConfig) -> Result<Self> {
        let adjacency = build_adjacency(positions, cfg.epsilon)?;
        let pruned = prune_topk(&adjacency, cfg.top_k)?;
        let normalized = normalize_adjacency(&pruned)?;
        Ok(Self {
            adjacency,
            normalized,
            k: cfg.top_k,
            epsilon: cfg.epsilon,
        })
    }
}

/// `A_ij = 1 / (|p_i - p_j| + epsilon)`, diagonal included.
pub fn build_adjacency(positions: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if positions.shape().len() != 2 || positions.cols() != 2 || positions.rows() == 0 {
        return Err(Error::shape(
            "build_adjacency",
            format!("positions must be N x 2 with N >= 1, got {:?}", positions.shape()),
        ));
    }
    positions.ensure_finite("build_adjacency")?;
    let n = positions.rows();
    let p = positions.data();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0 / epsilon;
        for j in (i + 1)..n {
            let dx = p[2 * i] - p[2 * j];
            let dy = p[2 * i + 1] - p[2 * j + 1];
            let w = 1.0 / ((dx * dx + dy * dy).sqrt() + epsilon);
            a[i * n + j] = w;
            a[j * n + i] = w;
        }
    }
    Tensor::new(&[n, n], a)
}

/// Keeps each node's `k` strongest off-diagonal edges; an edge survives when
/// either endpoint keeps it. Ties break towards the lower column index.
pub fn prune_topk(adjacency: &Tensor, k: usize) -> Result<Tensor> {
    if k < 1 {
        return Err(Error::Config("top-k edge budget must be at least 1".into()));
    }
    let n = square_dim(adjacency, "prune_topk")?;
    if k + 1 >= n {
        return Ok(adjacency.clone());
    }
    let a = adjacency.data();
    let mut keep = vec![false; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = &a[i * n..(i + 1) * n];
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        for &j in &order[..k] {
            keep[i * n + j] = true;
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = a[i * n + i];
        for j in 0..n {
            if i != j && (keep[i * n + j] || keep[j * n + i]) {
                out[i * n + j] = a[i * n + j];
            }
        }
    }
    Tensor::new(&[n, n], out)
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row sums of `pruned`.
pub fn normalize_adjacency(pruned: &Tensor) -> Result<Tensor> {
    let n = square_dim(pruned, "normalize_adjacency")?;
    let a = pruned.data();
    if a.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::numeric("normalize_adjacency: negative or non-finite weight"));
    }
    let mut inv_sqrt_deg = Vec::with_capacity(n);
    for row in a.chunks(n) {
        let deg: f64 = row.iter().sum();
        if !(deg > 0.0) {
            return Err(Error::numeric("normalize_adjacency: zero degree"));
        }
        inv_sqrt_deg.push(1.0 / deg.sqrt());
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // Scaling by the commutative product keeps the result bitwise
            // symmetric for symmetric input.
            out[i * n + j] = a[i * n + j] * (inv_sqrt_deg[i] * inv_sqrt_deg[j]);
        }
    }
    Tensor::new(&[n, n], out)
}

fn square_dim(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::shape(op, format!("expected a square matrix, got {s:?}"))),
    }
}

/// Intermediates of one [`gcn_layer`] call needed by its backward pass.
#[derive(Debug, Clone)]
pub struct GcnCache {
    /// `normalized * h`, `N x din`.
    pub propagated: Tensor,
    /// Pre-activation `normalized * h * w`, `N x dout`.
    pub pre: Tensor,
}

/// `ReLU(normalized * h * w)` for a single frame.
pub fn gcn_layer(h: &Tensor, normalized: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(gcn_layer_cached(h, normalized, w)?.0)
}

pub fn gcn_layer_cached(h: &Tensor, normalized: &Tensor, w: &Tensor) -> Result<(Tensor, GcnCache)> {
    let n = square_dim(normalized, "gcn_layer")?;
    let (din, dout) = match w.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::shape("gcn_layer", format!("weight shape {s:?}"))),
    };
    if h.shape() != [n, din] {
        return Err(Error::shape(
            "gcn_layer",
            format!("features {:?} vs graph {n}x{n} and weight {din}x{dout}", h.shape()),
        ));
    }
    let mut propagated = vec![0.0; n * din];
    gemm_acc(normalized.data(), h.data(), &mut propagated, n, n, din);
    let mut pre = vec![0.0; n * dout];
    gemm_acc(&propagated, w.data(), &mut pre, n, din, dout);
    let out: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    Ok((
        Tensor::new(&[n, dout], out)?,
        GcnCache {
            propagated: Tensor::new(&[n, din], propagated)?,
            pre: Tensor::new(&[n, dout], pre)?,
        },
    ))
}

pub struct GcnGrads {
    pub dh: Tensor,
    pub dw: Tensor,
}

pub fn gcn_layer_backward(
    cache: &GcnCache,
    normalized: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<GcnGrads> {
    let n = normalized.rows();
    let (din, dout) = (w.rows(), w.cols());
    if grad_out.shape() != [n, dout] {
        return Err(Error::shape("gcn_layer_backward", format!("{:?}", grad_out.shape())));
    }
    let dpre: Vec<f64> = grad_out
        .data()
        .iter()
        .zip(cache.pre.data())
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    let mut dw = vec![0.0; din * dout];
    gemm_tn_acc(cache.propagated.data(), &dpre, &mut dw, n, din, dout);
    let mut dprop = vec![0.0; n * din];
    gemm_nt_acc(&dpre, w.data(), &mut dprop, n, dout, din);
    let mut dh = vec![0.0; n * din];
    gemm_tn_acc(normalized.data(), &dprop, &mut dh, n, n, din);
    Ok(GcnGrads {
        dh: Tensor::new(&[n, din], dh)?,
        dw: Tensor::new(&[din, dout], dw)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn positions(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[n, 2], |_| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn adjacency_examples() {
        let p = Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let a = build_adjacency(&p, 0.1).unwrap();
        assert!((a.data()[1] - 1.0 / 5.1).abs() < 1e-15);
        assert_eq!(a.data()[0], 10.0);
        assert_eq!(a.data()[3], 10.0);
        let same = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(build_adjacency(&same, 0.5).unwrap().data()[1], 2.0);
    }

    #[test]
    fn adjacency_errors() {
        let p = Tensor::zeros(&[3, 2]);
        assert!(matches!(build_adjacency(&p, 0.0), Err(Error::Config(_))));
        assert!(matches!(build_adjacency(&p, -1.0), Err(Error::Config(_))));
        let bad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(build_adjacency(&bad, 0.1), Err(Error::Numeric { .. })));
    }

    #[test]
    fn prune_three_node_example() {
        let a = Tensor::new(
            &[3, 3],
            vec![10.0, 5.0, 1.0, 5.0, 10.0, 3.0, 1.0, 3.0, 10.0],
        )
        .unwrap();
        let p = prune_topk(&a, 1).unwrap();
        assert_eq!(
            p.data(),
            &[10.0, 5.0, 0.0, 5.0, 10.0, 3.0, 0.0, 3.0, 10.0]
        );
    }

    #[test]
    fn prune_noop_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = build_adjacency(&positions(5, &mut rng), 0.1).unwrap();
        assert_eq!(prune_topk(&a, 4).unwrap(), a);
        assert_eq!(prune_topk(&a, 10).unwrap(), a);
        let one = Tensor::new(&[1, 1], vec![10.0]).unwrap();
        assert_eq!(prune_topk(&one, 1).unwrap(), one);
        assert!(matches!(prune_topk(&a, 0), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_examples() {
        let single = Tensor::new(&[1, 1], vec![10.0]).unwrap();
        assert_eq!(normalize_adjacency(&single).unwrap().data(), &[1.0]);
        let a = Tensor::new(&[2, 2], vec![10.0, 0.2, 0.2, 10.0]).unwrap();
        let n = normalize_adjacency(&a).unwrap();
        assert!((n.data()[1] - 0.2 / 10.2).abs() < 1e-15);
        let zero = Tensor::zeros(&[2, 2]);
        assert!(matches!(normalize_adjacency(&zero), Err(Error::Numeric { .. })));
    }

    #[test]
    fn gcn_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let out = gcn_layer(&h, &Tensor::eye(4), &Tensor::eye(3)).unwrap();
        assert_eq!(out, crate::tensor::relu(&h));
        let g = DistanceGraph::build(&positions(4, &mut rng), GraphConfig::default()).unwrap();
        let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let z = gcn_layer(&Tensor::zeros(&[4, 3]), &g.normalized, &w).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = DistanceGraph::build(&positions(4, &mut rng), GraphConfig::default()).unwrap();
        let h = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let out = gcn_layer(&h, &g.normalized, &w).unwrap();
        let (a, hd, wd) = (g.normalized.data(), h.data(), w.data());
        for i in 0..4 {
            for o in 0..3 {
                let mut acc = 0.0;
                for j in 0..4 {
                    for c in 0..3 {
                        acc += a[i * 4 + j] * hd[j * 3 + c] * wd[c * 3 + o];
                    }
                }
                assert!((out.data()[i * 3 + o] - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closer_dancers_get_heavier_edges() {
        let far = Tensor::new(&[3, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 5.0]).unwrap();
        let near = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.5, 0.0, 0.0, 5.0]).unwrap();
        let a_far = build_adjacency(&far, 0.1).unwrap();
        let a_near = build_adjacency(&near, 0.1).unwrap();
        assert!(a_near.data()[1] > a_far.data()[1]);
        assert_eq!(a_near.data()[2], a_far.data()[2]);
    }

    proptest::proptest! {
        #[test]
        fn prune_is_idempotent(seed in 0u64..500, n in 2usize..12, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = build_adjacency(&positions(n, &mut rng), 0.1).unwrap();
            let once = prune_topk(&a, k).unwrap();
            proptest::prop_assert_eq!(prune_topk(&once, k).unwrap(), once.clone());
            let t = once.transpose().unwrap();
            proptest::prop_assert_eq!(t, once);
        }

        #[test]
        fn normalization_preserves_sparsity(seed in 0u64..500, n in 2usize..12, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pruned = prune_topk(&build_adjacency(&positions(n, &mut rng), 0.1).unwrap(), k).unwrap();
            let norm = normalize_adjacency(&pruned).unwrap();
            for (p, q) in pruned.data().iter().zip(norm.data()) {
                proptest::prop_assert_eq!(*p == 0.0, *q == 0.0);
            }
        }

        #[test]
        fn gcn_is_permutation_equivariant(seed in 0u64..500, n in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pos = positions(n, &mut rng);
            let h = Tensor::randn(&[n, 3], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2], 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let cfg = GraphConfig { epsilon: 0.1, top_k: 2 };
            let g = DistanceGraph::build(&pos, cfg).unwrap();
            let out = gcn_layer(&h, &g.normalized, &w).unwrap();
            let pos_p = Tensor::from_fn(&[n, 2], |i| pos.data()[perm[i / 2] * 2 + i % 2]);
            let h_p = Tensor::from_fn(&[n, 3], |i| h.data()[perm[i / 3] * 3 + i % 3]);
            let g_p = DistanceGraph::build(&pos_p, cfg).unwrap();
            let out_p = gcn_layer(&h_p, &g_p.normalized, &w).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                for c in 0..2 {
                    let diff = (out_p.data()[i * 2 + c] - out.data()[src * 2 + c]).abs();
                    proptest::prop_assert!(diff <= 1e-12);
                }
            }
        }
    }
}
