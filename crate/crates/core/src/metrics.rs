//! Group-coordination proxies: trajectory intersection frequency, a
//! velocity-correlation group motion score and a sample diversity score.
//!
//! These are desk-scale stand-ins and are labelled `proxy` in reports.

use serde::{Deserialize, Serialize};

use crate::data::{root_of, NormStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DELTA: f64 = 0.1;

fn dims(motion: &Tensor) -> Result<(usize, usize, usize)> {
    match motion.shape() {
        [n, l, d] => Ok((*n, *l, *d)),
        s => Err(Error::shape("metrics", format!("expected N x L x d, got {s:?}"))),
    }
}

fn root_distance(motion: &Tensor, a: usize, b: usize, f: usize, pc: [usize; 2]) -> f64 {
    let (pa, pb) = (root_of(motion, a, f, pc), root_of(motion, b, f, pc));
    let (dx, dy) = (pa.0 - pb.0, pa.1 - pb.1);
    (dx * dx + dy * dy).sqrt()
}

/// Fraction of frames in which some pair of dancers is closer than `delta`.
pub fn tif(motion: &Tensor, delta: f64, pc: [usize; 2]) -> Result<f64> {
    let (n, l, _) = dims(motion)?;
    if n < 2 {
        return Err(Error::Metric(format!("intersection frequency needs 2+ dancers, got {n}")));
    }
    if l == 0 {
        return Err(Error::Metric("motion has no frames".into()));
    }
    let mut hits = 0usize;
    for f in 0..l {
        let close = (0..n).any(|a| ((a + 1)..n).any(|b| root_distance(motion, a, b, f, pc) < delta));
        if close {
            hits += 1;
        }
    }
    Ok(hits as f64 / l as f64)
}

/// Per-frame root speed of `dancer`, length `L - 1`.
fn speeds(motion: &Tensor, dancer: usize, pc: [usize; 2]) -> Vec<f64> {
    let l = motion.shape()[1];
    (1..l)
        .map(|f| {
            let (p, q) = (root_of(motion, dancer, f - 1, pc), root_of(motion, dancer, f, pc));
            ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt()
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Relative threshold: a stream whose spread is at rounding level of its
    // mean counts as constant.
    let tiny = |s: f64, m: f64| s <= (1e-12 * (m.abs() + 1e-300)).powi(2) * n;
    if tiny(saa, ma) || tiny(sbb, mb) {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean Pearson correlation of per-frame speed profiles over dancer pairs.
/// Pairs involving a constant-speed dancer are skipped.
pub fn gmc_proxy(motion: &Tensor, pc: [usize; 2]) -> Result<f64> {
    let (n, l, _) = dims(motion)?;
    if n < 2 || l < 3 {
        return Err(Error::Metric(format!(
            "group motion correlation needs 2+ dancers and 3+ frames, got {n} and {l}"
        )));
    }
    let profiles: Vec<Vec<f64>> = (0..n).map(|i| speeds(motion, i, pc)).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for b in (a + 1)..n {
            if let Some(r) = pearson(&profiles[a], &profiles[b]) {
                sum += r;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Metric("every dancer pair has a constant speed profile".into()));
    }
    Ok(sum / count as f64)
}

/// Mean pairwise Euclidean distance between samples after per-channel
/// scaling by `scales.std` (means cancel in differences).
pub fn diversity(samples: &[Tensor], scales: &NormStats) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Metric(format!("diversity needs 2+ samples, got {}", samples.len())));
    }
    let shape = samples[0].shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::shape("diversity", "samples differ in shape"));
    }
    let d = *shape.last().expect("rank >= 1");
    if scales.std.len() != d {
        return Err(Error::shape("diversity", "scale length differs from channel count"));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let sq: f64 = samples[i]
                .data()
                .iter()
                .zip(samples[j].data())
                .enumerate()
                .map(|(k, (a, b))| {
                    let r = (a - b) / scales.std[k % d];
                    r * r
                })
                .sum();
            sum += sq.sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// [`diversity`] with per-channel scales pooled over the samples themselves.
pub fn diversity_pooled(samples: &[Tensor]) -> Result<f64> {
    let refs: Vec<&Tensor> = samples.iter().collect();
    if refs.is_empty() {
        return Err(Error::Metric("diversity needs 2+ samples, got 0".into()));
    }
    diversity(samples, &NormStats::from_motions(&refs)?)
}

/// `frame,dancer_a,dancer_b,distance` rows for every pair and frame.
pub fn pair_distances_csv(motion: &Tensor, pc: [usize; 2]) -> Result<String> {
    let (n, l, _) = dims(motion)?;
    let mut out = String::from("frame,dancer_a,dancer_b,distance\n");
    for f in 0..l {
        for a in 0..n {
            for b in (a + 1)..n {
                out.push_str(&format!("{f},{a},{b},{}\n", root_distance(motion, a, b, f, pc)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Always `"proxy"`: these are not the published metric definitions.
    pub label: String,
    pub tif: f64,
    pub tif_delta: f64,
    pub gmc_proxy: Option<f64>,
    pub diversity: Option<f64>,
    pub n_dancers: usize,
    pub length: usize,
}

impl MetricReport {
    /// Computes TIF and the GMC proxy for one motion; `others` (with the
    /// motion itself) feed the diversity score when non-empty.
    pub fn compute(motion: &Tensor, others: &[Tensor], delta: f64, pc: [usize; 2]) -> Result<Self> {
        let (n, l, _) = dims(motion)?;
        let gmc = match gmc_proxy(motion, pc) {
            Ok(v) => Some(v),
            Err(Error::Metric(_)) => None,
            Err(e) => return Err(e),
        };
        let diversity = if others.is_empty() {
            None
        } else {
            let mut all = vec![motion.clone()];
            all.extend_from_slice(others);
            Some(diversity_pooled(&all)?)
        };
        Ok(Self {
            label: "proxy".into(),
            tif: tif(motion, delta, pc)?,
            tif_delta: delta,
            gmc_proxy: gmc,
            diversity,
            n_dancers: n,
            length: l,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Metric(format!("bad report: {e}")))
    }
}
