//! Workload vector and co-activation matrices of a routing trace.
//!
//! Counting is done in exact integers ([`LayerCounts`]) so that chunked or
//! parallel profiling produces bit-identical results; normalization into
//! fractions happens once, in [`LayerCounts::finish`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{RoutingTrace, TraceError};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot profile an empty trace (no tokens to normalize over)")]
    EmptyTrace,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("cannot merge counts over {0} and {1} experts")]
    ShapeMismatch(usize, usize),
}

/// Unnormalized activation and pair counts for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCounts {
    n_experts: usize,
    n_tokens: u64,
    activations: Vec<u64>,
    /// Row-major `n_experts x n_experts`, diagonal kept at zero.
    pairs: Vec<u64>,
}

impl LayerCounts {
    pub fn new(n_experts: usize) -> Self {
        Self {
            n_experts,
            n_tokens: 0,
            activations: vec![0; n_experts],
            pairs: vec![0; n_experts * n_experts],
        }
    }

    /// Adds a run of selections, `k` experts per token.
    pub fn accumulate(&mut self, selections: &[u16], k: usize) {
        let n = self.n_experts;
        for sel in selections.chunks_exact(k) {
            self.n_tokens += 1;
            for (a, &i) in sel.iter().enumerate() {
                let i = i as usize;
                self.activations[i] += 1;
                for &j in &sel[a + 1..] {
                    let j = j as usize;
                    self.pairs[i * n + j] += 1;
                    self.pairs[j * n + i] += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &LayerCounts) -> Result<(), ProfileError> {
        if self.n_experts != other.n_experts {
            return Err(ProfileError::ShapeMismatch(self.n_experts, other.n_experts));
        }
        self.n_tokens += other.n_tokens;
        for (a, b) in self.activations.iter_mut().zip(&other.activations) {
            *a += b;
        }
        for (a, b) in self.pairs.iter_mut().zip(&other.pairs) {
            *a += b;
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> u64 {
        self.n_tokens
    }

    pub fn activations(&self) -> &[u64] {
        &self.activations
    }

    pub fn pair(&self, i: usize, j: usize) -> u64 {
        self.pairs[i * self.n_experts + j]
    }

    /// Normalizes the counts into a profile.
    pub fn finish(&self, layer: usize) -> Result<ExpertProfile, ProfileError> {
        let total: u64 = self.activations.iter().sum();
        if self.n_tokens == 0 || total == 0 {
            return Err(ProfileError::EmptyTrace);
        }
        let n = self.n_experts;
        let v = self
            .activations
            .iter()
            .map(|&a| a as f64 / total as f64)
            .collect();
        let c: Vec<Vec<u64>> = self.pairs.chunks(n).map(|r| r.to_vec()).collect();
        let p = normalize_pairs(&c);
        Ok(ExpertProfile {
            layer,
            n_tokens: self.n_tokens,
            activations: self.activations.clone(),
            v,
            c,
            p,
        })
    }
}

fn normalize_pairs(c: &[Vec<u64>]) -> Vec<Vec<f64>> {
    let max = c
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i))
        .map(|(_, &x)| x)
        .max()
        .unwrap_or(0);
    c.iter()
        .map(|row| {
            row.iter()
                .map(|&x| if max == 0 { 0.0 } else { x as f64 / max as f64 })
                .collect()
        })
        .collect()
}

/// Workload distribution and co-activation structure of one MoE layer.
///
/// `c[i][j]` counts tokens that activate both `i` and `j`; the diagonal is
/// zero. `p` is `c` scaled by its largest off-diagonal entry, or all zero
/// when no pair is ever co-activated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub layer: usize,
    pub n_tokens: u64,
    /// Raw per-expert activation counts behind `v`.
    pub activations: Vec<u64>,
    pub v: Vec<f64>,
    pub c: Vec<Vec<u64>>,
    pub p: Vec<Vec<f64>>,
}

impl ExpertProfile {
    pub fn n_experts(&self) -> usize {
        self.v.len()
    }

    /// True when `c` has no positive entry (e.g. top-1 routing).
    pub fn is_degenerate(&self) -> bool {
        self.c.iter().all(|r| r.iter().all(|&x| x == 0))
    }

    /// Builds a profile directly from counts, e.g. for planted test inputs.
    /// The diagonal of `c` is cleared.
    pub fn from_counts(layer: usize, activations: Vec<u64>, mut c: Vec<Vec<u64>>) -> Self {
        let total: u64 = activations.iter().sum();
        let v = activations
            .iter()
            .map(|&a| {
                if total == 0 {
                    0.0
                } else {
                    a as f64 / total as f64
                }
            })
            .collect();
        for (i, row) in c.iter_mut().enumerate() {
            row[i] = 0;
        }
        let p = normalize_pairs(&c);
        Self {
            layer,
            n_tokens: 0,
            activations,
            v,
            c,
            p,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

fn layer_counts(trace: &RoutingTrace, layer: usize) -> Result<LayerCounts, ProfileError> {
    trace.check_layer(layer)?;
    if trace.n_tokens() == 0 {
        return Err(ProfileError::EmptyTrace);
    }
    let mut counts = LayerCounts::new(trace.n_experts());
    counts.accumulate(trace.layer_selections(layer), trace.top_k());
    Ok(counts)
}

/// Normalized workload vector V of one layer.
pub fn compute_workload(trace: &RoutingTrace, layer: usize) -> Result<Vec<f64>, ProfileError> {
    Ok(layer_counts(trace, layer)?.finish(layer)?.v)
}

/// Co-activation counts and their max-normalized form for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Coactivation {
    pub c: Vec<Vec<u64>>,
    pub p: Vec<Vec<f64>>,
    /// Set when no pair is co-activated (top-1 routing); `p` is all zero.
    pub degenerate: bool,
}

pub fn compute_coactivation(
    trace: &RoutingTrace,
    layer: usize,
) -> Result<Coactivation, ProfileError> {
    let profile = layer_counts(trace, layer)?.finish(layer)?;
    let degenerate = profile.is_degenerate();
    Ok(Coactivation {
        c: profile.c,
        p: profile.p,
        degenerate,
    })
}

pub fn profile_layer(trace: &RoutingTrace, layer: usize) -> Result<ExpertProfile, ProfileError> {
    layer_counts(trace, layer)?.finish(layer)
}

/// Profiles every layer; layers are processed in parallel.
pub fn profile_trace(trace: &RoutingTrace) -> Result<Vec<ExpertProfile>, ProfileError> {
    (0..trace.n_layers())
        .into_par_iter()
        .map(|layer| profile_layer(trace, layer))
        .collect()
}

/// Profiles one layer by counting `chunk`-token slices independently and
/// merging. Equal to [`profile_layer`] for any chunk size.
pub fn profile_layer_chunked(
    trace: &RoutingTrace,
    layer: usize,
    chunk: usize,
) -> Result<ExpertProfile, ProfileError> {
    trace.check_layer(layer)?;
    let k = trace.top_k();
    let sels = trace.layer_selections(layer);
    let parts: Vec<LayerCounts> = sels
        .par_chunks(chunk.max(1) * k)
        .map(|s| {
            let mut c = LayerCounts::new(trace.n_experts());
            c.accumulate(s, k);
            c
        })
        .collect();
    let mut total = LayerCounts::new(trace.n_experts());
    for p in &parts {
        total.merge(p)?;
    }
    total.finish(layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_of(n_experts: usize, k: usize, sels: &[&[u16]]) -> RoutingTrace {
        let experts: Vec<u16> = sels.iter().flat_map(|s| s.iter().copied()).collect();
        let gates = sels
            .iter()
            .flat_map(|s| {
                let w = 1.0 / s.len() as f32;
                let mut g = vec![w; s.len()];
                let rest: f64 = g[..s.len() - 1].iter().map(|&x| x as f64).sum();
                *g.last_mut().unwrap() = (1.0 - rest) as f32;
                g
            })
            .collect();
        RoutingTrace::from_parts(n_experts, k, 1, sels.len(), experts, gates).unwrap()
    }

    #[test]
    fn workload_hand_count() {
        let t = trace_of(4, 1, &[&[0], &[0], &[1], &[2]]);
        assert_eq!(compute_workload(&t, 0).unwrap(), vec![0.5, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn workload_all_experts_active() {
        let t = trace_of(3, 3, &[&[0, 1, 2], &[2, 0, 1]]);
        let v = compute_workload(&t, 0).unwrap();
        assert!(v.iter().all(|&x| x == 1.0 / 3.0));
    }

    #[test]
    fn coactivation_hand_count() {
        let t = trace_of(4, 2, &[&[0, 1], &[1, 0], &[2, 3]]);
        let co = compute_coactivation(&t, 0).unwrap();
        assert_eq!(co.c[0][1], 2);
        assert_eq!(co.c[1][0], 2);
        assert_eq!(co.c[2][3], 1);
        assert_eq!(co.c[0][2], 0);
        assert_eq!(co.c[0][0], 0);
        assert_eq!(co.p[0][1], 1.0);
        assert_eq!(co.p[3][2], 0.5);
        assert!(!co.degenerate);
    }

    #[test]
    fn top1_is_degenerate() {
        let t = trace_of(4, 1, &[&[0], &[3]]);
        let co = compute_coactivation(&t, 0).unwrap();
        assert!(co.degenerate);
        assert!(co.p.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_trace_errors() {
        let t = RoutingTrace::from_parts(4, 2, 1, 0, vec![], vec![]).unwrap();
        assert!(matches!(
            compute_workload(&t, 0),
            Err(ProfileError::EmptyTrace)
        ));
        assert!(matches!(profile_layer(&t, 3), Err(ProfileError::Trace(_))));
    }

    #[test]
    fn json_has_expected_keys() {
        let t = trace_of(4, 2, &[&[0, 1], &[2, 3]]);
        let json: serde_json::Value =
            serde_json::from_str(&profile_layer(&t, 0).unwrap().to_json()).unwrap();
        for key in ["layer", "v", "c", "p"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
