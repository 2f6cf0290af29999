//! Routing traces: per-layer, per-token top-k expert selections.
//!
//! A trace is either synthesized by [`generate_trace`] or read from the
//! binary `MZTR` format (see [`read_trace`] / [`write_trace`]).
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic    [u8; 4]  "MZTR"
//! version  u16      1
//! n_exp    u32
//! k        u16
//! n_layers u16
//! n_tokens u64
//! body     n_layers * n_tokens * k * (u16 expert, f32 gate)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelSpec;

pub const TRACE_MAGIC: [u8; 4] = *b"MZTR";
pub const TRACE_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 22;
const ENTRY_LEN: u64 = 6;
/// Tolerance on the per-selection gate weight sum.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?} at offset 0 (expected \"MZTR\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported trace version {found} at offset 4 (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("k violation: k = {k} with {n_experts} experts (need 1 <= k <= n_experts)")]
    KViolation { k: usize, n_experts: usize },
    #[error("expert index {expert} out of range (n_experts = {n_experts}) at layer {layer}, token {token}, offset {offset}")]
    ExpertOutOfRange {
        layer: usize,
        token: usize,
        expert: usize,
        n_experts: usize,
        offset: u64,
    },
    #[error("duplicate expert {expert} at layer {layer}, token {token}, offset {offset}")]
    DuplicateExpert {
        layer: usize,
        token: usize,
        expert: usize,
        offset: u64,
    },
    #[error("weight normalization violated: gate weights sum to {sum} at layer {layer}, token {token}, offset {offset}")]
    WeightNormalization {
        layer: usize,
        token: usize,
        sum: f64,
        offset: u64,
    },
    #[error(
        "gate weight {weight} outside [0, 1] at layer {layer}, token {token}, offset {offset}"
    )]
    WeightOutOfRange {
        layer: usize,
        token: usize,
        weight: f32,
        offset: u64,
    },
    #[error("truncated trace: need {needed} bytes at offset {offset}")]
    Truncated { offset: u64, needed: u64 },
    #[error("{extra} trailing bytes after trace body at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("trace must have at least one layer")]
    NoLayers,
    #[error("trace has {n_experts} experts; the format stores expert indices as u16")]
    TooManyExperts { n_experts: usize },
    #[error("selection buffers have {got} entries, expected {expected}")]
    Shape { got: usize, expected: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("layer {layer} out of range (trace has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("trace covers {trace} layers/{trace_experts} experts/top-{trace_k}, model `{model}` needs {layers}/{experts}/top-{k}")]
    ModelMismatch {
        model: String,
        trace: usize,
        trace_experts: usize,
        trace_k: usize,
        layers: usize,
        experts: usize,
        k: usize,
    },
}

/// Per-layer, per-token top-k selections with their gate weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    n_experts: usize,
    top_k: usize,
    n_layers: usize,
    n_tokens: usize,
    experts: Vec<u16>,
    gates: Vec<f32>,
}

fn entry_offset(top_k: usize, n_tokens: usize, layer: usize, token: usize, slot: usize) -> u64 {
    HEADER_LEN + (((layer * n_tokens + token) * top_k + slot) as u64) * ENTRY_LEN
}

impl RoutingTrace {
    /// Builds a trace from flat `[layer][token][slot]` buffers, checking every
    /// invariant.
    pub fn from_parts(
        n_experts: usize,
        top_k: usize,
        n_layers: usize,
        n_tokens: usize,
        experts: Vec<u16>,
        gates: Vec<f32>,
    ) -> Result<Self, TraceError> {
        if n_layers == 0 {
            return Err(TraceError::NoLayers);
        }
        if n_experts > u16::MAX as usize + 1 {
            return Err(TraceError::TooManyExperts { n_experts });
        }
        if top_k == 0 || top_k > n_experts {
            return Err(TraceError::KViolation {
                k: top_k,
                n_experts,
            });
        }
        let expected = n_layers * n_tokens * top_k;
        for got in [experts.len(), gates.len()] {
            if got != expected {
                return Err(TraceError::Shape { got, expected });
            }
        }
        let trace = Self {
            n_experts,
            top_k,
            n_layers,
            n_tokens,
            experts,
            gates,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<(), TraceError> {
        for layer in 0..self.n_layers {
            for token in 0..self.n_tokens {
                self.validate_entry(layer, token)?;
            }
        }
        Ok(())
    }

    fn validate_entry(&self, layer: usize, token: usize) -> Result<(), TraceError> {
        let k = self.top_k;
        let sel = self.selection(layer, token);
        for (slot, &e) in sel.iter().enumerate() {
            let offset = entry_offset(k, self.n_tokens, layer, token, slot);
            if e as usize >= self.n_experts {
                return Err(TraceError::ExpertOutOfRange {
                    layer,
                    token,
                    expert: e as usize,
                    n_experts: self.n_experts,
                    offset,
                });
            }
            if sel[..slot].contains(&e) {
                return Err(TraceError::DuplicateExpert {
                    layer,
                    token,
                    expert: e as usize,
                    offset,
                });
            }
        }
        let gates = self.gates(layer, token);
        let mut sum = 0.0f64;
        for (slot, &w) in gates.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return Err(TraceError::WeightOutOfRange {
                    layer,
                    token,
                    weight: w,
                    offset: entry_offset(k, self.n_tokens, layer, token, slot) + 2,
                });
            }
            sum += w as f64;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(TraceError::WeightNormalization {
                layer,
                token,
                sum,
                offset: entry_offset(k, self.n_tokens, layer, token, 0),
            });
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn selection(&self, layer: usize, token: usize) -> &[u16] {
        let start = (layer * self.n_tokens + token) * self.top_k;
        &self.experts[start..start + self.top_k]
    }

    pub fn gates(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.n_tokens + token) * self.top_k;
        &self.gates[start..start + self.top_k]
    }

    /// All selections of one layer, `top_k` entries per token.
    pub fn layer_selections(&self, layer: usize) -> &[u16] {
        let len = self.n_tokens * self.top_k;
        &self.experts[layer * len..(layer + 1) * len]
    }

    pub fn check_layer(&self, layer: usize) -> Result<(), TraceError> {
        if layer >= self.n_layers {
            return Err(TraceError::LayerOutOfRange {
                layer,
                n_layers: self.n_layers,
            });
        }
        Ok(())
    }

    /// Verifies the trace shape matches a model.
    pub fn check_model(&self, model: &ModelSpec) -> Result<(), TraceError> {
        if self.n_layers != model.n_layers
            || self.n_experts != model.n_routed_experts
            || self.top_k != model.top_k
        {
            return Err(TraceError::ModelMismatch {
                model: model.name.clone(),
                trace: self.n_layers,
                trace_experts: self.n_experts,
                trace_k: self.top_k,
                layers: model.n_layers,
                experts: model.n_routed_experts,
                k: model.top_k,
            });
        }
        Ok(())
    }

    /// Concatenates the token batches of two traces with identical shape.
    pub fn concat(&self, other: &RoutingTrace) -> Result<RoutingTrace, TraceError> {
        if self.n_experts != other.n_experts
            || self.top_k != other.top_k
            || self.n_layers != other.n_layers
        {
            return Err(TraceError::Shape {
                got: other.n_layers,
                expected: self.n_layers,
            });
        }
        let n_tokens = self.n_tokens + other.n_tokens;
        let mut experts = Vec::with_capacity(self.experts.len() + other.experts.len());
        let mut gates = Vec::with_capacity(experts.capacity());
        for layer in 0..self.n_layers {
            for t in [self, other] {
                let len = t.n_tokens * t.top_k;
                experts.extend_from_slice(&t.experts[layer * len..(layer + 1) * len]);
                gates.extend_from_slice(&t.gates[layer * len..(layer + 1) * len]);
            }
        }
        Ok(RoutingTrace {
            n_experts: self.n_experts,
            top_k: self.top_k,
            n_layers: self.n_layers,
            n_tokens,
            experts,
            gates,
        })
    }

    /// Encodes the trace in the `MZTR` v1 binary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf =
            Vec::with_capacity(HEADER_LEN as usize + self.experts.len() * ENTRY_LEN as usize);
        buf.extend_from_slice(&TRACE_MAGIC);
        buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_experts as u32).to_le_bytes());
        buf.extend_from_slice(&(self.top_k as u16).to_le_bytes());
        buf.extend_from_slice(&(self.n_layers as u16).to_le_bytes());
        buf.extend_from_slice(&(self.n_tokens as u64).to_le_bytes());
        for (e, w) in self.experts.iter().zip(&self.gates) {
            buf.extend_from_slice(&e.to_le_bytes());
            buf.extend_from_slice(&w.to_le_bytes());
        }
        buf
    }

    /// Decodes and validates an `MZTR` v1 buffer.
    pub fn from_bytes(bytes: &[u8]) -> Result<RoutingTrace, TraceError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != TRACE_MAGIC {
            return Err(TraceError::BadMagic { found: magic });
        }
        let version = r.u16()?;
        if version != TRACE_VERSION {
            return Err(TraceError::VersionMismatch {
                found: version,
                expected: TRACE_VERSION,
            });
        }
        let n_experts = r.u32()? as usize;
        let top_k = r.u16()? as usize;
        let n_layers = r.u16()? as usize;
        let n_tokens = r.u64()?;
        if n_layers == 0 {
            return Err(TraceError::NoLayers);
        }
        if top_k == 0 || top_k > n_experts {
            return Err(TraceError::KViolation {
                k: top_k,
                n_experts,
            });
        }
        if n_experts > u16::MAX as usize + 1 {
            return Err(TraceError::TooManyExperts { n_experts });
        }
        let entries = (n_layers as u64)
            .checked_mul(n_tokens)
            .and_then(|v| v.checked_mul(top_k as u64))
            .ok_or(TraceError::Truncated {
                offset: HEADER_LEN,
                needed: u64::MAX,
            })?;
        let body = entries
            .checked_mul(ENTRY_LEN)
            .ok_or(TraceError::Truncated {
                offset: HEADER_LEN,
                needed: u64::MAX,
            })?;
        let available = (bytes.len() as u64).saturating_sub(HEADER_LEN);
        if available < body {
            // Report the first entry that is cut short.
            let whole = available / ENTRY_LEN;
            return Err(TraceError::Truncated {
                offset: HEADER_LEN + whole * ENTRY_LEN,
                needed: ENTRY_LEN,
            });
        }
        if available > body {
            return Err(TraceError::TrailingBytes {
                offset: HEADER_LEN + body,
                extra: available - body,
            });
        }
        let n_tokens = n_tokens as usize;
        let entries = entries as usize;
        let mut experts = Vec::with_capacity(entries);
        let mut gates = Vec::with_capacity(entries);
        for _ in 0..entries {
            experts.push(r.u16()?);
            gates.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let trace = RoutingTrace {
            n_experts,
            top_k,
            n_layers,
            n_tokens,
            experts,
            gates,
        };
        trace.validate()?;
        Ok(trace)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        if self.pos + n > self.bytes.len() {
            return Err(TraceError::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<RoutingTrace, TraceError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RoutingTrace::from_bytes(&bytes)
}

pub fn write_trace(trace: &RoutingTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    let io_err = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&trace.to_bytes()).map_err(io_err)?;
    f.flush().map_err(io_err)
}

/// Knobs of the synthetic routing generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceGenConfig {
    pub seed: u64,
    /// Popularity concentration; 0 gives uniform popularity.
    #[serde(default)]
    pub skew: f64,
    /// Number of latent co-activation communities per layer.
    #[serde(default = "one")]
    pub n_collab_groups: usize,
    /// Probability that each further selection stays inside the token's
    /// current community.
    #[serde(default)]
    pub collab_strength: f64,
    pub n_tokens: usize,
}

fn one() -> usize {
    1
}

impl TraceGenConfig {
    pub fn uniform(seed: u64, n_tokens: usize) -> Self {
        Self {
            seed,
            skew: 0.0,
            n_collab_groups: 1,
            collab_strength: 0.0,
            n_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(TraceError::InvalidConfig(format!(
                "skew must be a finite value >= 0, got {}",
                self.skew
            )));
        }
        if !(0.0..=1.0).contains(&self.collab_strength) {
            return Err(TraceError::InvalidConfig(format!(
                "collab_strength must be in [0, 1], got {}",
                self.collab_strength
            )));
        }
        if self.n_collab_groups == 0 {
            return Err(TraceError::InvalidConfig(
                "n_collab_groups must be >= 1".into(),
            ));
        }
        if self.n_tokens == 0 {
            return Err(TraceError::InvalidConfig("n_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    rng
}

/// Latent structure of one generated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrior {
    /// Unnormalized popularity of every expert.
    pub popularity: Vec<f64>,
    /// Community label of every expert.
    pub community: Vec<usize>,
}

/// Draws the latent popularity and community structure of a layer. The
/// same draw seeds [`generate_trace`], so the labels returned here are the
/// ground truth for the generated selections.
pub fn layer_prior(n_experts: usize, cfg: &TraceGenConfig, layer: usize) -> LayerPrior {
    let mut rng = layer_rng(cfg.seed, layer);
    prior_from_rng(n_experts, cfg, &mut rng)
}

fn prior_from_rng(n_experts: usize, cfg: &TraceGenConfig, rng: &mut ChaCha8Rng) -> LayerPrior {
    let popularity: Vec<f64> = if cfg.skew == 0.0 {
        vec![1.0; n_experts]
    } else {
        let gamma = Gamma::new(1.0 / cfg.skew, 1.0).expect("shape is positive");
        (0..n_experts)
            .map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE))
            .collect()
    };
    // Random equal-size communities over a shuffled expert order.
    let mut order: Vec<usize> = (0..n_experts).collect();
    for i in (1..n_experts).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let groups = cfg.n_collab_groups.min(n_experts);
    let mut community = vec![0; n_experts];
    for (pos, &e) in order.iter().enumerate() {
        community[e] = pos * groups / n_experts;
    }
    LayerPrior {
        popularity,
        community,
    }
}

/// Weighted sampler over experts that supports drawing without replacement.
struct Sampler {
    cumulative: Vec<f64>,
    weights: Vec<f64>,
}

impl Sampler {
    fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self {
            cumulative,
            weights: weights.to_vec(),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, taken: &[u16]) -> usize {
        let total = *self.cumulative.last().unwrap();
        for _ in 0..64 {
            let u = rng.random::<f64>() * total;
            let i = self.cumulative.partition_point(|&c| c <= u);
            let i = i.min(self.cumulative.len() - 1);
            if !taken.contains(&(i as u16)) {
                return i;
            }
        }
        // Heavy skew: fall back to an exact draw over the remaining mass.
        let rest: f64 = (0..self.weights.len())
            .filter(|i| !taken.contains(&(*i as u16)))
            .map(|i| self.weights[i])
            .sum();
        let mut u = rng.random::<f64>() * rest;
        let mut last = None;
        for i in 0..self.weights.len() {
            if taken.contains(&(i as u16)) {
                continue;
            }
            last = Some(i);
            if u < self.weights[i] {
                return i;
            }
            u -= self.weights[i];
        }
        last.expect("k <= n_experts leaves an expert to draw")
    }
}

fn draw_from_members(
    rng: &mut ChaCha8Rng,
    members: &[usize],
    popularity: &[f64],
    taken: &[u16],
) -> Option<usize> {
    let total: f64 = members
        .iter()
        .filter(|&&e| !taken.contains(&(e as u16)))
        .map(|&e| popularity[e])
        .sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for &e in members {
        if taken.contains(&(e as u16)) {
            continue;
        }
        last = Some(e);
        if u < popularity[e] {
            return Some(e);
        }
        u -= popularity[e];
    }
    last
}

/// Synthesizes a routing trace for `model`.
///
/// Each layer draws an expert popularity vector (Gamma(1/skew) weights, so
/// skew 0 is uniform) and a random partition of experts into latent
/// communities. A token's first expert is drawn by popularity; every further
/// slot stays inside the current community with probability
/// `collab_strength`, otherwise it is drawn by popularity from all remaining
/// experts and that expert's community becomes current once the old one is
/// exhausted.
pub fn generate_trace(model: &ModelSpec, cfg: &TraceGenConfig) -> Result<RoutingTrace, TraceError> {
    cfg.validate()?;
    let n_experts = model.n_routed_experts;
    let k = model.top_k;
    if k == 0 || k > n_experts {
        return Err(TraceError::KViolation { k, n_experts });
    }
    if model.n_layers == 0 {
        return Err(TraceError::NoLayers);
    }
    if n_experts > u16::MAX as usize + 1 {
        return Err(TraceError::TooManyExperts { n_experts });
    }
    let n_tokens = cfg.n_tokens;
    let per_layer = n_tokens * k;
    let mut experts = vec![0u16; model.n_layers * per_layer];
    let mut gates = vec![0f32; model.n_layers * per_layer];

    experts
        .chunks_mut(per_layer)
        .zip(gates.chunks_mut(per_layer))
        .enumerate()
        .for_each(|(layer, (exp, gat))| {
            let mut rng = layer_rng(cfg.seed, layer);
            let prior = prior_from_rng(n_experts, cfg, &mut rng);
            let groups = cfg.n_collab_groups.min(n_experts);
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
            for (e, &c) in prior.community.iter().enumerate() {
                members[c].push(e);
            }
            let sampler = Sampler::new(&prior.popularity);
            let mut raw = vec![0f64; k];
            for (sel, gate) in exp.chunks_mut(k).zip(gat.chunks_mut(k)) {
                let first = sampler.draw(&mut rng, &[]);
                sel[0] = first as u16;
                let mut current = prior.community[first];
                for slot in 1..k {
                    let taken = &sel[..slot];
                    let stay =
                        cfg.collab_strength > 0.0 && rng.random::<f64>() < cfg.collab_strength;
                    let pick = if stay {
                        draw_from_members(&mut rng, &members[current], &prior.popularity, taken)
                    } else {
                        None
                    };
                    let pick = match pick {
                        Some(e) => e,
                        None => {
                            let e = sampler.draw(&mut rng, taken);
                            let exhausted = members[current]
                                .iter()
                                .all(|&m| taken.contains(&(m as u16)));
                            if exhausted {
                                current = prior.community[e];
                            }
                            e
                        }
                    };
                    sel[slot] = pick as u16;
                }
                let mut sum = 0.0;
                for r in raw.iter_mut() {
                    *r = rng.random_range(0.05..1.0);
                    sum += *r;
                }
                let mut acc = 0.0f64;
                for slot in 0..k - 1 {
                    let w = (raw[slot] / sum) as f32;
                    gate[slot] = w;
                    acc += w as f64;
                }
                gate[k - 1] = ((1.0 - acc).max(0.0)) as f32;
            }
        });

    Ok(RoutingTrace {
        n_experts,
        top_k: k,
        n_layers: model.n_layers,
        n_tokens,
        experts,
        gates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(n_experts: usize, k: usize, layers: usize) -> ModelSpec {
        ModelSpec {
            name: "test".into(),
            n_layers: layers,
            n_routed_experts: n_experts,
            n_shared_experts: 0,
            top_k: k,
            hidden_size: 64,
            expert_ffn_dim: 32,
            shared_expert_ffn_dim: 0,
            n_heads: 4,
            n_kv_heads: 4,
            head_dim: 16,
            total_params: 0,
            activated_params: 0,
        }
    }

    #[test]
    fn uniform_frequencies() {
        let m = small_model(4, 1, 1);
        let t = generate_trace(&m, &TraceGenConfig::uniform(7, 100_000)).unwrap();
        let mut counts = [0usize; 4];
        for &e in t.layer_selections(0) {
            counts[e as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 100_000.0;
            assert!((f - 0.25).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn exactly_k_distinct_and_normalized() {
        let m = small_model(64, 8, 2);
        let cfg = TraceGenConfig {
            seed: 3,
            skew: 1.5,
            n_collab_groups: 8,
            collab_strength: 0.6,
            n_tokens: 2000,
        };
        let t = generate_trace(&m, &cfg).unwrap();
        for layer in 0..2 {
            for tok in 0..2000 {
                let sel = t.selection(layer, tok);
                assert_eq!(sel.len(), 8);
                let mut s = sel.to_vec();
                s.sort_unstable();
                s.dedup();
                assert_eq!(s.len(), 8);
                let sum: f64 = t.gates(layer, tok).iter().map(|&w| w as f64).sum();
                assert!((sum - 1.0).abs() <= WEIGHT_SUM_TOL);
            }
        }
        // from_parts re-validates everything.
        RoutingTrace::from_parts(64, 8, 2, 2000, t.experts.clone(), t.gates.clone()).unwrap();
    }

    #[test]
    fn full_collaboration_stays_in_community() {
        let m = small_model(8, 2, 3);
        let cfg = TraceGenConfig {
            seed: 11,
            skew: 0.0,
            n_collab_groups: 2,
            collab_strength: 1.0,
            n_tokens: 5000,
        };
        let t = generate_trace(&m, &cfg).unwrap();
        for layer in 0..3 {
            // Independent tally against the ground-truth labels.
            let labels = layer_prior(8, &cfg, layer).community;
            let mut cross = 0usize;
            for tok in 0..5000 {
                let s = t.selection(layer, tok);
                if labels[s[0] as usize] != labels[s[1] as usize] {
                    cross += 1;
                }
            }
            assert_eq!(cross, 0);
        }
    }

    #[test]
    fn deterministic() {
        let m = small_model(16, 4, 2);
        let cfg = TraceGenConfig {
            seed: 99,
            skew: 2.0,
            n_collab_groups: 4,
            collab_strength: 0.5,
            n_tokens: 300,
        };
        assert_eq!(
            generate_trace(&m, &cfg).unwrap(),
            generate_trace(&m, &cfg).unwrap()
        );
        let other = TraceGenConfig {
            seed: 100,
            ..cfg.clone()
        };
        assert_ne!(
            generate_trace(&m, &cfg).unwrap(),
            generate_trace(&m, &other).unwrap()
        );
    }

    #[test]
    fn skew_increases_max_frequency() {
        let m = small_model(8, 1, 1);
        let mean_max = |skew: f64| {
            (0..10)
                .map(|seed| {
                    let cfg = TraceGenConfig {
                        seed,
                        skew,
                        n_collab_groups: 1,
                        collab_strength: 0.0,
                        n_tokens: 4000,
                    };
                    let t = generate_trace(&m, &cfg).unwrap();
                    let mut c = [0usize; 8];
                    for &e in t.layer_selections(0) {
                        c[e as usize] += 1;
                    }
                    *c.iter().max().unwrap() as f64 / 4000.0
                })
                .sum::<f64>()
                / 10.0
        };
        let (a, b, c) = (mean_max(0.0), mean_max(1.0), mean_max(4.0));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn rejects_bad_configs() {
        let m = small_model(4, 2, 1);
        assert!(generate_trace(&m, &TraceGenConfig::uniform(0, 0)).is_err());
        let bad_k = small_model(4, 5, 1);
        assert!(matches!(
            generate_trace(&bad_k, &TraceGenConfig::uniform(0, 10)),
            Err(TraceError::KViolation { .. })
        ));
        let neg = TraceGenConfig {
            skew: -1.0,
            ..TraceGenConfig::uniform(0, 10)
        };
        assert!(generate_trace(&m, &neg).is_err());
        let strength = TraceGenConfig {
            collab_strength: 1.5,
            ..TraceGenConfig::uniform(0, 10)
        };
        assert!(generate_trace(&m, &strength).is_err());
    }

    fn tiny_trace() -> RoutingTrace {
        let m = small_model(6, 3, 2);
        generate_trace(&m, &TraceGenConfig::uniform(5, 10)).unwrap()
    }

    #[test]
    fn byte_round_trip() {
        let t = tiny_trace();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len() as u64, HEADER_LEN + 2 * 10 * 3 * ENTRY_LEN);
        let back = RoutingTrace::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mztr");
        let t = tiny_trace();
        write_trace(&t, &p).unwrap();
        let back = read_trace(&p).unwrap();
        let p2 = dir.path().join("t2.mztr");
        write_trace(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn duplicate_expert_rejected() {
        let t = tiny_trace();
        let mut bytes = t.to_bytes();
        // layer 1, token 4: copy slot 0's expert into slot 1.
        let base = entry_offset(3, 10, 1, 4, 0) as usize;
        let e0 = [bytes[base], bytes[base + 1]];
        bytes[base + 6] = e0[0];
        bytes[base + 7] = e0[1];
        match RoutingTrace::from_bytes(&bytes) {
            Err(TraceError::DuplicateExpert {
                layer,
                token,
                offset,
                ..
            }) => {
                assert_eq!((layer, token), (1, 4));
                assert_eq!(offset, base as u64 + 6);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weight_sum_rejected() {
        let t = tiny_trace();
        let mut bytes = t.to_bytes();
        let base = entry_offset(3, 10, 0, 2, 0) as usize;
        for (slot, w) in [0.4f32, 0.2, 0.2].iter().enumerate() {
            let off = base + slot * 6 + 2;
            bytes[off..off + 4].copy_from_slice(&w.to_le_bytes());
        }
        match RoutingTrace::from_bytes(&bytes) {
            Err(TraceError::WeightNormalization {
                layer, token, sum, ..
            }) => {
                assert_eq!((layer, token), (0, 2));
                assert!((sum - 0.8).abs() < 1e-6);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let t = tiny_trace();
        let mut bytes = t.to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            RoutingTrace::from_bytes(&bytes),
            Err(TraceError::VersionMismatch { found: 2, .. })
        ));

        let mut bytes = t.to_bytes();
        bytes[10..12].copy_from_slice(&7u16.to_le_bytes());
        assert!(matches!(
            RoutingTrace::from_bytes(&bytes),
            Err(TraceError::KViolation { k: 7, n_experts: 6 })
        ));

        let mut bytes = t.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            RoutingTrace::from_bytes(&bytes),
            Err(TraceError::BadMagic { .. })
        ));

        let bytes = t.to_bytes();
        assert!(matches!(
            RoutingTrace::from_bytes(&bytes[..bytes.len() - 3]),
            Err(TraceError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            RoutingTrace::from_bytes(&long),
            Err(TraceError::TrailingBytes { extra: 1, .. })
        ));
    }

    #[test]
    fn out_of_range_expert_rejected() {
        let t = tiny_trace();
        let mut bytes = t.to_bytes();
        let base = entry_offset(3, 10, 0, 0, 2) as usize;
        bytes[base..base + 2].copy_from_slice(&6u16.to_le_bytes());
        assert!(matches!(
            RoutingTrace::from_bytes(&bytes),
            Err(TraceError::ExpertOutOfRange {
                expert: 6,
                layer: 0,
                token: 0,
                ..
            })
        ));
    }

    #[test]
    fn zero_token_trace_is_representable() {
        let t = RoutingTrace::from_parts(4, 2, 1, 0, vec![], vec![]).unwrap();
        assert_eq!(RoutingTrace::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn concat_appends_tokens_per_layer() {
        let m = small_model(6, 2, 2);
        let a = generate_trace(&m, &TraceGenConfig::uniform(1, 5)).unwrap();
        let b = generate_trace(&m, &TraceGenConfig::uniform(2, 7)).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.n_tokens(), 12);
        assert_eq!(c.selection(1, 0), a.selection(1, 0));
        assert_eq!(c.selection(1, 5), b.selection(1, 0));
    }
}
