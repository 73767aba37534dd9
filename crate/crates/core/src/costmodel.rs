//! Analytic flop accounting for ViT/DeiT style models.
//!
//! One flop is one multiply-accumulate. For a block processing `n` tokens of
//! width `M` with MLP ratio `r`:
//!
//! | category  | flops        |
//! |-----------|--------------|
//! | attention | `2 n^2 M`    |
//! | qkv       | `3 n M^2`    |
//! | oproj     | `n M^2`      |
//! | mlp       | `2 r n M^2`  |
//!
//! Softmax exponentials, layer norms and residual additions are not counted.
//!
//! With a pooling schedule `K`, block `l` runs on `n_l` tokens where
//! `n_1 = N` and `n_{l+1} = min(n_l, K_l + 1)` (the classification token is
//! always kept). Pooling after block `l` costs, when `K_l + 1 < n_l`:
//!
//! * K-Means: `T K_l n_l M` (assignment distances only),
//! * K-Medoids: `n_l^2 M + T K_l n_l` (one full distance matrix, then
//!   assignments over cached distances).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::AttentionMode;

pub const DEFAULT_MLP_RATIO: usize = 4;

/// Transformer architecture and optional pooling schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Input token count, classification token included.
    pub tokens: usize,
    /// Tokens kept after each block, classification token excluded.
    pub schedule: Option<Vec<usize>>,
    pub alpha: Option<f64>,
    pub mode: Option<AttentionMode>,
}

impl ModelConfig {
    pub fn new(layers: usize, dim: usize, heads: usize, tokens: usize) -> Self {
        ModelConfig {
            layers,
            dim,
            heads,
            mlp_ratio: DEFAULT_MLP_RATIO,
            tokens,
            schedule: None,
            alpha: None,
            mode: None,
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<usize>) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::usage("layers must be positive"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::usage(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::usage("mlp_ratio must be positive"));
        }
        if self.tokens == 0 {
            return Err(Error::usage("tokens must be positive"));
        }
        if let Some(s) = &self.schedule {
            if s.len() != self.layers {
                return Err(Error::usage(format!(
                    "schedule has {} entries for {} layers",
                    s.len(),
                    self.layers
                )));
            }
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::usage(format!("alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }

    /// Tokens processed by each block.
    pub fn tokens_per_layer(&self) -> Vec<usize> {
        let mut n = self.tokens;
        let mut out = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            out.push(n);
            if let Some(s) = &self.schedule {
                n = n.min(s[l] + 1);
            }
        }
        out
    }

    /// Scales a schedule written for `from_patches` patch tokens to this
    /// config's patch count (`tokens - 1`), rounding half away from zero.
    pub fn rescale_schedule(&self, schedule: &[usize], from_patches: usize) -> Vec<usize> {
        let to = (self.tokens - 1) as f64;
        schedule
            .iter()
            .map(|&k| ((k as f64) * to / from_patches as f64).round() as usize)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringCost {
    Kmeans,
    Kmedoids,
}

impl std::str::FromStr for ClusteringCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" | "wkmeans" => Ok(ClusteringCost::Kmeans),
            "kmedoids" | "wkmedoids" => Ok(ClusteringCost::Kmedoids),
            other => Err(Error::usage(format!("unknown clustering method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusteringOverhead {
    pub method: ClusteringCost,
    pub max_iters: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerFlops {
    pub attention: u64,
    pub qkv: u64,
    pub oproj: u64,
    pub mlp: u64,
    pub clustering: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.qkv + self.oproj + self.mlp + self.clustering
    }

    /// Everything except clustering.
    pub fn base(&self) -> u64 {
        self.attention + self.qkv + self.oproj + self.mlp
    }

    fn accumulate(&mut self, o: &LayerFlops) {
        self.attention += o.attention;
        self.qkv += o.qkv;
        self.oproj += o.oproj;
        self.mlp += o.mlp;
        self.clustering += o.clustering;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub tokens: usize,
    #[serde(flatten)]
    pub flops: LayerFlops,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub per_layer: Vec<LayerReport>,
    pub totals: LayerFlops,
    pub grand_total: u64,
}

impl FlopReport {
    pub fn from_layers(per_layer: Vec<LayerReport>) -> Self {
        let mut totals = LayerFlops::default();
        for l in &per_layer {
            totals.accumulate(&l.flops);
        }
        FlopReport {
            grand_total: totals.total(),
            totals,
            per_layer,
        }
    }
}

pub fn block_flops(n_tokens: u64, config: &ModelConfig) -> LayerFlops {
    let n = n_tokens;
    let m = config.dim as u64;
    let r = config.mlp_ratio as u64;
    LayerFlops {
        attention: 2 * n * n * m,
        qkv: 3 * n * m * m,
        oproj: n * m * m,
        mlp: 2 * r * n * m * m,
        clustering: 0,
    }
}

/// Cost of pooling `n` tokens down to `k + 1`.
pub fn clustering_flops(n: u64, k: u64, m: u64, overhead: ClusteringOverhead) -> u64 {
    if k + 1 >= n {
        return 0;
    }
    let t = overhead.max_iters;
    match overhead.method {
        ClusteringCost::Kmeans => t * k * n * m,
        ClusteringCost::Kmedoids => n * n * m + t * k * n,
    }
}

pub fn model_flops(config: &ModelConfig, clustering: Option<ClusteringOverhead>) -> Result<FlopReport> {
    config.validate()?;
    let tokens = config.tokens_per_layer();
    let per_layer = tokens
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            let mut flops = block_flops(n as u64, config);
            if let (Some(c), Some(s)) = (clustering, &config.schedule) {
                flops.clustering = clustering_flops(n as u64, s[l] as u64, config.dim as u64, c);
            }
            LayerReport {
                layer: l + 1,
                tokens: n,
                flops,
            }
        })
        .collect();
    Ok(FlopReport::from_layers(per_layer))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fractions {
    pub attention: f64,
    pub qkv: f64,
    pub oproj: f64,
    pub mlp: f64,
    pub clustering: f64,
}

impl Fractions {
    /// QKV, output projection and MLP together.
    pub fn fully_connected(&self) -> f64 {
        self.qkv + self.oproj + self.mlp
    }
}

pub fn breakdown_fractions(report: &FlopReport) -> Result<Fractions> {
    let t = report.grand_total;
    if t == 0 {
        return Err(Error::data("flop report total is zero"));
    }
    let t = t as f64;
    let c = &report.totals;
    Ok(Fractions {
        attention: c.attention as f64 / t,
        qkv: c.qkv as f64 / t,
        oproj: c.oproj as f64 / t,
        mlp: c.mlp as f64 / t,
        clustering: c.clustering as f64 / t,
    })
}
