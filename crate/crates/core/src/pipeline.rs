//! Multi-block forward pass with a pooling layer after every block.
//!
//! After block `l` the token set is reduced to `K_l` pooled tokens plus the
//! classification token whenever `K_l + 1` is smaller than the current count.
//! `K_l = 0` keeps the classification token alone. Weighted methods and
//! importance selection use the significance scores of the block's own
//! attention maps.

use serde::Serialize;

use crate::costmodel::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::pooling::{token_pool, InitPolicy, PoolMethod, PoolSpec, DEFAULT_MAX_ITERS};
use crate::scoring::significance;
use crate::transformer::{block_forward_traced, AttentionMode, BlockOptions, BlockWeights, HeadOutput, TokenSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: AttentionMode,
    pub block: BlockOptions,
    pub method: PoolMethod,
    pub init: InitPolicy,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: AttentionMode::Standard,
            block: BlockOptions::default(),
            method: PoolMethod::Kmedoids,
            init: InitPolicy::TopkWeight,
            max_iters: DEFAULT_MAX_ITERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    /// Scheduled `K_l`, if any.
    pub target: Option<usize>,
    /// Reconstruction loss of the pooling step, when one ran.
    pub loss: Option<f64>,
    pub iterations: usize,
    /// Largest amount by which a head output leaves the min/max range of its
    /// value column, relative to `1 + max |v|`.
    pub hull_excess: f64,
    pub finite: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub tokens: TokenSet,
    pub trace: Vec<LayerTrace>,
}

fn hull_excess(heads: &[HeadOutput]) -> f64 {
    let mut worst: f64 = 0.0;
    for h in heads {
        let (n, d) = h.values.shape();
        for c in 0..d {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut scale: f64 = 0.0;
            for r in 0..n {
                let v = h.values.get(r, c);
                lo = lo.min(v);
                hi = hi.max(v);
                scale = scale.max(v.abs());
            }
            for r in 0..h.output.rows() {
                let o = h.output.get(r, c);
                let excess = (lo - o).max(o - hi).max(0.0);
                worst = worst.max(excess / (1.0 + scale));
            }
        }
    }
    worst
}

pub fn run_forward(
    config: &ModelConfig,
    weights: &[BlockWeights],
    input: TokenSet,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    config.validate()?;
    if weights.len() != config.layers {
        return Err(Error::usage(format!(
            "{} weight blocks for {} layers",
            weights.len(),
            config.layers
        )));
    }
    if opts.method == PoolMethod::Grid {
        return Err(Error::usage(
            "grid pooling follows the patch grid and cannot follow a schedule",
        ));
    }
    if input.dim() != config.dim {
        return Err(Error::usage(format!(
            "input tokens have dimension {}, config expects {}",
            input.dim(),
            config.dim
        )));
    }
    let carry = opts.mode == AttentionMode::Carry;
    let mut tokens = input;
    if carry && tokens.counts.is_none() {
        tokens.counts = Some(vec![1.0; tokens.len()]);
    }
    let mut seeds = Rng::new(opts.seed);
    let mut trace = Vec::with_capacity(config.layers);

    for (l, w) in weights.iter().enumerate() {
        let layer_seed = seeds.next_u64();
        let tokens_in = tokens.len();
        let out = block_forward_traced(&tokens, w, opts.mode, opts.block)?;
        let hull = hull_excess(&out.heads);
        let mut next = out.tokens.clone();
        let target = config.schedule.as_ref().map(|s| s[l]);
        let mut loss = None;
        let mut iterations = 0;

        if let Some(k) = target.filter(|k| k + 1 < tokens_in) {
            if k == 0 {
                next = TokenSet {
                    features: next.features.select_rows(&[0]),
                    weights: None,
                    counts: next.counts.map(|c| vec![c[0]]),
                    grid: None,
                };
            } else {
                if opts.method.needs_weights() {
                    let scores = significance(&out.attention_maps())?;
                    next = next.with_weights(scores.values)?;
                }
                let spec = PoolSpec {
                    method: opts.method,
                    k,
                    max_iters: opts.max_iters,
                    init: opts.init,
                    seed: layer_seed,
                    protect_first: true,
                    emit_counts: carry,
                };
                let (pooled, result) = token_pool(&next, &spec)?;
                loss = Some(result.loss);
                iterations = result.iterations;
                next = pooled;
            }
        }
        next.weights = None;
        let finite = next.features.is_finite();
        trace.push(LayerTrace {
            layer: l + 1,
            tokens_in,
            tokens_out: next.len(),
            target,
            loss,
            iterations,
            hull_excess: hull,
            finite,
        });
        if !finite {
            return Err(Error::data(format!("layer {} produced non-finite tokens", l + 1)));
        }
        tokens = next;
    }
    Ok(ForwardOutput { tokens, trace })
}
