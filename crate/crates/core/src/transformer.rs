//! Forward-only transformer block.
//!
//! A block maps `N` tokens to `N` tokens:
//!
//! ```text
//! x' = x  + MSA(LN1(x))
//! y  = x' + MLP(LN2(x'))
//! ```
//!
//! With [`BlockOptions::residual_and_norm`] disabled the block is the bare
//! composition `MLP(MSA(x))`.
//!
//! Multi-head attention splits the `M` feature columns into `H` heads of width
//! `d = M / H`. Head `h` computes `A_h = softmax(Q_h K_h^T / sqrt(d))` and
//! `O_h = A_h V_h`; the heads are concatenated and projected by `W^O`.

use serde::{Deserialize, Serialize};

use crate::costmodel::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, softmax_in_place, Matrix, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// A set of `N` tokens with optional per-token metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub features: Matrix,
    /// Positive per-token weights used by weighted clustering.
    pub weights: Option<Vec<f64>>,
    /// Positive multiplicities carried into later attention layers.
    pub counts: Option<Vec<f64>>,
    /// Patch grid `(h, w)`; `h * w` is the number of non-classification tokens.
    pub grid: Option<(usize, usize)>,
}

impl TokenSet {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::data("token set must contain at least one token"));
        }
        features.check_finite()?;
        Ok(TokenSet {
            features,
            weights: None,
            counts: None,
            grid: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_positive("weights", &weights, self.len())?;
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn with_counts(mut self, counts: Vec<f64>) -> Result<Self> {
        check_positive("counts", &counts, self.len())?;
        self.counts = Some(counts);
        Ok(self)
    }

    /// Attaches a patch grid. Either every token is a patch (`h * w == N`) or
    /// row 0 is the classification token (`h * w == N - 1`).
    pub fn with_grid(mut self, h: usize, w: usize) -> Result<Self> {
        let n = self.len();
        if h * w != n && h * w + 1 != n {
            return Err(Error::data(format!(
                "grid {h}x{w} does not fit {n} tokens"
            )));
        }
        self.grid = Some((h, w));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

fn check_positive(name: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::data(format!(
            "{name}: expected {n} entries, got {}",
            v.len()
        )));
    }
    if let Some(i) = v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::data(format!(
            "{name}[{i}] = {} is not a positive finite number",
            v[i]
        )));
    }
    Ok(())
}

/// How attention logits and weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `softmax(q . k / sqrt(d))`.
    #[default]
    Standard,
    /// Queries and keys scaled to unit length, logits `alpha * (q . k)`.
    NormalizedAlpha,
    /// Standard logits; the exponential for key `i` is multiplied by the
    /// token's carry count `c_i` in both numerator and denominator.
    Carry,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionMode::Standard),
            "normalized_alpha" => Ok(AttentionMode::NormalizedAlpha),
            "carry" => Ok(AttentionMode::Carry),
            other => Err(Error::usage(format!("unknown attention mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        let m = x.cols() as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.scale).zip(&self.shift) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

/// Parameters of one transformer block. Biases are not modelled.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// Per-head query projections, each `M x d`.
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// Output projection `M x M`.
    pub wo: Matrix,
    /// `M x rM`.
    pub mlp1: Matrix,
    /// `rM x M`.
    pub mlp2: Matrix,
    /// Logit scale for [`AttentionMode::NormalizedAlpha`].
    pub alpha: Option<f64>,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl BlockWeights {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn dim(&self) -> usize {
        self.wo.rows()
    }

    /// Builds per-head projections by splitting full `M x M` matrices into
    /// `heads` column blocks.
    pub fn from_full(
        heads: usize,
        wq: &Matrix,
        wk: &Matrix,
        wv: &Matrix,
        wo: Matrix,
        mlp1: Matrix,
        mlp2: Matrix,
        alpha: Option<f64>,
    ) -> Result<Self> {
        let m = wo.rows();
        if heads == 0 || m % heads != 0 {
            return Err(Error::usage(format!(
                "dimension {m} is not divisible by {heads} heads"
            )));
        }
        let d = m / heads;
        let split = |w: &Matrix| -> Vec<Matrix> {
            (0..heads).map(|h| w.col_slice(h * d, (h + 1) * d)).collect()
        };
        for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv)] {
            if w.shape() != (m, m) {
                return Err(Error::data(format!(
                    "{name} has shape {:?}, expected ({m}, {m})",
                    w.shape()
                )));
            }
        }
        let bw = BlockWeights {
            wq: split(wq),
            wk: split(wk),
            wv: split(wv),
            wo,
            mlp1,
            mlp2,
            alpha,
            ln1: LayerNorm::identity(m),
            ln2: LayerNorm::identity(m),
        };
        bw.validate()?;
        Ok(bw)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.heads();
        let m = self.dim();
        if h == 0 || m % h != 0 {
            return Err(Error::usage(format!(
                "dimension {m} is not divisible by {h} heads"
            )));
        }
        let d = m / h;
        if self.wk.len() != h || self.wv.len() != h {
            return Err(Error::usage("query/key/value head counts differ"));
        }
        for w in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            if w.shape() != (m, d) {
                return Err(Error::usage(format!(
                    "head projection has shape {:?}, expected ({m}, {d})",
                    w.shape()
                )));
            }
        }
        if self.wo.shape() != (m, m) {
            return Err(Error::usage("output projection must be M x M"));
        }
        let hidden = self.mlp1.cols();
        if self.mlp1.rows() != m || self.mlp2.shape() != (hidden, m) {
            return Err(Error::usage(format!(
                "MLP shapes {:?} / {:?} do not match dimension {m}",
                self.mlp1.shape(),
                self.mlp2.shape()
            )));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::usage(format!("alpha must be positive, got {a}")));
            }
        }
        for ln in [&self.ln1, &self.ln2] {
            if ln.scale.len() != m || ln.shift.len() != m {
                return Err(Error::usage("layer norm parameters must have length M"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    /// Pre-norm layer norms and residual connections.
    pub residual_and_norm: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            residual_and_norm: true,
        }
    }
}

/// The `H` row-stochastic `N x N` attention matrices of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub maps: Vec<Matrix>,
}

impl AttentionMaps {
    pub fn new(maps: Vec<Matrix>) -> Result<Self> {
        let n = maps.first().map(|m| m.rows()).unwrap_or(0);
        if maps.is_empty() || n == 0 {
            return Err(Error::data("attention maps must be non-empty"));
        }
        for (h, m) in maps.iter().enumerate() {
            if m.shape() != (n, n) {
                return Err(Error::data(format!(
                    "head {h} map has shape {:?}, expected ({n}, {n})",
                    m.shape()
                )));
            }
            m.check_finite()?;
        }
        Ok(AttentionMaps { maps })
    }

    /// Splits an `(H*N) x N` stack into `heads` maps.
    pub fn from_stacked(stacked: &Matrix, heads: usize) -> Result<Self> {
        let n = stacked.cols();
        if heads == 0 || stacked.rows() != heads * n {
            return Err(Error::data(format!(
                "attention stack {:?} is not ({heads} * N) x N",
                stacked.shape()
            )));
        }
        let maps = (0..heads)
            .map(|h| stacked.select_rows(&(h * n..(h + 1) * n).collect::<Vec<_>>()))
            .collect();
        AttentionMaps::new(maps)
    }

    pub fn to_stacked(&self) -> Matrix {
        Matrix::vstack(&self.maps).expect("maps share a shape")
    }

    pub fn heads(&self) -> usize {
        self.maps.len()
    }

    pub fn tokens(&self) -> usize {
        self.maps[0].rows()
    }
}

/// Per-head intermediate values of one attention layer.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub attention: Matrix,
    pub values: Matrix,
    pub output: Matrix,
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Runs every attention head on `features` (already normalized if the block
/// uses layer norm).
fn heads_on(
    features: &Matrix,
    counts: Option<&[f64]>,
    w: &BlockWeights,
    mode: AttentionMode,
) -> Result<Vec<HeadOutput>> {
    w.validate()?;
    if features.cols() != w.dim() {
        return Err(Error::usage(format!(
            "tokens have dimension {}, block expects {}",
            features.cols(),
            w.dim()
        )));
    }
    let d = w.dim() / w.heads();
    let (scale, multipliers) = match mode {
        AttentionMode::Standard => (1.0 / (d as f64).sqrt(), None),
        AttentionMode::NormalizedAlpha => {
            let a = w.alpha.ok_or_else(|| {
                Error::usage("normalized_alpha attention requires alpha")
            })?;
            (a, None)
        }
        AttentionMode::Carry => {
            let c = counts
                .ok_or_else(|| Error::usage("carry attention requires token counts"))?;
            if c.len() != features.rows() {
                return Err(Error::usage("carry counts do not match token count"));
            }
            (1.0 / (d as f64).sqrt(), Some(c))
        }
    };

    let n = features.rows();
    let mut out = Vec::with_capacity(w.heads());
    for h in 0..w.heads() {
        let mut q = matmul(features, &w.wq[h])?;
        let mut k = matmul(features, &w.wk[h])?;
        let v = matmul(features, &w.wv[h])?;
        if mode == AttentionMode::NormalizedAlpha {
            normalize_rows(&mut q);
            normalize_rows(&mut k);
        }
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            let row = a.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * dot(q.row(i), k.row(j));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!("non-finite attention logit in row {i}")));
            }
            softmax_in_place(row, multipliers);
        }
        let o = matmul(&a, &v)?;
        out.push(HeadOutput {
            attention: a,
            values: v,
            output: o,
        });
    }
    Ok(out)
}

/// Per-head attention, values and outputs for the raw token features.
pub fn msa_heads(tokens: &TokenSet, w: &BlockWeights, mode: AttentionMode) -> Result<Vec<HeadOutput>> {
    heads_on(&tokens.features, tokens.counts.as_deref(), w, mode)
}

fn project_heads(heads: &[HeadOutput], w: &BlockWeights) -> Result<Matrix> {
    let concat = Matrix::hstack(&heads.iter().map(|h| h.output.clone()).collect::<Vec<_>>())?;
    matmul(&concat, &w.wo)
}

/// `[O_1, ..., O_H] W^O`, evaluated on the raw token features.
pub fn msa_forward(tokens: &TokenSet, w: &BlockWeights, mode: AttentionMode) -> Result<TokenSet> {
    let heads = msa_heads(tokens, w, mode)?;
    let features = project_heads(&heads, w)?;
    Ok(TokenSet {
        features,
        ..tokens.clone()
    })
}

/// The attention matrices [`msa_forward`] uses.
pub fn attention_maps(tokens: &TokenSet, w: &BlockWeights, mode: AttentionMode) -> Result<AttentionMaps> {
    let heads = msa_heads(tokens, w, mode)?;
    Ok(AttentionMaps {
        maps: heads.into_iter().map(|h| h.attention).collect(),
    })
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Two-layer perceptron `gelu(x W1) W2`.
pub fn mlp_forward(x: &Matrix, w: &BlockWeights) -> Result<Matrix> {
    let hidden = matmul(x, &w.mlp1)?.map(gelu);
    matmul(&hidden, &w.mlp2)
}

/// Output of [`block_forward_traced`].
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub tokens: TokenSet,
    pub heads: Vec<HeadOutput>,
}

impl BlockTrace {
    pub fn attention_maps(&self) -> AttentionMaps {
        AttentionMaps {
            maps: self.heads.iter().map(|h| h.attention.clone()).collect(),
        }
    }
}

/// Like [`block_forward`] but also returns the per-head attention internals.
pub fn block_forward_traced(
    tokens: &TokenSet,
    w: &BlockWeights,
    mode: AttentionMode,
    opts: BlockOptions,
) -> Result<BlockTrace> {
    let x = &tokens.features;
    let counts = tokens.counts.as_deref();
    let features;
    let heads;
    if opts.residual_and_norm {
        heads = heads_on(&w.ln1.apply(x), counts, w, mode)?;
        let x1 = x.add(&project_heads(&heads, w)?)?;
        let m = mlp_forward(&w.ln2.apply(&x1), w)?;
        features = x1.add(&m)?;
    } else {
        heads = heads_on(x, counts, w, mode)?;
        features = mlp_forward(&project_heads(&heads, w)?, w)?;
    }
    if !features.is_finite() {
        return Err(Error::data("block produced non-finite features"));
    }
    Ok(BlockTrace {
        tokens: TokenSet {
            features,
            ..tokens.clone()
        },
        heads,
    })
}

/// One transformer block; the token count is unchanged.
pub fn block_forward(
    tokens: &TokenSet,
    w: &BlockWeights,
    mode: AttentionMode,
    opts: BlockOptions,
) -> Result<TokenSet> {
    block_forward_traced(tokens, w, mode, opts).map(|t| t.tokens)
}

/// Gaussian weights with standard deviation `1 / sqrt(M)`, drawn layer by
/// layer in the order wq, wk, wv (head by head), wo, mlp1, mlp2.
///
/// `alpha` is taken from the config, defaulting to 1.
pub fn synth_weights(config: &ModelConfig, seed: u64) -> Result<Vec<BlockWeights>> {
    config.validate()?;
    let m = config.dim;
    let h = config.heads;
    let d = m / h;
    let hidden = config.mlp_ratio * m;
    let std = 1.0 / (m as f64).sqrt();
    let mut rng = Rng::new(seed);
    let mut draw = |r: usize, c: usize| -> Matrix {
        let data = (0..r * c).map(|_| std * rng.normal()).collect();
        Matrix::new(r, c, data).expect("shape matches")
    };
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let wq = (0..h).map(|_| draw(m, d)).collect();
        let wk = (0..h).map(|_| draw(m, d)).collect();
        let wv = (0..h).map(|_| draw(m, d)).collect();
        layers.push(BlockWeights {
            wq,
            wk,
            wv,
            wo: draw(m, m),
            mlp1: draw(m, hidden),
            mlp2: draw(hidden, m),
            alpha: Some(config.alpha.unwrap_or(1.0)),
            ln1: LayerNorm::identity(m),
            ln2: LayerNorm::identity(m),
        });
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, dim: usize, heads: usize) -> ModelConfig {
        ModelConfig::new(layers, dim, heads, 8)
    }

    fn random_tokens(rng: &mut Rng, n: usize, m: usize) -> TokenSet {
        let data = (0..n * m).map(|_| rng.normal()).collect();
        TokenSet::new(Matrix::new(n, m, data).unwrap()).unwrap()
    }

    fn block(seed: u64) -> BlockWeights {
        synth_weights(&cfg(1, 8, 2), seed).unwrap().remove(0)
    }

    /// Literal evaluation of the multi-head attention equations, written
    /// with explicit index loops and an unshifted softmax.
    fn literal_msa(f: &Matrix, w: &BlockWeights) -> Matrix {
        let n = f.rows();
        let m = f.cols();
        let h_count = w.heads();
        let d = m / h_count;
        let mut concat = vec![vec![0.0; m]; n];
        for h in 0..h_count {
            let proj = |wm: &Matrix| {
                let mut out = vec![vec![0.0; d]; n];
                for i in 0..n {
                    for c in 0..d {
                        for k in 0..m {
                            out[i][c] += f.get(i, k) * wm.get(k, c);
                        }
                    }
                }
                out
            };
            let (q, k, v) = (proj(&w.wq[h]), proj(&w.wk[h]), proj(&w.wv[h]));
            for i in 0..n {
                let e: Vec<f64> = (0..n)
                    .map(|j| {
                        let s: f64 = (0..d).map(|c| q[i][c] * k[j][c]).sum();
                        (s / (d as f64).sqrt()).exp()
                    })
                    .collect();
                let z: f64 = e.iter().sum();
                for c in 0..d {
                    concat[i][h * d + c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            for c in 0..m {
                out.set(i, c, (0..m).map(|k| concat[i][k] * w.wo.get(k, c)).sum());
            }
        }
        out
    }

    #[test]
    fn msa_matches_literal_oracle() {
        let mut rng = Rng::new(100);
        let w = block(1);
        let t = random_tokens(&mut rng, 5, 8);
        let got = msa_forward(&t, &w, AttentionMode::Standard).unwrap();
        let want = literal_msa(&t.features, &w);
        assert!(got.features.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = Rng::new(2);
        let w = block(2);
        let t = random_tokens(&mut rng, 1, 8);
        let maps = attention_maps(&t, &w, AttentionMode::Standard).unwrap();
        assert!(maps.maps.iter().all(|a| a.data() == [1.0]));
        let out = msa_forward(&t, &w, AttentionMode::Standard).unwrap();
        let v: Vec<Matrix> = w.wv.iter().map(|wv| matmul(&t.features, wv).unwrap()).collect();
        let expect = matmul(&Matrix::hstack(&v).unwrap(), &w.wo).unwrap();
        assert!(out.features.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let row = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5, -0.2, 0.7];
        let t = TokenSet::new(Matrix::from_rows(&[row; 4]).unwrap()).unwrap();
        let w = block(3);
        let maps = attention_maps(&t, &w, AttentionMode::Standard).unwrap();
        for a in &maps.maps {
            assert!(a.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        let out = msa_forward(&t, &w, AttentionMode::Standard).unwrap();
        for r in 1..4 {
            assert_eq!(out.features.row(r), out.features.row(0));
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = Rng::new(4);
        let w = block(4);
        let t = random_tokens(&mut rng, 9, 8);
        for mode in [AttentionMode::Standard, AttentionMode::NormalizedAlpha] {
            let maps = attention_maps(&t, &w, mode).unwrap();
            for a in &maps.maps {
                for r in a.row_iter() {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_preserves_token_count() {
        let mut rng = Rng::new(5);
        let w = block(5);
        for n in [1, 2, 7, 13] {
            let t = random_tokens(&mut rng, n, 8);
            for residual_and_norm in [true, false] {
                let out = block_forward(&t, &w, AttentionMode::Standard, BlockOptions { residual_and_norm }).unwrap();
                assert_eq!(out.len(), n);
            }
        }
    }

    #[test]
    fn zero_projections_give_residual_identity() {
        let mut rng = Rng::new(6);
        let mut w = block(6);
        w.wo = Matrix::zeros(8, 8);
        w.mlp2 = Matrix::zeros(w.mlp2.rows(), 8);
        let t = random_tokens(&mut rng, 6, 8);
        let out = block_forward(&t, &w, AttentionMode::Standard, BlockOptions::default()).unwrap();
        assert_eq!(out.features, t.features);
    }

    #[test]
    fn bare_block_is_mlp_of_msa() {
        let mut rng = Rng::new(7);
        let w = block(7);
        let t = random_tokens(&mut rng, 5, 8);
        let out = block_forward(&t, &w, AttentionMode::Standard, BlockOptions { residual_and_norm: false }).unwrap();
        // composition oracle built from the literal attention and a scalar GELU
        let msa = literal_msa(&t.features, &w);
        let hidden = w.mlp1.cols();
        let mut want = Matrix::zeros(5, 8);
        for i in 0..5 {
            let hrow: Vec<f64> = (0..hidden)
                .map(|j| {
                    let x: f64 = (0..8).map(|k| msa.get(i, k) * w.mlp1.get(k, j)).sum();
                    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
                })
                .collect();
            for c in 0..8 {
                want.set(i, c, (0..hidden).map(|j| hrow[j] * w.mlp2.get(j, c)).sum());
            }
        }
        assert!(out.features.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn carry_with_unit_counts_is_standard() {
        let mut rng = Rng::new(8);
        let w = block(8);
        let t = random_tokens(&mut rng, 7, 8);
        let std_out = block_forward(&t, &w, AttentionMode::Standard, BlockOptions::default()).unwrap();
        let c = t.clone().with_counts(vec![1.0; 7]).unwrap();
        let carry_out = block_forward(&c, &w, AttentionMode::Carry, BlockOptions::default()).unwrap();
        assert_eq!(std_out.features, carry_out.features);
    }

    #[test]
    fn carry_count_equals_duplicated_token() {
        // a token with count 2 attends like two identical copies of it
        let mut rng = Rng::new(9);
        let w = block(9);
        let t = random_tokens(&mut rng, 3, 8);
        let dup = TokenSet::new(t.features.select_rows(&[0, 1, 2, 2])).unwrap();
        let a_dup = msa_forward(&dup, &w, AttentionMode::Standard).unwrap();
        let c = t.with_counts(vec![1.0, 1.0, 2.0]).unwrap();
        let a_carry = msa_forward(&c, &w, AttentionMode::Carry).unwrap();
        assert!(a_carry.features.max_abs_diff(&a_dup.features.select_rows(&[0, 1, 2])) < 1e-12);
    }

    #[test]
    fn mode_requirements() {
        let mut rng = Rng::new(10);
        let mut w = block(10);
        let t = random_tokens(&mut rng, 3, 8);
        assert!(msa_forward(&t, &w, AttentionMode::Carry).unwrap_err().is_usage());
        w.alpha = None;
        assert!(msa_forward(&t, &w, AttentionMode::NormalizedAlpha).unwrap_err().is_usage());
        let wrong = random_tokens(&mut rng, 3, 6);
        assert!(msa_forward(&wrong, &w, AttentionMode::Standard).unwrap_err().is_usage());
    }

    #[test]
    fn normalized_mode_ignores_query_key_scale() {
        let mut rng = Rng::new(11);
        let w = block(11);
        let t = random_tokens(&mut rng, 6, 8);
        let base = attention_maps(&t, &w, AttentionMode::NormalizedAlpha).unwrap();
        let mut scaled = w.clone();
        scaled.wq = w.wq.iter().map(|m| m.scale(7.5)).collect();
        scaled.wk = w.wk.iter().map(|m| m.scale(0.01)).collect();
        let other = attention_maps(&t, &scaled, AttentionMode::NormalizedAlpha).unwrap();
        for (a, b) in base.maps.iter().zip(&other.maps) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn head_outputs_stay_in_value_hull() {
        let mut rng = Rng::new(12);
        let w = block(12);
        let t = random_tokens(&mut rng, 10, 8);
        for h in msa_heads(&t, &w, AttentionMode::Standard).unwrap() {
            for c in 0..h.values.cols() {
                let col: Vec<f64> = (0..10).map(|r| h.values.get(r, c)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for r in 0..10 {
                    let o = h.output.get(r, c);
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
            let spread = |m: &Matrix| {
                let mut best: f64 = 0.0;
                for i in 0..m.rows() {
                    for j in 0..m.rows() {
                        best = best.max(crate::numerics::sq_dist(m.row(i), m.row(j)));
                    }
                }
                best
            };
            assert!(spread(&h.output) <= spread(&h.values) + 1e-12);
        }
    }

    #[test]
    fn synth_weights_deterministic() {
        let c = cfg(2, 8, 2);
        assert_eq!(synth_weights(&c, 1).unwrap(), synth_weights(&c, 1).unwrap());
        assert_ne!(synth_weights(&c, 1).unwrap(), synth_weights(&c, 2).unwrap());
        assert!(synth_weights(&cfg(1, 9, 2), 1).unwrap_err().is_usage());
    }

    #[test]
    fn synth_weight_entries_are_centered() {
        // 64 x 64 model: 4 * 64^2 + 2 * 4 * 64^2 = 49_152 entries per layer;
        // 21 layers gives just over a million draws.
        let c = cfg(21, 64, 4);
        let ws = synth_weights(&c, 99).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for w in &ws {
            for m in w.wq.iter().chain(&w.wk).chain(&w.wv).chain([&w.wo, &w.mlp1, &w.mlp2]) {
                sum += m.data().iter().sum::<f64>();
                n += m.data().len();
            }
        }
        assert!(n >= 1_000_000);
        let sigma = (1.0 / 64f64).sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn grid_must_fit() {
        let t = TokenSet::new(Matrix::zeros(5, 2)).unwrap();
        assert!(t.clone().with_grid(2, 2).is_ok());
        assert!(t.clone().with_grid(1, 5).is_ok());
        assert!(t.with_grid(3, 3).is_err());
        assert!(TokenSet::new(Matrix::zeros(0, 2)).is_err());
    }
}
