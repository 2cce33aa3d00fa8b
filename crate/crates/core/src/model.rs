//! Descriptor bank, frozen text encoder and trainable image adapter.
//!
//! A descriptor for `(class i, subclass k)` is the token sequence
//! `[context_1 .. context_C][D_i^k]_1 .. [D_i^k]_M`. Its text embedding is the
//! encoder applied to that sequence. The context block and the encoder are
//! frozen in both training stages.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{axpy, Matrix};
use crate::rng;

/// Standard deviation of the token initialization.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBank {
    n_classes: usize,
    n_subclasses: usize,
    n_tokens: usize,
    token_dim: usize,
    context: Vec<Vec<f64>>,
    /// Flat `N x K x M x token_dim`, row-major.
    tokens: Vec<f64>,
}

impl DescriptorBank {
    pub fn build(
        n_classes: usize,
        n_subclasses: usize,
        n_tokens: usize,
        token_dim: usize,
        context_length: usize,
        seed: u64,
    ) -> Result<Self> {
        for (name, v) in [
            ("n_classes", n_classes),
            ("n_subclasses", n_subclasses),
            ("n_tokens", n_tokens),
            ("token_dim", token_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        let mut tok_rng = rng::stream(seed, rng::BANK_TOKENS);
        let tokens = rng::gaussian_vec(
            &mut tok_rng,
            n_classes * n_subclasses * n_tokens * token_dim,
            TOKEN_INIT_STD,
        );
        let mut ctx_rng = rng::stream(seed, rng::BANK_CONTEXT);
        let context = (0..context_length)
            .map(|_| rng::gaussian_vec(&mut ctx_rng, token_dim, TOKEN_INIT_STD))
            .collect();
        Ok(Self {
            n_classes,
            n_subclasses,
            n_tokens,
            token_dim,
            context,
            tokens,
        })
    }

    /// Assemble a bank from explicit parts (checkpoint loading, fixtures).
    pub fn from_parts(
        n_classes: usize,
        n_subclasses: usize,
        n_tokens: usize,
        token_dim: usize,
        context: Vec<Vec<f64>>,
        tokens: Vec<f64>,
    ) -> Result<Self> {
        if n_classes == 0 || n_subclasses == 0 || n_tokens == 0 || token_dim == 0 {
            return Err(Error::invalid("bank dimensions must be >= 1"));
        }
        ensure_dim(
            n_classes * n_subclasses * n_tokens * token_dim,
            tokens.len(),
        )?;
        for c in &context {
            ensure_dim(token_dim, c.len())?;
        }
        Ok(Self {
            n_classes,
            n_subclasses,
            n_tokens,
            token_dim,
            context,
            tokens,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_subclasses(&self) -> usize {
        self.n_subclasses
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn context(&self) -> &[Vec<f64>] {
        &self.context
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [f64] {
        &mut self.tokens
    }

    pub fn trainable_token_count(&self) -> usize {
        self.n_classes * self.n_subclasses * self.n_tokens
    }

    fn offset(&self, class: usize, sub: usize, m: usize) -> usize {
        ((class * self.n_subclasses + sub) * self.n_tokens + m) * self.token_dim
    }

    pub fn token(&self, class: usize, sub: usize, m: usize) -> &[f64] {
        let o = self.offset(class, sub, m);
        &self.tokens[o..o + self.token_dim]
    }

    /// Token range of descriptor `(class, sub)` inside [`Self::tokens`].
    pub fn descriptor_range(&self, class: usize, sub: usize) -> std::ops::Range<usize> {
        let o = self.offset(class, sub, 0);
        o..o + self.n_tokens * self.token_dim
    }

    /// Full token sequence of one descriptor: context then learnable tokens.
    pub fn descriptor(&self, class: usize, sub: usize) -> Vec<&[f64]> {
        self.context
            .iter()
            .map(Vec::as_slice)
            .chain((0..self.n_tokens).map(|m| self.token(class, sub, m)))
            .collect()
    }

    /// Swap two subclasses of a class.
    pub fn swap_subclasses(&mut self, class: usize, a: usize, b: usize) {
        if a == b {
            return;
        }
        let ra = self.descriptor_range(class, a);
        let rb = self.descriptor_range(class, b);
        for (x, y) in ra.zip(rb) {
            self.tokens.swap(x, y);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextEncoderKind {
    IdentityMean,
    ProjectedMean,
}

impl fmt::Display for TextEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextEncoderKind::IdentityMean => "identity-mean",
            TextEncoderKind::ProjectedMean => "projected-mean",
        })
    }
}

impl FromStr for TextEncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity-mean" => Ok(Self::IdentityMean),
            "projected-mean" => Ok(Self::ProjectedMean),
            other => Err(Error::invalid(format!("unknown encoder kind `{other}`"))),
        }
    }
}

/// Frozen text encoder: mean pooling over tokens, optionally followed by a
/// frozen random projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    token_dim: usize,
    embed_dim: usize,
    projection: Option<Matrix>,
}

impl TextEncoder {
    pub fn identity(dim: usize) -> Self {
        Self {
            token_dim: dim,
            embed_dim: dim,
            projection: None,
        }
    }

    /// Projection entries are drawn from N(0, 1/token_dim).
    pub fn projected(token_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::PROJECTION);
        let data = rng::gaussian_vec(
            &mut r,
            embed_dim * token_dim,
            1.0 / (token_dim as f64).sqrt(),
        );
        Self {
            token_dim,
            embed_dim,
            projection: Some(Matrix::from_vec(embed_dim, token_dim, data).expect("sized")),
        }
    }

    pub fn with_projection(projection: Matrix) -> Self {
        Self {
            token_dim: projection.cols(),
            embed_dim: projection.rows(),
            projection: Some(projection),
        }
    }

    pub fn kind(&self) -> TextEncoderKind {
        if self.projection.is_some() {
            TextEncoderKind::ProjectedMean
        } else {
            TextEncoderKind::IdentityMean
        }
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn projection(&self) -> Option<&Matrix> {
        self.projection.as_ref()
    }

    /// Encode a full token sequence.
    pub fn encode(&self, sequence: &[&[f64]]) -> Result<Vec<f64>> {
        if sequence.is_empty() {
            return Err(Error::Empty("encode_text"));
        }
        let mean = crate::numerics::mean_of(sequence.iter().copied(), self.token_dim)?;
        match &self.projection {
            None => Ok(mean),
            Some(p) => p.matvec(&mean),
        }
    }

    /// Encode `context ++ tokens`.
    pub fn encode_text(&self, context: &[&[f64]], tokens: &[&[f64]]) -> Result<Vec<f64>> {
        let seq: Vec<&[f64]> = context.iter().chain(tokens).copied().collect();
        self.encode(&seq)
    }

    /// Gradient of `<upstream, encode(seq)>` with respect to any single token
    /// of a sequence of length `sequence_len`; identical for every position.
    pub fn token_gradient(&self, upstream: &[f64], sequence_len: usize) -> Result<Vec<f64>> {
        ensure_dim(self.embed_dim, upstream.len())?;
        let mut g = match &self.projection {
            None => upstream.to_vec(),
            Some(p) => p.matvec_transposed(upstream)?,
        };
        let scale = 1.0 / sequence_len as f64;
        for x in &mut g {
            *x *= scale;
        }
        Ok(g)
    }
}

/// Affine image adapter `V = W x + b (+ x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAdapter {
    weight: Matrix,
    bias: Vec<f64>,
    residual: bool,
}

impl ImageAdapter {
    /// Residual adapter at zero initialization: an exact identity map.
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
            residual: true,
        }
    }

    pub fn new(weight: Matrix, bias: Vec<f64>, residual: bool) -> Result<Self> {
        ensure_dim(weight.rows(), bias.len())?;
        if residual {
            ensure_dim(weight.rows(), weight.cols())?;
        }
        Ok(Self {
            weight,
            bias,
            residual,
        })
    }

    /// Plain affine map with weights drawn from N(0, 1/feature_dim).
    pub fn random(embed_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::ADAPTER);
        let data = rng::gaussian_vec(
            &mut r,
            embed_dim * feature_dim,
            1.0 / (feature_dim as f64).sqrt(),
        );
        Self {
            weight: Matrix::from_vec(embed_dim, feature_dim, data).expect("sized"),
            bias: vec![0.0; embed_dim],
            residual: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        self.weight.as_mut_slice()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn encode_image(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut v = self.weight.matvec(features)?;
        for (vi, b) in v.iter_mut().zip(&self.bias) {
            *vi += b;
        }
        if self.residual {
            for (vi, x) in v.iter_mut().zip(features) {
                *vi += x;
            }
        }
        Ok(v)
    }

    /// Accumulate `scale * dL/dW` and `scale * dL/db` for upstream `dL/dV`.
    pub fn accumulate_gradients(
        &self,
        features: &[f64],
        upstream: &[f64],
        scale: f64,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Result<()> {
        ensure_dim(self.feature_dim(), features.len())?;
        ensure_dim(self.embed_dim(), upstream.len())?;
        let cols = self.feature_dim();
        for (r, &g) in upstream.iter().enumerate() {
            axpy(
                scale * g,
                features,
                &mut grad_weight[r * cols..(r + 1) * cols],
            );
            grad_bias[r] += scale * g;
        }
        Ok(())
    }
}

/// `N x K` grid of text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    n_classes: usize,
    n_subclasses: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TextEmbeddings {
    pub fn from_rows(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_classes = rows.len();
        if n_classes == 0 {
            return Err(Error::Empty("text embeddings"));
        }
        let n_subclasses = rows[0].len();
        if n_subclasses == 0 {
            return Err(Error::Empty("text embeddings"));
        }
        let dim = rows[0][0].len();
        let mut data = Vec::with_capacity(n_classes * n_subclasses * dim);
        for row in rows {
            ensure_dim(n_subclasses, row.len())?;
            for e in row {
                ensure_dim(dim, e.len())?;
                data.extend(e);
            }
        }
        Ok(Self {
            n_classes,
            n_subclasses,
            dim,
            data,
        })
    }

    /// One embedding per class (`K = 1`).
    pub fn single(per_class: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(per_class.into_iter().map(|e| vec![e]).collect())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_subclasses(&self) -> usize {
        self.n_subclasses
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, class: usize, sub: usize) -> &[f64] {
        let o = (class * self.n_subclasses + sub) * self.dim;
        &self.data[o..o + self.dim]
    }
}

/// Embedding of every descriptor in the bank.
pub fn bank_embeddings(bank: &DescriptorBank, encoder: &TextEncoder) -> Result<TextEmbeddings> {
    ensure_dim(encoder.token_dim(), bank.token_dim())?;
    let n = bank.n_classes();
    let k = bank.n_subclasses();
    let mut data = Vec::with_capacity(n * k * encoder.embed_dim());
    for i in 0..n {
        for s in 0..k {
            data.extend(encoder.encode(&bank.descriptor(i, s))?);
        }
    }
    Ok(TextEmbeddings {
        n_classes: n,
        n_subclasses: k,
        dim: encoder.embed_dim(),
        data,
    })
}

/// Training stage of the two-stage paradigm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Descriptor tokens only.
    Descriptors,
    /// Image adapter only.
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    DescriptorTokens,
    Context,
    Projection,
    AdapterWeight,
    AdapterBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::DescriptorTokens,
        ParamGroup::Context,
        ParamGroup::Projection,
        ParamGroup::AdapterWeight,
        ParamGroup::AdapterBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::DescriptorTokens => "bank.tokens",
            ParamGroup::Context => "bank.context",
            ParamGroup::Projection => "encoder.projection",
            ParamGroup::AdapterWeight => "adapter.weight",
            ParamGroup::AdapterBias => "adapter.bias",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterPartition {
    pub trainable: Vec<ParamGroup>,
    pub frozen: Vec<ParamGroup>,
}

impl ParameterPartition {
    pub fn for_stage(stage: Stage) -> Self {
        let trainable = match stage {
            Stage::Descriptors => vec![ParamGroup::DescriptorTokens],
            Stage::Adapter => vec![ParamGroup::AdapterWeight, ParamGroup::AdapterBias],
        };
        let frozen = ParamGroup::ALL
            .into_iter()
            .filter(|g| !trainable.contains(g))
            .collect();
        Self { trainable, frozen }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub n_subclasses: usize,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub encoder: TextEncoderKind,
    pub residual: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 7,
            n_subclasses: 5,
            n_tokens: 4,
            token_dim: 16,
            context_length: 4,
            embed_dim: 16,
            feature_dim: 16,
            encoder: TextEncoderKind::IdentityMean,
            residual: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub bank: DescriptorBank,
    pub encoder: TextEncoder,
    pub adapter: ImageAdapter,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let bank = DescriptorBank::build(
            config.n_classes,
            config.n_subclasses,
            config.n_tokens,
            config.token_dim,
            config.context_length,
            config.seed,
        )?;
        let encoder = match config.encoder {
            TextEncoderKind::IdentityMean => {
                if config.token_dim != config.embed_dim {
                    return Err(Error::invalid(
                        "identity-mean encoder requires token_dim == embed_dim",
                    ));
                }
                TextEncoder::identity(config.token_dim)
            }
            TextEncoderKind::ProjectedMean => {
                TextEncoder::projected(config.token_dim, config.embed_dim, config.seed)
            }
        };
        if config.embed_dim == 0 || config.feature_dim == 0 {
            return Err(Error::invalid("embed_dim and feature_dim must be >= 1"));
        }
        let adapter = if config.residual {
            if config.feature_dim != config.embed_dim {
                return Err(Error::invalid(
                    "residual adapter requires feature_dim == embed_dim",
                ));
            }
            ImageAdapter::identity(config.embed_dim)
        } else {
            ImageAdapter::random(config.embed_dim, config.feature_dim, config.seed)
        };
        Ok(Self {
            config,
            bank,
            encoder,
            adapter,
        })
    }

    pub fn text_embeddings(&self) -> Result<TextEmbeddings> {
        bank_embeddings(&self.bank, &self.encoder)
    }

    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::DescriptorTokens => self.bank.tokens().to_vec(),
            ParamGroup::Context => self.bank.context().concat(),
            ParamGroup::Projection => self
                .encoder
                .projection()
                .map(|p| p.as_slice().to_vec())
                .unwrap_or_default(),
            ParamGroup::AdapterWeight => self.adapter.weight().as_slice().to_vec(),
            ParamGroup::AdapterBias => self.adapter.bias().to_vec(),
        }
    }

    /// FNV-1a over the bit patterns of one parameter group.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.group_values(group) {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn fingerprints(&self, groups: &[ParamGroup]) -> Vec<u64> {
        groups.iter().map(|&g| self.fingerprint(g)).collect()
    }
}
