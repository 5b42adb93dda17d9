//! Frozen encoder backends.
//!
//! Downstream code only sees unit-norm features: [`TextFeatureSet`] for a
//! prompt family and [`ImageFeatures`] for an image. Two backends live here:
//!
//! * [`ToyEncoder`]: a small deterministic text encoder (one attention-free
//!   `tanh` mixing layer, a fixed random projection, L2 normalization) with
//!   analytic gradients, plus a random-projection image encoder that builds
//!   local features from disjoint slices of the input.
//! * [`CacheBackend`]: replays rows of an embedding cache unchanged.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{normalize_or_e1, UNIT_NORM_TOL};
use crate::prompt::PromptContext;

/// The hand-crafted context "a photo of a".
pub const MANUAL_TEMPLATE: [&str; 4] = ["a", "photo", "of", "a"];

/// Standard deviation of seeded vocabulary rows. The mixing layer is scaled
/// by its inverse, so this only sets how curved the encoder is per unit of
/// token space: large enough that central differences with h = 1e-3 are
/// accurate to ~1e-5, small enough that SGD at lr 2e-3 still moves prompts.
pub const TOKEN_STD: f64 = 0.3;

/// Splits a class name into vocabulary tokens.
///
/// Lower-cases and splits on whitespace, `_` and `-`, so `"Golden_Retriever"`
/// becomes `["golden", "retriever"]`.
pub fn tokenize(name: &str) -> Vec<String> {
    name.split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token string to embedding-row lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    dim: usize,
    rows: BTreeMap<String, Vec<f32>>,
}

impl Vocab {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    /// Builds a vocabulary with Gaussian rows of standard deviation
    /// [`TOKEN_STD`]. Each row depends only on
    /// `(seed, token)`, so adding tokens never perturbs existing ones.
    pub fn seeded<'a>(tokens: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Self {
        let mut vocab = Self::new(dim);
        for token in tokens {
            if vocab.rows.contains_key(token) {
                continue;
            }
            let digest = Sha256::new()
                .chain_update(seed.to_le_bytes())
                .chain_update(token.as_bytes())
                .finalize();
            let mut key = [0u8; 32];
            key.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(key);
            let row = (0..dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    (TOKEN_STD * v) as f32
                })
                .collect();
            vocab.rows.insert(token.to_string(), row);
        }
        vocab
    }

    pub fn insert(&mut self, token: impl Into<String>, row: Vec<f32>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                what: "vocabulary row",
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.rows.insert(token.into(), row);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Result<&[f32]> {
        self.rows
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Shape and vocabulary of an encoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Feature dimension `d`.
    pub embed_dim: usize,
    pub token_dim: usize,
    /// Number of local image features `N`.
    pub num_locals: usize,
    pub max_context_len: usize,
    pub vocab: Vocab,
}

impl EncoderSpec {
    pub fn new(
        embed_dim: usize,
        token_dim: usize,
        num_locals: usize,
        max_context_len: usize,
        vocab: Vocab,
    ) -> Result<Self> {
        if embed_dim == 0 || token_dim == 0 || max_context_len == 0 {
            return Err(Error::Parameter(
                "embed_dim, token_dim and max_context_len must be at least 1".into(),
            ));
        }
        if vocab.dim() != token_dim {
            return Err(Error::Dimension {
                what: "vocabulary",
                expected: token_dim,
                actual: vocab.dim(),
            });
        }
        Ok(Self {
            embed_dim,
            token_dim,
            num_locals,
            max_context_len,
            vocab,
        })
    }

    /// Spec whose vocabulary covers the manual template and every token of
    /// `class_names`.
    pub fn for_classes(
        class_names: &[String],
        embed_dim: usize,
        token_dim: usize,
        num_locals: usize,
        max_context_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let tokens: Vec<String> = MANUAL_TEMPLATE
            .iter()
            .map(|t| t.to_string())
            .chain(class_names.iter().flat_map(|n| tokenize(n)))
            .collect();
        let vocab = Vocab::seeded(tokens.iter().map(String::as_str), token_dim, seed);
        Self::new(embed_dim, token_dim, num_locals, max_context_len, vocab)
    }

    /// Width of one cache row: global feature followed by the locals.
    pub fn row_width(&self) -> usize {
        self.embed_dim * (1 + self.num_locals)
    }
}

/// `C` unit-norm text features, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureSet {
    features: Array2<f64>,
}

impl TextFeatureSet {
    pub fn from_rows(features: Array2<f64>) -> Result<Self> {
        for (c, row) in features.axis_iter(Axis(0)).enumerate() {
            check_unit(row, "text feature").map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("class {c}: {msg}")),
                other => other,
            })?;
        }
        Ok(Self { features })
    }

    pub fn num_classes(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, class: usize) -> ArrayView1<'_, f64> {
        self.features.row(class)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.features
    }

    /// Cosine similarity of a unit vector against every class feature.
    pub fn cosines(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                what: "image feature",
                expected: self.dim(),
                actual: z.len(),
            });
        }
        Ok(self.features.dot(&z))
    }
}

/// Global feature `z^g` and `N` local features `z^l_i`, all unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub global: Array1<f64>,
    /// `N x d`; zero rows when the backend has no locals.
    pub locals: Array2<f64>,
}

impl ImageFeatures {
    pub fn new(global: Array1<f64>, locals: Array2<f64>) -> Result<Self> {
        if locals.nrows() > 0 && locals.ncols() != global.len() {
            return Err(Error::Dimension {
                what: "local feature",
                expected: global.len(),
                actual: locals.ncols(),
            });
        }
        check_unit(global.view(), "global image feature")?;
        for row in locals.axis_iter(Axis(0)) {
            check_unit(row, "local image feature")?;
        }
        Ok(Self { global, locals })
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn num_locals(&self) -> usize {
        self.locals.nrows()
    }

    /// Flattens into a cache row (global first, then locals).
    pub fn to_row(&self) -> Vec<f32> {
        self.global
            .iter()
            .chain(self.locals.iter())
            .map(|&v| v as f32)
            .collect()
    }
}

fn check_unit(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    let norm = v.dot(&v).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Validation(format!(
            "{what} has L2 norm {norm}, expected 1"
        )));
    }
    Ok(())
}

/// Frozen text encoder `g(.)`.
pub trait TextEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Encodes one prompt given as token-embedding rows (`tokens x token_dim`).
    fn encode_tokens(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>>;

    /// Encodes every class prompt of `context`.
    fn encode_text(&self, context: &PromptContext) -> Result<TextFeatureSet> {
        let spec = self.spec();
        let mut features = Array2::zeros((context.num_classes(), spec.embed_dim));
        for c in 0..context.num_classes() {
            let tokens = context.prompt_tokens(c);
            let t = self.encode_tokens(tokens.view())?;
            features.row_mut(c).assign(&t);
        }
        Ok(TextFeatureSet { features })
    }
}

/// A text encoder whose output can be differentiated with respect to its
/// input token rows.
pub trait DifferentiableTextEncoder: TextEncoder {
    /// Vector-Jacobian product: returns the encoded feature and
    /// `J^T upstream`, one gradient row per input token.
    fn encode_tokens_vjp(
        &self,
        tokens: ArrayView2<'_, f64>,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)>;

    /// Jacobian-vector product along `tangent` (same shape as `tokens`).
    fn encode_tokens_jvp(
        &self,
        tokens: ArrayView2<'_, f64>,
        tangent: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array1<f64>)>;
}

/// Frozen image encoder `f(.)`.
pub trait ImageEncoder: Send + Sync {
    /// Expected length of the raw input (or cache row).
    fn input_dim(&self) -> usize;

    fn num_locals(&self) -> usize;

    fn encode_image(&self, input: &[f32]) -> Result<ImageFeatures>;

    fn encode_images(&self, inputs: &[&[f32]]) -> Result<Vec<ImageFeatures>> {
        inputs.iter().map(|x| self.encode_image(x)).collect()
    }
}

/// Deterministic toy backend.
///
/// Text side: `h = sum_p a_p * tanh(M x_p + b)`, `t = normalize(P h)`.
/// Image side: `z^g = normalize(G x)`; with `N > 0` the input is cut into `N`
/// equal slices and `z^l_i = normalize(G[:, slice_i] x[slice_i])`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    spec: EncoderSpec,
    seed: u64,
    mix: Array2<f64>,
    bias: Array1<f64>,
    position: Array1<f64>,
    proj: Array2<f64>,
    image_proj: Array2<f64>,
}

struct ToyForward {
    act: Array2<f64>,
    y: Array1<f64>,
    y_norm: f64,
    t: Array1<f64>,
}

impl ToyEncoder {
    pub fn new(seed: u64, spec: EncoderSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let td = spec.token_dim;
        let d = spec.embed_dim;
        let image_dim = d * spec.num_locals.max(1);
        let mix = gaussian_matrix(&mut rng, td, td, 1.0 / (TOKEN_STD * (td as f64).sqrt()));
        let bias = Array1::from_iter((0..td).map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            0.1 * v
        }));
        let position =
            Array1::from_iter((0..spec.max_context_len).map(|_| rng.gen_range(0.5..1.5)));
        let proj = gaussian_matrix(&mut rng, d, td, (1.0 / td as f64).sqrt());
        let image_proj = gaussian_matrix(&mut rng, d, image_dim, (1.0 / image_dim as f64).sqrt());
        Self {
            spec,
            seed,
            mix,
            bias,
            position,
            proj,
            image_proj,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All weights flattened, for determinism checks.
    pub fn weights(&self) -> Vec<f64> {
        self.mix
            .iter()
            .chain(self.bias.iter())
            .chain(self.position.iter())
            .chain(self.proj.iter())
            .chain(self.image_proj.iter())
            .copied()
            .collect()
    }

    fn check_tokens(&self, tokens: ArrayView2<'_, f64>) -> Result<()> {
        if tokens.ncols() != self.spec.token_dim {
            return Err(Error::Dimension {
                what: "token embedding",
                expected: self.spec.token_dim,
                actual: tokens.ncols(),
            });
        }
        if tokens.nrows() > self.spec.max_context_len {
            return Err(Error::ContextOverflow {
                len: tokens.nrows(),
                max: self.spec.max_context_len,
            });
        }
        Ok(())
    }

    fn forward(&self, tokens: ArrayView2<'_, f64>) -> Result<ToyForward> {
        self.check_tokens(tokens)?;
        let mut act = tokens.dot(&self.mix.t());
        act += &self.bias;
        act.mapv_inplace(f64::tanh);
        let mut h = Array1::zeros(self.spec.token_dim);
        for (p, row) in act.axis_iter(Axis(0)).enumerate() {
            h.scaled_add(self.position[p], &row);
        }
        let y = self.proj.dot(&h);
        let (t, y_norm) = normalize_or_e1(y.clone());
        Ok(ToyForward { act, y, y_norm, t })
    }

    /// Gradient through `t = y / |y|`; zero at the degenerate point.
    fn normalize_backward(fwd: &ToyForward, upstream: ArrayView1<'_, f64>) -> Array1<f64> {
        if fwd.y_norm == 0.0 {
            return Array1::zeros(fwd.y.len());
        }
        let along = fwd.t.dot(&upstream);
        (&upstream - &(&fwd.t * along)) / fwd.y_norm
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl TextEncoder for ToyEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_tokens(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward(tokens)?.t)
    }
}

impl DifferentiableTextEncoder for ToyEncoder {
    fn encode_tokens_vjp(
        &self,
        tokens: ArrayView2<'_, f64>,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let fwd = self.forward(tokens)?;
        let grad_y = Self::normalize_backward(&fwd, upstream);
        let grad_h = self.proj.t().dot(&grad_y);
        let mut grad_pre = Array2::zeros(fwd.act.raw_dim());
        for (p, (mut g, a)) in grad_pre
            .axis_iter_mut(Axis(0))
            .zip(fwd.act.axis_iter(Axis(0)))
            .enumerate()
        {
            let w = self.position[p];
            ndarray::Zip::from(&mut g)
                .and(&a)
                .and(&grad_h)
                .for_each(|g, &a, &gh| *g = w * (1.0 - a * a) * gh);
        }
        // pre = x M^T + b, so dL/dx = dL/dpre M.
        let grad_tokens = grad_pre.dot(&self.mix);
        Ok((fwd.t, grad_tokens))
    }

    fn encode_tokens_jvp(
        &self,
        tokens: ArrayView2<'_, f64>,
        tangent: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        if tangent.dim() != tokens.dim() {
            return Err(Error::Dimension {
                what: "tangent",
                expected: tokens.len(),
                actual: tangent.len(),
            });
        }
        let fwd = self.forward(tokens)?;
        let d_pre = tangent.dot(&self.mix.t());
        let mut d_h = Array1::zeros(self.spec.token_dim);
        for (p, (dp, a)) in d_pre
            .axis_iter(Axis(0))
            .zip(fwd.act.axis_iter(Axis(0)))
            .enumerate()
        {
            let w = self.position[p];
            ndarray::Zip::from(&mut d_h)
                .and(&dp)
                .and(&a)
                .for_each(|dh, &dp, &a| *dh += w * (1.0 - a * a) * dp);
        }
        let d_y = self.proj.dot(&d_h);
        let d_t = Self::normalize_backward(&fwd, d_y.view());
        Ok((fwd.t, d_t))
    }
}

impl ImageEncoder for ToyEncoder {
    fn input_dim(&self) -> usize {
        self.image_proj.ncols()
    }

    fn num_locals(&self) -> usize {
        self.spec.num_locals
    }

    fn encode_image(&self, input: &[f32]) -> Result<ImageFeatures> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "image input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let x = Array1::from_iter(input.iter().map(|&v| v as f64));
        let (global, _) = normalize_or_e1(self.image_proj.dot(&x));
        let n = self.spec.num_locals;
        let mut locals = Array2::zeros((n, self.spec.embed_dim));
        if let Some(width) = self.input_dim().checked_div(n) {
            for i in 0..n {
                let cols = s![.., i * width..(i + 1) * width];
                let part = self
                    .image_proj
                    .slice(cols)
                    .dot(&x.slice(s![i * width..(i + 1) * width]));
                let (local, _) = normalize_or_e1(part);
                locals.row_mut(i).assign(&local);
            }
        }
        Ok(ImageFeatures { global, locals })
    }
}

/// Builds the toy backend for `spec` from `seed`.
pub fn toy_encoder(seed: u64, spec: EncoderSpec) -> ToyEncoder {
    ToyEncoder::new(seed, spec)
}

/// Image "encoder" that replays precomputed rows of width `d * (1 + N)`.
#[derive(Debug, Clone, Copy)]
pub struct CacheBackend {
    pub embed_dim: usize,
    pub num_locals: usize,
}

impl CacheBackend {
    pub fn new(embed_dim: usize, num_locals: usize) -> Self {
        Self {
            embed_dim,
            num_locals,
        }
    }
}

impl ImageEncoder for CacheBackend {
    fn input_dim(&self) -> usize {
        self.embed_dim * (1 + self.num_locals)
    }

    fn num_locals(&self) -> usize {
        self.num_locals
    }

    fn encode_image(&self, input: &[f32]) -> Result<ImageFeatures> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "cache row",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let d = self.embed_dim;
        let global = Array1::from_iter(input[..d].iter().map(|&v| v as f64));
        let locals = Array2::from_shape_vec(
            (self.num_locals, d),
            input[d..].iter().map(|&v| v as f64).collect(),
        )
        .expect("row width checked above");
        ImageFeatures::new(global, locals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{InitMode, PromptContext};

    fn spec(num_locals: usize) -> EncoderSpec {
        let classes = vec!["cat".to_string(), "golden retriever".to_string()];
        EncoderSpec::for_classes(&classes, 8, 6, num_locals, 8, 3).unwrap()
    }

    #[test]
    fn tokenizer_splits_and_lowercases() {
        assert_eq!(tokenize("Golden_Retriever"), vec!["golden", "retriever"]);
        assert_eq!(tokenize("  sea-lion  "), vec!["sea", "lion"]);
    }

    #[test]
    fn seeded_vocab_is_stable_under_insertion() {
        let a = Vocab::seeded(["cat"], 4, 9);
        let b = Vocab::seeded(["dog", "cat"], 4, 9);
        assert_eq!(a.get("cat").unwrap(), b.get("cat").unwrap());
        assert!(matches!(a.get("dog"), Err(Error::UnknownToken(t)) if t == "dog"));
    }

    #[test]
    fn spec_rejects_zero_dims() {
        assert!(EncoderSpec::new(0, 4, 0, 4, Vocab::new(4)).is_err());
        assert!(EncoderSpec::new(4, 4, 0, 4, Vocab::new(3)).is_err());
    }

    #[test]
    fn single_class_feature_is_unit_norm() {
        let names = vec!["cat".to_string()];
        let spec = EncoderSpec::for_classes(&names, 8, 6, 0, 8, 1).unwrap();
        let enc = ToyEncoder::new(5, spec.clone());
        let ctx = PromptContext::build(&names, &spec, InitMode::Manual, true, 0).unwrap();
        let t = enc.encode_text(&ctx).unwrap();
        assert_eq!(t.num_classes(), 1);
        assert!((t.row(0).dot(&t.row(0)).sqrt() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn weights_depend_only_on_seed() {
        let a = ToyEncoder::new(11, spec(2));
        let b = ToyEncoder::new(11, spec(2));
        let c = ToyEncoder::new(12, spec(2));
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn context_overflow_is_reported() {
        let enc = ToyEncoder::new(0, spec(0));
        let tokens = Array2::zeros((9, 6));
        assert!(matches!(
            enc.encode_tokens(tokens.view()),
            Err(Error::ContextOverflow { len: 9, max: 8 })
        ));
    }

    #[test]
    fn zero_image_maps_to_e1() {
        let enc = ToyEncoder::new(0, spec(2));
        let img = enc.encode_image(&vec![0.0; enc.input_dim()]).unwrap();
        let mut e1 = Array1::zeros(8);
        e1[0] = 1.0;
        assert_eq!(img.global, e1);
        for row in img.locals.axis_iter(Axis(0)) {
            assert_eq!(row, e1.view());
        }
    }

    #[test]
    fn image_shape_mismatch_is_rejected() {
        let enc = ToyEncoder::new(0, spec(2));
        assert!(matches!(
            enc.encode_image(&[0.0; 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cache_backend_passes_rows_through() {
        let backend = CacheBackend::new(2, 1);
        let row = [0.6f32, 0.8, 1.0, 0.0];
        let img = backend.encode_image(&row).unwrap();
        assert_eq!(img.to_row(), row.to_vec());
        assert!(backend.encode_image(&[0.6, 0.8, 1.0]).is_err());
        assert!(matches!(
            backend.encode_image(&[2.0, 0.0, 1.0, 0.0]),
            Err(Error::Validation(_))
        ));
    }
}
