//! The dual prompt bank: a learnable forced prompt and a frozen original
//! prompt, both of the form `[v_1, ..., v_L, w_c]`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView3, ArrayViewMut3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, EncoderSpec, TextEncoder, TextFeatureSet, MANUAL_TEMPLATE};
use crate::error::{Error, Result};

/// Standard deviation of randomly initialized context rows.
pub const RANDOM_INIT_STD: f64 = 0.02;

const BANK_MAGIC: &[u8; 8] = b"FABANK1\0";
const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Manual,
    Random,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Manual => "manual",
            InitMode::Random => "random",
        })
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(InitMode::Manual),
            "random" => Ok(InitMode::Random),
            other => Err(Error::Config(format!(
                "unknown init mode `{other}` (expected manual or random)"
            ))),
        }
    }
}

/// Token embeddings of one prompt family.
///
/// `context` is `groups x L x token_dim`, where `groups` is 1 for a shared
/// context and `C` otherwise. Class-name rows are never learnable.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    context: Array3<f32>,
    class_tokens: Vec<Array2<f32>>,
    learnable: bool,
    shared: bool,
    init_mode: InitMode,
}

impl PromptContext {
    /// Builds a frozen prompt family. Use [`PromptContext::into_learnable`]
    /// to mark it trainable.
    pub fn build(
        class_names: &[String],
        spec: &EncoderSpec,
        init_mode: InitMode,
        shared: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(class_names, spec, init_mode, shared, &mut rng)
    }

    fn build_with_rng(
        class_names: &[String],
        spec: &EncoderSpec,
        init_mode: InitMode,
        shared: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        validate_class_names(class_names)?;
        let class_tokens = class_names
            .iter()
            .map(|name| class_token_rows(name, spec))
            .collect::<Result<Vec<_>>>()?;
        let groups = if shared { 1 } else { class_names.len() };
        let len = MANUAL_TEMPLATE.len();
        let td = spec.token_dim;
        let context = match init_mode {
            InitMode::Manual => {
                let mut template = Array2::<f32>::zeros((len, td));
                for (i, token) in MANUAL_TEMPLATE.iter().enumerate() {
                    let row = spec.vocab.get(token)?;
                    template.row_mut(i).assign(&ndarray::ArrayView1::from(row));
                }
                let mut ctx = Array3::zeros((groups, len, td));
                for mut g in ctx.axis_iter_mut(Axis(0)) {
                    g.assign(&template);
                }
                ctx
            }
            InitMode::Random => {
                let normal = Normal::new(0.0, RANDOM_INIT_STD).expect("finite std");
                Array3::from_shape_fn((groups, len, td), |_| normal.sample(rng) as f32)
            }
        };
        for tokens in &class_tokens {
            let total = len + tokens.nrows();
            if total > spec.max_context_len {
                return Err(Error::ContextOverflow {
                    len: total,
                    max: spec.max_context_len,
                });
            }
        }
        Ok(Self {
            context,
            class_tokens,
            learnable: false,
            shared,
            init_mode,
        })
    }

    pub fn into_learnable(mut self) -> Self {
        self.learnable = true;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    /// Context length `L`.
    pub fn context_len(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.context.shape()[2]
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn context(&self) -> ArrayView3<'_, f32> {
        self.context.view()
    }

    pub fn class_tokens(&self) -> &[Array2<f32>] {
        &self.class_tokens
    }

    /// Context group used by `class`.
    pub fn group_of(&self, class: usize) -> usize {
        if self.shared {
            0
        } else {
            class
        }
    }

    /// Full token sequence `[v_1..v_L, w_c]` for `class`, widened to f64.
    pub fn prompt_tokens(&self, class: usize) -> Array2<f64> {
        let ctx = self.context.index_axis(Axis(0), self.group_of(class));
        let cls = &self.class_tokens[class];
        let mut out = Array2::zeros((ctx.nrows() + cls.nrows(), ctx.ncols()));
        out.slice_mut(s![..ctx.nrows(), ..])
            .assign(&ctx.mapv(f64::from));
        out.slice_mut(s![ctx.nrows().., ..])
            .assign(&cls.mapv(f64::from));
        out
    }

    /// Same as [`prompt_tokens`](Self::prompt_tokens) but with an f64 context
    /// group substituted for the stored one (used for gradient checks and
    /// the optimizer's f64 master copy).
    pub fn prompt_tokens_with(&self, class: usize, context: ArrayView3<'_, f64>) -> Array2<f64> {
        let ctx = context.index_axis(Axis(0), self.group_of(class));
        let cls = &self.class_tokens[class];
        let mut out = Array2::zeros((ctx.nrows() + cls.nrows(), ctx.ncols()));
        out.slice_mut(s![..ctx.nrows(), ..]).assign(&ctx);
        out.slice_mut(s![ctx.nrows().., ..])
            .assign(&cls.mapv(f64::from));
        out
    }

    pub(crate) fn context_mut(&mut self) -> ArrayViewMut3<'_, f32> {
        self.context.view_mut()
    }
}

fn validate_class_names(class_names: &[String]) -> Result<()> {
    if class_names.is_empty() {
        return Err(Error::Validation(
            "at least one class name is required".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for name in class_names {
        if !seen.insert(name.as_str()) {
            return Err(Error::Validation(format!("duplicate class name `{name}`")));
        }
    }
    Ok(())
}

fn class_token_rows(name: &str, spec: &EncoderSpec) -> Result<Array2<f32>> {
    let tokens = tokenize(name);
    if tokens.is_empty() {
        return Err(Error::Validation(format!(
            "class name `{name}` has no tokens"
        )));
    }
    let mut rows = Array2::zeros((tokens.len(), spec.token_dim));
    for (i, token) in tokens.iter().enumerate() {
        let row = spec.vocab.get(token)?;
        rows.row_mut(i).assign(&ndarray::ArrayView1::from(row));
    }
    Ok(rows)
}

/// Per-prompt construction options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankOptions {
    pub forced_init: InitMode,
    pub original_init: InitMode,
    /// Shared context for the forced prompt; the original prompt is always
    /// a single shared template.
    pub shared: bool,
    pub k: f64,
    pub seed: u64,
}

impl BankOptions {
    pub fn new(init_mode: InitMode, shared: bool, k: f64, seed: u64) -> Self {
        Self {
            forced_init: init_mode,
            original_init: init_mode,
            shared,
            k,
            seed,
        }
    }
}

/// The forced prompt, its frozen reference and the forced coefficient `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPromptBank {
    pub forced: PromptContext,
    pub original: PromptContext,
    pub class_names: Vec<String>,
    k: f64,
    seed: u64,
}

/// Builds the dual bank with one init mode for both prompts.
pub fn build_dual_prompts(
    class_names: &[String],
    spec: &EncoderSpec,
    init_mode: InitMode,
    shared: bool,
    k: f64,
    seed: u64,
) -> Result<DualPromptBank> {
    DualPromptBank::build(
        class_names,
        spec,
        BankOptions::new(init_mode, shared, k, seed),
    )
}

impl DualPromptBank {
    pub fn build(class_names: &[String], spec: &EncoderSpec, opts: BankOptions) -> Result<Self> {
        if !(opts.k >= 0.0 && opts.k.is_finite()) {
            return Err(Error::Parameter(format!(
                "forced coefficient K must be a finite non-negative number, got {}",
                opts.k
            )));
        }
        // Forced draws first, original second, from one stream.
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let forced = PromptContext::build_with_rng(
            class_names,
            spec,
            opts.forced_init,
            opts.shared,
            &mut rng,
        )?
        .into_learnable();
        let original =
            PromptContext::build_with_rng(class_names, spec, opts.original_init, true, &mut rng)?;
        Ok(Self {
            forced,
            original,
            class_names: class_names.to_vec(),
            k: opts.k,
            seed: opts.seed,
        })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Mutable view of exactly the forced context rows.
    pub fn trainable_parameters(&mut self) -> ArrayViewMut3<'_, f32> {
        self.forced.context_mut()
    }

    pub fn num_trainable(&self) -> usize {
        self.forced.context.len()
    }

    /// Forced and original text features `(T^f, T^o)`.
    pub fn text_features<E: TextEncoder + ?Sized>(
        &self,
        encoder: &E,
    ) -> Result<(TextFeatureSet, TextFeatureSet)> {
        self.check_compatible(encoder.spec())?;
        Ok((
            encoder.encode_text(&self.forced)?,
            encoder.encode_text(&self.original)?,
        ))
    }

    pub fn check_compatible(&self, spec: &EncoderSpec) -> Result<()> {
        if self.forced.token_dim() != spec.token_dim {
            return Err(Error::Dimension {
                what: "bank token_dim",
                expected: spec.token_dim,
                actual: self.forced.token_dim(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Serialized form: magic, u32 header length, JSON header, then
    /// little-endian f32 forced context, original context and class tokens.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BankHeader {
            version: BANK_VERSION,
            num_classes: self.num_classes(),
            context_len: self.forced.context_len(),
            token_dim: self.forced.token_dim(),
            k: self.k,
            seed: self.seed,
            init_mode: self.forced.init_mode,
            shared: self.forced.shared,
            original_init_mode: self.original.init_mode,
            class_names: self.class_names.clone(),
            class_token_counts: self.forced.class_tokens.iter().map(|t| t.nrows()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let floats = self
            .forced
            .context
            .iter()
            .chain(self.original.context.iter())
            .chain(self.forced.class_tokens.iter().flat_map(|t| t.iter()));
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut reader, &mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format("not a prompt bank file (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        read_exact(&mut reader, &mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        if reader.len() < len {
            return Err(Error::Format("truncated bank header".into()));
        }
        let header: BankHeader = serde_json::from_slice(&reader[..len])
            .map_err(|e| Error::Format(format!("bank header: {e}")))?;
        reader = &reader[len..];
        if header.version != BANK_VERSION {
            return Err(Error::Format(format!(
                "unsupported bank version {} (expected {BANK_VERSION})",
                header.version
            )));
        }
        if header.class_names.len() != header.num_classes
            || header.class_token_counts.len() != header.num_classes
        {
            return Err(Error::Format(
                "class count disagrees with header lists".into(),
            ));
        }
        let (l, td, c) = (header.context_len, header.token_dim, header.num_classes);
        let groups = if header.shared { 1 } else { c };
        let forced_ctx = read_f32s(&mut reader, groups * l * td)?;
        let original_ctx = read_f32s(&mut reader, l * td)?;
        let mut class_tokens = Vec::with_capacity(c);
        for &m in &header.class_token_counts {
            let rows = read_f32s(&mut reader, m * td)?;
            class_tokens.push(Array2::from_shape_vec((m, td), rows).expect("sized read"));
        }
        if !reader.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after bank payload",
                reader.len()
            )));
        }
        let forced = PromptContext {
            context: Array3::from_shape_vec((groups, l, td), forced_ctx).expect("sized read"),
            class_tokens: class_tokens.clone(),
            learnable: true,
            shared: header.shared,
            init_mode: header.init_mode,
        };
        let original = PromptContext {
            context: Array3::from_shape_vec((1, l, td), original_ctx).expect("sized read"),
            class_tokens,
            learnable: false,
            shared: true,
            init_mode: header.original_init_mode,
        };
        Ok(Self {
            forced,
            original,
            class_names: header.class_names,
            k: header.k,
            seed: header.seed,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    version: u32,
    num_classes: usize,
    context_len: usize,
    token_dim: usize,
    k: f64,
    seed: u64,
    init_mode: InitMode,
    shared: bool,
    original_init_mode: InitMode,
    class_names: Vec<String>,
    class_token_counts: Vec<usize>,
}

fn read_exact(reader: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::Format("truncated bank file".into()))
}

fn read_f32s(reader: &mut &[u8], count: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; count * 4];
    read_exact(reader, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}
