//! Bundled synthetic benchmark: Gaussian clusters in embedding space.
//!
//! ID class `c` is centred on `normalize(t^o_c + detail * r_c + domain * s)`,
//! where `t^o_c` is the toy encoder's feature for "a photo of a <class>",
//! `r_c` a class-specific direction and `s` a direction shared by every ID
//! image. The two OOD sets sit at controlled distances: `ood-near` clusters
//! around the mean class-prompt direction plus unrelated detail, `ood-far`
//! around random directions.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::cache::EmbeddingCache;
use crate::data::manifest::{
    DatasetManifest, ManifestEntry, MANIFEST_SCHEMA_VERSION, SPLIT_TEST, SPLIT_TRAIN,
};
use crate::data::Dataset;
use crate::encoder::{EncoderSpec, ImageFeatures, TextEncoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::numeric::normalize_or_e1;
use crate::prompt::{InitMode, PromptContext};

const CLASS_NAMES: [&str; 40] = [
    "tench",
    "goldfish",
    "shark",
    "hen",
    "ostrich",
    "goldfinch",
    "junco",
    "bulbul",
    "jay",
    "magpie",
    "chickadee",
    "kite",
    "vulture",
    "newt",
    "axolotl",
    "bullfrog",
    "terrapin",
    "gecko",
    "iguana",
    "chameleon",
    "agama",
    "alligator",
    "trilobite",
    "scorpion",
    "tarantula",
    "centipede",
    "grouse",
    "peacock",
    "quail",
    "partridge",
    "macaw",
    "toucan",
    "drake",
    "goose",
    "swan",
    "tusker",
    "echidna",
    "platypus",
    "wallaby",
    "koala",
];

pub const ID_NAME: &str = "toy-id";
pub const OOD_NEAR_NAME: &str = "ood-near";
pub const OOD_FAR_NAME: &str = "ood-far";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub num_locals: usize,
    pub max_context_len: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_set: usize,
    pub encoder_seed: u64,
    pub data_seed: u64,
    /// Weight of the class-specific direction in ID centres.
    pub class_detail: f64,
    /// Weight of the direction shared by all ID images.
    pub domain_shift: f64,
    /// Weight of the unrelated direction in near-OOD centres.
    pub near_detail: f64,
    pub global_noise: f64,
    pub local_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            embed_dim: 128,
            token_dim: 32,
            num_locals: 4,
            max_context_len: 16,
            train_per_class: 32,
            test_per_class: 25,
            ood_per_set: 500,
            encoder_seed: 0,
            data_seed: 1,
            class_detail: 0.5,
            domain_shift: 0.5,
            near_detail: 0.6,
            global_noise: 0.6,
            local_noise: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|i| match CLASS_NAMES.get(i) {
                Some(name) => name.to_string(),
                None => format!("class{i}"),
            })
            .collect()
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        EncoderSpec::for_classes(
            &self.class_names(),
            self.embed_dim,
            self.token_dim,
            self.num_locals,
            self.max_context_len,
            self.encoder_seed,
        )
    }

    pub fn encoder(&self) -> Result<ToyEncoder> {
        Ok(ToyEncoder::new(self.encoder_seed, self.encoder_spec()?))
    }
}

/// Generated datasets plus the toy encoder they were built against.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub encoder: ToyEncoder,
    pub id: Dataset,
    pub ood: Vec<Dataset>,
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v = Array1::from_iter((0..d).map(|_| {
        let x: f64 = StandardNormal.sample(rng);
        x
    }));
    normalize_or_e1(v).0
}

/// Noisy unit vector around `center`; the noise has expected norm `scale`.
fn jitter(rng: &mut ChaCha8Rng, center: &Array1<f64>, scale: f64) -> Array1<f64> {
    let d = center.len();
    let sd = scale / (d as f64).sqrt();
    let noisy = center.mapv(|c| {
        let x: f64 = StandardNormal.sample(rng);
        c + sd * x
    });
    normalize_or_e1(noisy).0
}

fn sample(
    rng: &mut ChaCha8Rng,
    center: &Array1<f64>,
    cfg: &SyntheticConfig,
) -> Result<ImageFeatures> {
    let global = jitter(rng, center, cfg.global_noise);
    let mut locals = Array2::zeros((cfg.num_locals, cfg.embed_dim));
    for mut row in locals.axis_iter_mut(Axis(0)) {
        row.assign(&jitter(rng, center, cfg.local_noise));
    }
    ImageFeatures::new(global, locals)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    if cfg.num_classes < 2 {
        return Err(Error::Config(
            "synthetic benchmark needs at least 2 classes".into(),
        ));
    }
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 || cfg.ood_per_set == 0 {
        return Err(Error::Config(
            "synthetic split sizes must be positive".into(),
        ));
    }
    let names = cfg.class_names();
    let encoder = cfg.encoder()?;
    let original = PromptContext::build(&names, encoder.spec(), InitMode::Manual, true, 0)?;
    let prompt_features = encoder.encode_text(&original)?;
    let d = cfg.embed_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let domain = random_unit(&mut rng, d);
    let centers: Vec<Array1<f64>> = (0..cfg.num_classes)
        .map(|c| {
            let detail = random_unit(&mut rng, d);
            let raw = &prompt_features.row(c)
                + &(detail * cfg.class_detail)
                + &(&domain * cfg.domain_shift);
            normalize_or_e1(raw).0
        })
        .collect();

    let mut id_cache = EmbeddingCache::new(d, cfg.num_locals);
    let mut id_entries = Vec::new();
    for (split, per_class) in [
        (SPLIT_TRAIN, cfg.train_per_class),
        (SPLIT_TEST, cfg.test_per_class),
    ] {
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                id_entries.push(ManifestEntry {
                    row: Some(id_cache.len()),
                    path: None,
                    label: c as i64,
                    split: split.to_string(),
                });
                id_cache.push_features(&sample(&mut rng, center, cfg)?)?;
            }
        }
    }
    let id = Dataset::new(
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            name: ID_NAME.into(),
            class_names: names,
            cache: None,
            entries: id_entries,
        },
        id_cache,
    )?;

    let mean_prompt = normalize_or_e1(prompt_features.as_array().sum_axis(Axis(0))).0;
    let clusters = (cfg.num_classes / 2).max(1);
    let near: Vec<Array1<f64>> = (0..clusters)
        .map(|_| {
            let q = random_unit(&mut rng, d);
            normalize_or_e1(&mean_prompt + &(q * cfg.near_detail)).0
        })
        .collect();
    let far: Vec<Array1<f64>> = (0..clusters).map(|_| random_unit(&mut rng, d)).collect();

    let mut ood = Vec::new();
    for (name, set_centers) in [(OOD_NEAR_NAME, near), (OOD_FAR_NAME, far)] {
        let mut cache = EmbeddingCache::new(d, cfg.num_locals);
        let mut entries = Vec::new();
        for i in 0..cfg.ood_per_set {
            entries.push(ManifestEntry {
                row: Some(i),
                path: None,
                label: -1,
                split: SPLIT_TEST.into(),
            });
            cache.push_features(&sample(&mut rng, &set_centers[i % clusters], cfg)?)?;
        }
        ood.push(Dataset::new(
            DatasetManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                name: name.into(),
                class_names: Vec::new(),
                cache: None,
                entries,
            },
            cache,
        )?);
    }
    Ok(SyntheticBenchmark { encoder, id, ood })
}
