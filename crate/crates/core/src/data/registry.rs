//! Benchmark registry: benchmark name to one ID manifest and its OOD
//! manifests (or a synthetic generator configuration).
//!
//! File paths are resolved against a data root, normally
//! `$FA_OOD_DATA_ROOT`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::manifest::{load_manifest, DatasetManifest};
use crate::data::synthetic::{self, SyntheticConfig};
use crate::data::Dataset;
use crate::encoder::{EncoderSpec, ToyEncoder};
use crate::error::{Error, Result};

pub const DATA_ROOT_ENV: &str = "FA_OOD_DATA_ROOT";
const REGISTRY_SCHEMA_VERSION: u32 = 1;
const BUNDLED_REGISTRY: &str = include_str!("registry.json");

/// Token width of the toy text encoder paired with file-backed benchmarks.
pub const DEFAULT_TOKEN_DIM: usize = 32;
pub const DEFAULT_MAX_CONTEXT: usize = 77;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub schema_version: u32,
    pub benchmarks: Vec<RegistryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// ID manifest path, relative to the data root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// OOD manifest paths in report column order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ood: Vec<String>,
}

impl Registry {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_REGISTRY).expect("bundled registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let registry: Self =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("registry: {e}")))?;
        if registry.schema_version != REGISTRY_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "registry schema version {} unsupported",
                registry.schema_version
            )));
        }
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn names(&self) -> Vec<&str> {
        self.benchmarks.iter().map(|b| b.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifestRef {
    File {
        path: PathBuf,
        manifest: DatasetManifest,
    },
    Synthetic {
        config: SyntheticConfig,
        dataset: String,
    },
}

impl ManifestRef {
    pub fn name(&self) -> &str {
        match self {
            ManifestRef::File { manifest, .. } => &manifest.name,
            ManifestRef::Synthetic { dataset, .. } => dataset,
        }
    }
}

/// A resolved benchmark: one ID dataset and its OOD datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub name: String,
    pub id_dataset: ManifestRef,
    pub ood_datasets: Vec<ManifestRef>,
}

/// Data root from `$FA_OOD_DATA_ROOT`, else the current directory.
pub fn data_root_from_env() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve_benchmark(
    name: &str,
    registry: &Registry,
    data_root: &Path,
) -> Result<BenchmarkSpec> {
    let entry = registry
        .benchmarks
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| {
            Error::Lookup(format!(
                "unknown benchmark `{name}` (registered: {})",
                registry.names().join(", ")
            ))
        })?;
    if let Some(config) = &entry.synthetic {
        return Ok(BenchmarkSpec {
            name: entry.name.clone(),
            id_dataset: ManifestRef::Synthetic {
                config: config.clone(),
                dataset: synthetic::ID_NAME.into(),
            },
            ood_datasets: [synthetic::OOD_NEAR_NAME, synthetic::OOD_FAR_NAME]
                .iter()
                .map(|d| ManifestRef::Synthetic {
                    config: config.clone(),
                    dataset: d.to_string(),
                })
                .collect(),
        });
    }
    let id_rel = entry.id.as_ref().ok_or_else(|| {
        Error::Format(format!(
            "registry entry `{name}` has neither `synthetic` nor `id`"
        ))
    })?;
    if entry.ood.is_empty() {
        return Err(Error::Format(format!(
            "registry entry `{name}` lists no OOD datasets"
        )));
    }
    let mut seen = BTreeSet::new();
    seen.insert(id_rel.as_str());
    for ood in &entry.ood {
        if !seen.insert(ood.as_str()) {
            return Err(Error::Format(format!(
                "registry entry `{name}`: manifest `{ood}` is listed twice"
            )));
        }
    }
    let open = |rel: &str| -> Result<ManifestRef> {
        let path = data_root.join(rel);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "benchmark `{name}`: dataset manifest not found at {} (place it there or set {DATA_ROOT_ENV})",
                path.display()
            )));
        }
        let manifest = load_manifest(&path)?;
        Ok(ManifestRef::File { path, manifest })
    };
    let id_dataset = open(id_rel)?;
    if let ManifestRef::File { manifest, .. } = &id_dataset {
        if manifest.num_classes() < 2 {
            return Err(Error::Data(format!(
                "benchmark `{name}`: ID dataset `{}` must have at least 2 classes",
                manifest.name
            )));
        }
    }
    let ood_datasets = entry
        .ood
        .iter()
        .map(|rel| open(rel))
        .collect::<Result<Vec<_>>>()?;
    for ood in &ood_datasets {
        if let ManifestRef::File { manifest, path } = ood {
            if !manifest.is_ood() {
                return Err(Error::Data(format!(
                    "benchmark `{name}`: {} is listed as OOD but declares classes",
                    path.display()
                )));
            }
        }
    }
    Ok(BenchmarkSpec {
        name: entry.name.clone(),
        id_dataset,
        ood_datasets,
    })
}

/// Loaded datasets plus the text encoder they are evaluated with.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub id: Dataset,
    pub ood: Vec<Dataset>,
    pub encoder: ToyEncoder,
}

impl Benchmark {
    pub fn load(spec: &BenchmarkSpec) -> Result<Self> {
        if let ManifestRef::Synthetic { config, .. } = &spec.id_dataset {
            let generated = synthetic::generate(config)?;
            return Ok(Self {
                name: spec.name.clone(),
                id: generated.id,
                ood: generated.ood,
                encoder: generated.encoder,
            });
        }
        let load = |r: &ManifestRef| -> Result<Dataset> {
            match r {
                ManifestRef::File { path, .. } => Dataset::load(path),
                ManifestRef::Synthetic { .. } => Err(Error::Format(
                    "cannot mix synthetic and file datasets in one benchmark".into(),
                )),
            }
        };
        let id = load(&spec.id_dataset)?;
        let ood = spec
            .ood_datasets
            .iter()
            .map(load)
            .collect::<Result<Vec<_>>>()?;
        for o in &ood {
            if o.cache.dim() != id.cache.dim() || o.cache.num_locals() != id.cache.num_locals() {
                return Err(Error::Data(format!(
                    "dataset `{}` cache shape ({}, {}) differs from ID ({}, {})",
                    o.manifest.name,
                    o.cache.dim(),
                    o.cache.num_locals(),
                    id.cache.dim(),
                    id.cache.num_locals()
                )));
            }
        }
        let encoder_spec = EncoderSpec::for_classes(
            &id.manifest.class_names,
            id.cache.dim(),
            DEFAULT_TOKEN_DIM,
            id.cache.num_locals(),
            DEFAULT_MAX_CONTEXT,
            0,
        )?;
        Ok(Self {
            name: spec.name.clone(),
            id,
            ood,
            encoder: ToyEncoder::new(0, encoder_spec),
        })
    }
}
