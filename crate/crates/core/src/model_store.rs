//! Versioned JSON model files.
//!
//! Numbers are written with 17 significant digits so a save/load cycle
//! reproduces every `f64` exactly. Matrices are stored row-major, one row
//! per line, which keeps files diffable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::Deserialize;
use thiserror::Error;

use crate::hmm_core::ChainParams;
use crate::spectral::StftConfig;
use crate::trainer::{HmmNmfModel, ModelMeta, SourceRole};

pub const SCHEMA_VERSION: u32 = 1;
/// Tolerance for the invariants checked on load.
pub const LOAD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: schema violation: {detail}")]
    SchemaViolation { path: PathBuf, detail: String },
    #[error("{path}: invalid model: {detail}")]
    InvariantViolation { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    role: SourceRole,
    states: usize,
    basis: usize,
    bins: usize,
    meta: MetaFile,
    pi: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    bases: Vec<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    seed: u64,
    iterations: usize,
    #[serde(default)]
    created: Option<String>,
    stft: StftConfig,
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn row<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let parts: Vec<String> = values.into_iter().map(|&x| num(x)).collect();
    format!("[{}]", parts.join(", "))
}

fn rows(out: &mut String, m: &Array2<f64>, indent: &str) {
    let n = m.nrows();
    for (i, r) in m.rows().into_iter().enumerate() {
        let sep = if i + 1 < n { "," } else { "" };
        let _ = writeln!(out, "{indent}{}{sep}", row(r.iter()));
    }
}

/// Serializes a model. Does not validate it.
pub fn to_string(model: &HmmNmfModel) -> String {
    let meta = &model.meta;
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"schema_version\": {SCHEMA_VERSION},");
    let _ = writeln!(out, "  \"role\": \"{}\",", meta.role);
    let _ = writeln!(out, "  \"states\": {},", model.num_states());
    let _ = writeln!(out, "  \"basis\": {},", model.basis_count());
    let _ = writeln!(out, "  \"bins\": {},", model.bins());
    let _ = writeln!(
        out,
        "  \"meta\": {{\"seed\": {}, \"iterations\": {}, \"created\": {}, \"stft\": {}}},",
        meta.seed,
        meta.iterations,
        serde_json::to_string(&meta.created).expect("string serializes"),
        serde_json::to_string(&meta.stft).expect("config serializes"),
    );
    let _ = writeln!(out, "  \"pi\": {},", row(model.chain.initial.iter()));
    out.push_str("  \"transitions\": [\n");
    rows(&mut out, &model.chain.transitions, "    ");
    out.push_str("  ],\n");
    out.push_str("  \"bases\": [\n");
    for (j, w) in model.bases.iter().enumerate() {
        out.push_str("    [\n");
        rows(&mut out, w, "      ");
        let sep = if j + 1 < model.bases.len() { "," } else { "" };
        let _ = writeln!(out, "    ]{sep}");
    }
    out.push_str("  ]\n}\n");
    out
}

fn to_matrix(rows: Vec<Vec<f64>>, shape: (usize, usize), what: &str) -> Result<Array2<f64>, String> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(format!("{what} does not match the declared {}x{} shape", shape.0, shape.1));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec(shape, flat).map_err(|e| e.to_string())
}

fn decode(text: &str, path: &Path) -> Result<HmmNmfModel, StoreError> {
    let schema = |detail: String| StoreError::SchemaViolation {
        path: path.to_path_buf(),
        detail,
    };
    let file: ModelFile = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(schema(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let (j, k, f) = (file.states, file.basis, file.bins);
    if j == 0 || k == 0 || f == 0 {
        return Err(schema("states, basis and bins must be positive".into()));
    }
    if file.pi.len() != j {
        return Err(schema(format!("pi has {} entries, header says {j}", file.pi.len())));
    }
    if file.bases.len() != j {
        return Err(schema(format!("{} bases, header says {j}", file.bases.len())));
    }
    let transitions = to_matrix(file.transitions, (j, j), "transitions").map_err(schema)?;
    let bases = file
        .bases
        .into_iter()
        .enumerate()
        .map(|(i, b)| to_matrix(b, (f, k), &format!("basis {i}")))
        .collect::<Result<Vec<_>, _>>()
        .map_err(schema)?;

    let model = HmmNmfModel {
        chain: ChainParams {
            initial: Array1::from(file.pi),
            transitions,
        },
        bases,
        meta: ModelMeta {
            role: file.role,
            seed: file.meta.seed,
            iterations: file.meta.iterations,
            stft: file.meta.stft,
            created: file.meta.created,
        },
    };
    model
        .validate(LOAD_TOLERANCE)
        .map_err(|detail| StoreError::InvariantViolation {
            path: path.to_path_buf(),
            detail,
        })?;
    Ok(model)
}

/// Parses and validates a model from text. `origin` only labels errors.
pub fn from_str(text: &str, origin: &Path) -> Result<HmmNmfModel, StoreError> {
    decode(text, origin)
}

pub fn save(model: &HmmNmfModel, path: &Path) -> Result<(), StoreError> {
    fs::write(path, to_string(model)).map_err(|source| StoreError::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<HmmNmfModel, StoreError> {
    let text = fs::read_to_string(path).map_err(|source| StoreError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> HmmNmfModel {
        HmmNmfModel {
            chain: ChainParams::new(array![1.0], array![[1.0]]).unwrap(),
            bases: vec![array![[0.25], [0.75]]],
            meta: ModelMeta {
                role: SourceRole::Noise,
                seed: 7,
                iterations: 3,
                stft: StftConfig::default(),
                created: None,
            },
        }
    }

    fn two_state() -> HmmNmfModel {
        let third = 1.0 / 3.0;
        HmmNmfModel {
            chain: ChainParams::new(array![0.1, 0.9], array![[third, 1.0 - third], [0.7, 0.3]]).unwrap(),
            bases: vec![
                array![[0.1, std::f64::consts::FRAC_1_PI], [0.2, 0.5], [0.7, 0.5 - std::f64::consts::FRAC_1_PI]],
                array![[1e-12, 0.4], [0.5, 0.4], [0.5 - 1e-12, 0.2]],
            ],
            meta: ModelMeta {
                role: SourceRole::Speech,
                seed: 42,
                iterations: 30,
                stft: StftConfig::default(),
                created: Some("2026-01-01T00:00:00Z".into()),
            },
        }
    }

    #[test]
    fn toy_model_layout() {
        let text = to_string(&toy());
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["schema_version"], 1);
        assert_eq!(value["role"], "noise");
        assert_eq!((value["states"].as_u64(), value["basis"].as_u64(), value["bins"].as_u64()), (Some(1), Some(1), Some(2)));
        assert_eq!(value["bases"][0].as_array().unwrap().len(), 2);
        assert_eq!(value["meta"]["stft"]["hop"], 512);
        assert!(text.contains("[2.5000000000000000e-1]"));
        assert_eq!(from_str(&text, Path::new("toy")).unwrap(), toy());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = two_state();
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, model);
        save(&back, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), to_string(&model));
    }

    #[test]
    fn corrupted_header_is_a_schema_violation() {
        let text = to_string(&two_state()).replace("\"bins\": 3", "\"bins\": 4");
        assert!(matches!(
            from_str(&text, Path::new("x")),
            Err(StoreError::SchemaViolation { .. })
        ));
        let text = to_string(&two_state()).replace("\"states\": 2", "\"states\": 3");
        assert!(matches!(
            from_str(&text, Path::new("x")),
            Err(StoreError::SchemaViolation { .. })
        ));
        let text = to_string(&two_state()).replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(
            from_str(&text, Path::new("x")),
            Err(StoreError::SchemaViolation { .. })
        ));
        assert!(matches!(
            from_str("{\"schema_version\": 1", Path::new("x")),
            Err(StoreError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn non_stochastic_row_is_rejected() {
        let mut model = two_state();
        model.chain.transitions[[1, 0]] = 0.71;
        let err = from_str(&to_string(&model), Path::new("bad")).unwrap_err();
        assert!(matches!(err, StoreError::InvariantViolation { .. }), "{err}");

        // within tolerance is accepted
        let mut model = two_state();
        model.chain.transitions[[1, 0]] += 1e-8;
        assert!(from_str(&to_string(&model), Path::new("ok")).is_ok());
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            load(Path::new("/nonexistent/model.json")),
            Err(StoreError::IoFailure { .. })
        ));
    }
}
