//! File formats.
//!
//! **TPM1** (`.tpm`): little-endian binary matrix.
//!
//! ```text
//! offset 0   b"TPM1"
//! offset 4   rows  u32
//! offset 8   cols  u32
//! offset 12  rows * cols f32, row-major
//! ```
//!
//! The file is exactly `12 + 4 * rows * cols` bytes. Values are widened to
//! `f64` on read and narrowed to `f32` on write.
//!
//! **CSV** (`.csv`): one row per line, comma-separated, no header.
//!
//! **Config** (JSON object): `layers`, `dim`, `heads`, `tokens`, optional
//! `mlp_ratio`, `schedule`, `alpha`, `mode`. Unknown keys are rejected.
//! A schedule file is a bare JSON array of non-negative integers.
//!
//! **Weights directory**: `block{l}_{name}.tpm` for `l` in `0..layers` and
//! `name` in `wq`, `wk`, `wv` (`M x M`, head `h` in columns `h*d..(h+1)*d`),
//! `wo` (`M x M`), `mlp1` (`M x rM`), `mlp2` (`rM x M`).

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::costmodel::{ModelConfig, DEFAULT_MLP_RATIO};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::transformer::{AttentionMaps, AttentionMode, BlockWeights};

pub const TPM_MAGIC: &[u8; 4] = b"TPM1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Tpm,
    Csv,
}

impl MatrixFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tpm") => Ok(MatrixFormat::Tpm),
            Some(e) if e.eq_ignore_ascii_case("csv") => Ok(MatrixFormat::Csv),
            _ => Err(Error::usage(format!(
                "{}: matrix files must end in .tpm or .csv",
                path.display()
            ))),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn encode_tpm(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::data("too many rows for TPM1"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::data("too many columns for TPM1"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(TPM_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for (i, &v) in m.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::data(format!(
                "value {v} at index {i} is not representable as a finite f32"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tpm(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::data(format!(
            "truncated header: {} bytes at offset 0, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != TPM_MAGIC {
        return Err(Error::data(format!(
            "bad magic {:?} at offset 0, expected \"TPM1\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::data(format!("shape {rows}x{cols} at offset 4 overflows")))?;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "payload length mismatch at offset {}: file has {} bytes, {rows}x{cols} needs {expected}",
            bytes.len().min(expected),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::data(format!(
                "non-finite value at offset {}",
                HEADER_LEN + 4 * i
            )));
        }
        data.push(v as f64);
    }
    Matrix::new(rows, cols, data)
}

pub fn encode_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for r in m.row_iter() {
        let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn decode_csv(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::data(format!(
                    "line {}, column {}: `{}` is not a number",
                    ln + 1,
                    col + 1,
                    cell.trim()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "line {}, column {}: non-finite value",
                    ln + 1,
                    col + 1
                )));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::data(format!(
                    "line {}: {} columns, expected {}",
                    ln + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Reads a `.tpm` or `.csv` matrix.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let prefix = |e: Error| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    };
    match MatrixFormat::from_path(path)? {
        MatrixFormat::Tpm => decode_tpm(&read_bytes(path)?).map_err(prefix),
        MatrixFormat::Csv => {
            let bytes = read_bytes(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|e| Error::data(format!("{}: invalid UTF-8 at byte {}", path.display(), e.utf8_error().valid_up_to())))?;
            decode_csv(&text).map_err(prefix)
        }
    }
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    match MatrixFormat::from_path(path)? {
        MatrixFormat::Tpm => write_bytes(path, &encode_tpm(m)?),
        MatrixFormat::Csv => {
            m.check_finite()?;
            write_bytes(path, encode_csv(m).as_bytes())
        }
    }
}

/// Attention maps stored as one `(H*N) x N` matrix.
pub fn read_attention(path: impl AsRef<Path>, heads: usize) -> Result<AttentionMaps> {
    AttentionMaps::from_stacked(&read_matrix(path)?, heads)
}

pub fn write_attention(path: impl AsRef<Path>, maps: &AttentionMaps) -> Result<()> {
    write_matrix(path, &maps.to_stacked())
}

fn parse_json(text: &str, origin: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| {
        Error::data(format!(
            "{origin}: invalid JSON at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })
}

fn count_field(obj: &Map<String, Value>, key: &str) -> Result<Option<usize>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| Error::data(format!("`{key}` must be a non-negative integer, got {v}"))),
    }
}

fn required_count(obj: &Map<String, Value>, key: &str) -> Result<usize> {
    match count_field(obj, key)? {
        Some(0) => Err(Error::data(format!("`{key}` must be positive"))),
        Some(n) => Ok(n),
        None => Err(Error::data(format!("missing required key `{key}`"))),
    }
}

fn schedule_from_value(v: &Value, key: &str) -> Result<Vec<usize>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::data(format!("`{key}` must be an array of integers")))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_u64().map(|n| n as usize).ok_or_else(|| {
                Error::data(format!("`{key}[{i}]` must be a non-negative integer, got {x}"))
            })
        })
        .collect()
}

const CONFIG_KEYS: [&str; 8] = ["layers", "dim", "heads", "mlp_ratio", "tokens", "schedule", "alpha", "mode"];

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let value = parse_json(text, "config")?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::data("config must be a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
        return Err(Error::data(format!("unknown config key `{k}`")));
    }
    let layers = required_count(obj, "layers")?;
    let dim = required_count(obj, "dim")?;
    let heads = required_count(obj, "heads")?;
    let tokens = required_count(obj, "tokens")?;
    let mlp_ratio = match count_field(obj, "mlp_ratio")? {
        Some(0) => return Err(Error::data("`mlp_ratio` must be positive")),
        Some(r) => r,
        None => DEFAULT_MLP_RATIO,
    };
    if dim % heads != 0 {
        return Err(Error::data(format!(
            "`heads` ({heads}) must divide `dim` ({dim})"
        )));
    }
    let schedule = match obj.get("schedule") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let s = schedule_from_value(v, "schedule")?;
            if s.len() != layers {
                return Err(Error::data(format!(
                    "`schedule` has {} entries but `layers` is {layers}",
                    s.len()
                )));
            }
            Some(s)
        }
    };
    let alpha = match obj.get("alpha") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_f64() {
            Some(a) if a.is_finite() && a > 0.0 => Some(a),
            _ => return Err(Error::data(format!("`alpha` must be a positive number, got {v}"))),
        },
    };
    let mode = match obj.get("mode") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(
            s.parse::<AttentionMode>()
                .map_err(|_| Error::data(format!("`mode` must be standard, normalized_alpha or carry, got `{s}`")))?,
        ),
        Some(v) => return Err(Error::data(format!("`mode` must be a string, got {v}"))),
    };
    let config = ModelConfig {
        layers,
        dim,
        heads,
        mlp_ratio,
        tokens,
        schedule,
        alpha,
        mode,
    };
    config.validate().map_err(|e| match e {
        Error::Usage(m) | Error::Data(m) => Error::data(m),
    })?;
    Ok(config)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| Error::data(format!("{}: not UTF-8", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_schedule(text: &str) -> Result<Vec<usize>> {
    schedule_from_value(&parse_json(text, "schedule")?, "schedule")
}

pub fn read_schedule(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| Error::data(format!("{}: not UTF-8", path.display())))?;
    parse_schedule(&text).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn weight_path(dir: &Path, layer: usize, name: &str) -> std::path::PathBuf {
    dir.join(format!("block{layer}_{name}.tpm"))
}

pub fn write_block_weights(dir: impl AsRef<Path>, weights: &[BlockWeights]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::data(format!("{}: {e}", dir.display())))?;
    for (l, w) in weights.iter().enumerate() {
        write_matrix(weight_path(dir, l, "wq"), &Matrix::hstack(&w.wq)?)?;
        write_matrix(weight_path(dir, l, "wk"), &Matrix::hstack(&w.wk)?)?;
        write_matrix(weight_path(dir, l, "wv"), &Matrix::hstack(&w.wv)?)?;
        write_matrix(weight_path(dir, l, "wo"), &w.wo)?;
        write_matrix(weight_path(dir, l, "mlp1"), &w.mlp1)?;
        write_matrix(weight_path(dir, l, "mlp2"), &w.mlp2)?;
    }
    Ok(())
}

/// Loads `config.layers` blocks. `alpha` comes from the config (default 1).
pub fn read_block_weights(dir: impl AsRef<Path>, config: &ModelConfig) -> Result<Vec<BlockWeights>> {
    let dir = dir.as_ref();
    config.validate()?;
    let m = config.dim;
    let hidden = config.mlp_ratio * m;
    (0..config.layers)
        .map(|l| {
            let load = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
                let p = weight_path(dir, l, name);
                let mat = read_matrix(&p)?;
                if mat.shape() != shape {
                    return Err(Error::data(format!(
                        "{}: shape {:?}, expected {shape:?}",
                        p.display(),
                        mat.shape()
                    )));
                }
                Ok(mat)
            };
            BlockWeights::from_full(
                config.heads,
                &load("wq", (m, m))?,
                &load("wk", (m, m))?,
                &load("wv", (m, m))?,
                load("wo", (m, m))?,
                load("mlp1", (m, hidden))?,
                load("mlp2", (hidden, m))?,
                Some(config.alpha.unwrap_or(1.0)),
            )
        })
        .collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tpm_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::new(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 1e3).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let bytes = encode_tpm(&m).unwrap();
            prop_assert_eq!(bytes.len(), 12 + 4 * rows * cols);
            let back = decode_tpm(&bytes).unwrap();
            let narrowed = m.map(|v| v as f32 as f64);
            prop_assert_eq!(&back, &narrowed);
            // a second pass is byte-exact
            prop_assert_eq!(encode_tpm(&back).unwrap(), bytes);
        }

        #[test]
        fn csv_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::new(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            prop_assert_eq!(decode_csv(&encode_csv(&m)).unwrap(), m);
        }
    }
}
