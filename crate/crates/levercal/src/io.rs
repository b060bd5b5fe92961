//! File formats: motion datasets, pose trajectories, ground-truth
//! sidecars, calibration results, and flat key/value configuration.
//!
//! Every format is line-delimited text with a one-line versioned header.
//! Numbers are serialized with 17 significant digits so a write/parse
//! round trip reproduces each `f64` bit for bit, and parsing is strict:
//! anything that deviates from the documented grammar is an error, not a
//! guess.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use levercal_core::qcqp::MotionStep;
use levercal_core::{Certificate, MotionVerdict, Rotation, Transform};
use nalgebra::Vector3;
use thiserror::Error;

/// Header line of a motion file, version 1.
const MOTION_MAGIC: &str = "levercal motion v1";
/// Header line of a pose trajectory file, version 1.
const POSES_MAGIC: &str = "levercal poses v1";
/// Header line of a ground-truth sidecar, version 1.
const TRUTH_MAGIC: &str = "levercal truth v1";
/// Header line of a calibration result file, version 1.
const RESULT_MAGIC: &str = "levercal result v1";

/// Quaternion rows must have unit norm within this tolerance.
const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

/// Errors raised by the strict file parsers.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: {message}")]
    RecordSyntax { line: usize, message: String },
    #[error("line {line}: quaternion norm {norm} is not unit within 1e-6")]
    NonUnitQuaternion { line: usize, norm: f64 },
    #[error("line {line}: expected {expected} antenna columns, found {found}")]
    AntennaCountMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: step index {index} does not increase monotonically")]
    NonMonotoneStep { line: usize, index: i64 },
    #[error("config key {0:?} is missing")]
    MissingKey(String),
    #[error("config key {key:?}: {message}")]
    BadValue { key: String, message: String },
}

/// Parsed motion-file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionHeader {
    /// Number of antennas each record carries.
    pub antennas: usize,
}

/// A parsed calibration result, mirroring what `write_result_file`
/// emits so results round-trip losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultFile {
    pub lever_arms: Vec<Vector3<f64>>,
    pub mu: f64,
    pub primal_cost: f64,
    pub dual_bound: f64,
    pub duality_gap: f64,
    pub certificate: Certificate,
    pub null_space_dim: usize,
    pub verdict: MotionVerdict,
    /// Tool name and version that produced the file.
    pub tool: String,
}

/// Formats one `f64` with 17 significant digits (round-trip exact).
fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

fn parse_f64(token: &str, line: usize) -> Result<f64, IoError> {
    let value: f64 = token.parse().map_err(|_| IoError::RecordSyntax {
        line,
        message: format!("invalid number {token:?}"),
    })?;
    if !value.is_finite() {
        return Err(IoError::RecordSyntax {
            line,
            message: format!("non-finite number {token:?}"),
        });
    }
    Ok(value)
}

fn parse_rotation(tokens: &[&str], line: usize) -> Result<Rotation, IoError> {
    let w = parse_f64(tokens[0], line)?;
    let x = parse_f64(tokens[1], line)?;
    let y = parse_f64(tokens[2], line)?;
    let z = parse_f64(tokens[3], line)?;
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(IoError::NonUnitQuaternion { line, norm });
    }
    Ok(Rotation::from_unit_quaternion(w, x, y, z))
}

fn parse_vector3(tokens: &[&str], line: usize) -> Result<Vector3<f64>, IoError> {
    Ok(Vector3::new(
        parse_f64(tokens[0], line)?,
        parse_f64(tokens[1], line)?,
        parse_f64(tokens[2], line)?,
    ))
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })
}

fn write_string(path: &Path, content: &str) -> Result<(), IoError> {
    fs::write(path, content).map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Serializes motion steps into the canonical motion-file text.
///
/// Each record line is `k qw qx qy qz tx ty tz` followed by one
/// `bx by bz` triple per antenna.
pub fn motion_file_to_string(steps: &[MotionStep]) -> String {
    let antennas = steps.first().map_or(0, |s| s.antenna_motions.len());
    let mut out = format!("{MOTION_MAGIC} antennas={antennas}\n");
    for (k, step) in steps.iter().enumerate() {
        let [w, x, y, z] = step.imu_motion.rotation.quaternion_wxyz();
        let t = &step.imu_motion.translation;
        out.push_str(&format!(
            "{k} {} {} {} {} {} {} {}",
            fmt_f64(w),
            fmt_f64(x),
            fmt_f64(y),
            fmt_f64(z),
            fmt_f64(t.x),
            fmt_f64(t.y),
            fmt_f64(t.z)
        ));
        for b in &step.antenna_motions {
            out.push_str(&format!(" {} {} {}", fmt_f64(b.x), fmt_f64(b.y), fmt_f64(b.z)));
        }
        out.push('\n');
    }
    out
}

/// Writes a motion file to disk.
pub fn write_motion_file(path: &Path, steps: &[MotionStep]) -> Result<(), IoError> {
    write_string(path, &motion_file_to_string(steps))
}

/// Parses a motion file, validating every record.
pub fn parse_motion_file(path: &Path) -> Result<(Vec<MotionStep>, MotionHeader), IoError> {
    parse_motion_str(&read_to_string(path)?)
}

/// Parses motion-file text, validating the header, column counts,
/// quaternion norms, and step-index monotonicity.
pub fn parse_motion_str(content: &str) -> Result<(Vec<MotionStep>, MotionHeader), IoError> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| IoError::MalformedHeader("empty file".into()))?;
    let antennas = parse_motion_header(header)?;
    let mut steps = Vec::new();
    let mut previous_index: Option<i64> = None;
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        let expected = 8 + 3 * antennas;
        if tokens.len() != expected {
            if tokens.len() >= 8 && (tokens.len() - 8) % 3 == 0 {
                return Err(IoError::AntennaCountMismatch {
                    line,
                    expected: antennas,
                    found: (tokens.len() - 8) / 3,
                });
            }
            return Err(IoError::RecordSyntax {
                line,
                message: format!("expected {expected} columns, found {}", tokens.len()),
            });
        }
        let index: i64 = tokens[0].parse().map_err(|_| IoError::RecordSyntax {
            line,
            message: format!("invalid step index {:?}", tokens[0]),
        })?;
        if let Some(prev) = previous_index {
            if index <= prev {
                return Err(IoError::NonMonotoneStep { line, index });
            }
        }
        previous_index = Some(index);
        let rotation = parse_rotation(&tokens[1..5], line)?;
        let translation = parse_vector3(&tokens[5..8], line)?;
        let mut antenna_motions = Vec::with_capacity(antennas);
        for a in 0..antennas {
            let base = 8 + 3 * a;
            antenna_motions.push(parse_vector3(&tokens[base..base + 3], line)?);
        }
        steps.push(MotionStep {
            imu_motion: Transform::new(rotation, translation),
            antenna_motions,
        });
    }
    Ok((steps, MotionHeader { antennas }))
}

fn parse_motion_header(header: &str) -> Result<usize, IoError> {
    let rest = header
        .strip_prefix(MOTION_MAGIC)
        .ok_or_else(|| IoError::MalformedHeader(format!("expected {MOTION_MAGIC:?}")))?;
    let rest = rest.trim();
    let antennas = rest
        .strip_prefix("antennas=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| IoError::MalformedHeader(format!("bad antenna declaration {rest:?}")))?;
    if antennas == 0 {
        return Err(IoError::MalformedHeader("antennas=0".into()));
    }
    Ok(antennas)
}

/// Serializes a pose trajectory (`k qw qx qy qz tx ty tz` per line).
pub fn poses_to_string(poses: &[Transform]) -> String {
    let mut out = format!("{POSES_MAGIC}\n");
    for (k, pose) in poses.iter().enumerate() {
        let [w, x, y, z] = pose.rotation.quaternion_wxyz();
        let t = &pose.translation;
        out.push_str(&format!(
            "{k} {} {} {} {} {} {} {}\n",
            fmt_f64(w),
            fmt_f64(x),
            fmt_f64(y),
            fmt_f64(z),
            fmt_f64(t.x),
            fmt_f64(t.y),
            fmt_f64(t.z)
        ));
    }
    out
}

/// Writes a pose trajectory file.
pub fn write_poses_file(path: &Path, poses: &[Transform]) -> Result<(), IoError> {
    write_string(path, &poses_to_string(poses))
}

/// Parses a pose trajectory file.
pub fn parse_poses_file(path: &Path) -> Result<Vec<Transform>, IoError> {
    parse_poses_str(&read_to_string(path)?)
}

/// Parses pose-trajectory text.
pub fn parse_poses_str(content: &str) -> Result<Vec<Transform>, IoError> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| IoError::MalformedHeader("empty file".into()))?;
    if header.trim() != POSES_MAGIC {
        return Err(IoError::MalformedHeader(format!("expected {POSES_MAGIC:?}")));
    }
    let mut poses = Vec::new();
    let mut previous_index: Option<i64> = None;
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 8 {
            return Err(IoError::RecordSyntax {
                line,
                message: format!("expected 8 columns, found {}", tokens.len()),
            });
        }
        let index: i64 = tokens[0].parse().map_err(|_| IoError::RecordSyntax {
            line,
            message: format!("invalid step index {:?}", tokens[0]),
        })?;
        if let Some(prev) = previous_index {
            if index <= prev {
                return Err(IoError::NonMonotoneStep { line, index });
            }
        }
        previous_index = Some(index);
        let rotation = parse_rotation(&tokens[1..5], line)?;
        let translation = parse_vector3(&tokens[5..8], line)?;
        poses.push(Transform::new(rotation, translation));
    }
    Ok(poses)
}

/// Serializes ground-truth lever arms (`i x y z` per line, 1-based).
pub fn truth_to_string(arms: &[Vector3<f64>]) -> String {
    let mut out = format!("{TRUTH_MAGIC} antennas={}\n", arms.len());
    for (i, arm) in arms.iter().enumerate() {
        out.push_str(&format!(
            "{} {} {} {}\n",
            i + 1,
            fmt_f64(arm.x),
            fmt_f64(arm.y),
            fmt_f64(arm.z)
        ));
    }
    out
}

/// Writes the ground-truth sidecar.
pub fn write_truth_file(path: &Path, arms: &[Vector3<f64>]) -> Result<(), IoError> {
    write_string(path, &truth_to_string(arms))
}

/// Parses a ground-truth sidecar.
pub fn parse_truth_file(path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    parse_truth_str(&read_to_string(path)?)
}

/// Parses ground-truth text.
pub fn parse_truth_str(content: &str) -> Result<Vec<Vector3<f64>>, IoError> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| IoError::MalformedHeader("empty file".into()))?;
    let rest = header
        .strip_prefix(TRUTH_MAGIC)
        .ok_or_else(|| IoError::MalformedHeader(format!("expected {TRUTH_MAGIC:?}")))?;
    let declared = rest
        .trim()
        .strip_prefix("antennas=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| IoError::MalformedHeader(format!("bad antenna declaration {rest:?}")))?;
    let mut arms = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 4 {
            return Err(IoError::RecordSyntax {
                line,
                message: format!("expected 4 columns, found {}", tokens.len()),
            });
        }
        let index: usize = tokens[0].parse().map_err(|_| IoError::RecordSyntax {
            line,
            message: format!("invalid antenna index {:?}", tokens[0]),
        })?;
        if index != arms.len() + 1 {
            return Err(IoError::RecordSyntax {
                line,
                message: format!("antenna index {index} out of order"),
            });
        }
        arms.push(parse_vector3(&tokens[1..4], line)?);
    }
    if arms.len() != declared {
        return Err(IoError::MalformedHeader(format!(
            "header declares {declared} antennas, file has {}",
            arms.len()
        )));
    }
    Ok(arms)
}

fn certificate_name(certificate: Certificate) -> &'static str {
    match certificate {
        Certificate::CertifiedGlobal => "CertifiedGlobal",
        Certificate::VerifiedGlobal => "VerifiedGlobal",
        Certificate::LocalOnly => "LocalOnly",
    }
}

fn parse_certificate(token: &str, line: usize) -> Result<Certificate, IoError> {
    match token {
        "CertifiedGlobal" => Ok(Certificate::CertifiedGlobal),
        "VerifiedGlobal" => Ok(Certificate::VerifiedGlobal),
        "LocalOnly" => Ok(Certificate::LocalOnly),
        other => Err(IoError::RecordSyntax {
            line,
            message: format!("unknown certificate {other:?}"),
        }),
    }
}

fn verdict_name(verdict: MotionVerdict) -> &'static str {
    match verdict {
        MotionVerdict::FullyObservable => "FullyObservable",
        MotionVerdict::PlanarOnly => "PlanarOnly",
        MotionVerdict::Degenerate => "Degenerate",
    }
}

fn parse_verdict(token: &str, line: usize) -> Result<MotionVerdict, IoError> {
    match token {
        "FullyObservable" => Ok(MotionVerdict::FullyObservable),
        "PlanarOnly" => Ok(MotionVerdict::PlanarOnly),
        "Degenerate" => Ok(MotionVerdict::Degenerate),
        other => Err(IoError::RecordSyntax {
            line,
            message: format!("unknown verdict {other:?}"),
        }),
    }
}

/// Serializes a calibration result with a fixed key order.
pub fn result_to_string(result: &ResultFile) -> String {
    let mut out = format!("{RESULT_MAGIC}\n");
    out.push_str(&format!("antennas = {}\n", result.lever_arms.len()));
    for (i, arm) in result.lever_arms.iter().enumerate() {
        out.push_str(&format!(
            "arm {} = {} {} {}\n",
            i + 1,
            fmt_f64(arm.x),
            fmt_f64(arm.y),
            fmt_f64(arm.z)
        ));
    }
    out.push_str(&format!("mu = {}\n", fmt_f64(result.mu)));
    out.push_str(&format!("primal_cost = {}\n", fmt_f64(result.primal_cost)));
    out.push_str(&format!("dual_bound = {}\n", fmt_f64(result.dual_bound)));
    out.push_str(&format!("duality_gap = {}\n", fmt_f64(result.duality_gap)));
    out.push_str(&format!(
        "certificate = {}\n",
        certificate_name(result.certificate)
    ));
    out.push_str(&format!("null_space_dim = {}\n", result.null_space_dim));
    out.push_str(&format!("verdict = {}\n", verdict_name(result.verdict)));
    out.push_str(&format!("tool = {}\n", result.tool));
    out
}

/// Writes a calibration result file.
pub fn write_result_file(path: &Path, result: &ResultFile) -> Result<(), IoError> {
    write_string(path, &result_to_string(result))
}

/// Parses a calibration result file.
pub fn parse_result_file(path: &Path) -> Result<ResultFile, IoError> {
    parse_result_str(&read_to_string(path)?)
}

/// Parses calibration-result text, requiring the exact key order that
/// `result_to_string` emits.
pub fn parse_result_str(content: &str) -> Result<ResultFile, IoError> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| IoError::MalformedHeader("empty file".into()))?;
    if header.trim() != RESULT_MAGIC {
        return Err(IoError::MalformedHeader(format!("expected {RESULT_MAGIC:?}")));
    }
    let mut expect = |key: &str| -> Result<(usize, String), IoError> {
        let (idx, raw) = lines.next().ok_or_else(|| IoError::RecordSyntax {
            line: 0,
            message: format!("missing key {key:?}"),
        })?;
        let line = idx + 1;
        let (found, value) = raw.split_once('=').ok_or_else(|| IoError::RecordSyntax {
            line,
            message: "expected key = value".into(),
        })?;
        if found.trim() != key {
            return Err(IoError::RecordSyntax {
                line,
                message: format!("expected key {key:?}, found {:?}", found.trim()),
            });
        }
        Ok((line, value.trim().to_string()))
    };
    let (line, antennas) = expect("antennas")?;
    let antennas: usize = antennas.parse().map_err(|_| IoError::RecordSyntax {
        line,
        message: format!("invalid antenna count {antennas:?}"),
    })?;
    let mut lever_arms = Vec::with_capacity(antennas);
    for i in 0..antennas {
        let (line, value) = expect(&format!("arm {}", i + 1))?;
        let tokens: Vec<&str> = value.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(IoError::RecordSyntax {
                line,
                message: format!("expected 3 components, found {}", tokens.len()),
            });
        }
        lever_arms.push(parse_vector3(&tokens, line)?);
    }
    let (line, mu) = expect("mu")?;
    let mu = parse_f64(&mu, line)?;
    let (line, primal_cost) = expect("primal_cost")?;
    let primal_cost = parse_f64(&primal_cost, line)?;
    let (line, dual_bound) = expect("dual_bound")?;
    let dual_bound = parse_f64(&dual_bound, line)?;
    let (line, duality_gap) = expect("duality_gap")?;
    let duality_gap = parse_f64(&duality_gap, line)?;
    let (line, certificate) = expect("certificate")?;
    let certificate = parse_certificate(&certificate, line)?;
    let (line, null_space_dim) = expect("null_space_dim")?;
    let null_space_dim: usize = null_space_dim.parse().map_err(|_| IoError::RecordSyntax {
        line,
        message: format!("invalid null-space dimension {null_space_dim:?}"),
    })?;
    let (line, verdict) = expect("verdict")?;
    let verdict = parse_verdict(&verdict, line)?;
    let (_, tool) = expect("tool")?;
    Ok(ResultFile {
        lever_arms,
        mu,
        primal_cost,
        dual_bound,
        duality_gap,
        certificate,
        null_space_dim,
        verdict,
        tool,
    })
}

/// A parsed flat key/value configuration file.
///
/// Lines are `key = value`; blank lines and `#` comments are ignored.
/// Duplicate keys are rejected so typos cannot silently shadow values.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parses configuration text.
    pub fn from_str(content: &str) -> Result<Self, IoError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| IoError::RecordSyntax {
                line,
                message: "expected key = value".into(),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(IoError::RecordSyntax {
                    line,
                    message: "empty key".into(),
                });
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(IoError::RecordSyntax {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { values })
    }

    /// Loads a configuration file from disk.
    pub fn from_path(path: &Path) -> Result<Self, IoError> {
        Self::from_str(&read_to_string(path)?)
    }

    /// Returns the raw value for `key`, if present.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Returns the value for `key` or a missing-key error.
    pub fn require(&self, key: &str) -> Result<&str, IoError> {
        self.get(key).ok_or_else(|| IoError::MissingKey(key.to_string()))
    }

    /// Parses the value for `key` with `FromStr`, if present.
    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, IoError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| IoError::BadValue {
                key: key.to_string(),
                message: format!("cannot parse {raw:?}"),
            }),
        }
    }

    /// Parses the value for `key` with `FromStr`, requiring presence.
    pub fn parse_required<T: std::str::FromStr>(&self, key: &str) -> Result<T, IoError> {
        self.parse_opt(key)?
            .ok_or_else(|| IoError::MissingKey(key.to_string()))
    }

    /// Parses a whitespace-separated list value.
    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, IoError> {
        let raw = self.require(key)?;
        raw.split_whitespace()
            .map(|token| {
                token.parse().map_err(|_| IoError::BadValue {
                    key: key.to_string(),
                    message: format!("cannot parse list item {token:?}"),
                })
            })
            .collect()
    }

    /// Parses semicolon-separated 3-vectors, e.g. `0.5 0.3 0.2; 0 1 0`.
    pub fn parse_vectors(&self, key: &str) -> Result<Vec<Vector3<f64>>, IoError> {
        let raw = self.require(key)?;
        raw.split(';')
            .map(|chunk| {
                let parts: Vec<f64> = chunk
                    .split_whitespace()
                    .map(|token| {
                        token.parse().map_err(|_| IoError::BadValue {
                            key: key.to_string(),
                            message: format!("cannot parse component {token:?}"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if parts.len() != 3 {
                    return Err(IoError::BadValue {
                        key: key.to_string(),
                        message: format!("expected 3 components, found {}", parts.len()),
                    });
                }
                Ok(Vector3::new(parts[0], parts[1], parts[2]))
            })
            .collect()
    }
}
