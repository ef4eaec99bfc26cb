//! Checkpoints: model parameters, batch-norm statistics, optimizer moments
//! and trainer counters in one file.
//!
//! ```text
//! "NHGLN1\n"
//! u32 LE: manifest byte length
//! manifest text, one entry per line: "name dim0,dim1,... offset"
//!   (offset = byte offset of the entry inside the payload region)
//! payload: raw little-endian f64 in manifest order
//! ```

use super::adam::Adam;
use super::TrainError;
use crate::autodiff::HostTensor;
use crate::model::{BnState, ModelDims, ModelParams};
use std::fmt::Write as _;
use std::path::Path;

pub const MAGIC: &[u8] = b"NHGLN1\n";

/// Serialize named sections in order.
pub fn save_sections(
    path: &Path,
    sections: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<(), TrainError> {
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (name, shape, data) in sections {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let dims = if dims.is_empty() {
            "-".to_string()
        } else {
            dims.join(",")
        };
        writeln!(manifest, "{name} {dims} {offset}").expect("string write");
        offset += 8 * data.len();
    }
    let mut out: Vec<u8> = Vec::with_capacity(MAGIC.len() + 4 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, _, data) in sections {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read back every section.
pub fn load_sections(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, TrainError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TrainError::CheckpointFormat {
            offset: 0,
            message: "bad magic (expected NHGLN1)".into(),
        });
    }
    let mut off = MAGIC.len();
    if bytes.len() < off + 4 {
        return Err(TrainError::CheckpointFormat {
            offset: bytes.len(),
            message: "truncated manifest length".into(),
        });
    }
    let mlen = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
        as usize;
    off += 4;
    if bytes.len() < off + mlen {
        return Err(TrainError::CheckpointFormat {
            offset: bytes.len(),
            message: "truncated manifest".into(),
        });
    }
    let manifest = std::str::from_utf8(&bytes[off..off + mlen]).map_err(|_| {
        TrainError::CheckpointFormat {
            offset: off,
            message: "manifest is not utf-8".into(),
        }
    })?;
    let payload_start = off + mlen;
    let payload = &bytes[payload_start..];

    // First pass: parse entries and compute lengths from offset deltas.
    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut entries: Vec<Entry> = Vec::new();
    for (ln, line) in manifest.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(TrainError::CheckpointFormat {
                offset: off,
                message: format!("manifest line {} malformed: {line:?}", ln + 1),
            });
        }
        let shape: Vec<usize> = if toks[1] == "-" {
            Vec::new()
        } else {
            toks[1]
                .split(',')
                .map(|d| {
                    d.parse().map_err(|_| TrainError::CheckpointFormat {
                        offset: off,
                        message: format!("bad dimension {d:?} in {line:?}"),
                    })
                })
                .collect::<Result<_, _>>()?
        };
        let offset: usize = toks[2].parse().map_err(|_| TrainError::CheckpointFormat {
            offset: off,
            message: format!("bad offset in {line:?}"),
        })?;
        entries.push(Entry {
            name: toks[0].to_string(),
            shape,
            offset,
        });
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let count: usize = e.shape.iter().product();
        let bytes_needed = 8 * count;
        if payload.len() < e.offset + bytes_needed {
            return Err(TrainError::CheckpointFormat {
                offset: payload_start + e.offset,
                message: format!(
                    "section {} needs {bytes_needed} bytes at payload offset {}, file too short",
                    e.name, e.offset
                ),
            });
        }
        let data: Vec<f64> = payload[e.offset..e.offset + bytes_needed]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        out.push((e.name.clone(), e.shape.clone(), data));
    }
    Ok(out)
}

/// Full trainer snapshot.
pub struct TrainerState {
    pub params: ModelParams,
    pub bn: BnState,
    pub adam: Adam,
    pub step: u64,
    pub next_epoch: usize,
}

/// Write parameters, BN statistics, optimizer moments (for parameters the
/// optimizer has seen) and the step/epoch counters.
pub fn save_state(path: &Path, state: &TrainerState) -> Result<(), TrainError> {
    let mut sections: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    state
        .params
        .for_each(|name, t| sections.push((name.to_string(), t.shape.clone(), t.data.clone())));
    state
        .bn
        .for_each(|name, data| sections.push((name.to_string(), vec![data.len()], data.to_vec())));
    state.params.for_each(|name, t| {
        if let Some((m, v)) = state.adam.moments(name) {
            sections.push((format!("opt.m.{name}"), t.shape.clone(), m.to_vec()));
            sections.push((format!("opt.v.{name}"), t.shape.clone(), v.to_vec()));
        }
    });
    sections.push((
        "meta.trainer".into(),
        vec![2],
        vec![state.step as f64, state.next_epoch as f64],
    ));
    save_sections(path, &sections)
}

/// Restore a full trainer snapshot, checking every shape against the model
/// dimensions; mismatches produce a multi-line report naming each offender.
pub fn load_state(path: &Path, dims: &ModelDims) -> Result<TrainerState, TrainError> {
    let sections = load_sections(path)?;
    let mut map: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = sections
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();

    let mut params = ModelParams::init(dims, 0);
    let mut report = String::new();
    params.for_each_mut(|name, t| match map.remove(name) {
        Some((shape, data)) if shape == t.shape => {
            t.data = data;
        }
        Some((shape, _)) => {
            let _ = writeln!(
                report,
                "parameter {name}: checkpoint shape {shape:?} vs model shape {:?}",
                t.shape
            );
        }
        None => {
            let _ = writeln!(report, "parameter {name}: missing from checkpoint");
        }
    });
    let mut bn = BnState::identity(dims);
    bn.for_each_mut(|name, data| match map.remove(name) {
        Some((shape, values)) if shape == vec![data.len()] => *data = values,
        Some((shape, _)) => {
            let _ = writeln!(
                report,
                "statistic {name}: checkpoint shape {shape:?} vs expected [{}]",
                data.len()
            );
        }
        None => {
            let _ = writeln!(report, "statistic {name}: missing from checkpoint");
        }
    });
    if !report.is_empty() {
        return Err(TrainError::CheckpointShape { report });
    }

    let mut adam = Adam::new();
    params.for_each(|name, t| {
        let (Some((ms, m)), Some((vs, v))) = (
            map.remove(&format!("opt.m.{name}")),
            map.remove(&format!("opt.v.{name}")),
        ) else {
            return;
        };
        if ms == t.shape && vs == t.shape {
            adam.set_moments(name, m, v);
        }
    });
    let (step, next_epoch) = match map.remove("meta.trainer") {
        Some((_, meta)) if meta.len() == 2 => (meta[0] as u64, meta[1] as usize),
        _ => (0, 0),
    };
    adam.set_step(step);
    Ok(TrainerState {
        params,
        bn,
        adam,
        step,
        next_epoch,
    })
}

/// Restore only parameters and BN statistics (for evaluation and export).
pub fn load_model(path: &Path, dims: &ModelDims) -> Result<(ModelParams, BnState), TrainError> {
    let state = load_state(path, dims)?;
    Ok((state.params, state.bn))
}

/// Convenience for tests: one named tensor per section.
pub fn host_tensor_sections(named: &[(&str, &HostTensor)]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    named
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape.clone(), t.data.clone()))
        .collect()
}
