//! Teacher checkpoint file: a flat little-endian binary.
//!
//! Layout:
//! ```text
//! bytes 0..4    magic "DLF1"
//! u32           family (0 = full, 1 = diagonal)
//! u32           n_classes
//! u32           n_keys
//! u32           state_len
//! f64 * |W|     W data, row-major (full: c*c*k values, diagonal: c*k)
//! f64 * |V|     V data, row-major (k * state_len values)
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use dlf_core::teacher::{TeacherFamily, TeacherParams};
use dlf_core::Tensor;

use crate::error::{CliError, Result};

const MAGIC: &[u8; 4] = b"DLF1";

pub fn write_checkpoint(path: &Path, teacher: &TeacherParams) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    let family = match teacher.family() {
        TeacherFamily::Full => 0u32,
        TeacherFamily::Diagonal => 1u32,
    };
    bytes.extend_from_slice(&family.to_le_bytes());
    bytes.extend_from_slice(&(teacher.n_classes() as u32).to_le_bytes());
    bytes.extend_from_slice(&(teacher.n_keys() as u32).to_le_bytes());
    bytes.extend_from_slice(&(teacher.state_len() as u32).to_le_bytes());
    for v in teacher.w().data().iter().chain(teacher.v().data()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<TeacherParams> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(display.clone(), e))?;
    let parse_err = |detail: &str| CliError::Runtime(dlf_core::DlfError::Parse {
        path: display.clone(),
        offset: 0,
        detail: detail.to_string(),
    });
    if bytes.len() < 20 {
        return Err(parse_err("checkpoint too short for its header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(parse_err("bad magic, expected \"DLF1\""));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let family = match u32_at(4) {
        0 => TeacherFamily::Full,
        1 => TeacherFamily::Diagonal,
        other => return Err(parse_err(&format!("unknown family tag {other}"))),
    };
    let n_classes = u32_at(8);
    let n_keys = u32_at(12);
    let state_len = u32_at(16);
    let w_len = match family {
        TeacherFamily::Full => n_classes * n_classes * n_keys,
        TeacherFamily::Diagonal => n_classes * n_keys,
    };
    let v_len = n_keys * state_len;
    let expected = 20 + 8 * (w_len + v_len);
    if bytes.len() != expected {
        return Err(parse_err(&format!(
            "expected {expected} bytes for the declared shapes, found {}",
            bytes.len()
        )));
    }
    let mut floats = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let w_data: Vec<f64> = floats.by_ref().take(w_len).collect();
    let v_data: Vec<f64> = floats.collect();
    let w_shape = match family {
        TeacherFamily::Full => vec![n_classes, n_classes, n_keys],
        TeacherFamily::Diagonal => vec![n_classes, n_keys],
    };
    let w = Tensor::from_vec(w_shape, w_data).map_err(CliError::Runtime)?;
    let v = Tensor::from_vec(vec![n_keys, state_len], v_data).map_err(CliError::Runtime)?;
    TeacherParams::from_tensors(family, w, v).map_err(CliError::Runtime)
}
