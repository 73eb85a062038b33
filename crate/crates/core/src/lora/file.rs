use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LoraAdaptor, LoraPair, LoraTarget};
use crate::error::{Error, Result};
use crate::io::{read_framed, write_framed};

pub const ADAPTOR_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LORA";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    adaptor_id: String,
    group_id: String,
    rank: usize,
    alpha: f64,
    targets: Vec<LoraTarget>,
    /// `[A rows, A cols, B rows, B cols]` per target.
    shapes: Vec<[usize; 4]>,
}

/// Header followed by each target's `A` then `B`, row-major f32.
pub fn save_adaptor(adaptor: &LoraAdaptor, path: &Path) -> Result<()> {
    let header = Header {
        format_version: ADAPTOR_FORMAT_VERSION,
        adaptor_id: adaptor.adaptor_id.clone(),
        group_id: adaptor.group_id.clone(),
        rank: adaptor.rank,
        alpha: adaptor.alpha,
        targets: adaptor.pairs.iter().map(|p| p.target).collect(),
        shapes: adaptor
            .pairs
            .iter()
            .map(|p| [p.a.nrows(), p.a.ncols(), p.b.nrows(), p.b.ncols()])
            .collect(),
    };
    let payload = adaptor
        .pairs
        .iter()
        .flat_map(|p| p.a.iter().chain(p.b.iter()).copied());
    write_framed(path, MAGIC, &header, payload)
}

pub fn load_adaptor(path: &Path) -> Result<LoraAdaptor> {
    let (header, floats) = read_framed::<Header>(path, MAGIC, |h| {
        if h.format_version != ADAPTOR_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: ADAPTOR_FORMAT_VERSION,
                found: h.format_version,
            });
        }
        if h.targets.len() != h.shapes.len() {
            return Err(Error::corrupt(path, "targets and shapes differ in length"));
        }
        Ok(h.shapes.iter().map(|s| s[0] * s[1] + s[2] * s[3]).sum())
    })?;
    if header.rank == 0 {
        return Err(Error::corrupt(path, "rank 0"));
    }
    let mut offset = 0;
    let mut pairs = Vec::with_capacity(header.targets.len());
    for (target, s) in header.targets.iter().zip(&header.shapes) {
        if s[0] != header.rank || s[3] != header.rank {
            return Err(Error::corrupt(path, format!("pair {target} disagrees with rank")));
        }
        let na = s[0] * s[1];
        let nb = s[2] * s[3];
        let a = Array2::from_shape_vec((s[0], s[1]), floats[offset..offset + na].to_vec()).expect("sized");
        offset += na;
        let b = Array2::from_shape_vec((s[2], s[3]), floats[offset..offset + nb].to_vec()).expect("sized");
        offset += nb;
        pairs.push(LoraPair { target: *target, a, b });
    }
    Ok(LoraAdaptor {
        adaptor_id: header.adaptor_id,
        group_id: header.group_id,
        rank: header.rank,
        alpha: header.alpha,
        pairs,
    })
}
