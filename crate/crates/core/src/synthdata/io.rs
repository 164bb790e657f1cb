//! Binary dataset container.
//!
//! Layout: `NPXDATA1`, then little-endian u32 `count, T, H, W, J`, then per
//! trajectory the raw little-endian f64 blocks `times[T]`, `joints[T×J]`,
//! `frames[T×H×W]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{Trajectory, FRAME_H, FRAME_LEN, FRAME_W, JOINTS};

pub const DATASET_MAGIC: &[u8; 8] = b"NPXDATA1";
const HEADER_LEN: usize = 8 + 5 * 4;

pub fn encode_dataset(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let t = trajs.first().map_or(0, Trajectory::len);
    if trajs.iter().any(|tr| tr.len() != t) {
        return Err(Error::Contract("all trajectories in a dataset must share T".into()));
    }
    let per = t * (1 + JOINTS + FRAME_LEN) * 8;
    let mut buf = Vec::with_capacity(HEADER_LEN + trajs.len() * per);
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [trajs.len(), t, FRAME_H, FRAME_W, JOINTS] {
        let v = u32::try_from(v).map_err(|_| Error::Contract(format!("header field {v} overflows u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for tr in trajs {
        for &x in &tr.times {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for j in &tr.joints {
            for &x in j {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        for f in &tr.frames {
            for &x in f {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Vec<Trajectory>> {
    let malformed = |detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(malformed(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let magic = &bytes[..8];
    if magic != DATASET_MAGIC {
        if magic[..7] == DATASET_MAGIC[..7] {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(magic).into_owned(),
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            });
        }
        return Err(malformed("bad magic".into()));
    }
    let field = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (count, t, h, w, j) = (field(0), field(1), field(2), field(3), field(4));
    if (h, w, j) != (FRAME_H, FRAME_W, JOINTS) {
        return Err(malformed(format!("unsupported geometry H={h} W={w} J={j}")));
    }
    let per = t
        .checked_mul((1 + JOINTS + FRAME_LEN) * 8)
        .ok_or_else(|| malformed("T overflows".into()))?;
    let expected = count
        .checked_mul(per)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| malformed("count overflows".into()))?;
    if bytes.len() != expected {
        return Err(malformed(format!(
            "expected {expected} bytes for {count} trajectories of length {t}, found {}",
            bytes.len()
        )));
    }
    if count > 0 && t == 0 {
        return Err(malformed("non-empty dataset with T=0".into()));
    }

    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let times: Vec<f64> = floats.by_ref().take(t).collect();
        let joints = (0..t)
            .map(|_| {
                let mut q = [0.0; JOINTS];
                q.iter_mut().for_each(|v| *v = floats.next().unwrap());
                q
            })
            .collect();
        let frames = (0..t).map(|_| floats.by_ref().take(FRAME_LEN).collect()).collect();
        out.push(Trajectory::new(times, joints, frames)?);
    }
    Ok(out)
}

pub fn save_dataset(trajs: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(trajs)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}
