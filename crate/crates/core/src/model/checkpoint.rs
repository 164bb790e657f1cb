//! Checkpoint container.
//!
//! Layout: `NPXCKPT1`, u32 length of a UTF-8 config block of `key=value`
//! lines, the block itself, u32 parameter count, then per parameter: u32 name
//! length, name bytes, u32 rank, u64 extents, raw f64 values. All integers
//! and floats are little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dmbn, ModelConfig, TimeMode};
use crate::numerics::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NPXCKPT1";

const CONFIG_KEYS: [&str; 8] = [
    "time_mode",
    "hidden_dim",
    "conv_widths",
    "joint_widths",
    "decoder_widths",
    "blend_weight",
    "var_floor",
    "seed",
];

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn config_block(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "time_mode={}", cfg.time_mode);
    let _ = writeln!(s, "hidden_dim={}", cfg.hidden_dim);
    let _ = writeln!(s, "conv_widths={}", join(&cfg.conv_widths));
    let _ = writeln!(s, "joint_widths={}", join(&cfg.joint_widths));
    let _ = writeln!(s, "decoder_widths={}", join(&cfg.decoder_widths));
    // `{}` on f64 prints the shortest string that parses back to the same bits.
    let _ = writeln!(s, "blend_weight={}", cfg.blend_weight);
    let _ = writeln!(s, "var_floor={}", cfg.var_floor);
    let _ = writeln!(s, "seed={}", cfg.seed);
    s
}

pub fn parse_config_block(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut cfg = ModelConfig::new(TimeMode::Channel);
    let mut seen = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {line:?} lacks '='"))?;
        let bad = |e: &dyn std::fmt::Display| format!("bad value for {k}: {e}");
        let list = |v: &str| -> std::result::Result<Vec<usize>, String> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| x.parse::<usize>().map_err(|e| bad(&e))).collect()
        };
        match k {
            "time_mode" => cfg.time_mode = v.parse().map_err(|e: Error| bad(&e))?,
            "hidden_dim" => cfg.hidden_dim = v.parse().map_err(|e| bad(&e))?,
            "conv_widths" => cfg.conv_widths = list(v)?,
            "joint_widths" => cfg.joint_widths = list(v)?,
            "decoder_widths" => cfg.decoder_widths = list(v)?,
            "blend_weight" => cfg.blend_weight = v.parse().map_err(|e| bad(&e))?,
            "var_floor" => cfg.var_floor = v.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = v.parse().map_err(|e| bad(&e))?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        if seen.contains(&k) {
            return Err(format!("duplicate config key {k:?}"));
        }
        seen.push(k);
    }
    if let Some(missing) = CONFIG_KEYS.iter().find(|k| !seen.contains(k)) {
        return Err(format!("missing config key {missing:?}"));
    }
    Ok(cfg)
}

pub fn encode_checkpoint(model: &Dmbn) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let block = config_block(model.config());
    buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
    buf.extend_from_slice(block.as_bytes());
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| format!("extent {v} overflows"))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Dmbn> {
    let malformed = |detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(malformed("shorter than the magic".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        if bytes[..7] == CHECKPOINT_MAGIC[..7] {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            });
        }
        return Err(malformed("bad magic".into()));
    }
    let mut r = Reader { bytes, pos: 8 };
    let parsed = (|| -> std::result::Result<(ModelConfig, ParameterSet), String> {
        let n = r.u32()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|e| format!("config block: {e}"))?;
        let cfg = parse_config_block(text)?;
        let count = r.u32()?;
        let mut params = ParameterSet::new();
        for _ in 0..count {
            let nl = r.u32()?;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|e| format!("parameter name: {e}"))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or("parameter size overflows")?;
            let data = r
                .take(len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            params.insert(name, t).map_err(|e| e.to_string())?;
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok((cfg, params))
    })();
    let (cfg, params) = parsed.map_err(malformed)?;
    Dmbn::from_parts(cfg, params)
}

pub fn save_checkpoint(model: &Dmbn, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Dmbn> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
