//! Checkpoint files.
//!
//! Layout: a UTF-8 manifest, one item per line, terminated by `end\n`,
//! followed immediately by the raw payload.
//!
//! ```text
//! mixfuse-checkpoint
//! format_version = 1
//! config n_layers = 2
//! ...                                  one `config` line per model key
//! param <name> <dim> <dim> ...         in parameter order
//! optimizer <step>                     optional
//! end
//! ```
//!
//! The payload is every parameter's values as little-endian f64, in manifest
//! order, then (if the optimizer line is present) the first and second
//! moments of every parameter, again in manifest order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWState, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "mixfuse-checkpoint";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: FusionConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamWState>,
}

fn put(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n");
        for line in self.config.to_lines() {
            header.push_str(&format!("config {line}\n"));
        }
        for (name, t) in self.params.iter() {
            header.push_str(&format!("param {name}"));
            for d in t.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        if let Some(opt) = &self.optimizer {
            header.push_str(&format!("optimizer {}\n", opt.step));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, t) in self.params.iter() {
            put(&mut out, t.data());
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in self.params.iter() {
                let zeros = vec![0.0; t.len()];
                match opt.moments.get(name) {
                    Some(m) => {
                        put(&mut out, &m.m);
                        put(&mut out, &m.v);
                    }
                    None => {
                        put(&mut out, &zeros);
                        put(&mut out, &zeros);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        let end = find_header_end(bytes).ok_or_else(|| corrupt("missing manifest terminator"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("manifest is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("format_version = "))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| corrupt("missing format_version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let mut config = FusionConfig::default();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut opt_step = None;
        for line in lines {
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("config ") {
                let (k, v) = kv.split_once(" = ").ok_or_else(|| corrupt(line))?;
                if !config.set(k, v).map_err(|_| corrupt(line))? {
                    return Err(corrupt(&format!("unknown config key in `{line}`")));
                }
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split(' ');
                let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| corrupt(line))?;
                let dims = parts.map(|d| d.parse::<usize>().map_err(|_| corrupt(line))).collect::<Result<Vec<_>>>()?;
                shapes.push((name.to_string(), dims));
            } else if let Some(step) = line.strip_prefix("optimizer ") {
                opt_step = Some(step.parse::<u64>().map_err(|_| corrupt(line))?);
            } else {
                return Err(corrupt(&format!("unexpected manifest line `{line}`")));
            }
        }
        let mut payload = &bytes[end..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if payload.len() < n * 8 {
                return Err(corrupt("payload truncated"));
            }
            let (head, tail) = payload.split_at(n * 8);
            payload = tail;
            Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut params = ParamStore::new();
        for (name, dims) in &shapes {
            let n = dims.iter().product();
            let t = Tensor::new(dims.clone(), take(n)?).map_err(|_| corrupt(&format!("bad shape for {name}")))?;
            params.insert(name.clone(), t);
        }
        let optimizer = match opt_step {
            None => None,
            Some(step) => {
                let mut moments = IndexMap::new();
                for (name, t) in params.iter() {
                    let m = take(t.len())?;
                    let v = take(t.len())?;
                    moments.insert(name.to_string(), Moments { m, v });
                }
                Some(AdamWState { step, moments })
            }
        };
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self { config, params, optimizer })
    }

    /// Checks that this checkpoint provides exactly the parameters `expected`
    /// declares, with the same shapes.
    pub fn check_params(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in expected.iter() {
            let found = self.params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
            if found.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    found: found.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    const END: &[u8] = b"\nend\n";
    bytes.windows(END.len()).position(|w| w == END).map(|i| i + END.len())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
