//! Plain-text checkpoint format.
//!
//! ```text
//! ctfwp-checkpoint 1
//! arch mode=ncde rule=delta heads=2 ...
//! param <name> <ndim> <dim>...
//! <values, 17 significant digits, whitespace separated>
//! ```
//!
//! Values are written with `{:.16e}`, which round-trips every finite `f64`
//! bit-exactly through `str::parse`.

use std::io::{BufRead, Write};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "ctfwp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const VALUES_PER_LINE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Architecture description, `key=value` pairs in write order.
    pub arch: IndexMap<String, String>,
    pub params: ParamStore,
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    write!(out, "arch")?;
    for (k, v) in &ckpt.arch {
        if k.contains([' ', '=']) || v.contains(' ') || v.is_empty() {
            return Err(Error::Checkpoint(format!("unencodable arch entry `{k}={v}`")));
        }
        write!(out, " {k}={v}")?;
    }
    writeln!(out)?;
    writeln!(out, "seed {}", ckpt.params.rng_seed())?;
    for (name, t) in ckpt.params.iter() {
        write!(out, "param {name} {}", t.shape().len())?;
        for d in t.shape() {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        for chunk in t.data().chunks(VALUES_PER_LINE) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint> {
    let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, l)) => Ok((n, l?)),
            None => Err(Error::Checkpoint(format!("unexpected end of file, expected {what}"))),
        }
    };

    let (n, header) = next("version line")?;
    let mut it = header.split_whitespace();
    if it.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(n, "not a checkpoint file"));
    }
    let version: u32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "missing version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(n, &format!("unsupported version {version}")));
    }

    let (n, arch_line) = next("arch line")?;
    let mut arch_it = arch_line.split_whitespace();
    if arch_it.next() != Some("arch") {
        return Err(bad(n, "expected `arch`"));
    }
    let mut arch = IndexMap::new();
    for kv in arch_it {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(n, &format!("bad arch entry `{kv}`")))?;
        arch.insert(k.to_string(), v.to_string());
    }

    let (n, seed_line) = next("seed line")?;
    let seed = seed_line
        .strip_prefix("seed ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad(n, "expected `seed <u64>`"))?;
    let mut params = ParamStore::new(seed);

    let mut pending: Option<(usize, String, Vec<usize>, Vec<f64>)> = None;
    let finish = |p: &mut ParamStore, item: (usize, String, Vec<usize>, Vec<f64>)| -> Result<()> {
        let (line, name, shape, data) = item;
        let t = Tensor::new(shape, data).map_err(|e| bad(line, &format!("parameter `{name}`: {e}")))?;
        p.insert(name, t)
    };
    while let Ok((n, line)) = next("") {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            if let Some(item) = pending.take() {
                finish(&mut params, item)?;
            }
            let mut f = rest.split_whitespace();
            let name = f.next().ok_or_else(|| bad(n, "missing parameter name"))?.to_string();
            let ndim: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "missing ndim"))?;
            let shape: Vec<usize> = f.map(|d| d.parse().map_err(|_| bad(n, "bad dimension"))).collect::<Result<_>>()?;
            if shape.len() != ndim {
                return Err(bad(n, "dimension count does not match ndim"));
            }
            pending = Some((n, name, shape, Vec::new()));
        } else {
            let item = pending.as_mut().ok_or_else(|| bad(n, "values before any `param` line"))?;
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| bad(n, &format!("bad number `{tok}`")))?;
                item.3.push(v);
            }
        }
    }
    if let Some(item) = pending.take() {
        finish(&mut params, item)?;
    }
    Ok(Checkpoint { arch, params })
}
