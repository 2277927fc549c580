//! Seeded synthetic classification tasks.
//!
//! `irregular_key_count`: events at random times in `[0, 1]`; each event
//! observes only the channel of its key (one of two), so the key channels are
//! mostly missing and the label (which key fired more often) is carried by
//! the observation pattern. Both keys occur at least once and never tie.
//! Noise channels are observed at every event.
//!
//! `delayed_recall`: every step shows a random one-hot value; `writes` of
//! them (the first step and others at random) also raise a write flag, the
//! remaining `distractors` do not. A final query step asks for the value of
//! the most recent write, so an additive memory sees all writes superposed.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SequenceRecord;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    IrregularKeyCount,
    DelayedRecall,
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irregular_key_count" => Ok(Self::IrregularKeyCount),
            "delayed_recall" => Ok(Self::DelayedRecall),
            other => Err(Error::Config(format!("unknown synthetic task `{other}` (irregular_key_count|delayed_recall)"))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::IrregularKeyCount => "irregular_key_count",
            Self::DelayedRecall => "delayed_recall",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub noise_channels: usize,
    pub noise_scale: f64,
    pub min_events: usize,
    pub max_events: usize,
    pub distractors: usize,
    pub n_values: usize,
    pub writes: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { noise_channels: 1, noise_scale: 0.5, min_events: 8, max_events: 24, distractors: 200, n_values: 2, writes: 5 }
    }
}

impl SynthKind {
    pub fn n_classes(self, opts: &SynthOptions) -> usize {
        match self {
            Self::IrregularKeyCount => 2,
            Self::DelayedRecall => opts.n_values,
        }
    }
}

fn rng_for(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Builds a key-count record from explicit events (`keys[i]` is 0 or 1).
pub fn key_count_record(id: &str, times: Vec<f64>, keys: &[usize], noise: &[Vec<f64>]) -> Result<SequenceRecord> {
    let n_noise = noise.first().map_or(0, Vec::len);
    let mut names = vec!["key_a".to_string(), "key_b".to_string()];
    names.extend((0..n_noise).map(|i| format!("noise{i}")));
    let rows = keys
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut r = vec![f64::NAN, f64::NAN];
            r[k] = 1.0;
            if n_noise > 0 {
                r.extend_from_slice(&noise[i]);
            }
            r
        })
        .collect();
    let a = keys.iter().filter(|k| **k == 0).count();
    let b = keys.len() - a;
    if a == b {
        return Err(Error::Config(format!("record {id}: tied key counts {a}/{b}")));
    }
    SequenceRecord::from_rows(id, times, rows, names, usize::from(b > a))
}

fn key_count(id: String, rng: &mut ChaCha8Rng, o: &SynthOptions) -> Result<SequenceRecord> {
    let m = rng.gen_range(o.min_events..=o.max_events);
    let mut times: Vec<f64> = Vec::with_capacity(m);
    while times.len() < m {
        times.extend((times.len()..m).map(|_| rng.gen::<f64>()));
        times.sort_by(f64::total_cmp);
        times.dedup();
    }
    let keys = loop {
        let keys: Vec<usize> = (0..times.len()).map(|_| rng.gen_range(0..2)).collect();
        let a = keys.iter().filter(|k| **k == 0).count();
        if 2 * a != keys.len() && a > 0 && a < keys.len() {
            break keys;
        }
    };
    let noise: Vec<Vec<f64>> = (0..times.len())
        .map(|_| (0..o.noise_channels).map(|_| o.noise_scale * rng.gen_range(-1.0..1.0)).collect())
        .collect();
    key_count_record(&id, times, &keys, &noise)
}

fn delayed_recall(id: String, rng: &mut ChaCha8Rng, o: &SynthOptions) -> Result<SequenceRecord> {
    let v = o.n_values;
    let steps = o.distractors + o.writes;
    let len = steps + 1;
    let mut write_at = vec![false; steps];
    write_at[0] = true;
    for i in rand::seq::index::sample(rng, steps - 1, o.writes - 1) {
        write_at[i + 1] = true;
    }
    let mut names = vec!["write".to_string(), "query".to_string()];
    names.extend((0..v).map(|i| format!("value{i}")));
    let mut rows = Vec::with_capacity(len);
    let mut label = 0;
    for &w in &write_at {
        let mut r = vec![0.0; 2 + v];
        let value = rng.gen_range(0..v);
        r[2 + value] = 1.0;
        if w {
            r[0] = 1.0;
            label = value;
        }
        rows.push(r);
    }
    let mut q = vec![0.0; 2 + v];
    q[1] = 1.0;
    rows.push(q);
    let times = (0..len).map(|i| i as f64 / (len - 1) as f64).collect();
    SequenceRecord::from_rows(id, times, rows, names, label)
}

/// `n` records, identical for identical `(kind, n, seed, opts)`; record `i`
/// does not depend on `n`.
pub fn gen_synth_task(kind: SynthKind, n: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<SequenceRecord>> {
    if opts.min_events < 3 || opts.max_events < opts.min_events {
        return Err(Error::Config(format!("event range {}..={} must start at 3 or more", opts.min_events, opts.max_events)));
    }
    if kind == SynthKind::DelayedRecall && opts.writes == 0 {
        return Err(Error::Config("delayed_recall needs at least 1 write".into()));
    }
    if opts.n_values < 2 {
        return Err(Error::Config("delayed_recall needs at least 2 values".into()));
    }
    par::map_range(n, |i| {
        let mut rng = rng_for(seed, i);
        let id = format!("{kind}_{i:06}");
        match kind {
            SynthKind::IrregularKeyCount => key_count(id, &mut rng, opts),
            SynthKind::DelayedRecall => delayed_recall(id, &mut rng, opts),
        }
    })
    .into_iter()
    .collect()
}
