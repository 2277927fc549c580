//! Split membership file.
//!
//! ```text
//! [meta]
//! n_classes = 2
//! channels = 3
//! [train]
//! seq0001
//! [valid]
//! [test]
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SequenceRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" | "validation" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|valid|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub n_classes: usize,
    pub channels: usize,
    pub metadata: IndexMap<String, String>,
}

impl DatasetManifest {
    /// Shuffles `ids` with `seed` and cuts train/valid fractions; the rest is test.
    pub fn random_split(ids: &[String], n_classes: usize, channels: usize, seed: u64, train: f64, valid: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&valid) || train + valid > 1.0 {
            return Err(Error::Config(format!("split fractions {train}/{valid} do not fit in 1")));
        }
        let mut shuffled = ids.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len() as f64;
        let n_train = (train * n).round() as usize;
        let n_valid = ((valid * n).round() as usize).min(ids.len() - n_train);
        let test = shuffled.split_off(n_train + n_valid);
        let valid = shuffled.split_off(n_train);
        Ok(Self { train: shuffled, valid, test, n_classes, channels, metadata: IndexMap::new() })
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn ids_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("[meta]\nn_classes = {}\nchannels = {}\n", self.n_classes, self.channels);
        for (k, v) in &self.metadata {
            s += &format!("{k} = {v}\n");
        }
        for split in [Split::Train, Split::Valid, Split::Test] {
            s += &format!("[{split}]\n");
            for id in self.ids(split) {
                s += id;
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { file: origin.to_path_buf(), line, msg };
        let mut m = Self::default();
        let mut section: Option<String> = None;
        let (mut have_classes, mut have_channels) = (false, false);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if name != "meta" {
                    Split::from_str(name).map_err(|e| err(i + 1, e.to_string()))?;
                }
                section = Some(name.to_string());
                continue;
            }
            match section.as_deref() {
                None => return Err(err(i + 1, "entry outside any section".into())),
                Some("meta") => {
                    let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, "expected `key = value`".into()))?;
                    let (k, v) = (k.trim(), v.trim());
                    let num = || v.parse::<usize>().map_err(|_| err(i + 1, format!("`{k}` must be an integer")));
                    match k {
                        "n_classes" => {
                            m.n_classes = num()?;
                            have_classes = true;
                        }
                        "channels" => {
                            m.channels = num()?;
                            have_channels = true;
                        }
                        _ => {
                            m.metadata.insert(k.to_string(), v.to_string());
                        }
                    }
                }
                Some(split) => {
                    let split = Split::from_str(split).map_err(|e| err(i + 1, e.to_string()))?;
                    m.ids_mut(split).push(line.to_string());
                }
            }
        }
        if !have_classes || !have_channels {
            return Err(err(0, "manifest needs n_classes and channels in [meta]".into()));
        }
        m.check_disjoint().map_err(|e| err(0, e.to_string()))?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            for id in self.ids(split) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Config(format!("sequence `{id}` appears twice in the manifest")));
                }
            }
        }
        Ok(())
    }

    /// Checks disjointness and that every id names a record.
    pub fn validate(&self, records: &[SequenceRecord]) -> Result<()> {
        self.check_disjoint()?;
        let known: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        for split in [Split::Train, Split::Valid, Split::Test] {
            if let Some(id) = self.ids(split).iter().find(|id| !known.contains(id.as_str())) {
                return Err(Error::Config(format!("manifest {split} split names unknown sequence `{id}`")));
            }
        }
        if let Some(r) = records.iter().find(|r| r.label >= self.n_classes) {
            return Err(Error::Config(format!("sequence {} has label {} but n_classes = {}", r.id, r.label, self.n_classes)));
        }
        Ok(())
    }

    /// Records of `split` in manifest order.
    pub fn select<'a>(&self, split: Split, records: &'a [SequenceRecord]) -> Result<Vec<&'a SequenceRecord>> {
        let by_id: std::collections::HashMap<&str, &SequenceRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        self.ids(split)
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::Config(format!("unknown sequence `{id}`"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn split_ratios_and_round_trip() {
        let m = DatasetManifest::random_split(&ids(259), 5, 6, 1, 0.7, 0.15).unwrap();
        assert_eq!((m.train.len(), m.valid.len(), m.test.len()), (181, 39, 39));
        let mut mm = m.clone();
        mm.metadata.insert("source".into(), "eigenworms".into());
        let back = DatasetManifest::parse(&mm.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, mm);
        assert_eq!(DatasetManifest::random_split(&ids(259), 5, 6, 1, 0.7, 0.15).unwrap(), m);
    }

    #[test]
    fn overlapping_or_unknown_ids_are_rejected() {
        let text = "[meta]\nn_classes = 2\nchannels = 1\n[train]\na\n[test]\na\n";
        assert!(DatasetManifest::parse(text, Path::new("m")).is_err());
        let text = "[meta]\nn_classes = 2\nchannels = 1\n[train]\na\n[bogus]\n";
        assert!(DatasetManifest::parse(text, Path::new("m")).is_err());
        let m = DatasetManifest::parse("[meta]\nn_classes = 2\nchannels = 1\n[train]\nzz\n", Path::new("m")).unwrap();
        assert!(m.validate(&[]).is_err());
    }
}
