//! Loads the configured records and their split.

use anyhow::{bail, Context, Result};
use ctfwp::data::{parse_csv_sequences, parse_uea_ts, DatasetManifest, SequenceRecord, Split};

use crate::config::{DataSource, RunConfig};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SequenceRecord>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let Some(src) = &cfg.data else { bail!("[data] needs dir or ts") };
        let (records, n_classes) = match src {
            DataSource::Dir(dir) => {
                let recs = parse_csv_sequences(dir).with_context(|| format!("loading {}", dir.display()))?;
                let k = recs.iter().map(|r| r.label + 1).max().unwrap_or(0);
                (recs, k)
            }
            DataSource::Ts(files) => {
                let mut recs = Vec::new();
                let mut k = 0;
                for f in files {
                    let ds = parse_uea_ts(f).with_context(|| format!("loading {}", f.display()))?;
                    if k != 0 && ds.n_classes() != k {
                        bail!("{} declares {} classes, earlier files {k}", f.display(), ds.n_classes());
                    }
                    k = ds.n_classes();
                    let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("ts").to_string();
                    recs.extend(ds.records.into_iter().map(|mut r| {
                        if files.len() > 1 {
                            r.id = format!("{stem}_{}", r.id);
                        }
                        r
                    }));
                }
                (recs, k)
            }
        };
        if records.is_empty() {
            bail!("dataset has no sequences");
        }
        let channels = records[0].channels();
        if let Some(r) = records.iter().find(|r| r.channels() != channels) {
            bail!("sequence {} has {} channels, others {channels}", r.id, r.channels());
        }
        let d_static = records[0].statics.as_ref().map_or(0, Vec::len);
        if let Some(r) = records.iter().find(|r| r.statics.as_ref().map_or(0, Vec::len) != d_static) {
            bail!("sequence {} has a different number of static features", r.id);
        }
        let manifest = match &cfg.manifest {
            Some(p) => {
                let m = DatasetManifest::read(p).with_context(|| format!("loading manifest {}", p.display()))?;
                if m.channels != channels {
                    bail!("manifest {} expects {} channels but the data has {channels}", p.display(), m.channels);
                }
                m
            }
            None => {
                let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
                DatasetManifest::random_split(&ids, n_classes.max(2), channels, cfg.split_seed, 0.7, 0.15)?
            }
        };
        manifest.validate(&records)?;
        Ok(Self { records, manifest })
    }

    pub fn channels(&self) -> usize {
        self.records[0].channels()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    pub fn d_static(&self) -> usize {
        self.records[0].statics.as_ref().map_or(0, Vec::len)
    }

    pub fn split(&self, split: Split) -> Result<Vec<&SequenceRecord>> {
        Ok(self.manifest.select(split, &self.records)?)
    }
}
