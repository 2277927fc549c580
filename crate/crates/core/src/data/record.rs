use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One observed sequence. Missing cells hold `NaN` in `values` and `false`
/// in `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub times: Vec<f64>,
    /// `[len × channels]`.
    pub values: Tensor,
    /// Row-major, same layout as `values`.
    pub mask: Vec<bool>,
    pub channel_names: Vec<String>,
    pub statics: Option<Vec<f64>>,
    pub label: usize,
}

impl SequenceRecord {
    /// Builds a record from rows that use `NaN` for missing cells.
    pub fn from_rows(
        id: impl Into<String>,
        times: Vec<f64>,
        rows: Vec<Vec<f64>>,
        channel_names: Vec<String>,
        label: usize,
    ) -> Result<Self> {
        let id = id.into();
        let c = channel_names.len();
        if rows.len() != times.len() {
            return Err(Error::dim("SequenceRecord", format!("{} times but {} rows", times.len(), rows.len())));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != c {
                return Err(Error::dim("SequenceRecord", format!("row {i} has {} values, expected {c}", r.len())));
            }
            data.extend_from_slice(r);
        }
        let mask = data.iter().map(|v| !v.is_nan()).collect();
        let rec = Self {
            id,
            values: Tensor::new(vec![times.len(), c], data)?,
            times,
            mask,
            channel_names,
            statics: None,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn value(&self, row: usize, channel: usize) -> Option<f64> {
        let i = row * self.channels() + channel;
        self.mask[i].then(|| self.values.data()[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.shape() != [self.times.len(), self.channels()] {
            return Err(Error::dim(
                "SequenceRecord",
                format!("values {:?} for {} times and {} channels", self.values.shape(), self.times.len(), self.channels()),
            ));
        }
        if self.mask.len() != self.values.len() {
            return Err(Error::dim("SequenceRecord", "mask length differs from values".to_string()));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Ordering(format!("sequence {}: time {} is followed by {}", self.id, w[0], w[1])));
            }
        }
        for (v, m) in self.values.data().iter().zip(&self.mask) {
            if *m != !v.is_nan() {
                return Err(Error::Misaligned(format!("sequence {}: mask disagrees with missing markers", self.id)));
            }
        }
        Ok(())
    }
}
