//! Datasets, chronological splits and sliding windows.

mod io;
mod synthetic;

pub use io::{load_csv, write_csv, CsvOptions, MissingPolicy};
pub use synthetic::{generate_synthetic, SyntheticKind, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{NstError, Result};
use crate::stationarization::SeriesWindow;
use crate::tensor::Tensor;

/// A `T x C` matrix of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub values: Tensor,
    pub columns: Vec<String>,
    /// Free-form description of the sampling step, when known.
    pub step: Option<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, values: Tensor, columns: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.cols() != columns.len() {
            return Err(NstError::Data(format!(
                "dataset shape {:?} does not match {} column names",
                values.shape(),
                columns.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            values,
            columns,
            step: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Column `c` as a plain vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values.at(t, c)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Relative sizes of the train, validation and test segments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 7.0,
            val: 2.0,
            test: 2.0,
        }
    }
}

/// Half-open row ranges of one split. `context_start` precedes `start` by
/// the input length for validation and test, so their first target begins
/// exactly at the split boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub split: Split,
    pub context_start: usize,
    pub start: usize,
    pub end: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(NstError::Config(format!(
                    "split.{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Chronological segments for a series of `len` rows.
    pub fn segments(&self, len: usize, seq_len: usize) -> Result<[Segment; 3]> {
        self.validate()?;
        let total = self.train + self.val + self.test;
        let n_train = (len as f64 * self.train / total).floor() as usize;
        let n_test = (len as f64 * self.test / total).floor() as usize;
        let n_val = len - n_train - n_test;
        let b1 = n_train;
        let b2 = n_train + n_val;
        Ok([
            Segment {
                split: Split::Train,
                context_start: 0,
                start: 0,
                end: b1,
            },
            Segment {
                split: Split::Val,
                context_start: b1.saturating_sub(seq_len),
                start: b1,
                end: b2,
            },
            Segment {
                split: Split::Test,
                context_start: b2.saturating_sub(seq_len),
                start: b2,
                end: len,
            },
        ])
    }
}

/// A window together with the row at which its input starts.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedWindow {
    pub start: usize,
    pub window: SeriesWindow,
}

impl IndexedWindow {
    /// Row index one past the last target row.
    pub fn end(&self, seq_len: usize, pred_len: usize) -> usize {
        self.start + seq_len + pred_len
    }
}

#[derive(Clone, Debug, Default)]
pub struct SplitWindows {
    pub train: Vec<IndexedWindow>,
    pub val: Vec<IndexedWindow>,
    pub test: Vec<IndexedWindow>,
}

impl SplitWindows {
    pub fn get(&self, split: Split) -> &[IndexedWindow] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Windows of one segment: inputs `t..t+S`, targets `t+S..t+S+O`, with
/// targets confined to `[seg.start, seg.end)`.
pub fn segment_windows(
    data: &Tensor,
    seg: &Segment,
    seq_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<Vec<IndexedWindow>> {
    if stride == 0 {
        return Err(NstError::Config("stride must be at least 1".into()));
    }
    let span = seg.end.saturating_sub(seg.context_start);
    if span < seq_len + pred_len {
        return Err(NstError::Data(format!(
            "{} split has {span} rows, needs at least {}",
            seg.split.name(),
            seq_len + pred_len
        )));
    }
    let mut out = Vec::new();
    let mut t = seg.context_start;
    while t + seq_len + pred_len <= seg.end {
        let x = data.slice(0, t, seq_len)?;
        let y = data.slice(0, t + seq_len, pred_len)?;
        out.push(IndexedWindow {
            start: t,
            window: SeriesWindow::new(x, Some(y))?,
        });
        t += stride;
    }
    Ok(out)
}

/// Sliding windows for every split, in chronological order.
pub fn make_windows(
    dataset: &Dataset,
    split: &SplitSpec,
    seq_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<SplitWindows> {
    let [tr, va, te] = split.segments(dataset.len(), seq_len)?;
    Ok(SplitWindows {
        train: segment_windows(&dataset.values, &tr, seq_len, pred_len, stride)?,
        val: segment_windows(&dataset.values, &va, seq_len, pred_len, stride)?,
        test: segment_windows(&dataset.values, &te, seq_len, pred_len, stride)?,
    })
}
