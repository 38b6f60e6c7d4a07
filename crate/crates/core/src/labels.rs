use crate::error::{Error, Result};

pub const IGNORE_INDEX: i32 = 255;

/// Per-pixel class indices, row-major, with a sentinel for unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<i32>,
    ignore_index: i32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<i32>) -> Result<Self> {
        Self::with_ignore(height, width, labels, IGNORE_INDEX)
    }

    pub fn with_ignore(height: usize, width: usize, labels: Vec<i32>, ignore_index: i32) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[labels.len()]));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
            ignore_index,
        })
    }

    pub fn filled(height: usize, width: usize, label: i32) -> Self {
        LabelMap::new(height, width, vec![label; height * width]).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ignore_index(&self) -> i32 {
        self.ignore_index
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [i32] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.labels[row * self.width + col]
    }

    pub fn is_ignored(&self, idx: usize) -> bool {
        self.labels[idx] == self.ignore_index
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.ignore_index).count()
    }

    /// Fails on the first non-sentinel label outside `[0, num_classes)`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if l != self.ignore_index && (l < 0 || l as usize >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    row: i / self.width,
                    col: i % self.width,
                    num_classes,
                });
            }
        }
        Ok(())
    }
}
