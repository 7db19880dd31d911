//! Label vocabulary shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelClass {
    Normal,
    Benign,
    MalignantMass,
    MalignantCalc,
}

impl LabelClass {
    pub const ALL: [LabelClass; 4] = [
        LabelClass::Normal,
        LabelClass::Benign,
        LabelClass::MalignantMass,
        LabelClass::MalignantCalc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelClass::Normal => "normal",
            LabelClass::Benign => "benign",
            LabelClass::MalignantMass => "malignant-mass",
            LabelClass::MalignantCalc => "malignant-calc",
        }
    }

    pub fn is_malignant(self) -> bool {
        matches!(self, LabelClass::MalignantMass | LabelClass::MalignantCalc)
    }

    /// Index used when mixing a class into a seed.
    pub fn ordinal(self) -> u64 {
        match self {
            LabelClass::Normal => 0,
            LabelClass::Benign => 1,
            LabelClass::MalignantMass => 2,
            LabelClass::MalignantCalc => 3,
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LabelClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::validation("label_class", format!("unknown class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    Mass,
    Calcification,
}

/// Axis-aligned lesion annotation in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub lesion_kind: LesionKind,
}

impl LesionBox {
    pub fn new(x: usize, y: usize, width: usize, height: usize, lesion_kind: LesionKind) -> Self {
        Self {
            x,
            y,
            width,
            height,
            lesion_kind,
        }
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.width > 0
            && self.height > 0
            && self.x + self.width <= width
            && self.y + self.height <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

impl fmt::Display for LesionBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}@({}, {}) {}x{}",
            self.lesion_kind, self.x, self.y, self.width, self.height
        )
    }
}
