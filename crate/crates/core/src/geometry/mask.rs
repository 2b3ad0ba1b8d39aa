use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::partition::RegionId;
use super::raster::RegionLabelMap;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Subset of the eight regions.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RegionSet(u8);

impl RegionSet {
    pub const EMPTY: RegionSet = RegionSet(0);
    pub const ALL: RegionSet = RegionSet(0xff);

    pub fn from_ids(ids: impl IntoIterator<Item = RegionId>) -> Self {
        ids.into_iter().fold(Self::EMPTY, |s, r| s.with(r))
    }

    /// Build from raw integers, rejecting anything outside 1..=8.
    pub fn from_raw(ids: &[u8]) -> Result<Self> {
        let mut s = Self::EMPTY;
        for &i in ids {
            s = s.with(RegionId::new(i)?);
        }
        Ok(s)
    }

    pub fn with(self, r: RegionId) -> Self {
        RegionSet(self.0 | 1 << (r.get() - 1))
    }

    pub fn without(self, r: RegionId) -> Self {
        RegionSet(self.0 & !(1 << (r.get() - 1)))
    }

    pub fn contains(self, r: RegionId) -> bool {
        self.0 & (1 << (r.get() - 1)) != 0
    }

    pub fn contains_label(self, label: u8) -> bool {
        (1..=8).contains(&label) && self.0 & (1 << (label - 1)) != 0
    }

    pub fn union(self, o: RegionSet) -> Self {
        RegionSet(self.0 | o.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, o: RegionSet) -> bool {
        self.0 & !o.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = RegionId> {
        RegionId::all().filter(move |r| self.contains(*r))
    }

    pub fn to_vec(self) -> Vec<u8> {
        self.iter().map(RegionId::get).collect()
    }
}

impl fmt::Debug for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.to_vec()).finish()
    }
}

impl Serialize for RegionSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegionSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        RegionSet::from_raw(&raw).map_err(serde::de::Error::custom)
    }
}

/// Union of several annotators' region selections.
pub fn union_regions<'a>(sets: impl IntoIterator<Item = &'a RegionSet>) -> RegionSet {
    sets.into_iter().fold(RegionSet::EMPTY, |acc, s| acc.union(*s))
}

/// Feature-map-resolution 0/1 mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask {
            width,
            height,
            cells: vec![value as u8; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    pub fn or(&self, o: &BinaryMask) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            cells: self.cells.iter().zip(&o.cells).map(|(a, b)| a | b).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut cells = self.cells.clone();
        for row in cells.chunks_mut(self.width) {
            row.reverse();
        }
        BinaryMask { cells, ..*self }
    }

    pub fn flip_vertical(&self) -> BinaryMask {
        let cells = self
            .cells
            .chunks(self.width)
            .rev()
            .flatten()
            .copied()
            .collect();
        BinaryMask { cells, ..*self }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }

    /// As a `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.to_f64()).expect("consistent dims")
    }
}

/// Downsample the selected regions to a `feat_w x feat_h` grid. A cell is
/// set when any image pixel it covers carries a selected label.
pub fn regions_to_mask(
    regions: RegionSet,
    labels: &RegionLabelMap,
    feat_w: usize,
    feat_h: usize,
) -> Result<BinaryMask> {
    ensure!(feat_w > 0 && feat_h > 0, "mask size must be positive");
    ensure!(
        labels.width % feat_w == 0 && labels.height % feat_h == 0,
        "label map {}x{} not divisible into a {}x{} mask",
        labels.width,
        labels.height,
        feat_w,
        feat_h
    );
    let bx = labels.width / feat_w;
    let by = labels.height / feat_h;
    let mut cells = vec![0u8; feat_w * feat_h];
    for y in 0..labels.height {
        for x in 0..labels.width {
            if regions.contains_label(labels.get(x, y)) {
                cells[(y / by) * feat_w + x / bx] = 1;
            }
        }
    }
    Ok(BinaryMask {
        width: feat_w,
        height: feat_h,
        cells,
    })
}
