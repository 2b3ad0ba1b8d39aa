use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::partition::{Point, RegionId, RegionPartition};
use crate::error::{ensure, Error, Result};
use crate::par;

/// Per-pixel region labels, row-major. Value 0 marks pixels outside the
/// defined image area (never produced by [`rasterize`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

/// Label every pixel by its centre `(i + 0.5, j + 0.5)`.
pub fn rasterize(partition: &RegionPartition, width: usize, height: usize) -> Result<RegionLabelMap> {
    ensure!(width >= 1 && height >= 1, "raster size must be at least 1x1");
    let mut labels = vec![0u8; width * height];
    par::for_each_chunk_mut(&mut labels, width, |j, row| {
        for (i, l) in row.iter_mut().enumerate() {
            *l = partition
                .label(Point::new(i as f64 + 0.5, j as f64 + 0.5))
                .get();
        }
    });
    Ok(RegionLabelMap {
        width,
        height,
        labels,
    })
}

/// Display colours for labels 1..=8.
pub const REGION_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

impl RegionLabelMap {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel counts indexed by label (`counts[0]` counts unlabeled pixels).
    pub fn counts(&self) -> [usize; 9] {
        let mut c = [0usize; 9];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn contains(&self, region: RegionId) -> bool {
        self.labels.contains(&region.get())
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(x as usize, y as usize)])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        let labels: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        if let Some(bad) = labels.iter().find(|&&l| l > 8) {
            return Err(Error::format("label map", format!("value {bad} outside 0..=8")));
        }
        Ok(RegionLabelMap {
            width: img.width() as usize,
            height: img.height() as usize,
            labels,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(Error::from)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Self::from_gray(&img)
    }

    /// Colour-coded labels, optionally blended over a same-sized image.
    pub fn overlay(&self, base: Option<&RgbImage>, alpha: f64) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let l = self.get(x as usize, y as usize);
            let c = if l == 0 { [0, 0, 0] } else { REGION_COLORS[l as usize - 1] };
            match base {
                Some(b) => {
                    let p = b.get_pixel(x, y).0;
                    Rgb(std::array::from_fn(|k| {
                        (alpha * c[k] as f64 + (1.0 - alpha) * p[k] as f64).round() as u8
                    }))
                }
                None => Rgb(c),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Landmarks;

    #[test]
    fn counts_cover_every_pixel() {
        let lm = Landmarks::new(Point::new(20.0, 32.0), Point::new(44.0, 30.0), 64, 48).unwrap();
        let p = RegionPartition::derive(lm).unwrap();
        let map = rasterize(&p, 64, 48).unwrap();
        let c = map.counts();
        assert_eq!(c[0], 0);
        assert_eq!(c.iter().sum::<usize>(), 64 * 48);
        for r in RegionId::all() {
            assert!(map.contains(r), "region {r:?} missing");
        }
    }

    #[test]
    fn png_round_trip() {
        let lm = Landmarks::new(Point::new(10.0, 16.0), Point::new(22.0, 16.0), 32, 32).unwrap();
        let map = rasterize(&RegionPartition::derive(lm).unwrap(), 32, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.png");
        map.save_png(&path).unwrap();
        assert_eq!(RegionLabelMap::load_png(&path).unwrap(), map);
    }
}
