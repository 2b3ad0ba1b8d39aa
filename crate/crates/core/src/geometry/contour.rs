use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::partition::RegionId;
use super::raster::RegionLabelMap;

/// Closed boundary loops of one region, traced along pixel edges so
/// consecutive vertices are exactly 1 px apart. Each loop repeats its
/// first vertex at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBoundary {
    pub region: RegionId,
    pub polylines: Vec<Vec<[f64; 2]>>,
}

/// Trace the outline of every region present in `labels`.
pub fn region_boundaries(labels: &RegionLabelMap) -> Vec<RegionBoundary> {
    RegionId::all()
        .filter(|r| labels.contains(*r))
        .map(|r| RegionBoundary {
            region: r,
            polylines: trace(labels, r.get()),
        })
        .collect()
}

fn trace(labels: &RegionLabelMap, label: u8) -> Vec<Vec<[f64; 2]>> {
    let (w, h) = (labels.width as i64, labels.height as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && labels.get(x as usize, y as usize) == label;

    // Directed pixel-edge segments, clockwise around each region pixel in
    // image coordinates.
    let mut edges: Vec<((i64, i64), (i64, i64))> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !inside(x, y) {
                continue;
            }
            if !inside(x, y - 1) {
                edges.push(((x, y), (x + 1, y)));
            }
            if !inside(x + 1, y) {
                edges.push(((x + 1, y), (x + 1, y + 1)));
            }
            if !inside(x, y + 1) {
                edges.push(((x + 1, y + 1), (x, y + 1)));
            }
            if !inside(x - 1, y) {
                edges.push(((x, y + 1), (x, y)));
            }
        }
    }
    let mut by_start: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        by_start.entry(e.0).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    let mut loops = Vec::new();
    for first in 0..edges.len() {
        if used[first] {
            continue;
        }
        let start = edges[first].0;
        let mut pts = vec![[start.0 as f64, start.1 as f64]];
        let mut cur = first;
        loop {
            used[cur] = true;
            let end = edges[cur].1;
            pts.push([end.0 as f64, end.1 as f64]);
            if end == start {
                break;
            }
            // in/out degrees match at every vertex, so an unused edge exists
            let next = by_start[&end].iter().copied().find(|&i| !used[i]);
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
        loops.push(pts);
    }
    loops
}
