//! Eight-region partition of a macula-centred fundus image anchored on
//! the optic disc and fovea.
//!
//! Construction, with `D` the disc–fovea distance:
//! a circle of radius `2D/5` around the disc, a circle of radius `2D/3`
//! around the fovea, the chord through their intersections, the axis from
//! disc through fovea, two half-lines parallel to the axis tangent to the
//! fovea circle heading away from the disc, and the line through the disc
//! centre perpendicular to the axis.

mod contour;
mod mask;
mod partition;
mod raster;

pub use contour::{region_boundaries, RegionBoundary};
pub use mask::{regions_to_mask, union_regions, BinaryMask, RegionSet};
pub use partition::{Circle, Landmarks, Line, Point, RegionId, RegionPartition};
pub use raster::{rasterize, RegionLabelMap};
