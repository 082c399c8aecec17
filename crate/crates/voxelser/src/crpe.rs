//! Center-relative positional encoding: per-voxel yaw/pitch bearing deltas
//! about the occupied-voxel centroid, projected by a small MLP into a
//! per-token bias.
//!
//! Vector conventions: `d_i = p_i - c` for each occupied voxel and
//! `d_c = g - c` where `g` is the center of the occupied bounding box, so a
//! rigid translation of the scene moves `c` and `g` together and leaves every
//! delta unchanged. Yaw is `atan2(d_x, d_y)` (argument order deliberate),
//! pitch is `atan2(d_z, sqrt(d_x^2 + d_y^2))`; deltas are wrapped to
//! (-pi, pi]. Voxel coordinates are the integer indices; constant offsets
//! cancel in all deltas.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::num::{Buf, Tape, Var};

/// Reference point the deltas are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterMode {
    /// Mean coordinate of occupied voxels (the default).
    OccupiedCentroid,
    /// Fixed geometric center of the volume, for the ablation that drops the
    /// projected voxel mean.
    GeometricCenter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCenter {
    pub c: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularDelta {
    pub yaw: f64,
    pub pitch: f64,
}

/// Mean coordinate of all occupied voxels.
pub fn scene_center(grid: &VoxelGrid) -> Result<SceneCenter> {
    if grid.num_occupied() == 0 {
        return Err(Error::EmptyScene);
    }
    let mut acc = [0.0f64; 3];
    for &lin in grid.occupied() {
        let (x, y, z) = grid.coord_of(lin);
        acc[0] += f64::from(x);
        acc[1] += f64::from(y);
        acc[2] += f64::from(z);
    }
    let n = grid.num_occupied() as f64;
    Ok(SceneCenter { c: [acc[0] / n, acc[1] / n, acc[2] / n] })
}

pub fn geometric_center(grid: &VoxelGrid) -> SceneCenter {
    let (d, h, w) = grid.dims();
    SceneCenter { c: [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0] }
}

pub fn center_for_mode(grid: &VoxelGrid, mode: CenterMode) -> Result<SceneCenter> {
    match mode {
        CenterMode::OccupiedCentroid => scene_center(grid),
        CenterMode::GeometricCenter => Ok(geometric_center(grid)),
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    PI - (PI - a).rem_euclid(2.0 * PI)
}

fn bearing(d: [f64; 3]) -> (f64, f64) {
    let yaw = f64::atan2(d[0], d[1]);
    let pitch = f64::atan2(d[2], (d[0] * d[0] + d[1] * d[1]).sqrt());
    (yaw, pitch)
}

/// Center of the occupied voxels' axis-aligned bounding box.
pub fn occupied_bbox_center(grid: &VoxelGrid) -> Result<SceneCenter> {
    if grid.num_occupied() == 0 {
        return Err(Error::EmptyScene);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &lin in grid.occupied() {
        let (x, y, z) = grid.coord_of(lin);
        for (axis, v) in [f64::from(x), f64::from(y), f64::from(z)].into_iter().enumerate() {
            lo[axis] = lo[axis].min(v);
            hi[axis] = hi[axis].max(v);
        }
    }
    Ok(SceneCenter {
        c: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0],
    })
}

/// Yaw/pitch deltas for every occupied voxel, in occupied (linear-index) order.
pub fn angular_deltas(grid: &VoxelGrid, center: &SceneCenter) -> Vec<AngularDelta> {
    let g = occupied_bbox_center(grid).unwrap_or(SceneCenter { c: center.c });
    let dc = [g.c[0] - center.c[0], g.c[1] - center.c[1], g.c[2] - center.c[2]];
    let (yaw_c, pitch_c) = bearing(dc);
    grid.occupied()
        .iter()
        .map(|&lin| {
            let (x, y, z) = grid.coord_of(lin);
            let d = [
                f64::from(x) - center.c[0],
                f64::from(y) - center.c[1],
                f64::from(z) - center.c[2],
            ];
            if d == [0.0; 3] {
                // Coincident with the reference point: zero by convention.
                return AngularDelta { yaw: 0.0, pitch: 0.0 };
            }
            let (yaw, pitch) = bearing(d);
            AngularDelta { yaw: wrap_angle(yaw - yaw_c), pitch: wrap_angle(pitch - pitch_c) }
        })
        .collect()
}

/// Absolute yaw/pitch bearings about the center, without the reference-bearing
/// subtraction — the ablation that drops the relative yaw/pitch.
pub fn absolute_bearings(grid: &VoxelGrid, center: &SceneCenter) -> Vec<AngularDelta> {
    grid.occupied()
        .iter()
        .map(|&lin| {
            let (x, y, z) = grid.coord_of(lin);
            let d = [
                f64::from(x) - center.c[0],
                f64::from(y) - center.c[1],
                f64::from(z) - center.c[2],
            ];
            if d == [0.0; 3] {
                return AngularDelta { yaw: 0.0, pitch: 0.0 };
            }
            let (yaw, pitch) = bearing(d);
            AngularDelta { yaw, pitch }
        })
        .collect()
}

/// MLP parameter shapes for a `2 -> hidden -> out_dim` projection.
#[derive(Debug, Clone, Copy)]
pub struct CrpeMlpShape {
    pub hidden: usize,
    pub out_dim: usize,
}

pub const DEFAULT_CRPE_HIDDEN: usize = 16;

/// Tape handles for the CRPE MLP weights.
#[derive(Debug, Clone, Copy)]
pub struct CrpeMlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Project deltas into a `[n, out_dim]` bias, differentiable w.r.t. the MLP.
pub fn crpe_bias(tape: &mut Tape, deltas: &[AngularDelta], mlp: &CrpeMlpVars) -> Result<Var> {
    let n = deltas.len();
    let mut data = Vec::with_capacity(2 * n);
    for d in deltas {
        data.push(d.yaw);
        data.push(d.pitch);
    }
    let input = tape.constant(Buf::from_vec(&[n, 2], data)?);
    if tape.value(mlp.w1).shape()[0] != 2 {
        return Err(Error::shape("crpe_bias", "MLP input dimension must be 2".to_string()));
    }
    tape.mlp_forward(input, mlp.w1, mlp.b1, mlp.w2, mlp.b2)
}
