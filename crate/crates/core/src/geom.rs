//! Rigid transforms, pinhole projection, multi-sweep registration, and
//! voxel-grid partitioning.
//!
//! Conventions used throughout the crate:
//!
//! * transforms are 4x4 homogeneous matrices stored row-major, applied to
//!   column vectors (`p' = R p + t`);
//! * point sets are `N x 3` arrays, one point per row;
//! * image coordinates are `u` along columns and `v` along rows, with pixel
//!   centers at integer coordinates.

use ndarray::{Array2, ArrayView2};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Tolerance for the rotation-block validity checks (`R^T R = I`, `det R = 1`).
pub const ROTATION_TOL: f64 = 1e-9;

/// A rigid (rotation + translation) transform, validated on construction.
///
/// The bottom row is exactly `(0, 0, 0, 1)`; the rotation block is
/// orthonormal with determinant `+1` within [`ROTATION_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    matrix: [f64; 16],
}

impl RigidTransform {
    pub fn identity() -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        RigidTransform { matrix: m }
    }

    /// Builds from a full row-major 4x4 matrix, rejecting anything that is
    /// not a rigid transform.
    pub fn from_matrix(matrix: [f64; 16]) -> Result<Self> {
        validate_rigid(&matrix)?;
        Ok(RigidTransform { matrix })
    }

    /// Builds from a row-major 3x3 rotation block and a translation vector.
    pub fn from_parts(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        let mut m = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 4 + c] = rotation[r * 3 + c];
            }
            m[r * 4 + 3] = translation[r];
        }
        m[15] = 1.0;
        Self::from_matrix(m)
    }

    /// Pure translation.
    pub fn from_translation(t: [f64; 3]) -> Self {
        let mut m = Self::identity().matrix;
        m[3] = t[0];
        m[7] = t[1];
        m[11] = t[2];
        RigidTransform { matrix: m }
    }

    /// Rotation about the z axis by `angle` radians, counterclockwise when
    /// looking down the +z axis.
    pub fn from_rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0];
        // A matrix built from sin/cos of one angle is orthonormal by
        // construction; skip re-validation to keep this infallible.
        let mut m = [0.0; 16];
        for r in 0..3 {
            for c2 in 0..3 {
                m[r * 4 + c2] = rot[r * 3 + c2];
            }
        }
        m[15] = 1.0;
        RigidTransform { matrix: m }
    }

    /// Rotation by `angle` radians about an arbitrary axis (Rodrigues),
    /// with an optional translation. The axis is normalized internally;
    /// a near-zero axis is rejected.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-12 {
            return Err(Error::config("rotation axis has near-zero norm"));
        }
        let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let rot = [
            c + t * x * x,
            t * x * y - s * z,
            t * x * z + s * y,
            t * x * y + s * z,
            c + t * y * y,
            t * y * z - s * x,
            t * x * z - s * y,
            t * y * z + s * x,
            c + t * z * z,
        ];
        Self::from_parts(rot, translation)
    }

    pub fn matrix(&self) -> &[f64; 16] {
        &self.matrix
    }

    /// Row-major 3x3 rotation block.
    pub fn rotation(&self) -> [f64; 9] {
        let m = &self.matrix;
        [m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[3], self.matrix[7], self.matrix[11]]
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let a = &self.matrix;
        let b = &other.matrix;
        let mut m = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[r * 4 + k] * b[k * 4 + c];
                }
                m[r * 4 + c] = acc;
            }
        }
        // Exact zeros in the operand bottom rows keep the product's bottom
        // row exact, so the result is rigid without re-validation.
        RigidTransform { matrix: m }
    }

    /// Exact closed-form inverse: `R' = R^T`, `t' = -R^T t`.
    pub fn invert(&self) -> RigidTransform {
        let r = self.rotation();
        let t = self.translation();
        let rt = [r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]];
        let tp = [
            -(rt[0] * t[0] + rt[1] * t[1] + rt[2] * t[2]),
            -(rt[3] * t[0] + rt[4] * t[1] + rt[5] * t[2]),
            -(rt[6] * t[0] + rt[7] * t[1] + rt[8] * t[2]),
        ];
        let mut m = [0.0; 16];
        for row in 0..3 {
            for col in 0..3 {
                m[row * 4 + col] = rt[row * 3 + col];
            }
            m[row * 4 + 3] = tp[row];
        }
        m[15] = 1.0;
        RigidTransform { matrix: m }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
            m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
            m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
        ]
    }

    /// Applies only the rotation block (directions, not positions).
    pub fn rotate_vector(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[4] * v[0] + m[5] * v[1] + m[6] * v[2],
            m[8] * v[0] + m[9] * v[1] + m[10] * v[2],
        ]
    }

    /// Transforms an `N x 3` point set row by row.
    pub fn transform_points(&self, points: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(points.ncols(), 3, "point sets are N x 3");
        let mut out = Array2::zeros((points.nrows(), 3));
        for (i, p) in points.rows().into_iter().enumerate() {
            let q = self.transform_point([p[0], p[1], p[2]]);
            out[[i, 0]] = q[0];
            out[[i, 1]] = q[1];
            out[[i, 2]] = q[2];
        }
        out
    }
}

fn validate_rigid(m: &[f64; 16]) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("transform contains non-finite entries"));
    }
    if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
        return Err(Error::config("transform bottom row must be exactly (0, 0, 0, 1)"));
    }
    let r = [m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]];
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for k in 0..3 {
                dot += r[k * 3 + i] * r[k * 3 + j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((dot - target).abs());
        }
    }
    if max_dev > ROTATION_TOL {
        return Err(Error::config(format!(
            "rotation block is not orthonormal (max deviation {max_dev:.3e})"
        )));
    }
    let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
        + r[2] * (r[3] * r[7] - r[4] * r[6]);
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::config(format!(
            "rotation block determinant is {det:.12}, expected +1 (reflections rejected)"
        )));
    }
    Ok(())
}

/// Pinhole camera intrinsics plus image bounds and a near-plane cutoff.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub z_near: f64,
}

/// A valid projection of a camera-frame point into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    /// Continuous image coordinates (`u` along columns, `v` along rows).
    pub u: f64,
    pub v: f64,
    /// Nearest-integer pixel the point lands in.
    pub row: usize,
    pub col: usize,
    /// Depth along the optical axis.
    pub depth: f64,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        z_near: f64,
    ) -> Result<Self> {
        if !(fx.is_finite() && fx > 0.0 && fy.is_finite() && fy > 0.0) {
            return Err(Error::config("focal lengths must be positive and finite"));
        }
        if width == 0 || height == 0 {
            return Err(Error::config("image dimensions must be nonzero"));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::config("principal point must lie inside the image"));
        }
        if !(z_near.is_finite() && z_near > 0.0) {
            return Err(Error::config("z_near must be positive and finite"));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_near,
        })
    }

    /// Projects a camera-frame point. Returns `None` for points at or behind
    /// the near plane and for projections whose nearest pixel falls outside
    /// the image.
    pub fn project(&self, p: [f64; 3]) -> Option<PixelHit> {
        let z = p[2];
        if !(z > self.z_near) {
            return None;
        }
        let u = self.fx * p[0] / z + self.cx;
        let v = self.fy * p[1] / z + self.cy;
        let col = u.round();
        let row = v.round();
        if !(col >= 0.0 && col <= (self.width - 1) as f64) {
            return None;
        }
        if !(row >= 0.0 && row <= (self.height - 1) as f64) {
            return None;
        }
        Some(PixelHit {
            u,
            v,
            row: row as usize,
            col: col as usize,
            depth: z,
        })
    }
}

/// One lidar sweep: points in its own sensor frame plus the sensor pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    /// 1-based index within the capture window.
    pub sweep_id: u32,
    pub timestamp: f64,
    /// `N x 3`, sensor-frame coordinates.
    pub points: Array2<f64>,
    /// Sensor frame to world frame.
    pub sensor_to_world: RigidTransform,
}

impl Sweep {
    pub fn new(
        sweep_id: u32,
        timestamp: f64,
        points: Array2<f64>,
        sensor_to_world: RigidTransform,
    ) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::config(format!("sweep {sweep_id} has no points")));
        }
        if points.ncols() != 3 {
            return Err(Error::config(format!(
                "sweep {sweep_id} points must be N x 3, got N x {}",
                points.ncols()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "sweep {sweep_id} contains non-finite coordinates"
            )));
        }
        Ok(Sweep {
            sweep_id,
            timestamp,
            points,
            sensor_to_world,
        })
    }
}

/// All sweeps expressed in the first sweep's sensor frame, concatenated in
/// sweep-major, point-index-minor order.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchedCloud {
    pub points: Array2<f64>,
    /// `(sweep_id, point_index within that sweep)` for every stitched row.
    pub provenance: Vec<(u32, usize)>,
}

impl StitchedCloud {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Expresses every sweep in the sweep-1 sensor frame via
/// `p -> T_1^{-1} T_k p`. Sweep 1 rows are copied verbatim (no arithmetic),
/// so single-sweep registration is exact.
pub fn register_sweeps(sweeps: &[Sweep]) -> Result<StitchedCloud> {
    if sweeps.is_empty() {
        return Err(Error::config("registration needs at least one sweep"));
    }
    let mut order: Vec<usize> = (0..sweeps.len()).collect();
    order.sort_by_key(|&i| sweeps[i].sweep_id);
    for w in order.windows(2) {
        if sweeps[w[0]].sweep_id == sweeps[w[1]].sweep_id {
            return Err(Error::config(format!(
                "duplicate sweep id {}",
                sweeps[w[0]].sweep_id
            )));
        }
    }
    let first = &sweeps[order[0]];
    if first.sweep_id != 1 {
        return Err(Error::config("sweep 1 (reference frame) is missing"));
    }
    let world_to_first = first.sensor_to_world.invert();

    let total: usize = sweeps.iter().map(|s| s.points.nrows()).sum();
    let mut points = Array2::zeros((total, 3));
    let mut provenance = Vec::with_capacity(total);
    let mut row = 0;
    for &i in &order {
        let sweep = &sweeps[i];
        // Sweep 1 is the reference frame: copy rows verbatim so no float
        // arithmetic touches them.
        let moved = if sweep.sweep_id == 1 {
            sweep.points.clone()
        } else {
            let to_first = world_to_first.compose(&sweep.sensor_to_world);
            to_first.transform_points(&sweep.points.view())
        };
        for (j, p) in moved.rows().into_iter().enumerate() {
            points[[row, 0]] = p[0];
            points[[row, 1]] = p[1];
            points[[row, 2]] = p[2];
            provenance.push((sweep.sweep_id, j));
            row += 1;
        }
    }
    Ok(StitchedCloud { points, provenance })
}

/// One occupied voxel: its integer grid index and the rows that fall in it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub index: [i64; 3],
    /// Row indices into the partitioned point set, ascending.
    pub members: Vec<usize>,
}

/// A voxel-grid partition of a point set. Cells are ordered by their integer
/// index (lexicographic), so iteration order is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPartition {
    pub cell_size: f64,
    pub cells: Vec<GridCell>,
}

impl GridPartition {
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn total_members(&self) -> usize {
        self.cells.iter().map(|c| c.members.len()).sum()
    }
}

/// Assigns every row of `points` to the voxel `floor(coord / cell_size)`
/// per component. Every row lands in exactly one cell.
pub fn partition_grid(points: &ArrayView2<f64>, cell_size: f64) -> Result<GridPartition> {
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(Error::config("cell_size must be positive and finite"));
    }
    assert_eq!(points.ncols(), 3, "point sets are N x 3");
    let mut map: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.rows().into_iter().enumerate() {
        let idx = [
            (p[0] / cell_size).floor() as i64,
            (p[1] / cell_size).floor() as i64,
            (p[2] / cell_size).floor() as i64,
        ];
        map.entry(idx).or_default().push(i);
    }
    let cells = map
        .into_iter()
        .map(|(index, members)| GridCell { index, members })
        .collect();
    Ok(GridPartition { cell_size, cells })
}
