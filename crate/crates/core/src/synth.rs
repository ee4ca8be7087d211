//! Synthetic scene generation.
//!
//! A scene is a ground plane plus a few axis-aligned blocks, observed by one
//! pinhole camera and a lidar that captures `K` sweeps while the ego vehicle
//! creeps forward. Per-pixel semantic features are synthesized directly from
//! the per-class text embeddings (plus noise), standing in for a frozen
//! vision-language image backbone, so the whole pipeline runs without any
//! learned upstream model.
//!
//! Two properties are guaranteed by construction and relied on downstream:
//!
//! * with `label_noise_rate = 0` and no calibration error, every sampled
//!   point that projects into the image lands on a pixel whose class equals
//!   the point's ground-truth class (points are re-sampled until their
//!   projection is occlusion- and boundary-consistent);
//! * no kept point projects within a guard band of a pixel-rounding, image-
//!   bound, or near-plane decision boundary, so any faithful
//!   reimplementation of the projection chain classifies every point
//!   identically and correspondence counts are exactly reproducible.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{register_sweeps, CameraModel, PixelHit, RigidTransform, Sweep};

/// Lidar origin height above the ground plane, meters.
const SENSOR_HEIGHT: f64 = 1.6;
/// Camera sits this far above the lidar origin.
const CAMERA_LIFT: f64 = 0.2;
/// Camera pitch below the horizon, radians.
const CAMERA_PITCH: f64 = 0.18;
/// Minimum ray parameter for a surface hit (rejects self-intersection).
const RAY_T_MIN: f64 = 1e-6;
/// Sampled points keep at least this margin (pixels) from rounding
/// boundaries, and at least `Z_MARGIN` from the near plane.
const PIXEL_MARGIN: f64 = 0.02;
const Z_MARGIN: f64 = 1e-6;
/// Subpixel jitter half-range when sampling points through pixels.
const PIXEL_JITTER: f64 = 0.45;
/// Fraction of each sweep sampled through image pixels; the rest is sampled
/// on surfaces anywhere, in or out of the camera frustum.
const IN_VIEW_FRACTION: f64 = 0.75;

/// Everything needed to generate one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    /// Number of semantic classes, ground included. 2..=26.
    pub num_classes: usize,
    /// Embedding dimension shared by text, pixel, and point features.
    pub feature_dim: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Sweeps per capture window.
    pub num_sweeps: usize,
    pub points_per_sweep: usize,
    /// Capture window length in seconds; sweep k is stamped (k-1) * S / K.
    pub window_seconds: f64,
    /// Prompt variants averaged into each text embedding.
    pub prompt_count: usize,
    pub prompt_noise_sigma: f64,
    /// Gaussian noise added to pixel features before renormalization.
    pub feature_noise_sigma: f64,
    /// Fraction of labeled pixels whose class is flipped to a wrong one.
    pub label_noise_rate: f64,
    /// Ego translation along +y per sweep, meters.
    pub ego_translation: f64,
    /// Ego yaw per sweep, radians.
    pub ego_rotation: f64,
    /// Magnitude of the rotation/translation error injected into the stored
    /// camera extrinsic (the imagery itself stays physically consistent).
    pub calib_rot_error: f64,
    pub calib_trans_error: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            num_classes: 4,
            feature_dim: 16,
            image_width: 64,
            image_height: 64,
            num_sweeps: 3,
            points_per_sweep: 1024,
            window_seconds: 1.0,
            prompt_count: 8,
            prompt_noise_sigma: 0.1,
            feature_noise_sigma: 0.1,
            label_noise_rate: 0.05,
            ego_translation: 1.0,
            ego_rotation: 0.05,
            calib_rot_error: 0.0,
            calib_trans_error: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.num_classes - 1 > BOX_SLOTS_X.len() * BOX_SLOTS_Y.len() {
            return Err(Error::config(format!(
                "at most {} object classes fit the layout",
                BOX_SLOTS_X.len() * BOX_SLOTS_Y.len()
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim must be at least 2"));
        }
        if self.image_width < 8 || self.image_height < 8 {
            return Err(Error::config("image must be at least 8 x 8"));
        }
        if self.num_sweeps == 0 {
            return Err(Error::config("num_sweeps must be at least 1"));
        }
        if self.points_per_sweep == 0 {
            return Err(Error::config("points_per_sweep must be at least 1"));
        }
        if !(self.window_seconds.is_finite() && self.window_seconds > 0.0) {
            return Err(Error::config("window_seconds must be positive"));
        }
        if self.prompt_count == 0 {
            return Err(Error::config("prompt_count must be at least 1"));
        }
        for (name, v) in [
            ("prompt_noise_sigma", self.prompt_noise_sigma),
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("ego_translation", self.ego_translation),
            ("ego_rotation", self.ego_rotation),
            ("calib_rot_error", self.calib_rot_error),
            ("calib_trans_error", self.calib_trans_error),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return Err(Error::config("label_noise_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-class text embeddings, each the renormalized mean of several noisy
/// prompt variants of a unit prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    /// `C x D`, unit rows.
    pub embeddings: Array2<f64>,
    pub prompt_count: usize,
    pub class_names: Vec<String>,
}

impl TextBank {
    pub fn num_classes(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Builds the per-class text bank. With `prompt_noise_sigma = 0` every row
/// equals its class prototype bit for bit (no averaging arithmetic runs).
pub fn build_text_bank(
    seed: u64,
    num_classes: usize,
    dim: usize,
    prompt_count: usize,
    prompt_noise_sigma: f64,
) -> Result<TextBank> {
    if num_classes == 0 {
        return Err(Error::config("text bank needs at least one class"));
    }
    if dim < 2 {
        return Err(Error::config("embedding dim must be at least 2"));
    }
    if prompt_count == 0 {
        return Err(Error::config("prompt_count must be at least 1"));
    }
    if !(prompt_noise_sigma.is_finite() && prompt_noise_sigma >= 0.0) {
        return Err(Error::config("prompt_noise_sigma must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embeddings = Array2::zeros((num_classes, dim));
    for c in 0..num_classes {
        let proto = random_unit(&mut rng, dim);
        let row = if prompt_noise_sigma == 0.0 {
            proto
        } else {
            let mut acc = Array1::<f64>::zeros(dim);
            for _ in 0..prompt_count {
                let mut variant = proto.clone();
                for v in variant.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += prompt_noise_sigma * n;
                }
                acc += &normalize_checked(variant, "prompt variant")?;
            }
            acc /= prompt_count as f64;
            normalize_checked(acc, "prompt mean")?
        };
        embeddings.row_mut(c).assign(&row);
    }
    let class_names = (0..num_classes).map(|c| format!("class_{c}")).collect();
    Ok(TextBank {
        embeddings,
        prompt_count,
        class_names,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm >= 1e-9 {
            return v / norm;
        }
    }
}

fn normalize_checked(v: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm < 1e-12 {
        return Err(Error::validation(format!("{what} has near-zero norm")));
    }
    Ok(v / norm)
}

/// One generated scene: sweeps with ground truth, camera imagery stand-ins,
/// and the text bank.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub camera: CameraModel,
    /// Sweep-1 sensor frame to camera frame, as stored (possibly carrying an
    /// injected calibration error).
    pub cam_extrinsic: RigidTransform,
    /// Sorted by ascending sweep id, ids 1..=K.
    pub sweeps: Vec<Sweep>,
    /// Ground-truth class per point, aligned with `sweeps`.
    pub point_labels: Vec<Vec<i32>>,
    /// Row-major `H * W` pixel classes, -1 for unlabeled (sky).
    pub pixel_class: Vec<i32>,
    /// `(H * W) x D` unit rows, row-major by pixel.
    pub pixel_features: Array2<f64>,
    pub text_bank: TextBank,
}

impl SceneBundle {
    pub fn num_classes(&self) -> usize {
        self.text_bank.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.text_bank.dim()
    }

    pub fn pixel_index(&self, row: usize, col: usize) -> usize {
        row * self.camera.width + col
    }

    pub fn pixel_class_at(&self, row: usize, col: usize) -> i32 {
        self.pixel_class[self.pixel_index(row, col)]
    }

    /// Ground-truth labels in stitched-cloud row order (sweeps ascending by
    /// id, points in sweep order), matching `geom::register_sweeps`.
    pub fn flat_point_labels(&self) -> Vec<i32> {
        let mut order: Vec<usize> = (0..self.sweeps.len()).collect();
        order.sort_by_key(|&i| self.sweeps[i].sweep_id);
        let mut out = Vec::new();
        for i in order {
            out.extend_from_slice(&self.point_labels[i]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let hw = self.camera.width * self.camera.height;
        if self.pixel_class.len() != hw {
            return Err(Error::validation("pixel_class length != width * height"));
        }
        if self.pixel_features.nrows() != hw || self.pixel_features.ncols() != self.feature_dim() {
            return Err(Error::validation("pixel_features shape mismatch"));
        }
        if self.sweeps.len() != self.point_labels.len() {
            return Err(Error::validation("per-sweep label lists out of step"));
        }
        for (sweep, labels) in self.sweeps.iter().zip(&self.point_labels) {
            if sweep.points.nrows() != labels.len() {
                return Err(Error::validation(format!(
                    "sweep {} has {} points but {} labels",
                    sweep.sweep_id,
                    sweep.points.nrows(),
                    labels.len()
                )));
            }
            if labels.iter().any(|&l| l < 0 || l >= c as i32) {
                return Err(Error::validation(format!(
                    "sweep {} has a ground-truth label outside 0..{c}",
                    sweep.sweep_id
                )));
            }
        }
        if self.pixel_class.iter().any(|&l| l < -1 || l >= c as i32) {
            return Err(Error::validation(format!(
                "pixel class outside -1..{c}"
            )));
        }
        check_unit_rows(&self.pixel_features, "pixel feature")?;
        check_unit_rows(&self.text_bank.embeddings, "text bank row")?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_bundle(self, dir)
    }

    pub fn load(dir: &Path) -> Result<SceneBundle> {
        load_bundle(dir)
    }
}

fn check_unit_rows(m: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "{what} {i} has norm {norm:.9}, expected 1 within 1e-6"
            )));
        }
    }
    Ok(())
}

// --- scene geometry -------------------------------------------------------

/// Candidate block centers; ground is class 0, blocks take classes 1..C.
const BOX_SLOTS_X: [f64; 5] = [-6.0, -3.0, 0.0, 3.0, 6.0];
const BOX_SLOTS_Y: [f64; 5] = [5.0, 8.0, 11.0, 14.0, 17.0];

#[derive(Debug, Clone)]
enum Shape {
    /// Rectangle on the z = 0 plane.
    Ground { x0: f64, x1: f64, y0: f64, y1: f64 },
    /// Axis-aligned block resting on the ground.
    Block { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone)]
struct Region {
    class: usize,
    shape: Shape,
}

fn ray_hit(shape: &Shape, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    match *shape {
        Shape::Ground { x0, x1, y0, y1 } => {
            if dir[2].abs() < 1e-300 {
                return None;
            }
            let t = -origin[2] / dir[2];
            if t <= RAY_T_MIN {
                return None;
            }
            let x = origin[0] + t * dir[0];
            let y = origin[1] + t * dir[1];
            if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
                Some(t)
            } else {
                None
            }
        }
        Shape::Block { min, max } => {
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            for k in 0..3 {
                if dir[k].abs() < 1e-300 {
                    if origin[k] < min[k] || origin[k] > max[k] {
                        return None;
                    }
                    continue;
                }
                let ta = (min[k] - origin[k]) / dir[k];
                let tb = (max[k] - origin[k]) / dir[k];
                let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                t_enter = t_enter.max(lo);
                t_exit = t_exit.min(hi);
            }
            if t_enter <= t_exit && t_enter > RAY_T_MIN {
                Some(t_enter)
            } else {
                None
            }
        }
    }
}

/// Nearest surface along the ray, if any.
fn raycast(regions: &[Region], origin: [f64; 3], dir: [f64; 3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for region in regions {
        if let Some(t) = ray_hit(&region.shape, origin, dir) {
            if best.map_or(true, |(_, bt)| t < bt) {
                best = Some((region.class, t));
            }
        }
    }
    best
}

/// Uniform point on the visible surface of a shape (block bottoms excluded).
fn sample_surface(shape: &Shape, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match *shape {
        Shape::Ground { x0, x1, y0, y1 } => [
            rng.random_range(x0..x1),
            rng.random_range(y0..y1),
            0.0,
        ],
        Shape::Block { min, max } => {
            let dx = max[0] - min[0];
            let dy = max[1] - min[1];
            let dz = max[2] - min[2];
            // Faces: top, -x, +x, -y, +y, weighted by area.
            let areas = [dx * dy, dy * dz, dy * dz, dx * dz, dx * dz];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.random_range(0.0..1.0);
            let v = rng.random_range(0.0..1.0);
            match face {
                0 => [min[0] + u * dx, min[1] + v * dy, max[2]],
                1 => [min[0], min[1] + u * dy, min[2] + v * dz],
                2 => [max[0], min[1] + u * dy, min[2] + v * dz],
                3 => [min[0] + u * dx, min[1], min[2] + v * dz],
                _ => [min[0] + u * dx, max[1], min[2] + v * dz],
            }
        }
    }
}

fn layout_regions(seed: u64, num_classes: usize) -> Vec<Region> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut regions = vec![Region {
        class: 0,
        shape: Shape::Ground {
            x0: -9.0,
            x1: 9.0,
            y0: -6.0,
            y1: 22.0,
        },
    }];
    let mut slots: Vec<(f64, f64)> = BOX_SLOTS_X
        .iter()
        .flat_map(|&x| BOX_SLOTS_Y.iter().map(move |&y| (x, y)))
        .collect();
    slots.shuffle(&mut rng);
    for class in 1..num_classes {
        let (sx, sy) = slots[class - 1];
        let cx = sx + rng.random_range(-0.5..0.5);
        let cy = sy + rng.random_range(-0.5..0.5);
        let hx = rng.random_range(0.5..0.9);
        let hy = rng.random_range(0.5..0.9);
        let h = rng.random_range(1.2..2.6);
        regions.push(Region {
            class,
            shape: Shape::Block {
                min: [cx - hx, cy - hy, 0.0],
                max: [cx + hx, cy + hy, h],
            },
        });
    }
    regions
}

fn default_camera(width: usize, height: usize) -> Result<CameraModel> {
    let f = 0.45 * width as f64;
    CameraModel::new(
        f,
        f,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
        0.1,
    )
}

/// True sweep-1-sensor-to-camera extrinsic: camera lifted above the lidar,
/// looking along +y, pitched down toward the ground.
fn true_extrinsic() -> RigidTransform {
    let (s, c) = CAMERA_PITCH.sin_cos();
    // Axis remap (x right, -z down, y forward) followed by the pitch.
    let rot = [
        1.0, 0.0, 0.0, //
        0.0, -s, -c, //
        0.0, c, -s,
    ];
    let center = [0.0, 0.0, CAMERA_LIFT];
    let t = [
        -(rot[0] * center[0] + rot[1] * center[1] + rot[2] * center[2]),
        -(rot[3] * center[0] + rot[4] * center[1] + rot[5] * center[2]),
        -(rot[6] * center[0] + rot[7] * center[1] + rot[8] * center[2]),
    ];
    RigidTransform::from_parts(rot, t).expect("pitch/remap rotation is orthonormal")
}

fn sweep_pose(cfg: &SceneConfig, k: usize) -> RigidTransform {
    let step = (k - 1) as f64;
    let yaw = RigidTransform::from_rotation_z(step * cfg.ego_rotation);
    RigidTransform::from_parts(
        yaw.rotation(),
        [0.0, step * cfg.ego_translation, SENSOR_HEIGHT],
    )
    .expect("yaw rotation is orthonormal")
}

// --- projection classification --------------------------------------------

enum Projection {
    Inside(PixelHit),
    Outside,
    /// Too close to a rounding / bounds / near-plane decision boundary.
    Borderline,
}

fn classify_projection(cam: &CameraModel, p_cam: [f64; 3]) -> Projection {
    let z = p_cam[2];
    if (z - cam.z_near).abs() <= Z_MARGIN {
        return Projection::Borderline;
    }
    if z < cam.z_near {
        return Projection::Outside;
    }
    let u = cam.fx * p_cam[0] / z + cam.cx;
    let v = cam.fy * p_cam[1] / z + cam.cy;
    if (u - u.round()).abs() > 0.5 - PIXEL_MARGIN || (v - v.round()).abs() > 0.5 - PIXEL_MARGIN {
        return Projection::Borderline;
    }
    match cam.project(p_cam) {
        Some(hit) => Projection::Inside(hit),
        None => Projection::Outside,
    }
}

// --- generation ------------------------------------------------------------

/// Deterministically derives an independent RNG stream from a base seed and
/// a tag, so adding draws to one stage never shifts another.
pub(crate) fn subseed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_BANK: u64 = 1;
const TAG_LAYOUT: u64 = 2;
const TAG_PIXEL_NOISE: u64 = 3;
const TAG_LABEL_NOISE: u64 = 4;
const TAG_CALIB: u64 = 5;
const TAG_SWEEP_BASE: u64 = 100;

pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneBundle> {
    cfg.validate()?;
    let c = cfg.num_classes;

    let mut bank = build_text_bank(
        subseed(cfg.seed, TAG_BANK),
        c,
        cfg.feature_dim,
        cfg.prompt_count,
        cfg.prompt_noise_sigma,
    )?;
    bank.class_names = (0..c)
        .map(|i| if i == 0 { "ground".into() } else { format!("block_{i}") })
        .collect();

    let regions = layout_regions(subseed(cfg.seed, TAG_LAYOUT), c);
    let camera = default_camera(cfg.image_width, cfg.image_height)?;
    let extrinsic_true = true_extrinsic();
    let poses: Vec<RigidTransform> = (1..=cfg.num_sweeps).map(|k| sweep_pose(cfg, k)).collect();

    // Physically true imagery: raytrace class ids through the true extrinsic.
    let cam_to_world = poses[0].compose(&extrinsic_true.invert());
    let cam_origin = cam_to_world.transform_point([0.0, 0.0, 0.0]);
    let mut pixel_class_true = vec![-1i32; cfg.image_width * cfg.image_height];
    for row in 0..cfg.image_height {
        for col in 0..cfg.image_width {
            let dir_cam = [
                (col as f64 - camera.cx) / camera.fx,
                (row as f64 - camera.cy) / camera.fy,
                1.0,
            ];
            let dir = cam_to_world.rotate_vector(dir_cam);
            if let Some((class, _)) = raycast(&regions, cam_origin, dir) {
                pixel_class_true[row * cfg.image_width + col] = class as i32;
            }
        }
    }
    if !pixel_class_true.iter().any(|&l| l >= 0) {
        return Err(Error::validation("camera sees no labeled geometry"));
    }

    // Pixel classes handed downstream, with a fraction flipped to wrong
    // labels. Features are built from the true classes, so a flipped pixel
    // keeps a feature that disagrees with its label.
    let mut pixel_class = pixel_class_true.clone();
    if cfg.label_noise_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, TAG_LABEL_NOISE));
        for l in pixel_class.iter_mut() {
            if *l < 0 {
                continue;
            }
            let u: f64 = rng.random_range(0.0..1.0);
            if u < cfg.label_noise_rate {
                let mut wrong = rng.random_range(0..c - 1) as i32;
                if wrong >= *l {
                    wrong += 1;
                }
                *l = wrong;
            }
        }
    }

    let mut rng_feat = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, TAG_PIXEL_NOISE));
    let hw = cfg.image_width * cfg.image_height;
    let mut pixel_features = Array2::zeros((hw, cfg.feature_dim));
    for (i, &class) in pixel_class_true.iter().enumerate() {
        let row = if class >= 0 {
            let base = bank.embeddings.row(class as usize).to_owned();
            if cfg.feature_noise_sigma == 0.0 {
                base
            } else {
                let mut v = base;
                for x in v.iter_mut() {
                    let n: f64 = rng_feat.sample(StandardNormal);
                    *x += cfg.feature_noise_sigma * n;
                }
                normalize_checked(v, "pixel feature")?
            }
        } else {
            random_unit(&mut rng_feat, cfg.feature_dim)
        };
        pixel_features.row_mut(i).assign(&row);
    }

    // Class -> pixels available for in-view sampling, from the true map.
    let mut class_pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); c];
    for row in 0..cfg.image_height {
        for col in 0..cfg.image_width {
            let l = pixel_class_true[row * cfg.image_width + col];
            if l >= 0 {
                class_pixels[l as usize].push((row, col));
            }
        }
    }
    let present: Vec<usize> = (0..c).filter(|&i| !class_pixels[i].is_empty()).collect();

    let world_to_first = poses[0].invert();
    let mut sweeps = Vec::with_capacity(cfg.num_sweeps);
    let mut point_labels = Vec::with_capacity(cfg.num_sweeps);
    for k in 1..=cfg.num_sweeps {
        let pose = &poses[k - 1];
        let world_to_k = pose.invert();
        // Same composition order as sweep registration, so verification
        // below runs the identical float path the pairing stage will.
        let reg_to_first = if k == 1 {
            None
        } else {
            Some(world_to_first.compose(pose))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, TAG_SWEEP_BASE + k as u64));
        let n = cfg.points_per_sweep;
        let n_in = ((n as f64) * IN_VIEW_FRACTION).round() as usize;
        let mut pts = Array2::zeros((n, 3));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (p_sensor, label) = if i < n_in {
                sample_in_view(
                    &regions,
                    &camera,
                    &extrinsic_true,
                    &cam_to_world,
                    cam_origin,
                    &class_pixels,
                    &present,
                    &pixel_class_true,
                    cfg.image_width,
                    &world_to_k,
                    reg_to_first.as_ref(),
                    &mut rng,
                )?
            } else {
                sample_anywhere(
                    &regions,
                    &camera,
                    &extrinsic_true,
                    &cam_to_world,
                    cam_origin,
                    &class_pixels,
                    &present,
                    &pixel_class_true,
                    cfg.image_width,
                    &world_to_k,
                    reg_to_first.as_ref(),
                    &mut rng,
                )?
            };
            pts[[i, 0]] = p_sensor[0];
            pts[[i, 1]] = p_sensor[1];
            pts[[i, 2]] = p_sensor[2];
            labels.push(label as i32);
        }
        let timestamp = (k - 1) as f64 * cfg.window_seconds / cfg.num_sweeps as f64;
        sweeps.push(Sweep::new(k as u32, timestamp, pts, pose.clone())?);
        point_labels.push(labels);
    }

    let cam_extrinsic = if cfg.calib_rot_error > 0.0 || cfg.calib_trans_error > 0.0 {
        perturb_extrinsic(
            &extrinsic_true,
            cfg.calib_rot_error,
            cfg.calib_trans_error,
            subseed(cfg.seed, TAG_CALIB),
        )?
    } else {
        extrinsic_true
    };

    let bundle = SceneBundle {
        camera,
        cam_extrinsic,
        sweeps,
        point_labels,
        pixel_class,
        pixel_features,
        text_bank: bank,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Verifies a candidate sensor-frame point through the exact projection
/// chain the pairing stage uses. Returns the pixel it lands in, `None` if it
/// robustly misses the image, and `Err(())` if it sits too close to a
/// decision boundary to keep.
fn verify_chain(
    camera: &CameraModel,
    extrinsic: &RigidTransform,
    reg_to_first: Option<&RigidTransform>,
    p_sensor: [f64; 3],
) -> std::result::Result<Option<PixelHit>, ()> {
    let p_first = match reg_to_first {
        None => p_sensor,
        Some(t) => t.transform_point(p_sensor),
    };
    let p_cam = extrinsic.transform_point(p_first);
    match classify_projection(camera, p_cam) {
        Projection::Inside(hit) => Ok(Some(hit)),
        Projection::Outside => Ok(None),
        Projection::Borderline => Err(()),
    }
}

/// Samples a surface point through a randomly chosen labeled pixel of a
/// randomly chosen visible class, retrying until the point's projection is
/// occlusion- and boundary-consistent with that pixel.
#[allow(clippy::too_many_arguments)]
fn sample_in_view(
    regions: &[Region],
    camera: &CameraModel,
    extrinsic: &RigidTransform,
    cam_to_world: &RigidTransform,
    cam_origin: [f64; 3],
    class_pixels: &[Vec<(usize, usize)>],
    present: &[usize],
    pixel_class_true: &[i32],
    width: usize,
    world_to_k: &RigidTransform,
    reg_to_first: Option<&RigidTransform>,
    rng: &mut ChaCha8Rng,
) -> Result<([f64; 3], usize)> {
    for attempt in 0..64 {
        let class = present[rng.random_range(0..present.len())];
        let pixels = &class_pixels[class];
        let (row, col) = pixels[rng.random_range(0..pixels.len())];
        // After 32 jittered tries fall back to the pixel center, whose ray
        // reproduces the rendered class by definition.
        let (du, dv) = if attempt < 32 {
            (
                rng.random_range(-PIXEL_JITTER..PIXEL_JITTER),
                rng.random_range(-PIXEL_JITTER..PIXEL_JITTER),
            )
        } else {
            (0.0, 0.0)
        };
        let dir_cam = [
            (col as f64 + du - camera.cx) / camera.fx,
            (row as f64 + dv - camera.cy) / camera.fy,
            1.0,
        ];
        let dir = cam_to_world.rotate_vector(dir_cam);
        let Some((hit_class, t)) = raycast(regions, cam_origin, dir) else {
            continue;
        };
        if hit_class != class {
            continue;
        }
        let p_world = [
            cam_origin[0] + t * dir[0],
            cam_origin[1] + t * dir[1],
            cam_origin[2] + t * dir[2],
        ];
        let p_sensor = world_to_k.transform_point(p_world);
        match verify_chain(camera, extrinsic, reg_to_first, p_sensor) {
            Ok(Some(hit)) if pixel_class_true[hit.row * width + hit.col] == class as i32 => {
                return Ok((p_sensor, class));
            }
            _ => continue,
        }
    }
    Err(Error::validation(
        "could not sample a projection-consistent point (degenerate scene)",
    ))
}

/// Samples a surface point anywhere on the scene geometry. Points that
/// robustly miss the image are kept as-is; points that project must agree
/// with their pixel's class; borderline projections are re-sampled.
#[allow(clippy::too_many_arguments)]
fn sample_anywhere(
    regions: &[Region],
    camera: &CameraModel,
    extrinsic: &RigidTransform,
    cam_to_world: &RigidTransform,
    cam_origin: [f64; 3],
    class_pixels: &[Vec<(usize, usize)>],
    present: &[usize],
    pixel_class_true: &[i32],
    width: usize,
    world_to_k: &RigidTransform,
    reg_to_first: Option<&RigidTransform>,
    rng: &mut ChaCha8Rng,
) -> Result<([f64; 3], usize)> {
    for _ in 0..32 {
        let region = &regions[rng.random_range(0..regions.len())];
        let p_world = sample_surface(&region.shape, rng);
        let p_sensor = world_to_k.transform_point(p_world);
        match verify_chain(camera, extrinsic, reg_to_first, p_sensor) {
            Ok(None) => return Ok((p_sensor, region.class)),
            Ok(Some(hit))
                if pixel_class_true[hit.row * width + hit.col] == region.class as i32 =>
            {
                return Ok((p_sensor, region.class));
            }
            _ => continue,
        }
    }
    // Heavily occluded draw streak; a pixel-driven sample always lands.
    sample_in_view(
        regions,
        camera,
        extrinsic,
        cam_to_world,
        cam_origin,
        class_pixels,
        present,
        pixel_class_true,
        width,
        world_to_k,
        reg_to_first,
        rng,
    )
}

fn perturb_extrinsic(
    extrinsic: &RigidTransform,
    rot_eps: f64,
    trans_eps: f64,
    seed: u64,
) -> Result<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng, 3);
    let dir = random_unit(&mut rng, 3);
    let delta = RigidTransform::from_axis_angle(
        [axis[0], axis[1], axis[2]],
        rot_eps,
        [trans_eps * dir[0], trans_eps * dir[1], trans_eps * dir[2]],
    )?;
    Ok(delta.compose(extrinsic))
}

/// Returns a copy of the bundle whose stored extrinsic is off by a rotation
/// of `rot_eps` radians about a random axis and a translation of
/// `trans_eps` meters in a random direction. Zero magnitudes return the
/// bundle unchanged.
pub fn inject_calibration_error(
    bundle: &SceneBundle,
    rot_eps: f64,
    trans_eps: f64,
    seed: u64,
) -> Result<SceneBundle> {
    for (name, v) in [("rot_eps", rot_eps), ("trans_eps", trans_eps)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::config(format!("{name} must be finite and >= 0")));
        }
    }
    let mut out = bundle.clone();
    if rot_eps == 0.0 && trans_eps == 0.0 {
        return Ok(out);
    }
    out.cam_extrinsic = perturb_extrinsic(&bundle.cam_extrinsic, rot_eps, trans_eps, seed)?;
    Ok(out)
}

// --- persistence ------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    camera: CameraModel,
    cam_extrinsic: Vec<f64>,
    class_names: Vec<String>,
    feature_dim: usize,
    prompt_count: usize,
    sweeps: Vec<ManifestSweep>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestSweep {
    sweep_id: u32,
    timestamp: f64,
    point_count: usize,
    sensor_to_world: Vec<f64>,
}

fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        camera: bundle.camera.clone(),
        cam_extrinsic: bundle.cam_extrinsic.matrix().to_vec(),
        class_names: bundle.text_bank.class_names.clone(),
        feature_dim: bundle.feature_dim(),
        prompt_count: bundle.text_bank.prompt_count,
        sweeps: bundle
            .sweeps
            .iter()
            .map(|s| ManifestSweep {
                sweep_id: s.sweep_id,
                timestamp: s.timestamp,
                point_count: s.points.nrows(),
                sensor_to_world: s.sensor_to_world.matrix().to_vec(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::parse(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    for (sweep, labels) in bundle.sweeps.iter().zip(&bundle.point_labels) {
        let path = dir.join(format!("sweep_{}.xyz", sweep.sweep_id));
        let mut text = String::new();
        for (p, &l) in sweep.points.rows().into_iter().zip(labels) {
            // 17 significant digits: parses back to the identical f64.
            writeln!(text, "{:.16e} {:.16e} {:.16e} {}", p[0], p[1], p[2], l)
                .expect("string write");
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }

    write_f32_matrix(&dir.join("pixel_features.f32"), &bundle.pixel_features)?;
    write_f32_matrix(&dir.join("text_bank.f32"), &bundle.text_bank.embeddings)?;

    let path = dir.join("pixel_class.txt");
    let mut text = String::new();
    for row in 0..bundle.camera.height {
        let line: Vec<String> = (0..bundle.camera.width)
            .map(|col| bundle.pixel_class[row * bundle.camera.width + col].to_string())
            .collect();
        writeln!(text, "{}", line.join(" ")).expect("string write");
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn write_f32_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for v in m.iter() {
        w.write_all(&(*v as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let expect = rows * cols * 4;
    if bytes.len() != expect {
        return Err(Error::parse(
            path,
            format!("expected {expect} bytes ({rows} x {cols} f32), found {}", bytes.len()),
        ));
    }
    let mut m = Array2::zeros((rows, cols));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        m[[i / cols, i % cols]] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok(m)
}

fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let camera = CameraModel::new(
        manifest.camera.fx,
        manifest.camera.fy,
        manifest.camera.cx,
        manifest.camera.cy,
        manifest.camera.width,
        manifest.camera.height,
        manifest.camera.z_near,
    )?;
    let cam_extrinsic = RigidTransform::from_matrix(matrix16(&path, &manifest.cam_extrinsic)?)?;

    let mut sweeps = Vec::new();
    let mut point_labels = Vec::new();
    for ms in &manifest.sweeps {
        let pose = RigidTransform::from_matrix(matrix16(&path, &ms.sensor_to_world)?)?;
        let sweep_path = dir.join(format!("sweep_{}.xyz", ms.sweep_id));
        let text = fs::read_to_string(&sweep_path).map_err(|e| Error::io(&sweep_path, e))?;
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    &sweep_path,
                    format!("line {}: expected 'x y z label'", ln + 1),
                ));
            }
            for f in &fields[..3] {
                coords.push(f.parse::<f64>().map_err(|e| {
                    Error::parse(&sweep_path, format!("line {}: {e}", ln + 1))
                })?);
            }
            labels.push(fields[3].parse::<i32>().map_err(|e| {
                Error::parse(&sweep_path, format!("line {}: {e}", ln + 1))
            })?);
        }
        if labels.len() != ms.point_count {
            return Err(Error::parse(
                &sweep_path,
                format!("expected {} points, found {}", ms.point_count, labels.len()),
            ));
        }
        let points = Array2::from_shape_vec((labels.len(), 3), coords)
            .map_err(|e| Error::parse(&sweep_path, e.to_string()))?;
        sweeps.push(Sweep::new(ms.sweep_id, ms.timestamp, points, pose)?);
        point_labels.push(labels);
    }

    let hw = camera.width * camera.height;
    let pixel_features =
        read_f32_matrix(&dir.join("pixel_features.f32"), hw, manifest.feature_dim)?;
    let embeddings = read_f32_matrix(
        &dir.join("text_bank.f32"),
        manifest.class_names.len(),
        manifest.feature_dim,
    )?;

    let class_path = dir.join("pixel_class.txt");
    let text = fs::read_to_string(&class_path).map_err(|e| Error::io(&class_path, e))?;
    let mut pixel_class = Vec::with_capacity(hw);
    for (ln, line) in text.lines().enumerate() {
        for f in line.split_whitespace() {
            pixel_class.push(f.parse::<i32>().map_err(|e| {
                Error::parse(&class_path, format!("line {}: {e}", ln + 1))
            })?);
        }
        if pixel_class.len() != (ln + 1) * camera.width {
            return Err(Error::parse(
                &class_path,
                format!("line {}: expected {} entries", ln + 1, camera.width),
            ));
        }
    }
    if pixel_class.len() != hw {
        return Err(Error::parse(
            &class_path,
            format!("expected {} rows", camera.height),
        ));
    }

    let bundle = SceneBundle {
        camera,
        cam_extrinsic,
        sweeps,
        point_labels,
        pixel_class,
        pixel_features,
        text_bank: TextBank {
            embeddings,
            prompt_count: manifest.prompt_count,
            class_names: manifest.class_names,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}

fn matrix16(path: &Path, v: &[f64]) -> Result<[f64; 16]> {
    v.try_into()
        .map_err(|_| Error::parse(path, format!("expected 16 matrix entries, found {}", v.len())))
}

/// Registered stitched cloud plus flattened ground truth, in matching row
/// order. Convenience for training and evaluation.
pub fn stitched_with_labels(bundle: &SceneBundle) -> Result<(crate::geom::StitchedCloud, Vec<i32>)> {
    let stitched = register_sweeps(&bundle.sweeps)?;
    let labels = bundle.flat_point_labels();
    debug_assert_eq!(stitched.len(), labels.len());
    Ok((stitched, labels))
}
