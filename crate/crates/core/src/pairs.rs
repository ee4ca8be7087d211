//! Pixel-point correspondences and label lifting.
//!
//! Registered points are pushed through the stored camera calibration; every
//! point whose projection lands on a pixel becomes one correspondence entry.
//! Entries inherit the stitched cloud's order (sweep-major, point-minor), so
//! the sweep-1 entries form a prefix.

use ndarray::Array2;
use std::io::Write;

use crate::error::{Error, Result};
use crate::geom::register_sweeps;
use crate::synth::SceneBundle;

/// One pixel-point correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEntry {
    pub pixel_row: usize,
    pub pixel_col: usize,
    pub sweep_id: u32,
    /// Index within the sweep's own point array.
    pub point_index: usize,
}

/// All correspondences of one scene, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub entries: Vec<PairEntry>,
    /// Stitched-cloud row backing each entry.
    pub stitched_rows: Vec<usize>,
    /// Sweep-1-frame coordinates of each entry's point (`M x 3`).
    pub registered_xyz: Array2<f64>,
    /// Number of leading entries that come from sweep 1.
    pub m1: usize,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Projects every registered point through the stored calibration and keeps
/// those that land on a pixel.
pub fn build_correspondences(scene: &SceneBundle) -> Result<CorrespondenceSet> {
    let stitched = register_sweeps(&scene.sweeps)?;
    let mut entries = Vec::new();
    let mut stitched_rows = Vec::new();
    let mut coords = Vec::new();
    for (row, p) in stitched.points.rows().into_iter().enumerate() {
        let p = [p[0], p[1], p[2]];
        let p_cam = scene.cam_extrinsic.transform_point(p);
        if let Some(hit) = scene.camera.project(p_cam) {
            let (sweep_id, point_index) = stitched.provenance[row];
            entries.push(PairEntry {
                pixel_row: hit.row,
                pixel_col: hit.col,
                sweep_id,
                point_index,
            });
            stitched_rows.push(row);
            coords.extend_from_slice(&p);
        }
    }
    let m1 = entries.iter().take_while(|e| e.sweep_id == 1).count();
    debug_assert!(entries[m1..].iter().all(|e| e.sweep_id != 1));
    let registered_xyz = Array2::from_shape_vec((entries.len(), 3), coords)
        .expect("coords accumulate three per entry");
    Ok(CorrespondenceSet {
        entries,
        stitched_rows,
        registered_xyz,
        m1,
    })
}

/// Where a point's text label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// Lifted from the projected pixel's class map.
    Pixel,
    /// Replaced by the model's own prediction during self-training.
    SelfPred,
}

/// Per-entry class labels plus their provenance; -1 marks entries whose
/// pixel is unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTextLabels {
    pub labels: Vec<i32>,
    pub sources: Vec<LabelSource>,
}

impl PointTextLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).count()
    }
}

/// Copies each entry's pixel class onto the paired point.
pub fn lift_point_text(
    pairs: &CorrespondenceSet,
    pixel_class: &[i32],
    width: usize,
) -> PointTextLabels {
    let labels = pairs
        .entries
        .iter()
        .map(|e| pixel_class[e.pixel_row * width + e.pixel_col])
        .collect::<Vec<_>>();
    let sources = vec![LabelSource::Pixel; labels.len()];
    PointTextLabels { labels, sources }
}

/// Entry indices of one class: members versus every other labeled entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Per-class positive/negative index sets for the contrastive objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSets {
    /// One split per class, index = class id.
    pub splits: Vec<ClassSplit>,
    /// Entries with no label, excluded from every split.
    pub unlabeled: Vec<usize>,
}

pub fn select_contrastive_sets(labels: &[i32], num_classes: usize) -> Result<ContrastiveSets> {
    for (i, &l) in labels.iter().enumerate() {
        if l < -1 || l >= num_classes as i32 {
            return Err(Error::validation(format!(
                "entry {i} has label {l}, outside -1..{num_classes}"
            )));
        }
    }
    let mut splits = vec![
        ClassSplit {
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        num_classes
    ];
    let mut unlabeled = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            unlabeled.push(i);
            continue;
        }
        for (c, split) in splits.iter_mut().enumerate() {
            if c == l as usize {
                split.positives.push(i);
            } else {
                split.negatives.push(i);
            }
        }
    }
    Ok(ContrastiveSets { splits, unlabeled })
}

/// Dumps the correspondence set with its lifted labels, one entry per line.
pub fn write_pairs_csv<W: Write>(
    mut w: W,
    pairs: &CorrespondenceSet,
    labels: &PointTextLabels,
) -> Result<()> {
    if pairs.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} entries but {} labels",
            pairs.len(),
            labels.len()
        )));
    }
    let io_err = |e: std::io::Error| Error::io("pairs.csv", e);
    writeln!(w, "pixel_row,pixel_col,sweep,point,label").map_err(io_err)?;
    for (e, &l) in pairs.entries.iter().zip(&labels.labels) {
        writeln!(
            w,
            "{},{},{},{},{}",
            e.pixel_row, e.pixel_col, e.sweep_id, e.point_index, l
        )
        .map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};

    fn test_scene(seed: u64) -> SceneBundle {
        generate_scene(&SceneConfig {
            seed,
            image_width: 48,
            image_height: 48,
            points_per_sweep: 150,
            label_noise_rate: 0.0,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    // Independent projection oracle: raw 4x4 arithmetic on the stored pose
    // matrices, no calls into the geometry module.
    mod oracle {
        use crate::synth::SceneBundle;

        fn mat_mul(a: &[f64; 16], b: &[f64; 16]) -> [f64; 16] {
            let mut m = [0.0; 16];
            for r in 0..4 {
                for c in 0..4 {
                    m[r * 4 + c] = (0..4).map(|k| a[r * 4 + k] * b[k * 4 + c]).sum();
                }
            }
            m
        }

        fn rigid_inverse(m: &[f64; 16]) -> [f64; 16] {
            let mut inv = [0.0; 16];
            for r in 0..3 {
                for c in 0..3 {
                    inv[r * 4 + c] = m[c * 4 + r];
                }
            }
            for r in 0..3 {
                inv[r * 4 + 3] =
                    -(inv[r * 4] * m[3] + inv[r * 4 + 1] * m[7] + inv[r * 4 + 2] * m[11]);
            }
            inv[15] = 1.0;
            inv
        }

        fn apply(m: &[f64; 16], p: [f64; 3]) -> [f64; 3] {
            [
                m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
                m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
                m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
            ]
        }

        /// `(pixel_row, pixel_col, sweep_id, point_index)` for every point
        /// that projects onto the image, by direct per-point arithmetic.
        pub fn project_all(scene: &SceneBundle) -> Vec<(usize, usize, u32, usize)> {
            let mut order: Vec<usize> = (0..scene.sweeps.len()).collect();
            order.sort_by_key(|&i| scene.sweeps[i].sweep_id);
            let t1_inv = rigid_inverse(scene.sweeps[order[0]].sensor_to_world.matrix());
            let ext = scene.cam_extrinsic.matrix();
            let cam = &scene.camera;
            let mut out = Vec::new();
            for &i in &order {
                let sweep = &scene.sweeps[i];
                let chain = mat_mul(&t1_inv, sweep.sensor_to_world.matrix());
                for (idx, p) in sweep.points.rows().into_iter().enumerate() {
                    let p1 = apply(&chain, [p[0], p[1], p[2]]);
                    let pc = apply(ext, p1);
                    if pc[2] <= cam.z_near {
                        continue;
                    }
                    let u = cam.fx * pc[0] / pc[2] + cam.cx;
                    let v = cam.fy * pc[1] / pc[2] + cam.cy;
                    let col = u.round();
                    let row = v.round();
                    if col < 0.0
                        || col > (cam.width - 1) as f64
                        || row < 0.0
                        || row > (cam.height - 1) as f64
                    {
                        continue;
                    }
                    out.push((row as usize, col as usize, sweep.sweep_id, idx));
                }
            }
            out
        }
    }

    #[test]
    fn correspondences_match_brute_force_projection_exactly() {
        let scene = test_scene(3);
        let cs = build_correspondences(&scene).unwrap();
        let expected = oracle::project_all(&scene);
        assert_eq!(cs.len(), expected.len());
        for (e, &(r, c, s, p)) in cs.entries.iter().zip(&expected) {
            assert_eq!((e.pixel_row, e.pixel_col, e.sweep_id, e.point_index), (r, c, s, p));
        }
    }

    #[test]
    fn sweep_one_entries_form_a_prefix() {
        let scene = test_scene(4);
        let cs = build_correspondences(&scene).unwrap();
        assert!(cs.m1 > 0);
        assert!(cs.entries[..cs.m1].iter().all(|e| e.sweep_id == 1));
        assert!(cs.entries[cs.m1..].iter().all(|e| e.sweep_id != 1));
    }

    #[test]
    fn registered_coords_match_the_stitched_cloud() {
        let scene = test_scene(5);
        let cs = build_correspondences(&scene).unwrap();
        let stitched = register_sweeps(&scene.sweeps).unwrap();
        for (i, &row) in cs.stitched_rows.iter().enumerate() {
            assert_eq!(cs.registered_xyz.row(i), stitched.points.row(row));
            let e = &cs.entries[i];
            assert_eq!(stitched.provenance[row], (e.sweep_id, e.point_index));
        }
    }

    #[test]
    fn noiseless_lifted_labels_agree_with_ground_truth() {
        for seed in [0, 1, 2] {
            let scene = test_scene(seed);
            let cs = build_correspondences(&scene).unwrap();
            let lifted = lift_point_text(&cs, &scene.pixel_class, scene.camera.width);
            assert!(!cs.is_empty());
            let mut mismatches = 0;
            for (e, &l) in cs.entries.iter().zip(&lifted.labels) {
                let gt = scene.point_labels[(e.sweep_id - 1) as usize][e.point_index];
                if l != gt {
                    mismatches += 1;
                }
            }
            assert_eq!(mismatches, 0, "seed {seed}");
            assert!(lifted.sources.iter().all(|&s| s == LabelSource::Pixel));
        }
    }

    #[test]
    fn calibration_error_creates_label_mismatches() {
        let scene = test_scene(6);
        let off = crate::synth::inject_calibration_error(&scene, 0.04, 0.1, 17).unwrap();
        let cs = build_correspondences(&off).unwrap();
        let lifted = lift_point_text(&cs, &off.pixel_class, off.camera.width);
        let mismatches = cs
            .entries
            .iter()
            .zip(&lifted.labels)
            .filter(|(e, &l)| {
                let gt = off.point_labels[(e.sweep_id - 1) as usize][e.point_index];
                l != gt
            })
            .count();
        assert!(
            mismatches > 0,
            "a 0.04 rad / 0.1 m calibration error should misalign some pairs"
        );
    }

    #[test]
    fn contrastive_sets_partition_labeled_entries() {
        let labels = [0, 1, 0, -1, 2, 1];
        let sets = select_contrastive_sets(&labels, 3).unwrap();
        assert_eq!(sets.splits[0].positives, vec![0, 2]);
        assert_eq!(sets.splits[0].negatives, vec![1, 4, 5]);
        assert_eq!(sets.splits[1].positives, vec![1, 5]);
        assert_eq!(sets.splits[2].positives, vec![4]);
        assert_eq!(sets.unlabeled, vec![3]);
        // Each labeled entry appears in exactly one positives list and in
        // every other class's negatives.
        let labeled = labels.iter().filter(|&&l| l >= 0).count();
        let pos_total: usize = sets.splits.iter().map(|s| s.positives.len()).sum();
        assert_eq!(pos_total, labeled);
        for (c, split) in sets.splits.iter().enumerate() {
            assert_eq!(split.negatives.len(), labeled - split.positives.len(), "class {c}");
        }
    }

    #[test]
    fn contrastive_sets_reject_out_of_range_labels() {
        assert!(select_contrastive_sets(&[0, 3], 3).is_err());
        assert!(select_contrastive_sets(&[-2], 3).is_err());
    }

    #[test]
    fn csv_dump_is_stable() {
        let cs = CorrespondenceSet {
            entries: vec![
                PairEntry {
                    pixel_row: 5,
                    pixel_col: 7,
                    sweep_id: 1,
                    point_index: 0,
                },
                PairEntry {
                    pixel_row: 9,
                    pixel_col: 0,
                    sweep_id: 2,
                    point_index: 3,
                },
            ],
            stitched_rows: vec![0, 4],
            registered_xyz: Array2::zeros((2, 3)),
            m1: 1,
        };
        let labels = PointTextLabels {
            labels: vec![2, -1],
            sources: vec![LabelSource::Pixel; 2],
        };
        let mut buf = Vec::new();
        write_pairs_csv(&mut buf, &cs, &labels).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "pixel_row,pixel_col,sweep,point,label\n5,7,1,0,2\n9,0,2,3,-1\n"
        );
    }
}
