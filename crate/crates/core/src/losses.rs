//! Training objectives with analytic gradients.
//!
//! Three losses operate on unit-norm feature rows:
//!
//! * [`semantic_infonce`]: a class-partitioned contrastive loss. For each
//!   class `c` with text embedding `t_c`, positives are the points labeled
//!   `c` and negatives the points labeled anything else; the per-class term
//!   is `-log( sum_pos exp(<t_c, p_i>/tau) / sum_neg exp(<t_c, p_j>/tau) )`.
//!   By default the denominator excludes the positives; a config flag adds
//!   them back to recover the conventional form.
//! * [`stcr_loss`]: grid cells pool their members' pixel and point features
//!   into one fused vector via a joint softmax attention
//!   (see [`fusion_features`]); each member is then pulled toward the fused
//!   vector with a sigmoid consistency term `1 - sigmoid(<p_e, f>)`,
//!   averaged over cells.
//! * [`kl_distill_loss`]: a pointwise baseline that softmaxes pixel and
//!   point features against the text bank and penalizes
//!   `KL(pixel distribution || point distribution)`.
//!
//! All evaluations are log-sum-exp stabilized and run in canonical
//! (ascending-index) order, so results are bitwise reproducible. The
//! [`naive`] submodule holds deliberately unstabilized double-loop
//! evaluations of the same quantities; they share no code with the
//! implementations above and exist to cross-check them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::geom::GridPartition;

/// Shared loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Attention temperature for fusion weights.
    pub lambda: f64,
    /// Include each class's positives in its contrastive denominator
    /// (the conventional form). Off by default: the denominator ranges over
    /// the other classes' points only.
    pub include_positives_in_denominator: bool,
    /// Treat the fused vector as a constant in the consistency gradient.
    pub stop_gradient_through_fusion: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            lambda: 1.0,
            include_positives_in_denominator: false,
            stop_gradient_through_fusion: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("tau must be positive and finite"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config("lambda must be positive and finite"));
        }
        Ok(())
    }
}

/// What a loss evaluation skipped, for transparency rather than failure.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LossDiagnostics {
    /// Classes without both a positive and a denominator entry.
    pub skipped_classes: Vec<usize>,
    /// Grid cells with no labeled member.
    pub skipped_cells: usize,
}

/// A loss value with its gradient w.r.t. the point features.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    /// Same shape as the point-feature input.
    pub grad_points: Array2<f64>,
    pub diagnostics: LossDiagnostics,
}

pub(crate) fn check_unit_rows(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "{what} row {i} has norm {norm:.9}, expected 1 within 1e-6"
            )));
        }
    }
    Ok(())
}

fn check_labels(labels: &[i32], num_classes: usize) -> Result<()> {
    for (i, &l) in labels.iter().enumerate() {
        if l < -1 || l >= num_classes as i32 {
            return Err(Error::validation(format!(
                "label {l} at entry {i} outside -1..{num_classes}"
            )));
        }
    }
    Ok(())
}

fn logsumexp_over(scores: &ArrayView1<f64>, idx: &[usize]) -> f64 {
    debug_assert!(!idx.is_empty());
    let mut max = f64::NEG_INFINITY;
    for &i in idx {
        max = max.max(scores[i]);
    }
    let mut sum = 0.0;
    for &i in idx {
        sum += (scores[i] - max).exp();
    }
    max + sum.ln()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

// --- class-partitioned contrastive loss -------------------------------------

/// Validated entry point; see the module docs for the objective.
///
/// Entries labeled -1 are ignored. A class missing either a positive or a
/// denominator entry contributes nothing and is listed in the diagnostics;
/// if every class is skipped the loss is exactly zero with zero gradient.
pub fn semantic_infonce(
    point_feats: &ArrayView2<f64>,
    text_bank: &ArrayView2<f64>,
    labels: &[i32],
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if point_feats.ncols() != text_bank.ncols() {
        return Err(Error::validation("point/text feature dims differ"));
    }
    if labels.len() != point_feats.nrows() {
        return Err(Error::validation("one label per point row required"));
    }
    check_labels(labels, text_bank.nrows())?;
    check_unit_rows(point_feats, "point feature")?;
    check_unit_rows(text_bank, "text bank")?;
    Ok(semantic_infonce_raw(point_feats, text_bank, labels, cfg))
}

/// Unvalidated core, shared with the finite-difference harness (which must
/// evaluate at perturbed, hence slightly non-unit, inputs).
pub(crate) fn semantic_infonce_raw(
    point_feats: &ArrayView2<f64>,
    text_bank: &ArrayView2<f64>,
    labels: &[i32],
    cfg: &LossConfig,
) -> LossReport {
    let m = point_feats.nrows();
    let c_count = text_bank.nrows();
    let mut grad = Array2::zeros((m, point_feats.ncols()));
    let mut diagnostics = LossDiagnostics::default();
    // scores[c][i] = <t_c, p_i> / tau
    let scores = text_bank.dot(&point_feats.t()) / cfg.tau;
    let mut value = 0.0;
    for c in 0..c_count {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            if l as usize == c {
                pos.push(i);
            } else {
                neg.push(i);
            }
        }
        let den: Vec<usize> = if cfg.include_positives_in_denominator {
            let mut d = pos.clone();
            d.extend_from_slice(&neg);
            d.sort_unstable();
            d
        } else {
            neg
        };
        if pos.is_empty() || den.is_empty() {
            diagnostics.skipped_classes.push(c);
            continue;
        }
        let row = scores.row(c);
        let lse_pos = logsumexp_over(&row, &pos);
        let lse_den = logsumexp_over(&row, &den);
        value += lse_den - lse_pos;
        let t_c = text_bank.row(c);
        for &i in &pos {
            let w = (row[i] - lse_pos).exp();
            grad.row_mut(i).scaled_add(-w / cfg.tau, &t_c);
        }
        for &j in &den {
            let w = (row[j] - lse_den).exp();
            grad.row_mut(j).scaled_add(w / cfg.tau, &t_c);
        }
    }
    LossReport {
        value,
        grad_points: grad,
        diagnostics,
    }
}

// --- attention fusion --------------------------------------------------------

/// One grid cell's fused feature and attention weights.
#[derive(Debug, Clone)]
pub struct FusionCell {
    /// Index into the partition's cell list.
    pub grid_cell: usize,
    /// Labeled member entries, ascending.
    pub members: Vec<usize>,
    /// Class of each member.
    pub labels: Vec<usize>,
    /// Pixel-side attention weight `a_e` per member.
    pub weight_pixel: Vec<f64>,
    /// Point-side attention weight `b_e` per member.
    pub weight_point: Vec<f64>,
    /// `f = sum_e a_e x_e + b_e p_e`.
    pub fused: Array1<f64>,
}

/// Fusion output across all cells. Within each cell the weights satisfy
/// `sum_e (a_e + b_e) = 1` (they are one joint softmax), so the fused vector
/// is a convex combination of the members' pixel and point features.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub cells: Vec<FusionCell>,
    /// Cells dropped for lack of labeled members.
    pub skipped_cells: usize,
}

/// Computes each cell's fused feature. Member logits are the similarities
/// of the member's pixel (resp. point) feature to its own class text,
/// scaled by `1 / lambda`, softmaxed jointly across `2 x members`.
pub fn fusion_features(
    grid: &GridPartition,
    pixel_feats: &ArrayView2<f64>,
    point_feats: &ArrayView2<f64>,
    labels: &[i32],
    text_bank: &ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<FusionResult> {
    cfg.validate()?;
    let m = point_feats.nrows();
    if pixel_feats.nrows() != m {
        return Err(Error::validation("pixel/point row counts differ"));
    }
    if pixel_feats.ncols() != point_feats.ncols() || pixel_feats.ncols() != text_bank.ncols() {
        return Err(Error::validation("feature dims differ"));
    }
    if labels.len() != m {
        return Err(Error::validation("one label per entry required"));
    }
    check_labels(labels, text_bank.nrows())?;
    for cell in &grid.cells {
        if cell.members.iter().any(|&e| e >= m) {
            return Err(Error::validation("grid member index out of range"));
        }
    }
    check_unit_rows(pixel_feats, "pixel feature")?;
    check_unit_rows(point_feats, "point feature")?;
    check_unit_rows(text_bank, "text bank")?;
    Ok(fusion_features_raw(
        grid,
        pixel_feats,
        point_feats,
        labels,
        text_bank,
        cfg,
    ))
}

pub(crate) fn fusion_features_raw(
    grid: &GridPartition,
    pixel_feats: &ArrayView2<f64>,
    point_feats: &ArrayView2<f64>,
    labels: &[i32],
    text_bank: &ArrayView2<f64>,
    cfg: &LossConfig,
) -> FusionResult {
    let dim = point_feats.ncols();
    let mut cells = Vec::new();
    let mut skipped_cells = 0;
    for (ci, cell) in grid.cells.iter().enumerate() {
        let members: Vec<usize> = cell
            .members
            .iter()
            .copied()
            .filter(|&e| labels[e] >= 0)
            .collect();
        if members.is_empty() {
            skipped_cells += 1;
            continue;
        }
        let member_labels: Vec<usize> = members.iter().map(|&e| labels[e] as usize).collect();
        // Joint softmax over the 2m logits, max-stabilized.
        let mut logit_pixel = Vec::with_capacity(members.len());
        let mut logit_point = Vec::with_capacity(members.len());
        let mut max_logit = f64::NEG_INFINITY;
        for (&e, &l) in members.iter().zip(&member_labels) {
            let t = text_bank.row(l);
            let a = pixel_feats.row(e).dot(&t) / cfg.lambda;
            let b = point_feats.row(e).dot(&t) / cfg.lambda;
            max_logit = max_logit.max(a).max(b);
            logit_pixel.push(a);
            logit_point.push(b);
        }
        let mut z = 0.0;
        for i in 0..members.len() {
            logit_pixel[i] = (logit_pixel[i] - max_logit).exp();
            logit_point[i] = (logit_point[i] - max_logit).exp();
            z += logit_pixel[i] + logit_point[i];
        }
        let weight_pixel: Vec<f64> = logit_pixel.iter().map(|w| w / z).collect();
        let weight_point: Vec<f64> = logit_point.iter().map(|w| w / z).collect();
        let mut fused = Array1::zeros(dim);
        for (i, &e) in members.iter().enumerate() {
            fused.scaled_add(weight_pixel[i], &pixel_feats.row(e));
            fused.scaled_add(weight_point[i], &point_feats.row(e));
        }
        cells.push(FusionCell {
            grid_cell: ci,
            members,
            labels: member_labels,
            weight_pixel,
            weight_point,
            fused,
        });
    }
    FusionResult {
        cells,
        skipped_cells,
    }
}

// --- fused consistency loss --------------------------------------------------

/// Mean over cells of `sum_e (1 - sigmoid(<p_e, f>))`. Errors if the fusion
/// produced no usable cell. The gradient follows the full dependency of `f`
/// on the point features (attention weights included) unless
/// `stop_gradient_through_fusion` is set.
pub fn stcr_loss(
    fusion: &FusionResult,
    point_feats: &ArrayView2<f64>,
    text_bank: &ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if point_feats.ncols() != text_bank.ncols() {
        return Err(Error::validation("point/text feature dims differ"));
    }
    for cell in &fusion.cells {
        if cell.members.iter().any(|&e| e >= point_feats.nrows()) {
            return Err(Error::validation("fusion member index out of range"));
        }
        if cell.labels.iter().any(|&l| l >= text_bank.nrows()) {
            return Err(Error::validation("fusion member class out of range"));
        }
    }
    if fusion.cells.is_empty() {
        return Err(Error::validation(
            "consistency loss needs at least one cell with labeled members",
        ));
    }
    check_unit_rows(point_feats, "point feature")?;
    check_unit_rows(text_bank, "text bank")?;
    Ok(stcr_loss_raw(fusion, point_feats, text_bank, cfg))
}

pub(crate) fn stcr_loss_raw(
    fusion: &FusionResult,
    point_feats: &ArrayView2<f64>,
    text_bank: &ArrayView2<f64>,
    cfg: &LossConfig,
) -> LossReport {
    let n = fusion.cells.len() as f64;
    let dim = point_feats.ncols();
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((point_feats.nrows(), dim));
    for cell in &fusion.cells {
        // d(1 - sigmoid(s))/ds = -sigmoid(s) * sigmoid(-s), per member.
        let mut dscore = Vec::with_capacity(cell.members.len());
        for &e in &cell.members {
            let s = point_feats.row(e).dot(&cell.fused);
            value += sigmoid(-s);
            dscore.push(-sigmoid(s) * sigmoid(-s));
        }
        // Direct term: s_e depends on p_e through <p_e, f>.
        for (i, &e) in cell.members.iter().enumerate() {
            grad.row_mut(e).scaled_add(dscore[i], &cell.fused);
        }
        if cfg.stop_gradient_through_fusion {
            continue;
        }
        // g_f = dL_cell/df (pre-normalization by the cell count).
        let mut g_f = Array1::zeros(dim);
        for (i, &e) in cell.members.iter().enumerate() {
            g_f.scaled_add(dscore[i], &point_feats.row(e));
        }
        // f depends on p_e directly (weight b_e) and through p_e's own
        // attention logit, whose jacobian is b_e (p_e - f).
        for (i, &e) in cell.members.iter().enumerate() {
            let b = cell.weight_point[i];
            grad.row_mut(e).scaled_add(b, &g_f);
            let mut gap_dot = 0.0;
            for (k, &gf) in g_f.iter().enumerate() {
                gap_dot += gf * (point_feats[[e, k]] - cell.fused[k]);
            }
            let coeff = b * gap_dot / cfg.lambda;
            grad.row_mut(e)
                .scaled_add(coeff, &text_bank.row(cell.labels[i]));
        }
    }
    value /= n;
    grad /= n;
    LossReport {
        value,
        grad_points: grad,
        diagnostics: LossDiagnostics {
            skipped_classes: Vec::new(),
            skipped_cells: fusion.skipped_cells,
        },
    }
}

// --- pointwise distillation baseline ------------------------------------------

/// Mean over pairs of `KL(softmax(<T, x>/tau) || softmax(<T, p>/tau))`,
/// with the gradient taken w.r.t. the point features only.
pub fn kl_distill_loss(
    point_feats: &ArrayView2<f64>,
    pixel_feats: &ArrayView2<f64>,
    text_bank: &ArrayView2<f64>,
    tau: f64,
) -> Result<LossReport> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config("tau must be positive and finite"));
    }
    if point_feats.nrows() != pixel_feats.nrows() {
        return Err(Error::validation("pixel/point row counts differ"));
    }
    if point_feats.nrows() == 0 {
        return Err(Error::validation("distillation needs at least one pair"));
    }
    if point_feats.ncols() != pixel_feats.ncols() || point_feats.ncols() != text_bank.ncols() {
        return Err(Error::validation("feature dims differ"));
    }
    check_unit_rows(point_feats, "point feature")?;
    check_unit_rows(pixel_feats, "pixel feature")?;
    check_unit_rows(text_bank, "text bank")?;
    Ok(kl_distill_raw(point_feats, pixel_feats, text_bank, tau))
}

pub(crate) fn kl_distill_raw(
    point_feats: &ArrayView2<f64>,
    pixel_feats: &ArrayView2<f64>,
    text_bank: &ArrayView2<f64>,
    tau: f64,
) -> LossReport {
    let m = point_feats.nrows();
    let c_count = text_bank.nrows();
    let all: Vec<usize> = (0..c_count).collect();
    let mut value = 0.0;
    let mut grad = Array2::zeros((m, point_feats.ncols()));
    // z_x[c][i] = <t_c, x_i> / tau, likewise for points.
    let z_x = text_bank.dot(&pixel_feats.t()) / tau;
    let z_p = text_bank.dot(&point_feats.t()) / tau;
    for i in 0..m {
        let zx = z_x.column(i);
        let zp = z_p.column(i);
        let lse_x = logsumexp_over(&zx, &all);
        let lse_p = logsumexp_over(&zp, &all);
        for c in 0..c_count {
            let log_q = zx[c] - lse_x;
            let log_r = zp[c] - lse_p;
            let q = log_q.exp();
            let r = log_r.exp();
            value += q * (log_q - log_r);
            grad.row_mut(i)
                .scaled_add((r - q) / tau, &text_bank.row(c));
        }
    }
    value /= m as f64;
    grad /= m as f64;
    LossReport {
        value,
        grad_points: grad,
        diagnostics: LossDiagnostics::default(),
    }
}

// --- naive reference evaluations ----------------------------------------------

/// Unstabilized, double-loop evaluations of every objective, used to
/// cross-check the implementations above. These share no code with them:
/// plain `exp` ratios, no log-sum-exp, no matrix products.
pub mod naive {
    use ndarray::{Array1, ArrayView2};

    use super::LossConfig;
    use crate::geom::GridPartition;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn row(m: &ArrayView2<f64>, i: usize) -> Vec<f64> {
        m.row(i).to_vec()
    }

    /// Direct evaluation of the class-partitioned contrastive loss.
    pub fn semantic_infonce_value(
        point_feats: &ArrayView2<f64>,
        text_bank: &ArrayView2<f64>,
        labels: &[i32],
        cfg: &LossConfig,
    ) -> f64 {
        let mut total = 0.0;
        for c in 0..text_bank.nrows() {
            let t = row(text_bank, c);
            let mut num = 0.0;
            let mut den = 0.0;
            let mut has_pos = false;
            let mut has_den = false;
            for (i, &l) in labels.iter().enumerate() {
                if l < 0 {
                    continue;
                }
                let e = (dot(&t, &row(point_feats, i)) / cfg.tau).exp();
                if l as usize == c {
                    has_pos = true;
                    num += e;
                    if cfg.include_positives_in_denominator {
                        has_den = true;
                        den += e;
                    }
                } else {
                    has_den = true;
                    den += e;
                }
            }
            if has_pos && has_den {
                total -= (num / den).ln();
            }
        }
        total
    }

    /// Direct per-cell fusion: exp-ratio attention weights, no
    /// stabilization. Returns `(weights_pixel, weights_point, fused)` per
    /// nonempty cell, in cell order.
    #[allow(clippy::type_complexity)]
    pub fn fusion_cells(
        grid: &GridPartition,
        pixel_feats: &ArrayView2<f64>,
        point_feats: &ArrayView2<f64>,
        labels: &[i32],
        text_bank: &ArrayView2<f64>,
        cfg: &LossConfig,
    ) -> Vec<(Vec<f64>, Vec<f64>, Array1<f64>)> {
        let mut out = Vec::new();
        for cell in &grid.cells {
            let members: Vec<usize> = cell
                .members
                .iter()
                .copied()
                .filter(|&e| labels[e] >= 0)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut wa = Vec::new();
            let mut wb = Vec::new();
            let mut z = 0.0;
            for &e in &members {
                let t = row(text_bank, labels[e] as usize);
                let a = (dot(&row(pixel_feats, e), &t) / cfg.lambda).exp();
                let b = (dot(&row(point_feats, e), &t) / cfg.lambda).exp();
                z += a + b;
                wa.push(a);
                wb.push(b);
            }
            for w in wa.iter_mut().chain(wb.iter_mut()) {
                *w /= z;
            }
            let dim = point_feats.ncols();
            let mut fused = Array1::zeros(dim);
            for (i, &e) in members.iter().enumerate() {
                for k in 0..dim {
                    fused[k] += wa[i] * pixel_feats[[e, k]] + wb[i] * point_feats[[e, k]];
                }
            }
            out.push((wa, wb, fused));
        }
        out
    }

    /// Direct evaluation of the fused consistency loss value.
    pub fn stcr_value(
        grid: &GridPartition,
        pixel_feats: &ArrayView2<f64>,
        point_feats: &ArrayView2<f64>,
        labels: &[i32],
        text_bank: &ArrayView2<f64>,
        cfg: &LossConfig,
    ) -> f64 {
        let cells = fusion_cells(grid, pixel_feats, point_feats, labels, text_bank, cfg);
        let mut value = 0.0;
        let mut count = 0usize;
        let mut cell_iter = cells.iter();
        for cell in &grid.cells {
            let members: Vec<usize> = cell
                .members
                .iter()
                .copied()
                .filter(|&e| labels[e] >= 0)
                .collect();
            if members.is_empty() {
                continue;
            }
            let (_, _, fused) = cell_iter.next().expect("one fusion per nonempty cell");
            for &e in &members {
                let s = dot(&row(point_feats, e), &fused.to_vec());
                value += 1.0 - 1.0 / (1.0 + (-s).exp());
            }
            count += 1;
        }
        value / count as f64
    }

    /// Direct evaluation of the mean pixel-to-point KL divergence.
    pub fn kl_value(
        point_feats: &ArrayView2<f64>,
        pixel_feats: &ArrayView2<f64>,
        text_bank: &ArrayView2<f64>,
        tau: f64,
    ) -> f64 {
        let m = point_feats.nrows();
        let c_count = text_bank.nrows();
        let mut total = 0.0;
        for i in 0..m {
            let mut qs = Vec::new();
            let mut rs = Vec::new();
            for c in 0..c_count {
                let t = row(text_bank, c);
                qs.push((dot(&t, &row(pixel_feats, i)) / tau).exp());
                rs.push((dot(&t, &row(point_feats, i)) / tau).exp());
            }
            let zq: f64 = qs.iter().sum();
            let zr: f64 = rs.iter().sum();
            for c in 0..c_count {
                let q = qs[c] / zq;
                let r = rs[c] / zr;
                total += q * (q / r).ln();
            }
        }
        total / m as f64
    }
}
