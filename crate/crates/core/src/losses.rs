//! Training objectives over a grid of cosine similarities and their
//! analytic gradients.
//!
//! For an image embedding `V` of class `t` and text embeddings `T_i^k`:
//!
//! * the fine-grained cross-entropy contrasts the closest target subclass
//!   `k+` against every subclass of every other class, weighted by the
//!   count-based modulating factor `alpha`;
//! * the margin loss contrasts the farthest target subclass `k-` against the
//!   closest subclass of every other class;
//! * the total loss is their sum.
//!
//! Subclass selections and `alpha` are treated as constants when
//! differentiating.

use crate::error::{ensure_dim, Error, Result};
use crate::model::TextEmbeddings;
use crate::numerics::{argmax, argmin, cosine_gradients, cosine_similarity, log1p_sum_exp};

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// `N x K` cosine similarities `<V, T_i^k>` with the temperature used to
/// turn them into logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrid {
    n_classes: usize,
    n_subclasses: usize,
    values: Vec<f64>,
    temperature: f64,
}

impl SimilarityGrid {
    pub fn new(
        n_classes: usize,
        n_subclasses: usize,
        values: Vec<f64>,
        temperature: f64,
    ) -> Result<Self> {
        if n_classes == 0 || n_subclasses == 0 {
            return Err(Error::Empty("similarity grid"));
        }
        ensure_dim(n_classes * n_subclasses, values.len())?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if values.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::invalid("similarities must lie in [-1, 1]"));
        }
        Ok(Self {
            n_classes,
            n_subclasses,
            values,
            temperature,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], temperature: f64) -> Result<Self> {
        let k = rows.first().map(Vec::len).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * k);
        for r in rows {
            ensure_dim(k, r.len())?;
            values.extend(r);
        }
        Self::new(rows.len(), k, values, temperature)
    }

    pub fn from_embeddings(image: &[f64], text: &TextEmbeddings, temperature: f64) -> Result<Self> {
        let mut values = Vec::with_capacity(text.n_classes() * text.n_subclasses());
        for i in 0..text.n_classes() {
            for k in 0..text.n_subclasses() {
                values.push(cosine_similarity(image, text.get(i, k))?);
            }
        }
        Self::new(text.n_classes(), text.n_subclasses(), values, temperature)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_subclasses(&self) -> usize {
        self.n_subclasses
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn get(&self, class: usize, sub: usize) -> f64 {
        self.values[class * self.n_subclasses + sub]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.n_subclasses..(class + 1) * self.n_subclasses]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class < self.n_classes {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                self.n_classes
            )))
        }
    }
}

pub fn select_closest(grid: &SimilarityGrid, class: usize) -> usize {
    argmax(grid.row(class))
}

pub fn select_farthest(grid: &SimilarityGrid, class: usize) -> usize {
    argmin(grid.row(class))
}

/// Sample weight for a sample assigned to subclass `closest`:
///
/// `alpha = e^(1/n+) / sum_{k: n_k != 0} e^(1/n_k) * (sum_k n_k) / n+`
pub fn modulating_factor(counts: &[u64], closest: usize) -> Result<f64> {
    let n_plus = *counts
        .get(closest)
        .ok_or_else(|| Error::invalid("closest subclass out of range"))?;
    if n_plus == 0 {
        return Err(Error::invalid(
            "closest subclass has zero count; count the sample before weighting it",
        ));
    }
    if counts.len() == 1 {
        return Ok(1.0);
    }
    let mut norm = 0.0;
    let mut total = 0u64;
    for &n in counts {
        total += n;
        if n != 0 {
            norm += (1.0 / n as f64).exp();
        }
    }
    let n_plus = n_plus as f64;
    Ok((1.0 / n_plus).exp() / norm * (total as f64 / n_plus))
}

/// Subclass choices that the losses depend on, frozen for differentiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub class: usize,
    pub closest: usize,
    pub farthest: usize,
    /// Closest subclass of every class; the target entry is unused.
    pub class_best: Vec<usize>,
}

impl Selection {
    pub fn from_grid(grid: &SimilarityGrid, class: usize) -> Result<Self> {
        grid.check_class(class)?;
        Ok(Self {
            class,
            closest: select_closest(grid, class),
            farthest: select_farthest(grid, class),
            class_best: (0..grid.n_classes())
                .map(|i| select_closest(grid, i))
                .collect(),
        })
    }
}

/// Target similarity first, then every subclass of every other class.
fn fg_similarities(grid: &SimilarityGrid, sel: &Selection) -> Vec<f64> {
    let mut sims = Vec::with_capacity(1 + (grid.n_classes() - 1) * grid.n_subclasses());
    sims.push(grid.get(sel.class, sel.closest));
    for i in (0..grid.n_classes()).filter(|&i| i != sel.class) {
        sims.extend_from_slice(grid.row(i));
    }
    sims
}

/// Farthest target similarity first, then each other class's closest.
fn margin_similarities(grid: &SimilarityGrid, sel: &Selection) -> Vec<f64> {
    let mut sims = Vec::with_capacity(grid.n_classes());
    sims.push(grid.get(sel.class, sel.farthest));
    for i in (0..grid.n_classes()).filter(|&i| i != sel.class) {
        sims.push(grid.get(i, sel.class_best[i]));
    }
    sims
}

/// `-log softmax(sims / tau)[0]`, evaluated as `log(1 + sum exp((s_j - s_0) / tau))`
/// so that no large logits cancel.
fn neg_log_first(sims: &[f64], tau: f64) -> f64 {
    let gaps: Vec<f64> = sims[1..].iter().map(|s| (s - sims[0]) / tau).collect();
    log1p_sum_exp(&gaps)
}

/// Gradient of [`neg_log_first`] with respect to `sims`; the first entry is
/// `-(1 - p_0) / tau`, summed from the other shares to avoid cancellation.
fn neg_log_first_gradient(sims: &[f64], tau: f64) -> Vec<f64> {
    let gaps: Vec<f64> = sims[1..].iter().map(|s| (s - sims[0]) / tau).collect();
    let loss = log1p_sum_exp(&gaps);
    let mut grad = Vec::with_capacity(sims.len());
    grad.push(0.0);
    grad.extend(gaps.iter().map(|g| (g - loss).exp() / tau));
    grad[0] = -grad[1..].iter().sum::<f64>();
    grad
}

/// `neg_log_first(sims) - neg_log_first(base)` without forming either value,
/// so small changes stay resolvable when the losses themselves are large.
fn neg_log_first_delta(sims: &[f64], base: &[f64], tau: f64) -> f64 {
    let gaps: Vec<f64> = base[1..].iter().map(|b| (b - base[0]) / tau).collect();
    let m = gaps.iter().copied().fold(0.0, f64::max);
    let weights: Vec<f64> = gaps.iter().map(|g| (g - m).exp()).collect();
    let a0 = (-m).exp() + weights.iter().sum::<f64>();
    let shift = sims[0] - base[0];
    let change: f64 = weights
        .iter()
        .zip(sims[1..].iter().zip(&base[1..]))
        .map(|(w, (s, b))| w * (((s - b) - shift) / tau).exp_m1())
        .sum();
    (change / a0).ln_1p()
}

/// Change of the total loss between `base` and `grid` under one fixed
/// selection and `alpha`; both grids must share shape and temperature.
pub fn total_loss_delta(
    grid: &SimilarityGrid,
    base: &SimilarityGrid,
    sel: &Selection,
    alpha: f64,
) -> Result<f64> {
    ensure_dim(base.values().len(), grid.values().len())?;
    if grid.temperature() != base.temperature() {
        return Err(Error::invalid("grids use different temperatures"));
    }
    let tau = grid.temperature();
    let fg = neg_log_first_delta(
        &fg_similarities(grid, sel),
        &fg_similarities(base, sel),
        tau,
    );
    let margin = neg_log_first_delta(
        &margin_similarities(grid, sel),
        &margin_similarities(base, sel),
        tau,
    );
    Ok(alpha * fg + margin)
}

pub fn fine_grained_loss_with(grid: &SimilarityGrid, sel: &Selection, alpha: f64) -> Result<f64> {
    Ok(alpha * neg_log_first(&fg_similarities(grid, sel), grid.temperature()))
}

pub fn margin_loss_with(grid: &SimilarityGrid, sel: &Selection) -> Result<f64> {
    Ok(neg_log_first(
        &margin_similarities(grid, sel),
        grid.temperature(),
    ))
}

pub fn fine_grained_loss(grid: &SimilarityGrid, class: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha must be positive"));
    }
    fine_grained_loss_with(grid, &Selection::from_grid(grid, class)?, alpha)
}

pub fn margin_loss(grid: &SimilarityGrid, class: usize) -> Result<f64> {
    margin_loss_with(grid, &Selection::from_grid(grid, class)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub fg: f64,
    pub margin: f64,
    pub total: f64,
    pub closest_subclass: usize,
    pub farthest_subclass: usize,
    pub alpha: f64,
}

/// Total loss for one sample; `counts` is the target class's subclass count
/// row and must already include the current sample.
pub fn total_loss(grid: &SimilarityGrid, class: usize, counts: &[u64]) -> Result<LossBreakdown> {
    let sel = Selection::from_grid(grid, class)?;
    ensure_dim(grid.n_subclasses(), counts.len())?;
    let alpha = modulating_factor(counts, sel.closest)?;
    breakdown_with(grid, &sel, alpha)
}

pub fn breakdown_with(grid: &SimilarityGrid, sel: &Selection, alpha: f64) -> Result<LossBreakdown> {
    let fg = fine_grained_loss_with(grid, sel, alpha)?;
    let margin = margin_loss_with(grid, sel)?;
    Ok(LossBreakdown {
        fg,
        margin,
        total: fg + margin,
        closest_subclass: sel.closest,
        farthest_subclass: sel.farthest,
        alpha,
    })
}

/// Cross-entropy over one similarity per class, `-log softmax(s / tau)[t]`.
pub fn clip_ce_loss(similarities: &[f64], class: usize, temperature: f64) -> Result<f64> {
    if class >= similarities.len() {
        return Err(Error::invalid("class out of range"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(neg_log_first(
        &target_first(similarities, class),
        temperature,
    ))
}

/// `dL/ds` of [`clip_ce_loss`].
pub fn clip_ce_similarity_gradient(
    similarities: &[f64],
    class: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    if class >= similarities.len() {
        return Err(Error::invalid("class out of range"));
    }
    let ordered = target_first(similarities, class);
    let g = neg_log_first_gradient(&ordered, temperature);
    let mut grad = vec![0.0; similarities.len()];
    grad[class] = g[0];
    for (slot, i) in (0..similarities.len()).filter(|&i| i != class).enumerate() {
        grad[i] = g[slot + 1];
    }
    Ok(grad)
}

fn target_first(similarities: &[f64], class: usize) -> Vec<f64> {
    let mut ordered = Vec::with_capacity(similarities.len());
    ordered.push(similarities[class]);
    ordered.extend(
        similarities
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != class)
            .map(|(_, s)| *s),
    );
    ordered
}

/// `dL_all/ds` over the whole grid with selections and `alpha` held fixed.
pub fn similarity_gradient(grid: &SimilarityGrid, sel: &Selection, alpha: f64) -> Result<Vec<f64>> {
    let tau = grid.temperature();
    let k = grid.n_subclasses();
    let mut grad = vec![0.0; grid.values().len()];

    let fg = neg_log_first_gradient(&fg_similarities(grid, sel), tau);
    grad[sel.class * k + sel.closest] += alpha * fg[0];
    let mut idx = 1;
    for i in (0..grid.n_classes()).filter(|&i| i != sel.class) {
        for s in 0..k {
            grad[i * k + s] += alpha * fg[idx];
            idx += 1;
        }
    }

    let mg = neg_log_first_gradient(&margin_similarities(grid, sel), tau);
    grad[sel.class * k + sel.farthest] += mg[0];
    for (idx, i) in (0..grid.n_classes())
        .filter(|&i| i != sel.class)
        .enumerate()
    {
        grad[i * k + sel.class_best[i]] += mg[idx + 1];
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    /// `dL/dV`
    pub image: Vec<f64>,
    /// `dL/dT_i^k`, flat `N x K x dim`.
    pub text: Vec<f64>,
}

impl LossGradients {
    pub fn text_at(&self, class: usize, sub: usize, n_subclasses: usize, dim: usize) -> &[f64] {
        let o = (class * n_subclasses + sub) * dim;
        &self.text[o..o + dim]
    }
}

/// Chain `dL/ds` through the cosine similarities.
pub fn backprop_similarities(
    image: &[f64],
    text: &TextEmbeddings,
    grid: &SimilarityGrid,
    ds: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = text.dim();
    let k = text.n_subclasses();
    let mut d_image = vec![0.0; dim];
    let mut d_text = vec![0.0; text.n_classes() * k * dim];
    for i in 0..text.n_classes() {
        for s in 0..k {
            let g = ds[i * k + s];
            if g == 0.0 {
                continue;
            }
            let (dv, dt) = cosine_gradients(image, text.get(i, s), grid.get(i, s))?;
            crate::numerics::axpy(g, &dv, &mut d_image);
            let o = (i * k + s) * dim;
            crate::numerics::axpy(g, &dt, &mut d_text[o..o + dim]);
        }
    }
    Ok((d_image, d_text))
}

pub fn loss_gradients_with(
    image: &[f64],
    text: &TextEmbeddings,
    grid: &SimilarityGrid,
    sel: &Selection,
    alpha: f64,
) -> Result<LossGradients> {
    let breakdown = breakdown_with(grid, sel, alpha)?;
    let ds = similarity_gradient(grid, sel, alpha)?;
    let (d_image, d_text) = backprop_similarities(image, text, grid, &ds)?;
    Ok(LossGradients {
        breakdown,
        image: d_image,
        text: d_text,
    })
}

/// Loss and gradients for one sample. `counts` is the class-`t` count row
/// including the current sample.
pub fn loss_gradients(
    image: &[f64],
    text: &TextEmbeddings,
    class: usize,
    counts: &[u64],
    temperature: f64,
) -> Result<LossGradients> {
    ensure_dim(text.dim(), image.len())?;
    let grid = SimilarityGrid::from_embeddings(image, text, temperature)?;
    let sel = Selection::from_grid(&grid, class)?;
    ensure_dim(grid.n_subclasses(), counts.len())?;
    let alpha = modulating_factor(counts, sel.closest)?;
    loss_gradients_with(image, text, &grid, &sel, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use proptest::prelude::*;

    fn grid(rows: &[&[f64]], tau: f64) -> SimilarityGrid {
        SimilarityGrid::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), tau)
            .unwrap()
    }

    #[test]
    fn selection_tie_breaks_low() {
        let g = grid(&[&[0.1, 0.9], &[0.5, 0.5]], 0.01);
        assert_eq!(select_closest(&g, 0), 1);
        assert_eq!(select_farthest(&g, 0), 0);
        assert_eq!(select_closest(&g, 1), 0);
        assert_eq!(select_farthest(&g, 1), 0);
        let single = grid(&[&[0.2], &[0.7]], 0.01);
        assert_eq!(select_closest(&single, 1), 0);
        assert_eq!(select_farthest(&single, 1), 0);
    }

    #[test]
    fn modulating_factor_examples() {
        assert_eq!(modulating_factor(&[7], 0).unwrap(), 1.0);
        assert!((modulating_factor(&[3, 3], 0).unwrap() - 1.0).abs() < 1e-15);
        assert!((modulating_factor(&[3, 3], 1).unwrap() - 1.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        let expected = e / (e + (1.0f64 / 3.0).exp()) * 4.0;
        let got = modulating_factor(&[1, 3], 0).unwrap();
        assert!((got - expected).abs() < 1e-15);
        // e / (e + e^(1/3)) == 1 / (1 + e^(-2/3))
        assert!((got - 4.0 / (1.0 + (-2.0f64 / 3.0).exp())).abs() < 1e-12);
        assert!((got - 2.6430254750632).abs() < 1e-12);
        assert!(modulating_factor(&[0, 3], 0).is_err());
        // zero-count subclass drops out of the normalizer
        let with_zero = modulating_factor(&[2, 0, 2], 0).unwrap();
        assert!((with_zero - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fine_grained_examples() {
        let g = grid(&[&[0.2], &[0.1]], 0.01);
        let expected = (1.0 + (-10f64).exp()).ln();
        assert!((fine_grained_loss(&g, 0, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((fine_grained_loss(&g, 0, 1.0).unwrap() - 4.54e-5).abs() < 1e-7);
        let eq = grid(&[&[0.3], &[0.3]], 0.37);
        assert!((fine_grained_loss(&eq, 1, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fine_grained_excludes_other_target_subclasses() {
        let tau = 0.5;
        let g = grid(
            &[&[0.4, -0.2, 0.9], &[0.1, 0.3, -0.5], &[0.0, 0.6, 0.2]],
            tau,
        );
        // enumerate the ratio explicitly
        let num = (0.9f64 / tau).exp();
        let others: f64 = [0.1, 0.3, -0.5, 0.0, 0.6, 0.2]
            .iter()
            .map(|s: &f64| (s / tau).exp())
            .sum();
        let expected = -1.7 * (num / (num + others)).ln();
        assert!((fine_grained_loss(&g, 0, 1.7).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn margin_examples() {
        let g = grid(&[&[0.9, 0.1], &[0.3, -0.4]], 1.0);
        let expected = (1.0 + 0.2f64.exp()).ln();
        assert!((margin_loss(&g, 0).unwrap() - expected).abs() < 1e-15);
        assert!((margin_loss(&g, 0).unwrap() - 0.798139).abs() < 1e-6);

        let uniform = grid(&[&[0.5, 0.8], &[0.5, 0.1], &[0.2, 0.5]], 0.01);
        assert!((margin_loss(&uniform, 0).unwrap() - 3f64.ln()).abs() < 1e-12);

        let saturated = grid(&[&[0.6, 0.9], &[0.4, 0.2]], 0.01);
        assert!(margin_loss(&saturated, 0).unwrap() < 1e-8);
    }

    #[test]
    fn total_examples() {
        let g = grid(&[&[0.9, 0.1], &[0.3, -0.4]], 0.1);
        let b = total_loss(&g, 0, &[1, 3]).unwrap();
        assert_eq!(b.total, b.fg + b.margin);
        assert_eq!(b.closest_subclass, 0);
        assert_eq!(b.farthest_subclass, 1);
        assert!((b.fg - b.alpha * fine_grained_loss(&g, 0, 1.0).unwrap()).abs() < 1e-14);
        assert_eq!(b.margin, margin_loss(&g, 0).unwrap());

        let single = grid(&[&[0.3], &[0.1]], 0.1);
        let b = total_loss(&single, 0, &[4]).unwrap();
        assert_eq!(b.closest_subclass, 0);
        assert_eq!(b.farthest_subclass, 0);
        assert_eq!(b.alpha, 1.0);
    }

    #[test]
    fn clip_ce_examples() {
        let sims = [0.25; 7];
        assert!((clip_ce_loss(&sims, 3, 0.01).unwrap() - 7f64.ln()).abs() < 1e-12);
        let v = clip_ce_loss(&[0.2, 0.1], 0, 0.01).unwrap();
        assert!((v - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
        assert!(clip_ce_loss(&[0.3, 0.1], 0, 0.01).unwrap() < 1e-8);
    }

    #[test]
    fn unselected_target_subclass_has_zero_gradient() {
        let text = TextEmbeddings::from_rows(vec![
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.6, 0.8, 0.0],
                vec![-1.0, 0.1, 0.0],
            ],
            vec![
                vec![0.0, 1.0, 0.2],
                vec![0.1, 0.0, 1.0],
                vec![0.3, 0.3, 0.3],
            ],
        ])
        .unwrap();
        let v = [0.9, 0.3, 0.05];
        let g = loss_gradients(&v, &text, 0, &[2, 1, 1], 0.1).unwrap();
        assert_eq!(g.breakdown.closest_subclass, 0);
        assert_eq!(g.breakdown.farthest_subclass, 2);
        assert!(g.text_at(0, 1, 3, 3).iter().all(|x| *x == 0.0));
        assert!(dot(&g.image, &v).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn k1_reduces_to_clip_ce(sims in proptest::collection::vec(-1.0f64..1.0, 2..8), tau in 0.005f64..1.0, t in 0usize..8) {
            let t = t % sims.len();
            let rows: Vec<Vec<f64>> = sims.iter().map(|s| vec![*s]).collect();
            let g = SimilarityGrid::from_rows(&rows, tau).unwrap();
            let a = modulating_factor(&[5], 0).unwrap();
            prop_assert_eq!(a, 1.0);
            let fg = fine_grained_loss(&g, t, a).unwrap();
            let ce = clip_ce_loss(&sims, t, tau).unwrap();
            prop_assert!((fg - ce).abs() < 1e-12);
        }

        #[test]
        fn losses_decrease_with_selected_similarity(
            rows in proptest::collection::vec(proptest::collection::vec(-0.9f64..0.8, 3), 2..5),
            tau in 0.1f64..1.0,
            bump in 0.01f64..0.1,
        ) {
            let g = SimilarityGrid::from_rows(&rows, tau).unwrap();
            let sel = Selection::from_grid(&g, 0).unwrap();
            let fg = fine_grained_loss_with(&g, &sel, 1.0).unwrap();
            let mg = margin_loss_with(&g, &sel).unwrap();
            prop_assert!(fg > 0.0 && mg > 0.0);

            let mut up = rows.clone();
            up[0][sel.closest] += bump;
            let g_up = SimilarityGrid::from_rows(&up, tau).unwrap();
            prop_assert!(fine_grained_loss_with(&g_up, &sel, 1.0).unwrap() < fg);

            let mut up = rows.clone();
            up[0][sel.farthest] += bump;
            let g_up = SimilarityGrid::from_rows(&up, tau).unwrap();
            prop_assert!(margin_loss_with(&g_up, &sel).unwrap() < mg);
        }

        #[test]
        fn loss_delta_matches_difference(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..=1.0, 3), 2..5),
            shift in proptest::collection::vec(-0.05f64..0.05, 15),
            tau in 0.05f64..1.0,
            alpha in 0.5f64..3.0,
        ) {
            let base = SimilarityGrid::from_rows(&rows, tau).unwrap();
            let moved: Vec<Vec<f64>> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().enumerate().map(|(k, &v)| (v + shift[i * 3 + k]).clamp(-1.0, 1.0)).collect())
                .collect();
            let grid = SimilarityGrid::from_rows(&moved, tau).unwrap();
            let sel = Selection::from_grid(&base, 0).unwrap();
            let direct = breakdown_with(&grid, &sel, alpha).unwrap().total
                - breakdown_with(&base, &sel, alpha).unwrap().total;
            let delta = total_loss_delta(&grid, &base, &sel, alpha).unwrap();
            prop_assert!((delta - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }

        #[test]
        fn alpha_positive_and_one_when_uniform(counts in proptest::collection::vec(1u64..50, 1..6), j in 0usize..6) {
            let j = j % counts.len();
            let a = modulating_factor(&counts, j).unwrap();
            prop_assert!(a > 0.0 && a.is_finite());
            let uniform = vec![counts[j]; counts.len()];
            prop_assert!((modulating_factor(&uniform, j).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn losses_finite_at_small_temperature(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..=1.0, 4), 1..6),
            t in 0usize..6,
        ) {
            let t = t % rows.len();
            let g = SimilarityGrid::from_rows(&rows, 1e-4).unwrap();
            let b = total_loss(&g, t, &[1, 2, 3, 4]).unwrap();
            prop_assert!(b.total.is_finite());
            prop_assert!(b.fg >= 0.0 && b.margin >= 0.0);
        }
    }
}
