//! Two-stage training.
//!
//! Stage 1 learns the descriptor tokens with the encoders frozen. Stage 2
//! fine-tunes the image adapter with the descriptors frozen. Both stages
//! minimize the same per-sample total loss, averaged over a mini-batch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::{EmbeddingDataset, Item};
use crate::error::{ensure_dim, Error, Result};
use crate::inference::{item_embedding, predict};
use crate::losses::{
    loss_gradients_with, modulating_factor, total_loss_delta, LossBreakdown, Selection,
    SimilarityGrid, DEFAULT_TEMPERATURE,
};
use crate::model::{Model, ParamGroup, ParameterPartition, Stage, TextEmbeddings};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountScope {
    /// Counts reset at every epoch boundary.
    Epoch,
    /// Counts reset at every mini-batch.
    Batch,
}

impl fmt::Display for CountScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountScope::Epoch => "epoch",
            CountScope::Batch => "batch",
        })
    }
}

impl FromStr for CountScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(Self::Epoch),
            "batch" => Ok(Self::Batch),
            other => Err(Error::invalid(format!("unknown count scope `{other}`"))),
        }
    }
}

/// Running per-(class, subclass) sample counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubclassCounter {
    n_subclasses: usize,
    counts: Vec<u64>,
    pub scope: CountScope,
}

impl SubclassCounter {
    pub fn new(n_classes: usize, n_subclasses: usize, scope: CountScope) -> Self {
        Self {
            n_subclasses,
            counts: vec![0; n_classes * n_subclasses],
            scope,
        }
    }

    pub fn update(&mut self, class: usize, closest: usize) {
        self.counts[class * self.n_subclasses + closest] += 1;
    }

    pub fn row(&self, class: usize) -> &[u64] {
        &self.counts[class * self.n_subclasses..(class + 1) * self.n_subclasses]
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub count_scope: CountScope,
    /// Worker threads for per-sample gradients; results are reduced in
    /// sample order regardless of this value.
    pub threads: usize,
}

impl StageConfig {
    /// Descriptor stage: lr 1e-2, no weight decay, constant schedule.
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Descriptors,
            epochs: 30,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            optimizer: OptimizerKind::AdamW,
            schedule: LrSchedule::Constant,
            batch_size: 32,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            count_scope: CountScope::Epoch,
            threads: 1,
        }
    }

    /// Adapter stage: lr 5e-6, weight decay 0.1, cosine schedule.
    pub fn stage2() -> Self {
        Self {
            stage: Stage::Adapter,
            learning_rate: 5e-6,
            weight_decay: 0.1,
            schedule: LrSchedule::Cosine,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub fg: f64,
    pub margin: f64,
    pub total: f64,
    /// Training-set accuracy after the epoch.
    pub war: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.6}\t{:.9e}",
            self.epoch, self.fg, self.margin, self.total, self.war, self.lr
        )
    }
}

pub const METRICS_HEADER: &str = "epoch\tfg\tmargin\ttotal\twar\tlr";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageTrace {
    pub epochs: Vec<EpochMetrics>,
    /// Counter state at the end of each epoch.
    pub epoch_counts: Vec<Vec<u64>>,
    /// Smallest and largest modulating factor applied.
    pub alpha_range: Option<(f64, f64)>,
}

impl StageTrace {
    pub fn to_log(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.log_line());
            out.push('\n');
        }
        out
    }
}

/// Gradients for the trainable groups of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tokens: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    fn zeros(model: &Model, stage: Stage) -> Self {
        match stage {
            Stage::Descriptors => Self {
                tokens: vec![0.0; model.bank.tokens().len()],
                weight: Vec::new(),
                bias: Vec::new(),
            },
            Stage::Adapter => Self {
                tokens: Vec::new(),
                weight: vec![0.0; model.adapter.weight().as_slice().len()],
                bias: vec![0.0; model.adapter.bias().len()],
            },
        }
    }

    fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in [
            (&mut self.tokens, &other.tokens),
            (&mut self.weight, &other.weight),
            (&mut self.bias, &other.bias),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn group(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::DescriptorTokens => &self.tokens,
            ParamGroup::AdapterWeight => &self.weight,
            ParamGroup::AdapterBias => &self.bias,
            _ => &[],
        }
    }

    fn group_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::DescriptorTokens => &mut self.tokens,
            ParamGroup::AdapterWeight => &mut self.weight,
            ParamGroup::AdapterBias => &mut self.bias,
            _ => &mut [],
        }
    }
}

/// Analytic gradients of the total loss for one item, with the subclass
/// selection and `alpha` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn item_gradients(
    model: &Model,
    text: &TextEmbeddings,
    frames: &[&[f64]],
    image: &[f64],
    grid: &SimilarityGrid,
    sel: &Selection,
    alpha: f64,
    stage: Stage,
) -> Result<(LossBreakdown, ParamGrads)> {
    let g = loss_gradients_with(image, text, grid, sel, alpha)?;
    let mut out = ParamGrads::zeros(model, stage);
    match stage {
        Stage::Descriptors => {
            let bank = &model.bank;
            let seq_len = bank.context().len() + bank.n_tokens();
            let dim = text.dim();
            for i in 0..bank.n_classes() {
                for k in 0..bank.n_subclasses() {
                    let upstream = g.text_at(i, k, bank.n_subclasses(), dim);
                    if upstream.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    let per_token = model.encoder.token_gradient(upstream, seq_len)?;
                    let range = bank.descriptor_range(i, k);
                    for chunk in out.tokens[range].chunks_mut(bank.token_dim()) {
                        chunk.copy_from_slice(&per_token);
                    }
                }
            }
        }
        Stage::Adapter => {
            let scale = 1.0 / frames.len() as f64;
            for f in frames {
                model.adapter.accumulate_gradients(
                    f,
                    &g.image,
                    scale,
                    &mut out.weight,
                    &mut out.bias,
                )?;
            }
        }
    }
    Ok((g.breakdown, out))
}

/// Map `f` over `inputs` on up to `threads` scoped workers, keeping order.
fn par_map<T, R, F>(threads: usize, inputs: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if threads <= 1 || inputs.len() < 2 {
        return inputs.iter().map(&f).collect();
    }
    let chunk = inputs.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(inputs.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn training_accuracy(model: &Model, items: &[Item<'_>]) -> Result<f64> {
    let text = model.text_embeddings()?;
    let mut correct = 0usize;
    for item in items {
        let v = item_embedding(model, &item.frames)?;
        if predict(&v, &text)?.label == item.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Stage 1: learn descriptor tokens; encoders stay frozen.
pub fn run_stage1(
    model: &mut Model,
    dataset: &EmbeddingDataset,
    config: &StageConfig,
) -> Result<StageTrace> {
    if config.stage != Stage::Descriptors {
        return Err(Error::invalid("run_stage1 needs a stage-1 config"));
    }
    run_stage(model, dataset, config)
}

/// Stage 2: fine-tune the image adapter; descriptors stay frozen.
pub fn run_stage2(
    model: &mut Model,
    dataset: &EmbeddingDataset,
    config: &StageConfig,
) -> Result<StageTrace> {
    if config.stage != Stage::Adapter {
        return Err(Error::invalid("run_stage2 needs a stage-2 config"));
    }
    run_stage(model, dataset, config)
}

struct Prepared {
    image: Vec<f64>,
    grid: SimilarityGrid,
    sel: Selection,
}

fn run_stage(
    model: &mut Model,
    dataset: &EmbeddingDataset,
    config: &StageConfig,
) -> Result<StageTrace> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    ensure_dim(model.adapter.feature_dim(), dataset.feature_dim)?;
    if dataset.n_classes != model.config.n_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model has {}",
            dataset.n_classes, model.config.n_classes
        )));
    }
    let stage = config.stage;
    let partition = ParameterPartition::for_stage(stage);
    let items = dataset.items();
    let batches_per_epoch = items.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as u64;

    let mut optimizers: Vec<(ParamGroup, Box<dyn crate::optim::Optimizer>)> = partition
        .trainable
        .iter()
        .map(|&g| (g, config.optimizer.build(config.weight_decay)))
        .collect();
    let shuffle_stream = match stage {
        Stage::Descriptors => rng::SHUFFLE_STAGE1,
        Stage::Adapter => rng::SHUFFLE_STAGE2,
    };
    let mut shuffle = rng::stream(config.seed, shuffle_stream);
    let mut counter = SubclassCounter::new(
        model.config.n_classes,
        model.config.n_subclasses,
        config.count_scope,
    );

    // the frozen side of each stage is computed once
    let mut fixed_images: Option<Vec<Vec<f64>>> = None;
    if stage == Stage::Descriptors {
        fixed_images = Some(
            items
                .iter()
                .map(|it| item_embedding(model, &it.frames))
                .collect::<Result<_>>()?,
        );
    }
    let fixed_text = match stage {
        Stage::Adapter => Some(model.text_embeddings()?),
        Stage::Descriptors => None,
    };

    let mut trace = StageTrace::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        counter.reset();
        order.shuffle(&mut shuffle);
        let (mut fg_sum, mut margin_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut last_lr = config.learning_rate;
        for batch in order.chunks(config.batch_size) {
            if config.count_scope == CountScope::Batch {
                counter.reset();
            }
            let text = match &fixed_text {
                Some(t) => t.clone(),
                None => model.text_embeddings()?,
            };
            let frozen: &Model = model;
            let prepared = par_map(config.threads, batch, |&idx| {
                let image = match &fixed_images {
                    Some(v) => v[idx].clone(),
                    None => item_embedding(frozen, &items[idx].frames)?,
                };
                let grid = SimilarityGrid::from_embeddings(&image, &text, config.temperature)?;
                let sel = Selection::from_grid(&grid, items[idx].class)?;
                Ok(Prepared { image, grid, sel })
            })?;

            // counting is sequential: each sample is counted before weighting
            let mut alphas = Vec::with_capacity(batch.len());
            for (&idx, p) in batch.iter().zip(&prepared) {
                let class = items[idx].class;
                counter.update(class, p.sel.closest);
                let a = modulating_factor(counter.row(class), p.sel.closest)?;
                trace.alpha_range = Some(match trace.alpha_range {
                    None => (a, a),
                    Some((lo, hi)) => (lo.min(a), hi.max(a)),
                });
                alphas.push(a);
            }

            let jobs: Vec<(usize, usize)> = batch.iter().copied().zip(0..).collect();
            let grads = par_map(config.threads, &jobs, |&(idx, j)| {
                let p = &prepared[j];
                item_gradients(
                    frozen,
                    &text,
                    &items[idx].frames,
                    &p.image,
                    &p.grid,
                    &p.sel,
                    alphas[j],
                    stage,
                )
            })?;

            let mut acc = ParamGrads::zeros(model, stage);
            let scale = 1.0 / batch.len() as f64;
            for (b, g) in &grads {
                fg_sum += b.fg;
                margin_sum += b.margin;
                total_sum += b.total;
                acc.add_scaled(g, scale);
            }

            let lr = config.schedule.lr(config.learning_rate, step, total_steps);
            last_lr = lr;
            for (group, opt) in &mut optimizers {
                let params: &mut [f64] = match group {
                    ParamGroup::DescriptorTokens => model.bank.tokens_mut(),
                    ParamGroup::AdapterWeight => model.adapter.weight_mut(),
                    ParamGroup::AdapterBias => model.adapter.bias_mut(),
                    _ => unreachable!("only tokens and adapter are ever trainable"),
                };
                opt.step(params, acc.group_mut(*group), lr)?;
            }
            step += 1;
        }
        let n = items.len() as f64;
        trace.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            fg: fg_sum / n,
            margin: margin_sum / n,
            total: total_sum / n,
            war: training_accuracy(model, &items)?,
            lr: last_lr,
        });
        trace.epoch_counts.push(counter.counts().to_vec());
    }
    Ok(trace)
}

/// Worst relative error per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub stage: Stage,
    pub groups: Vec<GroupCheck>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Floor on the relative-error denominator, so that gradients that vanish
/// up to rounding compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// One labeled item for gradient checking.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSample {
    pub frames: Vec<Vec<f64>>,
    pub class: usize,
    /// Subclass counts of `class` before this sample is counted.
    pub prior_counts: Vec<u64>,
    pub temperature: f64,
}

fn fd_setup(
    model: &Model,
    sample: &FdSample,
) -> Result<(TextEmbeddings, Vec<f64>, SimilarityGrid, Selection, f64)> {
    let frames: Vec<&[f64]> = sample.frames.iter().map(Vec::as_slice).collect();
    let text = model.text_embeddings()?;
    let image = item_embedding(model, &frames)?;
    let grid = SimilarityGrid::from_embeddings(&image, &text, sample.temperature)?;
    let sel = Selection::from_grid(&grid, sample.class)?;
    ensure_dim(model.config.n_subclasses, sample.prior_counts.len())?;
    let mut counts = sample.prior_counts.clone();
    counts[sel.closest] += 1;
    let alpha = modulating_factor(&counts, sel.closest)?;
    Ok((text, image, grid, sel, alpha))
}

/// Loss at `model` minus the loss at the base point, selections and `alpha`
/// frozen at the base point.
fn fixed_selection_loss(
    model: &Model,
    sample: &FdSample,
    base: &SimilarityGrid,
    sel: &Selection,
    alpha: f64,
) -> f64 {
    let frames: Vec<&[f64]> = sample.frames.iter().map(Vec::as_slice).collect();
    let eval = || -> Result<f64> {
        let text = model.text_embeddings()?;
        let image = item_embedding(model, &frames)?;
        let grid = SimilarityGrid::from_embeddings(&image, &text, sample.temperature)?;
        total_loss_delta(&grid, base, sel, alpha)
    };
    eval().unwrap_or(f64::NAN)
}

/// Compare analytic gradients of the active stage against central
/// differences. `fault` scales the analytic gradient of one group, for
/// negative controls.
pub fn fd_check(
    model: &Model,
    sample: &FdSample,
    stage: Stage,
    h: f64,
    fault: Option<(ParamGroup, f64)>,
) -> Result<FdReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (text, image, grid, sel, alpha) = fd_setup(model, sample)?;
    let frames: Vec<&[f64]> = sample.frames.iter().map(Vec::as_slice).collect();
    let (_, mut analytic) =
        item_gradients(model, &text, &frames, &image, &grid, &sel, alpha, stage)?;
    if let Some((group, factor)) = fault {
        for g in analytic.group_mut(group) {
            *g *= factor;
        }
    }

    let mut groups = Vec::new();
    for group in ParameterPartition::for_stage(stage).trainable {
        let base = model.group_values(group);
        let mut probe = model.clone();
        let numeric = central_difference(
            |p| {
                match group {
                    ParamGroup::DescriptorTokens => probe.bank.tokens_mut().copy_from_slice(p),
                    ParamGroup::AdapterWeight => probe.adapter.weight_mut().copy_from_slice(p),
                    ParamGroup::AdapterBias => probe.adapter.bias_mut().copy_from_slice(p),
                    _ => unreachable!("frozen groups are never perturbed"),
                }
                fixed_selection_loss(&probe, sample, &grid, &sel, alpha)
            },
            &base,
            h,
        );
        let a = analytic.group(group);
        let (worst_index, max_rel_error) = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| relative_error(*x, *y))
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| {
                if e > best.1 || e.is_nan() {
                    (i, e)
                } else {
                    best
                }
            });
        groups.push(GroupCheck {
            group,
            n_params: base.len(),
            max_rel_error,
            worst_index,
        });
    }
    Ok(FdReport { stage, groups })
}

/// Small random model and sample for gradient checking. Tokens and adapter
/// weights are drawn well away from zero so every group gets a non-trivial
/// gradient.
pub fn random_fd_instance(seed: u64, index: u64) -> Result<(Model, FdSample)> {
    use crate::model::{ModelConfig, TextEncoderKind};
    use rand::Rng;

    let mut r = rng::stream(
        seed.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        rng::FD_INSTANCES,
    );
    let n_classes = r.random_range(2..=5);
    let n_subclasses = r.random_range(1..=3);
    let n_tokens = r.random_range(1..=3);
    let context_length = r.random_range(0..=2);
    let projected = r.random_bool(0.5);
    let embed_dim = r.random_range(3..=16);
    let token_dim = if projected {
        r.random_range(3..=16)
    } else {
        embed_dim
    };
    let residual = r.random_bool(0.5);
    let feature_dim = if residual {
        embed_dim
    } else {
        r.random_range(3..=16)
    };
    let mut model = Model::new(ModelConfig {
        n_classes,
        n_subclasses,
        n_tokens,
        token_dim,
        context_length,
        embed_dim,
        feature_dim,
        encoder: if projected {
            TextEncoderKind::ProjectedMean
        } else {
            TextEncoderKind::IdentityMean
        },
        residual,
        seed: r.random(),
    })?;
    let tokens = rng::gaussian_vec(&mut r, model.bank.tokens_mut().len(), 0.5);
    model.bank.tokens_mut().copy_from_slice(&tokens);
    let w = rng::gaussian_vec(&mut r, model.adapter.weight_mut().len(), 0.3);
    model.adapter.weight_mut().copy_from_slice(&w);
    let b = rng::gaussian_vec(&mut r, model.adapter.bias_mut().len(), 0.3);
    model.adapter.bias_mut().copy_from_slice(&b);
    let n_frames = r.random_range(1..=3);
    let frames = (0..n_frames)
        .map(|_| rng::gaussian_vec(&mut r, feature_dim, 1.0))
        .collect();
    let prior_counts = (0..n_subclasses).map(|_| r.random_range(0..6)).collect();
    let temperature = [0.01, 0.05, 0.1, 0.5][r.random_range(0..4)];
    let sample = FdSample {
        frames,
        class: r.random_range(0..n_classes),
        prior_counts,
        temperature,
    };
    Ok((model, sample))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_updates_and_resets() {
        let mut c = SubclassCounter::new(2, 4, CountScope::Epoch);
        c.update(0, 2);
        assert_eq!(c.row(0), &[0, 0, 1, 0]);
        c.update(0, 2);
        c.update(1, 0);
        assert_eq!(c.row(0).iter().sum::<u64>(), 2);
        c.reset();
        assert!(c.counts().iter().all(|&x| x == 0));
    }

    #[test]
    fn stage_defaults() {
        let s1 = StageConfig::stage1();
        assert_eq!((s1.learning_rate, s1.weight_decay), (1e-2, 0.0));
        assert_eq!(s1.schedule, LrSchedule::Constant);
        let s2 = StageConfig::stage2();
        assert_eq!((s2.learning_rate, s2.weight_decay), (5e-6, 0.1));
        assert_eq!(s2.schedule, LrSchedule::Cosine);
        assert_eq!(s2.optimizer, OptimizerKind::AdamW);
    }

    #[test]
    fn central_difference_exact_on_quadratic() {
        // f(x) = x0^2 + 3 x0 x1 - 2 x1^2
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[0] * p[1] - 2.0 * p[1] * p[1];
        let p = [0.7, -1.3];
        let numeric = central_difference(f, &p, 1e-3);
        let analytic = [2.0 * p[0] + 3.0 * p[1], 3.0 * p[0] - 4.0 * p[1]];
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-10);
        }
    }

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<u32> = (0..37).collect();
        let out = par_map(4, &xs, |x| Ok(x * 2)).unwrap();
        assert_eq!(out, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    use crate::data::{apply_linear_map, generate_synthetic, linear_distortion, SynthConfig};
    use crate::model::{ModelConfig, TextEncoderKind};

    fn bench(samples: usize) -> crate::data::SyntheticBenchmark {
        generate_synthetic(&SynthConfig {
            samples_per_subcluster: samples,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn model(k: usize) -> Model {
        Model::new(ModelConfig {
            n_classes: 3,
            n_subclasses: k,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn quick(mut cfg: StageConfig, epochs: usize) -> StageConfig {
        cfg.epochs = epochs;
        cfg
    }

    fn frozen_groups(stage: Stage) -> Vec<ParamGroup> {
        ParameterPartition::for_stage(stage).frozen
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let b = bench(10);
        let mut m = model(2);
        let before = m.clone();
        run_stage1(&mut m, &b.train, &quick(StageConfig::stage1(), 0)).unwrap();
        run_stage2(&mut m, &b.train, &quick(StageConfig::stage2(), 0)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn frozen_groups_never_change() {
        let b = bench(10);
        let mut m = model(2);
        let mut s2 = quick(StageConfig::stage2(), 1);
        s2.learning_rate = 1e-2;
        for stage in [Stage::Descriptors, Stage::Adapter] {
            let groups = frozen_groups(stage);
            let before = m.fingerprints(&groups);
            for _ in 0..3 {
                let trainable_before =
                    m.fingerprints(&ParameterPartition::for_stage(stage).trainable);
                match stage {
                    Stage::Descriptors => {
                        run_stage1(&mut m, &b.train, &quick(StageConfig::stage1(), 1))
                    }
                    Stage::Adapter => run_stage2(&mut m, &b.train, &s2),
                }
                .unwrap();
                assert_eq!(m.fingerprints(&groups), before, "{stage:?}");
                assert_ne!(
                    m.fingerprints(&ParameterPartition::for_stage(stage).trainable),
                    trainable_before
                );
            }
        }
    }

    #[test]
    fn stage_configs_are_checked() {
        let b = bench(5);
        let mut m = model(1);
        assert!(run_stage1(&mut m, &b.train, &StageConfig::stage2()).is_err());
        assert!(run_stage2(&mut m, &b.train, &StageConfig::stage1()).is_err());
        let empty = EmbeddingDataset::new(16, 3, vec![]).unwrap();
        assert!(run_stage1(&mut m, &empty, &StageConfig::stage1()).is_err());
    }

    #[test]
    fn epoch_counts_match_class_counts() {
        let b = bench(12);
        let mut m = model(3);
        let trace = run_stage1(&mut m, &b.train, &quick(StageConfig::stage1(), 4)).unwrap();
        let per_class = b.train.class_counts();
        assert_eq!(trace.epoch_counts.len(), 4);
        for counts in &trace.epoch_counts {
            for (t, row) in counts.chunks(3).enumerate() {
                assert_eq!(row.iter().sum::<u64>() as usize, per_class[t]);
            }
        }
        let (lo, hi) = trace.alpha_range.unwrap();
        assert!(lo > 0.0 && hi.is_finite());
    }

    #[test]
    fn batch_scope_counts_one_batch() {
        let b = bench(12);
        let mut m = model(2);
        let mut cfg = quick(StageConfig::stage1(), 1);
        cfg.count_scope = CountScope::Batch;
        cfg.batch_size = 5;
        let trace = run_stage1(&mut m, &b.train, &cfg).unwrap();
        let last_batch = b.train.items().len() % 5;
        let total: u64 = trace.epoch_counts[0].iter().sum();
        assert_eq!(total as usize, if last_batch == 0 { 5 } else { last_batch });
    }

    #[test]
    fn runs_are_deterministic_across_thread_counts() {
        let b = bench(10);
        let mut runs = Vec::new();
        for threads in [1, 3] {
            let mut m = model(2);
            let mut s1 = quick(StageConfig::stage1(), 3);
            let mut s2 = quick(StageConfig::stage2(), 2);
            s1.threads = threads;
            s2.threads = threads;
            s2.learning_rate = 1e-3;
            let t1 = run_stage1(&mut m, &b.train, &s1).unwrap();
            let t2 = run_stage2(&mut m, &b.train, &s2).unwrap();
            runs.push((m, t1, t2));
        }
        assert_eq!(runs[0], runs[1]);
    }

    /// Nearest class centroid in cosine geometry.
    fn centroid_oracle_war(train: &EmbeddingDataset, test: &EmbeddingDataset) -> f64 {
        let d = train.feature_dim;
        let mut centroids = vec![vec![0.0; d]; train.n_classes];
        for s in &train.samples {
            crate::numerics::axpy(1.0, &s.features, &mut centroids[s.class]);
        }
        let correct = test
            .samples
            .iter()
            .filter(|s| {
                let sims: Vec<f64> = centroids
                    .iter()
                    .map(|c| crate::numerics::cosine_similarity(&s.features, c).unwrap())
                    .collect();
                crate::numerics::argmax(&sims) == s.class
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn stage1_reaches_centroid_oracle_level() {
        let b = generate_synthetic(&SynthConfig {
            subclusters_per_class: 1,
            samples_per_subcluster: 250,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(centroid_oracle_war(&b.train, &b.train) >= 0.95);
        let mut m = model(2);
        let trace = run_stage1(&mut m, &b.train, &StageConfig::stage1()).unwrap();
        assert_eq!(trace.epochs.len(), 30);
        assert!(trace.epochs[29].war >= 0.95);
        assert!(trace.epochs[29].total < trace.epochs[0].total);
    }

    #[test]
    fn stage2_recovers_under_distortion() {
        let b = bench(125);
        let map = linear_distortion(16, 1.0, 3);
        let train = apply_linear_map(&b.train, &map).unwrap();
        let test = apply_linear_map(&b.test, &map).unwrap();

        let mut clean = model(2);
        run_stage1(&mut clean, &b.train, &StageConfig::stage1()).unwrap();
        let clean_war = crate::inference::evaluate(&b.test, &clean).unwrap().war;

        let mut m = model(2);
        run_stage1(&mut m, &train, &StageConfig::stage1()).unwrap();
        let mut s2 = StageConfig::stage2();
        s2.learning_rate = 1e-3;
        run_stage2(&mut m, &train, &s2).unwrap();
        let war = crate::inference::evaluate(&test, &m).unwrap().war;
        assert!(war >= 0.9 * clean_war, "{war} vs clean {clean_war}");
    }

    #[test]
    fn fd_instances_pass_for_both_stages() {
        for index in 0..10 {
            let (m, sample) = random_fd_instance(5, index).unwrap();
            for stage in [Stage::Descriptors, Stage::Adapter] {
                let report = fd_check(&m, &sample, stage, 1e-5, None).unwrap();
                assert!(
                    report.max_rel_error() < 1e-4,
                    "{index} {stage:?}: {report:?}"
                );
            }
        }
    }

    #[test]
    fn fd_fault_is_detected() {
        let (m, sample) = random_fd_instance(5, 0).unwrap();
        let report = fd_check(
            &m,
            &sample,
            Stage::Descriptors,
            1e-5,
            Some((ParamGroup::DescriptorTokens, 1.01)),
        )
        .unwrap();
        assert!(report.max_rel_error() > 5e-3);
        assert!(fd_check(&m, &sample, Stage::Adapter, 0.0, None).is_err());
    }

    #[test]
    fn projected_encoder_trains() {
        let b = bench(20);
        let mut m = Model::new(ModelConfig {
            n_classes: 3,
            n_subclasses: 2,
            token_dim: 8,
            encoder: TextEncoderKind::ProjectedMean,
            ..ModelConfig::default()
        })
        .unwrap();
        let projection = m.fingerprint(ParamGroup::Projection);
        let trace = run_stage1(&mut m, &b.train, &quick(StageConfig::stage1(), 10)).unwrap();
        assert_eq!(m.fingerprint(ParamGroup::Projection), projection);
        assert!(trace.epochs[9].total < trace.epochs[0].total);
    }
}
