//! Strategy comparison.
//!
//! Every classification approach implements [`Strategy`] and is registered
//! by name in a [`StrategyRegistry`]; the CLI selects strategies by name
//! from the run config. All strategies see the same train/test split and
//! seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::data::{EmbeddingDataset, Item};
use crate::error::{ensure_dim, Error, Result};
use crate::inference::{evaluate, item_embedding, zero_shot_predict, EvalReport};
use crate::losses::{
    backprop_similarities, clip_ce_loss, clip_ce_similarity_gradient, SimilarityGrid,
};
use crate::model::{Model, ModelConfig, ParamGroup, Stage, TextEmbeddings, TOKEN_INIT_STD};
use crate::numerics::{argmax, cosine_similarity, stable_softmax, Matrix};
use crate::optim::{AdamW, Optimizer};
use crate::rng;
use crate::training::{run_stage1, run_stage2, StageConfig};

pub const DEFAULT_STRATEGIES: [&str; 5] = [
    "zero-shot-fixed",
    "linear-probe",
    "full-finetune",
    "learnable-context",
    "metd",
];

/// Knobs shared by all strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessSettings {
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub temperature: f64,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub baseline_batch: usize,
    pub seed: u64,
}

impl HarnessSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            model: cfg.model(),
            stage1: cfg.stage(Stage::Descriptors),
            stage2: cfg.stage(Stage::Adapter),
            temperature: cfg.temperature,
            baseline_epochs: cfg.baseline_epochs,
            baseline_lr: cfg.baseline_lr,
            baseline_batch: cfg.baseline_batch,
            seed: cfg.seed,
        }
    }

    /// Same settings under a different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        s.model.seed = seed;
        s.stage1.seed = seed;
        s.stage2.seed = seed;
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOutcome {
    pub report: EvalReport,
    /// Short human-readable description of what was trained.
    pub config_echo: String,
    /// Parameter fingerprints of the text/image model before and after the
    /// run, when the strategy owns one.
    pub fingerprints: Option<(Vec<u64>, Vec<u64>)>,
}

impl StrategyOutcome {
    pub fn war(&self) -> f64 {
        self.report.war
    }

    pub fn uar(&self) -> f64 {
        self.report.uar
    }
}

pub trait Strategy: Send + Sync {
    fn name(&self) -> &str;

    fn run(
        &self,
        train: &EmbeddingDataset,
        test: &EmbeddingDataset,
        settings: &HarnessSettings,
    ) -> Result<StrategyOutcome>;
}

#[derive(Default)]
pub struct StrategyRegistry {
    strategies: BTreeMap<String, Box<dyn Strategy>>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, strategy: impl Strategy + 'static) -> Result<()> {
        self.register_boxed(Box::new(strategy))
    }

    pub fn register_boxed(&mut self, strategy: Box<dyn Strategy>) -> Result<()> {
        let name = strategy.name().to_string();
        if self.strategies.contains_key(&name) {
            return Err(Error::invalid(format!(
                "strategy `{name}` already registered"
            )));
        }
        self.strategies.insert(name, strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&dyn Strategy> {
        self.strategies
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.strategies.keys().map(String::as_str)
    }
}

/// Registry holding every built-in strategy.
pub fn default_registry() -> StrategyRegistry {
    let mut r = StrategyRegistry::new();
    let builtins: [Box<dyn Strategy>; 6] = [
        Box::new(ZeroShot),
        Box::new(LinearProbe),
        Box::new(FullFinetune),
        Box::new(LearnableContext),
        Box::new(Metd::new("metd", None)),
        Box::new(Metd::new("metd-single", Some(1))),
    ];
    for b in builtins {
        r.register_boxed(b).expect("built-in names are unique");
    }
    r
}

fn labels(items: &[Item<'_>]) -> Vec<usize> {
    items.iter().map(|i| i.class).collect()
}

/// Fixed random descriptor per class, no training, softmax over
/// temperature-scaled similarities.
pub struct ZeroShot;

pub fn zero_shot_eval(
    model: &Model,
    test: &EmbeddingDataset,
    temperature: f64,
) -> Result<EvalReport> {
    let text = model.text_embeddings()?;
    let per_class: Vec<Vec<f64>> = (0..text.n_classes())
        .map(|i| text.get(i, 0).to_vec())
        .collect();
    let items = test.items();
    let mut predicted = Vec::with_capacity(items.len());
    for item in &items {
        let v = item_embedding(model, &item.frames)?;
        predicted.push(zero_shot_predict(&v, &per_class, temperature)?.argmax());
    }
    EvalReport::from_predictions(model.config.n_classes, &labels(&items), &predicted)
}

impl Strategy for ZeroShot {
    fn name(&self) -> &str {
        "zero-shot-fixed"
    }

    fn run(
        &self,
        _train: &EmbeddingDataset,
        test: &EmbeddingDataset,
        settings: &HarnessSettings,
    ) -> Result<StrategyOutcome> {
        let model = Model::new(ModelConfig {
            n_subclasses: 1,
            ..settings.model.clone()
        })?;
        let before = model.fingerprints(&ParamGroup::ALL);
        let report = zero_shot_eval(&model, test, settings.temperature)?;
        let after = model.fingerprints(&ParamGroup::ALL);
        Ok(StrategyOutcome {
            report,
            config_echo: format!("K=1 M={} untrained", settings.model.n_tokens),
            fingerprints: Some((before, after)),
        })
    }
}

/// Linear softmax classifier `W v + b`.
#[derive(Debug, Clone)]
struct LinearHead {
    weight: Matrix,
    bias: Vec<f64>,
}

impl LinearHead {
    fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(n_classes, dim),
            bias: vec![0.0; n_classes],
        }
    }

    fn logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weight.matvec(v)?;
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }

    /// Softmax cross-entropy gradients: `dW += s (p - y) v^T`, `db += s (p - y)`,
    /// returns `dL/dv`.
    fn accumulate(
        &self,
        v: &[f64],
        class: usize,
        scale: f64,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Result<Vec<f64>> {
        let p = stable_softmax(&self.logits(v)?)?;
        let mut dz = p.into_vec();
        dz[class] -= 1.0;
        let cols = self.weight.cols();
        for (r, &g) in dz.iter().enumerate() {
            crate::numerics::axpy(scale * g, v, &mut grad_w[r * cols..(r + 1) * cols]);
            grad_b[r] += scale * g;
        }
        self.weight.matvec_transposed(&dz)
    }
}

fn shuffled_batches(
    n: usize,
    batch: usize,
    epochs: usize,
    seed: u64,
    stream: u64,
) -> impl Iterator<Item = Vec<usize>> {
    let mut r = rng::stream(seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    (0..epochs).flat_map(move |_| {
        order.shuffle(&mut r);
        order
            .chunks(batch)
            .map(<[usize]>::to_vec)
            .collect::<Vec<_>>()
    })
}

/// Frozen image embeddings, trained linear head.
pub struct LinearProbe;

impl Strategy for LinearProbe {
    fn name(&self) -> &str {
        "linear-probe"
    }

    fn run(
        &self,
        train: &EmbeddingDataset,
        test: &EmbeddingDataset,
        settings: &HarnessSettings,
    ) -> Result<StrategyOutcome> {
        let model = Model::new(settings.model.clone())?;
        let embed = |ds: &EmbeddingDataset| -> Result<Vec<(Vec<f64>, usize)>> {
            ds.items()
                .iter()
                .map(|it| Ok((item_embedding(&model, &it.frames)?, it.class)))
                .collect()
        };
        let train_v = embed(train)?;
        let n_classes = settings.model.n_classes;
        let mut head = LinearHead::zeros(n_classes, model.adapter.embed_dim());
        let mut opt_w = AdamW::new(0.0);
        let mut opt_b = AdamW::new(0.0);
        for batch in shuffled_batches(
            train_v.len(),
            settings.baseline_batch,
            settings.baseline_epochs,
            settings.seed,
            rng::BASELINE,
        ) {
            let mut gw = vec![0.0; head.weight.as_slice().len()];
            let mut gb = vec![0.0; n_classes];
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let (v, c) = &train_v[i];
                head.accumulate(v, *c, scale, &mut gw, &mut gb)?;
            }
            opt_w.step(head.weight.as_mut_slice(), &gw, settings.baseline_lr)?;
            opt_b.step(&mut head.bias, &gb, settings.baseline_lr)?;
        }
        let test_v = embed(test)?;
        let predicted = test_v
            .iter()
            .map(|(v, _)| Ok(argmax(&head.logits(v)?)))
            .collect::<Result<Vec<_>>>()?;
        let truth: Vec<usize> = test_v.iter().map(|(_, c)| *c).collect();
        Ok(StrategyOutcome {
            report: EvalReport::from_predictions(n_classes, &truth, &predicted)?,
            config_echo: format!(
                "head {n_classes}x{} epochs={} lr={}",
                model.adapter.embed_dim(),
                settings.baseline_epochs,
                settings.baseline_lr
            ),
            fingerprints: None,
        })
    }
}

/// Image adapter and linear head trained jointly, no text branch.
pub struct FullFinetune;

impl Strategy for FullFinetune {
    fn name(&self) -> &str {
        "full-finetune"
    }

    fn run(
        &self,
        train: &EmbeddingDataset,
        test: &EmbeddingDataset,
        settings: &HarnessSettings,
    ) -> Result<StrategyOutcome> {
        let mut model = Model::new(settings.model.clone())?;
        let n_classes = settings.model.n_classes;
        let items = train.items();
        let mut head = LinearHead::zeros(n_classes, model.adapter.embed_dim());
        let mut opts: Vec<AdamW> = (0..4).map(|_| AdamW::new(0.0)).collect();
        for batch in shuffled_batches(
            items.len(),
            settings.baseline_batch,
            settings.baseline_epochs,
            settings.seed,
            rng::BASELINE,
        ) {
            let mut g_hw = vec![0.0; head.weight.as_slice().len()];
            let mut g_hb = vec![0.0; n_classes];
            let mut g_aw = vec![0.0; model.adapter.weight().as_slice().len()];
            let mut g_ab = vec![0.0; model.adapter.bias().len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let item = &items[i];
                let v = item_embedding(&model, &item.frames)?;
                let dv = head.accumulate(&v, item.class, scale, &mut g_hw, &mut g_hb)?;
                let per_frame = 1.0 / item.frames.len() as f64;
                for f in &item.frames {
                    model
                        .adapter
                        .accumulate_gradients(f, &dv, per_frame, &mut g_aw, &mut g_ab)?;
                }
            }
            let lr = settings.baseline_lr;
            opts[0].step(head.weight.as_mut_slice(), &g_hw, lr)?;
            opts[1].step(&mut head.bias, &g_hb, lr)?;
            opts[2].step(model.adapter.weight_mut(), &g_aw, lr)?;
            opts[3].step(model.adapter.bias_mut(), &g_ab, lr)?;
        }
        let test_items = test.items();
        let predicted = test_items
            .iter()
            .map(|it| Ok(argmax(&head.logits(&item_embedding(&model, &it.frames)?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(StrategyOutcome {
            report: EvalReport::from_predictions(n_classes, &labels(&test_items), &predicted)?,
            config_echo: format!(
                "adapter+head epochs={} lr={}",
                settings.baseline_epochs, settings.baseline_lr
            ),
            fingerprints: None,
        })
    }
}

/// Shared learnable context tokens followed by one frozen name token per
/// class; cross-entropy over one similarity per class.
pub struct LearnableContext;

struct ContextModel<'m> {
    model: &'m Model,
    context: Vec<f64>,
    names: Vec<Vec<f64>>,
}

impl ContextModel<'_> {
    fn n_context(&self) -> usize {
        self.context.len() / self.model.config.token_dim
    }

    fn embeddings(&self) -> Result<TextEmbeddings> {
        let d = self.model.config.token_dim;
        let ctx: Vec<&[f64]> = self.context.chunks(d).collect();
        let per_class = self
            .names
            .iter()
            .map(|n| self.model.encoder.encode_text(&ctx, &[n.as_slice()]))
            .collect::<Result<Vec<_>>>()?;
        TextEmbeddings::single(per_class)
    }
}

impl Strategy for LearnableContext {
    fn name(&self) -> &str {
        "learnable-context"
    }

    fn run(
        &self,
        train: &EmbeddingDataset,
        test: &EmbeddingDataset,
        settings: &HarnessSettings,
    ) -> Result<StrategyOutcome> {
        let model = Model::new(ModelConfig {
            n_subclasses: 1,
            ..settings.model.clone()
        })?;
        let d = settings.model.token_dim;
        let m = settings.model.n_tokens;
        let mut r = rng::stream(settings.seed, rng::BASELINE);
        let mut cm = ContextModel {
            model: &model,
            context: rng::gaussian_vec(&mut r, m * d, TOKEN_INIT_STD),
            names: (0..settings.model.n_classes)
                .map(|_| rng::gaussian_vec(&mut r, d, TOKEN_INIT_STD))
                .collect(),
        };
        let tau = settings.temperature;
        let items = train.items();
        let images = items
            .iter()
            .map(|it| item_embedding(&model, &it.frames))
            .collect::<Result<Vec<_>>>()?;
        let stage = &settings.stage1;
        let mut opt = stage.optimizer.build(stage.weight_decay);
        let seq_len = cm.n_context() + 1;
        for batch in shuffled_batches(
            items.len(),
            stage.batch_size,
            stage.epochs,
            settings.seed,
            rng::SHUFFLE_STAGE1,
        ) {
            let text = cm.embeddings()?;
            let mut g_ctx = vec![0.0; d];
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let v = &images[i];
                let grid = SimilarityGrid::from_embeddings(v, &text, tau)?;
                let ds = clip_ce_similarity_gradient(grid.values(), items[i].class, tau)?;
                let (_, dt) = backprop_similarities(v, &text, &grid, &ds)?;
                for class_grad in dt.chunks(text.dim()) {
                    let tok = model.encoder.token_gradient(class_grad, seq_len)?;
                    crate::numerics::axpy(scale, &tok, &mut g_ctx);
                }
            }
            // every context position receives the same gradient
            let full: Vec<f64> = (0..cm.n_context())
                .flat_map(|_| g_ctx.iter().copied())
                .collect();
            ensure_dim(cm.context.len(), full.len())?;
            opt.step(&mut cm.context, &full, stage.learning_rate)?;
        }
        let text = cm.embeddings()?;
        let test_items = test.items();
        let mut predicted = Vec::with_capacity(test_items.len());
        let mut loss = 0.0;
        for it in &test_items {
            let v = item_embedding(&model, &it.frames)?;
            let sims = (0..text.n_classes())
                .map(|i| cosine_similarity(&v, text.get(i, 0)))
                .collect::<Result<Vec<_>>>()?;
            loss += clip_ce_loss(&sims, it.class, tau)?;
            predicted.push(argmax(&sims));
        }
        Ok(StrategyOutcome {
            report: EvalReport::from_predictions(
                settings.model.n_classes,
                &labels(&test_items),
                &predicted,
            )?,
            config_echo: format!(
                "M={m} shared context epochs={} test_ce={:.4}",
                stage.epochs,
                loss / test_items.len() as f64
            ),
            fingerprints: None,
        })
    }
}

/// Two-stage descriptor training with mean-similarity inference.
pub struct Metd {
    name: String,
    subclasses: Option<usize>,
}

impl Metd {
    /// `subclasses` overrides the configured `K` when set.
    pub fn new(name: &str, subclasses: Option<usize>) -> Self {
        Self {
            name: name.to_string(),
            subclasses,
        }
    }
}

/// Train a fresh model through both stages.
pub fn train_two_stage(
    train: &EmbeddingDataset,
    settings: &HarnessSettings,
) -> Result<(
    Model,
    crate::training::StageTrace,
    crate::training::StageTrace,
)> {
    let mut model = Model::new(settings.model.clone())?;
    let t1 = run_stage1(&mut model, train, &settings.stage1)?;
    let t2 = run_stage2(&mut model, train, &settings.stage2)?;
    Ok((model, t1, t2))
}

impl Strategy for Metd {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(
        &self,
        train: &EmbeddingDataset,
        test: &EmbeddingDataset,
        settings: &HarnessSettings,
    ) -> Result<StrategyOutcome> {
        let mut s = settings.clone();
        if let Some(k) = self.subclasses {
            s.model.n_subclasses = k;
        }
        let (model, _, _) = train_two_stage(train, &s)?;
        let report = evaluate(test, &model)?;
        Ok(StrategyOutcome {
            report,
            config_echo: format!(
                "K={} M={} epochs={}+{}",
                s.model.n_subclasses, s.model.n_tokens, s.stage1.epochs, s.stage2.epochs
            ),
            fingerprints: None,
        })
    }
}

pub fn run_strategy(
    registry: &StrategyRegistry,
    name: &str,
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    settings: &HarnessSettings,
) -> Result<StrategyOutcome> {
    registry.get(name)?.run(train, test, settings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub outcome: StrategyOutcome,
    pub wall_time_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    /// Aligned plain-text table. Timing lives only in the key/value block so
    /// that the table is reproducible.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max("strategy".len());
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  config\n",
            "strategy", "WAR", "UAR"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {}",
                r.name,
                r.outcome.war(),
                r.outcome.uar(),
                r.outcome.config_echo
            );
        }
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "[{}]", r.name);
            let _ = writeln!(out, "war={}", crate::data::format_f64(r.outcome.war()));
            let _ = writeln!(out, "uar={}", crate::data::format_f64(r.outcome.uar()));
            if let Some(p) = r.outcome.report.purity {
                let _ = writeln!(out, "purity={}", crate::data::format_f64(p));
            }
            let _ = writeln!(out, "wall_time_ms={}", r.wall_time_ms);
            let _ = writeln!(out, "config={}", r.outcome.config_echo);
        }
        out
    }
}

/// Run `names` in order on the same split and seed.
pub fn compare_all(
    registry: &StrategyRegistry,
    names: &[String],
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    settings: &HarnessSettings,
) -> Result<ComparisonReport> {
    if names.is_empty() {
        return Err(Error::Empty("strategy list"));
    }
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let strategy = registry.get(name)?;
        let start = Instant::now();
        let outcome = strategy.run(train, test, settings)?;
        rows.push(ComparisonRow {
            name: name.clone(),
            outcome,
            wall_time_ms: start.elapsed().as_millis(),
        });
    }
    Ok(ComparisonReport { rows })
}

/// Seed for the `index`-th strategy in parallel mode.
pub fn derived_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64 + 1)
}

/// Like [`compare_all`] but one thread per strategy, each with its own
/// derived seed.
pub fn compare_all_parallel(
    registry: &StrategyRegistry,
    names: &[String],
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    settings: &HarnessSettings,
) -> Result<ComparisonReport> {
    if names.is_empty() {
        return Err(Error::Empty("strategy list"));
    }
    let strategies = names
        .iter()
        .map(|n| registry.get(n))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<ComparisonRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .enumerate()
            .map(|(i, strategy)| {
                let local = settings.reseeded(derived_seed(settings.seed, i));
                let name = names[i].clone();
                scope.spawn(move || {
                    let start = Instant::now();
                    let outcome = strategy.run(train, test, &local)?;
                    Ok(ComparisonRow {
                        name,
                        outcome,
                        wall_time_ms: start.elapsed().as_millis(),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("strategy thread panicked"))
            .collect()
    });
    Ok(ComparisonReport {
        rows: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}
