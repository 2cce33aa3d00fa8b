//! Mean-similarity prediction, temporal pooling and evaluation metrics.

use std::fmt::Write as _;

use crate::data::EmbeddingDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::model::{Model, TextEmbeddings};
use crate::numerics::{argmax, cosine_similarity, mean_of, stable_softmax, Probabilities};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Mean cosine similarity per class.
    pub logits: Vec<f64>,
    pub label: usize,
    /// Closest subclass within each class.
    pub subclass_argmax: Vec<usize>,
}

/// Class logit `i` is the mean over subclasses of `cos(V, T_i^k)`.
pub fn predict(image: &[f64], text: &TextEmbeddings) -> Result<Prediction> {
    ensure_dim(text.dim(), image.len())?;
    let k = text.n_subclasses();
    let mut logits = Vec::with_capacity(text.n_classes());
    let mut subclass_argmax = Vec::with_capacity(text.n_classes());
    let mut row = vec![0.0; k];
    for i in 0..text.n_classes() {
        for (s, slot) in row.iter_mut().enumerate() {
            *slot = cosine_similarity(image, text.get(i, s))?;
        }
        let mut sum = 0.0;
        for v in &row {
            sum += v;
        }
        logits.push(sum / k as f64);
        subclass_argmax.push(argmax(&row));
    }
    Ok(Prediction {
        label: argmax(&logits),
        logits,
        subclass_argmax,
    })
}

pub fn temporal_mean_pool(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = frames
        .first()
        .ok_or(Error::Empty("temporal_mean_pool"))?
        .len();
    mean_of(frames.iter().map(Vec::as_slice), dim)
}

/// Prediction for a sequence of frame embeddings: pool, then predict.
pub fn predict_sequence(frames: &[Vec<f64>], text: &TextEmbeddings) -> Result<Prediction> {
    predict(&temporal_mean_pool(frames)?, text)
}

/// Softmax over `cos(V, T_i) / tau` with one embedding per class.
pub fn zero_shot_predict(
    image: &[f64],
    class_embeddings: &[Vec<f64>],
    temperature: f64,
) -> Result<Probabilities> {
    if class_embeddings.len() < 2 {
        return Err(Error::invalid(
            "zero-shot prediction needs at least two classes",
        ));
    }
    let logits = class_embeddings
        .iter()
        .map(|t| Ok(cosine_similarity(image, t)? / temperature))
        .collect::<Result<Vec<f64>>>()?;
    stable_softmax(&logits)
}

/// Image embedding of one dataset item: every frame through the adapter,
/// then pooled.
pub fn item_embedding(model: &Model, frames: &[&[f64]]) -> Result<Vec<f64>> {
    let embedded = frames
        .iter()
        .map(|f| model.adapter.encode_image(f))
        .collect::<Result<Vec<_>>>()?;
    temporal_mean_pool(&embedded)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub war: f64,
    pub uar: f64,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_recall: Vec<Option<f64>>,
    pub subclass_histogram: Option<Vec<Vec<u64>>>,
    pub purity: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(
        n_classes: usize,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        ensure_dim(truth.len(), predicted.len())?;
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::invalid("label out of range"));
            }
            confusion[t][p] += 1;
        }
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..n_classes).map(|i| confusion[i][i]).sum();
        let per_class_recall: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let uar = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self {
            war: correct as f64 / total as f64,
            uar,
            confusion,
            per_class_recall,
            subclass_histogram: None,
            purity: None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let total: u64 = self.confusion.iter().flatten().sum();
        let _ = writeln!(out, "WAR\t{:.6}", self.war);
        let _ = writeln!(out, "UAR\t{:.6}", self.uar);
        let _ = writeln!(out, "samples\t{total}");
        out.push_str("confusion (rows: true, columns: predicted)\n");
        for row in &self.confusion {
            out.push_str(&join_tab(row.iter().map(u64::to_string)));
            out.push('\n');
        }
        out.push_str("per-class recall\n");
        out.push_str(&join_tab(self.per_class_recall.iter().map(fmt_recall)));
        out.push('\n');
        if let Some(hist) = &self.subclass_histogram {
            out.push_str("subclass histogram (rows: class, columns: closest subclass)\n");
            for row in hist {
                out.push_str(&join_tab(row.iter().map(u64::to_string)));
                out.push('\n');
            }
        }
        if let Some(p) = self.purity {
            let _ = writeln!(out, "subclass purity\t{p:.6}");
        }
        out.push('\n');
        out.push_str(&self.to_key_values());
        out
    }

    /// Machine-readable block, one `key=value` per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "war={}", crate::data::format_f64(self.war));
        let _ = writeln!(out, "uar={}", crate::data::format_f64(self.uar));
        let _ = writeln!(
            out,
            "samples={}",
            self.confusion.iter().flatten().sum::<u64>()
        );
        let rows: Vec<String> = self
            .confusion
            .iter()
            .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
            .collect();
        let _ = writeln!(out, "confusion={}", rows.join(";"));
        let _ = writeln!(
            out,
            "per_class_recall={}",
            self.per_class_recall
                .iter()
                .map(fmt_recall)
                .collect::<Vec<_>>()
                .join(",")
        );
        if let Some(p) = self.purity {
            let _ = writeln!(out, "purity={}", crate::data::format_f64(p));
        }
        out
    }
}

fn fmt_recall(r: &Option<f64>) -> String {
    r.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn join_tab<I: Iterator<Item = String>>(it: I) -> String {
    it.collect::<Vec<_>>().join("\t")
}

struct Scored {
    truth: usize,
    predicted: usize,
    closest_in_truth: usize,
    subcluster: Option<u64>,
}

fn score(dataset: &EmbeddingDataset, model: &Model) -> Result<Vec<Scored>> {
    let text = model.text_embeddings()?;
    dataset
        .items()
        .iter()
        .map(|item| {
            let v = item_embedding(model, &item.frames)?;
            let p = predict(&v, &text)?;
            Ok(Scored {
                truth: item.class,
                predicted: p.label,
                closest_in_truth: p.subclass_argmax[item.class],
                subcluster: item.subcluster_id,
            })
        })
        .collect()
}

/// WAR, UAR, confusion, and subclass assignment statistics over `dataset`.
pub fn evaluate(dataset: &EmbeddingDataset, model: &Model) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let scored = score(dataset, model)?;
    let truth: Vec<usize> = scored.iter().map(|s| s.truth).collect();
    let predicted: Vec<usize> = scored.iter().map(|s| s.predicted).collect();
    let mut report = EvalReport::from_predictions(model.config.n_classes, &truth, &predicted)?;
    let sub = subclass_report_from(&scored, model.config.n_classes, model.config.n_subclasses);
    report.subclass_histogram = Some(sub.histogram);
    report.purity = sub.purity;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubclassReport {
    /// `histogram[class][k]`: items of true class `class` whose closest
    /// subclass within that class is `k`.
    pub histogram: Vec<Vec<u64>>,
    /// Present only when every item carries a subcluster id.
    pub purity: Option<f64>,
}

pub fn subclass_report(dataset: &EmbeddingDataset, model: &Model) -> Result<SubclassReport> {
    let scored = score(dataset, model)?;
    Ok(subclass_report_from(
        &scored,
        model.config.n_classes,
        model.config.n_subclasses,
    ))
}

fn subclass_report_from(scored: &[Scored], n_classes: usize, k: usize) -> SubclassReport {
    let mut histogram = vec![vec![0u64; k]; n_classes];
    for s in scored {
        histogram[s.truth][s.closest_in_truth] += 1;
    }
    let purity = if scored.iter().all(|s| s.subcluster.is_some()) && !scored.is_empty() {
        let assignments: Vec<(usize, usize, u64)> = scored
            .iter()
            .map(|s| (s.truth, s.closest_in_truth, s.subcluster.unwrap_or(0)))
            .collect();
        Some(purity(&assignments, n_classes, k))
    } else {
        None
    };
    SubclassReport { histogram, purity }
}

/// Max-overlap matching accuracy between assigned subclasses and true
/// subclusters, per class, pooled over classes. `K = 1` is pure by
/// convention.
pub fn purity(assignments: &[(usize, usize, u64)], n_classes: usize, k: usize) -> f64 {
    if assignments.is_empty() {
        return 1.0;
    }
    if k == 1 {
        return 1.0;
    }
    let mut matched = 0u64;
    for class in 0..n_classes {
        let mut clusters: Vec<u64> = assignments
            .iter()
            .filter(|a| a.0 == class)
            .map(|a| a.2)
            .collect();
        clusters.sort_unstable();
        clusters.dedup();
        if clusters.is_empty() {
            continue;
        }
        // overlap[sub][cluster]
        let mut overlap = vec![vec![0u64; clusters.len()]; k];
        for a in assignments.iter().filter(|a| a.0 == class) {
            let c = clusters.binary_search(&a.2).expect("collected above");
            overlap[a.1][c] += 1;
        }
        matched += best_matching(&overlap);
    }
    matched as f64 / assignments.len() as f64
}

/// Maximum total weight of a one-to-one matching between rows and columns.
fn best_matching(overlap: &[Vec<u64>]) -> u64 {
    fn go(overlap: &[Vec<u64>], row: usize, used: &mut Vec<bool>) -> u64 {
        if row == overlap.len() {
            return 0;
        }
        // leave this row unmatched
        let mut best = go(overlap, row + 1, used);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(overlap[row][c] + go(overlap, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let cols = overlap.first().map_or(0, Vec::len);
    go(overlap, 0, &mut vec![false; cols])
}
