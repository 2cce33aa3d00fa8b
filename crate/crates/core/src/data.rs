//! Labeled embedding datasets: synthetic generation, the on-disk text
//! format, class balancing, and vocabulary lookup for decoding tokens.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::rng;

pub const DATASET_MAGIC: &str = "metd-embed";
pub const VOCAB_MAGIC: &str = "metd-vocab";
pub const FORMAT_VERSION: &str = "v1";

/// Shortest decimal rendering that keeps 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn format_floats(xs: &[f64]) -> String {
    let mut out = String::with_capacity(xs.len() * 24);
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x:.16e}");
    }
    out
}

pub(crate) fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| format!("invalid number `{t}`"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite number `{t}`"))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class: usize,
    pub sequence_id: Option<u64>,
    pub subcluster_id: Option<u64>,
}

/// One classification unit: a single sample, or all frames of a sequence.
#[derive(Debug, Clone)]
pub struct Item<'a> {
    pub class: usize,
    pub frames: Vec<&'a [f64]>,
    pub subcluster_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl EmbeddingDataset {
    pub fn new(feature_dim: usize, n_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            feature_dim,
            n_classes,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.n_classes == 0 {
            return Err(Error::invalid("feature_dim and n_classes must be >= 1"));
        }
        let mut closed: HashSet<u64> = HashSet::new();
        let mut open: Option<(u64, usize)> = None;
        for (idx, s) in self.samples.iter().enumerate() {
            ensure_dim(self.feature_dim, s.features.len())?;
            if s.class >= self.n_classes {
                return Err(Error::invalid(format!(
                    "sample {idx}: class {} >= {}",
                    s.class, self.n_classes
                )));
            }
            match (open, s.sequence_id) {
                (Some((id, class)), Some(sid)) if id == sid => {
                    if class != s.class {
                        return Err(Error::invalid(format!(
                            "sample {idx}: sequence {sid} mixes classes"
                        )));
                    }
                }
                (prev, sid) => {
                    if let Some((id, _)) = prev {
                        closed.insert(id);
                    }
                    if let Some(sid) = sid {
                        if closed.contains(&sid) {
                            return Err(Error::invalid(format!(
                                "sample {idx}: sequence {sid} is not contiguous"
                            )));
                        }
                    }
                    open = sid.map(|sid| (sid, s.class));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Group samples into classification units. Contiguous samples that
    /// share a sequence id form one unit.
    pub fn items(&self) -> Vec<Item<'_>> {
        let mut out: Vec<Item<'_>> = Vec::new();
        let mut current: Option<u64> = None;
        for s in &self.samples {
            match (current, s.sequence_id) {
                (Some(c), Some(id)) if c == id => {
                    out.last_mut()
                        .expect("open sequence")
                        .frames
                        .push(&s.features);
                }
                _ => {
                    out.push(Item {
                        class: s.class,
                        frames: vec![&s.features],
                        subcluster_id: s.subcluster_id,
                    });
                    current = s.sequence_id;
                }
            }
        }
        out
    }

    /// Item counts per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for item in self.items() {
            counts[item.class] += 1;
        }
        counts
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{DATASET_MAGIC} {FORMAT_VERSION} dim={} classes={}\n",
            self.feature_dim, self.n_classes
        );
        for s in &self.samples {
            let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                s.class,
                opt(s.sequence_id),
                opt(s.subcluster_id),
                format_floats(&s.features)
            );
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let fields = parse_header(header, DATASET_MAGIC).map_err(|m| perr(1, m))?;
        let feature_dim = header_usize(&fields, "dim").map_err(|m| perr(1, m))?;
        let n_classes = header_usize(&fields, "classes").map_err(|m| perr(1, m))?;

        let mut samples = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(perr(
                    lineno,
                    format!("expected 4 columns, found {}", cols.len()),
                ));
            }
            let class: usize = cols[0]
                .parse()
                .map_err(|_| perr(lineno, format!("invalid class `{}`", cols[0])))?;
            if class >= n_classes {
                return Err(perr(
                    lineno,
                    format!("class {class} >= classes={n_classes}"),
                ));
            }
            let opt = |s: &str, what: &str| -> Result<Option<u64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| perr(lineno, format!("invalid {what} `{s}`")))
                }
            };
            let sequence_id = opt(cols[1], "sequence id")?;
            let subcluster_id = opt(cols[2], "subcluster id")?;
            let features = parse_floats(cols[3]).map_err(|m| perr(lineno, m))?;
            if features.len() != feature_dim {
                return Err(perr(
                    lineno,
                    format!(
                        "row has {} values, header declares dim={feature_dim}",
                        features.len()
                    ),
                ));
            }
            samples.push(Sample {
                features,
                class,
                sequence_id,
                subcluster_id,
            });
        }
        let ds = Self {
            feature_dim,
            n_classes,
            samples,
        };
        ds.validate().map_err(|e| perr(0, e.to_string()))?;
        Ok(ds)
    }
}

fn parse_header(line: &str, magic: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(format!("expected `{magic}` header"));
    }
    match parts.next() {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(format!("unsupported format version `{v}`")),
        None => return Err("missing format version".into()),
    }
    let mut fields = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| format!("malformed header field `{p}`"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok(fields)
}

fn header_usize(
    fields: &BTreeMap<String, String>,
    key: &str,
) -> std::result::Result<usize, String> {
    let v = fields
        .get(key)
        .ok_or_else(|| format!("header missing `{key}`"))?;
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!(
            "header `{key}` must be a positive integer, got `{v}`"
        )),
    }
}

pub fn save_dataset(dataset: &EmbeddingDataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingDataset::from_text(&text, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub subclusters_per_class: usize,
    pub samples_per_subcluster: usize,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation around each subcluster mean.
    pub intra_spread: f64,
    /// Minimum angle between means of different classes, in degrees.
    pub inter_class_min_angle: f64,
    /// Minimum angle between means of the same class, in degrees.
    pub intra_class_min_angle: f64,
    /// Frames per sequence; 1 produces static samples without sequence ids.
    pub frames_per_sequence: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            subclusters_per_class: 2,
            samples_per_subcluster: 125,
            feature_dim: 16,
            intra_spread: 0.1,
            inter_class_min_angle: 60.0,
            intra_class_min_angle: 120.0,
            frames_per_sequence: 1,
            seed: 7,
        }
    }
}

/// Candidate draws per subcluster mean before giving up.
const MEAN_ATTEMPTS: usize = 100_000;
const TEST_FRACTION: f64 = 0.2;
fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&v);
    if n < 1e-12 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.subclusters_per_class == 0
            || self.samples_per_subcluster == 0
            || self.feature_dim == 0
            || self.frames_per_sequence == 0
        {
            return Err(Error::invalid("synthetic counts and dims must be >= 1"));
        }
        if !(self.intra_spread >= 0.0 && self.intra_spread.is_finite()) {
            return Err(Error::invalid("intra_spread must be >= 0"));
        }
        for a in [self.inter_class_min_angle, self.intra_class_min_angle] {
            if !(0.0..=180.0).contains(&a) {
                return Err(Error::invalid("angles must lie in [0, 180] degrees"));
            }
        }
        Ok(())
    }
}

pub struct SyntheticBenchmark {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
    /// Unit-norm subcluster means, `means[class][subcluster]`.
    pub means: Vec<Vec<Vec<f64>>>,
}

fn sample_means(config: &SynthConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut r = rng::stream(config.seed, rng::SYNTH_MEANS);
    let inter_cos = config.inter_class_min_angle.to_radians().cos();
    let intra_cos = config.intra_class_min_angle.to_radians().cos();
    let mut means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(config.n_classes);
    for class in 0..config.n_classes {
        let mut row: Vec<Vec<f64>> = Vec::with_capacity(config.subclusters_per_class);
        for sub in 0..config.subclusters_per_class {
            let mut accepted = None;
            for _ in 0..MEAN_ATTEMPTS {
                let Some(v) = unit(rng::gaussian_vec(&mut r, config.feature_dim, 1.0)) else {
                    continue;
                };
                let ok_inter = means.iter().flatten().all(|m| dot(m, &v) <= inter_cos);
                let ok_intra = row.iter().all(|m| dot(m, &v) <= intra_cos);
                if ok_inter && ok_intra {
                    accepted = Some(v);
                    break;
                }
            }
            let v = accepted.ok_or_else(|| {
                Error::Infeasible(format!(
                    "no mean for class {class} subcluster {sub} within {MEAN_ATTEMPTS} draws"
                ))
            })?;
            row.push(v);
        }
        means.push(row);
    }
    Ok(means)
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let means = sample_means(config)?;
    let mut noise = rng::stream(config.seed, rng::SYNTH_NOISE);
    let mut split = rng::stream(config.seed, rng::SYNTH_SPLIT);
    let frames = config.frames_per_sequence;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut next_sequence = 0u64;
    for (class, row) in means.iter().enumerate() {
        for (sub, mean) in row.iter().enumerate() {
            let mut units: Vec<Vec<Sample>> = Vec::with_capacity(config.samples_per_subcluster);
            for _ in 0..config.samples_per_subcluster {
                let sequence_id = (frames > 1).then(|| {
                    next_sequence += 1;
                    next_sequence - 1
                });
                let unit = (0..frames)
                    .map(|_| {
                        let eps =
                            rng::gaussian_vec(&mut noise, config.feature_dim, config.intra_spread);
                        Sample {
                            features: mean.iter().zip(&eps).map(|(m, e)| m + e).collect(),
                            class,
                            sequence_id,
                            subcluster_id: Some(sub as u64),
                        }
                    })
                    .collect();
                units.push(unit);
            }
            let n_test = (units.len() as f64 * TEST_FRACTION).round() as usize;
            let mut order: Vec<usize> = (0..units.len()).collect();
            order.shuffle(&mut split);
            let test_set: HashSet<usize> = order[..n_test].iter().copied().collect();
            for (i, unit) in units.into_iter().enumerate() {
                if test_set.contains(&i) {
                    test.extend(unit);
                } else {
                    train.extend(unit);
                }
            }
        }
    }
    Ok(SyntheticBenchmark {
        train: EmbeddingDataset::new(config.feature_dim, config.n_classes, train)?,
        test: EmbeddingDataset::new(config.feature_dim, config.n_classes, test)?,
        means,
    })
}

/// Fixed linear distortion `I + strength * G / sqrt(dim)` with Gaussian `G`.
pub fn linear_distortion(dim: usize, strength: f64, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, rng::DISTORTION);
    let g = rng::gaussian_vec(&mut r, dim * dim, 1.0);
    let scale = strength / (dim as f64).sqrt();
    let mut data: Vec<f64> = g.into_iter().map(|x| x * scale).collect();
    for i in 0..dim {
        data[i * dim + i] += 1.0;
    }
    Matrix::from_vec(dim, dim, data).expect("sized")
}

pub fn apply_linear_map(dataset: &EmbeddingDataset, map: &Matrix) -> Result<EmbeddingDataset> {
    ensure_dim(dataset.feature_dim, map.cols())?;
    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            Ok(Sample {
                features: map.matvec(&s.features)?,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingDataset::new(map.rows(), dataset.n_classes, samples)
}

/// Duplicate randomly chosen items of minority classes until every class
/// matches the majority count. Original samples come first, unchanged.
pub fn oversample_balance(dataset: &EmbeddingDataset, seed: u64) -> Result<EmbeddingDataset> {
    let items = dataset.items();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    // item index -> sample range
    let mut ranges = Vec::with_capacity(items.len());
    let mut offset = 0;
    for (idx, item) in items.iter().enumerate() {
        by_class[item.class].push(idx);
        ranges.push(offset..offset + item.frames.len());
        offset += item.frames.len();
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("class {empty} has no samples")));
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut next_sequence = dataset
        .samples
        .iter()
        .filter_map(|s| s.sequence_id)
        .max()
        .map_or(0, |m| m + 1);
    let mut r = rng::stream(seed, rng::OVERSAMPLE);
    let mut samples = dataset.samples.clone();
    for members in &by_class {
        for _ in members.len()..target {
            let pick = members[r.random_range(0..members.len())];
            let fresh_id = dataset.samples[ranges[pick].start].sequence_id.map(|_| {
                next_sequence += 1;
                next_sequence - 1
            });
            for s in &dataset.samples[ranges[pick].clone()] {
                samples.push(Sample {
                    sequence_id: fresh_id,
                    ..s.clone()
                });
            }
        }
    }
    EmbeddingDataset::new(dataset.feature_dim, dataset.n_classes, samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    dim: usize,
    entries: Vec<(String, Vec<f64>)>,
}

impl Vocabulary {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (w, v) in &entries {
            ensure_dim(dim, v.len())?;
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary word `{w}`")));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::invalid(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{VOCAB_MAGIC} {FORMAT_VERSION} dim={}\n", self.dim);
        for (w, v) in &self.entries {
            let _ = writeln!(out, "{w}\t{}", format_floats(v));
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let fields = parse_header(header, VOCAB_MAGIC).map_err(|m| perr(1, m))?;
        let dim = header_usize(&fields, "dim").map_err(|m| perr(1, m))?;
        let mut entries = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (word, floats) = line
                .split_once('\t')
                .ok_or_else(|| perr(idx + 1, "expected `word<TAB>floats`".into()))?;
            let v = parse_floats(floats).map_err(|m| perr(idx + 1, m))?;
            if v.len() != dim {
                return Err(perr(
                    idx + 1,
                    format!("row has {} values, header declares dim={dim}", v.len()),
                ));
            }
            entries.push((word.to_string(), v));
        }
        Self::new(dim, entries).map_err(|e| perr(0, e.to_string()))
    }
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::from_text(&text, path)
}

pub fn save_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<()> {
    fs::write(path, vocab.to_text()).map_err(|e| Error::io(path, e))
}

/// Words closest to `token` in Euclidean distance, ascending; ties keep
/// vocabulary order.
pub fn nearest_words<'v>(
    vocab: &'v Vocabulary,
    token: &[f64],
    top_n: usize,
) -> Result<Vec<(&'v str, f64)>> {
    if vocab.is_empty() {
        return Err(Error::Empty("vocabulary"));
    }
    if top_n == 0 {
        return Err(Error::invalid("top_n must be >= 1"));
    }
    ensure_dim(vocab.dim(), token.len())?;
    let mut ranked: Vec<(&str, f64)> = vocab
        .entries
        .iter()
        .map(|(w, v)| {
            let d2: f64 = v.iter().zip(token).map(|(a, b)| (a - b) * (a - b)).sum();
            (w.as_str(), d2.sqrt())
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranked.truncate(top_n);
    Ok(ranked)
}
