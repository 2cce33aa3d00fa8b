//! Flat key/tensor checkpoint files.
//!
//! ```text
//! metd-checkpoint v1
//! n_classes=3
//! ...
//! bank.context[0]<TAB>v,v,...
//! bank.tokens[i][k][m]<TAB>v,v,...
//! adapter.weight<TAB>row-major values
//! adapter.bias<TAB>v,v,...
//! encoder.projection<TAB>row-major values, or `-` for identity-mean
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{format_floats, parse_floats, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{
    DescriptorBank, ImageAdapter, Model, ModelConfig, TextEncoder, TextEncoderKind,
};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &str = "metd-checkpoint";

const HEADER_KEYS: [&str; 10] = [
    "n_classes",
    "n_subclasses",
    "n_tokens",
    "token_dim",
    "context_length",
    "embed_dim",
    "feature_dim",
    "encoder",
    "residual",
    "seed",
];

pub fn to_text(model: &Model) -> String {
    let c = &model.config;
    let mut out = format!("{CHECKPOINT_MAGIC} {FORMAT_VERSION}\n");
    let _ = writeln!(out, "n_classes={}", c.n_classes);
    let _ = writeln!(out, "n_subclasses={}", c.n_subclasses);
    let _ = writeln!(out, "n_tokens={}", c.n_tokens);
    let _ = writeln!(out, "token_dim={}", c.token_dim);
    let _ = writeln!(out, "context_length={}", c.context_length);
    let _ = writeln!(out, "embed_dim={}", c.embed_dim);
    let _ = writeln!(out, "feature_dim={}", c.feature_dim);
    let _ = writeln!(out, "encoder={}", c.encoder);
    let _ = writeln!(out, "residual={}", c.residual);
    let _ = writeln!(out, "seed={}", c.seed);
    let bank = &model.bank;
    for (i, ctx) in bank.context().iter().enumerate() {
        let _ = writeln!(out, "bank.context[{i}]\t{}", format_floats(ctx));
    }
    for i in 0..bank.n_classes() {
        for k in 0..bank.n_subclasses() {
            for m in 0..bank.n_tokens() {
                let _ = writeln!(
                    out,
                    "bank.tokens[{i}][{k}][{m}]\t{}",
                    format_floats(bank.token(i, k, m))
                );
            }
        }
    }
    let _ = writeln!(
        out,
        "adapter.weight\t{}",
        format_floats(model.adapter.weight().as_slice())
    );
    let _ = writeln!(out, "adapter.bias\t{}", format_floats(model.adapter.bias()));
    match model.encoder.projection() {
        Some(p) => {
            let _ = writeln!(out, "encoder.projection\t{}", format_floats(p.as_slice()));
        }
        None => out.push_str("encoder.projection\t-\n"),
    }
    out
}

pub fn from_text(text: &str, origin: &Path) -> Result<Model> {
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| perr(1, "missing header".into()))?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(perr(1, format!("expected `{CHECKPOINT_MAGIC}` header")));
    }
    match parts.next() {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(perr(1, format!("unsupported format version `{v}`"))),
        None => return Err(perr(1, "missing format version".into())),
    }

    let mut header: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut tensors: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let (map, key, value) = if let Some((k, v)) = line.split_once('\t') {
            (&mut tensors, k, v)
        } else if let Some((k, v)) = line.split_once('=') {
            (&mut header, k, v)
        } else {
            return Err(perr(
                lineno,
                "expected `key=value` or `key<TAB>values`".into(),
            ));
        };
        if map.insert(key, (lineno, value)).is_some() {
            return Err(perr(lineno, format!("duplicate key `{key}`")));
        }
    }
    for key in header.keys() {
        if !HEADER_KEYS.contains(key) {
            let (line, _) = header[key];
            return Err(perr(line, format!("unknown header key `{key}`")));
        }
    }
    let get = |key: &str| -> Result<(usize, &str)> {
        header
            .get(key)
            .copied()
            .ok_or_else(|| perr(1, format!("header missing `{key}`")))
    };
    let usize_key = |key: &str| -> Result<usize> {
        let (line, v) = get(key)?;
        v.parse()
            .map_err(|_| perr(line, format!("`{key}` must be an integer, got `{v}`")))
    };
    let config = ModelConfig {
        n_classes: usize_key("n_classes")?,
        n_subclasses: usize_key("n_subclasses")?,
        n_tokens: usize_key("n_tokens")?,
        token_dim: usize_key("token_dim")?,
        context_length: usize_key("context_length")?,
        embed_dim: usize_key("embed_dim")?,
        feature_dim: usize_key("feature_dim")?,
        encoder: {
            let (line, v) = get("encoder")?;
            v.parse::<TextEncoderKind>()
                .map_err(|e| perr(line, e.to_string()))?
        },
        residual: {
            let (line, v) = get("residual")?;
            v.parse::<bool>()
                .map_err(|_| perr(line, format!("`residual` must be true/false, got `{v}`")))?
        },
        seed: {
            let (line, v) = get("seed")?;
            v.parse()
                .map_err(|_| perr(line, format!("`seed` must be an integer, got `{v}`")))?
        },
    };

    let mut expected: BTreeSet<String> = (0..config.context_length)
        .map(|c| format!("bank.context[{c}]"))
        .collect();
    for i in 0..config.n_classes {
        for k in 0..config.n_subclasses {
            for m in 0..config.n_tokens {
                expected.insert(format!("bank.tokens[{i}][{k}][{m}]"));
            }
        }
    }
    for key in ["adapter.weight", "adapter.bias", "encoder.projection"] {
        expected.insert(key.to_string());
    }
    if let Some((key, (line, _))) = tensors.iter().find(|(k, _)| !expected.contains(**k)) {
        return Err(perr(*line, format!("unexpected tensor `{key}`")));
    }

    let tensor = |key: String, len: usize| -> Result<Vec<f64>> {
        let (line, raw) = tensors
            .get(key.as_str())
            .copied()
            .ok_or_else(|| perr(0, format!("missing tensor `{key}`")))?;
        let v = parse_floats(raw).map_err(|m| perr(line, m))?;
        if v.len() != len {
            return Err(perr(
                line,
                format!("`{key}` has {} values, expected {len}", v.len()),
            ));
        }
        Ok(v)
    };

    let context = (0..config.context_length)
        .map(|c| tensor(format!("bank.context[{c}]"), config.token_dim))
        .collect::<Result<Vec<_>>>()?;
    let mut tokens = Vec::with_capacity(
        config.n_classes * config.n_subclasses * config.n_tokens * config.token_dim,
    );
    for i in 0..config.n_classes {
        for k in 0..config.n_subclasses {
            for m in 0..config.n_tokens {
                tokens.extend(tensor(
                    format!("bank.tokens[{i}][{k}][{m}]"),
                    config.token_dim,
                )?);
            }
        }
    }
    let weight = tensor(
        "adapter.weight".into(),
        config.embed_dim * config.feature_dim,
    )?;
    let bias = tensor("adapter.bias".into(), config.embed_dim)?;
    let encoder = match config.encoder {
        TextEncoderKind::IdentityMean => {
            let (line, raw) = tensors
                .get("encoder.projection")
                .copied()
                .ok_or_else(|| perr(0, "missing tensor `encoder.projection`".into()))?;
            if raw != "-" {
                return Err(perr(
                    line,
                    "identity-mean encoder has no projection; expected `-`".into(),
                ));
            }
            if config.token_dim != config.embed_dim {
                return Err(perr(
                    1,
                    "identity-mean requires token_dim == embed_dim".into(),
                ));
            }
            TextEncoder::identity(config.token_dim)
        }
        TextEncoderKind::ProjectedMean => {
            let p = tensor(
                "encoder.projection".into(),
                config.embed_dim * config.token_dim,
            )?;
            TextEncoder::with_projection(Matrix::from_vec(config.embed_dim, config.token_dim, p)?)
        }
    };
    let bank = DescriptorBank::from_parts(
        config.n_classes,
        config.n_subclasses,
        config.n_tokens,
        config.token_dim,
        context,
        tokens,
    )
    .map_err(|e| perr(0, e.to_string()))?;
    let adapter = ImageAdapter::new(
        Matrix::from_vec(config.embed_dim, config.feature_dim, weight)?,
        bias,
        config.residual,
    )
    .map_err(|e| perr(0, e.to_string()))?;
    Ok(Model {
        config,
        bank,
        encoder,
        adapter,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, path)
}
