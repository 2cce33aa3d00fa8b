//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are reported as FAIL with a reason
//! and do not fail the process; any other failure, or a known failure that
//! starts passing, does.

mod support;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};

use metd::checkpoint;
use metd::cli::synthesize;
use metd::config::RunConfig;
use metd::data::{EmbeddingDataset, Sample};
use metd::harness::{default_registry, run_strategy, train_two_stage, HarnessSettings};
use metd::inference::{
    evaluate, predict, predict_sequence, temporal_mean_pool, zero_shot_predict, EvalReport,
};
use metd::losses::{
    clip_ce_loss, fine_grained_loss, margin_loss, modulating_factor, total_loss, SimilarityGrid,
};
use metd::model::{Model, ModelConfig, TextEmbeddings, TextEncoderKind};
use metd::rng;

const KNOWN_FAILURES: &[(u32, &str)] = &[(
    5,
    "mean-similarity inference scores each class by a single prototype (the mean of its unit \
     descriptor embeddings), so K=2 has the decision capacity of K=1; the two runs tie",
)];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn uniform_vec(r: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| r.random_range(lo..hi)).collect()
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_metd")
}

fn gradient_correctness() -> Outcome {
    let config = support::manifest_path("configs/fdcheck.conf");
    let out = Command::new(binary())
        .args(["fdcheck", "--config"])
        .arg(&config)
        .output()
        .expect("run fdcheck");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cfg = RunConfig::load(&config).unwrap();
    let rows: Vec<(String, f64)> = stdout
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f.len() == 5).then(|| (format!("stage{} {}", f[0], f[1]), f[3].parse().unwrap()))
        })
        .collect();
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let stages_ok = rows.iter().any(|r| r.0.starts_with("stage1"))
        && rows.iter().any(|r| r.0.starts_with("stage2"));
    outcome(
        out.status.code() == Some(0) && stages_ok && worst < 1e-4 && cfg.fd_instances >= 20,
        format!(
            "{} instances per stage, {} groups, max rel. error {worst:.2e}, exit {:?}",
            cfg.fd_instances,
            rows.len(),
            out.status.code()
        ),
    )
}

fn k1_reduction() -> Outcome {
    let mut r = rng::stream(101, 0);
    let mut worst = 0.0f64;
    let mut alpha_exact = true;
    for _ in 0..1000 {
        let n = r.random_range(2..=8);
        let sims = uniform_vec(&mut r, n, -1.0, 1.0);
        let tau = 10f64.powf(r.random_range(-2.0..0.0));
        let t = r.random_range(0..n);
        let count = r.random_range(1..100);
        let a = modulating_factor(&[count], 0).unwrap();
        alpha_exact &= a == 1.0;
        let rows: Vec<Vec<f64>> = sims.iter().map(|&s| vec![s]).collect();
        let grid = SimilarityGrid::from_rows(&rows, tau).unwrap();
        let fg = fine_grained_loss(&grid, t, a).unwrap();
        let ce = clip_ce_loss(&sims, t, tau).unwrap();
        worst = worst.max((fg - ce).abs());
    }
    outcome(
        worst <= 1e-12 && alpha_exact,
        format!("1000 instances, max |fg - ce| = {worst:.2e}, alpha exactly 1: {alpha_exact}"),
    )
}

fn alpha_identities() -> Outcome {
    let mut equal_ok = true;
    for k in 1..=10usize {
        for n in 1..=30u64 {
            for closest in 0..k {
                equal_ok &= (modulating_factor(&vec![n; k], closest).unwrap() - 1.0).abs() <= 1e-12;
            }
        }
    }
    // e / (e + e^(1/3)) * 4 rewritten as 4 / (1 + e^(-2/3))
    let reference = 4.0 / (1.0 + (-2.0f64 / 3.0).exp());
    let got = modulating_factor(&[1, 3], 0).unwrap();
    let value_ok = (got - reference).abs() <= 1e-9;
    let mut grid_ok = true;
    for a in 1..=20u64 {
        for b in 1..=20u64 {
            let counts = [a, b];
            let (lo, hi) = if a <= b { (0, 1) } else { (1, 0) };
            grid_ok &=
                modulating_factor(&counts, lo).unwrap() >= modulating_factor(&counts, hi).unwrap();
        }
    }
    outcome(
        equal_ok && value_ok && grid_ok,
        format!(
            "equal counts: {equal_ok}; alpha([1,3],0) = {got:.10} vs reference {reference:.10} \
             (|diff| {:.1e}); grid property: {grid_ok}",
            (got - reference).abs()
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng::stream(202, 0);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(2..=6);
        let k = r.random_range(1..=5);
        let dim = r.random_range(2..=12);
        let tau = 10f64.powf(r.random_range(-4.0..0.0));
        let t = r.random_range(0..n);
        let image = uniform_vec(&mut r, dim, -1.0, 1.0);
        let text_rows: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| uniform_vec(&mut r, dim, -1.0, 1.0))
                    .collect()
            })
            .collect();
        let text = TextEmbeddings::from_rows(text_rows.clone()).unwrap();
        let grid = SimilarityGrid::from_embeddings(&image, &text, tau).unwrap();
        let ref_grid: Vec<Vec<f64>> = text_rows
            .iter()
            .map(|row| row.iter().map(|v| support::cosine(&image, v)).collect())
            .collect();
        let prior: Vec<u64> = (0..k).map(|_| r.random_range(0..10)).collect();
        let reference = support::losses(&ref_grid, t, &prior, tau);

        let closest = metd::losses::select_closest(&grid, t);
        let mut counts = prior.clone();
        counts[closest] += 1;
        let b = total_loss(&grid, t, &counts).unwrap();
        let fg = fine_grained_loss(&grid, t, b.alpha).unwrap();
        let margin = margin_loss(&grid, t).unwrap();
        for (got, want) in [
            (b.total, reference.total),
            (fg, reference.fg),
            (margin, reference.margin),
            (b.alpha, reference.alpha),
        ] {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }

        let per_class: Vec<Vec<f64>> = text_rows.iter().map(|row| row[0].clone()).collect();
        let sims: Vec<f64> = ref_grid.iter().map(|row| row[0]).collect();
        let ce = clip_ce_loss(&sims, t, tau).unwrap();
        worst = worst.max((ce - support::clip_ce(&sims, t, tau)).abs() / ce.abs().max(1.0));
        let probs = zero_shot_predict(&image, &per_class, tau).unwrap();
        for (p, q) in probs
            .as_slice()
            .iter()
            .zip(support::zero_shot_probs(&sims, tau))
        {
            worst = worst.max((p - q).abs());
        }
    }
    outcome(
        worst <= 1e-8,
        format!("500 instances, tau in [1e-4, 1], max scaled error {worst:.2e}"),
    )
}

fn benchmark_config() -> RunConfig {
    RunConfig::load(&support::manifest_path("configs/benchmark.conf")).unwrap()
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let cfg = benchmark_config();
    let (train, test) = synthesize(&cfg).unwrap();
    let counts_ok = train.class_counts() == vec![200; 3] && test.class_counts() == vec![50; 3];
    let mut reports: Vec<EvalReport> = Vec::new();
    for k in [2, 1] {
        let mut c = cfg.clone();
        c.subclasses = k;
        c.threads = 1;
        let (model, _, _) = train_two_stage(&train, &HarnessSettings::from_config(&c)).unwrap();
        reports.push(evaluate(&test, &model).unwrap());
    }
    let elapsed = start.elapsed();
    let (k2, k1) = (&reports[0], &reports[1]);
    let purity = k2.purity.unwrap_or(0.0);
    outcome(
        counts_ok
            && k2.war >= 0.95
            && purity >= 0.9
            && k2.war > k1.war
            && elapsed < Duration::from_secs(120),
        format!(
            "K=2 WAR {:.4} (>= 0.95: {}), purity {purity:.3} (>= 0.9: {}), K=1 WAR {:.4} \
             (strictly below K=2: {}), {:.1}s",
            k2.war,
            k2.war >= 0.95,
            purity >= 0.9,
            k1.war,
            k2.war > k1.war,
            elapsed.as_secs_f64()
        ),
    )
}

fn two_stage_vs_baselines() -> Outcome {
    let cfg = RunConfig::load(&support::manifest_path("configs/distortion.conf")).unwrap();
    let (train, test) = synthesize(&cfg).unwrap();
    let settings = HarnessSettings::from_config(&cfg);
    let registry = default_registry();
    let metd = run_strategy(&registry, "metd", &train, &test, &settings).unwrap();
    let probe = run_strategy(&registry, "linear-probe", &train, &test, &settings).unwrap();
    outcome(
        cfg.distortion > 0.0 && metd.war() >= probe.war(),
        format!(
            "distortion {}: METD WAR {:.4}, linear-probe WAR {:.4}",
            cfg.distortion,
            metd.war(),
            probe.war()
        ),
    )
}

fn metric_correctness() -> Outcome {
    let truth = [0, 0, 1, 1, 2];
    let pred = [0, 0, 1, 0, 1];
    let r = EvalReport::from_predictions(3, &truth, &pred).unwrap();
    let fixture_ok = (r.war - 0.6).abs() <= 1e-12 && (r.uar - 0.5).abs() <= 1e-12;
    let mut rr = rng::stream(303, 0);
    let mut balanced_ok = true;
    let mut oracle_ok = true;
    for _ in 0..500 {
        let n = rr.random_range(2..=6);
        let per = rr.random_range(1..=20);
        let truth: Vec<usize> = (0..n * per).map(|i| i % n).collect();
        let pred: Vec<usize> = truth.iter().map(|_| rr.random_range(0..n)).collect();
        let r = EvalReport::from_predictions(n, &truth, &pred).unwrap();
        balanced_ok &= (r.war - r.uar).abs() <= 1e-12;
        let (w, u) = support::war_uar(n, &truth, &pred);
        oracle_ok &= (r.war - w).abs() <= 1e-12 && (r.uar - u).abs() <= 1e-12;
    }
    outcome(
        fixture_ok && balanced_ok && oracle_ok,
        format!(
            "fixture WAR {} UAR {}; balanced WAR == UAR over 500 sets: {balanced_ok}; \
             matches oracle: {oracle_ok}",
            r.war, r.uar
        ),
    )
}

fn run_pipeline(dir: &Path, config: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let run = |args: &[&std::ffi::OsStr]| {
        let out = Command::new(binary())
            .args(args)
            .output()
            .expect("run metd");
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out.stdout
    };
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    run(&[
        "synth".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        data.as_os_str(),
    ]);
    run(&[
        "train".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        data.as_os_str(),
        ckpt.as_os_str(),
    ]);
    let report = run(&["eval".as_ref(), ckpt.as_os_str(), data.as_os_str()]);
    let mut log = ckpt.as_os_str().to_owned();
    log.push(".metrics.tsv");
    (fs::read(&ckpt).unwrap(), report, fs::read(log).unwrap())
}

fn determinism() -> Outcome {
    let config = support::manifest_path("configs/benchmark.conf");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_pipeline(a.path(), &config);
    let second = run_pipeline(b.path(), &config);
    outcome(
        first == second,
        format!(
            "checkpoint {} bytes identical: {}; report identical: {}; metrics log identical: {}",
            first.0.len(),
            first.0 == second.0,
            first.1 == second.1,
            first.2 == second.2
        ),
    )
}

fn sequence_path() -> Outcome {
    let mut r = rng::stream(404, 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(2..=5);
        let k = r.random_range(1..=3);
        let dim = r.random_range(2..=16);
        let text = TextEmbeddings::from_rows(
            (0..n)
                .map(|_| {
                    (0..k)
                        .map(|_| uniform_vec(&mut r, dim, -1.0, 1.0))
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let frames: Vec<Vec<f64>> = (0..r.random_range(2..=16))
            .map(|_| uniform_vec(&mut r, dim, -1.0, 1.0))
            .collect();
        let pooled = temporal_mean_pool(&frames).unwrap();
        if predict_sequence(&frames, &text).unwrap() != predict(&pooled, &text).unwrap() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("1000 sequences, {mismatches} mismatches"),
    )
}

fn random_dataset(r: &mut impl Rng) -> EmbeddingDataset {
    let dim = r.random_range(1..=12);
    let n_classes = r.random_range(1..=5);
    let mut samples = Vec::new();
    let mut next_seq = 0u64;
    for _ in 0..r.random_range(1..=15) {
        let class = r.random_range(0..n_classes);
        let sub = r.random_bool(0.5).then(|| r.random_range(0..4));
        let frames = r.random_range(1..=3);
        let seq = (frames > 1 || r.random_bool(0.3)).then(|| {
            next_seq += 1;
            next_seq
        });
        for _ in 0..frames {
            let features = (0..dim)
                .map(|_| {
                    let scale = 10f64.powi(r.random_range(-300..300));
                    r.random_range(-1.0..1.0) * scale
                })
                .collect();
            samples.push(Sample {
                features,
                class,
                sequence_id: seq,
                subcluster_id: sub,
            });
            if seq.is_none() {
                break;
            }
        }
    }
    EmbeddingDataset::new(dim, n_classes, samples).unwrap()
}

fn random_model(r: &mut rand_chacha::ChaCha8Rng) -> Model {
    let projected = r.random_bool(0.5);
    let embed_dim = r.random_range(1..=8);
    let residual = r.random_bool(0.5);
    let mut m = Model::new(ModelConfig {
        n_classes: r.random_range(1..=4),
        n_subclasses: r.random_range(1..=3),
        n_tokens: r.random_range(1..=3),
        token_dim: if projected {
            r.random_range(1..=8)
        } else {
            embed_dim
        },
        context_length: r.random_range(0..=3),
        embed_dim,
        feature_dim: if residual {
            embed_dim
        } else {
            r.random_range(1..=8)
        },
        encoder: if projected {
            TextEncoderKind::ProjectedMean
        } else {
            TextEncoderKind::IdentityMean
        },
        residual,
        seed: r.next_u64(),
    })
    .unwrap();
    let tokens = uniform_vec(r, m.bank.tokens_mut().len(), -1e3, 1e3);
    m.bank.tokens_mut().copy_from_slice(&tokens);
    let w = uniform_vec(r, m.adapter.weight_mut().len(), -1.0, 1.0);
    m.adapter.weight_mut().copy_from_slice(&w);
    m
}

fn file_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(505, 0);
    let (mut datasets, mut checkpoints) = (0, 0);
    for i in 0..200 {
        let ds = random_dataset(&mut r);
        let p1 = dir.path().join(format!("d{i}.embed"));
        let p2 = dir.path().join(format!("d{i}.again.embed"));
        metd::data::save_dataset(&ds, &p1).unwrap();
        let loaded = metd::data::load_dataset(&p1).unwrap();
        metd::data::save_dataset(&loaded, &p2).unwrap();
        datasets += usize::from(fs::read(&p1).unwrap() == fs::read(&p2).unwrap() && loaded == ds);

        let m = random_model(&mut r);
        let c1 = dir.path().join(format!("m{i}.ckpt"));
        let c2 = dir.path().join(format!("m{i}.again.ckpt"));
        checkpoint::save_checkpoint(&m, &c1).unwrap();
        let back = checkpoint::load_checkpoint(&c1).unwrap();
        checkpoint::save_checkpoint(&back, &c2).unwrap();
        checkpoints += usize::from(fs::read(&c1).unwrap() == fs::read(&c2).unwrap() && back == m);
    }
    outcome(
        datasets == 200 && checkpoints == 200,
        format!("byte-identical: {datasets}/200 datasets, {checkpoints}/200 checkpoints"),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "K=1 reduction", k1_reduction),
        (3, "modulating-factor identities", alpha_identities),
        (4, "oracle equivalence", oracle_equivalence),
        (5, "synthetic METD recovery", synthetic_recovery),
        (6, "two-stage vs baselines", two_stage_vs_baselines),
        (7, "metric correctness", metric_correctness),
        (8, "determinism", determinism),
        (9, "sequence path", sequence_path),
        (10, "file round trips", file_round_trips),
    ];
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {id:>2} {name} ({secs:.2}s): {}", o.detail);
        match (o.passed, known) {
            (false, Some((_, why))) => println!("       known failure: {why}"),
            (false, None) => unexpected += 1,
            (true, Some(_)) => {
                println!("       listed as a known failure but passed");
                unexpected += 1;
            }
            (true, None) => {}
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria did not meet expectations");
        std::process::exit(1);
    }
}
