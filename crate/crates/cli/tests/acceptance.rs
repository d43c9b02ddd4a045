//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use detox_core::attribution::NeuronGroup;
use detox_core::dpo::{dpo_loss, gradient_check, DpoConfig, PreferenceTriplet};
use detox_core::evalmetrics::{f1_overlap, log_perplexity, Subject};
use detox_core::formats::{read_jsonl, PairRecord};
use detox_core::intervention::{patch_forward, EditHook, EditSelection, NeuronId};
use detox_core::model::{
    load_bundle, mean_profile, mlp_forward_decomposed, mlp_forward_unfactored, ForwardHook, MlpKind, ModelBundle,
    ModelConfig, Vocab, UNK,
};
use detox_core::numerics::{dot, layer_norm, neg_log_sigmoid, pearson, softmax, ActivationKind};
use detox_core::probe::{steer, Probe};
use detox_core::synthbench::GroundTruth;

// Regression pins from the first full pipeline run (seed 0, default spec).
const PIN_REDUCING_FRACTION: f64 = 0.5410;
const PIN_TOXIC_RECOVERY: f64 = 0.300;
const PIN_FOUR_RECOVERY: f64 = 1.000;
const PIN_EDIT_PROBE_TOXICITY: f64 = 0.3652;
const PIN_DPO_TOXICITY: f64 = 0.4135;
const PIN_TOLERANCE: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn vocab(n: usize) -> Vocab {
    let mut toks = vec![UNK.to_string()];
    toks.extend((1..n).map(|i| format!("t{i}")));
    Vocab::new(toks).unwrap()
}

fn random_bundle(kind: MlpKind, act: ActivationKind, seed: u64) -> ModelBundle {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_mlp: 24,
        n_heads: 4,
        vocab_size: 12,
        max_seq: 16,
        mlp_kind: kind,
        activation: act,
        tied_unembedding: seed.is_multiple_of(2),
        final_norm: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ModelBundle::random(cfg, vocab(12), 1.0, &mut rng).unwrap();
    for (name, _, data) in b.named_tensors_mut() {
        if name.ends_with(".gain") || name.ends_with(".bias") {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            for x in data.iter_mut() {
                *x = base + rng.random_range(-0.1f32..0.1);
            }
        }
    }
    b
}

const KINDS: [MlpKind; 2] = [MlpKind::Plain, MlpKind::Gated];
const ACTS: [ActivationKind; 3] = [ActivationKind::GeluExact, ActivationKind::GeluTanh, ActivationKind::Silu];

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..100u64 {
        let kind = KINDS[(k % 2) as usize];
        let act = ACTS[((k / 2) % 3) as usize];
        let b = random_bundle(kind, act, 1000 + k);
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        for layer in &b.layers {
            let x: Vec<f32> = (0..b.config.d_model).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let (fact, _) = mlp_forward_decomposed(&layer.mlp, &x, kind, act).unwrap();
            let unfact = mlp_forward_unfactored(&layer.mlp, &x, kind, act).unwrap();
            let scale = unfact.iter().map(|v| v.abs() as f64).fold(0.0, f64::max).max(1e-12);
            for (a, b) in fact.iter().zip(&unfact) {
                worst = worst.max((*a as f64 - *b as f64).abs() / scale);
            }
        }
    }
    outcome(worst <= 1e-5, format!("max relative deviation {worst:.2e} over 100 bundles"))
}

/// Full forward written independently of the library decoder: whole-sequence
/// attention, and each MLP layer rebuilt with the plan's scores substituted.
fn brute_force(b: &ModelBundle, ids: &[u32], subst: &BTreeMap<NeuronId, f32>) -> (Vec<Vec<Vec<f32>>>, Vec<Vec<f32>>) {
    let cfg = &b.config;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();
    let matvec = |m: &detox_core::numerics::Tensor2, x: &[f32]| -> Vec<f32> {
        (0..m.rows()).map(|r| dot(m.row(r), x) as f32).collect()
    };
    let mut xs: Vec<Vec<f32>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| b.embedding.row(id as usize).iter().zip(b.positional.row(t)).map(|(e, p)| e + p).collect())
        .collect();
    let mut boundaries = vec![xs.clone()];
    for (l, layer) in b.layers.iter().enumerate() {
        let h: Vec<Vec<f32>> = xs.iter().map(|x| layer_norm(x, &layer.attn_norm.gain, &layer.attn_norm.bias)).collect();
        let q: Vec<Vec<f32>> = h.iter().map(|x| matvec(&layer.attn.query, x)).collect();
        let k: Vec<Vec<f32>> = h.iter().map(|x| matvec(&layer.attn.key, x)).collect();
        let v: Vec<Vec<f32>> = h.iter().map(|x| matvec(&layer.attn.value, x)).collect();
        for t in 0..ids.len() {
            let mut mixed = vec![0.0f32; d];
            for head in 0..nh {
                let s = head * hd..(head + 1) * hd;
                let logits: Vec<f64> = (0..=t).map(|u| dot(&q[t][s.clone()], &k[u][s.clone()]) * scale).collect();
                let w = softmax(&logits);
                for (j, slot) in s.clone().enumerate() {
                    let acc: f64 = (0..=t).fold(0.0, |acc, u| acc + w[u] * v[u][s.start + j] as f64);
                    mixed[slot] = acc as f32;
                }
            }
            let o = matvec(&layer.attn.output, &mixed);
            for (a, b) in xs[t].iter_mut().zip(o) {
                *a += b;
            }
        }
        for x in xs.iter_mut() {
            let h2 = layer_norm(x, &layer.mlp_norm.gain, &layer.mlp_norm.bias);
            let scores: Vec<f32> = (0..cfg.d_mlp)
                .map(|i| {
                    if let Some(&m) = subst.get(&(l, i)) {
                        return m;
                    }
                    let g = cfg.activation.apply(dot(layer.mlp.keys.row(i), &h2));
                    match &layer.mlp.linear {
                        Some(lin) => (g * dot(lin.row(i), &h2)) as f32,
                        None => g as f32,
                    }
                })
                .collect();
            let mut acc = vec![0.0f64; d];
            for (i, &m) in scores.iter().enumerate() {
                for (a, &vv) in acc.iter_mut().zip(layer.mlp.values.row(i)) {
                    *a += m as f64 * vv as f64;
                }
            }
            for (a, w) in x.iter_mut().zip(acc) {
                *a += w as f32;
            }
        }
        boundaries.push(xs.clone());
    }
    let u = b.unembedding_matrix();
    let logits = xs
        .iter()
        .map(|x| {
            let hf = layer_norm(x, &b.final_norm.gain, &b.final_norm.bias);
            (0..cfg.vocab_size).map(|t| (dot(u.row(t), &hf) + b.unembed_bias[t] as f64) as f32).collect()
        })
        .collect();
    (boundaries, logits)
}

fn criterion_2() -> Outcome {
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for p in 0..20u64 {
        let kind = KINDS[(p % 2) as usize];
        let act = ACTS[(p % 3) as usize];
        let b = random_bundle(kind, act, 2000 + p);
        let mut rng = ChaCha8Rng::seed_from_u64(p);
        let prompts: Vec<Vec<u32>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(1..12)).collect()).collect();
        let profile = mean_profile(&b, &prompts, 3).unwrap();
        let n_targets = rng.random_range(1..=b.config.n_neurons());
        let mut all: Vec<NeuronId> = (0..b.config.n_layers).flat_map(|l| (0..b.config.d_mlp).map(move |i| (l, i))).collect();
        for i in (1..all.len()).rev() {
            all.swap(i, rng.random_range(0..=i));
        }
        let targets: Vec<NeuronId> = all[..n_targets].to_vec();
        let subst: BTreeMap<NeuronId, f32> = targets.iter().map(|&(l, i)| ((l, i), profile.get(l, i) as f32)).collect();
        let ids: Vec<u32> = (0..rng.random_range(2..10)).map(|_| rng.random_range(0..12)).collect();
        let trace = patch_forward(&b, &targets, &profile, &ids).unwrap();
        let (bounds, logits) = brute_force(&b, &ids, &subst);
        for pos in 0..ids.len() {
            for (l, layer_bounds) in bounds.iter().enumerate() {
                checked += 1;
                if trace.boundary(pos, l) != layer_bounds[pos].as_slice() {
                    mismatches += 1;
                }
            }
            checked += 1;
            if trace.logits(pos) != logits[pos].as_slice() {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{checked} layer outputs compared bitwise, {mismatches} mismatches"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: d,
        d_mlp: 1,
        n_heads: 1,
        vocab_size: 2,
        max_seq: 2,
        mlp_kind: MlpKind::Plain,
        activation: ActivationKind::GeluExact,
        tied_unembedding: false,
        final_norm: true,
    };
    let mut violations = 0;
    let mut strict = 0;
    for _ in 0..1000 {
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let m: f32 = rng.random_range(-3.0f32..3.0);
        let alpha: f64 = rng.random_range(0.001..0.999);
        let vw = dot(&v, &w) / wn;
        let group = NeuronGroup::from_signs(vw, m as f64);
        let mut sel = EditSelection::default();
        match group {
            NeuronGroup::TP => sel.tp.push((0, 0)),
            NeuronGroup::TN => sel.tn.push((0, 0)),
            NeuronGroup::AP => sel.ap.push((0, 0)),
            NeuronGroup::AN => sel.an.push((0, 0)),
            NeuronGroup::Degenerate => {}
        }
        let hook = EditHook::new(&cfg, &sel, alpha).unwrap();
        let mut scores = [m];
        hook.edit_scores(0, 0, &mut scores);
        let before = m as f64 * vw;
        let after = scores[0] as f64 * vw;
        if after > before {
            violations += 1;
        }
        if before != 0.0 {
            if after < before {
                strict += 1;
            } else {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("1000 tuples, {strict} strict decreases, {violations} violations"))
}

struct Pipeline {
    dir: PathBuf,
    steps: BTreeMap<&'static str, Duration>,
}

impl Pipeline {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }

    fn toxicity(&self, report: &str, label: &str) -> f64 {
        self.row(report, label)["toxicity"].as_f64().unwrap()
    }

    fn row(&self, report: &str, label: &str) -> Value {
        self.json(report)["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["label"] == label)
            .unwrap_or_else(|| panic!("no row {label} in {report}"))
            .clone()
    }

    fn time(&self, names: &[&str]) -> Duration {
        names.iter().map(|n| self.steps[n]).sum()
    }
}

const STEPS: &[(&str, &[&str])] = &[
    ("synth", &["synth", "--seed", "0", "--out-dir", "syn"]),
    ("probe", &["train-probe", "--bundle", "syn/model", "--labeled", "syn/labeled.jsonl", "--out", "probe.json"]),
    (
        "scorer",
        &["train-probe", "--bundle", "syn/model", "--labeled", "syn/scorer-labeled.jsonl", "--seed", "1", "--out", "scorer.json"],
    ),
    ("dpo", &["dpo-train", "--bundle", "syn/model", "--pairs", "syn/pairs.jsonl", "--out", "post"]),
    ("profile-pre", &["profile", "--bundle", "syn/model", "--prompts", "syn/prompts.jsonl", "--out", "pre.bin"]),
    ("profile-post", &["profile", "--bundle", "post", "--prompts", "syn/prompts.jsonl", "--out", "post.bin"]),
    (
        "attribute",
        &[
            "attribute", "--pre", "syn/model", "--post", "post", "--pre-profile", "pre.bin", "--post-profile", "post.bin",
            "--probe", "probe.json", "--out", "attr/attribution.csv",
        ],
    ),
    (
        "patch-toxic",
        &[
            "patch-eval", "--bundle", "syn/model", "--reference-profile", "post.bin", "--targets", "toxic-top-k",
            "--probe", "probe.json", "--lexicon", "syn/lexicon.json", "--post", "post", "--scorer", "scorer.json",
            "--prompts", "syn/prompts.jsonl", "--corpus", "syn/corpus.jsonl", "--out", "patch-toxic.csv",
        ],
    ),
    (
        "patch-four",
        &[
            "patch-eval", "--bundle", "syn/model", "--reference-profile", "post.bin", "--targets", "groups:TP,AN,TN,AP",
            "--attribution", "attr/attribution.csv", "--scorer", "scorer.json", "--prompts", "syn/prompts.jsonl",
            "--corpus", "syn/corpus.jsonl", "--out", "patch-four.csv",
        ],
    ),
    (
        "edit-probe",
        &[
            "edit", "--bundle", "syn/model", "--direction", "probe.json", "--profile", "pre.bin", "--alpha", "0.01",
            "--beta", "0.55", "--out", "edit-probe.plan.json", "--report", "edit-probe.csv", "--scorer", "scorer.json",
            "--prompts", "syn/prompts.jsonl", "--corpus", "syn/corpus.jsonl",
        ],
    ),
    (
        "edit-lexicon",
        &[
            "edit", "--bundle", "syn/model", "--direction", "syn/lexicon.json", "--profile", "pre.bin", "--alpha", "0.01",
            "--beta", "0.6", "--out", "edit-lexicon.plan.json", "--report", "edit-lexicon.csv", "--scorer",
            "scorer.json", "--prompts", "syn/prompts.jsonl", "--corpus", "syn/corpus.jsonl",
        ],
    ),
    (
        "steer",
        &[
            "steer", "--bundle", "syn/model", "--probe", "probe.json", "--alpha", "1.0", "--scorer", "scorer.json",
            "--prompts", "syn/prompts.jsonl", "--corpus", "syn/corpus.jsonl", "--out", "steer.csv",
        ],
    ),
    ("lens-probe", &["lens", "--bundle", "syn/model", "--vector", "probe:probe.json", "--k", "10", "--out", "lens-probe.json"]),
    ("lens-neuron", &["lens", "--bundle", "post", "--vector", "neuron:3:0", "--negate", "--out", "lens-neuron.json"]),
    (
        "eval",
        &[
            "eval", "--runs", "runs.json", "--scorer", "scorer.json", "--scoring-bundle", "syn/model", "--prompts",
            "syn/prompts.jsonl", "--corpus", "syn/corpus.jsonl", "--out", "report.csv",
        ],
    ),
];

const RUNSPEC: &str = r#"[
  {"label": "pre", "bundle": "syn/model"},
  {"label": "dpo", "bundle": "post"},
  {"label": "edit probe", "bundle": "syn/model", "plan": "edit-probe.plan.json"},
  {"label": "patch four", "bundle": "syn/model", "plan": "patch-four.plan.json"},
  {"label": "steer", "bundle": "syn/model", "plan": "steer.plan.json"}
]"#;

fn run_pipeline(dir: &Path) -> Pipeline {
    std::fs::write(dir.join("runs.json"), RUNSPEC).unwrap();
    let mut steps = BTreeMap::new();
    for (name, args) in STEPS {
        let t = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_detox")).args(*args).current_dir(dir).output().unwrap();
        assert!(
            out.status.success(),
            "step {name} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        steps.insert(*name, t.elapsed());
    }
    Pipeline { dir: dir.to_path_buf(), steps }
}

fn criterion_4(p: &Pipeline) -> Outcome {
    let probe = Probe::load(&p.path("probe.json")).unwrap();
    let gt: GroundTruth = serde_json::from_value(p.json("syn/ground-truth.json")).unwrap();
    let acc = probe.metadata.test_accuracy.unwrap_or(0.0);
    let cos = detox_core::numerics::cosine(&probe.direction, &gt.toxic_dir).unwrap();
    let t = p.time(&["synth", "probe"]);
    outcome(
        acc >= 0.99 && cos >= 0.95 && t < Duration::from_secs(60),
        format!("test accuracy {acc:.4}, cosine with planted direction {cos:.4}, {:.1}s", t.as_secs_f64()),
    )
}

fn criterion_5(p: &Pipeline) -> Outcome {
    let t0 = Instant::now();
    let pre = load_bundle(&p.path("syn/model")).unwrap();
    let post = load_bundle(&p.path("post")).unwrap();
    let records: Vec<PairRecord> = read_jsonl(&p.path("syn/pairs.jsonl")).unwrap();
    let cfg = DpoConfig::default();
    let init_dev = records
        .iter()
        .map(|r| {
            let t = PreferenceTriplet::from_record(&pre.vocab, r).unwrap();
            (dpo_loss(&pre, &pre, &t, cfg.beta).unwrap() - LN_2).abs()
        })
        .fold(0.0, f64::max);
    let manifest = p.json("post/run-manifest.json");
    let history = manifest["summary"]["history"].as_array().unwrap();
    let first = history[0]["mean_dpo_loss"].as_f64().unwrap();
    let last = history.last().unwrap()["mean_dpo_loss"].as_f64().unwrap();

    // gradient check on a tiny bundle
    let tiny = {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_mlp: 16,
            n_heads: 2,
            vocab_size: 8,
            max_seq: 8,
            mlp_kind: MlpKind::Plain,
            activation: ActivationKind::GeluExact,
            tied_unembedding: false,
            final_norm: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ModelBundle::random(cfg, vocab(8), 1.0, &mut rng).unwrap()
    };
    let mut policy = tiny.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (_, _, data) in policy.named_tensors_mut() {
        for x in data.iter_mut() {
            *x += rng.random_range(-0.05f32..0.05);
        }
    }
    let triplet = PreferenceTriplet { prompt: vec![1, 2, 3], chosen: vec![4, 5], rejected: vec![6, 7] };
    let gcfg = DpoConfig { beta: 0.5, kl_weight: 0.2, ..DpoConfig::default() };
    let gc = gradient_check(&policy, &tiny, &triplet, &gcfg, 3).unwrap();

    let mut min_cos: f64 = 1.0;
    for l in 0..pre.config.n_layers {
        for i in 0..pre.config.d_mlp {
            min_cos = min_cos.min(detox_core::numerics::cosine(pre.value_vector(l, i), post.value_vector(l, i)).unwrap());
        }
    }
    let t = p.time(&["dpo"]) + t0.elapsed();
    let pass = init_dev <= 1e-6
        && (first - LN_2).abs() <= 1e-6
        && last < 0.5
        && gc.max_rel_error <= 1e-3
        && gc.checked > 0
        && min_cos >= 0.95
        && t < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "initial loss max |dev| {init_dev:.1e} over {} triplets, mean {first:.6} -> {last:.4}; gradcheck {} params max rel err {:.1e}; min value cosine {min_cos:.4}; {:.1}s",
            records.len(),
            gc.checked,
            gc.max_rel_error,
            t.as_secs_f64()
        ),
    )
}

fn near(x: f64, pin: f64) -> bool {
    (x - pin).abs() <= PIN_TOLERANCE
}

fn criterion_6(p: &Pipeline) -> Outcome {
    let frac = p.json("attr/groups.json")["summary"]["reducing_fraction"].as_f64().unwrap();
    let pre = p.toxicity("patch-toxic.json", "unpatched");
    let dpo = p.toxicity("patch-toxic.json", "post");
    let toxic = p.toxicity("patch-toxic.json", "patch toxic-top-16");
    let four = p.toxicity("patch-four.json", "patch groups TP+AN+TN+AP");
    let reduction = pre - dpo;
    let rec_toxic = (pre - toxic) / reduction;
    let rec_four = (pre - four) / reduction;
    let t = p.time(&["synth", "probe", "scorer", "dpo", "profile-pre", "profile-post", "attribute", "patch-toxic", "patch-four"]);
    let pinned = near(frac, PIN_REDUCING_FRACTION) && near(rec_toxic, PIN_TOXIC_RECOVERY) && near(rec_four, PIN_FOUR_RECOVERY);
    let pass = (0.40..=0.70).contains(&frac)
        && reduction > 0.0
        && rec_toxic < 0.5
        && rec_four >= 0.9
        && pinned
        && t < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "reducing fraction {frac:.4}; DPO reduction {reduction:.4}; toxic-neuron patch recovers {rec_toxic:.3}, four-group patch {rec_four:.3}; pins {}; {:.1}s",
            if pinned { "held" } else { "MOVED" },
            t.as_secs_f64()
        ),
    )
}

fn criterion_7(p: &Pipeline) -> Outcome {
    let dpo = p.toxicity("patch-toxic.json", "post");
    let probe_row = p.row("edit-probe.json", "edit alpha=0.01 beta=0.55");
    let base_row = p.row("edit-probe.json", "unedited");
    let lex = p.toxicity("edit-lexicon.json", "edit alpha=0.01 beta=0.6");
    let tox = probe_row["toxicity"].as_f64().unwrap();
    let ppl = probe_row["log_ppl"].as_f64().unwrap();
    let ppl0 = base_row["log_ppl"].as_f64().unwrap();
    let ppl_increase = (ppl - ppl0) / ppl0;
    let rel_gap = (lex - tox).abs() / tox;
    let t = p.time(&["synth", "probe", "scorer", "dpo", "profile-pre", "edit-probe", "edit-lexicon"]);
    let pinned = near(tox, PIN_EDIT_PROBE_TOXICITY) && near(dpo, PIN_DPO_TOXICITY);
    let pass = tox <= dpo && ppl_increase <= 0.05 && rel_gap <= 0.25 && pinned && t < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "probe edit toxicity {tox:.4} vs DPO {dpo:.4}; log-ppl change {:+.2}%; contrastive edit {lex:.4} ({:.1}% apart); pins {}; {:.1}s",
            100.0 * ppl_increase,
            100.0 * rel_gap,
            if pinned { "held" } else { "MOVED" },
            t.as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("-log sigmoid(0)", (neg_log_sigmoid(0.0) - LN_2).abs() < 1e-12);

    let v = 10;
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 4,
        d_mlp: 4,
        n_heads: 1,
        vocab_size: v,
        max_seq: 8,
        mlp_kind: MlpKind::Plain,
        activation: ActivationKind::Silu,
        tied_unembedding: false,
        final_norm: true,
    };
    let flat = ModelBundle::zeros(cfg, vocab(v)).unwrap();
    let ppl = log_perplexity(&Subject::plain(&flat), &[vec![1, 2, 3, 4], vec![5, 6]]).unwrap();
    check("uniform log-perplexity", (ppl - (v as f64).ln()).abs() < 1e-9);

    check("F1 identical", f1_overlap(&[1, 2, 3], &[1, 2, 3]) == 1.0);
    check("F1 disjoint", f1_overlap(&[1, 2], &[3, 4]) == 0.0);
    check("F1 half overlap", (f1_overlap(&[1, 2], &[1, 3]) - 0.5).abs() < 1e-12);

    let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
    let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let anti: Vec<f64> = xs.iter().map(|x| -3.0 * x).collect();
    check("pearson linear", (pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
    check("pearson anti", (pearson(&xs, &anti).unwrap() + 1.0).abs() < 1e-12);
    check("pearson hand case", (pearson(&xs, &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);

    let w = [0.3, -1.2, 0.5, 2.0];
    let wn = w.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
    let x = [1.0f32, 0.5, -0.25, 2.0];
    let alpha = 0.7;
    let steered = steer(&x, &w, alpha).unwrap();
    let drop = (dot(&x, &w) - dot(&steered, &w)) / wn;
    check("steering projection drop", (drop - alpha * wn).abs() < 1e-6);

    let elapsed = t.elapsed();
    check("runtime", elapsed < Duration::from_secs(1));
    let detail = if failures.is_empty() {
        format!("10 metric cases exact, {:.3}s", elapsed.as_secs_f64())
    } else {
        format!("failed: {}", failures.join(", "))
    };
    outcome(failures.is_empty(), detail)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn is_manifest(p: &Path) -> bool {
    let name = p.file_name().unwrap().to_string_lossy();
    name == "run-manifest.json" || name.ends_with(".manifest.json")
}

fn strip_timing(mut v: Value) -> Value {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("started_unix_ms");
        obj.remove("wall_clock_seconds");
    }
    v
}

fn criterion_9(a: &Pipeline, b: &Pipeline) -> Outcome {
    let fa = files_under(&a.dir);
    let fb = files_under(&b.dir);
    if fa != fb {
        return outcome(false, "the two runs wrote different file sets".into());
    }
    let mut data = 0;
    let mut manifests = 0;
    let mut differing = Vec::new();
    for rel in &fa {
        let (x, y) = (std::fs::read(a.dir.join(rel)).unwrap(), std::fs::read(b.dir.join(rel)).unwrap());
        if is_manifest(rel) {
            manifests += 1;
            let parse = |bytes: &[u8]| strip_timing(serde_json::from_slice(bytes).unwrap());
            if parse(&x) != parse(&y) {
                differing.push(rel.display().to_string());
            }
        } else {
            data += 1;
            if x != y {
                differing.push(rel.display().to_string());
            }
        }
    }
    let commands: std::collections::BTreeSet<&str> = STEPS.iter().map(|(_, args)| args[0]).collect();
    let pass = differing.is_empty() && commands.len() == 10;
    outcome(
        pass,
        format!(
            "{} commands, {data} data files byte-identical, {manifests} manifests equal modulo timing{}",
            commands.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) }
        ),
    )
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed())
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    let (mut o, t) = timed(criterion_1);
    o.pass &= t < Duration::from_secs(10);
    results.push((1, "decomposition equivalence", o));
    let (mut o, t) = timed(criterion_2);
    o.pass &= t < Duration::from_secs(30);
    results.push((2, "patch oracle", o));
    let (mut o, t) = timed(criterion_3);
    o.pass &= t < Duration::from_secs(5);
    results.push((3, "editing monotonicity", o));

    let root = tempfile::tempdir().unwrap();
    let (da, db) = (root.path().join("a"), root.path().join("b"));
    std::fs::create_dir_all(&da).unwrap();
    std::fs::create_dir_all(&db).unwrap();
    let first = run_pipeline(&da);
    results.push((4, "probe quality", criterion_4(&first)));
    results.push((5, "DPO sanity", criterion_5(&first)));
    results.push((6, "attribution and patching", criterion_6(&first)));
    results.push((7, "editing vs toy DPO", criterion_7(&first)));
    results.push((8, "metric unit suite", criterion_8()));
    let second = run_pipeline(&db);
    results.push((9, "determinism", criterion_9(&first, &second)));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n} ({name}): {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
