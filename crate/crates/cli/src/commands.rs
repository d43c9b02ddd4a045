use std::io;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use detox_core::attribution::{
    alignment_table, attribute_all, group_summary, identify_toxic_neurons, layer_ledger, read_attribution_csv,
    shift_correlation, write_attribution_csv, Direction, NeuronGroup,
};
use detox_core::dpo::{train_dpo, DpoConfig, DpoManifest, PreferenceTriplet};
use detox_core::evalmetrics::{build_report, encode_prompts, EvalInputs, EvalReport, Subject, SurrogateScorer};
use detox_core::formats::{read_json, read_jsonl, write_json, LabeledText, PairRecord, PromptRecord};
use detox_core::intervention::{
    select_edit_targets, DirectionSource, EditHook, InterventionPlan, NeuronId, PatchHook, SteerHook,
};
use detox_core::model::{load_bundle, mean_profile, save_bundle, ForwardHook, MeanActivationProfile, ModelBundle, NoHook};
use detox_core::probe::{collect_activations, contrastive_direction, logit_lens, train_probe, Lexicon, Probe, ProbeTrainConfig};
use detox_core::synthbench::{plant_bundle, plant_corpora, write_all, PlantSpec};
use detox_core::Error;

use crate::args::*;
use crate::manifest::{manifest_path, Finished};

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

/// Fails with an I/O error naming the first missing input.
fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::io(*p, io::Error::new(io::ErrorKind::NotFound, "input not found")).into());
        }
    }
    Ok(())
}

fn check_n_new(n: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid("--n-new must be positive"));
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn encode_corpus(bundle: &ModelBundle, records: &[PromptRecord]) -> Result<Vec<Vec<u32>>> {
    Ok(records.iter().map(|r| bundle.vocab.encode(&r.text)).collect::<detox_core::Result<_>>()?)
}

/// Report outputs: `<out>`, `<stem>.json`, `<stem>.detail.csv`.
fn report_paths(out: &Path) -> Vec<PathBuf> {
    vec![out.to_path_buf(), out.with_extension("json"), out.with_extension("detail.csv")]
}

struct Scoring {
    scorer: SurrogateScorer,
    scoring: ModelBundle,
    prompts: Vec<(String, Vec<u32>)>,
    corpus: Vec<Vec<u32>>,
    n_new: usize,
    inputs: Vec<PathBuf>,
}

impl Scoring {
    fn load(scorer: &Path, scoring_bundle: &Path, prompts: &Path, corpus: &Path, n_new: usize) -> Result<Self> {
        check_n_new(n_new)?;
        require(&[scorer, scoring_bundle, prompts, corpus])?;
        let probe = Probe::load(scorer)?;
        let scoring = load_bundle(scoring_bundle)?;
        let prompt_records: Vec<PromptRecord> = read_jsonl(prompts)?;
        if prompt_records.is_empty() {
            return Err(Error::EmptyPromptSet.into());
        }
        let corpus_records: Vec<PromptRecord> = read_jsonl(corpus)?;
        Ok(Self {
            scorer: SurrogateScorer::new(probe, scorer.display().to_string())?,
            prompts: encode_prompts(&scoring, &prompt_records)?,
            corpus: encode_corpus(&scoring, &corpus_records)?,
            scoring,
            n_new,
            inputs: vec![scorer.into(), scoring_bundle.into(), prompts.into(), corpus.into()],
        })
    }

    fn inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            scorer: &self.scorer,
            scoring: &self.scoring,
            prompts: &self.prompts,
            corpus: &self.corpus,
            n_new: self.n_new,
        }
    }

    fn report(&self, runs: &[(String, Subject)]) -> Result<EvalReport> {
        let mut report = build_report(runs, &self.inputs())?;
        report.provenance = crate::manifest::hash_paths(&self.inputs)?
            .into_iter()
            .map(|h| (h.path, h.sha256))
            .collect();
        Ok(report)
    }
}

fn print_rows(report: &EvalReport) {
    for r in &report.rows {
        println!("{:<32} toxicity {:.4}  log_ppl {:.4}  f1 {:.4}", r.label, r.toxicity, r.log_ppl, r.f1);
    }
}

fn rows_json(report: &EvalReport) -> Value {
    serde_json::to_value(&report.rounded().rows).unwrap_or(Value::Null)
}

pub fn synth(a: &SynthArgs) -> Result<Finished> {
    let mut spec = match &a.spec {
        Some(p) => {
            require(&[p])?;
            read_json::<PlantSpec>(p)?
        }
        None => PlantSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let (bundle, gt) = plant_bundle(&spec)?;
    let corpora = plant_corpora(&spec, &bundle, &gt)?;
    let outputs = write_all(&a.out_dir, &spec, &bundle, &gt, &corpora)?;
    println!(
        "planted {} neurons over {} layers; wrote {} outputs to {}",
        gt.planted.len(),
        spec.config.n_layers,
        outputs.len(),
        a.out_dir.display()
    );
    Ok(Finished {
        inputs: a.spec.iter().cloned().collect(),
        outputs,
        seed: Some(spec.seed),
        summary: json!({
            "n_planted": gt.planted.len(),
            "n_prompts": corpora.prompts.len(),
            "n_pairs": corpora.pairs.len(),
            "n_labeled": corpora.labeled.len(),
        }),
        manifest: manifest_path(&a.out_dir, true),
    })
}

pub fn train_probe_cmd(a: &TrainProbeArgs) -> Result<Finished> {
    let cfg = ProbeTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        l2: a.l2,
        train_fraction: a.split,
        seed: a.seed,
    };
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) || !(cfg.lr > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(invalid("--split must be in (0, 1], --lr > 0, --l2 >= 0"));
    }
    require(&[&a.bundle, &a.labeled])?;
    let bundle = load_bundle(&a.bundle)?;
    let texts: Vec<LabeledText> = read_jsonl(&a.labeled)?;
    let mut set = collect_activations(&bundle, &texts)?;
    set.provenance = a.labeled.display().to_string();
    let fit = train_probe(&set, &cfg)?;
    fit.probe.save(&a.out)?;
    let meta = &fit.probe.metadata;
    match meta.test_accuracy {
        Some(acc) => println!("test accuracy {acc:.4} ({} held out)", meta.n_test),
        None => println!("test accuracy n/a (no held-out rows); train accuracy {:.4}", meta.train_accuracy),
    }
    Ok(Finished {
        inputs: vec![a.bundle.clone(), a.labeled.clone()],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        summary: json!({
            "test_accuracy": meta.test_accuracy,
            "train_accuracy": meta.train_accuracy,
            "final_loss": meta.final_loss,
        }),
        manifest: manifest_path(&a.out, false),
    })
}

pub fn dpo_train(a: &DpoTrainArgs) -> Result<Finished> {
    let cfg = DpoConfig {
        beta: a.beta,
        kl_weight: a.kl,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        grad_clip_norm: a.clip,
        warmup_steps: a.warmup,
        seed: a.seed,
    };
    cfg.validate()?;
    require(&[&a.bundle, &a.pairs])?;
    let pre = load_bundle(&a.bundle)?;
    let records: Vec<PairRecord> = read_jsonl(&a.pairs)?;
    let triplets: Vec<PreferenceTriplet> = records
        .iter()
        .map(|r| PreferenceTriplet::from_record(&pre.vocab, r))
        .collect::<detox_core::Result<_>>()?;
    let run = train_dpo(&pre, &triplets, &cfg)?;
    save_bundle(&run.post, &a.out)?;
    let first = run.history.first().map_or(f64::NAN, |h| h.mean_dpo_loss);
    let last = run.history.last().map_or(f64::NAN, |h| h.mean_dpo_loss);
    println!("dpo loss {first:.6} -> {last:.6} over {} steps", run.steps);
    let record = DpoManifest {
        config: cfg,
        seed: a.seed,
        n_triplets: triplets.len(),
        steps: run.steps,
        history: run.history,
        output_bundle: a.out.display().to_string(),
    };
    Ok(Finished {
        inputs: vec![a.bundle.clone(), a.pairs.clone()],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        summary: serde_json::to_value(&record)?,
        manifest: manifest_path(&a.out, true),
    })
}

pub fn profile(a: &ProfileArgs) -> Result<Finished> {
    check_n_new(a.n_new)?;
    require(&[&a.bundle, &a.prompts])?;
    let bundle = load_bundle(&a.bundle)?;
    let records: Vec<PromptRecord> = read_jsonl(&a.prompts)?;
    let prompts: Vec<Vec<u32>> = encode_prompts(&bundle, &records)?.into_iter().map(|(_, ids)| ids).collect();
    let prof = mean_profile(&bundle, &prompts, a.n_new)?;
    prof.save(&a.out)?;
    println!("profiled {} prompts x {} new tokens", prompts.len(), a.n_new);
    Ok(Finished {
        inputs: vec![a.bundle.clone(), a.prompts.clone()],
        outputs: vec![a.out.clone()],
        seed: None,
        summary: json!({ "n_prompts": prompts.len(), "n_new": a.n_new }),
        manifest: manifest_path(&a.out, false),
    })
}

pub fn attribute(a: &AttributeArgs) -> Result<Finished> {
    require(&[&a.pre, &a.post, &a.pre_profile, &a.post_profile, &a.probe])?;
    let pre = load_bundle(&a.pre)?;
    let post = load_bundle(&a.post)?;
    let prof_pre = MeanActivationProfile::load(&a.pre_profile)?;
    let prof_post = MeanActivationProfile::load(&a.post_profile)?;
    let probe = Probe::load(&a.probe)?;
    let attrs = attribute_all(&pre, &post, &prof_pre, &prof_post, &probe.direction)?;
    let ledger = layer_ledger(&attrs);
    let summary = group_summary(&attrs);
    let corr = shift_correlation(&attrs)?;
    let ledger_path = sibling(&a.out, "ledger.json");
    let groups_path = sibling(&a.out, "groups.json");
    write_attribution_csv(&a.out, &attrs)?;
    write_json(&ledger_path, &ledger)?;
    write_json(&groups_path, &json!({ "summary": summary, "shift_correlation": corr }))?;
    println!(
        "{} neurons: {} reduce, {} increase; reducing fraction {:.4}",
        summary.n_neurons, summary.n_reducing, summary.n_increasing, summary.reducing_fraction
    );
    for g in &summary.groups {
        println!("  {}: {} neurons, {} reducing ({:.3} of reducers)", g.group, g.count, g.reducing, g.proportion);
    }
    Ok(Finished {
        inputs: vec![a.pre.clone(), a.post.clone(), a.pre_profile.clone(), a.post_profile.clone(), a.probe.clone()],
        outputs: vec![a.out.clone(), ledger_path, groups_path],
        seed: None,
        summary: json!({
            "reducing_fraction": summary.reducing_fraction,
            "total_reduction": ledger.total_reduction,
            "total_net": ledger.total_net,
        }),
        manifest: manifest_path(&a.out, false),
    })
}

enum Targets {
    ToxicTopK,
    Groups(Vec<NeuronGroup>),
    File(PathBuf),
}

fn parse_targets(s: &str) -> Result<Targets> {
    if s == "toxic-top-k" {
        return Ok(Targets::ToxicTopK);
    }
    if let Some(list) = s.strip_prefix("groups:") {
        let mut groups = Vec::new();
        for g in list.split(',').map(str::trim).filter(|g| !g.is_empty()) {
            let group: NeuronGroup = g.parse()?;
            if group == NeuronGroup::Degenerate {
                return Err(invalid("the degenerate set is not a patchable group"));
            }
            if !groups.contains(&group) {
                groups.push(group);
            }
        }
        if groups.is_empty() {
            return Err(invalid("groups: needs at least one of TP,TN,AP,AN"));
        }
        return Ok(Targets::Groups(groups));
    }
    if let Some(path) = s.strip_prefix("file:") {
        return Ok(Targets::File(PathBuf::from(path)));
    }
    Err(invalid(format!("unrecognized --targets {s:?}; use toxic-top-k, groups:LIST or file:PATH")))
}

pub fn patch_eval(a: &PatchEvalArgs) -> Result<Finished> {
    let targets = parse_targets(&a.targets)?;
    let mut inputs = vec![a.bundle.clone(), a.reference_profile.clone()];
    match &targets {
        Targets::ToxicTopK => {
            let (Some(probe), Some(lexicon)) = (&a.probe, &a.lexicon) else {
                return Err(invalid("toxic-top-k needs --probe and --lexicon"));
            };
            if a.top_k == 0 || a.candidates == 0 || a.lens_k == 0 {
                return Err(invalid("--top-k, --candidates and --lens-k must be positive"));
            }
            inputs.extend([probe.clone(), lexicon.clone()]);
        }
        Targets::Groups(_) => match &a.attribution {
            Some(p) => inputs.push(p.clone()),
            None => return Err(invalid("groups: targets need --attribution")),
        },
        Targets::File(p) => inputs.push(p.clone()),
    }
    inputs.extend(a.post.iter().cloned());
    require(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let scoring_path = a.scoring.scoring_bundle.clone().unwrap_or_else(|| a.bundle.clone());
    let scoring = Scoring::load(&a.scoring.scorer, &scoring_path, &a.scoring.prompts, &a.scoring.corpus, a.scoring.n_new)?;

    let bundle = load_bundle(&a.bundle)?;
    let reference = MeanActivationProfile::load(&a.reference_profile)?;
    let post = a.post.as_deref().map(load_bundle).transpose()?;
    if let Some(p) = &post {
        bundle.check_same_config(p)?;
    }
    let (ids, label): (Vec<NeuronId>, String) = match &targets {
        Targets::ToxicTopK => {
            let probe = Probe::load(a.probe.as_deref().expect("checked"))?;
            let lexicon = Lexicon::load(a.lexicon.as_deref().expect("checked"))?;
            let found = identify_toxic_neurons(&bundle, &probe.direction, &lexicon, a.candidates, a.lens_k, a.top_k)?;
            (found.iter().map(|r| (r.layer, r.index)).collect(), format!("patch toxic-top-{}", a.top_k))
        }
        Targets::Groups(groups) => {
            let table = read_attribution_csv(a.attribution.as_deref().expect("checked"))?;
            let ids = table
                .iter()
                .filter(|r| r.direction == Direction::Reduce && groups.contains(&r.group))
                .map(|r| (r.layer, r.index))
                .collect();
            let names: Vec<&str> = groups.iter().map(|g| g.as_str()).collect();
            (ids, format!("patch groups {}", names.join("+")))
        }
        Targets::File(p) => (read_json(p)?, format!("patch {}", p.display())),
    };
    let hook = PatchHook::new(&bundle.config, &ids, &reference)?;
    let mut runs = vec![
        ("unpatched".to_string(), Subject::plain(&bundle)),
        (label, Subject { bundle: &bundle, hook: &hook }),
    ];
    if let Some(p) = &post {
        runs.push(("post".to_string(), Subject::plain(p)));
    }
    let report = scoring.report(&runs)?;
    report.write(&a.out)?;
    let plan_path = a.out.with_extension("plan.json");
    write_json(&plan_path, &InterventionPlan::PatchToProfile { targets: ids.clone(), profile: a.reference_profile.clone() })?;
    print_rows(&report);
    println!("patched {} neurons", ids.len());

    let mut outputs = report_paths(&a.out);
    outputs.push(plan_path);
    inputs.extend(scoring.inputs.iter().cloned());
    Ok(Finished {
        inputs,
        outputs,
        seed: None,
        summary: json!({ "n_targets": ids.len(), "rows": rows_json(&report) }),
        manifest: manifest_path(&a.out, false),
    })
}

/// Probe direction or contrastive direction, by file contents.
fn load_direction(path: &Path, bundle: &ModelBundle) -> Result<(Vec<f64>, DirectionSource)> {
    let value: Value = read_json(path)?;
    if value.get("direction").is_some() {
        let probe = Probe::load(path)?;
        Ok((probe.direction, DirectionSource::Probe { probe: path.into() }))
    } else if value.get("toxic").is_some() {
        let lexicon = Lexicon::load(path)?;
        Ok((contrastive_direction(bundle, &lexicon)?, DirectionSource::Contrastive { lexicon: path.into() }))
    } else {
        Err(Error::parse(path, "neither a probe nor a lexicon").into())
    }
}

fn check_alpha_beta(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("--alpha {alpha} not in (0, 1)")));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid(format!("--beta {beta} not in (0, 1]")));
    }
    Ok(())
}

pub fn edit(a: &EditArgs) -> Result<Finished> {
    check_alpha_beta(a.alpha, a.beta)?;
    check_n_new(a.n_new)?;
    let mut inputs = vec![a.bundle.clone(), a.direction.clone(), a.profile.clone()];
    require(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let scoring = match &a.report {
        Some(_) => {
            let (Some(scorer), Some(prompts), Some(corpus)) = (&a.scorer, &a.prompts, &a.corpus) else {
                return Err(invalid("--report needs --scorer, --prompts and --corpus"));
            };
            let sb = a.scoring_bundle.clone().unwrap_or_else(|| a.bundle.clone());
            Some(Scoring::load(scorer, &sb, prompts, corpus, a.n_new)?)
        }
        None => None,
    };
    let bundle = load_bundle(&a.bundle)?;
    let profile = MeanActivationProfile::load(&a.profile)?;
    let (dir, source) = load_direction(&a.direction, &bundle)?;
    let table = alignment_table(&bundle, &profile, &dir)?;
    let selection = select_edit_targets(&table, a.beta, a.ranking.into())?;
    let plan = InterventionPlan::Edit {
        alpha: a.alpha,
        beta: a.beta,
        ranking: a.ranking.into(),
        direction: source,
        profile: a.profile.clone(),
        selection: Some(selection.clone()),
    };
    write_json(&a.out, &plan)?;
    println!(
        "selected TP {} TN {} AP {} AN {}",
        selection.tp.len(),
        selection.tn.len(),
        selection.ap.len(),
        selection.an.len()
    );
    let mut outputs = vec![a.out.clone()];
    let mut summary = json!({ "n_selected": selection.len() });
    if let (Some(report_path), Some(scoring)) = (&a.report, &scoring) {
        let hook = EditHook::new(&bundle.config, &selection, a.alpha)?;
        let label = format!("edit alpha={} beta={}", a.alpha, a.beta);
        let report = scoring.report(&[
            ("unedited".to_string(), Subject::plain(&bundle)),
            (label, Subject { bundle: &bundle, hook: &hook }),
        ])?;
        report.write(report_path)?;
        print_rows(&report);
        outputs.extend(report_paths(report_path));
        inputs.extend(scoring.inputs.iter().cloned());
        summary["rows"] = rows_json(&report);
    }
    Ok(Finished {
        inputs,
        outputs,
        seed: None,
        summary,
        manifest: manifest_path(&a.out, false),
    })
}

pub fn steer(a: &SteerArgs) -> Result<Finished> {
    if !a.alpha.is_finite() {
        return Err(invalid("--alpha must be finite"));
    }
    let mut inputs = vec![a.bundle.clone(), a.probe.clone()];
    require(&[&a.bundle, &a.probe])?;
    let sb = a.scoring.scoring_bundle.clone().unwrap_or_else(|| a.bundle.clone());
    let scoring = Scoring::load(&a.scoring.scorer, &sb, &a.scoring.prompts, &a.scoring.corpus, a.scoring.n_new)?;
    let bundle = load_bundle(&a.bundle)?;
    let probe = Probe::load(&a.probe)?;
    let hook = SteerHook::new(&bundle.config, &probe.direction, a.alpha)?;
    let report = scoring.report(&[
        ("unsteered".to_string(), Subject::plain(&bundle)),
        (format!("steer alpha={}", a.alpha), Subject { bundle: &bundle, hook: &hook }),
    ])?;
    report.write(&a.out)?;
    let plan_path = a.out.with_extension("plan.json");
    write_json(&plan_path, &InterventionPlan::Steer { probe: a.probe.clone(), alpha: a.alpha })?;
    print_rows(&report);
    let mut outputs = report_paths(&a.out);
    outputs.push(plan_path);
    inputs.extend(scoring.inputs.iter().cloned());
    Ok(Finished {
        inputs,
        outputs,
        seed: None,
        summary: json!({ "rows": rows_json(&report) }),
        manifest: manifest_path(&a.out, false),
    })
}

enum VectorSpec {
    Probe(PathBuf),
    Neuron(usize, usize),
    File(PathBuf),
}

fn parse_vector(s: &str) -> Result<VectorSpec> {
    if let Some(p) = s.strip_prefix("probe:") {
        return Ok(VectorSpec::Probe(p.into()));
    }
    if let Some(p) = s.strip_prefix("file:") {
        return Ok(VectorSpec::File(p.into()));
    }
    if let Some(rest) = s.strip_prefix("neuron:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if let [l, i] = parts[..] {
            if let (Ok(l), Ok(i)) = (l.parse(), i.parse()) {
                return Ok(VectorSpec::Neuron(l, i));
            }
        }
    }
    Err(invalid(format!("unrecognized --vector {s:?}; use probe:PATH, neuron:LAYER:INDEX or file:PATH")))
}

#[derive(Serialize, Deserialize)]
struct LensOutput {
    vector: String,
    k: usize,
    negate: bool,
    entries: Vec<detox_core::probe::LensEntry>,
}

pub fn lens(a: &LensArgs) -> Result<Finished> {
    let spec = parse_vector(&a.vector)?;
    if a.k == 0 {
        return Err(invalid("--k must be positive"));
    }
    let mut inputs = vec![a.bundle.clone()];
    if let VectorSpec::Probe(p) | VectorSpec::File(p) = &spec {
        inputs.push(p.clone());
    }
    require(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let bundle = load_bundle(&a.bundle)?;
    let mut v: Vec<f64> = match &spec {
        VectorSpec::Probe(p) => Probe::load(p)?.direction,
        VectorSpec::File(p) => read_json(p)?,
        VectorSpec::Neuron(l, i) => {
            if *l >= bundle.config.n_layers || *i >= bundle.config.d_mlp {
                return Err(Error::IndexOutOfRange(format!("neuron ({l}, {i})")).into());
            }
            bundle.value_vector(*l, *i).iter().map(|&x| x as f64).collect()
        }
    };
    if a.negate {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let entries = logit_lens(&bundle, &v, a.k)?;
    for (rank, e) in entries.iter().enumerate() {
        println!("{:>3} {:<12} {:.4}", rank + 1, e.token, e.score);
    }
    write_json(&a.out, &LensOutput { vector: a.vector.clone(), k: a.k, negate: a.negate, entries })?;
    Ok(Finished {
        inputs,
        outputs: vec![a.out.clone()],
        seed: None,
        summary: Value::Null,
        manifest: manifest_path(&a.out, false),
    })
}

#[derive(Debug, Deserialize)]
struct RunSpec {
    label: String,
    bundle: PathBuf,
    #[serde(default)]
    plan: Option<PathBuf>,
}

fn plan_hook(plan: &InterventionPlan, bundle: &ModelBundle) -> Result<Box<dyn ForwardHook>> {
    plan.validate(&bundle.config)?;
    Ok(match plan {
        InterventionPlan::PatchToProfile { targets, profile } => {
            require(&[profile])?;
            Box::new(PatchHook::new(&bundle.config, targets, &MeanActivationProfile::load(profile)?)?)
        }
        InterventionPlan::Edit { alpha, beta, ranking, direction, profile, selection } => {
            let selection = match selection {
                Some(s) => s.clone(),
                None => {
                    let path = match direction {
                        DirectionSource::Probe { probe } => probe,
                        DirectionSource::Contrastive { lexicon } => lexicon,
                    };
                    require(&[path, profile])?;
                    let (dir, _) = load_direction(path, bundle)?;
                    let table = alignment_table(bundle, &MeanActivationProfile::load(profile)?, &dir)?;
                    select_edit_targets(&table, *beta, *ranking)?
                }
            };
            Box::new(EditHook::new(&bundle.config, &selection, *alpha)?)
        }
        InterventionPlan::Steer { probe, alpha } => {
            require(&[probe])?;
            Box::new(SteerHook::new(&bundle.config, &Probe::load(probe)?.direction, *alpha)?)
        }
    })
}

pub fn eval(a: &EvalArgs) -> Result<Finished> {
    check_n_new(a.n_new)?;
    require(&[&a.runs])?;
    let specs: Vec<RunSpec> = read_json(&a.runs)?;
    if specs.is_empty() {
        return Err(invalid("runspec lists no runs"));
    }
    let mut inputs = vec![a.runs.clone()];
    for s in &specs {
        inputs.push(s.bundle.clone());
        inputs.extend(s.plan.iter().cloned());
    }
    require(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let plans: Vec<Option<InterventionPlan>> =
        specs.iter().map(|s| s.plan.as_deref().map(read_json).transpose()).collect::<detox_core::Result<_>>()?;
    let scoring = Scoring::load(&a.scorer, &a.scoring_bundle, &a.prompts, &a.corpus, a.n_new)?;
    let bundles: Vec<ModelBundle> = specs.iter().map(|s| load_bundle(&s.bundle)).collect::<detox_core::Result<_>>()?;
    let hooks: Vec<Box<dyn ForwardHook>> = plans
        .iter()
        .zip(&bundles)
        .map(|(p, b)| match p {
            Some(plan) => plan_hook(plan, b),
            None => Ok(Box::new(NoHook) as Box<dyn ForwardHook>),
        })
        .collect::<Result<_>>()?;
    let runs: Vec<(String, Subject)> = specs
        .iter()
        .zip(bundles.iter().zip(&hooks))
        .map(|(s, (b, h))| (s.label.clone(), Subject { bundle: b, hook: h.as_ref() }))
        .collect();
    let report = scoring.report(&runs)?;
    report.write(&a.out)?;
    print_rows(&report);
    inputs.extend(scoring.inputs.iter().cloned());
    Ok(Finished {
        inputs,
        outputs: report_paths(&a.out),
        seed: None,
        summary: json!({ "rows": rows_json(&report) }),
        manifest: manifest_path(&a.out, false),
    })
}
