use std::path::{Path, PathBuf};

use biaslab::data::corpus::{load_world, world_path};
use biaslab::data::{
    generate_preference_corpus, generate_vit_corpus, load_corpus, validate_corpus, Corpus,
    CorpusHeader, CorpusKind, Records,
};
use biaslab::eval::{generate_descriptions, EvalReport};
use biaslab::model::{Model, ParamSnapshot};
use biaslab::record::{file_sha256, read_records, write_atomic, write_lines};
use biaslab::refcache::{CacheFile, LiveReference, ReferenceSource};
use biaslab::report::{summarize, to_table};
use biaslab::rng::rng_stream;
use biaslab::train::{
    dpo_variants, grad_check_dpo, grad_check_vit, train_dpo, train_vit, vit_variants, GradCheckSpec,
};
use biaslab::types::{BiasRecord, MultimodalExample, Phase, TaxonomyLabel};
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::ManifestBuilder;

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Missing(format!("{what} is required (flag or config key)")))
}

fn save_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    Ok(write_atomic(path, text.as_bytes())?)
}

fn save_corpus(
    cfg: &RunConfig,
    corpus: &Corpus,
    name: &str,
    m: &mut ManifestBuilder,
) -> Result<(), CliError> {
    let path = cfg.out.join(name);
    corpus.save(&path)?;
    let wpath = world_path(&path);
    write_atomic(&wpath, cfg.world.to_json().as_bytes())?;
    m.output(&path)?;
    m.output(&wpath)
}

/// Loads a corpus and checks it against its sibling world document when present.
fn open_corpus(path: &Path, m: &mut ManifestBuilder) -> Result<Corpus, CliError> {
    m.input(path)?;
    let corpus = load_corpus(path)?;
    let report = validate_corpus(&corpus);
    if let Some(v) = report.violations.first() {
        return Err(CliError::Config(format!(
            "{}: {} violation(s); first at line {}: {}",
            path.display(),
            report.violations.len(),
            v.line,
            v.message
        )));
    }
    let wpath = world_path(path);
    if wpath.exists() {
        m.input(&wpath)?;
        let world = load_world(&wpath)?;
        if world.hash() != corpus.header.world_hash {
            return Err(biaslab::Error::HashMismatch {
                expected: corpus.header.world_hash.clone(),
                found: world.hash(),
            }
            .into());
        }
    }
    Ok(corpus)
}

fn open_snapshot(path: &Path, m: &mut ManifestBuilder) -> Result<ParamSnapshot, CliError> {
    m.input(path)?;
    Ok(ParamSnapshot::load(path)?)
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("gen-data", cfg, &cfg.out);
    let g = &cfg.gen_data;
    // One stream per index: the evaluation split continues the training sequence.
    let mut all = generate_vit_corpus(&cfg.world, g.n_vit + g.n_eval, cfg.seed)?;
    let eval = all.split_off(g.n_vit);
    let vit = Corpus::vit(
        CorpusHeader::new(CorpusKind::Vit, all.len(), cfg.seed, &cfg.world),
        all,
    );
    let ev = Corpus::vit(
        CorpusHeader::new(CorpusKind::Vit, eval.len(), cfg.seed, &cfg.world),
        eval,
    );
    let pairs = generate_preference_corpus(&cfg.world, g.n_pref, cfg.seed)?;
    let pref = Corpus::preference(
        CorpusHeader::new(CorpusKind::Preference, pairs.len(), cfg.seed, &cfg.world),
        pairs,
    );
    save_corpus(cfg, &vit, "vit.jsonl", &mut m)?;
    save_corpus(cfg, &ev, "eval.jsonl", &mut m)?;
    save_corpus(cfg, &pref, "pref.jsonl", &mut m)?;
    m.finish()?;
    println!(
        "wrote {} VIT, {} eval and {} preference records to {}",
        vit.len(),
        ev.len(),
        pref.len(),
        cfg.out.display()
    );
    Ok(())
}

pub fn cache_ref(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.cache_ref;
    let mut m = ManifestBuilder::new("cache-ref", cfg, &cfg.out);
    let corpus_path = required(&c.corpus, "cache_ref.corpus")?;
    let corpus = open_corpus(corpus_path, &mut m)?;
    let snapshot = match &c.snapshot {
        Some(p) => open_snapshot(p, &mut m)?,
        None => {
            let snap = ParamSnapshot::capture(&Model::<f32>::init(cfg.model.clone(), cfg.seed)?);
            let path = cfg.out.join("reference.snap");
            snap.save(&path)?;
            m.output(&path)?;
            snap
        }
    };
    let cache = CacheFile::build(&corpus, &file_sha256(corpus_path)?, &snapshot, &c.modes)?;
    let out = c.output.clone().unwrap_or_else(|| {
        let stem = corpus_path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        cfg.out.join(format!("{stem}.cache"))
    });
    cache.save(&out)?;
    m.output(&out)?;
    m.finish()?;
    println!(
        "cached {} entries under snapshot {} to {}",
        cache.len(),
        &snapshot.hash()[..12],
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let t = &cfg.train;
    let tc = &t.config;
    let mut m = ManifestBuilder::new(command, cfg, &cfg.out);
    let corpus_path = required(&t.corpus, "train.corpus")?;
    let corpus = open_corpus(corpus_path, &mut m)?;
    let init = open_snapshot(required(&t.reference, "train.reference")?, &mut m)?;

    let live;
    let cache;
    let reference: &dyn ReferenceSource = match &tc.cache_path {
        Some(p) => {
            m.input(p)?;
            cache = CacheFile::load(p)?;
            cache.verify(init.hash(), Some(&file_sha256(corpus_path)?))?;
            &cache
        }
        None => {
            live = LiveReference::<f32>::new(&init)?;
            &live
        }
    };
    let outcome = match (tc.phase, &corpus.records) {
        (Phase::Vit, Records::Vit(ex)) => train_vit(tc, ex, &init, reference)?,
        (Phase::Dpo, Records::Preference(p)) => train_dpo(tc, p, &init, reference)?,
        (phase, _) => {
            return Err(CliError::Config(format!(
                "{} holds a {:?} corpus, which the {phase} phase cannot train on",
                corpus_path.display(),
                corpus.header.corpus
            )))
        }
    };
    let stem = match tc.phase {
        Phase::Vit => "vit",
        Phase::Dpo => "dpo",
    };
    let snap_path = tc
        .snapshot_path
        .clone()
        .unwrap_or_else(|| cfg.out.join(format!("{stem}.snap")));
    let log_path = tc
        .log_path
        .clone()
        .unwrap_or_else(|| cfg.out.join(format!("{stem}.log.jsonl")));
    outcome.snapshot.save(&snap_path)?;
    write_lines(&log_path, None, &outcome.log)?;
    m.output(&snap_path)?;
    m.output(&log_path)?;
    m.finish()?;
    print!("{}", to_table(&summarize(&outcome.log, cfg.report.tail)));
    println!(
        "snapshot {} -> {}",
        &outcome.snapshot.hash()[..12],
        snap_path.display()
    );
    Ok(())
}

pub fn grad_check(cfg: &RunConfig) -> Result<(), CliError> {
    let g = &cfg.grad_check;
    let mut m = ManifestBuilder::new("grad-check", cfg, &cfg.out);
    let corpus = open_corpus(required(&g.corpus, "grad_check.corpus")?, &mut m)?;
    let ref_snap = open_snapshot(required(&g.reference, "grad_check.reference")?, &mut m)?;
    let reference = LiveReference::<f64>::new(&ref_snap)?;
    let policy: Model<f64> = match &g.policy {
        Some(p) => open_snapshot(p, &mut m)?.restore(Some(ref_snap.config_hash()))?,
        None => {
            // Away from the reference so the absolute-value kinks at B = 0 are not probed.
            let mut model: Model<f64> = ref_snap.restore(None)?;
            let noise =
                Normal::new(0.0, g.perturbation).map_err(|e| CliError::Config(e.to_string()))?;
            let mut rng = rng_stream(cfg.seed, "grad-check/perturb");
            for p in model.params_mut() {
                *p += noise.sample(&mut rng);
            }
            model
        }
    };
    let spec = GradCheckSpec {
        coords: g.coords,
        h: g.h,
        tolerance: g.tolerance,
        seed: cfg.seed,
        ..GradCheckSpec::default()
    };
    let report = match &corpus.records {
        Records::Vit(ex) => {
            let batch: Vec<&MultimodalExample> = ex.iter().take(g.examples).collect();
            grad_check_vit(&policy, &reference, &batch, &vit_variants(g.alpha), &spec)?
        }
        Records::Preference(p) => {
            let batch: Vec<_> = p.iter().take(g.examples).collect();
            grad_check_dpo(
                &policy,
                &reference,
                &batch,
                &dpo_variants(g.beta, g.gamma),
                &spec,
            )?
        }
    };
    let path = cfg.out.join("grad-check.json");
    save_json(&path, &report)?;
    m.output(&path)?;
    m.finish()?;
    for e in &report.entries {
        println!(
            "{:<24} {:>4} coords  max rel err {:.3e}  {}",
            e.objective,
            e.coords_checked,
            e.max_rel_err,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    if !report.passed() {
        return Err(CliError::GradCheckFailed(report.max_rel_err()));
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let e = &cfg.eval;
    let mut m = ManifestBuilder::new("eval", cfg, &cfg.out);
    let corpus = open_corpus(required(&e.corpus, "eval.corpus")?, &mut m)?;
    let snap = open_snapshot(required(&e.snapshot, "eval.snapshot")?, &mut m)?;
    let model: Model<f32> = snap.restore(None)?;
    let (examples, labels): (Vec<MultimodalExample>, Vec<TaxonomyLabel>) = match &corpus.records {
        Records::Vit(ex) => (ex.clone(), Vec::new()),
        Records::Preference(p) => (
            p.iter()
                .map(|x| MultimodalExample {
                    example_id: x.pair_id.clone(),
                    visual: x.visual.clone(),
                    instruction: x.instruction.clone(),
                    response: x.chosen.clone(),
                    gt_objects: x.gt_objects.clone(),
                    annotations: None,
                })
                .collect(),
            p.iter()
                .flat_map(|x| x.annotations.iter().cloned())
                .collect(),
        ),
    };
    let records = generate_descriptions(&model, &examples, &cfg.world, e.end_token, e.max_len)?;
    let report = EvalReport::compute(&records, &labels, e.judge_score)?;
    let gen_path = cfg.out.join("generations.jsonl");
    let report_path = cfg.out.join("eval.json");
    write_lines(&gen_path, None, &records)?;
    save_json(&report_path, &report)?;
    m.output(&gen_path)?;
    m.output(&report_path)?;
    m.finish()?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let r = &cfg.report;
    if r.logs.is_empty() {
        return Err(CliError::Missing(
            "report needs at least one dynamics log".into(),
        ));
    }
    let mut m = ManifestBuilder::new("report", cfg, &cfg.out);
    let mut all = Vec::new();
    for path in &r.logs {
        m.input(path)?;
        let log: Vec<BiasRecord> = read_records(path)?;
        for rec in &log {
            rec.validate()?;
        }
        let summary = summarize(&log, r.tail);
        println!("{}", path.display());
        print!("{}", to_table(&summary));
        all.push(serde_json::json!({ "log": path.display().to_string(), "phases": summary }));
    }
    let path = cfg.out.join("report.json");
    save_json(&path, &all)?;
    m.output(&path)?;
    m.finish()?;
    Ok(())
}
