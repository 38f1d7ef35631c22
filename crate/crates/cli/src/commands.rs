use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;

use ctl::config::RunConfig;
use ctl::dataset::{generate_ctl_from_file, split_scenes, synth_dataset, write_split_file, CtlManifest, Split, SynthParams};
use ctl::eval::{
    attention_pgm, run_ablations, EvalReport, LinearMetric, LinearMetricConfig, LinearMetricScorer, ModelScorer,
    PopularityScorer, RandomScorer, RawFeatureScorer, Scorer, ScorerKind,
};
use ctl::features::write_cache;
use ctl::model::Variant;
use ctl::pipeline::{
    attention_examples, compute_features, evaluate_model, evaluate_scorer, make_backbone, write_metadata,
    write_output, BackboneKind, SceneView, Workspace,
};
use ctl::training::{read_checkpoint, write_checkpoint, Checkpoint, Trainer};

use crate::{Cli, Command, DataArgs, GlobalArgs, ScorerArgs, TrainArgs};

/// Bad invocation; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Generate { stl, out, mode, expand, min_area, exclude, verify_images } => {
            set_path(&mut cfg, "stl_manifest", &stl);
            set(&mut cfg, "crop_mode", &mode)?;
            set(&mut cfg, "expand_frac", &expand)?;
            set(&mut cfg, "min_area_frac", &min_area)?;
            set(&mut cfg, "excluded_categories", &exclude)?;
            generate(&cfg, &out, verify_images)
        }
        Command::Split { ctl, out, seed, ratios } => {
            set_path(&mut cfg, "ctl_manifest", &ctl);
            set(&mut cfg, "data_seed", &seed)?;
            if let Some(r) = ratios {
                let parts: Vec<&str> = r.split(',').collect();
                if parts.len() != 3 {
                    return Err(usage(format!("--ratios expects three comma-separated fractions, got {r:?}")));
                }
                for (key, v) in ["split_train", "split_val", "split_test"].into_iter().zip(parts) {
                    cfg.set(key, v)?;
                }
            }
            split(&cfg, &out)
        }
        Command::Synth { out, scenes, products, categories, paste, seed } => {
            set(&mut cfg, "synth_scenes", &scenes)?;
            set(&mut cfg, "synth_products", &products)?;
            set(&mut cfg, "synth_categories", &categories)?;
            if paste {
                cfg.set("synth_paste", "true")?;
            }
            set(&mut cfg, "data_seed", &seed)?;
            synth(&cfg, &out)
        }
        Command::Features { ctl, out, backbone_seed } => {
            set_path(&mut cfg, "ctl_manifest", &ctl);
            set(&mut cfg, "backbone_seed", &backbone_seed)?;
            features(&cfg, &out)
        }
        Command::Train { data, train: args, out_dir, resume, stop_after } => {
            apply_data(&mut cfg, &data);
            apply_train(&mut cfg, &args)?;
            set_path(&mut cfg, "checkpoint_dir", &out_dir);
            train(&cfg, resume, stop_after)
        }
        Command::Ablate { data, train: args, out } => {
            apply_data(&mut cfg, &data);
            apply_train(&mut cfg, &args)?;
            ablate(&cfg, &out)
        }
        Command::Eval { data, checkpoint, out } => {
            apply_data(&mut cfg, &data);
            let args = ScorerArgs { checkpoint: Some(checkpoint), scorer: None };
            let report = scorer_report(&mut cfg, &args)?;
            finish_report(&cfg, "eval", &out, &report)
        }
        Command::Baseline { data, scorer, out } => {
            apply_data(&mut cfg, &data);
            let args = ScorerArgs { checkpoint: None, scorer: Some(scorer) };
            let report = scorer_report(&mut cfg, &args)?;
            finish_report(&cfg, "baseline", &out, &report)
        }
        Command::Topk { data, scorer, k, out } => {
            apply_data(&mut cfg, &data);
            set(&mut cfg, "topk", &k)?;
            let report = scorer_report(&mut cfg, &scorer)?;
            write_output(&out, report.topk_csv().as_bytes())?;
            write_metadata(&out, "topk", &cfg)?;
            for (k, acc) in &report.topk {
                println!("top-{k}: {acc:.4}");
            }
            Ok(())
        }
        Command::Attention { data, checkpoint, out, maps } => {
            apply_data(&mut cfg, &data);
            attention(&mut cfg, &checkpoint, &out, maps.as_deref())
        }
    }
}

fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            require_inputs(&[path])?;
            RunConfig::from_file(path)?
        }
        None => RunConfig::default(),
    };
    for (k, v) in &global.overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn set<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn set_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) {
    if let Some(p) = value {
        cfg.paths.insert(key.to_string(), p.to_string_lossy().into_owned());
    }
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    set_path(cfg, "ctl_manifest", &data.ctl);
    set_path(cfg, "split_file", &data.split);
    if data.features.is_some() {
        set_path(cfg, "feature_cache", &data.features);
        cfg.backbone = BackboneKind::Precomputed;
    }
}

fn apply_train(cfg: &mut RunConfig, t: &TrainArgs) -> Result<()> {
    set(cfg, "epochs", &t.epochs)?;
    set(cfg, "batch_size", &t.batch_size)?;
    set(cfg, "margin", &t.margin)?;
    set(cfg, "learning_rate", &t.learning_rate)?;
    set(cfg, "embed_dim", &t.embed_dim)?;
    set(cfg, "variant", &t.variant)?;
    set(cfg, "train_seed", &t.train_seed)?;
    set(cfg, "train_view", &t.view)?;
    Ok(())
}

fn require_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(usage(format!("input path {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn required_input(cfg: &RunConfig, key: &str, flag: &str) -> Result<PathBuf> {
    let path = cfg
        .path(key)
        .ok_or_else(|| usage(format!("{flag} is required (or set {key} in the config)")))?
        .to_path_buf();
    require_inputs(&[&path])?;
    Ok(path)
}

fn distinct_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    if inputs.iter().any(|i| canon(i) == canon(out)) {
        return Err(usage(format!("output {} would overwrite an input", out.display())));
    }
    Ok(())
}

fn open_workspace(cfg: &RunConfig) -> Result<Workspace> {
    required_input(cfg, "ctl_manifest", "--ctl")?;
    required_input(cfg, "split_file", "--split")?;
    if cfg.backbone == BackboneKind::Precomputed {
        required_input(cfg, "feature_cache", "--features")?;
    }
    Ok(Workspace::open(cfg)?)
}

fn generate(cfg: &RunConfig, out: &Path, verify: bool) -> Result<()> {
    let stl = required_input(cfg, "stl_manifest", "--stl")?;
    distinct_output(out, &[&stl])?;
    cfg.validate()?;
    let manifest = generate_ctl_from_file(&stl, &cfg.crop, verify)?;
    manifest.write(out)?;
    write_metadata(out, "generate", cfg)?;
    let s = &manifest.stats;
    println!("input pairs: {}", s.input_pairs);
    println!("kept: {} ({} scenes, {} products, {} categories)", s.kept, s.scenes, s.products, manifest.categories.len());
    for (reason, n) in &s.discarded {
        println!("discarded ({reason:?}): {n}");
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn split(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ctl = required_input(cfg, "ctl_manifest", "--ctl")?;
    distinct_output(out, &[&ctl])?;
    cfg.validate()?;
    let manifest = CtlManifest::read(&ctl)?;
    let assignment = split_scenes(&manifest.examples, cfg.split_ratios, cfg.data_seed)?;
    write_split_file(out, &assignment)?;
    write_metadata(out, "split", cfg)?;
    for s in Split::ALL {
        println!("{s}: {} scenes, {} pairs", assignment.scene_count(s), assignment.select(&manifest.examples, s).len());
    }
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let params = SynthParams { seed: cfg.data_seed, ..cfg.synth.clone() };
    let result = synth_dataset(&params, out)?;
    write_metadata(&result.manifest_path, "synth", cfg)?;
    println!(
        "{} pairs over {} scenes, {} products -> {}",
        result.pairs.len(),
        result.scene_colors.len(),
        result.products.len(),
        result.manifest_path.display()
    );
    Ok(())
}

fn features(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ctl = required_input(cfg, "ctl_manifest", "--ctl")?;
    distinct_output(out, &[&ctl])?;
    if cfg.backbone != BackboneKind::Toy {
        return Err(usage("features extracts with the toy backbone; set backbone=toy"));
    }
    cfg.validate()?;
    let manifest = CtlManifest::read(&ctl)?;
    let backbone = make_backbone(cfg, None)?;
    let store = compute_features(&manifest, &backbone)?;
    write_cache(out, &cfg.spec, &store)?;
    write_metadata(out, "features", cfg)?;
    println!("{} images -> {}", store.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let dir = cfg
        .path("checkpoint_dir")
        .ok_or_else(|| usage("--out-dir is required (or set checkpoint_dir in the config)"))?
        .to_path_buf();
    let ws = open_workspace(cfg)?;
    let corpus = ws.corpus(cfg.train_view)?;
    let data = ws.train_data(&corpus);
    info!(
        "training {} on {} pairs ({} validation), {} view",
        cfg.train.variant,
        data.train.len(),
        data.val.len(),
        cfg.train_view
    );
    for (category, n) in ctl::training::category_counts(&corpus, &data.train) {
        info!("category {category}: {n} training pairs");
    }
    let (last_path, best_path) = (dir.join("last.ckpt"), dir.join("best.ckpt"));
    let mut trainer = if resume {
        require_inputs(&[&last_path])?;
        let best = if best_path.exists() { Some(read_checkpoint(&best_path)?) } else { None };
        Trainer::resume(read_checkpoint(&last_path)?, best, data)?
    } else {
        Trainer::new(cfg.train.clone(), data)?
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    if let Some(stop) = stop_after {
        while !trainer.is_finished() && trainer.epoch() < stop {
            trainer.run_epoch()?;
        }
        if !trainer.is_finished() {
            let last = trainer.checkpoint(trainer.last_validation());
            write_checkpoint(&last_path, &last)?;
            write_metadata(&last_path, "train", cfg)?;
            if let Some(best) = trainer.best() {
                write_checkpoint(&best_path, best)?;
                write_metadata(&best_path, "train", cfg)?;
            }
            println!("stopped after epoch {} -> {}", trainer.epoch(), last_path.display());
            return Ok(());
        }
    }
    let outcome = trainer.run()?;

    for (path, ckpt) in [(&best_path, &outcome.best), (&last_path, &outcome.last)] {
        write_checkpoint(path, ckpt)?;
        write_metadata(path, "train", cfg)?;
    }
    let history_path = dir.join("history.json");
    let mut history = serde_json::to_string_pretty(&outcome.history)?;
    history.push('\n');
    write_output(&history_path, history.as_bytes())?;
    write_metadata(&history_path, "train", cfg)?;
    println!(
        "best epoch {} (validation accuracy {}) -> {}",
        outcome.best.epoch,
        outcome.best.val_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        best_path.display()
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ws = open_workspace(cfg)?;
    let corpus = ws.corpus(SceneView::Cropped)?;
    let test = ws.test_set(&corpus)?;
    let rows = run_ablations(&cfg.train, &ws.train_data(&corpus), &test.questions, &Variant::ALL)?;
    let mut json = serde_json::to_string_pretty(&rows)?;
    json.push('\n');
    write_output(out, json.as_bytes())?;
    write_metadata(out, "ablate", cfg)?;
    println!("variant  accuracy  best_epoch  val_accuracy  uniform_attention");
    for r in &rows {
        println!(
            "{:<8} {:>8.4} {:>11} {:>13.4} {:>18}",
            r.variant.as_str(),
            r.accuracy,
            r.best_epoch,
            r.val_accuracy,
            r.uniform_attention
        );
    }
    Ok(())
}

fn load_model(cfg: &mut RunConfig, path: &Path) -> Result<Checkpoint> {
    require_inputs(&[path])?;
    let ckpt = read_checkpoint(path)?;
    cfg.train = ckpt.config.clone();
    Ok(ckpt)
}

fn check_categories(ckpt: &Checkpoint, corpus: &ctl::corpus::Corpus) -> Result<()> {
    let names: Vec<&str> = corpus.categories.iter().map(|c| c.name.as_str()).collect();
    if ckpt.categories.iter().map(String::as_str).ne(names.iter().copied()) {
        return Err(ctl::Error::Shape(format!(
            "checkpoint categories {:?} differ from manifest categories {names:?}",
            ckpt.categories
        ))
        .into());
    }
    Ok(())
}

/// Report for a checkpoint or a named baseline on cropped test scenes.
fn scorer_report(cfg: &mut RunConfig, args: &ScorerArgs) -> Result<EvalReport> {
    let kind: ScorerKind = match (&args.checkpoint, &args.scorer) {
        (Some(_), _) => ScorerKind::Model,
        (None, Some(name)) => name.parse()?,
        (None, None) => return Err(usage("one of --checkpoint or --scorer is required")),
    };
    let ckpt = match (&args.checkpoint, kind) {
        (Some(path), _) => Some(load_model(cfg, path)?),
        (None, ScorerKind::Model) => return Err(usage("--scorer model needs --checkpoint")),
        (None, _) => None,
    };
    let ws = open_workspace(cfg)?;
    let corpus = ws.corpus(SceneView::Cropped)?;
    let test = ws.test_set(&corpus)?;
    if let Some(ckpt) = &ckpt {
        check_categories(ckpt, &corpus)?;
        return Ok(evaluate_model(&ckpt.head, ckpt.config.variant, &corpus, &ws.data.manifest, &test, cfg)?);
    }

    let fit_corpus = if cfg.train_view == SceneView::Cropped { None } else { Some(ws.corpus(cfg.train_view)?) };
    let fit_corpus = fit_corpus.as_ref().unwrap_or(&corpus);
    let train_pairs = ws.pairs(fit_corpus, Split::Train);
    let metric;
    let scorer: Box<dyn Scorer + '_> = match kind {
        ScorerKind::Popularity => Box::new(PopularityScorer::fit(&corpus, &train_pairs)),
        ScorerKind::Rawfeature => Box::new(RawFeatureScorer::new(&corpus)),
        ScorerKind::LinearMetric => {
            let t = &cfg.train;
            let lm = LinearMetricConfig {
                margin: t.margin,
                batch_size: t.batch_size,
                epochs: t.epochs,
                adam: t.adam,
                seed: t.seed,
            };
            metric = LinearMetric::fit(fit_corpus, &train_pairs, &lm)?;
            Box::new(LinearMetricScorer { metric: &metric, corpus: &corpus })
        }
        ScorerKind::Random => Box::new(RandomScorer { seed: cfg.eval_seed }),
        ScorerKind::Model => unreachable!("model scorers return above"),
    };
    let name = args.scorer.as_deref().unwrap_or("model");
    Ok(evaluate_scorer(name, scorer.as_ref(), &corpus, &test, cfg))
}

fn finish_report(cfg: &RunConfig, command: &str, out: &Path, report: &EvalReport) -> Result<()> {
    write_output(out, report.to_json().as_bytes())?;
    write_metadata(out, command, cfg)?;
    print!("{}", report.to_text());
    Ok(())
}

fn attention(cfg: &mut RunConfig, checkpoint: &Path, out: &Path, maps: Option<&Path>) -> Result<()> {
    let args = ScorerArgs { checkpoint: Some(checkpoint.to_path_buf()), scorer: None };
    let report = scorer_report(cfg, &args)?;
    let summary = report.attention.as_ref().expect("model reports carry attention");
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    write_output(out, json.as_bytes())?;
    write_metadata(out, "attention", cfg)?;
    println!(
        "top-1 hit rate {:.4} (random {:.4}), top-3 hit rate {:.4} (random {:.4})",
        summary.top1.rate(),
        summary.random_top1_analytic,
        summary.top3.rate(),
        summary.random_top3_analytic
    );

    if let Some(dir) = maps {
        let ckpt = read_checkpoint(checkpoint)?;
        let ws = open_workspace(cfg)?;
        let corpus = ws.corpus(SceneView::Cropped)?;
        let pairs = ws.pairs(&corpus, Split::Test);
        let scorer = ModelScorer::for_pairs(&ckpt.head, &corpus, ckpt.config.variant, &pairs)?;
        let (w, h) = (corpus.spec.w, corpus.spec.h);
        for (i, ex) in attention_examples(&ws.data.manifest, &pairs)?.iter().enumerate() {
            let scene = &ws.data.manifest.examples[pairs[i].example].pair.scene_id;
            let name = format!("{i:04}-{scene}-{}.pgm", corpus.categories[ex.category].name);
            write_output(&dir.join(name), &attention_pgm(&scorer.attention(ex.scene, ex.category), w, h))?;
        }
        info!("wrote {} attention maps to {}", pairs.len(), dir.display());
    }
    Ok(())
}
