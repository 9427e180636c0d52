use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Deserialize;

use lgmm_core::data::{save_manifest_file, write_pack_file};
use lgmm_core::eval::write_alignment_tsv;
use lgmm_core::{
    evaluate as eval_dataset, generate_synthetic, load_checkpoint, load_dataset, read_pack_file,
    save_checkpoint, train as train_heads, AggregationMode, DirectionMode, Error, FeatureMatrix,
    LossConfig, LossFlags, Manifest, ManifestPair, ProjectionHead, Result, RetrievalResult,
    ScoringConfig, SyntheticConfig, TrainConfig,
};

use crate::{
    AblateArgs, DumpAlignmentArgs, EvaluateArgs, GenSyntheticArgs, GradCheckArgs, HyperArgs,
    PackInspectArgs, TrainArgs, GRAD_CHECK_FAILED,
};

/// Optional hyperparameter overrides read from `--config`. Flags win over
/// file values, file values win over built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    tau: Option<f64>,
    tau_w: Option<f64>,
    tau_kl: Option<f64>,
    lambda: Option<f64>,
    beta: Option<f64>,
    lr: Option<f64>,
    d_hidden: Option<usize>,
    d_shared: Option<usize>,
    mode: Option<String>,
    direction: Option<String>,
}

struct Resolved {
    seed: u64,
    batch_size: usize,
    epochs: usize,
    lr: f64,
    d_hidden: usize,
    d_shared: usize,
    scoring: ScoringConfig,
    loss: LossConfig,
    mode: AggregationMode,
    direction: DirectionMode,
}

fn resolve(hyper: &HyperArgs, base: &TrainConfig) -> Result<Resolved> {
    let file: ConfigFile = match &hyper.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => ConfigFile::default(),
    };
    let pick = |flag: Option<f64>, file: Option<f64>, default: f64| flag.or(file).unwrap_or(default);

    let mode = match hyper_mode(&file)? {
        Some(m) => m,
        None => AggregationMode::Lgmm,
    };
    let direction = match file.direction.as_deref() {
        Some(s) => s.parse()?,
        None => DirectionMode::Directional,
    };
    Ok(Resolved {
        seed: hyper.seed.or(file.seed).unwrap_or(base.seed),
        batch_size: hyper.batch_size.or(file.batch_size).unwrap_or(base.batch_size),
        epochs: hyper.epochs.or(file.epochs).unwrap_or(base.epochs),
        lr: pick(hyper.lr, file.lr, base.lr),
        d_hidden: hyper.d_hidden.or(file.d_hidden).unwrap_or(base.d_hidden),
        d_shared: hyper.d_shared.or(file.d_shared).unwrap_or(base.d_shared),
        scoring: ScoringConfig {
            tau_w: pick(hyper.tau_w, file.tau_w, base.scoring.tau_w),
            lambda: pick(hyper.lambda, file.lambda, base.scoring.lambda),
            epsilon: base.scoring.epsilon,
        },
        loss: LossConfig {
            tau: pick(hyper.tau, file.tau, base.loss.tau),
            beta: pick(hyper.beta, file.beta, base.loss.beta),
            tau_kl: pick(hyper.tau_kl, file.tau_kl, base.loss.tau_kl),
            text_query_second_term: base.loss.text_query_second_term,
        },
        mode,
        direction,
    })
}

fn hyper_mode(file: &ConfigFile) -> Result<Option<AggregationMode>> {
    file.mode.as_deref().map(str::parse).transpose()
}

pub fn gen_synthetic(args: GenSyntheticArgs) -> Result<ExitCode> {
    let defaults = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        vocab_size: args.vocab_size.unwrap_or(defaults.vocab_size),
        dim: args.dim.unwrap_or(defaults.dim),
        items: args.items.unwrap_or(defaults.items),
        events_per_item: args.events_per_item.unwrap_or(defaults.events_per_item),
        frames_per_event: args.frames_per_event.unwrap_or(defaults.frames_per_event),
        words_per_event: args.words_per_event.unwrap_or(defaults.words_per_event),
        noise_sigma: args.noise_sigma.unwrap_or(defaults.noise_sigma),
        hard_negative_fraction: args
            .hard_negative_fraction
            .unwrap_or(defaults.hard_negative_fraction),
        seed: args.hyper.seed.unwrap_or(defaults.seed),
    };
    args.split.parse::<lgmm_core::Split>()?;
    let (dataset, truth) = generate_synthetic(&cfg)?;

    fs::create_dir_all(&args.out)?;
    write_pack_file(args.out.join("audio.lgf"), &dataset.audio)?;
    write_pack_file(args.out.join("text.lgf"), &dataset.text)?;
    let manifest = Manifest {
        split: args.split.clone(),
        audio_pack: "audio.lgf".into(),
        text_pack: "text.lgf".into(),
        pairs: dataset
            .pairs()
            .iter()
            .map(|p| ManifestPair {
                audio_id: p.audio_id.clone(),
                caption_ids: p.caption_ids.clone(),
            })
            .collect(),
    };
    save_manifest_file(args.out.join("manifest.json"), &manifest)?;

    let hard = truth.hard_negatives.iter().flatten().count();
    println!(
        "wrote {} items ({} hard negatives, dim {}, seed {}) to {}",
        dataset.n_pairs(),
        hard,
        cfg.dim,
        cfg.seed,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_config(resolved: &Resolved, flags: LossFlags, final_relu: bool) -> TrainConfig {
    TrainConfig {
        epochs: resolved.epochs,
        batch_size: resolved.batch_size,
        seed: resolved.seed,
        lr: resolved.lr,
        d_hidden: resolved.d_hidden,
        d_shared: resolved.d_shared,
        final_relu,
        scoring: resolved.scoring,
        loss: resolved.loss,
        flags,
    }
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let resolved = resolve(&args.hyper, &TrainConfig::default())?;
    let flags = LossFlags {
        jnt: !args.disable_jnt,
        intra_c: !args.disable_intrac,
    };
    let cfg = train_config(&resolved, flags, !args.no_final_relu);

    let dataset = load_dataset(&args.manifest)?;
    let valid = args.valid_manifest.as_ref().map(load_dataset).transpose()?;
    let output = train_heads(&dataset, valid.as_ref(), &cfg)?;

    let ckpt_path = path_with_suffix(&args.out, ".ckpt");
    let metrics_path = path_with_suffix(&args.out, ".metrics.jsonl");
    save_checkpoint(&ckpt_path, &output.audio_head, &output.text_head, &cfg)?;
    let mut log = BufWriter::new(File::create(&metrics_path)?);
    for epoch in &output.metrics {
        serde_json::to_writer(&mut log, epoch)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    if let Some(last) = output.metrics.last() {
        println!(
            "epoch {}: total {:.6} inter_c {:.6} val_t2a_r1 {:.4}",
            last.epoch, last.total, last.inter_c, last.val_t2a_r1
        );
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(ExitCode::SUCCESS)
}

fn path_with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_heads(
    checkpoint: &Option<PathBuf>,
) -> Result<Option<(ProjectionHead, ProjectionHead, TrainConfig)>> {
    checkpoint
        .as_ref()
        .map(|path| load_checkpoint(path))
        .transpose()
}

fn metric_records(mode: AggregationMode, t2a: &RetrievalResult, a2t: &RetrievalResult) -> String {
    let mut out = String::from("direction\tmode\tk\tvalue\n");
    for (res, name) in [(t2a, "T2A"), (a2t, "A2T")] {
        for (k, v) in [(1, res.r1), (5, res.r5), (10, res.r10)] {
            out.push_str(&format!("{name}\t{mode}\t{k}\t{v}\n"));
        }
    }
    out
}

pub fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let loaded = load_heads(&args.checkpoint)?;
    // The checkpoint's stored scoring config is the default when present;
    // explicit flags and config-file values still win.
    let base = loaded
        .as_ref()
        .map(|(_, _, cfg)| cfg.clone())
        .unwrap_or_default();
    let resolved = resolve(&args.hyper, &base)?;
    let mode = match args.mode.as_deref() {
        Some(s) => s.parse()?,
        None => resolved.mode,
    };
    let direction = match args.direction.as_deref() {
        Some(s) => s.parse()?,
        None => resolved.direction,
    };

    let dataset = load_dataset(&args.manifest)?;
    let heads = loaded.as_ref().map(|(a, t, _)| (a, t));
    let (t2a, a2t) = eval_dataset(&dataset, heads, &resolved.scoring, mode, direction)?;

    let records = metric_records(mode, &t2a, &a2t);
    print!("{records}");
    if let Some(path) = &args.out {
        fs::write(path, &records)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(args: AblateArgs) -> Result<ExitCode> {
    let resolved = resolve(&args.hyper, &ablate_defaults())?;
    let dataset = match &args.manifest {
        Some(path) => load_dataset(path)?,
        None => {
            let synth = SyntheticConfig { seed: resolved.seed, ..SyntheticConfig::default() };
            generate_synthetic(&synth)?.0
        }
    };

    let mut table = String::from(
        "config\tinter_c_first\tinter_c_last\tt2a_r1\tt2a_r5\tt2a_r10\ta2t_r1\ta2t_r5\ta2t_r10\n",
    );
    for (name, flags) in LossFlags::ABLATION_GRID {
        let cfg = train_config(&resolved, flags, true);
        let output = train_heads(&dataset, None, &cfg)?;
        let (t2a, a2t) = eval_dataset(
            &dataset,
            Some((&output.audio_head, &output.text_head)),
            &resolved.scoring,
            AggregationMode::Lgmm,
            resolved.direction,
        )?;
        let first = output.metrics.first().map(|m| m.inter_c).unwrap_or(f64::NAN);
        let last = output.metrics.last().map(|m| m.inter_c).unwrap_or(f64::NAN);
        table.push_str(&format!(
            "{name}\t{first:.6}\t{last:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            t2a.r1, t2a.r5, t2a.r10, a2t.r1, a2t.r5, a2t.r10
        ));
    }
    print!("{table}");
    if let Some(path) = &args.out {
        fs::write(path, &table)?;
    }
    Ok(ExitCode::SUCCESS)
}

// Desk-scale ablation defaults: the paper-scale learning rate cannot move
// the small heads measurably within 30 epochs of 64 items.
fn ablate_defaults() -> TrainConfig {
    TrainConfig { seed: 7, lr: 1e-3, ..TrainConfig::default() }
}

pub fn dump_alignment(args: DumpAlignmentArgs) -> Result<ExitCode> {
    let dataset = load_dataset(&args.manifest)?;
    let loaded = load_heads(&args.checkpoint)?;
    let base = loaded
        .as_ref()
        .map(|(_, _, cfg)| cfg.clone())
        .unwrap_or_default();
    let resolved = resolve(&args.hyper, &base)?;

    let (query_id, query_raw, query_is_text) = match (&args.query_audio, &args.query_text) {
        (Some(id), None) => (
            id.clone(),
            dataset
                .audio
                .get(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?
                .clone(),
            false,
        ),
        (None, Some(id)) => (
            id.clone(),
            dataset
                .text
                .get(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?
                .clone(),
            true,
        ),
        _ => {
            return Err(Error::Config(
                "dump-alignment needs exactly one of --query-audio or --query-text".into(),
            ))
        }
    };

    // Contexts come from the opposite modality.
    let context_pack = if query_is_text { &dataset.audio } else { &dataset.text };
    let context_ids: Vec<String> = if args.contexts.is_empty() {
        context_pack.iter().map(|(id, _)| id.to_string()).collect()
    } else {
        args.contexts.clone()
    };

    let project_with = |feats: &FeatureMatrix, text_side: bool| -> Result<FeatureMatrix> {
        match &loaded {
            Some((audio_head, text_head, _)) => {
                lgmm_core::project(feats, if text_side { text_head } else { audio_head })
            }
            None => Ok(feats.clone()),
        }
    };

    let query = project_with(&query_raw, query_is_text)?;
    let mut contexts = Vec::with_capacity(context_ids.len());
    for id in &context_ids {
        let raw = context_pack
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        contexts.push((id.clone(), project_with(raw, !query_is_text)?));
    }

    let dump = lgmm_core::eval::dump_alignment(&query_id, &query, &contexts, &resolved.scoring)?;
    let mut buf = Vec::new();
    write_alignment_tsv(&dump, &resolved.scoring, &mut buf)?;
    match &args.out {
        Some(path) => fs::write(path, &buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    let resolved = resolve(&args.hyper, &TrainConfig { seed: 0, ..TrainConfig::default() })?;
    let suite = lgmm_core::autograd::gradient_check_suite(resolved.seed, &resolved.scoring, &resolved.loss)?;

    let mut worst: f64 = 0.0;
    let mut all_passed = true;
    for (name, report) in &suite {
        let err = report.max_rel_err();
        worst = worst.max(err);
        all_passed &= report.passed;
        let detail = report
            .worst()
            .map(|w| format!("{} coord {}", w.name, w.worst_coord))
            .unwrap_or_default();
        println!(
            "{name}: max relative error {err:.3e} ({detail}) {}",
            if report.passed { "ok" } else { "FAILED" }
        );
    }
    println!("worst relative error: {worst:.3e}");
    println!("{}", if all_passed { "PASS" } else { "FAIL" });
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(GRAD_CHECK_FAILED)
    })
}

pub fn pack_inspect(args: PackInspectArgs) -> Result<ExitCode> {
    let pack = read_pack_file(&args.pack)?;
    // Write through a fallible handle: output may be piped into a pager
    // that closes early.
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "pack: {}", args.pack.display())?;
    writeln!(out, "version: {}", lgmm_core::data::PACK_VERSION)?;
    writeln!(out, "records: {}", pack.len())?;
    match pack.dim() {
        Some(d) => writeln!(out, "dim: {d}")?,
        None => writeln!(out, "dim: (empty pack)")?,
    }
    writeln!(out, "id\trows\tdim")?;
    for (id, feats) in pack.iter() {
        writeln!(out, "{id}\t{}\t{}", feats.rows(), feats.dim())?;
    }
    Ok(ExitCode::SUCCESS)
}
