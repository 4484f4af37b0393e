use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use dualseg_core::trainer::{predict_videos, train as run_training, TrainError, UnknownArm};
use dualseg_core::{
    ablate, generate, load_dataset, parse_arms, write_dataset, Corpus, DataError, EditAggregation,
    FeatureFormat, LabelSequence, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::config::CliConfig;
use crate::error::CliError;
use crate::gradcheck;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::ConfigInvalid { key, reason } => {
            CliError::config(format!("invalid config `data.{key}`: {reason}"))
        }
        other => CliError::io(other.to_string()),
    }
}

fn train_config_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => CliError::new(CliError::TRAIN, e.to_string()),
        TrainError::InvalidConfig { key, reason } => {
            CliError::config(format!("invalid config `train.{key}`: {reason}"))
        }
        TrainError::Loss(l) => CliError::config(format!("{l} (under `train.loss`)")),
        TrainError::Model(m) => CliError::config(format!("{m} (under `train.backbone`)")),
        other => CliError::new(CliError::TRAIN, other.to_string()),
    }
}

fn validate_train(cfg: &TrainConfig) -> Result<(), CliError> {
    cfg.validate().map_err(train_config_error)?;
    if cfg.shape_loss_never_active() {
        eprintln!(
            "warning: loss.e_start = {} >= epochs = {}; the shape loss never activates",
            cfg.loss.e_start, cfg.epochs
        );
    }
    Ok(())
}

fn corpus_for(cfg: &CliConfig, data: Option<&Path>) -> Result<Corpus, CliError> {
    match data {
        Some(root) => load_dataset(root).map_err(data_error),
        None => generate(&cfg.data).map_err(data_error),
    }
}

pub fn gen_data(
    mut cfg: CliConfig,
    out: &Path,
    seed: Option<u64>,
    format: FeatureFormat,
) -> Result<(), CliError> {
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.data.validate().map_err(data_error)?;
    let corpus = generate(&cfg.data).map_err(data_error)?;
    create_dir(out)?;
    write_dataset(&corpus, out, format).map_err(data_error)?;
    let manifest = json!({
        "config": cfg.to_json(),
        "config_sha256": cfg.sha256(),
        "seed": cfg.data.seed,
        "num_classes": corpus.num_classes(),
        "feature_dim": corpus.feature_dim,
        "train": corpus.train.iter().map(|v| &v.id).collect::<Vec<_>>(),
        "test": corpus.test.iter().map(|v| &v.id).collect::<Vec<_>>(),
    });
    write_json(&out.join(&cfg.outputs.manifest), &manifest)?;
    println!(
        "wrote {} train / {} test videos to {}",
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    mut cfg: CliConfig,
    data: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    if let Some(s) = seed {
        cfg.train = cfg.train.with_seed(s);
    }
    let corpus = corpus_for(&cfg, data)?;
    cfg.train = cfg.train.resolved_for(&corpus);
    validate_train(&cfg.train)?;
    let (params, log) = run_training(&corpus, &cfg.train).map_err(train_config_error)?;

    create_dir(out)?;
    let hash = cfg.sha256();
    let outputs = &cfg.outputs;
    let ckpt_path = out.join(&outputs.checkpoint);
    let file = fs::File::create(&ckpt_path)
        .map_err(|e| CliError::io(format!("{}: {e}", ckpt_path.display())))?;
    params
        .write_checkpoint(BufWriter::new(file), &cfg.to_json())
        .map_err(|e| CliError::io(e.to_string()))?;

    write_json(
        &out.join(&outputs.runlog),
        &json!({
            "cli_config": cfg.to_json(),
            "config_sha256": hash,
            "seed": cfg.train.seed,
            "run": log,
        }),
    )?;

    let mut csv = format!(
        "# config_sha256={hash} seed={}\nepoch,F1@10,F1@25,F1@50,Edit,Acc\n",
        cfg.train.seed
    );
    for e in &log.evals {
        let s = e.report.summary();
        csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            e.epoch, s[0], s[1], s[2], s[3], s[4]
        ));
    }
    fs::write(out.join(&outputs.metrics), csv)?;

    let pred_dir = out.join(&outputs.predictions);
    create_dir(&pred_dir)?;
    let videos = if corpus.test.is_empty() {
        &corpus.train
    } else {
        &corpus.test
    };
    let preds = predict_videos(&cfg.train.backbone, &params, videos).map_err(train_config_error)?;
    for (v, p) in videos.iter().zip(&preds) {
        dualseg_core::data::write_labels(
            &pred_dir.join(format!("{}.txt", v.id)),
            p,
            &corpus.class_names,
        )?;
    }

    print!("{}", log.final_report);
    eprintln!("wall clock: {:.2}s", log.wall_clock_seconds);
    Ok(())
}

fn label_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::new(CliError::EVAL, format!("{}: {e}", dir.display())))?;
    let mut stems = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(stems)
}

fn read_tokens(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(CliError::EVAL, format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn eval(
    pred_dir: &Path,
    gt_dir: &Path,
    out: &Path,
    edit: EditAggregation,
) -> Result<(), CliError> {
    let preds = label_stems(pred_dir)?;
    let gts = label_stems(gt_dir)?;
    let missing: Vec<&str> = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(String::as_str)
        .collect();
    let extra: Vec<&str> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("prediction and ground-truth stems differ");
        if !missing.is_empty() {
            msg.push_str(&format!("; missing predictions: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            msg.push_str(&format!("; extra predictions: {}", extra.join(", ")));
        }
        return Err(CliError::new(CliError::EVAL, msg));
    }
    if gts.is_empty() {
        return Err(CliError::new(
            CliError::EVAL,
            format!("no .txt label files in {}", gt_dir.display()),
        ));
    }

    let mut raw = Vec::with_capacity(gts.len());
    for (stem, gt_path) in &gts {
        raw.push((
            stem.clone(),
            read_tokens(&preds[stem])?,
            read_tokens(gt_path)?,
        ));
    }
    // metrics only compare labels, so any consistent token → index map works
    let vocab: BTreeSet<&str> = raw
        .iter()
        .flat_map(|(_, p, g)| p.iter().chain(g))
        .map(String::as_str)
        .collect();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let to_seq = |tokens: &[String]| -> Result<LabelSequence, CliError> {
        LabelSequence::new(
            tokens.iter().map(|t| index[t.as_str()]).collect(),
            index.len().max(1),
        )
        .map_err(|e| CliError::new(CliError::EVAL, e.to_string()))
    };
    let mut videos = Vec::with_capacity(raw.len());
    for (stem, p, g) in &raw {
        if p.len() != g.len() {
            return Err(CliError::new(
                CliError::EVAL,
                format!(
                    "`{stem}`: prediction has {} frames, ground truth {}",
                    p.len(),
                    g.len()
                ),
            ));
        }
        let Ok(ps) = to_seq(p) else {
            return Err(CliError::new(
                CliError::EVAL,
                format!("`{stem}`: empty label file"),
            ));
        };
        videos.push((stem.as_str(), ps, to_seq(g)?));
    }
    let report = dualseg_core::evaluate_corpus(videos.iter().map(|(s, p, g)| (*s, p, g)), edit)
        .map_err(|e| CliError::new(CliError::EVAL, e.to_string()))?;
    print!("{report}");
    write_json(
        out,
        &json!({
            "pred_dir": pred_dir,
            "gt_dir": gt_dir,
            "edit_aggregation": edit,
            "report": report,
        }),
    )
}

pub fn gradcheck(cfg: &CliConfig, out: Option<&Path>, inject_fault: bool) -> Result<(), CliError> {
    let report = gradcheck::run(&cfg.gradcheck, &cfg.train.loss, inject_fault);
    print!("{report}");
    if let Some(path) = out {
        write_json(
            path,
            &json!({"cli_config": cfg.to_json(), "config_sha256": cfg.sha256(), "report": report}),
        )?;
    }
    if report.passed() {
        return Ok(());
    }
    let msg = match report
        .lines
        .iter()
        .filter(|l| !l.passed)
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    {
        Some(w) => format!(
            "gradient check failed: rel. error {:.3e} in {} at {}",
            w.max_rel_error, w.name, w.location
        ),
        None => "gradient check failed: shape-loss gradient is nonzero before the warm-up ends"
            .to_owned(),
    };
    Err(CliError::new(CliError::GRADCHECK, msg))
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Result<Vec<u64>, _> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    match seeds {
        Ok(s) if !s.is_empty() => Ok(s),
        _ => Err(CliError::config(format!(
            "`--seeds`: expected comma-separated integers, got `{list}`"
        ))),
    }
}

pub fn ablate_cmd(
    mut cfg: CliConfig,
    data: Option<&Path>,
    out: &Path,
    arms: &str,
    seeds: &[u64],
) -> Result<(), CliError> {
    let arms = parse_arms(arms)
        .map_err(|UnknownArm(a)| CliError::new(CliError::ABLATE, format!("unknown arm `{a}`")))?;
    let corpus = corpus_for(&cfg, data)?;
    cfg.train = cfg.train.resolved_for(&corpus);
    validate_train(&cfg.train)?;
    let table = ablate(&corpus, &cfg.train, &arms, seeds);

    create_dir(out)?;
    let hash = cfg.sha256();
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let csv = format!(
        "# config_sha256={hash} seeds={}\n{}",
        seed_list.join(";"),
        table.to_csv()
    );
    fs::write(out.join(&cfg.outputs.ablation_csv), csv)?;
    write_json(
        &out.join(&cfg.outputs.ablation_json),
        &json!({
            "cli_config": cfg.to_json(),
            "config_sha256": hash,
            "seeds": seeds,
            "table": table,
        }),
    )?;
    print!("{table}");
    let failures: Vec<String> = table
        .rows
        .iter()
        .flat_map(|r| r.errors.iter().map(move |e| format!("{}: {e}", r.arm)))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            CliError::TRAIN,
            format!("some runs failed:\n  {}", failures.join("\n  ")),
        ))
    }
}
