//! Subcommand implementations. Every command that trains or evaluates writes
//! a `config.json` snapshot next to its other outputs.

use std::fs;
use std::path::Path;

use causal_vqa::causal::build_codebook;
use causal_vqa::data::{build_vocabulary, prepare, PreparedData};
use causal_vqa::features::{load_manifest, load_records, write_dataset};
use causal_vqa::gradcheck::{grad_check, COMPONENTS};
use causal_vqa::linguistic::Vocabulary;
use causal_vqa::synthetic::{generate_synthetic, SyntheticTaskSpec};
use causal_vqa::train::{
    comparison_table, evaluate, load_checkpoint, run_variant, save_checkpoint, write_trace_csv, TrainConfig, Trainer,
    VARIANT_NAMES,
};
use ndarray::{concatenate, Axis};

use crate::{AblateArgs, Command, ConfigArgs, DataArgs, EvalArgs, GenDataArgs, GradcheckArgs, Preset, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] causal_vqa::Error),
    #[error("gradient check failed for {0}")]
    Gradient(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Gradient(_) => "gradient",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::BuildCodebook(a) => build_codebooks(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    causal_vqa::Error::io(path, e).into()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

/// Preset or file, then overrides in order, then the seed flag.
pub fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::from_json(&read(path)?)?,
        None => match args.preset {
            Preset::Large => TrainConfig::default(),
            Preset::Toy => TrainConfig::toy(),
        },
    };
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn snapshot(dir: &Path, config: &TrainConfig) -> Result<()> {
    write(&dir.join("config.json"), &config.to_json()?)
}

fn load_data(dir: &Path, vocab: Option<Vocabulary>, train_split: &str) -> Result<PreparedData> {
    let manifest = load_manifest(dir)?;
    let records = load_records(dir, &manifest)?;
    Ok(prepare(&manifest, &records, vocab, train_split)?)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => serde_json::from_str::<SyntheticTaskSpec>(&read(path)?)
            .map_err(|e| causal_vqa::Error::Config(format!("invalid task spec: {e}")))?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (manifest, records) = generate_synthetic(&spec)?;
    write_dataset(&a.out, &manifest, &records)?;
    write(
        &a.out.join("spec.json"),
        &serde_json::to_string_pretty(&spec).map_err(causal_vqa::Error::from)?,
    )?;
    let sizes: Vec<String> = manifest.splits.iter().map(|(k, v)| format!("{k}={}", v.len())).collect();
    println!("wrote {} samples to {} ({})", records.len(), a.out.display(), sizes.join(", "));
    Ok(())
}

fn build_vocab(a: DataArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let manifest = load_manifest(&a.data)?;
    let vocab = build_vocabulary(&manifest, &config.train_split)?;
    let data = load_data(&a.data, Some(vocab.clone()), &config.train_split)?;
    create_dir(&a.out)?;
    snapshot(&a.out, &config)?;
    write(
        &a.out.join("vocab.json"),
        &serde_json::to_string_pretty(&vocab).map_err(causal_vqa::Error::from)?,
    )?;
    write(&a.out.join("confounders.json"), &data.confounders.to_json()?)?;
    println!(
        "{} tokens; confounder set sizes {:?}; prior weights {:?}",
        vocab.len(),
        data.confounders.sets.each_ref().map(Vec::len),
        data.confounders.prior_weights()
    );
    Ok(())
}

fn build_codebooks(a: DataArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let manifest = load_manifest(&a.data)?;
    let records = load_records(&a.data, &manifest)?;
    let train = manifest.split(&config.train_split)?;
    let stack = |f: &dyn Fn(usize) -> ndarray::Array2<f64>| -> Result<ndarray::Array2<f64>> {
        let parts: Vec<_> = train.iter().map(|&i| f(i)).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| causal_vqa::Error::Validation(format!("cannot stack rows: {e}")).into())
    };
    let appearance = stack(&|i| records[i].appearance_rows())?;
    let motion = stack(&|i| records[i].motion_rows())?;
    create_dir(&a.out)?;
    snapshot(&a.out, &config)?;
    for (name, rows) in [("appearance", &appearance), ("motion", &motion)] {
        let k = config.codebook_k.min(rows.nrows());
        let codebook = build_codebook(rows, k, config.seed)?;
        let path = a.out.join(format!("codebook_{name}.json"));
        write(&path, &serde_json::to_string(&codebook).map_err(causal_vqa::Error::from)?)?;
        println!("{name}: {} rows -> {k} centroids in {}", rows.nrows(), path.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let vocab = match &a.vocab {
        Some(path) => Some(
            serde_json::from_str::<Vocabulary>(&read(path)?)
                .map_err(|e| causal_vqa::Error::Format(format!("invalid vocabulary: {e}")))?
                .reindex(),
        ),
        None => None,
    };
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let vocab = vocab.or_else(|| resume.as_ref().map(|c| c.vocab.clone()));
    let data = load_data(&a.data, vocab, &config.train_split)?;
    create_dir(&a.out)?;
    snapshot(&a.out, &config)?;

    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, &config, &data)?,
        None => Trainer::new(&config, &data)?,
    };
    println!(
        "training {} parameters on {} samples for {} epochs",
        trainer.model.num_parameters(),
        data.split(&config.train_split)?.len(),
        config.epochs
    );
    let every = a.checkpoint_every;
    let out = a.out.clone();
    trainer.run(|t, r| {
        println!(
            "epoch {:>4}  loss {:.6}  lr {:.2e}  metric {:.4}{}",
            r.epoch,
            r.loss,
            r.lr,
            r.metric,
            if r.best { "  *" } else { "" }
        );
        if every > 0 && r.epoch % every == 0 {
            save_checkpoint(&t.checkpoint(), &out.join(format!("epoch{:04}.ckpt", r.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &a.out.join("model.ckpt"))?;
    write_trace_csv(&a.out.join("trace.csv"), &trainer.state.trace)?;
    let summary = serde_json::json!({
        "fingerprint": config.fingerprint(),
        "epochs": trainer.state.epoch,
        "final_loss": trainer.state.trace.last().map(|r| r.loss),
        "best_epoch": trainer.state.best_epoch,
        "best_metric": trainer.state.best_metric,
    });
    write(&a.out.join("summary.json"), &summary.to_string())?;
    println!("{summary}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, Some(ck.vocab.clone()), &ck.config.train_split)?;
    if data.shape != ck.shape {
        return Err(causal_vqa::Error::DimensionMismatch(format!(
            "checkpoint expects data shaped {:?}, got {:?}",
            ck.shape, data.shape
        ))
        .into());
    }
    let model = ck.selected_model()?;
    let (metrics, predictions) = evaluate(&model, &data, &a.split)?;
    let report = serde_json::json!({ "split": a.split, "metrics": metrics, "epoch": ck.epoch });
    println!("{report}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        snapshot(dir, &ck.config)?;
        write(&dir.join("metrics.json"), &report.to_string())?;
        let mut csv = String::from("record_id,label,answer\n");
        for (&i, p) in data.split(&a.split)?.iter().zip(&predictions) {
            let s = &data.samples[i];
            csv.push_str(&format!("{},{},{}\n", s.record_id, s.label, p.answer));
        }
        write(&dir.join("predictions.csv"), &csv)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let variants: Vec<&str> = if a.variants.is_empty() {
        VARIANT_NAMES.to_vec()
    } else {
        a.variants.iter().map(String::as_str).collect()
    };
    if a.seeds == 0 {
        return Err(causal_vqa::Error::Config("--seeds must be positive".into()).into());
    }
    let data = load_data(&a.data, None, &config.train_split)?;
    let splits: Vec<&str> = data
        .splits
        .keys()
        .map(String::as_str)
        .filter(|s| *s != config.train_split)
        .collect();
    create_dir(&a.out)?;
    snapshot(&a.out, &config)?;

    let mut runs = Vec::new();
    for &v in &variants {
        for s in 0..a.seeds {
            let seed = config.seed + s;
            let run = run_variant(&config, v, seed, &data, &splits)?;
            let scores: Vec<String> = splits
                .iter()
                .map(|sp| format!("{sp} {:.4}", run.score(sp).unwrap_or(f64::NAN)))
                .collect();
            println!("{v:<8} seed {seed}: loss {:.4}, {}", run.final_loss, scores.join(", "));
            runs.push(run);
        }
    }
    let table = comparison_table(&runs, &splits);
    println!("\n{table}");
    write(&a.out.join("table.txt"), &table)?;
    write(
        &a.out.join("ablation.json"),
        &serde_json::to_string_pretty(&runs).map_err(causal_vqa::Error::from)?,
    )?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let components: Vec<&str> = if a.components.is_empty() {
        COMPONENTS.to_vec()
    } else {
        a.components.iter().map(String::as_str).collect()
    };
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for c in components {
        let r = grad_check(c, a.seed)?;
        let ok = r.max_rel_err <= a.tolerance;
        println!(
            "{:<20} {:>4} coords  max rel {:.3e}  max abs {:.3e}  {}",
            r.component,
            r.coordinates,
            r.max_rel_err,
            r.max_abs_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.component.clone());
        }
        reports.push(r);
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write(
            &dir.join("gradcheck.json"),
            &serde_json::to_string_pretty(&reports).map_err(causal_vqa::Error::from)?,
        )?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradient(failed.join(", ")))
    }
}
