//! One function per subcommand. Each reads prior artifacts from the workdir,
//! writes its own artifacts and a run manifest.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use physiodecode::dataset::{write_epochs_streaming, write_manifest_rows, EpbReader, SyntheticConfig, SyntheticGenerator};
use physiodecode::ensemble::EnsembleModel;
use physiodecode::eval::{emit_report, AblationTable, EvalReport, ReportFormat};
use physiodecode::features::{FeatureMatrix, ModalityMask, NormStats};
use physiodecode::pipeline::{
    evaluate_ensemble, explain_ensemble, extract_dataset, partition, run_ablation, select_features, train_ensemble,
    tune, Partitions, PipelineConfig, ScreenReport, Tuning, STUDY_A, STUDY_ALPHA, STUDY_B, STUDY_JOINT,
};
use physiodecode::{DatasetSplit, ModalityLayout};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::workdir::{self as wd, header_hash, journal_name, strip_header, RunManifest, Workdir};
use crate::CliError;

pub struct Ctx {
    pub run: RunConfig,
    pub pipeline: PipelineConfig,
    pub wd: Workdir,
    pub format: ReportFormat,
    pub mask: Option<ModalityMask>,
}

impl Ctx {
    fn manifest(&self, stage: &str) -> RunManifest {
        RunManifest::new(stage, self.run.seed, self.wd.config_hash(), self.run.canonical_text())
    }

    fn epochs_path(&self) -> PathBuf {
        self.run.data.clone().unwrap_or_else(|| self.wd.path(wd::EPOCHS))
    }

    fn features(&self) -> Result<FeatureMatrix, CliError> {
        Ok(FeatureMatrix::from_csv(&self.wd.read_body(wd::FEATURES, "extract")?)?)
    }

    fn partitions(&self, fm: &FeatureMatrix) -> Result<Partitions, CliError> {
        let payload = self.wd.read_json(wd::SPLIT, "select")?;
        let split: DatasetSplit = serde_json::from_value(payload["split"].clone()).map_err(|e| CliError::Data(e.into()))?;
        let norm = NormStats::from_json(&payload["norm"], &fm.registry)?;
        let n = fm.n_rows();
        if split.train_indices.iter().chain(&split.test_indices).any(|&i| i >= n) {
            return Err(CliError::Data(physiodecode::Error::InvalidArgument(
                "split indices exceed the feature matrix; rerun select".into(),
            )));
        }
        let train = norm.apply(&fm.select_rows(&split.train_indices))?;
        let test = norm.apply(&fm.select_rows(&split.test_indices))?;
        Ok(Partitions {
            split,
            norm,
            train,
            test,
        })
    }

    fn elite(&self) -> Result<Vec<String>, CliError> {
        Ok(self
            .wd
            .read_body(wd::ELITE, "select")?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect())
    }

    fn tuning(&self) -> Result<Tuning, CliError> {
        serde_json::from_value(self.wd.read_json(wd::TUNING, "tune")?).map_err(|e| CliError::Data(e.into()))
    }

    fn model(&self) -> Result<EnsembleModel, CliError> {
        let payload = self.wd.read_json(wd::MODEL, "train")?;
        Ok(EnsembleModel::from_json(&payload.to_string())?)
    }

    fn print(&self, text: &str) {
        print!("{text}");
        if !text.ends_with('\n') {
            println!();
        }
    }
}

pub fn synth(ctx: &Ctx) -> Result<(), CliError> {
    let layout = ModalityLayout::canonical();
    let cfg = SyntheticConfig::new(ctx.run.n_per_class, ctx.run.seed);
    let n = cfg.total();
    let gen = SyntheticGenerator::new(cfg, &layout)?;
    let out = ctx.epochs_path();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let rows = write_epochs_streaming(&out, n, gen.iter())?;
    write_manifest_rows(ctx.wd.path(wd::EPOCH_MANIFEST), &rows)?;
    let mut m = ctx.manifest("synth");
    m.outputs.insert(out.display().to_string(), wd::sha256_file(&out)?);
    m.output(&ctx.wd, wd::EPOCH_MANIFEST)?;
    m.write(&ctx.wd)?;
    eprintln!("synth: wrote {n} epochs to {}", out.display());
    Ok(())
}

pub fn extract(ctx: &Ctx) -> Result<(), CliError> {
    let layout = ModalityLayout::canonical();
    let path = ctx.epochs_path();
    if !path.is_file() {
        return Err(CliError::MissingArtifact {
            stage: "synth".into(),
            path,
        });
    }
    let reader = EpbReader::open(&path, &layout)?;
    let (fm, screen): (FeatureMatrix, ScreenReport) = extract_dataset(reader, &layout, &ctx.pipeline)?;
    ctx.wd.write_text(wd::FEATURES, &fm.to_csv())?;
    ctx.wd.write_json(wd::SCREENING, serde_json::to_value(&screen).map_err(|e| CliError::Data(e.into()))?)?;
    let mut m = ctx.manifest("extract");
    m.input("epochs", &path)?;
    m.output(&ctx.wd, wd::FEATURES)?;
    m.output(&ctx.wd, wd::SCREENING)?;
    m.write(&ctx.wd)?;
    eprintln!(
        "extract: {} of {} epochs kept, {} features",
        screen.n_kept,
        screen.n_input,
        fm.registry.len()
    );
    Ok(())
}

pub fn select(ctx: &Ctx) -> Result<(), CliError> {
    let fm = ctx.features()?;
    let parts = partition(&fm, &ctx.pipeline)?;
    let selection = select_features(&parts.train, ctx.pipeline.elite_k, ctx.pipeline.seed)?;
    ctx.wd.write_json(
        wd::SPLIT,
        json!({
            "split": parts.split,
            "norm": parts.norm.to_json(),
        }),
    )?;
    let importance = match &selection.importance {
        Some(imp) => imp.to_csv(),
        None => "rank,feature,importance,modality\n".to_string(),
    };
    ctx.wd.write_text(wd::IMPORTANCE, &importance)?;
    let mut elite = selection.elite.join("\n");
    elite.push('\n');
    ctx.wd.write_text(wd::ELITE, &elite)?;
    let mut m = ctx.manifest("select");
    m.input("features", &ctx.wd.path(wd::FEATURES))?;
    for name in [wd::SPLIT, wd::IMPORTANCE, wd::ELITE] {
        m.output(&ctx.wd, name)?;
    }
    m.write(&ctx.wd)?;
    eprintln!(
        "select: {} train / {} test rows, kept {} of {} features{}",
        parts.train.n_rows(),
        parts.test.n_rows(),
        selection.elite.len(),
        fm.registry.len(),
        if selection.importance.is_none() { " (selector skipped)" } else { "" }
    );
    Ok(())
}

fn study_names(cfg: &PipelineConfig) -> Vec<&'static str> {
    if cfg.joint_alpha {
        vec![STUDY_JOINT]
    } else {
        vec![STUDY_A, STUDY_B, STUDY_ALPHA]
    }
}

pub fn tune_stage(ctx: &Ctx) -> Result<(), CliError> {
    let fm = ctx.features()?;
    let parts = ctx.partitions(&fm)?;
    let elite = ctx.elite()?;
    let train = parts.train.select_named(&elite)?;

    // resume journals written under the same configuration
    let mut prior = Vec::new();
    for name in study_names(&ctx.pipeline) {
        let path = ctx.wd.path(&journal_name(name));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if header_hash(&text) == Some(ctx.wd.config_hash()) {
                prior.push((name.to_string(), strip_header(&text).to_string()));
            }
        }
    }
    let mut started: BTreeSet<String> = BTreeSet::new();
    let mut io_error: Option<std::io::Error> = None;
    let mut on_trial = |study: &str, trial: &physiodecode::tpe::Trial| {
        if io_error.is_some() {
            return;
        }
        let path = ctx.wd.path(&journal_name(study));
        let result = (|| -> std::io::Result<()> {
            if started.insert(study.to_string()) {
                let mut text = ctx.wd.header();
                if let Some((_, body)) = prior.iter().find(|(n, _)| n == study) {
                    text.push_str(body);
                }
                std::fs::write(&path, text)?;
            }
            let mut f = OpenOptions::new().append(true).open(&path)?;
            writeln!(f, "{}", serde_json::to_string(trial)?)?;
            f.flush()
        })();
        if let Err(e) = result {
            io_error = Some(e);
        }
        eprintln!("tune: {study} trial {} objective {:?}", trial.id, trial.objective);
    };
    let (tuning, studies) = tune(&train, &ctx.pipeline, &prior, &mut on_trial)?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    ctx.wd
        .write_json(wd::TUNING, serde_json::to_value(&tuning).map_err(|e| CliError::Data(e.into()))?)?;
    let mut m = ctx.manifest("tune");
    m.input("features", &ctx.wd.path(wd::FEATURES))?;
    m.input("split", &ctx.wd.path(wd::SPLIT))?;
    m.input("elite", &ctx.wd.path(wd::ELITE))?;
    for (name, _) in &studies.studies {
        m.output(&ctx.wd, &journal_name(name))?;
    }
    m.output(&ctx.wd, wd::TUNING)?;
    m.write(&ctx.wd)?;
    eprintln!(
        "tune: alpha {:.4}, cv macro-F1 {:?} / {:?}",
        tuning.alpha, tuning.best_objective_a, tuning.best_objective_b
    );
    Ok(())
}

pub fn train_stage(ctx: &Ctx) -> Result<(), CliError> {
    let tuning = ctx.tuning()?;
    let fm = ctx.features()?;
    let parts = ctx.partitions(&fm)?;
    let train = parts.train.select_named(&ctx.elite()?)?;
    let model = train_ensemble(&train, &tuning)?;
    let payload: Value = serde_json::from_str(&model.to_json()?).map_err(|e| CliError::Data(e.into()))?;
    ctx.wd.write_json(wd::MODEL, payload)?;
    let mut m = ctx.manifest("train");
    for (label, name) in [("features", wd::FEATURES), ("split", wd::SPLIT), ("elite", wd::ELITE), ("tuning", wd::TUNING)] {
        m.input(label, &ctx.wd.path(name))?;
    }
    m.output(&ctx.wd, wd::MODEL)?;
    m.write(&ctx.wd)?;
    eprintln!("train: ensemble on {} rows x {} features", train.n_rows(), train.registry.len());
    Ok(())
}

pub fn evaluate_stage(ctx: &Ctx) -> Result<(), CliError> {
    let model = ctx.model()?;
    let fm = ctx.features()?;
    let parts = ctx.partitions(&fm)?;
    let report: EvalReport = evaluate_ensemble(&model, &parts.test)?;
    ctx.wd
        .write_json(wd::REPORT, serde_json::to_value(&report).map_err(|e| CliError::Data(e.into()))?)?;
    let mut m = ctx.manifest("evaluate");
    m.input("model", &ctx.wd.path(wd::MODEL))?;
    m.input("features", &ctx.wd.path(wd::FEATURES))?;
    m.input("split", &ctx.wd.path(wd::SPLIT))?;
    m.output(&ctx.wd, wd::REPORT)?;
    m.write(&ctx.wd)?;
    ctx.print(&emit_report(&report, ctx.format)?);
    Ok(())
}

pub fn ablate(ctx: &Ctx) -> Result<(), CliError> {
    let tuning = ctx.tuning()?;
    let fm = ctx.features()?;
    let parts = ctx.partitions(&fm)?;
    let masks = match ctx.mask {
        Some(m) => vec![m],
        None => ModalityMask::canonical(),
    };
    let table: AblationTable = run_ablation(&parts, &masks, &tuning, &ctx.pipeline)?;
    ctx.wd
        .write_json(wd::ABLATION_JSON, serde_json::to_value(&table).map_err(|e| CliError::Data(e.into()))?)?;
    ctx.wd.write_text(wd::ABLATION_CSV, &table.to_csv())?;
    let mut m = ctx.manifest("ablate");
    m.input("features", &ctx.wd.path(wd::FEATURES))?;
    m.input("split", &ctx.wd.path(wd::SPLIT))?;
    m.input("tuning", &ctx.wd.path(wd::TUNING))?;
    m.output(&ctx.wd, wd::ABLATION_JSON)?;
    m.output(&ctx.wd, wd::ABLATION_CSV)?;
    m.write(&ctx.wd)?;
    match ctx.format {
        ReportFormat::Json => ctx.print(&serde_json::to_string_pretty(&table).map_err(|e| CliError::Data(e.into()))?),
        _ => ctx.print(&table.to_csv()),
    }
    Ok(())
}

pub fn explain(ctx: &Ctx) -> Result<(), CliError> {
    let model = ctx.model()?;
    let fm = ctx.features()?;
    let parts = ctx.partitions(&fm)?;
    let (imp, shares) = explain_ensemble(&model, &parts.test)?;
    ctx.wd.write_text(wd::EXPLAIN, &imp.to_csv())?;
    ctx.wd
        .write_json(wd::SHARES, serde_json::to_value(shares).map_err(|e| CliError::Data(e.into()))?)?;
    let mut m = ctx.manifest("explain");
    m.input("model", &ctx.wd.path(wd::MODEL))?;
    m.input("features", &ctx.wd.path(wd::FEATURES))?;
    m.input("split", &ctx.wd.path(wd::SPLIT))?;
    m.output(&ctx.wd, wd::EXPLAIN)?;
    m.output(&ctx.wd, wd::SHARES)?;
    m.write(&ctx.wd)?;
    match ctx.format {
        ReportFormat::Json => ctx.print(
            &serde_json::to_string_pretty(&json!({"importance": imp, "modality_shares": shares}))
                .map_err(|e| CliError::Data(e.into()))?,
        ),
        ReportFormat::Csv => ctx.print(&imp.to_csv()),
        ReportFormat::Text => {
            let mut out = format!(
                "modality shares: eeg {:.4}  emg {:.4}  gsr {:.4}\n",
                shares.eeg, shares.emg, shares.gsr
            );
            for (rank, &j) in imp.ranking.iter().take(20).enumerate() {
                out.push_str(&format!("{:>3}  {:<32}{:.6}\n", rank + 1, imp.names[j], imp.importance[j]));
            }
            ctx.print(&out);
        }
    }
    Ok(())
}
