use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde_json::json;
use wfperf::checkpoint::{load_checkpoint, save_checkpoint, save_history, version_string};
use wfperf::encoders::{
    Cached, EmbeddingCache, HashingTextEmbedder, HttpEmbeddingProvider, SemanticEmbeddingProvider,
    StructFeatureProvider, TextEmbeddingProvider,
};
use wfperf::error::Error;
use wfperf::evaluation::{evaluate, ranking, report_from_scores, sweep, SweepParam, DEFAULT_THRESHOLD};
use wfperf::graph_qa::{
    generate_qa_dataset, grade_answers, holdout_workflows, read_answers_jsonl, read_qa_jsonl, write_qa_jsonl,
    AnswerRecord, Normalization, CORPUS_METADATA,
};
use wfperf::model::{FeatureSet, SurrogateModel};
use wfperf::scalar::Scalar;
use wfperf::search::{compare_strategies, synthetic_corpus, Strategy};
use wfperf::training::{contrastive_diagnostics, fit, pretrain_gnn, referenced_workflows, train, EVAL_CHUNK};
use wfperf::workflow::{Corpus, LabeledDataset, Split};

use crate::config::{stage_seed, Precision, ProviderKind, RunConfig};
use crate::plots::{line_chart, Series};

/// Seed for the fixed validation triplets used in distance diagnostics.
const DIAGNOSTIC_TRIPLET_SEED: u64 = 0x7d1a;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    /// Create the output directory and write the resolved snapshot into it.
    pub fn prepare(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write(&out.join("config.toml"), &cfg.to_toml())?;
        write(&out.join("VERSION"), &format!("{}\n", version_string()))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus(&self) -> Result<Corpus> {
        let split_seed = stage_seed(self.cfg.seed, "split");
        if let Some(path) = &self.cfg.dataset {
            log::info!("loading dataset {}", path.display());
            return Ok(Corpus::load(path, split_seed)?);
        }
        let s = &self.cfg.synthetic;
        log::info!("generating synthetic corpus with {} workflows", s.workflows);
        let all = synthetic_corpus(&s.space, &s.oracle, s.workflows, stage_seed(self.cfg.seed, "synthetic"))?;
        Ok(Corpus::split(&all, split_seed))
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.cfg
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --checkpoint".into()).into())
    }

    /// Run `f` with the configured text and semantic providers.
    fn with_providers<R>(
        &self,
        f: impl FnOnce(&dyn TextEmbeddingProvider, &dyn SemanticEmbeddingProvider) -> Result<R>,
    ) -> Result<R> {
        let t = &self.cfg.train;
        let p = &self.cfg.providers;
        match p.kind {
            ProviderKind::Local => f(&HashingTextEmbedder::new(t.text_dim), &StructFeatureProvider::new(t.sem_dim)),
            ProviderKind::Http => {
                let endpoint = p.endpoint.clone().expect("validated");
                let http = |dim| {
                    HttpEmbeddingProvider::new(endpoint.clone(), dim)
                        .with_timeout(Duration::from_secs(p.timeout_secs))
                        .with_retries(p.retries)
                };
                let cache = match &p.cache {
                    Some(path) => EmbeddingCache::open(path)?,
                    None => EmbeddingCache::in_memory(),
                };
                let text = Cached { inner: http(t.text_dim), cache: &cache };
                let sem = Cached { inner: http(t.sem_dim), cache: &cache };
                let r = f(&text, &sem);
                cache.save()?;
                r
            }
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serialises")
}

fn split_of<'a>(corpus: &'a Corpus, split: Split) -> &'a LabeledDataset {
    match split {
        Split::Train => &corpus.train,
        Split::Validation => &corpus.validation,
        Split::Test => &corpus.test,
    }
}

fn features<T: Scalar>(corpus: &Corpus, text: &dyn TextEmbeddingProvider, sem: &dyn SemanticEmbeddingProvider) -> Result<FeatureSet<T>> {
    Ok(FeatureSet::from_dataset(&corpus.train, text, sem)?)
}

fn load_model<T: Scalar>(ctx: &Ctx) -> Result<SurrogateModel<T>> {
    let dir = ctx.checkpoint()?;
    let loaded = load_checkpoint::<T>(dir)?;
    if loaded.config.model_config() != ctx.cfg.train.model_config() {
        log::warn!(
            "checkpoint {} was trained with a different architecture; using the checkpoint's",
            dir.display()
        );
    }
    Ok(loaded.model)
}

pub fn gen_synth(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let path = ctx.path("corpus.json");
    corpus.save(&path)?;
    log::info!(
        "{} train / {} validation / {} test samples",
        corpus.train.samples.len(),
        corpus.validation.samples.len(),
        corpus.test.samples.len()
    );
    Ok(())
}

pub fn gen_qa(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let workflows: Vec<_> = corpus.train.workflows.values().cloned().collect();
    let qa = &ctx.cfg.qa;
    let seed = stage_seed(ctx.cfg.seed, "qa");
    let (kept, held) = holdout_workflows(&workflows, qa.holdout, seed);
    let main = generate_qa_dataset(&kept, qa.samples_per_type, seed)?;
    let heldout = generate_qa_dataset(&held, qa.samples_per_type, stage_seed(seed, "qa/heldout"))?;
    for w in main.warnings.iter().chain(&heldout.warnings) {
        log::warn!("{w}");
    }
    write(&ctx.path("qa.jsonl"), &write_qa_jsonl(&main.items))?;
    write(&ctx.path("qa_heldout.jsonl"), &write_qa_jsonl(&heldout.items))?;
    write(&ctx.path("qa_metadata.json"), CORPUS_METADATA)?;
    log::info!("{} items, {} held out", main.items.len(), heldout.items.len());
    Ok(())
}

pub fn grade_qa(ctx: &Ctx, qa: Option<&Path>, answers: Option<&Path>, endpoint: Option<&str>) -> Result<()> {
    let qa_path = qa.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("qa.jsonl"));
    let items = read_qa_jsonl(&read(&qa_path)?)?;
    let answers = match (answers, endpoint) {
        (Some(path), _) => read_answers_jsonl(&read(path)?)?,
        (None, Some(url)) => {
            let p = &ctx.cfg.providers;
            let llm = HttpEmbeddingProvider::new(url, 0)
                .with_timeout(Duration::from_secs(p.timeout_secs))
                .with_retries(p.retries);
            let mut lines = String::new();
            let mut map = std::collections::HashMap::new();
            for item in &items {
                let answer = llm.generate(&item.question)?;
                let rec = AnswerRecord { item_id: item.item_id.clone(), answer: answer.clone() };
                lines.push_str(&serde_json::to_string(&rec)?);
                lines.push('\n');
                map.insert(item.item_id.clone(), answer);
            }
            write(&ctx.path("answers.jsonl"), &lines)?;
            map
        }
        (None, None) => {
            return Err(Error::Config("grade-qa needs --answers or an endpoint".into()).into());
        }
    };
    let report = grade_answers(&items, &answers, Normalization::default());
    write(&ctx.path("grading_report.json"), &pretty(&report.to_json()))?;
    println!("{}", report.table_json());
    Ok(())
}

pub fn pretrain_gnn_cmd(ctx: &Ctx) -> Result<()> {
    match ctx.cfg.precision {
        Precision::F32 => pretrain_typed::<f32>(ctx),
        Precision::F64 => pretrain_typed::<f64>(ctx),
    }
}

fn pretrain_typed<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg.train;
    if !cfg.ablation.use_gnn {
        bail!(Error::Config("pretraining needs the structural branch enabled".into()));
    }
    let corpus = ctx.corpus()?;
    let feats = ctx.with_providers(|t, s| features::<T>(&corpus, t, s))?;
    let mut model = SurrogateModel::<T>::new(cfg.model_config(), cfg.seed)?;
    let report = pretrain_gnn(&mut model, &feats, &referenced_workflows(&corpus.train), cfg)?;
    save_checkpoint(ctx.path("checkpoint"), &model, cfg, None)?;
    write(&ctx.path("pretrain.json"), &pretty(&report))?;
    let points = report.loss_curve.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect();
    line_chart(
        &ctx.path("pretrain_loss.svg"),
        "Pretraining objective",
        "step",
        "loss",
        &[Series { label: "loss", points }],
    )?;
    log::info!("pretraining loss {:.4} -> {:.4}", report.initial, report.last);
    Ok(())
}

pub fn train_cmd(ctx: &Ctx) -> Result<()> {
    match ctx.cfg.precision {
        Precision::F32 => train_typed::<f32>(ctx),
        Precision::F64 => train_typed::<f64>(ctx),
    }
}

fn train_typed<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg.train;
    let corpus = ctx.corpus()?;
    let feats = ctx.with_providers(|t, s| features::<T>(&corpus, t, s))?;
    let (model, history) = match &ctx.cfg.checkpoint {
        Some(dir) => {
            let loaded = load_checkpoint::<T>(dir)?;
            if loaded.config.model_config() != cfg.model_config() {
                bail!(Error::Checkpoint(format!(
                    "{} does not match the configured architecture",
                    dir.display()
                )));
            }
            let mut model = loaded.model;
            let history = train(&mut model, &feats, &corpus.train, &corpus.validation, cfg)?;
            (model, history)
        }
        None => {
            let run = fit::<T>(&feats, &corpus, cfg)?;
            (run.model, run.history)
        }
    };
    let dir = ctx.path("checkpoint");
    save_checkpoint(&dir, &model, cfg, Some(&history))?;
    save_history(&ctx.out, &history)?;
    let diag = contrastive_diagnostics(&model, &feats, &corpus.validation, DIAGNOSTIC_TRIPLET_SEED)?;
    write(&ctx.path("diagnostics.json"), &pretty(&diag))?;

    let curve = |f: fn(&wfperf::training::EpochRecord) -> f64| {
        history.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect::<Vec<_>>()
    };
    line_chart(
        &ctx.path("training_loss.svg"),
        "Training loss",
        "epoch",
        "loss",
        &[
            Series { label: "total", points: curve(|e| e.loss) },
            Series { label: "prediction", points: curve(|e| e.l_pred) },
        ],
    )?;
    line_chart(
        &ctx.path("validation_accuracy.svg"),
        "Validation accuracy",
        "epoch",
        "accuracy",
        &[Series { label: "validation", points: curve(|e| e.val_accuracy) }],
    )?;
    log::info!("best epoch {} ({:?})", history.best_epoch, history.stop_reason);
    Ok(())
}

pub fn eval_cmd(ctx: &Ctx, split: Split) -> Result<()> {
    match ctx.cfg.precision {
        Precision::F32 => eval_typed::<f32>(ctx, split),
        Precision::F64 => eval_typed::<f64>(ctx, split),
    }
}

fn eval_typed<T: Scalar>(ctx: &Ctx, split: Split) -> Result<()> {
    let model = load_model::<T>(ctx)?;
    let corpus = ctx.corpus()?;
    let feats = ctx.with_providers(|t, s| features::<T>(&corpus, t, s))?;
    let report = evaluate(&model, &feats, split_of(&corpus, split))?;
    write(&ctx.path("eval_report.json"), &report.to_json())?;
    println!("accuracy {:.2} utility {:.4}", report.accuracy, report.utility);
    Ok(())
}

fn scores<T: Scalar>(ctx: &Ctx, split: Split) -> Result<(LabeledDataset, Vec<f64>)> {
    let model = load_model::<T>(ctx)?;
    let corpus = ctx.corpus()?;
    let feats = ctx.with_providers(|t, s| features::<T>(&corpus, t, s))?;
    let ds = split_of(&corpus, split).clone();
    let pairs: Vec<(&str, &str)> = ds
        .samples
        .iter()
        .map(|s| (s.workflow_id.as_str(), s.task_id.as_str()))
        .collect();
    let scores = model.predict(&feats, &pairs, EVAL_CHUNK)?;
    Ok((ds, scores))
}

pub fn predict_cmd(ctx: &Ctx, split: Split) -> Result<()> {
    let (ds, scores) = match ctx.cfg.precision {
        Precision::F32 => scores::<f32>(ctx, split)?,
        Precision::F64 => scores::<f64>(ctx, split)?,
    };
    let mut out = String::new();
    for (s, p) in ds.samples.iter().zip(&scores) {
        let line = json!({
            "workflow_id": s.workflow_id,
            "task_id": s.task_id,
            "score": p,
            "prediction": u8::from(*p >= DEFAULT_THRESHOLD),
            "label": s.label,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    write(&ctx.path("predictions.jsonl"), &out)
}

pub fn rank_cmd(ctx: &Ctx, split: Split) -> Result<()> {
    let (ds, scores) = match ctx.cfg.precision {
        Precision::F32 => scores::<f32>(ctx, split)?,
        Precision::F64 => scores::<f64>(ctx, split)?,
    };
    let report = report_from_scores(&ds, &scores, DEFAULT_THRESHOLD)?;
    let rates: BTreeMap<String, f64> = report
        .workflows
        .iter()
        .map(|w| (w.workflow_id.clone(), w.predicted))
        .collect();
    let by_id: BTreeMap<&str, _> = report.workflows.iter().map(|w| (w.workflow_id.as_str(), w)).collect();
    let rows: Vec<_> = ranking(&rates)
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let w = by_id[id];
            json!({
                "rank": i + 1,
                "workflow_id": id,
                "predicted_rate": w.predicted,
                "ground_truth_rate": w.ground_truth,
                "tasks": w.tasks,
            })
        })
        .collect();
    write(&ctx.path("ranking.json"), &pretty(&rows))
}

pub fn search_cmd(ctx: &Ctx) -> Result<()> {
    match ctx.cfg.precision {
        Precision::F32 => search_typed::<f32>(ctx),
        Precision::F64 => search_typed::<f64>(ctx),
    }
}

fn search_typed<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let s = &ctx.cfg.synthetic;
    let budgets = &ctx.cfg.search.budgets;
    let seeds = ctx.cfg.search_seeds();
    let (report, traces) = ctx.with_providers(|text, sem| {
        let model = match &ctx.cfg.checkpoint {
            Some(_) => load_model::<T>(ctx)?,
            None => {
                log::info!("no checkpoint given; training a surrogate on the synthetic corpus");
                let corpus = ctx.corpus()?;
                let feats = features::<T>(&corpus, text, sem)?;
                let run = fit::<T>(&feats, &corpus, &ctx.cfg.train)?;
                save_checkpoint(ctx.path("checkpoint"), &run.model, &ctx.cfg.train, Some(&run.history))?;
                run.model
            }
        };
        let cfg = ctx.cfg.search.search_config();
        Ok(compare_strategies(&s.space, &s.oracle, &model, text, sem, &cfg, budgets, &seeds)?)
    })?;
    write(&ctx.path("comparison.json"), &report.to_json())?;
    let dir = ctx.path("traces");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for t in &traces {
        let name = format!("{}_{}_{}.jsonl", t.strategy.name(), t.budget, t.seed);
        write(&dir.join(name), &t.to_jsonl())?;
    }
    let series: Vec<Series> = Strategy::ALL
        .iter()
        .map(|&st| Series {
            label: st.name(),
            points: report
                .rows
                .iter()
                .filter(|r| r.strategy == st)
                .map(|r| (r.mean_cost, r.mean_score))
                .collect(),
        })
        .collect();
    line_chart(&ctx.path("cost_vs_score.svg"), "Search cost vs true score", "mean cost", "mean true score", &series)?;
    for r in &report.rows {
        println!(
            "{:<9} budget {:>6}: score {:.3} +- {:.3}, cost {:.0}",
            r.strategy.name(),
            r.budget,
            r.mean_score,
            r.std_score,
            r.mean_cost
        );
    }
    Ok(())
}

pub fn sweep_cmd(ctx: &Ctx) -> Result<()> {
    match ctx.cfg.precision {
        Precision::F32 => sweep_typed::<f32>(ctx),
        Precision::F64 => sweep_typed::<f64>(ctx),
    }
}

fn sweep_typed<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let feats = ctx.with_providers(|t, s| features::<T>(&corpus, t, s))?;
    let sw = &ctx.cfg.sweep;
    let mut all = Vec::new();
    for (param, values) in [(SweepParam::Lambda, &sw.lambda), (SweepParam::Alpha, &sw.alpha)] {
        if values.is_empty() {
            continue;
        }
        let points = sweep(&feats, &corpus, &ctx.cfg.train, param, values)?;
        let series = Series {
            label: "test accuracy",
            points: points.iter().map(|p| (p.value, p.accuracy)).collect(),
        };
        let name = format!("accuracy_vs_{}.svg", param.name());
        line_chart(&ctx.path(&name), &format!("Accuracy vs {}", param.name()), param.name(), "accuracy (%)", &[series])
            .with_context(|| format!("writing {name}"))?;
        all.extend(points);
    }
    write(&ctx.path("sweep.json"), &pretty(&all))
}
