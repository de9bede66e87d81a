use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use cams_core::aggregators::{AggregatorKind, AggregatorParams};
use cams_core::embedding::{
    embed_dataset, EmbedOptions, EmbeddingProvider, EmbeddingStore, HashedBagProvider, HttpProvider,
    PrecomputedProvider,
};
use cams_core::llm::{run_ensemble, ChatProvider, HttpChatProvider, MockChatProvider, ResponseCache};
use cams_core::metrics::{score_estimates, worker_quality, MetricKind};
use cams_core::model::{load_dataset, Dataset, DatasetFormat, EstimatedAnswers, WorkerRole};
use cams_core::pipeline::{merge_resources, run_matrix, run_sweep, Cell, ResourceSelection};
use cams_core::synthgen::{generate, SynthConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ProviderKind, RunConfig};
use crate::report::{tsv, write_file, CellScore, Report};
use crate::{Cli, CliError, Command};

pub const MANIFEST: &str = "manifest.json";
pub const LA_ANSWERS: &str = "la_answers.json";
pub const CACHE_ENV: &str = "CAMS_CACHE_DIR";

/// Everything needed to re-execute a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mock: Option<PathBuf>,
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub config: Option<RunConfig>,
    /// SHA-256 of every input file read, checked again on rerun.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Files written, relative to `out`.
    pub outputs: Vec<String>,
}

struct Ctx {
    command: Command,
    cfg: Option<RunConfig>,
    out: PathBuf,
    mock: Option<PathBuf>,
    seed: Option<u64>,
    outputs: Vec<String>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Command::Rerun { manifest } = &cli.command {
        return rerun(manifest);
    }
    let cfg = match &cli.config {
        Some(path) => Some(RunConfig::load(path)?),
        None => None,
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("cams-out"));
    let out = std::path::absolute(&out).unwrap_or(out);
    let mut ctx = Ctx {
        command: cli.command.clone(),
        cfg,
        out,
        mock: cli.mock.as_ref().map(|m| std::path::absolute(m).unwrap_or(m.clone())),
        seed: cli.seed,
        outputs: Vec::new(),
    };
    execute(&mut ctx)
}

fn execute(ctx: &mut Ctx) -> Result<(), CliError> {
    fs::create_dir_all(&ctx.out).map_err(io_err(&ctx.out))?;
    let spec = match &ctx.command {
        Command::Synth { spec } => spec.clone(),
        _ => None,
    };
    if !matches!(ctx.command, Command::Synth { .. }) {
        ctx.cfg()?.validate()?;
    }
    match ctx.command.clone() {
        Command::Ingest => ingest(ctx)?,
        Command::Embed => embed(ctx)?,
        Command::LlmRun => llm_run(ctx)?,
        Command::Aggregate => aggregate(ctx)?,
        Command::Evaluate => evaluate(ctx)?,
        Command::Report => {
            if ctx.cfg()?.llm.is_some() {
                llm_run(ctx)?;
            }
            embed(ctx)?;
            aggregate(ctx)?;
            evaluate(ctx)?;
        }
        Command::Sweep => sweep(ctx)?,
        Command::Synth { spec } => synth(ctx, spec.as_deref())?,
        Command::Rerun { .. } => unreachable!("handled by dispatch"),
    }
    write_manifest(ctx, spec)
}

fn write_manifest(ctx: &Ctx, spec: Option<PathBuf>) -> Result<(), CliError> {
    let mut inputs = BTreeMap::new();
    if let Some(cfg) = &ctx.cfg {
        for p in &cfg.datasets {
            inputs.insert(p.clone(), sha256_file(p)?);
        }
    }
    for p in ctx.mock.iter().chain(spec.iter()) {
        inputs.insert(p.clone(), sha256_file(p)?);
    }
    let mut outputs = ctx.outputs.clone();
    outputs.sort();
    outputs.dedup();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: ctx.command.name().to_string(),
        out: ctx.out.clone(),
        seed: ctx.seed,
        mock: ctx.mock.clone(),
        spec,
        config: ctx.cfg.clone(),
        inputs,
        outputs,
    };
    write_file(&ctx.out.join(MANIFEST), &to_json(&manifest))
}

fn rerun(path: &Path) -> Result<(), CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))?;
    for (input, digest) in &manifest.inputs {
        let now = sha256_file(input).map_err(|_| CliError::Validation(format!("input {} is gone", input.display())))?;
        if &now != digest {
            return Err(CliError::Validation(format!("input {} changed since the recorded run", input.display())));
        }
    }
    let command = match manifest.command.as_str() {
        "ingest" => Command::Ingest,
        "embed" => Command::Embed,
        "llm-run" => Command::LlmRun,
        "aggregate" => Command::Aggregate,
        "evaluate" => Command::Evaluate,
        "report" => Command::Report,
        "sweep" => Command::Sweep,
        "synth" => Command::Synth {
            spec: manifest.spec.clone(),
        },
        other => return Err(CliError::Validation(format!("manifest names unknown command {other:?}"))),
    };
    let mut ctx = Ctx {
        command,
        cfg: manifest.config,
        out: manifest.out,
        mock: manifest.mock,
        seed: manifest.seed,
        outputs: Vec::new(),
    };
    execute(&mut ctx)
}

impl Ctx {
    fn cfg(&self) -> Result<&RunConfig, CliError> {
        self.cfg
            .as_ref()
            .ok_or_else(|| CliError::Validation(format!("`{}` needs --config", self.command.name())))
    }

    fn store_path(&self) -> Result<PathBuf, CliError> {
        Ok(self
            .cfg()?
            .store
            .clone()
            .unwrap_or_else(|| self.out.join("embeddings.camsemb")))
    }

    fn la_path(&self) -> PathBuf {
        self.out.join(LA_ANSWERS)
    }

    fn write(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_file(&path, content)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Configured datasets, plus the L.A. answers of an earlier `llm-run`
    /// when the config has an `llm` section.
    fn parts(&self) -> Result<Vec<Dataset>, CliError> {
        let cfg = self.cfg()?;
        let mut parts = cfg
            .datasets
            .iter()
            .map(|p| load_dataset(p, DatasetFormat::Json))
            .collect::<Result<Vec<_>, _>>()?;
        if cfg.llm.is_some() && self.la_path().is_file() {
            parts.push(load_dataset(&self.la_path(), DatasetFormat::Json)?);
        }
        Ok(parts)
    }

    fn load_store(&self) -> Result<EmbeddingStore, CliError> {
        let path = self.store_path()?;
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "embedding store {} does not exist; run `cams embed` first",
                path.display()
            )));
        }
        Ok(EmbeddingStore::load(&path)?)
    }
}

fn all_roles(parts: &[Dataset]) -> Result<Dataset, CliError> {
    Ok(merge_resources(parts, &ResourceSelection::new(true, true, true))?.dataset)
}

fn check_selections(selections: &[ResourceSelection], merged: &Dataset) -> Result<(), CliError> {
    for sel in selections {
        if let Some(role) = sel.roles().into_iter().find(|r| !merged.has_role(*r)) {
            return Err(CliError::Validation(format!(
                "selection {sel} needs {} answers but none are loaded",
                role.label()
            )));
        }
    }
    Ok(())
}

fn ingest(ctx: &mut Ctx) -> Result<(), CliError> {
    let merged = all_roles(&ctx.parts()?)?;
    let stats = merged.stats();
    let label = ctx.cfg()?.label.clone();
    let header: Vec<String> = ["Data", "Role", "Instances", "Workers", "Answers"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = WorkerRole::ALL
        .iter()
        .map(|r| {
            let s = stats.role(*r);
            vec![
                label.clone(),
                r.label().to_string(),
                stats.instances.to_string(),
                s.workers.to_string(),
                s.answers.to_string(),
            ]
        })
        .collect();
    let table = tsv(&header, &rows);
    print!("{table}");
    ctx.write("dataset_stats.tsv", &table)
}

fn embedding_provider(cfg: &RunConfig) -> Result<Option<(Box<dyn EmbeddingProvider>, usize)>, CliError> {
    let e = &cfg.embedding;
    Ok(match e.provider {
        ProviderKind::Store => None,
        ProviderKind::Precomputed => {
            let p = PrecomputedProvider::load(e.path.as_deref().expect("validated"))?;
            let dim = p.dim();
            Some((Box::new(p), dim))
        }
        ProviderKind::Hashed => {
            let dim = e.dim.expect("validated");
            Some((Box::new(HashedBagProvider { dim }), dim))
        }
        ProviderKind::Http => {
            let dim = e.dim.ok_or_else(|| CliError::Validation("http embeddings need `dim`".into()))?;
            Some((Box::new(HttpProvider::new(e.url.clone().expect("validated"))), dim))
        }
    })
}

fn embed(ctx: &mut Ctx) -> Result<(), CliError> {
    let merged = all_roles(&ctx.parts()?)?;
    let path = ctx.store_path()?;
    let cfg = ctx.cfg()?;
    match embedding_provider(cfg)? {
        None => {
            let store = ctx.load_store()?;
            if let Some(text) = store.first_missing(&merged) {
                return Err(CliError::Validation(format!("embedding store lacks text {text:?}")));
            }
            println!("store {} covers all {} texts", path.display(), merged.texts().len());
        }
        Some((provider, dim)) => {
            let cache = if path.is_file() {
                EmbeddingStore::load(&path)?
            } else {
                EmbeddingStore::new(dim)?
            };
            let opts = EmbedOptions {
                batch_size: cfg.embedding.batch_size,
                retries: cfg.embedding.retries,
                retry_delay: Duration::from_millis(500),
                normalize: cfg.embedding.normalize,
            };
            let (store, report) = embed_dataset(&merged, provider.as_ref(), cache, &opts)?;
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            store.save(&path)?;
            println!(
                "embedded {} texts ({} cached, {} provider calls) into {}",
                report.distinct_texts,
                report.cache_hits,
                report.provider_calls,
                path.display()
            );
        }
    }
    Ok(())
}

fn llm_run(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg()?;
    let mut llm = cfg
        .llm
        .clone()
        .ok_or_else(|| CliError::Validation("config has no `llm` section".into()))?;
    let parts = cfg
        .datasets
        .iter()
        .map(|p| load_dataset(p, DatasetFormat::Json))
        .collect::<Result<Vec<_>, _>>()?;
    let creators = merge_resources(&parts, &ResourceSelection::new(true, false, false))?.dataset;

    let cache_dir = std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .or_else(|| llm.cache_dir.clone())
        .unwrap_or_else(|| ctx.out.join("llm-cache"));
    llm.cache_dir = Some(cache_dir.clone());
    let cache = ResponseCache::open(&cache_dir)?;

    let provider: Box<dyn ChatProvider> = match &ctx.mock {
        Some(path) => Box::new(MockChatProvider::load(path)?),
        None => {
            if llm.endpoint.is_empty() {
                return Err(CliError::Validation("llm.endpoint is empty and no --mock was given".into()));
            }
            Box::new(HttpChatProvider {
                endpoint: llm.endpoint.clone(),
                api_key: llm.api_key_env.as_ref().and_then(|v| std::env::var(v).ok()),
                timeout: Duration::from_secs(120),
            })
        }
    };

    let outcome = run_ensemble(&creators, &llm, provider.as_ref(), &cache)?;
    println!(
        "L.A. answers: {} ({} cached, {} requests, {} failed)",
        outcome.answers.answers().len(),
        outcome.cache_hits,
        outcome.network_calls,
        outcome.failures.len()
    );
    let failures: Vec<Vec<String>> = outcome
        .failures
        .iter()
        .map(|f| vec![f.instance.to_string(), f.worker.to_string(), f.reason.replace(['\t', '\n'], " ")])
        .collect();
    let sources: Vec<Vec<String>> = outcome
        .sources
        .iter()
        .map(|((i, w), s)| vec![i.to_string(), w.to_string(), s.replace(['\t', '\n'], " ")])
        .collect();
    let h = |cols: [&str; 3]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    ctx.write(LA_ANSWERS, &outcome.answers.to_json_string())?;
    ctx.write("llm_failures.tsv", &tsv(&h(["instance", "worker", "reason"]), &failures))?;
    ctx.write("la_sources.tsv", &tsv(&h(["instance", "worker", "source"]), &sources))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellFile {
    selection: ResourceSelection,
    aggregator: AggregatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    la_subset: Option<Vec<cams_core::WorkerId>>,
    answers: EstimatedAnswers,
}

fn cell_name(sel: &ResourceSelection, kind: AggregatorKind) -> String {
    format!("cells/{}__{}.json", sel.label(), kind)
}

fn params(cfg: &RunConfig) -> AggregatorParams {
    AggregatorParams { rasa: cfg.rasa.clone() }
}

fn aggregate(ctx: &mut Ctx) -> Result<(), CliError> {
    let parts = ctx.parts()?;
    let cfg = ctx.cfg()?.clone();
    check_selections(&cfg.selections, &all_roles(&parts)?)?;
    let store = ctx.load_store()?;
    let cells = run_matrix(&parts, &store, &cfg.selections, &cfg.aggregators, &params(&cfg))?;
    for cell in &cells {
        let file = CellFile {
            selection: cell.selection.clone(),
            aggregator: cell.kind,
            la_subset: cell.selection.la_subset.clone(),
            answers: cell.answers.clone(),
        };
        ctx.write(&cell_name(&cell.selection, cell.kind), &to_json(&file))?;
    }
    println!("wrote {} result cells", cells.len());
    Ok(())
}

fn read_cells(ctx: &Ctx) -> Result<Vec<Cell>, CliError> {
    let cfg = ctx.cfg()?;
    let mut cells = Vec::new();
    for sel in &cfg.selections {
        for kind in &cfg.aggregators {
            let path = ctx.out.join(cell_name(sel, *kind));
            let raw = fs::read_to_string(&path).map_err(|_| {
                CliError::Validation(format!("missing result cell {}; run `cams aggregate` first", path.display()))
            })?;
            let file: CellFile = serde_json::from_str(&raw)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            cells.push(Cell {
                selection: sel.clone(),
                kind: *kind,
                answers: file.answers,
            });
        }
    }
    Ok(cells)
}

fn build_report(
    cfg: &RunConfig,
    merged: &Dataset,
    store: &EmbeddingStore,
    selections: Vec<ResourceSelection>,
    cells: &[Cell],
) -> Result<Report, CliError> {
    let store_for = |m: MetricKind| (m == MetricKind::EmbSim).then_some(store);
    let mut quality = Vec::new();
    for &metric in &cfg.metrics {
        let mut per_role = BTreeMap::new();
        for role in WorkerRole::ALL {
            if merged.has_role(role) {
                per_role.insert(role, worker_quality(merged, role, metric, store_for(metric))?);
            }
        }
        quality.push((metric, per_role));
    }
    let mut scores = Vec::new();
    for cell in cells {
        for &metric in &cfg.metrics {
            scores.push(CellScore {
                selection: cell.selection.clone(),
                kind: cell.kind,
                metric,
                score: score_estimates(&cell.answers, merged, metric, store_for(metric))?,
            });
        }
    }
    Ok(Report {
        label: cfg.label.clone(),
        stats: merged.stats(),
        quality,
        selections,
        kinds: cfg.aggregators.clone(),
        cells: scores,
    })
}

fn write_report(ctx: &mut Ctx, dir: &str, report: &Report) -> Result<(), CliError> {
    let prefix = if dir.is_empty() { String::new() } else { format!("{dir}/") };
    ctx.write(&format!("{prefix}report.md"), &report.markdown())?;
    for (metric, _) in &report.quality {
        ctx.write(&format!("{prefix}worker_quality_{metric}.tsv"), &report.quality_tsv(*metric))?;
        ctx.write(&format!("{prefix}aggregation_{metric}.tsv"), &report.aggregation_tsv(*metric))?;
    }
    Ok(())
}

fn evaluate(ctx: &mut Ctx) -> Result<(), CliError> {
    let merged = all_roles(&ctx.parts()?)?;
    let store = ctx.load_store()?;
    let cells = read_cells(ctx)?;
    let cfg = ctx.cfg()?.clone();
    let report = build_report(&cfg, &merged, &store, cfg.selections.clone(), &cells)?;
    write_report(ctx, "", &report)?;
    println!("wrote {}", ctx.out.join("report.md").display());
    Ok(())
}

fn sweep(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg()?.clone();
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Validation("config has no `sweep` section".into()))?;
    let parts = ctx.parts()?;
    let merged = all_roles(&parts)?;
    if !merged.has_role(WorkerRole::LlmAggregator) {
        return Err(CliError::Validation("sweep needs L.A. answers; run `cams llm-run` first".into()));
    }
    let store = ctx.load_store()?;
    let explicit = |count: usize| sweep.subsets.get(&count).cloned();
    let runs = run_sweep(&parts, &store, &sweep.la_counts, &explicit, &cfg.aggregators, &params(&cfg))?;

    let mut long = Vec::new();
    for run in &runs {
        let selections: Vec<ResourceSelection> = run.cells.iter().map(|c| c.selection.clone()).fold(Vec::new(), |mut acc, s| {
            if !acc.contains(&s) {
                acc.push(s);
            }
            acc
        });
        let report = build_report(&cfg, &merged, &store, selections, &run.cells)?;
        for c in &report.cells {
            long.push(vec![
                run.la_count.to_string(),
                c.selection.label(),
                c.selection.group().to_string(),
                c.kind.to_string(),
                c.metric.to_string(),
                format!("{:.4}", c.score),
            ]);
        }
        write_report(ctx, &format!("sweep/la_{}", run.la_count), &report)?;
    }
    let header: Vec<String> = ["la_count", "selection", "group", "aggregator", "metric", "score"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    ctx.write("sweep/sweep_long.tsv", &tsv(&header, &long))?;
    println!("wrote {} sweep reports", runs.len());
    Ok(())
}

fn synth(ctx: &mut Ctx, spec: Option<&Path>) -> Result<(), CliError> {
    let seed = ctx.seed.unwrap_or(0);
    let synth_cfg = match spec {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let mut c: SynthConfig =
                serde_json::from_str(&raw).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            if let Some(s) = ctx.seed {
                c.seed = s;
            }
            c
        }
        None => SynthConfig::demo(seed),
    };
    let crowd = generate(&synth_cfg)?;
    ctx.write("dataset.json", &crowd.dataset.to_json_string())?;
    let store_path = ctx.out.join("embeddings.camsemb");
    crowd.store.save(&store_path)?;
    ctx.outputs.push("embeddings.camsemb".into());

    let la = crowd.dataset.workers_with_role(WorkerRole::LlmAggregator).len();
    let counts: Vec<usize> = [1, 3, 5].into_iter().filter(|&k| k <= la).collect();
    let mut run = serde_json::json!({
        "datasets": ["dataset.json"],
        "store": "embeddings.camsemb",
        "embedding": {"provider": "store"},
        "label": "SYN",
        "out": "results",
    });
    if !counts.is_empty() {
        run["sweep"] = serde_json::json!({ "la_counts": counts });
    }
    ctx.write("run.json", &to_json(&run))?;
    println!(
        "synthetic crowd: {} instances, {} answers (seed {})",
        crowd.dataset.num_instances(),
        crowd.dataset.answers().len(),
        synth_cfg.seed
    );
    Ok(())
}
