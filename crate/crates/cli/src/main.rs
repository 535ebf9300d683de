//! `kdvlp`: corpus generation, pretraining, probing, ablation and attention maps.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kdvlp::corpus::{corpus_files, generate_synthetic, load_corpus_with, save_corpus, SyntheticSceneSpec};
use kdvlp::fusion::{attention_map, attention_row, write_csv, write_pgm, HeadSelect};
use kdvlp::pretext::{make_embedder, prepare_corpus};
use kdvlp::probe::{probe_checkpoint, run_ablation, standard_cells, AblationCell};
use kdvlp::trainer::{load_checkpoint, train, TrainOptions};
use kdvlp::{Error, TrainConfig};

use manifest::{hash_file, hash_tree, RunManifest};

#[derive(Parser)]
#[command(name = "kdvlp", version, about = "Object-aware vision-language pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounded corpus.
    Generate(GenerateArgs),
    /// Pretrain a model on a corpus.
    Pretrain(PretrainArgs),
    /// Probe a checkpoint on an evaluation corpus.
    Probe(ProbeArgs),
    /// Train and probe one model per task subset.
    Ablate(AblateArgs),
    /// Export word-to-image attention maps.
    Attn(AttnArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; must not exist or be empty unless --force.
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene spec JSON; defaults to the built-in 8-category spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to continue from; its run directory may be reused as --out.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 100)]
    pool: usize,
    /// Seed for pool assignment, negatives and masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    eval_corpus: PathBuf,
    /// Comma list of tasks for one cell, repeatable; defaults to the five standard cells.
    #[arg(long)]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pool: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// `pair:word` request, repeatable (pair index in the corpus, word index in its caption).
    #[arg(long = "request", required = true)]
    requests: Vec<String>,
    /// Layer to read; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
    /// Head index, or omitted for the mean over heads.
    #[arg(long)]
    head: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

type CliResult<T> = std::result::Result<T, String>;

fn err(e: Error) -> String {
    e.to_string()
}

fn prepare_out(out: &OutArgs, allow_existing: bool) -> CliResult<()> {
    if out.out.exists() {
        let non_empty = fs::read_dir(&out.out).map_err(|e| e.to_string())?.next().is_some();
        if non_empty && !out.force && !allow_existing {
            return Err(format!("output directory {} is not empty (use --force)", out.out.display()));
        }
    }
    fs::create_dir_all(&out.out).map_err(|e| format!("{}: {e}", out.out.display()))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut config = match path {
        Some(p) => TrainConfig::load(p).map_err(err)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(err)?;
    Ok(config)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn corpus_hash(root: &Path) -> CliResult<String> {
    let files = corpus_files(root).map_err(err)?;
    hash_tree(root, &files).map_err(|e| e.to_string())
}

fn cmd_generate(a: GenerateArgs) -> CliResult<RunManifest> {
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str::<SyntheticSceneSpec>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => SyntheticSceneSpec::default(),
    };
    prepare_out(&a.out, false)?;
    let mut m = RunManifest::start("generate", &a.out.out);
    m.config_path = a.spec.as_ref().map(|p| p.display().to_string());
    m.seed = Some(a.seed);
    let corpus = generate_synthetic(&spec, a.count, a.seed).map_err(err)?;
    save_corpus(&corpus, &a.out.out).map_err(err)?;
    m.corpus_hash = Some(corpus_hash(&a.out.out)?);
    m.inputs.insert("count".into(), a.count.to_string());
    Ok(m)
}

fn cmd_pretrain(a: PretrainArgs) -> CliResult<RunManifest> {
    let config = load_config(a.config.as_deref(), a.seed)?;
    let resume = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p).map_err(err)?;
            if !ckpt.check_config(&config) && !a.out.force {
                return Err(format!(
                    "config hash {} differs from the checkpoint's {} (use --force to resume anyway)",
                    config.hash(),
                    ckpt.config_hash
                ));
            }
            Some(ckpt)
        }
        None => None,
    };
    prepare_out(&a.out, resume.is_some())?;
    let mut m = RunManifest::start("pretrain", &a.out.out);
    m.config_path = a.config.as_ref().map(|p| p.display().to_string());
    m.config_hash = Some(config.hash());
    m.seed = Some(config.seed);
    m.corpus_hash = Some(corpus_hash(&a.corpus)?);
    if let Some(p) = &a.resume {
        m.inputs.insert("resume".into(), hash_file(p).map_err(|e| e.to_string())?);
    }
    write_json(&a.out.out.join("config.json"), &config)?;
    let corpus = load_corpus_with(&a.corpus, config.max_proposals).map_err(err)?;
    let outcome = train(&corpus, &config, TrainOptions { out_dir: Some(a.out.out.clone()), resume, stop_at: None })
        .map_err(err)?;
    log::info!("trained to step {}", outcome.checkpoint.step);
    Ok(m)
}

fn cmd_probe(a: ProbeArgs) -> CliResult<RunManifest> {
    prepare_out(&a.out, false)?;
    let mut m = RunManifest::start("probe", &a.out.out);
    let ckpt = load_checkpoint(&a.checkpoint).map_err(err)?;
    m.config_hash = Some(ckpt.config_hash.clone());
    m.seed = Some(a.seed);
    m.corpus_hash = Some(corpus_hash(&a.corpus)?);
    m.inputs.insert("checkpoint".into(), hash_file(&a.checkpoint).map_err(|e| e.to_string())?);
    let eval = load_corpus_with(&a.corpus, ckpt.config.max_proposals).map_err(err)?;
    let report = probe_checkpoint(&ckpt, &eval, a.pool, a.seed).map_err(err)?;
    write_json(&a.out.out.join("probe.json"), &report)?;
    Ok(m)
}

fn cmd_ablate(a: AblateArgs) -> CliResult<RunManifest> {
    let config = load_config(a.config.as_deref(), a.seed)?;
    let cells = if a.tasks.is_empty() {
        standard_cells()
    } else {
        a.tasks.iter().map(|t| AblationCell::from_tasks(t)).collect::<Result<Vec<_>, _>>().map_err(err)?
    };
    prepare_out(&a.out, false)?;
    let mut m = RunManifest::start("ablate", &a.out.out);
    m.config_path = a.config.as_ref().map(|p| p.display().to_string());
    m.config_hash = Some(config.hash());
    m.seed = Some(config.seed);
    m.corpus_hash = Some(corpus_hash(&a.corpus)?);
    m.inputs.insert("eval_corpus".into(), corpus_hash(&a.eval_corpus)?);
    let train_corpus = load_corpus_with(&a.corpus, config.max_proposals).map_err(err)?;
    let eval = load_corpus_with(&a.eval_corpus, config.max_proposals).map_err(err)?;
    let table = run_ablation(&train_corpus, &eval, &config, &cells, a.pool, config.seed).map_err(err)?;
    write_json(&a.out.out.join("ablation.json"), &table)?;
    let text = table.to_text();
    fs::write(a.out.out.join("ablation.txt"), &text).map_err(|e| e.to_string())?;
    print!("{text}");
    Ok(m)
}

fn cmd_attn(a: AttnArgs) -> CliResult<RunManifest> {
    let requests = a
        .requests
        .iter()
        .map(|r| {
            let (p, w) = r.split_once(':').ok_or_else(|| format!("request {r:?} is not pair:word"))?;
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("request {r:?} is not pair:word"));
            Ok((parse(p)?, parse(w)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    prepare_out(&a.out, false)?;
    let mut m = RunManifest::start("attn", &a.out.out);
    let ckpt = load_checkpoint(&a.checkpoint).map_err(err)?;
    m.config_hash = Some(ckpt.config_hash.clone());
    m.corpus_hash = Some(corpus_hash(&a.corpus)?);
    m.inputs.insert("checkpoint".into(), hash_file(&a.checkpoint).map_err(|e| e.to_string())?);
    let model = ckpt.model().map_err(err)?;
    let corpus = load_corpus_with(&a.corpus, ckpt.config.max_proposals).map_err(err)?;
    let embedder = make_embedder(&ckpt.config).map_err(err)?;
    let prepared = prepare_corpus(&corpus, &ckpt.vocab, embedder.as_ref(), &ckpt.config).map_err(err)?;
    let layer = a.layer.unwrap_or(model.fusion.n_layers() - 1);
    let head = a.head.map_or(HeadSelect::Mean, HeadSelect::Head);
    for (pair, word) in requests {
        if pair >= prepared.len() {
            return Err(format!("pair {pair} outside a corpus of {}", prepared.len()));
        }
        let mut g = kdvlp::autograd::Graph::new(&model.store);
        let enc = model
            .encode(&mut g, prepared.image(pair), &prepared.examples[pair].token_ids, None, true)
            .map_err(err)?;
        let raw = attention_row(&enc.states, word, layer, head).map_err(err)?;
        let map = attention_map(&enc.states, word, layer, head).map_err(err)?;
        let stem = a.out.out.join(format!("pair{pair}-word{word}-layer{layer}"));
        write_csv(&raw, &stem.with_extension("csv")).map_err(err)?;
        write_pgm(&map, &stem.with_extension("pgm")).map_err(err)?;
    }
    Ok(m)
}

fn run(cli: Cli) -> CliResult<()> {
    let manifest = match cli.command {
        Command::Generate(a) => cmd_generate(a)?,
        Command::Pretrain(a) => cmd_pretrain(a)?,
        Command::Probe(a) => cmd_probe(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
        Command::Attn(a) => cmd_attn(a)?,
    };
    manifest.finish().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("KDVLP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.lines().next().unwrap_or("unknown failure"));
            ExitCode::FAILURE
        }
    }
}
