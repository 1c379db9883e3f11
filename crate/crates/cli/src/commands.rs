//! Subcommand definitions and handlers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use spaceedit::editops::{
    load_dataset, mix_seed, synthesize_dataset, synthesize_family_pairs, write_dataset, BaseSource,
    ImagePair, Split, TAG_VOCAB,
};
use spaceedit::generator::{GeneratorBundle, LatentInput};
use spaceedit::inversion::{
    average_codes, invert_batch, invert_conditional, invert_identity, transfer_style,
};
use spaceedit::latent_analysis::{export_traversal, layer_sensitivity, sefa_directions};
use spaceedit::lgie::{
    mapper_l1, predict_code, train_embedder, train_mapper, zero_shot_edit, JointEmbedder,
    MapperHead, ZeroShotConfig, ZeroShotInit,
};
use spaceedit::metrics::{
    diversity_lpips_with, fid_score, l1_error, ssim, EvalReport, FeatureExtractor, LatentSampling,
};
use spaceedit::spacesearch::{
    build_index, cluster_report, spherical_kmeans_restarts, CodeIndex, KMEANS_RESTARTS,
};
use spaceedit::{Image, Mask};

use crate::config::{RunConfig, Workspace};
use crate::service;

/// JSON schema every `eval` report satisfies.
pub const EVAL_REPORT_SCHEMA: &str = include_str!("../schema/eval_report.schema.json");

/// Metric keys always present in an `eval` report.
pub const CORE_METRICS: [&str; 8] = [
    "init_error",
    "conditional_error",
    "identity_error",
    "conditional_ssim",
    "diversity_lpips",
    "diversity_lpips_constant_w",
    "fid_trained",
    "fid_untrained",
];

#[derive(Debug, Parser)]
#[command(
    name = "spaceedit",
    version,
    about = "Learned editing space for global color and tone edits"
)]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Workspace root (overrides the environment and the config file).
    #[arg(long, global = true, value_name = "DIR")]
    pub workspace: Option<PathBuf>,
    /// Seed for the run and every sub-configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. `--set train.total_images=800`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a paired dataset with known recipes.
    Synth(SynthArgs),
    /// Train the conditional generator or the language heads.
    Train(TrainArgs),
    /// Invert a before/after pair (or one image) into the editing space.
    Invert(InvertArgs),
    /// Semantic directions, layer sensitivity and traversals.
    Analyze(AnalyzeArgs),
    /// Invert a dataset into a searchable code index.
    Index(IndexArgs),
    /// Nearest neighbours of an indexed pair.
    Retrieve(RetrieveArgs),
    /// Spherical k-means over an index.
    Cluster(ClusterArgs),
    /// Edit an image from a text request.
    EditText(EditTextArgs),
    /// Transfer the edit of exemplar pairs to an image.
    EditExemplar(EditExemplarArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint file; defaults to the run's latest checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run name under `checkpoints/`.
    #[arg(long, default_value = "default")]
    pub run: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of pairs (defaults to `dataset.n_pairs`).
    #[arg(long)]
    pub n: Option<usize>,
    /// Pairs per recipe family instead of a mixed dataset.
    #[arg(long, conflicts_with = "n")]
    pub per_family: Option<usize>,
    #[arg(long, default_value = "default")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Gan,
    Lgie,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "gan")]
    pub stage: Stage,
    #[arg(long, default_value = "default")]
    pub dataset: String,
    #[arg(long, default_value = "default")]
    pub run: String,
    /// Continue from the run's latest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Before image (PNG).
    #[arg(long, requires = "out", conflicts_with = "pair")]
    pub input: Option<PathBuf>,
    /// After image; identity inversion when omitted.
    #[arg(long, requires = "input")]
    pub target: Option<PathBuf>,
    /// Dataset pair to invert instead of files.
    #[arg(long, requires = "out")]
    pub pair: Option<String>,
    #[arg(long, default_value = "default")]
    pub dataset: String,
    /// Output prefix; writes `<out>.json` and `<out>.png`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// First and last-plus-one style layer, e.g. `0..6`; all layers by default.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Image for a traversal strip along the top direction.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "-3,-1.5,0,1.5,3")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value = "default")]
    pub dataset: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn admits(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Val => s == Split::Val,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "default")]
    pub dataset: String,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Index name (defaults to the dataset name).
    #[arg(long)]
    pub name: Option<String>,
    /// Index at most this many pairs.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long, default_value = "default")]
    pub index: String,
    #[arg(long)]
    pub pair_id: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long, default_value = "default")]
    pub index: String,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Seeded k-means runs; the lowest-inertia one is kept.
    #[arg(long, default_value_t = KMEANS_RESTARTS)]
    pub restarts: usize,
}

#[derive(Debug, Args)]
pub struct EditTextArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub request: String,
    /// Weight of the source-similarity term (zero-shot only).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Edit strength between the identity code (0) and the edit (1).
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f32,
    /// Region to edit (PNG, nonzero = edit).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Use the trained mapper instead of zero-shot optimization.
    #[arg(long)]
    pub mapper: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditExemplarArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    /// Exemplar before image.
    #[arg(long, requires = "after", conflicts_with = "exemplar_ids")]
    pub before: Option<PathBuf>,
    #[arg(long, requires = "before")]
    pub after: Option<PathBuf>,
    /// Dataset pairs whose averaged code is transferred.
    #[arg(long, value_delimiter = ',')]
    pub exemplar_ids: Vec<String>,
    #[arg(long, default_value = "default")]
    pub dataset: String,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "default")]
    pub dataset: String,
    /// Report name under `reports/`.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "default")]
    pub index: String,
    /// Dataset the index was built from (exemplar images and thumbnails).
    #[arg(long, default_value = "default")]
    pub dataset: String,
    /// Listen address (defaults to `serve.addr`).
    #[arg(long)]
    pub addr: Option<String>,
}

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, arguments or missing inputs (exit 2).
    Config(anyhow::Error),
    /// Everything else (exit 1).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<spaceedit::Error> for Failure {
    fn from(e: spaceedit::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T> = Result<T, Failure>;

trait OrConfig<T> {
    fn or_config(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrConfig<T> for Result<T, E> {
    fn or_config(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
}

fn existing(path: &Path, what: &str) -> CmdResult<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Failure::Config(anyhow!(
            "{what} `{}` not found",
            path.display()
        )))
    }
}

/// Sets `key` (dotted path) to `value`, parsed as JSON when possible.
pub fn apply_override(cfg: &RunConfig, spec: &str) -> anyhow::Result<RunConfig> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not KEY=VALUE"))?;
    let mut root = serde_json::to_value(cfg)?;
    let mut slot = &mut root;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    serde_json::from_value(root).with_context(|| format!("applying override `{spec}`"))
}

/// Sets the root seed and every seed nested below it.
pub fn apply_seed(cfg: &mut RunConfig, seed: u64) {
    cfg.seed = seed;
    cfg.generator.seed = seed;
    cfg.train.seed = seed;
    cfg.inversion.seed = seed;
    cfg.index_inversion.seed = seed;
    cfg.lgie.embedder.seed = seed;
    cfg.lgie.mapper.seed = seed;
}

/// Final configuration for a parsed command line.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    for o in &cli.overrides {
        cfg = apply_override(&cfg, o)?;
    }
    if let Some(seed) = cli.seed {
        apply_seed(&mut cfg, seed);
    }
    if let Some(ws) = &cli.workspace {
        cfg.workspace = ws.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> CmdResult<()> {
    let cfg = resolve_config(&cli).or_config()?;
    let ws = cfg.workspace();
    ws.create()?;
    match cli.command {
        Command::Synth(a) => synth(&cfg, &ws, a),
        Command::Train(a) => train(&cfg, &ws, a),
        Command::Invert(a) => invert(&cfg, &ws, a),
        Command::Analyze(a) => analyze(&cfg, &ws, a),
        Command::Index(a) => index(&cfg, &ws, a),
        Command::Retrieve(a) => retrieve(&ws, a),
        Command::Cluster(a) => cluster(&cfg, &ws, a),
        Command::EditText(a) => edit_text(&cfg, &ws, a),
        Command::EditExemplar(a) => edit_exemplar(&cfg, &ws, a),
        Command::Eval(a) => eval(&cfg, &ws, a),
        Command::Serve(a) => serve(&cfg, &ws, a),
    }
}

fn print_json(v: &impl Serialize) -> CmdResult<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(v).map_err(anyhow::Error::from)?
    );
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> CmdResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let bytes = serde_json::to_vec_pretty(v).map_err(anyhow::Error::from)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn checkpoint_path(ws: &Workspace, m: &ModelArgs) -> PathBuf {
    m.checkpoint
        .clone()
        .unwrap_or_else(|| ws.run_dir(&m.run).join("latest.ckpt"))
}

fn load_bundle(ws: &Workspace, m: &ModelArgs) -> CmdResult<GeneratorBundle> {
    let path = existing(&checkpoint_path(ws, m), "checkpoint")?;
    GeneratorBundle::load(&path).or_config()
}

fn load_pairs(ws: &Workspace, name: &str) -> CmdResult<Vec<ImagePair>> {
    let dir = existing(&ws.dataset(name), "dataset")?;
    Ok(load_dataset(&dir)?)
}

fn load_image(path: &Path, res: usize) -> CmdResult<Image> {
    let im = Image::load_png(existing(path, "image")?).or_config()?;
    Ok(if im.width() == res && im.height() == res {
        im
    } else {
        im.resized(res, res)
    })
}

fn load_embedder(ws: &Workspace, run: &str) -> CmdResult<JointEmbedder> {
    let path = existing(
        &ws.run_dir(run).join("embedder.json"),
        "embedder (run `train --stage lgie`)",
    )?;
    JointEmbedder::load(&path).or_config()
}

fn find_pairs<'a>(pairs: &'a [ImagePair], ids: &[String]) -> CmdResult<Vec<&'a ImagePair>> {
    ids.iter()
        .map(|id| {
            pairs
                .iter()
                .find(|p| &p.id == id)
                .ok_or_else(|| Failure::Config(anyhow!("unknown pair `{id}`")))
        })
        .collect()
}

fn synth(cfg: &RunConfig, ws: &Workspace, a: SynthArgs) -> CmdResult<()> {
    let res = cfg.dataset.resolution;
    let pairs = match a.per_family {
        Some(per) => synthesize_family_pairs(per, cfg.seed, res).or_config()?,
        None => {
            let source = match &cfg.dataset.source_dir {
                Some(d) => BaseSource::Directory(existing(d, "source directory")?),
                None => BaseSource::Procedural,
            };
            synthesize_dataset(source, a.n.unwrap_or(cfg.dataset.n_pairs), cfg.seed, res)
                .or_config()?
        }
    };
    let dir = ws.dataset(&a.name);
    let manifest = write_dataset(&dir, &pairs)?;
    let count = |s: Split| pairs.iter().filter(|p| p.split == s).count();
    print_json(&json!({
        "manifest": manifest,
        "pairs": pairs.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "dataset_hash": spaceedit::editops::dataset_hash(&pairs)?,
    }))
}

fn train(cfg: &RunConfig, ws: &Workspace, a: TrainArgs) -> CmdResult<()> {
    let pairs = load_pairs(ws, &a.dataset)?;
    let dir = ws.run_dir(&a.run);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    match a.stage {
        Stage::Gan => {
            let resume = if a.resume {
                let p = existing(&dir.join("latest.ckpt"), "checkpoint to resume")?;
                Some(GeneratorBundle::load(&p).or_config()?)
            } else {
                None
            };
            write_json(&dir.join("config.json"), cfg)?;
            let out = spaceedit::training::TrainOutput {
                checkpoint_dir: Some(dir.clone()),
                log_path: Some(dir.join("log.jsonl")),
            };
            let bundle =
                spaceedit::training::train(&pairs, &cfg.generator, &cfg.train, resume, &out)?;
            print_json(&json!({
                "checkpoint": dir.join("latest.ckpt"),
                "steps": bundle.meta.steps,
                "checkpoint_hash": bundle.checkpoint_hash(),
            }))
        }
        Stage::Lgie => {
            let bundle = load_bundle(
                ws,
                &ModelArgs {
                    checkpoint: None,
                    run: a.run.clone(),
                },
            )?;
            let train: Vec<&ImagePair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
            let val: Vec<&ImagePair> = pairs.iter().filter(|p| p.split == Split::Val).collect();
            let (embedder, etrace) = train_embedder(&train, &cfg.lgie.embedder).or_config()?;
            embedder.save(&dir.join("embedder.json"))?;
            let hash = bundle.generator_hash();
            let (mapper, mtrace) = train_mapper(&bundle, &embedder, &train, &cfg.lgie.mapper)?;
            if bundle.generator_hash() != hash {
                return Err(anyhow!("generator weights changed during mapper training").into());
            }
            mapper.save(&dir.join("mapper.json"))?;
            let (out_l1, in_l1) = if val.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mapper_l1(&bundle, &mapper, &embedder, &val)?
            };
            print_json(&json!({
                "embedder_loss": [etrace.first(), etrace.last()],
                "mapper_loss": [mtrace.first(), mtrace.last()],
                "val_l1_output": out_l1,
                "val_l1_input": in_l1,
                "generator_hash": hash,
            }))
        }
    }
}

#[derive(Serialize)]
struct InvertOutput {
    id: String,
    w: Vec<f32>,
    init_error: f64,
    final_error: f64,
    trace: Vec<f64>,
    checkpoint_hash: String,
}

fn invert(cfg: &RunConfig, ws: &Workspace, a: InvertArgs) -> CmdResult<()> {
    let bundle = load_bundle(ws, &a.model)?;
    let res = bundle.resolution();
    let (id, input, target) = match (&a.input, &a.pair) {
        (Some(inp), _) => {
            let input = load_image(inp, res)?;
            let target = match &a.target {
                Some(t) => load_image(t, res)?,
                None => input.clone(),
            };
            (inp.display().to_string(), input, target)
        }
        (None, Some(pid)) => {
            let pairs = load_pairs(ws, &a.dataset)?;
            let p = find_pairs(&pairs, std::slice::from_ref(pid))?[0];
            (p.id.clone(), p.before.clone(), p.after.clone())
        }
        (None, None) => return Err(Failure::Config(anyhow!("invert needs --input or --pair"))),
    };
    let r = invert_conditional(&bundle, &input, &target, &cfg.inversion)?;
    let out = a.out.expect("clap requires --out");
    let render = bundle.generate(&input, &LatentInput::Style(r.style.clone()))?;
    render.save_png(out.with_extension("png"))?;
    let record = InvertOutput {
        id,
        w: r.style.w.clone(),
        init_error: r.init_error,
        final_error: r.final_error,
        trace: r.trace,
        checkpoint_hash: bundle.checkpoint_hash(),
    };
    write_json(&out.with_extension("json"), &record)?;
    print_json(
        &json!({ "id": record.id, "init_error": record.init_error, "final_error": record.final_error }),
    )
}

fn parse_range(s: &str) -> anyhow::Result<std::ops::Range<usize>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| anyhow!("layer range `{s}` is not START..END"))?;
    Ok(a.trim().parse()?..b.trim().parse()?)
}

fn analyze(cfg: &RunConfig, ws: &Workspace, a: AnalyzeArgs) -> CmdResult<()> {
    let bundle = load_bundle(ws, &a.model)?;
    let range = match &a.layers {
        Some(s) => parse_range(s).or_config()?,
        None => 0..bundle.n_style_layers(),
    };
    let basis = sefa_directions(&bundle, range, a.k).or_config()?;
    let reports = ws.reports();
    write_json(&reports.join("sefa.json"), &basis)?;

    // probes from the dataset when present, procedural images otherwise
    let res = bundle.resolution();
    let probes: Vec<Image> = match load_pairs(ws, &a.dataset) {
        Ok(pairs) => pairs
            .iter()
            .filter(|p| p.split == Split::Test)
            .take(8)
            .map(|p| p.before.clone())
            .collect(),
        Err(_) => Vec::new(),
    };
    let probes = if probes.len() >= 4 {
        probes
    } else {
        (0..8)
            .map(|i| {
                spaceedit::editops::procedural_image(mix_seed(cfg.seed, i), res, res).quantized()
            })
            .collect()
    };
    let codes: Vec<Vec<f32>> = (0..probes.len())
        .map(|i| {
            let z = latent(cfg.seed ^ 0xa11, i as u64, bundle.config.z_dim);
            bundle.map_latent(&z)
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Image> = probes.iter().collect();
    let sens = layer_sensitivity(&bundle, &refs, &codes, 1.0, cfg.seed)?;
    write_json(&reports.join("layer_sensitivity.json"), &sens)?;

    let mut strip = None;
    if let Some(path) = &a.image {
        let image = load_image(path, res)?;
        let w0 = invert_identity(&bundle, &image, &cfg.index_inversion)?
            .style
            .w;
        let png = reports.join("traversal.png");
        export_traversal(
            &bundle,
            &image,
            &w0,
            &basis.directions[0],
            &a.alphas,
            Some(0),
            &png,
        )?;
        strip = Some(png);
    }
    print_json(&json!({
        "eigenvalues": basis.eigenvalues,
        "layer_scores": sens.layers.iter().map(|l| l.score).collect::<Vec<_>>(),
        "top_third_mean": sens.top_third_mean,
        "bottom_third_mean": sens.bottom_third_mean,
        "traversal": strip,
    }))
}

/// Deterministic standard-normal latent.
pub fn latent(seed: u64, index: u64, dim: usize) -> Vec<f32> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn index(cfg: &RunConfig, ws: &Workspace, a: IndexArgs) -> CmdResult<()> {
    let bundle = load_bundle(ws, &a.model)?;
    let pairs = load_pairs(ws, &a.dataset)?;
    let mut chosen: Vec<&ImagePair> = pairs.iter().filter(|p| a.split.admits(p.split)).collect();
    if let Some(n) = a.limit {
        chosen.truncate(n);
    }
    if chosen.is_empty() {
        return Err(Failure::Config(anyhow!(
            "no pairs selected from dataset `{}`",
            a.dataset
        )));
    }
    let idx = build_index(&bundle, &chosen, &cfg.index_inversion)?;
    let path = ws.index(a.name.as_deref().unwrap_or(&a.dataset));
    idx.save(&path)?;
    print_json(&json!({ "index": path, "entries": idx.len(), "skipped": idx.meta.skipped }))
}

fn load_index(ws: &Workspace, name: &str) -> CmdResult<CodeIndex> {
    let path = existing(&ws.index(name), "index")?;
    CodeIndex::load(&path).or_config()
}

fn retrieve(ws: &Workspace, a: RetrieveArgs) -> CmdResult<()> {
    let idx = load_index(ws, &a.index)?;
    let hits = service::neighbors(&idx, &a.pair_id, a.k)
        .map_err(|e| Failure::Config(anyhow!(e.message)))?;
    print_json(&json!({ "pair_id": a.pair_id, "neighbors": hits }))
}

fn cluster(cfg: &RunConfig, ws: &Workspace, a: ClusterArgs) -> CmdResult<()> {
    let idx = load_index(ws, &a.index)?;
    if a.k == 0 || a.k > idx.len() {
        return Err(Failure::Config(anyhow!("k must be in 1..={}", idx.len())));
    }
    let c = spherical_kmeans_restarts(&idx, a.k, cfg.seed, a.max_iter, a.restarts).or_config()?;
    let report = cluster_report(&idx, &c, &TAG_VOCAB, 3, 4)?;
    let path = ws
        .reports()
        .join(format!("clusters-{}-k{}.json", a.index, a.k));
    write_json(&path, &report)?;
    println!("purity {:.4} over {} clusters", report.purity, report.k);
    for s in &report.clusters {
        let tags: Vec<String> = s.tags.iter().map(|(t, n)| format!("{t}:{n}")).collect();
        println!("{:>3}  {:>4}  {}", s.cluster, s.size, tags.join(" "));
    }
    Ok(())
}

fn edit_text(cfg: &RunConfig, ws: &Workspace, a: EditTextArgs) -> CmdResult<()> {
    if !(0.0..=1.5).contains(&a.alpha) {
        return Err(Failure::Config(anyhow!("alpha must lie in [0, 1.5]")));
    }
    let bundle = load_bundle(ws, &a.model)?;
    let embedder = load_embedder(ws, &a.model.run)?;
    let image = load_image(&a.image, bundle.resolution())?;
    let mask = match &a.mask {
        Some(p) => Some(Mask::load_png(existing(p, "mask")?).or_config()?),
        None => None,
    };
    let w0 = invert_identity(&bundle, &image, &cfg.inversion)?.style.w;
    let (w, trace) = if a.mapper {
        let path = existing(&ws.run_dir(&a.model.run).join("mapper.json"), "mapper")?;
        let mapper = MapperHead::load(&path, embedder.config.dim).or_config()?;
        (
            predict_code(&mapper, &embedder, &image, &a.request).or_config()?,
            Vec::new(),
        )
    } else {
        let mut zs = ZeroShotConfig {
            init: ZeroShotInit::Code(w0.clone()),
            ..cfg.lgie.zero_shot.clone()
        };
        if let Some(l) = a.lambda {
            zs.lambdas = vec![l];
        }
        let r = zero_shot_edit(&bundle, &embedder, &image, &a.request, mask.as_ref(), &zs)
            .or_config()?;
        let c = r.chosen();
        (c.w.clone(), c.trace.clone())
    };
    let out = service::render_edit(&bundle, &image, &w0, &w, a.alpha, mask.as_ref())?;
    out.save_png(&a.out)?;
    write_json(
        &a.out.with_extension("json"),
        &json!({ "request": a.request, "alpha": a.alpha, "w": w, "objective_trace": trace }),
    )?;
    print_json(
        &json!({ "out": a.out, "mean_luma_before": image.mean_luma(), "mean_luma_after": out.mean_luma() }),
    )
}

fn edit_exemplar(cfg: &RunConfig, ws: &Workspace, a: EditExemplarArgs) -> CmdResult<()> {
    let bundle = load_bundle(ws, &a.model)?;
    let res = bundle.resolution();
    let image = load_image(&a.image, res)?;
    let (befores, afters): (Vec<Image>, Vec<Image>) = match (&a.before, &a.after) {
        (Some(b), Some(af)) => (vec![load_image(b, res)?], vec![load_image(af, res)?]),
        _ => {
            if a.exemplar_ids.is_empty() {
                return Err(Failure::Config(anyhow!(
                    "give --before/--after or --exemplar-ids"
                )));
            }
            let pairs = load_pairs(ws, &a.dataset)?;
            let found = find_pairs(&pairs, &a.exemplar_ids)?;
            (
                found.iter().map(|p| p.before.clone()).collect(),
                found.iter().map(|p| p.after.clone()).collect(),
            )
        }
    };
    let bi: Vec<&Image> = befores.iter().collect();
    let ai: Vec<&Image> = afters.iter().collect();
    let codes: Vec<Vec<f32>> = invert_batch(&bundle, &bi, &ai, &cfg.inversion)?
        .into_iter()
        .map(|r| r.style.w)
        .collect();
    let w = average_codes(&codes)?;
    let out = if a.alpha == 1.0 {
        transfer_style(&bundle, &w, &image)?
    } else {
        let w0 = invert_identity(&bundle, &image, &cfg.inversion)?.style.w;
        service::render_edit(&bundle, &image, &w0, &w, a.alpha, None)?
    };
    out.save_png(&a.out)?;
    print_json(&json!({ "out": a.out, "exemplars": codes.len() }))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Metrics for a checkpoint on a dataset's held-out splits.
pub fn evaluate(
    cfg: &RunConfig,
    bundle: &GeneratorBundle,
    pairs: &[ImagePair],
    lgie: Option<(&JointEmbedder, &MapperHead)>,
) -> anyhow::Result<EvalReport> {
    let test: Vec<&ImagePair> = pairs
        .iter()
        .filter(|p| p.split == Split::Test)
        .take(cfg.metrics.eval_pairs)
        .collect();
    let val: Vec<&ImagePair> = pairs.iter().filter(|p| p.split == Split::Val).collect();
    if test.is_empty() || val.len() < 2 {
        bail!("dataset needs test pairs and at least 2 validation pairs");
    }
    let ins: Vec<&Image> = test.iter().map(|p| &p.before).collect();
    let tgs: Vec<&Image> = test.iter().map(|p| &p.after).collect();
    let cond = invert_batch(bundle, &ins, &tgs, &cfg.inversion)?;
    let idn = invert_batch(bundle, &ins, &ins, &cfg.inversion)?;
    let mut m = BTreeMap::new();
    m.insert("init_error".into(), mean(cond.iter().map(|r| r.init_error)));
    m.insert(
        "conditional_error".into(),
        mean(cond.iter().map(|r| r.final_error)),
    );
    m.insert(
        "identity_error".into(),
        mean(idn.iter().map(|r| r.final_error)),
    );
    let recon: Vec<Image> = ins
        .iter()
        .zip(&cond)
        .map(|(im, r)| bundle.generate(im, &LatentInput::Style(r.style.clone())))
        .collect::<Result<_, _>>()?;
    let s: Vec<f64> = recon
        .iter()
        .zip(&tgs)
        .map(|(a, b)| ssim(a, b))
        .collect::<Result<_, _>>()?;
    m.insert("conditional_ssim".into(), mean(s));

    let div_in: Vec<&Image> = test
        .iter()
        .take(cfg.metrics.diversity_inputs)
        .map(|p| &p.before)
        .collect();
    let n = cfg.metrics.diversity_samples;
    m.insert(
        "diversity_lpips".into(),
        diversity_lpips_with(bundle, &div_in, n, cfg.seed, LatentSampling::RandomZ)?,
    );
    m.insert(
        "diversity_lpips_constant_w".into(),
        diversity_lpips_with(bundle, &div_in, n, cfg.seed, LatentSampling::ConstantW)?,
    );

    let untrained = GeneratorBundle::new(bundle.config.clone())?;
    let fx = FeatureExtractor::shared();
    let targets: Vec<&Image> = val.iter().map(|p| &p.after).collect();
    for (key, model) in [("fid_trained", bundle), ("fid_untrained", &untrained)] {
        let outs: Vec<Image> = val
            .iter()
            .enumerate()
            .map(|(i, p)| {
                model.generate(
                    &p.before,
                    &LatentInput::Z(latent(cfg.seed ^ 0xf1d, i as u64, model.config.z_dim)),
                )
            })
            .collect::<Result<_, _>>()?;
        let o: Vec<&Image> = outs.iter().collect();
        m.insert(key.into(), fid_score(fx, &o, &targets)?);
    }
    m.insert(
        "input_target_l1".into(),
        mean(
            test.iter()
                .map(|p| l1_error(&p.before, &p.after).unwrap_or(f64::NAN)),
        ),
    );
    if let Some((emb, mapper)) = lgie {
        let (o, i) = mapper_l1(bundle, mapper, emb, &val)?;
        m.insert("mapper_l1_output".into(), o);
        m.insert("mapper_l1_input".into(), i);
    }
    Ok(EvalReport {
        metrics: m,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    })
}

fn eval(cfg: &RunConfig, ws: &Workspace, a: EvalArgs) -> CmdResult<()> {
    let bundle = load_bundle(ws, &a.model)?;
    let pairs = load_pairs(ws, &a.dataset)?;
    let dir = ws.run_dir(&a.model.run);
    let lgie = if dir.join("embedder.json").exists() && dir.join("mapper.json").exists() {
        let emb = JointEmbedder::load(&dir.join("embedder.json"))?;
        let mapper = MapperHead::load(&dir.join("mapper.json"), emb.config.dim)?;
        Some((emb, mapper))
    } else {
        None
    };
    let report = evaluate(cfg, &bundle, &pairs, lgie.as_ref().map(|(e, m)| (e, m)))?;
    let path = ws.reports().join(format!("{}.json", a.name));
    write_json(&path, &report)?;
    let table = report.table();
    fs::write(path.with_extension("txt"), &table)
        .with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    println!("report written to {}", path.display());
    Ok(())
}

fn serve(cfg: &RunConfig, ws: &Workspace, a: ServeArgs) -> CmdResult<()> {
    let bundle = load_bundle(ws, &a.model)?;
    let embedder = load_embedder(ws, &a.model.run)?;
    let index = load_index(ws, &a.index)?;
    let pairs = load_pairs(ws, &a.dataset)?;
    let state = service::AppState::new(cfg, bundle, embedder, index, pairs, ws.sessions())?;
    let addr = a.addr.unwrap_or_else(|| cfg.serve.addr.clone());
    service::run(state, &addr)?;
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            let code = f.exit_code();
            let (Failure::Config(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            code
        }
    }
}
