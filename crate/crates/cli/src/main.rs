//! casa-lab: command-line surface of the fusion laboratory.
//!
//! One binary, six subcommands: `verify` (re-runnable invariant suites),
//! `train` (the patch-color retrieval task), `stream` (frame-by-frame
//! captioning simulation), `cost` (attention cost tables), `probe`
//! (checkpoint instruments), and `bench` (per-component microbenchmarks).
//! All figures are emitted as CSV or JSON; exit codes are 0 success,
//! 1 assertion/run failure, 2 usage, 3 I/O.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use casa_core::cost::{
    cost_csv, cost_table, exact_attention_entries, symbolic_cost, synthetic_layout, CostParams,
    WReading,
};
use casa_core::fusion::{FusionConfig, FusionMode, LayerStack, QFormerConfig};
use casa_core::probes::{attention_stats, grad_check, AblationRule};
use casa_core::sequence::WindowLayout;
use casa_core::streaming::{ledger_csv, simulate_live_captioning, CaptioningConfig};
use casa_core::toytask::{
    evaluate, evaluate_ablated, generate_episodes, metrics_csv, pack_episodes, train, Episode,
    TaskSpec, TrainConfig,
};
use casa_core::verify::{junit_json, run_all, run_suite, Suite};
use casa_core::{checkpoint, Error, RngStream};

// ── Failure plumbing ────────────────────────────────────────────────────

/// Exit-code buckets. Usage problems (bad flags, bad config values) exit 2,
/// I/O problems 3, everything that ran and failed 1.
enum Fail {
    Run(String),
    Usage(String),
    Io(String),
}

type CliResult<T> = Result<T, Fail>;

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Run(_) => 1,
            Fail::Usage(_) => 2,
            Fail::Io(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            Fail::Run(m) | Fail::Usage(m) | Fail::Io(m) => m,
        }
    }
}

/// Library errors raised while interpreting user input are usage errors;
/// the same errors raised mid-run are run failures. I/O stays I/O.
fn setup_err(e: Error) -> Fail {
    match e {
        Error::Io(_) => Fail::Io(e.to_string()),
        _ => Fail::Usage(e.to_string()),
    }
}

fn run_err(e: Error) -> Fail {
    match e {
        Error::Io(_) => Fail::Io(e.to_string()),
        _ => Fail::Run(e.to_string()),
    }
}

// ── Command line ────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "casa-lab",
    version,
    about = "Toy-scale laboratory for text/image fusion in a small causal transformer"
)]
struct Cli {
    /// Directory for artifact files (CSV, JSON, checkpoints).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run verification suites and print a JUnit-style JSON summary.
    Verify {
        /// masks | equivalence | gradients | streaming | all
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Train the patch-color retrieval task; metrics stream out as CSV.
    Train {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Fusion mode override (insertion, cross-attn, gated-cross-attn,
        /// casa-parallel, casa-pre, casa-replace).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Simulate frame-by-frame captioning; the cache ledger streams out as CSV.
    Stream {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Frames to ingest (overrides the config's stream section).
        #[arg(long, value_name = "F")]
        frames: Option<usize>,
        /// Fusion mode override.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Attention-cost tables: closed forms, exact mask entries, microbench.
    Cost {
        /// Window layout: a JSON file of [imageRows, textTokens] pairs, or
        /// an inline WxN:T spec (W windows of N image rows and T text
        /// tokens). Defaults to 10x1024:50.
        #[arg(long, value_name = "FILE|WxN:T")]
        layout: Option<String>,
        /// Microbench trials per component.
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Probe a trained checkpoint: ablations, attention stats, or gradients.
    Probe {
        #[arg(long, value_name = "BASE")]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: ProbeKind,
        /// Config whose data section describes the episodes to probe on
        /// (defaults to the task shape implied by the checkpoint).
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
    /// Microbenchmark attention/FFN components across every fusion mode.
    Bench {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Trials per component.
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    /// Accuracy under single-key mask removals, per removal rule.
    Ablate,
    /// Post-softmax fusion attention mass by key group.
    Stats,
    /// Finite-difference gradient verification.
    Grad,
}

// ── Config document ─────────────────────────────────────────────────────

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    /// Must be 1.
    schema: u32,
    /// Root seed; `CASA_LAB_SEED` overrides it. Defaults to 0.
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    model: Option<ModelSection>,
    #[serde(default)]
    data: Option<DataSection>,
    #[serde(default)]
    train: Option<TrainSection>,
    #[serde(default)]
    stream: Option<StreamSection>,
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    #[serde(default)]
    ffn_mult: Option<usize>,
    /// Required for `stream`/`bench`; `train` derives it from the task and
    /// rejects a conflicting value.
    #[serde(default)]
    vocab_size: Option<usize>,
    /// Tagged form, e.g. {"kind": "casa-replace", "period": 4, "offset": 3}.
    #[serde(default)]
    mode: Option<FusionMode>,
    #[serde(default)]
    image_ffn_update: bool,
    #[serde(default)]
    qformer: Option<QFormerConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            ffn_mult: None,
            vocab_size: None,
            mode: None,
            image_ffn_update: false,
            qformer: None,
        }
    }
}

impl ModelSection {
    fn fusion_config(&self, mode: FusionMode, vocab: usize) -> CliResult<FusionConfig> {
        let mut cfg = FusionConfig::new(self.d_model, self.n_heads, self.n_layers, vocab, mode);
        if let Some(m) = self.ffn_mult {
            cfg.ffn_mult = m;
        }
        cfg.image_ffn_update = self.image_ffn_update;
        cfg.qformer = self.qformer;
        cfg.validate().map_err(setup_err)?;
        Ok(cfg)
    }
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct DataSection {
    #[serde(default)]
    grid: Option<usize>,
    #[serde(default)]
    n_colors: Option<usize>,
    #[serde(default)]
    n_windows: Option<usize>,
    #[serde(default)]
    code_seed: Option<u64>,
    #[serde(default)]
    n_train: Option<usize>,
    #[serde(default)]
    n_eval: Option<usize>,
}

impl DataSection {
    fn task_spec(&self, d_model: usize) -> TaskSpec {
        let mut spec = TaskSpec::new(d_model);
        if let Some(g) = self.grid {
            spec.grid = g;
        }
        if let Some(c) = self.n_colors {
            spec.n_colors = c;
        }
        if let Some(w) = self.n_windows {
            spec.n_windows = w;
        }
        if let Some(s) = self.code_seed {
            spec.code_seed = s;
        }
        spec
    }
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    batch: Option<usize>,
    #[serde(default)]
    lr: Option<f64>,
    #[serde(default)]
    warmup: Option<usize>,
    #[serde(default)]
    eval_every: Option<usize>,
    #[serde(default)]
    stop_at_color_acc: Option<f64>,
}

impl TrainSection {
    fn train_config(&self, seed: u64, checkpoint_base: Option<PathBuf>) -> TrainConfig {
        let mut t = TrainConfig { seed, checkpoint_base, ..TrainConfig::default() };
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.batch {
            t.batch = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.warmup {
            t.warmup = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        t.stop_at_color_acc = self.stop_at_color_acc;
        t
    }
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct StreamSection {
    #[serde(default)]
    frames: Option<usize>,
    #[serde(default)]
    frame_rows: Option<usize>,
    #[serde(default)]
    text_per_frame: Option<usize>,
    #[serde(default)]
    reps: Option<usize>,
}

fn load_config(path: &Path) -> CliResult<ConfigDoc> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fail::Io(format!("cannot read {}: {e}", path.display())))?;
    let doc: ConfigDoc = serde_json::from_str(&text)
        .map_err(|e| Fail::Usage(format!("invalid config {}: {e}", path.display())))?;
    if doc.schema != 1 {
        return Err(Fail::Usage(format!(
            "config {} declares schema {}, expected 1",
            path.display(),
            doc.schema
        )));
    }
    Ok(doc)
}

/// `CASA_LAB_SEED` beats the config's seed field beats 0.
fn resolve_seed(config_seed: Option<u64>) -> CliResult<u64> {
    match std::env::var("CASA_LAB_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| {
            Fail::Usage(format!("CASA_LAB_SEED must be an unsigned integer, got {s:?}"))
        }),
        Err(_) => Ok(config_seed.unwrap_or(0)),
    }
}

fn resolve_mode(flag: &Option<String>, section: Option<FusionMode>) -> CliResult<FusionMode> {
    match flag {
        Some(s) => FusionMode::from_str(s).map_err(setup_err),
        None => Ok(section.unwrap_or(FusionMode::CasaParallel)),
    }
}

fn write_artifact(out: &Option<PathBuf>, name: &str, content: &str) -> CliResult<()> {
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir)
        .map_err(|e| Fail::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| Fail::Io(format!("cannot write {}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

// ── Subcommands ─────────────────────────────────────────────────────────

fn cmd_verify(suite: &str, out: &Option<PathBuf>) -> CliResult<()> {
    let results = if suite == "all" {
        run_all()
    } else {
        run_suite(Suite::from_str(suite).map_err(Fail::Usage)?)
    };
    for r in &results {
        let status = if r.passed { "ok  " } else { "FAIL" };
        eprintln!("{status} {}::{} ({:.0} ms)", r.suite, r.name, r.wall_ms);
        if !r.passed {
            eprintln!("     {}", r.detail);
        }
    }
    let json = junit_json(&results);
    println!("{json}");
    write_artifact(out, "verify.json", &json)?;
    let failures = results.iter().filter(|r| !r.passed).count();
    if failures > 0 {
        return Err(Fail::Run(format!("{failures} verification case(s) failed")));
    }
    Ok(())
}

fn cmd_train(config: &Path, mode_flag: &Option<String>, out: &Option<PathBuf>) -> CliResult<()> {
    let doc = load_config(config)?;
    let seed = resolve_seed(doc.seed)?;
    let model = doc.model.clone().unwrap_or_default();
    let data = doc.data.clone().unwrap_or_default();
    let spec = data.task_spec(model.d_model);
    let mode = resolve_mode(mode_flag, model.mode)?;
    if let Some(v) = model.vocab_size {
        if v != spec.vocab_size() {
            return Err(Fail::Usage(format!(
                "model.vocab_size {v} conflicts with the task's vocabulary of {} \
                 (omit the field to derive it)",
                spec.vocab_size()
            )));
        }
    }
    let cfg = model.fusion_config(mode, spec.vocab_size())?;

    // Data seeds are derived from the run seed so one number pins the run.
    let train_eps =
        generate_episodes::<f32>(&spec, data.n_train.unwrap_or(2048), seed.wrapping_add(1))
            .map_err(setup_err)?;
    let eval_eps = generate_episodes::<f32>(&spec, data.n_eval.unwrap_or(256), seed.wrapping_add(2))
        .map_err(setup_err)?;

    let tcfg = doc
        .train
        .clone()
        .unwrap_or_default()
        .train_config(seed, out.as_ref().map(|d| d.join("checkpoint")));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| Fail::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    eprintln!(
        "training {mode} d={} heads={} layers={} on {} episodes ({} held out), seed {seed}",
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        train_eps.len(),
        eval_eps.len()
    );

    let outcome = train::<f32>(&cfg, &train_eps, &eval_eps, &tcfg).map_err(run_err)?;
    let csv = metrics_csv(&outcome.metrics);
    print!("{csv}");
    write_artifact(out, "metrics.csv", &csv)?;

    let sighted = evaluate(&outcome.stack, &eval_eps, false).map_err(run_err)?;
    let blinded = evaluate(&outcome.stack, &eval_eps, true).map_err(run_err)?;
    eprintln!(
        "final: color {:.4} recall {:.4} | blinded color {:.4} | loss {:.4} | {} steps",
        sighted.acc_color,
        sighted.acc_recall,
        blinded.acc_color,
        sighted.mean_loss,
        outcome.steps_run
    );
    if outcome.diverged {
        return Err(Fail::Run(
            "training diverged; the last healthy weights were kept".into(),
        ));
    }
    Ok(())
}

fn cmd_stream(
    config: &Path,
    frames_flag: Option<usize>,
    mode_flag: &Option<String>,
    out: &Option<PathBuf>,
) -> CliResult<()> {
    let doc = load_config(config)?;
    let seed = resolve_seed(doc.seed)?;
    let model = doc.model.clone().unwrap_or_default();
    let stream = doc.stream.clone().unwrap_or_default();
    let mode = resolve_mode(mode_flag, model.mode)?;
    let cfg = model.fusion_config(mode, model.vocab_size.unwrap_or(32))?;
    let mut rng = RngStream::new(seed);
    let stack = LayerStack::<f32>::init(cfg, &mut rng).map_err(setup_err)?;

    let ccfg = CaptioningConfig {
        n_frames: frames_flag.or(stream.frames).unwrap_or(200),
        frame_rows: stream.frame_rows.unwrap_or(4),
        text_per_frame: stream.text_per_frame.unwrap_or(2),
        seed,
        reps: stream.reps.unwrap_or(3),
    };
    eprintln!(
        "streaming {mode}: {} frames x ({} image rows + {} text), median of {} runs",
        ccfg.n_frames, ccfg.frame_rows, ccfg.text_per_frame, ccfg.reps
    );
    let rows = simulate_live_captioning(&stack, ccfg).map_err(run_err)?;
    let csv = ledger_csv(&rows);
    print!("{csv}");
    write_artifact(out, "ledger.csv", &csv)
}

/// `WxN:T` → W windows of (N image rows, T text tokens), or a JSON file of
/// [imageRows, textTokens] pairs.
fn parse_layout(spec: &str) -> CliResult<WindowLayout> {
    let windows: Vec<(usize, usize)> = if Path::new(spec).exists() {
        let text = std::fs::read_to_string(spec)
            .map_err(|e| Fail::Io(format!("cannot read {spec}: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| Fail::Usage(format!("layout file {spec} must be [[imageRows, textTokens], ...]: {e}")))?
    } else {
        let bad = || {
            Fail::Usage(format!(
                "layout {spec:?} is neither a file nor a WxN:T spec (e.g. 10x1024:50)"
            ))
        };
        let (w, rest) = spec.split_once('x').ok_or_else(bad)?;
        let (n, t) = rest.split_once(':').ok_or_else(bad)?;
        let (w, n, t) = (
            w.trim().parse::<usize>().map_err(|_| bad())?,
            n.trim().parse::<usize>().map_err(|_| bad())?,
            t.trim().parse::<usize>().map_err(|_| bad())?,
        );
        if w == 0 {
            return Err(bad());
        }
        vec![(n, t); w]
    };
    synthetic_layout(&windows).map_err(setup_err)
}

fn cmd_cost(layout_spec: &Option<String>, trials: usize, out: &Option<PathBuf>) -> CliResult<()> {
    let spec = layout_spec.as_deref().unwrap_or("10x1024:50");
    let layout = parse_layout(spec)?;
    let modes = [
        FusionMode::Insertion,
        FusionMode::CrossAttn { gated: false },
        FusionMode::CasaParallel,
        FusionMode::CasaPre,
        FusionMode::CasaReplace { period: 4, offset: 3 },
    ];

    // Closed forms and exact mask entries are arithmetic — any scale goes.
    let p = CostParams::from_layout(&layout);
    let mut analysis = String::from("mode                     formula               symbolic  exact_entries\n");
    for mode in modes {
        let exact = exact_attention_entries(mode, &layout).map_err(run_err)?;
        for sym in symbolic_cost(mode, &p) {
            let label = match sym.w_reading {
                None => sym.mode.clone(),
                Some(WReading::WindowCount) => format!("{} (W=count)", sym.mode),
                Some(WReading::WindowSize) => format!("{} (W=size)", sym.mode),
            };
            writeln!(
                analysis,
                "{label:<24} {:<20} {:>9} {:>14}",
                sym.formula, sym.value, exact
            )
            .expect("writing to a string");
        }
    }
    println!(
        "layout: {} windows, T={} text, N={} image tokens (T_W={}, window size {})\n\n{analysis}",
        p.windows, p.text, p.images, p.text_per_window, p.window_size
    );

    // The microbench materializes each mask's largest dense block, so very
    // large layouts are timed on the reference desk-scale analog instead.
    let stream_len = layout.n_tokens as u128;
    let bench_layout = if stream_len * stream_len > 1 << 24 {
        eprintln!(
            "layout too large for a dense microbench; timing the 4x64:8 desk-scale analog"
        );
        synthetic_layout(&[(64, 8); 4]).map_err(setup_err)?
    } else {
        layout
    };
    let base = FusionConfig::new(64, 4, 2, 32, FusionMode::CasaParallel);
    let rows = cost_table::<f32>(&base, &modes, &bench_layout, trials).map_err(run_err)?;
    println!("{}", casa_core::cost::cost_text_table(&rows));
    write_artifact(out, "cost.csv", &cost_csv(&rows))
}

fn cmd_probe(
    ckpt: &Path,
    kind: ProbeKind,
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> CliResult<()> {
    let doc = match config {
        Some(p) => load_config(p)?,
        None => ConfigDoc { schema: 1, ..Default::default() },
    };
    let seed = resolve_seed(doc.seed)?;
    let stack = checkpoint::load::<f32>(ckpt).map_err(|e| match e {
        Error::Io(_) => Fail::Io(format!("cannot load checkpoint {}: {e}", ckpt.display())),
        _ => Fail::Usage(format!("cannot load checkpoint {}: {e}", ckpt.display())),
    })?;
    let cfg = stack.cfg().clone();
    let data = doc.data.clone().unwrap_or_default();
    let spec = data.task_spec(cfg.d_model);
    if spec.vocab_size() != cfg.vocab_size {
        return Err(Fail::Usage(format!(
            "checkpoint vocabulary {} does not match the task's {} — pass the \
             training config via --config",
            cfg.vocab_size,
            spec.vocab_size()
        )));
    }
    let n_eval = data.n_eval.unwrap_or(256);

    let json = match kind {
        ProbeKind::Ablate => {
            let eps: Vec<Episode<f32>> =
                generate_episodes(&spec, n_eval, seed.wrapping_add(2)).map_err(setup_err)?;
            let clean = evaluate(&stack, &eps, false).map_err(run_err)?;
            let mut rules = serde_json::Map::new();
            for rule in
                [AblationRule::MaskSelf, AblationRule::MaskRandomText, AblationRule::MaskRandomAny]
            {
                let r = evaluate_ablated(&stack, &eps, rule, seed.wrapping_add(99))
                    .map_err(run_err)?;
                rules.insert(
                    rule.name().to_string(),
                    serde_json::json!({
                        "report": r,
                        "combined_accuracy": r.combined_accuracy(),
                        "combined_delta": r.combined_accuracy() - clean.combined_accuracy(),
                    }),
                );
            }
            serde_json::json!({
                "probe": "ablate",
                "episodes": eps.len(),
                "seed": seed,
                "clean": { "report": clean, "combined_accuracy": clean.combined_accuracy() },
                "rules": rules,
            })
        }
        ProbeKind::Stats => {
            let eps: Vec<Episode<f32>> =
                generate_episodes(&spec, n_eval.min(16), seed.wrapping_add(2))
                    .map_err(setup_err)?;
            let (seq, _) = pack_episodes(&eps).map_err(run_err)?;
            let delim = spec.vocab().vision_delim();
            let stats = attention_stats(&stack, &seq, Some(delim)).map_err(run_err)?;
            serde_json::json!({
                "probe": "stats",
                "episodes": eps.len(),
                "groups": stats.groups,
                "n_queries": stats.n_queries,
                "max_partition_error": stats.max_partition_error,
            })
        }
        ProbeKind::Grad => {
            // Gradients are checked in f64; the checkpoint's f32 payload
            // upcasts losslessly.
            let stack64 = checkpoint::load::<f64>(ckpt).map_err(run_err)?;
            let eps: Vec<Episode<f64>> =
                generate_episodes(&spec, 2, seed.wrapping_add(2)).map_err(setup_err)?;
            let (seq, _) = pack_episodes(&eps).map_err(run_err)?;
            let report = grad_check(&stack64, &seq, 1e-4, 8, seed).map_err(run_err)?;
            if !report.pass {
                let doc = serde_json::to_string_pretty(&report).expect("report serializes");
                println!("{doc}");
                return Err(Fail::Run("finite-difference gradient check failed".into()));
            }
            serde_json::to_value(&report).expect("report serializes")
        }
    };
    let text = serde_json::to_string_pretty(&json).expect("probe document serializes");
    println!("{text}");
    write_artifact(out, "probe.json", &text)
}

fn cmd_bench(config: &Path, trials: usize, out: &Option<PathBuf>) -> CliResult<()> {
    let doc = load_config(config)?;
    let model = doc.model.clone().unwrap_or_default();
    let data = doc.data.clone().unwrap_or_default();
    // Desk-scale sweep shape: the task's windows if a data section is given,
    // otherwise 4 windows of 64 image rows + 8 text tokens.
    let spec = data.task_spec(model.d_model);
    let window = (
        if data.grid.is_some() { spec.n_patches() } else { 64 },
        8usize,
    );
    let n_windows = if data.n_windows.is_some() { spec.n_windows.max(1) } else { 4 };
    let layout = synthetic_layout(&vec![window; n_windows]).map_err(setup_err)?;

    let mut reports = Vec::new();
    for mode in [
        FusionMode::Insertion,
        FusionMode::CrossAttn { gated: false },
        FusionMode::CrossAttn { gated: true },
        FusionMode::CasaParallel,
        FusionMode::CasaPre,
        FusionMode::CasaReplace { period: 4, offset: 3 },
    ] {
        let cfg = model.fusion_config(mode, model.vocab_size.unwrap_or(32))?;
        let report =
            casa_core::cost::microbench_layer::<f32>(&cfg, &layout, trials).map_err(run_err)?;
        reports.push(report);
    }
    let text = serde_json::to_string_pretty(&reports).expect("reports serialize");
    println!("{text}");
    write_artifact(out, "bench.json", &text)
}

// ── Entry ───────────────────────────────────────────────────────────────

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.cmd {
        Cmd::Verify { suite } => cmd_verify(suite, &cli.out),
        Cmd::Train { config, mode } => cmd_train(config, mode, &cli.out),
        Cmd::Stream { config, frames, mode } => cmd_stream(config, *frames, mode, &cli.out),
        Cmd::Cost { layout, trials } => cmd_cost(layout, *trials, &cli.out),
        Cmd::Probe { checkpoint, kind, config } => cmd_probe(checkpoint, *kind, config, &cli.out),
        Cmd::Bench { config, trials } => cmd_bench(config, *trials, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(fail) => {
            eprintln!("error: {}", fail.message());
            ExitCode::from(fail.code())
        }
    }
}
