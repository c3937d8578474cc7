use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use cbd::checkpoint::{read_header, Checkpoint};
use cbd::data::{Corpus, Split};
use cbd::distill::{self, DistillConfig, SourceSpec};
use cbd::eval::{self, EvalReport};
use cbd::surgery::{self, TransformPlan};
use cbd::tensor::{DType, Float};
use cbd::tokenizer::Vocabulary;
use cbd::transformer::{count_params, ModelConfig};

use crate::config::{self, ChainConfigFile, CorpusSpec};
use crate::exit::{CmdResult, Failure, TRAINING};
use crate::{
    Cli, Command, CompareInitArgs, DistillArgs, EvalArgs, InterpolateArgs, SplitArg, SurgeryArgs,
    SweepArgs, TrainArgs,
};

const DEFAULT_OUT_DIR: &str = "cbd-out";

macro_rules! dispatch {
    ($dtype:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

struct Ctx {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    /// `--out-dir`, then the config value, then `CBD_OUT_DIR`.
    fn out_dir(&self, from_config: Option<&Path>) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| from_config.map(Path::to_path_buf))
            .or_else(|| std::env::var_os("CBD_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    fn seed_or(&self, seed: u64) -> u64 {
        self.seed.unwrap_or(seed)
    }

    fn corpus(&self, arg: &str) -> CmdResult<Corpus> {
        let mut spec: CorpusSpec = config::load_json(arg)?;
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        Ok(spec.build(Path::new(""))?)
    }

    fn train_config(&self, arg: &str) -> CmdResult<DistillConfig> {
        let mut cfg: DistillConfig = config::load_json(arg)?;
        cfg.seed = self.seed_or(cfg.seed);
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Chain { config } => cmd_chain(&ctx, &config),
        Command::Interpolate(a) => dispatch!(file_dtype(&a.small)?, cmd_interpolate(&a)),
        Command::Expand(a) => dispatch!(file_dtype(&a.input)?, cmd_surgery(&a, true)),
        Command::Subset(a) => dispatch!(file_dtype(&a.input)?, cmd_surgery(&a, false)),
        Command::Eval(a) => dispatch!(file_dtype(&a.ckpt)?, cmd_eval(&ctx, &a)),
        Command::CompareInit(a) => {
            let first = a
                .init
                .as_ref()
                .or(a.anchors.first())
                .ok_or_else(|| Failure::usage("either --init or --anchors is required"))?;
            dispatch!(file_dtype(first)?, cmd_compare_init(&ctx, &a))
        }
        Command::SweepAlpha(a) => dispatch!(file_dtype(&a.small)?, cmd_sweep_alpha(&ctx, &a)),
        Command::Train(a) => dispatch!(DType::from(a.precision), cmd_train(&ctx, &a)),
        Command::Distill(a) => dispatch!(file_dtype(&a.teacher)?, cmd_distill(&ctx, &a)),
        Command::Inspect { path } => cmd_inspect(&path),
    }
}

fn file_dtype(path: &Path) -> CmdResult<DType> {
    let header = read_header(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(header.dtype().unwrap_or(DType::F32))
}

fn convert<G: Float, F: Float>(c: Checkpoint<G>) -> Checkpoint<F> {
    Checkpoint {
        config: c.config,
        params: c.params.cast(),
        meta: c.meta,
    }
}

/// Loads a checkpoint of either stored precision as `F`.
fn load<F: Float>(path: &Path) -> CmdResult<Checkpoint<F>> {
    let ck = match file_dtype(path)? {
        DType::F32 => convert(
            Checkpoint::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?,
        ),
        DType::F64 => convert(
            Checkpoint::<f64>::load(path).with_context(|| format!("loading {}", path.display()))?,
        ),
    };
    Ok(ck)
}

fn save<F: Float>(ck: &Checkpoint<F>, path: &Path) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ck.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn vocab_of<F: Float>(ck: &Checkpoint<F>) -> CmdResult<Vocabulary> {
    let kind = ck
        .meta
        .tokenizer
        .or_else(|| distill::infer_tokenizer(ck.config.vocab_size))
        .ok_or_else(|| {
            Failure::usage(format!(
                "{}: no tokenizer recorded and none has vocabulary size {}",
                ck.meta.name, ck.config.vocab_size
            ))
        })?;
    Ok(Vocabulary::new(kind))
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> CmdResult {
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&csv, report.to_csv())?;
    fs::write(&json, report.to_json() + "\n")?;
    println!("report {} {}", csv.display(), json.display());
    Ok(())
}

fn cmd_chain(ctx: &Ctx, arg: &str) -> CmdResult {
    let (text, origin) = config::json_text(arg)?;
    let mut file: ChainConfigFile = config::parse_json(&text, &origin)?;
    if let Some(seed) = ctx.seed {
        file.override_seeds(seed);
    }
    let spec = file.chain_spec();
    spec.validate()?;
    let base = if text.trim_start().starts_with('{') {
        PathBuf::new()
    } else {
        Path::new(arg)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    };
    let corpus = file.corpus.build(&base)?;
    let out_dir = ctx.out_dir(file.out_dir.as_deref());
    let dtype = match (&file.precision, &file.source) {
        (Some(p), _) => *p,
        (None, SourceSpec::Path(p)) => file_dtype(&base.join(p))?,
        (None, SourceSpec::Recipe(_)) => DType::F32,
    };
    dispatch!(dtype, run_chain(&file, &spec, &corpus, &base, &out_dir))
}

fn run_chain<F: Float>(
    file: &ChainConfigFile,
    spec: &distill::ChainSpec,
    corpus: &Corpus,
    base: &Path,
    out_dir: &Path,
) -> CmdResult {
    fs::create_dir_all(out_dir)?;
    let source: Checkpoint<F> = match &file.source {
        SourceSpec::Path(p) => load(&base.join(p))?,
        SourceSpec::Recipe(r) => {
            let ck = distill::train_from_recipe(r, corpus, "source")
                .map_err(|e| Failure::new(TRAINING, anyhow!("training the source: {e}")))?;
            let path = out_dir.join("source.cbdc");
            save(&ck, &path)?;
            println!("source {} params={}", path.display(), ck.param_count());
            ck
        }
    };
    let outcome = distill::run_chain_spec(spec, &source, corpus)?;
    let mut report = EvalReport::new("chain");
    report
        .provenance
        .seeds
        .insert("corpus".into(), file.corpus.seed);
    if let Some(b) = &outcome.bridge {
        let path = out_dir.join("anchor-0.cbdc");
        save(&b.bridge, &path)?;
        report
            .metrics
            .insert("bridge.ce_before".into(), b.ce_before);
        report.metrics.insert("bridge.ce_after".into(), b.ce_after);
        add_stage_curve(&mut report, "anchor-0", &b.bridge)?;
        println!(
            "anchor-0 {} params={} ce {:.6} -> {:.6}",
            path.display(),
            b.bridge.param_count(),
            b.ce_before,
            b.ce_after
        );
    }
    for (i, (a, edge)) in outcome.anchors.iter().zip(&spec.edges).enumerate() {
        let path = out_dir.join(format!("{}.cbdc", a.meta.name));
        save(a, &path)?;
        add_stage_curve(&mut report, &a.meta.name, a)?;
        report
            .provenance
            .seeds
            .insert(format!("edge{}", i + 1), edge.seed);
        let last = a
            .meta
            .lineage
            .last()
            .and_then(|s| s.loss_curve.last())
            .copied();
        if let Some(l) = last {
            report
                .metrics
                .insert(format!("{}.final_train_loss", a.meta.name), l);
        }
        println!(
            "{} {} params={} final_train_loss={}",
            a.meta.name,
            path.display(),
            a.param_count(),
            last.map_or("n/a".into(), |l| format!("{l:.6}"))
        );
    }
    if let Some(last) = outcome.anchors.last() {
        report.provenance.lineage = last
            .meta
            .lineage
            .iter()
            .map(|s| s.descriptor.clone())
            .collect();
    }
    write_report(out_dir, "chain", &report)
}

/// The training curve of a checkpoint's latest stage as a report curve.
fn add_stage_curve<F: Float>(report: &mut EvalReport, run: &str, ck: &Checkpoint<F>) -> CmdResult {
    if let Some(stage) = ck.meta.lineage.last().filter(|s| !s.loss_curve.is_empty()) {
        report.add_curve(run, eval::indexed(&stage.loss_curve))?;
    }
    Ok(())
}

fn target_config(arg: &str) -> CmdResult<ModelConfig> {
    let cfg: ModelConfig = config::load_json(arg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_interpolate<F: Float>(a: &InterpolateArgs) -> CmdResult {
    let small: Checkpoint<F> = load(&a.small)?;
    let large: Checkpoint<F> = load(&a.large)?;
    let dst = target_config(&a.target_config)?;
    let alpha = if a.alpha == "auto" {
        let (ps, pl, pt) = (small.param_count(), large.param_count(), count_params(&dst));
        if pt < ps || pt > pl {
            return Err(surgery::SurgeryError::TargetOutOfRange {
                target: pt,
                min: ps,
                max: pl,
            }
            .into());
        }
        surgery::default_alpha(ps, pl, pt)?
    } else {
        a.alpha.parse::<f64>().map_err(|_| {
            Failure::usage(format!(
                "--alpha: expected a number or \"auto\", got {:?}",
                a.alpha
            ))
        })?
    };
    let out = surgery::interpolate(&small, &large, &dst, alpha)?;
    save(&out, &a.out)?;
    println!("alpha={alpha}");
    println!("wrote {} params={}", a.out.display(), out.param_count());
    Ok(())
}

fn cmd_surgery<F: Float>(a: &SurgeryArgs, expand: bool) -> CmdResult {
    let ck: Checkpoint<F> = load(&a.input)?;
    let plan: TransformPlan = match (&a.plan, &a.target_config) {
        (Some(p), _) => config::load_json(p)?,
        (None, Some(t)) => {
            let dst = target_config(t)?;
            if expand {
                surgery::plan_expand(&ck.config, &dst)?
            } else {
                surgery::plan_subset(&ck.config, &dst)?
            }
        }
        (None, None) => {
            return Err(Failure::usage(
                "either --target-config or --plan is required",
            ))
        }
    };
    if plan.is_expansion() != expand {
        let (want, got) = if expand {
            ("expand", "subset")
        } else {
            ("subset", "expand")
        };
        return Err(Failure::usage(format!("{want} was given a {got} plan")));
    }
    let plan = if expand {
        plan.with_mode(a.mode.into())
    } else {
        plan
    };
    let out = surgery::apply_transform(&ck, &plan)?;
    save(&out, &a.out)?;
    println!("wrote {} params={}", a.out.display(), out.param_count());
    if expand {
        let inverse = serde_json::to_string(&surgery::invert_expand(&plan)?)
            .map_err(|e| anyhow!("serializing the inverse plan: {e}"))?;
        if let Some(path) = &a.inverse_plan {
            fs::write(path, &inverse)?;
        }
        println!("inverse_plan {inverse}");
    }
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
    }
}

fn cmd_eval<F: Float>(ctx: &Ctx, a: &EvalArgs) -> CmdResult {
    let ck: Checkpoint<F> = load(&a.ckpt)?;
    let vocab = vocab_of(&ck)?;
    let corpus = ctx.corpus(&a.corpus.corpus)?;
    let seq_len = a.seq_len.unwrap_or(ck.config.max_seq_len);
    let loss = eval::split_loss(&ck, &corpus, split_of(a.split), &vocab, seq_len)?;
    let mut report = EvalReport::new(&a.name);
    report.metrics.insert("loss".into(), loss);
    report.metrics.insert("perplexity".into(), loss.exp());
    report
        .metrics
        .insert("params".into(), ck.param_count() as f64);
    report.provenance.lineage = ck
        .meta
        .lineage
        .iter()
        .map(|s| s.descriptor.clone())
        .collect();
    report
        .provenance
        .seeds
        .insert("corpus".into(), corpus.seed());
    report.provenance.seeds.insert("model".into(), ck.meta.seed);
    for (i, stage) in ck.meta.lineage.iter().enumerate() {
        if !stage.loss_curve.is_empty() {
            report.add_curve(format!("stage{i}"), eval::indexed(&stage.loss_curve))?;
        }
    }
    println!("loss={loss} perplexity={}", loss.exp());
    write_report(&ctx.out_dir(None), &a.name, &report)
}

fn cmd_compare_init<F: Float>(ctx: &Ctx, a: &CompareInitArgs) -> CmdResult {
    let init: Checkpoint<F> = match (&a.init, &a.target_config) {
        (Some(p), _) => load(p)?,
        (None, Some(t)) => {
            let dst = target_config(t)?;
            let anchors = a
                .anchors
                .iter()
                .map(|p| load(p))
                .collect::<CmdResult<Vec<Checkpoint<F>>>>()?;
            let (ck, alpha) = eval::cbd_init(&anchors, &dst)?;
            println!("alpha={alpha}");
            ck
        }
        (None, None) => {
            return Err(Failure::usage(
                "either --init or --anchors with --target-config is required",
            ))
        }
    };
    let vocab = vocab_of(&init)?;
    let corpus = ctx.corpus(&a.corpus.corpus)?;
    let cfg = ctx.train_config(&a.train)?;
    let rand = eval::random_checkpoint(&init.config, ctx.seed_or(a.rand_seed), &vocab);
    let cmp = eval::compare_init(&init, &rand, &corpus, &vocab, &cfg, a.eval_every)?;
    let report = cmp.combined();
    let s = |r: &EvalReport| r.metrics["step0_loss"];
    println!("step0 cbd={} rand={}", s(&cmp.cbd), s(&cmp.rand));
    println!(
        "steps_to_target={} speedup={}",
        report
            .steps_to_target
            .map_or("none".into(), |v| v.to_string()),
        report.speedup.map_or("none".into(), |v| v.to_string())
    );
    write_report(&ctx.out_dir(None), &a.name, &report)
}

fn cmd_sweep_alpha<F: Float>(ctx: &Ctx, a: &SweepArgs) -> CmdResult {
    let small: Checkpoint<F> = load(&a.small)?;
    let large: Checkpoint<F> = load(&a.large)?;
    let dst = target_config(&a.target_config)?;
    let vocab = vocab_of(&small)?;
    let corpus = ctx.corpus(&a.corpus.corpus)?;
    let seq_len = a.seq_len.unwrap_or(dst.max_seq_len);
    let mut report = eval::alpha_sweep(&small, &large, &dst, &a.alphas, &corpus, &vocab, seq_len)?;
    report
        .provenance
        .seeds
        .insert("corpus".into(), corpus.seed());
    for &alpha in &a.alphas {
        println!(
            "alpha={alpha} loss={}",
            report.metrics[&eval::alpha_key(alpha)]
        );
    }
    println!("best_alpha={}", report.metrics["best_alpha"]);
    write_report(&ctx.out_dir(None), &a.name, &report)
}

fn cmd_train<F: Float>(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let recipe = distill::TrainRecipe {
        config: target_config(&a.config)?,
        tokenizer: a.tokenizer.into(),
        train: ctx.train_config(&a.train)?,
        init_seed: ctx.seed_or(a.init_seed),
    };
    recipe.train.validate(&[&recipe.config])?;
    let corpus = ctx.corpus(&a.corpus.corpus)?;
    let ck: Checkpoint<F> = distill::train_from_recipe(&recipe, &corpus, &a.name)
        .map_err(|e| Failure::new(TRAINING, e))?;
    save(&ck, &a.out)?;
    let last = ck
        .meta
        .lineage
        .last()
        .and_then(|s| s.loss_curve.last())
        .copied();
    println!(
        "wrote {} params={} final_train_loss={}",
        a.out.display(),
        ck.param_count(),
        last.map_or("n/a".into(), |l| l.to_string())
    );
    Ok(())
}

fn cmd_distill<F: Float>(ctx: &Ctx, a: &DistillArgs) -> CmdResult {
    let teacher: Checkpoint<F> = load(&a.teacher)?;
    let vocab = vocab_of(&teacher)?;
    let student = target_config(&a.student_config)?;
    let cfg = ctx.train_config(&a.train)?;
    let corpus = ctx.corpus(&a.corpus.corpus)?;
    let out = distill::distill_edge(&teacher, &student, &corpus, &vocab, &cfg)?;
    save(&out, &a.out)?;
    let last = out
        .meta
        .lineage
        .last()
        .and_then(|s| s.loss_curve.last())
        .copied();
    println!(
        "wrote {} params={} final_train_loss={}",
        a.out.display(),
        out.param_count(),
        last.map_or("n/a".into(), |l| l.to_string())
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> CmdResult {
    let h = read_header(path).with_context(|| format!("reading {}", path.display()))?;
    let config = serde_json::to_string_pretty(&h.config).map_err(|e| anyhow!("{e}"))?;
    println!("name: {}", h.meta.name);
    println!("dtype: {}", h.dtype().map_or("none", DType::as_str));
    println!(
        "tokenizer: {}",
        h.meta.tokenizer.map_or("unknown", |t| t.as_str())
    );
    println!("params: {}", count_params(&h.config));
    println!("seed: {}", h.meta.seed);
    println!("step: {}", h.meta.step);
    println!("config: {config}");
    println!("lineage ({} stages):", h.meta.lineage.len());
    for (i, s) in h.meta.lineage.iter().enumerate() {
        match s.loss_curve.last() {
            Some(l) => println!(
                "  {i}: {} [{} steps, final loss {l}]",
                s.descriptor,
                s.loss_curve.len()
            ),
            None => println!("  {i}: {}", s.descriptor),
        }
    }
    Ok(())
}
