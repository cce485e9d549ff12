use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use debias_core::corpus::{load_corpus, tokenize, write_corpus, generate_synthetic, Example, LabelMaps, SynthConfig, Vocabulary};
use debias_core::engine::{load_script, simulate, Engine, RunDir};
use debias_core::evaluation::{eval_arm, eval_arms, evaluate, parser_accuracy, EvalReport, ParserEvalSet};
use debias_core::feedback::{format_labels, parse_with_fallback, parser};
use debias_core::model::{load_checkpoint, save_checkpoint};
use debias_core::training::{train_bias_model, train_task_model, TrainConfig};
use debias_service::ServiceConfig;

use crate::{
    Command, EvalArgs, ParseArgs, ParserEvalArgs, ServeArgs, SimulateArgs, SynthArgs, TrainBiasArgs, TrainFlags,
    TrainTaskArgs,
};

pub const BIAS_REPORT: &str = "bias_report.json";
pub const TASK_REPORT: &str = "task_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const SIMULATION_REPORT: &str = "simulation_report.json";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::TrainBias(a) => train_bias(a),
        Command::TrainTask(a) => train_task(a),
        Command::Eval(a) => eval(a),
        Command::Parse(a) => parse(a),
        Command::ParserEval(a) => parser_eval(a),
        Command::Simulate(a) => run_simulation(a),
        Command::Serve(a) => serve(a),
    }
}

fn sibling_labels(path: &Path) -> PathBuf {
    path.with_file_name(debias_core::engine::LABELS_FILE)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("reading {}", path.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.n {
        config.num_examples = n;
    }
    if let Some(rho) = a.rho {
        config.bias_strength = rho;
    }
    if let Some(p) = a.professions {
        config.num_professions = p;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let corpus = generate_synthetic(&config)?;
    let labels = config.label_maps();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_corpus(&a.out, &corpus, &labels)?;
    labels.save(&a.labels.unwrap_or_else(|| sibling_labels(&a.out)))?;
    println!("wrote {} examples to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train_config(flags: &TrainFlags, preset: TrainConfig) -> Result<TrainConfig> {
    let mut c = match &flags.config {
        Some(path) => TrainConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => preset,
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = flags.$field.clone() { c.$field = v; } )* };
    }
    set!(
        epochs, learning_rate, batch_size, seed, tau, lambda_dc, lambda_s, sigma, lambda_full,
        samples_per_example, embed, hidden, eval_policy
    );
    c.validate()?;
    Ok(c)
}

fn load_encoded(path: &Path, labels: &LabelMaps, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let mut corpus = load_corpus(path, labels).with_context(|| format!("loading {}", path.display()))?;
    vocab.encode_corpus(&mut corpus);
    Ok(corpus)
}

fn print_epochs(report: &debias_core::training::TrainReport) {
    for e in &report.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  nll {:.4}  dc {:.4}  valid acc {:.4}  bias f1 {:.4}  selection {:.3}",
            e.epoch, e.loss, e.nll, e.dc, e.valid_accuracy, e.valid_bias_f1, e.valid_mean_selection
        );
    }
    println!("best epoch {} (valid accuracy {:.4})", report.best_epoch, report.best_valid_accuracy);
}

fn train_bias(a: TrainBiasArgs) -> Result<()> {
    let config = train_config(&a.flags, TrainConfig::bias_defaults())?;
    let run = RunDir::new(&a.run);
    std::fs::create_dir_all(&a.run)?;
    let labels_path = a.labels.clone().unwrap_or_else(|| sibling_labels(&a.train));
    let labels = LabelMaps::load(&labels_path).with_context(|| format!("reading {}", labels_path.display()))?;

    let mut vocab_source = load_corpus(&a.train, &labels)?;
    for extra in &a.vocab_corpus {
        vocab_source.extend(load_corpus(extra, &labels).with_context(|| format!("loading {}", extra.display()))?);
    }
    let vocab = Vocabulary::build(&vocab_source, a.min_count);
    drop(vocab_source);
    let train = load_encoded(&a.train, &labels, &vocab)?;
    let valid = load_encoded(&a.valid, &labels, &vocab)?;

    let (model, report) = train_bias_model(&train, &valid, &vocab, labels.num_bias_classes(), &config)?;
    vocab.save(&run.vocab())?;
    labels.save(&run.labels())?;
    save_checkpoint(&model, &run.bias_checkpoint())?;
    report.save(&run.path(BIAS_REPORT))?;
    print_epochs(&report);
    println!("saved {}", run.bias_checkpoint().display());
    Ok(())
}

fn train_task(a: TrainTaskArgs) -> Result<()> {
    let config = train_config(&a.flags, TrainConfig::default())?;
    let run = RunDir::new(&a.run);
    let vocab = Vocabulary::load(&run.vocab()).context("run directory has no vocabulary; run train-bias first")?;
    let labels = LabelMaps::load(&run.labels())?;
    let bias = load_checkpoint(&run.bias_checkpoint()).context("loading the bias checkpoint")?;
    let train = load_encoded(&a.train, &labels, &vocab)?;
    let valid = load_encoded(&a.valid, &labels, &vocab)?;

    let (model, report) = train_task_model(&train, &valid, &vocab, labels.num_task_classes(), &bias, &config)?;
    save_checkpoint(&model, &run.task_checkpoint())?;
    report.save(&run.path(TASK_REPORT))?;
    print_epochs(&report);
    println!("saved {}", run.task_checkpoint().display());
    Ok(())
}

fn load_engine(run: &Path, policy: &str) -> Result<Engine> {
    Engine::load(&RunDir::new(run), policy).with_context(|| format!("loading models from {}", run.display()))
}

fn print_reports(reports: &[EvalReport]) {
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "arm", "task acc", "bias f1", "comp", "suff", "kept"
    );
    for r in reports {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.arm, r.task_accuracy, r.bias_f1, r.comprehensiveness, r.sufficiency, r.rationale_fraction
        );
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let engine = load_engine(&a.run, &a.policy)?;
    let corpus = load_encoded(&a.data, &engine.labels, &engine.vocab)?;
    let names: Vec<String> = if a.arms.is_empty() {
        eval_arms().names().map(str::to_owned).collect()
    } else {
        a.arms.clone()
    };
    let ctx = engine.context();
    let mut reports = Vec::new();
    for name in &names {
        let arm = eval_arm(name)?;
        reports.push(evaluate(arm.as_ref(), &ctx, &corpus)?);
    }
    print_reports(&reports);
    let out = a.out.unwrap_or_else(|| RunDir::new(&a.run).path(EVAL_REPORT));
    write_json(&out, &reports)?;
    Ok(())
}

fn parse(a: ParseArgs) -> Result<()> {
    let input = tokenize(&a.text)?;
    let primary = parser(&a.parser).or_else(|err| {
        if a.parser == "external" {
            eprintln!("notice: {err}; using the grammar parser");
            parser("grammar")
        } else {
            Err(err)
        }
    })?;
    let (parse, notice) = parse_with_fallback(primary.as_ref(), &a.feedback, &input, &a.bias_variable)?;
    if let Some(n) = notice {
        eprintln!("notice: {n}");
    }
    for w in &parse.warnings {
        eprintln!("warning: {w}");
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&parse)?);
    } else {
        println!("{}", format_labels(&parse.labels));
    }
    Ok(())
}

fn parser_eval(a: ParserEvalArgs) -> Result<()> {
    let set = match &a.data {
        Some(path) => ParserEvalSet::load(path)?,
        None => ParserEvalSet::bundled(),
    };
    let p = parser(&a.parser)?;
    let acc = parser_accuracy(p.as_ref(), &set)?;
    println!("{acc}");
    if a.verbose {
        for (k, why) in &acc.failures {
            println!("miss {k}: {:?}: {why}", set.items[*k].feedback);
        }
    }
    Ok(())
}

fn run_simulation(a: SimulateArgs) -> Result<()> {
    let engine = load_engine(&a.run, &a.policy)?;
    let corpus = load_encoded(&a.data, &engine.labels, &engine.vocab)?;
    let script = load_script(&a.feedback)?;
    let p = match parser(&a.parser) {
        Ok(p) => p,
        Err(err) if a.parser == "external" => {
            eprintln!("notice: {err}; using the grammar parser");
            parser("grammar")?
        }
        Err(err) => return Err(err.into()),
    };
    let report = simulate(&engine, &corpus, &script, p.as_ref())?;
    print_reports(&[report.before.clone(), report.after.clone()]);
    println!("applied {} of {} feedback lines", report.applied, script.len());
    for (line, why) in report.failures.iter().take(10) {
        println!("line {}: {why}", line + 1);
    }
    let out = a.out.unwrap_or_else(|| RunDir::new(&a.run).path(SIMULATION_REPORT));
    write_json(&out, &report)?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let engine = match &a.run {
        Some(run) => Some(load_engine(run, &a.policy)?),
        None => {
            log::warn!("no run directory given; model routes will answer 503");
            None
        }
    };
    if a.ttl_secs == 0 {
        bail!("--ttl-secs must be at least 1");
    }
    let config = ServiceConfig {
        addr: a.addr,
        ttl: Duration::from_secs(a.ttl_secs),
        persist: a.persist,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(debias_service::serve(engine, config))?;
    Ok(())
}
