use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thoughtroute::autodiff::{ParameterStore, TensorError};
use thoughtroute::dataset::{read_dataset, write_dataset, Dataset};
use thoughtroute::decode::{translate, SearchConfig};
use thoughtroute::metrics::TranslationScores;
use thoughtroute::model;
use thoughtroute::report::{matrix_csv, matrix_pgm};
use thoughtroute::selfcheck::{self, Module};
use thoughtroute::synth::{make_batch, Split, Synthesizer};
use thoughtroute::train::checkpoint::Checkpoint;
use thoughtroute::train::{self, StopReason, TrainState, Trainer, LOG_HEADER};
use thoughtroute::{Error, RunConfig};

use crate::{ConfigArgs, ModuleArg, SplitArg};

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

/// Message and exit code of a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Input(_) => USAGE,
            Error::Dataset(_) | Error::Checkpoint(_) | Error::Io(_) => DATA,
            Error::Numeric { .. } | Error::Tensor(_) => NUMERIC,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Error::from(e).into()
    }
}

type Outcome = Result<String, Failure>;

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(DATA, format!("{}: {e}", path.display()))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if !args.overrides.is_empty() {
        let text: Vec<&str> = args.overrides.iter().map(String::as_str).collect();
        cfg.apply(&text.join("\n"))?;
    }
    Ok(cfg)
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Dataset, Failure> {
    let data = read_dataset(path).map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))?;
    if data.d_x != cfg.synth.d_x || data.lexicon_size != cfg.synth.lexicon_size {
        return Err(Failure::new(
            DATA,
            format!(
                "{}: d_x {} / lexicon {} do not match the configuration ({} / {})",
                path.display(),
                data.d_x,
                data.lexicon_size,
                cfg.synth.d_x,
                cfg.synth.lexicon_size
            ),
        ));
    }
    Ok(data)
}

/// Checkpoint plus the configuration it was written with, shape-checked.
fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig), Failure> {
    let ck = Checkpoint::load(path).map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::from_snapshot(&ck.manifest.config)
        .map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))?;
    let template = model::init_params(&cfg.model, cfg.train.seed)?;
    ck.check_against(&template)
        .map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))?;
    Ok((ck, cfg))
}

pub fn gen_data(args: &ConfigArgs, out: &Path, split: SplitArg, count: Option<usize>) -> Outcome {
    let cfg = load_config(args)?;
    let (split, default_count) = match split {
        SplitArg::Train => (Split::Train, cfg.train_count),
        SplitArg::Dev => (Split::Dev, cfg.dev_count),
        SplitArg::Test => (Split::Test, cfg.test_count),
    };
    let count = count.unwrap_or(default_count);
    let syn = Synthesizer::new(cfg.synth.clone())?;
    let samples = syn.dataset(split.seed(cfg.train.seed), count);
    write_dataset(out, cfg.synth.d_x, cfg.synth.lexicon_size, &samples)
        .map_err(|e| Failure::new(DATA, format!("{}: {e}", out.display())))?;
    let frames: usize = samples.iter().map(|s| s.len()).sum();
    Ok(format!(
        "split={} count={count} frames={frames} path={}",
        split.name(),
        out.display()
    ))
}

pub fn train(
    args: &ConfigArgs,
    data_dir: &Path,
    out_dir: &Path,
    no_regularizers: bool,
    no_prior: bool,
    resume: Option<&Path>,
) -> Outcome {
    let mut cfg = load_config(args)?;
    if no_regularizers {
        cfg.loss.lambda_mono = 0.0;
        cfg.loss.lambda_cont = 0.0;
    }
    if no_prior {
        cfg.model.decoder.use_prior = false;
    }
    let train_set = load_data(&data_dir.join("train.sgtd"), &cfg)?;
    let dev_set = load_data(&data_dir.join("dev.sgtd"), &cfg)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let trainer = Trainer {
        model: &cfg.model,
        loss: &cfg.loss,
        cfg: &cfg.train,
    };
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(|e| Failure::new(DATA, format!("{}: {e}", p.display())))?;
            let template = trainer.init_state()?.params;
            ck.check_against(&template)
                .map_err(|e| Failure::new(DATA, format!("{}: {e}", p.display())))?;
            ck.into_state()
        }
        None => trainer.init_state()?,
    };

    fs::write(out_dir.join("config.conf"), cfg.render()).map_err(io(out_dir))?;
    let log_path = out_dir.join("train_log.csv");
    let fresh_log = resume.is_none() || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(!fresh_log)
        .write(true)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(io(&log_path))?;
    if fresh_log {
        writeln!(log, "{LOG_HEADER}").map_err(io(&log_path))?;
    }
    println!("{LOG_HEADER}");

    let snapshot = cfg.snapshot();
    let last = out_dir.join("checkpoint.sgtc");
    let best = out_dir.join("best.sgtc");
    let mut best_acc = state.plateau.best.unwrap_or(f64::NEG_INFINITY);
    let save = |state: &TrainState, path: &Path| -> Result<(), Error> {
        Checkpoint::from_state(snapshot.clone(), state, cfg.train.seed).save(path)?;
        Ok(())
    };
    let stop = trainer.run(&mut state, &train_set.samples, &dev_set.samples, |st, row, improved| {
        let line = row.csv();
        println!("{line}");
        writeln!(log, "{line}")?;
        save(st, &last)?;
        if improved {
            best_acc = row.eval.token_acc;
            save(st, &best)?;
        }
        Ok(())
    })?;
    save(&state, &last)?;
    if !best.exists() {
        save(&state, &best)?;
    }
    let stop = match stop {
        StopReason::MaxEpochs => "max_epochs",
        StopReason::MaxSteps => "max_steps",
        StopReason::LearningRate => "learning_rate",
        StopReason::TargetReached => "target_reached",
    };
    Ok(format!(
        "stop={stop} steps={} epochs={} best_dev_acc={} checkpoint={}",
        state.step(),
        state.epoch,
        best_acc,
        last.display()
    ))
}

/// Column order of the metrics CSV written by `eval`.
pub const EVAL_HEADER: &str =
    "samples,beam,len_penalty,token_acc,bleu1,bleu2,bleu3,bleu4,rouge_l,entropy,mono_viol,span,tv,purity";

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    beam: usize,
    len_penalty: f64,
    max_len: Option<usize>,
    out: Option<&Path>,
    hyp_out: Option<&Path>,
) -> Outcome {
    let (ck, cfg) = load_checkpoint(checkpoint)?;
    let data = load_data(data, &cfg)?;
    let search = SearchConfig {
        beam,
        len_penalty,
        max_len: max_len.unwrap_or(cfg.search.max_len),
    };
    if !(1..=64).contains(&beam) {
        return Err(Failure::new(USAGE, format!("beam {beam} outside 1..=64")));
    }
    let params: &ParameterStore = &ck.params;
    let report = train::evaluate(&cfg.model, params, &data.samples, false, search.max_len)?;
    let mut hyps = Vec::with_capacity(data.samples.len());
    let mut refs = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let (clip, _) = make_batch(&[s])?;
        hyps.push(translate(params, &cfg.model, &clip, &search)?);
        refs.push(s.tokens[..s.tokens.len() - 1].to_vec());
    }
    let scores = TranslationScores::compute(&hyps, &refs);
    let i = &report.interp;
    let row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        report.samples,
        beam,
        len_penalty,
        report.token_acc,
        scores.bleu[0],
        scores.bleu[1],
        scores.bleu[2],
        scores.bleu[3],
        scores.rouge_l,
        i.entropy,
        i.mono_viol,
        i.span,
        i.tv,
        report.purity
    );
    println!("{EVAL_HEADER}");
    println!("{row}");
    if let Some(p) = out {
        fs::write(p, format!("{EVAL_HEADER}\n{row}\n")).map_err(io(p))?;
    }
    if let Some(p) = hyp_out {
        let mut text = String::new();
        for h in &hyps {
            let toks: Vec<String> = h.iter().map(usize::to_string).collect();
            let _ = writeln!(text, "{}", toks.join(" "));
        }
        fs::write(p, text).map_err(io(p))?;
    }
    let mut line = String::new();
    for (k, v) in EVAL_HEADER.split(',').zip(row.split(',')) {
        let _ = write!(line, "{k}={v} ");
    }
    Ok(line.trim_end().to_string())
}

pub fn inspect_routing(checkpoint: &Path, data: &Path, sample: usize, prefix: &str) -> Outcome {
    let (ck, cfg) = load_checkpoint(checkpoint)?;
    let data = load_data(data, &cfg)?;
    let n = data.samples.len();
    let s = data
        .samples
        .get(sample)
        .ok_or_else(|| Failure::new(USAGE, format!("sample {sample} out of range (dataset has {n})")))?;
    let ins = train::inspect(&cfg.model, &ck.params, s)?;
    let files = [
        (format!("{prefix}.A.csv"), matrix_csv(&ins.a)),
        (format!("{prefix}.r.csv"), matrix_csv(&ins.r)),
        (format!("{prefix}.w.csv"), matrix_csv(&ins.w)),
        (format!("{prefix}.r.pgm"), matrix_pgm(&ins.r)),
    ];
    for (path, text) in &files {
        fs::write(path, text).map_err(io(Path::new(path)))?;
    }
    Ok(format!(
        "sample={sample} thoughts={} segments={} frames={} tokens={} prefix={prefix}",
        ins.a.shape()[0],
        ins.a.shape()[1],
        ins.r.shape()[1],
        ins.w.shape()[0]
    ))
}

pub fn grad_check(args: &ConfigArgs, module: ModuleArg, eps: f64, tol: f64, seed: u64, corrupt: f64) -> Outcome {
    let cfg = load_config(args)?;
    let modules: Vec<Module> = match module {
        ModuleArg::All => Module::ALL.to_vec(),
        ModuleArg::Encoder => vec![Module::Encoder],
        ModuleArg::Thinking => vec![Module::Thinking],
        ModuleArg::Decoder => vec![Module::Decoder],
        ModuleArg::Objectives => vec![Module::Objectives],
    };
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut line = String::new();
    for m in modules {
        let r = selfcheck::check_module(m, &cfg.model, &cfg.loss, seed, eps, tol, corrupt)?;
        println!(
            "{} max_rel_err={:e} worst={}[{}] coords={}",
            m.name(),
            r.max_rel_err,
            r.worst_param,
            r.worst_index,
            r.coords_checked
        );
        let _ = write!(line, "{}={:e} ", m.name(), r.max_rel_err);
        worst = worst.max(r.max_rel_err);
        if !r.passed() {
            failed.push(m.name());
        }
    }
    if !failed.is_empty() {
        return Err(Failure::new(
            NUMERIC,
            format!("gradient check failed for {} (max relative error {worst:e}, tol {tol:e})", failed.join(", ")),
        ));
    }
    Ok(format!("{line}max_rel_err={worst:e} tol={tol:e}"))
}
