use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use traceguard_core::detect::{monte_carlo_expected_kl, monte_carlo_joint_kl};
use traceguard_core::game::{self, GameInstance};
use traceguard_core::logit_sim::{
    perturb_and_resample_with, sample_mask, token_flip_rate, validate_params, MarkovTeacher,
    Resampling, SimError,
};
use traceguard_core::poison::{poison_corpus, BranchingSet, PoisonConfig, PoisonReport};
use traceguard_core::report::{aggregate, compare, write_budget_table, write_comparison_table};
use traceguard_core::synth::{self, SynthConfig};
use traceguard_core::trace::{load_corpus, write_corpus, ReasoningTrace};
use traceguard_core::{seed, ConstraintParams, LogitTable, NoiseConvention, PoisonMethod};

use crate::{
    Cli, Command, Convention, DetectArgs, Failure, GameCommand, GaussianArgs, Method, Mode,
    PoisonArgs, ReportArgs, ResampleMode, SynthArgs,
};

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Poison(args) => poison(args, seed),
        Command::Gaussian(args) => gaussian(args, seed),
        Command::Detect(args) => detect(args, seed),
        Command::Game { command } => game(command),
        Command::Report(args) => report(args),
        Command::Synth(args) => synth(args, seed),
    }
}

fn print_json(value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    println!("{text}");
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<ReasoningTrace>, Failure> {
    load_corpus(path)
        .with_context(|| format!("{}", path.display()))
        .map_err(Failure::data)
}

fn write_file(path: &Path, traces: &[ReasoningTrace]) -> Outcome {
    let file = fs::File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(Failure::data)?;
    let mut out = BufWriter::new(file);
    write_corpus(traces, &mut out)
        .and_then(|_| out.flush())
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::data)
}

fn convention(c: Convention) -> NoiseConvention {
    match c {
        Convention::TotalNorm => NoiseConvention::TotalNorm,
        Convention::PerCoordinate => NoiseConvention::PerCoordinate,
    }
}

fn marker_set(args: &PoisonArgs) -> Result<BranchingSet, Failure> {
    let set = match &args.markers {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .map_err(Failure::data)?;
            BranchingSet::parse(&text, args.case_sensitive)
        }
        None if args.case_sensitive => {
            BranchingSet::new(["Wait", "Hold on", "Alternatively"], true)
        }
        None => Ok(BranchingSet::default()),
    };
    set.context("invalid marker set").map_err(Failure::data)
}

fn poison(args: PoisonArgs, seed: u64) -> Outcome {
    if args.match_traceguard && args.method != Method::Random {
        return Err(Failure::usage(anyhow!(
            "--match-traceguard requires --method random"
        )));
    }
    let markers = marker_set(&args)?;
    let traces = read_corpus(&args.input)?;
    let config = PoisonConfig {
        method: match args.method {
            Method::Traceguard => PoisonMethod::Traceguard,
            Method::Random => PoisonMethod::Random,
        },
        k: args.k,
        markers,
        match_traceguard: args.match_traceguard,
        seed,
    };
    let results = poison_corpus(&traces, &config, args.threads).map_err(Failure::usage)?;
    let (mut sentences, mut tokens) = (0usize, 0usize);
    let poisoned: Vec<ReasoningTrace> = results
        .into_iter()
        .map(|(mut trace, report)| {
            sentences += report.removed_indices.len();
            tokens += report.removed_token_count;
            trace.set_poison_report(&report);
            trace
        })
        .collect();
    write_file(&args.output, &poisoned)?;
    let summary = json!({
        "traces": poisoned.len(),
        "sentences_removed": sentences,
        "tokens_removed": tokens,
        "method": config.method,
        "k": config.k,
        "markers": config.markers.markers(),
        "case_sensitive": config.markers.case_sensitive(),
        "match_traceguard": config.match_traceguard,
        "seed": seed,
    });
    println!("{summary}");
    Ok(())
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Table(_) => Failure::data(e),
        _ => Failure::constraint(e),
    }
}

fn gaussian(args: GaussianArgs, seed: u64) -> Outcome {
    if args.trials == 0 {
        return Err(Failure::usage(anyhow!("--trials must be at least 1")));
    }
    let params = ConstraintParams::new(args.eta, args.k, args.sigma2)
        .with_convention(convention(args.convention))
        .with_protected(args.protected.iter().copied());
    validate_params(&params).map_err(sim_failure)?;

    let (table, source) = match &args.table {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .map_err(Failure::data)?;
            let table = LogitTable::parse(&text).map_err(Failure::data)?;
            (table, json!({ "path": path.display().to_string() }))
        }
        None => {
            if args.vocab < 2 || args.len == 0 {
                return Err(Failure::usage(anyhow!(
                    "--vocab must be at least 2 and --len at least 1"
                )));
            }
            let teacher = MarkovTeacher::random(args.vocab, 2.0, seed::derive(seed, 0));
            let table = LogitTable::from_markov(&teacher, args.len, seed::derive(seed, 1));
            (
                table,
                json!({ "markov": { "vocab": args.vocab, "len": args.len, "scale": 2.0 } }),
            )
        }
    };
    if table.is_empty() {
        return Err(Failure::data(anyhow!("logit table has no rows")));
    }
    let resampling = match args.resampling {
        ResampleMode::Sample => Resampling::Sample,
        ResampleMode::Greedy => Resampling::Greedy,
    };
    let flip_rate = token_flip_rate(
        &table,
        &params,
        resampling,
        args.trials,
        seed::derive(seed, 2),
    )
    .map_err(sim_failure)?;
    let mask = sample_mask(table.len(), &params, seed::derive(seed, 3)).map_err(sim_failure)?;
    let example =
        perturb_and_resample_with(&table, &mask, &params, resampling, seed::derive(seed, 4))
            .map_err(sim_failure)?;
    print_json(&json!({
        "command": "gaussian",
        "seed": seed,
        "params": params,
        "resampling": format!("{:?}", resampling).to_lowercase(),
        "trials": args.trials,
        "table": source,
        "vocab_size": table.vocab_size(),
        "positions": table.len(),
        "flip_rate": flip_rate,
        "example": {
            "mask": example.mask,
            "original_tokens": example.original_tokens,
            "perturbed_tokens": example.perturbed_tokens,
            "flips": example.flips(),
        },
    }))
}

fn detect(args: DetectArgs, seed: u64) -> Outcome {
    if !(args.sigma2.is_finite() && args.sigma2 >= 0.0) {
        return Err(Failure::usage(anyhow!(
            "--sigma2 must be a finite non-negative number"
        )));
    }
    if args.samples == 0 {
        return Err(Failure::usage(anyhow!("--samples must be at least 1")));
    }
    let logits: Vec<Vec<f64>> = match args.logits {
        Some(z) => {
            if z.len() < 2 || z.iter().any(|v| !v.is_finite()) {
                return Err(Failure::usage(anyhow!(
                    "--logits needs at least two finite values"
                )));
            }
            vec![z]
        }
        None => {
            if args.vocab < 2 || args.positions == 0 {
                return Err(Failure::usage(anyhow!(
                    "--vocab must be at least 2 and --positions at least 1"
                )));
            }
            let teacher = MarkovTeacher::random(args.vocab, 1.0, seed::derive(seed, 0));
            LogitTable::from_markov(&teacher, args.positions, seed::derive(seed, 1))
                .rows()
                .to_vec()
        }
    };
    let conv = convention(args.convention);
    let mc_seed = seed::derive(seed, 2);
    let estimate = if logits.len() == 1 {
        monte_carlo_expected_kl(&logits[0], args.sigma2, conv, args.samples, mc_seed)
    } else {
        monte_carlo_joint_kl(&logits, args.sigma2, conv, args.samples, mc_seed)
    };
    print_json(&json!({
        "command": "detect",
        "seed": seed,
        "sigma2": args.sigma2,
        "convention": conv.to_string(),
        "vocab": logits[0].len(),
        "positions": logits.len(),
        "mean": estimate.mean,
        "std_error": estimate.std_error,
        "samples": estimate.samples,
        "bound": estimate.bound,
        "satisfied": estimate.bound_satisfied,
        "logits": logits,
    }))
}

fn game_failure(e: game::GameError) -> Failure {
    match e {
        game::GameError::NothingAdmissible(_) => Failure::constraint(e),
        _ => Failure::data(e),
    }
}

fn load_instance(path: &Path) -> Result<GameInstance, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::data)?;
    GameInstance::from_json(&text).map_err(game_failure)
}

fn with_instance(mut value: Value, path: &Path) -> Value {
    if let Value::Object(map) = &mut value {
        map.insert("instance".into(), Value::String(path.display().to_string()));
    }
    value
}

fn to_value(v: &impl Serialize) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(Failure::data)
}

fn game(command: GameCommand) -> Outcome {
    match command {
        GameCommand::Solve {
            instance,
            mode,
            class,
        } => {
            let inst = load_instance(&instance)?;
            let eq = match mode {
                Mode::Robust => game::robust_value(&inst),
                Mode::Bayes => game::bayesian_value(&inst),
                Mode::Poison => {
                    let class = class
                        .ok_or_else(|| Failure::usage(anyhow!("--mode poison needs --class")))?;
                    game::data_poisoning_value(&inst, &class)
                }
            }
            .map_err(game_failure)?;
            let mut out = to_value(&eq)?;
            out["mode"] = json!(format!("{mode:?}").to_lowercase());
            print_json(&with_instance(out, &instance))
        }
        GameCommand::Relax { instance } => {
            let check = game::check_relaxation(&load_instance(&instance)?).map_err(game_failure)?;
            print_json(&with_instance(to_value(&check)?, &instance))
        }
        GameCommand::Memorize { instance } => {
            let report =
                game::memorization_demo(&load_instance(&instance)?).map_err(game_failure)?;
            print_json(&with_instance(to_value(&report)?, &instance))
        }
        GameCommand::BestResponse {
            instance,
            class,
            perturbation,
        } => {
            let inst = load_instance(&instance)?;
            let h = game::best_response(&inst, &class, &perturbation).map_err(game_failure)?;
            let out = json!({ "class": class, "perturbation": perturbation, "best_response": h });
            print_json(&with_instance(out, &instance))
        }
    }
}

fn collect_reports(paths: &[std::path::PathBuf]) -> Result<Vec<PoisonReport>, Failure> {
    let mut reports = Vec::new();
    for path in paths {
        for trace in read_corpus(path)? {
            let report = trace
                .poison_report()
                .with_context(|| {
                    format!(
                        "{}: trace {:?} has a malformed report",
                        path.display(),
                        trace.id
                    )
                })
                .map_err(Failure::data)?
                .ok_or_else(|| {
                    Failure::data(anyhow!(
                        "{}: trace {:?} has no poison report",
                        path.display(),
                        trace.id
                    ))
                })?;
            reports.push(report);
        }
    }
    Ok(reports)
}

fn report(args: ReportArgs) -> Outcome {
    let reports = collect_reports(&args.inputs)?;
    let mut buf = Vec::new();
    if args.compare {
        let (tg, rnd): (Vec<PoisonReport>, Vec<PoisonReport>) = reports
            .into_iter()
            .partition(|r| r.method == PoisonMethod::Traceguard);
        write_comparison_table(&compare(&tg, &rnd), &mut buf)
    } else {
        write_budget_table(&aggregate(&reports), &mut buf)
    }
    .map_err(Failure::data)?;
    match &args.output {
        Some(path) => {
            fs::write(path, &buf).with_context(|| format!("cannot write {}", path.display()))
        }
        None => io::stdout()
            .write_all(&buf)
            .context("cannot write to standard output"),
    }
    .map_err(Failure::data)
}

fn synth(args: SynthArgs, seed: u64) -> Outcome {
    if args.min_sentences > args.max_sentences || !(0.0..=1.0).contains(&args.density) {
        return Err(Failure::usage(anyhow!(
            "need min <= max sentences and density in [0, 1]"
        )));
    }
    let traces = synth::generate(&SynthConfig {
        traces: args.traces,
        min_sentences: args.min_sentences,
        max_sentences: args.max_sentences,
        branching_density: args.density,
        seed,
    });
    write_file(&args.output, &traces)
}
