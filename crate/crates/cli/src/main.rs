use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ctrecon::checks::Suite;
use ctrecon::config::RunConfig;
use ctrecon::eval::{check_geometry, evaluate, format_table, score, EvalReport, Method};
use ctrecon::simulate::Dataset;
use ctrecon::solver::{ProxKind, SolverContext};
use ctrecon::tensor_io::write_tensor;
use ctrecon::train::{prepare_record, train};

mod png;

#[derive(Parser)]
#[command(name = "ct-mepnet", version, about = "Dual-domain sparse-view CT reconstruction with metal artifact reduction")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "CT_MEPNET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a paired dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset and corruption seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the solver on one record directory.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "prox")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        prox: Option<ProxArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stages: Option<usize>,
        /// Write S_k and X_k of every stage.
        #[arg(long)]
        dump_stages: bool,
        /// Also export PNG previews.
        #[arg(long)]
        png: bool,
    },
    /// Train a learned solver and write its checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate the result on this dataset afterwards.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Score methods on a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "method", value_enum)]
        methods: Vec<MethodArg>,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Export PNG previews of every method's reconstruction of the first record.
        #[arg(long)]
        png: bool,
    },
    /// Run an invariant suite.
    Check {
        #[arg(long, value_enum)]
        suite: SuiteArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProxArg {
    Identity,
    SoftThreshold,
    LearnedStandard,
    LearnedEquivariant,
}

impl From<ProxArg> for ProxKind {
    fn from(p: ProxArg) -> Self {
        match p {
            ProxArg::Identity => ProxKind::Identity,
            ProxArg::SoftThreshold => ProxKind::SoftThreshold,
            ProxArg::LearnedStandard => ProxKind::LearnedStandard,
            ProxArg::LearnedEquivariant => ProxKind::LearnedEquivariant,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    GroundTruth,
    Input,
    Identity,
    SoftThreshold,
    LearnedStandard,
    LearnedEquivariant,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Adjoint,
    Equivariance,
    Gradient,
    Descent,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Adjoint => Suite::Adjoint,
            SuiteArg::Equivariance => Suite::Equivariance,
            SuiteArg::Gradient => Suite::Gradient,
            SuiteArg::Descent => Suite::Descent,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("run_config.toml");
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.dataset.seed = s;
        cfg.corruption.seed = s;
    }
    cfg.validate()?;
    let n = cfg.simulate(out)?;
    println!("wrote {n} records to {} (config {})", out.display(), cfg.hash());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(input: &Path, out: &Path, checkpoint: Option<&Path>, prox: Option<ProxArg>, config: Option<&Path>, stages: Option<usize>, dump: bool, png: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let method = match checkpoint {
        Some(c) => {
            if !c.exists() {
                bail!("checkpoint {} does not exist", c.display());
            }
            let m = Method::from_checkpoint(c).with_context(|| format!("loading checkpoint {}", c.display()))?;
            if let Some(k) = stages.filter(|&k| Some(k) != m.solver_config().map(|s| s.stages)) {
                bail!("--stages {k} differs from the checkpoint's stage count");
            }
            m
        }
        None => {
            let mut solver = cfg.solver.clone();
            if let Some(p) = prox {
                solver.prox = p.into();
            }
            if let Some(k) = stages {
                solver.stages = k;
            }
            if solver.prox.is_learned() {
                bail!("prox {:?} is learned and needs --checkpoint", solver.prox);
            }
            Method::classical(&solver)?
        }
    };
    let (ds, index) = Dataset::open_record(input)?;
    check_geometry(&method, &ds)?;
    let solver = method.solver_config().expect("solver method").clone();
    let ctx = SolverContext::new(ds.geometry(), &solver)?;
    let sample = prepare_record(&ds, &ctx, &solver, index)?;
    let state = method.run(&ctx, &sample)?.expect("solver method");
    create_dir(out)?;
    let (h, w) = sample.record.x_gt.shape();
    let (nb, nv) = ds.geometry().sino_shape();
    let s_final = state.s(state.stage);
    write_tensor(&out.join("x0.ctt"), &[h, w], state.x[0].data())?;
    write_tensor(&out.join("x_final.ctt"), &[h, w], state.final_x().data())?;
    write_tensor(&out.join("s_final.ctt"), &[nb, nv], s_final.data())?;
    let (p0, s0) = score(&state.x[0], &sample)?;
    let (pk, sk) = score(state.final_x(), &sample)?;
    let window = png::window(&sample.record.x_gt);
    if dump {
        let dir = out.join("stages");
        let names = state.write_stage_dumps(&dir)?;
        if png {
            for k in 1..=state.stage {
                png::write(&dir.join(format!("stage_{k:02}_x.png")), &state.x[k], window)?;
            }
        }
        println!("wrote {} stage files to {}", names.len(), dir.display());
    }
    if png {
        png::write(&out.join("x_gt.png"), &sample.record.x_gt, window)?;
        png::write(&out.join("x0.png"), &state.x[0], window)?;
        png::write(&out.join("x_final.png"), state.final_x(), window)?;
    }
    let summary = format!(
        "{{\n  \"record\": \"{}\",\n  \"method\": \"{}\",\n  \"stages\": {},\n  \"config_hash\": \"{}\",\n  \"checkpoint_id\": {},\n  \"psnr_x0\": {p0:.6},\n  \"ssim_x0\": {s0:.6},\n  \"psnr_final\": {pk:.6},\n  \"ssim_final\": {sk:.6}\n}}\n",
        sample.id,
        method.name(),
        state.stage,
        cfg.hash(),
        method.checkpoint().map(|c| format!("\"{}\"", c.checkpoint_id)).unwrap_or_else(|| "null".into()),
    );
    fs::write(out.join("reconstruct.json"), summary)?;
    println!("{} on {}: X_0 {p0:.2} dB / {s0:.4}, X_{} {pk:.2} dB / {sk:.4}", method.name(), sample.id, state.stage);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(config: Option<&Path>, data: &Path, out: &Path, epochs: Option<usize>, steps: Option<usize>, seed: Option<u64>, eval: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if steps.is_some() {
        cfg.train.max_steps = steps;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if !cfg.solver.prox.is_learned() {
        bail!("training needs a learned prox kind, the config has {:?}", cfg.solver.prox);
    }
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    create_dir(out)?;
    let outcome = train(&ds, &cfg.solver, &cfg.train, &cfg.loss, out, Some(cfg.hash()))?;
    write_config(out, &cfg)?;
    match (outcome.curve.first(), outcome.curve.last()) {
        (Some(a), Some(b)) => println!("trained {} steps: loss {:.4} at step {} -> {:.4} at step {}", b.0, a.1, a.0, b.1, b.0),
        _ => println!("no training steps; wrote the initialization"),
    }
    println!("checkpoint {} in {} (config {})", outcome.manifest.checkpoint_id, out.display(), cfg.hash());
    if let Some(e) = eval {
        let test = Dataset::open(e)?;
        let reports = vec![
            evaluate(&test, &Method::Input(cfg.solver.clone()), Some(cfg.hash()))?,
            evaluate(&test, &Method::from_checkpoint(out)?, Some(cfg.hash()))?,
        ];
        print!("{}", format_table(&reports));
    }
    Ok(())
}

fn method_list(cfg: &RunConfig, methods: &[MethodArg], checkpoints: &[PathBuf]) -> Result<Vec<Method>> {
    let mut loaded = checkpoints
        .iter()
        .map(|c| Method::from_checkpoint(c).with_context(|| format!("loading checkpoint {}", c.display())).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let methods = if methods.is_empty() && checkpoints.is_empty() {
        vec![MethodArg::Input, MethodArg::Identity]
    } else {
        methods.to_vec()
    };
    let mut out = Vec::new();
    for m in methods {
        let classical = |kind: ProxKind| Method::classical(&ctrecon::solver::SolverConfig { prox: kind, ..cfg.solver.clone() });
        match m {
            MethodArg::GroundTruth => out.push(Method::GroundTruth),
            MethodArg::Input => out.push(Method::Input(cfg.solver.clone())),
            MethodArg::Identity => out.push(classical(ProxKind::Identity)?),
            MethodArg::SoftThreshold => out.push(classical(ProxKind::SoftThreshold)?),
            MethodArg::LearnedStandard | MethodArg::LearnedEquivariant => {
                let kind = if m == MethodArg::LearnedStandard { ProxKind::LearnedStandard } else { ProxKind::LearnedEquivariant };
                let slot = loaded
                    .iter_mut()
                    .find(|l| l.as_ref().and_then(|x| x.solver_config()).is_some_and(|s| s.prox == kind))
                    .with_context(|| format!("method {kind:?} needs a --checkpoint trained with that prox"))?;
                out.push(slot.take().expect("present"));
            }
        }
    }
    out.extend(loaded.into_iter().flatten());
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate(data: &Path, out: &Path, config: Option<&Path>, methods: &[MethodArg], checkpoints: &[PathBuf], png: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = Dataset::open(data)?;
    let list = method_list(&cfg, methods, checkpoints)?;
    create_dir(out)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut stems = Vec::new();
    for m in &list {
        let r = evaluate(&ds, m, Some(cfg.hash()))?;
        let stem = unique_stem(&reports, &r.method);
        r.write_csv(&out.join(format!("{stem}.csv")))?;
        r.write_json(&out.join(format!("{stem}.json")))?;
        reports.push(r);
        stems.push(stem);
    }
    if png && !ds.is_empty() {
        let dir = out.join("png");
        create_dir(&dir)?;
        for (m, stem) in list.iter().zip(&stems) {
            let solver = m.solver_config().cloned().unwrap_or_default();
            let ctx = SolverContext::new(ds.geometry(), &solver)?;
            let sample = prepare_record(&ds, &ctx, &solver, 0)?;
            let x = m.reconstruct(&ctx, &sample)?;
            png::write(&dir.join(format!("{}_{stem}.png", sample.id)), &x, png::window(&sample.record.x_gt))?;
        }
    }
    let table = format_table(&reports);
    let header = format!("geometry {}, config {}\n", ds.manifest.geometry_hash, cfg.hash());
    fs::write(out.join("table.txt"), format!("{header}{table}"))?;
    println!("dataset {}", data.display());
    print!("{header}{table}");
    Ok(())
}

fn unique_stem(previous: &[EvalReport], name: &str) -> String {
    let n = previous.iter().filter(|r| r.method == name).count();
    if n == 0 {
        name.to_string()
    } else {
        format!("{name}-{}", n + 1)
    }
}

fn check(suite: Suite) -> Result<bool> {
    let results = suite.run()?;
    for a in &results {
        println!("{a}");
    }
    let ok = results.iter().all(|a| a.passed());
    println!("suite {}: {}", suite.name(), if ok { "passed" } else { "FAILED" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    match cli.cmd {
        Cmd::Simulate { config, out, seed } => simulate(config.as_deref(), &out, seed)?,
        Cmd::Reconstruct {
            input,
            out,
            checkpoint,
            prox,
            config,
            stages,
            dump_stages,
            png,
        } => reconstruct(&input, &out, checkpoint.as_deref(), prox, config.as_deref(), stages, dump_stages, png)?,
        Cmd::Train {
            config,
            data,
            out,
            epochs,
            steps,
            seed,
            eval,
        } => run_train(config.as_deref(), &data, &out, epochs, steps, seed, eval.as_deref())?,
        Cmd::Evaluate {
            data,
            out,
            config,
            methods,
            checkpoints,
            png,
        } => run_evaluate(&data, &out, config.as_deref(), &methods, &checkpoints, png)?,
        Cmd::Check { suite } => return check(suite.into()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
