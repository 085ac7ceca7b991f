use std::fs;
use std::path::{Path, PathBuf};

use adaptkan::clf::{
    self, Analytical, ConformalReport, Lyapunov, NetClf, SimConfig, Trajectory,
};
use adaptkan::exec::Exec;
use adaptkan::network::AdaptKanNet;
use adaptkan::ood::{self, Bounds, OodScorer};
use adaptkan::optim::train;
use adaptkan::persist::{Metadata, ModelFile};
use adaptkan::tasks::{read_matrix, rmse, write_matrix, Dataset, SymbolicTask};
use adaptkan::{KanError, Result};
use ndarray::Array2;

use crate::config::{self, ClfConfig, TrainConfig};
use crate::{ClfCommand, Cli, Command, EvalArgs, OodCommand};

pub fn run(cli: &Cli) -> Result<u8> {
    fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Ood(c) => cmd_ood(cli, c),
        Command::Clf(c) => cmd_clf(cli, c),
    }
}

fn out(cli: &Cli, name: &str) -> PathBuf {
    cli.out_dir.join(name)
}

fn cmd_train(cli: &Cli) -> Result<u8> {
    let cfg: TrainConfig = config::load::<TrainConfig>(cli.config.as_deref())?.with_seed(cli.seed);
    let task = SymbolicTask::from_config(&cfg.task)?;
    let (train_set, test_set, names) = match &cfg.data {
        Some(files) => {
            let tr = Dataset::read_csv(&files.train, files.targets)?;
            let te = Dataset::read_csv(&files.test, files.targets)?;
            (tr, te, Vec::new())
        }
        None => {
            let (tr, te) = task.generate();
            (tr, te, task.inputs.clone())
        }
    };
    let mut init = cfg.model.clone();
    if init.widths.first() != Some(&train_set.n_features()) || init.widths.last() != Some(&train_set.y.ncols()) {
        return Err(KanError::Config(format!(
            "model.widths {:?} does not match {} inputs and {} targets",
            init.widths,
            train_set.n_features(),
            train_set.y.ncols()
        )));
    }
    if let Some(first) = cfg.plan.rounds.first() {
        init.omega = first.omega;
    }
    let mut net = AdaptKanNet::init(&init, cfg.adapt)?;
    let history = train(&mut net, &train_set, &test_set, &cfg.plan)?;
    history.write_csv(out(cli, "metrics.csv"))?;
    if cfg.data.is_none() {
        train_set.write_csv(out(cli, "train.csv"), &names)?;
        test_set.write_csv(out(cli, "test.csv"), &names)?;
    }
    let meta = Metadata {
        seed: cfg.plan.seed,
        init: Some(init),
        plan: Some(serde_json::to_value(&cfg.plan)?),
        task: cfg.data.is_none().then(|| cfg.task.name.clone()),
    };
    ModelFile::new(net, meta).save(out(cli, "model.json"))?;
    for r in &history.rounds {
        println!(
            "round {} omega {} train_rmse {:.6e} test_rmse {:.6e}{}",
            r.round,
            r.omega,
            r.train_rmse,
            r.test_rmse,
            if r.fail { " FAIL" } else { "" }
        );
    }
    if let Some(best) = history.best_test_rmse() {
        println!("best test_rmse {best:.6e}");
    }
    Ok(if history.any_fail() { 1 } else { 0 })
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<u8> {
    let model = ModelFile::load(&args.model)?.model;
    let data = Dataset::read_csv(&args.data, args.targets)?;
    let pred = model.forward(data.x.view())?;
    if pred.ncols() != data.y.ncols() {
        return Err(KanError::Config(format!(
            "model has {} outputs but the data has {} targets",
            pred.ncols(),
            data.y.ncols()
        )));
    }
    let e = rmse(pred.view(), data.y.view());
    println!("rmse {e:.6e}");
    if let Some(name) = &args.predictions {
        let header: Vec<String> = (0..pred.ncols()).map(|i| format!("pred{i}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_matrix(out(cli, name), &header, pred.view())?;
    }
    Ok(if e.is_finite() { 0 } else { 1 })
}

fn read_column(path: &Path) -> Result<Vec<f64>> {
    let (cols, m) = read_matrix(path)?;
    if cols != 1 {
        return Err(KanError::Data(format!("{} must have one column, found {cols}", path.display())));
    }
    Ok(m.column(0).to_vec())
}

fn cmd_ood(cli: &Cli, c: &OodCommand) -> Result<u8> {
    match c {
        OodCommand::Fit {
            features,
            bins,
            msp_lambda,
            classes,
        } => {
            let (_, x) = read_matrix(features)?;
            let default_bins = if msp_lambda.is_some() {
                ood::DEFAULT_MSP_BINS
            } else {
                ood::DEFAULT_BINS
            };
            let mut scorer = OodScorer::fit(x.view(), bins.unwrap_or(default_bins), &Bounds::FromData)?;
            if let Some(l) = msp_lambda {
                let k = classes.ok_or_else(|| KanError::Config("--msp-lambda needs --classes".into()))?;
                scorer = scorer.with_msp(*l, k);
            }
            fs::write(out(cli, "scorer.json"), serde_json::to_string_pretty(&scorer)?)?;
            println!(
                "fitted {} features with {} bins (bounds from data min/max)",
                scorer.n_features(),
                scorer.histograms[0].n_bins()
            );
            Ok(0)
        }
        OodCommand::Score {
            scorer,
            features,
            logits,
            out: name,
        } => {
            let scorer: OodScorer = serde_json::from_str(&fs::read_to_string(scorer)?)?;
            let (_, x) = read_matrix(features)?;
            let scores = match logits {
                None => scorer.score_batch(x.view(), Exec::Parallel)?,
                Some(p) => {
                    let (_, l) = read_matrix(p)?;
                    if l.nrows() != x.nrows() {
                        return Err(KanError::Data(format!(
                            "{} logit rows for {} feature rows",
                            l.nrows(),
                            x.nrows()
                        )));
                    }
                    (0..x.nrows())
                        .map(|i| scorer.score_hist_msp(&x.row(i).to_vec(), &l.row(i).to_vec()))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let m = Array2::from_shape_vec((scores.len(), 1), scores).expect("one column");
            write_matrix(out(cli, name), &["score"], m.view())?;
            println!("scored {} rows", m.nrows());
            Ok(0)
        }
        OodCommand::Auroc { id, ood } => {
            let a = ood::auroc(&read_column(id)?, &read_column(ood)?);
            if a.is_nan() {
                return Err(KanError::Data("both score files need at least one row".into()));
            }
            println!("{a}");
            Ok(0)
        }
    }
}

fn write_report(path: &Path, ts: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["start_x1", "start_x2", "final_x1", "final_x2", "distance", "failed"])?;
    for t in ts {
        w.write_record([
            format!("{:?}", t.start[0]),
            format!("{:?}", t.start[1]),
            format!("{:?}", t.end[0]),
            format!("{:?}", t.end[1]),
            format!("{:?}", t.distance()),
            (t.failed as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_report(path: &Path) -> Result<ConformalReport> {
    let mut r = csv::Reader::from_path(path)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "distance")
        .ok_or_else(|| KanError::Data(format!("{} has no distance column", path.display())))?;
    let mut d = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = rec.get(col).unwrap_or("");
        d.push(field.trim().parse::<f64>().map_err(|_| KanError::Data(format!("bad distance {field:?}")))?);
    }
    ConformalReport::new(d)
}

fn cmd_clf(cli: &Cli, c: &ClfCommand) -> Result<u8> {
    match c {
        ClfCommand::Train => {
            let cfg: ClfConfig = config::load::<ClfConfig>(cli.config.as_deref())?.with_seed(cli.seed);
            let mut net = AdaptKanNet::init(&cfg.model, cfg.adapt)?;
            let hist = clf::train_clf(&mut net, &cfg.plan)?;
            let losses = Array2::from_shape_fn((hist.train_loss.len(), 2), |(i, j)| {
                if j == 0 {
                    i as f64
                } else {
                    hist.train_loss[i]
                }
            });
            write_matrix(out(cli, "clf_loss.csv"), &["step", "loss"], losses.view())?;
            let meta = Metadata {
                seed: cfg.plan.seed,
                init: Some(cfg.model.clone()),
                plan: Some(serde_json::to_value(&cfg.plan)?),
                task: Some(format!("clf:{:?}", cfg.plan.loss.output_mode).to_lowercase()),
            };
            ModelFile::new(net, meta).save(out(cli, "clf_model.json"))?;
            println!("test loss {:.6e} adapt events {}", hist.test_loss, hist.adapt_events);
            Ok(if hist.failed { 1 } else { 0 })
        }
        ClfCommand::Simulate {
            analytical,
            model,
            trajectories,
            seeds,
            radius,
            dt,
            horizon,
            paths,
            out: name,
        } => {
            let seeds = (*seeds).max(1);
            let base = cli.seed.unwrap_or(0);
            let mut starts = Vec::with_capacity(*trajectories);
            for s in 0..seeds {
                let share = *trajectories / seeds as usize + usize::from((s as usize) < *trajectories % seeds as usize);
                starts.extend(clf::uniform_starts(share, *radius, base + s));
            }
            let provider: Box<dyn Lyapunov> = if *analytical {
                Box::new(Analytical)
            } else {
                let file = ModelFile::load(model.as_ref().expect("clap requires --model"))?;
                let mode = if file.model.n_outputs() == 1 {
                    clf::OutputMode::Direct
                } else {
                    clf::OutputMode::SquaredNorm
                };
                let mode = file
                    .metadata
                    .plan
                    .as_ref()
                    .and_then(|p| p.pointer("/loss/output_mode"))
                    .and_then(|m| serde_json::from_value(m.clone()).ok())
                    .unwrap_or(mode);
                Box::new(NetClf::new(file.model.with_exec(Exec::Sequential), mode)?)
            };
            let sim = SimConfig {
                horizon: *horizon,
                dt: *dt,
                record_path: *paths,
                ..Default::default()
            };
            let ts = clf::simulate_many(&starts, provider.as_ref(), &sim, Exec::Parallel)?;
            write_report(&out(cli, name), &ts)?;
            if *paths {
                let mut w = csv::Writer::from_path(out(cli, "paths.csv"))?;
                w.write_record(["trajectory", "t", "x1", "x2", "v"])?;
                for (i, t) in ts.iter().enumerate() {
                    for (s, (x, v)) in t.path.iter().zip(&t.values).enumerate() {
                        w.write_record([
                            i.to_string(),
                            format!("{:?}", s as f64 * dt),
                            format!("{:?}", x[0]),
                            format!("{:?}", x[1]),
                            format!("{v:?}"),
                        ])?;
                    }
                }
                w.flush()?;
            }
            let report = ConformalReport::from_trajectories(&ts)?;
            let failed = ts.iter().filter(|t| t.failed).count();
            println!("trajectories {} failed {failed}", report.k());
            for c in [0.5, 0.25, 0.1] {
                println!("confidence(C={c}) {:.6}", report.confidence(c));
            }
            Ok(0)
        }
        ClfCommand::Conformal { report, c, delta } => {
            let r = read_report(report)?;
            if let Some(c) = c {
                println!("{}", r.confidence(*c));
            } else if let Some(d) = delta {
                if !(0.0..=1.0).contains(d) {
                    return Err(KanError::Config(format!("--delta must be in [0, 1], got {d}")));
                }
                println!("{}", r.quantile(*d));
            }
            Ok(0)
        }
    }
}
