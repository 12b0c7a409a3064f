use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sigood_core::data::{parse_tu_dataset, synth_dataset, write_tu_dataset, SynthSpec};
use sigood_core::detector::{detect as run_detector, scores_csv, trace_csv};
use sigood_core::eval::{
    auc, export_score_distribution, reference_table_csv, run_benchmark, run_sweep, sweep_csv, REFERENCE_NOTE,
};
use sigood_core::gnn::{load_checkpoint, pretrain_with_history, save_checkpoint};
use sigood_core::verify::{derivation_suite, gradient_suite, GRADIENT_CHECKS};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{BenchArgs, DataArgs, DetectArgs, EvalArgs, SynthArgs, TrainArgs, VerifyArgs};

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn required<T>(flag: Option<T>, file: Option<T>, what: &str) -> Result<T, CliError> {
    flag.or(file)
        .ok_or_else(|| CliError::Usage(format!("missing {what} (give the flag or set it under [paths])")))
}

fn override_with<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn data_location(args: DataArgs, cfg: &RunConfig) -> Result<(PathBuf, String), CliError> {
    let dir = required(args.data, cfg.paths.data_dir.clone(), "--data")?;
    let name = required(args.name, cfg.paths.dataset.clone(), "--name")?;
    Ok((dir, name))
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let mut spec = cfg.synth.clone().unwrap_or_else(|| SynthSpec::er(100, 8, 0.0, 1.0, 0));
    override_with(&mut spec.family, a.family);
    override_with(&mut spec.n_graphs, a.n_graphs);
    override_with(&mut spec.nodes_min, a.nodes_min);
    override_with(&mut spec.nodes_max, a.nodes_max);
    override_with(&mut spec.edge_prob, a.edge_prob);
    override_with(&mut spec.feature_mean, a.feature_mean);
    override_with(&mut spec.feature_std, a.feature_std);
    override_with(&mut spec.motif, a.motif);
    override_with(&mut spec.seed, a.seed);
    let out = required(a.out, cfg.paths.out_dir.clone(), "--out")?;

    let mut dataset = synth_dataset(&spec)?;
    if let Some(name) = a.name.or(cfg.paths.dataset.clone()) {
        dataset.name = name;
    }
    create_dir(&out)?;
    write_tu_dataset(&dataset, &out)?;
    cfg.synth = Some(spec);
    cfg.paths.out_dir = Some(out.clone());
    cfg.paths.dataset = Some(dataset.name.clone());
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    println!(
        "wrote {} graphs ({} features) as {} in {}",
        dataset.len(),
        dataset.feature_dim,
        dataset.name,
        out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    override_with(&mut cfg.pretrain.epochs, a.epochs);
    override_with(&mut cfg.pretrain.lr, a.lr);
    override_with(&mut cfg.pretrain.hidden_dim, a.hidden_dim);
    override_with(&mut cfg.pretrain.n_layers, a.layers);
    override_with(&mut cfg.pretrain.seed, a.seed);
    let checkpoint = required(a.checkpoint, cfg.paths.checkpoint.clone(), "--checkpoint")?;
    let (dir, name) = data_location(a.data, &cfg)?;

    let train = parse_tu_dataset(&dir, &name)?;
    let (model, history) = pretrain_with_history(&train, &cfg.pretrain)?;
    save_checkpoint(&model, &checkpoint)?;
    if let Some(path) = a.history {
        let mut csv = String::from("epoch,cross_entropy,margin_penalty,mean_pos_energy\n");
        for (k, s) in history.iter().enumerate() {
            csv.push_str(&format!(
                "{k},{},{},{}\n",
                s.cross_entropy, s.margin_penalty, s.mean_pos_energy
            ));
        }
        write(&path, &csv)?;
    }
    let last = history.last().expect("history has a final entry");
    println!(
        "trained on {} graphs: cross-entropy {:.6}, margin penalty {:.6}, mean positive energy {:.6}",
        train.len(),
        last.cross_entropy,
        last.margin_penalty,
        last.mean_pos_energy
    );
    println!("checkpoint {} (sha256 {})", checkpoint.display(), model.checksum());
    Ok(())
}

pub fn detect(a: DetectArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let d = &mut cfg.detector;
    let f = a.detector;
    override_with(&mut d.iterations, f.iterations);
    override_with(&mut d.lr, f.lr);
    override_with(&mut d.beta, f.beta);
    override_with(&mut d.mode, f.mode);
    override_with(&mut d.pg_depth, f.pg_depth);
    override_with(&mut d.tau, f.tau);
    override_with(&mut d.seed, f.seed);
    override_with(&mut d.ablation, f.ablation);
    override_with(&mut d.score_sign, f.score_sign);
    let checkpoint = required(a.checkpoint, cfg.paths.checkpoint.clone(), "--checkpoint")?;
    let out = required(a.out, cfg.paths.out_dir.clone(), "--out")?;
    let (dir, name) = data_location(a.data, &cfg)?;

    let model = load_checkpoint(&checkpoint)?;
    let test = parse_tu_dataset(&dir, &name)?;
    let results = run_detector(&test, &model, &cfg.detector)?;
    create_dir(&out)?;
    write(&out.join("scores.csv"), &scores_csv(&results))?;
    write(&out.join("trace.csv"), &trace_csv(&results))?;
    write(
        &out.join("distribution.csv"),
        &export_score_distribution(&results, true),
    )?;
    cfg.paths = crate::config::Paths {
        data_dir: Some(dir),
        dataset: Some(name),
        checkpoint: Some(checkpoint),
        out_dir: Some(out.clone()),
    };
    write(&out.join("config.toml"), &cfg.to_toml()?)?;

    let n_ood = results
        .iter()
        .filter(|r| r.decision == sigood_core::DistLabel::Ood)
        .count();
    println!(
        "scored {} graphs, {} at or above tau = {}; outputs in {}",
        results.len(),
        n_ood,
        cfg.detector.tau,
        out.display()
    );
    if results.iter().all(|r| r.label.is_some()) {
        if let Ok(v) = sigood_core::eval::results_auc(&results) {
            println!("auc {v}");
        }
    }
    Ok(())
}

/// Reads the named columns of a CSV file as strings, keyed by header.
fn read_columns(path: &Path) -> Result<HashMap<String, Vec<String>>, CliError> {
    let csv_err = |message: String| CliError::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(io.kind(), "no such file"),
            },
            _ => csv_err(e.to_string()),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut columns: HashMap<String, Vec<String>> = headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        for (h, v) in headers.iter().zip(record.iter()) {
            columns.get_mut(h).expect("header registered").push(v.to_owned());
        }
    }
    Ok(columns)
}

fn parse_column<T: std::str::FromStr>(path: &Path, name: &str, values: &[String]) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    values
        .iter()
        .enumerate()
        .map(|(row, v)| {
            v.parse::<T>().map_err(|e| CliError::Csv {
                path: path.to_path_buf(),
                message: format!("row {}: column {name}: {v:?}: {e}", row + 1),
            })
        })
        .collect()
}

fn column<'a>(cols: &'a HashMap<String, Vec<String>>, path: &Path, name: &str) -> Result<&'a [String], CliError> {
    cols.get(name).map(Vec::as_slice).ok_or_else(|| CliError::Csv {
        path: path.to_path_buf(),
        message: format!("missing column {name}"),
    })
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cols = read_columns(&a.scores)?;
    let ids: Vec<usize> = parse_column(&a.scores, "graph_id", column(&cols, &a.scores, "graph_id")?)?;
    let scores: Vec<f64> = parse_column(&a.scores, "score", column(&cols, &a.scores, "score")?)?;
    let labels: Vec<u8> = if let Some(raw) = cols.get("label") {
        parse_column(&a.scores, "label", raw)?
    } else {
        let path = a
            .labels
            .ok_or_else(|| CliError::Usage("scores file has no label column; pass --labels".into()))?;
        let lc = read_columns(&path)?;
        let lid: Vec<usize> = parse_column(&path, "graph_id", column(&lc, &path, "graph_id")?)?;
        let lval: Vec<u8> = parse_column(&path, "label", column(&lc, &path, "label")?)?;
        let by_id: HashMap<usize, u8> = lid.into_iter().zip(lval).collect();
        ids.iter()
            .map(|id| {
                by_id.get(id).copied().ok_or_else(|| CliError::Csv {
                    path: path.clone(),
                    message: format!("no label for graph {id}"),
                })
            })
            .collect::<Result<_, _>>()?
    };
    let value = auc(&scores, &labels)?;
    println!("auc {value}");
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(Some(&a.config))?;
    if let (Some(seeds), Some(b)) = (a.seeds, cfg.benchmark.as_mut()) {
        b.seeds = seeds;
    }
    let bench = cfg
        .benchmark()
        .ok_or_else(|| CliError::Usage(format!("{} has no [benchmark] section", a.config.display())))?;
    let out = a
        .out
        .or(cfg.paths.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("bench-out"));

    let report = run_benchmark(&bench)?;
    create_dir(&out)?;
    write(&out.join("report.csv"), &report.runs_csv())?;
    write(&out.join("aggregate.csv"), &report.aggregate_csv())?;
    write(&out.join("timings.csv"), &report.timings_csv())?;
    write(&out.join("reference.csv"), &reference_table_csv())?;
    let sweeps = cfg.benchmark.as_ref().map(|b| b.sweeps.clone()).unwrap_or_default();
    if !sweeps.is_empty() {
        let mut rows = Vec::new();
        for s in &sweeps {
            for mut r in run_sweep(&bench, s)? {
                r.index = rows.len();
                rows.push(r);
            }
        }
        write(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    }
    cfg.paths.out_dir = Some(out.clone());
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    print!("{}", report.aggregate_csv());
    println!("reference.csv: {REFERENCE_NOTE}");
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<(), CliError> {
    let rows = gradient_suite(a.instances, a.seed)?;
    let mut failed = 0;
    println!("check,instances,max_rel_error,passed");
    for check in GRADIENT_CHECKS {
        let mine: Vec<_> = rows.iter().filter(|r| r.check == check).collect();
        let worst = mine.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let ok = mine.iter().all(|r| r.passed);
        failed += usize::from(!ok);
        println!("{check},{},{worst:e},{ok}", mine.len());
    }
    let reports = derivation_suite(a.instances, a.seed)?;
    let worst = reports.iter().map(|r| r.distance / r.grid_step).fold(0.0, f64::max);
    let ok = reports.iter().all(|r| r.passed());
    failed += usize::from(!ok);
    println!("reward-derivation,{},{worst:.3} grid steps,{ok}", reports.len());
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} self-check(s) failed")));
    }
    Ok(())
}
