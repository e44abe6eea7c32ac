use crate::data::{read_panel, write_panel, write_states, IngestOptions};
use crate::files::{one_based, read_json, write_json, ParamsFile};
use crate::{parse_expm, parse_range, CliError, DataArgs, DecodeArgs, EngineArgs, FitArgs, ReportArgs, RotateArgs, SelectArgs, SimulateArgs};
use ehmfm::eval::{promax_standardize, recovery_report, select_model, summarize, transition_bias, RecoveryReport, SelectionReport};
use ehmfm::simgen::{find_scenario, generate, scenario_grid};
use ehmfm::{FitConfig, Mode, PanelDataset};
use log::info;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

type Out<'a> = &'a mut dyn Write;

fn csv_err(p: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Validation(format!("writing {}: {e}", p.display()))
}

fn say(out: Out, text: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn load(args: &DataArgs) -> Result<PanelDataset, CliError> {
    let ing = read_panel(
        &args.data,
        IngestOptions {
            add_intercept: args.add_intercept,
        },
    )?;
    info!(
        "read {} subjects, {} observations (p={}, d={}) from {}",
        ing.dataset.n_subjects(),
        ing.dataset.n_obs(),
        ing.dataset.p,
        ing.dataset.d,
        args.data.display()
    );
    Ok(ing.dataset)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn fit_config(engine: &EngineArgs, dataset: &PanelDataset, states: usize, factors: usize) -> Result<FitConfig, CliError> {
    let mode: Mode = engine.mode.parse()?;
    if mode == Mode::Continuous && !dataset.has_irregular_times() && !engine.force_ct {
        return Err(CliError::Validation(
            "continuous-time mode needs irregular intervals, but every interval is 1; pass --force-ct to fit anyway".into(),
        ));
    }
    let mut cfg = FitConfig::new(mode, states, factors);
    cfg.tol_loglik = engine.tol_loglik;
    cfg.tol_params = engine.tol_params;
    cfg.max_iters = engine.max_iters;
    cfg.stop_on_either = engine.stop_on_either;
    cfg.expm = parse_expm(&engine.expm)?;
    cfg.init.restarts = engine.restarts;
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate(args: &SimulateArgs, out: Out) -> Result<(), CliError> {
    if args.list {
        for s in scenario_grid(true) {
            say(out, s.describe())?;
        }
        return Ok(());
    }
    let name = args.scenario.as_deref().expect("clap requires --scenario");
    let dir = args.out.as_ref().expect("clap requires --out");
    let mut scenario = find_scenario(name)?;
    if let Some(n) = args.subjects {
        scenario = scenario.with_subjects(n);
    }
    let (data, truth) = generate(&scenario, args.seed)?;
    create_dir(dir)?;
    write_panel(&dir.join("panel.csv"), &data)?;
    let mut file = ParamsFile::from_params(&truth.params, scenario.mode);
    file.scenario = Some(scenario.name.clone());
    file.seed = Some(args.seed);
    file.subjects = Some(data.subjects.iter().map(|s| s.id.clone()).collect());
    file.states = Some(one_based(&truth.states));
    write_json(&dir.join("truth.json"), &file)?;
    say(out, format!("{} seed={} observations={}", scenario.describe(), args.seed, data.n_obs()))
}

pub fn fit(args: &FitArgs, out: Out) -> Result<(), CliError> {
    let data = load(&args.data)?;
    let mut cfg = fit_config(&args.engine, &data, args.states, args.factors)?;
    cfg.stabilize = !args.no_stabilize;
    cfg.init.seed = args.seed;
    let res = ehmfm::fit(&data, &cfg)?;
    let ids = data.subjects.iter().map(|s| s.id.clone()).collect();
    write_json(&args.out, &ParamsFile::from_fit(&res, ids, data.n_obs()))?;
    if let Some(path) = &args.states_out {
        write_states(path, &data, &res.states)?;
    }
    say(
        out,
        format!(
            "J={} K={} {}: loglik={:.6} iterations={} stop={} q={} AIC={:.4} BIC={:.4}",
            args.states,
            args.factors,
            cfg.mode.as_str(),
            res.loglik,
            res.iterations,
            res.stop.as_str(),
            res.n_params,
            res.aic,
            res.bic
        ),
    )
}

pub fn decode(args: &DecodeArgs, out: Out) -> Result<(), CliError> {
    let data = load(&args.data)?;
    let file: ParamsFile = read_json(&args.params)?;
    let params = file.params()?;
    let states = ehmfm::decode(&data, &params, file.mode()?, parse_expm(&args.expm)?)?;
    write_states(&args.out, &data, &states)?;
    say(out, format!("decoded {} observations", data.n_obs()))
}

#[derive(Serialize)]
struct CandidateJson {
    states: usize,
    factors: usize,
    n_params: usize,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
}

#[derive(Serialize)]
struct SelectionJson {
    candidates: Vec<CandidateJson>,
    best_aic: Option<[usize; 2]>,
    best_bic: Option<[usize; 2]>,
}

fn write_selection(dir: &Path, rep: &SelectionReport) -> Result<(), CliError> {
    let path = dir.join("selection.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["J", "K", "q", "status", "seed", "loglik", "AIC", "BIC", "iterations", "converged"])
        .map_err(csv_err(&path))?;
    let mut json = Vec::new();
    for c in &rep.candidates {
        let (row, entry) = match &c.outcome {
            Ok(f) => (
                vec![
                    "ok".to_string(),
                    f.seed.to_string(),
                    f.loglik.to_string(),
                    f.aic.to_string(),
                    f.bic.to_string(),
                    f.iterations.to_string(),
                    f.converged.to_string(),
                ],
                CandidateJson {
                    states: c.states,
                    factors: c.factors,
                    n_params: c.n_params,
                    status: "ok".into(),
                    seed: Some(f.seed),
                    loglik: Some(f.loglik),
                    aic: Some(f.aic),
                    bic: Some(f.bic),
                    iterations: Some(f.iterations),
                    converged: Some(f.converged),
                },
            ),
            Err(msg) => (
                vec![format!("failed: {msg}"), String::new(), String::new(), String::new(), String::new(), String::new(), String::new()],
                CandidateJson {
                    states: c.states,
                    factors: c.factors,
                    n_params: c.n_params,
                    status: format!("failed: {msg}"),
                    seed: None,
                    loglik: None,
                    aic: None,
                    bic: None,
                    iterations: None,
                    converged: None,
                },
            ),
        };
        let mut rec = vec![c.states.to_string(), c.factors.to_string(), c.n_params.to_string()];
        rec.extend(row);
        w.write_record(&rec).map_err(csv_err(&path))?;
        json.push(entry);
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = dir.join("complexity.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["J", "K", "q", "BIC"]).map_err(csv_err(&path))?;
    for (j, k, q, bic) in rep.complexity_table() {
        w.write_record([j.to_string(), k.to_string(), q.to_string(), bic.to_string()])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    write_json(
        &dir.join("selection.json"),
        &SelectionJson {
            candidates: json,
            best_aic: rep.best_aic.map(|(j, k)| [j, k]),
            best_bic: rep.best_bic.map(|(j, k)| [j, k]),
        },
    )
}

pub fn select(args: &SelectArgs, out: Out) -> Result<(), CliError> {
    let data = load(&args.data)?;
    let states = parse_range(&args.states)?;
    let factors = parse_range(&args.factors)?;
    if args.seeds == 0 {
        return Err(CliError::Validation("--seeds must be at least 1".into()));
    }
    let mut base = fit_config(&args.engine, &data, states[0], factors[0])?;
    base.stabilize = !args.no_stabilize;
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let rep = select_model(&data, &states, &factors, &base, &seeds)?;
    create_dir(&args.out_dir)?;
    write_selection(&args.out_dir, &rep)?;
    let show = |w: Option<(usize, usize)>| w.map_or("none".to_string(), |(j, k)| format!("J={j} K={k}"));
    say(out, format!("best by AIC: {}", show(rep.best_aic)))?;
    say(out, format!("best by BIC: {}", show(rep.best_bic)))?;
    if rep.failures() > 0 {
        say(out, "candidate status:")?;
        for c in &rep.candidates {
            let status = match &c.outcome {
                Ok(_) => "ok".to_string(),
                Err(m) => format!("failed: {m}"),
            };
            say(out, format!("  J={} K={}: {status}", c.states, c.factors))?;
        }
        return Err(CliError::Numerical(format!("{} of {} candidates failed", rep.failures(), rep.candidates.len())));
    }
    Ok(())
}

fn replicate_pairs(args: &ReportArgs) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    let read_dir = |dir: &Path| -> Result<Vec<PathBuf>, CliError> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let entries = read_dir(&args.input)?;
    let pairs: Vec<(PathBuf, PathBuf)> = match &args.truth {
        Some(truth) => entries
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "json") && p.canonicalize().ok() != truth.canonicalize().ok())
            .map(|p| (p, truth.clone()))
            .collect(),
        None => entries
            .into_iter()
            .filter(|p| p.is_dir() && p.join("params.json").is_file() && p.join("truth.json").is_file())
            .map(|p| (p.join("params.json"), p.join("truth.json")))
            .collect(),
    };
    if pairs.is_empty() {
        return Err(CliError::Validation(format!("no fits found under {}", args.input.display())));
    }
    Ok(pairs)
}

fn cell(m: ehmfm::eval::MetricSummary) -> String {
    format!("{:.4}({:.4})", m.mean, m.sd)
}

pub fn report(args: &ReportArgs, out: Out) -> Result<(), CliError> {
    let pairs = replicate_pairs(args)?;
    let mut reports: Vec<RecoveryReport> = Vec::with_capacity(pairs.len());
    let mut mode = None;
    for (i, (fit_path, truth_path)) in pairs.iter().enumerate() {
        let fit: ParamsFile = read_json(fit_path)?;
        let truth: ParamsFile = read_json(truth_path)?;
        let m = fit.mode()?;
        if *mode.get_or_insert(m) != m {
            return Err(CliError::Validation("fits mix discrete- and continuous-time modes".into()));
        }
        let decoded = fit.zero_based_states()?;
        let truth_states = truth.zero_based_states()?;
        if fit.subjects.is_some() && truth.subjects.is_some() && fit.subjects != truth.subjects {
            return Err(CliError::Validation(format!("{}: subjects differ from {}", fit_path.display(), truth_path.display())));
        }
        let seed = truth.seed.unwrap_or(i as u64);
        reports.push(recovery_report(&fit.params()?, &decoded, &truth.params()?, &truth_states, !args.no_procrustes, seed)?);
    }
    let mode = mode.expect("at least one fit");
    let label = args.label.clone().unwrap_or_else(|| format!("{}-EHMFM", mode.as_str().to_uppercase()));
    create_dir(&args.out_dir)?;

    let path = args.out_dir.join("recovery.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["seed", "pi", "mu", "Lambda", "Psi", "B", "C_mis", "permutation"])
        .map_err(csv_err(&path))?;
    for r in &reports {
        let perm: Vec<String> = r.permutation.iter().map(|s| (s + 1).to_string()).collect();
        w.write_record([
            r.seed.to_string(),
            r.aad_pi.to_string(),
            r.aad_mu.to_string(),
            r.aad_lambda.to_string(),
            r.aad_psi.to_string(),
            r.aad_b.to_string(),
            r.misclassification.to_string(),
            perm.join(" "),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let s = summarize(&reports);
    let path = args.out_dir.join("table1.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["Parameter", "pi", "mu", "Lambda", "Psi", "C_mis"]).map_err(csv_err(&path))?;
    w.write_record([label.clone(), cell(s.pi), cell(s.mu), cell(s.lambda), cell(s.psi), cell(s.misclassification)])
        .map_err(csv_err(&path))?;
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let bias = transition_bias(&reports);
    let d = reports[0].b_error.covariates();
    let path = args.out_dir.join("table2.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["Coefficient".to_string()];
    header.extend((0..d).map(|u| format!("B{u}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for chunk in bias.chunks(d.max(1)) {
        let mut row = vec![format!("B_{}{}", chunk[0].from + 1, chunk[0].to + 1)];
        row.extend(chunk.iter().map(|b| cell(b.bias)));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    say(
        out,
        format!(
            "{label} over {} fits: pi {} mu {} Lambda {} Psi {} C_mis {}",
            s.seeds,
            cell(s.pi),
            cell(s.mu),
            cell(s.lambda),
            cell(s.psi),
            cell(s.misclassification)
        ),
    )
}

pub fn rotate(args: &RotateArgs, out: Out) -> Result<(), CliError> {
    let file: ParamsFile = read_json(&args.params)?;
    let params = file.params()?;
    let states: Vec<usize> = match args.state {
        Some(s) if (1..=params.pi.len()).contains(&s) => vec![s - 1],
        Some(s) => return Err(CliError::Validation(format!("state {s} outside 1..{}", params.pi.len()))),
        None => (0..params.pi.len()).collect(),
    };
    let path = &args.out;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["state", "feature", "factor", "loading", "salient"]).map_err(csv_err(path))?;
    let mut salient = 0;
    for &j in &states {
        let st = promax_standardize(&params.lambda[j], &params.psi, args.power)?;
        for l in 0..st.loadings.nrows() {
            for c in 0..st.loadings.ncols() {
                salient += usize::from(st.salient[(l, c)]);
                w.write_record([
                    (j + 1).to_string(),
                    (l + 1).to_string(),
                    (c + 1).to_string(),
                    st.loadings[(l, c)].to_string(),
                    st.salient[(l, c)].to_string(),
                ])
                .map_err(csv_err(path))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    say(out, format!("rotated {} state(s); {salient} salient loadings", states.len()))
}
