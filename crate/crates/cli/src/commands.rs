use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use preprompt::backbone::{checkpoint, pretrain_and_freeze, BackboneParams};
use preprompt::config::{read_config, RunConfig};
use preprompt::data::export::export_embeddings;
use preprompt::data::results::{aggregate, format_summary_table, read_summary_csv, write_results, RunRecord};
use preprompt::harness::{
    ablation_suite, build_learner, complexity_accounting, desk_method_config, make_splits, run_scenario,
    Method, MethodConfig, Scenario, ScenarioResult, ABLATION_ROWS,
};
use preprompt::pipeline::{save_state, PrePrompt, Selection};

use crate::{AblateArgs, Cli, Command, ExportArgs, Overrides, PretrainArgs, ReportArgs, RunArgs, SplitArg};

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

pub fn execute(cli: &Cli) -> CliResult {
    let mut config = match &cli.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Pretrain(a) => pretrain(&mut config, a),
        Command::Run(a) => run(&mut config, a),
        Command::Ablate(a) => ablate(&mut config, a),
        Command::Report(a) => report(&config, a),
        Command::ExportEmbeddings(a) => export(&config, a),
    }
}

fn apply(config: &mut RunConfig, o: &Overrides) -> CliResult {
    if let Some(s) = &o.seeds {
        config.seeds = s.clone();
    }
    if let Some(d) = &o.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(b) = &o.backbone {
        config.backbone_checkpoint = Some(b.clone());
    }
    let l = &mut config.learner;
    if let Some(n) = o.prompt_length {
        l.length = n;
    }
    if let Some(m) = o.mode {
        l.mode = m.into();
    }
    if let Some(n) = o.prompt_epochs {
        l.prompt_stage.epochs = n;
    }
    if let Some(n) = o.label_epochs {
        l.label_stage.epochs = n;
    }
    config.validate()?;
    Ok(())
}

/// Loads the configured checkpoint, or pretrains in memory when none is set.
fn backbone(config: &RunConfig) -> CliResult<Arc<BackboneParams>> {
    let params = match &config.backbone_checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(format!(
                    "backbone checkpoint {} does not exist; run `preprompt pretrain` first",
                    path.display()
                )
                .into());
            }
            let p = checkpoint::load(path)?;
            if p.config != config.backbone {
                warn!("checkpoint architecture differs from [backbone]; using the checkpoint's");
            }
            info!("loaded backbone {} checksum={:016x}", path.display(), p.checksum());
            p
        }
        None => {
            info!("no backbone checkpoint configured; pretraining in memory");
            let (train, _) = config.pretrain.data.load(&config.backbone)?;
            pretrain_and_freeze(&train, config.backbone, &config.pretrain.train_config())?.0
        }
    };
    Ok(Arc::new(params))
}

fn scenario(config: &RunConfig, backbone: &BackboneParams) -> CliResult<Scenario> {
    let (train, test) = config.data.load(&backbone.config)?;
    let s = make_splits(&train, &test, &config.scenario.split(), config.scenario.split_seed)?;
    info!(
        "scenario tasks={} classes={:?} train={} test={}",
        s.tasks.len(),
        s.tasks.iter().map(|t| t.classes.clone()).collect::<Vec<_>>(),
        train.len(),
        test.len()
    );
    Ok(s)
}

fn pretrain(config: &mut RunConfig, a: &PretrainArgs) -> CliResult {
    let p = &mut config.pretrain;
    if let Some(n) = a.epochs {
        p.epochs = n;
    }
    if let Some(lr) = a.learning_rate {
        p.learning_rate = lr;
    }
    if let Some(s) = a.seed {
        p.seed = s;
    }
    config.validate()?;
    let out = a
        .out
        .clone()
        .or_else(|| config.backbone_checkpoint.clone())
        .ok_or("no output path: pass --out or set backbone_checkpoint")?;
    let (train, _) = config.pretrain.data.load(&config.backbone)?;
    info!("pretraining on {} samples", train.len());
    let (params, r) = pretrain_and_freeze(&train, config.backbone, &config.pretrain.train_config())?;
    checkpoint::save(&params, &out)?;
    info!(
        "wrote {} epochs={} loss={:.6} train_accuracy={:.4} checksum={:016x}",
        out.display(),
        r.epochs,
        r.final_loss,
        r.train_accuracy,
        r.checksum
    );
    Ok(())
}

/// Runs one seed. PrePrompt-family learners are kept so their state can be
/// saved.
fn run_one(
    method: Method,
    config: &RunConfig,
    scenario: &Scenario,
    backbone: &Arc<BackboneParams>,
    seed: u64,
) -> CliResult<(ScenarioResult, Option<PrePrompt>)> {
    let learner = &config.learner;
    let keep = match method {
        Method::Preprompt if learner.flags.prompt_prediction => Some(Selection::Predictive),
        Method::KvCorrelation => Some(Selection::KeyCorrelation),
        _ => None,
    };
    match keep {
        Some(selection) => {
            let mut c = learner.clone();
            if selection == Selection::KeyCorrelation {
                c.flags = preprompt::pipeline::AblationFlags::new(true, false, false);
            }
            let mut p = PrePrompt::with_selection(backbone.clone(), &c, selection, seed)?;
            let r = run_scenario(scenario, &mut p, &config.eval)?;
            Ok((r, Some(p)))
        }
        None => {
            let mut l = build_learner(method, backbone.clone(), learner, seed)?;
            Ok((run_scenario(scenario, l.as_mut(), &config.eval)?, None))
        }
    }
}

fn finish(records: &[RunRecord], dir: &Path) -> CliResult {
    let paths = write_results(dir, records)?;
    info!("wrote {} and {}", paths.matrix.display(), paths.summary.display());
    let failed: Vec<String> = records
        .iter()
        .filter(|r| !r.valid)
        .map(|r| format!("{} seed {}: {}", r.method, r.seed, r.error.as_deref().unwrap_or("unknown")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("{} run(s) failed: {}", failed.len(), failed.join("; ")).into())
    }
}

fn run(config: &mut RunConfig, a: &RunArgs) -> CliResult {
    apply(config, &a.overrides)?;
    if let Some(m) = a.method {
        config.method = m;
    }
    let method = config.method;
    let backbone = backbone(config)?;
    let scenario = scenario(config, &backbone)?;
    let complexity = complexity_accounting(&desk_method_config(
        method,
        &config.learner,
        &backbone.config,
        scenario.tasks.len(),
    ));
    let mut records = Vec::new();
    let mut dir = PathBuf::new();
    for &seed in &config.seeds {
        let (result, state) = run_one(method, config, &scenario, &backbone, seed)?;
        dir = config.output_dir.join(&result.method);
        let record = RunRecord::new(seed, &result, complexity.clone());
        if let Ok(s) = record.summary() {
            info!(
                "{} seed={seed} A_T={:.4} A_bar={:.4} F_T={}",
                s.method,
                s.a_t,
                s.a_bar,
                s.f_t.map(|f| format!("{f:.4}")).unwrap_or_else(|| "n/a".into())
            );
        }
        if let (Some(p), false) = (state, a.no_state) {
            let path = dir.join(format!("state-seed{seed}.ppst"));
            save_state(&p, &path)?;
            info!("wrote {}", path.display());
        }
        records.push(record);
    }
    finish(&records, &dir)
}

fn flag_bits(row: usize) -> String {
    let f = ABLATION_ROWS[row];
    [f.prompt_prediction, f.prompt_translation, f.label_translation]
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect()
}

fn ablate(config: &mut RunConfig, a: &AblateArgs) -> CliResult {
    apply(config, &a.overrides)?;
    let rows = a.rows.clone().unwrap_or_else(|| (0..ABLATION_ROWS.len()).collect());
    if let Some(r) = rows.iter().find(|&&r| r >= ABLATION_ROWS.len()) {
        return Err(format!("ablation row {r} does not exist (0-{})", ABLATION_ROWS.len() - 1).into());
    }
    let backbone = backbone(config)?;
    let scenario = scenario(config, &backbone)?;
    let mut records = Vec::new();
    for &seed in &config.seeds {
        for row in ablation_suite(&scenario, backbone.clone(), &config.learner, &rows, seed, &config.eval)? {
            let mut c = config.learner.clone();
            c.flags = row.flags;
            let complexity = complexity_accounting(&desk_method_config(
                Method::Preprompt,
                &c,
                &backbone.config,
                scenario.tasks.len(),
            ));
            let mut result = row.result;
            result.method = format!("row{}-{}", row.row, flag_bits(row.row));
            records.push(RunRecord::new(seed, &result, complexity));
        }
    }
    let dir = config.output_dir.join("ablate");
    finish(&records, &dir)?;
    let summaries = aggregate(&records.iter().map(RunRecord::summary).collect::<Result<Vec<_>, _>>()?);
    println!("row  P_pred  P_ft  L_ft  A_T");
    for s in &summaries {
        let row: usize = s.method[3..s.method.find('-').unwrap_or(4)].parse().unwrap_or(0);
        let f = ABLATION_ROWS[row];
        let mark = |b: bool| if b { "x" } else { "-" };
        println!(
            "{row:<4} {:<7} {:<5} {:<5} {:.2}±{:.2}",
            mark(f.prompt_prediction),
            mark(f.prompt_translation),
            mark(f.label_translation),
            s.a_t.0 * 100.0,
            s.a_t.1 * 100.0
        );
    }
    Ok(())
}

fn summary_files(inputs: &[PathBuf], output_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let dirs: Vec<PathBuf> = if inputs.is_empty() {
        let mut d: Vec<PathBuf> = fs::read_dir(output_dir)
            .map_err(|e| format!("{}: {e}", output_dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        d.sort();
        d
    } else {
        inputs.to_vec()
    };
    let files: Vec<PathBuf> = dirs
        .into_iter()
        .map(|p| if p.is_dir() { p.join("summary.csv") } else { p })
        .filter(|p| p.exists() || !inputs.is_empty())
        .collect();
    if files.is_empty() {
        return Err(format!("no summary.csv found under {}", output_dir.display()).into());
    }
    Ok(files)
}

fn report(config: &RunConfig, a: &ReportArgs) -> CliResult {
    let output_dir = a.output_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    let mut rows = Vec::new();
    for f in summary_files(&a.inputs, &output_dir)? {
        rows.extend(read_summary_csv(&f)?);
    }
    let mut text = String::from("# Accuracy (percent, mean±std over seeds)\n\n");
    text += &format_summary_table(&aggregate(&rows));
    text += "\n# Complexity, reference configurations (ViT-B/16, 10 tasks)\n\n";
    text += &format!("{:<20} {:>12} {:>10} {:>10}\n", "method", "delta_P", "stored", "delta_M");
    for name in MethodConfig::REFERENCE_METHODS {
        let r = complexity_accounting(&MethodConfig::reference(name)?);
        text += &format!("{:<20} {:>12} {:>10} {:>10.3}\n", r.method, r.delta_p, r.stored, r.delta_m_mb);
    }
    text += &format!(
        "\n# Complexity, configured desk run ({} tasks)\n\n",
        config.scenario.tasks
    );
    for m in Method::ALL {
        let r = complexity_accounting(&desk_method_config(m, &config.learner, &config.backbone, config.scenario.tasks));
        text += &format!("{:<20} {:>12} {:>10} {:>10.3}\n", m.as_str(), r.delta_p, r.stored, r.delta_m_mb);
    }
    print!("{text}");
    fs::create_dir_all(&output_dir).map_err(|e| format!("{}: {e}", output_dir.display()))?;
    let path = output_dir.join("report.txt");
    fs::write(&path, &text).map_err(|e| format!("{}: {e}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn export(config: &RunConfig, a: &ExportArgs) -> CliResult {
    let model = preprompt::pipeline::load_state(&a.state)?;
    let (train, test) = config.data.load(&model.backbone().config)?;
    let set = match a.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    // only classes the model has learned
    let known: Vec<usize> = (0..set.len())
        .filter(|&i| model.class_map().labels().contains(&set.label(i)))
        .collect();
    let set = set.subset(&known);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    let emb = export_embeddings(&model, &set, &a.out)?;
    info!(
        "wrote {} samples={} classes={}",
        a.out.display(),
        emb.samples.len(),
        emb.means.len()
    );
    Ok(())
}
