//! `grouprefine` command-line tool: synthetic data, training, refinement and
//! evaluation.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures such as divergence or unwritable outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use grouprefine::evaluation::{evaluate, ApMode, EvalReport};
use grouprefine::io::{
    load_config_with_overrides, parse_voc_xml, read_detections, read_proposals, write_detections,
    write_detections_per_class, write_loss_csv, write_proposals, write_trace_rows, write_voc_xml, AnnotationRecord,
    RunConfig, TRACE_HEADER,
};
use grouprefine::model::{read_checkpoint, sgd_train, write_checkpoint, TrainingScene};
use grouprefine::pipeline::{
    assemble_split, class_names, detection_records, ground_truths, records_to_detections, refine_split,
    scene_to_annotation, Benchmark, LabeledScene,
};
use grouprefine::refine::Predictor;

const AFTER_HELP: &str = "\
Any configuration key can be set on the command line as `--section.key value`
(sections: synth, train, refine, eval). Precedence is command line, then the
config file, then built-in defaults. Without --config, commands that read a
data directory use the `config.toml` that `synth` wrote there.";

#[derive(Parser)]
#[command(name = "grouprefine", version, about = "Group recursive detection refinement", after_help = AFTER_HELP)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for both scene synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress and summary output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn list_file(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Test => "test.txt",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, annotations and proposals.
    Synth {
        /// Output data directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split of a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write; the loss curve goes to `<model>.loss.csv`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Refine the proposals of a split and write final detections.
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `detections.txt` and `trace.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Number of refinement iterations, overriding `refine.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Also write the per-iteration trajectory of every proposal.
        #[arg(long)]
        trace: bool,
        /// Also write one devkit-style file per class under `per_class/`.
        #[arg(long)]
        per_class: bool,
    },
    /// Per-class AP and mAP of a detection file.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        /// Directory of VOC XML annotations.
        #[arg(long)]
        annotations: PathBuf,
        /// Image ids to evaluate, one per line. Defaults to every annotation.
        #[arg(long)]
        images: Option<PathBuf>,
        /// `11point` or `area`, overriding `eval.mode`.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ApMode>,
        /// Key-value report path. Defaults to `eval_report.txt` beside the detections.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// False-positive breakdown of a detection file.
    Diagnose {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<ApMode, String> {
    ApMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected `11point` or `area`)"))
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn context(mut self, what: &Path) -> Self {
        self.message = format!("{}: {}", what.display(), self.message);
        self
    }
}

impl From<grouprefine::Error> for Failure {
    fn from(e: grouprefine::Error) -> Self {
        Self {
            code: if e.is_validation() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<Vec<String>, Failure>;
type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` and `--section.key=value` arguments out of
/// the command line.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), Failure> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg
            .strip_prefix("--")
            .filter(|f| f.split('=').next().is_some_and(|n| n.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::input(format!("missing value for --{flag}")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(e.to_string()).context(path))
}

fn write_output(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", parent.display()),
        })?;
    }
    fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

struct Context {
    config: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Overrides,
}

impl Context {
    /// Resolves the configuration; `fallback` is used when no --config is given.
    fn load(&self, fallback: Option<&Path>) -> Result<RunConfig, Failure> {
        let path = self
            .config
            .clone()
            .or_else(|| fallback.map(Path::to_path_buf).filter(|p| p.is_file()));
        let text = match &path {
            Some(p) => read_input(p)?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(("synth.seed".to_string(), seed.to_string()));
            overrides.push(("train.seed".to_string(), seed.to_string()));
        }
        overrides.extend(self.overrides.iter().cloned());
        let cfg = load_config_with_overrides(&text, &overrides).map_err(|e| {
            let f = Failure::from(e);
            match &path {
                Some(p) => f.context(p),
                None => f,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_id_list(path: &Path) -> Result<Vec<String>, Failure> {
    Ok(read_input(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn read_annotations(dir: &Path, images: Option<&Path>) -> Result<Vec<AnnotationRecord>, Failure> {
    let ids = match images {
        Some(list) => read_id_list(list)?,
        None => {
            let entries = fs::read_dir(dir).map_err(|e| Failure::input(e.to_string()).context(dir))?;
            let mut ids: Vec<String> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "xml"))
                .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .collect();
            ids.sort();
            ids
        }
    };
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.xml"));
            parse_voc_xml(&read_input(&path)?).map_err(|e| Failure::from(e).context(&path))
        })
        .collect()
}

fn load_split(data: &Path, split: Split, names: &[String]) -> Result<Vec<LabeledScene>, Failure> {
    let annotations = read_annotations(&data.join("annotations"), Some(&data.join(split.list_file())))?;
    let proposals_path = data.join("proposals.txt");
    let proposals =
        read_proposals(&read_input(&proposals_path)?).map_err(|e| Failure::from(e).context(&proposals_path))?;
    Ok(assemble_split(&annotations, &proposals, names)?)
}

fn cmd_synth(ctx: &Context, out: &Path) -> CmdResult {
    let cfg = ctx.load(None)?;
    let bench = Benchmark::generate(&cfg.synth)?;
    let names = class_names(cfg.synth.num_classes);
    let mut written = Vec::new();
    let mut proposals = Vec::new();
    for (split, items) in [(Split::Train, &bench.train), (Split::Test, &bench.test)] {
        let mut list = String::new();
        for item in items {
            let record = scene_to_annotation(&item.scene, &names);
            write_output(
                &out.join("annotations").join(format!("{}.xml", record.image_id)),
                &write_voc_xml(&record),
            )?;
            proposals.extend(item.proposals.iter().map(|b| (record.image_id.clone(), b.corners())));
            let _ = writeln!(list, "{}", record.image_id);
        }
        let path = out.join(split.list_file());
        write_output(&path, &list)?;
        written.push(path);
    }
    let path = out.join("proposals.txt");
    write_output(&path, &write_proposals(&proposals))?;
    written.push(path);
    let path = out.join("config.toml");
    write_output(&path, &cfg.to_toml())?;
    written.push(path);
    let mut summary = vec![format!(
        "wrote {} scenes ({} train, {} test) and {} proposals",
        bench.train.len() + bench.test.len(),
        bench.train.len(),
        bench.test.len(),
        proposals.len()
    )];
    summary.extend(written.iter().map(|p| format!("  {}", p.display())));
    Ok(summary)
}

fn cmd_train(ctx: &Context, data: &Path, model_path: &Path) -> CmdResult {
    let cfg = ctx.load(Some(&data.join("config.toml")))?;
    let names = class_names(cfg.synth.num_classes);
    let scenes: Vec<TrainingScene> = load_split(data, Split::Train, &names)?
        .into_iter()
        .map(|l| TrainingScene {
            scene: l.scene,
            proposals: l.proposals,
        })
        .collect();
    let outcome = sgd_train(&scenes, &cfg.synth, &cfg.train, &cfg.refine)?;
    write_output(model_path, &write_checkpoint(&outcome.model, cfg.train.unroll_depth))?;
    let mut loss_path = model_path.as_os_str().to_owned();
    loss_path.push(".loss.csv");
    let loss_path = PathBuf::from(loss_path);
    write_output(&loss_path, &write_loss_csv(&outcome.loss_curve))?;
    let first = outcome.loss_curve.first().copied().unwrap_or(f64::NAN);
    let last = outcome.loss_curve.last().copied().unwrap_or(f64::NAN);
    Ok(vec![
        format!(
            "trained {} steps on {} scenes (unroll depth {}), loss {first:.4} -> {last:.4}",
            outcome.loss_curve.len(),
            scenes.len(),
            cfg.train.unroll_depth
        ),
        format!("  {}", model_path.display()),
        format!("  {}", loss_path.display()),
    ])
}

struct RefineArgs<'a> {
    model: &'a Path,
    data: &'a Path,
    out: &'a Path,
    split: Split,
    iterations: Option<usize>,
    trace: bool,
    per_class: bool,
}

fn cmd_refine(ctx: &Context, args: RefineArgs) -> CmdResult {
    let mut cfg = ctx.load(Some(&args.data.join("config.toml")))?;
    if let Some(t) = args.iterations {
        cfg.refine.iterations = t;
        cfg.validate()?;
    }
    let (model, _) = read_checkpoint(&read_input(args.model)?).map_err(|e| Failure::from(e).context(args.model))?;
    if model.num_classes() != cfg.synth.num_classes || model.feature_dim() != cfg.synth.feature_dim {
        return Err(Failure::input(format!(
            "model has {} classes and {} features but the data has {} and {}",
            model.num_classes(),
            model.feature_dim(),
            cfg.synth.num_classes,
            cfg.synth.feature_dim
        ))
        .context(args.model));
    }
    let names = class_names(cfg.synth.num_classes);
    let items = load_split(args.data, args.split, &names)?;
    let results = refine_split(&model, &items, &cfg.synth, &cfg.refine)?;

    let records: Vec<_> = results
        .iter()
        .flat_map(|r| detection_records(&r.image_id, &r.detections, &names))
        .collect();
    let det_path = args.out.join("detections.txt");
    write_output(&det_path, &write_detections(&records))?;
    let mut summary = vec![
        format!(
            "refined {} scenes with {} iterations, {} detections",
            items.len(),
            cfg.refine.iterations,
            records.len()
        ),
        format!("  {}", det_path.display()),
    ];
    if args.per_class {
        for (class, text) in write_detections_per_class(&records) {
            let path = args.out.join("per_class").join(format!("{class}.txt"));
            write_output(&path, &text)?;
            summary.push(format!("  {}", path.display()));
        }
    }
    if args.trace {
        let mut csv = format!("{TRACE_HEADER}\n");
        for r in &results {
            write_trace_rows(&mut csv, &r.image_id, &r.states, &names);
        }
        let trace_path = args.out.join("trace.csv");
        write_output(&trace_path, &csv)?;
        summary.push(format!("  {}", trace_path.display()));
    }
    Ok(summary)
}

fn score(
    ctx: &Context,
    detections: &Path,
    annotations: &Path,
    images: Option<&Path>,
    mode: Option<ApMode>,
) -> Result<(EvalReport, Vec<String>), Failure> {
    let mut cfg = ctx.load(annotations.parent().map(|p| p.join("config.toml")).as_deref())?;
    if let Some(mode) = mode {
        cfg.eval.mode = mode;
    }
    let names = class_names(cfg.synth.num_classes);
    let records = read_annotations(annotations, images)?;
    let gts = ground_truths(&records, &names).map_err(|e| Failure::from(e).context(annotations))?;
    let dets = read_detections(&read_input(detections)?)
        .and_then(|r| records_to_detections(&r, &names))
        .map_err(|e| Failure::from(e).context(detections))?;
    let report = evaluate(
        &dets,
        &gts,
        cfg.synth.num_classes,
        cfg.eval.iou_threshold,
        cfg.eval.mode,
    );
    Ok((report, names))
}

fn main() -> ExitCode {
    let (args, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let ctx = Context {
        config: cli.config,
        seed: cli.seed,
        overrides,
    };
    let result = match &cli.command {
        Command::Synth { out } => cmd_synth(&ctx, out),
        Command::Train { data, model } => cmd_train(&ctx, data, model),
        Command::Refine {
            model,
            data,
            out,
            split,
            iterations,
            trace,
            per_class,
        } => cmd_refine(
            &ctx,
            RefineArgs {
                model,
                data,
                out,
                split: *split,
                iterations: *iterations,
                trace: *trace,
                per_class: *per_class,
            },
        ),
        Command::Eval {
            detections,
            annotations,
            images,
            mode,
            report,
        } => score(&ctx, detections, annotations, images.as_deref(), *mode).and_then(|(report_data, names)| {
            let path = report
                .clone()
                .unwrap_or_else(|| detections.parent().unwrap_or(Path::new(".")).join("eval_report.txt"));
            write_output(&path, &report_data.render_key_values(&names))?;
            // the table is the command's result, so it is printed even when quiet
            print!("{}", report_data.render_table(&names));
            Ok(vec![format!("  {}", path.display())])
        }),
        Command::Diagnose {
            detections,
            annotations,
            images,
        } => score(&ctx, detections, annotations, images.as_deref(), None).map(|(report, names)| {
            print!("{}", report.render_taxonomy(&names));
            Vec::new()
        }),
    };
    match result {
        Ok(lines) => {
            if !cli.quiet {
                for l in lines {
                    println!("{l}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_clap_arguments() {
        let (rest, ov) = extract_overrides(strings(&[
            "grouprefine",
            "train",
            "--train.learning_rate",
            "0",
            "--data",
            "d",
            "--refine.iterations=3",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["grouprefine", "train", "--data", "d"]));
        assert_eq!(
            ov,
            vec![
                ("train.learning_rate".to_string(), "0".to_string()),
                ("refine.iterations".to_string(), "3".to_string())
            ]
        );
    }

    #[test]
    fn dangling_override_is_an_input_error() {
        let err = extract_overrides(strings(&["grouprefine", "--train.seed"])).unwrap_err();
        assert_eq!(err.code, 1);
    }

    #[test]
    fn seed_flag_sets_both_seeds_and_explicit_keys_win() {
        let ctx = Context {
            config: None,
            seed: Some(9),
            overrides: vec![("train.seed".into(), "4".into())],
        };
        let cfg = ctx.load(None).unwrap();
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.train.seed, 4);
    }
}
