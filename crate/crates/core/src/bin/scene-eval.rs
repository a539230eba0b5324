//! `scene-eval` command-line interface.
//!
//! JSON results go to `--out` when given, stdout otherwise. Exit status is 0
//! on success, 2 for invalid input and 3 for numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use scene_eval::catmerge::{self, ConfusionMatrix, MergeMap, RuleConfig};
use scene_eval::diversity::{self, DsMode, PairwiseDistanceTable};
use scene_eval::labelmetrics::{self, Prediction};
use scene_eval::manifold::{self, compute_radii, RadiusPool, DEFAULT_K};
use scene_eval::report::{self, MetricReport, PanelConfig};
use scene_eval::splits::{self, CountMode};
use scene_eval::store::{
    index_conditionings, load_conditionings, save_conditionings, save_embedding_set, ClassTable, Conditioning,
    ConditioningMap, EmbeddingSet, SetPaths,
};
use scene_eval::Error;

const THREADS_VAR: &str = "SCENE_EVAL_THREADS";

#[derive(Parser)]
#[command(name = "scene-eval", version, about = "Evaluate layout-conditioned scene generation")]
struct Cli {
    /// Configuration file (used by `panel`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Neighbourhood size for manifold radii [default: 5].
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Random seed for seeded draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ClassArg {
    /// Class table (classes.json).
    #[arg(long)]
    classes: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    #[command(flatten)]
    classes: ClassArg,
    /// Real embedding set prefix (`<prefix>.cseb` + `<prefix>.meta.jsonl`).
    #[arg(long)]
    real: PathBuf,
    /// Generated embedding set prefix.
    #[arg(long)]
    generated: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountModeArg {
    Instances,
    Images,
}

impl From<CountModeArg> for CountMode {
    fn from(m: CountModeArg) -> Self {
        match m {
            CountModeArg::Instances => CountMode::Instances,
            CountModeArg::Images => CountMode::Images,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Partition evaluation conditionings into splits.
    Split {
        #[command(flatten)]
        classes: ClassArg,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        validation_size: usize,
    },
    /// Draw a subset of `source` whose class histogram matches `target`.
    Subsample {
        #[command(flatten)]
        classes: ClassArg,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, value_enum, default_value_t = CountModeArg::Instances)]
        count_mode: CountModeArg,
    },
    /// k-NN radii of a set, against itself or a disjoint pool.
    Radii {
        #[command(flatten)]
        classes: ClassArg,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Manifold precision and recall.
    Pr(PairArgs),
    /// Manifold consistency.
    Consistency {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, required = true, num_args = 1..)]
        conditionings: Vec<PathBuf>,
    },
    /// Fréchet distance between two sets.
    Fid(PairArgs),
    /// Diversity score from a distance table or from embeddings.
    Diversity {
        #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
        table: Option<PathBuf>,
        /// Generated embedding set prefix.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, requires = "embeddings")]
        classes: Option<PathBuf>,
    },
    /// Scene F1 or object accuracy from a prediction file.
    Setmetrics {
        #[command(flatten)]
        classes: ClassArg,
        #[arg(long, required = true, num_args = 1..)]
        conditionings: Vec<PathBuf>,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// 1-NN confusion matrix over object crops.
    Confusion {
        #[command(flatten)]
        classes: ClassArg,
        #[arg(long)]
        crops: PathBuf,
    },
    /// Rule-filtered merge candidates from a confusion matrix.
    ProposeMerges {
        #[command(flatten)]
        classes: ClassArg,
        #[arg(long)]
        confusion: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Relabel an embedding set and/or conditionings through a merge map.
    ApplyMerges {
        #[command(flatten)]
        classes: ClassArg,
        #[arg(long)]
        merge_map: PathBuf,
        #[arg(long, requires = "output_set")]
        input_set: Option<PathBuf>,
        #[arg(long)]
        output_set: Option<PathBuf>,
        #[arg(long, requires = "output_conditionings")]
        input_conditionings: Option<PathBuf>,
        #[arg(long)]
        output_conditionings: Option<PathBuf>,
    },
    /// Full metric panel from `--config` into the `--out` directory.
    Panel,
    /// Flat CSV of per-seed values from report files.
    PlotData {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_VAR} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(e.to_string()))
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_text(out, &text)
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_set(prefix: &Path, classes: &ClassTable) -> Result<EmbeddingSet, Error> {
    Ok(SetPaths::from_prefix(prefix).load(classes)?)
}

fn load_conds(paths: &[PathBuf], classes: &ClassTable) -> Result<Vec<Conditioning>, Error> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(load_conditionings(p, classes)?);
    }
    Ok(all)
}

fn conds_map(paths: &[PathBuf], classes: &ClassTable) -> Result<ConditioningMap, Error> {
    Ok(index_conditionings(load_conds(paths, classes)?)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    let k = cli.k.unwrap_or(DEFAULT_K);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Split {
            classes,
            train,
            eval,
            validation_size,
        } => {
            let table = ClassTable::load(&classes.classes)?;
            let train = load_conditionings(&train, &table)?;
            let eval = load_conditionings(&eval, &table)?;
            let assignment = splits::partition(&train, &eval, validation_size, cli.seed)?;
            splits::validate_assignment(&assignment, &train, &eval)?;
            let counts: BTreeMap<&str, usize> =
                splits::Split::ALL.iter().map(|s| (s.name(), assignment.count(*s))).collect();
            match out {
                Some(path) => {
                    assignment.save(path)?;
                    emit(None, &counts)
                }
                None => emit(None, &assignment),
            }
        }
        Command::Subsample {
            classes,
            source,
            target,
            size,
            count_mode,
        } => {
            let table = ClassTable::load(&classes.classes)?;
            let source = load_conditionings(&source, &table)?;
            let target = load_conditionings(&target, &table)?;
            let mode = count_mode.into();
            let target = splits::class_histogram(&target, mode);
            let result = splits::subsample_matched(&source, &target, size, cli.seed, mode)?;
            emit(out, &result)
        }
        Command::Radii { classes, targets, pool } => {
            let table = ClassTable::load(&classes.classes)?;
            let targets = load_set(&targets, &table)?;
            let manifold = match pool {
                Some(p) => compute_radii(&targets, RadiusPool::Disjoint(&load_set(&p, &table)?), k)?,
                None => compute_radii(&targets, RadiusPool::Targets, k)?,
            };
            emit(out, &json!({ "k": k, "radii": manifold.radii() }))
        }
        Command::Pr(pair) => {
            let table = ClassTable::load(&pair.classes.classes)?;
            let real = load_set(&pair.real, &table)?;
            let generated = load_set(&pair.generated, &table)?;
            let real_m = compute_radii(&real, RadiusPool::Targets, k)?;
            let gen_m = compute_radii(&generated, RadiusPool::Targets, k)?;
            emit(
                out,
                &json!({
                    "k": k,
                    "precision": manifold::precision(&generated, &real_m)?,
                    "recall": manifold::recall(&real, &gen_m)?,
                    "n_real": real.len(),
                    "n_generated": generated.len(),
                }),
            )
        }
        Command::Consistency { pair, conditionings } => {
            let table = ClassTable::load(&pair.classes.classes)?;
            let conds = conds_map(&conditionings, &table)?;
            let real = load_set(&pair.real, &table)?;
            let generated = load_set(&pair.generated, &table)?;
            let real_m = compute_radii(&real, RadiusPool::Targets, k)?;
            emit(
                out,
                &json!({
                    "k": k,
                    "consistency": manifold::consistency(&generated, &real_m, &conds)?,
                    "precision": manifold::precision(&generated, &real_m)?,
                }),
            )
        }
        Command::Fid(pair) => {
            let table = ClassTable::load(&pair.classes.classes)?;
            let real = load_set(&pair.real, &table)?;
            let generated = load_set(&pair.generated, &table)?;
            let report = scene_eval::frechet::fid(&real, &generated)?;
            if report.n_x != report.n_y {
                eprintln!(
                    "warning: sample counts differ (n_x {}, n_y {}); fid values are not comparable across counts",
                    report.n_x, report.n_y
                );
            }
            emit(out, &report)
        }
        Command::Diversity {
            table,
            embeddings,
            classes,
        } => {
            let (score, mode) = match (table, embeddings) {
                (Some(t), _) => (diversity::ds_from_table(&PairwiseDistanceTable::load(t)?)?, DsMode::Table),
                (None, Some(e)) => {
                    let classes = classes.ok_or_else(|| Error::Usage("--embeddings needs --classes".into()))?;
                    let set = load_set(&e, &ClassTable::load(classes)?)?;
                    (diversity::ds_from_embeddings(&set)?, DsMode::Embedding)
                }
                (None, None) => return Err(Error::Usage("give --table or --embeddings".into())),
            };
            emit(
                out,
                &json!({ "mean": score.mean, "std": score.std, "n_conditionings": score.n_conditionings, "mode": mode }),
            )
        }
        Command::Setmetrics {
            classes,
            conditionings,
            predictions,
        } => {
            let table = ClassTable::load(&classes.classes)?;
            let conds = conds_map(&conditionings, &table)?;
            let preds = labelmetrics::load_predictions(&predictions, &table)?;
            match preds.first().map(|p| &p.prediction) {
                Some(Prediction::Class { .. }) => emit(out, &labelmetrics::object_accuracy(&preds, &conds)?),
                _ => emit(out, &json!({ "f1": labelmetrics::mean_f1(&preds, &conds)? })),
            }
        }
        Command::Confusion { classes, crops } => {
            let table = ClassTable::load(&classes.classes)?;
            let crops = load_set(&crops, &table)?;
            emit(out, &catmerge::one_nn_confusion(&crops, table.len())?)
        }
        Command::ProposeMerges {
            classes,
            confusion,
            rules,
        } => {
            let table = ClassTable::load(&classes.classes)?;
            let text = std::fs::read_to_string(&confusion)
                .map_err(|e| Error::Usage(format!("cannot read {}: {e}", confusion.display())))?;
            let cm: ConfusionMatrix = serde_json::from_str(&text)
                .map_err(|e| Error::Usage(format!("malformed confusion matrix {}: {e}", confusion.display())))?;
            let rules = match rules {
                Some(p) => RuleConfig::load(p)?,
                None => RuleConfig::default(),
            };
            let proposals = catmerge::propose_merges(&cm, &table, &rules)?;
            let named: Vec<_> = proposals
                .iter()
                .map(|p| {
                    json!({
                        "target": table.name(p.target),
                        "candidates": p.candidates.iter().map(|(c, v)| json!([table.name(*c), v])).collect::<Vec<_>>(),
                        "rule_trace": p.rule_trace.iter()
                            .map(|d| json!({ "class": table.name(d.class), "rule": d.rule }))
                            .collect::<Vec<_>>(),
                    })
                })
                .collect();
            emit(out, &named)
        }
        Command::ApplyMerges {
            classes,
            merge_map,
            input_set,
            output_set,
            input_conditionings,
            output_conditionings,
        } => {
            let table = ClassTable::load(&classes.classes)?;
            let map = MergeMap::load(&merge_map, &table)?;
            if input_set.is_none() && input_conditionings.is_none() {
                return Err(Error::Usage("nothing to relabel: give --input-set or --input-conditionings".into()));
            }
            if let (Some(input), Some(output)) = (input_set, output_set) {
                let merged = catmerge::apply_merge_map(&load_set(&input, &table)?, &map)?;
                let paths = SetPaths::from_prefix(&output);
                save_embedding_set(&merged, &paths.matrix, &paths.metadata, &table)?;
            }
            if let (Some(input), Some(output)) = (input_conditionings, output_conditionings) {
                let conds = load_conditionings(&input, &table)?;
                let merged = catmerge::apply_merge_map_to_conditionings(&conds, &map)?;
                save_conditionings(&output, &merged, &table)?;
            }
            Ok(())
        }
        Command::Panel => {
            let config = cli.config.ok_or_else(|| Error::Usage("panel needs --config".into()))?;
            let out_dir = out.ok_or_else(|| Error::Usage("panel needs --out <dir>".into()))?;
            let mut cfg = PanelConfig::load(&config)?;
            if let Some(k) = cli.k {
                cfg.k = k;
            }
            let output = report::run_panel(&cfg, out_dir)?;
            for w in output.reports.iter().flat_map(|r| &r.warnings).chain(&output.panel.warnings) {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::PlotData { reports } => {
            let reports = reports.iter().map(MetricReport::load).collect::<Result<Vec<_>, _>>()?;
            write_text(out, &report::plot_data(&reports))
        }
    }
}
