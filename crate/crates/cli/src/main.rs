use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use aetn::catalog::{build_catalog, read_app_rows, write_app_rows, AppCatalog, FilterPolicy};
use aetn::eval::{
    curve_compare, downstream_probe, neighbor_overlap_study, neighbor_purity, Dae, DaeConfig,
    DaeTrainConfig, EmbeddingEval, Embedded, EvalReport,
};
use aetn::infer_store::{feature_update, model_update, EmbeddingStore};
use aetn::ingest::{ingest, read_log, write_log, IngestConfig};
use aetn::kv::KeyValues;
use aetn::model::{Aetn, Checkpoint, ModelConfig};
use aetn::record::{read_records, write_records, RecordShape, UserRecord};
use aetn::synthgen::{generate, read_labels, synthetic_app_rows, SynthSettings};
use aetn::train::{
    gradcheck_config, joint_gradcheck, parse_metrics, stream_seed, train, EpochLog, GradCheckSettings,
    TrainConfig,
};
use aetn::Error;

#[derive(Parser)]
#[command(
    name = "aetn",
    version,
    about = "Learn user embeddings from app retention, installs and uninstalls",
    after_help = "Any setting can come from --config FILE (`key = value` lines) or as `--key value`; flags win."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the modeled app vocabulary from raw app rows.
    Catalog {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Raw rows: package, logical key, category, capacity (tab separated).
        #[arg(long)]
        apps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn an event log into fixed-shape user records.
    Ingest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic population: app rows, event log and genre labels.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_apps: PathBuf,
        #[arg(long)]
        out_log: PathBuf,
        #[arg(long)]
        out_labels: Option<PathBuf>,
    },
    /// Train a model; writes the best checkpoint by validation loss.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics, tab separated.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Embed every record into a new store named after the checkpoint.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out_store: PathBuf,
    },
    /// Read from an embedding store.
    Store {
        #[command(subcommand)]
        action: StoreAction,
    },
    /// Refresh the listed users in a store with its own checkpoint.
    Update {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// One user id per line.
        #[arg(long)]
        active_users: PathBuf,
        /// Where to write the updated store; defaults to `--store`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the store's embeddings with a retention-only autoencoder.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Two metrics logs (with and without the auxiliary loss).
        #[arg(long, num_args = 2, value_names = ["WITH", "WITHOUT"])]
        curves: Option<Vec<PathBuf>>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Finite-difference check of the joint loss gradient on a toy network.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum StoreAction {
    /// Print one user's vector, or `absent`.
    Get {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        feature_id: String,
        #[arg(long)]
        user: String,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    msg: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            msg: e.to_string(),
            code: 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        kind: "usage",
        msg: msg.into(),
        code: 2,
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

const MODEL_KEYS: &[&str] = &[
    "preset",
    "d_model",
    "d_ffn",
    "n_heads",
    "n_encoder_layers",
    "n_decoder_layers",
    "d_emb",
    "ae_mid_dim",
    "dropout_input",
    "dropout_attn_ffn",
    "leaky_slope",
    "layer_norm_eps",
    "init_std",
];
const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "base_lr",
    "decay",
    "lambda_reg",
    "seed",
    "validation_fraction",
    "use_aux",
    "workers",
];
const SHAPE_KEYS: &[&str] = &["num_apps", "num_categories", "seq_len", "num_dates"];
const CATALOG_KEYS: &[&str] = &[
    "exclude_ubiquitous_above",
    "exclude_capacity_below",
    "population",
    "preinstall",
    "keep",
];
const INGEST_KEYS: &[&str] = &["seq_len", "num_dates", "per_week_cap", "bucket_days", "snapshot_date"];
const EVAL_KEYS: &[&str] = &[
    "seed",
    "n_query",
    "n_pool",
    "probe_runs",
    "probe_pair",
    "curve_threshold",
    "dae_d_model",
    "dae_d_emb",
    "dae_dropout",
    "dae_epochs",
    "dae_batch_size",
    "dae_lr",
    "dae_decay",
];
const GRADCHECK_KEYS: &[&str] = &[
    "seed",
    "n_records",
    "eps",
    "per_param",
    "lambda_reg",
    "jitter",
    "tolerance",
    "num_apps",
    "num_categories",
    "seq_len",
    "num_dates",
    "d_model",
    "d_ffn",
    "n_heads",
    "n_encoder_layers",
    "n_decoder_layers",
    "d_emb",
    "ae_mid_dim",
];

/// Pull `--key value` pairs that are not declared flags of the chosen
/// subcommand out of `args`.
fn split_overrides(args: Vec<String>) -> Outcome<(Vec<String>, Vec<(String, String)>)> {
    let cmd = Cli::command();
    let mut path = vec![];
    let mut sub = &cmd;
    let mut i = 1;
    while i < args.len() {
        match sub.find_subcommand(&args[i]) {
            Some(s) => {
                sub = s;
                path.push(i);
                i += 1;
            }
            None => break,
        }
    }
    if path.is_empty() {
        return Ok((args, vec![]));
    }
    let known: BTreeSet<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string(), "version".to_string()])
        .collect();
    let mut kept: Vec<String> = args[..i].to_vec();
    let mut overrides = vec![];
    while i < args.len() {
        let a = &args[i];
        let name = a.strip_prefix("--").map(|n| n.split('=').next().unwrap_or(n));
        match name {
            Some(n) if !n.is_empty() && !known.contains(n) && !known.contains(&n.replace('_', "-")) => {
                let (key, value) = match a[2..].split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = args
                            .get(i + 1)
                            .ok_or_else(|| usage(format!("`{a}` needs a value")))?;
                        i += 1;
                        (a[2..].to_string(), v.clone())
                    }
                };
                overrides.push((key.replace('-', "_"), value));
            }
            _ => kept.push(a.clone()),
        }
        i += 1;
    }
    Ok((kept, overrides))
}

/// Defaults, then the config file, then command-line values.
fn resolve(
    defaults: &[(&str, String)],
    allowed: &[&str],
    config: Option<&Path>,
    overrides: &[(String, String)],
    flags: &[(&str, Option<String>)],
) -> Outcome<KeyValues> {
    let mut kv = KeyValues::default();
    for (k, v) in defaults {
        kv.set(k, v.clone());
    }
    let mut given = KeyValues::default();
    if let Some(p) = config {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
        given = KeyValues::parse(&text)?;
    }
    for (k, v) in overrides {
        given.set(k, v.clone());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            given.set(k, v.clone());
        }
    }
    given.check_known(allowed).map_err(|e| usage(e.to_string()))?;
    for (k, v) in given.iter() {
        kv.set(k, v);
    }
    Ok(kv)
}

fn log_config(command: &str, kv: &KeyValues) {
    eprintln!("# {command} resolved config");
    for line in kv.to_text().lines() {
        eprintln!("#   {line}");
    }
}

fn get<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Outcome<T> {
    kv.parsed(key)?
        .ok_or_else(|| usage(format!("missing setting `{key}`")))
}

fn open(p: &Path) -> Outcome<BufReader<File>> {
    File::open(p)
        .map(BufReader::new)
        .map_err(|e| Failure {
            kind: "io",
            msg: format!("{}: {e}", p.display()),
            code: 1,
        })
}

fn create(p: &Path) -> Outcome<BufWriter<File>> {
    File::create(p)
        .map(BufWriter::new)
        .map_err(|e| Failure {
            kind: "io",
            msg: format!("{}: {e}", p.display()),
            code: 1,
        })
}

fn io_err(e: std::io::Error) -> Failure {
    Error::from(e).into()
}

fn load_records(p: &Path) -> Outcome<(RecordShape, Vec<UserRecord>)> {
    Ok(read_records(open(p)?)?)
}

fn load_catalog(p: &Path) -> Outcome<AppCatalog> {
    Ok(AppCatalog::read_from(open(p)?)?)
}

fn model_defaults(preset: &str) -> Outcome<ModelConfig> {
    match preset {
        "desk" => Ok(ModelConfig::desk(1, 1)),
        "production" => Ok(ModelConfig::production(1, 1)),
        other => Err(usage(format!("unknown preset `{other}` (desk or production)"))),
    }
}

fn model_kv(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("d_model", c.d_model.to_string()),
        ("d_ffn", c.d_ffn.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("n_encoder_layers", c.n_encoder_layers.to_string()),
        ("n_decoder_layers", c.n_decoder_layers.to_string()),
        ("d_emb", c.d_emb.to_string()),
        ("ae_mid_dim", c.ae_mid_dim.to_string()),
        ("dropout_input", c.dropout_input.to_string()),
        ("dropout_attn_ffn", c.dropout_attn_ffn.to_string()),
        ("leaky_slope", c.leaky_slope.to_string()),
        ("layer_norm_eps", c.layer_norm_eps.to_string()),
        ("init_std", c.init_std.to_string()),
    ]
}

fn model_from_kv(kv: &KeyValues, base: ModelConfig) -> Outcome<ModelConfig> {
    Ok(ModelConfig {
        d_model: get(kv, "d_model")?,
        d_ffn: get(kv, "d_ffn")?,
        n_heads: get(kv, "n_heads")?,
        n_encoder_layers: get(kv, "n_encoder_layers")?,
        n_decoder_layers: get(kv, "n_decoder_layers")?,
        d_emb: get(kv, "d_emb")?,
        ae_mid_dim: get(kv, "ae_mid_dim")?,
        dropout_input: get(kv, "dropout_input")?,
        dropout_attn_ffn: get(kv, "dropout_attn_ffn")?,
        leaky_slope: get(kv, "leaky_slope")?,
        layer_norm_eps: get(kv, "layer_norm_eps")?,
        init_std: get(kv, "init_std")?,
        ..base
    })
}

fn cmd_catalog(config: Option<&Path>, overrides: &[(String, String)], apps: &Path, out: &Path) -> Outcome {
    let d = FilterPolicy::default();
    let kv = resolve(
        &[
            ("exclude_ubiquitous_above", d.exclude_ubiquitous_above.to_string()),
            ("exclude_capacity_below", d.exclude_capacity_below.to_string()),
            ("population", d.population.to_string()),
            ("preinstall", String::new()),
            ("keep", String::new()),
        ],
        CATALOG_KEYS,
        config,
        overrides,
        &[],
    )?;
    log_config("catalog", &kv);
    let list = |k: &str| -> BTreeSet<String> {
        kv.get(k)
            .unwrap_or("")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    };
    let policy = FilterPolicy {
        exclude_ubiquitous_above: get(&kv, "exclude_ubiquitous_above")?,
        exclude_capacity_below: get(&kv, "exclude_capacity_below")?,
        population: get(&kv, "population")?,
        preinstall_list: list("preinstall"),
        keep_list: list("keep"),
    };
    let rows = read_app_rows(open(apps)?)?;
    let catalog = build_catalog(&rows, &policy)?;
    let mut w = create(out)?;
    catalog.write_to(&mut w)?;
    w.flush().map_err(io_err)?;
    eprintln!(
        "catalog: {} apps in {} categories from {} rows",
        catalog.num_apps(),
        catalog.num_categories(),
        rows.len()
    );
    Ok(())
}

fn cmd_ingest(
    config: Option<&Path>,
    overrides: &[(String, String)],
    log: &Path,
    catalog: &Path,
    out: &Path,
) -> Outcome {
    let d = IngestConfig::default();
    let kv = resolve(
        &[
            ("seq_len", d.seq_len.to_string()),
            ("num_dates", d.num_dates.to_string()),
            ("per_week_cap", d.per_week_cap.to_string()),
            ("bucket_days", d.bucket_days.to_string()),
            ("snapshot_date", "latest".to_string()),
        ],
        INGEST_KEYS,
        config,
        overrides,
        &[],
    )?;
    log_config("ingest", &kv);
    let snapshot_date = match kv.get("snapshot_date") {
        None | Some("latest") => None,
        Some(_) => Some(get(&kv, "snapshot_date")?),
    };
    let cfg = IngestConfig {
        seq_len: get(&kv, "seq_len")?,
        num_dates: get(&kv, "num_dates")?,
        per_week_cap: get(&kv, "per_week_cap")?,
        bucket_days: get(&kv, "bucket_days")?,
        snapshot_date,
    };
    let catalog = load_catalog(catalog)?;
    let lines = read_log(open(log)?)?;
    let (records, stats) = ingest(&lines, &catalog, &cfg)?;
    let shape = RecordShape {
        num_apps: catalog.num_apps(),
        seq_len: cfg.seq_len,
        num_dates: cfg.num_dates,
    };
    let mut w = create(out)?;
    write_records(&mut w, &shape, &records)?;
    w.flush().map_err(io_err)?;
    eprintln!("ingest: {stats:?}");
    Ok(())
}

fn cmd_synth(
    config: Option<&Path>,
    overrides: &[(String, String)],
    seed: Option<u64>,
    out_apps: &Path,
    out_log: &Path,
    out_labels: Option<&Path>,
) -> Outcome {
    let d = SynthSettings::default();
    let mut allowed = SynthSettings::KEYS.to_vec();
    allowed.extend(["num_apps", "num_categories"]);
    let kv = resolve(
        &[
            ("n_users", d.n_users.to_string()),
            ("n_genres", d.n_genres.to_string()),
            ("window_days", d.window_days.to_string()),
            ("twin_mode", d.twin_mode.to_string()),
            ("end_date", d.end_date.to_string()),
            ("initial_apps", d.initial_apps.to_string()),
            ("twin_templates", d.twin_templates.to_string()),
            ("affinity_exponent", d.affinity_exponent.to_string()),
            ("burstiness", d.burstiness.to_string()),
            ("install_rate", d.install_rate.to_string()),
            ("churn_rate", d.churn_rate.to_string()),
            ("twin_burstiness", d.twin_burstiness.to_string()),
            ("twin_install_rate", d.twin_install_rate.to_string()),
            ("twin_churn_rate", d.twin_churn_rate.to_string()),
            ("num_apps", "500".to_string()),
            ("num_categories", "20".to_string()),
        ],
        &allowed,
        config,
        overrides,
        &[("seed", seed.map(|s| s.to_string()))],
    )?;
    if !kv.contains("seed") {
        return Err(usage("synth needs --seed"));
    }
    log_config("synth", &kv);
    let settings = SynthSettings::from_kv(&kv)?;
    let num_apps: usize = get(&kv, "num_apps")?;
    let rows = synthetic_app_rows(num_apps, get(&kv, "num_categories")?);
    let catalog = build_catalog(&rows, &FilterPolicy::default())?;
    let pop = generate(&settings.config(num_apps), &catalog)?;
    let mut w = create(out_apps)?;
    write_app_rows(&rows, &mut w)?;
    w.flush().map_err(io_err)?;
    let mut w = create(out_log)?;
    write_log(&pop.lines, &mut w)?;
    w.flush().map_err(io_err)?;
    if let Some(p) = out_labels {
        let mut w = create(p)?;
        pop.write_labels(&mut w)?;
        w.flush().map_err(io_err)?;
    }
    eprintln!("synth: {} users, {} log lines", settings.n_users, pop.lines.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    overrides: &[(String, String)],
    seed: Option<u64>,
    workers: Option<usize>,
    records: &Path,
    catalog: &Path,
    out: &Path,
    metrics: Option<&Path>,
) -> Outcome {
    let (shape, records) = load_records(records)?;
    let catalog = load_catalog(catalog)?;
    if catalog.num_apps() != shape.num_apps {
        return Err(usage(format!(
            "catalog has {} apps but records were built for {}",
            catalog.num_apps(),
            shape.num_apps
        )));
    }
    let mut allowed = MODEL_KEYS.to_vec();
    allowed.extend(TRAIN_KEYS);
    allowed.extend(SHAPE_KEYS);

    // The preset decides the model defaults, so look at it first.
    let pre = resolve(&[("preset", "desk".to_string())], &allowed, config, overrides, &[])?;
    let preset = pre.get("preset").unwrap_or("desk").to_string();
    let base = model_defaults(&preset)?;
    let t = TrainConfig::default();
    let mut defaults: Vec<(&str, String)> = vec![("preset", preset)];
    defaults.extend(model_kv(&base));
    defaults.extend([
        ("batch_size", t.batch_size.to_string()),
        ("epochs", t.epochs.to_string()),
        ("base_lr", t.base_lr.to_string()),
        ("decay", t.decay.to_string()),
        ("lambda_reg", t.lambda_reg.to_string()),
        ("validation_fraction", t.validation_fraction.to_string()),
        ("use_aux", t.use_aux.to_string()),
        ("workers", t.workers.to_string()),
        ("num_apps", shape.num_apps.to_string()),
        ("num_categories", catalog.num_categories().to_string()),
        ("seq_len", shape.seq_len.to_string()),
        ("num_dates", shape.num_dates.to_string()),
    ]);
    let kv = resolve(
        &defaults,
        &allowed,
        config,
        overrides,
        &[
            ("seed", seed.map(|s| s.to_string())),
            ("workers", workers.map(|w| w.to_string())),
        ],
    )?;
    if !kv.contains("seed") {
        return Err(usage("train needs --seed"));
    }
    let derived = [
        ("num_apps", shape.num_apps),
        ("num_categories", catalog.num_categories()),
        ("seq_len", shape.seq_len),
        ("num_dates", shape.num_dates),
    ];
    for (k, v) in derived {
        let given: usize = get(&kv, k)?;
        if given != v {
            return Err(usage(format!("config sets {k} = {given} but the data has {v}")));
        }
    }
    log_config("train", &kv);
    let model_config = model_from_kv(
        &kv,
        ModelConfig {
            num_apps: shape.num_apps,
            num_categories: catalog.num_categories(),
            seq_len: shape.seq_len,
            num_dates: shape.num_dates,
            ..base
        },
    )?;
    let cfg = TrainConfig {
        batch_size: get(&kv, "batch_size")?,
        epochs: get(&kv, "epochs")?,
        base_lr: get(&kv, "base_lr")?,
        decay: get(&kv, "decay")?,
        lambda_reg: get(&kv, "lambda_reg")?,
        seed: get(&kv, "seed")?,
        validation_fraction: get(&kv, "validation_fraction")?,
        use_aux: get(&kv, "use_aux")?,
        workers: get(&kv, "workers")?,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let model = Aetn::from_seed(model_config, catalog.categories(), stream_seed(cfg.seed, 0, "init", ""))?;
    let mut metrics_out = match metrics {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{}", EpochLog::HEADER).map_err(io_err)?;
            Some(w)
        }
        None => None,
    };
    eprintln!("{}", EpochLog::HEADER);
    let mut write_err = None;
    let outcome = train(model, &records, &cfg, |e| {
        eprintln!("{e}");
        if let Some(w) = metrics_out.as_mut() {
            if let Err(err) = writeln!(w, "{e}").and_then(|_| w.flush()) {
                write_err.get_or_insert(err);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    outcome.best.write(out)?;
    if let Some(epoch) = outcome.diverged_at {
        return Err(Error::Diverged(epoch).into());
    }
    eprintln!(
        "train: best epoch {} feature_id {}",
        outcome.best_epoch,
        outcome.best.feature_id()
    );
    println!("{}", outcome.best.feature_id());
    Ok(())
}

fn simple_kv(
    name: &str,
    config: Option<&Path>,
    overrides: &[(String, String)],
    workers: Option<usize>,
) -> Outcome<usize> {
    let kv = resolve(
        &[("workers", "1".to_string())],
        &["workers"],
        config,
        overrides,
        &[("workers", workers.map(|w| w.to_string()))],
    )?;
    log_config(name, &kv);
    get(&kv, "workers")
}

fn cmd_infer(
    config: Option<&Path>,
    overrides: &[(String, String)],
    workers: Option<usize>,
    checkpoint: &Path,
    records: &Path,
    out_store: &Path,
) -> Outcome {
    let workers = simple_kv("infer", config, overrides, workers)?;
    let ck = Checkpoint::read(checkpoint)?;
    let (_, records) = load_records(records)?;
    let store = model_update(&ck, &records, workers)?;
    store.write(out_store)?;
    eprintln!("infer: {} users into store {}", store.len(), store.feature_id());
    println!("{}", store.feature_id());
    Ok(())
}

fn cmd_store_get(store: &Path, feature_id: &str, user: &str) -> Outcome {
    let store = EmbeddingStore::open(store, feature_id)?;
    match store.get(user) {
        Some(row) => {
            let vals: Vec<String> = row.vector.iter().map(|x| format!("{x:e}")).collect();
            println!("{user}\t{}\t{}", row.updated, vals.join(","));
        }
        None => println!("absent\t{user}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_update(
    config: Option<&Path>,
    overrides: &[(String, String)],
    workers: Option<usize>,
    checkpoint: &Path,
    store_path: &Path,
    records: &Path,
    active: &Path,
    out: Option<&Path>,
) -> Outcome {
    let workers = simple_kv("update", config, overrides, workers)?;
    let ck = Checkpoint::read(checkpoint)?;
    let store = EmbeddingStore::open(store_path, ck.feature_id())?;
    let wanted: BTreeSet<String> = fs::read_to_string(active)
        .map_err(io_err)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let (_, records) = load_records(records)?;
    let fresh: Vec<UserRecord> = records.into_iter().filter(|r| wanted.contains(&r.user_id)).collect();
    if fresh.len() != wanted.len() {
        let have: BTreeSet<&str> = fresh.iter().map(|r| r.user_id.as_str()).collect();
        let missing = wanted.iter().find(|u| !have.contains(u.as_str())).expect("some user is missing");
        return Err(usage(format!("active user `{missing}` has no record")));
    }
    let n = feature_update(&store, &ck, &fresh, workers)?;
    store.write(out.unwrap_or(store_path))?;
    eprintln!("update: refreshed {n} users in store {}", store.feature_id());
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    overrides: &[(String, String)],
    seed: Option<u64>,
    records: &Path,
    store: &Path,
    labels: Option<&Path>,
    curves: Option<&[PathBuf]>,
    out_json: Option<&Path>,
) -> Outcome {
    let kv = resolve(
        &[
            ("seed", "0".to_string()),
            ("n_query", "500".to_string()),
            ("n_pool", "5000".to_string()),
            ("probe_runs", "5".to_string()),
            ("probe_pair", "0,1".to_string()),
            ("curve_threshold", "0".to_string()),
            ("dae_d_model", "64".to_string()),
            ("dae_d_emb", "16".to_string()),
            ("dae_dropout", "0.05".to_string()),
            ("dae_epochs", "30".to_string()),
            ("dae_batch_size", "32".to_string()),
            ("dae_lr", "1e-3".to_string()),
            ("dae_decay", "0.95".to_string()),
        ],
        EVAL_KEYS,
        config,
        overrides,
        &[("seed", seed.map(|s| s.to_string()))],
    )?;
    log_config("eval", &kv);
    let seed: u64 = get(&kv, "seed")?;
    let (shape, records) = load_records(records)?;
    let store = EmbeddingStore::read(store)?;
    let mut aetn_emb = Vec::with_capacity(records.len());
    for r in &records {
        let row = store
            .get(&r.user_id)
            .ok_or_else(|| usage(format!("user `{}` is not in the store", r.user_id)))?;
        aetn_emb.push(Embedded {
            user_id: r.user_id.clone(),
            vector: row.vector.iter().map(|&x| x as f64).collect(),
        });
    }
    let mut dae = Dae::new(
        DaeConfig {
            num_apps: shape.num_apps,
            d_model: get(&kv, "dae_d_model")?,
            d_emb: get(&kv, "dae_d_emb")?,
            dropout_input: get(&kv, "dae_dropout")?,
            leaky_slope: 0.01,
        },
        seed,
    )?;
    dae.train(
        &records,
        &DaeTrainConfig {
            epochs: get(&kv, "dae_epochs")?,
            batch_size: get(&kv, "dae_batch_size")?,
            base_lr: get(&kv, "dae_lr")?,
            decay: get(&kv, "dae_decay")?,
            seed,
        },
    )?;
    let dae_emb = records
        .iter()
        .map(|r| {
            Ok(Embedded {
                user_id: r.user_id.clone(),
                vector: dae.embed(r)?,
            })
        })
        .collect::<aetn::Result<Vec<_>>>()?;

    let n = records.len();
    let n_query = get::<usize>(&kv, "n_query")?.min(n);
    let n_pool = get::<usize>(&kv, "n_pool")?.min(n);
    let label_map: Option<BTreeMap<String, u32>> = match labels {
        Some(p) => Some(read_labels(&fs::read_to_string(p).map_err(io_err)?)?.into_iter().collect()),
        None => None,
    };
    let pair: Vec<u32> = kv
        .get("probe_pair")
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad probe_pair entry `{s}`"))))
        .collect::<Outcome<_>>()?;
    if pair.len() != 2 {
        return Err(usage("probe_pair needs two genre ids"));
    }
    let mut report = EvalReport::default();
    for (name, emb) in [("aetn", &aetn_emb), ("dae", &dae_emb)] {
        let overlap = neighbor_overlap_study(emb, &records, n_query, n_pool, seed)?;
        let (probe_auc, neighbor_purity) = match &label_map {
            Some(labels) => {
                let (x, y): (Vec<Vec<f64>>, Vec<bool>) = emb
                    .iter()
                    .filter_map(|e| {
                        let g = *labels.get(&e.user_id)?;
                        (g == pair[0] || g == pair[1]).then(|| (e.vector.clone(), g == pair[1]))
                    })
                    .unzip();
                let auc = downstream_probe(&x, &y, get(&kv, "probe_runs")?, seed)?;
                (Some(auc.mean_auc), Some(neighbor_purity(emb, labels)?))
            }
            None => (None, None),
        };
        report.embeddings.push(EmbeddingEval {
            name: name.to_string(),
            overlap: Some(overlap),
            probe_auc,
            neighbor_purity,
        });
    }
    if let Some(paths) = curves {
        let with = parse_metrics(&fs::read_to_string(&paths[0]).map_err(io_err)?)?;
        let without = parse_metrics(&fs::read_to_string(&paths[1]).map_err(io_err)?)?;
        report
            .curves
            .push(curve_compare(&with, &without, get(&kv, "curve_threshold")?)?);
    }
    print!("{report}");
    if let Some(p) = out_json {
        fs::write(p, report.to_json_lines()).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Outcome {
    let base = gradcheck_config();
    let s = GradCheckSettings::default();
    let kv = resolve(
        &[
            ("seed", s.seed.to_string()),
            ("n_records", s.n_records.to_string()),
            ("eps", s.eps.to_string()),
            ("per_param", s.per_param.to_string()),
            ("lambda_reg", s.lambda_reg.to_string()),
            ("jitter", s.jitter.to_string()),
            ("tolerance", "1e-4".to_string()),
            ("num_apps", base.num_apps.to_string()),
            ("num_categories", base.num_categories.to_string()),
            ("seq_len", base.seq_len.to_string()),
            ("num_dates", base.num_dates.to_string()),
            ("d_model", base.d_model.to_string()),
            ("d_ffn", base.d_ffn.to_string()),
            ("n_heads", base.n_heads.to_string()),
            ("n_encoder_layers", base.n_encoder_layers.to_string()),
            ("n_decoder_layers", base.n_decoder_layers.to_string()),
            ("d_emb", base.d_emb.to_string()),
            ("ae_mid_dim", base.ae_mid_dim.to_string()),
        ],
        GRADCHECK_KEYS,
        config,
        overrides,
        &[("seed", seed.map(|s| s.to_string()))],
    )?;
    log_config("gradcheck", &kv);
    let config = ModelConfig {
        num_apps: get(&kv, "num_apps")?,
        num_categories: get(&kv, "num_categories")?,
        seq_len: get(&kv, "seq_len")?,
        num_dates: get(&kv, "num_dates")?,
        d_model: get(&kv, "d_model")?,
        d_ffn: get(&kv, "d_ffn")?,
        n_heads: get(&kv, "n_heads")?,
        n_encoder_layers: get(&kv, "n_encoder_layers")?,
        n_decoder_layers: get(&kv, "n_decoder_layers")?,
        d_emb: get(&kv, "d_emb")?,
        ae_mid_dim: get(&kv, "ae_mid_dim")?,
        ..base
    };
    let settings = GradCheckSettings {
        n_records: get(&kv, "n_records")?,
        seed: get(&kv, "seed")?,
        eps: get(&kv, "eps")?,
        per_param: get(&kv, "per_param")?,
        lambda_reg: get(&kv, "lambda_reg")?,
        jitter: get(&kv, "jitter")?,
    };
    let tolerance: f64 = get(&kv, "tolerance")?;
    let report = joint_gradcheck(&config, &settings)?;
    println!("checked={}", report.checked);
    println!("max_rel_error={:e}", report.max_rel_error);
    if let Some(w) = &report.worst {
        println!("worst={}[{}] analytic={:e} numeric={:e}", w.param, w.index, w.analytic, w.numeric);
    }
    if !(report.max_rel_error < tolerance) {
        return Err(Failure {
            kind: "gradcheck",
            msg: format!("max relative error {:e} >= {tolerance:e}", report.max_rel_error),
            code: 1,
        });
    }
    Ok(())
}

fn run(args: Vec<String>) -> Outcome {
    let (args, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return Err(usage(first.to_string()));
        }
    };
    match cli.command {
        Command::Catalog { config, apps, out } => cmd_catalog(config.as_deref(), &overrides, &apps, &out),
        Command::Ingest {
            config,
            log,
            catalog,
            out,
        } => cmd_ingest(config.as_deref(), &overrides, &log, &catalog, &out),
        Command::Synth {
            config,
            seed,
            out_apps,
            out_log,
            out_labels,
        } => cmd_synth(
            config.as_deref(),
            &overrides,
            seed,
            &out_apps,
            &out_log,
            out_labels.as_deref(),
        ),
        Command::Train {
            config,
            seed,
            workers,
            records,
            catalog,
            out,
            metrics,
        } => cmd_train(
            config.as_deref(),
            &overrides,
            seed,
            workers,
            &records,
            &catalog,
            &out,
            metrics.as_deref(),
        ),
        Command::Infer {
            config,
            workers,
            checkpoint,
            records,
            out_store,
        } => cmd_infer(config.as_deref(), &overrides, workers, &checkpoint, &records, &out_store),
        Command::Store { action } => {
            if let Some((k, _)) = overrides.first() {
                return Err(usage(format!("unknown key `{k}`")));
            }
            match action {
                StoreAction::Get {
                    store,
                    feature_id,
                    user,
                } => cmd_store_get(&store, &feature_id, &user),
            }
        }
        Command::Update {
            config,
            workers,
            checkpoint,
            store,
            records,
            active_users,
            out,
        } => cmd_update(
            config.as_deref(),
            &overrides,
            workers,
            &checkpoint,
            &store,
            &records,
            &active_users,
            out.as_deref(),
        ),
        Command::Eval {
            config,
            seed,
            records,
            store,
            labels,
            curves,
            out_json,
        } => cmd_eval(
            config.as_deref(),
            &overrides,
            seed,
            &records,
            &store,
            labels.as_deref(),
            curves.as_deref(),
            out_json.as_deref(),
        ),
        Command::Gradcheck { config, seed } => cmd_gradcheck(config.as_deref(), &overrides, seed),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.msg.replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", f.kind);
            ExitCode::from(f.code)
        }
    }
}
