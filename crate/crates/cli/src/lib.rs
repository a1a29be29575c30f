//! The `prose` command line: dataset generation, training, evaluation and
//! figure export. [`run`] is the whole program; `main` only forwards the
//! process arguments and exit code.

mod args;
mod settings;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::Parser;
use log::info;
use thiserror::Error;

use prose::data::{self, generate_toy, FactorDataset, FactorSpec, Split};
use prose::disentangle::{self, metrics_csv, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use prose::eval::{self, CodeSet, EvalOptions, Interpolation};
use prose::{codec, kv, Matrix};

pub use args::Cli;
pub use settings::{resolve, RunConfig, RUN_KEYS};

use args::{Command, DataFlags, EvalArgs, GenDataArgs, InspectArgs, InterpolateArgs, TrainArgs, TransferArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] disentangle::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] disentangle::CheckpointError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Format(#[from] codec::FormatError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code: 0 on success, 2 for usage errors, 1 for
/// any other failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().filter_or("PROSE_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `prose --help` for usage");
            }
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => evaluate(&a),
        Command::Transfer(a) => transfer(&a),
        Command::Interpolate(a) => interpolate(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn out_dir(path: &Path) -> Result<&Path, CliError> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(path)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn load_data(data: Option<&Path>, data_seed: u64) -> Result<FactorDataset, CliError> {
    Ok(match data {
        Some(path) => data::load_dataset(path)?,
        None => generate_toy(&FactorSpec::quads(), data_seed)?,
    })
}

fn dataset_for(flags: &DataFlags) -> Result<FactorDataset, CliError> {
    load_data(flags.data.as_deref(), flags.data_seed.unwrap_or(0))
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let ds = match (&a.idx_images, &a.idx_labels) {
        (Some(images), Some(labels)) => {
            if a.test_every < 2 {
                return Err(CliError::Usage("--test-every must be at least 2".into()));
            }
            data::load_idx(images, labels)?.with_test_every(a.test_every)
        }
        _ => generate_toy(&FactorSpec::quads(), a.seed)?,
    };
    let path = out_dir(&a.out)?.join("dataset.bin");
    data::save_dataset(&ds, &path)?;
    println!(
        "wrote {} ({} train / {} test examples, {})",
        path.display(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::Test).len(),
        ds.spec.name
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let run = resolve(a)?;
    let ds = load_data(run.data.as_deref(), run.data_seed)?;
    info!("training {} examples with\n{}", ds.len(), run.config.to_text());
    let outcome = disentangle::train(&run.config, &ds)?;
    let dir = out_dir(&run.out)?;
    disentangle::save_checkpoint(&outcome.checkpoint, &dir.join("checkpoint.bin"))?;
    write(&dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    write(&dir.join("config.cfg"), run.config.to_text())?;
    match outcome.metrics.last() {
        Some(m) => println!(
            "trained {} epochs: recon {:.6} aux {:.6} orth {:.6} total {:.6}",
            m.epoch, m.recon, m.aux, m.orth, m.total
        ),
        None => println!("wrote untrained checkpoint (0 epochs)"),
    }
    Ok(())
}

fn evaluate(a: &EvalArgs) -> Result<(), CliError> {
    let ckpt = disentangle::load_checkpoint(&a.checkpoint)?;
    let ds = dataset_for(&a.data)?;
    let report = eval::evaluate(
        &ckpt,
        &ds,
        EvalOptions {
            seed: a.seed,
            projected: a.projected,
        },
    )?;
    let dir = out_dir(&a.out)?;
    report.write_to(dir)?;
    write(&dir.join("pca.csv"), pca_csv(&ckpt, &ds, a.seed)?)?;
    print!("{}", report.summary());
    Ok(())
}

/// Test-set codes projected to 2-D, with factor labels.
fn pca_csv(ckpt: &Checkpoint, ds: &FactorDataset, seed: u64) -> Result<String, CliError> {
    let codes = CodeSet::from_model(&ckpt.model, ds, Split::Test)?;
    let pca = eval::pca_2d(&codes.codes, seed)?;
    let mut s = String::from("pc1,pc2");
    for f in &ds.spec.factors {
        write!(s, ",{}", f.name).unwrap();
    }
    s.push('\n');
    for (c, labels) in pca.coords.iter().zip(&codes.labels) {
        write!(s, "{:?},{:?}", c[0], c[1]).unwrap();
        for l in labels {
            write!(s, ",{l}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

fn gather(ds: &FactorDataset, idx: &[usize]) -> Result<Matrix, CliError> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
        return Err(CliError::Usage(format!("index {bad} outside dataset of {}", ds.len())));
    }
    Ok(ds.batch(idx))
}

fn transfer(a: &TransferArgs) -> Result<(), CliError> {
    let ckpt = disentangle::load_checkpoint(&a.checkpoint)?;
    let ds = dataset_for(&a.data)?;
    let test = ds.indices(Split::Test);
    let pick = |given: &[usize], skip: usize| -> Vec<usize> {
        if given.is_empty() {
            test.iter().skip(skip).step_by(7).take(4).copied().collect()
        } else {
            given.to_vec()
        }
    };
    let rows = gather(&ds, &pick(&a.rows, 0))?;
    let cols = gather(&ds, &pick(&a.cols, 3))?;
    let grid = eval::attribute_transfer_grid(&ckpt.model, &ds.spec, &rows, &cols, a.block)?;
    let path = out_dir(&a.out)?.join(format!("transfer_block{}.{}", a.block, extension(&ds)));
    grid.compose().save(&path)?;
    println!("wrote {} ({}x{} cells)", path.display(), grid.rows, grid.cols);
    Ok(())
}

fn interpolate(a: &InterpolateArgs) -> Result<(), CliError> {
    let ckpt = disentangle::load_checkpoint(&a.checkpoint)?;
    let ds = dataset_for(&a.data)?;
    let x = gather(&ds, &[a.from, a.to])?;
    let mode = if a.lerp { Interpolation::Lerp } else { Interpolation::Slerp };
    let strip = eval::interpolation_strip(&ckpt.model, &ds.spec, x.row(0), x.row(1), a.block, a.steps, mode)?;
    let path = out_dir(&a.out)?.join(format!(
        "interp_block{}_{}_{}.{}",
        a.block,
        a.from,
        a.to,
        extension(&ds)
    ));
    strip.compose().save(&path)?;
    println!("wrote {} ({} frames)", path.display(), a.steps);
    Ok(())
}

fn extension(ds: &FactorDataset) -> &'static str {
    if ds.spec.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.checkpoint).map_err(io_err(&a.checkpoint))?;
    // full validation first, then the raw container for the tensor table
    disentangle::decode_checkpoint(&bytes)?;
    let container = codec::decode(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    println!("# {} (format version {})", a.checkpoint.display(), container.version);
    let pairs = kv::parse(&container.text).map_err(|e| CliError::Config(e.to_string()))?;
    print!("{}", kv::render(&pairs));
    println!("# tensors");
    let mut total = 0usize;
    for t in &container.tensors {
        total += t.data.len();
        println!("{:<20} {:?}", t.name, t.dims);
    }
    println!("# {} tensors, {} values", container.tensors.len(), total);
    Ok(())
}

