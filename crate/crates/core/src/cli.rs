//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage, 3 numerical
//! degeneracy, 4 empty input.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::affinity::{self, AffinityMatrix, Kappa};
use crate::feature_io::{self, FeatureIoError, FixtureSpec, PatchGrid, TokenFeatureMap};
use crate::metrics::{self, AblationConfig, CorpusItem};
use crate::pipeline::{self, RunConfig};
use crate::spectral::{self, SegmentLabeling};
use crate::{seed, siamese, Error};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DEGENERATE: u8 = 3;
pub const EXIT_EMPTY: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "simsam", version, about = "Semantic affinity learning and spectral segmentation on patch tokens")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write planted-partition feature files and their ground-truth masks.
    Fixture(FixtureArgs),
    /// Train per image, build the combined affinity and segment.
    Segment(SegmentArgs),
    /// Sweep kappa / normalization over a corpus and write a CSV table.
    Ablate(AblateArgs),
    /// Compare a predicted mask against ground truth.
    Metrics(MetricsArgs),
    /// Write one affinity matrix as an SSAM container or PGM heatmap.
    ExportAffinity(ExportArgs),
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    kappa: f64,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long = "lr", default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long = "eigenvectors", default_value_t = 15)]
    num_eigenvectors: usize,
    #[arg(long = "segments", default_value_t = 15)]
    num_segments: usize,
    #[arg(long, default_value_t = 20)]
    kmeans_k: usize,
    /// Root seed; falls back to SIMSAM_SEED, then 0.
    #[arg(long, env = "SIMSAM_SEED", default_value_t = 0)]
    seed: u64,
    /// Use the raw Gram matrix instead of the mean-subtracted one.
    #[arg(long)]
    no_normalize: bool,
    /// Fiedler-vector threshold for the object cut.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    threshold: f64,
}

impl RunArgs {
    fn to_config(&self) -> Result<RunConfig, CliError> {
        Kappa::new(self.kappa).map_err(|e| CliError::usage(e.to_string()))?;
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(CliError::usage("--iterations and --batch-size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(CliError::usage("--lr must be finite and >= 0"));
        }
        if self.num_eigenvectors < 2 || self.num_segments == 0 || self.kmeans_k == 0 {
            return Err(CliError::usage("--eigenvectors must be >= 2, --segments and --kmeans-k >= 1"));
        }
        Ok(RunConfig {
            kappa: self.kappa,
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            num_eigenvectors: self.num_eigenvectors,
            num_segments: self.num_segments,
            kmeans_k: self.kmeans_k,
            seed: self.seed,
            normalize_vanilla: !self.no_normalize,
            fiedler_threshold: self.threshold,
            ..RunConfig::default()
        })
    }
}

#[derive(Debug, Args)]
struct FixtureArgs {
    /// Patch grid as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    blocks: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, env = "SIMSAM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Number of fixtures; more than one appends `_NNN` and derives per-fixture seeds.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value = "fixture")]
    name: String,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Object,
    Semantic,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(required = true)]
    features: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Object)]
    mode: Mode,
    #[command(flatten)]
    run: RunArgs,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
    /// Also write heatmaps of eigenvectors y_1..y_N.
    #[arg(long, default_value_t = 0)]
    eigvec_pgm: usize,
    /// Also write a heatmap of the combined affinity.
    #[arg(long)]
    affinity_pgm: bool,
    /// Dump trained parameters (debugging only).
    #[arg(long)]
    save_params: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormalizeSet {
    True,
    False,
    Both,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Directory of `<stem>.ssam` files with `<stem>.mask.pgm` ground truth.
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    kappas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = NormalizeSet::True)]
    normalize: NormalizeSet,
    #[command(flatten)]
    run: RunArgs,
    /// CSV destination; stdout when omitted.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportKind {
    Vanilla,
    Unnormalized,
    Semantic,
    Combined,
}

#[derive(Debug, Args)]
struct ExportArgs {
    features: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportKind::Combined)]
    kind: ExportKind,
    #[command(flatten)]
    run: RunArgs,
    /// `.pgm` writes a heatmap, anything else the SSAM container.
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (r, c) = (parse(r)?, parse(c)?);
    if r == 0 || c == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((r, c))
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn at(stage: &str, err: impl Into<Error>) -> Self {
        let err = err.into();
        let code = match &err {
            e if e.is_degenerate() => EXIT_DEGENERATE,
            Error::EmptyCorpus => EXIT_EMPTY,
            Error::FeatureIo(FeatureIoError::InvalidSpec(_) | FeatureIoError::InvalidGrid(_)) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self { code, message: format!("{stage}: {err}") }
    }
}

/// Parses `args` and runs the selected command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fixture(a) => cmd_fixture(&a),
        Command::Segment(a) => cmd_segment(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::ExportAffinity(a) => cmd_export(&a),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError { code: EXIT_FAILURE, message: format!("creating {}: {e}", dir.display()) })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    feature_io::write_atomic(path, text.as_bytes()).map_err(|e| CliError::at("write", e))
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "features".to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_fixture(a: &FixtureArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::usage("--count must be >= 1"));
    }
    let grid = PatchGrid::from_patches(a.grid.0, a.grid.1, a.patch).map_err(|e| CliError::at("fixture", e))?;
    if a.blocks > grid.len() {
        return Err(CliError::usage(format!("--blocks {} exceeds {} patches", a.blocks, grid.len())));
    }
    ensure_dir(&a.out)?;
    for i in 0..a.count {
        let (name, seed) = if a.count == 1 {
            (a.name.clone(), a.seed)
        } else {
            (format!("{}_{i:03}", a.name), seed::derive(a.seed, "fixture", i as u64))
        };
        let spec = FixtureSpec { grid, dim: a.dim, blocks: a.blocks, noise_sigma: a.sigma, seed };
        let (features, mask) = feature_io::synthesize_fixture(&spec).map_err(|e| CliError::at("fixture", e))?;
        feature_io::save_features(&features, a.out.join(format!("{name}.ssam"))).map_err(|e| CliError::at("fixture", e))?;
        feature_io::save_mask(&mask, a.out.join(format!("{name}.mask.pgm"))).map_err(|e| CliError::at("fixture", e))?;
    }
    Ok(())
}

fn params_text(p: &siamese::SiameseParams) -> String {
    let mut out = String::new();
    for (name, values) in [
        ("proj_weight", p.proj_weight.iter().copied().collect::<Vec<_>>()),
        ("proj_bias", p.proj_bias.to_vec()),
        ("pred_weight", p.pred_weight.iter().copied().collect()),
        ("pred_bias", p.pred_bias.to_vec()),
    ] {
        let joined: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{name},{}", joined.join(","));
    }
    out
}

fn write_eigvec_heatmaps(out: &Path, stem: &str, f: &TokenFeatureMap, w: &AffinityMatrix, count: usize) -> Result<(), CliError> {
    let grid = f.grid();
    let m = (count + 1).min(w.n());
    let (_, basis) = spectral::laplacian_eigenbasis(w, m).map_err(|e| CliError::at("eigenvectors", e))?;
    for j in 1..m {
        let bytes = feature_io::heatmap_bytes(basis.eigenvectors.column(j).iter().copied());
        let pgm = feature_io::encode_pgm(grid.cols(), grid.rows(), &bytes);
        feature_io::write_atomic(&out.join(format!("{stem}.ev{j}.pgm")), &pgm).map_err(|e| CliError::at("eigenvectors", e))?;
    }
    Ok(())
}

struct SegmentedImage {
    features: TokenFeatureMap,
    segments: Option<SegmentLabeling>,
    stem: String,
}

fn segment_one(path: &Path, a: &SegmentArgs, cfg: &RunConfig) -> Result<SegmentedImage, CliError> {
    let stem = stem_of(path);
    let features = feature_io::load_features(path).map_err(|e| CliError::at(&format!("load {}", path.display()), e))?;
    let item = pipeline::item_id(&stem);
    let analysis = pipeline::analyze(&features, cfg, item).map_err(|e| CliError::at(&format!("{stem}: training"), e))?;
    write_text(&a.out.join(format!("{stem}.loss.csv")), &analysis.training.loss_csv())?;
    if a.save_params {
        write_text(&a.out.join(format!("{stem}.params.csv")), &params_text(&analysis.training.params))?;
    }
    if a.affinity_pgm {
        analysis
            .combined
            .save_heatmap(a.out.join(format!("{stem}.affinity.pgm")))
            .map_err(|e| CliError::at("affinity export", e))?;
    }
    if a.eigvec_pgm > 0 {
        write_eigvec_heatmaps(&a.out, &stem, &features, &analysis.combined, a.eigvec_pgm)?;
    }
    let segments = match a.mode {
        Mode::Object => {
            let seg = pipeline::object_mask(&features, &analysis.combined, cfg)
                .map_err(|e| CliError::at(&format!("{stem}: object segmentation"), e))?;
            if seg.degenerate {
                return Err(CliError {
                    code: EXIT_DEGENERATE,
                    message: format!("{stem}: object segmentation: degenerate Fiedler vector (lambda_1 == lambda_2)"),
                });
            }
            feature_io::save_mask(&seg.mask, a.out.join(format!("{stem}.mask.pgm"))).map_err(|e| CliError::at("write mask", e))?;
            None
        }
        Mode::Semantic => {
            if cfg.num_eigenvectors > features.len() || cfg.num_segments > features.len() {
                return Err(CliError::usage(format!(
                    "{stem}: --eigenvectors and --segments must not exceed {} patches",
                    features.len()
                )));
            }
            let seg = pipeline::segments(&features, &analysis.combined, cfg, item)
                .map_err(|e| CliError::at(&format!("{stem}: discrete segmentation"), e))?;
            feature_io::save_mask(&seg.to_mask_background_zero(), a.out.join(format!("{stem}.segments.pgm")))
                .map_err(|e| CliError::at("write segments", e))?;
            Some(seg)
        }
    };
    Ok(SegmentedImage { features, segments, stem })
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError { code: EXIT_FAILURE, message: e.to_string() })
}

fn cmd_segment(a: &SegmentArgs) -> Result<(), CliError> {
    let cfg = a.run.to_config()?;
    ensure_dir(&a.out)?;
    let pool = thread_pool(a.jobs)?;
    let images: Vec<SegmentedImage> =
        pool.install(|| a.features.par_iter().map(|p| segment_one(p, a, &cfg)).collect::<Result<_, _>>())?;

    if a.mode == Mode::Semantic {
        let corpus: Vec<_> = images
            .iter()
            .map(|img| (img.features.clone(), img.segments.clone().expect("semantic mode")))
            .collect();
        let points: usize = corpus.iter().map(|(_, s)| s.segment_count() - 1).sum();
        if points < cfg.kmeans_k {
            eprintln!(
                "note: {points} foreground segments across {} image(s) < --kmeans-k {}; dataset clustering skipped",
                corpus.len(),
                cfg.kmeans_k
            );
            return Ok(());
        }
        let masks = pipeline::semantic_masks(&corpus, &cfg).map_err(|e| CliError::at("dataset clustering", e))?;
        for (img, mask) in images.iter().zip(&masks) {
            feature_io::save_mask(mask, a.out.join(format!("{}.semantic.pgm", img.stem)))
                .map_err(|e| CliError::at("write semantic mask", e))?;
        }
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError { code: EXIT_FAILURE, message: format!("reading {}: {e}", dir.display()) })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ssam"))
        .collect();
    paths.sort();
    let mut corpus = Vec::with_capacity(paths.len());
    for path in paths {
        let name = stem_of(&path);
        let features = feature_io::load_features(&path).map_err(|e| CliError::at(&format!("load {}", path.display()), e))?;
        let mask_path = dir.join(format!("{name}.mask.pgm"));
        let truth = feature_io::load_mask(&mask_path, features.grid().patch_size())
            .map_err(|e| CliError::at(&format!("load {}", mask_path.display()), e))?;
        if truth.len() != features.len() {
            return Err(CliError::usage(format!("{name}: mask has {} patches, features {}", truth.len(), features.len())));
        }
        corpus.push(CorpusItem { name, features, truth });
    }
    Ok(corpus)
}

fn cmd_ablate(a: &AblateArgs) -> Result<(), CliError> {
    let run = a.run.to_config()?;
    for &k in &a.kappas {
        Kappa::new(k).map_err(|e| CliError::usage(e.to_string()))?;
    }
    let corpus = load_corpus(&a.corpus)?;
    if corpus.is_empty() {
        return Err(CliError::at("ablate", Error::EmptyCorpus));
    }
    let normalize = match a.normalize {
        NormalizeSet::True => vec![true],
        NormalizeSet::False => vec![false],
        NormalizeSet::Both => vec![true, false],
    };
    let cfg = AblationConfig { kappas: a.kappas.clone(), normalize, run, jobs: a.jobs };
    let rows = metrics::ablation_sweep(&corpus, &cfg).map_err(|e| CliError::at("ablate", e))?;
    let csv = metrics::rows_to_csv(&rows);
    match &a.out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_metrics(a: &MetricsArgs) -> Result<(), CliError> {
    let pred = feature_io::load_mask(&a.pred, 1).map_err(|e| CliError::at("load prediction", e))?;
    let gt = feature_io::load_mask(&a.gt, 1).map_err(|e| CliError::at("load ground truth", e))?;
    let miou = metrics::miou(&pred, &gt).map_err(|e| CliError::usage(e.to_string()))?;
    let report = metrics::evaluate(&pred, &gt).map_err(|e| CliError::usage(e.to_string()))?;
    println!("miou,matched_miou,accuracy,frobenius");
    println!("{miou:.6},{:.6},{:.6},{:.6}", report.miou, report.accuracy, report.frobenius.unwrap_or(f64::NAN));
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    let cfg = a.run.to_config()?;
    let features = feature_io::load_features(&a.features).map_err(|e| CliError::at("load features", e))?;
    let item = pipeline::item_id(&stem_of(&a.features));
    let w = match a.kind {
        ExportKind::Vanilla => affinity::vanilla_affinity(&features, true),
        ExportKind::Unnormalized => affinity::vanilla_affinity(&features, false),
        ExportKind::Semantic | ExportKind::Combined => {
            let analysis = pipeline::analyze(&features, &cfg, item).map_err(|e| CliError::at("training", e))?;
            if a.kind == ExportKind::Semantic {
                analysis.semantic
            } else {
                analysis.combined
            }
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let result = if a.out.extension().is_some_and(|x| x == "pgm") { w.save_heatmap(&a.out) } else { w.save_ssam(&a.out) };
    result.map_err(|e| CliError::at("export", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parser() {
        assert_eq!(parse_grid("8x8"), Ok((8, 8)));
        assert_eq!(parse_grid("3X5"), Ok((3, 5)));
        assert!(parse_grid("8").is_err());
        assert!(parse_grid("0x4").is_err());
    }

    #[test]
    fn run_args_defaults_match_run_config() {
        let cli = Cli::try_parse_from(["simsam", "segment", "a.ssam", "-o", "out", "--seed", "0"]).unwrap();
        let Command::Segment(a) = cli.command else { panic!("segment expected") };
        assert_eq!(a.run.to_config().unwrap(), RunConfig::default());
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        let cli = Cli::try_parse_from(["simsam", "segment", "a.ssam", "-o", "o", "--kappa", "-1"]);
        let Command::Segment(a) = cli.unwrap().command else { panic!() };
        assert_eq!(a.run.to_config().unwrap_err().code, EXIT_USAGE);
        assert!(Cli::try_parse_from(["simsam", "fixture", "--grid", "8", "--dim", "4", "--blocks", "2", "-o", "x"]).is_err());
    }
}
