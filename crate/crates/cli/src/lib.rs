//! Command implementations behind the `driftdecomp` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use driftdecomp::coupled::{fit, CoupledConfig, FitReport};
use driftdecomp::flex::{FitStatus, Nonnegativity};
use driftdecomp::io::{
    load_truth, read_json, read_tensor, save_report, save_truth, write_json, write_matrix_csv, write_tensor,
    ModelBundle, TruthFile, DATA_FILE, MODEL_FILE,
};
use driftdecomp::metrics::{cosine, linear_regression, match_components, percent_var, unfold_profiles, Regression};
use driftdecomp::synth::{generate, SynthConfig};
use driftdecomp::tensor::{DenseTensor4, Matrix};
use driftdecomp::Error;
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const EVALUATION_SCHEMA_VERSION: u32 = 1;

pub mod exit {
    pub const CONVERGED: i32 = 0;
    pub const MAX_ITERS: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const IO: i32 = 4;
    pub const CONFIG: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Input(_) => exit::IO,
            CliError::Core(e) => match e {
                Error::Io(_) | Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => exit::IO,
                Error::Config(_) | Error::Dimension(_) | Error::UndefinedInput(_) => exit::CONFIG,
                Error::Divergence { .. }
                | Error::Singular { .. }
                | Error::NotPositiveSemidefinite { .. }
                | Error::AllStartsFailed(_) => exit::DIVERGENCE,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Contents of a `--config` file. Either section may be omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub fit: Option<CoupledConfig>,
}

pub fn load_config(path: &Path) -> CliResult<ConfigFile> {
    if !path.is_file() {
        return Err(CliError::Input(format!("config file {} not found", path.display())));
    }
    let cfg: ConfigFile = read_json(path).map_err(|e| match e {
        Error::Json(j) => CliError::Config(format!("{}: {j}", path.display())),
        other => other.into(),
    })?;
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

/// Parses a `--nonneg` value: which of amplitudes (d), scores (b) and spectra (a)
/// are constrained.
pub fn parse_nonneg(s: &str) -> CliResult<Nonnegativity> {
    match s {
        "d" => Ok(Nonnegativity::default()),
        "bd" => Ok(Nonnegativity {
            scores: true,
            spectra: false,
            amplitudes: true,
        }),
        "bda" => Ok(Nonnegativity {
            scores: true,
            spectra: true,
            amplitudes: true,
        }),
        "none" => Ok(Nonnegativity::none()),
        other => Err(CliError::Config(format!(
            "--nonneg must be one of d, bd, bda, none; got {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimulateArgs {
    pub output: PathBuf,
    pub config: Option<PathBuf>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub dims: [usize; 4],
    pub rank: usize,
    pub seed: u64,
    pub noise_sd: f64,
    pub offset: f64,
    pub warnings: Vec<String>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<SimulateSummary> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?.synth.unwrap_or_default(),
        None => SynthConfig::default(),
    };
    if let Some(r) = args.rank {
        cfg.rank = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let syn = generate(&cfg)?;
    for w in &syn.warnings {
        log::warn!("{w}");
    }
    fs::create_dir_all(&args.output).map_err(Error::from)?;
    write_tensor(&args.output.join(DATA_FILE), &syn.tensor)?;
    let dims = syn.tensor.shape();
    let truth = TruthFile::new(&cfg, dims, &syn.truth, &syn.warnings);
    save_truth(&args.output, &truth, &syn.truth.score_maps)?;
    Ok(SimulateSummary {
        dims,
        rank: cfg.rank,
        seed: cfg.seed,
        noise_sd: syn.truth.noise_sd,
        offset: syn.truth.offset,
        warnings: syn.warnings,
    })
}

#[derive(Debug, Clone, Default)]
pub struct FitArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub config: Option<PathBuf>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub starts: Option<usize>,
    pub burn_iters: Option<usize>,
    pub eps: Option<f64>,
    pub omega: Option<f64>,
    pub max_iters: Option<usize>,
    pub nonneg: Option<String>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl FitArgs {
    pub fn coupled_config(&self) -> CliResult<CoupledConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?.fit.unwrap_or_default(),
            None => CoupledConfig::default(),
        };
        if let Some(v) = self.rank {
            cfg.flex.rank = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.starts {
            cfg.n_starts = v;
        }
        if let Some(v) = self.burn_iters {
            cfg.burn_iters = v;
        }
        if let Some(v) = self.eps {
            cfg.flex.eps = v;
        }
        if let Some(v) = self.omega {
            cfg.omega = v;
        }
        if let Some(v) = self.max_iters {
            cfg.flex.max_iters = v;
        }
        if let Some(v) = &self.nonneg {
            cfg.flex.nonneg = parse_nonneg(v)?;
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Accepts either a tensor file or a directory holding `data.dtf`.
pub fn resolve_data_path(input: &Path) -> CliResult<PathBuf> {
    let path = if input.is_dir() {
        input.join(DATA_FILE)
    } else {
        input.to_path_buf()
    };
    if !path.is_file() {
        return Err(CliError::Input(format!("input tensor {} not found", path.display())));
    }
    Ok(path)
}

/// Runs a fit and writes the model bundle and report. The model is written
/// even when the iteration budget runs out.
pub fn cmd_fit(args: &FitArgs) -> CliResult<FitReport> {
    let data = resolve_data_path(&args.input)?;
    let cfg = args.coupled_config()?;
    let x = read_tensor(&data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let model = pool.install(|| fit(&x, &cfg))?;

    fs::create_dir_all(&args.output).map_err(Error::from)?;
    let bundle = ModelBundle::from_model(&model, x.shape(), &cfg);
    bundle.save(&args.output)?;
    save_report(&args.output, &model.report)?;
    Ok(model.report)
}

pub fn fit_exit_code(report: &FitReport) -> i32 {
    match report.status {
        FitStatus::Converged => exit::CONVERGED,
        FitStatus::MaxIters => exit::MAX_ITERS,
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub model: PathBuf,
    pub truth: PathBuf,
    /// Data tensor for the explained variance; defaults to `data.dtf` beside the truth.
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub rank: usize,
    /// `permutation[r]` is the model component matched to true component `r`.
    pub permutation: Vec<usize>,
    pub spectral_cosines: Vec<f64>,
    pub mean_spectral_cosine: f64,
    /// Mean over samples of the unfolded elution-surface cosines.
    pub score_map_cosines: Vec<f64>,
    /// `[component][sample]` surface cosines.
    pub score_map_cosines_per_sample: Vec<Vec<f64>>,
    pub percent_var: f64,
    /// Estimated against true abundances per component; absent with fewer than
    /// two distinct true abundances.
    pub abundance_regression: Vec<Option<Regression>>,
}

fn profile_column(profiles: &DenseTensor4, r: usize, l: usize) -> Vec<f64> {
    unfold_profiles(profiles, l).column(r).iter().copied().collect()
}

/// Compares a fitted model with ground truth. Components are matched on spectra.
pub fn evaluate(bundle: &ModelBundle, truth: &TruthFile, truth_maps: &DenseTensor4, x: &DenseTensor4) -> CliResult<EvaluationReport> {
    bundle.validate()?;
    let true_spectra = truth.spectra_matrix()?;
    let [ni, nr, nk, nl] = bundle.profiles.shape();
    let [ti, tr, tk, tl] = truth_maps.shape();
    if (ni, nk, nl) != (ti, tk, tl) || nr != tr || true_spectra.shape() != bundle.spectra.shape() {
        return Err(Error::Dimension(format!(
            "model (profiles {:?}, spectra {:?}) does not match truth (maps {:?}, spectra {:?})",
            bundle.profiles.shape(),
            bundle.spectra.shape(),
            truth_maps.shape(),
            true_spectra.shape()
        ))
        .into());
    }
    let xs = x.shape();
    if [xs[0], xs[2], xs[3]] != [ni, nk, nl] || xs[1] != bundle.spectra.nrows() {
        return Err(Error::Dimension(format!("data {xs:?} does not match model profiles {:?}", bundle.profiles.shape())).into());
    }

    let matched = match_components(&true_spectra, &bundle.spectra)?;
    let mut mean_cos = Vec::with_capacity(nr);
    let mut per_sample = Vec::with_capacity(nr);
    let mut regressions = Vec::with_capacity(nr);
    let est_d = &bundle.abundances;
    for (r, &m) in matched.permutation.iter().enumerate() {
        let cos_l: Vec<f64> = (0..nl)
            .map(|l| {
                let t = profile_column(truth_maps, r, l);
                let e = profile_column(&bundle.profiles, m, l);
                cosine(&t, &e).unwrap_or(0.0)
            })
            .collect();
        mean_cos.push(cos_l.iter().sum::<f64>() / nl as f64);
        per_sample.push(cos_l);

        let t: Vec<f64> = truth.abundances[r].clone();
        let e: Vec<f64> = (0..nl).map(|l| est_d[(l, m)]).collect();
        regressions.push(linear_regression(&t, &e).ok());
    }

    let pv = percent_var(x, &bundle.profiles, &bundle.abundance_vectors(), &bundle.spectra)?;
    Ok(EvaluationReport {
        schema_version: EVALUATION_SCHEMA_VERSION,
        rank: nr,
        permutation: matched.permutation,
        spectral_cosines: matched.per_component_cosines,
        mean_spectral_cosine: matched.mean_cosine,
        score_map_cosines: mean_cos,
        score_map_cosines_per_sample: per_sample,
        percent_var: pv,
        abundance_regression: regressions,
    })
}

fn require_model_dir(dir: &Path) -> CliResult<()> {
    if !dir.join(MODEL_FILE).is_file() {
        return Err(CliError::Input(format!(
            "no model found in {} (expected {MODEL_FILE})",
            dir.display()
        )));
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<EvaluationReport> {
    require_model_dir(&args.model)?;
    if !args.truth.exists() {
        return Err(CliError::Input(format!("truth {} not found", args.truth.display())));
    }
    let truth_dir = if args.truth.is_dir() {
        args.truth.clone()
    } else {
        args.truth.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let data = resolve_data_path(args.data.as_deref().unwrap_or(&truth_dir))?;
    let bundle = ModelBundle::load(&args.model)?;
    let truth = load_truth(&args.truth)?;
    let x = read_tensor(&data)?;
    let report = evaluate(&bundle, &truth.file, &truth.score_maps, &x)?;
    if let Some(out) = &args.output {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// File names written by [`cmd_export_plots`].
pub fn surface_name(component: usize, sample: usize, ext: &str) -> String {
    format!("surface_c{component:02}_s{sample:02}.{ext}")
}

pub fn spectrum_name(component: usize, ext: &str) -> String {
    format!("spectrum_c{component:02}.{ext}")
}

pub const ABUNDANCES_CSV: &str = "abundances.csv";
pub const ABUNDANCES_SVG: &str = "abundances.svg";

/// Writes CSV grids and SVG renderings of every elution surface, spectrum and
/// the abundance table. Returns the written paths in a fixed order.
pub fn cmd_export_plots(model_dir: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    require_model_dir(model_dir)?;
    let bundle = ModelBundle::load(model_dir)?;
    bundle.validate()?;
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let [ni, nr, nk, nl] = bundle.profiles.shape();
    let mut written = Vec::new();
    let emit = |written: &mut Vec<PathBuf>, name: String, body: &str| -> CliResult<()> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(Error::from)?;
        written.push(path);
        Ok(())
    };

    let modulation_header: Vec<String> = (0..nk).map(|k| format!("modulation_{k}")).collect();
    for r in 0..nr {
        for l in 0..nl {
            let grid = Matrix::from_fn(ni, nk, |i, k| bundle.profiles.get(i, r, k, l));
            let path = out_dir.join(surface_name(r, l, "csv"));
            write_matrix_csv(&path, &grid, &modulation_header)?;
            written.push(path);
            emit(&mut written, surface_name(r, l, "svg"), &heatmap_svg(&grid, &format!("component {r}, sample {l}")))?;
        }
    }
    for r in 0..nr {
        let col = bundle.spectra.column(r);
        let spec = Matrix::from_fn(col.len(), 2, |j, c| if c == 0 { j as f64 } else { col[j] });
        let path = out_dir.join(spectrum_name(r, "csv"));
        write_matrix_csv(&path, &spec, &["channel".into(), "intensity".into()])?;
        written.push(path);
        let values: Vec<f64> = col.iter().copied().collect();
        emit(&mut written, spectrum_name(r, "svg"), &bar_svg(&values, &format!("spectrum, component {r}")))?;
    }
    let header: Vec<String> = (0..nr).map(|r| format!("component_{r}")).collect();
    let path = out_dir.join(ABUNDANCES_CSV);
    write_matrix_csv(&path, &bundle.abundances, &header)?;
    written.push(path);
    let flat: Vec<f64> = bundle.abundances.row_iter().flat_map(|row| row.iter().copied().collect::<Vec<_>>()).collect();
    emit(&mut written, ABUNDANCES_SVG.into(), &bar_svg(&flat, "abundances, sample-major"))?;
    Ok(written)
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 400.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{}\" viewBox=\"0 0 {SVG_WIDTH} {}\">\n<text x=\"8\" y=\"16\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        SVG_HEIGHT + 24.0,
        SVG_HEIGHT + 24.0,
        escape_xml(title)
    )
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps `t` in [0, 1] to a dark-blue to yellow ramp.
fn ramp(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(20.0, 250.0), lerp(30.0, 230.0), lerp(90.0, 40.0))
}

/// Rows run down the page (acquisitions), columns across (modulations).
fn heatmap_svg(grid: &Matrix, title: &str) -> String {
    let mut out = svg_open(title);
    let (lo, hi) = (grid.min(), grid.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (SVG_WIDTH / grid.ncols() as f64, SVG_HEIGHT / grid.nrows() as f64);
    for i in 0..grid.nrows() {
        for k in 0..grid.ncols() {
            let (r, g, b) = ramp((grid[(i, k)] - lo) / span);
            let _ = writeln!(
                out,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>",
                k as f64 * w,
                24.0 + i as f64 * h,
                w,
                h
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn bar_svg(values: &[f64], title: &str) -> String {
    let mut out = svg_open(title);
    let hi = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let w = SVG_WIDTH / values.len().max(1) as f64;
    for (j, v) in values.iter().enumerate() {
        let bar = SVG_HEIGHT * v.abs() / hi;
        let _ = writeln!(
            out,
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
            j as f64 * w,
            24.0 + SVG_HEIGHT - bar,
            (w * 0.8).max(0.5),
            bar,
            if *v >= 0.0 { "#2a5599" } else { "#b03030" }
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonneg_flags() {
        assert_eq!(parse_nonneg("d").unwrap(), Nonnegativity::default());
        let all = parse_nonneg("bda").unwrap();
        assert!(all.scores && all.spectra && all.amplitudes);
        let bd = parse_nonneg("bd").unwrap();
        assert!(bd.scores && !bd.spectra && bd.amplitudes);
        assert_eq!(parse_nonneg("none").unwrap(), Nonnegativity::none());
        assert_eq!(parse_nonneg("ab").unwrap_err().exit_code(), exit::CONFIG);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let io = CliError::from(Error::Io(std::io::Error::other("x")));
        assert_eq!(io.exit_code(), exit::IO);
        let parse = CliError::from(Error::Parse {
            offset: 3,
            message: "bad".into(),
        });
        assert_eq!(parse.exit_code(), exit::IO);
        let div = CliError::from(Error::Divergence {
            iteration: 4,
            trace: vec![],
        });
        assert_eq!(div.exit_code(), exit::DIVERGENCE);
        assert_eq!(CliError::from(Error::Config("r".into())).exit_code(), exit::CONFIG);
    }

    #[test]
    fn overrides_apply_over_defaults() {
        let args = FitArgs {
            rank: Some(3),
            starts: Some(4),
            burn_iters: Some(7),
            eps: Some(1e-4),
            omega: Some(1.0),
            max_iters: Some(9),
            nonneg: Some("none".into()),
            seed: Some(5),
            ..Default::default()
        };
        let cfg = args.coupled_config().unwrap();
        assert_eq!(cfg.flex.rank, 3);
        assert_eq!(cfg.n_starts, 4);
        assert_eq!(cfg.burn_iters, 7);
        assert_eq!(cfg.flex.eps, 1e-4);
        assert_eq!(cfg.omega, 1.0);
        assert_eq!(cfg.flex.max_iters, 9);
        assert_eq!(cfg.flex.nonneg, Nonnegativity::none());
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn invalid_override_is_config_error() {
        let args = FitArgs {
            rank: Some(0),
            ..Default::default()
        };
        assert_eq!(args.coupled_config().unwrap_err().exit_code(), exit::CONFIG);
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let grid = Matrix::from_fn(3, 4, |i, k| (i * 4 + k) as f64);
        let svg = heatmap_svg(&grid, "a<b");
        assert_eq!(svg.matches("<rect").count(), 12);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("#141e5a") && svg.contains("#fae628"));
    }

    #[test]
    fn file_names_are_zero_padded() {
        assert_eq!(surface_name(1, 2, "csv"), "surface_c01_s02.csv");
        assert_eq!(spectrum_name(10, "svg"), "spectrum_c10.svg");
    }
}
