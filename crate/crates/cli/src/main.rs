use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use specxplain_core::attrib::{
    conductance, deeplift_rescale, integrated_gradients, occlusion, AttributionMap, Baseline,
    MaskConfig, PathConfig, Rule,
};
use specxplain_core::formats::{
    self, read_attribution, read_model, read_spectrogram, write_atomic, FileFormat,
};
use specxplain_core::net::init;
use specxplain_core::pipeline::{
    conductance_regions, default_presence_threshold, extract_segment, feature_report, run_pipeline,
    ExplainMethod, PipelineConfig, SegmentConfig, Spectrogram,
};
use specxplain_core::validate::{axiom_report, random_probes};
use specxplain_core::{Error, Model, Target, Tensor};

#[derive(Parser)]
#[command(name = "specxplain", version, about = "Attribution maps for spectrogram CNNs")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sliding-mask occlusion sensitivity.
    Occlusion(OcclusionArgs),
    /// Integrated gradients.
    Ig(GradArgs),
    /// DeepLIFT (Rescale rule).
    Deeplift(GradArgs),
    /// Conductance of a hidden layer.
    Conductance(ConductanceArgs),
    /// Segment, explain every feature, average and report.
    Pipeline(PipelineArgs),
    /// Rebuild the feature report from a pipeline output directory.
    Report(ReportArgs),
    /// Axiom checks on a model.
    Validate(ValidateArgs),
    /// Render an ATT1 map as a PPM heatmap.
    Render(RenderArgs),
    /// Write a deterministic demo model.
    GenModel(GenModelArgs),
}

#[derive(Args)]
struct Inputs {
    /// Spectrogram, `.csv` or SPG1 binary.
    #[arg(long)]
    spec: PathBuf,
    /// Model manifest.
    #[arg(long)]
    model: PathBuf,
    /// `feature:K` or `head`.
    #[arg(long, default_value = "feature:0")]
    target: Target,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OcclusionArgs {
    #[command(flatten)]
    io: Inputs,
    /// Mask size as HxW.
    #[arg(long, value_parser = parse_pair)]
    mask: [usize; 2],
    /// Stride as HxW.
    #[arg(long, value_parser = parse_pair)]
    stride: [usize; 2],
    #[arg(long, default_value_t = 0.0)]
    fill: f32,
}

#[derive(Args)]
struct PathArgs {
    /// `zero`, `const:V` or `file:P`.
    #[arg(long, default_value = "zero")]
    baseline: String,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Trapezoid)]
    rule: RuleArg,
}

#[derive(Args)]
struct GradArgs {
    #[command(flatten)]
    io: Inputs,
    #[command(flatten)]
    path: PathArgs,
    /// Explain only the segment centred on this column.
    #[arg(long)]
    column: Option<usize>,
}

#[derive(Args)]
struct ConductanceArgs {
    #[command(flatten)]
    grad: GradArgs,
    /// Activation index; 0 is the input.
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 4)]
    bands: usize,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Ig)]
    method: MethodArg,
    #[arg(long, default_value_t = 15)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    hop: usize,
    #[command(flatten)]
    path: PathArgs,
    /// Presence threshold on per-segment L1 mass (default 1e-6 * 48 * width).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 4)]
    bands: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `pipeline`.
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 4)]
    bands: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Manifest path, or `linear-fixture` / `nisqa-like`.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    att: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Segment width the model accepts.
    #[arg(long, default_value_t = 15)]
    width: usize,
    /// Omit the scalar head.
    #[arg(long)]
    no_head: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Trapezoid,
    Midpoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ig,
    Deeplift,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    NisqaLike,
    Linear,
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let n = |v: &str| v.parse::<usize>().map_err(|_| format!("bad size `{v}` in `{s}`"));
    Ok([n(h)?, n(w)?])
}

impl PathArgs {
    fn config(&self) -> PathConfig {
        let rule = match self.rule {
            RuleArg::Trapezoid => Rule::Trapezoid,
            RuleArg::Midpoint => Rule::Midpoint,
        };
        PathConfig::new(self.steps, rule)
    }

    fn baseline(&self) -> anyhow::Result<Baseline> {
        let b = self.baseline.as_str();
        if b == "zero" {
            return Ok(Baseline::Zero);
        }
        if let Some(v) = b.strip_prefix("const:") {
            let v: f32 = v.parse().with_context(|| format!("bad baseline constant `{v}`"))?;
            if !v.is_finite() {
                bail!(Error::NonFiniteValue("baseline constant".into()));
            }
            return Ok(Baseline::Constant(v));
        }
        if let Some(p) = b.strip_prefix("file:") {
            let p = Path::new(p);
            return Ok(Baseline::Tensor(read_spectrogram(p, FileFormat::from_path(p))?.values().clone()));
        }
        bail!(Error::Format(format!("baseline must be zero, const:V or file:P, got `{b}`")))
    }
}

fn load_spec(path: &Path) -> anyhow::Result<Spectrogram> {
    read_spectrogram(path, FileFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    read_model(path).with_context(|| format!("reading model {}", path.display()))
}

/// `feat{K}` or `head`.
fn stem(target: Target) -> String {
    match target {
        Target::Feature(k) => format!("feat{k}"),
        Target::Head => "head".into(),
    }
}

/// Files are rendered in memory first so a failure leaves nothing behind.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), files: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn add_map(&mut self, map: &AttributionMap) {
        let s = stem(map.target);
        self.add(format!("{s}.att.bin"), formats::encode_attribution(map));
        if map.values.shape().len() >= 2 {
            self.add(format!("{s}.ppm"), formats::heatmap_ppm(map));
        }
    }

    fn commit(self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        for (name, bytes) in &self.files {
            write_atomic(&self.dir.join(name), bytes)?;
        }
        Ok(())
    }
}

/// The model-shaped input: the whole spectrogram, or one centred segment of it.
fn model_input(model: &Model, spec: &Spectrogram, column: Option<usize>) -> anyhow::Result<Option<(Tensor, Option<usize>)>> {
    let width = *model.input_shape().last().unwrap();
    match column {
        Some(c) if c >= spec.width() => bail!(Error::PositionOutOfRange(c)),
        Some(c) => {
            let data = extract_segment(spec.values(), c, width);
            Ok(Some((Tensor::from_f64(model.input_shape(), &data)?, Some(c))))
        }
        None if spec.values().shape() == model.input_shape() => Ok(Some((spec.values().clone(), None))),
        None => Ok(None),
    }
}

fn resolve_baseline(baseline: &Baseline, input: &Tensor, column: Option<usize>) -> anyhow::Result<Tensor> {
    if let (Baseline::Tensor(t), Some(c)) = (baseline, column) {
        if t.shape() != input.shape() {
            let width = *input.shape().last().unwrap();
            return Ok(Tensor::from_f64(input.shape(), &extract_segment(t, c, width))?);
        }
    }
    Ok(baseline.resolve(input.shape())?)
}

fn cmd_occlusion(a: &OcclusionArgs) -> anyhow::Result<()> {
    let spec = load_spec(&a.io.spec)?;
    let model = load_model(&a.io.model)?;
    let cfg = MaskConfig::new(a.mask, a.stride).with_fill(a.fill);
    let result = occlusion(&model, spec.values(), &cfg, a.io.target)?;
    let mut grid = String::from("row_start,col_start,influence\n");
    for (i, &r) in result.row_starts.iter().enumerate() {
        for (j, &c) in result.col_starts.iter().enumerate() {
            grid.push_str(&format!("{r},{c},{:?}\n", result.influence[i * result.col_starts.len() + j]));
        }
    }
    let mut out = Outputs::new(&a.io.out);
    out.add_map(&result.map);
    out.add("grid.csv", grid.into_bytes());
    out.commit()?;
    eprintln!("{} mask evaluations", result.evaluations());
    Ok(())
}

fn cmd_gradient(a: &GradArgs, method: ExplainMethod) -> anyhow::Result<()> {
    let spec = load_spec(&a.io.spec)?;
    let model = load_model(&a.io.model)?;
    let baseline = a.path.baseline()?;
    let path = a.path.config();
    let map = match model_input(&model, &spec, a.column)? {
        Some((x, column)) => {
            let b = resolve_baseline(&baseline, &x, column)?;
            match method {
                ExplainMethod::Ig => integrated_gradients(&model, &x, &b, a.io.target, path)?,
                ExplainMethod::DeepLift => deeplift_rescale(&model, &x, &b, a.io.target)?,
            }
        }
        None => {
            let width = *model.input_shape().last().unwrap();
            let cfg = PipelineConfig {
                segment: SegmentConfig::new(width, 1),
                method,
                path,
                baseline,
                targets: Some(vec![a.io.target]),
                ..PipelineConfig::default()
            };
            run_pipeline(&model, &spec, &cfg)?.full_maps.remove(0)
        }
    };
    let mut out = Outputs::new(&a.io.out);
    out.add_map(&map);
    out.commit()?;
    if let Some(gap) = map.completeness_gap {
        eprintln!("completeness gap {gap:e}");
    }
    Ok(())
}

fn cmd_conductance(a: &ConductanceArgs) -> anyhow::Result<()> {
    let g = &a.grad;
    let spec = load_spec(&g.io.spec)?;
    let model = load_model(&g.io.model)?;
    let baseline = g.path.baseline()?;
    let path = g.path.config();
    let Some((x, column)) = model_input(&model, &spec, g.column)? else {
        bail!(Error::Shape(format!(
            "spectrogram is {:?} but the model takes {:?}; pass --column",
            spec.values().shape(),
            model.input_shape()
        )));
    };
    let b = resolve_baseline(&baseline, &x, column)?;
    let map = conductance(&model, &x, &b, a.layer, g.io.target, path)?;
    let mut out = Outputs::new(&g.io.out);
    out.add_map(&map);
    let is_conv = a.layer > 0
        && matches!(model.layers().get(a.layer - 1), Some(specxplain_core::net::Layer::Conv2d(_)));
    if is_conv {
        let table = conductance_regions(&model, &x, &b, a.layer, g.io.target, a.bands, path)?;
        out.add("regions.json", pretty(&table)?);
    }
    out.commit()?;
    if let Some(gap) = map.completeness_gap {
        eprintln!("completeness gap {gap:e}");
    }
    Ok(())
}

fn pretty<T: serde::Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn l1_csv(targets: &[Target], positions: &[usize], l1: &[Vec<f64>]) -> Vec<u8> {
    let mut s = String::from("position");
    for &t in targets {
        s.push(',');
        s.push_str(&stem(t));
    }
    s.push('\n');
    for (p, row) in positions.iter().zip(l1) {
        s.push_str(&p.to_string());
        for v in row {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn cmd_pipeline(a: &PipelineArgs) -> anyhow::Result<()> {
    let spec = load_spec(&a.spec)?;
    let model = load_model(&a.model)?;
    let cfg = PipelineConfig {
        segment: SegmentConfig::new(a.width, a.hop),
        method: match a.method {
            MethodArg::Ig => ExplainMethod::Ig,
            MethodArg::Deeplift => ExplainMethod::DeepLift,
        },
        path: a.path.config(),
        baseline: a.path.baseline()?,
        targets: None,
        presence_threshold: a.threshold,
        bands: a.bands,
    };
    let result = run_pipeline(&model, &spec, &cfg)?;
    let targets: Vec<Target> = result.full_maps.iter().map(|m| m.target).collect();
    let mut out = Outputs::new(&a.out);
    for map in &result.full_maps {
        out.add_map(map);
    }
    out.add("segment_l1.csv", l1_csv(&targets, &result.positions, &result.segment_l1));
    out.add("report.json", pretty(&result.report)?);
    out.commit()?;
    eprintln!("{} segments, {} features", result.positions.len(), targets.len());
    Ok(())
}

fn read_l1_csv(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow!(Error::Format("segment_l1.csv is empty".into())))?
        .split(',')
        .skip(1)
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row = l
                .split(',')
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("segment_l1.csv: bad value `{v}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != header.len() {
                return Err(Error::Format("segment_l1.csv: ragged row".into()));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok((header, rows))
}

fn cmd_report(a: &ReportArgs) -> anyhow::Result<()> {
    let (names, l1) = read_l1_csv(&a.maps.join("segment_l1.csv"))?;
    let maps = names
        .iter()
        .map(|n| read_attribution(&a.maps.join(format!("{n}.att.bin"))).with_context(|| format!("reading {n}.att.bin")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    // Without --threshold, reuse the one the pipeline recorded.
    let threshold = match a.threshold {
        Some(t) => t,
        None => fs::read_to_string(a.maps.join("report.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v["threshold"].as_f64())
            .unwrap_or_else(|| default_presence_threshold(15)),
    };
    let report = feature_report(&maps, &l1, threshold, a.bands)?;
    let bytes = pretty(&report)?;
    write_atomic(&a.out, &bytes)?;
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> anyhow::Result<()> {
    let model = match a.model.as_str() {
        "linear-fixture" | "linear" => init::linear_fixture(),
        "nisqa-like" => init::nisqa_like(a.seed, 15, true),
        path => load_model(Path::new(path))?,
    };
    let shape = model.input_shape().to_vec();
    // Nonnegative probe, like a magnitude spectrogram.
    let probe = random_probes(&shape, 1, a.seed).remove(0);
    let input = Tensor::from_vec(&shape, probe.data().iter().map(|v| v.abs()).collect())?;
    let baseline = Tensor::zeros(&shape)?;
    let report = axiom_report(&model, &input, &baseline, PathConfig::trapezoid(a.steps), a.seed)?;
    write_atomic(&a.out, &pretty(&report)?)?;
    for c in report.failures() {
        eprintln!("FAIL {} / {} on {}: {:e} > {:e}", c.axiom, c.method, c.subject, c.measured, c.limit);
    }
    eprintln!("{}", if report.all_pass { "all axioms pass" } else { "some axioms fail" });
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> anyhow::Result<()> {
    let map = read_attribution(&a.att).with_context(|| format!("reading {}", a.att.display()))?;
    formats::render_heatmap(&map, &a.out)?;
    Ok(())
}

fn cmd_gen_model(a: &GenModelArgs) -> anyhow::Result<()> {
    let model = match a.preset {
        Preset::NisqaLike => {
            if a.width < 4 {
                bail!(Error::Domain(format!("width {} is below the minimum of 4", a.width)));
            }
            init::nisqa_like(a.seed, a.width, !a.no_head)
        }
        Preset::Linear => init::linear_fixture().with_seed(Some(a.seed)),
    };
    formats::write_model(&model, &a.out)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Occlusion(a) => cmd_occlusion(a),
        Command::Ig(a) => cmd_gradient(a, ExplainMethod::Ig),
        Command::Deeplift(a) => cmd_gradient(a, ExplainMethod::DeepLift),
        Command::Conductance(a) => cmd_conductance(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Report(a) => cmd_report(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Render(a) => cmd_render(a),
        Command::GenModel(a) => cmd_gen_model(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_internal));
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}
