//! `graphlower`: compile, run, profile, quantize and serve models.
//!
//! A model is a manifest `<stem>.json` with its weight blob `<stem>.bin`
//! alongside. Tensor blobs for inputs and outputs are the little-endian
//! element bytes of each tensor, concatenated in ascending name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use graphlower::format::{load_bundle, load_model_files, pack_tensors, save_bundle, save_model_files, unpack_tensors};
use graphlower::graph::{dump, DumpFormat, Storage};
use graphlower::interp::{compile_with, CompiledFunction};
use graphlower::lowir::dump_ir;
use graphlower::pipeline::{compile_function, prepare};
use graphlower::quantize::{instrument, quantize_function, run_profile, QuantizationSchema, RangeProfile};
use graphlower::runtime::FleetConfig;
use graphlower::{differentiate, Bindings, CompileOptions, FuncId, GradConfig, HostManager, Module, PassId, Tensor, TensorType};

#[derive(Parser)]
#[command(name = "graphlower", version, about = "Neural-network graph compiler and runtime")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphDump {
    Dot,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpKind {
    Text,
    Dot,
    Ir,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a model into a bundle directory.
    Compile {
        model: PathBuf,
        /// Differentiate first and compile the training function.
        #[arg(long)]
        train: bool,
        #[arg(long, default_value_t = 0.01)]
        learning_rate: f32,
        /// Comma-separated graph passes, replacing the default pipeline.
        #[arg(long, value_delimiter = ',')]
        passes: Option<Vec<String>>,
        /// Write the lowered, optimized graph next to the bundle.
        #[arg(long)]
        dump_graph: Option<GraphDump>,
        /// Also write the instruction stream before IR optimization.
        #[arg(long)]
        dump_ir: bool,
        /// Bundle directory; defaults to `<stem>.bundle`.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        function: Option<String>,
    },
    /// Execute a bundle or a model on one input blob.
    Run {
        target: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Output blob; defaults to `<input>.out`.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        function: Option<String>,
    },
    /// Record activation ranges over every `*.bin` input in a directory.
    Profile {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<stem>.profile`.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        function: Option<String>,
    },
    /// Add an int8 version of the function using a range profile.
    Quantize {
        model: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        /// Output manifest; defaults to `<stem>_int8.json`.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        function: Option<String>,
    },
    /// Run a batch of requests through the multi-device runtime.
    Serve {
        model: PathBuf,
        #[arg(long)]
        devices: PathBuf,
        /// Text file listing one input blob per line, relative to the file.
        #[arg(long)]
        requests: PathBuf,
        /// Defaults to `<stem>.serve`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        function: Option<String>,
    },
    /// Print a model graph or the instruction stream of a bundle or model.
    Dump {
        target: PathBuf,
        #[arg(long, value_enum, default_value_t = DumpKind::Text)]
        format: DumpKind,
        #[arg(long)]
        function: Option<String>,
    },
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load(model: &Path) -> Result<Module> {
    load_model_files(model, &blob_path(model)).with_context(|| format!("loading {}", model.display()))
}

/// The named function, or the most recently added one.
fn pick(m: &Module, name: Option<&str>) -> Result<FuncId> {
    match name {
        Some(n) => m.function_by_name(n).ok_or_else(|| anyhow!("no function `{n}`")),
        None => m.functions().last().map(|(f, _)| f).ok_or_else(|| anyhow!("model has no functions")),
    }
}

/// Placeholders the function reads, which is what an input blob holds.
fn graph_inputs(m: &Module, f: FuncId) -> BTreeMap<String, TensorType> {
    let mut out = BTreeMap::new();
    for (_, n) in m.function(f).nodes() {
        for op in n.reads() {
            if let Some(Storage::Placeholder { name, ty, .. }) = op.storage().map(|s| m.storage(s)) {
                out.insert(name.clone(), ty.clone());
            }
        }
    }
    out
}

fn checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn compile_model(m: &mut Module, f: FuncId) -> Result<CompiledFunction> {
    Ok(compile_function(m, f, &CompileOptions::default())?.compiled)
}

fn is_bundle(p: &Path) -> bool {
    p.is_dir() && p.join("bundle.json").exists()
}

fn cmd_compile(
    model: &Path,
    train: bool,
    learning_rate: f32,
    passes: Option<Vec<String>>,
    dump_graph: Option<GraphDump>,
    dump_ir_flag: bool,
    out: Option<PathBuf>,
    function: Option<String>,
) -> Result<()> {
    let mut m = load(model)?;
    let mut f = pick(&m, function.as_deref())?;
    let mut opts = if train { CompileOptions::training() } else { CompileOptions::default() };
    if let Some(ps) = passes {
        opts.passes = ps.iter().filter(|s| !s.is_empty()).map(|s| s.parse::<PassId>()).collect::<graphlower::Result<_>>()?;
    }
    if train {
        let trainables: Vec<String> = m
            .function(f)
            .referenced_storage()
            .into_iter()
            .filter_map(|s| match m.storage(s) {
                Storage::Placeholder { name, trainable: true, .. } => Some(name.clone()),
                _ => None,
            })
            .collect();
        if trainables.is_empty() {
            bail!("--train needs at least one trainable placeholder");
        }
        f = differentiate(&mut m, f, &GradConfig::new(learning_rate, trainables))?.func;
    }
    let art = compile_function(&mut m, f, &opts)?;
    let out = out.unwrap_or_else(|| sibling(model, ".bundle"));
    save_bundle(&out, &art.program, &art.compiled.plan)?;
    if let Some(kind) = dump_graph {
        let (fmt, file) = match kind {
            GraphDump::Dot => (DumpFormat::Dot, "graph.dot"),
            GraphDump::Text => (DumpFormat::Text, "graph.txt"),
        };
        fs::write(out.join(file), dump(&m, f, fmt)?)?;
    }
    if dump_ir_flag {
        fs::write(out.join("unoptimized.ir"), dump_ir(&art.unoptimized))?;
    }
    println!(
        "compiled `{}` into {}: {} instructions, {} bytes of device memory",
        m.function(f).name(),
        out.display(),
        art.program.ir.instrs().count(),
        art.compiled.plan.arena_size
    );
    Ok(())
}

fn cmd_run(target: &Path, input: &Path, repeat: usize, output: Option<PathBuf>, function: Option<String>) -> Result<()> {
    let cf = if is_bundle(target) {
        let (prog, plan) = load_bundle(target)?;
        compile_with(prog.ir, plan, &prog.constants, true)?
    } else {
        let mut m = load(target)?;
        let f = pick(&m, function.as_deref())?;
        compile_model(&mut m, f)?
    };
    let blob = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let bindings = unpack_tensors(&blob, &cf.input_types())?;
    let started = Instant::now();
    let mut first: Option<BTreeMap<String, Tensor>> = None;
    for _ in 0..repeat.max(1) {
        let out = cf.run(&bindings)?;
        match &first {
            None => first = Some(out),
            Some(prev) if *prev != out => bail!("repeated runs disagree"),
            Some(_) => {}
        }
    }
    let outputs = first.expect("at least one run");
    let bytes = pack_tensors(&outputs);
    let path = output.unwrap_or_else(|| sibling(input, ".out"));
    fs::write(&path, &bytes)?;
    let per_run = started.elapsed().as_secs_f64() / repeat.max(1) as f64;
    let names: Vec<&str> = outputs.keys().map(String::as_str).collect();
    eprintln!("{} run(s), {:.3} ms each; outputs {} -> {}", repeat.max(1), per_run * 1e3, names.join(","), path.display());
    println!("sha256 {}", checksum(&bytes));
    Ok(())
}

fn read_inputs(dir: &Path, types: &BTreeMap<String, TensorType>) -> Result<Vec<Bindings>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "bin"));
    files.sort();
    files
        .iter()
        .map(|p| {
            let blob = fs::read(p)?;
            unpack_tensors(&blob, types).with_context(|| format!("in {}", p.display()))
        })
        .collect()
}

fn cmd_profile(model: &Path, data: &Path, output: Option<PathBuf>, function: Option<String>) -> Result<()> {
    let mut m = load(model)?;
    let f = pick(&m, function.as_deref())?;
    let samples = read_inputs(data, &graph_inputs(&m, f))?;
    if samples.is_empty() {
        bail!("no *.bin inputs in {}", data.display());
    }
    prepare(&mut m, f, &CompileOptions::default())?;
    let g = instrument(&mut m, f)?;
    let profile = run_profile(&m, g, &samples)?;
    let path = output.unwrap_or_else(|| model.with_extension("profile"));
    fs::write(&path, profile.to_text())?;
    println!("profiled {} tensors over {} samples into {}", profile.entries.len(), samples.len(), path.display());
    Ok(())
}

fn cmd_quantize(model: &Path, profile: &Path, output: Option<PathBuf>, function: Option<String>) -> Result<()> {
    let mut m = load(model)?;
    let f = pick(&m, function.as_deref())?;
    let text = fs::read_to_string(profile).with_context(|| format!("reading {}", profile.display()))?;
    let profile = RangeProfile::parse(&text)?;
    prepare(&mut m, f, &CompileOptions::default())?;
    let q = quantize_function(&mut m, f, &profile, &QuantizationSchema::default())?;
    let path = output.unwrap_or_else(|| sibling(model, "_int8.json"));
    save_model_files(&m, &path, &blob_path(&path))?;
    println!("wrote `{}` to {}", m.function(q.func).name(), path.display());
    Ok(())
}

fn cmd_serve(model: &Path, devices: &Path, requests: &Path, out_dir: Option<PathBuf>, function: Option<String>) -> Result<()> {
    let mut m = load(model)?;
    let f = pick(&m, function.as_deref())?;
    let fleet = FleetConfig::parse(&fs::read_to_string(devices).with_context(|| format!("reading {}", devices.display()))?)?;
    let list = fs::read_to_string(requests).with_context(|| format!("reading {}", requests.display()))?;
    let base = requests.parent().unwrap_or(Path::new("."));
    let types = graph_inputs(&m, f);
    let inputs: Vec<Bindings> = list
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = base.join(l);
            let blob = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(unpack_tensors(&blob, &types)?)
        })
        .collect::<Result<_>>()?;

    prepare(&mut m, f, &CompileOptions::default())?;
    let host = HostManager::new(&fleet)?;
    let name = m.function(f).name().to_string();
    let dag = host.add_network(&name, &m, f)?;
    eprint!("{}", dag.report());

    let results: Vec<graphlower::Result<BTreeMap<String, Tensor>>> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs.iter().map(|b| s.spawn(|| host.execute(&name, b))).collect();
        handles.into_iter().map(|h| h.join().expect("request thread")).collect()
    });
    let out = out_dir.unwrap_or_else(|| sibling(model, ".serve"));
    fs::create_dir_all(&out)?;
    for (i, r) in results.into_iter().enumerate() {
        let bytes = pack_tensors(&r.with_context(|| format!("request {i}"))?);
        fs::write(out.join(format!("response-{i}.bin")), &bytes)?;
        println!("{i} sha256 {}", checksum(&bytes));
    }
    fs::write(out.join("events.log"), host.event_log().render())?;
    for d in host.device_stats() {
        eprintln!("device {}: {} runs, peak {} of {} bytes", d.id, d.runs, d.peak_used, d.capacity);
    }
    Ok(())
}

fn cmd_dump(target: &Path, format: DumpKind, function: Option<String>) -> Result<()> {
    if is_bundle(target) {
        let (prog, _) = load_bundle(target)?;
        match format {
            DumpKind::Ir => print!("{}", dump_ir(&prog.ir)),
            _ => bail!("a bundle holds only instructions; use --format ir"),
        }
        return Ok(());
    }
    let mut m = load(target)?;
    let f = pick(&m, function.as_deref())?;
    match format {
        DumpKind::Text => print!("{}", dump(&m, f, DumpFormat::Text)?),
        DumpKind::Dot => print!("{}", dump(&m, f, DumpFormat::Dot)?),
        DumpKind::Ir => {
            let art = compile_function(&mut m, f, &CompileOptions::default())?;
            print!("{}", dump_ir(&art.program.ir));
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Compile { model, train, learning_rate, passes, dump_graph, dump_ir, out, function } => {
            cmd_compile(&model, train, learning_rate, passes, dump_graph, dump_ir, out, function)
        }
        Cmd::Run { target, input, repeat, output, function } => cmd_run(&target, &input, repeat, output, function),
        Cmd::Profile { model, data, output, function } => cmd_profile(&model, &data, output, function),
        Cmd::Quantize { model, profile, output, function } => cmd_quantize(&model, &profile, output, function),
        Cmd::Serve { model, devices, requests, out_dir, function } => cmd_serve(&model, &devices, &requests, out_dir, function),
        Cmd::Dump { target, format, function } => cmd_dump(&target, format, function),
    }
}
