//! The end-to-end compilation flow for one function.
//!
//! 1. verify the (loaded or constructed) graph
//! 2. optionally differentiate, which callers do beforehand with
//!    [`crate::differentiate`] since it yields a new function
//! 3. graph optimizations
//! 4. node lowering
//! 5. graph optimizations again, over the lowered nodes
//! 6. memory-minimizing schedule
//! 7. instruction generation
//! 8. instruction-level optimizations
//! 9. memory planning and backend compilation

use crate::error::Result;
use crate::graph::{verify_or_err, FuncId, Module, NodeId};
use crate::interp::{compile_with, CompiledFunction};
use crate::lowering::{lower, LoweringOptions, Mode};
use crate::lowir::{allocate, irgen, optimize_ir, schedule, IRFunction, IrProgram};
use crate::opt::{optimize, PassId, DEFAULT_PIPELINE};

#[derive(Clone, Debug)]
pub struct CompileOptions {
    pub mode: Mode,
    pub passes: Vec<PassId>,
    pub optimize_ir: bool,
    pub fuse: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { mode: Mode::Inference, passes: DEFAULT_PIPELINE.to_vec(), optimize_ir: true, fuse: true }
    }
}

impl CompileOptions {
    pub fn training() -> Self {
        CompileOptions { mode: Mode::Training, ..Self::default() }
    }
}

/// Everything produced along the way.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub order: Vec<NodeId>,
    /// Program straight out of instruction generation.
    pub unoptimized: IRFunction,
    /// Program as compiled, with its constant payloads.
    pub program: IrProgram,
    pub compiled: CompiledFunction,
}

/// Run the graph-level stages on `f` in place: optimize, lower, optimize.
pub fn prepare(m: &mut Module, f: FuncId, opts: &CompileOptions) -> Result<()> {
    verify_or_err(m, f)?;
    optimize(m, f, &opts.passes)?;
    lower(m, f, &LoweringOptions::new(opts.mode))?;
    optimize(m, f, &opts.passes)?;
    Ok(())
}

/// Compile a function that already went through [`prepare`].
pub fn compile_prepared(m: &Module, f: FuncId, opts: &CompileOptions) -> Result<Artifacts> {
    let order = schedule(m.function(f))?;
    let generated = irgen(m, f, &order, opts.mode == Mode::Training)?;
    let unoptimized = generated.ir.clone();
    let ir = if opts.optimize_ir { optimize_ir(&generated.ir) } else { generated.ir };
    let plan = allocate(&ir);
    let compiled = compile_with(ir.clone(), plan, &generated.constants, opts.fuse)?;
    Ok(Artifacts { order, unoptimized, program: IrProgram { ir, constants: generated.constants }, compiled })
}

/// All stages; `f` is rewritten in place by the graph-level ones.
pub fn compile_function(m: &mut Module, f: FuncId, opts: &CompileOptions) -> Result<Artifacts> {
    prepare(m, f, opts)?;
    compile_prepared(m, f, opts)
}
