//! Textual and Graphviz dumps of a function.
//!
//! Text grammar, one node per line in topological order:
//!
//! ```text
//! function <name>
//!   %<id> = <Kind>(<operand>, ...) {<attrs>} [if <pred>] : <type>
//! ```
//!
//! Operands are `%<id>` for nodes and `@<name>` for module storage. The
//! `{attrs}`, `if` and `: <type>` parts are omitted when empty.

use std::fmt::Write;

use super::{topological_order, verify_or_err, FuncId, Module, Operand};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpFormat {
    Text,
    Dot,
}

pub fn dump(m: &Module, f: FuncId, format: DumpFormat) -> Result<String> {
    verify_or_err(m, f)?;
    match format {
        DumpFormat::Text => dump_text(m, f),
        DumpFormat::Dot => dump_dot(m, f),
    }
}

fn dump_text(m: &Module, fid: FuncId) -> Result<String> {
    let f = m.function(fid);
    let mut s = format!("function {}\n", f.name());
    for id in topological_order(f)? {
        let n = f.node(id);
        let ops: Vec<String> = n.inputs.iter().map(|&o| m.operand_name(o)).collect();
        write!(s, "  {id} = {}({})", n.kind(), ops.join(", ")).unwrap();
        let attrs = n.op.attr_string();
        if !attrs.is_empty() {
            write!(s, " {{{attrs}}}").unwrap();
        }
        if let Some(p) = n.predicate {
            write!(s, " if {}", m.operand_name(p)).unwrap();
        }
        if let Some(t) = &n.ty {
            write!(s, " : {t}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn dump_dot(m: &Module, fid: FuncId) -> Result<String> {
    let f = m.function(fid);
    let mut s = format!("digraph \"{}\" {{\n  rankdir=TB;\n", escape(f.name()));
    for sid in f.referenced_storage() {
        let st = m.storage(sid);
        let kind = if st.is_constant() { "Constant" } else { "Placeholder" };
        writeln!(
            s,
            "  s{} [shape=box, label=\"{kind} {}\\n{}\"];",
            sid.0,
            escape(st.name()),
            st.ty()
        )
        .unwrap();
    }
    let order = topological_order(f)?;
    for &id in &order {
        let n = f.node(id);
        let mut label = format!("{} {}", n.kind(), id);
        let attrs = n.op.attr_string();
        if !attrs.is_empty() {
            label.push_str(&format!("\\n{attrs}"));
        }
        if let Some(t) = &n.ty {
            label.push_str(&format!("\\n{t}"));
        }
        writeln!(s, "  n{} [label=\"{}\"];", id.0, escape(&label)).unwrap();
    }
    let name = |o: Operand| match o {
        Operand::Node(n) => format!("n{}", n.0),
        Operand::Storage(st) => format!("s{}", st.0),
    };
    for &id in &order {
        let n = f.node(id);
        for (i, &inp) in n.inputs.iter().enumerate() {
            writeln!(s, "  {} -> n{} [label=\"{i}\"];", name(inp), id.0).unwrap();
        }
        if let Some(p) = n.predicate {
            writeln!(s, "  {} -> n{} [style=dashed, label=\"pred\"];", name(p), id.0).unwrap();
        }
    }
    s.push_str("}\n");
    Ok(s)
}
