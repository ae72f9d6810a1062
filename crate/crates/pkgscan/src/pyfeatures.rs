//! Python parsing and the sixteen behavioral features.

use std::collections::{BTreeMap, BTreeSet};

use pkgscan_core::features::{FeatureCode, FeatureVector, SignatureManifest};
use rustpython_ast::Visitor;
use rustpython_parser::ast::{self, Constant, Expr, Stmt};
use rustpython_parser::Parse;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}:{line}: {message}")]
pub struct ParseFailure {
    pub path: String,
    pub line: usize,
    pub message: String,
}

/// A parsed module.
#[derive(Debug, Clone)]
pub struct SyntaxTree {
    pub body: Vec<Stmt>,
}

impl SyntaxTree {
    pub fn statement_count(&self) -> usize {
        self.body.len()
    }
}

pub fn parse_source(source: &str, path: &str) -> Result<SyntaxTree, ParseFailure> {
    ast::Suite::parse(source, path).map(|body| SyntaxTree { body }).map_err(|e| {
        let offset = usize::from(e.offset).min(source.len());
        ParseFailure {
            path: path.to_string(),
            line: source.as_bytes()[..offset].iter().filter(|&&b| b == b'\n').count() + 1,
            message: e.error.to_string(),
        }
    })
}

/// Parses and extracts in one step.
pub fn source_features(source: &str, path: &str, manifest: &SignatureManifest) -> Result<FeatureVector, ParseFailure> {
    Ok(extract_features(&parse_source(source, path)?, manifest))
}

/// Name bindings introduced by imports anywhere in the module, mapped to
/// every dotted target they were bound to.
#[derive(Default)]
struct Bindings(BTreeMap<String, BTreeSet<String>>);

impl Visitor for Bindings {
    fn visit_stmt_import(&mut self, node: ast::StmtImport) {
        for alias in node.names {
            let full = alias.name.as_str();
            let (bound, target) = match &alias.asname {
                Some(a) => (a.as_str().to_string(), full.to_string()),
                None => {
                    let head = full.split('.').next().unwrap_or(full);
                    (head.to_string(), head.to_string())
                }
            };
            self.0.entry(bound).or_default().insert(target);
        }
    }

    fn visit_stmt_import_from(&mut self, node: ast::StmtImportFrom) {
        if node.level.is_some_and(|l| l.to_u32() > 0) {
            return;
        }
        let Some(module) = node.module else { return };
        for alias in node.names {
            if alias.name.as_str() == "*" {
                continue;
            }
            let bound = alias.asname.as_ref().unwrap_or(&alias.name).as_str().to_string();
            self.0.entry(bound).or_default().insert(format!("{}.{}", module.as_str(), alias.name.as_str()));
        }
    }
}

fn dotted(e: &Expr) -> Option<Vec<&str>> {
    match e {
        Expr::Name(n) => Some(vec![n.id.as_str()]),
        Expr::Attribute(a) => {
            let mut parts = dotted(&a.value)?;
            parts.push(a.attr.as_str());
            Some(parts)
        }
        _ => None,
    }
}

fn start(range: &ast::text_size::TextRange) -> usize {
    usize::from(range.start())
}

fn collect_strings<'e>(e: &'e Expr, out: &mut Vec<&'e str>) {
    match e {
        Expr::Constant(c) => {
            if let Constant::Str(s) = &c.value {
                out.push(s);
            }
        }
        Expr::List(l) => l.elts.iter().for_each(|x| collect_strings(x, out)),
        Expr::Tuple(t) => t.elts.iter().for_each(|x| collect_strings(x, out)),
        Expr::BinOp(b) => {
            collect_strings(&b.left, out);
            collect_strings(&b.right, out);
        }
        Expr::JoinedStr(j) => j.values.iter().for_each(|x| collect_strings(x, out)),
        _ => {}
    }
}

struct Extractor<'m> {
    manifest: &'m SignatureManifest,
    bindings: BTreeMap<String, BTreeSet<String>>,
    fv: FeatureVector,
}

impl Extractor<'_> {
    /// Every dotted name `parts` may denote: through each import binding of
    /// its head, and the literal spelling itself.
    fn resolve(&self, parts: &[&str]) -> Vec<String> {
        let rest = parts[1..].join(".");
        let join = |head: &str| if rest.is_empty() { head.to_string() } else { format!("{head}.{rest}") };
        let mut out: Vec<String> = self.bindings.get(parts[0]).into_iter().flatten().map(|t| join(t)).collect();
        let literal = join(parts[0]);
        if !out.contains(&literal) {
            out.push(literal);
        }
        out
    }

    fn is_bound(&self, name: &str) -> bool {
        self.bindings.contains_key(name)
    }

    fn last(name: &str) -> &str {
        name.rsplit('.').next().unwrap_or(name)
    }

    fn environment_access(&self, qualified: &str) -> bool {
        let mut parts = qualified.split('.');
        let top = parts.next().unwrap_or_default();
        qualified.contains('.')
            && self.manifest.os_modules.contains(top)
            && self.manifest.environment_attributes.contains(Self::last(qualified))
    }

    fn call(&mut self, call: &ast::ExprCall) {
        let at = start(&call.range);
        let m = self.manifest;
        let mut command_call = false;
        if let Some(parts) = dotted(&call.func) {
            let bare = parts.len() == 1 && !self.is_bound(parts[0]);
            if bare && m.file_builtins.contains(parts[0]) {
                self.fv.record(FeatureCode::R4, at);
            }
            if bare && m.eval_builtins.contains(parts[0]) {
                self.fv.record(FeatureCode::P4, at);
            }
            for q in self.resolve(&parts) {
                if !q.contains('.') {
                    continue;
                }
                let top = q.split('.').next().unwrap_or_default();
                if m.credential_modules.contains(top) {
                    self.fv.record(FeatureCode::R5, at);
                }
                if let Some(import) = m.classify_module(&q) {
                    if let Some(code) = import.call_code() {
                        self.fv.record(code, at);
                    }
                    command_call |= import == FeatureCode::P1
                        || (import == FeatureCode::R1 && m.os_command_functions.contains(Self::last(&q)));
                }
            }
        }
        if command_call {
            let mut strings = Vec::new();
            call.args.iter().for_each(|a| collect_strings(a, &mut strings));
            let shell_kw = call.keywords.iter().any(|k| {
                k.arg.as_ref().is_some_and(|a| a.as_str() == "shell")
                    && matches!(&k.value, Expr::Constant(c) if matches!(c.value, Constant::Bool(true)))
            });
            if shell_kw || strings.iter().any(|s| m.is_shell_argument(s)) {
                self.fv.record(FeatureCode::P3, at);
            }
        }
    }

    fn literal(&mut self, text: &str, at: usize) {
        for code in self.manifest.literal_codes(text) {
            self.fv.record(code, at);
        }
    }
}

impl Visitor for Extractor<'_> {
    fn visit_stmt_import(&mut self, node: ast::StmtImport) {
        for alias in &node.names {
            if let Some(code) = self.manifest.classify_module(alias.name.as_str()) {
                self.fv.record(code, start(&alias.range));
            }
        }
    }

    fn visit_stmt_import_from(&mut self, node: ast::StmtImportFrom) {
        if node.level.is_some_and(|l| l.to_u32() > 0) {
            return;
        }
        if let Some(module) = &node.module {
            if let Some(code) = self.manifest.classify_module(module.as_str()) {
                self.fv.record(code, start(&node.range));
            }
        }
    }

    fn visit_expr_call(&mut self, node: ast::ExprCall) {
        self.call(&node);
        self.generic_visit_expr_call(node);
    }

    fn visit_expr_attribute(&mut self, node: ast::ExprAttribute) {
        if let Some(parts) = dotted(&node.value) {
            let mut full = parts;
            full.push(node.attr.as_str());
            if self.resolve(&full).iter().any(|q| self.environment_access(q)) {
                self.fv.record(FeatureCode::R5, start(&node.range));
            }
        }
        self.generic_visit_expr_attribute(node);
    }

    fn visit_expr_name(&mut self, node: ast::ExprName) {
        if let Some(targets) = self.bindings.get(node.id.as_str()) {
            if targets.iter().any(|q| self.environment_access(q)) {
                self.fv.record(FeatureCode::R5, start(&node.range));
            }
        }
    }

    fn visit_expr_constant(&mut self, node: ast::ExprConstant) {
        let at = start(&node.range);
        match &node.value {
            Constant::Str(s) => self.literal(s, at),
            Constant::Bytes(b) => self.literal(&String::from_utf8_lossy(b), at),
            _ => {}
        }
    }
}

/// Feature vector of a parsed module. Imports are resolved file-wide, so a
/// call is attributed to a module whether the import precedes it or not.
pub fn extract_features(tree: &SyntaxTree, manifest: &SignatureManifest) -> FeatureVector {
    let mut bindings = Bindings::default();
    for stmt in tree.body.clone() {
        bindings.visit_stmt(stmt);
    }
    let mut ex = Extractor { manifest, bindings: bindings.0, fv: FeatureVector::new() };
    for stmt in tree.body.clone() {
        ex.visit_stmt(stmt);
    }
    ex.fv
}

#[cfg(test)]
mod tests {
    use super::*;
    use FeatureCode::*;

    fn codes(src: &str) -> Vec<FeatureCode> {
        source_features(src, "t.py", &SignatureManifest::default()).unwrap().codes_by_occurrence()
    }

    #[test]
    fn setup_example_order() {
        assert_eq!(codes("import subprocess\nimport os\nsubprocess.Popen([\"ls\"])\n"), [P1, R1, P2]);
    }

    #[test]
    fn empty_module() {
        assert!(source_features("", "t.py", &SignatureManifest::default()).unwrap().is_empty());
    }

    #[test]
    fn aliases_and_from_imports() {
        assert_eq!(codes("import os as o\no.system('x')"), [R1, R2]);
        assert_eq!(codes("from subprocess import Popen\nPopen(['ls'])"), [P1, P2]);
        assert_eq!(codes("import os.path\nos.path.join('a')"), [R1, R2]);
        assert_eq!(codes("from os import environ\nenviron['HOME']"), [R1, R5]);
    }

    #[test]
    fn shell_calls() {
        assert_eq!(codes("import subprocess\nsubprocess.call('ls', shell=True)"), [P1, P2, P3]);
        assert_eq!(codes("import os\nos.system('bash -i')"), [R1, R2, P3]);
        assert_eq!(codes("import subprocess\nsubprocess.run(['bash', '-c', 'id'])"), [P1, P2, P3]);
        assert_eq!(codes("print('bash')"), Vec::<FeatureCode>::new());
    }

    #[test]
    fn shadowed_builtins_are_not_builtins() {
        assert_eq!(codes("from io import open\nopen('x')"), [R3, R4]);
        assert_eq!(codes("eval('1+1')"), [P4]);
    }

    #[test]
    fn escape_byte_is_rejected() {
        let err = parse_source("x = 1\nimp\x1bort os\n", "bad.py").unwrap_err();
        assert_eq!(err.line, 2);
    }
}
