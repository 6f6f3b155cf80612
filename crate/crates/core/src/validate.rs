//! Static checks run before a workflow is accepted.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::expr::{check_condition_syntax, placeholders};
use crate::graph::{detect_cycles, infer_dag_dependencies, reachable_from, sibling_of_path};
use crate::ident::is_identifier;
use crate::signature::Signature;
use crate::slices::split_list;
use crate::template::{CompositeTemplate, OpTemplate, ScriptTemplate, StepDef, ValueRef};
use crate::value::TypeTag;
use crate::workflow::WorkflowSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Dotted path into the document, e.g. `templates.main.body.s1.when`.
    pub location: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    /// Accepted when there are no errors; warnings do not block submission.
    pub fn is_accepted(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn is_empty(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Warning)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.diagnostics {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}

/// Whether a signature entry is a parameter or an artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Parameter(TypeTag),
    Artifact,
}

fn kind_of(sig: &Signature, name: &str) -> Option<Kind> {
    if let Some(p) = sig.parameters.get(name) {
        Some(Kind::Parameter(p.type_tag))
    } else if sig.artifacts.contains_key(name) {
        Some(Kind::Artifact)
    } else {
        None
    }
}

fn same_kind(a: Kind, b: Kind) -> bool {
    matches!(
        (a, b),
        (Kind::Parameter(_), Kind::Parameter(_)) | (Kind::Artifact, Kind::Artifact)
    )
}

fn is_safe_relative(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && path.split('/').all(|seg| seg != ".." && !seg.is_empty())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BodyKind {
    Steps,
    Dag,
}

impl BodyKind {
    fn output_prefix(self) -> &'static str {
        match self {
            BodyKind::Steps => "steps",
            BodyKind::Dag => "tasks",
        }
    }
}

struct Validator<'a> {
    spec: &'a WorkflowSpec,
    diags: Vec<Diagnostic>,
}

/// Runs every static check and returns the diagnostics, in document order.
pub fn validate_workflow(spec: &WorkflowSpec) -> ValidationReport {
    let mut v = Validator {
        spec,
        diags: Vec::new(),
    };
    v.run();
    ValidationReport { diagnostics: v.diags }
}

impl<'a> Validator<'a> {
    fn error(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            severity: Severity::Error,
            location: location.into(),
            message: message.into(),
        });
    }

    fn warning(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            severity: Severity::Warning,
            location: location.into(),
            message: message.into(),
        });
    }

    fn run(&mut self) {
        let spec = self.spec;
        if !is_identifier(&spec.name) {
            self.error("name", format!("`{}` is not a valid identifier", spec.name));
        }
        self.check_signature("global_inputs", &spec.global_inputs);
        for (name, decl) in &spec.global_inputs.parameters {
            if decl.default.is_none() && !decl.optional {
                self.error(
                    format!("global_inputs.parameters.{name}"),
                    "workflow input has no value",
                );
            }
        }
        for (name, decl) in &spec.global_inputs.artifacts {
            if decl.default_location.is_none() && !decl.optional {
                self.error(
                    format!("global_inputs.artifacts.{name}"),
                    "workflow input artifact has no location",
                );
            }
        }

        match spec.template(&spec.entrypoint) {
            None => self.error(
                "entrypoint",
                format!("unresolved template `{}`", spec.entrypoint),
            ),
            Some(t) => self.check_entrypoint_inputs(t),
        }

        for (name, t) in &spec.templates {
            let loc = format!("templates.{name}");
            if !is_identifier(name) {
                self.error(&loc, format!("`{name}` is not a valid identifier"));
            }
            self.check_signature(&format!("{loc}.inputs"), t.inputs());
            self.check_signature(&format!("{loc}.outputs"), t.outputs());
            match t {
                OpTemplate::Script(s) => self.check_script(&loc, s),
                OpTemplate::Steps(c) => self.check_composite(&loc, c, BodyKind::Steps),
                OpTemplate::Dag(c) => self.check_composite(&loc, c, BodyKind::Dag),
            }
        }
        self.check_recursion();
    }

    fn check_signature(&mut self, loc: &str, sig: &Signature) {
        for (name, decl) in &sig.parameters {
            if !is_identifier(name) {
                self.error(format!("{loc}.parameters.{name}"), "invalid identifier");
            }
            if sig.artifacts.contains_key(name) {
                self.error(
                    format!("{loc}.parameters.{name}"),
                    "name is declared as both a parameter and an artifact",
                );
            }
            if let Some(d) = &decl.default {
                if decl.type_tag.canonicalize(d).is_err() {
                    self.error(
                        format!("{loc}.parameters.{name}.default"),
                        format!("type error: default `{d}` does not parse as {}", decl.type_tag),
                    );
                }
            }
        }
        for name in sig.artifacts.keys() {
            if !is_identifier(name) {
                self.error(format!("{loc}.artifacts.{name}"), "invalid identifier");
            }
        }
    }

    fn check_entrypoint_inputs(&mut self, t: &OpTemplate) {
        let globals = &self.spec.global_inputs;
        for name in t.inputs().parameters.keys().chain(t.inputs().artifacts.keys()) {
            let want = kind_of(t.inputs(), name).expect("declared");
            match kind_of(globals, name) {
                Some(have) if same_kind(have, want) => {}
                Some(_) => self.error(
                    format!("global_inputs.{name}"),
                    "kind differs from the entrypoint input of the same name",
                ),
                None if t.inputs().may_omit(name) => {}
                None => self.error(
                    "entrypoint",
                    format!("entrypoint input `{name}` is not provided by global_inputs"),
                ),
            }
        }
    }

    fn check_script(&mut self, loc: &str, s: &ScriptTemplate) {
        if s.command.is_empty() {
            self.error(format!("{loc}.command"), "command is empty");
        }
        for name in s.outputs.parameters.keys() {
            if !s.output_parameter_sources.contains_key(name) {
                self.error(
                    format!("{loc}.output_parameter_sources"),
                    format!("output parameter `{name}` has no source"),
                );
            }
        }
        for name in s.output_parameter_sources.keys() {
            if !s.outputs.parameters.contains_key(name) {
                self.error(
                    format!("{loc}.output_parameter_sources.{name}"),
                    "source for an undeclared output parameter",
                );
            }
        }
        for name in s.outputs.artifacts.keys() {
            if !s.output_artifact_sources.contains_key(name) {
                self.error(
                    format!("{loc}.output_artifact_sources"),
                    format!("output artifact `{name}` has no source"),
                );
            }
        }
        for name in s.output_artifact_sources.keys() {
            if !s.outputs.artifacts.contains_key(name) {
                self.error(
                    format!("{loc}.output_artifact_sources.{name}"),
                    "source for an undeclared output artifact",
                );
            }
        }
        for (name, path) in s
            .output_parameter_sources
            .iter()
            .chain(s.output_artifact_sources.iter())
        {
            if !is_safe_relative(path) {
                self.error(
                    format!("{loc}.outputs.{name}"),
                    format!("source path `{path}` must be relative without `..`"),
                );
            }
        }
        for name in s.inputs.artifacts.keys() {
            if !s.input_artifact_mounts.contains_key(name) {
                self.error(
                    format!("{loc}.input_artifact_mounts"),
                    format!("input artifact `{name}` has no mount path"),
                );
            }
        }
        let mut seen = BTreeSet::new();
        for (name, path) in &s.input_artifact_mounts {
            let at = format!("{loc}.input_artifact_mounts.{name}");
            if !s.inputs.artifacts.contains_key(name) {
                self.error(&at, "mount for an undeclared input artifact");
            }
            if !is_safe_relative(path) {
                self.error(&at, format!("mount path `{path}` must be relative without `..`"));
            }
            if !seen.insert(path.as_str()) {
                self.error(&at, format!("mount path `{path}` is used twice"));
            }
        }
        for p in placeholders(&s.script) {
            let ok = match p.path.strip_prefix("inputs.parameters.") {
                Some(n) => s.inputs.parameters.contains_key(n),
                None => matches!(p.path, "workflow.name" | "workflow.id"),
            };
            if !ok {
                self.error(
                    format!("{loc}.script"),
                    format!("unknown placeholder `{{{{{}}}}}`", p.path),
                );
            }
        }
    }

    fn check_composite(&mut self, loc: &str, c: &CompositeTemplate, body_kind: BodyKind) {
        let mut names = BTreeSet::new();
        for step in &c.body {
            if !names.insert(step.name.as_str()) {
                self.error(
                    format!("{loc}.body.{}", step.name),
                    "duplicate step name in body",
                );
            }
        }
        for (idx, step) in c.body.iter().enumerate() {
            self.check_step(loc, c, idx, step, body_kind);
        }

        if body_kind == BodyKind::Dag {
            // An Err means unresolved references, already reported per step.
            if let Ok(edges) = infer_dag_dependencies(c) {
                let nodes: Vec<&str> = c.body.iter().map(|s| s.name.as_str()).collect();
                let edges: Vec<(&str, &str)> =
                    edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
                if let Some(cycle) = detect_cycles(&nodes, &edges) {
                    self.error(
                        format!("{loc}.body"),
                        format!("dependency cycle: {}", cycle.join(" -> ")),
                    );
                }
            }
        }

        // Constant keys that collide are detectable without running anything.
        let mut constant_keys: BTreeMap<&str, &str> = BTreeMap::new();
        for step in &c.body {
            if let Some(k) = &step.key_template {
                if placeholders(k).is_empty() {
                    if let Some(prev) = constant_keys.insert(k, &step.name) {
                        self.error(
                            format!("{loc}.body.{}.key_template", step.name),
                            format!("duplicate key `{k}` (also used by `{prev}`)"),
                        );
                    }
                }
            }
        }

        for (name, vref) in &c.output_bindings {
            let at = format!("{loc}.output_bindings.{name}");
            let Some(want) = kind_of(&c.outputs, name) else {
                self.error(&at, format!("`{name}` is not a declared output"));
                continue;
            };
            self.check_value_ref(&at, c, None, vref, want, body_kind, false);
        }
        for name in c.outputs.parameters.keys().chain(c.outputs.artifacts.keys()) {
            if !c.output_bindings.contains_key(name) && !c.outputs.may_omit(name) {
                self.error(
                    format!("{loc}.output_bindings"),
                    format!("output `{name}` is not bound"),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn check_value_ref(
        &mut self,
        at: &str,
        c: &CompositeTemplate,
        consumer: Option<(usize, &StepDef)>,
        vref: &ValueRef,
        want: Kind,
        body_kind: BodyKind,
        input_is_sliced: bool,
    ) {
        let spec = self.spec;
        let mismatch = "parameter/artifact kind mismatch";
        match vref {
            ValueRef::Value(text) => match want {
                Kind::Artifact => self.error(at, "parameter literal bound to an artifact"),
                Kind::Parameter(_) if input_is_sliced => {
                    if split_list(at, text).is_err() {
                        self.error(at, format!("type error: sliced literal `{text}` is not a JSON list"));
                    }
                }
                Kind::Parameter(tag) => {
                    if tag.canonicalize(text).is_err() {
                        self.error(at, format!("type error: literal `{text}` does not parse as {tag}"));
                    }
                }
            },
            ValueRef::Artifact(a) => {
                if !matches!(want, Kind::Artifact) {
                    self.error(at, "artifact literal bound to a parameter");
                }
                if a.location.is_empty() && !a.optional {
                    self.error(at, "artifact literal has an empty location");
                }
            }
            ValueRef::WorkflowInput(n) => match kind_of(&spec.global_inputs, n) {
                None => self.error(at, format!("unknown workflow input `{n}`")),
                Some(k) if !same_kind(k, want) => self.error(at, mismatch),
                Some(_) => {}
            },
            ValueRef::TemplateInput(n) => match kind_of(&c.inputs, n) {
                None => self.error(at, format!("`{n}` is not an input of the enclosing template")),
                Some(k) if !same_kind(k, want) => self.error(at, mismatch),
                Some(_) => {}
            },
            ValueRef::StepOutput { step, name } => {
                let Some(pos) = c.position(step) else {
                    self.error(at, format!("unresolved reference to step `{step}`"));
                    return;
                };
                if let Some((idx, _)) = consumer {
                    if body_kind == BodyKind::Steps && pos >= idx {
                        self.error(at, format!("step `{step}` does not run before this step"));
                        return;
                    }
                }
                let producer = &c.body[pos];
                let Some(t) = spec.template(&producer.template) else {
                    return;
                };
                let exposed = match &producer.slices {
                    Some(sl) if !sl.stacked_outputs.contains(name) => None,
                    Some(_) => kind_of(t.outputs(), name).map(|k| match k {
                        Kind::Parameter(_) => Kind::Parameter(TypeTag::Json),
                        k => k,
                    }),
                    None => kind_of(t.outputs(), name),
                };
                match exposed {
                    None => self.error(at, format!("step `{step}` has no output `{name}`")),
                    Some(k) if !same_kind(k, want) => self.error(at, mismatch),
                    Some(Kind::Parameter(TypeTag::Json))
                        if producer.slices.is_some()
                            && !input_is_sliced
                            && !matches!(want, Kind::Parameter(TypeTag::Json | TypeTag::String)) =>
                    {
                        self.error(at, "type error: stacked output is a JSON list")
                    }
                    Some(_) => {}
                }
            }
            ValueRef::Item | ValueRef::ItemField(_) => {
                let sliced = consumer.is_some_and(|(_, s)| s.slices.is_some());
                if !sliced {
                    self.error(at, "`item` is only available inside a sliced step");
                } else if matches!(want, Kind::Artifact) && matches!(vref, ValueRef::ItemField(_)) {
                    self.error(at, mismatch);
                }
            }
        }
    }

    fn check_step(
        &mut self,
        loc: &str,
        c: &CompositeTemplate,
        idx: usize,
        step: &StepDef,
        body_kind: BodyKind,
    ) {
        let spec = self.spec;
        let sloc = format!("{loc}.body.{}", step.name);
        if !is_identifier(&step.name) {
            self.error(&sloc, format!("`{}` is not a valid identifier", step.name));
        }
        if body_kind == BodyKind::Steps && !step.dependencies.is_empty() {
            self.error(
                format!("{sloc}.dependencies"),
                "explicit dependencies are only allowed in DAG bodies",
            );
        }
        for dep in &step.dependencies {
            if c.member(dep).is_none() {
                self.error(
                    format!("{sloc}.dependencies"),
                    format!("unresolved reference to task `{dep}`"),
                );
            }
        }
        if step.timeout_seconds == Some(0) {
            self.error(format!("{sloc}.timeout_seconds"), "timeout must be positive");
        }
        match &step.slices {
            None => {
                if step.continue_on_success_ratio.is_some() || step.continue_on_num_success.is_some() {
                    self.error(&sloc, "success ratio/count tolerances need `slices`");
                }
            }
            Some(_) => {
                if step.continue_on_success_ratio.is_some() && step.continue_on_num_success.is_some() {
                    self.error(&sloc, "set at most one of continue_on_success_ratio and continue_on_num_success");
                }
                if step.continue_on_num_success == Some(0) {
                    self.error(&sloc, "continue_on_num_success must be positive");
                }
            }
        }

        self.check_step_text(&sloc, "when", step.when.as_deref(), c, idx, body_kind);
        self.check_step_text(&sloc, "key_template", step.key_template.as_deref(), c, idx, body_kind);
        if let Some(w) = &step.when {
            if let Err(e) = check_condition_syntax(w) {
                self.error(format!("{sloc}.when"), format!("{e}"));
            }
        }

        let Some(target) = spec.template(&step.template) else {
            self.error(
                format!("{sloc}.template"),
                format!("unresolved template `{}`", step.template),
            );
            return;
        };
        let inputs = target.inputs();

        if let Some(sl) = &step.slices {
            if sl.sliced_inputs.is_empty() {
                self.error(format!("{sloc}.slices"), "sliced_inputs is empty");
            }
            if sl.parallelism == Some(0) {
                self.error(format!("{sloc}.slices.parallelism"), "parallelism must be positive");
            }
            for n in &sl.sliced_inputs {
                if !inputs.contains(n) {
                    self.error(
                        format!("{sloc}.slices.sliced_inputs"),
                        format!("`{n}` is not an input of `{}`", step.template),
                    );
                } else if step.input_bindings.get(n).is_none_or(ValueRef::uses_item) {
                    self.error(
                        format!("{sloc}.slices.sliced_inputs"),
                        format!("sliced input `{n}` must be bound to a list"),
                    );
                }
            }
            for n in &sl.stacked_outputs {
                if !target.outputs().contains(n) {
                    self.error(
                        format!("{sloc}.slices.stacked_outputs"),
                        format!("`{n}` is not an output of `{}`", step.template),
                    );
                }
            }
        }

        for (input, vref) in &step.input_bindings {
            let at = format!("{sloc}.input_bindings.{input}");
            let Some(want) = kind_of(inputs, input) else {
                self.error(&at, format!("`{}` has no input `{input}`", step.template));
                continue;
            };
            let sliced = step
                .slices
                .as_ref()
                .is_some_and(|s| s.sliced_inputs.contains(input));
            self.check_value_ref(&at, c, Some((idx, step)), vref, want, body_kind, sliced);
        }
        for name in inputs.parameters.keys().chain(inputs.artifacts.keys()) {
            if !step.input_bindings.contains_key(name) && !inputs.may_omit(name) {
                self.error(
                    format!("{sloc}.input_bindings"),
                    format!("required input `{name}` is not bound"),
                );
            }
        }
    }

    /// Placeholders in `when` / `key_template` must name something visible
    /// from this step.
    fn check_step_text(
        &mut self,
        sloc: &str,
        field: &str,
        text: Option<&str>,
        c: &CompositeTemplate,
        idx: usize,
        body_kind: BodyKind,
    ) {
        let Some(text) = text else { return };
        for p in placeholders(text) {
            let problem = if let Some(n) = p.path.strip_prefix("inputs.parameters.") {
                (!c.inputs.parameters.contains_key(n))
                    .then(|| format!("`{n}` is not an input parameter of the enclosing template"))
            } else if matches!(p.path, "workflow.name" | "workflow.id") {
                None
            } else if p.path == "item" || p.path.starts_with("item.") {
                Some("`item` is not available in `when` or `key_template`".to_string())
            } else if let Some(sib) = sibling_of_path(p.path) {
                let prefix = body_kind.output_prefix();
                let pos = c.position(sib);
                let rest = p.path.split_once('.').map(|(_, r)| r).unwrap_or("");
                let out_name = rest
                    .strip_prefix(sib)
                    .and_then(|r| r.strip_prefix(".outputs.parameters."));
                if !p.path.starts_with(prefix) {
                    Some(format!("use `{prefix}.` to reference siblings in this body"))
                } else if pos.is_none() {
                    Some(format!("unresolved reference to `{sib}`"))
                } else if body_kind == BodyKind::Steps && pos >= Some(idx) {
                    Some(format!("step `{sib}` does not run before this step"))
                } else if body_kind == BodyKind::Dag && pos == Some(idx) {
                    Some("a task cannot reference itself".to_string())
                } else if out_name.is_none() {
                    Some("expected `.outputs.parameters.<name>`".to_string())
                } else {
                    None
                }
            } else {
                Some("unknown placeholder".to_string())
            };
            if let Some(msg) = problem {
                self.error(
                    format!("{sloc}.{field}"),
                    format!("`{{{{{}}}}}`: {msg}", p.path),
                );
            }
        }
    }

    fn check_recursion(&mut self) {
        let spec = self.spec;
        let mut calls: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (name, t) in &spec.templates {
            let entry = calls.entry(name.as_str()).or_default();
            for s in t.body() {
                if spec.templates.contains_key(&s.template) {
                    entry.insert(s.template.as_str());
                }
            }
        }
        for (name, t) in &spec.templates {
            for s in t.body() {
                let Some((target, _)) = spec.templates.get_key_value(&s.template) else {
                    continue;
                };
                let recursive = target == name
                    || reachable_from(target.as_str(), &calls).contains(name.as_str());
                if recursive && s.when.is_none() {
                    self.warning(
                        format!("templates.{name}.body.{}", s.name),
                        "recursive step has no `when` condition; it can only stop at the recursion limit",
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signature::ParameterDecl;
    use crate::template::SlicesConfig;
    use alloc::vec;

    fn echo() -> OpTemplate {
        OpTemplate::Script(ScriptTemplate {
            command: vec!["sh".into()],
            script: "echo {{inputs.parameters.n}} > out".into(),
            inputs: Signature::new().parameter("n", ParameterDecl::of(TypeTag::Int)),
            outputs: Signature::new().parameter("n", ParameterDecl::of(TypeTag::Int)),
            output_parameter_sources: [("n".into(), "out".into())].into(),
            ..Default::default()
        })
    }

    fn spec(body: Vec<StepDef>, dag: bool) -> WorkflowSpec {
        let c = CompositeTemplate {
            body,
            ..Default::default()
        };
        let main = if dag { OpTemplate::Dag(c) } else { OpTemplate::Steps(c) };
        WorkflowSpec::new("wf", "main")
            .with_template("main", main)
            .with_template("echo", echo())
    }

    fn messages(r: &ValidationReport) -> Vec<String> {
        r.errors().map(|d| d.message.clone()).collect()
    }

    #[test]
    fn well_formed_is_empty() {
        let s = spec(
            vec![
                StepDef::new("a", "echo").bind("n", ValueRef::value("1")),
                StepDef::new("b", "echo").bind("n", ValueRef::step_output("a", "n")),
            ],
            false,
        );
        let r = validate_workflow(&s);
        assert!(r.is_empty(), "{r}");
    }

    #[test]
    fn missing_entrypoint() {
        let mut s = spec(vec![], false);
        s.entrypoint = "nope".into();
        let r = validate_workflow(&s);
        assert_eq!(r.errors().count(), 1);
        assert!(messages(&r)[0].contains("unresolved template"));
    }

    #[test]
    fn literal_tag_mismatch() {
        let s = spec(vec![StepDef::new("a", "echo").bind("n", ValueRef::value("abc"))], false);
        let r = validate_workflow(&s);
        assert_eq!(r.errors().count(), 1);
        assert!(messages(&r)[0].contains("type error"));
    }

    #[test]
    fn unbound_and_unknown_inputs() {
        let s = spec(vec![StepDef::new("a", "echo").bind("m", ValueRef::value("1"))], false);
        let m = messages(&validate_workflow(&s));
        assert!(m.iter().any(|m| m.contains("has no input `m`")));
        assert!(m.iter().any(|m| m.contains("`n` is not bound")));
    }

    #[test]
    fn later_step_reference_in_steps_body() {
        let s = spec(
            vec![
                StepDef::new("a", "echo").bind("n", ValueRef::step_output("b", "n")),
                StepDef::new("b", "echo").bind("n", ValueRef::value("1")),
            ],
            false,
        );
        assert!(!validate_workflow(&s).is_accepted());
        let s = spec(
            vec![
                StepDef::new("a", "echo").bind("n", ValueRef::step_output("b", "n")),
                StepDef::new("b", "echo").bind("n", ValueRef::value("1")),
            ],
            true,
        );
        assert!(validate_workflow(&s).is_accepted());
    }

    #[test]
    fn dag_cycle() {
        let s = spec(
            vec![
                StepDef::new("a", "echo").bind("n", ValueRef::step_output("b", "n")),
                StepDef::new("b", "echo").bind("n", ValueRef::step_output("a", "n")),
            ],
            true,
        );
        assert!(messages(&validate_workflow(&s))
            .iter()
            .any(|m| m.contains("cycle")));
    }

    #[test]
    fn item_outside_slices() {
        let s = spec(vec![StepDef::new("a", "echo").bind("n", ValueRef::Item)], false);
        assert!(!validate_workflow(&s).is_accepted());
        let mut step = StepDef::new("a", "echo").bind("n", ValueRef::value("[1,2]"));
        step.slices = Some(SlicesConfig {
            sliced_inputs: ["n".into()].into(),
            stacked_outputs: ["n".into()].into(),
            parallelism: None,
        });
        let r = validate_workflow(&spec(vec![step.clone()], false));
        assert!(r.is_empty(), "{r}");
        step.input_bindings.insert("n".into(), ValueRef::value("3"));
        assert!(!validate_workflow(&spec(vec![step], false)).is_accepted());
    }

    #[test]
    fn ratio_needs_slices() {
        let mut step = StepDef::new("a", "echo").bind("n", ValueRef::value("1"));
        step.continue_on_num_success = Some(2);
        assert!(!validate_workflow(&spec(vec![step], false)).is_accepted());
    }

    #[test]
    fn bad_when() {
        let s = spec(
            vec![StepDef::new("a", "echo").bind("n", ValueRef::value("1")).when("1 <")],
            false,
        );
        assert!(!validate_workflow(&s).is_accepted());
        let s = spec(
            vec![StepDef::new("a", "echo")
                .bind("n", ValueRef::value("1"))
                .when("{{inputs.parameters.zz}} < 1")],
            false,
        );
        assert!(!validate_workflow(&s).is_accepted());
    }

    #[test]
    fn recursion_without_when_warns() {
        let lp = CompositeTemplate {
            body: vec![StepDef::new("again", "loop")],
            ..Default::default()
        };
        let s = WorkflowSpec::new("wf", "loop").with_template("loop", OpTemplate::Steps(lp.clone()));
        let r = validate_workflow(&s);
        assert!(r.is_accepted());
        assert_eq!(r.warnings().count(), 1);

        let mut lp = lp;
        lp.body[0].when = Some("false".into());
        let s = WorkflowSpec::new("wf", "loop").with_template("loop", OpTemplate::Steps(lp));
        assert!(validate_workflow(&s).is_empty());
    }

    #[test]
    fn duplicate_constant_keys() {
        let s = spec(
            vec![
                StepDef::new("a", "echo").bind("n", ValueRef::value("1")).key("k"),
                StepDef::new("b", "echo").bind("n", ValueRef::value("1")).key("k"),
            ],
            false,
        );
        assert!(messages(&validate_workflow(&s))
            .iter()
            .any(|m| m.contains("duplicate key")));
    }

    #[test]
    fn script_checks() {
        let mut t = ScriptTemplate {
            command: vec![],
            script: "{{inputs.parameters.x}}".into(),
            outputs: Signature::new().parameter("y", ParameterDecl::default()),
            ..Default::default()
        };
        t.input_artifact_mounts.insert("a".into(), "../x".into());
        let s = WorkflowSpec::new("wf", "t").with_template("t", OpTemplate::Script(t));
        assert!(validate_workflow(&s).errors().count() >= 4);
    }
}
