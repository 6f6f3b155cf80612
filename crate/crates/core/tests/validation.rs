use std::collections::BTreeSet;

use opflow_core::graph::infer_dag_dependencies;
use opflow_core::signature::{ParameterDecl, Signature};
use opflow_core::template::{CompositeTemplate, OpTemplate, ScriptTemplate, StepDef, ValueRef};
use opflow_core::validate::{validate_workflow, Severity};
use opflow_core::value::TypeTag;
use opflow_core::workflow::WorkflowSpec;
use proptest::prelude::*;

/// Per task: where `x` comes from (`None` = literal, else an earlier task),
/// an optional earlier task referenced from `when`, and explicit deps.
#[derive(Debug, Clone)]
struct Shape {
    dag: bool,
    tasks: Vec<(Option<usize>, Option<usize>, BTreeSet<usize>)>,
}

fn arb_shape() -> impl Strategy<Value = Shape> {
    (any::<bool>(), 1usize..9).prop_flat_map(|(dag, n)| {
        let tasks: Vec<_> = (0..n)
            .map(|i| {
                let earlier = if i == 0 { Just(None).boxed() } else { proptest::option::of(0..i).boxed() };
                let when = if i == 0 { Just(None).boxed() } else { proptest::option::of(0..i).boxed() };
                let deps = if i == 0 || !dag {
                    Just(BTreeSet::new()).boxed()
                } else {
                    proptest::collection::btree_set(0..i, 0..3).boxed()
                };
                (earlier, when, deps)
            })
            .collect();
        (Just(dag), tasks).prop_map(|(dag, tasks)| Shape { dag, tasks })
    })
}

fn script() -> ScriptTemplate {
    ScriptTemplate {
        command: vec!["sh".into()],
        script: "echo {{inputs.parameters.x}} > y".into(),
        inputs: Signature::new().parameter("x", ParameterDecl::of(TypeTag::String)),
        outputs: Signature::new().parameter("y", ParameterDecl::of(TypeTag::String)),
        output_parameter_sources: [("y".to_string(), "y".to_string())].into(),
        ..Default::default()
    }
}

fn build(shape: &Shape) -> WorkflowSpec {
    let prefix = if shape.dag { "tasks" } else { "steps" };
    let body = shape
        .tasks
        .iter()
        .enumerate()
        .map(|(i, (src, when, deps))| {
            let x = match src {
                Some(j) => ValueRef::step_output(format!("t{j}"), "y"),
                None => ValueRef::value(format!("v{i}")),
            };
            let mut s = StepDef::new(format!("t{i}"), "work").bind("x", x);
            if let Some(j) = when {
                s = s.when(format!("'{{{{{prefix}.t{j}.outputs.parameters.y}}}}' != 'stop'"));
            }
            for d in deps {
                s = s.depends_on(format!("t{d}"));
            }
            s
        })
        .collect();
    let composite = CompositeTemplate { body, ..Default::default() };
    let main = if shape.dag { OpTemplate::Dag(composite) } else { OpTemplate::Steps(composite) };
    WorkflowSpec::new("gen", "main")
        .with_template("work", OpTemplate::Script(script()))
        .with_template("main", main)
}

fn body_mut(spec: &mut WorkflowSpec) -> &mut Vec<StepDef> {
    match spec.templates.get_mut("main").unwrap() {
        OpTemplate::Steps(c) | OpTemplate::Dag(c) => &mut c.body,
        OpTemplate::Script(_) => unreachable!(),
    }
}

fn expected_edges(shape: &Shape) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for (i, (src, when, deps)) in shape.tasks.iter().enumerate() {
        for j in src.iter().chain(when.iter()).chain(deps.iter()) {
            out.insert((format!("t{j}"), format!("t{i}")));
        }
    }
    out
}

fn rejected(spec: &WorkflowSpec) -> bool {
    validate_workflow(spec).diagnostics.iter().any(|d| d.severity == Severity::Error)
}

proptest! {
    #[test]
    fn generated_workflows_are_accepted(shape in arb_shape()) {
        let spec = build(&shape);
        let report = validate_workflow(&spec);
        prop_assert!(report.is_empty(), "{}", report);
    }

    #[test]
    fn inferred_edges_match_brute_force(shape in arb_shape()) {
        let spec = build(&shape);
        let c = spec.template("main").unwrap().composite().unwrap();
        let edges: BTreeSet<(String, String)> = infer_dag_dependencies(c).unwrap().into_iter().collect();
        prop_assert_eq!(edges, expected_edges(&shape));
    }

    #[test]
    fn mutations_are_rejected(shape in arb_shape(), pick in any::<prop::sample::Index>(), which in 0u8..8) {
        let mut spec = build(&shape);
        let n = shape.tasks.len();
        let i = pick.index(n);
        let body = body_mut(&mut spec);
        match which {
            0 => body[i].template = "missing".into(),
            1 => { body[i].input_bindings.insert("zz".into(), ValueRef::value("1")); }
            2 => { body[i].input_bindings.insert("x".into(), ValueRef::step_output("ghost", "y")); }
            3 => { let dup = body[i].clone(); body.push(dup); }
            4 => body[i].timeout_seconds = Some(0),
            5 => body[i].when = Some("1 <".into()),
            6 => { body[i].input_bindings.remove("x"); }
            _ => {
                // Close a cycle over an existing edge, or refer forward in Steps.
                let edges = expected_edges(&shape);
                match edges.iter().next() {
                    Some((a, b)) if shape.dag => {
                        let a: usize = a[1..].parse().unwrap();
                        body[a].dependencies.push(b.clone());
                    }
                    _ if n > 1 => {
                        body[0].input_bindings.insert("x".into(), ValueRef::step_output(format!("t{}", n - 1), "y"));
                    }
                    _ => body[i].template = "missing".into(),
                }
            }
        }
        prop_assert!(rejected(&spec), "mutation {} accepted", which);
    }
}

#[test]
fn script_placeholders_are_limited() {
    let shape = Shape { dag: false, tasks: vec![(None, None, BTreeSet::new())] };
    let mut spec = build(&shape);
    if let Some(OpTemplate::Script(t)) = spec.templates.get_mut("work") {
        t.script.push_str("\necho {{inputs.parameters.nope}}");
    }
    assert!(rejected(&spec));
}

#[test]
fn recursion_without_condition_is_only_a_warning() {
    let mut spec = build(&Shape { dag: false, tasks: vec![(None, None, BTreeSet::new())] });
    body_mut(&mut spec).push(StepDef::new("again", "main"));
    let report = validate_workflow(&spec);
    assert!(report.is_accepted(), "{report}");
    assert_eq!(report.warnings().count(), 1);
}
