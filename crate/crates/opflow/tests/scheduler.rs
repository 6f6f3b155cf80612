use std::fs;
use std::sync::Arc;
use std::time::Duration;

use opflow::clock::ManualClock;
use opflow::scheduler::{Engine, RunConfig, RunError};
use opflow::spec_io::parse_spec;
use opflow_core::record::Phase;
use opflow_core::policy::FailureKind;

fn config() -> RunConfig {
    RunConfig {
        clock: Arc::new(ManualClock::new(0)),
        retry_backoff: Duration::from_millis(10),
        ..RunConfig::default()
    }
}

fn engine() -> (tempfile::TempDir, Engine) {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path()).unwrap();
    (dir, engine)
}

const DIAMOND: &str = r#"
apiVersion: opflow/v1
name: diamond
entrypoint: main
templates:
  emit:
    script:
      command: [sh]
      script: |
        date +%s%N > t
        sleep 0.05
        echo "{{inputs.parameters.x}}" > out
      inputs: {parameters: {x: {}}}
      outputs: {parameters: {out: {}, t: {}}}
      output_parameter_sources: {out: out, t: t}
  main:
    dag:
      outputs: {parameters: {result: {}}}
      body:
        - {name: a, template: emit, input_bindings: {x: {value: "1"}}}
        - name: b
          template: emit
          input_bindings: {x: {step_output: {step: a, name: out}}}
        - name: c
          template: emit
          input_bindings: {x: {step_output: {step: a, name: out}}}
        - name: d
          template: emit
          input_bindings: {x: {step_output: {step: b, name: out}}}
          dependencies: [c]
      output_bindings:
        result: {step_output: {step: d, name: out}}
"#;

#[test]
fn diamond_runs_in_dependency_order() {
    let (_d, engine) = engine();
    let spec = parse_spec(DIAMOND).unwrap();
    for sequential in [false, true] {
        let cfg = RunConfig { sequential, ..config() };
        let res = engine.run_workflow(&spec, &cfg, &[]).unwrap();
        assert_eq!(res.phase, Phase::Succeeded, "{res:?}");
        assert_eq!(res.outputs.as_ref().unwrap().parameters["result"].text, "1");
        let t = |n: &str| -> u128 {
            res.record(n).unwrap().outputs.as_ref().unwrap().parameters["t"].text.parse().unwrap()
        };
        assert!(t("a") < t("b") && t("a") < t("c"));
        assert!(t("b") < t("d") && t("c") < t("d"));
        assert_eq!(engine.state().status(&res.workflow_id).unwrap(), Phase::Succeeded);
    }
}

const FLAKY: &str = r#"
apiVersion: opflow/v1
name: flaky
entrypoint: main
templates:
  flaky:
    script:
      command: [sh]
      script: |
        n=$(cat {{inputs.parameters.counter}} 2>/dev/null || echo 0)
        n=$((n+1))
        echo $n > {{inputs.parameters.counter}}
        [ $n -ge {{inputs.parameters.succeed_at}} ] || exit 64
      inputs: {parameters: {counter: {}, succeed_at: {type_tag: int}}}
  main:
    steps:
      inputs: {parameters: {counter: {}, succeed_at: {type_tag: int}}}
      body:
        - name: s
          template: flaky
          input_bindings:
            counter: {template_input: counter}
            succeed_at: {template_input: succeed_at}
          retry: {max_retries_on_transient: 2}
"#;

fn flaky_spec(counter: &str, succeed_at: u32) -> opflow_core::workflow::WorkflowSpec {
    let mut spec = parse_spec(FLAKY).unwrap();
    spec.global_inputs.parameters.insert("counter".into(), Default::default());
    spec.global_inputs.parameters.insert(
        "succeed_at".into(),
        opflow_core::signature::ParameterDecl::of(opflow_core::value::TypeTag::Int),
    );
    spec.set_parameter("counter", counter).unwrap();
    spec.set_parameter("succeed_at", &succeed_at.to_string()).unwrap();
    spec
}

#[test]
fn transient_failures_are_retried_up_to_the_limit() {
    let (d, engine) = engine();
    let counter = d.path().join("count-ok");
    let res = engine
        .run_workflow(&flaky_spec(counter.to_str().unwrap(), 3), &config(), &[])
        .unwrap();
    assert_eq!(res.phase, Phase::Succeeded, "{res:?}");
    assert_eq!(res.record("s").unwrap().attempt, 3);
    assert_eq!(fs::read_to_string(&counter).unwrap().trim(), "3");

    let counter = d.path().join("count-bad");
    let res = engine
        .run_workflow(&flaky_spec(counter.to_str().unwrap(), 4), &config(), &[])
        .unwrap();
    assert_eq!(res.phase, Phase::Failed);
    let rec = res.record("s").unwrap();
    assert_eq!(rec.attempt, 3);
    assert_eq!(rec.failure.as_ref().unwrap().kind, FailureKind::Transient);
    assert_eq!(fs::read_to_string(&counter).unwrap().trim(), "3");
}

const BRANCH: &str = r#"
apiVersion: opflow/v1
name: branch
entrypoint: main
global_inputs:
  parameters:
    n: {type_tag: int, default: "5"}
templates:
  echo:
    script:
      command: [sh]
      script: echo "{{inputs.parameters.x}}" > out
      inputs: {parameters: {x: {}}}
      outputs: {parameters: {out: {}}}
      output_parameter_sources: {out: out}
  boom:
    script:
      command: [sh]
      script: exit 3
  main:
    steps:
      inputs: {parameters: {n: {type_tag: int}}}
      outputs: {parameters: {big: {default: none}}}
      body:
        - name: big
          template: echo
          when: "{{inputs.parameters.n}} > 3"
          input_bindings: {x: {value: big}}
        - name: small
          template: echo
          when: "{{inputs.parameters.n}} <= 3"
          input_bindings: {x: {value: small}}
        - {name: fail, template: boom, continue_on_failed: true}
        - name: after
          template: echo
          input_bindings: {x: {step_output: {step: big, name: out}}}
      output_bindings:
        big: {step_output: {step: big, name: out}}
"#;

#[test]
fn conditions_skip_and_tolerated_failures_continue() {
    let (_d, engine) = engine();
    let res = engine.run_workflow(&parse_spec(BRANCH).unwrap(), &config(), &[]).unwrap();
    assert_eq!(res.phase, Phase::Succeeded, "{res:?}");
    assert_eq!(res.record("big").unwrap().phase, Phase::Succeeded);
    assert_eq!(res.record("small").unwrap().phase, Phase::Skipped);
    assert_eq!(res.record("fail").unwrap().phase, Phase::Failed);
    assert_eq!(res.record("after").unwrap().phase, Phase::Succeeded);

    let mut spec = parse_spec(BRANCH).unwrap();
    spec.set_parameter("n", "2").unwrap();
    let res = engine.run_workflow(&spec, &config(), &[]).unwrap();
    // `after` needs `big`, which was skipped.
    assert_eq!(res.record("big").unwrap().phase, Phase::Skipped);
    assert_eq!(res.record("after").unwrap().phase, Phase::Failed);
    assert_eq!(res.phase, Phase::Failed);
}

const KEYED: &str = r#"
apiVersion: opflow/v1
name: keyed
entrypoint: main
templates:
  stamp:
    script:
      command: [sh]
      script: |
        echo run >> {{inputs.parameters.log}}
        echo "{{inputs.parameters.x}}-done" > out
      inputs: {parameters: {x: {}, log: {}}}
      outputs: {parameters: {out: {}}}
      output_parameter_sources: {out: out}
  main:
    steps:
      inputs: {parameters: {log: {}}}
      outputs: {parameters: {final: {}}}
      body:
        - name: first
          template: stamp
          key_template: first
          input_bindings: {x: {value: a}, log: {template_input: log}}
        - name: second
          template: stamp
          key_template: second
          input_bindings:
            x: {step_output: {step: first, name: out}}
            log: {template_input: log}
      output_bindings:
        final: {step_output: {step: second, name: out}}
"#;

fn keyed_spec(log: &str) -> opflow_core::workflow::WorkflowSpec {
    let mut spec = parse_spec(KEYED).unwrap();
    spec.global_inputs.parameters.insert("log".into(), Default::default());
    spec.set_parameter("log", log).unwrap();
    spec
}

#[test]
fn reuse_replays_keyed_steps_without_running_them() {
    let (d, engine) = engine();
    let log = d.path().join("log");
    let spec = keyed_spec(log.to_str().unwrap());
    let first = engine.run_workflow(&spec, &config(), &[]).unwrap();
    assert_eq!(first.phase, Phase::Succeeded);
    let harvested = engine.state().harvest_reuse(&first.workflow_id).unwrap();
    assert_eq!(harvested.len(), 2);

    let replay = engine.run_workflow(&spec, &config(), &harvested).unwrap();
    assert_eq!(replay.phase, Phase::Succeeded);
    assert_eq!(replay.outputs, first.outputs);
    assert!(replay.records.iter().all(|r| r.phase == Phase::Reused));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);

    // A modified record propagates downstream when only the first is reused.
    let first_rec = harvested.iter().find(|r| r.key == "first").unwrap();
    let modified = first_rec.modify_output_parameter("out", "zzz").unwrap();
    let res = engine.run_workflow(&spec, &config(), &[modified]).unwrap();
    assert_eq!(res.outputs.unwrap().parameters["final"].text, "zzz-done");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);
}

const SLICED: &str = r#"
apiVersion: opflow/v1
name: sliced
entrypoint: main
templates:
  square:
    script:
      command: [sh]
      script: |
        sleep 0.0$(( ({{inputs.parameters.x}} * 7) % 10 ))
        echo $(( {{inputs.parameters.x}} * {{inputs.parameters.x}} )) > out
      inputs: {parameters: {x: {type_tag: int}}}
      outputs: {parameters: {out: {type_tag: int}}}
      output_parameter_sources: {out: out}
  main:
    steps:
      outputs: {parameters: {squares: {type_tag: json}}}
      body:
        - name: sq
          template: square
          input_bindings: {x: {value: "[0,1,2,3,4,5,6,7,8,9,10,11]"}}
          slices: {sliced_inputs: [x], stacked_outputs: [out], parallelism: 4}
      output_bindings:
        squares: {step_output: {step: sq, name: out}}
"#;

#[test]
fn slice_outputs_are_stacked_in_index_order() {
    let (_d, engine) = engine();
    let res = engine.run_workflow(&parse_spec(SLICED).unwrap(), &config(), &[]).unwrap();
    assert_eq!(res.phase, Phase::Succeeded, "{res:?}");
    let squares: Vec<i64> =
        serde_json::from_str(&res.outputs.as_ref().unwrap().parameters["squares"].text).unwrap();
    assert_eq!(squares, (0..12).map(|i| i * i).collect::<Vec<i64>>());
    let group = res.record("sq").unwrap();
    let instances: Vec<_> = res
        .records
        .iter()
        .filter(|r| r.parent.as_deref() == Some(group.key.as_str()))
        .collect();
    assert_eq!(instances.len(), 12);
    assert!(instances.iter().all(|r| r.slice_index.is_some()));
}

const RECURSE: &str = r#"
apiVersion: opflow/v1
name: recurse
entrypoint: loop
global_inputs:
  parameters:
    n: {type_tag: int, default: "4"}
templates:
  dec:
    script:
      command: [sh]
      script: echo $(( {{inputs.parameters.n}} - 1 )) > out
      inputs: {parameters: {n: {type_tag: int}}}
      outputs: {parameters: {out: {type_tag: int}}}
      output_parameter_sources: {out: out}
  loop:
    steps:
      inputs: {parameters: {n: {type_tag: int}}}
      body:
        - name: dec
          template: dec
          when: "{{inputs.parameters.n}} > 0"
          input_bindings: {n: {template_input: n}}
        - name: again
          template: loop
          when: "{{inputs.parameters.n}} > 0"
          input_bindings: {n: {step_output: {step: dec, name: out}}}
"#;

#[test]
fn recursion_terminates_and_hits_the_limit() {
    let (_d, engine) = engine();
    let res = engine.run_workflow(&parse_spec(RECURSE).unwrap(), &config(), &[]).unwrap();
    assert_eq!(res.phase, Phase::Succeeded, "{res:?}");
    let decs = res.records.iter().filter(|r| r.name == "dec" && r.phase == Phase::Succeeded).count();
    assert_eq!(decs, 4);

    let cfg = RunConfig { max_recursion_depth: 3, ..config() };
    let res = engine.run_workflow(&parse_spec(RECURSE).unwrap(), &cfg, &[]).unwrap();
    assert_eq!(res.phase, Phase::Failed);
    assert!(res.error.unwrap().starts_with("RecursionLimitExceeded"));
}

#[test]
fn invalid_specs_are_rejected_before_anything_runs() {
    let (_d, engine) = engine();
    let bad = DIAMOND.replace("dependencies: [c]", "dependencies: [nope]");
    let err = engine.run_workflow(&parse_spec(&bad).unwrap(), &config(), &[]).unwrap_err();
    assert!(matches!(err, RunError::Invalid(_)));
    assert!(engine.state().list_workflows().unwrap().is_empty());
}
