//! Reading and writing workflow documents (YAML or JSON).

use std::fs;
use std::io;
use std::path::Path;

use opflow_core::workflow::WorkflowSpec;

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("parsing spec: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("parsing spec: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parses a YAML document (JSON is accepted as a YAML subset).
///
/// YAML goes through a JSON value first so enums use the same
/// `{variant: body}` shape in both formats.
pub fn parse_spec(text: &str) -> Result<WorkflowSpec, SpecError> {
    let doc: serde_json::Value = serde_yaml::from_str(text)?;
    Ok(serde_json::from_value(doc)?)
}

pub fn load_spec(path: &Path) -> Result<WorkflowSpec, SpecError> {
    let text = fs::read_to_string(path).map_err(|source| SpecError::Read {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        parse_spec(&text)
    }
}

pub fn spec_to_yaml(spec: &WorkflowSpec) -> Result<String, SpecError> {
    let doc = serde_json::to_value(spec)?;
    Ok(serde_yaml::to_string(&doc)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HELLO: &str = r#"
apiVersion: opflow/v1
name: hello
entrypoint: main
global_inputs:
  parameters:
    who: {default: world}
    n: {type_tag: int, default: 3}
templates:
  say:
    script:
      command: [sh]
      script: |
        echo "hello {{inputs.parameters.who}}" > out
      inputs:
        parameters:
          who: {}
      outputs:
        parameters:
          msg: {}
      output_parameter_sources: {msg: out}
  main:
    steps:
      inputs:
        parameters:
          who: {}
      body:
        - name: greet
          template: say
          input_bindings:
            who: {template_input: who}
          key_template: "greet-{{inputs.parameters.who}}"
          continue_on_success_ratio: 0.5
          slices: null
"#;

    #[test]
    fn yaml_round_trip() {
        let spec = parse_spec(HELLO).unwrap();
        assert_eq!(spec.name, "hello");
        assert_eq!(spec.global_inputs.parameters["n"].default.as_deref(), Some("3"));
        assert_eq!(spec.template("say").unwrap().name(), "say");
        let again = parse_spec(&spec_to_yaml(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<WorkflowSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = HELLO.replace("entrypoint: main", "entrypoint: main\ncolour: blue");
        assert!(parse_spec(&bad).is_err());
        let bad = HELLO.replace("apiVersion: opflow/v1", "apiVersion: opflow/v2");
        assert!(parse_spec(&bad).is_err());
    }
}
