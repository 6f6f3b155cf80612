//! Fan-out of list-valued inputs into step instances, and fan-in of their outputs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::signature::{ParameterDecl, Signature};
use crate::value::{json_to_text, ArtifactValue, IoValues, ParameterValue, TypeTag};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SliceError {
    #[error("sliced input `{name}` is not a JSON list")]
    NotAList { name: String },
    #[error("sliced inputs have different lengths: {lengths:?}")]
    LengthMismatch { lengths: BTreeMap<String, usize> },
    #[error("slice item is not an object with field `{0}`")]
    MissingItemField(String),
}

/// Elements of one sliced input, already split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SliceSource {
    /// Parameter element texts.
    Parameters(Vec<String>),
    /// Storage keys of the artifact's ordered children.
    Artifacts(Vec<String>),
}

impl SliceSource {
    pub fn len(&self) -> usize {
        match self {
            SliceSource::Parameters(v) | SliceSource::Artifacts(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits a JSON list into element texts (string elements unwrap).
pub fn split_list(name: &str, text: &str) -> Result<Vec<String>, SliceError> {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(serde_json::Value::Array(items)) => Ok(items.iter().map(json_to_text).collect()),
        _ => Err(SliceError::NotAList {
            name: name.to_string(),
        }),
    }
}

/// One concrete instance of a sliced step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceInstance {
    pub index: usize,
    pub key: String,
    /// Sliced inputs bound to their element, unsliced inputs unchanged.
    pub inputs: IoValues,
    /// Value of `item` for this instance.
    pub item: String,
}

/// Element text as it appears inside a JSON item object.
fn element_json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap_or_else(|_| serde_json::Value::String(text.to_string()))
}

/// Expands a sliced step into `n` instances.
///
/// `item` is the element itself when exactly one input is sliced, otherwise
/// a JSON object mapping each sliced input name to its element.
pub fn expand_slices(
    step_key: &str,
    sliced: &BTreeMap<String, SliceSource>,
    unsliced: &IoValues,
) -> Result<Vec<SliceInstance>, SliceError> {
    let lengths: BTreeMap<String, usize> = sliced.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let n = lengths.values().copied().next().unwrap_or(0);
    if lengths.values().any(|l| *l != n) {
        return Err(SliceError::LengthMismatch { lengths });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut inputs = unsliced.clone();
        let mut item_obj = serde_json::Map::new();
        for (name, src) in sliced {
            match src {
                SliceSource::Parameters(v) => {
                    inputs
                        .parameters
                        .insert(name.clone(), ParameterValue::string(v[i].clone()));
                    item_obj.insert(name.clone(), element_json(&v[i]));
                }
                SliceSource::Artifacts(v) => {
                    inputs
                        .artifacts
                        .insert(name.clone(), ArtifactValue::at(v[i].clone()));
                    item_obj.insert(name.clone(), serde_json::Value::String(v[i].clone()));
                }
            }
        }
        let item = if sliced.len() == 1 {
            match sliced.values().next() {
                Some(SliceSource::Parameters(v)) | Some(SliceSource::Artifacts(v)) => v[i].clone(),
                None => String::new(),
            }
        } else {
            json_to_text(&serde_json::Value::Object(item_obj))
        };
        out.push(SliceInstance {
            index: i,
            key: format!("{step_key}-{i}"),
            inputs,
            item,
        });
    }
    Ok(out)
}

/// `item.<field>` of a JSON object item.
pub fn item_field(item: &str, field: &str) -> Result<String, SliceError> {
    match serde_json::from_str::<serde_json::Value>(item) {
        Ok(serde_json::Value::Object(map)) => map
            .get(field)
            .map(json_to_text)
            .ok_or_else(|| SliceError::MissingItemField(field.to_string())),
        _ => Err(SliceError::MissingItemField(field.to_string())),
    }
}

/// Stacked outputs of a slice group.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StackedOutputs {
    /// JSON lists, `null` where an instance produced nothing.
    pub parameters: BTreeMap<String, ParameterValue>,
    /// Per-instance artifact keys to place under children `0..n-1`.
    pub artifacts: BTreeMap<String, Vec<Option<String>>>,
}

/// Stacks per-instance outputs in index order.
///
/// `outputs[i]` is instance `i`'s outputs, or `None` if it failed or was
/// skipped. The result depends only on this slice, never on completion order.
pub fn aggregate_slice_outputs(
    outputs: &[Option<IoValues>],
    stacked: &BTreeSet<String>,
    template_outputs: &Signature,
) -> StackedOutputs {
    let mut result = StackedOutputs::default();
    for name in stacked {
        if template_outputs.parameters.contains_key(name) {
            let list: Vec<serde_json::Value> = outputs
                .iter()
                .map(|o| {
                    o.as_ref()
                        .and_then(|o| o.parameters.get(name))
                        .map_or(serde_json::Value::Null, ParameterValue::to_json)
                })
                .collect();
            result.parameters.insert(
                name.clone(),
                ParameterValue {
                    text: json_to_text(&serde_json::Value::Array(list)),
                    type_tag: TypeTag::Json,
                },
            );
        } else if template_outputs.artifacts.contains_key(name) {
            let keys = outputs
                .iter()
                .map(|o| {
                    o.as_ref()
                        .and_then(|o| o.artifacts.get(name))
                        .map(|a| a.location.clone())
                })
                .collect();
            result.artifacts.insert(name.clone(), keys);
        }
    }
    result
}

/// Output signature of a slice group: stacked parameters become JSON lists;
/// unstacked outputs are not exposed.
pub fn stacked_signature(template_outputs: &Signature, stacked: &BTreeSet<String>) -> Signature {
    let mut sig = Signature::default();
    for name in stacked {
        if let Some(p) = template_outputs.parameters.get(name) {
            sig.parameters.insert(
                name.clone(),
                ParameterDecl {
                    type_tag: TypeTag::Json,
                    optional: p.optional,
                    default: None,
                },
            );
        } else if let Some(a) = template_outputs.artifacts.get(name) {
            sig.artifacts.insert(name.clone(), a.clone());
        }
    }
    sig
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn params(v: &[&str]) -> SliceSource {
        SliceSource::Parameters(v.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn three_instances() {
        let mut sliced = BTreeMap::new();
        sliced.insert("x".to_string(), params(&["10", "20", "30"]));
        let unsliced = IoValues::default().with_parameter("c", ParameterValue::string("k"));
        let inst = expand_slices("step", &sliced, &unsliced).unwrap();
        assert_eq!(inst.len(), 3);
        for (i, want) in ["10", "20", "30"].iter().enumerate() {
            assert_eq!(inst[i].inputs.parameters["x"].text, *want);
            assert_eq!(inst[i].inputs.parameters["c"].text, "k");
            assert_eq!(inst[i].key, format!("step-{i}"));
            assert_eq!(inst[i].item, *want);
        }
    }

    #[test]
    fn length_mismatch() {
        let mut sliced = BTreeMap::new();
        sliced.insert("a".to_string(), params(&["1", "2"]));
        sliced.insert("b".to_string(), params(&["1", "2", "3"]));
        assert!(matches!(
            expand_slices("s", &sliced, &IoValues::default()),
            Err(SliceError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn empty_slice_has_no_instances() {
        let mut sliced = BTreeMap::new();
        sliced.insert("a".to_string(), params(&[]));
        assert!(expand_slices("s", &sliced, &IoValues::default()).unwrap().is_empty());
        let sig = Signature::new().parameter("y", ParameterDecl::of(TypeTag::Int));
        let stacked: BTreeSet<String> = ["y".to_string()].into();
        let agg = aggregate_slice_outputs(&[], &stacked, &sig);
        assert_eq!(agg.parameters["y"].text, "[]");
    }

    #[test]
    fn multi_input_item_is_object() {
        let mut sliced = BTreeMap::new();
        sliced.insert("a".to_string(), params(&["1"]));
        sliced.insert("b".to_string(), params(&["x"]));
        let inst = expand_slices("s", &sliced, &IoValues::default()).unwrap();
        assert_eq!(inst[0].item, "{\"a\":1,\"b\":\"x\"}");
        assert_eq!(item_field(&inst[0].item, "b").unwrap(), "x");
        assert!(item_field(&inst[0].item, "zz").is_err());
    }

    #[test]
    fn split_list_unwraps_strings() {
        assert_eq!(split_list("x", "[1, \"a\", [2]]").unwrap(), vec!["1", "a", "[2]"]);
        assert!(split_list("x", "{}").is_err());
    }

    #[test]
    fn stacking_with_gap() {
        let sig = Signature::new().parameter("y", ParameterDecl::of(TypeTag::Int));
        let out = |v: &str| {
            Some(IoValues::default().with_parameter("y", ParameterValue::parse(TypeTag::Int, v).unwrap()))
        };
        let stacked: BTreeSet<String> = ["y".to_string()].into();
        let agg = aggregate_slice_outputs(&[out("1"), out("2"), out("3")], &stacked, &sig);
        assert_eq!(agg.parameters["y"].text, "[1,2,3]");
        let agg = aggregate_slice_outputs(&[out("1"), None, out("3")], &stacked, &sig);
        assert_eq!(agg.parameters["y"].text, "[1,null,3]");
    }
}
