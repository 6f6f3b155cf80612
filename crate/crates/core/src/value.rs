//! Parameter and artifact values.
//!
//! Parameters travel as text. The [`TypeTag`] says how that text must parse;
//! artifacts travel as storage keys (or, for literals, local paths).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize};

/// Largest parameter text accepted, in bytes. Bigger payloads belong in artifacts.
pub const MAX_PARAMETER_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeTag {
    #[default]
    String,
    Int,
    Float,
    Bool,
    Json,
}

impl TypeTag {
    pub const ALL: [TypeTag; 5] = [
        TypeTag::String,
        TypeTag::Int,
        TypeTag::Float,
        TypeTag::Bool,
        TypeTag::Json,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TypeTag::String => "string",
            TypeTag::Int => "int",
            TypeTag::Float => "float",
            TypeTag::Bool => "bool",
            TypeTag::Json => "json",
        }
    }

    pub fn parse_word(word: &str) -> Option<TypeTag> {
        TypeTag::ALL.into_iter().find(|t| t.as_str() == word)
    }

    /// Checks `text` under this tag and returns its canonical form.
    ///
    /// Ints lose sign noise and leading zeros, bools are lowercased; float,
    /// json and string texts are kept verbatim.
    pub fn canonicalize(self, text: &str) -> Result<String, ValueError> {
        match self {
            TypeTag::String => Ok(text.to_string()),
            TypeTag::Int => canonical_int(text).ok_or(ValueError::Malformed { tag: self }),
            TypeTag::Float => {
                if is_float_text(text) {
                    Ok(text.to_string())
                } else {
                    Err(ValueError::Malformed { tag: self })
                }
            }
            TypeTag::Bool => match text {
                "true" | "True" | "TRUE" => Ok("true".to_string()),
                "false" | "False" | "FALSE" => Ok("false".to_string()),
                _ => Err(ValueError::Malformed { tag: self }),
            },
            TypeTag::Json => {
                serde_json::from_str::<serde_json::Value>(text)
                    .map_err(|_| ValueError::Malformed { tag: self })?;
                Ok(text.to_string())
            }
        }
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValueError {
    #[error("text does not parse as {tag}")]
    Malformed { tag: TypeTag },
    #[error("parameter text is {len} bytes, limit is {MAX_PARAMETER_BYTES}")]
    TooLarge { len: usize },
}

fn canonical_int(text: &str) -> Option<String> {
    let (negative, digits) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    // i64 range keeps ints portable to every consumer language.
    let magnitude = digits.trim_start_matches('0');
    let magnitude = if magnitude.is_empty() { "0" } else { magnitude };
    let mut out = String::with_capacity(magnitude.len() + 1);
    if negative && magnitude != "0" {
        out.push('-');
    }
    out.push_str(magnitude);
    out.parse::<i64>().ok()?;
    Some(out)
}

/// Decimal float grammar shared with JSON numbers, so stacked outputs embed cleanly.
fn is_float_text(text: &str) -> bool {
    let b = text.as_bytes();
    let mut i = 0;
    if b.first() == Some(&b'-') || b.first() == Some(&b'+') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let int_digits = i - int_start;
    let mut frac_digits = 0;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let s = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        frac_digits = i - s;
    }
    if int_digits + frac_digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let s = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == s {
            return false;
        }
    }
    i == b.len() && text.parse::<f64>().map(f64::is_finite).unwrap_or(false)
}

/// A typed parameter value; `text` is always the canonical serialized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterValue {
    pub text: String,
    #[serde(default)]
    pub type_tag: TypeTag,
}

impl ParameterValue {
    pub fn string(text: impl Into<String>) -> Self {
        ParameterValue {
            text: text.into(),
            type_tag: TypeTag::String,
        }
    }

    /// Parses `text` under `tag`, enforcing the size ceiling.
    pub fn parse(tag: TypeTag, text: &str) -> Result<Self, ValueError> {
        if text.len() > MAX_PARAMETER_BYTES {
            return Err(ValueError::TooLarge { len: text.len() });
        }
        Ok(ParameterValue {
            text: tag.canonicalize(text)?,
            type_tag: tag,
        })
    }

    /// The value as a JSON document: non-string tags embed as parsed JSON,
    /// strings (and anything that fails to parse) as JSON strings.
    pub fn to_json(&self) -> serde_json::Value {
        match self.type_tag {
            TypeTag::String => serde_json::Value::String(self.text.clone()),
            _ => serde_json::from_str(&self.text)
                .unwrap_or_else(|_| serde_json::Value::String(self.text.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactValue {
    /// Storage key, or an absolute local path for literal inputs.
    #[serde(default)]
    pub location: String,
    #[serde(default)]
    pub optional: bool,
}

impl ArtifactValue {
    pub fn at(location: impl Into<String>) -> Self {
        ArtifactValue {
            location: location.into(),
            optional: false,
        }
    }

    pub fn is_local_path(&self) -> bool {
        self.location.starts_with('/')
    }
}

/// Resolved parameters and artifacts of one side (inputs or outputs) of a step.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IoValues {
    #[serde(default)]
    pub parameters: BTreeMap<String, ParameterValue>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, ArtifactValue>,
}

impl IoValues {
    pub fn is_empty(&self) -> bool {
        self.parameters.is_empty() && self.artifacts.is_empty()
    }

    pub fn with_parameter(mut self, name: &str, value: ParameterValue) -> Self {
        self.parameters.insert(name.to_string(), value);
        self
    }

    pub fn with_artifact(mut self, name: &str, value: ArtifactValue) -> Self {
        self.artifacts.insert(name.to_string(), value);
        self
    }
}

/// Renders a JSON document as parameter text: strings unwrap, everything else
/// is compact JSON.
pub fn json_to_text(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => serde_json::to_string(other).unwrap_or_default(),
    }
}

/// Accepts any scalar or structured document where parameter text is
/// expected; documents stored as YAML often write `3` rather than `"3"`.
pub fn deserialize_text<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    let v = serde_json::Value::deserialize(d)?;
    Ok(json_to_text(&v))
}

pub fn deserialize_opt_text<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let v = Option::<serde_json::Value>::deserialize(d)?;
    Ok(v.map(|v| json_to_text(&v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int_canonical_forms() {
        assert_eq!(TypeTag::Int.canonicalize("3").unwrap(), "3");
        assert_eq!(TypeTag::Int.canonicalize("+007").unwrap(), "7");
        assert_eq!(TypeTag::Int.canonicalize("-0").unwrap(), "0");
        assert_eq!(TypeTag::Int.canonicalize("-12").unwrap(), "-12");
        assert!(TypeTag::Int.canonicalize("abc").is_err());
        assert!(TypeTag::Int.canonicalize("1.0").is_err());
        assert!(TypeTag::Int.canonicalize("").is_err());
        assert!(TypeTag::Int.canonicalize("99999999999999999999").is_err());
    }

    #[test]
    fn float_and_bool_and_json() {
        assert!(TypeTag::Float.canonicalize("2.5").is_ok());
        assert!(TypeTag::Float.canonicalize("1e3").is_ok());
        assert!(TypeTag::Float.canonicalize(".5").is_ok());
        assert!(TypeTag::Float.canonicalize("inf").is_err());
        assert!(TypeTag::Float.canonicalize("NaN").is_err());
        assert!(TypeTag::Float.canonicalize("1e").is_err());
        assert_eq!(TypeTag::Bool.canonicalize("True").unwrap(), "true");
        assert!(TypeTag::Bool.canonicalize("yes").is_err());
        assert!(TypeTag::Json.canonicalize("[1, 2]").is_ok());
        assert!(TypeTag::Json.canonicalize("[1, 2").is_err());
    }

    #[test]
    fn canonical_text_is_a_fixed_point() {
        for (tag, text) in [
            (TypeTag::Int, "-0042"),
            (TypeTag::Bool, "FALSE"),
            (TypeTag::Float, "3.25e-2"),
            (TypeTag::Json, "{\"a\": [1]}"),
            (TypeTag::String, " x "),
        ] {
            let once = tag.canonicalize(text).unwrap();
            assert_eq!(tag.canonicalize(&once).unwrap(), once);
        }
    }

    #[test]
    fn size_ceiling() {
        let big = "x".repeat(MAX_PARAMETER_BYTES + 1);
        assert_eq!(
            ParameterValue::parse(TypeTag::String, &big),
            Err(ValueError::TooLarge {
                len: MAX_PARAMETER_BYTES + 1
            })
        );
    }

    #[test]
    fn json_embedding() {
        let v = ParameterValue::parse(TypeTag::Int, "7").unwrap();
        assert_eq!(v.to_json(), serde_json::json!(7));
        assert_eq!(ParameterValue::string("7").to_json(), serde_json::json!("7"));
        assert_eq!(json_to_text(&serde_json::json!([1, "a"])), "[1,\"a\"]");
        assert_eq!(json_to_text(&serde_json::json!("a")), "a");
    }
}
