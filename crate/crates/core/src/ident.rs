//! Identifier and key syntax.

/// `[A-Za-z][A-Za-z0-9_-]{0,127}`: names of workflows, templates, steps and
/// signature entries. Safe in directory names and placeholder paths.
pub fn is_identifier(s: &str) -> bool {
    let b = s.as_bytes();
    !b.is_empty()
        && b.len() <= 128
        && b[0].is_ascii_alphabetic()
        && b[1..]
            .iter()
            .all(|c| c.is_ascii_alphanumeric() || *c == b'_' || *c == b'-')
}

/// `[A-Za-z0-9][A-Za-z0-9_.-]{0,199}`: resolved step keys, which become
/// directory names.
pub fn is_valid_key(s: &str) -> bool {
    let b = s.as_bytes();
    !b.is_empty()
        && b.len() <= 200
        && b[0].is_ascii_alphanumeric()
        && b[1..]
            .iter()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b'.'))
}
