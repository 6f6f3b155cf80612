//! Table-driven reference for condition evaluation over a small operand
//! domain. Builds source text and the expected result side by side without
//! going through the library parser.

#![allow(dead_code)]

#[derive(Debug, Clone, Copy)]
pub enum Atom {
    Num(&'static str),
    Str(&'static str),
    Bool(bool),
}

impl Atom {
    pub fn source(self) -> String {
        match self {
            Atom::Num(n) => n.to_string(),
            Atom::Str(s) => format!("'{s}'"),
            Atom::Bool(b) => b.to_string(),
        }
    }

    fn text(self) -> String {
        match self {
            Atom::Num(n) | Atom::Str(n) => n.to_string(),
            Atom::Bool(b) => b.to_string(),
        }
    }
}

pub const CMP_ATOMS: [Atom; 14] = [
    Atom::Num("0"),
    Atom::Num("1"),
    Atom::Num("-1"),
    Atom::Num("2.5"),
    Atom::Num("2.50"),
    Atom::Num("10"),
    Atom::Num("1e1"),
    Atom::Str("a"),
    Atom::Str("b"),
    Atom::Str(""),
    Atom::Str("1"),
    Atom::Str("true"),
    Atom::Bool(true),
    Atom::Bool(false),
];

pub const OPS: [&str; 6] = ["==", "!=", "<", "<=", ">", ">="];

/// `None` is a type error.
pub fn compare(op: &str, a: Atom, b: Atom) -> Option<bool> {
    if let (Atom::Num(x), Atom::Num(y)) = (a, b) {
        let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
        return Some(match op {
            "==" => x == y,
            "!=" => x != y,
            "<" => x < y,
            "<=" => x <= y,
            ">" => x > y,
            ">=" => x >= y,
            _ => unreachable!(),
        });
    }
    let eq = match (a, b) {
        (Atom::Bool(x), Atom::Bool(y)) => x == y,
        _ => a.text() == b.text(),
    };
    match op {
        "==" => Some(eq),
        "!=" => Some(!eq),
        _ => None,
    }
}

/// An operand of `&&`/`||`: its source and its value when evaluated
/// (`None` = not a boolean).
#[derive(Debug, Clone)]
pub struct Term {
    pub source: String,
    pub value: Option<bool>,
}

pub fn logic_terms() -> Vec<Term> {
    let base = [
        ("true", Some(true)),
        ("false", Some(false)),
        ("1", None),
        ("'x'", None),
        ("(0 < 1)", Some(true)),
        ("('a' == 'b')", Some(false)),
    ];
    let mut out = Vec::new();
    for (s, v) in base {
        out.push(Term { source: s.to_string(), value: v });
        out.push(Term {
            source: format!("!{s}"),
            value: v.map(|b| !b),
        });
    }
    out
}

/// Evaluates `t0 op0 t1 op1 t2 ...` with `!` already folded into the terms,
/// `&&` binding tighter than `||`, left to right, short-circuiting.
pub fn eval_chain(terms: &[&Term], ops: &[&str]) -> Option<bool> {
    // Split into `||`-separated groups of `&&`-joined terms.
    let mut groups: Vec<Vec<&Term>> = vec![vec![terms[0]]];
    for (op, t) in ops.iter().zip(&terms[1..]) {
        match *op {
            "&&" => groups.last_mut().unwrap().push(t),
            "||" => groups.push(vec![t]),
            _ => unreachable!(),
        }
    }
    for g in groups {
        let mut acc = true;
        for t in g {
            if !acc {
                break;
            }
            acc = t.value?;
        }
        if acc {
            return Some(true);
        }
    }
    Some(false)
}

/// Every case of the domain: (source, expected).
pub fn cases() -> Vec<(String, Option<bool>)> {
    let mut out = Vec::new();
    for a in CMP_ATOMS {
        let expect = match a {
            Atom::Bool(b) => Some(b),
            _ => None,
        };
        out.push((a.source(), expect));
        for b in CMP_ATOMS {
            for op in OPS {
                out.push((format!("{} {op} {}", a.source(), b.source()), compare(op, a, b)));
            }
        }
    }
    let terms = logic_terms();
    for t in &terms {
        out.push((t.source.clone(), t.value));
    }
    for a in &terms {
        for b in &terms {
            for op in ["&&", "||"] {
                out.push((format!("{} {op} {}", a.source, b.source), eval_chain(&[a, b], &[op])));
            }
            for c in &terms {
                for op1 in ["&&", "||"] {
                    for op2 in ["&&", "||"] {
                        out.push((
                            format!("{} {op1} {} {op2} {}", a.source, b.source, c.source),
                            eval_chain(&[a, b, c], &[op1, op2]),
                        ));
                    }
                }
            }
        }
    }
    out
}
