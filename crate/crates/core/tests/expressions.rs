mod support {
    pub mod expr_oracle;
}

use opflow_core::expr::{
    evaluate_condition, is_number_literal, parse_expression, placeholders, render_placeholders,
    CmpOp, Expr, ExprError, Scope,
};
use proptest::prelude::*;
use support::expr_oracle;

#[test]
fn exhaustive_domain_matches_oracle() {
    let cases = expr_oracle::cases();
    assert!(cases.len() > 8_000);
    let empty = Scope::new();
    for (source, expected) in cases {
        let got = evaluate_condition(&source, &empty);
        match expected {
            Some(b) => assert_eq!(got, Ok(b), "{source}"),
            None => assert!(matches!(got, Err(ExprError::Type(_))), "{source}: {got:?}"),
        }
    }
}

#[test]
fn syntax_errors_carry_offsets() {
    for bad in ["", "1 <", "(true", "'open", "1 < 2 < 3", "&& true", "true false"] {
        assert!(matches!(parse_expression(bad), Err(ExprError::Parse { .. })), "{bad}");
    }
}

#[test]
fn very_long_integers_compare_exactly() {
    let a = "123456789012345678901234567890";
    let b = "123456789012345678901234567891";
    assert_eq!(evaluate_condition(&format!("{a} < {b}"), &Scope::new()), Ok(true));
    assert_eq!(evaluate_condition(&format!("-{a} > -{b}"), &Scope::new()), Ok(true));
    assert_eq!(evaluate_condition(&format!("00{a} == {a}"), &Scope::new()), Ok(true));
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (any::<i32>(), proptest::option::of(0u32..1000))
            .prop_map(|(i, f)| Expr::Number(match f {
                Some(f) => format!("{i}.{f}"),
                None => i.to_string(),
            })),
        "[a-z '\"\\\\\n\t]{0,5}".prop_map(Expr::Str),
        any::<bool>().prop_map(Expr::Bool),
    ];
    let op = prop_oneof![
        Just(CmpOp::Eq),
        Just(CmpOp::Ne),
        Just(CmpOp::Lt),
        Just(CmpOp::Le),
        Just(CmpOp::Gt),
        Just(CmpOp::Ge)
    ];
    leaf.prop_recursive(5, 40, 2, move |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Not(Box::new(e))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Or(Box::new(a), Box::new(b))),
            (op.clone(), inner.clone(), inner)
                .prop_map(|(o, a, b)| Expr::Cmp(o, Box::new(a), Box::new(b))),
        ]
    })
}

/// A value as the renderer classifies it outside quotes.
fn classify(v: &str) -> expr_oracle::Atom {
    let leak = |s: &str| -> &'static str { Box::leak(s.to_string().into_boxed_str()) };
    if is_number_literal(v) {
        expr_oracle::Atom::Num(leak(v))
    } else if v == "true" || v == "false" {
        expr_oracle::Atom::Bool(v == "true")
    } else {
        expr_oracle::Atom::Str(leak(v))
    }
}

fn placeholder_regex() -> regex::Regex {
    regex::Regex::new(r"\{\{ *([A-Za-z0-9_.\-]+) *\}\}").unwrap()
}

proptest! {
    #[test]
    fn print_then_parse_is_identity(e in arb_expr()) {
        let printed = e.to_string();
        prop_assert_eq!(parse_expression(&printed), Ok(e), "{}", printed);
    }

    #[test]
    fn injected_values_compare_like_literals(
        a in prop_oneof!["-?[0-9]{1,3}(\\.[0-9]{1,2})?", "true|false", "[a-z'\" \\\\]{0,4}"],
        b in prop_oneof!["-?[0-9]{1,3}(\\.[0-9]{1,2})?", "true|false", "[a-z'\" \\\\]{0,4}"],
    ) {
        let scope = Scope::new().with("a", a.clone()).with("b", b.clone());
        for op in ["==", "!="] {
            let got = evaluate_condition(&format!("{{{{a}}}} {op} {{{{b}}}}"), &scope);
            prop_assert_eq!(got, Ok(expr_oracle::compare(op, classify(&a), classify(&b)).unwrap()));
        }
        // Inside quotes the value is always a string.
        let got = evaluate_condition("'{{a}}' == \"{{b}}\"", &scope);
        prop_assert_eq!(got, Ok(a == b));
    }

    #[test]
    fn placeholder_scan_matches_regex(text in "[{} a.b_\\-x\n\u{e9}]{0,40}") {
        let ours: Vec<(usize, usize, String)> = placeholders(&text)
            .into_iter()
            .map(|p| (p.span.start, p.span.end, p.path.to_string()))
            .collect();
        let theirs: Vec<(usize, usize, String)> = placeholder_regex()
            .captures_iter(&text)
            .map(|c| {
                let m = c.get(0).unwrap();
                (m.start(), m.end(), c[1].to_string())
            })
            .collect();
        prop_assert_eq!(ours, theirs);
    }

    #[test]
    fn rendering_is_single_pass(value in "[{}a ]{0,12}") {
        let scope = Scope::new().with("v", value.clone()).with("a", "WRONG");
        prop_assert_eq!(render_placeholders("<{{v}}>", &scope).unwrap(), format!("<{value}>"));
    }
}
