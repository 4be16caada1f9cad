use caf_core::matchlang::{eval, eval_requirements, parse_requirements, BinOp, EvalError, Expr};
use caf_core::model::{Attributes, Value};
use proptest::prelude::*;

fn ad() -> Attributes {
    let mut a = Attributes::new();
    a.insert("Memory".into(), Value::Int(4096));
    a.insert("Cpus".into(), Value::Int(4));
    a.insert("Site".into(), Value::Str("FNAL".into()));
    a.insert("Opportunistic".into(), Value::Bool(true));
    a
}

/// Binding strength in the reference grammar, written out independently of
/// the parser.
fn strength(op: &str) -> u8 {
    match op {
        "||" => 1,
        "&&" => 2,
        "==" | "!=" | "<" | "<=" | ">" | ">=" => 3,
        "+" | "-" => 4,
        "*" | "/" => 5,
        _ => unreachable!("{op}"),
    }
}

const OPS: [&str; 12] = ["||", "&&", "==", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/"];
const OPERANDS: [&str; 12] = ["0", "1", "2", "7", "4096", "Memory", "Cpus", "Site", "\"FNAL\"", "true", "false", "!Opportunistic"];

/// Fully parenthesize `a0 op0 a1 op1 ... an` with the shunting-yard
/// algorithm (all operators left-associative).
fn parenthesize(operands: &[&str], ops: &[&str]) -> String {
    let mut out: Vec<String> = vec![operands[0].to_string()];
    let mut stack: Vec<&str> = Vec::new();
    let reduce = |out: &mut Vec<String>, op: &str| {
        let r = out.pop().unwrap();
        let l = out.pop().unwrap();
        out.push(format!("({l} {op} {r})"));
    };
    for (op, rhs) in ops.iter().zip(&operands[1..]) {
        while let Some(top) = stack.last() {
            if strength(top) >= strength(op) {
                let top = stack.pop().unwrap();
                reduce(&mut out, top);
            } else {
                break;
            }
        }
        stack.push(op);
        out.push(rhs.to_string());
    }
    while let Some(top) = stack.pop() {
        reduce(&mut out, top);
    }
    assert_eq!(out.len(), 1);
    out.pop().unwrap()
}

/// Results compared modulo source positions, which differ between the flat
/// and parenthesized spellings.
fn outcome(r: Result<Value, EvalError>) -> String {
    match r {
        Ok(v) => format!("{v:?}"),
        Err(EvalError::DivisionByZero(_)) => "division by zero".into(),
        Err(EvalError::Overflow(_)) => "overflow".into(),
        Err(e) => format!("{e:?}"),
    }
}

fn flat_expr() -> impl Strategy<Value = (Vec<&'static str>, Vec<&'static str>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            proptest::collection::vec(proptest::sample::select(&OPERANDS[..]), n + 1),
            proptest::collection::vec(proptest::sample::select(&OPS[..]), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn precedence_matches_parenthesized_reference((operands, ops) in flat_expr()) {
        let mut flat = operands[0].to_string();
        for (op, rhs) in ops.iter().zip(&operands[1..]) {
            flat = format!("{flat} {op} {rhs}");
        }
        let reference = parenthesize(&operands, &ops);
        let got = parse_requirements(&flat).unwrap();
        let want = parse_requirements(&reference).unwrap();
        prop_assert_eq!(&got, &want, "{} vs {}", flat, reference);
        prop_assert_eq!(outcome(eval(&got, &ad())), outcome(eval(&want, &ad())));
    }
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0i64..100_000).prop_map(Expr::Int),
        "[a-z ]{0,6}".prop_map(Expr::Str),
        any::<bool>().prop_map(Expr::Bool),
        proptest::sample::select(vec!["Memory", "Cpus", "Site", "Arch_2"]).prop_map(Expr::attr),
    ];
    leaf.prop_recursive(6, 48, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Not(Box::new(e))),
            (proptest::sample::select(BinOp::ALL.to_vec()), inner.clone(), inner)
                .prop_map(|(op, l, r)| Expr::binary(op, l, r)),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn printer_output_reparses_to_same_tree(e in arb_expr()) {
        let text = e.to_string();
        prop_assert_eq!(parse_requirements(&text).unwrap(), e, "{}", text);
    }
}

#[test]
fn and_short_circuits_past_division_by_zero() {
    let e = parse_requirements("false && (1/0==1)").unwrap();
    assert_eq!(eval_requirements(&e, &ad()), Ok(false));
    let e = parse_requirements("true || (1/0==1)").unwrap();
    assert_eq!(eval_requirements(&e, &ad()), Ok(true));
    let e = parse_requirements("true && (1/0==1)").unwrap();
    assert!(matches!(eval_requirements(&e, &ad()), Err(EvalError::DivisionByZero(_))));
}

#[test]
fn error_positions() {
    let err = parse_requirements("Memory >").unwrap_err();
    assert_eq!((err.line, err.column), (1, 9));
    let err = parse_requirements("Memory >= 2048 &&\n  (Arch == ").unwrap_err();
    assert_eq!((err.line, err.column), (2, 12));
}
