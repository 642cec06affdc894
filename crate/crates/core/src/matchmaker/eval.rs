//! Three-valued evaluation of requirement and rank expressions.
//!
//! Evaluation is total. A missing attribute, a type mismatch, integer overflow
//! and division by zero all yield `UNDEFINED`. `&&` and `||` absorb
//! `UNDEFINED` when the other side decides the result.

use std::cmp::Ordering;

use crate::model::{AttrValue, Attributes};

use super::expr::{BinaryOp, Expression, Literal, Scope, UnaryOp};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalValue {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
    Undefined,
}

impl EvalValue {
    pub fn is_true(&self) -> bool {
        matches!(self, EvalValue::Bool(true))
    }

    /// Numeric view used for rank; anything else counts as 0.
    pub fn rank_value(&self) -> f64 {
        match self {
            EvalValue::Int(i) => *i as f64,
            EvalValue::Real(r) => *r,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Val<'a> {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(&'a str),
    Undef,
}

impl Val<'_> {
    fn owned(self) -> EvalValue {
        match self {
            Val::Int(i) => EvalValue::Int(i),
            Val::Real(r) => EvalValue::Real(r),
            Val::Bool(b) => EvalValue::Bool(b),
            Val::Str(s) => EvalValue::Str(s.to_string()),
            Val::Undef => EvalValue::Undefined,
        }
    }
}

fn real(r: f64) -> Val<'static> {
    if r.is_finite() {
        Val::Real(r)
    } else {
        Val::Undef
    }
}

fn lookup<'a>(attrs: &'a Attributes, name: &str) -> Val<'a> {
    match attrs.get(name) {
        Some(AttrValue::Int(i)) => Val::Int(*i),
        Some(AttrValue::Real(r)) => real(*r),
        Some(AttrValue::Bool(b)) => Val::Bool(*b),
        Some(AttrValue::Str(s)) => Val::Str(s),
        None => Val::Undef,
    }
}

fn arith<'a>(op: BinaryOp, l: Val<'a>, r: Val<'a>) -> Val<'a> {
    match (l, r) {
        (Val::Int(a), Val::Int(b)) => {
            let v = match op {
                BinaryOp::Add => a.checked_add(b),
                BinaryOp::Sub => a.checked_sub(b),
                BinaryOp::Mul => a.checked_mul(b),
                BinaryOp::Div => a.checked_div(b),
                _ => unreachable!("not arithmetic"),
            };
            v.map_or(Val::Undef, Val::Int)
        }
        (Val::Int(_) | Val::Real(_), Val::Int(_) | Val::Real(_)) => {
            let (a, b) = (as_f64(l), as_f64(r));
            match op {
                BinaryOp::Add => real(a + b),
                BinaryOp::Sub => real(a - b),
                BinaryOp::Mul => real(a * b),
                BinaryOp::Div if b == 0.0 => Val::Undef,
                BinaryOp::Div => real(a / b),
                _ => unreachable!("not arithmetic"),
            }
        }
        _ => Val::Undef,
    }
}

fn as_f64(v: Val<'_>) -> f64 {
    match v {
        Val::Int(i) => i as f64,
        Val::Real(r) => r,
        _ => unreachable!("numeric only"),
    }
}

fn compare<'a>(op: BinaryOp, l: Val<'a>, r: Val<'a>) -> Val<'a> {
    let ordering = match (l, r) {
        (Val::Int(a), Val::Int(b)) => Some(a.cmp(&b)),
        (Val::Int(_) | Val::Real(_), Val::Int(_) | Val::Real(_)) => as_f64(l).partial_cmp(&as_f64(r)),
        (Val::Str(a), Val::Str(b)) => match op {
            BinaryOp::Eq => return Val::Bool(a == b),
            BinaryOp::Ne => return Val::Bool(a != b),
            _ => None,
        },
        (Val::Bool(a), Val::Bool(b)) => match op {
            BinaryOp::Eq => return Val::Bool(a == b),
            BinaryOp::Ne => return Val::Bool(a != b),
            _ => None,
        },
        _ => None,
    };
    let Some(ord) = ordering else { return Val::Undef };
    Val::Bool(match op {
        BinaryOp::Eq => ord == Ordering::Equal,
        BinaryOp::Ne => ord != Ordering::Equal,
        BinaryOp::Lt => ord == Ordering::Less,
        BinaryOp::Le => ord != Ordering::Greater,
        BinaryOp::Gt => ord == Ordering::Greater,
        BinaryOp::Ge => ord != Ordering::Less,
        _ => unreachable!("not a comparison"),
    })
}

fn eval<'a>(expr: &'a Expression, job: &'a Attributes, machine: &'a Attributes) -> Val<'a> {
    match expr {
        Expression::Literal(Literal::Int(i)) => Val::Int(*i),
        Expression::Literal(Literal::Real(r)) => real(*r),
        Expression::Literal(Literal::Bool(b)) => Val::Bool(*b),
        Expression::Literal(Literal::Str(s)) => Val::Str(s),
        Expression::Attr(Scope::Job, name) => lookup(job, name),
        Expression::Attr(Scope::Machine, name) => lookup(machine, name),
        Expression::Unary(UnaryOp::Not, e) => match eval(e, job, machine) {
            Val::Bool(b) => Val::Bool(!b),
            _ => Val::Undef,
        },
        Expression::Unary(UnaryOp::Neg, e) => match eval(e, job, machine) {
            Val::Int(i) => i.checked_neg().map_or(Val::Undef, Val::Int),
            Val::Real(r) => Val::Real(-r),
            _ => Val::Undef,
        },
        Expression::Binary(BinaryOp::And, l, r) => {
            let lv = eval(l, job, machine);
            if lv == Val::Bool(false) {
                return lv;
            }
            match (lv, eval(r, job, machine)) {
                (_, Val::Bool(false)) => Val::Bool(false),
                (Val::Bool(true), Val::Bool(true)) => Val::Bool(true),
                _ => Val::Undef,
            }
        }
        Expression::Binary(BinaryOp::Or, l, r) => {
            let lv = eval(l, job, machine);
            if lv == Val::Bool(true) {
                return lv;
            }
            match (lv, eval(r, job, machine)) {
                (_, Val::Bool(true)) => Val::Bool(true),
                (Val::Bool(false), Val::Bool(false)) => Val::Bool(false),
                _ => Val::Undef,
            }
        }
        Expression::Binary(op @ (BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div), l, r) => {
            arith(*op, eval(l, job, machine), eval(r, job, machine))
        }
        Expression::Binary(op, l, r) => compare(*op, eval(l, job, machine), eval(r, job, machine)),
    }
}

pub fn evaluate(expr: &Expression, job_attrs: &Attributes, machine_attrs: &Attributes) -> EvalValue {
    eval(expr, job_attrs, machine_attrs).owned()
}

/// `evaluate(..) == TRUE` without allocating.
pub fn is_satisfied(expr: &Expression, job_attrs: &Attributes, machine_attrs: &Attributes) -> bool {
    eval(expr, job_attrs, machine_attrs) == Val::Bool(true)
}

/// Rank value; UNDEFINED and non-numeric results count as 0.
pub fn rank_of(expr: &Expression, job_attrs: &Attributes, machine_attrs: &Attributes) -> f64 {
    match eval(expr, job_attrs, machine_attrs) {
        Val::Int(i) => i as f64,
        Val::Real(r) => r,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matchmaker::parse_expression;

    fn attrs(pairs: &[(&str, AttrValue)]) -> Attributes {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn eval_text(text: &str, job: &Attributes, machine: &Attributes) -> EvalValue {
        evaluate(&parse_expression(text).unwrap(), job, machine)
    }

    #[test]
    fn memory_requirement() {
        let machine = attrs(&[("memory_mb", AttrValue::Int(1024))]);
        assert_eq!(eval_text("machine.memory_mb >= 512", &Attributes::new(), &machine), EvalValue::Bool(true));
    }

    #[test]
    fn false_absorbs_undefined() {
        let machine = attrs(&[("memory_mb", AttrValue::Int(1024))]);
        assert_eq!(eval_text("machine.gpu == 1 && false", &Attributes::new(), &machine), EvalValue::Bool(false));
        assert_eq!(eval_text("false && machine.gpu == 1", &Attributes::new(), &machine), EvalValue::Bool(false));
        assert_eq!(eval_text("machine.gpu == 1 || true", &Attributes::new(), &machine), EvalValue::Bool(true));
        assert_eq!(eval_text("machine.gpu == 1 && true", &Attributes::new(), &machine), EvalValue::Undefined);
        assert_eq!(eval_text("machine.gpu == 1 || false", &Attributes::new(), &machine), EvalValue::Undefined);
    }

    #[test]
    fn missing_attribute_propagates() {
        assert_eq!(eval_text("job.size + 1", &Attributes::new(), &Attributes::new()), EvalValue::Undefined);
        assert_eq!(eval_text("!job.flag", &Attributes::new(), &Attributes::new()), EvalValue::Undefined);
    }

    #[test]
    fn numeric_coercion_and_errors() {
        let none = Attributes::new();
        assert_eq!(eval_text("1 < 1.5", &none, &none), EvalValue::Bool(true));
        assert_eq!(eval_text("2 == 2.0", &none, &none), EvalValue::Bool(true));
        assert_eq!(eval_text("7 / 2", &none, &none), EvalValue::Int(3));
        assert_eq!(eval_text("7 / 2.0", &none, &none), EvalValue::Real(3.5));
        assert_eq!(eval_text("1 / 0", &none, &none), EvalValue::Undefined);
        assert_eq!(eval_text("1.0 / 0", &none, &none), EvalValue::Undefined);
        assert_eq!(eval_text("9223372036854775807 + 1", &none, &none), EvalValue::Undefined);
        assert_eq!(eval_text("1e308 * 10", &none, &none), EvalValue::Undefined);
        assert_eq!(eval_text("\"a\" + 1", &none, &none), EvalValue::Undefined);
        assert_eq!(eval_text("true < false", &none, &none), EvalValue::Undefined);
        assert_eq!(eval_text("1 == true", &none, &none), EvalValue::Undefined);
    }

    #[test]
    fn strings_compare_case_sensitively() {
        let machine = attrs(&[("os", AttrValue::Str("LINUX".into()))]);
        let none = Attributes::new();
        assert_eq!(eval_text("machine.os == \"LINUX\"", &none, &machine), EvalValue::Bool(true));
        assert_eq!(eval_text("machine.os == \"linux\"", &none, &machine), EvalValue::Bool(false));
        assert_eq!(eval_text("machine.os < \"M\"", &none, &machine), EvalValue::Undefined);
    }

    #[test]
    fn rank_defaults_to_zero() {
        let none = Attributes::new();
        assert_eq!(rank_of(&parse_expression("job.x").unwrap(), &none, &none), 0.0);
        assert_eq!(rank_of(&parse_expression("\"s\"").unwrap(), &none, &none), 0.0);
        assert_eq!(rank_of(&parse_expression("2.5").unwrap(), &none, &none), 2.5);
    }
}
