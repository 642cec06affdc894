//! Requirement/rank expression AST, parser and printer.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! or      := and ( "||" and )*
//! and     := cmp ( "&&" cmp )*
//! cmp     := add ( ("==" | "!=" | "<" | "<=" | ">" | ">=") add )*
//! add     := mul ( ("+" | "-") mul )*
//! mul     := unary ( ("*" | "/") unary )*
//! unary   := ("!" | "-") unary | primary
//! primary := INT | REAL | "true" | "false" | STRING
//!          | ("job" | "machine") "." IDENT | "(" or ")"
//! ```
//!
//! All binary operators are left-associative. The printer emits the minimal
//! parentheses, so `parse(print(e)) == e` for every tree the parser can build.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Job,
    Machine,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 12] = [
        BinaryOp::Or,
        BinaryOp::And,
        BinaryOp::Eq,
        BinaryOp::Ne,
        BinaryOp::Lt,
        BinaryOp::Le,
        BinaryOp::Gt,
        BinaryOp::Ge,
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
    ];

    fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Eq | BinaryOp::Ne | BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 3,
            BinaryOp::Add | BinaryOp::Sub => 4,
            BinaryOp::Mul | BinaryOp::Div => 5,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Or => "||",
            BinaryOp::And => "&&",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }
}

const UNARY_PREC: u8 = 6;
const PRIMARY_PREC: u8 = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Literal(Literal),
    Attr(Scope, String),
    Unary(UnaryOp, Box<Expression>),
    Binary(BinaryOp, Box<Expression>, Box<Expression>),
}

impl Expression {
    pub fn always_true() -> Self {
        Expression::Literal(Literal::Bool(true))
    }

    pub fn attr(scope: Scope, name: impl Into<String>) -> Self {
        Expression::Attr(scope, name.into())
    }

    pub fn int(v: i64) -> Self {
        Expression::Literal(Literal::Int(v))
    }

    pub fn binary(op: BinaryOp, lhs: Expression, rhs: Expression) -> Self {
        Expression::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn unary(op: UnaryOp, operand: Expression) -> Self {
        Expression::Unary(op, Box::new(operand))
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Literal(_) | Expression::Attr(..) => PRIMARY_PREC,
            Expression::Unary(..) => UNARY_PREC,
            Expression::Binary(op, ..) => op.precedence(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expression::Literal(_) | Expression::Attr(..) => 1,
            Expression::Unary(_, e) => 1 + e.depth(),
            Expression::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, child: &Expression, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Literal(Literal::Int(i)) => write!(f, "{i}"),
            Expression::Literal(Literal::Real(r)) => write!(f, "{r:?}"),
            Expression::Literal(Literal::Bool(b)) => write!(f, "{b}"),
            Expression::Literal(Literal::Str(s)) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Expression::Attr(Scope::Job, name) => write!(f, "job.{name}"),
            Expression::Attr(Scope::Machine, name) => write!(f, "machine.{name}"),
            Expression::Unary(op, operand) => {
                f.write_str(match op {
                    UnaryOp::Not => "!",
                    UnaryOp::Neg => "-",
                })?;
                write_child(f, operand, operand.precedence() < UNARY_PREC)
            }
            Expression::Binary(op, lhs, rhs) => {
                let p = op.precedence();
                write_child(f, lhs, lhs.precedence() < p)?;
                write!(f, " {} ", op.symbol())?;
                write_child(f, rhs, rhs.precedence() <= p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    At { offset: usize, message: String },
    #[error("syntax error at end of input: {message}")]
    EndOfInput { message: String },
}

impl ParseError {
    pub fn offset(&self, input_len: usize) -> usize {
        match self {
            ParseError::At { offset, .. } => *offset,
            ParseError::EndOfInput { .. } => input_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    /// Magnitude; `-9223372036854775808` only fits once the sign is applied.
    Int(u64),
    Real(f64),
    Str(String),
    Ident(String),
    Dot,
    LParen,
    RParen,
    Bang,
    Minus,
    Op(BinaryOp),
}

fn lex(input: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let bytes = input.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset: usize, message: &str| ParseError::At { offset, message: message.to_string() };
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let mut real = false;
                if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                    real = true;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        real = true;
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &input[start..i];
                let tok = if real {
                    Token::Real(text.parse().map_err(|_| err(start, "bad real literal"))?)
                } else {
                    Token::Int(text.parse().map_err(|_| err(start, "integer literal out of range"))?)
                };
                out.push((start, tok));
                continue;
            }
            b'"' => {
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(ch) = input[i..].chars().next() else {
                        return Err(ParseError::EndOfInput { message: "unterminated string".into() });
                    };
                    i += ch.len_utf8();
                    match ch {
                        '"' => break,
                        '\\' => {
                            let Some(esc) = input[i..].chars().next() else {
                                return Err(ParseError::EndOfInput { message: "unterminated string".into() });
                            };
                            i += esc.len_utf8();
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                '"' => '"',
                                '\\' => '\\',
                                _ => return Err(err(i - 1, "unknown escape")),
                            });
                        }
                        ch => s.push(ch),
                    }
                }
                out.push((start, Token::Str(s)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Token::Ident(input[start..i].to_string())));
                continue;
            }
            _ => {}
        }
        let two = if i + 1 < bytes.len() { &input[i..i + 2] } else { "" };
        let (tok, len) = match two {
            "||" => (Token::Op(BinaryOp::Or), 2),
            "&&" => (Token::Op(BinaryOp::And), 2),
            "==" => (Token::Op(BinaryOp::Eq), 2),
            "!=" => (Token::Op(BinaryOp::Ne), 2),
            "<=" => (Token::Op(BinaryOp::Le), 2),
            ">=" => (Token::Op(BinaryOp::Ge), 2),
            _ => match c {
                b'<' => (Token::Op(BinaryOp::Lt), 1),
                b'>' => (Token::Op(BinaryOp::Gt), 1),
                b'+' => (Token::Op(BinaryOp::Add), 1),
                b'-' => (Token::Minus, 1),
                b'*' => (Token::Op(BinaryOp::Mul), 1),
                b'/' => (Token::Op(BinaryOp::Div), 1),
                b'!' => (Token::Bang, 1),
                b'(' => (Token::LParen, 1),
                b')' => (Token::RParen, 1),
                b'.' => (Token::Dot, 1),
                _ => return Err(err(start, "unexpected character")),
            },
        };
        out.push((start, tok));
        i += len;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn error(&self, message: &str) -> ParseError {
        match self.tokens.get(self.pos) {
            Some((offset, _)) => ParseError::At { offset: *offset, message: message.to_string() },
            None => ParseError::EndOfInput { message: message.to_string() },
        }
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn binary_level(
        &mut self,
        ops: &[BinaryOp],
        operand: fn(&mut Parser) -> Result<Expression, ParseError>,
    ) -> Result<Expression, ParseError> {
        let mut lhs = operand(self)?;
        loop {
            let op = match self.peek() {
                Some(Token::Op(op)) if ops.contains(op) => *op,
                Some(Token::Minus) if ops.contains(&BinaryOp::Sub) => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = operand(self)?;
            lhs = Expression::binary(op, lhs, rhs);
        }
    }

    fn or(&mut self) -> Result<Expression, ParseError> {
        self.binary_level(&[BinaryOp::Or], Parser::and)
    }

    fn and(&mut self) -> Result<Expression, ParseError> {
        self.binary_level(&[BinaryOp::And], Parser::cmp)
    }

    fn cmp(&mut self) -> Result<Expression, ParseError> {
        self.binary_level(
            &[BinaryOp::Eq, BinaryOp::Ne, BinaryOp::Lt, BinaryOp::Le, BinaryOp::Gt, BinaryOp::Ge],
            Parser::add,
        )
    }

    fn add(&mut self) -> Result<Expression, ParseError> {
        self.binary_level(&[BinaryOp::Add, BinaryOp::Sub], Parser::mul)
    }

    fn mul(&mut self) -> Result<Expression, ParseError> {
        self.binary_level(&[BinaryOp::Mul, BinaryOp::Div], Parser::unary)
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        match self.peek() {
            Some(Token::Bang) => {
                self.pos += 1;
                Ok(Expression::unary(UnaryOp::Not, self.unary()?))
            }
            Some(Token::Minus) => {
                self.pos += 1;
                if let Some(Token::Int(m)) = self.peek() {
                    if *m == i64::MIN.unsigned_abs() {
                        self.pos += 1;
                        return Ok(Expression::Literal(Literal::Int(i64::MIN)));
                    }
                }
                Ok(Expression::unary(UnaryOp::Neg, self.unary()?))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expression, ParseError> {
        let err = self.error("expected an operand");
        match self.next() {
            Some(Token::Int(m)) => match i64::try_from(m) {
                Ok(i) => Ok(Expression::Literal(Literal::Int(i))),
                Err(_) => {
                    self.pos -= 1;
                    Err(self.error("integer literal out of range"))
                }
            },
            Some(Token::Real(r)) => Ok(Expression::Literal(Literal::Real(r))),
            Some(Token::Str(s)) => Ok(Expression::Literal(Literal::Str(s))),
            Some(Token::LParen) => {
                let inner = self.or()?;
                match self.next() {
                    Some(Token::RParen) => Ok(inner),
                    _ => {
                        self.pos -= 1;
                        Err(self.error("expected ')'"))
                    }
                }
            }
            Some(Token::Ident(word)) => match word.as_str() {
                "true" => Ok(Expression::Literal(Literal::Bool(true))),
                "false" => Ok(Expression::Literal(Literal::Bool(false))),
                "job" | "machine" => {
                    let scope = if word == "job" { Scope::Job } else { Scope::Machine };
                    if self.next() != Some(Token::Dot) {
                        self.pos -= 1;
                        return Err(self.error("expected '.' after scope"));
                    }
                    match self.next() {
                        Some(Token::Ident(name)) => Ok(Expression::Attr(scope, name)),
                        _ => {
                            self.pos -= 1;
                            Err(self.error("expected attribute name"))
                        }
                    }
                }
                _ => {
                    self.pos -= 1;
                    Err(self.error("attribute references need a job. or machine. scope"))
                }
            },
            _ => Err(err),
        }
    }
}

pub fn parse_expression(text: &str) -> Result<Expression, ParseError> {
    let tokens = lex(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let expr = parser.or()?;
    if parser.pos < parser.tokens.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    Ok(expr)
}

impl FromStr for Expression {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expression(s)
    }
}

impl Serialize for Expression {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expression {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_expression(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comparison() {
        let e = parse_expression("machine.memory_mb >= 512").unwrap();
        assert_eq!(
            e,
            Expression::binary(BinaryOp::Ge, Expression::attr(Scope::Machine, "memory_mb"), Expression::int(512))
        );
    }

    #[test]
    fn parses_boolean_literal() {
        assert_eq!(parse_expression("true").unwrap(), Expression::always_true());
        assert_eq!(parse_expression(" false ").unwrap(), Expression::Literal(Literal::Bool(false)));
    }

    #[test]
    fn incomplete_comparison_reports_end_of_input() {
        let err = parse_expression("machine.memory_mb >=").unwrap_err();
        assert!(matches!(err, ParseError::EndOfInput { .. }), "{err:?}");
    }

    #[test]
    fn most_negative_integer_round_trips() {
        let e = parse_expression("-9223372036854775808").unwrap();
        assert_eq!(e, Expression::Literal(Literal::Int(i64::MIN)));
        assert_eq!(parse_expression(&e.to_string()).unwrap(), e);
        let neg = Expression::unary(UnaryOp::Neg, e);
        assert_eq!(parse_expression(&neg.to_string()).unwrap(), neg);
        assert!(parse_expression("9223372036854775808").is_err());
        assert!(parse_expression("1 - 9223372036854775808").is_err());
    }

    #[test]
    fn error_positions() {
        // there is no unary plus
        let err = parse_expression("job.a + + 3").unwrap_err();
        assert_eq!(err.offset(11), 8);
        let err = parse_expression("cpus > 2").unwrap_err();
        assert_eq!(err.offset(8), 0);
        let err = parse_expression("(true").unwrap_err();
        assert!(matches!(err, ParseError::EndOfInput { .. }));
        let err = parse_expression("true true").unwrap_err();
        assert_eq!(err.offset(9), 5);
        assert!(parse_expression("99999999999999999999").is_err());
        assert!(parse_expression("\"abc").is_err());
        assert!(parse_expression("job.").is_err());
        assert!(parse_expression("").is_err());
        assert!(parse_expression("#").is_err());
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse_expression("1 + 2 * 3 == 7 && !false || job.x").unwrap();
        let expected = Expression::binary(
            BinaryOp::Or,
            Expression::binary(
                BinaryOp::And,
                Expression::binary(
                    BinaryOp::Eq,
                    Expression::binary(
                        BinaryOp::Add,
                        Expression::int(1),
                        Expression::binary(BinaryOp::Mul, Expression::int(2), Expression::int(3)),
                    ),
                    Expression::int(7),
                ),
                Expression::unary(UnaryOp::Not, Expression::Literal(Literal::Bool(false))),
            ),
            Expression::attr(Scope::Job, "x"),
        );
        assert_eq!(e, expected);
        let e = parse_expression("10 - 3 - 2").unwrap();
        assert_eq!(
            e,
            Expression::binary(
                BinaryOp::Sub,
                Expression::binary(BinaryOp::Sub, Expression::int(10), Expression::int(3)),
                Expression::int(2)
            )
        );
        assert_eq!(
            parse_expression("-job.x * 2").unwrap(),
            Expression::binary(
                BinaryOp::Mul,
                Expression::unary(UnaryOp::Neg, Expression::attr(Scope::Job, "x")),
                Expression::int(2)
            )
        );
    }

    #[test]
    fn canonical_text_round_trips() {
        for text in [
            "machine.memory_mb >= 512",
            "machine.gpu == 1 && false",
            "(job.a || job.b) && !(machine.c < 2.5)",
            "10 - (3 - 2)",
            "--5",
            "machine.os == \"LINUX\" && machine.arch != \"x86\\\"64\"",
            "1e300 * 0.1",
        ] {
            let e = parse_expression(text).unwrap();
            assert_eq!(e.to_string(), text);
            assert_eq!(parse_expression(&e.to_string()).unwrap(), e);
        }
    }

    #[test]
    fn print_ignores_input_whitespace() {
        let e = parse_expression("  job.a+1<=machine.b  ").unwrap();
        assert_eq!(e.to_string(), "job.a + 1 <= machine.b");
    }

    #[test]
    fn serde_uses_text_form() {
        let e = parse_expression("job.size + 1").unwrap();
        assert_eq!(serde_json::to_string(&e).unwrap(), "\"job.size + 1\"");
        let back: Expression = serde_json::from_str("\"job.size + 1\"").unwrap();
        assert_eq!(back, e);
        assert!(serde_json::from_str::<Expression>("\"job.size +\"").is_err());
    }
}
