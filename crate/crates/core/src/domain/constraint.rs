use std::fmt;

use thiserror::Error;

use super::Measurements;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn apply(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn from_symbol(s: &str) -> Option<Self> {
        Some(match s {
            ">" => CmpOp::Gt,
            ">=" => CmpOp::Ge,
            "<" => CmpOp::Lt,
            "<=" => CmpOp::Le,
            "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            _ => return None,
        })
    }
}

/// Boolean expression over quality-feature comparisons.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    And(Box<Constraint>, Box<Constraint>),
    Or(Box<Constraint>, Box<Constraint>),
    Not(Box<Constraint>),
    Leaf { feature: String, op: CmpOp, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no measurement for feature `{0}`")]
    MissingFeature(String),
}

impl Constraint {
    pub fn leaf(feature: impl Into<String>, op: CmpOp, value: f64) -> Self {
        Constraint::Leaf {
            feature: feature.into(),
            op,
            value,
        }
    }

    pub fn and(l: Constraint, r: Constraint) -> Self {
        Constraint::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: Constraint, r: Constraint) -> Self {
        Constraint::Or(Box::new(l), Box::new(r))
    }

    pub fn not(c: Constraint) -> Self {
        Constraint::Not(Box::new(c))
    }

    pub fn eval(&self, measured: &Measurements) -> Result<bool, EvalError> {
        Ok(match self {
            Constraint::And(l, r) => l.eval(measured)? && r.eval(measured)?,
            Constraint::Or(l, r) => l.eval(measured)? || r.eval(measured)?,
            Constraint::Not(c) => !c.eval(measured)?,
            Constraint::Leaf { feature, op, value } => {
                let v = measured
                    .get(feature)
                    .ok_or_else(|| EvalError::MissingFeature(feature.clone()))?;
                op.apply(*v, *value)
            }
        })
    }

    /// Features referenced by the leaves, left to right, with repeats.
    pub fn features(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_features(&mut out);
        out
    }

    fn collect_features<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Constraint::And(l, r) | Constraint::Or(l, r) => {
                l.collect_features(out);
                r.collect_features(out);
            }
            Constraint::Not(c) => c.collect_features(out),
            Constraint::Leaf { feature, .. } => out.push(feature),
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.features().len()
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::And(l, r) => write!(f, "({l} && {r})"),
            Constraint::Or(l, r) => write!(f, "({l} || {r})"),
            Constraint::Not(c) => write!(f, "(!{c})"),
            Constraint::Leaf { feature, op, value } => {
                write!(f, "({feature} {} {value})", op.symbol())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("at {position}: expected {expected}, found {found}")]
    Unexpected {
        position: usize,
        expected: &'static str,
        found: String,
    },
    #[error("at {position}: unknown operator `{op}`")]
    UnknownOperator { position: usize, op: String },
    #[error("at {position}: invalid number `{text}`")]
    InvalidNumber { position: usize, text: String },
    #[error("at {position}: unexpected end of input, expected {expected}")]
    UnexpectedEnd { position: usize, expected: &'static str },
    #[error("at {position}: trailing input")]
    TrailingInput { position: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    And,
    Or,
    Bang,
    Cmp(CmpOp),
    Ident(String),
    Num(f64),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Open => f.write_str("`(`"),
            Tok::Close => f.write_str("`)`"),
            Tok::And => f.write_str("`&&`"),
            Tok::Or => f.write_str("`||`"),
            Tok::Bang => f.write_str("`!`"),
            Tok::Cmp(op) => write!(f, "`{}`", op.symbol()),
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Num(v) => write!(f, "number `{v}`"),
        }
    }
}

fn is_op_char(c: char) -> bool {
    matches!(c, '<' | '>' | '=' | '!' | '&' | '|')
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '(' {
            out.push((pos, Tok::Open));
            i += 1;
        } else if c == ')' {
            out.push((pos, Tok::Close));
            i += 1;
        } else if is_op_char(c) {
            let start = i;
            while i < chars.len() && is_op_char(chars[i].1) {
                i += 1;
            }
            let op: String = chars[start..i].iter().map(|(_, c)| c).collect();
            let tok = match op.as_str() {
                "&&" => Tok::And,
                "||" => Tok::Or,
                "!" => Tok::Bang,
                s => match CmpOp::from_symbol(s) {
                    Some(cmp) => Tok::Cmp(cmp),
                    None => return Err(ParseError::UnknownOperator { position: pos, op }),
                },
            };
            out.push((pos, tok));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '_') {
                i += 1;
            }
            out.push((pos, Tok::Ident(chars[start..i].iter().map(|(_, c)| c).collect())));
        } else if c.is_ascii_digit() || c == '-' || c == '.' {
            let start = i;
            i += 1;
            while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                i += 1;
            }
            let lit: String = chars[start..i].iter().map(|(_, c)| c).collect();
            let digits = lit.strip_prefix('-').unwrap_or(&lit);
            let well_formed = !digits.is_empty()
                && !digits.starts_with('.')
                && !digits.ends_with('.')
                && digits.matches('.').count() <= 1;
            match lit.parse::<f64>() {
                Ok(v) if well_formed => out.push((pos, Tok::Num(v))),
                _ => return Err(ParseError::InvalidNumber { position: pos, text: lit }),
            }
        } else {
            return Err(ParseError::Unexpected {
                position: pos,
                expected: "a token",
                found: format!("`{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn position(&self) -> usize {
        self.toks.get(self.at).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn next(&mut self, expected: &'static str) -> Result<(usize, Tok), ParseError> {
        match self.toks.get(self.at) {
            Some(t) => {
                self.at += 1;
                Ok(t.clone())
            }
            None => Err(ParseError::UnexpectedEnd {
                position: self.end,
                expected,
            }),
        }
    }

    fn expect(&mut self, want: Tok, expected: &'static str) -> Result<(), ParseError> {
        let (position, tok) = self.next(expected)?;
        if tok == want {
            Ok(())
        } else {
            Err(ParseError::Unexpected {
                position,
                expected,
                found: tok.to_string(),
            })
        }
    }

    // K ::= '(' K '&&' K ')' | '(' K '||' K ')' | '(' '!' K ')' | '(' q op v ')'
    fn constraint(&mut self) -> Result<Constraint, ParseError> {
        self.expect(Tok::Open, "`(`")?;
        let node = match self.peek() {
            Some(Tok::Bang) => {
                self.at += 1;
                Constraint::not(self.constraint()?)
            }
            Some(Tok::Open) => {
                let left = self.constraint()?;
                let (position, tok) = self.next("`&&` or `||`")?;
                let right = self.constraint()?;
                match tok {
                    Tok::And => Constraint::and(left, right),
                    Tok::Or => Constraint::or(left, right),
                    other => {
                        return Err(ParseError::Unexpected {
                            position,
                            expected: "`&&` or `||`",
                            found: other.to_string(),
                        })
                    }
                }
            }
            Some(Tok::Ident(_)) => {
                let Some((_, Tok::Ident(feature))) = self.toks.get(self.at).cloned() else {
                    unreachable!()
                };
                self.at += 1;
                let (position, tok) = self.next("a comparison operator")?;
                let Tok::Cmp(op) = tok else {
                    return Err(ParseError::Unexpected {
                        position,
                        expected: "a comparison operator",
                        found: tok.to_string(),
                    });
                };
                let (position, tok) = self.next("a number")?;
                let Tok::Num(value) = tok else {
                    return Err(ParseError::Unexpected {
                        position,
                        expected: "a number",
                        found: tok.to_string(),
                    });
                };
                Constraint::Leaf { feature, op, value }
            }
            Some(other) => {
                return Err(ParseError::Unexpected {
                    position: self.position(),
                    expected: "`!`, `(` or a feature name",
                    found: other.to_string(),
                })
            }
            None => {
                return Err(ParseError::UnexpectedEnd {
                    position: self.end,
                    expected: "`!`, `(` or a feature name",
                })
            }
        };
        self.expect(Tok::Close, "`)`")?;
        Ok(node)
    }
}

/// Parses the fully parenthesized constraint syntax, e.g.
/// `((response_time <= 250) && (!(cost > 10)))`.
pub fn parse_constraint(text: &str) -> Result<Constraint, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks,
        at: 0,
        end: text.len(),
    };
    let c = p.constraint()?;
    if p.at != p.toks.len() {
        return Err(ParseError::TrailingInput {
            position: p.position(),
        });
    }
    Ok(c)
}
