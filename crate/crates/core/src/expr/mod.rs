//! Math-expression DSL: parsing, pretty-printing and evaluation.
//!
//! Scenario files declare vector-field components, transition maps and loop
//! paths as strings in this little language. Expressions are immutable after
//! parsing and evaluation is pure, so they are safe to share across threads.
//!
//! Evaluation is generic over the scalar: plain reals give values, [`Dual`]
//! scalars give directional derivatives, nested duals give second derivatives.

mod lexer;
mod parser;

use std::collections::BTreeSet;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::num::{Dual, Numeric, Real};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: found {found}, expected {}", expected.join(" or "))]
    Syntax {
        pos: usize,
        found: String,
        expected: Vec<String>,
    },
    #[error("unknown function `{name}` at byte {pos}")]
    UnknownFunction { name: String, pos: usize },
    #[error("`{name}` takes {arity} argument(s), got {got} (at byte {pos})")]
    Arity {
        name: String,
        arity: usize,
        got: usize,
        pos: usize,
    },
    #[error("numeric literal at byte {pos} is out of range")]
    LiteralRange { pos: usize },
    #[error("empty expression")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound variable `{name}`")]
    Unbound { name: String },
    #[error("domain error in `{subterm}`: {detail}")]
    Domain { subterm: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constant {
    Pi,
    E,
}

/// Function set of the DSL. `log` is the natural logarithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Atan,
    Atan2,
    Abs,
}

impl Func {
    pub fn by_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "atan" => Func::Atan,
            "atan2" => Func::Atan2,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Atan => "atan",
            Func::Atan2 => "atan2",
            Func::Abs => "abs",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Func::Atan2 => 2,
            _ => 1,
        }
    }
}

/// Parsed abstract syntax tree.
#[derive(Clone, Debug, PartialEq)]
pub enum Expression<R> {
    Lit(R),
    Const(Constant),
    Var(String),
    Neg(Box<Expression<R>>),
    Bin(BinOp, Box<Expression<R>>, Box<Expression<R>>),
    Call(Func, Vec<Expression<R>>),
}

/// Variable bindings for one evaluation; linear scan beats hashing for the
/// handful of names a chart carries.
#[derive(Clone, Copy)]
pub struct Env<'a, S> {
    pairs: &'a [(&'a str, S)],
}

impl<'a, S: Copy> Env<'a, S> {
    pub fn new(pairs: &'a [(&'a str, S)]) -> Self {
        Env { pairs }
    }

    pub fn get(&self, name: &str) -> Option<S> {
        self.pairs
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }
}

/// Parse a source string into an AST.
pub fn parse<R: Real>(src: &str) -> Result<Expression<R>, ParseError> {
    if src.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let toks = lexer::tokenize(src)?;
    let mut p = parser::Parser::<R>::new(&toks);
    let expr = p.parse_expr()?;
    p.finish(expr)
}

impl<R: Real> Expression<R> {
    /// Evaluate with any scalar implementing [`Numeric`].
    ///
    /// Domain conditions (`log` of a non-positive value, division by zero,
    /// `sqrt` of a negative, `x^y` with non-integer exponent and `x <= 0`)
    /// are errors naming the offending subterm; everything else follows IEEE
    /// arithmetic.
    pub fn eval_with<S: Numeric<R>>(&self, env: &Env<S>) -> Result<S, EvalError> {
        match self {
            Expression::Lit(v) => Ok(S::from_real(*v)),
            Expression::Const(Constant::Pi) => Ok(S::from_real(R::pi())),
            Expression::Const(Constant::E) => Ok(S::from_real(R::e())),
            Expression::Var(name) => env.get(name).ok_or_else(|| EvalError::Unbound {
                name: name.clone(),
            }),
            Expression::Neg(inner) => Ok(-inner.eval_with(env)?),
            Expression::Bin(op, lhs, rhs) => {
                let a = lhs.eval_with(env)?;
                match op {
                    BinOp::Add => Ok(a + rhs.eval_with(env)?),
                    BinOp::Sub => Ok(a - rhs.eval_with(env)?),
                    BinOp::Mul => Ok(a * rhs.eval_with(env)?),
                    BinOp::Div => {
                        let b = rhs.eval_with(env)?;
                        if b.re() == R::zero() {
                            return Err(self.domain("division by zero"));
                        }
                        Ok(a / b)
                    }
                    BinOp::Pow => self.eval_pow(a, rhs, env),
                }
            }
            Expression::Call(func, args) => {
                let x = args[0].eval_with(env)?;
                match func {
                    Func::Sin => Ok(x.sin()),
                    Func::Cos => Ok(x.cos()),
                    Func::Tan => Ok(x.tan()),
                    Func::Exp => Ok(x.exp()),
                    Func::Abs => Ok(x.abs()),
                    Func::Atan => Ok(x.atan()),
                    Func::Log => {
                        if x.re() <= R::zero() {
                            return Err(self.domain("log of a non-positive value"));
                        }
                        Ok(x.ln())
                    }
                    Func::Sqrt => {
                        if x.re() < R::zero() {
                            return Err(self.domain("sqrt of a negative value"));
                        }
                        Ok(x.sqrt())
                    }
                    Func::Atan2 => {
                        let y = args[1].eval_with(env)?;
                        if x.re() == R::zero() && y.re() == R::zero() {
                            return Err(self.domain("atan2(0, 0) is undefined"));
                        }
                        Ok(x.atan2(y))
                    }
                }
            }
        }
    }

    fn eval_pow<S: Numeric<R>>(
        &self,
        base: S,
        exponent: &Expression<R>,
        env: &Env<S>,
    ) -> Result<S, EvalError> {
        // Literal integer exponents use the integer-power rule, which is
        // defined for negative bases; anything else goes through exp/log.
        if let Expression::Lit(v) = exponent {
            let r = (*v).re();
            if r.fract() == R::zero() && Numeric::abs(r) <= R::of(2147483647.0) {
                let n = r.to_i32().expect("checked range");
                if n < 0 && base.re() == R::zero() {
                    return Err(self.domain("zero raised to a negative power"));
                }
                return Ok(base.powi(n));
            }
        }
        let e = exponent.eval_with(env)?;
        if base.re() <= R::zero() {
            return Err(self.domain(
                "power with non-integer-literal exponent requires a positive base",
            ));
        }
        Ok(base.powf(e))
    }

    fn domain(&self, detail: &str) -> EvalError {
        EvalError::Domain {
            subterm: self.to_string(),
            detail: detail.to_string(),
        }
    }

    /// Evaluate to a plain real. Every free variable must be bound.
    pub fn eval(&self, env: &Env<R>) -> Result<R, EvalError> {
        self.eval_with(env)
    }

    /// Evaluate value and directional derivative along `seed` (absent names
    /// get direction 0).
    pub fn eval_dual(
        &self,
        bindings: &[(&str, R)],
        seed: &[(&str, R)],
    ) -> Result<(R, R), EvalError> {
        let pairs: Vec<(&str, Dual<R>)> = bindings
            .iter()
            .map(|(name, v)| {
                let dot = seed
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, d)| *d)
                    .unwrap_or_else(R::zero);
                (*name, Dual::new(*v, dot))
            })
            .collect();
        let out = self.eval_with(&Env::new(&pairs))?;
        Ok((out.val, out.dot))
    }

    /// Free variable names, sorted.
    pub fn free_vars(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Expression::Var(name) => {
                out.insert(name.as_str());
            }
            Expression::Neg(inner) => inner.collect_vars(out),
            Expression::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expression::Call(_, args) => {
                for a in args {
                    a.collect_vars(out);
                }
            }
            Expression::Lit(_) | Expression::Const(_) => {}
        }
    }

    /// Replace every occurrence of the variable by a copy of `replacement`.
    pub fn substitute(&self, var: &str, replacement: &Expression<R>) -> Expression<R> {
        match self {
            Expression::Var(name) if name == var => replacement.clone(),
            Expression::Var(_) | Expression::Lit(_) | Expression::Const(_) => self.clone(),
            Expression::Neg(inner) => Expression::Neg(Box::new(inner.substitute(var, replacement))),
            Expression::Bin(op, a, b) => Expression::Bin(
                *op,
                Box::new(a.substitute(var, replacement)),
                Box::new(b.substitute(var, replacement)),
            ),
            Expression::Call(f, args) => Expression::Call(
                *f,
                args.iter().map(|a| a.substitute(var, replacement)).collect(),
            ),
        }
    }

    /// True for the literal zero (the required form of parameter components).
    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expression::Lit(v) if *v == R::zero())
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expression::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expression::Neg(_) => 3,
            Expression::Bin(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }
}

impl<R: Real> fmt::Display for Expression<R> {
    /// Minimal-parenthesis form; parsing the output of `Display` yields a
    /// structurally identical tree for any parser-produced expression.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child<R: Real>(
            f: &mut fmt::Formatter<'_>,
            e: &Expression<R>,
            needs_parens: bool,
        ) -> fmt::Result {
            if needs_parens {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expression::Lit(v) => write!(f, "{v}"),
            Expression::Const(Constant::Pi) => write!(f, "pi"),
            Expression::Const(Constant::E) => write!(f, "e"),
            Expression::Var(name) => write!(f, "{name}"),
            Expression::Neg(inner) => {
                write!(f, "-")?;
                child(f, inner, inner.precedence() < 3)
            }
            Expression::Bin(op, a, b) => {
                let (sym, prec) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                    BinOp::Pow => ("^", 4),
                };
                if *op == BinOp::Pow {
                    // the exponent slot admits `-` and nested `^` unparenthesized
                    child(f, a, a.precedence() < 5)?;
                    write!(f, "{sym}")?;
                    child(f, b, b.precedence() < 3)
                } else {
                    child(f, a, a.precedence() < prec)?;
                    write!(f, " {sym} ")?;
                    child(f, b, b.precedence() <= prec)
                }
            }
            Expression::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl<R: Real + Serialize> Serialize for Expression<R> {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de, R: Real> Deserialize<'de> for Expression<R> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse(&text).map_err(|e| D::Error::custom(format!("expression `{text}`: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(src: &str) -> Expression<f64> {
        parse(src).unwrap()
    }

    #[test]
    fn precedence_tree() {
        // "x^2 + sin(y)" -> Add(Pow(x,2), sin(y))
        let e = p("x^2 + sin(y)");
        match &e {
            Expression::Bin(BinOp::Add, lhs, rhs) => {
                assert!(matches!(**lhs, Expression::Bin(BinOp::Pow, ..)));
                assert!(matches!(**rhs, Expression::Call(Func::Sin, _)));
            }
            other => panic!("unexpected tree {other:?}"),
        }
    }

    #[test]
    fn unary_after_binary() {
        // decided grammar behavior: 2*-x parses as Mul(2, Neg(x))
        let e = p("2*-x");
        match &e {
            Expression::Bin(BinOp::Mul, lhs, rhs) => {
                assert_eq!(**lhs, Expression::Lit(2.0));
                assert!(matches!(**rhs, Expression::Neg(_)));
            }
            other => panic!("unexpected tree {other:?}"),
        }
    }

    #[test]
    fn pow_is_right_associative_and_tightest() {
        let e = p("2^3^2");
        match &e {
            Expression::Bin(BinOp::Pow, _, rhs) => {
                assert!(matches!(**rhs, Expression::Bin(BinOp::Pow, ..)));
            }
            other => panic!("unexpected tree {other:?}"),
        }
        // -x^2 = -(x^2)
        let e = p("-x^2");
        assert!(matches!(e, Expression::Neg(_)));
        let v = p("-x^2")
            .eval(&Env::new(&[("x", 3.0)]))
            .unwrap();
        assert_eq!(v, -9.0);
    }

    #[test]
    fn h_of_x_example() {
        let e = p("1+0.5+x");
        let v = e.eval(&Env::new(&[("x", -0.8)])).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
    }

    #[test]
    fn sin_zero() {
        assert_eq!(p("sin(0)").eval(&Env::new(&[])).unwrap(), 0.0);
    }

    #[test]
    fn division_by_zero_reports_subterm() {
        let e = p("x / (x - x)");
        let err = e.eval(&Env::new(&[("x", 1.0)])).unwrap_err();
        match err {
            EvalError::Domain { subterm, .. } => assert!(subterm.contains("/")),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn unbound_variable() {
        let e = p("x + y");
        let err = e.eval(&Env::new(&[("x", 1.0)])).unwrap_err();
        assert_eq!(
            err,
            EvalError::Unbound {
                name: "y".to_string()
            }
        );
    }

    #[test]
    fn unknown_function_fails_at_parse() {
        let err = parse::<f64>("sinh(x)").unwrap_err();
        assert!(matches!(err, ParseError::UnknownFunction { .. }));
    }

    #[test]
    fn arity_checked() {
        assert!(matches!(
            parse::<f64>("atan2(x)").unwrap_err(),
            ParseError::Arity { .. }
        ));
        assert!(matches!(
            parse::<f64>("sin(x, y)").unwrap_err(),
            ParseError::Arity { .. }
        ));
    }

    #[test]
    fn dual_examples() {
        // x^2 + sin(y) at (3, 0), seed x -> (9, 6)
        let e = p("x^2 + sin(y)");
        let (v, d) = e
            .eval_dual(&[("x", 3.0), ("y", 0.0)], &[("x", 1.0)])
            .unwrap();
        assert_eq!((v, d), (9.0, 6.0));

        let (v, d) = p("exp(z)").eval_dual(&[("z", 0.0)], &[("z", 1.0)]).unwrap();
        assert_eq!((v, d), (1.0, 1.0));

        // 2*(z - b*lambda_) at z=0.3, lambda_=0.1, b=1, seed z -> (0.4, 2)
        let (v, d) = p("2*(z - b*lambda_)")
            .eval_dual(
                &[("z", 0.3), ("lambda_", 0.1), ("b", 1.0)],
                &[("z", 1.0)],
            )
            .unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn negative_base_integer_power() {
        let v = p("(-0.8)^2").eval(&Env::new(&[])).unwrap();
        assert!((v - 0.64).abs() < 1e-15);
        let err = p("(-2)^0.5").eval(&Env::new(&[])).unwrap_err();
        assert!(matches!(err, EvalError::Domain { .. }));
    }

    #[test]
    fn print_reparse_identity_samples() {
        for src in [
            "x^2 + sin(y)",
            "2*-x",
            "-x^2",
            "(-x)^2",
            "a - (b - c)",
            "a / (b * c)",
            "atan2(y, x)",
            "1 + r0 + x",
            "x^-2",
            "--x",
            "2^3^2",
            "(x + 1)*(y - 2)",
        ] {
            let once = p(src);
            let printed = once.to_string();
            let twice = parse::<f64>(&printed).unwrap();
            assert_eq!(once, twice, "roundtrip failed for `{src}` -> `{printed}`");
        }
    }

    #[test]
    fn substitute_shifts_variable() {
        let e = p("r - 1");
        let shifted = e.substitute("r", &p("r + 0.5"));
        let v = shifted.eval(&Env::new(&[("r", 0.5)])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn zero_literal_detection() {
        assert!(p("0").is_zero_literal());
        assert!(!p("0 + 0").is_zero_literal());
    }

    #[test]
    fn syntax_error_has_position_and_expectations() {
        match parse::<f64>("1 + * 2").unwrap_err() {
            ParseError::Syntax { pos, expected, .. } => {
                assert_eq!(pos, 4);
                assert!(!expected.is_empty());
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }
}
