//! Recursive-descent parser.
//!
//! Grammar (documented in `docs/grammar.md`):
//! ```text
//! expr   := term  (('+'|'-') term)*
//! term   := unary (('*'|'/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?            // right-associative
//! atom   := number | 'pi' | 'e' | ident | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//! `^` binds tightest, then unary minus, then `*` `/`, then `+` `-`. A unary
//! minus directly after a binary operator is accepted (`2*-x`).

use super::lexer::{Spanned, Tok};
use super::{BinOp, Constant, Expression, Func, ParseError};
use crate::num::Real;

pub struct Parser<'a, R> {
    toks: &'a [Spanned],
    at: usize,
    _marker: std::marker::PhantomData<R>,
}

impl<'a, R: Real> Parser<'a, R> {
    pub fn new(toks: &'a [Spanned]) -> Self {
        Parser {
            toks,
            at: 0,
            _marker: std::marker::PhantomData,
        }
    }

    fn peek(&self) -> &Spanned {
        &self.toks[self.at]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok, expected: &str) -> Result<(), ParseError> {
        if &self.peek().tok == want {
            self.bump();
            Ok(())
        } else {
            Err(self.err_here(&[expected]))
        }
    }

    fn err_here(&self, expected: &[&str]) -> ParseError {
        let here = self.peek();
        ParseError::Syntax {
            pos: here.pos,
            found: here.tok.describe(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn parse_expr(&mut self) -> Result<Expression<R>, ParseError> {
        let mut lhs = self.parse_term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_term()?;
            lhs = Expression::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<Expression<R>, ParseError> {
        let mut lhs = self.parse_unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_unary()?;
            lhs = Expression::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expression<R>, ParseError> {
        if self.peek().tok == Tok::Minus {
            self.bump();
            let inner = self.parse_unary()?;
            return Ok(Expression::Neg(Box::new(inner)));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expression<R>, ParseError> {
        let base = self.parse_atom()?;
        if self.peek().tok == Tok::Caret {
            self.bump();
            // exponent admits unary minus and right-nested powers
            let exponent = self.parse_unary()?;
            return Ok(Expression::Bin(
                BinOp::Pow,
                Box::new(base),
                Box::new(exponent),
            ));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Expression<R>, ParseError> {
        let here = self.peek().clone();
        match here.tok {
            Tok::Number(v) => {
                self.bump();
                let lit = R::from_f64(v).ok_or(ParseError::LiteralRange { pos: here.pos })?;
                Ok(Expression::Lit(lit))
            }
            Tok::Ident(ref name) => {
                self.bump();
                if self.peek().tok == Tok::LParen {
                    self.bump();
                    let func = Func::by_name(name).ok_or_else(|| ParseError::UnknownFunction {
                        name: name.clone(),
                        pos: here.pos,
                    })?;
                    let mut args = vec![self.parse_expr()?];
                    while self.peek().tok == Tok::Comma {
                        self.bump();
                        args.push(self.parse_expr()?);
                    }
                    self.expect(&Tok::RParen, "`)`")?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            name: func.name().to_string(),
                            arity: func.arity(),
                            got: args.len(),
                            pos: here.pos,
                        });
                    }
                    Ok(Expression::Call(func, args))
                } else {
                    match name.as_str() {
                        "pi" => Ok(Expression::Const(Constant::Pi)),
                        "e" => Ok(Expression::Const(Constant::E)),
                        _ => Ok(Expression::Var(name.clone())),
                    }
                }
            }
            Tok::LParen => {
                self.bump();
                let inner = self.parse_expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(inner)
            }
            _ => Err(self.err_here(&["number", "identifier", "`(`", "`-`"])),
        }
    }

    pub fn finish(self, expr: Expression<R>) -> Result<Expression<R>, ParseError> {
        if self.peek().tok == Tok::Eof {
            Ok(expr)
        } else {
            Err(self.err_here(&["operator", "end of input"]))
        }
    }
}
