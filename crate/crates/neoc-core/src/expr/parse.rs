//! Recursive-descent parser for the expression grammar. Error offsets are
//! 1-based byte positions into the input.

use super::{BinOp, Expr, ExprError, UnaryOp};

pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: text,
        bytes: text.as_bytes(),
        pos: 0,
    };
    let e = p.parse_expr()?;
    p.skip_ws();
    if p.pos < p.bytes.len() {
        return Err(p.err_here(format!("unexpected '{}'", p.char_here())));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while matches!(self.bytes.get(self.pos), Some(b' ' | b'\t')) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn char_here(&self) -> char {
        self.src[self.pos..].chars().next().unwrap_or('?')
    }

    fn err_here(&self, msg: String) -> ExprError {
        ExprError::Syntax {
            offset: self.pos + 1,
            msg,
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, ExprError> {
        let mut e = self.parse_unary()?;
        loop {
            self.skip_ws();
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(e),
            };
            self.pos += 1;
            let rhs = self.parse_unary()?;
            e = Expr::Binary(op, Box::new(e), Box::new(rhs));
        }
    }

    // Unary minus takes a whole product: -a*x parses as -(a*x).
    fn parse_unary(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.parse_unary()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.parse_term()
    }

    fn parse_term(&mut self) -> Result<Expr, ExprError> {
        let mut e = self.parse_factor()?;
        loop {
            self.skip_ws();
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(e),
            };
            self.pos += 1;
            let rhs = self.parse_signed_factor()?;
            e = Expr::Binary(op, Box::new(e), Box::new(rhs));
        }
    }

    fn parse_signed_factor(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.parse_signed_factor()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.parse_factor()
    }

    fn parse_factor(&mut self) -> Result<Expr, ExprError> {
        let base = self.parse_atom()?;
        self.skip_ws();
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let expo = self.parse_exponent()?;
            return Ok(Expr::Binary(
                BinOp::Pow,
                Box::new(base),
                Box::new(Expr::Const(expo)),
            ));
        }
        Ok(base)
    }

    // The exponent must reduce to a constant; general symbolic exponents are
    // not differentiable with this op set.
    fn parse_exponent(&mut self) -> Result<f64, ExprError> {
        self.skip_ws();
        let start = self.pos;
        let negate = if self.peek() == Some(b'-') {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        };
        let v = match self.peek() {
            Some(c) if c.is_ascii_digit() || c == b'.' => self.lex_number()?,
            Some(b'(') => {
                let inner = self.parse_paren()?;
                match inner.simplify().is_const() {
                    Some(v) => v,
                    None => {
                        return Err(ExprError::Syntax {
                            offset: start + 1,
                            msg: "power exponent must be a constant".to_string(),
                        })
                    }
                }
            }
            _ => {
                return Err(self.err_here(format!(
                    "expected numeric exponent, found '{}'",
                    if self.pos < self.bytes.len() {
                        self.char_here().to_string()
                    } else {
                        "end of input".to_string()
                    }
                )))
            }
        };
        Ok(if negate { -v } else { v })
    }

    fn parse_paren(&mut self) -> Result<Expr, ExprError> {
        debug_assert_eq!(self.peek(), Some(b'('));
        self.pos += 1;
        let e = self.parse_expr()?;
        self.skip_ws();
        if self.peek() != Some(b')') {
            return Err(self.err_here(if self.pos < self.bytes.len() {
                format!("expected ')', found '{}'", self.char_here())
            } else {
                "expected ')', found end of input".to_string()
            }));
        }
        self.pos += 1;
        Ok(e)
    }

    fn parse_atom(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.err_here("expected expression, found end of input".to_string())),
            Some(b'(') => self.parse_paren(),
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Const(self.lex_number()?)),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.parse_ident(),
            Some(_) => Err(self.err_here(format!(
                "expected expression, found '{}'",
                self.char_here()
            ))),
        }
    }

    fn parse_ident(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        self.skip_ws();
        if self.peek() != Some(b'(') {
            return Ok(Expr::Var(name.to_string()));
        }
        let op = match name {
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "sqrt" => UnaryOp::Sqrt,
            "abs" => UnaryOp::Abs,
            "sgn" => UnaryOp::Sgn,
            _ => {
                return Err(ExprError::UnknownFunction {
                    name: name.to_string(),
                    offset: start + 1,
                })
            }
        };
        let arg = self.parse_paren()?;
        Ok(Expr::Unary(op, Box::new(arg)))
    }

    fn lex_number(&mut self) -> Result<f64, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        // Exponent suffix, only when digits actually follow ('2e' stays a
        // number then a variable, which the caller rejects as trailing input).
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let mut probe = self.pos + 1;
            if matches!(self.bytes.get(probe), Some(b'+' | b'-')) {
                probe += 1;
            }
            if matches!(self.bytes.get(probe), Some(c) if c.is_ascii_digit()) {
                self.pos = probe;
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
            }
        }
        let text = &self.src[start..self.pos];
        text.parse::<f64>().map_err(|_| ExprError::Syntax {
            offset: start + 1,
            msg: format!("invalid number literal '{text}'"),
        })
    }
}
