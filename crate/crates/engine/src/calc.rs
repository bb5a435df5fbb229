//! Scripted `code_exec` evaluator for the simulated backend: arithmetic
//! expressions, optionally wrapped in `print(...)`, one per line.

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok.as_bytes()) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<f64, String> {
        let mut v = self.term()?;
        loop {
            if self.eat("+") {
                v += self.term()?;
            } else if self.eat("-") {
                v -= self.term()?;
            } else {
                return Ok(v);
            }
        }
    }

    fn term(&mut self) -> Result<f64, String> {
        let mut v = self.power()?;
        loop {
            if self.eat("//") {
                let d = self.power()?;
                v = nonzero(d).map(|d| (v / d).floor())?;
            } else if self.eat("*") {
                v *= self.power()?;
            } else if self.eat("/") {
                let d = self.power()?;
                v = nonzero(d).map(|d| v / d)?;
            } else if self.eat("%") {
                let d = self.power()?;
                v = nonzero(d).map(|d| v - d * (v / d).floor())?;
            } else {
                return Ok(v);
            }
        }
    }

    fn power(&mut self) -> Result<f64, String> {
        let base = self.unary()?;
        if self.eat("**") {
            let exp = self.power()?;
            return Ok(base.powf(exp));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<f64, String> {
        if self.eat("-") {
            return Ok(-self.unary()?);
        }
        if self.eat("+") {
            return self.unary();
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<f64, String> {
        if self.eat("(") {
            let v = self.expr()?;
            if !self.eat(")") {
                return Err("SyntaxError: expected ')'".into());
            }
            return Ok(v);
        }
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "SyntaxError: invalid syntax".to_string())
    }
}

fn nonzero(d: f64) -> Result<f64, String> {
    if d == 0.0 {
        Err("ZeroDivisionError: division by zero".into())
    } else {
        Ok(d)
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn evaluate(expr: &str) -> Result<f64, String> {
    let mut p = Parser { src: expr.as_bytes(), pos: 0 };
    let v = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err("SyntaxError: invalid syntax".into());
    }
    Ok(v)
}

/// Evaluates each non-empty line; output is the printed values, one per line.
pub fn evaluate_snippet(source: &str) -> Result<String, String> {
    let mut out = Vec::new();
    for line in source.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let expr = line
            .strip_prefix("print(")
            .and_then(|rest| rest.strip_suffix(')'))
            .unwrap_or(line);
        out.push(format_number(evaluate(expr)?));
    }
    if out.is_empty() {
        return Err("no output".into());
    }
    Ok(out.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        assert_eq!(evaluate_snippet("print(2 + 3 * 4)").unwrap(), "14");
        assert_eq!(evaluate_snippet("2 ** 3 ** 2").unwrap(), "512");
        assert_eq!(evaluate_snippet("(2024 - 1987) / 2").unwrap(), "18.5");
        assert_eq!(evaluate_snippet("7 // 2\n-7 % 3").unwrap(), "3\n2");
        assert!(evaluate_snippet("1 / 0").unwrap_err().starts_with("ZeroDivisionError"));
        assert!(evaluate_snippet("import os").is_err());
    }
}
