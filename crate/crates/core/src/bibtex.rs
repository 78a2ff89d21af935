//! Minimal BibTeX reader: enough to tell a well-formed entry list from text
//! that merely looks like one.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub entry_type: String,
    pub key: String,
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BibtexError {
    #[error("no bibtex entry found")]
    Empty,
    #[error("expected {expected} at byte {at}")]
    Expected { expected: &'static str, at: usize },
    #[error("unbalanced braces")]
    Unbalanced,
}

/// Parse one or more entries separated by whitespace. Anything else around
/// them is an error.
pub fn parse_entries(src: &str) -> Result<Vec<Entry>, BibtexError> {
    let mut p = Parser { s: src.as_bytes(), i: 0 };
    let mut out = Vec::new();
    loop {
        p.ws();
        if p.i == p.s.len() {
            break;
        }
        out.push(p.entry()?);
    }
    if out.is_empty() {
        return Err(BibtexError::Empty);
    }
    Ok(out)
}

struct Parser<'a> {
    s: &'a [u8],
    i: usize,
}

impl Parser<'_> {
    fn ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.i).copied()
    }

    fn expect(&mut self, b: u8, what: &'static str) -> Result<(), BibtexError> {
        self.ws();
        if self.peek() == Some(b) {
            self.i += 1;
            Ok(())
        } else {
            Err(BibtexError::Expected { expected: what, at: self.i })
        }
    }

    fn ident(&mut self, what: &'static str) -> Result<String, BibtexError> {
        self.ws();
        let start = self.i;
        while let Some(b) = self.peek() {
            if b.is_ascii_alphanumeric() || b"_-:.".contains(&b) {
                self.i += 1;
            } else {
                break;
            }
        }
        if self.i == start {
            return Err(BibtexError::Expected { expected: what, at: start });
        }
        Ok(String::from_utf8_lossy(&self.s[start..self.i]).to_string())
    }

    fn entry(&mut self) -> Result<Entry, BibtexError> {
        self.expect(b'@', "`@`")?;
        let entry_type = self.ident("entry type")?;
        if !entry_type.bytes().all(|b| b.is_ascii_alphabetic()) {
            return Err(BibtexError::Expected { expected: "entry type", at: self.i });
        }
        self.ws();
        let close = match self.peek() {
            Some(b'{') => b'}',
            Some(b'(') => b')',
            _ => return Err(BibtexError::Expected { expected: "`{`", at: self.i }),
        };
        self.i += 1;
        self.ws();
        let start = self.i;
        while let Some(b) = self.peek() {
            if b == b',' || b.is_ascii_whitespace() || b"{}()\"".contains(&b) {
                break;
            }
            self.i += 1;
        }
        if self.i == start {
            return Err(BibtexError::Expected { expected: "cite key", at: start });
        }
        let key = String::from_utf8_lossy(&self.s[start..self.i]).to_string();
        let mut fields = Vec::new();
        loop {
            self.ws();
            match self.peek() {
                Some(b) if b == close => {
                    self.i += 1;
                    return Ok(Entry { entry_type, key, fields });
                }
                Some(b',') => {
                    self.i += 1;
                    self.ws();
                    if self.peek() == Some(close) {
                        continue;
                    }
                    let name = self.ident("field name")?;
                    self.expect(b'=', "`=`")?;
                    let value = self.value()?;
                    fields.push((name.to_ascii_lowercase(), value));
                }
                None => return Err(BibtexError::Unbalanced),
                _ => return Err(BibtexError::Expected { expected: "`,` or end of entry", at: self.i }),
            }
        }
    }

    /// Field value: braced, quoted, bare word or number, joined with `#`.
    fn value(&mut self) -> Result<String, BibtexError> {
        let mut out = String::new();
        loop {
            self.ws();
            match self.peek() {
                Some(b'{') => out.push_str(&self.braced()?),
                Some(b'"') => {
                    self.i += 1;
                    let start = self.i;
                    let mut depth = 0i32;
                    loop {
                        match self.peek() {
                            None => return Err(BibtexError::Unbalanced),
                            Some(b'{') => depth += 1,
                            Some(b'}') => {
                                depth -= 1;
                                if depth < 0 {
                                    return Err(BibtexError::Unbalanced);
                                }
                            }
                            Some(b'"') if depth == 0 => break,
                            _ => {}
                        }
                        self.i += 1;
                    }
                    out.push_str(&String::from_utf8_lossy(&self.s[start..self.i]));
                    self.i += 1;
                }
                _ => out.push_str(&self.ident("field value")?),
            }
            self.ws();
            if self.peek() == Some(b'#') {
                self.i += 1;
            } else {
                return Ok(out);
            }
        }
    }

    fn braced(&mut self) -> Result<String, BibtexError> {
        let start = self.i + 1;
        let mut depth = 0usize;
        while let Some(b) = self.peek() {
            self.i += 1;
            match b {
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(String::from_utf8_lossy(&self.s[start..self.i - 1]).to_string());
                    }
                }
                _ => {}
            }
        }
        Err(BibtexError::Unbalanced)
    }
}
