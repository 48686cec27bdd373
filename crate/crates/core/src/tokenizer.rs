//! Integer tokenizers and the global vocabulary.
//!
//! Integers are written either positionally (a sign token followed by
//! base-`B` digits, most significant first) or symbolically (one token per
//! value of a finite range). Arrays are prefixed by their dimensions.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<s>";
pub const UNK: &str = "<unk>";
pub const PLUS: &str = "+";
pub const MINUS: &str = "-";
pub const SEPARATORS: [&str; 3] = ["<sep>", "(", ")"];
pub const N_SPECIALS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
}

fn malformed(msg: impl Into<String>) -> TokenError {
    TokenError::MalformedSequence(msg.into())
}

/// A sequence of token strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Splits on single spaces. An empty string is the empty sequence.
    pub fn parse(s: &str) -> Self {
        if s.is_empty() {
            return Self::new();
        }
        Self(s.split(' ').map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn push(&mut self, tok: impl Into<String>) {
        self.0.push(tok.into());
    }

    pub fn extend(&mut self, other: TokenSeq) {
        self.0.extend(other.0);
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

/// Sign-prefixed base-`B` integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalInt {
    pub base: u64,
}

impl PositionalInt {
    pub fn new(base: u64) -> Result<Self, TokenError> {
        if base < 2 {
            return Err(TokenError::OutOfRange(format!("base {base} < 2")));
        }
        Ok(Self { base })
    }

    pub fn encode(&self, v: i64) -> TokenSeq {
        let mut out = TokenSeq::new();
        self.encode_into(v, &mut out);
        out
    }

    pub fn encode_into(&self, v: i64, out: &mut TokenSeq) {
        out.push(if v < 0 { MINUS } else { PLUS });
        let mut mag = v.unsigned_abs();
        let mut digits = Vec::new();
        loop {
            digits.push(mag % self.base);
            mag /= self.base;
            if mag == 0 {
                break;
            }
        }
        for d in digits.iter().rev() {
            out.push(d.to_string());
        }
    }

    /// Parses one integer at the start of `tokens`, returning the value and
    /// the number of tokens consumed. Digits run until the next sign token or
    /// the end of the slice.
    pub fn parse_prefix<S: AsRef<str>>(&self, tokens: &[S]) -> Result<(i64, usize), TokenError> {
        let sign = match tokens.first().map(AsRef::as_ref) {
            Some(PLUS) => 1i64,
            Some(MINUS) => -1i64,
            Some(t) => return Err(malformed(format!("expected sign, found {t:?}"))),
            None => return Err(malformed("expected sign, found end of sequence")),
        };
        let mut mag: u64 = 0;
        let mut n = 0usize;
        for tok in &tokens[1..] {
            let tok = tok.as_ref();
            if tok == PLUS || tok == MINUS {
                break;
            }
            let d = parse_canonical_digit(tok)
                .ok_or_else(|| malformed(format!("non-digit token {tok:?}")))?;
            if d >= self.base {
                return Err(malformed(format!("digit {d} not below base {}", self.base)));
            }
            if n == 1 && mag == 0 {
                return Err(malformed("leading zero digit"));
            }
            mag = mag
                .checked_mul(self.base)
                .and_then(|m| m.checked_add(d))
                .ok_or_else(|| malformed("integer overflow"))?;
            n += 1;
        }
        if n == 0 {
            return Err(malformed("sign without digits"));
        }
        if sign < 0 && mag == 0 {
            return Err(malformed("negative zero"));
        }
        let v = if sign > 0 {
            i64::try_from(mag).map_err(|_| malformed("integer overflow"))?
        } else if mag == i64::MIN.unsigned_abs() {
            i64::MIN
        } else {
            -i64::try_from(mag).map_err(|_| malformed("integer overflow"))?
        };
        Ok((v, n + 1))
    }

    /// Parses a sequence holding exactly one integer.
    pub fn parse<S: AsRef<str>>(&self, tokens: &[S]) -> Result<i64, TokenError> {
        let (v, used) = self.parse_prefix(tokens)?;
        if used != tokens.len() {
            return Err(malformed("trailing tokens after integer"));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> Vec<String> {
        (0..self.base).map(|d| d.to_string()).collect()
    }
}

fn parse_canonical_digit(tok: &str) -> Option<u64> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if tok.len() > 1 && tok.starts_with('0') {
        return None;
    }
    tok.parse().ok()
}

/// One token per integer of `[min, max]`, spelled `prefix ++ decimal(v)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolicInt {
    pub min: i64,
    pub max: i64,
    pub prefix: String,
}

impl SymbolicInt {
    pub fn new(min: i64, max: i64, prefix: impl Into<String>) -> Result<Self, TokenError> {
        if min > max {
            return Err(TokenError::OutOfRange(format!(
                "empty range [{min}, {max}]"
            )));
        }
        Ok(Self {
            min,
            max,
            prefix: prefix.into(),
        })
    }

    pub fn encode(&self, v: i64) -> Result<TokenSeq, TokenError> {
        let mut out = TokenSeq::new();
        self.encode_into(v, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, v: i64, out: &mut TokenSeq) -> Result<(), TokenError> {
        if v < self.min || v > self.max {
            return Err(TokenError::OutOfRange(format!(
                "{v} outside [{}, {}]",
                self.min, self.max
            )));
        }
        out.push(format!("{}{v}", self.prefix));
        Ok(())
    }

    pub fn parse_token(&self, tok: &str) -> Result<i64, TokenError> {
        let body = tok
            .strip_prefix(self.prefix.as_str())
            .ok_or_else(|| malformed(format!("token {tok:?} lacks prefix {:?}", self.prefix)))?;
        let v: i64 = body
            .parse()
            .map_err(|_| malformed(format!("token {tok:?} is not a symbolic integer")))?;
        if v.to_string() != body {
            return Err(malformed(format!("non-canonical symbolic token {tok:?}")));
        }
        if v < self.min || v > self.max {
            return Err(malformed(format!("symbolic value {v} outside range")));
        }
        Ok(v)
    }

    pub fn parse<S: AsRef<str>>(&self, tokens: &[S]) -> Result<i64, TokenError> {
        match tokens {
            [t] => self.parse_token(t.as_ref()),
            _ => Err(malformed("symbolic integer must be a single token")),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        (self.min..=self.max)
            .map(|v| format!("{}{v}", self.prefix))
            .collect()
    }
}

/// How a single integer is written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntCode {
    Positional(PositionalInt),
    Symbolic(SymbolicInt),
}

impl IntCode {
    pub fn encode_into(&self, v: i64, out: &mut TokenSeq) -> Result<(), TokenError> {
        match self {
            IntCode::Positional(p) => {
                p.encode_into(v, out);
                Ok(())
            }
            IntCode::Symbolic(s) => s.encode_into(v, out),
        }
    }

    pub fn parse_prefix<S: AsRef<str>>(&self, tokens: &[S]) -> Result<(i64, usize), TokenError> {
        match self {
            IntCode::Positional(p) => p.parse_prefix(tokens),
            IntCode::Symbolic(s) => {
                let first = tokens
                    .first()
                    .ok_or_else(|| malformed("missing symbolic token"))?;
                Ok((s.parse_token(first.as_ref())?, 1))
            }
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        match self {
            IntCode::Positional(p) => p.tokens(),
            IntCode::Symbolic(s) => s.tokens(),
        }
    }
}

/// Row-major integer tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntArray {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl IntArray {
    pub fn vector(data: Vec<i64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: Vec<Vec<i64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        Self {
            shape: vec![r, c],
            data: rows.concat(),
        }
    }
}

/// Dimension-prefixed arrays: `tensor_dim` size tokens, then the elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumberArray {
    pub max_dim: usize,
    pub dim_prefix: String,
    pub tensor_dim: usize,
    pub code: IntCode,
}

impl NumberArray {
    pub fn new(
        max_dim: usize,
        dim_prefix: impl Into<String>,
        tensor_dim: usize,
        code: IntCode,
    ) -> Result<Self, TokenError> {
        if max_dim < 1 || !(1..=2).contains(&tensor_dim) {
            return Err(TokenError::OutOfRange(format!(
                "array spec max_dim={max_dim} tensor_dim={tensor_dim}"
            )));
        }
        Ok(Self {
            max_dim,
            dim_prefix: dim_prefix.into(),
            tensor_dim,
            code,
        })
    }

    pub fn encode(&self, a: &IntArray) -> Result<TokenSeq, TokenError> {
        if a.shape.len() != self.tensor_dim {
            return Err(TokenError::OutOfRange(format!(
                "array of rank {} for tensor_dim {}",
                a.shape.len(),
                self.tensor_dim
            )));
        }
        let count: usize = a.shape.iter().product();
        if count != a.data.len() {
            return Err(TokenError::OutOfRange(
                "shape does not match element count".into(),
            ));
        }
        let mut out = TokenSeq::new();
        for &d in &a.shape {
            if d < 1 || d > self.max_dim {
                return Err(TokenError::OutOfRange(format!(
                    "dimension {d} outside [1, {}]",
                    self.max_dim
                )));
            }
            out.push(format!("{}{d}", self.dim_prefix));
        }
        for &v in &a.data {
            self.code.encode_into(v, &mut out)?;
        }
        Ok(out)
    }

    pub fn parse<S: AsRef<str>>(&self, tokens: &[S]) -> Result<IntArray, TokenError> {
        if tokens.len() < self.tensor_dim {
            return Err(malformed("missing dimension tokens"));
        }
        let dims = SymbolicInt::new(1, self.max_dim as i64, self.dim_prefix.clone())?;
        let mut shape = Vec::with_capacity(self.tensor_dim);
        for tok in &tokens[..self.tensor_dim] {
            let d = dims
                .parse_token(tok.as_ref())
                .map_err(|_| malformed(format!("bad dimension token {:?}", tok.as_ref())))?;
            shape.push(d as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut pos = self.tensor_dim;
        while pos < tokens.len() {
            let (v, used) = self.code.parse_prefix(&tokens[pos..])?;
            data.push(v);
            pos += used;
        }
        if data.len() != count {
            return Err(malformed(format!(
                "declared {count} elements, found {}",
                data.len()
            )));
        }
        Ok(IntArray { shape, data })
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = (1..=self.max_dim)
            .map(|d| format!("{}{d}", self.dim_prefix))
            .collect();
        out.extend(self.code.tokens());
        out
    }
}

/// Encoding of a whole problem or solution object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Encoding {
    /// A fixed number of integers written back to back.
    Ints {
        count: usize,
        code: IntCode,
    },
    Array(NumberArray),
}

impl Encoding {
    pub fn encode_ints(&self, values: &[i64]) -> Result<TokenSeq, TokenError> {
        match self {
            Encoding::Ints { count, code } => {
                if values.len() != *count {
                    return Err(TokenError::OutOfRange(format!(
                        "expected {count} integers, got {}",
                        values.len()
                    )));
                }
                let mut out = TokenSeq::new();
                for &v in values {
                    code.encode_into(v, &mut out)?;
                }
                Ok(out)
            }
            Encoding::Array(a) => a.encode(&IntArray::vector(values.to_vec())),
        }
    }

    pub fn parse_ints<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<i64>, TokenError> {
        match self {
            Encoding::Ints { count, code } => {
                let mut out = Vec::with_capacity(*count);
                let mut pos = 0;
                while pos < tokens.len() {
                    let (v, used) = code.parse_prefix(&tokens[pos..])?;
                    out.push(v);
                    pos += used;
                }
                if out.len() != *count {
                    return Err(malformed(format!(
                        "expected {count} integers, found {}",
                        out.len()
                    )));
                }
                Ok(out)
            }
            Encoding::Array(a) => Ok(a.parse(tokens)?.data),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        match self {
            Encoding::Ints { code, .. } => code.tokens(),
            Encoding::Array(a) => a.tokens(),
        }
    }
}

/// The finite symbol set shared by model inputs and outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list; duplicates are dropped,
    /// keeping the first occurrence.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            v.insert(t.into());
        }
        v
    }

    fn insert(&mut self, tok: String) {
        if !self.index.contains_key(&tok) {
            self.index.insert(tok.clone(), self.tokens.len() as u32);
            self.tokens.push(tok);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        self.index[PAD]
    }

    pub fn eos_id(&self) -> u32 {
        self.index[EOS]
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.index.contains_key(tok)
    }

    pub fn tokens_to_ids<S: AsRef<str>>(&self, seq: &[S]) -> Result<Vec<u32>, TokenError> {
        seq.iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t)
                    .ok_or_else(|| TokenError::UnknownToken(t.to_owned()))
            })
            .collect()
    }

    pub fn ids_to_tokens(&self, ids: &[u32]) -> Result<TokenSeq, TokenError> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_owned)
                    .ok_or(TokenError::UnknownId(i))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSeq)
    }
}

/// Structural tokens, signs, separators, specials, digits `0..base`, then the
/// tokens declared by the input and output encodings in declaration order.
pub fn build_vocabulary(input: &Encoding, output: &Encoding, base: u64) -> Vocabulary {
    let mut tokens: Vec<String> = vec![
        PAD.into(),
        EOS.into(),
        UNK.into(),
        PLUS.into(),
        MINUS.into(),
    ];
    tokens.extend(SEPARATORS.iter().map(|s| s.to_string()));
    tokens.extend((0..N_SPECIALS).map(|i| format!("<SPECIAL_{i}>")));
    tokens.extend((0..base).map(|d| d.to_string()));
    tokens.extend(input.tokens());
    tokens.extend(output.tokens());
    Vocabulary::from_tokens(tokens)
}
