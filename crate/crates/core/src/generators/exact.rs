//! Exact integer and rational arithmetic used by the task solvers.

use std::cmp::Ordering;
use std::fmt;

use num_integer::Integer;
use std::ops::Div;

use num_bigint::BigInt;
use num_traits::{CheckedMul, CheckedSub, One, PrimInt, Signed, Zero};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolveError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("arithmetic overflow")]
    Overflow,
}

/// Integer types the exact solvers are generic over.
pub trait ExactInt: PrimInt + Signed + Integer + fmt::Debug + fmt::Display {}

impl<I: PrimInt + Signed + Integer + fmt::Debug + fmt::Display> ExactInt for I {}

/// Euclidean gcd of `|a|` and `|b|`.
pub fn gcd<I: ExactInt>(a: I, b: I) -> Result<I, SolveError> {
    if a.is_zero() && b.is_zero() {
        return Err(SolveError::DegenerateInput("gcd(0, 0)"));
    }
    let (mut x, mut y) = (a.abs(), b.abs());
    while !y.is_zero() {
        let r = x % y;
        x = y;
        y = r;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModOp {
    Add,
    Mul,
}

/// `((a mod m) op (b mod m)) mod m` with canonical residues in `[0, m)`.
pub fn modular<I: ExactInt>(op: ModOp, a: I, b: I, m: I) -> Result<I, SolveError> {
    if m < I::one() + I::one() {
        return Err(SolveError::DegenerateInput("modulus below 2"));
    }
    let ra = a.mod_floor(&m);
    let rb = b.mod_floor(&m);
    let r = match op {
        ModOp::Add => ra.checked_add(&rb),
        ModOp::Mul => ra.checked_mul(&rb),
    }
    .ok_or(SolveError::Overflow)?;
    Ok(r.mod_floor(&m))
}

/// `num / den` with `den != 0`. Values produced by arithmetic are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction<I> {
    pub num: I,
    pub den: I,
}

impl<I: ExactInt> Fraction<I> {
    pub fn new(num: I, den: I) -> Result<Self, SolveError> {
        if den.is_zero() {
            return Err(SolveError::DegenerateInput("zero denominator"));
        }
        Ok(Self { num, den })
    }

    /// Lowest terms with a positive denominator.
    pub fn reduced(self) -> Self {
        let g = if self.num.is_zero() {
            self.den.abs()
        } else {
            gcd(self.num, self.den).expect("denominator is nonzero")
        };
        let sign = if self.den < I::zero() {
            -I::one()
        } else {
            I::one()
        };
        Self {
            num: sign * self.num / g,
            den: sign * self.den / g,
        }
    }

    pub fn is_lowest_terms(&self) -> bool {
        self.den > I::zero() && gcd(self.num, self.den).map_or(false, |g| g.is_one())
    }

    pub fn add(self, other: Self) -> Result<Self, SolveError> {
        let ad = self
            .num
            .checked_mul(&other.den)
            .ok_or(SolveError::Overflow)?;
        let cb = other
            .num
            .checked_mul(&self.den)
            .ok_or(SolveError::Overflow)?;
        let num = ad.checked_add(&cb).ok_or(SolveError::Overflow)?;
        let den = self
            .den
            .checked_mul(&other.den)
            .ok_or(SolveError::Overflow)?;
        Ok(Self::new(num, den)?.reduced())
    }

    pub fn mul(self, other: Self) -> Result<Self, SolveError> {
        let num = self
            .num
            .checked_mul(&other.num)
            .ok_or(SolveError::Overflow)?;
        let den = self
            .den
            .checked_mul(&other.den)
            .ok_or(SolveError::Overflow)?;
        Ok(Self::new(num, den)?.reduced())
    }

    /// `a·d − b·c` for `self = a/b`, `other = c/d`.
    pub fn cross_determinant(self, other: Self) -> Result<I, SolveError> {
        let ad = self
            .num
            .checked_mul(&other.den)
            .ok_or(SolveError::Overflow)?;
        let bc = self
            .den
            .checked_mul(&other.num)
            .ok_or(SolveError::Overflow)?;
        ad.checked_sub(&bc).ok_or(SolveError::Overflow)
    }

    pub fn compare(self, other: Self) -> Result<Ordering, SolveError> {
        let a = self.reduced();
        let b = other.reduced();
        Ok(a.cross_determinant(b)?.cmp(&I::zero()))
    }
}

impl<I: fmt::Display> fmt::Display for Fraction<I> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// `floor(a / b)` for integers `a > b > 0`.
pub fn fraction_round<I: ExactInt>(a: I, b: I) -> Result<I, SolveError> {
    if b <= I::zero() || a <= b {
        return Err(SolveError::DegenerateInput("round needs a > b > 0"));
    }
    Ok(a.div_floor(&b))
}

/// Dense row-major integer matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix<I> {
    rows: usize,
    cols: usize,
    entries: Vec<I>,
}

impl<I: ExactInt> IntMatrix<I> {
    pub fn new(rows: usize, cols: usize, entries: Vec<I>) -> Result<Self, SolveError> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(SolveError::DegenerateInput(
                "matrix shape does not match entries",
            ));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![I::zero(); n * n];
        for i in 0..n {
            entries[i * n + i] = I::one();
        }
        Self {
            rows: n,
            cols: n,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[I] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> I {
        self.entries[r * self.cols + c]
    }

    /// Exact rank. Runs fraction-free elimination in `i128` and falls back
    /// to arbitrary precision when an intermediate minor overflows.
    pub fn rank(&self) -> Result<usize, SolveError> {
        let wide: Option<Vec<i128>> = self.entries.iter().map(|v| v.to_i128()).collect();
        if let Some(wide) = wide {
            if let Ok(r) = bareiss_rank(self.rows, self.cols, wide) {
                return Ok(r);
            }
        }
        let big: Vec<BigInt> = self
            .entries
            .iter()
            .map(|v| v.to_i128().map(BigInt::from).ok_or(SolveError::Overflow))
            .collect::<Result<_, _>>()?;
        bareiss_rank(self.rows, self.cols, big)
    }
}

/// Rank by fraction-free (Bareiss) elimination over any exact ring with
/// exact division. Every intermediate value is a minor of the input.
pub fn bareiss_rank<R>(rows: usize, cols: usize, mut a: Vec<R>) -> Result<usize, SolveError>
where
    R: Clone + Zero + One + CheckedMul + CheckedSub + Div<Output = R>,
{
    assert_eq!(a.len(), rows * cols, "matrix buffer does not match shape");
    let mut prev = R::one();
    let mut rank = 0usize;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let Some(pivot) = (rank..rows).find(|&r| !a[r * cols + col].is_zero()) else {
            continue;
        };
        if pivot != rank {
            for c in 0..cols {
                a.swap(pivot * cols + c, rank * cols + c);
            }
        }
        let p = a[rank * cols + col].clone();
        for r in rank + 1..rows {
            let f = a[r * cols + col].clone();
            for c in col + 1..cols {
                let lhs = p
                    .checked_mul(&a[r * cols + c])
                    .ok_or(SolveError::Overflow)?;
                let rhs = f
                    .checked_mul(&a[rank * cols + c])
                    .ok_or(SolveError::Overflow)?;
                let v = lhs.checked_sub(&rhs).ok_or(SolveError::Overflow)?;
                // Sylvester's identity makes this division exact.
                a[r * cols + c] = v / prev.clone();
            }
            a[r * cols + col] = R::zero();
        }
        prev = p;
        rank += 1;
    }
    Ok(rank)
}
