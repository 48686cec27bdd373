//! Problem generators, solvers and prediction verifiers for the built-in
//! integer tasks.

pub mod exact;
pub mod rng;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use exact::{fraction_round, gcd, modular, Fraction, IntMatrix, ModOp, SolveError};
pub use rng::{RngState, RngStream};

use crate::tokenizer::{
    build_vocabulary, Encoding, IntArray, IntCode, NumberArray, PositionalInt, TokenError,
    TokenSeq, Vocabulary,
};

/// Upper bound on rejected draws before `generate` gives up on a task.
pub const MAX_RETRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operation {
    Gcd,
    ModularAdd,
    ModularMul,
    FractionAdd,
    FractionProduct,
    FractionSimplify,
    FractionCompare,
    FractionDeterminant,
    FractionRound,
    MatrixRank,
}

impl Operation {
    pub const ALL: [Operation; 10] = [
        Operation::Gcd,
        Operation::ModularAdd,
        Operation::ModularMul,
        Operation::FractionAdd,
        Operation::FractionProduct,
        Operation::FractionSimplify,
        Operation::FractionCompare,
        Operation::FractionDeterminant,
        Operation::FractionRound,
        Operation::MatrixRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Gcd => "gcd",
            Operation::ModularAdd => "modular_add",
            Operation::ModularMul => "modular_mul",
            Operation::FractionAdd => "fraction_add",
            Operation::FractionProduct => "fraction_product",
            Operation::FractionSimplify => "fraction_simplify",
            Operation::FractionCompare => "fraction_compare",
            Operation::FractionDeterminant => "fraction_determinant",
            Operation::FractionRound => "fraction_round",
            Operation::MatrixRank => "matrix_rank",
        }
    }

    fn input_count(self) -> usize {
        match self {
            Operation::Gcd
            | Operation::ModularAdd
            | Operation::ModularMul
            | Operation::FractionSimplify
            | Operation::FractionRound => 2,
            Operation::FractionAdd
            | Operation::FractionProduct
            | Operation::FractionCompare
            | Operation::FractionDeterminant => 4,
            Operation::MatrixRank => 0,
        }
    }

    fn output_count(self) -> usize {
        match self {
            Operation::FractionAdd | Operation::FractionProduct | Operation::FractionSimplify => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown operation {0:?}")]
pub struct UnknownOperation(pub String);

impl FromStr for Operation {
    type Err = UnknownOperation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Operation::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| UnknownOperation(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("generator for {0} failed {MAX_RETRIES} times in a row")]
    Exhausted(Operation),
}

/// Which split a draw is for. Both splits share one distribution by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

/// A generated problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Problem {
    Ints(Vec<i64>),
    Matrix(IntMatrix<i64>),
}

/// A solution: one or more integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution(pub Vec<i64>);

impl Solution {
    pub fn scalar(&self) -> Option<i64> {
        match self.0.as_slice() {
            [v] => Some(*v),
            _ => None,
        }
    }
}

/// Task parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub operation: Operation,
    pub min_int: i64,
    pub max_int: i64,
    pub modulo: i64,
    pub base: u64,
    pub dim1: usize,
    pub dim2: usize,
    pub max_class: i64,
    pub n_eval_metrics: usize,
    pub n_error_metrics: usize,
}

impl TaskSpec {
    pub fn new(operation: Operation) -> Self {
        Self {
            operation,
            min_int: 1,
            max_int: 1_000_000,
            modulo: 67,
            base: 1000,
            dim1: 5,
            dim2: 5,
            max_class: 100,
            n_eval_metrics: 0,
            n_error_metrics: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Invalid(m));
        if self.min_int > self.max_int {
            return bad(format!(
                "min_int {} > max_int {}",
                self.min_int, self.max_int
            ));
        }
        if self.modulo < 2 {
            return bad(format!("modulo {} < 2", self.modulo));
        }
        if self.base < 2 {
            return bad(format!("base {} < 2", self.base));
        }
        if self.dim1 < 1 || self.dim2 < 1 {
            return bad("matrix dimensions must be at least 1".into());
        }
        if self.max_class < 0 {
            return bad("max_class must be nonnegative".into());
        }
        // Bounds beyond ~2^31 could overflow the i64 solvers.
        let lim = 1i64 << 31;
        if self.min_int < -lim || self.max_int > lim {
            return bad(format!("operands must lie within ±{lim}"));
        }
        match self.operation {
            Operation::Gcd
                if self.min_int <= 0 && self.max_int >= 0 && self.min_int == self.max_int =>
            {
                bad("gcd operands cannot all be zero".into())
            }
            Operation::FractionRound if self.max_int < 2 => {
                bad("fraction_round needs max_int >= 2".into())
            }
            Operation::FractionAdd
            | Operation::FractionProduct
            | Operation::FractionSimplify
            | Operation::FractionCompare
            | Operation::FractionDeterminant
                if self.min_int == 0 && self.max_int == 0 =>
            {
                bad("fraction denominators cannot all be zero".into())
            }
            Operation::MatrixRank if self.max_int < 0 => {
                bad("matrix_rank needs max_int >= 0".into())
            }
            _ => Ok(()),
        }
    }

    fn int_code(&self) -> IntCode {
        IntCode::Positional(PositionalInt { base: self.base })
    }

    pub fn input_encoding(&self) -> Encoding {
        match self.operation {
            Operation::MatrixRank => Encoding::Array(NumberArray {
                max_dim: self.dim1.max(self.dim2),
                dim_prefix: "V".into(),
                tensor_dim: 2,
                code: self.int_code(),
            }),
            op => Encoding::Ints {
                count: op.input_count(),
                code: self.int_code(),
            },
        }
    }

    pub fn output_encoding(&self) -> Encoding {
        Encoding::Ints {
            count: self.operation.output_count(),
            code: self.int_code(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        build_vocabulary(&self.input_encoding(), &self.output_encoding(), self.base)
    }

    /// Samples one problem and solves it. `None` means the draw was rejected.
    pub fn try_generate(&self, rng: &mut RngStream, _split: Split) -> Option<(Problem, Solution)> {
        let (lo, hi) = (self.min_int, self.max_int);
        let mut draw = |n: usize| -> Vec<i64> { (0..n).map(|_| rng.int_in(lo, hi)).collect() };
        match self.operation {
            Operation::MatrixRank => {
                let n = self.dim1 * self.dim2;
                let entries: Vec<i64> = (0..n)
                    .map(|_| rng.int_in(-self.max_int, self.max_int))
                    .collect();
                let m = IntMatrix::new(self.dim1, self.dim2, entries).ok()?;
                let sol = solve(self.operation, &Problem::Matrix(m.clone()), self.modulo).ok()?;
                Some((Problem::Matrix(m), sol))
            }
            Operation::FractionRound => {
                let lo = lo.max(1);
                if lo > hi {
                    return None;
                }
                let v = vec![rng.int_in(lo, hi), rng.int_in(lo, hi)];
                let p = Problem::Ints(v);
                let sol = solve(self.operation, &p, self.modulo).ok()?;
                Some((p, sol))
            }
            op => {
                let p = Problem::Ints(draw(op.input_count()));
                let sol = solve(op, &p, self.modulo).ok()?;
                Some((p, sol))
            }
        }
    }

    /// Samples until a valid pair is produced.
    pub fn generate(
        &self,
        rng: &mut RngStream,
        split: Split,
    ) -> Result<(Problem, Solution), TaskError> {
        for _ in 0..MAX_RETRIES {
            if let Some(pair) = self.try_generate(rng, split) {
                return Ok(pair);
            }
        }
        Err(TaskError::Exhausted(self.operation))
    }

    pub fn encode_problem(&self, p: &Problem) -> Result<TokenSeq, TokenError> {
        match (p, self.input_encoding()) {
            (Problem::Matrix(m), Encoding::Array(spec)) => spec.encode(&IntArray {
                shape: vec![m.rows(), m.cols()],
                data: m.entries().to_vec(),
            }),
            (Problem::Ints(v), enc) => enc.encode_ints(v),
            (Problem::Matrix(_), _) => {
                Err(TokenError::OutOfRange("matrix for non-matrix task".into()))
            }
        }
    }

    pub fn encode_solution(&self, s: &Solution) -> Result<TokenSeq, TokenError> {
        self.output_encoding().encode_ints(&s.0)
    }

    pub fn parse_problem<S: AsRef<str>>(&self, toks: &[S]) -> Result<Problem, TokenError> {
        match self.input_encoding() {
            Encoding::Array(spec) => {
                let a = spec.parse(toks)?;
                IntMatrix::new(a.shape[0], a.shape[1], a.data)
                    .map(Problem::Matrix)
                    .map_err(|e| TokenError::MalformedSequence(e.to_string()))
            }
            enc => enc.parse_ints(toks).map(Problem::Ints),
        }
    }

    pub fn parse_solution<S: AsRef<str>>(&self, toks: &[S]) -> Result<Solution, TokenError> {
        self.output_encoding().parse_ints(toks).map(Solution)
    }

    /// Verifies a decoded prediction. Every built-in task has a unique
    /// solution encoding, so a prediction that differs from the reference is
    /// never correct; `base` is 1 only when the decoded objects coincide.
    pub fn evaluate(
        &self,
        _problem: &Problem,
        solution: &Solution,
        predicted: &Solution,
    ) -> Verdict {
        Verdict {
            base: u8::from(solution == predicted),
            eval_metrics: vec![0.0; self.n_eval_metrics],
            error_metrics: vec![0.0; self.n_error_metrics],
        }
    }

    /// Evaluation class of an example, or `None` when the task has no
    /// natural small-integer classes.
    pub fn code_class(&self, _problem: &Problem, solution: &Solution) -> Option<i64> {
        let v = solution.scalar()?;
        match self.operation {
            Operation::Gcd
            | Operation::ModularAdd
            | Operation::ModularMul
            | Operation::MatrixRank
            | Operation::FractionCompare => Some(v.clamp(0, self.max_class)),
            _ => None,
        }
    }

    /// Worst-case token counts `(shortest input, longest output)`, used to
    /// validate encoder-only configurations.
    pub fn length_bounds(&self) -> (usize, usize) {
        let digits = |v: i64| -> usize {
            let mut m = v.unsigned_abs();
            let mut n = 1;
            while m >= self.base {
                m /= self.base;
                n += 1;
            }
            n
        };
        let max_digits = digits(self.min_int).max(digits(self.max_int));
        let mag = self.min_int.abs().max(self.max_int.abs());
        let min_digits = if self.min_int <= 0 && self.max_int >= 0 {
            1
        } else {
            digits(self.min_int).min(digits(self.max_int))
        };
        match self.operation {
            Operation::Gcd => {
                // gcd(a, b) never has more digits than the shorter operand.
                (2 * (1 + min_digits), 1 + max_digits)
            }
            Operation::ModularAdd | Operation::ModularMul => {
                (2 * (1 + min_digits), 1 + digits(self.modulo - 1))
            }
            Operation::FractionSimplify => (2 * (1 + min_digits), 2 * (1 + max_digits)),
            Operation::FractionRound => (2 * (1 + min_digits.max(1)), 1 + max_digits),
            Operation::FractionCompare => (4 * (1 + min_digits), 2),
            Operation::FractionAdd | Operation::FractionProduct => {
                (4 * (1 + min_digits), 2 * (1 + digits(2 * mag * mag)))
            }
            Operation::FractionDeterminant => (4 * (1 + min_digits), 1 + digits(2 * mag * mag)),
            Operation::MatrixRank => {
                let max_rank = self.dim1.min(self.dim2) as i64;
                (2 + 2 * self.dim1 * self.dim2, 1 + digits(max_rank))
            }
        }
    }

    /// Whether every solution, plus an end marker, fits within the
    /// positions of its own problem.
    pub fn outputs_fit_inputs(&self) -> bool {
        match self.operation {
            // The gcd has at most as many digits as either operand.
            Operation::Gcd => true,
            _ => {
                let (min_in, max_out) = self.length_bounds();
                max_out + 1 <= min_in
            }
        }
    }
}

/// Result of `evaluate`: base correctness plus optional graded metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub base: u8,
    pub eval_metrics: Vec<f64>,
    pub error_metrics: Vec<f64>,
}

/// Solves a problem exactly.
pub fn solve(op: Operation, problem: &Problem, modulo: i64) -> Result<Solution, SolveError> {
    let ints = |n: usize| -> Result<&[i64], SolveError> {
        match problem {
            Problem::Ints(v) if v.len() == n => Ok(v.as_slice()),
            _ => Err(SolveError::DegenerateInput("wrong problem shape")),
        }
    };
    let frac = |n, d| Fraction::new(n, d);
    let one = |v: i64| Ok(Solution(vec![v]));
    let pair = |f: Fraction<i64>| Ok(Solution(vec![f.num, f.den]));
    match op {
        Operation::Gcd => {
            let v = ints(2)?;
            one(gcd(v[0], v[1])?)
        }
        Operation::ModularAdd => {
            let v = ints(2)?;
            one(modular(ModOp::Add, v[0], v[1], modulo)?)
        }
        Operation::ModularMul => {
            let v = ints(2)?;
            one(modular(ModOp::Mul, v[0], v[1], modulo)?)
        }
        Operation::FractionAdd => {
            let v = ints(4)?;
            pair(frac(v[0], v[1])?.add(frac(v[2], v[3])?)?)
        }
        Operation::FractionProduct => {
            let v = ints(4)?;
            pair(frac(v[0], v[1])?.mul(frac(v[2], v[3])?)?)
        }
        Operation::FractionSimplify => {
            let v = ints(2)?;
            pair(frac(v[0], v[1])?.reduced())
        }
        Operation::FractionCompare => {
            let v = ints(4)?;
            let ord = frac(v[0], v[1])?.compare(frac(v[2], v[3])?)?;
            one(i64::from(ord == std::cmp::Ordering::Greater))
        }
        Operation::FractionDeterminant => {
            let v = ints(4)?;
            one(frac(v[0], v[1])?.cross_determinant(frac(v[2], v[3])?)?)
        }
        Operation::FractionRound => {
            let v = ints(2)?;
            one(fraction_round(v[0], v[1])?)
        }
        Operation::MatrixRank => match problem {
            Problem::Matrix(m) => one(m.rank()? as i64),
            Problem::Ints(_) => Err(SolveError::DegenerateInput("matrix_rank needs a matrix")),
        },
    }
}
