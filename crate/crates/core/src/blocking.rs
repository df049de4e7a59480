//! Input move-blocking: block patterns, their zero-one matrices, expansion of
//! blocked sequences and the offset parameterization `u = (B ⊗ I) ū + λ ũ`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::bounds::BoxBounds;
use crate::dynamics::InputVector;
use crate::error::{Error, Result};

/// Ordered block lengths partitioning a horizon of `N` steps into `M` blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockingPattern {
    lengths: Vec<usize>,
    starts: Vec<usize>,
    horizon: usize,
}

impl BlockingPattern {
    pub fn from_lengths(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::Parameter(
                "block lengths must be positive and non-empty".into(),
            ));
        }
        let mut starts = Vec::with_capacity(lengths.len());
        let mut horizon = 0;
        for len in &lengths {
            starts.push(horizon);
            horizon += len;
        }
        Ok(Self {
            lengths,
            starts,
            horizon,
        })
    }

    /// `M` blocks of near-equal length; the first `N mod M` blocks are one step longer.
    pub fn uniform(horizon: usize, blocks: usize) -> Result<Self> {
        if blocks == 0 || blocks > horizon {
            return Err(Error::Parameter(format!(
                "uniform blocking needs 1 ≤ M ≤ N (N = {horizon}, M = {blocks})"
            )));
        }
        let base = horizon / blocks;
        let extra = horizon % blocks;
        Self::from_lengths((0..blocks).map(|j| base + usize::from(j < extra)).collect())
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_blocks(&self) -> usize {
        self.lengths.len()
    }

    /// First horizon index of block `j`.
    pub fn start(&self, j: usize) -> usize {
        self.starts[j]
    }

    /// Horizon indices covered by block `j`.
    pub fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        self.starts[j]..self.starts[j] + self.lengths[j]
    }

    /// Block holding horizon index `k`.
    pub fn block_of(&self, k: usize) -> usize {
        debug_assert!(k < self.horizon);
        self.starts.partition_point(|&s| s <= k) - 1
    }

    /// Dense `N × M` blocking matrix. Only for inspection and tests.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.horizon, self.num_blocks());
        for j in 0..self.num_blocks() {
            for k in self.block_range(j) {
                b[(k, j)] = 1.0;
            }
        }
        b
    }

    fn check_blocked(&self, blocked: &[InputVector]) -> Result<()> {
        if blocked.len() != self.num_blocks() {
            return Err(Error::Dimension {
                what: "blocked sequence",
                expected: self.num_blocks(),
                got: blocked.len(),
            });
        }
        Ok(())
    }

    /// `u = (B ⊗ I_m) ū`.
    pub fn expand(&self, blocked: &[InputVector]) -> Result<Vec<InputVector>> {
        self.check_blocked(blocked)?;
        let mut full = Vec::with_capacity(self.horizon);
        for (len, value) in self.lengths.iter().zip(blocked) {
            full.extend(std::iter::repeat_n(value.clone(), *len));
        }
        Ok(full)
    }

    /// `u = (B ⊗ I_m) ū + λ ũ`.
    pub fn expand_offset(
        &self,
        blocked: &[InputVector],
        warmstart: &[InputVector],
        lambda: f64,
    ) -> Result<Vec<InputVector>> {
        self.check_blocked(blocked)?;
        if warmstart.len() != self.horizon {
            return Err(Error::Dimension {
                what: "warm-start sequence",
                expected: self.horizon,
                got: warmstart.len(),
            });
        }
        let mut full = Vec::with_capacity(self.horizon);
        for (j, value) in blocked.iter().enumerate() {
            for k in self.block_range(j) {
                if warmstart[k].len() != value.len() {
                    return Err(Error::Dimension {
                        what: "warm-start input",
                        expected: value.len(),
                        got: warmstart[k].len(),
                    });
                }
                full.push(value + &warmstart[k] * lambda);
            }
        }
        Ok(full)
    }

    /// Block-wise mean of a full sequence, the least-squares preimage under `B ⊗ I`.
    pub fn project(&self, full: &[InputVector]) -> Result<Vec<InputVector>> {
        if full.len() != self.horizon {
            return Err(Error::Dimension {
                what: "input sequence",
                expected: self.horizon,
                got: full.len(),
            });
        }
        Ok((0..self.num_blocks())
            .map(|j| {
                let range = self.block_range(j);
                let block = &full[range.clone()];
                if block.iter().all(|u| u == &block[0]) {
                    // exact on already-blocked sequences
                    return block[0].clone();
                }
                let len = range.len() as f64;
                let mut sum = full[range.start].clone();
                for u in &full[range.start + 1..range.end] {
                    sum += u;
                }
                sum / len
            })
            .collect())
    }

    /// Two-sided rows `lower ≤ ū_j,i + λ·ũ_i(k) ≤ upper` over the decision
    /// vector `(ū_0, …, ū_{M−1}, λ)`, one per horizon step and input coordinate.
    pub fn offset_bound_rows(
        &self,
        warmstart: &[InputVector],
        input_box: &BoxBounds,
    ) -> Result<Vec<LinearRow>> {
        if warmstart.len() != self.horizon {
            return Err(Error::Dimension {
                what: "warm-start sequence",
                expected: self.horizon,
                got: warmstart.len(),
            });
        }
        if !input_box.is_finite() {
            return Err(Error::Parameter(
                "offset bound rows need a finite input box".into(),
            ));
        }
        let m = input_box.dim();
        let lambda_index = m * self.num_blocks();
        let mut rows = Vec::with_capacity(self.horizon * m);
        for (k, w) in warmstart.iter().enumerate() {
            if w.len() != m {
                return Err(Error::Dimension {
                    what: "warm-start input",
                    expected: m,
                    got: w.len(),
                });
            }
            let j = self.block_of(k);
            for i in 0..m {
                rows.push(LinearRow {
                    step: k,
                    coefficients: vec![(j * m + i, 1.0), (lambda_index, w[i])],
                    lower: input_box.lower()[i],
                    upper: input_box.upper()[i],
                });
            }
        }
        Ok(rows)
    }
}

impl fmt::Display for BlockingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.lengths.iter().map(|l| l.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Sparse two-sided linear inequality `lower ≤ Σ c_i z_i ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    /// Horizon step the row constrains.
    pub step: usize,
    pub coefficients: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

impl LinearRow {
    pub fn value(&self, z: &[f64]) -> f64 {
        self.coefficients.iter().map(|&(i, c)| c * z[i]).sum()
    }

    pub fn is_satisfied(&self, z: &[f64], tol: f64) -> bool {
        let v = self.value(z);
        v >= self.lower - tol && v <= self.upper + tol
    }
}

/// Returns true iff every row has exactly one 1, the first row sits in column 0,
/// and each row's column equals the previous row's column or the next one.
pub fn is_admissible(matrix: &DMatrix<f64>) -> bool {
    let mut previous: Option<usize> = None;
    for row in matrix.row_iter() {
        if row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return false;
        }
        let ones: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(j, _)| j)
            .collect();
        if ones.len() != 1 {
            return false;
        }
        let col = ones[0];
        let ok = match previous {
            None => col == 0,
            Some(p) => col == p || col == p + 1,
        };
        if !ok {
            return false;
        }
        previous = Some(col);
    }
    // every column must be used
    previous.map_or(matrix.ncols() == 0, |last| last + 1 == matrix.ncols())
}

/// Blocking pattern as written in configuration: `uniform: M` or an explicit
/// comma-separated list of block lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternSpec {
    Uniform(usize),
    Explicit(Vec<usize>),
}

impl PatternSpec {
    pub fn resolve(&self, horizon: usize) -> Result<BlockingPattern> {
        match self {
            PatternSpec::Uniform(m) => BlockingPattern::uniform(horizon, *m),
            PatternSpec::Explicit(lengths) => {
                let pattern = BlockingPattern::from_lengths(lengths.clone())?;
                if pattern.horizon() != horizon {
                    return Err(Error::Parameter(format!(
                        "block lengths sum to {} but the horizon is {horizon}",
                        pattern.horizon()
                    )));
                }
                Ok(pattern)
            }
        }
    }
}

impl FromStr for PatternSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid block count or length `{t}`")))
        };
        if let Some(rest) = s.strip_prefix("uniform") {
            let rest = rest
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| Error::Config(format!("expected `uniform: M`, got `{s}`")))?;
            return Ok(PatternSpec::Uniform(parse(rest)?));
        }
        let lengths = s.split(',').map(parse).collect::<Result<Vec<_>>>()?;
        Ok(PatternSpec::Explicit(lengths))
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternSpec::Uniform(m) => write!(f, "uniform: {m}"),
            PatternSpec::Explicit(lengths) => {
                let parts: Vec<String> = lengths.iter().map(|l| l.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn s(x: f64) -> InputVector {
        DVector::from_element(1, x)
    }

    #[test]
    fn uniform_patterns() {
        assert_eq!(BlockingPattern::uniform(4, 2).unwrap().lengths(), &[2, 2]);
        assert_eq!(BlockingPattern::uniform(5, 5).unwrap().lengths(), &[1; 5]);
        assert_eq!(
            BlockingPattern::uniform(80, 16).unwrap().lengths(),
            &[5; 16]
        );
        assert_eq!(
            BlockingPattern::uniform(7, 3).unwrap().lengths(),
            &[3, 2, 2]
        );
        assert!(BlockingPattern::uniform(3, 4).is_err());
        assert!(BlockingPattern::uniform(3, 0).is_err());
    }

    #[test]
    fn blocking_matrix_examples() {
        let b = BlockingPattern::uniform(4, 2).unwrap().matrix();
        let expected = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(b, expected);
        assert!(is_admissible(&b));
        assert_eq!(
            BlockingPattern::uniform(6, 6).unwrap().matrix(),
            DMatrix::identity(6, 6)
        );
        let pattern = BlockingPattern::from_lengths(vec![3, 1, 4]).unwrap();
        let sums: Vec<f64> = pattern.matrix().column_iter().map(|c| c.sum()).collect();
        assert_eq!(sums, vec![3.0, 1.0, 4.0]);
    }

    #[test]
    fn admissibility_rejects_malformed_matrices() {
        let zero_row = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(!is_admissible(&zero_row));
        let out_of_order = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(!is_admissible(&out_of_order));
        let double = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(!is_admissible(&double));
        let skipped = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(!is_admissible(&skipped));
    }

    #[test]
    fn expansion_examples() {
        let pattern = BlockingPattern::uniform(4, 2).unwrap();
        assert_eq!(
            pattern.expand(&[s(0.3), s(-0.7)]).unwrap(),
            vec![s(0.3), s(0.3), s(-0.7), s(-0.7)]
        );
        let identity = BlockingPattern::uniform(3, 3).unwrap();
        let seq = vec![s(1.0), s(2.0), s(3.0)];
        assert_eq!(identity.expand(&seq).unwrap(), seq);
        assert!(pattern.expand(&[s(1.0)]).is_err());
    }

    #[test]
    fn offset_expansion_examples() {
        let pattern = BlockingPattern::uniform(4, 2).unwrap();
        let warm = vec![s(0.5), s(0.25), s(-1.0), s(0.125)];
        let zeros = vec![s(0.0), s(0.0)];
        assert_eq!(pattern.expand_offset(&zeros, &warm, 1.0).unwrap(), warm);
        let blocked = vec![s(0.2), s(-0.4)];
        assert_eq!(
            pattern.expand_offset(&blocked, &warm, 0.0).unwrap(),
            pattern.expand(&blocked).unwrap()
        );
        let zero_warm = vec![s(0.0); 4];
        assert_eq!(
            pattern.expand_offset(&blocked, &zero_warm, 3.7).unwrap(),
            pattern.expand(&blocked).unwrap()
        );
        assert!(pattern.expand_offset(&blocked, &warm[..3], 1.0).is_err());
    }

    #[test]
    fn offset_rows_example() {
        let pattern = BlockingPattern::uniform(4, 2).unwrap();
        let warm = vec![s(0.5), s(0.5), s(-1.0), s(-1.0)];
        let rows = pattern
            .offset_bound_rows(&warm, &BoxBounds::symmetric(1, 1.0).unwrap())
            .unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows[..2] {
            assert_eq!(row.coefficients, vec![(0, 1.0), (2, 0.5)]);
            assert_eq!((row.lower, row.upper), (-1.0, 1.0));
        }
        assert_eq!(rows[2].coefficients, vec![(1, 1.0), (2, -1.0)]);
        // λ = 0 reduces every row to the input box on ū
        let z = [0.9, -0.3, 0.0];
        assert!(rows.iter().all(|r| r.is_satisfied(&z, 0.0)));
        assert!(!rows[0].is_satisfied(&[1.1, 0.0, 0.0], 0.0));
    }

    #[test]
    fn pattern_spec_parsing() {
        assert_eq!(
            "uniform: 16".parse::<PatternSpec>().unwrap(),
            PatternSpec::Uniform(16)
        );
        assert_eq!(
            "uniform:2".parse::<PatternSpec>().unwrap(),
            PatternSpec::Uniform(2)
        );
        assert_eq!(
            "3, 1,4".parse::<PatternSpec>().unwrap(),
            PatternSpec::Explicit(vec![3, 1, 4])
        );
        assert!("uniform 4".parse::<PatternSpec>().is_err());
        assert!("a,b".parse::<PatternSpec>().is_err());
        assert!(PatternSpec::Explicit(vec![3, 1]).resolve(5).is_err());
        assert_eq!(
            PatternSpec::Uniform(2).resolve(80).unwrap().lengths(),
            &[40, 40]
        );
        let spec = PatternSpec::Explicit(vec![2, 5]);
        assert_eq!(spec.to_string().parse::<PatternSpec>().unwrap(), spec);
    }

    fn pattern_strategy() -> impl Strategy<Value = BlockingPattern> {
        proptest::collection::vec(1usize..6, 1..8)
            .prop_map(|l| BlockingPattern::from_lengths(l).unwrap())
    }

    proptest! {
        #[test]
        fn expansion_is_blockwise_constant_and_admissible(pattern in pattern_strategy(), seed in 0u64..1000) {
            prop_assert!(is_admissible(&pattern.matrix()));
            let blocked: Vec<_> = (0..pattern.num_blocks()).map(|j| s((j as f64 + seed as f64) * 0.37 % 2.0 - 1.0)).collect();
            let full = pattern.expand(&blocked).unwrap();
            prop_assert_eq!(full.len(), pattern.horizon());
            for k in 0..pattern.horizon() {
                prop_assert_eq!(&full[k], &blocked[pattern.block_of(k)]);
            }
            prop_assert_eq!(pattern.project(&full).unwrap(), blocked);
        }

        #[test]
        fn offset_expansion_is_affine(
            pattern in pattern_strategy(),
            coeffs in proptest::collection::vec(-1.0..1.0f64, 64),
            l1 in -2.0..2.0f64, l2 in -2.0..2.0f64, t in 0.0..1.0f64,
        ) {
            let mb = pattern.num_blocks();
            let n = pattern.horizon();
            let a: Vec<_> = (0..mb).map(|j| s(coeffs[j])).collect();
            let b: Vec<_> = (0..mb).map(|j| s(coeffs[mb + j])).collect();
            let warm: Vec<_> = (0..n).map(|k| s(coeffs[(2 * mb + k) % 64])).collect();
            let mix: Vec<_> = a.iter().zip(&b).map(|(x, y)| x * t + y * (1.0 - t)).collect();
            let lhs = pattern.expand_offset(&mix, &warm, t * l1 + (1.0 - t) * l2).unwrap();
            let ea = pattern.expand_offset(&a, &warm, l1).unwrap();
            let eb = pattern.expand_offset(&b, &warm, l2).unwrap();
            for k in 0..n {
                let rhs = &ea[k] * t + &eb[k] * (1.0 - t);
                prop_assert!((lhs[k][0] - rhs[0]).abs() < 1e-12);
            }
            let sum: Vec<_> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let ea0 = pattern.expand(&a).unwrap();
            let eb0 = pattern.expand(&b).unwrap();
            for (k, u) in pattern.expand(&sum).unwrap().iter().enumerate() {
                prop_assert!((u[0] - (ea0[k][0] + eb0[k][0])).abs() < 1e-15);
            }
        }

        #[test]
        fn offset_rows_match_boxed_expansion(
            pattern in pattern_strategy(),
            coeffs in proptest::collection::vec(-1.5..1.5f64, 64),
            lambda in -2.0..2.0f64,
        ) {
            let mb = pattern.num_blocks();
            let n = pattern.horizon();
            let input_box = BoxBounds::symmetric(1, 1.0).unwrap();
            let warm: Vec<_> = (0..n).map(|k| s(coeffs[(mb + k) % 64] * 0.7)).collect();
            let blocked: Vec<_> = (0..mb).map(|j| s(coeffs[j])).collect();
            let rows = pattern.offset_bound_rows(&warm, &input_box).unwrap();
            let mut z: Vec<f64> = blocked.iter().map(|u| u[0]).collect();
            z.push(lambda);
            let rows_ok = rows.iter().all(|r| r.is_satisfied(&z, 0.0));
            let full = pattern.expand_offset(&blocked, &warm, lambda).unwrap();
            let box_ok = full.iter().all(|u| input_box.violation(u) == 0.0);
            prop_assert_eq!(rows_ok, box_ok);
        }
    }
}
