//! Foreground/background data matrices with per-cell observation masks.
//!
//! Rows are samples and columns are features. Unobserved cells are tracked by
//! the mask only; their storage holds NaN and is never read by any
//! computation in this crate.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PcpcaError, Result};

/// Centered column means must be this close to zero.
pub const CENTERING_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    centered: bool,
    feature_mean: DVector<f64>,
}

/// Equal when masks, centering and observed cells agree; the NaN
/// placeholders in unobserved cells are ignored.
impl PartialEq for DataMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.mask == other.mask
            && self.centered == other.centered
            && self.feature_mean == other.feature_mean
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(self.mask.iter())
                .all(|((a, b), &obs)| !obs || a == b)
    }
}

impl DataMatrix {
    /// Fully observed, uncentered data.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::with_mask(values, mask)
    }

    pub fn with_mask(mut values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(PcpcaError::arg(format!(
                "mask shape {:?} does not match values shape {:?}",
                mask.shape(),
                values.shape()
            )));
        }
        for i in 0..values.nrows() {
            for k in 0..values.ncols() {
                if mask[(i, k)] {
                    if !values[(i, k)].is_finite() {
                        return Err(PcpcaError::arg(format!(
                            "observed cell ({},{}) is not finite",
                            i + 1,
                            k + 1
                        )));
                    }
                } else {
                    values[(i, k)] = f64::NAN;
                }
            }
        }
        let d = values.ncols();
        Ok(DataMatrix {
            values,
            mask,
            centered: false,
            feature_mean: DVector::zeros(d),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PcpcaError::arg("rows have differing lengths"));
        }
        Self::new(DMatrix::from_fn(n, d, |i, k| rows[i][k]))
    }

    /// Marks values as already expressed relative to `feature_mean = 0`,
    /// without subtracting anything.
    pub fn from_centered(values: DMatrix<f64>) -> Result<Self> {
        let mut m = Self::new(values)?;
        m.centered = true;
        Ok(m)
    }

    pub fn empty(features: usize) -> Self {
        DataMatrix {
            values: DMatrix::zeros(0, features),
            mask: DMatrix::from_element(0, features, true),
            centered: true,
            feature_mean: DVector::zeros(features),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    /// Raw storage. Unobserved cells are NaN.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, sample: usize, feature: usize) -> bool {
        self.mask[(sample, feature)]
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn feature_mean(&self) -> &DVector<f64> {
        &self.feature_mean
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Dense values; fails if any cell is unobserved.
    pub fn dense(&self) -> Result<&DMatrix<f64>> {
        if self.is_fully_observed() {
            Ok(&self.values)
        } else {
            Err(PcpcaError::arg(
                "operation requires fully observed data (use the missing-data routines)",
            ))
        }
    }

    pub fn observation(&self, sample: usize) -> ObservationMask {
        let d = self.n_features();
        let observed = (0..d).filter(|&k| self.mask[(sample, k)]).collect();
        ObservationMask::from_observed(observed, d).expect("mask indices are in range")
    }

    /// x_i^o: the observed sub-vector of sample `i`.
    pub fn observed_values(&self, sample: usize) -> DVector<f64> {
        let vals: Vec<f64> = (0..self.n_features())
            .filter(|&k| self.mask[(sample, k)])
            .map(|k| self.values[(sample, k)])
            .collect();
        DVector::from_vec(vals)
    }

    /// Subtracts per-column means over observed cells.
    pub fn center(&self) -> Result<DataMatrix> {
        let d = self.n_features();
        let mut means = DVector::zeros(d);
        for k in 0..d {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..self.n_samples() {
                if self.mask[(i, k)] {
                    sum += self.values[(i, k)];
                    count += 1;
                }
            }
            if count == 0 {
                return Err(PcpcaError::EmptyColumn { column: k + 1 });
            }
            means[k] = sum / count as f64;
        }
        let mut out = self.subtract(&means);
        out.feature_mean = &self.feature_mean + &means;
        out.centered = true;
        Ok(out)
    }

    /// Re-expresses raw data relative to an externally supplied mean (for
    /// example the training mean of a fitted model).
    pub fn center_with(&self, mean: &DVector<f64>) -> Result<DataMatrix> {
        if mean.len() != self.n_features() {
            return Err(PcpcaError::arg(format!(
                "mean has length {}, data has {} features",
                mean.len(),
                self.n_features()
            )));
        }
        if self.centered {
            return Err(PcpcaError::arg("data are already centered"));
        }
        let mut out = self.subtract(mean);
        out.feature_mean = mean.clone();
        out.centered = true;
        Ok(out)
    }

    /// Records the mean that centered values are relative to.
    pub fn with_feature_mean(mut self, mean: DVector<f64>) -> DataMatrix {
        assert_eq!(mean.len(), self.n_features(), "mean length must match features");
        self.feature_mean = mean;
        self
    }

    /// Adds `feature_mean` back, returning raw-scale data.
    pub fn uncentered(&self) -> DataMatrix {
        let neg = -&self.feature_mean;
        let mut out = self.subtract(&neg);
        out.feature_mean = DVector::zeros(self.n_features());
        out.centered = false;
        out
    }

    fn subtract(&self, mean: &DVector<f64>) -> DataMatrix {
        let mut values = self.values.clone();
        for i in 0..values.nrows() {
            for k in 0..values.ncols() {
                if self.mask[(i, k)] {
                    values[(i, k)] -= mean[k];
                }
            }
        }
        DataMatrix {
            values,
            mask: self.mask.clone(),
            centered: self.centered,
            feature_mean: self.feature_mean.clone(),
        }
    }

    /// Hides each currently observed cell independently with probability `p`.
    pub fn mask_at_random(&self, p: f64, seed: u64) -> Result<DataMatrix> {
        if !(0.0..1.0).contains(&p) {
            return Err(PcpcaError::arg(format!(
                "masking probability {p} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for i in 0..out.n_samples() {
            for k in 0..out.n_features() {
                if out.mask[(i, k)] && rng.random::<f64>() < p {
                    out.mask[(i, k)] = false;
                    out.values[(i, k)] = f64::NAN;
                }
            }
        }
        Ok(out)
    }

    /// Replaces the observation mask. Cells newly marked observed must hold
    /// finite values.
    pub fn apply_mask(&self, mask: &DMatrix<bool>) -> Result<DataMatrix> {
        let mut out = DataMatrix::with_mask(self.values.clone(), mask.clone())?;
        out.centered = self.centered;
        out.feature_mean = self.feature_mean.clone();
        Ok(out)
    }

    pub fn rows(&self, indices: &[usize]) -> DataMatrix {
        DataMatrix {
            values: self.values.select_rows(indices),
            mask: self.mask.select_rows(indices),
            centered: self.centered,
            feature_mean: self.feature_mean.clone(),
        }
    }

    /// Stacks two matrices row-wise. Both must share centering state.
    pub fn vstack(&self, other: &DataMatrix) -> Result<DataMatrix> {
        if self.n_features() != other.n_features() {
            return Err(PcpcaError::arg("feature counts differ"));
        }
        let (n1, n2, d) = (self.n_samples(), other.n_samples(), self.n_features());
        let values = DMatrix::from_fn(n1 + n2, d, |i, k| {
            if i < n1 {
                self.values[(i, k)]
            } else {
                other.values[(i - n1, k)]
            }
        });
        let mask = DMatrix::from_fn(n1 + n2, d, |i, k| {
            if i < n1 {
                self.mask[(i, k)]
            } else {
                other.mask[(i - n1, k)]
            }
        });
        Ok(DataMatrix {
            values,
            mask,
            centered: self.centered && other.centered,
            feature_mean: self.feature_mean.clone(),
        })
    }
}

/// Observed and unobserved feature indices of one sample.
///
/// The observed list defines the indicator matrix `L` with `L[k, l] = 1` iff
/// `l` is the k-th observed index, so that `x_o = L x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    observed: Vec<usize>,
    unobserved: Vec<usize>,
    dim: usize,
}

impl ObservationMask {
    pub fn from_observed(observed: Vec<usize>, dim: usize) -> Result<Self> {
        if observed.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PcpcaError::arg("observed indices must be strictly increasing"));
        }
        if observed.last().is_some_and(|&k| k >= dim) {
            return Err(PcpcaError::arg("observed index out of range"));
        }
        let unobserved = (0..dim).filter(|k| observed.binary_search(k).is_err()).collect();
        Ok(ObservationMask {
            observed,
            unobserved,
            dim,
        })
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        let observed = flags
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
            .collect();
        Self::from_observed(observed, flags.len()).expect("indices are increasing")
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn unobserved(&self) -> &[usize] {
        &self.unobserved
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// L: D_i × D selector of observed coordinates.
    pub fn indicator(&self) -> DMatrix<f64> {
        selector(&self.observed, self.dim)
    }

    /// P: U_i × D selector of unobserved coordinates.
    pub fn complement_indicator(&self) -> DMatrix<f64> {
        selector(&self.unobserved, self.dim)
    }

    pub fn gather(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&k| x[k]))
    }
}

fn selector(indices: &[usize], dim: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(indices.len(), dim);
    for (row, &col) in indices.iter().enumerate() {
        l[(row, col)] = 1.0;
    }
    l
}

/// Foreground X (n × D) and background Y (m × D) over shared features.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    foreground: DataMatrix,
    background: DataMatrix,
}

impl ContrastivePair {
    pub fn new(foreground: DataMatrix, background: DataMatrix) -> Result<Self> {
        if foreground.n_features() != background.n_features() {
            return Err(PcpcaError::arg(format!(
                "foreground has {} features, background has {}",
                foreground.n_features(),
                background.n_features()
            )));
        }
        if foreground.n_samples() == 0 || background.n_samples() == 0 {
            return Err(PcpcaError::arg(
                "foreground and background each need at least one sample",
            ));
        }
        Ok(ContrastivePair {
            foreground,
            background,
        })
    }

    /// A pair with an empty background; the relative likelihood then reduces
    /// to the ordinary likelihood of the foreground.
    pub fn foreground_only(foreground: DataMatrix) -> Result<Self> {
        if foreground.n_samples() == 0 {
            return Err(PcpcaError::arg("foreground needs at least one sample"));
        }
        let background = DataMatrix::empty(foreground.n_features());
        Ok(ContrastivePair {
            foreground,
            background,
        })
    }

    pub fn foreground(&self) -> &DataMatrix {
        &self.foreground
    }

    pub fn background(&self) -> &DataMatrix {
        &self.background
    }

    pub fn n(&self) -> usize {
        self.foreground.n_samples()
    }

    pub fn m(&self) -> usize {
        self.background.n_samples()
    }

    pub fn dim(&self) -> usize {
        self.foreground.n_features()
    }

    pub fn is_centered(&self) -> bool {
        self.foreground.is_centered() && self.background.is_centered()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.foreground.is_fully_observed() && self.background.is_fully_observed()
    }

    /// Centers each matrix by its own observed-cell column means.
    pub fn centered(&self) -> Result<ContrastivePair> {
        let background = if self.m() == 0 {
            self.background.clone()
        } else {
            self.background.center()?
        };
        Ok(ContrastivePair {
            foreground: self.foreground.center()?,
            background,
        })
    }

    pub fn map<F>(&self, mut f: F) -> Result<ContrastivePair>
    where
        F: FnMut(&DataMatrix) -> Result<DataMatrix>,
    {
        let foreground = f(&self.foreground)?;
        let background = if self.m() == 0 {
            self.background.clone()
        } else {
            f(&self.background)?
        };
        Ok(ContrastivePair {
            foreground,
            background,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    pub missing_token: String,
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<DataMatrix> {
    let file = std::fs::File::open(path)?;
    parse_csv(file, opts)
}

pub fn parse_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<DataMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .from_reader(reader);
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut width = None;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = r + 1;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(PcpcaError::RaggedRow {
                row: row_no,
                found: record.len(),
                expected,
            });
        }
        let mut row = Vec::with_capacity(expected);
        for (c, field) in record.iter().enumerate() {
            let field = field.trim();
            if field == opts.missing_token {
                row.push(None);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| PcpcaError::Parse {
                row: row_no,
                col: c + 1,
                message: format!("non-numeric cell {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(PcpcaError::Parse {
                    row: row_no,
                    col: c + 1,
                    message: format!("non-finite cell {field:?}"),
                });
            }
            row.push(Some(v));
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = width.unwrap_or(0);
    let values = DMatrix::from_fn(n, d, |i, k| rows[i][k].unwrap_or(f64::NAN));
    let mask = DMatrix::from_fn(n, d, |i, k| rows[i][k].is_some());
    DataMatrix::with_mask(values, mask)
}

/// Writes observed values; unobserved cells become `missing_token`.
pub fn write_csv<W: Write>(writer: W, data: &DMatrix<f64>, mask: Option<&DMatrix<bool>>, missing_token: &str) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().from_writer(writer);
    for i in 0..data.nrows() {
        let record: Vec<String> = (0..data.ncols())
            .map(|k| {
                if mask.is_some_and(|m| !m[(i, k)]) {
                    missing_token.to_string()
                } else {
                    format!("{}", data[(i, k)])
                }
            })
            .collect();
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, data: &DMatrix<f64>) -> Result<()> {
    write_csv(std::fs::File::create(path)?, data, None, "")
}

/// Parallel 0/1 representation of a mask (1 = observed).
pub fn write_mask_csv<W: Write>(writer: W, mask: &DMatrix<bool>) -> Result<()> {
    let ints = mask.map(|b| if b { 1.0 } else { 0.0 });
    write_csv(writer, &ints, None, "")
}

pub fn parse_mask_csv<R: Read>(reader: R) -> Result<DMatrix<bool>> {
    let m = parse_csv(reader, &CsvOptions::default())?;
    if !m.is_fully_observed() {
        return Err(PcpcaError::arg("mask csv has empty cells"));
    }
    let mut out = DMatrix::from_element(m.n_samples(), m.n_features(), false);
    for i in 0..m.n_samples() {
        for k in 0..m.n_features() {
            out[(i, k)] = match m.values()[(i, k)] {
                1.0 => true,
                0.0 => false,
                _ => {
                    return Err(PcpcaError::Parse {
                        row: i + 1,
                        col: k + 1,
                        message: "mask cells must be 0 or 1".into(),
                    })
                }
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn parse(s: &str) -> Result<DataMatrix> {
        parse_csv(s.as_bytes(), &CsvOptions::default())
    }

    #[test]
    fn parses_dense_csv() {
        let m = parse("1.0,2.0\n3.0,4.0").unwrap();
        assert_eq!(m.n_samples(), 2);
        assert_eq!(m.n_features(), 2);
        assert!(m.is_fully_observed());
        assert_eq!(m.values()[(1, 0)], 3.0);
        assert!(!m.is_centered());
    }

    #[test]
    fn empty_cell_is_unobserved() {
        let m = parse("1.0,\n3.0,4.0").unwrap();
        assert!(!m.is_observed(0, 1));
        assert!(m.is_observed(1, 1));
        assert_eq!(m.observed_count(), 3);
    }

    #[test]
    fn custom_missing_token_and_header() {
        let opts = CsvOptions {
            has_header: true,
            missing_token: "NA".into(),
        };
        let m = parse_csv("a,b\n1,NA\n2,3\n".as_bytes(), &opts).unwrap();
        assert_eq!(m.n_samples(), 2);
        assert!(!m.is_observed(0, 1));
    }

    #[test]
    fn non_numeric_cell_reports_coordinates() {
        match parse("1.0,x\n") {
            Err(PcpcaError::Parse { row, col, .. }) => assert_eq!((row, col), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_reports_index() {
        match parse("1,2\n3\n") {
            Err(PcpcaError::RaggedRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn centering_two_point_column() {
        let m = DataMatrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let c = m.center().unwrap();
        assert_eq!(c.values()[(0, 0)], -1.0);
        assert_eq!(c.values()[(1, 0)], 1.0);
        assert_eq!(c.feature_mean()[0], 2.0);
        assert!(c.is_centered());
    }

    #[test]
    fn centering_zero_mean_column_is_fixed_point() {
        let m = DataMatrix::from_rows(&[vec![-2.0], vec![2.0]]).unwrap();
        let c = m.center().unwrap();
        assert_eq!(c.values(), m.values());
        assert_eq!(c.feature_mean()[0], 0.0);
    }

    #[test]
    fn centering_uses_observed_cells_only() {
        let values = DMatrix::from_column_slice(3, 1, &[1.0, 99.0, 3.0]);
        let mask = DMatrix::from_column_slice(3, 1, &[true, false, true]);
        let c = DataMatrix::with_mask(values, mask).unwrap().center().unwrap();
        assert_eq!(c.values()[(0, 0)], -1.0);
        assert_eq!(c.values()[(2, 0)], 1.0);
        assert!(c.values()[(1, 0)].is_nan());
        assert_eq!(c.feature_mean()[0], 2.0);
    }

    #[test]
    fn fully_unobserved_column_is_an_error() {
        let values = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]);
        let mask = DMatrix::from_row_slice(2, 2, &[true, false, true, false]);
        let m = DataMatrix::with_mask(values, mask).unwrap();
        assert!(matches!(m.center(), Err(PcpcaError::EmptyColumn { column: 2 })));
    }

    #[test]
    fn masking_probability_zero_keeps_mask() {
        let m = DataMatrix::new(DMatrix::from_element(5, 4, 1.0)).unwrap();
        assert_eq!(m.mask_at_random(0.0, 1).unwrap(), m);
    }

    #[test]
    fn masking_rejects_bad_probability() {
        let m = DataMatrix::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!(m.mask_at_random(1.0, 1).is_err());
        assert!(m.mask_at_random(-0.1, 1).is_err());
    }

    #[test]
    fn masking_fraction_concentrates() {
        // binomial sd at 1e4 cells is 0.005; 0.02 is four sd
        let m = DataMatrix::new(DMatrix::from_element(100, 100, 1.0)).unwrap();
        let masked = m.mask_at_random(0.5, 7).unwrap();
        let frac = masked.observed_count() as f64 / 1e4;
        assert!((frac - 0.5).abs() < 0.02, "observed fraction {frac}");
    }

    #[test]
    fn masking_is_deterministic() {
        let m = DataMatrix::new(DMatrix::from_element(20, 6, 1.0)).unwrap();
        assert_eq!(m.mask_at_random(0.3, 42).unwrap(), m.mask_at_random(0.3, 42).unwrap());
        assert_ne!(m.mask_at_random(0.3, 42).unwrap(), m.mask_at_random(0.3, 43).unwrap());
    }

    #[test]
    fn mask_csv_round_trip() {
        let m = DataMatrix::new(DMatrix::from_element(4, 3, 2.0))
            .unwrap()
            .mask_at_random(0.5, 3)
            .unwrap();
        let mut buf = Vec::new();
        write_mask_csv(&mut buf, m.mask()).unwrap();
        assert_eq!(&parse_mask_csv(buf.as_slice()).unwrap(), m.mask());
    }

    #[test]
    fn observation_mask_partitions_features() {
        let om = ObservationMask::from_flags(&[true, false, true, false]);
        assert_eq!(om.observed(), &[0, 2]);
        assert_eq!(om.unobserved(), &[1, 3]);
        assert!(ObservationMask::from_observed(vec![2, 1], 4).is_err());
    }

    #[test]
    fn pair_requires_matching_features() {
        let x = DataMatrix::new(DMatrix::zeros(2, 3)).unwrap();
        let y = DataMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(ContrastivePair::new(x.clone(), y).is_err());
        assert!(ContrastivePair::new(x, DataMatrix::empty(3)).is_err());
    }

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 10.0 - 5.0)
    }

    proptest! {
        #[test]
        fn centering_is_idempotent(seed in any::<u64>(), p in 0.0f64..0.5) {
            let m = DataMatrix::new(random_matrix(seed, 12, 4)).unwrap();
            let m = m.mask_at_random(p, seed).unwrap();
            prop_assume!((0..4).all(|k| (0..12).any(|i| m.is_observed(i, k))));
            let once = m.center().unwrap();
            let twice = once.center().unwrap();
            for i in 0..12 {
                for k in 0..4 {
                    if once.is_observed(i, k) {
                        prop_assert!((once.values()[(i, k)] - twice.values()[(i, k)]).abs() <= 1e-9);
                    }
                }
            }
            for k in 0..4 {
                let col: Vec<f64> = (0..12).filter(|&i| once.is_observed(i, k)).map(|i| once.values()[(i, k)]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                prop_assert!(mean.abs() <= CENTERING_TOL);
            }
            prop_assert!((once.feature_mean() - twice.feature_mean()).amax() <= 1e-9);
        }

        #[test]
        fn indicator_gather_matches_direct_gather(seed in any::<u64>(), p in 0.0f64..0.9) {
            let m = DataMatrix::new(random_matrix(seed, 6, 4)).unwrap().mask_at_random(p, seed ^ 1).unwrap();
            let full = DataMatrix::new(random_matrix(seed, 6, 4)).unwrap();
            for i in 0..6 {
                let om = m.observation(i);
                let x = full.values().row(i).transpose();
                let via_l = om.indicator() * &x;
                prop_assert_eq!(&via_l, &om.gather(&x));
                prop_assert_eq!(&m.observed_values(i), &via_l);
                // indicator entries: L[k, l] = 1 iff l = i_k
                let l = om.indicator();
                for (row, &col) in om.observed().iter().enumerate() {
                    for c in 0..4 {
                        prop_assert_eq!(l[(row, c)], if c == col { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }
}
