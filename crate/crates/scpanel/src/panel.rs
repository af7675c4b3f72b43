//! Panel containers and weight types shared by every estimator.
//!
//! A panel is a dense outcome matrix with a block treatment pattern: the
//! last `n1` units are treated in the last `t1` periods. Counts follow the
//! block-design convention where `n0`/`t0` mark the first treated index, so
//! a pattern `(n0, t0, n1, t1)` yields `n0 + n1 - 1` units and
//! `t0 + t1 - 1` periods, of which `n0 - 1` units are pure controls and
//! `t0 - 1` periods are pre-treatment.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum-to-one constraint for weight vectors.
pub const SUM_TOL: f64 = 1e-9;

/// Block treatment pattern. Invariants: `n0 >= 2`, `t0 >= 2`, `n1 >= 1`,
/// `t1 >= 1`, so there is at least one control unit and one pre period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPattern", into = "RawPattern")]
pub struct TreatmentPattern {
    n0: usize,
    t0: usize,
    n1: usize,
    t1: usize,
}

#[derive(Serialize, Deserialize)]
struct RawPattern {
    n0: usize,
    t0: usize,
    n1: usize,
    t1: usize,
}

impl TryFrom<RawPattern> for TreatmentPattern {
    type Error = Error;

    fn try_from(raw: RawPattern) -> Result<Self> {
        TreatmentPattern::new(raw.n0, raw.t0, raw.n1, raw.t1)
    }
}

impl From<TreatmentPattern> for RawPattern {
    fn from(p: TreatmentPattern) -> Self {
        RawPattern { n0: p.n0, t0: p.t0, n1: p.n1, t1: p.t1 }
    }
}

impl TreatmentPattern {
    pub fn new(n0: usize, t0: usize, n1: usize, t1: usize) -> Result<Self> {
        if n0 < 2 {
            return Err(Error::invalid(format!("pattern requires n0 >= 2, got n0 = {n0}")));
        }
        if t0 < 2 {
            return Err(Error::invalid(format!("pattern requires t0 >= 2, got t0 = {t0}")));
        }
        if n1 < 1 {
            return Err(Error::invalid("pattern requires n1 >= 1, got n1 = 0"));
        }
        if t1 < 1 {
            return Err(Error::invalid("pattern requires t1 >= 1, got t1 = 0"));
        }
        Ok(TreatmentPattern { n0, t0, n1, t1 })
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn t1(&self) -> usize {
        self.t1
    }

    /// Number of control units (`n0 - 1`).
    pub fn n_controls(&self) -> usize {
        self.n0 - 1
    }

    /// Number of treated units (`n1`).
    pub fn n_treated(&self) -> usize {
        self.n1
    }

    /// Number of pre-treatment periods (`t0 - 1`).
    pub fn n_pre(&self) -> usize {
        self.t0 - 1
    }

    /// Number of post-treatment periods (`t1`).
    pub fn n_post(&self) -> usize {
        self.t1
    }

    pub fn n_units(&self) -> usize {
        self.n0 + self.n1 - 1
    }

    pub fn n_periods(&self) -> usize {
        self.t0 + self.t1 - 1
    }

    /// Whether cell `(unit, period)` (0-based) falls in the treated block.
    pub fn is_treated(&self, unit: usize, period: usize) -> bool {
        unit >= self.n_controls() && period >= self.n_pre()
    }
}

/// Which regression the weights belong to.
///
/// `Horizontal` weights live on the time axis (`w` over pre periods, `v`
/// over post periods); `Vertical` weights live on the unit axis (`w` over
/// control units, `v` over treated units).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Horizontal,
    Vertical,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Horizontal => write!(f, "horizontal"),
            Direction::Vertical => write!(f, "vertical"),
        }
    }
}

/// A fitted or supplied pair of simplex-box weight vectors plus intercept.
///
/// `w` mixes the "before" axis (pre periods or control units), `v` the
/// "after" axis (post periods or treated units). Both must lie in
/// `{x : x >= 0, sum(x) = 1 +/- 1e-9, x <= cap}` with their own caps.
/// `beta` is the regression intercept; the double-robust estimator ignores
/// it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub direction: Direction,
    #[serde(with = "serde_dvector")]
    pub w: DVector<f64>,
    #[serde(with = "serde_dvector")]
    pub v: DVector<f64>,
    pub beta: f64,
    pub cap_w: f64,
    pub cap_v: f64,
}

impl WeightSet {
    /// Validates both weight vectors against their caps and the intercept
    /// for finiteness. Accepts exactly the feasible set; no slack beyond
    /// the documented `1e-9` on the sums.
    pub fn validate(&self) -> Result<()> {
        validate_simplex_box("w", &self.w, self.cap_w)?;
        validate_simplex_box("v", &self.v, self.cap_v)?;
        if !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta is not finite: {}", self.beta)));
        }
        Ok(())
    }
}

/// Checks `x >= 0`, `x <= cap` coordinatewise and `sum(x) = 1 +/- 1e-9`.
pub fn validate_simplex_box(name: &str, x: &DVector<f64>, cap: f64) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid(format!("{name} is empty")));
    }
    if !cap.is_finite() || cap <= 0.0 {
        return Err(Error::invalid(format!("{name} cap must be positive and finite, got {cap}")));
    }
    for (k, &xk) in x.iter().enumerate() {
        if !xk.is_finite() {
            return Err(Error::invalid(format!("{name}[{k}] is not finite: {xk}")));
        }
        if xk < 0.0 {
            return Err(Error::invalid(format!("{name}[{k}] = {xk} is negative")));
        }
        if xk > cap {
            return Err(Error::invalid(format!(
                "{name}[{k}] = {xk} exceeds cap {cap} by {}",
                xk - cap
            )));
        }
    }
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(format!(
            "{name} must sum to 1 within {SUM_TOL:e}; got sum = {sum} (off by {})",
            sum - 1.0
        )));
    }
    Ok(())
}

/// Convenience wrapper over [`WeightSet::validate`].
pub fn validate_weights(ws: &WeightSet) -> Result<()> {
    ws.validate()
}

/// Aggregation weights over treated units (horizontal) or post periods
/// (vertical). Entries may be negative; only the sum is constrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    #[serde(with = "serde_dvector")]
    pub q: DVector<f64>,
}

impl AggregationWeights {
    pub fn new(q: DVector<f64>) -> Result<Self> {
        let a = AggregationWeights { q };
        a.validate()?;
        Ok(a)
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("aggregation weights require at least one entry"));
        }
        Ok(AggregationWeights { q: DVector::from_element(len, 1.0 / len as f64) })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.is_empty() {
            return Err(Error::invalid("aggregation weights are empty"));
        }
        for (k, &qk) in self.q.iter().enumerate() {
            if !qk.is_finite() {
                return Err(Error::invalid(format!("q[{k}] is not finite: {qk}")));
            }
        }
        let sum: f64 = self.q.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!(
                "q must sum to 1 within {SUM_TOL:e}; got sum = {sum}"
            )));
        }
        Ok(())
    }
}

/// Outcome panel with its treatment pattern and row/column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    outcomes: DMatrix<f64>,
    pattern: TreatmentPattern,
    unit_ids: Vec<String>,
    period_ids: Vec<String>,
}

impl Panel {
    pub fn new(
        outcomes: DMatrix<f64>,
        pattern: TreatmentPattern,
        unit_ids: Vec<String>,
        period_ids: Vec<String>,
    ) -> Result<Self> {
        if outcomes.nrows() != pattern.n_units() || outcomes.ncols() != pattern.n_periods() {
            return Err(Error::invalid(format!(
                "outcome matrix is {}x{}, but the pattern (n0={}, t0={}, n1={}, t1={}) requires {}x{}",
                outcomes.nrows(),
                outcomes.ncols(),
                pattern.n0,
                pattern.t0,
                pattern.n1,
                pattern.t1,
                pattern.n_units(),
                pattern.n_periods()
            )));
        }
        if unit_ids.len() != pattern.n_units() {
            return Err(Error::invalid(format!(
                "expected {} unit ids, got {}",
                pattern.n_units(),
                unit_ids.len()
            )));
        }
        if period_ids.len() != pattern.n_periods() {
            return Err(Error::invalid(format!(
                "expected {} period ids, got {}",
                pattern.n_periods(),
                period_ids.len()
            )));
        }
        for i in 0..outcomes.nrows() {
            for t in 0..outcomes.ncols() {
                let y = outcomes[(i, t)];
                if !y.is_finite() {
                    return Err(Error::invalid(format!(
                        "outcome at unit {} (row {i}), period {} (column {t}) is not finite: {y}",
                        unit_ids[i], period_ids[t]
                    )));
                }
            }
        }
        Ok(Panel { outcomes, pattern, unit_ids, period_ids })
    }

    /// Builds a panel with generated labels `u0..` and `t0..`.
    pub fn from_matrix(outcomes: DMatrix<f64>, pattern: TreatmentPattern) -> Result<Self> {
        let unit_ids = (0..pattern.n_units()).map(|i| format!("u{i}")).collect();
        let period_ids = (0..pattern.n_periods()).map(|t| format!("t{t}")).collect();
        Panel::new(outcomes, pattern, unit_ids, period_ids)
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn pattern(&self) -> &TreatmentPattern {
        &self.pattern
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_ids(&self) -> &[String] {
        &self.period_ids
    }

    /// Control rows, pre columns: `(n0-1) x (t0-1)`.
    pub fn control_pre(&self) -> DMatrixView<'_, f64> {
        let p = &self.pattern;
        self.outcomes.view((0, 0), (p.n_controls(), p.n_pre()))
    }

    /// Control rows, post columns: `(n0-1) x t1`.
    pub fn control_post(&self) -> DMatrixView<'_, f64> {
        let p = &self.pattern;
        self.outcomes.view((0, p.n_pre()), (p.n_controls(), p.n_post()))
    }

    /// Treated rows, pre columns: `n1 x (t0-1)`.
    pub fn treated_pre(&self) -> DMatrixView<'_, f64> {
        let p = &self.pattern;
        self.outcomes.view((p.n_controls(), 0), (p.n_treated(), p.n_pre()))
    }

    /// Treated rows, post columns: `n1 x t1`.
    pub fn treated_post(&self) -> DMatrixView<'_, f64> {
        let p = &self.pattern;
        self.outcomes.view((p.n_controls(), p.n_pre()), (p.n_treated(), p.n_post()))
    }

    /// Transposed panel: units become periods and vice versa. The pattern
    /// swaps `(n0, n1)` with `(t0, t1)`, so vertical problems on the
    /// original panel are horizontal problems on the transpose.
    pub fn transposed(&self) -> Panel {
        let p = &self.pattern;
        let pattern = TreatmentPattern { n0: p.t0, t0: p.n0, n1: p.t1, t1: p.n1 };
        Panel {
            outcomes: self.outcomes.transpose(),
            pattern,
            unit_ids: self.period_ids.clone(),
            period_ids: self.unit_ids.clone(),
        }
    }

    /// Writes the panel as CSV: header `unit,<period ids...>`, one row per
    /// unit. Values are printed with 17 significant digits so that reading
    /// the file back reproduces every f64 bit-for-bit.
    pub fn to_csv_writer<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = Vec::with_capacity(1 + self.period_ids.len());
        header.push("unit".to_string());
        header.extend(self.period_ids.iter().cloned());
        wtr.write_record(&header).map_err(|e| Error::parse(e.to_string()))?;
        for i in 0..self.outcomes.nrows() {
            let mut row = Vec::with_capacity(1 + self.outcomes.ncols());
            row.push(self.unit_ids[i].clone());
            for t in 0..self.outcomes.ncols() {
                row.push(format!("{:.16e}", self.outcomes[(i, t)]));
            }
            wtr.write_record(&row).map_err(|e| Error::parse(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses a panel from CSV produced by [`Panel::to_csv_writer`] (or any
    /// file in the same shape). The pattern must be supplied because the
    /// CSV does not encode it; shape mismatches are reported with both the
    /// expected and the found dimensions.
    pub fn from_csv_reader<R: Read>(input: R, pattern: TreatmentPattern) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut records = rdr.records();

        let header = match records.next() {
            Some(rec) => rec.map_err(|e| Error::parse(format!("header row: {e}")))?,
            None => return Err(Error::parse("empty CSV: missing header row")),
        };
        if header.len() < 2 {
            return Err(Error::parse("header row needs a unit column and at least one period"));
        }
        let period_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if period_ids.len() != pattern.n_periods() {
            return Err(Error::invalid(format!(
                "CSV has {} period columns but the pattern requires {}",
                period_ids.len(),
                pattern.n_periods()
            )));
        }

        let mut unit_ids = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        for (row_idx, rec) in records.enumerate() {
            let rec = rec.map_err(|e| Error::parse(format!("row {}: {e}", row_idx + 2)))?;
            if rec.len() != header.len() {
                return Err(Error::parse(format!(
                    "row {}: expected {} fields, found {}",
                    row_idx + 2,
                    header.len(),
                    rec.len()
                )));
            }
            unit_ids.push(rec[0].to_string());
            for (col_idx, cell) in rec.iter().skip(1).enumerate() {
                let y: f64 = cell.trim().parse().map_err(|_| {
                    Error::parse(format!(
                        "row {} (unit {}), column {} (period {}): invalid float {cell:?}",
                        row_idx + 2,
                        rec[0].to_string(),
                        col_idx + 2,
                        period_ids[col_idx]
                    ))
                })?;
                values.push(y);
            }
        }
        if unit_ids.len() != pattern.n_units() {
            return Err(Error::invalid(format!(
                "CSV has {} unit rows but the pattern requires {}",
                unit_ids.len(),
                pattern.n_units()
            )));
        }
        let outcomes =
            DMatrix::from_row_iterator(unit_ids.len(), period_ids.len(), values.into_iter());
        Panel::new(outcomes, pattern, unit_ids, period_ids)
    }
}

/// Loads a panel from a CSV file. See [`Panel::from_csv_reader`].
pub fn load_panel(path: impl AsRef<std::path::Path>, pattern: TreatmentPattern) -> Result<Panel> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display())))
    })?;
    Panel::from_csv_reader(std::io::BufReader::new(file), pattern)
}

/// Saves a panel to a CSV file. See [`Panel::to_csv_writer`].
pub fn save_panel(panel: &Panel, path: impl AsRef<std::path::Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display())))
    })?;
    panel.to_csv_writer(std::io::BufWriter::new(file))
}

/// Serializes `DVector<f64>` as a plain JSON array.
pub(crate) mod serde_dvector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, ser: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DVector<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(de)?;
        Ok(DVector::from_vec(v))
    }
}

/// Serializes `DMatrix<f64>` as row-major nested JSON arrays.
pub(crate) mod serde_dmatrix_rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> =
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(D::Error::custom(format!(
                    "ragged matrix: row 0 has {ncols} entries, row {i} has {}",
                    r.len()
                )));
            }
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}
