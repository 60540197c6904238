//! Panel data model: rectangular unit × period observations, treatment
//! histories, and construction of the per-period history matrices used as
//! regressors and balancing targets.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{DcbError, Result};

/// Rectangular panel: `n` units observed over `T` periods, each period
/// carrying a covariate vector, a binary treatment, and an outcome.
/// Immutable after construction; safe to share across workers.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    n: usize,
    t_periods: usize,
    p_cov: usize,
    unit_ids: Vec<String>,
    /// Covariates, shape (n, T, p_cov).
    x: Array3<f64>,
    /// Treatments in {0,1}, shape (n, T).
    d: Array2<u8>,
    /// Outcomes, shape (n, T).
    y: Array2<f64>,
}

impl PanelDataset {
    /// Builds a panel from raw arrays, validating shape and treatment coding.
    pub fn new(
        unit_ids: Vec<String>,
        x: Array3<f64>,
        d: Array2<u8>,
        y: Array2<f64>,
    ) -> Result<Self> {
        let (n, t_periods, p_cov) = x.dim();
        if n == 0 || t_periods == 0 {
            return Err(DcbError::InvalidArgument(
                "panel must have at least one unit and one period".into(),
            ));
        }
        if unit_ids.len() != n || d.dim() != (n, t_periods) || y.dim() != (n, t_periods) {
            return Err(DcbError::InvalidArgument(
                "unit_ids, x, d, y dimensions disagree".into(),
            ));
        }
        for (i, row) in d.outer_iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(DcbError::NonBinaryTreatment {
                        unit: unit_ids[i].clone(),
                        period: t + 1,
                        value: v.to_string(),
                    });
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(DcbError::NonFinite {
                what: "panel covariates or outcomes".into(),
            });
        }
        Ok(Self {
            n,
            t_periods,
            p_cov,
            unit_ids,
            x,
            d,
            y,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn n_periods(&self) -> usize {
        self.t_periods
    }

    pub fn p_cov(&self) -> usize {
        self.p_cov
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    /// Covariate value for unit `i`, period `t` (1-based), coordinate `j`.
    pub fn x(&self, i: usize, t: usize, j: usize) -> f64 {
        self.x[(i, t - 1, j)]
    }

    /// Treatment indicator for unit `i` at period `t` (1-based).
    pub fn d(&self, i: usize, t: usize) -> u8 {
        self.d[(i, t - 1)]
    }

    /// Outcome for unit `i` at period `t` (1-based).
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[(i, t - 1)]
    }

    /// Outcomes at the end-line period, one per unit.
    pub fn endline_outcomes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.y(i, self.t_periods)).collect()
    }
}

/// A target assignment vector d_{1:t}; potential outcomes are indexed by it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreatmentHistory(Vec<u8>);

impl TreatmentHistory {
    pub fn new(d: Vec<u8>) -> Result<Self> {
        if d.is_empty() {
            return Err(DcbError::InvalidArgument(
                "treatment history must have length >= 1".into(),
            ));
        }
        if d.iter().any(|&v| v > 1) {
            return Err(DcbError::InvalidArgument(
                "treatment history entries must be 0 or 1".into(),
            ));
        }
        Ok(Self(d))
    }

    /// All-ones (or all-zeros) history of length `t`.
    pub fn constant(value: u8, t: usize) -> Result<Self> {
        Self::new(vec![value; t])
    }

    /// Parses a comma-separated bit string such as "1,0,1".
    pub fn parse(s: &str) -> Result<Self> {
        let bits: Result<Vec<u8>> = s
            .split(',')
            .map(|tok| match tok.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(DcbError::InvalidArgument(format!(
                    "treatment history entry `{other}` is not 0 or 1"
                ))),
            })
            .collect();
        Self::new(bits?)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    /// The prefix d_{1:t}.
    pub fn prefix(&self, t: usize) -> Self {
        assert!(t >= 1 && t <= self.len());
        Self(self.0[..t].to_vec())
    }
}

impl fmt::Display for TreatmentHistory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Options for history-matrix construction.
#[derive(Debug, Clone, Copy)]
pub struct HistoryOpts {
    pub intercept: bool,
    pub interactions: bool,
}

impl Default for HistoryOpts {
    fn default() -> Self {
        // Interactions are off by default; the intercept column is appended
        // and is never penalized downstream.
        Self {
            intercept: true,
            interactions: false,
        }
    }
}

/// Per-period history matrix H_t. Fixed column layout: past treatments,
/// then covariates by period, then lagged outcomes, then intercept, then
/// treatment × covariate interactions.
#[derive(Debug, Clone)]
pub struct HistoryMatrix {
    pub t: usize,
    pub rows: Array2<f64>,
    pub col_names: Vec<String>,
    pub treat_cols: Range<usize>,
    pub cov_cols: Range<usize>,
    pub outcome_cols: Range<usize>,
    pub intercept_col: Option<usize>,
    pub interaction_cols: Range<usize>,
}

impl HistoryMatrix {
    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    /// Dot product of row `i` with a coefficient vector.
    pub fn dot_row(&self, i: usize, beta: &[f64]) -> f64 {
        debug_assert_eq!(beta.len(), self.width());
        self.rows
            .row(i)
            .iter()
            .zip(beta)
            .map(|(h, b)| h * b)
            .sum()
    }

    /// Columns that hold treatment indicators (the unpenalized block,
    /// together with the intercept).
    pub fn is_treatment_col(&self, j: usize) -> bool {
        self.treat_cols.contains(&j)
    }
}

/// Builds H_t for every unit: `[d_{1..t-1}, x_{1..t}, y_{1..t-1}]` plus the
/// optional intercept and interaction blocks. For t = 1 this reduces to the
/// baseline covariates (+ intercept).
pub fn build_history(data: &PanelDataset, t: usize, opts: HistoryOpts) -> Result<HistoryMatrix> {
    if t < 1 || t > data.n_periods() {
        return Err(DcbError::PeriodOutOfRange {
            t,
            t_max: data.n_periods(),
        });
    }
    let n = data.n_units();
    let p = data.p_cov();
    let n_treat = t - 1;
    let n_cov = t * p;
    let n_out = t - 1;
    let n_int = if opts.interactions { n_treat * n_cov } else { 0 };
    let width = n_treat + n_cov + n_out + usize::from(opts.intercept) + n_int;

    let mut rows = Array2::<f64>::zeros((n, width));
    let mut col_names = Vec::with_capacity(width);

    for s in 1..t {
        col_names.push(format!("d{s}"));
    }
    for s in 1..=t {
        for j in 0..p {
            col_names.push(format!("x{s}_{j}"));
        }
    }
    for s in 1..t {
        col_names.push(format!("y{s}"));
    }
    let intercept_col = if opts.intercept {
        col_names.push("intercept".into());
        Some(n_treat + n_cov + n_out)
    } else {
        None
    };
    if opts.interactions {
        for s in 1..t {
            for u in 1..=t {
                for j in 0..p {
                    col_names.push(format!("d{s}*x{u}_{j}"));
                }
            }
        }
    }

    for i in 0..n {
        let mut c = 0;
        for s in 1..t {
            rows[(i, c)] = f64::from(data.d(i, s));
            c += 1;
        }
        for s in 1..=t {
            for j in 0..p {
                rows[(i, c)] = data.x(i, s, j);
                c += 1;
            }
        }
        for s in 1..t {
            rows[(i, c)] = data.y(i, s);
            c += 1;
        }
        if opts.intercept {
            rows[(i, c)] = 1.0;
            c += 1;
        }
        if opts.interactions {
            for s in 1..t {
                let ds = f64::from(data.d(i, s));
                for u in 1..=t {
                    for j in 0..p {
                        rows[(i, c)] = ds * data.x(i, u, j);
                        c += 1;
                    }
                }
            }
        }
        debug_assert_eq!(c, width);
    }

    let interaction_start = n_treat + n_cov + n_out + usize::from(opts.intercept);
    Ok(HistoryMatrix {
        t,
        rows,
        col_names,
        treat_cols: 0..n_treat,
        cov_cols: n_treat..n_treat + n_cov,
        outcome_cols: n_treat + n_cov..n_treat + n_cov + n_out,
        intercept_col,
        interaction_cols: interaction_start..interaction_start + n_int,
    })
}

/// `mask[i] = true` iff unit i's realized assignments match `d` elementwise
/// over the first `d.len()` periods.
pub fn match_mask(data: &PanelDataset, d: &TreatmentHistory) -> Vec<bool> {
    assert!(
        d.len() <= data.n_periods(),
        "history longer than panel ({} > {})",
        d.len(),
        data.n_periods()
    );
    (0..data.n_units())
        .map(|i| d.bits().iter().enumerate().all(|(t, &b)| data.d(i, t + 1) == b))
        .collect()
}

/// Long-form CSV schema: which columns hold the unit id, period, treatment,
/// and outcome. Columns not named here are covariates (in file order) unless
/// an explicit covariate list is given.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    pub unit: String,
    pub period: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            unit: "unit_id".into(),
            period: "period".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariates: None,
        }
    }
}

/// Loads a long-form CSV (one row per unit × period) into a rectangular
/// panel sorted by (unit, period). Periods must be consecutive integers
/// starting at 1; ragged panels and non-binary treatments are rejected.
pub fn load_panel(path: &Path, schema: &ColumnSchema) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DcbError::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DcbError::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DcbError::Parse {
                row: 0,
                column: name.to_string(),
                message: "required column missing from header".into(),
            })
    };
    let unit_idx = find(&schema.unit)?;
    let period_idx = find(&schema.period)?;
    let treat_idx = find(&schema.treatment)?;
    let outcome_idx = find(&schema.outcome)?;

    let cov_idx: Vec<usize> = match &schema.covariates {
        Some(names) => names
            .iter()
            .map(|n| find(n))
            .collect::<Result<Vec<usize>>>()?,
        None => (0..headers.len())
            .filter(|&j| {
                j != unit_idx && j != period_idx && j != treat_idx && j != outcome_idx
            })
            .collect(),
    };
    let p_cov = cov_idx.len();

    struct Row {
        unit: String,
        period: usize,
        d: u8,
        y: f64,
        x: Vec<f64>,
    }

    let mut rows: Vec<Row> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let row_no = line + 2; // 1-based, after the header
        let record = record.map_err(|e| DcbError::Parse {
            row: row_no,
            column: String::new(),
            message: e.to_string(),
        })?;
        let field = |j: usize| record.get(j).unwrap_or("").trim();

        let period: usize = field(period_idx).parse().map_err(|_| DcbError::Parse {
            row: row_no,
            column: schema.period.clone(),
            message: format!("`{}` is not a positive integer", field(period_idx)),
        })?;
        let unit = field(unit_idx).to_string();
        let d = match field(treat_idx) {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                // Distinguish a non-binary number from a parse failure.
                if other.parse::<f64>().is_ok() {
                    return Err(DcbError::NonBinaryTreatment {
                        unit,
                        period,
                        value: other.to_string(),
                    });
                }
                return Err(DcbError::Parse {
                    row: row_no,
                    column: schema.treatment.clone(),
                    message: format!("`{other}` is not a treatment indicator"),
                });
            }
        };
        let y: f64 = field(outcome_idx).parse().map_err(|_| DcbError::Parse {
            row: row_no,
            column: schema.outcome.clone(),
            message: format!("`{}` is not a number", field(outcome_idx)),
        })?;
        let mut x = Vec::with_capacity(p_cov);
        for &j in &cov_idx {
            let v: f64 = field(j).parse().map_err(|_| DcbError::Parse {
                row: row_no,
                column: headers[j].clone(),
                message: format!("`{}` is not a number", field(j)),
            })?;
            x.push(v);
        }
        rows.push(Row {
            unit,
            period,
            d,
            y,
            x,
        });
    }

    if rows.is_empty() {
        return Err(DcbError::InvalidArgument("panel CSV has no data rows".into()));
    }

    let t_periods = rows.iter().map(|r| r.period).max().unwrap();
    let mut units: Vec<String> = rows.iter().map(|r| r.unit.clone()).collect();
    units.sort();
    units.dedup();
    let n = units.len();

    let mut x = Array3::<f64>::zeros((n, t_periods, p_cov));
    let mut d = Array2::<u8>::zeros((n, t_periods));
    let mut y = Array2::<f64>::zeros((n, t_periods));
    let mut seen = vec![vec![false; t_periods]; n];

    for row in &rows {
        let i = units.binary_search(&row.unit).unwrap();
        if row.period < 1 || row.period > t_periods {
            return Err(DcbError::Parse {
                row: 0,
                column: schema.period.clone(),
                message: format!("period {} out of range", row.period),
            });
        }
        let t = row.period - 1;
        if seen[i][t] {
            return Err(DcbError::Parse {
                row: 0,
                column: schema.period.clone(),
                message: format!("duplicate (unit={}, period={})", row.unit, row.period),
            });
        }
        seen[i][t] = true;
        d[(i, t)] = row.d;
        y[(i, t)] = row.y;
        for (j, &v) in row.x.iter().enumerate() {
            x[(i, t, j)] = v;
        }
    }

    for (i, unit_seen) in seen.iter().enumerate() {
        let found = unit_seen.iter().filter(|&&s| s).count();
        if found != t_periods {
            return Err(DcbError::MissingCell {
                unit: units[i].clone(),
                found,
                expected: t_periods,
            });
        }
    }

    PanelDataset::new(units, x, d, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn toy_panel() -> PanelDataset {
        // 3 units, 2 periods, 2 covariates.
        let x = Array3::from_shape_fn((3, 2, 2), |(i, t, j)| (i * 4 + t * 2 + j) as f64);
        let d = Array2::from_shape_vec((3, 2), vec![1, 0, 0, 1, 1, 1]).unwrap();
        let y = Array2::from_shape_fn((3, 2), |(i, t)| (10 * i + t) as f64);
        PanelDataset::new(vec!["a".into(), "b".into(), "c".into()], x, d, y).unwrap()
    }

    #[test]
    fn load_minimal_rectangular_panel() {
        let f = write_csv(
            "unit_id,period,treatment,outcome,x1\n\
             u1,1,1,0.5,0.1\n\
             u1,2,0,1.5,0.2\n\
             u2,1,0,0.7,0.3\n\
             u2,2,1,1.7,0.4\n",
        );
        let panel = load_panel(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(panel.n_units(), 2);
        assert_eq!(panel.n_periods(), 2);
        assert_eq!(panel.p_cov(), 1);
        assert_eq!(panel.d(0, 1), 1);
        assert_eq!(panel.y(1, 2), 1.7);
    }

    #[test]
    fn load_rejects_nonbinary_treatment() {
        let f = write_csv(
            "unit_id,period,treatment,outcome,x1\n\
             u1,1,2,0.5,0.1\n",
        );
        let err = load_panel(f.path(), &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, DcbError::NonBinaryTreatment { .. }), "{err}");
    }

    #[test]
    fn load_rejects_ragged_panel() {
        let f = write_csv(
            "unit_id,period,treatment,outcome,x1\n\
             u1,1,1,0.5,0.1\n\
             u1,2,0,1.5,0.2\n\
             u2,1,0,0.7,0.3\n",
        );
        let err = load_panel(f.path(), &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, DcbError::MissingCell { .. }), "{err}");
    }

    #[test]
    fn load_reports_parse_location() {
        let f = write_csv(
            "unit_id,period,treatment,outcome,x1\n\
             u1,1,1,abc,0.1\n",
        );
        let err = load_panel(f.path(), &ColumnSchema::default()).unwrap_err();
        match err {
            DcbError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "outcome");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn history_width_t1() {
        let panel = toy_panel();
        let h = build_history(&panel, 1, HistoryOpts::default()).unwrap();
        // p_cov=2 plus intercept.
        assert_eq!(h.width(), 3);
        assert_eq!(h.col_names, vec!["x1_0", "x1_1", "intercept"]);
        assert_eq!(h.rows[(1, 0)], 4.0);
        assert_eq!(h.rows[(0, 2)], 1.0);
    }

    #[test]
    fn history_width_t2() {
        let panel = toy_panel();
        let h = build_history(&panel, 2, HistoryOpts::default()).unwrap();
        // 1 treatment + 4 covariates + 1 lagged outcome + intercept = 7.
        assert_eq!(h.width(), 7);
        assert_eq!(h.intercept_col, Some(6));
        assert_eq!(h.rows[(0, 0)], 1.0); // d1 of unit a
        assert_eq!(h.rows[(2, 5)], 20.0); // y1 of unit c
    }

    #[test]
    fn history_prefix_extension() {
        // Deleting the period-t blocks from H_t must give H_{t-1} exactly.
        let panel = toy_panel();
        let h1 = build_history(&panel, 1, HistoryOpts::default()).unwrap();
        let h2 = build_history(&panel, 2, HistoryOpts::default()).unwrap();
        for i in 0..panel.n_units() {
            // H_2 layout: [d1, x1 (2), x2 (2), y1, intercept]
            let kept = [h2.rows[(i, 1)], h2.rows[(i, 2)], h2.rows[(i, 6)]];
            let h1_row = [h1.rows[(i, 0)], h1.rows[(i, 1)], h1.rows[(i, 2)]];
            assert_eq!(kept, h1_row);
        }
    }

    #[test]
    fn history_interactions_block() {
        let panel = toy_panel();
        let h = build_history(
            &panel,
            2,
            HistoryOpts {
                intercept: true,
                interactions: true,
            },
        )
        .unwrap();
        // 7 base columns + 1 treatment × 4 covariate interactions.
        assert_eq!(h.width(), 11);
        assert_eq!(h.interaction_cols, 7..11);
        // Unit a has d1=1, so its interaction block equals its covariates.
        for (k, j) in h.cov_cols.clone().enumerate() {
            assert_eq!(h.rows[(0, 7 + k)], h.rows[(0, j)]);
        }
        // Unit b has d1=0, so the block is zero.
        for k in 7..11 {
            assert_eq!(h.rows[(1, k)], 0.0);
        }
    }

    #[test]
    fn history_rejects_bad_period() {
        let panel = toy_panel();
        assert!(matches!(
            build_history(&panel, 0, HistoryOpts::default()),
            Err(DcbError::PeriodOutOfRange { .. })
        ));
        assert!(matches!(
            build_history(&panel, 3, HistoryOpts::default()),
            Err(DcbError::PeriodOutOfRange { .. })
        ));
    }

    #[test]
    fn match_mask_direct_comparison() {
        let panel = toy_panel(); // D rows: (1,0), (0,1), (1,1)
        let d1 = TreatmentHistory::new(vec![1]).unwrap();
        assert_eq!(match_mask(&panel, &d1), vec![true, false, true]);
        let d11 = TreatmentHistory::new(vec![1, 1]).unwrap();
        assert_eq!(match_mask(&panel, &d11), vec![false, false, true]);
    }

    #[test]
    fn match_mask_monotone_nesting() {
        let panel = toy_panel();
        let d = TreatmentHistory::new(vec![1, 1]).unwrap();
        let long = match_mask(&panel, &d);
        let short = match_mask(&panel, &d.prefix(1));
        for i in 0..panel.n_units() {
            assert!(!long[i] || short[i]);
        }
    }

    #[test]
    fn empty_history_rejected() {
        assert!(TreatmentHistory::new(vec![]).is_err());
        assert!(TreatmentHistory::parse("1,2").is_err());
        assert_eq!(
            TreatmentHistory::parse("1,0").unwrap().bits(),
            &[1, 0]
        );
    }
}
