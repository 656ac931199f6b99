//! Site-local records, covariate basis, and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Source,
}

impl std::str::FromStr for Role {
    type Err = FaceError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Role::Target),
            "source" => Ok(Role::Source),
            other => Err(FaceError::Validation(format!(
                "unknown role {other:?} (expected target or source)"
            ))),
        }
    }
}

/// Outcome type, detected from the data: all values in {0, 1} means binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

/// One site's raw records. These never leave the site.
#[derive(Debug, Clone)]
pub struct SiteData<T> {
    site_id: String,
    y: Vec<T>,
    treated: Vec<bool>,
    x: Matrix<T>,
    role: Role,
    outcome: OutcomeKind,
}

impl<T: Real> SiteData<T> {
    pub fn new(
        site_id: impl Into<String>,
        y: Vec<T>,
        treated: Vec<bool>,
        x: Matrix<T>,
        role: Role,
    ) -> Result<Self> {
        let site_id = site_id.into();
        let n = y.len();
        if n == 0 {
            return Err(FaceError::Validation(format!("site {site_id}: no rows")));
        }
        if treated.len() != n || x.rows() != n {
            return Err(FaceError::Validation(format!(
                "site {site_id}: column lengths disagree (y {n}, a {}, x {})",
                treated.len(),
                x.rows()
            )));
        }
        if !y.iter().all(|v| v.is_finite()) || !x.is_finite() {
            return Err(FaceError::Validation(format!(
                "site {site_id}: NaN or infinite value present"
            )));
        }
        let n_treated = treated.iter().filter(|&&t| t).count();
        if n_treated == 0 || n_treated == n {
            return Err(FaceError::Validation(format!(
                "site {site_id}: single treatment arm"
            )));
        }
        let outcome = if y.iter().all(|&v| v == T::zero() || v == T::one()) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        };
        Ok(Self {
            site_id,
            y,
            treated,
            x,
            role,
            outcome,
        })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn x(&self) -> &Matrix<T> {
        &self.x
    }

    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&t| t).count()
    }

    /// Rows `idx` as a new site (bootstrap resamples, sample splits). Fails if
    /// the subset loses a treatment arm.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut sub = Self::new(
            self.site_id.clone(),
            idx.iter().map(|&i| self.y[i]).collect(),
            idx.iter().map(|&i| self.treated[i]).collect(),
            self.x.select_rows(idx),
            self.role,
        )?;
        // a resample of a binary outcome stays binary; a continuous column
        // that happens to land on {0,1} must not switch families.
        sub.outcome = self.outcome;
        Ok(sub)
    }

    /// Random 50/50 split, stratified by treatment arm so that both halves
    /// keep both arms. Deterministic in `seed`.
    pub fn split_halves(&self, seed: u64) -> Result<(Self, Self)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut first = Vec::with_capacity(self.n() / 2 + 1);
        let mut second = Vec::with_capacity(self.n() / 2 + 1);
        for arm in [true, false] {
            let mut idx: Vec<usize> = (0..self.n()).filter(|&i| self.treated[i] == arm).collect();
            idx.shuffle(&mut rng);
            let half = idx.len() / 2;
            first.extend_from_slice(&idx[..half]);
            second.extend_from_slice(&idx[half..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.subset(&first)?, self.subset(&second)?))
    }
}

/// Covariate expansion `ψ` used by the density-ratio model. `ψ` always
/// carries an intercept in its first coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `ψ(x) = (1, xᵀ)ᵀ`
    #[default]
    Identity,
}

impl Basis {
    pub fn dim(self, p: usize) -> usize {
        match self {
            Basis::Identity => p + 1,
        }
    }

    /// Expands every row of `x`; the result is `n × q`.
    pub fn design<T: Real>(self, x: &Matrix<T>) -> Matrix<T> {
        let q = self.dim(x.cols());
        let mut out = Matrix::zeros(x.rows(), q);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&psi(x.row(i), self));
        }
        out
    }
}

pub fn psi<T: Real>(x_row: &[T], basis: Basis) -> Vec<T> {
    match basis {
        Basis::Identity => std::iter::once(T::one())
            .chain(x_row.iter().copied())
            .collect(),
    }
}

/// Reads a site file with header `y,a,x1,...,xp`. The site id is taken from
/// the file stem.
pub fn load_site_csv<T: Real>(path: &Path, role: Role) -> Result<SiteData<T>> {
    let site_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("site")
        .to_string();
    let file = std::fs::File::open(path).map_err(|e| FaceError::io(path, e))?;
    read_site_csv(file, site_id, role)
}

pub fn read_site_csv<T: Real, R: std::io::Read>(
    reader: R,
    site_id: impl Into<String>,
    role: Role,
) -> Result<SiteData<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| FaceError::Parse {
            row: 0,
            column: "header".into(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    check_header(&header)?;
    let p = header.len() - 2;

    let mut y = Vec::new();
    let mut treated = Vec::new();
    let mut xs = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| FaceError::Parse {
            row,
            column: "*".into(),
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(FaceError::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut values = Vec::with_capacity(record.len());
        for (field, name) in record.iter().zip(&header) {
            if field.is_empty() {
                return Err(FaceError::Validation(format!(
                    "missing value at row {row}, column {name}"
                )));
            }
            let v: f64 = field.parse().map_err(|_| FaceError::Parse {
                row,
                column: name.clone(),
                message: format!("not a number: {field:?}"),
            })?;
            if v.is_nan() {
                return Err(FaceError::Validation(format!(
                    "NaN present at row {row}, column {name}"
                )));
            }
            values.push(v);
        }
        y.push(T::lit(values[0]));
        treated.push(match values[1] {
            1.0 => true,
            0.0 => false,
            v => {
                return Err(FaceError::Validation(format!(
                    "treatment must be 0 or 1, found {v} at row {row}"
                )))
            }
        });
        xs.extend(values[2..].iter().map(|&v| T::lit(v)));
    }
    let n = y.len();
    let x = Matrix::from_row_major(n, p, xs)?;
    SiteData::new(site_id, y, treated, x, role)
}

fn check_header(header: &[String]) -> Result<()> {
    let bad = || FaceError::Parse {
        row: 0,
        column: "header".into(),
        message: format!("expected columns y,a,x1..xp, found {}", header.join(",")),
    };
    if header.len() < 2 || header[0] != "y" || header[1] != "a" {
        return Err(bad());
    }
    for (j, name) in header[2..].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(bad());
        }
    }
    Ok(())
}

/// Writes a site in the same CSV layout [`read_site_csv`] accepts.
pub fn write_site_csv<T: Real, W: std::io::Write>(site: &SiteData<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y".to_string(), "a".to_string()];
    header.extend((1..=site.p()).map(|j| format!("x{j}")));
    let csv_err = |e: csv::Error| FaceError::Validation(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..site.n() {
        let mut rec = vec![
            site.y[i].to_f64_lossy().to_string(),
            u8::from(site.treated[i]).to_string(),
        ];
        rec.extend(site.x.row(i).iter().map(|v| v.to_f64_lossy().to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| FaceError::Validation(format!("csv flush failed: {e}")))?;
    Ok(())
}
