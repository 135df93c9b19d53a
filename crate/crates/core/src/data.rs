//! Datasets, CSV ingestion and the preprocessing steps used on real data:
//! response centering, pairwise interactions and collinearity pruning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Labeled sample: an `n x p` covariate block and the response.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    whitened: bool,
    column_names: Option<Vec<String>>,
}

/// Covariate-only sample used to estimate the covariate moments.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    x: DMatrix<f64>,
    whitened: bool,
}

/// How the response column is identified in a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    /// Zero-based column position.
    Index(usize),
}

impl std::str::FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    /// Bare integers are positions, anything else is a header name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

fn check_finite(x: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % x.nrows(), pos / x.nrows());
        return Err(Error::InvalidData(format!(
            "non-finite {what} entry at row {r}, column {c}"
        )));
    }
    Ok(())
}

impl LabeledDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if x.nrows() < 2 {
            return Err(Error::TooFewObservations {
                needed: 2,
                have: x.nrows(),
            });
        }
        if x.ncols() < 1 {
            return Err(Error::InvalidData("no covariate columns".into()));
        }
        check_finite(&x, "covariate")?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite response entry".into()));
        }
        Ok(LabeledDataset {
            x,
            y,
            whitened: false,
            column_names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: names.len(),
            });
        }
        self.column_names = Some(names);
        Ok(self)
    }

    /// Declare the covariates already standardized to mean 0 and identity
    /// covariance, e.g. simulated draws from a known law.
    pub fn assume_whitened(mut self) -> Self {
        self.whitened = true;
        self
    }

    pub(crate) fn from_parts_unchecked(
        x: DMatrix<f64>,
        y: DVector<f64>,
        whitened: bool,
        column_names: Option<Vec<String>>,
    ) -> Self {
        LabeledDataset {
            x,
            y,
            whitened,
            column_names,
        }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn whitened(&self) -> bool {
        self.whitened
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Rows in the given order (duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> LabeledDataset {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        LabeledDataset::from_parts_unchecked(x, y, self.whitened, self.column_names.clone())
    }

    /// The covariate block of the given rows, response dropped.
    pub fn unlabeled_rows(&self, rows: &[usize]) -> Result<UnlabeledDataset> {
        UnlabeledDataset::new(self.x.select_rows(rows))
    }

    /// Subtract the sample mean of the response.
    pub fn center_response(&self) -> LabeledDataset {
        let m = self.y.mean();
        let y = self.y.map(|v| v - m);
        LabeledDataset::from_parts_unchecked(
            self.x.clone(),
            y,
            self.whitened,
            self.column_names.clone(),
        )
    }

    pub(crate) fn replace_x(&self, x: DMatrix<f64>, whitened: bool) -> LabeledDataset {
        LabeledDataset::from_parts_unchecked(x, self.y.clone(), whitened, self.column_names.clone())
    }

    fn names_or_default(&self) -> Vec<String> {
        self.column_names
            .clone()
            .unwrap_or_else(|| (1..=self.p()).map(|j| format!("x{j}")).collect())
    }
}

impl UnlabeledDataset {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::TooFewObservations {
                needed: 2,
                have: x.nrows(),
            });
        }
        if x.ncols() < 1 {
            return Err(Error::InvalidData("no covariate columns".into()));
        }
        check_finite(&x, "covariate")?;
        Ok(UnlabeledDataset { x, whitened: false })
    }

    pub(crate) fn from_parts_unchecked(x: DMatrix<f64>, whitened: bool) -> Self {
        UnlabeledDataset { x, whitened }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn whitened(&self) -> bool {
        self.whitened
    }

    pub fn assume_whitened(mut self) -> Self {
        self.whitened = true;
        self
    }
}

/// Read a numeric CSV; the response column is split off and every other
/// column becomes a covariate, in file order.
pub fn load_csv(path: &Path, response: &ColumnRef, has_header: bool) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, response, has_header)
}

pub fn read_csv<R: Read>(reader: R, response: &ColumnRef, has_header: bool) -> Result<LabeledDataset> {
    let (names, rows) = parse_numeric_csv(reader, has_header)?;
    let width = rows.first().map_or(names.as_ref().map_or(0, Vec::len), Vec::len);
    let resp = match response {
        ColumnRef::Index(i) if *i < width => *i,
        ColumnRef::Index(i) => return Err(Error::MissingResponse(format!("#{i}"))),
        ColumnRef::Name(name) => names
            .as_ref()
            .and_then(|ns| ns.iter().position(|h| h == name))
            .ok_or_else(|| Error::MissingResponse(name.clone()))?,
    };
    let n = rows.len();
    let p = width - 1;
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let mut k = 0;
        for (j, &v) in row.iter().enumerate() {
            if j == resp {
                y[i] = v;
            } else {
                x[(i, k)] = v;
                k += 1;
            }
        }
    }
    let d = LabeledDataset::new(x, y)?;
    match names {
        Some(mut ns) => {
            ns.remove(resp);
            d.with_names(ns)
        }
        None => Ok(d),
    }
}

/// Read a numeric CSV with no response column.
pub fn load_unlabeled_csv(path: &Path, has_header: bool) -> Result<UnlabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (_, rows) = parse_numeric_csv(file, has_header)?;
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    UnlabeledDataset::new(x)
}

type ParsedCsv = (Option<Vec<String>>, Vec<Vec<f64>>);

/// Lines starting with `#` are skipped.
fn parse_numeric_csv<R: Read>(reader: R, has_header: bool) -> Result<ParsedCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names = if has_header {
        Some(rdr.headers()?.iter().map(str::to_string).collect::<Vec<_>>())
    } else {
        None
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(rec.len());
        for (j, cell) in rec.iter().enumerate() {
            let bad = || Error::BadCell {
                row: i + 1,
                column: j + 1,
                name: names
                    .as_ref()
                    .and_then(|ns| ns.get(j).cloned())
                    .unwrap_or_else(|| format!("#{j}")),
                value: cell.to_string(),
            };
            let v: f64 = cell.parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok((names, rows))
}

/// Write covariates followed by the response column `y`, with a header.
/// Values use the shortest representation that parses back exactly.
pub fn write_csv<W: Write>(d: &LabeledDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = d.names_or_default();
    header.push("y".to_string());
    wtr.write_record(&header)?;
    let mut buf = Vec::with_capacity(d.p() + 1);
    for i in 0..d.n() {
        buf.clear();
        buf.extend((0..d.p()).map(|j| format!("{}", d.x[(i, j)])));
        buf.push(format!("{}", d.y[i]));
        wtr.write_record(&buf)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(d: &LabeledDataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(d, BufWriter::new(f))
}

/// Append `x_j * x_k` for every pair `j < k` of `subset` (all columns when
/// `None`). Indices are zero-based.
pub fn add_pairwise_interactions(d: &LabeledDataset, subset: Option<&[usize]>) -> Result<LabeledDataset> {
    let p = d.p();
    let idx: Vec<usize> = match subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&j| j >= p) {
                return Err(Error::IndexOutOfRange { index: bad, len: p });
            }
            s.to_vec()
        }
        None => (0..p).collect(),
    };
    let pairs: Vec<(usize, usize)> = idx
        .iter()
        .enumerate()
        .flat_map(|(a, &j)| idx[a + 1..].iter().map(move |&k| (j, k)))
        .collect();
    let n = d.n();
    let mut x = DMatrix::zeros(n, p + pairs.len());
    x.columns_mut(0, p).copy_from(&d.x);
    for (c, &(j, k)) in pairs.iter().enumerate() {
        let prod = d.x.column(j).component_mul(&d.x.column(k));
        x.column_mut(p + c).copy_from(&prod);
    }
    let names = d.column_names.as_ref().map(|ns| {
        let mut out = ns.clone();
        out.extend(pairs.iter().map(|&(j, k)| format!("{}×{}", ns[j], ns[k])));
        out
    });
    Ok(LabeledDataset::from_parts_unchecked(x, d.y.clone(), false, names))
}

/// Greedy left-to-right pruning: a column is dropped when its residual after
/// projection onto the kept columns has norm `<= tol * ||column||`.
/// Returns the pruned dataset and the zero-based indices that were kept.
pub fn drop_collinear(d: &LabeledDataset, tol: f64) -> Result<(LabeledDataset, Vec<usize>)> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    let kept = independent_columns(&d.x, tol);
    let x = d.x.select_columns(&kept);
    let names = d
        .column_names
        .as_ref()
        .map(|ns| kept.iter().map(|&j| ns[j].clone()).collect());
    Ok((
        LabeledDataset::from_parts_unchecked(x, d.y.clone(), d.whitened, names),
        kept,
    ))
}

pub(crate) fn independent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let n = x.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let v = x.column(j).into_owned();
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = v.clone();
        // two Gram-Schmidt passes keep the residual orthogonal in floating point
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if rn > tol * norm && basis.len() < n {
            basis.push(r / rn);
            kept.push(j);
        }
    }
    kept
}

/// Rank covariates by the absolute t-statistic of an OLS fit with intercept
/// and return the top `k` (zero-based). Ties go to the smaller column index.
pub fn top_t_value_columns(d: &LabeledDataset, k: usize) -> Result<Vec<usize>> {
    let (n, p) = (d.n(), d.p());
    if n <= p + 1 {
        return Err(Error::TooFewObservations {
            needed: p + 2,
            have: n,
        });
    }
    let mut design = DMatrix::from_element(n, p + 1, 1.0);
    design.columns_mut(1, p).copy_from(&d.x);
    let xtx = design.transpose() * &design;
    let chol = nalgebra::Cholesky::new(xtx).ok_or(Error::RankDeficient { rank: 0, p })?;
    let inv = chol.inverse();
    let coef = &inv * (design.transpose() * &d.y);
    let resid = &d.y - &design * &coef;
    let s2 = resid.norm_squared() / (n - p - 1) as f64;
    let mut t: Vec<(usize, f64)> = (0..p)
        .map(|j| (j, (coef[j + 1] / (s2 * inv[(j + 1, j + 1)]).sqrt()).abs()))
        .collect();
    t.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(t.into_iter().take(k).map(|(j, _)| j).collect())
}

const CACHE_MAGIC: &[u8; 8] = b"ZESTDSET";
const CACHE_VERSION: u32 = 1;

/// Columnar little-endian cache: magic, version, n, p, whitened flag,
/// optional names, the response, then each covariate column.
pub fn write_cache<W: Write>(d: &LabeledDataset, mut w: W) -> Result<()> {
    let io = |e| Error::io("<cache>", e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(d.n() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(d.p() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&[d.whitened as u8]).map_err(io)?;
    match &d.column_names {
        Some(ns) => {
            w.write_all(&[1]).map_err(io)?;
            for name in ns {
                w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(name.as_bytes()).map_err(io)?;
            }
        }
        None => w.write_all(&[0]).map_err(io)?,
    }
    for v in d.y.iter().chain(d.x.iter()) {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_cache<R: Read>(r: R) -> Result<LabeledDataset> {
    let mut r = BufReader::new(r);
    let bad = |m: &str| Error::BadCache(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CACHE_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(b4);
    if version != CACHE_VERSION {
        return Err(Error::BadCache(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
    let p = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b1).map_err(|_| bad("truncated header"))?;
    let whitened = b1[0] != 0;
    r.read_exact(&mut b1).map_err(|_| bad("truncated header"))?;
    let names = if b1[0] == 1 {
        let mut ns = Vec::with_capacity(p);
        for _ in 0..p {
            r.read_exact(&mut b4).map_err(|_| bad("truncated names"))?;
            let mut s = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut s).map_err(|_| bad("truncated names"))?;
            ns.push(String::from_utf8(s).map_err(|_| bad("name is not utf-8"))?);
        }
        Some(ns)
    } else {
        None
    };
    let mut read_f64 = || -> Result<f64> {
        r.read_exact(&mut b8).map_err(|_| bad("truncated data"))?;
        Ok(f64::from_le_bytes(b8))
    };
    let y = DVector::from_iterator(n, (0..n).map(|_| read_f64()).collect::<Result<Vec<_>>>()?);
    let data = (0..n * p).map(|_| read_f64()).collect::<Result<Vec<_>>>()?;
    let x = DMatrix::from_vec(n, p, data);
    let mut d = LabeledDataset::new(x, y)?;
    if let Some(ns) = names {
        d = d.with_names(ns)?;
    }
    d.whitened = whitened;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LabeledDataset {
        read_csv("a,b,y\n1,2,5\n0,1,3\n2,0,1".as_bytes(), &ColumnRef::Name("y".into()), true).unwrap()
    }

    #[test]
    fn loads_three_row_csv() {
        let d = toy();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.y().as_slice(), &[5.0, 3.0, 1.0]);
        assert_eq!(d.x()[(0, 1)], 2.0);
        assert_eq!(d.column_names().unwrap(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn response_by_index_and_without_header() {
        let d = read_csv("5,1,2\n3,0,1\n".as_bytes(), &ColumnRef::Index(0), false).unwrap();
        assert_eq!(d.y().as_slice(), &[5.0, 3.0]);
        assert_eq!(d.x()[(1, 1)], 1.0);
        assert!(d.column_names().is_none());
    }

    #[test]
    fn missing_response_column() {
        let err = read_csv("a,b,y\n1,2,5\n0,1,3\n".as_bytes(), &ColumnRef::Name("z".into()), true)
            .unwrap_err();
        assert!(matches!(err, Error::MissingResponse(ref s) if s == "z"));
    }

    #[test]
    fn nan_cell_is_rejected_with_location() {
        let err = read_csv("a,b,y\n1,NaN,5\n0,1,3\n".as_bytes(), &ColumnRef::Name("y".into()), true)
            .unwrap_err();
        match err {
            Error::BadCell { row, column, name, .. } => {
                assert_eq!((row, column, name.as_str()), (1, 2, "b"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = read_csv("a,y\nfoo,1\n0,1\n".as_bytes(), &ColumnRef::Name("y".into()), true)
            .unwrap_err();
        assert!(matches!(err, Error::BadCell { .. }));
    }

    #[test]
    fn missing_file() {
        let err = load_csv(Path::new("/nonexistent/zest.csv"), &ColumnRef::Index(0), true).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn interactions_counts() {
        let x = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let d = LabeledDataset::new(x, DVector::zeros(4)).unwrap();
        assert_eq!(add_pairwise_interactions(&d, None).unwrap().p(), 6);
        let same = add_pairwise_interactions(&d, Some(&[0])).unwrap();
        assert_eq!(same.x(), d.x());
        assert!(matches!(
            add_pairwise_interactions(&d, Some(&[0, 3])),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));

        let wide = LabeledDataset::new(DMatrix::from_element(3, 21, 1.0), DVector::zeros(3)).unwrap();
        assert_eq!(add_pairwise_interactions(&wide, None).unwrap().p(), 231);
    }

    #[test]
    fn interaction_values_and_names() {
        let d = toy();
        let e = add_pairwise_interactions(&d, None).unwrap();
        assert_eq!(e.x().column(2).as_slice(), &[2.0, 0.0, 0.0]);
        assert_eq!(e.column_names().unwrap()[2], "a×b");
    }

    #[test]
    fn collinear_duplicate_direction() {
        let v = [1.0, 2.0, 0.0, 1.0];
        let u = [2.0, -1.0, 3.0, 0.0];
        let x = DMatrix::from_fn(4, 3, |i, j| match j {
            0 => v[i],
            1 => 2.0 * v[i],
            _ => u[i],
        });
        let d = LabeledDataset::new(x, DVector::zeros(4)).unwrap();
        let (pruned, kept) = drop_collinear(&d, 1e-8).unwrap();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(pruned.p(), 2);
    }

    #[test]
    fn collinear_keeps_orthonormal() {
        let d = LabeledDataset::new(DMatrix::identity(5, 5), DVector::zeros(5)).unwrap();
        assert_eq!(drop_collinear(&d, 1e-8).unwrap().1, vec![0, 1, 2, 3, 4]);
        assert!(drop_collinear(&d, 0.0).is_err());
    }

    #[test]
    fn center_response_has_zero_mean() {
        let d = toy().center_response();
        assert!(d.y().sum().abs() < 1e-14);
    }

    #[test]
    fn cache_round_trip() {
        let d = toy();
        let mut buf = Vec::new();
        write_cache(&d, &mut buf).unwrap();
        assert_eq!(read_cache(buf.as_slice()).unwrap(), d);
        buf[0] = b'X';
        assert!(read_cache(buf.as_slice()).is_err());
    }

    #[test]
    fn t_value_ranking() {
        // y depends strongly on column 2, weakly on column 0
        let n = 40;
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 3) * 7919) % 97) as f64 / 97.0);
        let noise = DVector::from_fn(n, |i, _| ((i * 31) % 11) as f64 / 110.0);
        let y = x.column(2) * 5.0 + x.column(0) * 0.5 + noise;
        let d = LabeledDataset::new(x, y).unwrap();
        let top = top_t_value_columns(&d, 2).unwrap();
        assert_eq!(top[0], 2);
    }
}
