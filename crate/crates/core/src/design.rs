//! Tabular data, the model formula language, and fixed-effects design matrices.
//!
//! Formula grammar:
//!
//! ```text
//! response ~ term (+ term)* + (1|group) [+ offset(log(column))]
//! term     := 1 | name | name^2 | name:name | name*name
//! ```
//!
//! `a*b` expands to `a + b + a:b`. Duplicate terms keep their first occurrence.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::varfun::Family;

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Level labels sorted lexicographically; `codes[i]` indexes into `levels`.
    Categorical { levels: Vec<String>, codes: Vec<usize> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a categorical column from raw labels.
    pub fn categorical<S: AsRef<str>>(labels: &[S]) -> Self {
        let levels: Vec<String> = labels
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let codes = labels.iter().map(|s| index[s.as_ref()]).collect();
        Column::Categorical { levels, codes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl Dataset {
    pub fn new(columns: Vec<(String, Column)>) -> Result<Self> {
        let n_rows = columns.first().map(|(_, c)| c.len()).unwrap_or(0);
        if n_rows == 0 {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        let mut seen = HashSet::new();
        for (name, col) in &columns {
            if col.len() != n_rows {
                return Err(Error::LengthMismatch {
                    expected: n_rows,
                    found: col.len(),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate column `{name}`")));
            }
        }
        let (names, columns) = columns.into_iter().unzip();
        Ok(Self { names, columns, n_rows })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical { .. } => Err(Error::InvalidModel(format!("column `{name}` is not numeric"))),
        }
    }

    /// Adds or replaces a column.
    pub fn with_column(mut self, name: &str, column: Column) -> Result<Self> {
        if column.len() != self.n_rows {
            return Err(Error::LengthMismatch {
                expected: self.n_rows,
                found: column.len(),
            });
        }
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.columns[i] = column,
            None => {
                self.names.push(name.to_string());
                self.columns.push(column);
            }
        }
        Ok(self)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names)?;
        for row in 0..self.n_rows {
            let record: Vec<String> = self
                .columns
                .iter()
                .map(|c| match c {
                    Column::Numeric(v) => format!("{}", v[row]),
                    Column::Categorical { levels, codes } => levels[codes[row]].clone(),
                })
                .collect();
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "NaN" | "nan" | "null" | "NULL" | ".")
}

/// Reads a CSV with a header row. Columns whose every cell parses as a number
/// become numeric unless `categorical` names them.
pub fn load_csv(path: impl AsRef<Path>, categorical: &[String]) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, categorical)
}

pub fn read_csv<R: std::io::Read>(reader: R, categorical: &[String]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for hint in categorical {
        if !header.contains(hint) {
            return Err(Error::UnknownColumn(hint.clone()));
        }
    }
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row: row + 1,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if is_missing(field) {
                return Err(Error::MissingValue {
                    row: row + 1,
                    column: header[j].clone(),
                });
            }
            raw[j].push(field.trim().to_string());
        }
    }
    let columns = header
        .into_iter()
        .zip(raw)
        .map(|(name, cells)| {
            let numeric: Option<Vec<f64>> = if categorical.contains(&name) {
                None
            } else {
                cells.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect()
            };
            let col = match numeric {
                Some(v) => Column::Numeric(v),
                None => Column::categorical(&cells),
            };
            (name, col)
        })
        .collect();
    Dataset::new(columns)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Main(String),
    Square(String),
    Interaction(String, String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Main(a) => write!(f, "{a}"),
            Term::Square(a) => write!(f, "{a}^2"),
            Term::Interaction(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub response: String,
    pub fixed_terms: Vec<Term>,
    pub group: String,
    /// Column whose logarithm enters the linear predictor with coefficient one.
    pub offset_log: Option<String>,
    pub family: Family,
}

impl ModelSpec {
    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    /// Every column the model reads.
    pub fn columns(&self) -> Vec<&str> {
        let mut cols = vec![self.response.as_str(), self.group.as_str()];
        for t in &self.fixed_terms {
            match t {
                Term::Main(a) | Term::Square(a) => cols.push(a),
                Term::Interaction(a, b) => {
                    cols.push(a);
                    cols.push(b);
                }
            }
        }
        if let Some(o) = &self.offset_log {
            cols.push(o);
        }
        cols
    }

    pub fn bind(&self, data: &Dataset) -> Result<()> {
        for c in self.columns() {
            data.column(c)?;
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.response)?;
        if self.fixed_terms.is_empty() {
            write!(f, "1")?;
        }
        for (i, t) in self.fixed_terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, " + (1|{})", self.group)?;
        if let Some(o) = &self.offset_log {
            write!(f, " + offset(log({o}))")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Tilde,
    Plus,
    Star,
    Colon,
    Caret,
    Pipe,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '~' => Tok::Tilde,
            '+' => Tok::Plus,
            '*' => Tok::Star,
            ':' => Tok::Colon,
            '^' => Tok::Caret,
            '|' => Tok::Pipe,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().map(|(_, c)| c).collect();
                out.push((pos, Tok::Number(s)));
                continue;
            }
            c if c.is_alphabetic() || c == '_' || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_alphanumeric() || chars[i].1 == '_' || chars[i].1 == '.') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().map(|(_, c)| c).collect();
                out.push((pos, Tok::Ident(s)));
                continue;
            }
            other => {
                return Err(Error::Syntax {
                    position: pos,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push((pos, tok));
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            position: self.pos(),
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.at += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.at += 1;
                Ok(s)
            }
            _ => self.err("expected a column name"),
        }
    }

    fn number(&mut self, value: &str) -> Result<()> {
        match self.peek() {
            Some(Tok::Number(s)) if s == value => {
                self.at += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{value}`")),
        }
    }
}

enum Piece {
    Terms(Vec<Term>),
    Group(String),
    Offset(String),
    Intercept,
}

fn parse_piece(p: &mut Parser) -> Result<Piece> {
    match p.peek() {
        Some(Tok::Number(n)) if n == "1" => {
            p.at += 1;
            Ok(Piece::Intercept)
        }
        Some(Tok::LParen) => {
            p.at += 1;
            p.number("1")?;
            p.expect(Tok::Pipe, "`|`")?;
            let g = p.ident()?;
            p.expect(Tok::RParen, "`)`")?;
            Ok(Piece::Group(g))
        }
        Some(Tok::Ident(name)) if name == "offset" && p.toks.get(p.at + 1).map(|t| &t.1) == Some(&Tok::LParen) => {
            p.at += 2;
            let f = p.ident()?;
            if f != "log" {
                return p.err("only offset(log(column)) is supported");
            }
            p.expect(Tok::LParen, "`(`")?;
            let col = p.ident()?;
            p.expect(Tok::RParen, "`)`")?;
            p.expect(Tok::RParen, "`)`")?;
            Ok(Piece::Offset(col))
        }
        Some(Tok::Ident(_)) => {
            let a = p.ident()?;
            match p.peek() {
                Some(Tok::Caret) => {
                    p.at += 1;
                    p.number("2")?;
                    Ok(Piece::Terms(vec![Term::Square(a)]))
                }
                Some(Tok::Colon) => {
                    p.at += 1;
                    let b = p.ident()?;
                    Ok(Piece::Terms(vec![Term::Interaction(a, b)]))
                }
                Some(Tok::Star) => {
                    p.at += 1;
                    let b = p.ident()?;
                    Ok(Piece::Terms(vec![
                        Term::Main(a.clone()),
                        Term::Main(b.clone()),
                        Term::Interaction(a, b),
                    ]))
                }
                _ => Ok(Piece::Terms(vec![Term::Main(a)])),
            }
        }
        _ => p.err("expected a term"),
    }
}

/// Parses a formula into a [`ModelSpec`] with the gaussian family.
pub fn parse_formula(text: &str) -> Result<ModelSpec> {
    let mut p = Parser {
        toks: tokenize(text)?,
        at: 0,
        end: text.len(),
    };
    let response = p.ident()?;
    p.expect(Tok::Tilde, "`~`")?;
    let mut terms: Vec<Term> = Vec::new();
    let mut group: Option<String> = None;
    let mut offset = None;
    loop {
        let start = p.pos();
        match parse_piece(&mut p)? {
            Piece::Terms(ts) => {
                for t in ts {
                    if !terms.contains(&t) {
                        terms.push(t);
                    }
                }
            }
            Piece::Intercept => {}
            Piece::Group(g) => {
                if group.is_some() {
                    return Err(Error::Syntax {
                        position: start,
                        message: "only one (1|group) term is allowed".into(),
                    });
                }
                group = Some(g);
            }
            Piece::Offset(o) => {
                if offset.is_some() {
                    return Err(Error::Syntax {
                        position: start,
                        message: "only one offset is allowed".into(),
                    });
                }
                offset = Some(o);
            }
        }
        match p.peek() {
            None => break,
            Some(Tok::Plus) => p.at += 1,
            Some(_) => return p.err("expected `+` or end of formula"),
        }
    }
    let group = group.ok_or(Error::Syntax {
        position: text.len(),
        message: "a random intercept term (1|group) is required".into(),
    })?;
    Ok(ModelSpec {
        response,
        fixed_terms: terms,
        group,
        offset_log: offset,
        family: Family::gaussian(),
    })
}

/// Response, fixed-effects matrix, group membership and offset for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignData {
    pub y: Vec<f64>,
    /// n × p, intercept first.
    pub x: DMatrix<f64>,
    pub column_names: Vec<String>,
    /// Design column ranges belonging to each fixed term, after the intercept.
    pub term_columns: Vec<(Term, std::ops::Range<usize>)>,
    pub group_index: Vec<usize>,
    pub group_labels: Vec<String>,
    pub group_sizes: Vec<usize>,
    pub offset: Vec<f64>,
}

impl DesignData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.group_sizes.len()
    }

    /// Row indices of each group, in row order.
    pub fn group_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.m()];
        for (i, &g) in self.group_index.iter().enumerate() {
            rows[g].push(i);
        }
        rows
    }

    /// Linear predictor `Xβ + offset`.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let b = nalgebra::DVector::from_column_slice(beta);
        let xb = &self.x * b;
        xb.iter().zip(&self.offset).map(|(a, o)| a + o).collect()
    }

    /// Keeps only the intercept column.
    pub fn intercept_only(&self) -> DesignData {
        DesignData {
            x: self.x.columns(0, 1).into_owned(),
            column_names: vec![self.column_names[0].clone()],
            term_columns: Vec::new(),
            ..self.clone()
        }
    }

    /// Appends treatment-coded group indicators as fixed effects.
    pub fn with_group_as_fixed(&self, group_name: &str) -> Result<DesignData> {
        let n = self.n();
        let m = self.m();
        let p = self.p();
        let mut x = DMatrix::zeros(n, p + m - 1);
        x.columns_mut(0, p).copy_from(&self.x);
        let mut names = self.column_names.clone();
        for level in 1..m {
            names.push(format!("{group_name}{}", self.group_labels[level]));
        }
        for (i, &g) in self.group_index.iter().enumerate() {
            if g > 0 {
                x[(i, p + g - 1)] = 1.0;
            }
        }
        let mut term_columns = self.term_columns.clone();
        term_columns.push((Term::Main(group_name.to_string()), p..p + m - 1));
        check_rank(&x, &names)?;
        Ok(DesignData {
            x,
            column_names: names,
            term_columns,
            ..self.clone()
        })
    }
}

struct Coded {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

fn code_main(data: &Dataset, name: &str) -> Result<Coded> {
    match data.column(name)? {
        Column::Numeric(v) => Ok(Coded {
            names: vec![name.to_string()],
            cols: vec![v.clone()],
        }),
        Column::Categorical { levels, codes } => {
            let mut names = Vec::new();
            let mut cols = Vec::new();
            for (k, level) in levels.iter().enumerate().skip(1) {
                names.push(format!("{name}{level}"));
                cols.push(codes.iter().map(|&c| if c == k { 1.0 } else { 0.0 }).collect());
            }
            Ok(Coded { names, cols })
        }
    }
}

fn code_term(data: &Dataset, term: &Term) -> Result<Coded> {
    match term {
        Term::Main(a) => code_main(data, a),
        Term::Square(a) => {
            let v = data.numeric(a)?;
            Ok(Coded {
                names: vec![format!("{a}^2")],
                cols: vec![v.iter().map(|x| x * x).collect()],
            })
        }
        Term::Interaction(a, b) => {
            let ca = code_main(data, a)?;
            let cb = code_main(data, b)?;
            let mut names = Vec::new();
            let mut cols = Vec::new();
            for (na, va) in ca.names.iter().zip(&ca.cols) {
                for (nb, vb) in cb.names.iter().zip(&cb.cols) {
                    names.push(format!("{na}:{nb}"));
                    cols.push(va.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
            }
            Ok(Coded { names, cols })
        }
    }
}

fn group_codes(data: &Dataset, name: &str) -> Result<(Vec<usize>, Vec<String>)> {
    match data.column(name)? {
        Column::Categorical { levels, codes } => Ok((codes.clone(), levels.clone())),
        Column::Numeric(v) => {
            let labels: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            match Column::categorical(&labels) {
                Column::Categorical { levels, codes } => Ok((codes, levels)),
                Column::Numeric(_) => unreachable!(),
            }
        }
    }
}

const RANK_TOL: f64 = 1e-9;

/// Rank check by column-pivoted QR; on deficiency, names the first column that
/// adds nothing to the span of the columns before it.
fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let p = x.ncols();
    if x.nrows() < p {
        return Err(Error::RankDeficient {
            term: names[x.nrows()].clone(),
        });
    }
    let r = x.clone().col_piv_qr().r();
    let diag_max = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let rank = (0..p).filter(|&j| r[(j, j)].abs() > RANK_TOL * diag_max).count();
    if rank == p {
        return Ok(());
    }
    // Incremental Gram–Schmidt with reorthogonalisation to find the culprit.
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    for j in 0..p {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let nv = v.norm();
        if norm0 == 0.0 || nv <= 1e-8 * norm0 {
            return Err(Error::RankDeficient { term: names[j].clone() });
        }
        basis.push(v / nv);
    }
    Err(Error::RankDeficient {
        term: names[p - 1].clone(),
    })
}

/// Builds the design for `spec` over `data`: intercept first, categorical
/// terms treatment-coded against their first level, no centring or scaling.
pub fn build_design(data: &Dataset, spec: &ModelSpec) -> Result<DesignData> {
    spec.bind(data)?;
    let n = data.n_rows();
    let y = data.numeric(&spec.response)?.to_vec();
    let (group_index, group_labels) = group_codes(data, &spec.group)?;
    let mut group_sizes = vec![0usize; group_labels.len()];
    for &g in &group_index {
        group_sizes[g] += 1;
    }
    if let Some(k) = group_sizes.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(group_labels[k].clone()));
    }

    let mut names = vec!["(Intercept)".to_string()];
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut term_columns = Vec::new();
    for term in &spec.fixed_terms {
        let coded = code_term(data, term)?;
        let start = cols.len();
        names.extend(coded.names);
        cols.extend(coded.cols);
        term_columns.push((term.clone(), start..cols.len()));
    }
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    check_rank(&x, &names)?;

    let offset = match &spec.offset_log {
        Some(col) => {
            let v = data.numeric(col)?;
            v.iter()
                .enumerate()
                .map(|(i, &o)| {
                    if o > 0.0 {
                        Ok(o.ln())
                    } else {
                        Err(Error::InvalidModel(format!(
                            "offset column `{col}` must be positive (row {})",
                            i + 1
                        )))
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![0.0; n],
    };
    Ok(DesignData {
        y,
        x,
        column_names: names,
        term_columns,
        group_index,
        group_labels,
        group_sizes,
        offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv(text: &str, hints: &[&str]) -> Result<Dataset> {
        let hints: Vec<String> = hints.iter().map(|s| s.to_string()).collect();
        read_csv(text.as_bytes(), &hints)
    }

    #[test]
    fn parses_simple_formula() {
        let s = parse_formula("y ~ x1 + (1|g)").unwrap();
        assert_eq!(s.response, "y");
        assert_eq!(s.fixed_terms, vec![Term::Main("x1".into())]);
        assert_eq!(s.group, "g");
        assert_eq!(s.offset_log, None);
    }

    #[test]
    fn expands_star_and_offset() {
        let s = parse_formula("calls ~ sex*food + time + (1|nest) + offset(log(siblings))").unwrap();
        assert_eq!(
            s.fixed_terms,
            vec![
                Term::Main("sex".into()),
                Term::Main("food".into()),
                Term::Interaction("sex".into(), "food".into()),
                Term::Main("time".into()),
            ]
        );
        assert_eq!(s.offset_log.as_deref(), Some("siblings"));
    }

    #[test]
    fn squares_and_duplicates() {
        let s = parse_formula("y ~ l + l^2 + (1|farm)").unwrap();
        assert_eq!(s.fixed_terms, vec![Term::Main("l".into()), Term::Square("l".into())]);
        let s = parse_formula("y ~ s*l + s + l:s + (1|farm)").unwrap();
        assert_eq!(s.fixed_terms.len(), 4);
        let s = parse_formula("y ~ 1 + (1|g)").unwrap();
        assert!(s.fixed_terms.is_empty());
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_formula("y ~ x1 + + (1|g)") {
            Err(Error::Syntax { position, .. }) => assert_eq!(position, 9),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_formula("y ~ x + (1|g) + (1|h)"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_formula("y ~ x"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_formula("y ~ x^3 + (1|g)"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_formula("y ~ x $ (1|g)"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn loads_csv_columns() {
        let d = csv("y,g\n1,a\n2,b\n", &[]).unwrap();
        assert_eq!(d.n_rows(), 2);
        assert_eq!(d.column("y").unwrap(), &Column::Numeric(vec![1.0, 2.0]));
        match d.column("g").unwrap() {
            Column::Categorical { levels, .. } => assert_eq!(levels, &vec!["a".to_string(), "b".to_string()]),
            c => panic!("{c:?}"),
        }
    }

    #[test]
    fn rejects_missing_and_ragged() {
        assert!(matches!(
            csv("y,g\n1,a\nNA,b\n", &[]),
            Err(Error::MissingValue { row: 2, .. })
        ));
        assert!(csv("y,g\n1,a\n2\n", &[]).is_err());
        assert!(matches!(csv("y,g\n1,a\n", &["h"]), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn categorical_hint_on_numeric_codes() {
        let mut text = String::from("y,farm\n");
        for i in 1..=24 {
            text.push_str(&format!("{},{}\n", i as f64 * 0.5, i));
            text.push_str(&format!("{},{}\n", i as f64 * 0.25, i));
        }
        let d = csv(&text, &["farm"]).unwrap();
        match d.column("farm").unwrap() {
            Column::Categorical { levels, .. } => assert_eq!(levels.len(), 24),
            c => panic!("{c:?}"),
        }
    }

    fn toy() -> Dataset {
        Dataset::new(vec![
            ("y".into(), Column::Numeric(vec![1.0, 2.0, 3.0, 5.0, 4.0, 7.0])),
            ("x1".into(), Column::Numeric(vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0])),
            ("s".into(), Column::categorical(&["f", "m", "m", "f", "f", "m"])),
            ("g".into(), Column::categorical(&["a", "a", "b", "b", "c", "c"])),
        ])
        .unwrap()
    }

    #[test]
    fn design_columns() {
        let d = build_design(&toy(), &parse_formula("y ~ x1 + (1|g)").unwrap()).unwrap();
        assert_eq!(d.column_names, vec!["(Intercept)", "x1"]);
        assert_eq!(d.x.column(1).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        assert_eq!(d.group_sizes, vec![2, 2, 2]);
        assert_eq!(d.m(), 3);

        let d = build_design(&toy(), &parse_formula("y ~ s + (1|g)").unwrap()).unwrap();
        assert_eq!(d.column_names, vec!["(Intercept)", "sm"]);
        assert_eq!(d.x.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);

        let d = build_design(&toy(), &parse_formula("y ~ s*x1 + x1^2 + (1|g)").unwrap());
        // x1^2 is all ones, collinear with the intercept.
        assert!(matches!(d, Err(Error::RankDeficient { term }) if term == "x1^2"));
    }

    #[test]
    fn response_as_predictor_is_rank_deficient() {
        let data = toy().with_column("y2", Column::Numeric(vec![1.0, 2.0, 3.0, 5.0, 4.0, 7.0])).unwrap();
        let err = build_design(&data, &parse_formula("y ~ y + y2 + (1|g)").unwrap()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { term } if term == "y2"));
    }

    #[test]
    fn offset_is_log_of_column() {
        let data = toy().with_column("w", Column::Numeric(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let d = build_design(&data, &parse_formula("y ~ x1 + (1|g) + offset(log(w))").unwrap()).unwrap();
        assert!((d.offset[1] - 2f64.ln()).abs() < 1e-15);
        let bad = data.with_column("w", Column::Numeric(vec![1.0, 0.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        assert!(build_design(&bad, &parse_formula("y ~ x1 + (1|g) + offset(log(w))").unwrap()).is_err());
    }

    #[test]
    fn unknown_column_at_bind_time() {
        let err = build_design(&toy(), &parse_formula("y ~ zz + (1|g)").unwrap()).unwrap_err();
        assert!(matches!(err, Error::UnknownColumn(c) if c == "zz"));
    }

    #[test]
    fn empty_declared_level_is_rejected() {
        let data = toy()
            .with_column(
                "h",
                Column::Categorical {
                    levels: vec!["p".into(), "q".into(), "r".into()],
                    codes: vec![0, 0, 0, 2, 2, 2],
                },
            )
            .unwrap();
        let err = build_design(&data, &parse_formula("y ~ x1 + (1|h)").unwrap()).unwrap_err();
        assert!(matches!(err, Error::EmptyGroup(l) if l == "q"));
    }

    #[test]
    fn design_is_deterministic() {
        let spec = parse_formula("y ~ s*x1 + (1|g)").unwrap();
        let a = build_design(&toy(), &spec).unwrap();
        let b = build_design(&toy(), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn treatment_columns_sum_to_non_reference_indicator() {
        let data = Dataset::new(vec![
            ("y".into(), Column::Numeric((0..9).map(|i| i as f64).collect())),
            ("f".into(), Column::categorical(&["c", "a", "b", "c", "a", "b", "a", "b", "c"])),
            ("g".into(), Column::categorical(&["1", "1", "1", "2", "2", "2", "3", "3", "3"])),
        ])
        .unwrap();
        let d = build_design(&data, &parse_formula("y ~ f + (1|g)").unwrap()).unwrap();
        assert_eq!(d.p(), 3);
        for i in 0..9 {
            let s = d.x[(i, 1)] + d.x[(i, 2)];
            let not_ref = if ["c", "a", "b", "c", "a", "b", "a", "b", "c"][i] == "a" { 0.0 } else { 1.0 };
            assert_eq!(s, not_ref);
        }
    }

    fn term_strategy() -> impl Strategy<Value = String> {
        let name = prop::sample::select(vec!["a", "b", "c1", "x_2", "len"]);
        (name.clone(), name, 0..4u8).prop_map(|(a, b, kind)| match kind {
            0 => a.to_string(),
            1 => format!("{a}^2"),
            2 => format!("{a}:{b}"),
            _ => format!("{a}*{b}"),
        })
    }

    proptest! {
        #[test]
        fn display_round_trips(terms in prop::collection::vec(term_strategy(), 0..5), offset in any::<bool>()) {
            let mut text = String::from("resp ~ ");
            for t in &terms {
                text.push_str(t);
                text.push_str(" + ");
            }
            text.push_str("(1|grp)");
            if offset {
                text.push_str(" + offset(log(w))");
            }
            let spec = parse_formula(&text).unwrap();
            let again = parse_formula(&spec.to_string()).unwrap();
            prop_assert_eq!(spec, again);
        }
    }
}
