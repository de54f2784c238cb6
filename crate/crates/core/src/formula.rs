//! lme4-style model formulas.
//!
//! The accepted language is deliberately small:
//!
//! ```text
//! formula  := response '~' item ('+' item)*
//! response := 'y' | 'log' '(' 'omega' ')'
//! item     := '1' | term | '(' reexpr '|' group ')'
//! term     := ident | 'sin' '(' ident ')'
//! reexpr   := reitem ('+' reitem)*        reitem := '1' | ident
//! group    := ident | 'gr' '(' ident ',' 'dist' '=' string ')'
//! ```
//!
//! Whitespace is ignored. Strings may open with `'`, `"` or a backquote and
//! close with `'` or `"`. Interactions, intercept suppression and multiple
//! grouping terms are rejected.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::LongitudinalDataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("empty formula")]
    Empty,
    #[error("syntax error at byte {offset}: expected one of [{}], found {found}", expected.join(", "))]
    Syntax {
        offset: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("unsupported syntax at byte {offset}: {what}")]
    Unsupported { offset: usize, what: String },
    #[error("unknown distribution '{name}' at byte {offset} (expected gaussian or student)")]
    UnknownDistribution { offset: usize, name: String },
    #[error("unknown transform '{name}' at byte {offset} (only sin is supported)")]
    UnknownTransform { offset: usize, name: String },
    #[error("duplicate term '{name}' at byte {offset}")]
    Duplicate { offset: usize, name: String },
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("group '{0}' does not name the subject id column")]
    UnknownGroup(String),
    #[error("sin applied to constant column '{0}'")]
    ConstantTransform(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    /// Location formula, `y ~ ...`.
    Y,
    /// Scale formula, `log(omega) ~ ...`.
    LogOmega,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Sin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub covariate: String,
    pub transform: Transform,
}

impl Term {
    /// Design column label, e.g. `age` or `sin(age)`.
    pub fn label(&self) -> String {
        match self.transform {
            Transform::Identity => self.covariate.clone(),
            Transform::Sin => format!("sin({})", self.covariate),
        }
    }
}

/// Random-effect distribution family. Student degrees of freedom are a
/// fit-time setting, not part of the formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReFamily {
    Gaussian,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomTerm {
    pub intercept: bool,
    pub slope_covariates: Vec<String>,
    pub group: String,
    pub re_family: ReFamily,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaAst {
    pub response: Response,
    pub fixed_terms: Vec<Term>,
    pub random_terms: Vec<RandomTerm>,
}

impl FormulaAst {
    pub fn is_scale(&self) -> bool {
        self.response == Response::LogOmega
    }

    /// Columns of X: intercept plus one per fixed term.
    pub fn n_fixed(&self) -> usize {
        1 + self.fixed_terms.len()
    }

    /// Columns of Z: intercept plus slopes, or zero without a random term.
    pub fn n_random(&self) -> usize {
        self.random_terms
            .iter()
            .map(|r| usize::from(r.intercept) + r.slope_covariates.len())
            .sum()
    }

    pub fn re_family(&self) -> Option<ReFamily> {
        self.random_terms.first().map(|r| r.re_family)
    }
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.response {
            Response::Y => write!(f, "y ~ ")?,
            Response::LogOmega => write!(f, "log(omega) ~ ")?,
        }
        let mut items: Vec<String> = self.fixed_terms.iter().map(Term::label).collect();
        for r in &self.random_terms {
            let mut parts = Vec::new();
            if r.intercept {
                parts.push("1".to_string());
            }
            parts.extend(r.slope_covariates.iter().cloned());
            let group = match r.re_family {
                ReFamily::Gaussian => r.group.clone(),
                ReFamily::Student => format!("gr({}, dist='student')", r.group),
            };
            items.push(format!("({}|{})", parts.join(" + "), group));
        }
        if items.is_empty() {
            items.push("1".to_string());
        }
        write!(f, "{}", items.join(" + "))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Str(String),
    Sym(char),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier '{s}'"),
            Tok::Num(s) => write!(f, "number '{s}'"),
            Tok::Str(s) => write!(f, "string '{s}'"),
            Tok::Sym(c) => write!(f, "'{c}'"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, FormulaError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' || c == '.' {
            let start = i;
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_alphanumeric() || matches!(bytes[i], b'_' | b'.'))
            {
                i += 1;
            }
            toks.push((start, Tok::Ident(text[start..i].to_string())));
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            toks.push((start, Tok::Num(text[start..i].to_string())));
        } else if matches!(c, '\'' | '"' | '`') {
            let start = i;
            i += 1;
            let body = i;
            while i < bytes.len() && !matches!(bytes[i], b'\'' | b'"') {
                i += 1;
            }
            if i >= bytes.len() {
                return Err(FormulaError::Syntax {
                    offset: start,
                    expected: vec!["closing quote".into()],
                    found: "end of input".into(),
                });
            }
            toks.push((start, Tok::Str(text[body..i].to_string())));
            i += 1;
        } else if "~+-*:/^()|,=".contains(c) {
            toks.push((i, Tok::Sym(c)));
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            return Err(FormulaError::Syntax {
                offset: i,
                expected: vec!["identifier".into(), "'+'".into(), "'('".into()],
                found: format!("'{ch}'"),
            });
        }
    }
    toks.push((text.len(), Tok::Eof));
    Ok(toks)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> FormulaError {
        let offset = self.offset();
        match self.peek() {
            Tok::Sym(c @ ('*' | ':' | '/' | '^')) => FormulaError::Unsupported {
                offset,
                what: format!("operator '{c}' (interaction terms are not supported)"),
            },
            Tok::Sym('-') => FormulaError::Unsupported {
                offset,
                what: "intercept suppression is not supported".into(),
            },
            t => FormulaError::Syntax {
                offset,
                expected: expected.iter().map(|s| s.to_string()).collect(),
                found: t.to_string(),
            },
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<(), FormulaError> {
        if *self.peek() == Tok::Sym(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.error(&[&format!("'{c}'")]))
        }
    }

    fn expect_ident(&mut self) -> Result<(usize, String), FormulaError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let off = self.offset();
                self.bump();
                Ok((off, s))
            }
            _ => Err(self.error(&["identifier"])),
        }
    }

    fn intercept_literal(&mut self) -> Result<bool, FormulaError> {
        if let Tok::Num(n) = self.peek().clone() {
            let offset = self.offset();
            if n == "1" {
                self.bump();
                return Ok(true);
            }
            return Err(if n == "0" {
                FormulaError::Unsupported {
                    offset,
                    what: "intercept suppression is not supported".into(),
                }
            } else {
                FormulaError::Syntax {
                    offset,
                    expected: vec!["'1'".into(), "identifier".into()],
                    found: format!("number '{n}'"),
                }
            });
        }
        Ok(false)
    }

    fn response(&mut self) -> Result<Response, FormulaError> {
        let (offset, name) = self.expect_ident()?;
        match name.as_str() {
            "y" => Ok(Response::Y),
            "log" => {
                self.expect_sym('(')?;
                let (o, inner) = self.expect_ident()?;
                if inner != "omega" {
                    return Err(FormulaError::Syntax {
                        offset: o,
                        expected: vec!["'omega'".into()],
                        found: format!("identifier '{inner}'"),
                    });
                }
                self.expect_sym(')')?;
                Ok(Response::LogOmega)
            }
            other => Err(FormulaError::Syntax {
                offset,
                expected: vec!["'y'".into(), "'log(omega)'".into()],
                found: format!("identifier '{other}'"),
            }),
        }
    }

    fn term(&mut self) -> Result<Term, FormulaError> {
        let (offset, name) = self.expect_ident()?;
        if *self.peek() == Tok::Sym('(') {
            if name != "sin" {
                return Err(FormulaError::UnknownTransform { offset, name });
            }
            self.bump();
            let (_, cov) = self.expect_ident()?;
            self.expect_sym(')')?;
            return Ok(Term {
                covariate: cov,
                transform: Transform::Sin,
            });
        }
        Ok(Term {
            covariate: name,
            transform: Transform::Identity,
        })
    }

    fn random_term(&mut self) -> Result<RandomTerm, FormulaError> {
        self.expect_sym('(')?;
        let mut saw_one = false;
        let mut slopes: Vec<String> = Vec::new();
        loop {
            let offset = self.offset();
            if self.intercept_literal()? {
                if saw_one {
                    return Err(FormulaError::Duplicate {
                        offset,
                        name: "1".into(),
                    });
                }
                saw_one = true;
            } else {
                let (off, name) = match self.peek() {
                    Tok::Ident(_) => self.expect_ident()?,
                    _ => return Err(self.error(&["'1'", "identifier"])),
                };
                if slopes.contains(&name) {
                    return Err(FormulaError::Duplicate { offset: off, name });
                }
                slopes.push(name);
            }
            match self.peek() {
                Tok::Sym('+') => {
                    self.bump();
                }
                Tok::Sym('|') => {
                    self.bump();
                    break;
                }
                _ => return Err(self.error(&["'+'", "'|'"])),
            }
        }
        if *self.peek() == Tok::Sym('|') {
            return Err(FormulaError::Unsupported {
                offset: self.offset(),
                what: "'||' uncorrelated syntax is not supported".into(),
            });
        }
        let (group_off, group) = self.expect_ident()?;
        let (group, re_family) = if group == "gr" && *self.peek() == Tok::Sym('(') {
            self.bump();
            let (_, id) = self.expect_ident()?;
            self.expect_sym(',')?;
            let (o, key) = self.expect_ident()?;
            if key != "dist" {
                return Err(FormulaError::Syntax {
                    offset: o,
                    expected: vec!["'dist'".into()],
                    found: format!("identifier '{key}'"),
                });
            }
            self.expect_sym('=')?;
            let dist_off = self.offset();
            let dist = match self.bump().1 {
                Tok::Str(s) => s,
                _ => {
                    self.pos -= 1;
                    return Err(self.error(&["quoted distribution name"]));
                }
            };
            let family = match dist.as_str() {
                "student" => ReFamily::Student,
                "gaussian" | "normal" => ReFamily::Gaussian,
                _ => {
                    return Err(FormulaError::UnknownDistribution {
                        offset: dist_off,
                        name: dist,
                    })
                }
            };
            self.expect_sym(')')?;
            (id, family)
        } else {
            let _ = group_off;
            (group, ReFamily::Gaussian)
        };
        if *self.peek() == Tok::Sym('/') || *self.peek() == Tok::Sym(':') {
            return Err(FormulaError::Unsupported {
                offset: self.offset(),
                what: "nested grouping is not supported".into(),
            });
        }
        self.expect_sym(')')?;
        Ok(RandomTerm {
            // lme4 keeps the random intercept unless suppressed
            intercept: true,
            slope_covariates: slopes,
            group,
            re_family,
        })
    }

    fn formula(&mut self) -> Result<FormulaAst, FormulaError> {
        let response = self.response()?;
        self.expect_sym('~')?;
        let mut fixed_terms: Vec<Term> = Vec::new();
        let mut random_terms = Vec::new();
        let mut saw_one = false;
        loop {
            let offset = self.offset();
            match self.peek() {
                Tok::Num(_) => {
                    self.intercept_literal()?;
                    if saw_one {
                        return Err(FormulaError::Duplicate {
                            offset,
                            name: "1".into(),
                        });
                    }
                    saw_one = true;
                }
                Tok::Ident(_) => {
                    let t = self.term()?;
                    if fixed_terms.contains(&t) {
                        return Err(FormulaError::Duplicate {
                            offset,
                            name: t.label(),
                        });
                    }
                    fixed_terms.push(t);
                }
                Tok::Sym('(') => {
                    if !random_terms.is_empty() {
                        return Err(FormulaError::Unsupported {
                            offset,
                            what: "only one random-effect term is supported".into(),
                        });
                    }
                    random_terms.push(self.random_term()?);
                }
                _ => return Err(self.error(&["'1'", "identifier", "'('"])),
            }
            match self.peek() {
                Tok::Sym('+') => {
                    self.bump();
                }
                Tok::Eof => break,
                _ => return Err(self.error(&["'+'", "end of input"])),
            }
        }
        Ok(FormulaAst {
            response,
            fixed_terms,
            random_terms,
        })
    }
}

pub fn parse_formula(text: &str) -> Result<FormulaAst, FormulaError> {
    if text.trim().is_empty() {
        return Err(FormulaError::Empty);
    }
    let toks = tokenize(text)?;
    Parser { toks, pos: 0 }.formula()
}

/// Fixed-effect design X and random-effect design Z for one formula.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    /// n_obs × p_fixed; first column is the intercept.
    pub x: Matrix,
    /// n_obs × q_random; row blocks per subject via [`Self::subject_rows`].
    pub z: Matrix,
    pub column_names: Vec<String>,
    /// Covariate behind each fixed column (`None` for the intercept).
    pub column_covariates: Vec<Option<String>>,
    pub re_column_names: Vec<String>,
    pub re_family: Option<ReFamily>,
    subject_rows: Vec<Range<usize>>,
}

impl DesignMatrices {
    pub fn n_obs(&self) -> usize {
        self.x.rows()
    }

    pub fn p_fixed(&self) -> usize {
        self.x.cols()
    }

    pub fn q_random(&self) -> usize {
        self.z.cols()
    }

    pub fn subject_rows(&self) -> &[Range<usize>] {
        &self.subject_rows
    }

    /// Rows of Z belonging to subject `i`, flattened row-major.
    pub fn z_block(&self, i: usize) -> &[f64] {
        let r = &self.subject_rows[i];
        let q = self.q_random();
        &self.z.as_slice()[r.start * q..r.end * q]
    }
}

fn column<'a>(data: &'a LongitudinalDataset, name: &str) -> Result<&'a [f64], FormulaError> {
    data.column(name)
        .ok_or_else(|| FormulaError::UnknownCovariate(name.to_string()))
}

pub fn build_design(
    ast: &FormulaAst,
    data: &LongitudinalDataset,
) -> Result<DesignMatrices, FormulaError> {
    let n = data.n_obs();
    let mut fixed_cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut column_names = vec!["intercept".to_string()];
    let mut column_covariates = vec![None];
    for term in &ast.fixed_terms {
        let col = column(data, &term.covariate)?;
        let values = match term.transform {
            Transform::Identity => col.to_vec(),
            Transform::Sin => {
                if n > 0 && col.iter().all(|&v| v == col[0]) {
                    return Err(FormulaError::ConstantTransform(term.covariate.clone()));
                }
                col.iter().map(|v| v.sin()).collect()
            }
        };
        fixed_cols.push(values);
        column_names.push(term.label());
        column_covariates.push(Some(term.covariate.clone()));
    }

    let mut re_cols: Vec<Vec<f64>> = Vec::new();
    let mut re_column_names = Vec::new();
    for r in &ast.random_terms {
        if !LongitudinalDataset::is_subject_column(&r.group) {
            return Err(FormulaError::UnknownGroup(r.group.clone()));
        }
        if r.intercept {
            re_cols.push(vec![1.0; n]);
            re_column_names.push("intercept".to_string());
        }
        for s in &r.slope_covariates {
            re_cols.push(column(data, s)?.to_vec());
            re_column_names.push(s.clone());
        }
    }

    Ok(DesignMatrices {
        x: columns_to_matrix(n, &fixed_cols),
        z: columns_to_matrix(n, &re_cols),
        column_names,
        column_covariates,
        re_column_names,
        re_family: ast.re_family(),
        subject_rows: data.subject_ranges().to_vec(),
    })
}

fn columns_to_matrix(n: usize, cols: &[Vec<f64>]) -> Matrix {
    let mut m = Matrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Row;

    fn dataset(ages: &[f64]) -> LongitudinalDataset {
        let rows = ages
            .iter()
            .enumerate()
            .map(|(k, &age)| Row {
                subject_id: 1,
                j: k as u32,
                age,
                albumin: 0.1 * k as f64,
                trig: -0.2,
                platelet: 0.3,
                y: 1.0,
            })
            .collect();
        LongitudinalDataset::from_rows(rows).unwrap()
    }

    #[test]
    fn parses_practice_one_location() {
        let ast = parse_formula("y ~ age + albumin + (1|id)").unwrap();
        assert_eq!(ast.response, Response::Y);
        let names: Vec<_> = ast.fixed_terms.iter().map(|t| t.covariate.as_str()).collect();
        assert_eq!(names, ["age", "albumin"]);
        assert_eq!(ast.random_terms.len(), 1);
        let r = &ast.random_terms[0];
        assert!(r.intercept && r.slope_covariates.is_empty());
        assert_eq!(r.group, "id");
        assert_eq!(r.re_family, ReFamily::Gaussian);
    }

    #[test]
    fn parses_intercept_only_scale() {
        let ast = parse_formula("log(omega) ~ 1").unwrap();
        assert!(ast.is_scale());
        assert!(ast.fixed_terms.is_empty());
        assert!(ast.random_terms.is_empty());
        assert_eq!(ast.to_string(), "log(omega) ~ 1");
    }

    #[test]
    fn parses_sin_transform() {
        let ast = parse_formula("y ~ sin(age) + albumin + (1|id)").unwrap();
        assert_eq!(ast.fixed_terms[0].transform, Transform::Sin);
        assert_eq!(ast.fixed_terms[0].covariate, "age");
    }

    #[test]
    fn parses_random_slope() {
        let ast = parse_formula("log(omega) ~ age + trig + (1 + age|id)").unwrap();
        assert_eq!(ast.random_terms[0].slope_covariates, ["age"]);
        assert_eq!(ast.n_random(), 2);
    }

    #[test]
    fn parses_student_family_with_either_quote() {
        for text in [
            "y ~ age + (1|gr(id, dist='student'))",
            "y ~ age + (1|gr(id, dist=`student'))",
            "y ~ age + (1|gr(id, dist=\"student\"))",
        ] {
            let ast = parse_formula(text).unwrap();
            assert_eq!(ast.random_terms[0].re_family, ReFamily::Student, "{text}");
        }
    }

    #[test]
    fn whitespace_is_insignificant() {
        assert_eq!(
            parse_formula("y~age+albumin+(1|id)").unwrap(),
            parse_formula("  y ~  age  +  albumin + ( 1 | id )  ").unwrap()
        );
    }

    #[test]
    fn rejects_unknown_distribution() {
        let err = parse_formula("y ~ age + (1|gr(id, dist='cauchy'))").unwrap_err();
        assert!(matches!(err, FormulaError::UnknownDistribution { ref name, .. } if name == "cauchy"));
    }

    #[test]
    fn syntax_error_reports_offset_and_expected() {
        let err = parse_formula("y ~ age + + albumin").unwrap_err();
        match err {
            FormulaError::Syntax {
                offset, expected, ..
            } => {
                assert_eq!(offset, 10);
                assert!(expected.contains(&"identifier".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_scope_constructs() {
        for text in [
            "y ~ age * albumin",
            "y ~ age:albumin",
            "y ~ 0 + age",
            "y ~ age - 1",
            "y ~ age + (1|id) + (1|site)",
            "y ~ age + (1|site/id)",
            "y ~ log(age)",
            "y ~ 1 + 1",
            "",
        ] {
            assert!(parse_formula(text).is_err(), "{text}");
        }
    }

    #[test]
    fn design_intercept_only() {
        let data = dataset(&[0.0; 10]);
        let d = build_design(&parse_formula("log(omega) ~ 1").unwrap(), &data).unwrap();
        assert_eq!((d.x.rows(), d.x.cols()), (10, 1));
        assert!(d.x.as_slice().iter().all(|&v| v == 1.0));
        assert_eq!(d.q_random(), 0);
    }

    #[test]
    fn design_copies_covariates() {
        let data = dataset(&[50.0, 51.0]);
        let d = build_design(&parse_formula("y ~ age").unwrap(), &data).unwrap();
        assert_eq!(d.x.to_rows(), vec![vec![1.0, 50.0], vec![1.0, 51.0]]);
    }

    #[test]
    fn design_applies_sin() {
        let data = dataset(&[0.0, 1.0]);
        let d = build_design(&parse_formula("y ~ sin(age)").unwrap(), &data).unwrap();
        assert_eq!(d.x[(0, 1)], 0.0);
        assert_eq!(d.x[(1, 1)], 1.0_f64.sin());
    }

    #[test]
    fn design_rejects_sin_on_constant_and_unknown_names() {
        let data = dataset(&[0.0, 1.0]);
        assert_eq!(
            build_design(&parse_formula("y ~ sin(trig)").unwrap(), &data).unwrap_err(),
            FormulaError::ConstantTransform("trig".into())
        );
        assert_eq!(
            build_design(&parse_formula("y ~ bmi").unwrap(), &data).unwrap_err(),
            FormulaError::UnknownCovariate("bmi".into())
        );
        assert_eq!(
            build_design(&parse_formula("y ~ age + (1|site)").unwrap(), &data).unwrap_err(),
            FormulaError::UnknownGroup("site".into())
        );
    }

    #[test]
    fn random_slope_block_columns() {
        let data = dataset(&[0.5, 1.5, 2.5]);
        let d = build_design(&parse_formula("y ~ age + (1 + age|id)").unwrap(), &data).unwrap();
        assert_eq!(d.re_column_names, ["intercept", "age"]);
        assert_eq!(d.z_block(0), &[1.0, 0.5, 1.0, 1.5, 1.0, 2.5]);
    }
}
