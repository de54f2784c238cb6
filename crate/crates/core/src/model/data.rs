use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const CSV_HEADER: [&str; 7] = ["subject_id", "j", "age", "albumin", "trig", "platelet", "y"];

/// Covariate columns a formula may reference.
pub const COVARIATES: [&str; 4] = ["age", "albumin", "trig", "platelet"];

/// One encounter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub subject_id: u64,
    pub j: u32,
    pub age: f64,
    pub albumin: f64,
    pub trig: f64,
    pub platelet: f64,
    pub y: f64,
}

/// Column store of encounters; rows of a subject are contiguous and
/// ordered by `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongitudinalDataset {
    subject_id: Vec<u64>,
    j: Vec<u32>,
    age: Vec<f64>,
    albumin: Vec<f64>,
    trig: Vec<f64>,
    platelet: Vec<f64>,
    y: Vec<f64>,
    subjects: Vec<Range<usize>>,
}

impl LongitudinalDataset {
    pub fn from_rows(rows: Vec<Row>) -> Result<Self, ModelError> {
        let mut d = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (k, r) in rows.iter().enumerate() {
            let new_subject = k == 0 || rows[k - 1].subject_id != r.subject_id;
            if new_subject {
                if !seen.insert(r.subject_id) {
                    return Err(ModelError::InvalidDataset(format!(
                        "rows of subject {} are not contiguous (row {})",
                        r.subject_id, k
                    )));
                }
                d.subjects.push(k..k + 1);
            } else {
                if r.j <= rows[k - 1].j {
                    return Err(ModelError::InvalidDataset(format!(
                        "encounters of subject {} are not ordered by j (row {})",
                        r.subject_id, k
                    )));
                }
                d.subjects.last_mut().expect("subject open").end = k + 1;
            }
            d.subject_id.push(r.subject_id);
            d.j.push(r.j);
            d.age.push(r.age);
            d.albumin.push(r.albumin);
            d.trig.push(r.trig);
            d.platelet.push(r.platelet);
            d.y.push(r.y);
        }
        Ok(d)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject_ranges(&self) -> &[Range<usize>] {
        &self.subjects
    }

    pub fn subject_ids(&self) -> &[u64] {
        &self.subject_id
    }

    pub fn encounter_index(&self) -> &[u32] {
        &self.j
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        match name {
            "age" => Some(&self.age),
            "albumin" => Some(&self.albumin),
            "trig" => Some(&self.trig),
            "platelet" => Some(&self.platelet),
            _ => None,
        }
    }

    pub fn is_subject_column(name: &str) -> bool {
        matches!(name, "id" | "subject_id")
    }

    pub fn row(&self, k: usize) -> Row {
        Row {
            subject_id: self.subject_id[k],
            j: self.j[k],
            age: self.age[k],
            albumin: self.albumin[k],
            trig: self.trig[k],
            platelet: self.platelet[k],
            y: self.y[k],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = Row> + '_ {
        (0..self.n_obs()).map(|k| self.row(k))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row).map_err(|e| ModelError::Csv {
                line: 0,
                message: e.to_string(),
            })?;
        }
        if self.n_obs() == 0 {
            w.write_record(CSV_HEADER).map_err(|e| ModelError::Csv {
                line: 0,
                message: e.to_string(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, ModelError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| ModelError::Csv {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(ModelError::Csv {
                line: 1,
                message: format!("expected header {}", CSV_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (k, rec) in r.deserialize::<Row>().enumerate() {
            let row = rec.map_err(|e| ModelError::Csv {
                line: k + 2,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u64, j: u32, y: f64) -> Row {
        Row {
            subject_id: id,
            j,
            age: 0.25 + j as f64,
            albumin: -1.5,
            trig: 0.1,
            platelet: 1e-3,
            y,
        }
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let d = LongitudinalDataset::from_rows(vec![row(0, 0, 1.0), row(0, 1, 2.5), row(3, 0, -0.1)])
            .unwrap();
        let bytes = d.to_csv_bytes();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("subject_id,j,age,albumin,trig,platelet,y\n"));
        let back = LongitudinalDataset::read_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.n_subjects(), 2);
        assert_eq!(back.subject_ranges(), &[0..2, 2..3]);
    }

    #[test]
    fn rejects_interleaved_subjects() {
        let err = LongitudinalDataset::from_rows(vec![row(0, 0, 0.0), row(1, 0, 0.0), row(0, 1, 0.0)]);
        assert!(matches!(err, Err(ModelError::InvalidDataset(_))));
    }

    #[test]
    fn rejects_unordered_encounters() {
        let err = LongitudinalDataset::from_rows(vec![row(0, 1, 0.0), row(0, 0, 0.0)]);
        assert!(matches!(err, Err(ModelError::InvalidDataset(_))));
    }

    #[test]
    fn bad_header_and_bad_line_are_reported() {
        let err = LongitudinalDataset::read_csv("a,b\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, ModelError::Csv { line: 1, .. }));
        let text = "subject_id,j,age,albumin,trig,platelet,y\n0,0,1,1,1,1,1\n0,1,x,1,1,1,1\n";
        let err = LongitudinalDataset::read_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, ModelError::Csv { line: 3, .. }));
    }
}
