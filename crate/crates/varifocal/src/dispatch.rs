//! Per-case karyotype dispatch: assign each chromosome of a patient case to
//! a type using its 24-way probabilities.
//!
//! Chromosomes are dispatched twice. The first pass sends each one to its
//! most probable type. The second pass walks the types in ascending order
//! with capacity 2 (capacity 1 for Y): an over-full type keeps its top
//! `capacity` candidates — or `capacity + 1` when all of those clear the
//! confidence threshold, which is what lets a true trisomy keep three — and
//! every evicted chromosome moves directly to its second-most-probable type
//! without a further capacity check. Warnings are emitted for any autosome
//! count other than 2 and when the sex chromosomes do not sum to 2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_TYPES: usize = 24;
/// Internal index of chromosome Y, the only type with capacity 1.
pub const Y_INDEX: usize = 23;

/// Display name of an internal type index: autosomes "1".."22", then X, Y.
pub fn type_display(index: usize) -> String {
    match index {
        22 => "X".to_string(),
        23 => "Y".to_string(),
        k => (k + 1).to_string(),
    }
}

/// Parses a display name back to the internal index.
pub fn type_from_display(name: &str) -> Option<usize> {
    match name {
        "X" | "x" => Some(22),
        "Y" | "y" => Some(23),
        other => other
            .parse::<usize>()
            .ok()
            .filter(|k| (1..=22).contains(k))
            .map(|k| k - 1),
    }
}

/// Predicted type probabilities for every chromosome of one case.
#[derive(Debug, Clone)]
pub struct CaseProbabilities {
    pub case_id: String,
    /// External chromosome identifiers, one per row.
    pub chromosome_ids: Vec<String>,
    /// `N x 24`, each row a probability vector.
    pub rows: Vec<Vec<f64>>,
}

impl CaseProbabilities {
    pub fn new(case_id: impl Into<String>, rows: Vec<Vec<f64>>) -> Self {
        let ids = (1..=rows.len()).map(|i| i.to_string()).collect();
        Self {
            case_id: case_id.into(),
            chromosome_ids: ids,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Data(format!("case {}: no chromosomes", self.case_id)));
        }
        if self.chromosome_ids.len() != self.rows.len() {
            return Err(Error::Data(format!(
                "case {}: {} ids for {} rows",
                self.case_id,
                self.chromosome_ids.len(),
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != NUM_TYPES {
                return Err(Error::Data(format!(
                    "case {}: row {i} has {} entries, expected {NUM_TYPES}",
                    self.case_id,
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0 + 1e-6).contains(&p) || !p.is_finite()) {
                return Err(Error::Data(format!(
                    "case {}: row {i} has values outside [0, 1]",
                    self.case_id
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "case {}: row {i} sums to {s}, expected 1",
                    self.case_id
                )));
            }
        }
        Ok(())
    }
}

/// The 24 output sets (chromosome row indices) plus abnormality warnings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KaryotypeAssignment {
    pub sets: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl KaryotypeAssignment {
    /// Predicted type per chromosome index, inverted from the sets.
    pub fn labels(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (k, set) in self.sets.iter().enumerate() {
            for &i in set {
                out[i] = k;
            }
        }
        out
    }
}

/// Most probable type per row, ties broken toward the lower index.
pub fn argmax_assignment(probs: &CaseProbabilities) -> Vec<usize> {
    probs.rows.iter().map(|row| argmax(row)).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = j;
        }
    }
    best
}

fn argmax_excluding(row: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &p) in row.iter().enumerate() {
        if j == skip {
            continue;
        }
        if best == usize::MAX || p > row[best] {
            best = j;
        }
    }
    best
}

/// Runs the two-pass dispatch with confidence threshold `th`.
pub fn dispatch_case(probs: &CaseProbabilities, th: f64) -> Result<KaryotypeAssignment> {
    probs.validate()?;
    if !(0.0..1.0).contains(&th) || th == 0.0 {
        return Err(Error::invalid(format!("threshold {th} outside (0, 1)")));
    }

    let mut first_pass: Vec<Vec<usize>> = vec![Vec::new(); NUM_TYPES];
    for (i, row) in probs.rows.iter().enumerate() {
        first_pass[argmax(row)].push(i);
    }

    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); NUM_TYPES];
    for k in 0..NUM_TYPES {
        let capacity = if k == Y_INDEX { 1 } else { 2 };
        let members = &first_pass[k];
        if members.len() <= capacity {
            sets[k].extend_from_slice(members);
            continue;
        }
        // sort by probability of type k, descending; ties by row index
        let mut order = members.clone();
        order.sort_by(|&a, &b| {
            probs.rows[b][k]
                .partial_cmp(&probs.rows[a][k])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        let keep = if order.len() > capacity
            && order[..capacity + 1].iter().all(|&i| probs.rows[i][k] > th)
        {
            capacity + 1
        } else {
            capacity
        };
        sets[k].extend_from_slice(&order[..keep]);
        for &i in &order[keep..] {
            let second = argmax_excluding(&probs.rows[i], k);
            sets[second].push(i);
        }
    }

    let mut warnings = Vec::new();
    for (k, set) in sets.iter().enumerate().take(22) {
        if set.len() != 2 {
            warnings.push(format!(
                "type {}: {} chromosome(s) assigned, expected 2",
                type_display(k),
                set.len()
            ));
        }
    }
    let sex_count = sets[22].len() + sets[23].len();
    if sex_count != 2 {
        warnings.push(format!(
            "sex chromosomes (X+Y): {sex_count} assigned, expected 2"
        ));
    }

    Ok(KaryotypeAssignment { sets, warnings })
}

/// JSON-facing view of an assignment: `{case_id, assignments, warnings}`
/// with assignments keyed by display type name.
#[derive(Debug, Serialize, Deserialize)]
pub struct AssignmentReport {
    pub case_id: String,
    pub assignments: BTreeMap<String, Vec<String>>,
    pub warnings: Vec<String>,
}

impl AssignmentReport {
    pub fn new(probs: &CaseProbabilities, assignment: &KaryotypeAssignment) -> Self {
        let mut assignments = BTreeMap::new();
        for (k, set) in assignment.sets.iter().enumerate() {
            let ids: Vec<String> = set
                .iter()
                .map(|&i| probs.chromosome_ids[i].clone())
                .collect();
            assignments.insert(type_display(k), ids);
        }
        Self {
            case_id: probs.case_id.clone(),
            assignments,
            warnings: assignment.warnings.clone(),
        }
    }
}

/// Reads a per-case probability CSV with header
/// `chromosome_id,p_1,...,p_24` (`p_24` is type Y).
pub fn read_probability_csv(path: &std::path::Path, case_id: &str) -> Result<CaseProbabilities> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != NUM_TYPES + 1 || &headers[0] != "chromosome_id" {
        return Err(Error::Data(format!(
            "probability CSV must have columns chromosome_id,p_1..p_{NUM_TYPES}, got {} columns",
            headers.len()
        )));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        ids.push(record[0].to_string());
        let row: Vec<f64> = (1..=NUM_TYPES)
            .map(|j| {
                record[j]
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("bad probability {:?}: {e}", &record[j])))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let mut probs = CaseProbabilities::new(case_id, rows);
    probs.chromosome_ids = ids;
    probs.validate()?;
    Ok(probs)
}

/// Writes the matching probability CSV.
pub fn write_probability_csv(path: &std::path::Path, probs: &CaseProbabilities) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["chromosome_id".to_string()];
    header.extend((1..=NUM_TYPES).map(|j| format!("p_{j}")));
    writer.write_record(&header)?;
    for (id, row) in probs.chromosome_ids.iter().zip(&probs.rows) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(|p| format!("{p}")));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_row_with(hot: usize, p: f64) -> Vec<f64> {
        let rest = (1.0 - p) / (NUM_TYPES - 1) as f64;
        (0..NUM_TYPES).map(|j| if j == hot { p } else { rest }).collect()
    }

    fn one_hot(hot: usize) -> Vec<f64> {
        (0..NUM_TYPES).map(|j| if j == hot { 1.0 } else { 0.0 }).collect()
    }

    /// 46 one-hot rows of a normal male karyotype.
    fn normal_male() -> CaseProbabilities {
        let mut rows = Vec::new();
        for k in 0..22 {
            rows.push(one_hot(k));
            rows.push(one_hot(k));
        }
        rows.push(one_hot(22));
        rows.push(one_hot(23));
        CaseProbabilities::new("case", rows)
    }

    #[test]
    fn argmax_rules() {
        let probs = CaseProbabilities::new(
            "c",
            vec![
                one_hot(5),
                vec![1.0 / 24.0; 24],
                {
                    let mut r = vec![0.3 / 22.0; 24];
                    r[1] = 0.6;
                    r[2] = 0.1;
                    r
                },
            ],
        );
        assert_eq!(argmax_assignment(&probs), vec![5, 0, 1]);
    }

    #[test]
    fn single_chromosome_case() {
        let probs = CaseProbabilities::new("c", vec![uniform_row_with(4, 0.9)]);
        let a = dispatch_case(&probs, 0.9).unwrap();
        assert_eq!(a.sets[4], vec![0]);
        // all other autosomes deficient + type 5 has one + sex missing
        assert_eq!(a.warnings.len(), 23);
    }

    #[test]
    fn normal_male_karyotype_no_warnings() {
        let a = dispatch_case(&normal_male(), 0.9).unwrap();
        for k in 0..22 {
            assert_eq!(a.sets[k].len(), 2);
        }
        assert_eq!(a.sets[22].len(), 1);
        assert_eq!(a.sets[23].len(), 1);
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn trisomy_keeps_three_confident_rows() {
        // three rows all putting 0.95 on display-type 21 (index 20)
        let rows = vec![
            uniform_row_with(20, 0.95),
            uniform_row_with(20, 0.95),
            uniform_row_with(20, 0.95),
        ];
        let probs = CaseProbabilities::new("c", rows);
        let a = dispatch_case(&probs, 0.9).unwrap();
        assert_eq!(a.sets[20], vec![0, 1, 2]);
        assert!(a.warnings.iter().any(|w| w.starts_with("type 21:")));
    }

    #[test]
    fn unconfident_extra_is_evicted_to_second_best() {
        // two confident rows stay, the 0.50 row moves to its second-best type
        let mut third = uniform_row_with(20, 0.50);
        third[21] = 0.3; // second-best is display-type 22 (index 21)
        let scale: f64 = third.iter().sum();
        for v in &mut third {
            *v /= scale;
        }
        let probs = CaseProbabilities::new(
            "c",
            vec![uniform_row_with(20, 0.95), uniform_row_with(20, 0.95), third],
        );
        let a = dispatch_case(&probs, 0.9).unwrap();
        assert_eq!(a.sets[20], vec![0, 1]);
        assert_eq!(a.sets[21], vec![2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty = CaseProbabilities::new("c", vec![]);
        assert!(dispatch_case(&empty, 0.9).is_err());
        let bad = CaseProbabilities::new("c", vec![vec![0.5; 24]]);
        assert!(dispatch_case(&bad, 0.9).is_err());
        let good = normal_male();
        assert!(dispatch_case(&good, 0.0).is_err());
        assert!(dispatch_case(&good, 1.0).is_err());
    }

    #[test]
    fn display_names_round_trip() {
        for k in 0..NUM_TYPES {
            assert_eq!(type_from_display(&type_display(k)), Some(k));
        }
        assert_eq!(type_display(20), "21");
        assert_eq!(type_display(22), "X");
        assert_eq!(type_from_display("Z"), None);
        assert_eq!(type_from_display("0"), None);
        assert_eq!(type_from_display("23"), None);
    }

    #[test]
    fn probability_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probs.csv");
        let probs = normal_male();
        write_probability_csv(&path, &probs).unwrap();
        let back = read_probability_csv(&path, "case").unwrap();
        assert_eq!(back.rows, probs.rows);
        assert_eq!(back.chromosome_ids, probs.chromosome_ids);
    }
}
