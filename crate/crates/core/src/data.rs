//! Trial records, propensities, fold splits and covariate coarsening.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::rng;
use crate::stats;

/// Default positivity bound: every propensity must lie in `[eps, 1 - eps]`.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Known assignment probabilities, either constant or varying across strata
/// of the coarse covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Propensity {
    Constant(Vec<f64>),
    Stratified(BTreeMap<u32, Vec<f64>>),
}

impl Propensity {
    pub fn constant(probs: &[f64]) -> Self {
        Propensity::Constant(probs.to_vec())
    }

    pub fn balanced(arm_count: usize) -> Self {
        Propensity::Constant(vec![1.0 / arm_count as f64; arm_count])
    }

    pub fn arm_count(&self) -> usize {
        match self {
            Propensity::Constant(v) => v.len(),
            Propensity::Stratified(m) => m.values().next().map_or(0, Vec::len),
        }
    }

    /// Parse `{"1": 0.5, "2": 0.5}` or `{"strata": {"3": {"1": .., "2": ..}}}`,
    /// optionally with an `"epsilon"` entry.
    pub fn from_json(text: &str) -> Result<(Self, f64)> {
        let v: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CalmError::parse(e.line(), "propensity", e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| CalmError::parse(0, "propensity", "expected a JSON object"))?;
        let eps = match obj.get("epsilon") {
            Some(e) => e
                .as_f64()
                .ok_or_else(|| CalmError::parse(0, "epsilon", "not a number"))?,
            None => DEFAULT_EPSILON,
        };
        let prop = if let Some(strata) = obj.get("strata") {
            let strata = strata
                .as_object()
                .ok_or_else(|| CalmError::parse(0, "strata", "expected an object"))?;
            let mut table = BTreeMap::new();
            for (code, arms) in strata {
                let code: u32 = code
                    .parse()
                    .map_err(|_| CalmError::parse(0, "strata", format!("bad stratum code `{code}`")))?;
                table.insert(code, parse_arm_map(arms)?);
            }
            Propensity::Stratified(table)
        } else {
            let mut arms = serde_json::Map::new();
            for (k, val) in obj {
                if k != "epsilon" {
                    arms.insert(k.clone(), val.clone());
                }
            }
            Propensity::Constant(parse_arm_map(&serde_json::Value::Object(arms))?)
        };
        Ok((prop, eps))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let arm_map = |v: &Vec<f64>| {
            serde_json::Value::Object(
                v.iter()
                    .enumerate()
                    .map(|(i, p)| ((i + 1).to_string(), serde_json::json!(p)))
                    .collect(),
            )
        };
        match self {
            Propensity::Constant(v) => arm_map(v),
            Propensity::Stratified(m) => serde_json::json!({
                "strata": m.iter().map(|(k, v)| (k.to_string(), arm_map(v))).collect::<serde_json::Map<_, _>>()
            }),
        }
    }

    fn validate(&self, eps: f64) -> Result<()> {
        if !(0.0..0.5).contains(&eps) {
            return Err(CalmError::domain(format!("positivity bound {eps} must lie in [0, 0.5)")));
        }
        let check = |probs: &[f64], label: &str| -> Result<()> {
            if probs.len() < 2 {
                return Err(CalmError::domain(format!("{label}: need at least two arms")));
            }
            for (i, &p) in probs.iter().enumerate() {
                if !(p >= eps && p <= 1.0 - eps) {
                    return Err(CalmError::domain(format!(
                        "{label}: propensity {p} for arm {} violates positivity bound {eps}",
                        i + 1
                    )));
                }
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(CalmError::domain(format!("{label}: propensities sum to {total}, not 1")));
            }
            Ok(())
        };
        match self {
            Propensity::Constant(v) => check(v, "propensity"),
            Propensity::Stratified(m) => {
                let k = self.arm_count();
                for (code, v) in m {
                    if v.len() != k {
                        return Err(CalmError::domain(format!("stratum {code}: arm count differs")));
                    }
                    check(v, &format!("stratum {code}"))?;
                }
                Ok(())
            }
        }
    }
}

fn parse_arm_map(v: &serde_json::Value) -> Result<Vec<f64>> {
    let obj = v
        .as_object()
        .ok_or_else(|| CalmError::parse(0, "propensity", "expected arm -> probability object"))?;
    let mut pairs = Vec::with_capacity(obj.len());
    for (k, p) in obj {
        let arm: usize = k
            .parse()
            .map_err(|_| CalmError::parse(0, "propensity", format!("bad arm label `{k}`")))?;
        let p = p
            .as_f64()
            .ok_or_else(|| CalmError::parse(0, "propensity", format!("arm {arm}: not a number")))?;
        pairs.push((arm, p));
    }
    pairs.sort_by_key(|&(a, _)| a);
    for (i, &(a, _)) in pairs.iter().enumerate() {
        if a != i + 1 {
            return Err(CalmError::domain("arms must be labelled 1..k without gaps"));
        }
    }
    Ok(pairs.into_iter().map(|(_, p)| p).collect())
}

/// Column names for CSV input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub id: String,
    pub y: String,
    pub t: String,
    pub x: Vec<String>,
    pub x_coarse: Option<String>,
    pub z: Option<String>,
}

impl CsvSchema {
    /// The default layout: `id,y,t,x1..xp[,xc][,z]`.
    pub fn infer(headers: &[String]) -> Self {
        let mut x: Vec<(usize, String)> = headers
            .iter()
            .filter_map(|h| {
                h.strip_prefix('x')
                    .and_then(|rest| rest.parse::<usize>().ok())
                    .map(|j| (j, h.clone()))
            })
            .collect();
        x.sort();
        let has = |name: &str| headers.iter().any(|h| h == name);
        CsvSchema {
            id: "id".into(),
            y: "y".into(),
            t: "t".into(),
            x: x.into_iter().map(|(_, h)| h).collect(),
            x_coarse: has("xc").then(|| "xc".into()),
            z: has("z").then(|| "z".into()),
        }
    }
}

/// Column-oriented trial data with known propensities.
#[derive(Debug, Clone, PartialEq)]
pub struct RctDataset {
    ids: Vec<String>,
    y: Vec<f64>,
    arms: Vec<usize>,
    x: Vec<f64>,
    p: usize,
    x_coarse: Option<Vec<u32>>,
    z: Vec<String>,
    propensity: Propensity,
    epsilon: f64,
    /// Row-major `n x k` table of assignment probabilities.
    e: Vec<f64>,
}

/// Raw columns used to build a dataset.
#[derive(Debug, Clone, Default)]
pub struct Columns {
    pub ids: Vec<String>,
    pub y: Vec<f64>,
    pub arms: Vec<usize>,
    /// Row-major covariates.
    pub x: Vec<f64>,
    pub p: usize,
    pub x_coarse: Option<Vec<u32>>,
    pub z: Vec<String>,
}

impl RctDataset {
    pub fn new(cols: Columns, propensity: Propensity, epsilon: f64) -> Result<Self> {
        propensity.validate(epsilon)?;
        let n = cols.ids.len();
        let k = propensity.arm_count();
        if cols.y.len() != n || cols.arms.len() != n || cols.x.len() != n * cols.p {
            return Err(CalmError::domain("column lengths disagree"));
        }
        let z = if cols.z.is_empty() { vec![String::new(); n] } else { cols.z };
        if z.len() != n {
            return Err(CalmError::domain("payload column length disagrees"));
        }
        if let Some(c) = &cols.x_coarse {
            if c.len() != n {
                return Err(CalmError::domain("coarse covariate length disagrees"));
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for (i, id) in cols.ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(CalmError::domain(format!("duplicate subject id `{id}` at row {}", i + 1)));
            }
        }
        for i in 0..n {
            let t = cols.arms[i];
            if t < 1 || t > k {
                return Err(CalmError::domain(format!(
                    "subject `{}`: arm {t} outside 1..={k}",
                    cols.ids[i]
                )));
            }
            if !cols.y[i].is_finite() {
                return Err(CalmError::domain(format!("subject `{}`: outcome is not finite", cols.ids[i])));
            }
        }
        if cols.x.iter().any(|v| !v.is_finite()) {
            return Err(CalmError::domain("covariates must be finite"));
        }
        let mut e = Vec::with_capacity(n * k);
        match &propensity {
            Propensity::Constant(v) => {
                for _ in 0..n {
                    e.extend_from_slice(v);
                }
            }
            Propensity::Stratified(table) => {
                let codes = cols
                    .x_coarse
                    .as_ref()
                    .ok_or_else(|| CalmError::domain("stratified propensity needs a coarse covariate column"))?;
                for (i, c) in codes.iter().enumerate() {
                    let row = table.get(c).ok_or_else(|| {
                        CalmError::domain(format!("subject `{}`: no propensity for stratum {c}", cols.ids[i]))
                    })?;
                    e.extend_from_slice(row);
                }
            }
        }
        Ok(RctDataset {
            ids: cols.ids,
            y: cols.y,
            arms: cols.arms,
            x: cols.x,
            p: cols.p,
            x_coarse: cols.x_coarse,
            z,
            propensity,
            epsilon,
            e,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn arm_count(&self) -> usize {
        self.propensity.arm_count()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn arms(&self) -> &[usize] {
        &self.arms
    }

    pub fn arm(&self, i: usize) -> usize {
        self.arms[i]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self, i: usize) -> &str {
        &self.z[i]
    }

    pub fn x_coarse(&self) -> Option<&[u32]> {
        self.x_coarse.as_deref()
    }

    pub fn propensity(&self) -> &Propensity {
        &self.propensity
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `e_t(X_i)`.
    pub fn e(&self, i: usize, arm: usize) -> f64 {
        self.e[i * self.arm_count() + arm - 1]
    }

    /// `lambda_t = 1/e_t - 1`.
    pub fn lambda(&self, i: usize, arm: usize) -> f64 {
        1.0 / self.e(i, arm) - 1.0
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    pub fn check_arm(&self, arm: usize) -> Result<()> {
        if arm < 1 || arm > self.arm_count() {
            return Err(CalmError::domain(format!("arm {arm} outside 1..={}", self.arm_count())));
        }
        Ok(())
    }

    /// Copy with one outcome replaced; used to probe fold separation.
    pub fn with_outcome(&self, i: usize, y: f64) -> Self {
        let mut d = self.clone();
        d.y[i] = y;
        d
    }

    /// Stratum codes: the coarse column when present, quartile bins otherwise.
    pub fn strata(&self) -> Vec<u32> {
        match &self.x_coarse {
            Some(c) => c.clone(),
            None => quartile_strata(self),
        }
    }
}

/// Quartile bins of the first `min(p, 2)` coordinates, cross-producted into
/// at most 16 codes numbered from 1.
pub fn quartile_strata(d: &RctDataset) -> Vec<u32> {
    let dims = d.dim().min(2);
    let cuts: Vec<[f64; 3]> = (0..dims)
        .map(|j| {
            let mut col: Vec<f64> = (0..d.len()).map(|i| d.x_row(i)[j]).collect();
            col.sort_by(f64::total_cmp);
            [0.25, 0.5, 0.75].map(|q| stats::quantile_sorted(&col, q))
        })
        .collect();
    (0..d.len())
        .map(|i| {
            let x = d.x_row(i);
            let mut code = 0u32;
            for (j, c) in cuts.iter().enumerate() {
                let bin = c.iter().filter(|&&q| x[j] > q).count() as u32;
                code += bin * 4u32.pow(j as u32);
            }
            code + 1
        })
        .collect()
}

/// Read a CSV, inferring the default column layout from the header.
pub fn read_dataset<R: Read>(reader: R, propensity: Propensity, epsilon: f64) -> Result<RctDataset> {
    load_dataset(reader, None, propensity, epsilon)
}

/// Read a CSV with an explicit (or inferred) schema.
pub fn load_dataset<R: Read>(
    reader: R,
    schema: Option<&CsvSchema>,
    propensity: Propensity,
    epsilon: f64,
) -> Result<RctDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CalmError::parse(0, "header", e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let inferred;
    let schema = match schema {
        Some(s) => s,
        None => {
            inferred = CsvSchema::infer(&headers);
            &inferred
        }
    };
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CalmError::parse(0, name, "missing column"))
    };
    let id_c = col(&schema.id)?;
    let y_c = col(&schema.y)?;
    let t_c = col(&schema.t)?;
    let x_c: Vec<usize> = schema.x.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let xc_c = schema.x_coarse.as_deref().map(col).transpose()?;
    let z_c = schema.z.as_deref().map(col).transpose()?;

    let mut cols = Columns {
        p: x_c.len(),
        x_coarse: xc_c.map(|_| Vec::new()),
        ..Default::default()
    };
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| CalmError::parse(row, "record", e.to_string()))?;
        let field = |c: usize, name: &str| -> Result<&str> {
            rec.get(c)
                .map(str::trim)
                .ok_or_else(|| CalmError::parse(row, name, "missing field"))
        };
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = field(c, name)?;
            s.parse::<f64>()
                .map_err(|_| CalmError::parse(row, name, format!("`{s}` is not a number")))
        };
        cols.ids.push(field(id_c, &schema.id)?.to_string());
        cols.y.push(num(y_c, &schema.y)?);
        let t = field(t_c, &schema.t)?;
        cols.arms.push(
            t.parse::<usize>()
                .map_err(|_| CalmError::parse(row, &schema.t, format!("`{t}` is not an arm label")))?,
        );
        for (&c, name) in x_c.iter().zip(&schema.x) {
            cols.x.push(num(c, name)?);
        }
        if let (Some(c), Some(v)) = (xc_c, cols.x_coarse.as_mut()) {
            let name = schema.x_coarse.as_deref().unwrap_or("xc");
            let s = field(c, name)?;
            v.push(
                s.parse::<u32>()
                    .map_err(|_| CalmError::parse(row, name, format!("`{s}` is not a stratum code")))?,
            );
        }
        if let Some(c) = z_c {
            cols.z.push(field(c, "z")?.to_string());
        }
    }
    RctDataset::new(cols, propensity, epsilon)
}

/// Write the dataset in the default layout. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_csv<W: Write>(d: &RctDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "y".into(), "t".into()];
    header.extend((1..=d.dim()).map(|j| format!("x{j}")));
    if d.x_coarse.is_some() {
        header.push("xc".into());
    }
    header.push("z".into());
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..d.len() {
        let mut rec = vec![d.ids[i].clone(), d.y[i].to_string(), d.arms[i].to_string()];
        rec.extend(d.x_row(i).iter().map(f64::to_string));
        if let Some(c) = &d.x_coarse {
            rec.push(c[i].to_string());
        }
        rec.push(d.z[i].clone());
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> CalmError {
    CalmError::Io(std::io::Error::other(e.to_string()))
}

/// Fold labels `1..=k` for each subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    labels: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    pub fn from_labels(labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.iter().any(|&l| l < 1 || l > k) {
            return Err(CalmError::domain("fold labels must lie in 1..=k"));
        }
        Ok(FoldAssignment { labels, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l - 1] += 1;
        }
        s
    }

    /// Training fold used when evaluating `fold`: its cyclic predecessor.
    pub fn predecessor(&self, fold: usize) -> usize {
        if fold == 1 {
            self.k
        } else {
            fold - 1
        }
    }
}

/// Random partition into `k` folds whose sizes differ by at most one.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(CalmError::domain(format!("cannot split {n} subjects into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[rng::tag::FOLDS, n as u64, k as u64]));
    let mut labels = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        labels[i] = pos % k + 1;
    }
    Ok(FoldAssignment { labels, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv_text() -> &'static str {
        "id,y,t,x1,x2,z\n\
         a,1.5,1,0.1,-0.2,g=0.3\n\
         b,-2,2,1.0,0.5,g=-1\n\
         c,0.25,1,-0.7,0.0,\"quoted, text\"\n"
    }

    #[test]
    fn reads_default_layout() {
        let d = read_dataset(csv_text().as_bytes(), Propensity::balanced(2), DEFAULT_EPSILON).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.x_row(1), &[1.0, 0.5]);
        assert_eq!(d.arm(1), 2);
        assert_eq!(d.z(2), "quoted, text");
        assert_eq!(d.e(0, 1), 0.5);
        assert_eq!(d.lambda(0, 2), 1.0);
    }

    #[test]
    fn missing_outcome_column_names_the_column() {
        let text = "id,t,x1\na,1,0.1\n";
        match read_dataset(text.as_bytes(), Propensity::balanced(2), DEFAULT_EPSILON) {
            Err(CalmError::Parse { column, .. }) => assert_eq!(column, "y"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_row_and_column() {
        let text = "id,y,t,x1\na,1,1,0.1\nb,oops,2,0.3\n";
        match read_dataset(text.as_bytes(), Propensity::balanced(2), DEFAULT_EPSILON) {
            Err(CalmError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn arm_out_of_range_is_a_domain_error() {
        let text = "id,y,t,x1\na,1,3,0.1\n";
        assert!(matches!(
            read_dataset(text.as_bytes(), Propensity::balanced(2), DEFAULT_EPSILON),
            Err(CalmError::Domain(_))
        ));
    }

    #[test]
    fn positivity_violation_rejected() {
        let text = "id,y,t,x1\na,1,1,0.1\n";
        let p = Propensity::constant(&[0.005, 0.995]);
        assert!(matches!(read_dataset(text.as_bytes(), p, DEFAULT_EPSILON), Err(CalmError::Domain(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "id,y,t,x1\na,1,1,0.1\na,2,2,0.3\n";
        assert!(matches!(
            read_dataset(text.as_bytes(), Propensity::balanced(2), DEFAULT_EPSILON),
            Err(CalmError::Domain(_))
        ));
    }

    #[test]
    fn propensity_json_forms() {
        let (p, eps) = Propensity::from_json(r#"{"1": 0.3, "2": 0.7}"#).unwrap();
        assert_eq!(p, Propensity::constant(&[0.3, 0.7]));
        assert_eq!(eps, DEFAULT_EPSILON);
        let (p, eps) =
            Propensity::from_json(r#"{"epsilon": 0.05, "strata": {"1": {"1": 0.5, "2": 0.5}, "2": {"2": 0.8, "1": 0.2}}}"#)
                .unwrap();
        assert_eq!(eps, 0.05);
        match &p {
            Propensity::Stratified(m) => assert_eq!(m[&2], vec![0.2, 0.8]),
            _ => panic!(),
        }
        let (back, _) = Propensity::from_json(&p.to_json().to_string()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn stratified_propensity_uses_coarse_column() {
        let text = "id,y,t,x1,xc\na,1,1,0.1,1\nb,2,2,0.3,2\n";
        let (p, eps) =
            Propensity::from_json(r#"{"strata": {"1": {"1": 0.5, "2": 0.5}, "2": {"1": 0.2, "2": 0.8}}}"#).unwrap();
        let d = read_dataset(text.as_bytes(), p, eps).unwrap();
        assert_eq!(d.e(1, 1), 0.2);
        assert!((d.lambda(1, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn folds_rejects_bad_k() {
        assert!(split_folds(10, 1, 0).is_err());
        assert!(split_folds(3, 4, 0).is_err());
        assert!(split_folds(4, 4, 0).is_ok());
    }

    #[test]
    fn fold_membership_is_uniform_across_seeds() {
        // subject 0 should land in each of 3 folds about a third of the time
        let mut counts = [0usize; 3];
        for seed in 0..1000 {
            let f = split_folds(10, 3, seed).unwrap();
            counts[f.label(0) - 1] += 1;
        }
        for c in counts {
            // binomial(1000, 1/3): sd about 15
            assert!((c as f64 - 333.3).abs() < 60.0, "{counts:?}");
        }
    }

    #[test]
    fn quartile_strata_cover_sixteen_cells() {
        let n = 400;
        let mut cols = Columns { p: 2, ..Default::default() };
        for i in 0..n {
            cols.ids.push(format!("s{i}"));
            cols.y.push(0.0);
            cols.arms.push(1 + i % 2);
            cols.x.push(((i * 7919) % 400) as f64);
            cols.x.push(((i * 104_729) % 397) as f64);
        }
        let d = RctDataset::new(cols, Propensity::balanced(2), DEFAULT_EPSILON).unwrap();
        let s = quartile_strata(&d);
        let distinct: std::collections::BTreeSet<u32> = s.iter().copied().collect();
        assert!(distinct.len() <= 16);
        assert!(s.iter().all(|&c| (1..=16).contains(&c)));
        assert!(distinct.len() >= 12);
    }

    fn arb_dataset() -> impl Strategy<Value = RctDataset> {
        (1usize..30, 0usize..4, any::<bool>()).prop_flat_map(|(n, p, coarse)| {
            (
                proptest::collection::vec(-1e6f64..1e6, n),
                proptest::collection::vec(1usize..=3, n),
                proptest::collection::vec(-1e3f64..1e3, n * p),
                proptest::collection::vec(1u32..5, n),
                proptest::collection::vec("[a-z ,\"=0-9.-]{0,12}", n),
            )
                .prop_map(move |(y, arms, x, xc, z)| {
                    let cols = Columns {
                        ids: (0..n).map(|i| format!("id{i}")).collect(),
                        y,
                        arms,
                        x,
                        p,
                        x_coarse: coarse.then_some(xc),
                        z,
                    };
                    RctDataset::new(cols, Propensity::balanced(3), DEFAULT_EPSILON).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(d in arb_dataset()) {
            let mut buf = Vec::new();
            write_csv(&d, &mut buf).unwrap();
            let back = read_dataset(&buf[..], Propensity::balanced(3), DEFAULT_EPSILON).unwrap();
            // whitespace-only payloads are trimmed on read
            let mut expected = d.clone();
            for z in expected.z.iter_mut() {
                *z = z.trim().to_string();
            }
            prop_assert_eq!(back, expected);
        }

        #[test]
        fn folds_partition_with_balanced_sizes(n in 2usize..300, k in 2usize..10, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let f = split_folds(n, k, seed).unwrap();
            let sizes = f.sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            let lo = *sizes.iter().min().unwrap();
            let hi = *sizes.iter().max().unwrap();
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(&f, &split_folds(n, k, seed).unwrap());
        }
    }
}
