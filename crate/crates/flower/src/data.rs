//! Dataset layout and CSV ingestion.
//!
//! Responses live on a common support [A, B]; covariates are categorical
//! with per-covariate level counts. Ingestion rescales each response column
//! to the support by the min-max map and persists everything needed to get
//! back to original units (rescale parameters) and to original labels
//! (covariate code tables).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Categorical covariate codes plus the derived combination index.
///
/// A "combination" is one observed joint configuration of all covariate
/// levels; units sharing a combination always share mixture weights, so the
/// sampler aggregates by combination rather than by unit where possible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateLayout {
    /// `[covariate][unit]`, 0-based level codes
    pub codes: Vec<Vec<u16>>,
    /// number of levels per covariate
    pub level_counts: Vec<usize>,
    /// `[unit]` -> observed-combination id
    pub combo_of_unit: Vec<u32>,
    /// observed combinations, id -> level codes
    pub combos: Vec<Vec<u16>>,
    /// units per observed combination
    pub combo_units: Vec<u32>,
}

impl CovariateLayout {
    pub fn from_codes(codes: Vec<Vec<u16>>, level_counts: Vec<usize>) -> Result<Self> {
        if codes.len() != level_counts.len() {
            return Err(Error::DimensionMismatch(
                "one level count per covariate is required".into(),
            ));
        }
        let n = codes.first().map_or(0, Vec::len);
        for (h, col) in codes.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch(
                    "covariate columns must have equal length".into(),
                ));
            }
            if level_counts[h] == 0 || level_counts[h] > u16::MAX as usize {
                return Err(Error::InvalidParameter(format!(
                    "covariate {h} has invalid level count {}",
                    level_counts[h]
                )));
            }
            if let Some(&bad) = col.iter().find(|&&c| c as usize >= level_counts[h]) {
                return Err(Error::Data(format!(
                    "covariate {h} has code {bad} outside 0..{}",
                    level_counts[h]
                )));
            }
        }
        let p = codes.len();
        let mut seen: HashMap<Vec<u16>, u32> = HashMap::new();
        let mut combos: Vec<Vec<u16>> = Vec::new();
        let mut combo_units: Vec<u32> = Vec::new();
        let mut combo_of_unit = Vec::with_capacity(n);
        for i in 0..n {
            let key: Vec<u16> = (0..p).map(|h| codes[h][i]).collect();
            let id = *seen.entry(key.clone()).or_insert_with(|| {
                combos.push(key);
                combo_units.push(0);
                (combos.len() - 1) as u32
            });
            combo_units[id as usize] += 1;
            combo_of_unit.push(id);
        }
        Ok(Self { codes, level_counts, combo_of_unit, combos, combo_units })
    }

    pub fn n_units(&self) -> usize {
        self.combo_of_unit.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.level_counts.len()
    }

    /// Product of all level counts: the size of the full combination space.
    pub fn full_combo_count(&self) -> usize {
        self.level_counts.iter().product()
    }
}

/// Enumerate the full combination space in lexicographic order.
pub fn enumerate_combos(level_counts: &[usize]) -> Vec<Vec<u16>> {
    let total: usize = level_counts.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut cur = vec![0u16; level_counts.len()];
    for _ in 0..total {
        out.push(cur.clone());
        for h in (0..level_counts.len()).rev() {
            cur[h] += 1;
            if (cur[h] as usize) < level_counts[h] {
                break;
            }
            cur[h] = 0;
        }
    }
    out
}

/// A d x n response matrix on a common support plus the covariate layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    /// `[coordinate][unit]`
    pub responses: Vec<Vec<f64>>,
    pub support: (f64, f64),
    pub layout: CovariateLayout,
}

impl Dataset {
    pub fn new(
        responses: Vec<Vec<f64>>,
        codes: Vec<Vec<u16>>,
        level_counts: Vec<usize>,
        support: (f64, f64),
    ) -> Result<Self> {
        if !(support.0 < support.1) {
            return Err(Error::InvalidParameter(format!(
                "support must satisfy A < B, got [{}, {}]",
                support.0, support.1
            )));
        }
        let layout = CovariateLayout::from_codes(codes, level_counts)?;
        let n = layout.n_units();
        for (l, row) in responses.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "response coordinate {l} has {} values for {n} units",
                    row.len()
                )));
            }
            for (i, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::Data(format!(
                        "response coordinate {l}, unit {i} is not finite"
                    )));
                }
                if x < support.0 || x > support.1 {
                    return Err(Error::Data(format!(
                        "response coordinate {l}, unit {i} = {x} lies outside [{}, {}]",
                        support.0, support.1
                    )));
                }
            }
        }
        Ok(Self { responses, support, layout })
    }

    pub fn n_units(&self) -> usize {
        self.layout.n_units()
    }

    pub fn n_coords(&self) -> usize {
        self.responses.len()
    }

    /// Mean and standard deviation of the pooled responses; the atom-prior
    /// location defaults derive from these.
    pub fn pooled_mean_sd(&self) -> (f64, f64) {
        let mut n = 0usize;
        let mut sum = 0.0;
        for row in &self.responses {
            n += row.len();
            sum += row.iter().sum::<f64>();
        }
        let mean = sum / n.max(1) as f64;
        let mut ss = 0.0;
        for row in &self.responses {
            for &x in row {
                ss += (x - mean) * (x - mean);
            }
        }
        let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 1.0 };
        (mean, sd.max(1e-8))
    }
}

/// Per-column min-max parameters recorded at ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RescaleParams {
    pub column: String,
    pub min: f64,
    pub max: f64,
}

impl RescaleParams {
    /// Model scale -> original units.
    pub fn to_original(&self, x: f64, support: (f64, f64)) -> f64 {
        self.min + (x - support.0) * (self.max - self.min) / (support.1 - support.0)
    }

    /// Jacobian of the model -> original map (densities divide by this).
    pub fn scale_ratio(&self, support: (f64, f64)) -> f64 {
        (self.max - self.min) / (support.1 - support.0)
    }
}

/// Level-name-to-code table for one covariate column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeTable {
    pub column: String,
    /// index = 0-based code
    pub levels: Vec<String>,
}

impl CodeTable {
    pub fn code_of(&self, name: &str) -> Result<u16> {
        self.levels
            .iter()
            .position(|l| l == name)
            .map(|i| i as u16)
            .ok_or_else(|| {
                Error::UnknownLevel(format!(
                    "'{name}' is not a level of '{}' (known: {})",
                    self.column,
                    self.levels.join(", ")
                ))
            })
    }
}

/// Everything ingestion persists so estimates can be mapped back to the
/// original units and labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestInfo {
    pub response_columns: Vec<String>,
    pub covariate_columns: Vec<String>,
    pub support: (f64, f64),
    pub rescaled: bool,
    pub rescale: Vec<RescaleParams>,
    pub covariate_codes: Vec<CodeTable>,
}

impl IngestInfo {
    /// Parse a `col=level,col=level,...` spec into a full combination.
    pub fn parse_combo(&self, spec: &str) -> Result<Vec<u16>> {
        let mut values: Vec<Option<u16>> = vec![None; self.covariate_columns.len()];
        for part in spec.split(',').filter(|s| !s.is_empty()) {
            let (col, level) = part.split_once('=').ok_or_else(|| {
                Error::Data(format!("combination entry '{part}' is not of the form col=level"))
            })?;
            let h = self
                .covariate_columns
                .iter()
                .position(|c| c == col)
                .ok_or_else(|| Error::UnknownLevel(format!("unknown covariate column '{col}'")))?;
            values[h] = Some(self.covariate_codes[h].code_of(level)?);
        }
        values
            .into_iter()
            .enumerate()
            .map(|(h, v)| {
                v.ok_or_else(|| {
                    Error::Data(format!(
                        "combination is missing covariate '{}'",
                        self.covariate_columns[h]
                    ))
                })
            })
            .collect()
    }

    pub fn combo_label(&self, combo: &[u16]) -> String {
        combo
            .iter()
            .enumerate()
            .map(|(h, &c)| {
                format!("{}={}", self.covariate_columns[h], self.covariate_codes[h].levels[c as usize])
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Sort level names numerically when they all parse as integers, otherwise
/// lexicographically. Keeps integer-coded files stable under round trips.
fn sort_levels(mut levels: Vec<String>) -> Vec<String> {
    if levels.iter().all(|s| s.parse::<i64>().is_ok()) {
        levels.sort_by_key(|s| s.parse::<i64>().unwrap());
    } else {
        levels.sort();
    }
    levels
}

/// Read a header CSV, rescale responses to the support, and code covariates.
///
/// With `rescale` false the responses must already lie inside the support;
/// this is the right mode for synthetic data generated on the model scale,
/// where the min-max map would deform the known truth.
pub fn ingest_csv(
    path: &Path,
    response_cols: &[String],
    covariate_cols: &[String],
    support: (f64, f64),
    rescale: bool,
) -> Result<(Dataset, IngestInfo)> {
    if response_cols.is_empty() || covariate_cols.is_empty() {
        return Err(Error::Data("need at least one response and one covariate column".into()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &String| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in {}", path.display())))
    };
    let resp_idx: Vec<usize> = response_cols.iter().map(col_index).collect::<Result<_>>()?;
    let cov_idx: Vec<usize> = covariate_cols.iter().map(col_index).collect::<Result<_>>()?;

    let mut raw_responses: Vec<Vec<f64>> = vec![Vec::new(); resp_idx.len()];
    let mut raw_covariates: Vec<Vec<String>> = vec![Vec::new(); cov_idx.len()];
    let mut bad_rows: Vec<usize> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let mut row_ok = true;
        let mut parsed = Vec::with_capacity(resp_idx.len());
        for &ci in &resp_idx {
            match record.get(ci).map(str::trim) {
                Some(s) if !s.is_empty() => match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => parsed.push(v),
                    _ => row_ok = false,
                },
                _ => row_ok = false,
            }
            if !row_ok {
                break;
            }
        }
        if !row_ok {
            bad_rows.push(row_no + 2); // 1-based, counting the header line
            continue;
        }
        for (l, v) in parsed.into_iter().enumerate() {
            raw_responses[l].push(v);
        }
        for (h, &ci) in cov_idx.iter().enumerate() {
            raw_covariates[h].push(record.get(ci).unwrap_or("").trim().to_string());
        }
    }
    if !bad_rows.is_empty() {
        let shown: Vec<String> = bad_rows.iter().take(20).map(usize::to_string).collect();
        return Err(Error::Data(format!(
            "{} rows with missing or non-numeric responses (rows {}{})",
            bad_rows.len(),
            shown.join(", "),
            if bad_rows.len() > 20 { ", ..." } else { "" }
        )));
    }
    let n = raw_responses[0].len();
    if n == 0 {
        return Err(Error::Data("no data rows".into()));
    }

    let (a, b) = support;
    let mut rescale_params = Vec::with_capacity(resp_idx.len());
    let mut responses = Vec::with_capacity(resp_idx.len());
    for (l, col) in raw_responses.into_iter().enumerate() {
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if rescale {
            if max == min {
                return Err(Error::Data(format!(
                    "response column '{}' is constant; min-max rescaling is undefined",
                    response_cols[l]
                )));
            }
            responses.push(
                col.iter().map(|&x| a + (b - a) * (x - min) / (max - min)).collect::<Vec<f64>>(),
            );
            rescale_params.push(RescaleParams { column: response_cols[l].clone(), min, max });
        } else {
            if min < a || max > b {
                return Err(Error::Data(format!(
                    "response column '{}' has values outside [{a}, {b}] (range [{min}, {max}]); \
                     enable rescaling or widen the support",
                    response_cols[l]
                )));
            }
            responses.push(col);
            // identity map so back-transformation is well defined
            rescale_params.push(RescaleParams { column: response_cols[l].clone(), min: a, max: b });
        }
    }

    let mut codes: Vec<Vec<u16>> = Vec::with_capacity(cov_idx.len());
    let mut level_counts = Vec::with_capacity(cov_idx.len());
    let mut code_tables = Vec::with_capacity(cov_idx.len());
    for (h, col) in raw_covariates.into_iter().enumerate() {
        let mut uniq: Vec<String> = col.iter().cloned().collect::<std::collections::HashSet<_>>().into_iter().collect();
        uniq = sort_levels(uniq);
        let lookup: HashMap<&String, u16> =
            uniq.iter().enumerate().map(|(i, s)| (s, i as u16)).collect();
        codes.push(col.iter().map(|s| lookup[s]).collect());
        level_counts.push(uniq.len());
        code_tables.push(CodeTable { column: covariate_cols[h].clone(), levels: uniq });
    }

    let dataset = Dataset::new(responses, codes, level_counts, support)?;
    let info = IngestInfo {
        response_columns: response_cols.to_vec(),
        covariate_columns: covariate_cols.to_vec(),
        support,
        rescaled: rescale,
        rescale: rescale_params,
        covariate_codes: code_tables,
    };
    Ok((dataset, info))
}

/// Write a dataset as CSV with the given column names; covariate codes are
/// written 1-based. Floats print in shortest round-trip form, so ingesting
/// the file again reproduces the values bit-exactly.
pub fn write_dataset_csv(
    path: &Path,
    ds: &Dataset,
    response_cols: &[String],
    covariate_cols: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = response_cols.to_vec();
    header.extend(covariate_cols.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n_units() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for l in 0..ds.n_coords() {
            rec.push(format!("{}", ds.responses[l][i]));
        }
        for h in 0..ds.layout.n_covariates() {
            rec.push(format!("{}", ds.layout.codes[h][i] + 1));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
