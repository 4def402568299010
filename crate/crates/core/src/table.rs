//! CSV table ingestion and per-column quantization.

use serde::{Deserialize, Serialize};

use crate::quantization::{
    plan_bits_for_tolerance, quantize_kmeans, quantize_uniform, NumericColumn, QuantError,
    QuantizedColumn,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// RFC 4180 CSV with a header row.
    pub fn parse(csv_text: &str) -> Result<Self, QuantError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(csv_text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| QuantError::Table(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| QuantError::Table(e.to_string()))?;
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("write to memory");
        for r in &self.rows {
            w.write_record(r).expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 input")
    }

    /// Columns whose non-empty cells all parse as finite numbers (empty cells are missing).
    pub fn numeric_columns(&self) -> Vec<(usize, NumericColumn)> {
        (0..self.headers.len())
            .filter_map(|j| {
                let mut values = Vec::with_capacity(self.rows.len());
                let mut any = false;
                for row in &self.rows {
                    let cell = row.get(j).map_or("", |c| c.trim());
                    if cell.is_empty() {
                        values.push(None);
                        continue;
                    }
                    match cell.parse::<f64>() {
                        Ok(v) if v.is_finite() => {
                            any = true;
                            values.push(Some(v));
                        }
                        _ => return None,
                    }
                }
                any.then(|| (j, NumericColumn::new(self.headers[j].clone(), values)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum QuantMode {
    #[default]
    Uniform,
    Kmeans,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RenderMode {
    /// Reconstructed values, rounded to a precision the error bound allows.
    #[default]
    Reconstructed,
    /// Raw integer codes.
    Codes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct QuantConfig {
    pub mode: QuantMode,
    pub bits: u32,
    pub k: usize,
    /// When set in uniform mode, the bit width is planned from it.
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub render: RenderMode,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            mode: QuantMode::Uniform,
            bits: 8,
            k: 16,
            tolerance: None,
            seed: 0,
            render: RenderMode::Reconstructed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSidecar {
    pub index: usize,
    #[serde(flatten)]
    pub column: QuantizedColumn,
}

/// Quantization parameters and codes for every numeric column of one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSidecar {
    pub headers: Vec<String>,
    pub columns: Vec<ColumnSidecar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTable {
    pub table: Table,
    pub sidecar: TableSidecar,
}

pub fn quantize_table(table: &Table, config: &QuantConfig) -> Result<QuantizedTable, QuantError> {
    let mut columns = Vec::new();
    if config.mode != QuantMode::Off {
        for (index, col) in table.numeric_columns() {
            let q = match config.mode {
                QuantMode::Uniform => {
                    let bits = match config.tolerance {
                        Some(t) => plan_bits_for_tolerance(&col, t)?,
                        None => config.bits,
                    };
                    quantize_uniform(&col, bits)?
                }
                QuantMode::Kmeans => {
                    let mut distinct: Vec<f64> = col.present().collect();
                    distinct.sort_by(f64::total_cmp);
                    distinct.dedup();
                    quantize_kmeans(&col, config.k.clamp(1, distinct.len()), config.seed)?
                }
                QuantMode::Off => unreachable!(),
            };
            columns.push(ColumnSidecar { index, column: q });
        }
    }
    Ok(QuantizedTable {
        table: table.clone(),
        sidecar: TableSidecar {
            headers: table.headers.clone(),
            columns,
        },
    })
}

/// Fewest decimals (at most 15) at which every rendered cell of a column stays
/// within `bound` of its source value; `None` means render at full precision.
fn render_decimals(pairs: &[(f64, f64)], bound: f64) -> Option<usize> {
    (0..=15).find(|&d| {
        pairs.iter().all(|&(x, v)| {
            format!("{v:.d$}")
                .parse::<f64>()
                .is_ok_and(|r| (r - x).abs() <= bound)
        })
    })
}

impl QuantizedTable {
    /// The table as it goes into the prompt. Reconstructed values are rounded
    /// as far as possible without exceeding the column's error bound.
    pub fn render(&self, mode: RenderMode) -> Result<String, QuantError> {
        let mut out = self.table.clone();
        for c in &self.sidecar.columns {
            let decoded = c.column.dequantize()?;
            let pairs: Vec<(f64, f64)> = self
                .table
                .rows
                .iter()
                .zip(&decoded.values)
                .filter_map(|(row, v)| {
                    let x = row.get(c.index)?.trim().parse::<f64>().ok()?;
                    Some((x, (*v)?))
                })
                .collect();
            let bound = match c.column.max_error() {
                Some(e) => e,
                None => pairs.iter().map(|(x, v)| (x - v).abs()).fold(0.0, f64::max),
            };
            let decimals = render_decimals(&pairs, bound);
            for (row, (code, value)) in out
                .rows
                .iter_mut()
                .zip(c.column.codes.iter().zip(&decoded.values))
            {
                let cell = match (mode, code, value) {
                    (_, None, _) | (_, _, None) => continue,
                    (RenderMode::Codes, Some(code), _) => code.to_string(),
                    (RenderMode::Reconstructed, _, Some(v)) => match decimals {
                        Some(d) => format!("{v:.d$}"),
                        None => format!("{v}"),
                    },
                };
                if let Some(slot) = row.get_mut(c.index) {
                    *slot = cell;
                }
            }
        }
        Ok(out.to_csv())
    }
}

/// Rebuilds a table from its rendered form plus sidecar, writing full-precision
/// reconstructed values into the numeric columns.
pub fn reconstruct_table(rendered_csv: &str, sidecar: &TableSidecar) -> Result<Table, QuantError> {
    let mut table = Table::parse(rendered_csv)?;
    if table.headers != sidecar.headers {
        return Err(QuantError::Table("sidecar headers do not match table".into()));
    }
    for c in &sidecar.columns {
        let decoded = c.column.dequantize()?;
        if decoded.values.len() != table.rows.len() {
            return Err(QuantError::Table(format!(
                "column {:?} has {} codes for {} rows",
                c.column.name,
                decoded.values.len(),
                table.rows.len()
            )));
        }
        for (row, v) in table.rows.iter_mut().zip(&decoded.values) {
            if let (Some(slot), Some(v)) = (row.get_mut(c.index), v) {
                *slot = format!("{v}");
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::QuantParams;

    const CSV: &str = "item,2023,2024,note\nRevenue,1200.5,1350.25,up\nCost,,900.75,\"flat, mostly\"\nNet,480.125,449.5,down\n";

    #[test]
    fn detects_numeric_columns_with_missing_cells() {
        let t = Table::parse(CSV).unwrap();
        let cols = t.numeric_columns();
        let idx: Vec<usize> = cols.iter().map(|(i, _)| *i).collect();
        assert_eq!(idx, [1, 2]);
        assert_eq!(cols[0].1.missing_mask(), [false, true, false]);
    }

    #[test]
    fn rendered_values_stay_within_bound() {
        let t = Table::parse(CSV).unwrap();
        let q = quantize_table(&t, &QuantConfig { bits: 4, ..Default::default() }).unwrap();
        let rendered = Table::parse(&q.render(RenderMode::Reconstructed).unwrap()).unwrap();
        assert_eq!(rendered.rows[1][3], "flat, mostly");
        assert_eq!(rendered.rows[1][1], "");
        for c in &q.sidecar.columns {
            let eps = c.column.max_error().unwrap();
            for (orig, new) in t.rows.iter().zip(&rendered.rows) {
                if orig[c.index].is_empty() {
                    continue;
                }
                let a: f64 = orig[c.index].parse().unwrap();
                let b: f64 = new[c.index].parse().unwrap();
                assert!((a - b).abs() <= eps, "{a} vs {b} > {eps}");
            }
        }
    }

    #[test]
    fn codes_rendering_and_reconstruction() {
        let t = Table::parse(CSV).unwrap();
        let q = quantize_table(&t, &QuantConfig { bits: 2, ..Default::default() }).unwrap();
        let codes = q.render(RenderMode::Codes).unwrap();
        let ct = Table::parse(&codes).unwrap();
        assert_eq!(ct.rows[0][1], "3");
        let back = reconstruct_table(&codes, &q.sidecar).unwrap();
        assert_eq!(back.rows[0][1], "1200.5");
        assert_eq!(back.rows[2][1], "480.125");
    }

    #[test]
    fn tolerance_plans_bits() {
        let t = Table::parse("x\n0\n10\n").unwrap();
        let q = quantize_table(&t, &QuantConfig { tolerance: Some(0.01), ..Default::default() }).unwrap();
        match &q.sidecar.columns[0].column.params {
            QuantParams::Uniform(p) => assert_eq!(p.bits, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn off_mode_leaves_table_untouched() {
        let t = Table::parse(CSV).unwrap();
        let q = quantize_table(&t, &QuantConfig { mode: QuantMode::Off, ..Default::default() }).unwrap();
        assert!(q.sidecar.columns.is_empty());
        assert_eq!(q.render(RenderMode::Reconstructed).unwrap(), t.to_csv());
    }

    #[test]
    fn kmeans_mode_clamps_k() {
        let t = Table::parse("x\n1\n1\n2\n").unwrap();
        let q = quantize_table(&t, &QuantConfig { mode: QuantMode::Kmeans, k: 16, ..Default::default() }).unwrap();
        let rendered = q.render(RenderMode::Reconstructed).unwrap();
        assert_eq!(rendered, "x\n1\n1\n2\n");
    }
}
