use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::schema::{Column, ColumnKind, RawDataset, RawValue, Schema};
use crate::error::{Error, Result};

/// Kind override for [`CsvOptions`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindHint {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, Default)]
pub struct CsvOptions {
    /// Target column; the last column when unset.
    pub target: Option<String>,
    pub kinds: HashMap<String, KindHint>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(r) => r
            .map_err(|e| parse_err(origin, 1, e.to_string()))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect(),
        None => return Err(parse_err(origin, 1, "empty file, expected a header row")),
    };
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(origin, line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(
                origin,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let row: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
        if let Some(c) = row.iter().position(String::is_empty) {
            return Err(parse_err(
                origin,
                line,
                format!("missing value in column `{}`", header[c]),
            ));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn parse_err(origin: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line,
        message: message.into(),
    }
}

/// Sorted distinct labels, numerically when every label parses as a number.
fn ordered_labels(values: impl Iterator<Item = String>) -> Vec<String> {
    let uniq: BTreeSet<String> = values.collect();
    let mut v: Vec<String> = uniq.into_iter().collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    }
    v
}

/// Loads a CSV file, inferring column kinds.
///
/// A column whose every value parses as a number is numeric, anything else
/// is categorical with a sorted vocabulary.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<RawDataset> {
    let path = path.as_ref();
    let table = read_table(path)?;
    infer(table, opts, &path.display().to_string())
}

pub fn parse_csv_str(text: &str, opts: &CsvOptions) -> Result<RawDataset> {
    let table = parse_table(text, "<string>")?;
    infer(table, opts, "<string>")
}

fn infer(table: Table, opts: &CsvOptions, origin: &str) -> Result<RawDataset> {
    let target = opts
        .target
        .clone()
        .or_else(|| table.header.last().cloned())
        .ok_or_else(|| Error::Schema("no columns".into()))?;
    let t_idx = table
        .header
        .iter()
        .position(|h| *h == target)
        .ok_or_else(|| Error::MissingColumn(target.clone()))?;
    let classes = ordered_labels(table.rows.iter().map(|r| r[t_idx].clone()));

    let mut columns = Vec::new();
    for (j, name) in table.header.iter().enumerate() {
        if j == t_idx {
            continue;
        }
        let numeric_ok = table.rows.iter().all(|r| r[j].parse::<f64>().is_ok());
        let kind = match opts.kinds.get(name) {
            Some(KindHint::Numeric) => {
                if let Some(i) = table.rows.iter().position(|r| r[j].parse::<f64>().is_err()) {
                    return Err(parse_err(
                        origin,
                        i + 2,
                        format!("column `{name}`: cannot parse `{}` as a number", table.rows[i][j]),
                    ));
                }
                ColumnKind::Numeric
            }
            Some(KindHint::Categorical) => ColumnKind::Categorical {
                categories: sorted_vocab(&table, j),
            },
            None if numeric_ok => ColumnKind::Numeric,
            None => ColumnKind::Categorical {
                categories: sorted_vocab(&table, j),
            },
        };
        columns.push(Column {
            name: name.clone(),
            kind,
        });
    }
    let schema = Schema::new(columns, target, classes)?;
    rows_with_schema(table, schema, origin)
}

fn sorted_vocab(table: &Table, j: usize) -> Vec<String> {
    let set: BTreeSet<&str> = table.rows.iter().map(|r| r[j].as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

/// Loads a CSV against a known schema (for example one stored in a model).
///
/// Columns are matched by name; categorical values are kept verbatim and
/// only checked against the vocabulary at encoding time.
pub fn load_csv_with_schema(path: impl AsRef<Path>, schema: &Schema) -> Result<RawDataset> {
    let path = path.as_ref();
    let table = read_table(path)?;
    rows_with_schema(table, schema.clone(), &path.display().to_string())
}

fn rows_with_schema(table: Table, schema: Schema, origin: &str) -> Result<RawDataset> {
    let mut col_idx = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let j = table
            .header
            .iter()
            .position(|h| *h == c.name)
            .ok_or_else(|| Error::MissingColumn(c.name.clone()))?;
        col_idx.push(j);
    }
    let t_idx = table
        .header
        .iter()
        .position(|h| *h == schema.target)
        .ok_or_else(|| Error::MissingColumn(schema.target.clone()))?;
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut labels = Vec::with_capacity(table.rows.len());
    for (i, r) in table.rows.iter().enumerate() {
        let line = i + 2;
        let mut row = Vec::with_capacity(col_idx.len());
        for (c, &j) in schema.columns.iter().zip(&col_idx) {
            let cell = &r[j];
            row.push(match c.kind {
                ColumnKind::Numeric => RawValue::Num(cell.parse::<f64>().map_err(|_| {
                    parse_err(
                        origin,
                        line,
                        format!("column `{}`: cannot parse `{cell}` as a number", c.name),
                    )
                })?),
                ColumnKind::Categorical { .. } => RawValue::Cat(cell.clone()),
            });
        }
        let label = schema.class_index(&r[t_idx]).ok_or_else(|| {
            parse_err(
                origin,
                line,
                format!("unknown class label `{}`", r[t_idx]),
            )
        })?;
        rows.push(row);
        labels.push(label);
    }
    Ok(RawDataset {
        schema,
        rows,
        labels,
    })
}

/// Writes features then the target column, header first.
pub fn write_csv(path: impl AsRef<Path>, data: &RawDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<&str> = data.schema.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(&data.schema.target);
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (row, &y) in data.rows.iter().zip(&data.labels) {
        let mut rec: Vec<String> = row.iter().map(RawValue::to_string).collect();
        rec.push(data.schema.classes[y].clone());
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
