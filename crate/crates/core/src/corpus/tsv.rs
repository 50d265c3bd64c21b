use std::collections::{HashMap, HashSet};
use std::path::Path;

use super::{Argument, Dataset, LabelMatrix, Stance, ValueTaxonomy};
use crate::error::{Error, Result};

const ID_COLUMN: &str = "Argument ID";
const ARGUMENT_COLUMNS: [&str; 4] = [ID_COLUMN, "Conclusion", "Stance", "Premise"];

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_owned(),
            source,
        })
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_owned(),
            source,
        })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_owned(),
        source,
    }
}

/// Reads an arguments TSV. Columns are located by header name.
pub fn load_arguments(path: impl AsRef<Path>) -> Result<Vec<Argument>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(ARGUMENT_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::schema(path, format!("missing column `{name}`")))?;
    }
    let [id_i, conclusion_i, stance_i, premise_i] = index;

    let mut seen = HashSet::new();
    let mut arguments = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(path))?;
        let id = record[id_i].to_owned();
        if id.is_empty() {
            return Err(Error::value(None, format!("empty argument id in {}", path.display())));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::value(Some(&id), "duplicate argument id"));
        }
        let stance = Stance::parse(&record[stance_i])
            .ok_or_else(|| Error::value(Some(&id), format!("unknown stance `{}`", &record[stance_i])))?;
        arguments.push(Argument {
            conclusion: record[conclusion_i].to_owned(),
            premise: record[premise_i].to_owned(),
            stance,
            id,
        });
    }
    Ok(arguments)
}

/// Reads a labels TSV whose columns must follow the taxonomy order exactly.
pub fn load_labels(path: impl AsRef<Path>, taxonomy: &ValueTaxonomy) -> Result<LabelMatrix> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let mut columns = headers.iter();
    match columns.next() {
        Some(h) if h.trim_start_matches('\u{feff}') == ID_COLUMN => {}
        _ => return Err(Error::schema(path, format!("first column must be `{ID_COLUMN}`"))),
    }
    let names: Vec<&str> = columns.collect();
    for name in &names {
        if taxonomy.index_of(name).is_none() {
            return Err(Error::schema(path, format!("column `{name}` is not a value category")));
        }
    }
    if names.len() != taxonomy.len() {
        return Err(Error::schema(
            path,
            format!("expected {} label columns, found {}", taxonomy.len(), names.len()),
        ));
    }
    if let Some((i, name)) = names.iter().enumerate().find(|(i, n)| taxonomy.index_of(n) != Some(*i)) {
        return Err(Error::schema(
            path,
            format!(
                "column {} is `{name}`, expected `{}`",
                i + 1,
                taxonomy.categories()[i].name
            ),
        ));
    }

    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(path))?;
        let id = record[0].to_owned();
        let row = record
            .iter()
            .skip(1)
            .map(|cell| match cell.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::value(Some(&id), format!("non-binary label cell `{other}`"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        ids.push(id);
        rows.push(row);
    }
    LabelMatrix::new(ids, rows, taxonomy.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JoinReport {
    /// Arguments that had no label row.
    pub dropped: usize,
}

/// Aligns label rows to arguments, in argument order.
pub fn join(arguments: Vec<Argument>, labels: &LabelMatrix) -> Result<(Dataset, JoinReport)> {
    let known: HashSet<&str> = arguments.iter().map(|a| a.id.as_str()).collect();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, id) in labels.row_ids().iter().enumerate() {
        if !known.contains(id.as_str()) {
            return Err(Error::Integrity(format!("label row `{id}` has no argument")));
        }
        if by_id.insert(id, i).is_some() {
            return Err(Error::Integrity(format!("label row `{id}` appears twice")));
        }
    }
    let total = arguments.len();
    let mut kept = Vec::with_capacity(labels.len());
    let mut order = Vec::with_capacity(labels.len());
    for a in arguments {
        if let Some(&i) = by_id.get(a.id.as_str()) {
            order.push(i);
            kept.push(a);
        }
    }
    let report = JoinReport {
        dropped: total - kept.len(),
    };
    if report.dropped > 0 {
        log::info!("{} arguments without labels dropped", report.dropped);
    }
    Ok((Dataset::new(kept, labels.select(&order))?, report))
}

/// Loads and joins an arguments file with its labels file.
pub fn load_dataset(
    arguments: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    taxonomy: &ValueTaxonomy,
) -> Result<(Dataset, JoinReport)> {
    let args = load_arguments(arguments)?;
    let labels = load_labels(labels, taxonomy)?;
    join(args, &labels)
}

pub fn write_arguments(path: impl AsRef<Path>, arguments: &[Argument]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(ARGUMENT_COLUMNS).map_err(csv_err(path))?;
    for a in arguments {
        w.write_record([a.id.as_str(), &a.conclusion, a.stance.as_raw(), &a.premise])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMatrix, taxonomy: &ValueTaxonomy) -> Result<()> {
    let path = path.as_ref();
    if labels.num_labels() != taxonomy.len() {
        return Err(Error::contract(format!(
            "label matrix has {} columns, taxonomy {}",
            labels.num_labels(),
            taxonomy.len()
        )));
    }
    let mut w = writer(path)?;
    w.write_record(std::iter::once(ID_COLUMN).chain(taxonomy.names()))
        .map_err(csv_err(path))?;
    for (id, row) in labels.row_ids().iter().zip(labels.rows()) {
        let cells = row.iter().map(|v| if *v == 1 { "1" } else { "0" });
        w.write_record(std::iter::once(id.as_str()).chain(cells))
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
