use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Measured channels of a battery table, in canonical output order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Column {
    #[serde(rename = "time_s")]
    Time,
    #[serde(rename = "voltage_V")]
    Voltage,
    #[serde(rename = "current_A")]
    Current,
    #[serde(rename = "temperature_C")]
    Temperature,
    #[serde(rename = "capacity_Ah")]
    Capacity,
}

impl Column {
    pub const ALL: [Column; 5] = [
        Column::Time,
        Column::Voltage,
        Column::Current,
        Column::Temperature,
        Column::Capacity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::Time => "time_s",
            Column::Voltage => "voltage_V",
            Column::Current => "current_A",
            Column::Temperature => "temperature_C",
            Column::Capacity => "capacity_Ah",
        }
    }

    pub fn from_name(name: &str) -> Option<Column> {
        Column::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const CYCLE_ID: &str = "cycle_id";

/// Forecast target variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Voltage,
    Capacity,
}

impl Target {
    pub fn column(self) -> Column {
        match self {
            Target::Voltage => Column::Voltage,
            Target::Capacity => Column::Capacity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Voltage => "voltage",
            Target::Capacity => "capacity",
        }
    }

    pub fn parse(s: &str) -> Option<Target> {
        match s {
            "voltage" => Some(Target::Voltage),
            "capacity" => Some(Target::Capacity),
            _ => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Marks a table as model-generated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

/// Battery measurements: equal-length columns plus optional cycle ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    columns: BTreeMap<Column, Vec<f64>>,
    cycle_id: Option<Vec<i64>>,
    pub source: String,
    pub provenance: Option<Provenance>,
}

impl SeriesTable {
    /// Builds a table, checking equal lengths (at least 2), finiteness, and
    /// strictly increasing `time_s` within each cycle.
    pub fn new(
        columns: BTreeMap<Column, Vec<f64>>,
        cycle_id: Option<Vec<i64>>,
        source: impl Into<String>,
    ) -> Result<Self, DataError> {
        let time = columns
            .get(&Column::Time)
            .ok_or_else(|| DataError::AbsentColumn(Column::Time.name().into()))?;
        let len = time.len();
        for (c, v) in &columns {
            if v.len() != len {
                return Err(DataError::Ragged(format!("{c} has {} rows, time_s has {len}", v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(DataError::BadValue {
                    row: i + 1,
                    column: c.name().into(),
                    value: v[i].to_string(),
                });
            }
        }
        if let Some(ids) = &cycle_id {
            if ids.len() != len {
                return Err(DataError::Ragged(format!("cycle_id has {} rows, time_s has {len}", ids.len())));
            }
        }
        if len < 2 {
            return Err(DataError::TooShort(len));
        }
        for i in 1..len {
            let same_cycle = cycle_id.as_ref().map_or(true, |ids| ids[i] == ids[i - 1]);
            if same_cycle && time[i] <= time[i - 1] {
                return Err(DataError::NonMonotoneTime { row: i + 1 });
            }
        }
        Ok(Self {
            columns,
            cycle_id,
            source: source.into(),
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.columns[&Column::Time].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has(&self, c: Column) -> bool {
        self.columns.contains_key(&c)
    }

    pub fn column(&self, c: Column) -> Option<&[f64]> {
        self.columns.get(&c).map(Vec::as_slice)
    }

    pub fn require(&self, c: Column) -> Result<&[f64], DataError> {
        self.column(c).ok_or_else(|| DataError::AbsentColumn(c.name().into()))
    }

    pub fn columns(&self) -> impl Iterator<Item = (Column, &[f64])> {
        self.columns.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn cycle_id(&self) -> Option<&[i64]> {
        self.cycle_id.as_deref()
    }

    /// Replaces (or adds) a column of the same length.
    pub fn set_column(&mut self, c: Column, values: Vec<f64>) -> Result<(), DataError> {
        if values.len() != self.len() {
            return Err(DataError::Ragged(format!("{c} has {} rows, table has {}", values.len(), self.len())));
        }
        if c == Column::Time {
            let mut cols = self.columns.clone();
            cols.insert(c, values);
            *self = SeriesTable::new(cols, self.cycle_id.clone(), self.source.clone())?;
            return Ok(());
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(DataError::BadValue {
                row: i + 1,
                column: c.name().into(),
                value: values[i].to_string(),
            });
        }
        self.columns.insert(c, values);
        Ok(())
    }

    /// Contiguous row ranges sharing one cycle id (the whole table when there
    /// are no cycle ids).
    pub fn segments(&self) -> Vec<Range<usize>> {
        let len = self.len();
        match &self.cycle_id {
            None => vec![0..len],
            Some(ids) => {
                let mut out = Vec::new();
                let mut start = 0;
                for i in 1..=len {
                    if i == len || ids[i] != ids[i - 1] {
                        out.push(start..i);
                        start = i;
                    }
                }
                out
            }
        }
    }

    /// Snaps a column to a fixed grid (e.g. 0.1 V resolution).
    pub fn quantized(&self, c: Column, step: f64) -> Result<Self, DataError> {
        if !(step > 0.0) {
            return Err(DataError::Invalid(format!("quantization step must be positive, got {step}")));
        }
        let mut out = self.clone();
        let v = self.require(c)?.iter().map(|x| (x / step).round() * step).collect();
        out.set_column(c, v)?;
        Ok(out)
    }

    /// Writes the table as CSV with canonical headers. A provenance comment
    /// line is emitted first for synthetic tables.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        if let Some(p) = &self.provenance {
            writeln!(w, "# synthetic=true,generator={},seed={}", p.generator, p.seed).map_err(|e| DataError::Io {
                path: self.source.clone(),
                source: e,
            })?;
        }
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = self.columns.keys().map(|c| c.name()).collect();
        if self.cycle_id.is_some() {
            header.push(CYCLE_ID);
        }
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.columns.values().map(|v| v[i].to_string()).collect();
            if let Some(ids) = &self.cycle_id {
                rec.push(ids[i].to_string());
            }
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| DataError::Io {
            path: self.source.clone(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Maps canonical column names (`time_s`, `voltage_V`, ..., `cycle_id`) to
/// file headers. An empty map means "use canonical headers that are present".
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchemaMap(pub BTreeMap<String, String>);

impl SchemaMap {
    pub fn auto() -> Self {
        Self::default()
    }

    pub fn is_auto(&self) -> bool {
        self.0.is_empty()
    }
}

/// CSV ingestion options.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub schema: SchemaMap,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            schema: SchemaMap::auto(),
        }
    }
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::BadValue {
            row,
            column: column.into(),
            value: raw.into(),
        })
}

/// Reads a battery CSV. Row numbers in errors count data rows from 1
/// (the header is not counted). Lines starting with `#` are skipped.
pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions, source: &str) -> Result<SeriesTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |h: &str| headers.iter().position(|x| x == h);

    let mut wanted: Vec<(String, usize)> = Vec::new();
    if opts.schema.is_auto() {
        for c in Column::ALL {
            if let Some(i) = find(c.name()) {
                wanted.push((c.name().into(), i));
            }
        }
        if let Some(i) = find(CYCLE_ID) {
            wanted.push((CYCLE_ID.into(), i));
        }
    } else {
        for (canonical, header) in &opts.schema.0 {
            if canonical != CYCLE_ID && Column::from_name(canonical).is_none() {
                return Err(DataError::Invalid(format!("unknown canonical column {canonical:?} in schema map")));
            }
            let i = find(header).ok_or_else(|| DataError::MissingColumn {
                column: canonical.clone(),
                header: header.clone(),
            })?;
            wanted.push((canonical.clone(), i));
        }
    }
    if !wanted.iter().any(|(c, _)| c == Column::Time.name()) {
        let header = opts.schema.0.get(Column::Time.name()).cloned().unwrap_or_else(|| "time_s".into());
        return Err(DataError::MissingColumn {
            column: Column::Time.name().into(),
            header,
        });
    }

    let mut columns: BTreeMap<Column, Vec<f64>> = BTreeMap::new();
    let mut cycles: Option<Vec<i64>> = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        for (canonical, idx) in &wanted {
            let raw = rec.get(*idx).unwrap_or("");
            let v = parse_number(raw, row, canonical)?;
            if canonical == CYCLE_ID {
                if v.fract() != 0.0 {
                    return Err(DataError::BadValue {
                        row,
                        column: CYCLE_ID.into(),
                        value: raw.into(),
                    });
                }
                cycles.get_or_insert_with(Vec::new).push(v as i64);
            } else {
                let c = Column::from_name(canonical).expect("validated above");
                columns.entry(c).or_default().push(v);
            }
        }
    }
    if columns.values().next().map_or(0, Vec::len) == 0 {
        return Err(DataError::TooShort(0));
    }
    SeriesTable::new(columns, cycles, source)
}

/// Loads a CSV file from disk.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<SeriesTable, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut t = read_csv(std::io::BufReader::new(f), opts, &path.display().to_string())?;
    t.source = path.display().to_string();
    Ok(t)
}
