use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Attributes, Event, EventLog, EventLogError, Schema, Trace, Value, ValueType};

/// Column roles and parsing options for a CSV event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvFormat {
    pub case_id: String,
    pub activity: String,
    pub timestamp: String,
    /// Columns describing the whole case rather than a single event.
    pub trace_attributes: BTreeSet<String>,
    /// Columns to skip entirely.
    pub ignore: BTreeSet<String>,
    /// chrono format string; ISO-8601 variants are accepted when unset.
    pub timestamp_format: Option<String>,
    pub delimiter: char,
}

impl Default for CsvFormat {
    fn default() -> Self {
        CsvFormat {
            case_id: "case_id".into(),
            activity: "activity".into(),
            timestamp: "timestamp".into(),
            trace_attributes: BTreeSet::new(),
            ignore: BTreeSet::new(),
            timestamp_format: None,
            delimiter: ',',
        }
    }
}

impl CsvFormat {
    pub fn with_trace_attributes<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.trace_attributes = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_timestamp_format(mut self, fmt: &str) -> Self {
        self.timestamp_format = Some(fmt.to_string());
        self
    }

    fn parse_timestamp(&self, raw: &str) -> Option<DateTime<Utc>> {
        let ts = match &self.timestamp_format {
            Some(fmt) => NaiveDateTime::parse_from_str(raw, fmt)
                .map(|n| n.and_utc())
                .or_else(|_| NaiveDate::parse_from_str(raw, fmt).map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc()))
                .or_else(|_| DateTime::parse_from_str(raw, fmt).map(|d| d.with_timezone(&Utc)))
                .ok()?,
            None => parse_iso(raw)?,
        };
        DateTime::from_timestamp_millis(ts.timestamp_millis())
    }
}

fn parse_iso(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(n) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(n.and_utc());
        }
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f%:z", "%Y-%m-%d %H:%M:%S%.f%z"] {
        if let Ok(dt) = DateTime::parse_from_str(raw, fmt) {
            return Some(dt.with_timezone(&Utc));
        }
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").ok().map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc())
}

/// Parses a CSV event log. Traces appear in order of first occurrence of
/// their case id; events within a trace are sorted by timestamp.
pub fn parse_log<R: Read>(source: R, format: &CsvFormat) -> Result<EventLog, EventLogError> {
    let mut reader =
        csv::ReaderBuilder::new().delimiter(format.delimiter as u8).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| EventLogError::MissingColumn(name.to_string()))
    };
    let (case_col, act_col, ts_col) = (column(&format.case_id)?, column(&format.activity)?, column(&format.timestamp)?);
    for name in &format.trace_attributes {
        column(name)?;
    }
    let attr_cols: Vec<(usize, &str)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| ![case_col, act_col, ts_col].contains(i) && !format.ignore.contains(*h))
        .collect();

    let rows: Vec<(u64, csv::StringRecord)> = reader
        .records()
        .map(|r| r.map(|rec| (rec.position().map_or(0, |p| p.line()), rec)))
        .collect::<Result<_, _>>()?;

    let mut types = HashMap::new();
    for &(col, name) in &attr_cols {
        let cells = rows.iter().filter_map(|(_, r)| r.get(col)).filter(|c| !c.is_empty());
        if let Some(ty) = ValueType::infer(cells) {
            types.insert(col, (name, ty));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut cases: HashMap<String, (Vec<Event>, Attributes)> = HashMap::new();
    for (line, rec) in &rows {
        let field = |col: usize, name: &str| -> Result<&str, EventLogError> {
            match rec.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(EventLogError::EmptyField { line: *line, column: name.to_string() }),
            }
        };
        let case_id = field(case_col, &format.case_id)?;
        let activity = field(act_col, &format.activity)?;
        let raw_ts = field(ts_col, &format.timestamp)?;
        let timestamp = format
            .parse_timestamp(raw_ts)
            .ok_or_else(|| EventLogError::Timestamp { line: *line, value: raw_ts.to_string() })?;

        let entry = cases.entry(case_id.to_string()).or_insert_with(|| {
            order.push(case_id.to_string());
            (Vec::new(), Attributes::new())
        });
        let mut event = Event::new(activity, timestamp);
        for &(col, _) in &attr_cols {
            let Some(&(name, ty)) = types.get(&col) else { continue };
            let cell = rec.get(col).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let value = Value::parse_as(cell, ty).ok_or_else(|| EventLogError::Cell {
                line: *line,
                column: name.to_string(),
                value: cell.to_string(),
                expected: ty,
            })?;
            if format.trace_attributes.contains(name) {
                entry.1.entry(name.to_string()).or_insert(value);
            } else {
                event.payload.insert(name.to_string(), value);
            }
        }
        entry.0.push(event);
    }

    let traces = order
        .into_iter()
        .map(|id| {
            let (events, attrs) = cases.remove(&id).expect("case recorded in order");
            Trace::new(id, events, attrs)
        })
        .collect();
    Ok(EventLog::new(traces))
}

/// Writes `log` as CSV and returns the format that reads it back.
pub fn write_log<W: Write>(log: &EventLog, sink: W) -> Result<CsvFormat, EventLogError> {
    let schema = if log.schema == Schema::default() { Schema::of(&log.traces) } else { log.schema.clone() };
    let format = CsvFormat::default().with_trace_attributes(schema.trace.keys().cloned());
    let reserved = [&format.case_id, &format.activity, &format.timestamp];
    for name in schema.trace.keys().chain(schema.event.keys()) {
        if reserved.contains(&name) || (schema.trace.contains_key(name) && schema.event.contains_key(name)) {
            return Err(EventLogError::AttributeClash(name.clone()));
        }
    }
    let columns: Vec<&String> = schema.trace.keys().chain(schema.event.keys()).collect();
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec![format.case_id.as_str(), format.activity.as_str(), format.timestamp.as_str()];
    header.extend(columns.iter().map(|c| c.as_str()));
    writer.write_record(&header)?;
    for trace in &log.traces {
        for event in &trace.events {
            let mut row = vec![
                trace.case_id.clone(),
                event.activity.clone(),
                event.timestamp.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
            ];
            for &col in &columns {
                let value = trace.attrs.get(col).or_else(|| event.payload.get(col));
                row.push(value.map(Value::to_cell).unwrap_or_default());
            }
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    const WORKED_EXAMPLE: &str = "case,activity,time,amount\n\
        F1,Create fine,13/1/21,40\n\
        F1,Send fine,24/1/21,40\n\
        F1,Add penalty,18/3/21,60\n\
        F1,Payment,25/7/21,60\n";

    fn worked_format() -> CsvFormat {
        CsvFormat { case_id: "case".into(), timestamp: "time".into(), ..CsvFormat::default() }
            .with_timestamp_format("%d/%m/%y")
    }

    #[test]
    fn parses_worked_trace_in_order() {
        let log = parse_log(WORKED_EXAMPLE.as_bytes(), &worked_format()).unwrap();
        assert_eq!(log.len(), 1);
        let t = &log.traces[0];
        assert_eq!(t.variant(), ["Create fine", "Send fine", "Add penalty", "Payment"]);
        assert_eq!(t.events[0].timestamp, Utc.with_ymd_and_hms(2021, 1, 13, 0, 0, 0).unwrap());
        assert_eq!(t.events[2].payload["amount"], Value::Int(60));
        assert_eq!(log.schema.event["amount"], ValueType::Int);
    }

    #[test]
    fn single_case_grouping() {
        let csv = "case_id,activity,timestamp\nA1,a,2021-01-01T00:00:00Z\nA1,b,2021-01-02T00:00:00Z\n\
                   A1,c,2021-01-03 10:00:00\nA1,d,2021-01-04\n";
        let log = parse_log(csv.as_bytes(), &CsvFormat::default()).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.event_count(), 4);
    }

    #[test]
    fn empty_body_gives_empty_log() {
        let log = parse_log("case_id,activity,timestamp\n".as_bytes(), &CsvFormat::default()).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn malformed_timestamp_names_line() {
        let csv = "case_id,activity,timestamp\nA,a,2021-01-01\nA,b,yesterday\n";
        match parse_log(csv.as_bytes(), &CsvFormat::default()) {
            Err(EventLogError::Timestamp { line, value }) => {
                assert_eq!(line, 3);
                assert_eq!(value, "yesterday");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "case_id,timestamp\nA,2021-01-01\n";
        assert!(matches!(
            parse_log(csv.as_bytes(), &CsvFormat::default()),
            Err(EventLogError::MissingColumn(c)) if c == "activity"
        ));
    }

    #[test]
    fn trace_attributes_and_delimiter() {
        let csv =
            "case_id;activity;timestamp;AMOUNT_REQ;note\nL1;A_SUBMITTED;2012-01-01;10000;x\nL1;O_SENT;2012-01-02;;\n";
        let fmt = CsvFormat { delimiter: ';', ..CsvFormat::default() }.with_trace_attributes(["AMOUNT_REQ"]);
        let log = parse_log(csv.as_bytes(), &fmt).unwrap();
        let t = &log.traces[0];
        assert_eq!(t.attrs["AMOUNT_REQ"], Value::Int(10000));
        assert_eq!(t.events[0].payload["note"], Value::Text("x".into()));
        assert!(t.events[1].payload.is_empty());
    }

    #[test]
    fn interleaved_cases_keep_first_seen_order() {
        let csv = "case_id,activity,timestamp\nB,x,2021-01-02\nA,y,2021-01-01\nB,z,2021-01-01\n";
        let log = parse_log(csv.as_bytes(), &CsvFormat::default()).unwrap();
        assert_eq!(log.traces[0].case_id, "B");
        assert_eq!(log.traces[0].variant(), ["z", "x"]);
    }
}
