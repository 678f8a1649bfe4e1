//! Emitted sample points and their NDJSON/CSV encodings.
//!
//! Floats are written in Rust's shortest-roundtrip decimal form, so parsing
//! a written value recovers it bit for bit in both formats.

use crate::model::Orientation;
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};

/// One emitted crossing of the unit lattice: step index `k`, time `t`,
/// position `y` after the crossing, crossing orientation `o`, and the
/// crossing duration `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub k: u64,
    pub t: f64,
    pub y: i64,
    pub o: Orientation,
    pub d: f64,
}

/// Wire form with the orientation as "+"/"-".
#[derive(Serialize, Deserialize)]
struct Wire {
    k: u64,
    t: f64,
    y: i64,
    o: String,
    d: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("record I/O: {0}")]
    Io(#[from] io::Error),
    #[error("record line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordFormat {
    Ndjson,
    Csv,
}

impl RecordFormat {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "ndjson" => Some(RecordFormat::Ndjson),
            "csv" => Some(RecordFormat::Csv),
            _ => None,
        }
    }
}

/// Guesses the format of a data line: JSON objects start with '{'.
pub fn sniff_format(first_line: &str) -> RecordFormat {
    if first_line.trim_start().starts_with('{') {
        RecordFormat::Ndjson
    } else {
        RecordFormat::Csv
    }
}

pub const CSV_HEADER: &str = "k,t,y,o,d";

impl SamplePoint {
    pub fn to_ndjson(&self) -> String {
        serde_json::to_string(&Wire {
            k: self.k,
            t: self.t,
            y: self.y,
            o: self.o.symbol().to_string(),
            d: self.d,
        })
        .expect("record serialization cannot fail")
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.k,
            self.t,
            self.y,
            self.o.symbol(),
            self.d
        )
    }

    pub fn parse_ndjson(line: &str, line_no: usize) -> Result<Self, RecordError> {
        let wire: Wire = serde_json::from_str(line).map_err(|e| RecordError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let o = parse_orientation(&wire.o, line_no)?;
        Ok(SamplePoint {
            k: wire.k,
            t: wire.t,
            y: wire.y,
            o,
            d: wire.d,
        })
    }

    pub fn parse_csv(line: &str, line_no: usize) -> Result<Self, RecordError> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 5 {
            return Err(RecordError::Parse {
                line: line_no,
                msg: format!("expected 5 comma-separated fields, got {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64, RecordError> {
            s.parse::<f64>().map_err(|_| RecordError::Parse {
                line: line_no,
                msg: format!("invalid {what} `{s}`"),
            })
        };
        let k = fields[0].parse::<u64>().map_err(|_| RecordError::Parse {
            line: line_no,
            msg: format!("invalid step index `{}`", fields[0]),
        })?;
        let y = fields[2].parse::<i64>().map_err(|_| RecordError::Parse {
            line: line_no,
            msg: format!("invalid position `{}`", fields[2]),
        })?;
        Ok(SamplePoint {
            k,
            t: num(fields[1], "time")?,
            y,
            o: parse_orientation(fields[3], line_no)?,
            d: num(fields[4], "duration")?,
        })
    }
}

fn parse_orientation(s: &str, line_no: usize) -> Result<Orientation, RecordError> {
    match s {
        "+" => Ok(Orientation::Up),
        "-" => Ok(Orientation::Down),
        _ => Err(RecordError::Parse {
            line: line_no,
            msg: format!("orientation must be `+` or `-`, got `{s}`"),
        }),
    }
}

/// Streaming writer emitting one record per line; CSV output begins with the
/// header row.
pub struct RecordWriter<W: Write> {
    inner: W,
    format: RecordFormat,
    wrote_header: bool,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(inner: W, format: RecordFormat) -> Self {
        RecordWriter {
            inner,
            format,
            wrote_header: false,
        }
    }

    pub fn write(&mut self, point: &SamplePoint) -> Result<(), RecordError> {
        match self.format {
            RecordFormat::Ndjson => writeln!(self.inner, "{}", point.to_ndjson())?,
            RecordFormat::Csv => {
                if !self.wrote_header {
                    writeln!(self.inner, "{CSV_HEADER}")?;
                    self.wrote_header = true;
                }
                writeln!(self.inner, "{}", point.to_csv())?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RecordError> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Reads a whole record stream, sniffing the format from the first
/// non-empty line unless one is given. A leading CSV header row is skipped.
pub fn read_all<R: BufRead>(
    reader: R,
    format: Option<RecordFormat>,
) -> Result<Vec<SamplePoint>, RecordError> {
    let mut points = Vec::new();
    let mut detected = format;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fmt = *detected.get_or_insert_with(|| sniff_format(trimmed));
        match fmt {
            RecordFormat::Ndjson => points.push(SamplePoint::parse_ndjson(trimmed, line_no)?),
            RecordFormat::Csv => {
                if trimmed == CSV_HEADER {
                    continue;
                }
                points.push(SamplePoint::parse_csv(trimmed, line_no)?);
            }
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<SamplePoint> {
        vec![
            SamplePoint {
                k: 1,
                t: 1.0 / 3.0,
                y: 1,
                o: Orientation::Up,
                d: 0.25,
            },
            SamplePoint {
                k: 2,
                t: 1e-300,
                y: 0,
                o: Orientation::Down,
                d: 123_456_789.123_456_79,
            },
            SamplePoint {
                k: 3,
                t: 2.0f64.powi(-40),
                y: -5,
                o: Orientation::Down,
                d: 1.0 + f64::EPSILON,
            },
        ]
    }

    #[test]
    fn ndjson_roundtrip_bit_exact() {
        for p in samples() {
            let line = p.to_ndjson();
            let back = SamplePoint::parse_ndjson(&line, 1).unwrap();
            assert_eq!(p.t.to_bits(), back.t.to_bits());
            assert_eq!(p.d.to_bits(), back.d.to_bits());
            assert_eq!(p, back);
        }
    }

    #[test]
    fn csv_roundtrip_bit_exact() {
        for p in samples() {
            let line = p.to_csv();
            let back = SamplePoint::parse_csv(&line, 1).unwrap();
            assert_eq!(p.t.to_bits(), back.t.to_bits());
            assert_eq!(p.d.to_bits(), back.d.to_bits());
            assert_eq!(p, back);
        }
    }

    #[test]
    fn ndjson_field_order() {
        let line = samples()[0].to_ndjson();
        assert!(line.starts_with("{\"k\":"));
        let keys: Vec<usize> = ["\"k\"", "\"t\"", "\"y\"", "\"o\"", "\"d\""]
            .iter()
            .map(|k| line.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn writer_reader_both_formats() {
        for format in [RecordFormat::Ndjson, RecordFormat::Csv] {
            let mut w = RecordWriter::new(Vec::new(), format);
            for p in samples() {
                w.write(&p).unwrap();
            }
            let bytes = w.into_inner();
            if format == RecordFormat::Csv {
                assert!(bytes.starts_with(CSV_HEADER.as_bytes()));
            }
            let back = read_all(&bytes[..], None).unwrap();
            assert_eq!(back, samples());
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let data = "k,t,y,o,d\n1,0.5,1,+,0.25\n2,0.75,0,?,0.25\n";
        let err = read_all(data.as_bytes(), None).unwrap_err();
        match err {
            RecordError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
