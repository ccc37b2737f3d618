//! Detection records and their on-disk encodings.
//!
//! Binary (`PDR1`), little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PDR1"
//! 4       4     version (u32) = 1
//! 8       8     record count (u64)
//! 16      13*n  records: trial_index u64 | detector_id u8 | offset_ns u32
//! ```
//!
//! CSV: header `trial_index,detector,offset_ns`, detector by name.

use std::fmt;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::DetectionMode;

pub const MAGIC: &[u8; 4] = b"PDR1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 16;
pub const RECORD_LEN: u64 = 13;
pub const CSV_HEADER: &str = "trial_index,detector,offset_ns";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum DetectorId {
    D1 = 0,
    D2 = 1,
    D2a = 2,
    D2b = 3,
}

impl DetectorId {
    pub fn from_u8(id: u8) -> Option<Self> {
        match id {
            0 => Some(DetectorId::D1),
            1 => Some(DetectorId::D2),
            2 => Some(DetectorId::D2a),
            3 => Some(DetectorId::D2b),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorId::D1 => "D1",
            DetectorId::D2 => "D2",
            DetectorId::D2a => "D2a",
            DetectorId::D2b => "D2b",
        }
    }

    /// Whether this detector exists in the given layout.
    pub fn belongs_to(self, mode: DetectionMode) -> bool {
        match self {
            DetectorId::D1 => true,
            DetectorId::D2 => mode == DetectionMode::Single,
            DetectorId::D2a | DetectorId::D2b => mode == DetectionMode::Split,
        }
    }
}

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "D1" => Ok(DetectorId::D1),
            "D2" => Ok(DetectorId::D2),
            "D2a" => Ok(DetectorId::D2a),
            "D2b" => Ok(DetectorId::D2b),
            other => Err(Error::param("detector", format!("unknown detector `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub trial_index: u64,
    pub detector: DetectorId,
    pub offset_ns: u32,
}

/// Records of one session, ordered by trial then detector.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordStream {
    pub mode: DetectionMode,
    pub n_trials: u64,
    pub records: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Binary,
    Csv,
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bin" | "binary" => Ok(RecordFormat::Binary),
            "csv" => Ok(RecordFormat::Csv),
            other => Err(Error::param("format", format!("expected bin|csv, got `{other}`"))),
        }
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Serializes `records`; returns the number of bytes written. On failure the
/// error carries how many bytes reached the sink.
pub fn write_records<W: Write>(records: &[DetectionRecord], sink: W, format: RecordFormat) -> Result<u64> {
    let mut out = BufWriter::new(CountingWriter {
        inner: sink,
        written: 0,
    });
    let res = match format {
        RecordFormat::Binary => write_binary(records, &mut out),
        RecordFormat::Csv => write_csv(records, &mut out),
    }
    .and_then(|_| out.flush());
    match res {
        Ok(()) => Ok(out.get_ref().written),
        Err(source) => Err(Error::PartialWrite {
            written: out.get_ref().written,
            source,
        }),
    }
}

fn write_binary<W: Write>(records: &[DetectionRecord], out: &mut W) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    let mut buf = [0u8; RECORD_LEN as usize];
    for r in records {
        buf[0..8].copy_from_slice(&r.trial_index.to_le_bytes());
        buf[8] = r.detector as u8;
        buf[9..13].copy_from_slice(&r.offset_ns.to_le_bytes());
        out.write_all(&buf)?;
    }
    Ok(())
}

fn write_csv<W: Write>(records: &[DetectionRecord], out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{}", r.trial_index, r.detector, r.offset_ns)?;
    }
    Ok(())
}

fn read_full<R: Read>(src: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Streaming reader over a `PDR1` file.
pub struct BinaryRecordReader<R> {
    src: R,
    remaining: u64,
    offset: u64,
    done: bool,
}

impl<R: Read> BinaryRecordReader<R> {
    pub fn new(mut src: R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN as usize];
        let got = read_full(&mut src, &mut header)?;
        if got < 4 || &header[0..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected PDR1".into(),
            });
        }
        if got < HEADER_LEN as usize {
            return Err(Error::Format {
                offset: got as u64,
                reason: "truncated header".into(),
            });
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
        Ok(BinaryRecordReader {
            src,
            remaining: count,
            offset: HEADER_LEN,
            done: false,
        })
    }

    /// Records still expected according to the header.
    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn next_record(&mut self) -> Result<Option<DetectionRecord>> {
        let mut buf = [0u8; RECORD_LEN as usize];
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            if read_full(&mut self.src, &mut probe)? != 0 {
                return Err(Error::Format {
                    offset: self.offset,
                    reason: "trailing bytes after the declared records".into(),
                });
            }
            return Ok(None);
        }
        let got = read_full(&mut self.src, &mut buf)?;
        if got < buf.len() {
            return Err(Error::Format {
                offset: self.offset,
                reason: format!("truncated record ({got} of {RECORD_LEN} bytes)"),
            });
        }
        let detector = DetectorId::from_u8(buf[8]).ok_or_else(|| Error::Format {
            offset: self.offset + 8,
            reason: format!("unknown detector id {}", buf[8]),
        })?;
        let rec = DetectionRecord {
            trial_index: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            detector,
            offset_ns: u32::from_le_bytes(buf[9..13].try_into().unwrap()),
        };
        self.offset += RECORD_LEN;
        self.remaining -= 1;
        Ok(Some(rec))
    }
}

impl<R: Read> Iterator for BinaryRecordReader<R> {
    type Item = Result<DetectionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Streaming reader over the CSV encoding.
pub struct CsvRecordReader<R> {
    lines: io::Split<BufReader<R>>,
    offset: u64,
    header_seen: bool,
    done: bool,
}

impl<R: Read> CsvRecordReader<R> {
    pub fn new(src: R) -> Self {
        CsvRecordReader {
            lines: BufReader::new(src).split(b'\n'),
            offset: 0,
            header_seen: false,
            done: false,
        }
    }

    fn parse_line(&self, line: &str) -> Result<DetectionRecord> {
        let bad = |reason: String| Error::Format {
            offset: self.offset,
            reason,
        };
        let mut fields = line.trim_end_matches('\r').split(',');
        let (Some(t), Some(d), Some(o), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad(format!("expected 3 fields in `{line}`")));
        };
        Ok(DetectionRecord {
            trial_index: t.parse().map_err(|_| bad(format!("bad trial_index `{t}`")))?,
            detector: d.parse().map_err(|_| bad(format!("bad detector `{d}`")))?,
            offset_ns: o.parse().map_err(|_| bad(format!("bad offset_ns `{o}`")))?,
        })
    }
}

impl<R: Read> Iterator for CsvRecordReader<R> {
    type Item = Result<DetectionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let bytes = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            let start = self.offset;
            let Ok(line) = String::from_utf8(bytes) else {
                self.done = true;
                return Some(Err(Error::Format {
                    offset: start,
                    reason: "not valid UTF-8 text".into(),
                }));
            };
            let len = line.len() as u64 + 1;
            if !self.header_seen {
                self.header_seen = true;
                if line.trim_end_matches('\r') != CSV_HEADER {
                    self.done = true;
                    return Some(Err(Error::Format {
                        offset: 0,
                        reason: format!("expected header `{CSV_HEADER}`"),
                    }));
                }
                self.offset += len;
                continue;
            }
            if line.trim().is_empty() {
                self.offset += len;
                continue;
            }
            let rec = self.parse_line(&line);
            self.offset = start + len;
            if rec.is_err() {
                self.done = true;
            }
            return Some(rec);
        }
    }
}

/// Guesses the encoding from the first bytes.
pub fn sniff_format(prefix: &[u8]) -> RecordFormat {
    if prefix.starts_with(MAGIC) {
        RecordFormat::Binary
    } else {
        RecordFormat::Csv
    }
}

pub fn read_records<R: Read>(src: R, format: RecordFormat) -> Result<Vec<DetectionRecord>> {
    match format {
        RecordFormat::Binary => BinaryRecordReader::new(src)?.collect(),
        RecordFormat::Csv => CsvRecordReader::new(src).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(t: u64, d: DetectorId, o: u32) -> DetectionRecord {
        DetectionRecord {
            trial_index: t,
            detector: d,
            offset_ns: o,
        }
    }

    #[test]
    fn empty_binary_is_header_only() {
        let mut buf = Vec::new();
        assert_eq!(write_records(&[], &mut buf, RecordFormat::Binary).unwrap(), 16);
        assert_eq!(buf.len(), 16);
        assert_eq!(&buf[0..4], b"PDR1");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..16], &[0; 8]);
    }

    #[test]
    fn binary_layout_is_little_endian() {
        let mut buf = Vec::new();
        let n = write_records(&[rec(0x0102, DetectorId::D2b, 300)], &mut buf, RecordFormat::Binary).unwrap();
        assert_eq!(n, 29);
        assert_eq!(&buf[8..16], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&buf[16..24], &[0x02, 0x01, 0, 0, 0, 0, 0, 0]);
        assert_eq!(buf[24], 3);
        assert_eq!(&buf[25..29], &300u32.to_le_bytes());
    }

    #[test]
    fn csv_line_format() {
        let mut buf = Vec::new();
        write_records(&[rec(5, DetectorId::D2a, 300)], &mut buf, RecordFormat::Csv).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "trial_index,detector,offset_ns\n5,D2a,300\n"
        );
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let err = read_records(&b"PDX1aaaaaaaaaaaa"[..], RecordFormat::Binary).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let mut buf = Vec::new();
        write_records(
            &[rec(1, DetectorId::D1, 0), rec(2, DetectorId::D2, 300)],
            &mut buf,
            RecordFormat::Binary,
        )
        .unwrap();
        buf.truncate(buf.len() - 4);
        let err = read_records(&buf[..], RecordFormat::Binary).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 29, .. }), "{err}");

        let mut buf = Vec::new();
        write_records(&[rec(1, DetectorId::D1, 0)], &mut buf, RecordFormat::Binary).unwrap();
        buf[24] = 9;
        let err = read_records(&buf[..], RecordFormat::Binary).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 24, .. }), "{err}");

        let err = read_records(
            &b"trial_index,detector,offset_ns\n1,D1,0\n2,DX,0\n"[..],
            RecordFormat::Csv,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Format { offset: 38, .. }), "{err}");
    }

    struct FailAfter(usize);

    impl Write for FailAfter {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            if self.0 == 0 {
                return Err(io::Error::other("disk full"));
            }
            let n = buf.len().min(self.0);
            self.0 -= n;
            Ok(n)
        }

        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn partial_write_position_is_reported() {
        let recs: Vec<_> = (0..10_000).map(|t| rec(t, DetectorId::D1, 0)).collect();
        match write_records(&recs, FailAfter(1000), RecordFormat::Binary) {
            Err(Error::PartialWrite { written, .. }) => assert_eq!(written, 1000),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_record() -> impl Strategy<Value = DetectionRecord> {
        (any::<u64>(), 0u8..4, any::<u32>()).prop_map(|(t, d, o)| rec(t, DetectorId::from_u8(d).unwrap(), o))
    }

    proptest! {
        #[test]
        fn both_encodings_round_trip(recs in proptest::collection::vec(arb_record(), 0..200)) {
            for fmt in [RecordFormat::Binary, RecordFormat::Csv] {
                let mut buf = Vec::new();
                let n = write_records(&recs, &mut buf, fmt).unwrap();
                prop_assert_eq!(n as usize, buf.len());
                prop_assert_eq!(sniff_format(&buf), fmt);
                prop_assert_eq!(&read_records(&buf[..], fmt).unwrap(), &recs);
            }
        }
    }
}
