use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sliding_window, LabeledWindowSet, SetMetadata};
use crate::error::{at_path, Error, Result};

pub const WINDOW_SET_MAGIC: &[u8; 4] = b"MHWS";
pub const WINDOW_SET_VERSION: u32 = 1;

/// Column layout of an imported CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvFormat {
    /// One window per row: `label,ch0_t0,ch0_t1,...,ch1_t0,...`.
    Wide,
    /// One time step per row: `label,<channel>,<channel>,...`, windowed on import.
    Long,
}

impl std::str::FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wide" => Ok(CsvFormat::Wide),
            "long" => Ok(CsvFormat::Long),
            _ => Err(Error::InvalidArgument(format!("unknown csv format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub format: CsvFormat,
    /// Number of classes; inferred as `max label + 1` when absent.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    /// Window width for the long format.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub overlap: f64,
}

fn default_rate() -> f64 {
    50.0
}

impl CsvSchema {
    pub fn wide() -> Self {
        Self {
            format: CsvFormat::Wide,
            classes: None,
            class_names: None,
            sample_rate_hz: default_rate(),
            window: None,
            overlap: 0.0,
        }
    }

    pub fn long(window: usize, overlap: f64) -> Self {
        Self { format: CsvFormat::Long, window: Some(window), overlap, ..Self::wide() }
    }

    fn class_names(&self, max_label: usize) -> Result<Vec<String>> {
        let k = match (&self.class_names, self.classes) {
            (Some(names), Some(k)) if names.len() != k => {
                return Err(Error::InvalidArgument(format!("{} class names for {k} classes", names.len())))
            }
            (Some(names), _) => return Ok(names.clone()),
            (None, Some(k)) => k,
            (None, None) => max_label + 1,
        };
        Ok((0..k).map(|i| format!("class{i}")).collect())
    }

    fn known_classes(&self) -> Option<usize> {
        self.classes.or(self.class_names.as_ref().map(Vec::len))
    }
}

struct Rows {
    header: Vec<String>,
    labels: Vec<usize>,
    values: Vec<Vec<f64>>,
}

fn read_rows(path: &Path, schema: &CsvSchema) -> Result<Rows> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(File::open(path).map_err(at_path(path))?));
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("label") || header.len() < 2 {
        return Err(Error::Parse { row: 1, msg: "header must start with `label` followed by value columns".into() });
    }
    let known = schema.known_classes();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse { row, msg: format!("{} fields, header has {}", record.len(), header.len()) });
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| Error::Parse { row, msg: format!("label {:?} is not a class index", &record[0]) })?;
        if let Some(k) = known {
            if label >= k {
                return Err(Error::Parse { row, msg: format!("label {label} out of range for {k} classes") });
            }
        }
        let mut row_values = Vec::with_capacity(header.len() - 1);
        for (col, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("column {:?}: {field:?} is not a number", header[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, msg: format!("column {:?}: non-finite value {field}", header[col]) });
            }
            row_values.push(v);
        }
        labels.push(label);
        values.push(row_values);
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(Rows { header, labels, values })
}

/// Splits wide-format column names `<channel>_t<step>` into channel names and
/// the window length. Columns must run channel by channel, steps in order.
fn wide_layout(header: &[String]) -> Result<(Vec<String>, usize)> {
    let mut channels: Vec<String> = Vec::new();
    let mut steps: Vec<usize> = Vec::new();
    for name in &header[1..] {
        let (channel, step) =
            name.rsplit_once("_t").and_then(|(c, s)| s.parse::<usize>().ok().map(|s| (c, s))).ok_or_else(|| {
                Error::Parse { row: 1, msg: format!("column {name:?} is not of the form <channel>_t<step>") }
            })?;
        if channels.last().map(String::as_str) != Some(channel) {
            channels.push(channel.to_owned());
            steps.push(0);
        }
        let expected = steps.last_mut().expect("pushed above");
        if step != *expected {
            return Err(Error::Parse {
                row: 1,
                msg: format!("column {name:?} out of order, expected step {expected}"),
            });
        }
        *expected += 1;
    }
    let t = steps[0];
    if steps.iter().any(|&s| s != t) {
        return Err(Error::Parse { row: 1, msg: format!("channels have unequal step counts {steps:?}") });
    }
    Ok((channels, t))
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LabeledWindowSet> {
    let rows = read_rows(path.as_ref(), schema)?;
    let max_label = rows.labels.iter().copied().max().unwrap_or(0);
    let class_names = schema.class_names(max_label)?;
    match schema.format {
        CsvFormat::Wide => {
            let (channel_names, t) = wide_layout(&rows.header)?;
            let c = channel_names.len();
            let windows = rows.values.iter().flatten().map(|&v| v as f32).collect();
            let meta = SetMetadata { channel_names, class_names, sample_rate_hz: schema.sample_rate_hz };
            LabeledWindowSet::new(windows, rows.labels, c, t, meta)
        }
        CsvFormat::Long => {
            let width =
                schema.window.ok_or_else(|| Error::InvalidArgument("long csv format needs a window width".into()))?;
            let channel_names = rows.header[1..].to_vec();
            let series: Vec<Vec<f64>> =
                (0..channel_names.len()).map(|c| rows.values.iter().map(|r| r[c]).collect()).collect();
            let meta = SetMetadata { channel_names, class_names, sample_rate_hz: schema.sample_rate_hz };
            sliding_window(&series, &rows.labels, width, schema.overlap, meta)
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_binary(set: &LabeledWindowSet, mut out: impl Write) -> Result<()> {
    out.write_all(WINDOW_SET_MAGIC)?;
    for v in [
        WINDOW_SET_VERSION,
        to_u32(set.len(), "window count")?,
        to_u32(set.channels(), "channel count")?,
        to_u32(set.length(), "window length")?,
        to_u32(set.classes(), "class count")?,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in set.samples() {
        out.write_all(&v.to_le_bytes())?;
    }
    for &l in set.labels() {
        out.write_all(&(l as u32).to_le_bytes())?;
    }
    out.write_all(&serde_json::to_vec(&set.metadata())?)?;
    out.flush()?;
    Ok(())
}

pub fn read_binary(mut input: impl Read) -> Result<LabeledWindowSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated window set".into()))?;
        let slice = &bytes[*pos..end];
        *pos = end;
        Ok(slice)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != WINDOW_SET_MAGIC {
        return Err(Error::Format("not a window set file (bad magic)".into()));
    }
    let mut header = [0u32; 5];
    for h in &mut header {
        *h = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    }
    let [version, n, c, t, k] = header.map(|v| v as usize);
    if version != WINDOW_SET_VERSION as usize {
        return Err(Error::Format(format!("unsupported window set version {version}")));
    }
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| Error::Format("window set dimensions overflow".into()))?;
    let windows = take(&mut pos, count.checked_mul(4).ok_or_else(|| Error::Format("window set too large".into()))?)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let labels = take(&mut pos, n * 4)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    let meta: SetMetadata = serde_json::from_slice(&bytes[pos..])?;
    if meta.class_names.len() != k {
        return Err(Error::Format(format!("{} class names for {k} classes", meta.class_names.len())));
    }
    LabeledWindowSet::new(windows, labels, c, t, meta)
}

pub fn save_binary(set: &LabeledWindowSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_binary(set, BufWriter::new(File::create(path).map_err(at_path(path))?))
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<LabeledWindowSet> {
    let path = path.as_ref();
    read_binary(BufReader::new(File::open(path).map_err(at_path(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let set = synth_generate(3, 2, 16, 3, 1).unwrap();
        let mut bytes = Vec::new();
        write_binary(&set, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MHWS");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        let back = read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back, set);
        assert!(back.samples().iter().zip(set.samples()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn binary_rejects_damage() {
        let set = synth_generate(1, 1, 4, 2, 1).unwrap();
        let mut bytes = Vec::new();
        write_binary(&set, &mut bytes).unwrap();
        assert!(read_binary(&bytes[..30]).is_err());
        bytes[0] = b'X';
        assert!(read_binary(bytes.as_slice()).is_err());
    }

    #[test]
    fn wide_csv_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "w.csv", "label,acc_t0,acc_t1,acc_t2,acc_t3\n1,0.5,1,1.5,2\n0,-1,-2,-3,-4\n");
        let set = load_csv(&path, &CsvSchema::wide()).unwrap();
        assert_eq!((set.len(), set.channels(), set.length()), (2, 1, 4));
        assert_eq!(set.samples(), &[0.5, 1.0, 1.5, 2.0, -1.0, -2.0, -3.0, -4.0]);
        assert_eq!(set.labels(), &[1, 0]);
        assert_eq!(set.channel_names, vec!["acc"]);
        assert_eq!(set.classes(), 2);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let header = "label,a_t0,a_t1\n";
        let nan = write(&dir, "nan.csv", &format!("{header}0,1,2\n1,NaN,2\n"));
        let err = load_csv(&nan, &CsvSchema::wide()).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        let ragged = write(&dir, "ragged.csv", &format!("{header}0,1\n"));
        assert!(load_csv(&ragged, &CsvSchema::wide()).unwrap_err().to_string().contains("row 2"));
        let schema = CsvSchema { classes: Some(2), ..CsvSchema::wide() };
        let range = write(&dir, "range.csv", &format!("{header}0,1,2\n5,1,2\n"));
        let err = load_csv(&range, &schema).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("out of range"), "{err}");
    }

    #[test]
    fn long_csv_is_windowed() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("label,x,y\n");
        for i in 0..8 {
            text.push_str(&format!("{},{i},{}\n", usize::from(i >= 4), -i));
        }
        let path = write(&dir, "long.csv", &text);
        let set = load_csv(&path, &CsvSchema::long(4, 0.5)).unwrap();
        assert_eq!((set.len(), set.channels(), set.length()), (3, 2, 4));
        assert_eq!(set.window(1), &[2.0, 3.0, 4.0, 5.0, -2.0, -3.0, -4.0, -5.0]);
        assert_eq!(set.labels(), &[0, 0, 1]);
    }
}
