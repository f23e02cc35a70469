//! CSV output shared by the training and analysis reports. Every file
//! starts with a `#` line naming its schema and version.

use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub(crate) fn write_csv<I>(path: &Path, schema: &str, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = format!("# clipfit-{schema} v{CSV_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header).map_err(csv_err(path))?;
        for row in rows {
            w.write_record(&row).map_err(csv_err(path))?;
        }
        w.flush()?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Reads a file written by [`write_csv`]: returns the header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err(path))?;
    Ok((header, rows))
}
