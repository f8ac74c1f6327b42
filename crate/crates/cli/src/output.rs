use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON with a top-level `config_hash` field.
pub fn write_json<T: Serialize>(path: &Path, hash: &str, body: &T) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(&Stamped {
        config_hash: hash,
        body,
    })
    .map_err(|e| CliError::Config(format!("cannot serialise {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

/// CSV table preceded by a `# config_hash:` comment line.
pub fn write_csv(path: &Path, hash: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut buf = std::io::BufWriter::new(file);
    writeln!(buf, "# config_hash: {hash}").map_err(io_err(path))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let wrap = |e: csv::Error| CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        w.write_record(header).map_err(wrap)?;
        for row in rows {
            w.write_record(row).map_err(wrap)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    buf.flush().map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Full-precision (round-trip) number; empty for missing values.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), num)
}

/// Scenario names become file-name fragments.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
