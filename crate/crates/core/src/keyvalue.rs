//! Line-delimited `key=value` sidecar files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sidecar path for a data file: `foo.iq` -> `foo.iq.meta`.
pub(crate) fn sidecar_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

pub(crate) fn write(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (key, value) in entries {
        out.push_str(key);
        out.push('=');
        out.push_str(value);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub(crate) struct Record {
    path: PathBuf,
    values: BTreeMap<String, String>,
}

impl Record {
    pub(crate) fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", lineno + 1)))?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Record {
            path: path.to_path_buf(),
            values,
        })
    }

    pub(crate) fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| Error::format(&self.path, format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::format(&self.path, format!("bad value for `{key}`: {raw}")))
    }
}
