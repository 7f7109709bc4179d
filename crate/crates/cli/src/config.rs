//! Parameter resolution and run manifests.
//!
//! Each subcommand owns a flat TOML section. Values are layered: built-in
//! defaults, then the config file section, then command-line flags. The
//! resolved values are written back as a manifest that can be replayed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub seed: u64,
    pub out: PathBuf,
    pub check: bool,
    pub tol: Option<f64>,
}

/// A parsed config file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let table: toml::Table =
            text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (key, value) in &table {
            if !value.is_table() {
                return Err(CliError::Config(format!(
                    "{}: top-level key `{key}` must be a section",
                    path.display()
                )));
            }
        }
        Ok(Self { table })
    }

    pub fn section(&self, name: &str) -> Option<&toml::Table> {
        self.table.get(name).and_then(|v| v.as_table())
    }

    /// The `[run]` section: seed, out, check, tol.
    pub fn run_value<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.section("run").and_then(|t| t.get(key)) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| CliError::Config(format!("[run] {key}: {e}"))),
        }
    }
}

fn to_object(v: impl Serialize, what: &str) -> Result<Map<String, Value>, CliError> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Config(format!("{what} is not a key-value table"))),
        Err(e) => Err(CliError::Config(format!("{what}: {e}"))),
    }
}

/// Layer defaults, the config section and the flags into the resolved parameters.
pub fn resolve<P, F>(section: &str, file: &ConfigFile, flags: &F, tol: Option<f64>) -> Result<P, CliError>
where
    P: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut merged = to_object(P::default(), "defaults")?;
    if let Some(table) = file.section(section) {
        for (key, value) in to_object(table, section)? {
            if !merged.contains_key(&key) {
                return Err(CliError::Config(format!("[{section}] has no parameter `{key}`")));
            }
            merged.insert(key, value);
        }
    }
    for (key, value) in to_object(flags, "flags")? {
        if !value.is_null() {
            merged.insert(key, value);
        }
    }
    if let Some(tol) = tol {
        if !merged.contains_key("tol") {
            return Err(CliError::Config(format!("`{section}` takes no tolerance; drop --tol")));
        }
        merged.insert("tol".into(), tol.into());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(format!("[{section}] {e}")))
}

/// Manifest written next to the outputs of every run.
pub fn write_manifest<P: Serialize>(
    run: &RunSettings,
    command: &str,
    section: &str,
    params: &P,
) -> Result<PathBuf, CliError> {
    if run.seed > i64::MAX as u64 {
        return Err(CliError::Config(format!("seed {} does not fit a manifest integer", run.seed)));
    }
    let mut head = toml::Table::new();
    head.insert("command".into(), command.into());
    head.insert("version".into(), VERSION.into());
    head.insert("seed".into(), toml::Value::Integer(run.seed as i64));
    head.insert("check".into(), run.check.into());
    head.insert("out".into(), run.out.display().to_string().into());
    let body = toml::Table::try_from(params).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
    let mut doc = toml::Table::new();
    doc.insert("run".into(), head.into());
    doc.insert(section.into(), body.into());
    let text = toml::to_string(&doc).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
    let path = run.out.join(format!("{section}.manifest.toml"));
    fs::write(&path, text).map_err(|e| CliError::Lib(e.into()))?;
    Ok(path)
}

/// Command name recorded in a manifest.
pub fn manifest_command(file: &ConfigFile) -> Result<String, CliError> {
    file.run_value::<String>("command")?
        .ok_or_else(|| CliError::Config("manifest has no [run] command".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    struct Params {
        a: f64,
        n: Vec<u64>,
        tol: f64,
    }

    #[derive(Serialize)]
    struct Flags {
        a: Option<f64>,
        n: Option<Vec<u64>>,
    }

    fn file(text: &str) -> ConfigFile {
        ConfigFile { table: text.parse().unwrap() }
    }

    #[test]
    fn flags_override_file_over_defaults() {
        let cfg = file("[s]\na = 2\nn = [1, 2]\n");
        let p: Params = resolve("s", &cfg, &Flags { a: Some(0.5), n: None }, Some(1e-3)).unwrap();
        assert_eq!(p, Params { a: 0.5, n: vec![1, 2], tol: 1e-3 });
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let cfg = file("[s]\nb = 2\n");
        let r: Result<Params, _> = resolve("s", &cfg, &Flags { a: None, n: None }, None);
        assert!(matches!(r, Err(CliError::Config(_))));
    }
}
