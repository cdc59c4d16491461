use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Failures mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file, unwritable output: exit 1.
    Config(String),
    /// A numerical check or computation failed: exit 2.
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<macformer_core::Error> for CliError {
    fn from(e: macformer_core::Error) -> Self {
        match e {
            macformer_core::Error::InvalidParameter { .. } => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

/// Overlays the keys of a flat TOML file onto `base`. Keys must be fields of
/// `T`; anything else is rejected so typos do not pass silently.
pub fn overlay_file<T: Serialize + DeserializeOwned>(
    base: T,
    path: Option<&Path>,
) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(base);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut merged = serde_json::to_value(&base).map_err(|e| CliError::Config(e.to_string()))?;
    let fields = merged
        .as_object_mut()
        .ok_or_else(|| CliError::Config("configuration is not a table".into()))?;
    for (key, value) in table {
        if !fields.contains_key(&key) {
            let known: Vec<&str> = fields.keys().map(String::as_str).collect();
            return Err(CliError::Config(format!(
                "{}: unknown key `{key}` (expected one of: {})",
                path.display(),
                known.join(", ")
            )));
        }
        let value = serde_json::to_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        fields.insert(key, value);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use macformer_core::bench::GridConfig;
    use std::io::Write;

    fn write_temp(text: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(text.as_bytes()).unwrap();
        file
    }

    #[test]
    fn file_values_override_base() {
        let file = write_temp("repeats = 3\nlengths = [10, 20]\nkernel = \"inv\"\n");
        let c = overlay_file(GridConfig::default(), Some(file.path())).unwrap();
        assert_eq!(c.repeats, 3);
        assert_eq!(c.lengths, vec![10, 20]);
        assert_eq!(c.kernel, macformer_core::KernelId::Inv);
        assert_eq!(c.batch, 16);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        let file = write_temp("repeat = 3\n");
        assert!(matches!(
            overlay_file(GridConfig::default(), Some(file.path())),
            Err(CliError::Config(_))
        ));
        let file = write_temp("repeats = \"many\"\n");
        assert!(matches!(
            overlay_file(GridConfig::default(), Some(file.path())),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn missing_file_is_config_error() {
        let err = overlay_file(
            GridConfig::default(),
            Some(Path::new("/nonexistent/x.toml")),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
