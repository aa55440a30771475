//! Flat `key = value` run configuration with command-line override.
//!
//! Every subcommand resolves its settings through a [`Resolver`]: a value
//! comes from the flag if given, else from the config file, else from the
//! built-in default. Unknown config keys are rejected rather than ignored,
//! and every key the command consulted is echoed — in canonical form and
//! sorted order — to `config.resolved` in the output directory, so a run
//! can be reproduced from its artifacts alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dttc_core::metrics::fmt_f64;
use dttc_core::{Error, Result};

/// Parse a config file: one `key = value` per line, `#` comments, blank
/// lines allowed, duplicate keys rejected.
fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected 'key = value', found '{raw}'",
                path.display(),
                idx + 1
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!(
                "{}:{}: empty key",
                path.display(),
                idx + 1
            )));
        }
        if map
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "{}:{}: duplicate key '{key}'",
                path.display(),
                idx + 1
            )));
        }
    }
    Ok(map)
}

/// Resolves one command's settings from flags, a config file, and defaults,
/// recording everything it hands out.
#[derive(Debug)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<&'static str, String>,
}

impl Resolver {
    /// Load the config file (if any) and reject keys outside `allowed`.
    pub fn new(config: Option<&String>, allowed: &[&'static str]) -> Result<Resolver> {
        let file = match config {
            Some(p) => parse_file(Path::new(p))?,
            None => BTreeMap::new(),
        };
        for key in file.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown config key '{key}' for this command (allowed: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(Resolver {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn pick(&self, key: &'static str, flag: Option<&String>) -> Option<String> {
        flag.cloned().or_else(|| self.file.get(key).cloned())
    }

    fn record(&mut self, key: &'static str, value: String) {
        self.resolved.insert(key, value);
    }

    /// Replace a key's echoed form with a canonical rendering (used after
    /// structured values are parsed).
    pub fn record_override(&mut self, key: &'static str, value: String) {
        self.record(key, value);
    }

    /// An optional path; echoed verbatim when present.
    pub fn path(&mut self, key: &'static str, flag: Option<&String>) -> Option<PathBuf> {
        let v = self.pick(key, flag)?;
        self.record(key, v.clone());
        Some(PathBuf::from(v))
    }

    /// A path the command cannot run without.
    pub fn required_path(&mut self, key: &'static str, flag: Option<&String>) -> Result<PathBuf> {
        self.path(key, flag).ok_or_else(|| {
            Error::Config(format!(
                "missing '{key}': pass --{key} or set it in the config file"
            ))
        })
    }

    pub fn string(&mut self, key: &'static str, flag: Option<&String>, default: &str) -> String {
        let v = self.pick(key, flag).unwrap_or_else(|| default.to_string());
        self.record(key, v.clone());
        v
    }

    /// A value with its own parser (variant codes, cadences, ...); echoed
    /// lowercased, which is canonical for every such vocabulary here.
    pub fn parse_as<T>(
        &mut self,
        key: &'static str,
        flag: Option<&String>,
        default: &str,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        let raw = self.pick(key, flag).unwrap_or_else(|| default.to_string());
        let v = parse(raw.trim()).map_err(|e| Error::Config(format!("'{key}': {e}")))?;
        self.record(key, raw.trim().to_ascii_lowercase());
        Ok(v)
    }

    pub fn f64(&mut self, key: &'static str, flag: Option<&String>, default: f64) -> Result<f64> {
        let v = match self.pick(key, flag) {
            None => default,
            Some(raw) => raw
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("'{key}': '{raw}' is not a number")))?,
        };
        self.record(key, fmt_f64(v));
        Ok(v)
    }

    /// An optional float with no default (absent means "feature off").
    pub fn opt_f64(&mut self, key: &'static str, flag: Option<&String>) -> Result<Option<f64>> {
        match self.pick(key, flag) {
            None => Ok(None),
            Some(raw) => {
                let v = raw
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("'{key}': '{raw}' is not a number")))?;
                self.record(key, fmt_f64(v));
                Ok(Some(v))
            }
        }
    }

    pub fn u64(&mut self, key: &'static str, flag: Option<&String>, default: u64) -> Result<u64> {
        let v = match self.pick(key, flag) {
            None => default,
            Some(raw) => raw.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("'{key}': '{raw}' is not a non-negative integer"))
            })?,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn usize(
        &mut self,
        key: &'static str,
        flag: Option<&String>,
        default: usize,
    ) -> Result<usize> {
        let v = match self.pick(key, flag) {
            None => default,
            Some(raw) => raw.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!("'{key}': '{raw}' is not a non-negative integer"))
            })?,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn bool(
        &mut self,
        key: &'static str,
        flag: Option<&String>,
        default: bool,
    ) -> Result<bool> {
        let v = match self.pick(key, flag) {
            None => default,
            Some(raw) => match raw.trim() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Config(format!(
                        "'{key}': expected true or false, got '{other}'"
                    )))
                }
            },
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    /// A comma-separated list with a default; items are trimmed and must be
    /// non-empty.
    pub fn list(
        &mut self,
        key: &'static str,
        flag: Option<&String>,
        default: &[&str],
    ) -> Result<Vec<String>> {
        let raw = self.pick(key, flag).unwrap_or_else(|| default.join(","));
        let items = split_list(key, &raw)?;
        self.record(key, items.join(","));
        Ok(items)
    }

    /// A comma-separated list that may be absent.
    pub fn opt_list(
        &mut self,
        key: &'static str,
        flag: Option<&String>,
    ) -> Result<Option<Vec<String>>> {
        match self.pick(key, flag) {
            None => Ok(None),
            Some(raw) => {
                let items = split_list(key, &raw)?;
                self.record(key, items.join(","));
                Ok(Some(items))
            }
        }
    }

    /// Echo every consulted key as sorted `key = value` lines.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Write the echo to `<dir>/config.resolved`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.resolved_text())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn split_list(key: &str, raw: &str) -> Result<Vec<String>> {
    let items: Vec<String> = raw.split(',').map(|s| s.trim().to_string()).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!(
            "'{key}': empty item in list '{raw}'"
        )));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn config_with(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn path_string(f: &tempfile::NamedTempFile) -> String {
        f.path().display().to_string()
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let f = config_with("lr = 0.5\nepochs = 7\n");
        let p = path_string(&f);
        let mut r = Resolver::new(Some(&p), &["lr", "epochs", "seed"]).unwrap();
        let flag = "0.25".to_string();
        assert_eq!(r.f64("lr", Some(&flag), 0.1).unwrap(), 0.25);
        assert_eq!(r.usize("epochs", None, 10).unwrap(), 7);
        assert_eq!(r.u64("seed", None, 4).unwrap(), 4);
        assert_eq!(r.resolved_text(), "epochs = 7\nlr = 0.25\nseed = 4\n");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = config_with("lrate = 0.5\n");
        let p = path_string(&f);
        let err = Resolver::new(Some(&p), &["lr"]).unwrap_err();
        assert!(err.to_string().contains("unknown config key 'lrate'"));
    }

    #[test]
    fn file_syntax_errors_are_located() {
        for (text, needle) in [
            ("just words\n", "expected 'key = value'"),
            ("= 3\n", "empty key"),
            ("a = 1\na = 2\n", "duplicate key 'a'"),
        ] {
            let f = config_with(text);
            let p = path_string(&f);
            let err = Resolver::new(Some(&p), &["a"]).unwrap_err();
            assert!(err.to_string().contains(needle), "{err} missing {needle}");
        }
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let f = config_with("# a comment\n\n  seed = 9\n");
        let p = path_string(&f);
        let mut r = Resolver::new(Some(&p), &["seed"]).unwrap();
        assert_eq!(r.u64("seed", None, 0).unwrap(), 9);
    }

    #[test]
    fn values_are_echoed_canonically() {
        let mut r = Resolver::new(None, &[]).unwrap();
        let raw = "0.50".to_string();
        r.f64("tau", Some(&raw), 1.0).unwrap();
        let list = " a , b ".to_string();
        r.list("sensitive", Some(&list), &[]).unwrap();
        let code = "HD".to_string();
        r.parse_as(
            "variant",
            Some(&code),
            "base",
            dttc_core::ttc::Variant::from_code,
        )
        .unwrap();
        assert_eq!(
            r.resolved_text(),
            "sensitive = a,b\ntau = 0.5\nvariant = hd\n"
        );
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut r = Resolver::new(None, &[]).unwrap();
        let raw = "fast".to_string();
        let err = r.f64("lr", Some(&raw), 0.1).unwrap_err();
        assert!(err.to_string().contains("'lr'"), "{err}");
        let raw = "yes".to_string();
        let err = r.bool("stratify", Some(&raw), true).unwrap_err();
        assert!(err.to_string().contains("expected true or false"), "{err}");
        let raw = "a,,b".to_string();
        let err = r.list("sensitive", Some(&raw), &[]).unwrap_err();
        assert!(err.to_string().contains("empty item"), "{err}");
    }

    #[test]
    fn missing_required_path_names_both_sources() {
        let mut r = Resolver::new(None, &["taxonomy"]).unwrap();
        let err = r.required_path("taxonomy", None).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("--taxonomy") && msg.contains("config file"),
            "{msg}"
        );
    }
}
