//! Key=value record written after every command.

use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Config snapshot, already in key=value form.
    pub config: Vec<(String, String)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration: Duration,
    pub status: String,
    pub result: Vec<(String, String)>,
}

fn clean(v: &str) -> String {
    v.replace(['\n', '\r'], " ")
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            status: "ok".into(),
            ..Self::default()
        }
    }

    pub fn result(&mut self, key: &str, value: impl ToString) {
        self.result.push((key.into(), value.to_string()));
    }

    pub fn config_kv(&mut self, text: &str) {
        self.config = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().into(), v.trim().into()))
            .collect();
    }

    pub fn to_text(&self) -> String {
        let join = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| clean(&p.display().to_string()))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines = vec![
            format!("command={}", self.command),
            format!("status={}", self.status),
            format!("inputs={}", join(&self.inputs)),
            format!("outputs={}", join(&self.outputs)),
            format!("duration_s={:.6}", self.duration.as_secs_f64()),
        ];
        lines.extend(
            self.config
                .iter()
                .map(|(k, v)| format!("config.{k}={}", clean(v))),
        );
        lines.extend(
            self.result
                .iter()
                .map(|(k, v)| format!("result.{k}={}", clean(v))),
        );
        lines.join("\n") + "\n"
    }

    pub fn parse(text: &str) -> Vec<(String, String)> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.into(), v.into()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_is_flat_key_value() {
        let mut m = RunManifest::new("eval");
        m.config_kv("alpha=1.0\n# comment\nmode=soft\n");
        m.inputs.push("a\nb.txt".into());
        m.result("map50", 0.5);
        let kv = RunManifest::parse(&m.to_text());
        assert!(kv.contains(&("command".into(), "eval".into())));
        assert!(kv.contains(&("config.mode".into(), "soft".into())));
        assert!(kv.contains(&("inputs".into(), "a b.txt".into())));
        assert!(kv.contains(&("result.map50".into(), "0.5".into())));
        assert_eq!(m.to_text().lines().count(), kv.len());
    }
}
