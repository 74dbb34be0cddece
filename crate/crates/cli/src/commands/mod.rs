pub mod discover;
pub mod eval;
pub mod extend;
pub mod plot;
pub mod sample;
pub mod synth;
pub mod train;

use std::path::Path;

use toml::Value;

/// Flag values collected as configuration overrides.
#[derive(Default)]
pub struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub fn path(mut self, key: &'static str, v: &Option<impl AsRef<Path>>) -> Self {
        if let Some(p) = v {
            self.0
                .push((key, Value::String(p.as_ref().to_string_lossy().into_owned())));
        }
        self
    }

    pub fn text(mut self, key: &'static str, v: &Option<String>) -> Self {
        if let Some(s) = v {
            self.0.push((key, Value::String(s.clone())));
        }
        self
    }

    pub fn count(mut self, key: &'static str, v: Option<usize>) -> Self {
        if let Some(n) = v {
            self.0.push((key, Value::Integer(n.min(i64::MAX as usize) as i64)));
        }
        self
    }

    pub fn real(mut self, key: &'static str, v: Option<f64>) -> Self {
        if let Some(x) = v {
            self.0.push((key, Value::Float(x)));
        }
        self
    }

    pub fn done(self) -> Vec<(&'static str, Value)> {
        self.0
    }
}
