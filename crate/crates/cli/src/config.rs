//! Flat `key = value` configuration files.
//!
//! ```text
//! # shared by every experiment
//! epsilon = 0.1
//!
//! [circle-gap]
//! gap_deg = 90
//! ```
//!
//! Keys before the first section apply to whichever experiment runs; keys in
//! a `[name]` section apply only to that experiment.  Every key is checked
//! against the parameter table of the experiment it targets, so a typo is an
//! error rather than a silently ignored setting.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Value type of an experiment parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Float,
    /// A float, or `auto` for a data-driven default.
    FloatOrAuto,
    UInt,
    Bool,
    /// Comma-separated floats.
    FloatList,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Float => "float",
            Kind::FloatOrAuto => "float|auto",
            Kind::UInt => "uint",
            Kind::Bool => "bool",
            Kind::FloatList => "float list",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

/// A parsed parameter value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Auto,
    UInt(u64),
    Bool(bool),
    FloatList(Vec<f64>),
}

impl Value {
    fn parse(kind: Kind, raw: &str) -> Result<Self, String> {
        let float = |s: &str| -> Result<f64, String> {
            let v: f64 = s.trim().parse().map_err(|_| format!("expected a number, got `{s}`"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("expected a finite number, got `{s}`"))
            }
        };
        match kind {
            Kind::Float => float(raw).map(Value::Float),
            Kind::FloatOrAuto => {
                if raw == "auto" {
                    Ok(Value::Auto)
                } else {
                    float(raw).map(Value::Float)
                }
            }
            Kind::UInt => raw
                .parse()
                .map(Value::UInt)
                .map_err(|_| format!("expected a non-negative integer, got `{raw}`")),
            Kind::Bool => match raw {
                "true" => Ok(Value::Bool(true)),
                "false" => Ok(Value::Bool(false)),
                _ => Err(format!("expected true or false, got `{raw}`")),
            },
            Kind::FloatList => {
                let items: Result<Vec<f64>, String> = raw.split(',').map(float).collect();
                let items = items?;
                if items.is_empty() {
                    Err("expected at least one number".into())
                } else {
                    Ok(Value::FloatList(items))
                }
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Float(v) => serde_json::json!(v),
            Value::Auto => serde_json::json!("auto"),
            Value::UInt(v) => serde_json::json!(v),
            Value::Bool(v) => serde_json::json!(v),
            Value::FloatList(v) => serde_json::json!(v),
        }
    }
}

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed but not yet validated configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub global: Vec<Entry>,
    pub sections: BTreeMap<String, Vec<Entry>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = ConfigFile::default();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("line {line}: unterminated section header")))?
                    .trim();
                if name.is_empty() {
                    return Err(ConfigError(format!("line {line}: empty section name")));
                }
                if out.sections.contains_key(name) {
                    return Err(ConfigError(format!("line {line}: section [{name}] repeated")));
                }
                out.sections.insert(name.to_string(), Vec::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {line}: expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError(format!("line {line}: invalid key `{key}`")));
            }
            if value.is_empty() {
                return Err(ConfigError(format!("line {line}: missing value for `{key}`")));
            }
            let scope = match &current {
                Some(s) => out.sections.get_mut(s).expect("section inserted on header"),
                None => &mut out.global,
            };
            if scope.iter().any(|e| e.key == key) {
                return Err(ConfigError(format!("line {line}: key `{key}` set twice in the same scope")));
            }
            scope.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(out)
    }
}

/// Resolved, typed parameters of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    values: BTreeMap<&'static str, Value>,
}

impl Params {
    /// Defaults, then global file keys, then the experiment's own section,
    /// then `--set` overrides.  `schemas` lists every known experiment so that
    /// other sections of a shared file are validated too.
    pub fn resolve(
        experiment: &str,
        specs: &'static [ParamSpec],
        file: Option<&ConfigFile>,
        overrides: &[(String, String)],
        schemas: &dyn Fn(&str) -> Option<&'static [ParamSpec]>,
    ) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for s in specs {
            let v = Value::parse(s.kind, s.default)
                .map_err(|e| ConfigError(format!("bad built-in default for {}: {e}", s.name)))?;
            values.insert(s.name, v);
        }
        let mut params = Params { values };
        if let Some(file) = file {
            for (name, entries) in &file.sections {
                let other = schemas(name).ok_or_else(|| ConfigError(format!("unknown section [{name}]")))?;
                if name != experiment {
                    for e in entries {
                        lookup(other, &e.key).map_err(|m| ConfigError(format!("line {}: {m} in [{name}]", e.line)))?;
                        let spec = lookup(other, &e.key).expect("checked above");
                        Value::parse(spec.kind, &e.value)
                            .map_err(|m| ConfigError(format!("line {}: {}: {m}", e.line, e.key)))?;
                    }
                }
            }
            for e in &file.global {
                params
                    .set(specs, &e.key, &e.value)
                    .map_err(|m| ConfigError(format!("line {}: {m}", e.line)))?;
            }
            if let Some(entries) = file.sections.get(experiment) {
                for e in entries {
                    params
                        .set(specs, &e.key, &e.value)
                        .map_err(|m| ConfigError(format!("line {}: {m}", e.line)))?;
                }
            }
        }
        for (k, v) in overrides {
            params.set(specs, k, v).map_err(|m| ConfigError(format!("--set {k}: {m}")))?;
        }
        Ok(params)
    }

    fn set(&mut self, specs: &'static [ParamSpec], key: &str, raw: &str) -> Result<(), String> {
        let spec = lookup(specs, key)?;
        let v = Value::parse(spec.kind, raw).map_err(|m| format!("{key}: {m}"))?;
        self.values.insert(spec.name, v);
        Ok(())
    }

    fn get(&self, key: &str) -> &Value {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("parameter `{key}` is not declared for this experiment"))
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            other => panic!("parameter `{key}` is {other:?}, not a float"),
        }
    }

    /// `None` for `auto`.
    pub fn float_or_auto(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            Value::Float(v) => Some(*v),
            Value::Auto => None,
            other => panic!("parameter `{key}` is {other:?}, not a float"),
        }
    }

    pub fn uint(&self, key: &str) -> u64 {
        match self.get(key) {
            Value::UInt(v) => *v,
            other => panic!("parameter `{key}` is {other:?}, not an integer"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(v) => *v,
            other => panic!("parameter `{key}` is {other:?}, not a bool"),
        }
    }

    pub fn floats(&self, key: &str) -> &[f64] {
        match self.get(key) {
            Value::FloatList(v) => v,
            other => panic!("parameter `{key}` is {other:?}, not a list"),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_json()))
                .collect(),
        )
    }
}

fn lookup(specs: &'static [ParamSpec], key: &str) -> Result<&'static ParamSpec, String> {
    specs.iter().find(|s| s.name == key).ok_or_else(|| {
        let known: Vec<&str> = specs.iter().map(|s| s.name).collect();
        format!("unknown key `{key}` (known: {})", known.join(", "))
    })
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{s}` is not of the form key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return Err(ConfigError(format!("override `{s}` is not of the form key=value")));
    }
    Ok((k.to_string(), v.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    static SPECS: &[ParamSpec] = &[
        ParamSpec {
            name: "n",
            kind: Kind::UInt,
            default: "10",
            help: "",
        },
        ParamSpec {
            name: "eps",
            kind: Kind::FloatOrAuto,
            default: "auto",
            help: "",
        },
        ParamSpec {
            name: "widths",
            kind: Kind::FloatList,
            default: "1,2",
            help: "",
        },
    ];

    static OTHER: &[ParamSpec] = &[ParamSpec {
        name: "beta",
        kind: Kind::Float,
        default: "1",
        help: "",
    }];

    fn schemas(name: &str) -> Option<&'static [ParamSpec]> {
        match name {
            "a" => Some(SPECS),
            "b" => Some(OTHER),
            _ => None,
        }
    }

    fn resolve(text: &str, overrides: &[(String, String)]) -> Result<Params, ConfigError> {
        let f = ConfigFile::parse(text)?;
        Params::resolve("a", SPECS, Some(&f), overrides, &schemas)
    }

    #[test]
    fn precedence_and_comments() {
        let p = resolve("n = 3 # inline\n# full line\n[a]\nn = 4\neps = 0.5\n[b]\nbeta = 2\n", &[]).unwrap();
        assert_eq!(p.uint("n"), 4);
        assert_eq!(p.float_or_auto("eps"), Some(0.5));
        assert_eq!(p.floats("widths"), &[1.0, 2.0]);
        let p = resolve("n = 3\n", &[("n".into(), "7".into())]).unwrap();
        assert_eq!(p.uint("n"), 7);
        assert_eq!(resolve("", &[]).unwrap().float_or_auto("eps"), None);
    }

    #[test]
    fn strictness() {
        for bad in [
            "m = 1\n",
            "[a]\nbeta = 1\n",
            "[b]\nn = 1\n",
            "[c]\n",
            "n = x\n",
            "n = -1\n",
            "n = 1\nn = 2\n",
            "n\n",
            "[a\n",
            "[a]\n[a]\n",
            "eps = nan\n",
            "[b]\nbeta = fast\n",
        ] {
            assert!(resolve(bad, &[]).is_err(), "accepted {bad:?}");
        }
        assert!(resolve("", &[("zzz".into(), "1".into())]).is_err());
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override(" a = b ").unwrap(), ("a".into(), "b".into()));
    }

    #[test]
    fn error_mentions_line() {
        let e = resolve("\n\nbogus = 1\n", &[]).unwrap_err();
        assert!(e.0.contains("line 3"), "{e}");
    }
}
