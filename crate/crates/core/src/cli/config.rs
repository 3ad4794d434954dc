//! TOML run configuration: loading, flag overrides, hashing and typed
//! section access.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Top-level keys and sections the toolkit understands.
const KNOWN_KEYS: &[&str] = &[
    "seed", "cohort", "folds", "fold", "bootstrap", "inputs", "synth", "mil", "probe", "fewshot", "retrieve",
    "survival", "screening", "sampler", "heatmap",
];

/// Keys under `[inputs]` (and `cohort`) that name files and are resolved
/// against the config file's directory.
const PATH_KEYS: &[&str] = &["model_dir", "operating_point", "flags", "scores"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    table: Table,
    /// Config as written plus overrides, before path resolution.
    hash_source: Table,
    hash: String,
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(table: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {dotted:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {dotted:?}: {p:?} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::String(s) => s.clone().into(),
        Value::Integer(i) => (*i).into(),
        Value::Float(f) => serde_json::Number::from_f64(*f).map(Into::into).unwrap_or(serde_json::Value::Null),
        Value::Boolean(b) => (*b).into(),
        Value::Datetime(d) => d.to_string().into(),
        Value::Array(a) => a.iter().map(to_json).collect(),
        Value::Table(t) => t.iter().map(|(k, v)| (k.clone(), to_json(v))).collect::<serde_json::Map<_, _>>().into(),
    }
}

impl RunConfig {
    /// Reads `path` (if any) and applies `overrides` (`key.path=value`) in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let (mut table, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let t: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (t, dir)
            }
            None => (Table::new(), PathBuf::new()),
        };
        for k in table.keys() {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        // Relative paths in the file are relative to the file.
        let mut resolved = Vec::new();
        if let Some(Value::String(c)) = table.get("cohort") {
            resolved.push(("cohort".to_string(), c.clone()));
        }
        if let Some(Value::Table(inputs)) = table.get("inputs") {
            for k in PATH_KEYS {
                if let Some(Value::String(v)) = inputs.get(*k) {
                    resolved.push((format!("inputs.{k}"), v.clone()));
                }
            }
        }
        let hash_source = {
            let mut t = table.clone();
            for (k, v) in overrides {
                set_path(&mut t, k, parse_value(v))?;
            }
            t
        };
        for (k, v) in resolved {
            let p = base_dir.join(&v);
            set_path(&mut table, &k, Value::String(p.to_string_lossy().into_owned()))?;
        }
        for (k, v) in overrides {
            let top = k.split('.').next().unwrap_or_default();
            if !KNOWN_KEYS.contains(&top) {
                return Err(Error::Config(format!("unknown config key {top:?}")));
            }
            set_path(&mut table, k, parse_value(v))?;
        }
        let canonical = serde_json::to_string(&to_json(&Value::Table(hash_source.clone()))).expect("json");
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
        Ok(Self { table, hash_source, hash })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// The merged configuration as JSON, for provenance records.
    pub fn effective(&self) -> serde_json::Value {
        to_json(&Value::Table(self.hash_source.clone()))
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.table.get(key)
    }

    fn int(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => Err(Error::Config(format!("{key} must be a non-negative integer, got {v}"))),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.int("seed")
    }

    /// Stochastic commands refuse to run without a seed.
    pub fn require_seed(&self, task: &str) -> Result<u64> {
        self.seed()?
            .ok_or_else(|| Error::Config(format!("{task} is stochastic and needs an explicit seed (config `seed` or --seed)")))
    }

    pub fn fold(&self) -> Result<Option<usize>> {
        Ok(self.int("fold")?.map(|f| f as usize))
    }

    pub fn folds(&self) -> Result<usize> {
        Ok(self.int("folds")?.unwrap_or(5) as usize)
    }

    pub fn bootstrap(&self) -> Result<usize> {
        Ok(self.int("bootstrap")?.unwrap_or(1000) as usize)
    }

    pub fn cohort_path(&self) -> Result<PathBuf> {
        match self.get("cohort") {
            Some(Value::String(s)) => existing(PathBuf::from(s), "cohort"),
            Some(v) => Err(Error::Config(format!("cohort must be a path, got {v}"))),
            None => Err(Error::Config("no cohort given (config `cohort` or --cohort)".into())),
        }
    }

    /// A required file or directory under `[inputs]`.
    pub fn input(&self, key: &str) -> Result<PathBuf> {
        self.optional_input(key)?
            .ok_or_else(|| Error::Config(format!("missing inputs.{key}")))
    }

    pub fn optional_input(&self, key: &str) -> Result<Option<PathBuf>> {
        let v = self.get("inputs").and_then(|t| t.get(key));
        match v {
            None => Ok(None),
            Some(Value::String(s)) => existing(PathBuf::from(s), &format!("inputs.{key}")).map(Some),
            Some(v) => Err(Error::Config(format!("inputs.{key} must be a path, got {v}"))),
        }
    }

    /// The raw table of section `name` (empty when absent).
    pub fn section_table(&self, name: &str) -> Result<Table> {
        match self.get(name) {
            None => Ok(Table::new()),
            Some(Value::Table(t)) => Ok(t.clone()),
            Some(v) => Err(Error::Config(format!("[{name}] must be a table, got {v}"))),
        }
    }

    /// Deserializes section `name`, filling `seed` from the top level when the
    /// section does not set one and `with_seed` is true.
    pub fn section<T: DeserializeOwned>(&self, name: &str, with_seed: bool) -> Result<T> {
        let mut t = self.section_table(name)?;
        if with_seed && !t.contains_key("seed") {
            if let Some(s) = self.seed()? {
                t.insert("seed".into(), Value::Integer(s as i64));
            }
        }
        from_table(name, t)
    }
}

pub fn from_table<T: DeserializeOwned>(name: &str, t: Table) -> Result<T> {
    T::deserialize(Value::Table(t)).map_err(|e| Error::Config(format!("[{name}]: {e}")))
}

fn existing(p: PathBuf, what: &str) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Config(format!("{what}: {} does not exist", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn overrides_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 3\n[mil]\nepochs = 4\n");
        let a = RunConfig::load(Some(&p), &[]).unwrap();
        let b = RunConfig::load(Some(&p), &[("mil.epochs".into(), "9".into())]).unwrap();
        let c = RunConfig::load(Some(&p), &[("mil.epochs".into(), "9".into())]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.hash(), c.hash());
        assert_eq!(b.section_table("mil").unwrap()["epochs"], Value::Integer(9));
        assert_eq!(a.require_seed("x").unwrap(), 3);
        let d = RunConfig::load(Some(&p), &[("seed".into(), "3".into())]).unwrap();
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn rejects_unknown_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "sead = 3\n");
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(Error::Config(_))));
        let p = write(dir.path(), "cohort = \"nope/manifest.jsonl\"\n");
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert!(c.require_seed("fewshot").is_err());
        assert!(c.cohort_path().is_err());
        assert!(RunConfig::load(None, &[("bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.jsonl"), "").unwrap();
        let p = write(dir.path(), "cohort = \"m.jsonl\"\n");
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap().cohort_path().unwrap(), dir.path().join("m.jsonl"));
    }
}
