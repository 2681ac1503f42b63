//! Named parameter collections and their text checkpoint format.
//!
//! ```text
//! nmode-checkpoint 1
//! meta config_hash 3fa1…
//! meta seed 2022
//! meta epoch 12
//! meta cubic 5.0000000000000000e-1
//! meta basis_fingerprint 9c0e…
//! param enc.mlp.w1 4x128
//! <4·128 values>
//! moment enc.mlp.w1 4x128
//! <first moments> <second moments>
//! end
//! ```
//!
//! Every float is written with 17 significant digits, so a save/load round
//! trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::RealArray;

const MAGIC: &str = "nmode-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StoreMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub cubic: f64,
    pub basis_fingerprint: String,
    /// Adam step counter; zero when no optimizer state is stored.
    pub optimizer_step: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    pub meta: StoreMeta,
    names: Vec<String>,
    values: BTreeMap<String, RealArray>,
    /// Optional Adam moments `(m, v)` per entry.
    moments: BTreeMap<String, (RealArray, RealArray)>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealArray) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::Input(format!("duplicate parameter `{name}`")));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Input(format!("invalid parameter name `{name}`")));
        }
        self.names.push(name.clone());
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RealArray> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RealArray> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealArray)> {
        self.names.iter().map(move |n| (n.as_str(), &self.values[n]))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.values().map(RealArray::len).sum()
    }

    pub fn moments(&self, name: &str) -> Option<&(RealArray, RealArray)> {
        self.moments.get(name)
    }

    pub fn set_moments(&mut self, name: &str, m: RealArray, v: RealArray) {
        self.moments.insert(name.to_string(), (m, v));
    }

    pub fn clear_moments(&mut self) {
        self.moments.clear();
        self.meta.optimizer_step = 0;
    }

    /// Checks names and shapes against a reference store (e.g. a freshly
    /// initialized model).
    pub fn check_compatible(&self, expected: &ParameterStore) -> Result<()> {
        for (name, want) in expected.iter() {
            match self.get(name) {
                None => return Err(Error::Compatibility(format!("missing entry `{name}`"))),
                Some(have) if have.shape() != want.shape() => {
                    return Err(Error::Compatibility(format!(
                        "entry `{name}` has shape {:?}, model expects {:?}",
                        have.shape(),
                        want.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.names.iter().find(|n| !expected.contains(n)) {
            return Err(Error::Compatibility(format!("unexpected entry `{extra}`")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        let m = &self.meta;
        s.push_str(&format!("meta config_hash {}\n", or_dash(&m.config_hash)));
        s.push_str(&format!("meta seed {}\n", m.seed));
        s.push_str(&format!("meta epoch {}\n", m.epoch));
        s.push_str(&format!("meta cubic {:.16e}\n", m.cubic));
        s.push_str(&format!("meta basis_fingerprint {}\n", or_dash(&m.basis_fingerprint)));
        s.push_str(&format!("meta optimizer_step {}\n", m.optimizer_step));
        for (name, v) in self.iter() {
            s.push_str(&format!("param {name} {}\n", shape_str(v.shape())));
            push_values(&mut s, v.data());
        }
        for name in &self.names {
            if let Some((m1, m2)) = self.moments.get(name) {
                s.push_str(&format!("moment {name} {}\n", shape_str(m1.shape())));
                push_values(&mut s, m1.data());
                push_values(&mut s, m2.data());
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::Parse {
                entry: "header".into(),
                reason: format!("expected `{MAGIC}`"),
            });
        }
        let mut store = ParameterStore::new();
        let mut ended = false;
        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("meta") => {
                    let key = tok.next().unwrap_or_default().to_string();
                    let val = tok.next().unwrap_or_default();
                    let bad = |reason: String| Error::Parse {
                        entry: format!("meta {key}"),
                        reason,
                    };
                    let m = &mut store.meta;
                    match key.as_str() {
                        "config_hash" => m.config_hash = from_dash(val),
                        "basis_fingerprint" => m.basis_fingerprint = from_dash(val),
                        "seed" => m.seed = val.parse().map_err(|e| bad(format!("{e}")))?,
                        "epoch" => m.epoch = val.parse().map_err(|e| bad(format!("{e}")))?,
                        "optimizer_step" => m.optimizer_step = val.parse().map_err(|e| bad(format!("{e}")))?,
                        "cubic" => m.cubic = val.parse().map_err(|e| bad(format!("{e}")))?,
                        _ => return Err(bad("unknown metadata key".into())),
                    }
                }
                Some(kind @ ("param" | "moment")) => {
                    let name = tok.next().unwrap_or_default().to_string();
                    let shape = parse_shape(tok.next().unwrap_or_default(), &name)?;
                    let n: usize = shape.iter().product();
                    let mut read = |what: &str| -> Result<RealArray> {
                        let vals = parse_values(lines.next(), &name, what)?;
                        if vals.len() != n {
                            return Err(Error::Parse {
                                entry: name.clone(),
                                reason: format!("{what}: expected {n} values, found {}", vals.len()),
                            });
                        }
                        RealArray::new(shape.clone(), vals)
                    };
                    if kind == "param" {
                        let v = read("values")?;
                        store.insert(name.clone(), v).map_err(|e| Error::Parse {
                            entry: name.clone(),
                            reason: e.to_string(),
                        })?;
                    } else {
                        let m1 = read("first moment")?;
                        let m2 = read("second moment")?;
                        if !store.contains(&name) {
                            return Err(Error::Parse {
                                entry: name,
                                reason: "moment for unknown parameter".into(),
                            });
                        }
                        store.moments.insert(name, (m1, m2));
                    }
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                Some(other) => {
                    return Err(Error::Parse {
                        entry: other.to_string(),
                        reason: "unknown record".into(),
                    })
                }
                None => {}
            }
        }
        if !ended {
            return Err(Error::Parse {
                entry: "end".into(),
                reason: "truncated checkpoint".into(),
            });
        }
        Ok(store)
    }
}

fn or_dash(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

fn from_dash(s: &str) -> String {
    if s == "-" {
        String::new()
    } else {
        s.to_string()
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str, entry: &str) -> Result<Vec<usize>> {
    let shape = s
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Parse {
            entry: entry.to_string(),
            reason: format!("bad shape `{s}`"),
        })?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Parse {
            entry: entry.to_string(),
            reason: format!("bad shape `{s}`"),
        });
    }
    Ok(shape)
}

fn push_values(s: &mut String, data: &[f64]) {
    let parts: Vec<String> = data.iter().map(|v| format!("{v:.16e}")).collect();
    s.push_str(&parts.join(" "));
    s.push('\n');
}

fn parse_values(line: Option<&str>, entry: &str, what: &str) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| Error::Parse {
        entry: entry.to_string(),
        reason: format!("{what}: missing value line"),
    })?;
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                entry: entry.to_string(),
                reason: format!("{what}: not a number: {t}"),
            })
        })
        .collect()
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, store.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: "checkpoint",
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ParameterStore::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.meta = StoreMeta {
            config_hash: "abc".into(),
            seed: 7,
            epoch: 3,
            cubic: 0.5,
            basis_fingerprint: "ff".into(),
            optimizer_step: 0,
        };
        s.insert("w", RealArray::matrix(2, 2, vec![0.1, -2.5e-300, 1.0 / 3.0, 7.0]).unwrap())
            .unwrap();
        s.insert("b", RealArray::vector(vec![f64::MIN_POSITIVE])).unwrap();
        s
    }

    #[test]
    fn save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.txt");
        let s = sample();
        save_checkpoint(&s, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), s);
    }

    #[test]
    fn malformed_entry_is_named() {
        let text = sample().to_text().replace("7.0000000000000000e0", "seven");
        match ParameterStore::from_text(&text) {
            Err(Error::Parse { entry, .. }) => assert_eq!(entry, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_is_rejected() {
        let text = sample().to_text().replace("end\n", "");
        assert!(ParameterStore::from_text(&text).is_err());
    }

    #[test]
    fn shape_mismatch_is_incompatible() {
        let mut other = ParameterStore::new();
        other.insert("w", RealArray::zeros(&[2, 3])).unwrap();
        other.insert("b", RealArray::zeros(&[1])).unwrap();
        assert!(matches!(sample().check_compatible(&other), Err(Error::Compatibility(_))));
        assert!(sample().check_compatible(&sample()).is_ok());
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let err = load_checkpoint(Path::new("/nonexistent/ck.txt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.txt"));
    }

    proptest! {
        #[test]
        fn roundtrip_any_finite_values(vals in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
            let mut s = ParameterStore::new();
            s.insert("x", RealArray::vector(vals.clone())).unwrap();
            s.set_moments("x", RealArray::vector(vals.clone()), RealArray::vector(vals));
            s.meta.optimizer_step = 4;
            let back = ParameterStore::from_text(&s.to_text()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
