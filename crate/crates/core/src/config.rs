//! Flat `key = value` configuration text.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses one `key = value` pair per line. Blank lines and `#` comments are
/// ignored; later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: format!("expected `key = value`, got {:?}", raw),
        })?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                msg: "empty key".into(),
            });
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Typed lookup helper over a parsed key/value map. Every key read is
/// recorded so leftovers can be reported as unknown.
pub struct KvReader<'a> {
    map: &'a BTreeMap<String, String>,
    seen: std::cell::RefCell<Vec<String>>,
}

impl<'a> KvReader<'a> {
    pub fn new(map: &'a BTreeMap<String, String>) -> Self {
        Self {
            map,
            seen: Default::default(),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.seen.borrow_mut().push(key.to_string());
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{} = {:?}: {}", key, v, e))),
        }
    }

    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn set_opt<T: FromStr>(&self, key: &str, slot: &mut Option<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = Some(v);
        }
        Ok(())
    }

    /// Keys present in the map that were never read.
    pub fn unknown_keys(&self) -> Vec<String> {
        let seen = self.seen.borrow();
        self.map
            .keys()
            .filter(|k| !seen.contains(k))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_overrides() {
        let m = parse_kv("# header\nseed = 3\n\nnum-users=10 # trailing\nseed=4\n").unwrap();
        assert_eq!(m["seed"], "4");
        assert_eq!(m["num_users"], "10");
    }

    #[test]
    fn missing_equals_reports_line() {
        match parse_kv("a = 1\nbogus\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn reader_tracks_unknown() {
        let m = parse_kv("a = 1\nb = x\n").unwrap();
        let r = KvReader::new(&m);
        let mut a = 0u32;
        r.set("a", &mut a).unwrap();
        assert_eq!(a, 1);
        assert_eq!(r.unknown_keys(), vec!["b".to_string()]);
        let bad: Result<Option<u32>> = r.get("b");
        assert!(bad.is_err());
    }
}
