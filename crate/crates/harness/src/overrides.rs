//! `dotted.path=value` overrides applied to a parsed config document.

use toml::{Table, Value};

use crate::error::{HarnessError, Result};

/// Splits `a.b.c=value` and parses the value as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (path, value) = raw
        .split_once('=')
        .ok_or_else(|| HarnessError::MalformedOverride(raw.to_string()))?;
    let keys: Vec<String> = path.trim().split('.').map(|k| k.trim().to_string()).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::MalformedOverride(raw.to_string()));
    }
    let value = value.trim();
    if value.is_empty() {
        return Err(HarnessError::MalformedOverride(raw.to_string()));
    }
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((keys, parsed))
}

pub fn apply_overrides(doc: &mut Table, overrides: &[String]) -> Result<()> {
    for raw in overrides {
        let (keys, value) = parse_override(raw)?;
        let (last, parents) = keys.split_last().expect("nonempty path");
        let mut table = &mut *doc;
        for k in parents {
            let entry = table.entry(k.clone()).or_insert_with(|| Value::Table(Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| HarnessError::MalformedOverride(format!("{raw} (`{k}` is not a table)")))?;
        }
        table.insert(last.clone(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_and_strings() {
        let (k, v) = parse_override("trainer.learning_rate=0.01").unwrap();
        assert_eq!(k, ["trainer", "learning_rate"]);
        assert_eq!(v, Value::Float(0.01));
        assert_eq!(
            parse_override("seeds=[1, 2]").unwrap().1,
            Value::Array(vec![1.into(), 2.into()])
        );
        assert_eq!(
            parse_override("trainer.objective.kind=tbrm").unwrap().1,
            Value::String("tbrm".into())
        );
        assert_eq!(parse_override("name=\"x y\"").unwrap().1, Value::String("x y".into()));
    }

    #[test]
    fn malformed() {
        for bad in ["no_equals", "=3", "a..b=1", "a="] {
            assert!(
                matches!(parse_override(bad), Err(HarnessError::MalformedOverride(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn nested_insert() {
        let mut doc: Table = "[trainer]\niterations = 3\n".parse().unwrap();
        apply_overrides(
            &mut doc,
            &["trainer.buffer.capacity=8".into(), "trainer.iterations=5".into()],
        )
        .unwrap();
        assert_eq!(doc["trainer"]["iterations"].as_integer(), Some(5));
        assert_eq!(doc["trainer"]["buffer"]["capacity"].as_integer(), Some(8));
        assert!(apply_overrides(&mut doc, &["trainer.iterations.x=1".into()]).is_err());
    }
}
