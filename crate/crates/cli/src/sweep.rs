//! Grid expansion: one config file per point of a cartesian product of
//! overrides. Runs are left to the caller.

use std::fs;
use std::path::{Path, PathBuf};

use dfcil_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::overrides::{apply, parse_assignment};

/// `key=v1,v2,...` → key with its candidate values. Values are split on
/// commas outside brackets.
pub fn parse_axis(s: &str) -> Result<(String, Vec<String>)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis '{s}' is not key=v1,v2")))?;
    let mut values = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in raw.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                values.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    values.push(cur.trim().to_string());
    if values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("grid axis '{s}' has an empty value")));
    }
    Ok((key.trim().to_string(), values))
}

/// Every combination of axis values, last axis varying fastest. Each config
/// is named `<base>_<index>`.
pub fn expand(base: &ExperimentConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<ExperimentConfig>> {
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for c in &combos {
            for v in values {
                let mut c = c.clone();
                c.push(parse_assignment(&format!("{key}={v}"))?);
                next.push(c);
            }
        }
        combos = next;
    }
    combos
        .iter()
        .enumerate()
        .map(|(i, sets)| {
            let mut cfg = apply(base, sets)?;
            cfg.name = format!("{}_{i:03}", base.name);
            cfg.pipeline().validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Writes each grid point's config to `dir/<name>.toml`.
pub fn write_grid(configs: &[ExperimentConfig], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    configs
        .iter()
        .map(|c| {
            let path = dir.join(format!("{}.toml", c.name));
            fs::write(&path, c.to_toml()?)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_cartesian() {
        let axes = vec![
            parse_axis("synthesis.alpha_cn=1,10").unwrap(),
            parse_axis("weights.margin=0,0.5,1").unwrap(),
        ];
        let cfgs = expand(&ExperimentConfig::default(), &axes).unwrap();
        assert_eq!(cfgs.len(), 6);
        assert_eq!(cfgs[0].synthesis.alpha_cn, 1.0);
        assert_eq!(cfgs[1].weights.margin, 0.5);
        assert_eq!(cfgs[5].synthesis.alpha_cn, 10.0);
        assert_eq!(cfgs[5].name, "run_005");
    }

    #[test]
    fn bracketed_values_stay_whole() {
        let (_, v) = parse_axis("schedule.classes_per_task=[2,2,2,2],[4,4]").unwrap();
        assert_eq!(v, vec!["[2,2,2,2]", "[4,4]"]);
    }
}
