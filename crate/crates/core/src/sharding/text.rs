use std::fmt;
use std::str::FromStr;

use super::{DeviceId, Sharding, ShardingError};

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Sharding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_replicated() {
            f.write_str("replicated")?;
        } else {
            write!(f, "devices=[{}]{}", join(&self.tile_dims), join(&self.devices))?;
            if self.partial {
                f.write_str(" last_tile_dim_replicate")?;
            }
        }
        if !self.unspecified.is_empty() {
            write!(f, " unspecified_dims={{{}}}", join(&self.unspecified))?;
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, ShardingError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| ShardingError::Parse(format!("bad {what} entry '{}'", x.trim()))))
        .collect()
}

impl FromStr for Sharding {
    type Err = ShardingError;

    fn from_str(s: &str) -> Result<Sharding, ShardingError> {
        let mut rest = s.trim();
        let mut unspecified = Vec::new();
        if let Some(pos) = rest.find("unspecified_dims=") {
            let tail = rest[pos + "unspecified_dims=".len()..].trim();
            let inner = tail
                .strip_prefix('{')
                .and_then(|t| t.strip_suffix('}'))
                .ok_or_else(|| ShardingError::Parse("unspecified_dims must be a {..} list at the end".into()))?;
            unspecified = parse_list::<usize>(inner, "unspecified_dims")?;
            rest = rest[..pos].trim();
        }
        let base = if rest == "replicated" {
            Sharding::replicated()
        } else if let Some(body) = rest.strip_prefix("devices=[") {
            let close = body.find(']').ok_or_else(|| ShardingError::Parse("missing ']' in devices".into()))?;
            let dims = parse_list::<usize>(&body[..close], "tile dim")?;
            let mut tail = body[close + 1..].trim();
            let partial = if let Some(t) = tail.strip_suffix("last_tile_dim_replicate") {
                tail = t.trim();
                true
            } else {
                false
            };
            let devices = parse_list::<DeviceId>(tail, "device id")?;
            if dims.is_empty() {
                return Err(ShardingError::Parse("empty tile dims".into()));
            }
            if partial {
                Sharding::partial_tiled(dims, devices)?
            } else {
                Sharding::tiled(dims, devices)?
            }
        } else {
            return Err(ShardingError::Parse(format!("expected 'replicated' or 'devices=[..]', found '{rest}'")));
        };
        Ok(base.with_unspecified(unspecified))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for text in [
            "replicated",
            "devices=[2,2]0,2,1,3",
            "devices=[2,1,2]0,1,2,3 last_tile_dim_replicate",
            "devices=[4]3,2,1,0 unspecified_dims={0}",
            "replicated unspecified_dims={0,1}",
        ] {
            let s: Sharding = text.parse().unwrap();
            assert_eq!(s.to_string(), text);
        }
    }

    #[test]
    fn rejects_duplicates() {
        assert_eq!("devices=[2]0,0".parse::<Sharding>(), Err(ShardingError::DuplicateDevice(0)));
        assert!("devices=[3]0,1".parse::<Sharding>().is_err());
        assert!("tiles".parse::<Sharding>().is_err());
    }
}
