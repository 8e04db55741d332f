//! Versioned JSON envelope for instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::Instance;

pub const INSTANCE_FORMAT: &str = "dpda-instance";
pub const INSTANCE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    instance: T,
}

/// Pretty-printed JSON; identical inputs give byte-identical output.
pub fn instance_to_json(inst: &Instance) -> Result<String> {
    let env = Envelope { format: INSTANCE_FORMAT.to_string(), version: INSTANCE_VERSION, instance: inst };
    serde_json::to_string_pretty(&env).map_err(|e| Error::Format(e.to_string()))
}

pub fn instance_from_json(text: &str) -> Result<Instance> {
    let env: Envelope<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if env.format != INSTANCE_FORMAT {
        return Err(Error::Format(format!("expected format `{INSTANCE_FORMAT}`, found `{}`", env.format)));
    }
    if env.version != INSTANCE_VERSION {
        return Err(Error::Format(format!("unsupported instance version {}", env.version)));
    }
    serde_json::from_value(env.instance).map_err(|e| Error::Format(e.to_string()))
}
