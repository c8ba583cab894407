use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where an artifact came from. Written into every file the tools emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
}

impl Provenance {
    pub fn new(seed: Option<u64>) -> Self {
        Self {
            tool: "qesdet".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: None,
            command: Vec::new(),
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Self {
        self.config_hash = Some(hash_json(config));
        self
    }

    pub fn with_command(mut self, args: impl IntoIterator<Item = String>) -> Self {
        self.command = args.into_iter().collect();
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable config");
    sha256_hex(&bytes)
}
