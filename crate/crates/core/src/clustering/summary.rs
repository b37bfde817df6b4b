//! Diagnostic JSON dump of a ledger, used for golden files.

use serde::{Deserialize, Serialize};

use super::{BlockLedger, Cluster};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub size: usize,
    /// FNV-1a over the little-endian `f64` bytes of the key centroid.
    pub key_checksum: String,
    pub value_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub start: usize,
    pub end: usize,
    pub sealed: bool,
    pub clusters: Vec<ClusterSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level1: Option<Vec<ClusterSummary>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub head: usize,
    pub sink_tokens: usize,
    pub buffer: [usize; 2],
    pub blocks: Vec<BlockSummary>,
}

fn checksum<T: Scalar>(v: &[T]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in v {
        for b in x.widen().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn summarize<T: Scalar>(c: &Cluster<T>) -> ClusterSummary {
    ClusterSummary {
        size: c.size(),
        key_checksum: checksum(&c.key_centroid),
        value_checksum: checksum(&c.value_centroid),
    }
}

impl<T: Scalar> BlockLedger<T> {
    pub fn summary(&self) -> LedgerSummary {
        let sealed = self.sealed_blocks().len();
        LedgerSummary {
            head: self.head(),
            sink_tokens: self.sink_tokens(),
            buffer: [self.buffer().start, self.buffer().end],
            blocks: self
                .blocks()
                .enumerate()
                .map(|(i, b)| BlockSummary {
                    start: b.start,
                    end: b.end,
                    sealed: i < sealed,
                    clusters: b.clusters.iter().map(summarize).collect(),
                    level1: b.level1.as_ref().map(|l| l.iter().map(summarize).collect()),
                })
                .collect(),
        }
    }

    pub fn dump_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

impl LedgerSummary {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineConfig;
    use crate::rope::windowed_key_view;

    #[test]
    fn dump_restores_to_an_equal_summary() {
        let keys: Vec<f32> = (0..80).map(|i| ((i * 37 % 11) as f32).sin()).collect();
        let cfg = EngineConfig {
            sink_tokens: 2,
            local_buffer: 4,
            tokens_per_centroid: 4,
            ..EngineConfig::default()
        };
        let l = BlockLedger::prefill(0, windowed_key_view(&keys[..]), &keys, 4, 20, &cfg).unwrap();
        let json = l.dump_json().unwrap();
        let back = LedgerSummary::from_json(&json).unwrap();
        assert_eq!(back, l.summary());
        assert_eq!(back.buffer, [16, 20]);
        assert_eq!(back.blocks.iter().map(|b| b.clusters.iter().map(|c| c.size).sum::<usize>()).sum::<usize>(), 14);
    }
}
