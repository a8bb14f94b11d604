//! Discrete architectures and their JSON file format.

use crate::error::{Error, Result};
use crate::fusion_ops::FusionOpKind;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// The three modality-specific modules, in data-flow order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsmKind {
    Early,
    Middle,
    Late,
}

impl MsmKind {
    pub const ALL: [MsmKind; 3] = [MsmKind::Early, MsmKind::Middle, MsmKind::Late];

    pub fn as_str(self) -> &'static str {
        match self {
            MsmKind::Early => "early",
            MsmKind::Middle => "middle",
            MsmKind::Late => "late",
        }
    }

    /// Name of this module's output when it appears in a downstream pool.
    pub fn output_name(self) -> String {
        format!("msm_{}", self.as_str())
    }
}

impl fmt::Display for MsmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeGene {
    pub op: FusionOpKind,
    /// Node ids: 0 and 1 are the cell inputs, `2 + k` is intermediate node `k`.
    pub preds: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsmGenotype {
    /// Names of the pool entries, in pool order.
    pub pool: Vec<String>,
    /// Chosen pool indices `(j, h)` for the two cell inputs.
    pub inputs: [usize; 2],
    pub nodes: Vec<NodeGene>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WiringEdge {
    pub from: MsmKind,
    pub to: MsmKind,
    /// Whether the downstream cell picked this output as one of its inputs.
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenotypeMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub msm_early: Option<MsmGenotype>,
    pub msm_middle: Option<MsmGenotype>,
    pub msm_late: Option<MsmGenotype>,
    pub wiring: Vec<WiringEdge>,
    pub meta: GenotypeMeta,
}

impl Genotype {
    pub fn msm(&self, kind: MsmKind) -> Option<&MsmGenotype> {
        match kind {
            MsmKind::Early => self.msm_early.as_ref(),
            MsmKind::Middle => self.msm_middle.as_ref(),
            MsmKind::Late => self.msm_late.as_ref(),
        }
    }

    pub fn msm_mut(&mut self, kind: MsmKind) -> &mut Option<MsmGenotype> {
        match kind {
            MsmKind::Early => &mut self.msm_early,
            MsmKind::Middle => &mut self.msm_middle,
            MsmKind::Late => &mut self.msm_late,
        }
    }

    /// Present modules in data-flow order.
    pub fn present(&self) -> impl Iterator<Item = (MsmKind, &MsmGenotype)> {
        MsmKind::ALL
            .into_iter()
            .filter_map(move |k| self.msm(k).map(|m| (k, m)))
    }

    /// Structural checks: index ranges, DAG order, distinct inputs, wiring.
    pub fn validate(&self) -> Result<()> {
        let mut any = false;
        for (kind, m) in self.present() {
            any = true;
            if m.pool.len() < 2 {
                return Err(Error::Parse(format!("{kind}: pool needs at least 2 entries")));
            }
            for &i in &m.inputs {
                if i >= m.pool.len() {
                    return Err(Error::Parse(format!(
                        "{kind}: input index {i} out of range for pool of {}",
                        m.pool.len()
                    )));
                }
            }
            if m.inputs[0] == m.inputs[1] {
                return Err(Error::Parse(format!("{kind}: both inputs select entry {}", m.inputs[0])));
            }
            if m.nodes.is_empty() {
                return Err(Error::Parse(format!("{kind}: cell has no intermediate nodes")));
            }
            for (k, node) in m.nodes.iter().enumerate() {
                for &p in &node.preds {
                    if p >= 2 + k {
                        return Err(Error::Parse(format!(
                            "{kind}: node {k} predecessor {p} is not an earlier node"
                        )));
                    }
                }
            }
            for (idx, name) in m.pool.iter().enumerate() {
                if let Some(up) = MsmKind::ALL.iter().find(|u| u.output_name() == *name) {
                    if *up >= kind {
                        return Err(Error::Parse(format!(
                            "{kind}: pool entry {idx} refers to non-upstream module {up}"
                        )));
                    }
                    if self.msm(*up).is_none() {
                        return Err(Error::Parse(format!(
                            "{kind}: pool entry {idx} refers to absent module {up}"
                        )));
                    }
                }
            }
        }
        if !any {
            return Err(Error::Parse("genotype has no modules".into()));
        }
        if self.wiring != self.derive_wiring() {
            return Err(Error::Parse("wiring record does not match pools and inputs".into()));
        }
        Ok(())
    }

    /// Wiring implied by the pools and chosen inputs.
    pub fn derive_wiring(&self) -> Vec<WiringEdge> {
        let mut edges = Vec::new();
        for (to, m) in self.present() {
            for (idx, name) in m.pool.iter().enumerate() {
                for from in MsmKind::ALL {
                    if from.output_name() == *name {
                        edges.push(WiringEdge {
                            from,
                            to,
                            selected: m.inputs.contains(&idx),
                        });
                    }
                }
            }
        }
        edges
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Genotype> {
        let g: Genotype = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Genotype> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> Genotype {
        let early = MsmGenotype {
            pool: vec!["a.early".into(), "b.early".into()],
            inputs: [0, 1],
            nodes: vec![
                NodeGene {
                    op: FusionOpKind::GuidedAttention,
                    preds: [0, 1],
                },
                NodeGene {
                    op: FusionOpKind::WeightedSum,
                    preds: [2, 1],
                },
            ],
        };
        let late = MsmGenotype {
            pool: vec!["a.late".into(), "b.late".into(), "msm_early".into()],
            inputs: [2, 0],
            nodes: vec![NodeGene {
                op: FusionOpKind::Glu,
                preds: [0, 1],
            }],
        };
        let mut g = Genotype {
            msm_early: Some(early),
            msm_middle: None,
            msm_late: Some(late),
            wiring: vec![],
            meta: GenotypeMeta {
                seed: 3,
                config_hash: "abc".into(),
            },
        };
        g.wiring = g.derive_wiring();
        g
    }

    #[test]
    fn json_round_trip() {
        let g = sample();
        assert!(g.validate().is_ok());
        let text = g.to_json();
        assert_eq!(Genotype::parse(&text).unwrap(), g);
        assert_eq!(
            g.wiring,
            vec![WiringEdge {
                from: MsmKind::Early,
                to: MsmKind::Late,
                selected: true
            }]
        );
    }

    #[test]
    fn truncated_file_reports_position() {
        let text = sample().to_json();
        let err = Genotype::parse(&text[..text.len() / 2]).unwrap_err();
        let Error::Parse(msg) = err else {
            panic!("expected parse error")
        };
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn op_strings_must_match_exactly() {
        let text = sample().to_json();
        assert!(text.contains("\"glu\""));
        assert!(Genotype::parse(&text.replace("\"glu\"", "\"GLU \"")).is_err());
    }

    #[test]
    fn out_of_range_indices_rejected() {
        let mut g = sample();
        g.msm_late.as_mut().unwrap().inputs = [5, 0];
        assert!(g.validate().is_err());
        let mut g = sample();
        g.msm_early.as_mut().unwrap().nodes[0].preds = [2, 0];
        assert!(g.validate().is_err());
        let mut g = sample();
        g.msm_early.as_mut().unwrap().inputs = [1, 1];
        assert!(g.validate().is_err());
    }
}
