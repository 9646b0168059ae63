//! Label schema: class table with laterality partners, related-class sets,
//! tiny-class flags and per-class loss weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss weight given to tiny structures unless the file overrides it.
pub const TINY_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub laterality_partner: Option<usize>,
    #[serde(default)]
    pub related: Vec<usize>,
    #[serde(default)]
    pub tiny: bool,
}

/// Validated class table. Class ids are dense `0..K` and id 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSchema {
    pub classes: Vec<ClassInfo>,
    /// Per-class positive weights; missing means 10 for tiny classes, 1 otherwise.
    #[serde(default)]
    pub loss_weights: Vec<f64>,
}

impl LabelSchema {
    /// Fill default weights and check every structural invariant.
    pub fn new(classes: Vec<ClassInfo>, loss_weights: Option<Vec<f64>>) -> Result<Self> {
        let mut s = Self { classes, loss_weights: loss_weights.unwrap_or_default() };
        if s.loss_weights.is_empty() {
            s.loss_weights = s.classes.iter().map(|c| if c.tiny { TINY_WEIGHT } else { 1.0 }).collect();
        }
        s.validate()?;
        Ok(s)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn partner(&self, k: usize) -> Option<usize> {
        self.classes.get(k).and_then(|c| c.laterality_partner)
    }

    pub fn related(&self, k: usize) -> &[usize] {
        &self.classes[k].related
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.loss_weights[k]
    }

    pub fn has_partners(&self) -> bool {
        self.classes.iter().any(|c| c.laterality_partner.is_some())
    }

    pub fn tiny_classes(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.tiny).map(|c| c.id).collect()
    }

    pub fn class_by_name(&self, name: &str) -> Option<usize> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// Channel permutation exchanging every class with its partner.
    pub fn laterality_permutation(&self) -> Vec<usize> {
        (0..self.num_classes()).map(|k| self.partner(k).unwrap_or(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k < 2 {
            return Err(Error::Validation("schema needs background plus at least one class".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::Validation(format!(
                    "class ids must be dense and ordered: position {i} holds id {}",
                    c.id
                )));
            }
            if let Some(p) = c.laterality_partner {
                if p == i {
                    return Err(Error::Validation(format!("class {i} ({}) is its own partner", c.name)));
                }
                let back = self
                    .classes
                    .get(p)
                    .ok_or_else(|| Error::Validation(format!("class {i} ({}) names unknown partner {p}", c.name)))?;
                if back.laterality_partner != Some(i) {
                    return Err(Error::Validation(format!(
                        "asymmetric laterality: partner({i}) = {p} but partner({p}) = {:?}",
                        back.laterality_partner
                    )));
                }
            }
            for &r in &c.related {
                if r == i {
                    return Err(Error::Validation(format!("class {i} lists itself as related")));
                }
                if r >= k {
                    return Err(Error::Validation(format!("class {i} lists unknown related id {r}")));
                }
            }
            let mut sorted = c.related.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != c.related.len() {
                return Err(Error::Validation(format!("class {i} repeats a related id")));
            }
        }
        if self.loss_weights.len() != k {
            return Err(Error::Validation(format!("{} loss weights for {k} classes", self.loss_weights.len())));
        }
        if let Some((i, w)) = self.loss_weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Validation(format!("loss weight of class {i} must be positive, got {w}")));
        }
        Ok(())
    }

    /// The synthetic dental schema the phantom generator draws.
    ///
    /// Three tooth pairs (incisor, canine, molar), the inferior alveolar
    /// nerves, and three tiny structures: both incisive nerves and the lingual
    /// foramen.
    pub fn dental() -> Self {
        let c = |id: usize, name: &str, partner: Option<usize>, related: &[usize], tiny: bool| ClassInfo {
            id,
            name: name.into(),
            laterality_partner: partner,
            related: related.to_vec(),
            tiny,
        };
        let classes = vec![
            c(0, "background", None, &[], false),
            c(1, "upper_left_incisor", Some(2), &[2, 3], false),
            c(2, "upper_right_incisor", Some(1), &[1, 4], false),
            c(3, "upper_left_canine", Some(4), &[4, 1, 5], false),
            c(4, "upper_right_canine", Some(3), &[3, 2, 6], false),
            c(5, "upper_left_molar", Some(6), &[6, 3], false),
            c(6, "upper_right_molar", Some(5), &[5, 4], false),
            c(7, "left_inferior_alveolar_nerve", Some(8), &[8, 9], false),
            c(8, "right_inferior_alveolar_nerve", Some(7), &[7, 10], false),
            c(9, "left_incisive_nerve", Some(10), &[10, 7], true),
            c(10, "right_incisive_nerve", Some(9), &[9, 8], true),
            c(11, "lingual_foramen", None, &[], true),
        ];
        Self::new(classes, None).expect("bundled schema is valid")
    }

    /// Nerve-type classes: the click targets in interactive mode.
    pub fn nerve_classes(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.name.contains("nerve") || c.name.contains("foramen")).map(|c| c.id).collect()
    }
}

pub fn load_schema(path: &Path) -> Result<LabelSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schema(&text)
}

pub fn parse_schema(text: &str) -> Result<LabelSchema> {
    let raw: LabelSchema = serde_json::from_str(text)?;
    let weights = (!raw.loss_weights.is_empty()).then_some(raw.loss_weights);
    LabelSchema::new(raw.classes, weights)
}

pub fn save_schema(schema: &LabelSchema, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(schema)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_schema_shape() {
        let s = LabelSchema::dental();
        assert_eq!(s.num_classes(), 12);
        assert_eq!(s.tiny_classes(), vec![9, 10, 11]);
        for k in s.tiny_classes() {
            assert_eq!(s.weight(k), 10.0);
        }
        assert_eq!(s.weight(1), 1.0);
        let perm = s.laterality_permutation();
        for k in 0..12 {
            assert_eq!(perm[perm[k]], k);
        }
        assert_eq!(s.nerve_classes(), vec![7, 8, 9, 10, 11]);
    }

    #[test]
    fn json_round_trip() {
        let s = LabelSchema::dental();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(parse_schema(&text).unwrap(), s);
    }

    #[test]
    fn broken_involution_rejected() {
        let mut s = LabelSchema::dental();
        s.classes[1].laterality_partner = Some(2);
        s.classes[2].laterality_partner = Some(3);
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("asymmetric"), "{err}");
    }

    #[test]
    fn self_partner_and_unknown_related_rejected() {
        let mut s = LabelSchema::dental();
        s.classes[11].laterality_partner = Some(11);
        assert!(s.validate().unwrap_err().to_string().contains("own partner"));
        let mut s = LabelSchema::dental();
        s.classes[11].related = vec![40];
        assert!(s.validate().unwrap_err().to_string().contains("unknown related"));
    }

    #[test]
    fn nonpositive_weight_rejected() {
        let mut s = LabelSchema::dental();
        s.loss_weights[3] = 0.0;
        assert!(s.validate().is_err());
    }
}
