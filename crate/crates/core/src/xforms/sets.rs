//! Transform tables: per-kind level ranges plus named sets over them.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{BasicTransform, TransformError, TransformKind, TransformSet};

/// Level grid of one kind. Kinds without a range get the single level 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindSpec {
    pub kind: TransformKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    pub levels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    pub id: String,
    pub n: usize,
    pub members: Vec<TransformKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformTable {
    pub transforms: Vec<KindSpec>,
    pub sets: Vec<SetSpec>,
}

const BUILTIN_JSON: &str = include_str!("../../../../configs/transform_sets.json");

impl TransformTable {
    /// The four standard sets `psi1`..`psi4`.
    pub fn builtin() -> &'static TransformTable {
        static T: OnceLock<TransformTable> = OnceLock::new();
        T.get_or_init(|| Self::from_json(BUILTIN_JSON).expect("builtin transform table"))
    }

    pub fn from_json(text: &str) -> Result<Self, TransformError> {
        let table: Self = serde_json::from_str(text).map_err(|e| TransformError::Invalid(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        for (i, k) in self.transforms.iter().enumerate() {
            if self.transforms[..i].iter().any(|o| o.kind == k.kind) {
                return Err(TransformError::Invalid(format!("{} listed twice", k.kind.name())));
            }
            if k.levels == 0 {
                return Err(TransformError::Invalid(format!("{} has zero levels", k.kind.name())));
            }
            if k.range.is_none() && !k.kind.is_levelless() {
                return Err(TransformError::Invalid(format!("{} needs a range", k.kind.name())));
            }
            TransformSet::new(k.kind.name(), vec![self.basic(k.kind)?], 1)?;
        }
        for (i, s) in self.sets.iter().enumerate() {
            if self.sets[..i].iter().any(|o| o.id == s.id) {
                return Err(TransformError::Invalid(format!("set {:?} listed twice", s.id)));
            }
            self.build(&s.id)?;
        }
        Ok(())
    }

    fn basic(&self, kind: TransformKind) -> Result<BasicTransform, TransformError> {
        let spec = self
            .transforms
            .iter()
            .find(|k| k.kind == kind)
            .ok_or_else(|| TransformError::Invalid(format!("no levels defined for {}", kind.name())))?;
        let [a, b] = spec.range.unwrap_or([0.0, 0.0]);
        Ok(BasicTransform::with_grid(kind, a, b, spec.levels))
    }

    /// Builds the set `id`; `Ψk` is accepted as an alias of `psik`.
    pub fn build(&self, id: &str) -> Result<TransformSet, TransformError> {
        let key = id.replace('Ψ', "psi").to_lowercase();
        let spec = self.sets.iter().find(|s| s.id == key).ok_or_else(|| TransformError::UnknownSet(id.to_string()))?;
        let members = spec.members.iter().map(|&k| self.basic(k)).collect::<Result<Vec<_>, _>>()?;
        TransformSet::new(spec.id.clone(), members, spec.n)
    }
}

/// Builds one of the standard sets.
pub fn build_set(id: &str) -> Result<TransformSet, TransformError> {
    TransformTable::builtin().build(id)
}
