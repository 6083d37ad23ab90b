use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of sample ids to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

/// Sorts `ids`, shuffles them with `seed` and deals them round-robin into `k` folds.
pub fn kfold_split<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::config(format!("k must be at least 2, got {k}")));
    }
    let mut sorted: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Data("duplicate sample ids".into()));
    }
    if sorted.len() < k {
        return Err(Error::Data(format!("{} ids cannot fill {k} folds", sorted.len())));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = sorted
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(SplitPlan { k, seed, folds })
}

impl SplitPlan {
    /// Ids in `fold`, sorted.
    pub fn fold(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// `(train ids, held-out ids)` with `fold` held out.
    pub fn train_val(&self, fold: usize) -> (Vec<String>, Vec<String>) {
        let (val, train): (Vec<_>, Vec<_>) = self.folds.iter().partition(|(_, &f)| f == fold);
        (
            train.into_iter().map(|(id, _)| id.clone()).collect(),
            val.into_iter().map(|(id, _)| id.clone()).collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: SplitPlan =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if plan.folds.values().any(|&f| f >= plan.k) {
            return Err(Error::Data(format!("{}: fold index out of range", path.display())));
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nuclei_sized_split() {
        let ids: Vec<String> = (0..670).map(|i| format!("cell{i:04}")).collect();
        let plan = kfold_split(&ids, 5, 3).unwrap();
        for f in 0..5 {
            assert_eq!(plan.fold(f).len(), 134);
        }
        assert_eq!(plan, kfold_split(&ids, 5, 3).unwrap());
        assert_ne!(plan, kfold_split(&ids, 5, 4).unwrap());
    }

    #[test]
    fn too_few_ids() {
        assert!(kfold_split(&["a", "b"], 3, 0).is_err());
        assert!(kfold_split(&["a", "b"], 1, 0).is_err());
    }

    #[test]
    fn order_of_ids_does_not_matter() {
        let a = kfold_split(&["x", "y", "z", "w"], 2, 9).unwrap();
        let b = kfold_split(&["w", "z", "y", "x"], 2, 9).unwrap();
        assert_eq!(a, b);
    }
}
