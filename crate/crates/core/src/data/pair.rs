use std::collections::HashMap;

use super::EmbeddingDataset;
use crate::error::{validation_err, Result};

/// Two views of the same samples, row-aligned with shared labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub a: EmbeddingDataset,
    pub b: EmbeddingDataset,
}

impl PairedDataset {
    pub fn count(&self) -> usize {
        self.a.count()
    }

    pub fn labels(&self) -> &[u16] {
        &self.a.labels
    }
}

/// Inner join on sample ids in the row order of `a`; an index join is used
/// only when neither side carries ids.
pub fn pair_datasets(a: &EmbeddingDataset, b: &EmbeddingDataset) -> Result<PairedDataset> {
    a.validate()?;
    b.validate()?;
    if a.class_names != b.class_names {
        return Err(validation_err!("the two datasets use different class lists"));
    }
    let (rows_a, rows_b) = match (&a.sample_ids, &b.sample_ids) {
        (Some(ids_a), Some(ids_b)) => {
            let index_b: HashMap<&str, usize> =
                ids_b.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let mut rows_a = Vec::new();
            let mut rows_b = Vec::new();
            for (i, id) in ids_a.iter().enumerate() {
                if let Some(&j) = index_b.get(id.as_str()) {
                    if a.labels[i] != b.labels[j] {
                        return Err(validation_err!(
                            "sample {id:?} labelled {} in one view and {} in the other",
                            a.labels[i],
                            b.labels[j]
                        ));
                    }
                    rows_a.push(i);
                    rows_b.push(j);
                }
            }
            (rows_a, rows_b)
        }
        (None, None) => {
            if a.count() != b.count() {
                return Err(validation_err!(
                    "index join needs equal row counts, got {} and {}",
                    a.count(),
                    b.count()
                ));
            }
            if let Some(i) = (0..a.count()).find(|&i| a.labels[i] != b.labels[i]) {
                return Err(validation_err!("row {i} has different labels in the two views"));
            }
            ((0..a.count()).collect(), (0..b.count()).collect())
        }
        _ => {
            return Err(validation_err!(
                "cannot pair a dataset with sample ids against one without"
            ))
        }
    };
    if rows_a.is_empty() {
        return Err(validation_err!("the two datasets share no sample ids"));
    }
    Ok(PairedDataset {
        a: a.subset(&rows_a),
        b: b.subset(&rows_b),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::default_class_names;
    use crate::error::Error;

    fn ds(ids: &[&str], labels: &[u16]) -> EmbeddingDataset {
        EmbeddingDataset {
            dim: 2,
            fm_name: "v".into(),
            class_names: default_class_names(8),
            labels: labels.to_vec(),
            vectors: (0..labels.len() * 2).map(|i| i as f32).collect(),
            sample_ids: Some(ids.iter().map(|s| s.to_string()).collect()),
        }
    }

    #[test]
    fn identical_ids_pair_fully_in_a_order() {
        let a = ds(&["x", "y", "z"], &[0, 1, 2]);
        let b = ds(&["z", "x", "y"], &[2, 0, 1]);
        let p = pair_datasets(&a, &b).unwrap();
        assert_eq!(p.a.sample_ids, a.sample_ids);
        assert_eq!(p.b.sample_ids, a.sample_ids);
        assert_eq!(p.b.row(0), b.row(1));
    }

    #[test]
    fn partial_overlap_and_symmetry() {
        let a = ds(&["x", "y", "z"], &[0, 1, 2]);
        let b = ds(&["y", "z", "w"], &[1, 2, 3]);
        let ab = pair_datasets(&a, &b).unwrap();
        assert_eq!(ab.a.sample_ids.as_ref().unwrap(), &["y", "z"]);
        let ba = pair_datasets(&b, &a).unwrap();
        let set = |p: &PairedDataset| -> BTreeSet<String> {
            p.a.sample_ids.clone().unwrap().into_iter().collect()
        };
        assert_eq!(set(&ab), set(&ba));
    }

    #[test]
    fn conflicting_labels_name_the_id() {
        let a = ds(&["x", "dup"], &[0, 2]);
        let b = ds(&["dup"], &[3]);
        match pair_datasets(&a, &b) {
            Err(Error::Validation(msg)) => assert!(msg.contains("dup")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_intersection_and_mixed_ids() {
        let a = ds(&["x"], &[0]);
        let b = ds(&["y"], &[0]);
        assert!(matches!(pair_datasets(&a, &b), Err(Error::Validation(_))));
        let mut c = ds(&["x"], &[0]);
        c.sample_ids = None;
        assert!(matches!(pair_datasets(&a, &c), Err(Error::Validation(_))));
    }

    #[test]
    fn index_join_without_ids() {
        let mut a = ds(&["x", "y"], &[0, 1]);
        let mut b = ds(&["x", "y"], &[0, 1]);
        a.sample_ids = None;
        b.sample_ids = None;
        assert_eq!(pair_datasets(&a, &b).unwrap().count(), 2);
        b.labels[1] = 4;
        assert!(pair_datasets(&a, &b).is_err());
    }
}
