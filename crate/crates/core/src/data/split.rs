use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Dataset, DistLabel, LabeledGraph};

/// Fraction of normal graphs kept for training by [`anomaly_split`] and
/// [`train_test_split`].
pub const TRAIN_FRACTION: f64 = 0.8;

fn shuffled<T>(mut items: Vec<T>, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    items
}

fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).floor() as usize
}

/// Interleaves `min(|id|, |ood|)` graphs from each side, labelled 0 and 1,
/// in a seed-determined order. Each side contributes its leading graphs.
pub fn mix_test_set(id: &Dataset, ood: &Dataset, seed: u64) -> Result<Dataset> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if id.feature_dim != ood.feature_dim {
        return Err(Error::FeatureDim {
            left: id.feature_dim,
            right: ood.feature_dim,
        });
    }
    let k = id.len().min(ood.len());
    let tagged = |ds: &Dataset, label| -> Vec<LabeledGraph> {
        ds.graphs[..k]
            .iter()
            .map(|g| g.clone().with_dist_label(label))
            .collect()
    };
    let mut graphs = tagged(id, DistLabel::Id);
    graphs.extend(tagged(ood, DistLabel::Ood));
    let mut mixed = Dataset::new(
        format!("{}+{}", id.name, ood.name),
        id.feature_dim,
        shuffled(graphs, seed),
    );
    mixed.node_label_dim = id.node_label_dim.min(ood.node_label_dim);
    Ok(mixed)
}

/// Seeded split of a dataset into training and held-out parts;
/// `floor(fraction · n)` graphs go to training. Distribution labels are left
/// untouched.
pub fn train_test_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
    }
    let graphs = shuffled(dataset.graphs.clone(), seed);
    let cut = train_count(graphs.len(), fraction);
    let (train, test) = graphs.split_at(cut);
    let part = |suffix: &str, gs: &[LabeledGraph]| Dataset {
        name: format!("{}-{suffix}", dataset.name),
        feature_dim: dataset.feature_dim,
        node_label_dim: dataset.node_label_dim,
        graphs: gs.to_vec(),
    };
    Ok((part("train", train), part("test", test)))
}

/// Anomaly-detection protocol: the rarest class (lowest class index on a tie)
/// becomes the anomaly class. 80% of the remaining graphs form the unlabelled
/// training set; the other 20% plus every anomaly form the test set, with
/// distribution labels 0 and 1 respectively.
pub fn anomaly_split(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let classes = dataset.classes();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let count = |c: usize| dataset.graphs.iter().filter(|g| g.class_label == c).count();
    // `classes` is sorted, so min_by_key keeps the lowest index on ties.
    let anomaly = *classes.iter().min_by_key(|&&c| count(c)).unwrap();

    let (anomalies, normals): (Vec<_>, Vec<_>) = dataset
        .graphs
        .iter()
        .cloned()
        .map(|mut g| {
            g.dist_label = None;
            g
        })
        .partition(|g| g.class_label == anomaly);
    let normals = shuffled(normals, seed);
    let cut = train_count(normals.len(), TRAIN_FRACTION);
    let train = normals[..cut].to_vec();
    let mut test: Vec<LabeledGraph> = normals[cut..]
        .iter()
        .cloned()
        .map(|g| g.with_dist_label(DistLabel::Id))
        .collect();
    test.extend(anomalies.into_iter().map(|g| g.with_dist_label(DistLabel::Ood)));
    let make = |suffix: &str, graphs| Dataset {
        name: format!("{}-{suffix}", dataset.name),
        feature_dim: dataset.feature_dim,
        node_label_dim: dataset.node_label_dim,
        graphs,
    };
    Ok((make("train", train), make("test", test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn labelled(n: usize, class: usize, seed: u64) -> Vec<LabeledGraph> {
        synth_dataset(&SynthSpec::er(n, 2, 0.0, 1.0, seed))
            .unwrap()
            .graphs
            .into_iter()
            .map(|mut g| {
                g.class_label = class;
                g
            })
            .collect()
    }

    #[test]
    fn mix_uses_min_rule() {
        let id = synth_dataset(&SynthSpec::er(10, 3, 0.0, 1.0, 1)).unwrap();
        let ood = synth_dataset(&SynthSpec::er(7, 3, 2.0, 1.0, 2)).unwrap();
        let mixed = mix_test_set(&id, &ood, 9).unwrap();
        assert_eq!(mixed.len(), 14);
        let labels = mixed.dist_labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == DistLabel::Ood).count(), 7);
        assert_eq!(mix_test_set(&id, &ood, 9).unwrap(), mixed);
        assert_ne!(mix_test_set(&id, &ood, 10).unwrap(), mixed);
    }

    #[test]
    fn mix_errors() {
        let id = synth_dataset(&SynthSpec::er(4, 3, 0.0, 1.0, 1)).unwrap();
        let empty = Dataset::new("e", 3, vec![]);
        assert!(matches!(mix_test_set(&id, &empty, 0), Err(Error::EmptyDataset)));
        let other = synth_dataset(&SynthSpec::er(4, 2, 0.0, 1.0, 1)).unwrap();
        assert!(matches!(
            mix_test_set(&id, &other, 0),
            Err(Error::FeatureDim { left: 3, right: 2 })
        ));
    }

    #[test]
    fn anomaly_split_arithmetic() {
        let mut graphs = labelled(90, 0, 1);
        graphs.extend(labelled(10, 1, 2));
        let ds = Dataset::new("a", 2, graphs);
        let (train, test) = anomaly_split(&ds, 3).unwrap();
        assert_eq!(train.len(), 72);
        assert!(train
            .graphs
            .iter()
            .all(|g| g.dist_label.is_none() && g.class_label == 0));
        let labels = test.dist_labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == DistLabel::Id).count(), 18);
        assert_eq!(labels.iter().filter(|&&l| l == DistLabel::Ood).count(), 10);
        for g in &test.graphs {
            assert_eq!(g.dist_label == Some(DistLabel::Ood), g.class_label == 1);
        }
    }

    #[test]
    fn anomaly_tie_goes_to_lower_class() {
        let mut graphs = labelled(5, 3, 1);
        graphs.extend(labelled(5, 1, 2));
        let (_, test) = anomaly_split(&Dataset::new("t", 2, graphs), 0).unwrap();
        for g in &test.graphs {
            assert_eq!(g.dist_label == Some(DistLabel::Ood), g.class_label == 1);
        }
    }

    #[test]
    fn single_class_rejected() {
        let ds = Dataset::new("s", 2, labelled(6, 0, 1));
        assert!(matches!(anomaly_split(&ds, 0), Err(Error::SingleClass)));
    }

    #[test]
    fn train_test_split_sizes() {
        let ds = Dataset::new("s", 2, labelled(25, 0, 1));
        let (tr, te) = train_test_split(&ds, TRAIN_FRACTION, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (20, 5));
    }
}
