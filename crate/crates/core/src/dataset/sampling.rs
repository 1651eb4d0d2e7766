use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Corpus, Split, WriterIndex};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// Upper bound on exemplars per style condition.
pub const MAX_EXEMPLARS: usize = 5;

/// Anchor/positive/negative triplets, as indices into a [`Corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Classifier label of each anchor's writer.
    pub anchor_labels: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Draws `batch_size` triplets from the training split.
///
/// Anchors are uniform over training samples whose writer has a second
/// training sample; the positive is uniform over that writer's other samples.
/// The negative writer is uniform over the remaining writers, then the
/// negative sample is uniform within that writer.
pub fn sample_triplets<R: Rng + ?Sized>(
    corpus: &Corpus,
    writers: &WriterIndex,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    let train_writers: Vec<(&str, Vec<usize>)> = writers
        .writers()
        .iter()
        .map(|w| {
            let idx = corpus
                .writer_samples(w)
                .unwrap_or(&[])
                .iter()
                .copied()
                .filter(|&i| corpus.get(i).split == Split::Train)
                .collect::<Vec<_>>();
            (w.as_str(), idx)
        })
        .filter(|(_, idx)| !idx.is_empty())
        .collect();
    if train_writers.len() < 2 {
        return Err(Error::Data(
            "triplet sampling needs at least two writers in the train split".into(),
        ));
    }
    let eligible: Vec<(usize, usize)> = train_writers
        .iter()
        .enumerate()
        .filter(|(_, (_, idx))| idx.len() >= 2)
        .flat_map(|(w, (_, idx))| idx.iter().map(move |&i| (w, i)))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data(
            "no eligible anchors: every writer has a single training sample".into(),
        ));
    }

    let mut batch = TripletBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
        anchor_labels: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let (w, anchor) = eligible[rng.random_range(0..eligible.len())];
        let own = &train_writers[w].1;
        let mut pos = own[rng.random_range(0..own.len() - 1)];
        if pos == anchor {
            pos = own[own.len() - 1];
        }
        let mut nw = rng.random_range(0..train_writers.len() - 1);
        if nw >= w {
            nw += 1;
        }
        let other = &train_writers[nw].1;
        let neg = other[rng.random_range(0..other.len())];
        let label = writers
            .label(train_writers[w].0)
            .expect("train writer is indexed");
        batch.anchors.push(anchor);
        batch.positives.push(pos);
        batch.negatives.push(neg);
        batch.anchor_labels.push(label);
    }
    Ok(batch)
}

/// k style exemplars of one writer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub images: Vec<GrayImage>,
    pub writer_id: String,
}

impl ExemplarSet {
    pub fn new(images: Vec<GrayImage>, writer_id: impl Into<String>) -> Result<Self> {
        if images.is_empty() || images.len() > MAX_EXEMPLARS {
            return Err(Error::Invalid(format!(
                "an exemplar set holds 1..={MAX_EXEMPLARS} images, got {}",
                images.len()
            )));
        }
        for img in &images {
            super::ensure_canonical(img)?;
        }
        Ok(Self {
            images,
            writer_id: writer_id.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.images.len()
    }
}

/// Picks `k` samples of `writer_id` (any split). Draws without replacement
/// when the writer has at least `k` samples. Otherwise every sample is used
/// once and the shortfall is topped up with replacement. Returns corpus
/// indices in seed-determined order.
pub fn sample_exemplar_indices<R: Rng + ?Sized>(
    corpus: &Corpus,
    writer_id: &str,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 || k > MAX_EXEMPLARS {
        return Err(Error::Invalid(format!(
            "exemplar count must be in 1..={MAX_EXEMPLARS}, got {k}"
        )));
    }
    let pool = corpus
        .writer_samples(writer_id)
        .ok_or_else(|| Error::Data(format!("unknown writer {writer_id:?}")))?;
    Ok(pick_with_top_up(pool, k, rng))
}

/// `k` items of a non-empty pool: without replacement when possible, else
/// the whole pool topped up with replacement, shuffled.
pub fn pick_with_top_up<T: Copy, R: Rng + ?Sized>(pool: &[T], k: usize, rng: &mut R) -> Vec<T> {
    assert!(!pool.is_empty(), "empty exemplar pool");
    if pool.len() >= k {
        return pool.choose_multiple(rng, k).copied().collect();
    }
    let mut picked = pool.to_vec();
    while picked.len() < k {
        picked.push(pool[rng.random_range(0..pool.len())]);
    }
    picked.shuffle(rng);
    picked
}

pub fn sample_exemplars<R: Rng + ?Sized>(
    corpus: &Corpus,
    writer_id: &str,
    k: usize,
    rng: &mut R,
) -> Result<ExemplarSet> {
    let idx = sample_exemplar_indices(corpus, writer_id, k, rng)?;
    ExemplarSet::new(
        idx.iter().map(|&i| corpus.get(i).image.clone()).collect(),
        writer_id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Charset, WordSample};
    use crate::rng::seeded;
    use std::collections::BTreeSet;

    fn corpus(writers: &[(&str, usize)]) -> Corpus {
        let mut samples = Vec::new();
        for (wi, (w, n)) in writers.iter().enumerate() {
            for j in 0..*n {
                let shade = (wi * 10 + j) as f32 / 100.0;
                samples.push(WordSample {
                    image: GrayImage::filled(64, 256, shade),
                    transcription: "ab".into(),
                    writer_id: w.to_string(),
                    split: Split::Train,
                });
            }
        }
        Corpus::new(samples, Charset::new("ab".chars())).unwrap()
    }

    fn index(c: &Corpus) -> WriterIndex {
        WriterIndex::new(c.train_writers())
    }

    #[test]
    fn minimal_triplet_respects_constraints() {
        let c = corpus(&[("a", 2), ("b", 2)]);
        let b = sample_triplets(&c, &index(&c), 1, &mut seeded(1)).unwrap();
        assert_eq!(b.len(), 1);
        let (a, p, n) = (b.anchors[0], b.positives[0], b.negatives[0]);
        assert_ne!(a, p);
        assert_eq!(c.get(a).writer_id, c.get(p).writer_id);
        assert_ne!(c.get(a).writer_id, c.get(n).writer_id);
        assert_ne!(c.get(a).image, c.get(p).image);
    }

    #[test]
    fn triplets_are_seed_deterministic() {
        let c = corpus(&[("a", 3), ("b", 4), ("c", 2)]);
        let w = index(&c);
        let x = sample_triplets(&c, &w, 16, &mut seeded(9)).unwrap();
        let y = sample_triplets(&c, &w, 16, &mut seeded(9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn negatives_are_uniform_over_other_writers() {
        let c = corpus(&[("a", 2), ("b", 5), ("c", 3)]);
        let w = index(&c);
        let mut rng = seeded(3);
        let mut counts = std::collections::BTreeMap::<(String, String), usize>::new();
        let mut per_anchor = std::collections::BTreeMap::<String, usize>::new();
        for _ in 0..1000 {
            let b = sample_triplets(&c, &w, 1, &mut rng).unwrap();
            let aw = c.get(b.anchors[0]).writer_id.clone();
            let nw = c.get(b.negatives[0]).writer_id.clone();
            *counts.entry((aw.clone(), nw)).or_default() += 1;
            *per_anchor.entry(aw).or_default() += 1;
        }
        for ((aw, _), n) in &counts {
            let f = *n as f64 / per_anchor[aw] as f64;
            assert!((f - 0.5).abs() <= 0.05, "{aw}: {f}");
        }
    }

    #[test]
    fn single_sample_writers_cannot_anchor() {
        let c = corpus(&[("a", 1), ("b", 1)]);
        assert!(sample_triplets(&c, &index(&c), 4, &mut seeded(0)).is_err());
        let c = corpus(&[("a", 1), ("b", 3)]);
        let b = sample_triplets(&c, &index(&c), 32, &mut seeded(0)).unwrap();
        assert!(b.anchors.iter().all(|&i| c.get(i).writer_id == "b"));
        let one = corpus(&[("a", 4)]);
        assert!(sample_triplets(&one, &index(&one), 1, &mut seeded(0)).is_err());
    }

    #[test]
    fn exemplars_without_replacement_when_possible() {
        let c = corpus(&[("a", 5)]);
        let idx = sample_exemplar_indices(&c, "a", 5, &mut seeded(4)).unwrap();
        let set: BTreeSet<_> = idx.iter().copied().collect();
        assert_eq!(set.len(), 5);
        assert_eq!(idx, sample_exemplar_indices(&c, "a", 5, &mut seeded(4)).unwrap());
        assert_eq!(sample_exemplars(&c, "a", 1, &mut seeded(4)).unwrap().k(), 1);
    }

    #[test]
    fn under_populated_writer_samples_with_replacement() {
        let c = corpus(&[("a", 3)]);
        let mut rng = seeded(11);
        let mut covered = 0;
        for _ in 0..100 {
            let idx = sample_exemplar_indices(&c, "a", 5, &mut rng).unwrap();
            assert_eq!(idx.len(), 5);
            if idx.iter().collect::<BTreeSet<_>>().len() == 3 {
                covered += 1;
            }
        }
        assert!(covered > 90, "{covered}");
    }

    #[test]
    fn exemplar_errors() {
        let c = corpus(&[("a", 3)]);
        assert!(sample_exemplars(&c, "zz", 1, &mut seeded(0)).is_err());
        assert!(sample_exemplars(&c, "a", 0, &mut seeded(0)).is_err());
        assert!(sample_exemplars(&c, "a", 6, &mut seeded(0)).is_err());
    }
}
