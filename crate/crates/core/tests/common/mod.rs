//! Shared fixtures for the integration and acceptance suites: synthetic
//! corpora with a planted, learnable signal.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use matchrec_core::corpus::ReviewRecord;
use matchrec_core::embeddings::EmbeddingTable;
use matchrec_core::model::{ConvBlockConfig, ModelConfig};

pub fn record(user: &str, item: &str, rating: f64, text: &str, ts: i64) -> ReviewRecord {
    ReviewRecord {
        user_id: user.to_string(),
        item_id: item.to_string(),
        rating,
        review_text: text.to_string(),
        timestamp: ts,
    }
}

/// An embeddings table with no stored vectors: every token resolves through
/// the deterministic OOV path to a unit vector, so identical tokens match at
/// cosine 1 and distinct tokens are near-orthogonal noise.
pub fn oov_only_table(dim: usize, seed: u64) -> EmbeddingTable {
    EmbeddingTable::new(dim, seed).unwrap()
}

const TOPIC_WORDS: [[&str; 6]; 4] = [
    ["guitar", "strings", "pickup", "amplifier", "pedal", "tuner"],
    ["movie", "film", "actor", "plot", "scene", "director"],
    ["book", "story", "author", "chapter", "writing", "pages"],
    ["fabric", "size", "color", "fit", "style", "material"],
];

/// Topic-affinity corpus: users and items each carry one of four topics and
/// ratings are high exactly when the topics agree. Review text mixes words
/// from both sides' topics, so the matching matrix carries the signal.
pub fn topic_corpus(
    n_users: usize,
    n_items: usize,
    n_reviews: usize,
    seed: u64,
) -> Vec<ReviewRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_reviews);
    for k in 0..n_reviews {
        let u = rng.random_range(0..n_users);
        let i = rng.random_range(0..n_items);
        let ut = u % 4;
        let it = i % 4;
        let base: f64 = if ut == it { 4.5 } else { 2.0 };
        let rating = (base + rng.random_range(-0.25..0.25)).clamp(1.0, 5.0);
        let mut words = Vec::with_capacity(8);
        for _ in 0..4 {
            words.push(*TOPIC_WORDS[ut].choose(&mut rng).unwrap());
        }
        for _ in 0..4 {
            words.push(*TOPIC_WORDS[it].choose(&mut rng).unwrap());
        }
        records.push(record(
            &format!("u{u:03}"),
            &format!("i{i:03}"),
            rating,
            &words.join(" "),
            k as i64,
        ));
    }
    records
}

/// Like [`topic_corpus`], but with exactly `reviews_per_owner` reviews per
/// user and per item (users and items in equal number) and a configurable
/// number of topic words drawn per side. Document lengths are therefore
/// uniform: `reviews_per_owner * 2 * words_per_side` tokens.
pub fn balanced_topic_corpus(
    n_owners: usize,
    reviews_per_owner: usize,
    words_per_side: usize,
    seed: u64,
) -> Vec<ReviewRecord> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut user_slots: Vec<usize> =
        (0..n_owners).flat_map(|u| std::iter::repeat_n(u, reviews_per_owner)).collect();
    let mut item_slots = user_slots.clone();
    user_slots.shuffle(&mut rng);
    item_slots.shuffle(&mut rng);
    let mut records = Vec::with_capacity(user_slots.len());
    for (k, (&u, &i)) in user_slots.iter().zip(&item_slots).enumerate() {
        let ut = u % 4;
        let it = i % 4;
        let base: f64 = if ut == it { 4.5 } else { 2.0 };
        let rating = (base + rng.random_range(-0.25..0.25)).clamp(1.0, 5.0);
        let mut words = Vec::with_capacity(2 * words_per_side);
        for _ in 0..words_per_side {
            words.push(*TOPIC_WORDS[ut].choose(&mut rng).unwrap());
        }
        for _ in 0..words_per_side {
            words.push(*TOPIC_WORDS[it].choose(&mut rng).unwrap());
        }
        records.push(record(
            &format!("u{u:03}"),
            &format!("i{i:03}"),
            rating,
            &words.join(" "),
            k as i64,
        ));
    }
    records
}

/// The 20-pair overfit corpus: 5 users x 4 items, every pair reviewed, and
/// the rating a linear function of the token overlap between the user's and
/// the item's own token sets.
pub fn overlap_corpus() -> Vec<ReviewRecord> {
    let user_tokens: [&[&str]; 5] = [
        &["alpha", "bravo", "charlie"],
        &["bravo", "delta", "echo"],
        &["charlie", "echo", "foxtrot"],
        &["alpha", "delta", "golf"],
        &["echo", "golf", "hotel"],
    ];
    let item_tokens: [&[&str]; 4] = [
        &["alpha", "bravo", "echo"],
        &["charlie", "delta", "hotel"],
        &["foxtrot", "golf", "alpha"],
        &["bravo", "charlie", "golf"],
    ];
    let mut records = Vec::new();
    for (u, ut) in user_tokens.iter().enumerate() {
        for (i, it) in item_tokens.iter().enumerate() {
            let overlap = ut.iter().filter(|t| it.contains(t)).count();
            let rating = 1.0 + 4.0 * overlap as f64 / 3.0;
            let text = format!("{} {}", ut.join(" "), it.join(" "));
            records.push(record(
                &format!("u{u}"),
                &format!("i{i}"),
                rating,
                &text,
                (u * 4 + i) as i64,
            ));
        }
    }
    records
}

/// Small model matched to the overlap corpus documents.
pub fn overfit_model_config() -> ModelConfig {
    ModelConfig {
        n_max: 24,
        m_max: 24,
        conv_blocks: vec![ConvBlockConfig {
            kernels: 4,
            kernel_h: 3,
            kernel_w: 3,
            pool_h: 2,
            pool_w: 2,
        }],
        dense_units: 8,
        use_batchnorm: true,
        init_seed: 0,
    }
}

/// Desk-scale model for the topic corpora. Batchnorm is off here: documents
/// of different lengths leave different zero-padding regions in the matching
/// matrix, and per-example spatial statistics fold that padding into the
/// normalization, which hurts generalization at this scale.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        n_max: 48,
        m_max: 48,
        conv_blocks: vec![
            ConvBlockConfig { kernels: 8, kernel_h: 3, kernel_w: 3, pool_h: 2, pool_w: 2 },
            // global final pooling (21 -> 1 per axis) keeps the prediction
            // stable under review-order permutations of the matching matrix
            ConvBlockConfig { kernels: 16, kernel_h: 3, kernel_w: 3, pool_h: 21, pool_w: 21 },
        ],
        dense_units: 16,
        use_batchnorm: false,
        init_seed: 0,
    }
}
