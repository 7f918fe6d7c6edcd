//! Generator for the bundled topic corpus (`data/synthetic.jsonl`).
//!
//! Four sources, each with its own small lexicon and sentence shape, so that
//! skewed partitions are meaningful and continuations are predictable from
//! their prefix.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use crate::rng::rng_from;

struct Topic {
    name: &'static str,
    subjects: &'static [&'static str],
    verbs: &'static [&'static str],
    objects: &'static [&'static str],
    endings: &'static [&'static str],
}

const TOPICS: [Topic; 4] = [
    Topic {
        name: "kitchen",
        subjects: &["the cook", "a baker", "my aunt", "the chef"],
        verbs: &["stirs", "bakes", "slices", "tastes"],
        objects: &["the soup", "fresh bread", "ripe plums", "a warm pie"],
        endings: &["before noon", "with salt", "for supper", "very slowly"],
    },
    Topic {
        name: "harbor",
        subjects: &["the sailor", "a pilot", "old ships", "the crew"],
        verbs: &["hauls", "ties", "checks", "lowers"],
        objects: &["the nets", "a rope", "the anchor", "wet sails"],
        endings: &["at dawn", "in fog", "near the dock", "on the tide"],
    },
    Topic {
        name: "garden",
        subjects: &["the gardener", "a child", "my uncle", "the farmer"],
        verbs: &["waters", "plants", "prunes", "picks"],
        objects: &["green beans", "the roses", "tall corn", "a young tree"],
        endings: &["in spring", "after rain", "by the wall", "each morning"],
    },
    Topic {
        name: "market",
        subjects: &["the trader", "a clerk", "the buyer", "my cousin"],
        verbs: &["counts", "sells", "weighs", "orders"],
        objects: &["copper coins", "the goods", "six boxes", "cheap silk"],
        endings: &["for profit", "on credit", "at the stall", "by the hour"],
    },
];

/// Names of the generated sources, in label order.
pub fn topic_names() -> Vec<&'static str> {
    TOPICS.iter().map(|t| t.name).collect()
}

#[derive(Serialize)]
struct Record<'a> {
    text: String,
    source: &'a str,
}

fn pick(xs: &'static [&'static str], rng: &mut impl Rng) -> &'static str {
    xs.choose(rng).expect("lexicons are non-empty")
}

fn sentence(topic: &Topic, rng: &mut impl Rng) -> String {
    format!(
        "{} {} {} {}.",
        pick(topic.subjects, rng),
        pick(topic.verbs, rng),
        pick(topic.objects, rng),
        pick(topic.endings, rng)
    )
}

/// `(text, source)` pairs; each document is one or two sentences of a
/// single topic.
pub fn generate(n_docs: usize, seed: u64) -> Vec<(String, &'static str)> {
    let mut rng = rng_from(seed);
    (0..n_docs)
        .map(|_| {
            let topic = &TOPICS[rng.random_range(0..TOPICS.len())];
            let mut text = sentence(topic, &mut rng);
            if rng.random_bool(0.5) {
                text.push(' ');
                text.push_str(&sentence(topic, &mut rng));
            }
            (text, topic.name)
        })
        .collect()
}

/// The generated corpus as JSONL, one `{"text","source"}` object per line.
pub fn generate_jsonl(n_docs: usize, seed: u64) -> String {
    let mut out = String::new();
    for (text, source) in generate(n_docs, seed) {
        out.push_str(&serde_json::to_string(&Record { text, source }).expect("plain strings serialize"));
        out.push('\n');
    }
    out
}

/// Parameters the bundled file was generated with.
pub const BUNDLED_DOCS: usize = 320;
pub const BUNDLED_SEED: u64 = 20_240_229;

/// Contents of the bundled corpus file.
pub const BUNDLED_JSONL: &str = include_str!("../../data/synthetic.jsonl");
