//! Corpus loading, character tokenization, federated splits and the
//! multiple-choice continuation task.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
const RESERVED: usize = 2;

/// Sorted, deduplicated character set; character `i` has id `i + 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Vocab {
            chars: set.into_iter().collect(),
        }
    }

    /// Size including the reserved pad and bos ids.
    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map(|i| i + RESERVED)
                    .map_err(|_| Error::Input(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Inverse of [`Vocab::encode`]; reserved ids are rejected.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                id.checked_sub(RESERVED)
                    .and_then(|i| self.chars.get(i).copied())
                    .ok_or_else(|| Error::Input(format!("id {id} does not decode to a character")))
            })
            .collect()
    }
}

/// Tokenized documents with their source labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<usize>>,
    /// Index into `label_names` for each document.
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub vocab: Vocab,
    /// Hex SHA-256 of the source bytes.
    pub digest: String,
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    #[serde(default)]
    source: Option<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Builds a corpus from raw file bytes. JSONL input carries a `"text"`
    /// field and an optional `"source"` label; plain text is one document
    /// per line. Blank lines are skipped in both.
    pub fn from_bytes(bytes: &[u8], jsonl: bool) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Input(format!("invalid UTF-8 at byte offset {}", e.valid_up_to())))?;
        let mut raw: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if jsonl {
                let rec: JsonRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Input(format!("line {}: {e}", lineno + 1)))?;
                if rec.text.is_empty() {
                    continue;
                }
                raw.push((rec.text, rec.source.unwrap_or_default()));
            } else {
                raw.push((line.to_string(), String::new()));
            }
        }
        let vocab = Vocab::from_chars(raw.iter().flat_map(|(t, _)| t.chars()));
        let label_names: Vec<String> = raw.iter().map(|(_, s)| s.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let mut documents = Vec::with_capacity(raw.len());
        let mut labels = Vec::with_capacity(raw.len());
        for (t, s) in &raw {
            documents.push(vocab.encode(t)?);
            labels.push(label_names.binary_search(s).expect("label collected above"));
        }
        Ok(Corpus {
            documents,
            labels,
            label_names,
            vocab,
            digest: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len().max(1)
    }

    /// Model input for document `i`: `bos` followed by the document,
    /// truncated to `context_len` tokens.
    pub fn model_input(&self, i: usize, context_len: usize) -> Vec<usize> {
        std::iter::once(BOS).chain(self.documents[i].iter().copied()).take(context_len).collect()
    }

    pub fn model_inputs(&self, ids: &[usize], context_len: usize) -> Vec<Vec<usize>> {
        ids.iter().map(|&i| self.model_input(i, context_len)).collect()
    }
}

/// Loads a corpus; files ending in `.jsonl` or `.json` are read as JSONL.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    let jsonl = matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"));
    Corpus::from_bytes(&bytes, jsonl)
}

/// The bundled synthetic topic corpus.
pub fn bundled_corpus() -> Corpus {
    Corpus::from_bytes(synthetic::BUNDLED_JSONL.as_bytes(), true).expect("bundled corpus is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet { beta: f64 },
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::Iid => write!(f, "iid"),
            PartitionScheme::Dirichlet { beta } => write!(f, "dirichlet({beta})"),
        }
    }
}

/// Document indices per shard. Shards are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSplit {
    pub clients: Vec<Vec<usize>>,
    pub auxiliary: Vec<usize>,
    pub eval: Vec<usize>,
    pub scheme: PartitionScheme,
    pub seed: u64,
}

impl FederatedSplit {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// All client documents, client by client.
    pub fn client_union(&self) -> Vec<usize> {
        self.clients.iter().flatten().copied().collect()
    }
}

/// Reserves 10% of documents for evaluation and 10% as the auxiliary set,
/// then spreads the rest over `k` clients.
pub fn partition(corpus: &Corpus, k: usize, scheme: PartitionScheme, seed: u64) -> Result<FederatedSplit> {
    if k == 0 {
        return Err(Error::Input("need at least one client".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Input("cannot partition an empty corpus".into()));
    }
    if k > corpus.len() {
        return Err(Error::Input(format!("{k} clients but only {} documents", corpus.len())));
    }
    if let PartitionScheme::Dirichlet { beta } = scheme {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Input(format!("dirichlet beta must be > 0, got {beta}")));
        }
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, "partition.shuffle", &[])));
    let reserve = n / 10;
    let eval = order[..reserve].to_vec();
    let auxiliary = order[reserve..2 * reserve].to_vec();
    let rest = &order[2 * reserve..];
    if rest.len() < k {
        return Err(Error::Input(format!(
            "{k} clients but only {} documents remain after reserving eval and auxiliary shards",
            rest.len()
        )));
    }
    let clients = match scheme {
        PartitionScheme::Iid => {
            let mut clients = vec![Vec::new(); k];
            for (i, &d) in rest.iter().enumerate() {
                clients[i % k].push(d);
            }
            clients
        }
        PartitionScheme::Dirichlet { beta } => dirichlet_assign(corpus, rest, k, beta, seed)?,
    };
    Ok(FederatedSplit {
        clients,
        auxiliary,
        eval,
        scheme,
        seed,
    })
}

/// Largest-remainder split of `total` items by `weights` (summing to 1).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut by_rem: Vec<usize> = (0..weights.len()).collect();
    by_rem.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in by_rem.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn dirichlet_assign(corpus: &Corpus, docs: &[usize], k: usize, beta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Input(format!("dirichlet beta {beta}: {e}")))?;
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &d in docs {
        by_label.entry(corpus.labels[d]).or_default().push(d);
    }
    let mut clients = vec![Vec::new(); k];
    for (&label, members) in &by_label {
        let mut rng = rng_from(derive_seed(seed, "partition.dirichlet", &[label as u64]));
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let weights: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|x| x / total).collect()
        } else {
            // Every draw underflowed: give the label to one client.
            let mut w = vec![0.0; k];
            w[rng.random_range(0..k)] = 1.0;
            w
        };
        let mut it = members.iter();
        for (c, count) in apportion(members.len(), &weights).into_iter().enumerate() {
            clients[c].extend(it.by_ref().take(count));
        }
    }
    // Strong skew can leave a client empty; hand it one document from the
    // currently largest shard.
    for c in 0..k {
        if clients[c].is_empty() {
            let donor = (0..k).max_by_key(|&j| (clients[j].len(), std::cmp::Reverse(j))).expect("k >= 1");
            let d = clients[donor].pop().expect("rest has at least k documents");
            clients[c].push(d);
        }
    }
    Ok(clients)
}

/// A prompt with candidate continuations, exactly one of them correct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqInstance {
    pub prompt: Vec<usize>,
    pub choices: Vec<Vec<usize>>,
    pub gold: usize,
}

impl McqInstance {
    /// Prompt as fed to a model: `bos` then the prompt tokens.
    pub fn model_prompt(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.prompt.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqShape {
    pub prompt_len: usize,
    pub answer_len: usize,
    pub n_choices: usize,
}

impl Default for McqShape {
    fn default() -> Self {
        McqShape {
            prompt_len: 12,
            answer_len: 6,
            n_choices: 4,
        }
    }
}

/// MCQ instances over every document of `corpus`.
pub fn make_mcq_set(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<McqInstance>> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    make_mcq_set_from(corpus, &all, n, McqShape::default(), seed)
}

/// Each instance takes the prefix of a document as prompt and its true
/// continuation as the gold choice; distractors are same-offset windows of
/// other documents in `pool`, all distinct from each other and from gold.
pub fn make_mcq_set_from(corpus: &Corpus, pool: &[usize], n: usize, shape: McqShape, seed: u64) -> Result<Vec<McqInstance>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if shape.n_choices < 2 || shape.prompt_len == 0 || shape.answer_len == 0 {
        return Err(Error::Input(format!("invalid MCQ shape {shape:?}")));
    }
    let window = shape.prompt_len + shape.answer_len;
    let mut eligible: Vec<usize> = pool.iter().copied().filter(|&d| corpus.documents[d].len() >= window).collect();
    if eligible.len() < 2 {
        return Err(Error::Input(format!(
            "only {} documents hold a {window}-token window; need at least 2",
            eligible.len()
        )));
    }
    let mut rng = rng_from(derive_seed(seed, "mcq", &[]));
    eligible.shuffle(&mut rng);
    let answer = |d: usize| corpus.documents[d][shape.prompt_len..window].to_vec();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let doc = eligible[i % eligible.len()];
        let gold = answer(doc);
        let mut others: Vec<usize> = eligible.iter().copied().filter(|&d| d != doc).collect();
        others.shuffle(&mut rng);
        let mut choices = vec![gold.clone()];
        for d in others {
            let cand = answer(d);
            if !choices.contains(&cand) {
                choices.push(cand);
                if choices.len() == shape.n_choices {
                    break;
                }
            }
        }
        if choices.len() < shape.n_choices {
            return Err(Error::Input(format!(
                "cannot find {} distinct continuations for document {doc}",
                shape.n_choices
            )));
        }
        let gold_at = rng.random_range(0..shape.n_choices);
        choices.swap(0, gold_at);
        out.push(McqInstance {
            prompt: corpus.documents[doc][..shape.prompt_len].to_vec(),
            choices,
            gold: gold_at,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct McqRecord {
    prompt: String,
    choices: Vec<String>,
    gold: usize,
}

/// `{"prompt","choices","gold"}` per line.
pub fn mcq_to_jsonl(vocab: &Vocab, set: &[McqInstance]) -> Result<String> {
    let mut out = String::new();
    for inst in set {
        let rec = McqRecord {
            prompt: vocab.decode(&inst.prompt)?,
            choices: inst.choices.iter().map(|c| vocab.decode(c)).collect::<Result<_>>()?,
            gold: inst.gold,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Input(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
