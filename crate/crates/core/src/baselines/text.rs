//! Retrieval baselines: user profiles built from the text of positively
//! acted items, scored against candidate items by cosine tf-idf, a
//! Dirichlet-smoothed language model or Okapi BM25.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use crate::data::Event;
use crate::error::{Error, Result};

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Reads `item_id<TAB>text` lines.
pub fn read_item_text<R: BufRead>(r: R) -> Result<BTreeMap<usize, String>> {
    let mut out = BTreeMap::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("item text", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: idx + 1, message };
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected item_id<TAB>text".into()))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid item id {id:?}")))?;
        if out.insert(id, text.to_string()).is_some() {
            return Err(bad(format!("duplicate item {id}")));
        }
    }
    Ok(out)
}

pub fn parse_item_text(path: &Path) -> Result<BTreeMap<usize, String>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_item_text(std::io::BufReader::new(f))
}

/// Term statistics over the item collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocab: HashMap<String, usize>,
    /// Per item: (term, count) ascending by term.
    docs: Vec<Vec<(usize, u32)>>,
    doc_len: Vec<u64>,
    coll_freq: Vec<u64>,
    doc_freq: Vec<usize>,
    total_len: u64,
    cos_norm: Vec<f64>,
}

impl Corpus {
    /// Builds the collection over items `0..num_items`; items without text
    /// are empty documents.
    pub fn new(num_items: usize, texts: &BTreeMap<usize, String>) -> Result<Self> {
        if let Some((&id, _)) = texts.range(num_items..).next() {
            return Err(Error::Validation(format!("item text for item {id} >= item count {num_items}")));
        }
        let mut vocab: HashMap<String, usize> = HashMap::new();
        let mut docs = vec![Vec::new(); num_items];
        for (&item, text) in texts {
            let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
            for tok in tokenize(text) {
                let next = vocab.len();
                let id = *vocab.entry(tok).or_insert(next);
                *counts.entry(id).or_default() += 1;
            }
            docs[item] = counts.into_iter().collect();
        }
        let v = vocab.len();
        let (mut coll_freq, mut doc_freq) = (vec![0u64; v], vec![0usize; v]);
        let mut doc_len = Vec::with_capacity(num_items);
        for d in &docs {
            let mut len = 0;
            for &(t, c) in d {
                coll_freq[t] += u64::from(c);
                doc_freq[t] += 1;
                len += u64::from(c);
            }
            doc_len.push(len);
        }
        let total_len = doc_len.iter().sum();
        let mut corpus = Corpus {
            vocab,
            docs,
            doc_len,
            coll_freq,
            doc_freq,
            total_len,
            cos_norm: Vec::new(),
        };
        corpus.cos_norm = corpus
            .docs
            .iter()
            .map(|d| {
                d.iter()
                    .map(|&(t, c)| (f64::from(c) * corpus.cos_idf(t)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(corpus)
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn term_id(&self, term: &str) -> Option<usize> {
        self.vocab.get(term).copied()
    }

    pub fn doc(&self, item: usize) -> &[(usize, u32)] {
        self.docs.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn doc_len(&self, item: usize) -> u64 {
        self.doc_len.get(item).copied().unwrap_or(0)
    }

    pub fn doc_freq(&self, term: usize) -> usize {
        self.doc_freq[term]
    }

    pub fn collection_freq(&self, term: usize) -> u64 {
        self.coll_freq[term]
    }

    pub fn total_len(&self) -> u64 {
        self.total_len
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.docs.len() as f64
        }
    }

    fn tf(&self, item: usize, term: usize) -> u32 {
        let d = self.doc(item);
        d.binary_search_by_key(&term, |&(t, _)| t).map_or(0, |p| d[p].1)
    }

    /// ln((N + 1) / (df + 1)) + 1
    fn cos_idf_df(&self, df: usize) -> f64 {
        ((self.num_docs() as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }

    fn cos_idf(&self, term: usize) -> f64 {
        self.cos_idf_df(self.doc_freq[term])
    }

    /// Collection language model; add-one over the vocabulary for unseen
    /// terms.
    fn p_coll(&self, term: Option<usize>) -> f64 {
        match term {
            Some(t) if self.coll_freq[t] > 0 => self.coll_freq[t] as f64 / self.total_len as f64,
            _ => 1.0 / (self.total_len as f64 + self.vocab.len() as f64),
        }
    }
}

/// Term counts of a user profile.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserProfile {
    /// (term id, count) ascending by term.
    pub terms: Vec<(usize, u32)>,
    /// Counts of terms outside the corpus vocabulary.
    pub unknown: Vec<u32>,
}

impl UserProfile {
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty() && self.unknown.is_empty()
    }

    /// Profile of free text (a query).
    pub fn from_text(corpus: &Corpus, text: &str) -> Self {
        let mut known: BTreeMap<usize, u32> = BTreeMap::new();
        let mut unknown: BTreeMap<String, u32> = BTreeMap::new();
        for tok in tokenize(text) {
            match corpus.term_id(&tok) {
                Some(t) => *known.entry(t).or_default() += 1,
                None => *unknown.entry(tok).or_default() += 1,
            }
        }
        UserProfile {
            terms: known.into_iter().collect(),
            unknown: unknown.into_values().collect(),
        }
    }

    /// Count of a known term.
    pub fn count(&self, term: usize) -> u32 {
        self.terms
            .binary_search_by_key(&term, |&(t, _)| t)
            .map_or(0, |p| self.terms[p].1)
    }
}

/// One profile per user: term counts summed over the distinct items the
/// user acted on positively in training, all facets pooled.
pub fn build_user_profiles(train: &[Event], num_users: usize, corpus: &Corpus) -> Vec<UserProfile> {
    let mut items: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); num_users];
    for e in train.iter().filter(|e| e.is_positive() && e.user < num_users) {
        items[e.user].insert(e.item);
    }
    items
        .into_iter()
        .map(|set| {
            let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
            for item in set {
                for &(t, c) in corpus.doc(item) {
                    *counts.entry(t).or_default() += c;
                }
            }
            UserProfile {
                terms: counts.into_iter().collect(),
                unknown: Vec::new(),
            }
        })
        .collect()
}

/// Cosine of tf-idf vectors; 0 when either vector is zero.
pub fn score_cosine(profile: &UserProfile, item: usize, corpus: &Corpus) -> f64 {
    let dn = corpus.cos_norm.get(item).copied().unwrap_or(0.0);
    let unknown_idf = corpus.cos_idf_df(0);
    let qn = (profile
        .terms
        .iter()
        .map(|&(t, c)| (f64::from(c) * corpus.cos_idf(t)).powi(2))
        .sum::<f64>()
        + profile
            .unknown
            .iter()
            .map(|&c| (f64::from(c) * unknown_idf).powi(2))
            .sum::<f64>())
    .sqrt();
    if dn == 0.0 || qn == 0.0 {
        return 0.0;
    }
    let dot: f64 = profile
        .terms
        .iter()
        .map(|&(t, c)| {
            let idf = corpus.cos_idf(t);
            f64::from(c) * idf * f64::from(corpus.tf(item, t)) * idf
        })
        .sum();
    dot / (qn * dn)
}

/// Query log-likelihood under the Dirichlet-smoothed document model.
pub fn score_lm_dirichlet(profile: &UserProfile, item: usize, corpus: &Corpus, mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("mu must be positive, got {mu}")));
    }
    let denom = corpus.doc_len(item) as f64 + mu;
    let mut s = 0.0;
    for &(t, c) in &profile.terms {
        let num = f64::from(corpus.tf(item, t)) + mu * corpus.p_coll(Some(t));
        s += f64::from(c) * (num / denom).ln();
    }
    let unseen = mu * corpus.p_coll(None);
    for &c in &profile.unknown {
        s += f64::from(c) * (unseen / denom).ln();
    }
    Ok(s)
}

/// Okapi BM25 parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub k3: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.0,
            k3: 1000.0,
            b: 0.75,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) || !(self.k3 >= 0.0 && self.k3.is_finite()) {
            return Err(Error::Config(format!("k1 and k3 must be non-negative, got {} and {}", self.k1, self.k3)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

/// BM25 with query-term weighting and idf clamped at zero.
pub fn score_bm25(profile: &UserProfile, item: usize, corpus: &Corpus, p: Bm25Params) -> f64 {
    let n = corpus.num_docs() as f64;
    let avg = corpus.avg_doc_len();
    let len_ratio = if avg > 0.0 { corpus.doc_len(item) as f64 / avg } else { 0.0 };
    let norm = p.k1 * ((1.0 - p.b) + p.b * len_ratio);
    let mut s = 0.0;
    for &(t, qtf) in &profile.terms {
        let tf = f64::from(corpus.tf(item, t));
        if tf == 0.0 {
            continue;
        }
        let df = corpus.doc_freq(t) as f64;
        let idf = ((n - df + 0.5) / (df + 0.5)).ln().max(0.0);
        let qtf = f64::from(qtf);
        s += idf * ((p.k1 + 1.0) * tf) / (norm + tf) * ((p.k3 + 1.0) * qtf) / (p.k3 + qtf);
    }
    s
}
