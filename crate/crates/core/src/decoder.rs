//! Catalog-constrained decoding of next-item distributions.
//!
//! Candidates are ordered by score (sum of slot log-probabilities) descending,
//! then by token sequence ascending, then by item id ascending. Items that
//! share a token sequence share a score and are listed in id order.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use crate::error::{Error, Result};
use crate::fsq::{ItemTokenSequence, TokenId};
use crate::model::{NextItemDistribution, NextItemPredictor, TokenizedSequence};

static DECODED: AtomicU64 = AtomicU64::new(0);
static DECODED_OFF_CATALOG: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of emitted recommendations and of those not found in
/// the catalog they were decoded against.
pub fn decode_counters() -> (u64, u64) {
    (DECODED.load(AtomicOrdering::Relaxed), DECODED_OFF_CATALOG.load(AtomicOrdering::Relaxed))
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    /// `(token, child index)` sorted by token.
    children: Vec<(TokenId, usize)>,
    /// Leaf index for depth-K nodes.
    leaf: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub tokens: Vec<TokenId>,
    /// Sorted ascending.
    pub items: Vec<String>,
}

/// Prefix tree over the token sequences of a catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogTrie {
    depth: usize,
    nodes: Vec<Node>,
    leaves: Vec<Leaf>,
    items: HashSet<String>,
}

impl CatalogTrie {
    pub fn build(catalog: &[ItemTokenSequence], depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("trie depth must be positive".into()));
        }
        let mut trie = Self {
            depth,
            nodes: vec![Node {
                children: Vec::new(),
                leaf: None,
            }],
            leaves: Vec::new(),
            items: HashSet::new(),
        };
        for entry in catalog {
            if entry.tokens.len() != depth {
                return Err(Error::Shape(format!(
                    "`{}` has {} tokens, trie depth is {depth}",
                    entry.item_id,
                    entry.tokens.len()
                )));
            }
            if !trie.items.insert(entry.item_id.clone()) {
                return Err(Error::DuplicateItem {
                    row: 0,
                    item_id: entry.item_id.clone(),
                });
            }
            let mut node = 0;
            for &t in &entry.tokens {
                node = match trie.nodes[node].children.binary_search_by_key(&t, |c| c.0) {
                    Ok(i) => trie.nodes[node].children[i].1,
                    Err(i) => {
                        let child = trie.nodes.len();
                        trie.nodes.push(Node {
                            children: Vec::new(),
                            leaf: None,
                        });
                        trie.nodes[node].children.insert(i, (t, child));
                        child
                    }
                };
            }
            let leaf = match trie.nodes[node].leaf {
                Some(l) => l,
                None => {
                    trie.leaves.push(Leaf {
                        tokens: entry.tokens.clone(),
                        items: Vec::new(),
                    });
                    trie.nodes[node].leaf = Some(trie.leaves.len() - 1);
                    trie.leaves.len() - 1
                }
            };
            let items = &mut trie.leaves[leaf].items;
            let at = items.binary_search(&entry.item_id).unwrap_or_else(|i| i);
            items.insert(at, entry.item_id.clone());
        }
        Ok(trie)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Trie nodes including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of distinct token sequences.
    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn contains_item(&self, item_id: &str) -> bool {
        self.items.contains(item_id)
    }

    /// Largest child count of any node.
    pub fn max_branching(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).max().unwrap_or(0)
    }

    /// Whether some catalog sequence starts with `prefix`.
    pub fn has_prefix(&self, prefix: &[TokenId]) -> bool {
        let mut node = 0;
        for t in prefix {
            match self.nodes[node].children.binary_search_by_key(t, |c| c.0) {
                Ok(i) => node = self.nodes[node].children[i].1,
                Err(_) => return false,
            }
        }
        true
    }

    fn leaf_of(&self, item_id: &str) -> Option<usize> {
        self.leaves.iter().position(|l| l.items.binary_search_by(|i| i.as_str().cmp(item_id)).is_ok())
    }
}

/// Recommended items in rank order, each with its log score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedRecommendations {
    pub entries: Vec<(String, f64)>,
    /// Trie children scored during the search.
    pub expansions: usize,
}

impl RankedRecommendations {
    pub fn item_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(i, _)| i.as_str()).collect()
    }

    /// One `rank item_id log_score` line per entry, ranks from 1.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (r, (item, score)) in self.entries.iter().enumerate() {
            writeln!(w, "{} {item} {score:?}", r + 1)?;
        }
        Ok(())
    }
}

/// Score descending, then token sequence ascending.
fn rank_order(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn check_distribution(dist: &NextItemDistribution, trie: &CatalogTrie) -> Result<()> {
    if dist.num_slots() != trie.depth {
        return Err(Error::Shape(format!(
            "distribution has {} slots, trie depth is {}",
            dist.num_slots(),
            trie.depth
        )));
    }
    if dist.slots.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { row: 0, column: 0 });
    }
    Ok(())
}

fn emit(trie: &CatalogTrie, ranked: impl Iterator<Item = (usize, f64)>, top_n: usize) -> Vec<(String, f64)> {
    let mut out = Vec::with_capacity(top_n);
    'outer: for (leaf, score) in ranked {
        for item in &trie.leaves[leaf].items {
            if out.len() == top_n {
                break 'outer;
            }
            out.push((item.clone(), score));
        }
    }
    DECODED.fetch_add(out.len() as u64, AtomicOrdering::Relaxed);
    let off = out.iter().filter(|(i, _)| !trie.contains_item(i)).count();
    DECODED_OFF_CATALOG.fetch_add(off as u64, AtomicOrdering::Relaxed);
    out
}

/// Beam search that only ever extends prefixes present in the trie. Each
/// surviving hypothesis contributes at most `beam_width` children, and the
/// best `beam_width` of all children survive each depth.
pub fn constrained_beam_search(
    dist: &NextItemDistribution,
    trie: &CatalogTrie,
    beam_width: usize,
    top_n: usize,
) -> Result<RankedRecommendations> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    check_distribution(dist, trie)?;
    struct Hyp {
        tokens: Vec<TokenId>,
        score: f64,
        node: usize,
    }
    let mut beam = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        node: 0,
    }];
    let mut expansions = 0;
    for slot in 0..trie.depth {
        let logp = &dist.slots[slot];
        let mut next = Vec::new();
        for h in &beam {
            let mut children: Vec<(TokenId, usize, f64)> = trie.nodes[h.node]
                .children
                .iter()
                .map(|&(t, c)| (t, c, logp[t as usize]))
                .collect();
            expansions += children.len();
            // children are in token order; a stable sort keeps it for ties
            children.sort_by(|a, b| b.2.total_cmp(&a.2));
            for &(t, c, lp) in children.iter().take(beam_width) {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                next.push(Hyp {
                    tokens,
                    score: h.score + lp,
                    node: c,
                });
            }
        }
        next.sort_by(|a, b| rank_order((a.score, &a.tokens), (b.score, &b.tokens)));
        next.truncate(beam_width);
        beam = next;
    }
    let ranked = beam.iter().map(|h| (trie.nodes[h.node].leaf.expect("depth-K node is a leaf"), h.score));
    Ok(RankedRecommendations {
        entries: emit(trie, ranked, top_n),
        expansions,
    })
}

/// Scores of every distinct catalog sequence, in rank order.
pub fn exhaustive_ranking(dist: &NextItemDistribution, trie: &CatalogTrie) -> Result<Vec<(usize, f64)>> {
    check_distribution(dist, trie)?;
    let mut scored: Vec<(usize, f64)> = trie
        .leaves
        .iter()
        .enumerate()
        .map(|(i, l)| (i, dist.sequence_log_prob(&l.tokens)))
        .collect();
    scored.sort_by(|a, b| rank_order((a.1, &trie.leaves[a.0].tokens), (b.1, &trie.leaves[b.0].tokens)));
    Ok(scored)
}

/// Top `top_n` items by exact score over the whole catalog.
pub fn exhaustive_topn(dist: &NextItemDistribution, trie: &CatalogTrie, top_n: usize) -> Result<RankedRecommendations> {
    let ranked = exhaustive_ranking(dist, trie)?;
    Ok(RankedRecommendations {
        entries: emit(trie, ranked.into_iter(), top_n),
        expansions: 0,
    })
}

/// 1-based rank of `item_id` under the total order, computed exactly.
pub fn rank_in_distribution(dist: &NextItemDistribution, trie: &CatalogTrie, item_id: &str) -> Result<usize> {
    check_distribution(dist, trie)?;
    let own = trie
        .leaf_of(item_id)
        .ok_or_else(|| Error::UnknownItem(item_id.to_string()))?;
    let own_leaf = &trie.leaves[own];
    let own_score = dist.sequence_log_prob(&own_leaf.tokens);
    let ahead: usize = trie
        .leaves
        .iter()
        .filter(|l| rank_order((dist.sequence_log_prob(&l.tokens), &l.tokens), (own_score, &own_leaf.tokens)) == Ordering::Less)
        .map(|l| l.items.len())
        .sum();
    let within = own_leaf
        .items
        .iter()
        .position(|i| i == item_id)
        .expect("leaf_of found the item");
    Ok(ahead + within + 1)
}

/// Predicts the next item for `history` and decodes the top `top_n`.
pub fn decode_topn<P: NextItemPredictor + ?Sized>(
    history: &TokenizedSequence,
    predictor: &P,
    trie: &CatalogTrie,
    beam_width: usize,
    top_n: usize,
) -> Result<RankedRecommendations> {
    let dist = predictor.predict_next_item(history)?;
    constrained_beam_search(&dist, trie, beam_width, top_n)
}

pub fn rank_of_item<P: NextItemPredictor + ?Sized>(
    history: &TokenizedSequence,
    predictor: &P,
    trie: &CatalogTrie,
    item_id: &str,
) -> Result<usize> {
    let dist = predictor.predict_next_item(history)?;
    rank_in_distribution(&dist, trie, item_id)
}
