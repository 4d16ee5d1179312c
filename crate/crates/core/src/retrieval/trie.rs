//! Trie over every corpus n-gram of length up to `span_len`.

use serde::{Deserialize, Serialize};

use crate::encoding::TokenId;
use crate::error::{Error, Result};

pub const DEFAULT_DOC_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Node {
    /// `(token, child node)` sorted by token.
    children: Vec<(TokenId, usize)>,
    /// Containing documents, ascending, truncated at the cap.
    docs: Vec<usize>,
    doc_count: usize,
}

impl Node {
    fn new() -> Self {
        Self { children: Vec::new(), docs: Vec::new(), doc_count: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramTrie {
    span_len: usize,
    doc_cap: usize,
    nodes: Vec<Node>,
}

impl NgramTrie {
    pub const ROOT: usize = 0;

    pub fn build(docs: &[Vec<TokenId>], span_len: usize) -> Result<Self> {
        Self::with_cap(docs, span_len, DEFAULT_DOC_CAP)
    }

    /// Nodes contained in more than `doc_cap` documents keep only the first
    /// `doc_cap` of them; [`NgramTrie::documents`] rescans the corpus for those.
    pub fn with_cap(docs: &[Vec<TokenId>], span_len: usize, doc_cap: usize) -> Result<Self> {
        if span_len == 0 || doc_cap == 0 {
            return Err(Error::invalid("span length and document cap must be positive"));
        }
        let mut trie = Self { span_len, doc_cap, nodes: vec![Node::new()] };
        // last document counted at each node
        let mut last: Vec<Option<usize>> = vec![None];
        for (doc, tokens) in docs.iter().enumerate() {
            for start in 0..tokens.len() {
                let end = (start + span_len).min(tokens.len());
                let mut node = Self::ROOT;
                for &t in &tokens[start..end] {
                    node = trie.child_or_insert(node, t);
                    last.resize(trie.nodes.len(), None);
                    if last[node] != Some(doc) {
                        last[node] = Some(doc);
                        let n = &mut trie.nodes[node];
                        n.doc_count += 1;
                        if n.docs.len() < doc_cap {
                            n.docs.push(doc);
                        }
                    }
                }
            }
        }
        Ok(trie)
    }

    fn child_or_insert(&mut self, node: usize, token: TokenId) -> usize {
        match self.nodes[node].children.binary_search_by_key(&token, |c| c.0) {
            Ok(k) => self.nodes[node].children[k].1,
            Err(k) => {
                let id = self.nodes.len();
                self.nodes.push(Node::new());
                self.nodes[node].children.insert(k, (token, id));
                id
            }
        }
    }

    pub fn span_len(&self) -> usize {
        self.span_len
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn child(&self, node: usize, token: TokenId) -> Option<usize> {
        let c = &self.nodes[node].children;
        c.binary_search_by_key(&token, |x| x.0).ok().map(|k| c[k].1)
    }

    /// Valid next tokens after `node`, ascending.
    pub fn children(&self, node: usize) -> &[(TokenId, usize)] {
        &self.nodes[node].children
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.nodes[node].children.is_empty()
    }

    pub fn find(&self, path: &[TokenId]) -> Option<usize> {
        path.iter().try_fold(Self::ROOT, |n, &t| self.child(n, t))
    }

    pub fn contains(&self, path: &[TokenId]) -> bool {
        self.find(path).is_some()
    }

    /// Every document containing `path` verbatim, ascending. Over-cap nodes
    /// fall back to scanning `docs`.
    pub fn documents(&self, path: &[TokenId], docs: &[Vec<TokenId>]) -> Vec<usize> {
        let Some(node) = self.find(path) else { return Vec::new() };
        if node == Self::ROOT {
            return (0..docs.len()).collect();
        }
        let n = &self.nodes[node];
        if n.doc_count <= self.doc_cap {
            return n.docs.clone();
        }
        (0..docs.len()).filter(|&d| contains_span(&docs[d], path)).collect()
    }

    /// Stored document count of the node at `path`, before capping.
    pub fn document_count(&self, path: &[TokenId]) -> usize {
        self.find(path).map_or(0, |n| self.nodes[n].doc_count)
    }
}

pub fn contains_span(doc: &[TokenId], span: &[TokenId]) -> bool {
    span.is_empty() || doc.windows(span.len()).any(|w| w == span)
}
