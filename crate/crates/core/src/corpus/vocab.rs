use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Lang, TokenId};
use crate::error::{Error, Result};

/// Reserved symbols. Every vocabulary carries all of them, in declared order, at
/// the lowest ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    Unk,
    Mask,
    Length,
}

impl Special {
    pub const ALL: [Special; 6] =
        [Special::Pad, Special::Bos, Special::Eos, Special::Unk, Special::Mask, Special::Length];

    pub fn symbol(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Unk => "<unk>",
            Special::Mask => "<mask>",
            Special::Length => "<len>",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub unk: TokenId,
    pub mask: TokenId,
    pub length: TokenId,
}

/// Bijective token/id map with a per-id language partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    specials: Vec<Special>,
    lang_tags: Vec<Lang>,
    /// `None` for specials, tags and tokens shared by several languages.
    lang_of: Vec<Option<Lang>>,
    special_ids: SpecialIds,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    specials: Vec<Special>,
    lang_tags: Vec<Lang>,
    tokens: Vec<(String, Option<Lang>)>,
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        let reserved = v.num_reserved();
        Self {
            tokens: v.id_to_token[reserved..]
                .iter()
                .cloned()
                .zip(v.lang_of[reserved..].iter().copied())
                .collect(),
            specials: v.specials,
            lang_tags: v.lang_tags,
        }
    }
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        let mut b = Builder::new(&r.specials, &r.lang_tags)?;
        for (tok, lang) in r.tokens {
            if b.token_to_id.contains_key(&tok) {
                return Err(Error::Config(format!("duplicate token `{tok}` in vocabulary file")));
            }
            b.insert(&tok, lang);
        }
        b.finish()
    }
}

struct Builder {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    lang_of: Vec<Option<Lang>>,
    specials: Vec<Special>,
    lang_tags: Vec<Lang>,
}

impl Builder {
    fn new(specials: &[Special], lang_tags: &[Lang]) -> Result<Self> {
        let mut b = Self {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
            lang_of: Vec::new(),
            specials: specials.to_vec(),
            lang_tags: lang_tags.to_vec(),
        };
        for s in specials {
            if b.token_to_id.contains_key(s.symbol()) {
                return Err(Error::Config(format!("duplicate special {}", s.symbol())));
            }
            b.push(s.symbol(), None);
        }
        for s in Special::ALL {
            if !specials.contains(&s) {
                return Err(Error::Config(format!("missing special {}", s.symbol())));
            }
        }
        for t in lang_tags {
            if b.token_to_id.contains_key(t.tag()) {
                return Err(Error::Config(format!("duplicate language tag {}", t.tag())));
            }
            b.push(t.tag(), None);
        }
        Ok(b)
    }

    fn push(&mut self, tok: &str, lang: Option<Lang>) {
        let id = self.id_to_token.len() as TokenId;
        self.id_to_token.push(tok.to_string());
        self.token_to_id.insert(tok.to_string(), id);
        self.lang_of.push(lang);
    }

    fn insert(&mut self, tok: &str, lang: Option<Lang>) {
        match self.token_to_id.get(tok) {
            Some(&id) => {
                let reserved = self.specials.len() + self.lang_tags.len();
                if (id as usize) >= reserved && self.lang_of[id as usize] != lang {
                    self.lang_of[id as usize] = None;
                }
            }
            None => self.push(tok, lang),
        }
    }

    fn finish(self) -> Result<Vocabulary> {
        let find = |s: Special| self.token_to_id[s.symbol()];
        let special_ids = SpecialIds {
            pad: find(Special::Pad),
            bos: find(Special::Bos),
            eos: find(Special::Eos),
            unk: find(Special::Unk),
            mask: find(Special::Mask),
            length: find(Special::Length),
        };
        Ok(Vocabulary {
            id_to_token: self.id_to_token,
            token_to_id: self.token_to_id,
            specials: self.specials,
            lang_tags: self.lang_tags,
            lang_of: self.lang_of,
            special_ids,
        })
    }
}

/// Builds a vocabulary with no language partition for the corpus tokens.
pub fn build_vocab(corpus: &[Vec<String>], specials: &[Special], lang_tags: &[Lang]) -> Result<Vocabulary> {
    build_partitioned_vocab(&[(None, corpus)], specials, lang_tags)
}

/// Builds a joint vocabulary, recording which language each token came from.
/// Ids follow first appearance across the parts in order.
pub fn build_partitioned_vocab(
    parts: &[(Option<Lang>, &[Vec<String>])],
    specials: &[Special],
    lang_tags: &[Lang],
) -> Result<Vocabulary> {
    if parts.iter().all(|(_, c)| c.is_empty()) {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut b = Builder::new(specials, lang_tags)?;
    for (lang, corpus) in parts {
        for sent in corpus.iter() {
            for tok in sent {
                b.insert(tok, *lang);
            }
        }
    }
    b.finish()
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.special_ids
    }

    pub fn num_reserved(&self) -> usize {
        self.specials.len() + self.lang_tags.len()
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < self.num_reserved()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, tok: &str) -> Option<TokenId> {
        self.token_to_id.get(tok).copied()
    }

    pub fn lang_tag_id(&self, lang: Lang) -> Option<TokenId> {
        self.id(lang.tag())
    }

    pub fn lang_tags(&self) -> &[Lang] {
        &self.lang_tags
    }

    pub fn lang_of(&self, id: TokenId) -> Option<Lang> {
        self.lang_of.get(id as usize).copied().flatten()
    }

    /// Ordinary (non-reserved) token ids of one language.
    pub fn ids_of(&self, lang: Lang) -> Vec<TokenId> {
        (self.num_reserved()..self.len())
            .map(|i| i as TokenId)
            .filter(|&i| self.lang_of(i) == Some(lang))
            .collect()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(Special::Unk.symbol()).to_string())
            .collect()
    }

    /// Space-joined surface form.
    pub fn render(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }
}
