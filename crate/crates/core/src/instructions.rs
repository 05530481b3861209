//! Controlled instruction language.
//!
//! ```text
//! instruction := "add" "a" COLOR OBJECT "at the center"
//!              | "add" "a" COLOR OBJECT RELATION "the" COLOR OBJECT
//! ```
//!
//! Multi-word relations are single tokens. The lexicon (token, type) lives
//! in `lexicon.tsv` next to the crate manifest.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{Color, ObjectSpec, Shape};

const LEXICON_TSV: &str = include_str!("../lexicon.tsv");

/// Longest valid instruction, in tokens.
pub const MAX_TOKENS: usize = 8;
/// Default per-token replacement probability for [`intervene`].
pub const DEFAULT_REPLACE_PROB: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKind {
    Color,
    Object,
    Relation,
    Filler,
}

impl TokenKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "color" => Self::Color,
            "object" => Self::Object,
            "relation" => Self::Relation,
            "filler" => Self::Filler,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Center,
    Behind,
    InFrontOf,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Center,
        Relation::Behind,
        Relation::InFrontOf,
        Relation::LeftOf,
        Relation::RightOf,
    ];
    /// Relations that take an anchor object.
    pub const ANCHORED: [Relation; 4] = [
        Relation::Behind,
        Relation::InFrontOf,
        Relation::LeftOf,
        Relation::RightOf,
    ];

    /// Surface form in instructions.
    pub fn text(self) -> &'static str {
        match self {
            Relation::Center => "at the center",
            Relation::Behind => "behind",
            Relation::InFrontOf => "in front of",
            Relation::LeftOf => "on the left of",
            Relation::RightOf => "on the right of",
        }
    }

    /// Stable identifier used in files.
    pub fn key(self) -> &'static str {
        match self {
            Relation::Center => "at-the-center",
            Relation::Behind => "behind",
            Relation::InFrontOf => "in-front-of",
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.key() == s)
    }

    pub fn from_text(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.text() == s)
    }

    /// Whether cell `(x, y)` lies strictly on this side of `(ax, ay)`.
    /// Smaller `y` is further back.
    pub fn holds(self, x: usize, y: usize, ax: usize, ay: usize) -> bool {
        match self {
            Relation::Center => false,
            Relation::Behind => y < ay,
            Relation::InFrontOf => y > ay,
            Relation::LeftOf => x < ax,
            Relation::RightOf => x > ax,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Structured meaning of an instruction. The anchor is present exactly when
/// the relation is not [`Relation::Center`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParsedEdit {
    target: ObjectSpec,
    relation: Relation,
    anchor: Option<ObjectSpec>,
}

impl ParsedEdit {
    pub fn center(target: ObjectSpec) -> Self {
        Self {
            target,
            relation: Relation::Center,
            anchor: None,
        }
    }

    /// `None` when `relation` is [`Relation::Center`].
    pub fn relative(target: ObjectSpec, relation: Relation, anchor: ObjectSpec) -> Option<Self> {
        (relation != Relation::Center).then_some(Self {
            target,
            relation,
            anchor: Some(anchor),
        })
    }

    pub fn target(&self) -> ObjectSpec {
        self.target
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }

    pub fn anchor(&self) -> Option<ObjectSpec> {
        self.anchor
    }

    /// Every grammatical edit (including anchor == target, which the scene
    /// rejects at execution time): 24 centre edits plus 24 x 4 x 24 relative.
    pub fn all() -> impl Iterator<Item = ParsedEdit> {
        ObjectSpec::all().flat_map(|t| {
            std::iter::once(ParsedEdit::center(t)).chain(Relation::ANCHORED.into_iter().flat_map(
                move |r| ObjectSpec::all().map(move |a| ParsedEdit::relative(t, r, a).expect("anchored")),
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub version: u32,
    entries: Vec<(String, TokenKind)>,
}

impl Lexicon {
    fn parse(src: &str) -> Self {
        let mut version = 0;
        let mut entries = Vec::new();
        for line in src.lines() {
            if let Some(rest) = line.strip_prefix("# sscr-lexicon\t") {
                version = rest.trim().parse().expect("lexicon version");
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (tok, kind) = line.split_once('\t').expect("lexicon row is `token<TAB>type`");
            entries.push((tok.to_string(), TokenKind::parse(kind.trim()).expect("lexicon type")));
        }
        Self { version, entries }
    }

    pub fn entries(&self) -> &[(String, TokenKind)] {
        &self.entries
    }

    pub fn kind_of(&self, text: &str) -> Option<TokenKind> {
        self.entries.iter().find(|(t, _)| t == text).map(|(_, k)| *k)
    }

    pub fn of_kind(&self, kind: TokenKind) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, k)| *k == kind)
            .map(|(t, _)| t.as_str())
    }
}

pub fn lexicon() -> &'static Lexicon {
    static LEX: OnceLock<Lexicon> = OnceLock::new();
    LEX.get_or_init(|| Lexicon::parse(LEXICON_TSV))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("token {position}: unknown word `{word}`")]
    UnknownToken { position: usize, word: String },
    #[error("token {position}: expected {expected}, found `{found}`")]
    Unexpected {
        position: usize,
        expected: &'static str,
        found: String,
    },
    #[error("token {position}: instruction ends early, expected {expected}")]
    Incomplete { position: usize, expected: &'static str },
    #[error("token {position}: trailing `{found}` after a complete instruction")]
    Trailing { position: usize, found: String },
    #[error("token {position}: `{found}` cannot replace a {kind:?} token")]
    KindMismatch {
        position: usize,
        kind: TokenKind,
        found: String,
    },
}

impl ParseError {
    /// Zero-based token index where parsing failed.
    pub fn position(&self) -> usize {
        match self {
            ParseError::UnknownToken { position, .. }
            | ParseError::Unexpected { position, .. }
            | ParseError::Incomplete { position, .. }
            | ParseError::Trailing { position, .. }
            | ParseError::KindMismatch { position, .. } => *position,
        }
    }
}

/// A tokenized instruction. Construct through [`Instruction::tokenize`] or
/// [`synthesize`]; the text is the tokens joined by single spaces.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    tokens: Vec<Token>,
}

impl Instruction {
    /// Greedy longest-match tokenization against the lexicon.
    pub fn tokenize(text: &str) -> Result<Self, ParseError> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let lex = lexicon();
        let mut tokens = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let mut matched = None;
            for len in (1..=4.min(words.len() - i)).rev() {
                let cand = words[i..i + len].join(" ");
                if let Some(kind) = lex.kind_of(&cand) {
                    matched = Some((cand, kind, len));
                    break;
                }
            }
            let Some((text, kind, len)) = matched else {
                return Err(ParseError::UnknownToken {
                    position: tokens.len(),
                    word: words[i].to_string(),
                });
            };
            tokens.push(Token { text, kind });
            i += len;
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(&self) -> Result<ParsedEdit, ParseError> {
        let mut cur = Cursor { tokens: &self.tokens, pos: 0 };
        cur.word("add")?;
        cur.word("a")?;
        let target = cur.spec()?;
        let relation = cur.relation()?;
        let edit = if relation == Relation::Center {
            ParsedEdit::center(target)
        } else {
            cur.word("the")?;
            let anchor = cur.spec()?;
            ParsedEdit::relative(target, relation, anchor).expect("anchored relation")
        };
        if let Some(t) = self.tokens.get(cur.pos) {
            return Err(ParseError::Trailing {
                position: cur.pos,
                found: t.text.clone(),
            });
        }
        Ok(edit)
    }

    /// Kinds of all tokens, in order.
    pub fn kinds(&self) -> Vec<TokenKind> {
        self.tokens.iter().map(|t| t.kind).collect()
    }

    /// Replaces the token at `position` with `text`, which must have the
    /// same type and keep the instruction grammatical.
    pub fn replace(&self, position: usize, text: &str) -> Result<Instruction, ParseError> {
        let old = self.tokens.get(position).ok_or(ParseError::Incomplete {
            position,
            expected: "a token to replace",
        })?;
        if !replacement_candidates(old).contains(&text) && old.text != text {
            return Err(ParseError::KindMismatch {
                position,
                kind: old.kind,
                found: text.to_string(),
            });
        }
        let mut out = self.clone();
        out.tokens[position].text = text.to_string();
        out.parse()?;
        Ok(out)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

struct Cursor<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self, expected: &'static str) -> Result<&Token, ParseError> {
        let t = self.tokens.get(self.pos).ok_or(ParseError::Incomplete {
            position: self.pos,
            expected,
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn unexpected(&self, expected: &'static str) -> ParseError {
        ParseError::Unexpected {
            position: self.pos - 1,
            expected,
            found: self.tokens[self.pos - 1].text.clone(),
        }
    }

    fn word(&mut self, w: &'static str) -> Result<(), ParseError> {
        if self.next(w)?.text != w {
            return Err(self.unexpected(w));
        }
        Ok(())
    }

    fn spec(&mut self) -> Result<ObjectSpec, ParseError> {
        let c = self.next("a color")?;
        let Some(color) = Color::from_name(&c.text) else {
            return Err(self.unexpected("a color"));
        };
        let s = self.next("an object")?;
        let Some(shape) = Shape::from_name(&s.text) else {
            return Err(self.unexpected("an object"));
        };
        Ok(ObjectSpec::new(color, shape))
    }

    fn relation(&mut self) -> Result<Relation, ParseError> {
        let r = self.next("a relation")?;
        let rel = Relation::from_text(&r.text);
        rel.ok_or_else(|| self.unexpected("a relation"))
    }
}

pub fn parse(text: &str) -> Result<ParsedEdit, ParseError> {
    Instruction::tokenize(text)?.parse()
}

pub fn synthesize(edit: &ParsedEdit) -> Instruction {
    let tok = |text: &str, kind| Token {
        text: text.to_string(),
        kind,
    };
    let t = edit.target();
    let mut tokens = vec![
        tok("add", TokenKind::Filler),
        tok("a", TokenKind::Filler),
        tok(t.color.name(), TokenKind::Color),
        tok(t.shape.name(), TokenKind::Object),
        tok(edit.relation().text(), TokenKind::Relation),
    ];
    if let Some(a) = edit.anchor() {
        tokens.push(tok("the", TokenKind::Filler));
        tokens.push(tok(a.color.name(), TokenKind::Color));
        tokens.push(tok(a.shape.name(), TokenKind::Object));
    }
    Instruction { tokens }
}

/// Same-type tokens that may replace `token` while keeping the instruction
/// grammatical. Empty for fillers and for the anchorless centre relation.
pub fn replacement_candidates(token: &Token) -> Vec<&'static str> {
    let lex = lexicon();
    match token.kind {
        TokenKind::Filler => Vec::new(),
        TokenKind::Relation if token.text == Relation::Center.text() => Vec::new(),
        TokenKind::Relation => Relation::ANCHORED
            .iter()
            .map(|r| r.text())
            .filter(|t| *t != token.text)
            .collect(),
        kind => lex
            .of_kind(kind)
            .filter(|t| *t != token.text)
            .map(|t| {
                // lexicon strings live for the program; map back to statics
                Color::from_name(t)
                    .map(Color::name)
                    .or_else(|| Shape::from_name(t).map(Shape::name))
                    .expect("colour or object in lexicon")
            })
            .collect(),
    }
}

/// Counterfactual instruction: every replaceable token is swapped, with
/// probability `replace_prob`, for a uniformly drawn different token of the
/// same type. At least one token is always replaced. Deterministic in `seed`.
pub fn intervene(instruction: &Instruction, seed: u64, replace_prob: f64) -> Instruction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    intervene_with(instruction, &mut rng, replace_prob)
}

pub fn intervene_with(instruction: &Instruction, rng: &mut impl Rng, replace_prob: f64) -> Instruction {
    let slots: Vec<(usize, Vec<&'static str>)> = instruction
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (i, replacement_candidates(t)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    let mut chosen: Vec<bool> = slots.iter().map(|_| rng.gen_bool(replace_prob)).collect();
    if !chosen.iter().any(|&c| c) && !slots.is_empty() {
        let k = rng.gen_range(0..slots.len());
        chosen[k] = true;
    }
    let mut out = instruction.clone();
    for ((pos, cands), pick) in slots.iter().zip(chosen) {
        if pick {
            let new = cands.choose(rng).expect("non-empty candidates");
            out.tokens[*pos].text = new.to_string();
        }
    }
    out
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Token ids: `PAD`, `BOS`, `EOS`, then the lexicon in file order.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{0}` is not in the vocabulary")]
pub struct OutOfVocabulary(pub String);

impl Vocabulary {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>"].map(String::from).into();
        tokens.extend(lexicon().entries().iter().map(|(t, _)| t.clone()));
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize, OutOfVocabulary> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| OutOfVocabulary(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, instruction: &Instruction) -> Result<Vec<usize>, OutOfVocabulary> {
        instruction.tokens().iter().map(|t| self.id(&t.text)).collect()
    }

    /// Decoder target: tokens, `EOS`, then `PAD` up to `len`.
    pub fn target(&self, instruction: &Instruction, len: usize) -> Result<Vec<usize>, OutOfVocabulary> {
        let mut ids = self.encode(instruction)?;
        ids.push(EOS);
        ids.resize(len.max(ids.len()), PAD);
        Ok(ids)
    }

    /// Tokens of a decoded id sequence up to the first `EOS`/`PAD`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS && i != PAD)
            .map(|&i| self.tokens[i].clone())
            .collect()
    }
}
