//! Aspect-sentiment examples, the synthetic corpus generator with planted
//! opinion words, vocabulary/encoding, and the JSONL corpus format.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sep>", "<mask>"];

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "P")]
    Positive,
    #[serde(rename = "N")]
    Negative,
    #[serde(rename = "O")]
    Neutral,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Positive, Label::Negative, Label::Neutral];

    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
            Label::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::Positive => "P",
            Label::Negative => "N",
            Label::Neutral => "O",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// 80/10/10 assignment from a hash of the example id.
    pub fn for_id(id: &str) -> Split {
        match rng::fnv1a(id.as_bytes()) % 10 {
            0..=7 => Split::Train,
            8 => Split::Dev,
            _ => Split::Test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One (sentence, aspect) pair. Field order is the JSONL field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    /// Half-open `[begin, end)` token span of the aspect term.
    pub aspect: [usize; 2],
    pub label: Label,
    /// Gold opinion-word token indices; empty when unannotated.
    #[serde(default)]
    pub opinion: Vec<usize>,
    pub split: Split,
}

impl Example {
    pub fn aspect_range(&self) -> std::ops::Range<usize> {
        self.aspect[0]..self.aspect[1]
    }

    pub fn aspect_tokens(&self) -> &[String] {
        &self.tokens[self.aspect_range()]
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(("tokens", "sentence is empty".into()));
        }
        let [b, e] = self.aspect;
        if b >= e || e > n {
            return Err(("aspect", format!("span [{b}, {e}) invalid for {n} tokens")));
        }
        for &o in &self.opinion {
            if o >= n {
                return Err(("opinion", format!("index {o} out of bounds for {n} tokens")));
            }
            if (b..e).contains(&o) {
                return Err(("opinion", format!("index {o} lies inside the aspect span")));
            }
        }
        Ok(())
    }
}

pub fn by_split(corpus: &[Example], split: Split) -> Vec<Example> {
    corpus.iter().filter(|e| e.split == split).cloned().collect()
}

// ---------------------------------------------------------------- vocabulary

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved entries followed by the sorted distinct tokens of `corpus`.
    pub fn build(corpus: &[Example]) -> Vocab {
        let words: BTreeSet<&str> = corpus
            .iter()
            .flat_map(|e| e.tokens.iter().map(String::as_str))
            .collect();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(w)).map(str::to_owned));
        Vocab::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::format(None, "vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format(None, format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) if i >= RESERVED.len() => i,
            _ => UNK_ID,
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token) != UNK_ID
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

// ------------------------------------------------------------------ encoding

/// Model input: sentence ids, separator, aspect ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub ids: Vec<usize>,
    pub sentence_len: usize,
    /// In-sentence aspect span.
    pub aspect: [usize; 2],
    pub label: usize,
    pub gold: Vec<usize>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Over the full sequence; true on the in-sentence aspect span.
    pub fn aspect_mask(&self) -> Vec<bool> {
        (0..self.ids.len())
            .map(|i| i >= self.aspect[0] && i < self.aspect[1])
            .collect()
    }

    /// Over sentence positions; false on the aspect span.
    pub fn selectable(&self) -> Vec<bool> {
        (0..self.sentence_len)
            .map(|i| i < self.aspect[0] || i >= self.aspect[1])
            .collect()
    }

    /// Ids right-padded with the pad id.
    pub fn padded(&self, max_len: usize) -> Vec<usize> {
        let mut out = self.ids.clone();
        out.resize(max_len.max(self.ids.len()), PAD_ID);
        out
    }
}

pub fn tokenize_and_encode(example: &Example, vocab: &Vocab, max_len: usize) -> Result<EncodedExample> {
    example
        .validate()
        .map_err(|(field, msg)| Error::Contract(format!("example {}: {field}: {msg}", example.id)))?;
    let aspect = example.aspect_tokens();
    let len = example.tokens.len() + 1 + aspect.len();
    if len > max_len {
        return Err(Error::Truncation { len, max_len });
    }
    let mut ids: Vec<usize> = example.tokens.iter().map(|t| vocab.id(t)).collect();
    ids.push(SEP_ID);
    ids.extend(aspect.iter().map(|t| vocab.id(t)));
    Ok(EncodedExample {
        id: example.id.clone(),
        ids,
        sentence_len: example.tokens.len(),
        aspect: example.aspect,
        label: example.label.index(),
        gold: example.opinion.clone(),
    })
}

pub fn encode_corpus(corpus: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedExample>> {
    corpus.iter().map(|e| tokenize_and_encode(e, vocab, max_len)).collect()
}

/// Sentence tokens back from ids; `None` marks positions encoded as unknown.
pub fn decode<'v>(encoded: &EncodedExample, vocab: &'v Vocab) -> Vec<Option<&'v str>> {
    encoded.ids[..encoded.sentence_len]
        .iter()
        .map(|&id| if id == UNK_ID { None } else { vocab.token(id) })
        .collect()
}

// --------------------------------------------------------------------- JSONL

pub fn save_jsonl(corpus: &[Example], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in corpus {
        serde_json::to_writer(&mut out, ex).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads and validates a whole file; any bad line fails the load.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        ex.validate().map_err(|(field, msg)| Error::Validation {
            line: line_no,
            field,
            msg,
        })?;
        if !seen.insert(ex.id.clone()) {
            return Err(Error::Validation {
                line: line_no,
                field: "id",
                msg: format!("duplicate id `{}`", ex.id),
            });
        }
        corpus.push(ex);
    }
    Ok(corpus)
}

// ----------------------------------------------------------------- generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Number of examples (one per sentence-aspect pair).
    pub size: usize,
    /// Whitespace-tokenized patterns with `{A1}`..`{A3}` aspect slots and
    /// matching `{O1}`..`{O3}` opinion slots.
    pub templates: Vec<String>,
    pub aspects: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub neutral: Vec<String>,
    /// Unannotated targets that distractor sentiment clauses attach to.
    pub distractors: Vec<String>,
    /// Probability that a sentence gets a distractor clause.
    pub noise_rate: f64,
    /// Probability that a multi-aspect sentence is forced to mix polarities.
    pub conflict_rate: f64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 1,
            size: 2500,
            templates: words(&[
                "the {A1} was {O1} .",
                "i thought the {A1} was really {O1} .",
                "honestly the {A1} is {O1} .",
                "{O1} {A1} here .",
                "we found the {A1} quite {O1} .",
                "the {A1} was {O1} but the {A2} was {O2} .",
                "the {A1} is {O1} , while the {A2} is {O2} .",
                "{O1} {A1} , but {O2} {A2} .",
                "i found the {A1} {O1} though the {A2} seemed {O2} .",
                "the {A1} was {O1} , the {A2} was {O2} and the {A3} was {O3} .",
            ]),
            aspects: words(&[
                "food",
                "service",
                "staff",
                "pizza",
                "pasta",
                "wine list",
                "prices",
                "ambience",
                "menu",
                "dessert",
                "coffee",
                "waiter",
                "sushi",
                "portions",
                "view",
                "drinks",
            ]),
            positive: words(&[
                "great",
                "delicious",
                "excellent",
                "friendly",
                "amazing",
                "fantastic",
                "superb",
                "lovely",
                "tasty",
                "wonderful",
            ]),
            negative: words(&[
                "terrible",
                "awful",
                "rude",
                "bland",
                "horrible",
                "disappointing",
                "poor",
                "overpriced",
                "slow",
                "greasy",
            ]),
            neutral: words(&[
                "average", "okay", "standard", "typical", "ordinary", "usual", "regular", "moderate",
            ]),
            distractors: words(&["parking", "music", "location", "weather", "street", "bathroom"]),
            noise_rate: 0.1,
            conflict_rate: 0.5,
        }
    }
}

#[derive(Debug)]
struct Template {
    tokens: Vec<Slot>,
    aspects: usize,
}

#[derive(Debug)]
enum Slot {
    Word(String),
    Aspect(usize),
    Opinion(usize),
}

fn parse_template(t: &str) -> Result<Template> {
    let mut tokens = Vec::new();
    let (mut aspects, mut opinions) = (BTreeSet::new(), BTreeSet::new());
    for w in t.split_whitespace() {
        let slot = match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            Some(inner) => {
                let (kind, num) = inner.split_at(1);
                let n: usize = num
                    .parse()
                    .ok()
                    .filter(|n| (1..=3).contains(n))
                    .ok_or_else(|| Error::Config(format!("bad slot `{w}` in template `{t}`")))?;
                match kind {
                    "A" => {
                        aspects.insert(n - 1);
                        Slot::Aspect(n - 1)
                    }
                    "O" => {
                        opinions.insert(n - 1);
                        Slot::Opinion(n - 1)
                    }
                    _ => return Err(Error::Config(format!("bad slot `{w}` in template `{t}`"))),
                }
            }
            None => Slot::Word(w.to_owned()),
        };
        tokens.push(slot);
    }
    let n = aspects.len();
    if n == 0 || aspects != opinions || aspects.iter().copied().ne(0..n) {
        return Err(Error::Config(format!(
            "template `{t}` needs matching {{A1..An}} and {{O1..On}} slots"
        )));
    }
    Ok(Template { tokens, aspects: n })
}

impl GeneratorConfig {
    fn lexicon(&self, label: Label) -> &[String] {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
            Label::Neutral => &self.neutral,
        }
    }

    /// Polarity of an opinion word according to the lexicons.
    pub fn polarity_of(&self, word: &str) -> Option<Label> {
        Label::ALL
            .into_iter()
            .find(|&l| self.lexicon(l).iter().any(|w| w == word))
    }

    fn validate(&self) -> Result<Vec<Template>> {
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.conflict_rate) {
            return Err(Error::Config("noise_rate and conflict_rate must lie in [0, 1]".into()));
        }
        for (name, lex) in [
            ("aspects", &self.aspects),
            ("positive", &self.positive),
            ("negative", &self.negative),
            ("neutral", &self.neutral),
        ] {
            if lex.is_empty() {
                return Err(Error::Config(format!("lexicon `{name}` is empty")));
            }
        }
        let mut seen = HashSet::new();
        let all = [
            &self.aspects,
            &self.positive,
            &self.negative,
            &self.neutral,
            &self.distractors,
        ];
        for entry in all.iter().flat_map(|l| l.iter()) {
            if !seen.insert(entry.as_str()) {
                return Err(Error::Config(format!("`{entry}` appears in more than one lexicon")));
            }
        }
        if self.noise_rate > 0.0 && self.distractors.is_empty() {
            return Err(Error::Config("noise_rate > 0 requires distractor entries".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("no templates".into()));
        }
        let templates = self
            .templates
            .iter()
            .map(|t| parse_template(t))
            .collect::<Result<Vec<_>>>()?;
        if let Some(t) = templates.iter().find(|t| t.aspects > self.aspects.len()) {
            return Err(Error::Config(format!(
                "a template needs {} distinct aspects but the lexicon has {}",
                t.aspects,
                self.aspects.len()
            )));
        }
        Ok(templates)
    }
}

/// Generates `config.size` examples. Each aspect's label is the polarity of
/// the opinion word planted for it, which is also its gold opinion index.
pub fn generate_corpus(config: &GeneratorConfig) -> Result<Vec<Example>> {
    let templates = config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut corpus = Vec::with_capacity(config.size);
    let mut sentence = 0usize;
    let sentiment: Vec<&String> = config.positive.iter().chain(&config.negative).collect();

    while corpus.len() < config.size {
        let template = templates.choose(&mut rng).expect("templates validated");
        let n = template.aspects;
        let aspects: Vec<&String> = config.aspects.choose_multiple(&mut rng, n).collect();

        let first = *Label::ALL.choose(&mut rng).expect("non-empty");
        let mut labels = vec![first];
        if n > 1 && rng.random_bool(config.conflict_rate) {
            // force at least one disagreement
            let others: Vec<Label> = Label::ALL.into_iter().filter(|&l| l != first).collect();
            labels.push(*others.choose(&mut rng).expect("non-empty"));
        }
        while labels.len() < n {
            labels.push(*Label::ALL.choose(&mut rng).expect("non-empty"));
        }
        let opinions: Vec<&String> = labels
            .iter()
            .map(|&l| config.lexicon(l).choose(&mut rng).expect("validated"))
            .collect();

        let mut tokens: Vec<String> = Vec::new();
        let mut spans = vec![[0usize; 2]; n];
        let mut gold = vec![0usize; n];
        for slot in &template.tokens {
            match slot {
                Slot::Word(w) => tokens.push(w.clone()),
                Slot::Aspect(j) => {
                    let begin = tokens.len();
                    tokens.extend(aspects[*j].split_whitespace().map(str::to_owned));
                    spans[*j] = [begin, tokens.len()];
                }
                Slot::Opinion(j) => {
                    gold[*j] = tokens.len();
                    tokens.push(opinions[*j].clone());
                }
            }
        }
        if config.noise_rate > 0.0 && rng.random_bool(config.noise_rate) {
            let target = config.distractors.choose(&mut rng).expect("validated");
            let word = sentiment.choose(&mut rng).expect("validated");
            let clause = [",", "and", "the", target.as_str(), "was", word.as_str()];
            let at = if tokens.last().map(String::as_str) == Some(".") {
                tokens.len() - 1
            } else {
                tokens.len()
            };
            tokens.splice(at..at, clause.iter().map(|s| s.to_string()));
        }

        for j in 0..n {
            if corpus.len() == config.size {
                break;
            }
            let id = format!("s{sentence:05}-a{}", j + 1);
            let split = Split::for_id(&id);
            corpus.push(Example {
                id,
                tokens: tokens.clone(),
                aspect: spans[j],
                label: labels[j],
                opinion: vec![gold[j]],
                split,
            });
        }
        sentence += 1;
    }
    Ok(corpus)
}

/// Summary statistics over the sentences of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub examples: usize,
    pub sentences: usize,
    pub multi_aspect_sentences: usize,
    /// Multi-aspect sentences whose aspects carry at least two labels.
    pub conflicting_sentences: usize,
}

impl CorpusStats {
    pub fn conflict_fraction(&self) -> f64 {
        if self.multi_aspect_sentences == 0 {
            0.0
        } else {
            self.conflicting_sentences as f64 / self.multi_aspect_sentences as f64
        }
    }
}

/// Groups examples into sentences by identical token sequence and id prefix.
pub fn corpus_stats(corpus: &[Example]) -> CorpusStats {
    let mut groups: HashMap<(&str, &[String]), HashSet<Label>> = HashMap::new();
    let mut sizes: HashMap<(&str, &[String]), usize> = HashMap::new();
    for ex in corpus {
        let prefix = ex.id.split('-').next().unwrap_or(&ex.id);
        let key = (prefix, ex.tokens.as_slice());
        groups.entry(key).or_default().insert(ex.label);
        *sizes.entry(key).or_default() += 1;
    }
    let multi: Vec<_> = sizes.iter().filter(|(_, &n)| n > 1).map(|(k, _)| *k).collect();
    CorpusStats {
        examples: corpus.len(),
        sentences: groups.len(),
        multi_aspect_sentences: multi.len(),
        conflicting_sentences: multi.iter().filter(|k| groups[*k].len() > 1).count(),
    }
}
