//! Part-of-speech tagging for first-noun selection.
//!
//! Two taggers are available: a bundled lexicon-and-suffix tagger that needs no
//! data files, and an averaged-perceptron tagger reading the NLTK JSON model
//! (`*.weights.json`, `*.tagdict.json`, `*.classes.json`).

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosTag {
    Noun,
    ProperNoun,
    Verb,
    Adjective,
    Adverb,
    Determiner,
    Pronoun,
    Preposition,
    Conjunction,
    Number,
    Punctuation,
    Other,
}

impl PosTag {
    /// Proper nouns count as nouns for masking.
    pub fn is_noun(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::ProperNoun)
    }

    /// Maps a Penn Treebank tag.
    pub fn from_penn(tag: &str) -> Self {
        match tag {
            "NN" | "NNS" => PosTag::Noun,
            "NNP" | "NNPS" => PosTag::ProperNoun,
            "DT" | "PDT" | "WDT" => PosTag::Determiner,
            "PRP" | "PRP$" | "WP" | "WP$" | "EX" => PosTag::Pronoun,
            "IN" | "TO" => PosTag::Preposition,
            "CC" => PosTag::Conjunction,
            "CD" => PosTag::Number,
            t if t.starts_with("VB") || t == "MD" => PosTag::Verb,
            t if t.starts_with("JJ") => PosTag::Adjective,
            t if t.starts_with("RB") || t == "WRB" => PosTag::Adverb,
            t if t.chars().all(|c| !c.is_alphanumeric()) => PosTag::Punctuation,
            _ => PosTag::Other,
        }
    }
}

pub trait PosTagger: Send + Sync {
    fn name(&self) -> &str;

    fn tag(&self, words: &[&str]) -> Vec<PosTag>;
}

/// Selects a tagger by config value: `lexicon` or `perceptron` (with a model directory).
pub fn load_tagger(name: &str, model_dir: Option<&Path>) -> Result<Box<dyn PosTagger>> {
    match name {
        "lexicon" => Ok(Box::new(LexiconTagger::new())),
        "perceptron" => {
            let dir = model_dir.ok_or_else(|| {
                Error::Config("mask.pos_tagger_path is required for the perceptron tagger".into())
            })?;
            Ok(Box::new(PerceptronTagger::from_dir(dir)?))
        }
        other => Err(Error::Config(format!(
            "unknown mask.pos_tagger {other:?}; expected \"lexicon\" or \"perceptron\""
        ))),
    }
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "each", "every", "some", "any", "no",
    "another", "either", "neither", "all", "both", "half", "several", "many", "much", "few",
    "such", "what", "which", "whose", "most", "more", "other",
];

const POSSESSIVES: &[&str] = &["my", "your", "his", "her", "its", "our", "their", "'s"];

const PRONOUNS: &[&str] = &[
    "i", "me", "mine", "myself", "you", "yours", "yourself", "he", "him", "himself", "she",
    "hers", "herself", "it", "itself", "we", "us", "ours", "ourselves", "they", "them",
    "theirs", "themselves", "who", "whom", "someone", "something", "anyone", "anything",
    "everyone", "everything", "nobody", "nothing", "somebody", "everybody", "there",
];

const PREPOSITIONS: &[&str] = &[
    "on", "in", "at", "of", "to", "for", "with", "by", "from", "into", "onto", "over", "under",
    "above", "below", "between", "among", "through", "during", "before", "after", "about",
    "against", "along", "around", "across", "behind", "beside", "besides", "beyond", "near",
    "inside", "outside", "within", "without", "toward", "towards", "upon", "off", "out", "up",
    "down", "via", "per", "like", "as", "than", "amid", "past", "underneath", "beneath", "atop",
];

const CONJUNCTIONS: &[&str] = &[
    "and", "or", "but", "nor", "so", "yet", "because", "while", "although", "though", "if",
    "unless", "whereas", "whether", "when", "where", "how", "why",
];

const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "having",
    "do", "does", "did", "done", "will", "would", "shall", "should", "can", "could", "may",
    "might", "must", "not", "'re", "'ve", "'m", "'ll", "'d", "'t",
];

const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "twenty", "thirty", "hundred", "thousand", "million", "dozen",
];

const VERB_STEMS: &[&str] = &[
    "sit", "stand", "walk", "run", "play", "hold", "look", "wear", "ride", "eat", "drink",
    "sleep", "lie", "smile", "pose", "fly", "swim", "jump", "climb", "throw", "catch", "kick",
    "carry", "pull", "push", "drive", "read", "write", "sing", "dance", "cook", "paint", "draw",
    "watch", "wait", "talk", "speak", "show", "attend", "perform", "celebrate", "arrive",
    "leave", "make", "take", "get", "give", "go", "come", "see", "use", "build", "open",
    "close", "cut", "grow", "fall", "rise", "shine", "float", "rest", "relax", "enjoy",
    "prepare", "decorate", "cross", "lead", "follow", "meet", "hug", "kiss", "laugh", "cry",
    "shop", "work", "study", "travel", "visit", "explore", "reach", "hang", "surround",
    "cover", "fill", "feature", "depict", "illustrate", "isolate", "stare", "gaze", "graze",
    "ski", "surf", "skate", "kneel", "lean", "pour", "serve", "feed", "bite", "hit", "move",
    "put", "set", "lay", "place", "pick", "fix", "wash", "clean", "check", "point", "reflect",
    "change", "turn", "become", "seem", "appear", "remain", "keep", "let", "help", "try",
    "want", "need", "like", "love", "hate", "know", "think", "feel", "find", "say", "tell",
    "ask", "call", "bring", "send", "buy", "sell", "pay", "win", "lose", "beat", "compete",
    "score", "shoot", "fight", "protest", "march", "gather", "greet", "wave", "blow", "burn",
    "melt", "freeze", "pass", "drop", "lift", "hide", "flee", "chase", "sail", "row", "fish",
    "hunt", "ski", "park", "land", "crash", "park", "begin", "start", "finish", "end", "drawn",
];

const IRREGULAR_VERBS: &[&str] = &[
    "sat", "stood", "ran", "held", "wore", "worn", "rode", "ridden", "ate", "eaten", "drank",
    "drunk", "slept", "lay", "lain", "flew", "flown", "swam", "swum", "threw", "thrown",
    "caught", "drove", "driven", "wrote", "written", "sang", "sung", "drew", "made", "took",
    "taken", "got", "gotten", "gave", "given", "went", "gone", "came", "seen", "saw", "shown",
    "spoke", "spoken", "grew", "grown", "fell", "fallen", "rose", "risen", "shone", "built",
    "hung", "met", "led", "left", "lit", "sent", "spent", "stuck", "struck", "swung", "taught",
    "thought", "told", "won", "wound", "known", "knew", "shaken", "shook", "begun", "began",
    "broken", "broke", "chosen", "chose", "forgotten", "frozen", "froze", "hidden", "hid",
    "stolen", "woken", "woke", "brought", "bought", "sold", "paid", "lost", "kept", "found",
    "said", "felt", "became", "fought", "shot", "fled", "laid",
];

const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "brown", "black", "white",
    "gray", "grey", "golden", "silver", "violet", "cyan", "magenta", "teal", "beige", "big",
    "small", "large", "little", "tiny", "huge", "tall", "short", "long", "wide", "narrow",
    "old", "young", "new", "beautiful", "pretty", "happy", "sad", "cute", "modern", "ancient",
    "famous", "traditional", "wooden", "empty", "full", "dark", "bright", "light", "sunny",
    "cloudy", "snowy", "rainy", "wet", "dry", "hot", "cold", "warm", "cool", "fresh", "quiet",
    "busy", "clean", "dirty", "colorful", "colourful", "abstract", "vintage", "rural", "urban",
    "local", "first", "second", "third", "last", "next", "single", "double", "round",
    "flat", "high", "low", "deep", "shallow", "heavy", "soft", "hard", "smooth", "rough",
    "thick", "thin", "fat", "slim", "good", "bad", "great", "best", "better", "nice", "fine",
    "real", "whole", "same", "different", "various", "own", "main", "free", "early", "late",
    "favorite", "favourite", "natural", "classic", "rustic", "elegant", "stylish", "fancy",
    "plain", "wild", "domestic", "male", "female", "adult", "baby", "lovely", "ugly", "tasty",
    "delicious", "striped", "spotted", "blurry", "shiny", "glossy", "cozy", "solid",
    "transparent", "upper", "lower", "left", "right", "central", "middle", "top", "bottom",
    "front", "rear", "inner", "outer", "overhead", "aerial", "close", "far", "open",
];

const ADVERBS: &[&str] = &[
    "very", "really", "quite", "too", "also", "just", "only", "still", "even", "almost",
    "always", "never", "often", "sometimes", "here", "now", "then", "together", "away", "back",
    "again", "fast", "well", "soon", "already", "ever", "once", "twice", "outdoors", "indoors",
    "nearby", "ahead", "apart", "abroad", "home", "alone", "not",
];

/// Words the suffix rules would otherwise misfile.
const NOUN_EXCEPTIONS: &[&str] = &[
    "family", "butterfly", "assembly", "supply", "jelly", "belly", "rally", "italy", "lily",
    "bully", "ally", "fly", "building", "painting", "clothing", "ceiling", "morning",
    "evening", "wedding", "ring", "king", "thing", "string", "spring", "wing", "swing",
    "sibling", "pudding", "meeting", "earring", "offspring", "seed", "speed", "weed",
    "breed", "reed", "steed", "shed", "bed", "sled", "bread", "cathedral", "dining",
    "housing", "ceiling", "railing", "parking", "landing", "setting", "opening", "ending",
    "beginning", "feeling", "crossing", "sailing", "surfing", "skiing", "hiking", "shopping",
    "fishing", "camping", "bedding", "frosting", "topping", "filling", "stuffing",
    "photo", "picture", "image", "view", "scene", "background", "person", "people", "man",
    "woman", "child", "children", "boy", "girl", "dog", "cat", "animal", "illustration",
];

struct Lexicon {
    words: HashMap<String, PosTag>,
}

fn lexicon() -> &'static Lexicon {
    static LEXICON: OnceLock<Lexicon> = OnceLock::new();
    LEXICON.get_or_init(|| {
        let mut words = HashMap::new();
        let mut put = |list: &[&str], tag: PosTag| {
            for w in list {
                words.entry((*w).to_string()).or_insert(tag);
            }
        };
        put(NOUN_EXCEPTIONS, PosTag::Noun);
        put(DETERMINERS, PosTag::Determiner);
        put(POSSESSIVES, PosTag::Pronoun);
        put(PRONOUNS, PosTag::Pronoun);
        put(AUXILIARIES, PosTag::Verb);
        put(PREPOSITIONS, PosTag::Preposition);
        put(CONJUNCTIONS, PosTag::Conjunction);
        put(NUMBER_WORDS, PosTag::Number);
        put(ADVERBS, PosTag::Adverb);
        put(ADJECTIVES, PosTag::Adjective);
        put(IRREGULAR_VERBS, PosTag::Verb);
        let mut verb_forms = Vec::new();
        for stem in VERB_STEMS {
            verb_forms.extend(inflect(stem));
        }
        for v in verb_forms {
            words.entry(v).or_insert(PosTag::Verb);
        }
        Lexicon { words }
    })
}

/// Base, third person, gerund and past forms of a regular verb stem.
fn inflect(stem: &str) -> Vec<String> {
    let mut out = vec![stem.to_string()];
    let bytes = stem.as_bytes();
    let last = *bytes.last().unwrap_or(&b' ');
    let vowel = |c: u8| b"aeiou".contains(&c);
    let third = if stem.ends_with('s') || stem.ends_with("sh") || stem.ends_with("ch") || stem.ends_with('x') || stem.ends_with('o') {
        format!("{stem}es")
    } else if last == b'y' && bytes.len() > 1 && !vowel(bytes[bytes.len() - 2]) {
        format!("{}ies", &stem[..stem.len() - 1])
    } else {
        format!("{stem}s")
    };
    out.push(third);
    // consonant-vowel-consonant stems double the final consonant (sit -> sitting)
    let cvc = bytes.len() == 3 && !vowel(bytes[0]) && vowel(bytes[1]) && !vowel(last) && !b"wxy".contains(&last);
    let stem_ing = if stem.ends_with("ie") {
        format!("{}ying", &stem[..stem.len() - 2])
    } else if last == b'e' && !stem.ends_with("ee") && bytes.len() > 2 {
        format!("{}ing", &stem[..stem.len() - 1])
    } else if cvc {
        format!("{stem}{}ing", last as char)
    } else {
        format!("{stem}ing")
    };
    out.push(stem_ing);
    let past = if last == b'e' {
        format!("{stem}d")
    } else if last == b'y' && bytes.len() > 1 && !vowel(bytes[bytes.len() - 2]) {
        format!("{}ied", &stem[..stem.len() - 1])
    } else if cvc {
        format!("{stem}{}ed", last as char)
    } else {
        format!("{stem}ed")
    };
    out.push(past);
    out
}

/// Dictionary tagger with suffix rules; unknown alphabetic words default to nouns.
#[derive(Debug, Default, Clone)]
pub struct LexiconTagger;

impl LexiconTagger {
    pub fn new() -> Self {
        Self
    }

    fn tag_one(word: &str, prev: Option<PosTag>) -> PosTag {
        let lower = word.to_lowercase();
        if lower.chars().all(|c| c.is_numeric()) {
            return PosTag::Number;
        }
        if lower.chars().all(|c| !c.is_alphanumeric()) {
            return PosTag::Punctuation;
        }
        let after_modifier = matches!(
            prev,
            Some(PosTag::Determiner | PosTag::Adjective | PosTag::Number | PosTag::Pronoun)
        );
        if let Some(&tag) = lexicon().words.get(&lower) {
            // "a walk", "their play": verb stems behave as nouns after modifiers
            if tag == PosTag::Verb && after_modifier && !AUXILIARIES.contains(&lower.as_str()) && !IRREGULAR_VERBS.contains(&lower.as_str()) {
                return PosTag::Noun;
            }
            return tag;
        }
        let len = lower.chars().count();
        if len > 5 && lower.ends_with("ly") {
            return PosTag::Adverb;
        }
        if len > 5 && lower.ends_with("ing") {
            return if after_modifier { PosTag::Noun } else { PosTag::Verb };
        }
        if len > 4 && lower.ends_with("ed") {
            return PosTag::Verb;
        }
        if (len > 5 && lower.ends_with("ous")) || (len > 5 && lower.ends_with("ful")) || (len > 6 && lower.ends_with("less")) {
            return PosTag::Adjective;
        }
        if word.chars().next().is_some_and(|c| c.is_uppercase()) && prev.is_some() {
            return PosTag::ProperNoun;
        }
        PosTag::Noun
    }
}

impl PosTagger for LexiconTagger {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn tag(&self, words: &[&str]) -> Vec<PosTag> {
        let mut prev = None;
        words
            .iter()
            .map(|w| {
                let t = Self::tag_one(w, prev);
                prev = Some(t);
                t
            })
            .collect()
    }
}

/// Averaged perceptron tagger compatible with the NLTK English model files.
pub struct PerceptronTagger {
    weights: HashMap<String, HashMap<String, f64>>,
    tagdict: HashMap<String, String>,
    classes: Vec<String>,
}

impl PerceptronTagger {
    pub fn new(
        weights: HashMap<String, HashMap<String, f64>>,
        tagdict: HashMap<String, String>,
        classes: Vec<String>,
    ) -> Self {
        let mut classes = classes;
        classes.sort();
        Self { weights, tagdict, classes }
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let find = |suffix: &str| -> Result<std::path::PathBuf> {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .find(|p| p.to_string_lossy().ends_with(suffix))
                .ok_or_else(|| Error::Config(format!("no *{suffix} in {}", dir.display())))
        };
        fn read<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })
        }
        let weights = read(&find("weights.json")?)?;
        let tagdict = read(&find("tagdict.json")?)?;
        let classes: Vec<String> = read(&find("classes.json")?)?;
        Ok(Self::new(weights, tagdict, classes))
    }

    fn normalize(word: &str) -> String {
        let first = word.chars().next();
        if word.contains('-') && first != Some('-') {
            "!HYPHEN".into()
        } else if word.chars().count() == 4 && word.chars().all(|c| c.is_ascii_digit()) {
            "!YEAR".into()
        } else if first.is_some_and(|c| c.is_ascii_digit()) {
            "!DIGITS".into()
        } else {
            word.to_lowercase()
        }
    }

    fn suffix(word: &str) -> String {
        let chars: Vec<char> = word.chars().collect();
        chars[chars.len().saturating_sub(3)..].iter().collect()
    }

    fn features(i: usize, word: &str, context: &[String], prev: &str, prev2: &str) -> Vec<String> {
        let i = i + 2;
        let first: String = word.chars().take(1).collect();
        vec![
            "bias".to_string(),
            format!("i suffix {}", Self::suffix(word)),
            format!("i pref1 {first}"),
            format!("i-1 tag {prev}"),
            format!("i-2 tag {prev2}"),
            format!("i tag+i-2 tag {prev} {prev2}"),
            format!("i word {}", context[i]),
            format!("i-1 tag+i word {prev} {}", context[i]),
            format!("i-1 word {}", context[i - 1]),
            format!("i-1 suffix {}", Self::suffix(&context[i - 1])),
            format!("i-2 word {}", context[i - 2]),
            format!("i+1 word {}", context[i + 1]),
            format!("i+1 suffix {}", Self::suffix(&context[i + 1])),
            format!("i+2 word {}", context[i + 2]),
        ]
    }

    fn predict(&self, features: &[String]) -> String {
        let mut counts: HashMap<&str, f64> = HashMap::new();
        for f in features {
            *counts.entry(f.as_str()).or_default() += 1.0;
        }
        let mut scores: HashMap<&str, f64> = HashMap::new();
        for (feat, value) in counts {
            if let Some(w) = self.weights.get(feat) {
                for (label, weight) in w {
                    *scores.entry(label.as_str()).or_default() += value * weight;
                }
            }
        }
        // ties resolve to the lexicographically largest label
        let mut best: Option<(&str, f64)> = None;
        for class in &self.classes {
            let s = scores.get(class.as_str()).copied().unwrap_or(0.0);
            match best {
                Some((_, b)) if s < b => {}
                _ => best = Some((class.as_str(), s)),
            }
        }
        best.map(|(c, _)| c.to_string()).unwrap_or_else(|| "NN".into())
    }

    /// Penn tags for `words`.
    pub fn tag_penn(&self, words: &[&str]) -> Vec<String> {
        let mut context = vec!["-START-".to_string(), "-START2-".to_string()];
        context.extend(words.iter().map(|w| Self::normalize(w)));
        context.push("-END-".into());
        context.push("-END2-".into());
        let (mut prev, mut prev2) = ("-START-".to_string(), "-START2-".to_string());
        let mut out = Vec::with_capacity(words.len());
        for (i, word) in words.iter().enumerate() {
            let tag = match self.tagdict.get(*word) {
                Some(t) => t.clone(),
                None => self.predict(&Self::features(i, word, &context, &prev, &prev2)),
            };
            prev2 = std::mem::replace(&mut prev, tag.clone());
            out.push(tag);
        }
        out
    }
}

impl PosTagger for PerceptronTagger {
    fn name(&self) -> &str {
        "perceptron"
    }

    fn tag(&self, words: &[&str]) -> Vec<PosTag> {
        self.tag_penn(words).iter().map(|t| PosTag::from_penn(t)).collect()
    }
}

/// Distinct labels known to a tagger's lexicon, exposed for diagnostics.
pub fn lexicon_size() -> usize {
    lexicon().words.keys().collect::<HashSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first_noun(text: &str) -> Option<String> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let tags = LexiconTagger::new().tag(&words);
        words.iter().zip(tags).find(|(_, t)| t.is_noun()).map(|(w, _)| w.to_string())
    }

    #[test]
    fn lexicon_picks_first_noun() {
        assert_eq!(first_noun("penguins on a pebble beach").as_deref(), Some("penguins"));
        assert_eq!(first_noun("on a pebble beach").as_deref(), Some("pebble"));
        assert_eq!(first_noun("a red circle on a blue background").as_deref(), Some("circle"));
        assert_eq!(first_noun("actor attends the premiere").as_deref(), Some("actor"));
        assert_eq!(first_noun("a walk on the beach").as_deref(), Some("walk"));
        assert_eq!(first_noun("run fast"), None);
        assert_eq!(first_noun("sitting quietly"), None);
    }

    #[test]
    fn inflections_cover_common_forms() {
        assert!(inflect("sit").contains(&"sitting".to_string()));
        assert!(inflect("carry").contains(&"carries".to_string()));
        assert!(inflect("lie").contains(&"lying".to_string()));
        assert!(inflect("pose").contains(&"posed".to_string()));
        assert!(lexicon_size() > 500);
    }

    #[test]
    fn penn_mapping() {
        assert!(PosTag::from_penn("NNP").is_noun());
        assert!(PosTag::from_penn("NNS").is_noun());
        assert_eq!(PosTag::from_penn("VBZ"), PosTag::Verb);
        assert_eq!(PosTag::from_penn(","), PosTag::Punctuation);
    }

    fn toy_perceptron() -> PerceptronTagger {
        let mut weights: HashMap<String, HashMap<String, f64>> = HashMap::new();
        weights.insert("i suffix ast".into(), HashMap::from([("RB".to_string(), 2.0)]));
        weights.insert("bias".into(), HashMap::from([("NN".to_string(), 0.5), ("VB".to_string(), 0.1)]));
        weights.insert("i-1 tag -START-".into(), HashMap::from([("VB".to_string(), 1.0)]));
        let tagdict = HashMap::from([("on".to_string(), "IN".to_string())]);
        PerceptronTagger::new(weights, tagdict, vec!["NN".into(), "VB".into(), "RB".into(), "IN".into()])
    }

    #[test]
    fn perceptron_scores_features() {
        let t = toy_perceptron();
        assert_eq!(t.tag_penn(&["run", "fast"]), vec!["VB", "RB"]);
        assert_eq!(t.tag_penn(&["run", "on", "grass"]), vec!["VB", "IN", "NN"]);
        assert_eq!(PerceptronTagger::normalize("1999"), "!YEAR");
        assert_eq!(PerceptronTagger::normalize("well-known"), "!HYPHEN");
    }

    #[test]
    fn perceptron_loads_nltk_json_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(p.join("averaged_perceptron_tagger_eng.weights.json"), r#"{"bias": {"NN": 1.0}}"#).unwrap();
        std::fs::write(p.join("averaged_perceptron_tagger_eng.tagdict.json"), r#"{"the": "DT"}"#).unwrap();
        std::fs::write(p.join("averaged_perceptron_tagger_eng.classes.json"), r#"["NN", "DT"]"#).unwrap();
        let t = load_tagger("perceptron", Some(p)).unwrap();
        assert_eq!(t.tag(&["the", "dog"]), vec![PosTag::Determiner, PosTag::Noun]);
        assert!(matches!(load_tagger("perceptron", None), Err(Error::Config(_))));
        assert!(matches!(load_tagger("spacy", None), Err(Error::Config(_))));
    }
}
