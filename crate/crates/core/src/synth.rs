//! Synthetic corpora with a planted verb-class chain.
//!
//! Every story opens with an escape and then wanders. At each step it either
//! advances one link along `escape-51.1 → search-35.2 → discover-84 → learn-14
//! → admire-31.2` or drifts into an everyday distractor (eating, sleeping,
//! waiting) that does not change its position on the chain. A story may also
//! derail, after which it never advances again. Objects are tied
//! to the verb class, so an n-gram model conditioned on the previous sentence
//! learns the chain transitions.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence, Story, VerbClass, VerbClassIndex};
use crate::seed::rng_for;

/// Chain classes in order; the last one is the natural goal.
pub const CHAIN: [&str; 5] = ["escape-51.1", "search-35.2", "discover-84", "learn-14", "admire-31.2"];

pub const DISTRACTORS: [&str; 3] = ["eat-39.1", "sleep-40.4", "wait-47.1"];

pub const NAMES: [&str; 4] = ["Alex", "Sam", "Jordan", "Casey"];

struct Template {
    class: &'static str,
    verbs: &'static [&'static str],
    link: &'static str,
    objects: &'static [&'static str],
}

const TEMPLATES: [Template; 8] = [
    Template { class: "escape-51.1", verbs: &["escaped", "fled"], link: "", objects: &["prison", "dungeon", "tower"] },
    Template { class: "search-35.2", verbs: &["searched", "explored"], link: "", objects: &["forest", "library", "attic"] },
    Template { class: "discover-84", verbs: &["discovered", "found"], link: "", objects: &["map", "letter", "key"] },
    Template { class: "learn-14", verbs: &["learned", "studied"], link: "", objects: &["language", "secret", "spell"] },
    Template { class: "admire-31.2", verbs: &["admired", "loved"], link: "", objects: &["painting", "garden", "sunset"] },
    Template { class: "eat-39.1", verbs: &["ate", "devoured"], link: "", objects: &["bread", "apple", "soup"] },
    Template { class: "sleep-40.4", verbs: &["slept", "napped"], link: " in", objects: &["barn", "hammock", "tent"] },
    Template { class: "wait-47.1", verbs: &["waited", "lingered"], link: " at", objects: &["station", "bridge", "gate"] },
];

/// Verb-class index covering every lemma the planted corpus uses.
pub fn planted_index() -> VerbClassIndex {
    const LEMMAS: [(&str, &str); 16] = [
        ("escape", "escape-51.1"),
        ("flee", "escape-51.1"),
        ("search", "search-35.2"),
        ("explore", "search-35.2"),
        ("discover", "discover-84"),
        ("find", "discover-84"),
        ("learn", "learn-14"),
        ("study", "learn-14"),
        ("admire", "admire-31.2"),
        ("love", "admire-31.2"),
        ("eat", "eat-39.1"),
        ("devour", "eat-39.1"),
        ("sleep", "sleep-40.4"),
        ("nap", "sleep-40.4"),
        ("wait", "wait-47.1"),
        ("linger", "wait-47.1"),
    ];
    LEMMAS.iter().map(|(l, c)| (l.to_string(), VerbClass::new(*c))).collect()
}

/// A small VerbNet-style index in `lemma<TAB>class` form, including the full
/// thirteen-member discover-84 block.
pub const SAMPLE_VERBNET_TSV: &str = "\
# lemma\tclass
admire\tadmire-31.2
adore\tadmire-31.2
love\tadmire-31.2
ascertain\tdiscover-84
deduce\tdiscover-84
detect\tdiscover-84
determine\tdiscover-84
discern\tdiscover-84
discover\tdiscover-84
establish\tdiscover-84
figure\tdiscover-84
find\tdiscover-84
guess\tdiscover-84
identify\tdiscover-84
solve\tdiscover-84
verify\tdiscover-84
devour\teat-39.1
eat\teat-39.1
escape\tescape-51.1
flee\tescape-51.1
learn\tlearn-14
study\tlearn-14
explore\tsearch-35.2
search\tsearch-35.2
nap\tsleep-40.4
sleep\tsleep-40.4
linger\twait-47.1
wait\twait-47.1
";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub stories: usize,
    /// Probability of advancing one link per sentence.
    pub forward_prob: f64,
    /// Probability per sentence of abandoning the chain for good; the story
    /// then continues with distractors only.
    pub derail_prob: f64,
    /// Sentences per story.
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig { stories: 200, forward_prob: 0.4, derail_prob: 0.2, max_sentences: 12, seed: 0 }
    }
}

fn render<R: Rng>(template: &Template, name: &str, rng: &mut R) -> Sentence {
    let verb = template.verbs.choose(rng).expect("non-empty");
    let object = template.objects.choose(rng).expect("non-empty");
    Sentence::new(format!("{name} {verb}{} the {object}.", template.link))
}

fn template(class: &str) -> &'static Template {
    TEMPLATES.iter().find(|t| t.class == class).expect("known class")
}

/// Generate the planted corpus (unannotated). Every story has exactly
/// `max_sentences` sentences; once the goal is reached only distractors follow.
pub fn planted_corpus(config: &PlantedConfig) -> Corpus {
    let mut rng = rng_for(config.seed, "synth/planted");
    let mut stories = Vec::with_capacity(config.stories);
    for i in 0..config.stories {
        let name = NAMES.choose(&mut rng).expect("non-empty");
        let mut stage = 0;
        let mut derailed = false;
        let mut sentences = vec![render(template(CHAIN[0]), name, &mut rng)];
        while sentences.len() < config.max_sentences {
            let on_chain = !derailed && stage + 1 < CHAIN.len();
            let u: f64 = rng.random();
            let class = if on_chain && u < config.forward_prob {
                stage += 1;
                CHAIN[stage]
            } else {
                derailed |= on_chain && u < config.forward_prob + config.derail_prob;
                DISTRACTORS.choose(&mut rng).expect("non-empty")
            };
            sentences.push(render(template(class), name, &mut rng));
        }
        stories.push(Story { id: format!("planted-{i:04}"), sentences });
    }
    Corpus::new(stories)
}
