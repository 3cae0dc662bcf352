//! Deterministic synthetic world: a small knowledge base of people, places
//! and organisations, templated documents with anchors, entity pages, and
//! typing / NER / relation-classification splits over the same entities.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::downstream::{Examples, NerExample, RelcExample, TaskDataset, TypingExample};
use crate::error::{Error, Result};
use crate::kb::{write_documents, write_entities, write_facts, Anchor, Document, EntityEntry, FactTriple};
use crate::util::{mix_seed, write_string};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub num_docs: usize,
    pub sentences_per_doc: usize,
    pub num_persons: usize,
    pub heldout_fraction: f64,
    pub typing_sizes: (usize, usize),
    pub ner_sizes: (usize, usize),
    pub relc_sizes: (usize, usize),
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 7,
            num_docs: 250,
            sentences_per_doc: 8,
            num_persons: 24,
            heldout_fraction: 0.05,
            typing_sizes: (400, 200),
            ner_sizes: (400, 200),
            relc_sizes: (2000, 400),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Kind {
    Person,
    City,
    Country,
    University,
    Company,
}

impl Kind {
    fn ner_type(self) -> &'static str {
        match self {
            Kind::Person => "PER",
            Kind::City | Kind::Country => "LOC",
            Kind::University | Kind::Company => "ORG",
        }
    }
}

struct Rel {
    id: &'static str,
    surface: &'static str,
    /// Frequent, simple relations get more sentences.
    weight: u32,
    templates: &'static [&'static str],
}

const RELATIONS: &[Rel] = &[
    Rel {
        id: "country",
        surface: "country",
        weight: 12,
        templates: &["{h} is a city in {t} .", "the city of {h} belongs to {t} .", "{h} lies in the north of {t} ."],
    },
    Rel {
        id: "capital",
        surface: "capital",
        weight: 20,
        templates: &["the capital of {h} is {t} .", "{t} is the capital of {h} ."],
    },
    Rel {
        id: "shares_border_with",
        surface: "shares border with",
        weight: 20,
        templates: &["{h} shares a border with {t} .", "{h} and {t} are neighbours ."],
    },
    Rel {
        id: "located_in",
        surface: "located in",
        weight: 12,
        templates: &["{h} is located in {t} .", "{h} has its campus in {t} ."],
    },
    Rel {
        id: "headquartered_in",
        surface: "headquartered in",
        weight: 12,
        templates: &["{h} is headquartered in {t} .", "{h} has its main office in {t} ."],
    },
    Rel {
        id: "citizen_of",
        surface: "citizen of",
        weight: 8,
        templates: &["{h} is a citizen of {t} .", "{h} holds a passport from {t} ."],
    },
    Rel {
        id: "born_in",
        surface: "born in",
        weight: 1,
        templates: &["{h} was born in {t} .", "{t} is the birthplace of {h} ."],
    },
    Rel {
        id: "lives_in",
        surface: "lives in",
        weight: 1,
        templates: &["{h} lives in {t} .", "{h} moved to {t} recently ."],
    },
    Rel {
        id: "educated_at",
        surface: "educated at",
        weight: 1,
        templates: &["{h} graduated from {t} .", "{h} studied at {t} ."],
    },
    Rel {
        id: "employer",
        surface: "employer",
        weight: 1,
        templates: &["{h} works for {t} .", "{h} is employed by {t} ."],
    },
    Rel {
        id: "spouse",
        surface: "spouse",
        weight: 1,
        templates: &["{h} is married to {t} .", "{h} and {t} married last year ."],
    },
    Rel {
        id: "sibling",
        surface: "sibling",
        weight: 1,
        templates: &["{h} is a sibling of {t} .", "{h} and {t} grew up as siblings ."],
    },
    Rel {
        id: "founded_by",
        surface: "founded by",
        weight: 1,
        templates: &["{h} was founded by {t} .", "{t} started {h} ."],
    },
];

/// Relations a relation classifier is asked to tell apart.
pub const RELC_RELATIONS: &[&str] = &["born_in", "lives_in", "educated_at", "employer", "spouse", "sibling", "founded_by"];

const FILLER: &[&str] = &[
    "{e} was mentioned in the news .",
    "people often talk about {e} .",
    "{e} appeared in a recent article .",
    "many visitors know {e} well .",
];

const PAIR_CONTEXTS: &[&str] = &[
    "{h} and {t} were both mentioned in the report .",
    "the article discussed {h} together with {t} .",
    "{h} , as well as {t} , appeared in the story .",
    "a note about {h} also named {t} .",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tas", "vor", "ul", "bei", "sar", "dun", "pel", "ori", "gan", "hes", "lin", "mor", "nua",
    "qui", "rel", "sto", "tav", "ven", "wyn", "zel", "ab", "cor", "dra", "fen", "gil", "jor",
];

#[derive(Debug, Clone)]
struct Entity {
    id: String,
    name: Vec<String>,
    kind: Kind,
    labels: Vec<String>,
}

/// The generated world and its task splits.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub entities: Vec<EntityEntry>,
    pub facts: Vec<FactTriple>,
    pub relation_surfaces: Vec<(String, Vec<String>)>,
    pub heldout: Vec<FactTriple>,
    pub documents: Vec<Document>,
    pub typing: (TaskDataset, TaskDataset),
    pub ner: (TaskDataset, TaskDataset),
    pub relc: (TaskDataset, TaskDataset),
}

struct Namer {
    used: HashSet<String>,
}

impl Namer {
    fn word(&mut self, rng: &mut ChaCha8Rng, syllables: usize, suffix: &str) -> String {
        loop {
            let mut w: String = (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("nonempty")).collect();
            w.push_str(suffix);
            let mut chars = w.chars();
            let w = match chars.next() {
                Some(c) => c.to_uppercase().chain(chars).collect::<String>(),
                None => continue,
            };
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Fills `{h}`/`{t}` (or `{e}`) and returns tokens plus the inclusive spans
/// of each slot, in the order `[h, t]` / `[e]`.
fn render(template: &str, slots: &[(&str, &[String])]) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut out = Vec::new();
    let mut spans = vec![(0, 0); slots.len()];
    for word in template.split_whitespace() {
        match slots.iter().position(|(key, _)| *key == word) {
            Some(i) => {
                let start = out.len();
                out.extend(slots[i].1.iter().cloned());
                spans[i] = (start, out.len() - 1);
            }
            None => out.push(word.to_string()),
        }
    }
    (out, spans)
}

pub fn generate(config: &ToyConfig) -> Result<ToyWorld> {
    if config.num_persons < 8 || config.num_docs == 0 || config.sentences_per_doc == 0 {
        return Err(Error::Config("toy world needs >= 8 persons and a nonempty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut namer = Namer { used: HashSet::new() };
    let mut entities: Vec<Entity> = Vec::new();
    let mut add = |id: String, name: Vec<String>, kind: Kind, labels: &[&str]| {
        entities.push(Entity {
            id,
            name,
            kind,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        });
        entities.len() - 1
    };

    let countries: Vec<usize> = (0..5)
        .map(|i| {
            let name = namer.word(&mut rng, 2, "ia");
            add(format!("C{i}"), vec![name], Kind::Country, &["country", "location"])
        })
        .collect();
    let cities: Vec<usize> = (0..10)
        .map(|i| {
            let name = namer.word(&mut rng, 2, "");
            add(format!("T{i}"), vec![name], Kind::City, &["city", "location"])
        })
        .collect();
    let universities: Vec<usize> = (0..6)
        .map(|i| {
            let name = vec![namer.word(&mut rng, 2, ""), "University".to_string()];
            add(format!("U{i}"), name, Kind::University, &["organization", "university"])
        })
        .collect();
    let companies: Vec<usize> = (0..6)
        .map(|i| {
            let suffix = ["Corp", "Labs", "Works"][i % 3];
            let name = vec![namer.word(&mut rng, 2, ""), suffix.to_string()];
            add(format!("B{i}"), name, Kind::Company, &["company", "organization"])
        })
        .collect();
    let occupations = [None, Some("scientist"), Some("artist")];
    let persons: Vec<usize> = (0..config.num_persons)
        .map(|i| {
            let name = vec![namer.word(&mut rng, 2, ""), namer.word(&mut rng, 3, "")];
            let occ = occupations[rng.gen_range(0..3)];
            let mut labels = vec!["person"];
            labels.extend(occ);
            labels.sort_unstable();
            add(format!("P{i}"), name, Kind::Person, &labels)
        })
        .collect();

    let mut facts: Vec<FactTriple> = Vec::new();
    let mut fact = |h: usize, r: &str, t: usize, ents: &[Entity]| {
        facts.push(FactTriple::new(ents[h].id.clone(), r, ents[t].id.clone()));
    };
    let city_country: Vec<usize> = (0..cities.len()).map(|i| countries[i % countries.len()]).collect();
    for (i, &c) in cities.iter().enumerate() {
        fact(c, "country", city_country[i], &entities);
    }
    for (i, &k) in countries.iter().enumerate() {
        fact(k, "capital", cities[i], &entities);
    }
    for i in 0..countries.len() {
        let j = (i + 1) % countries.len();
        fact(countries[i], "shares_border_with", countries[j], &entities);
        fact(countries[j], "shares_border_with", countries[i], &entities);
    }
    for &u in &universities {
        fact(u, "located_in", *cities.choose(&mut rng).expect("cities"), &entities);
    }
    for &b in &companies {
        fact(b, "headquartered_in", *cities.choose(&mut rng).expect("cities"), &entities);
    }
    for &p in &persons {
        fact(p, "citizen_of", *countries.choose(&mut rng).expect("countries"), &entities);
        let two: Vec<usize> = cities.choose_multiple(&mut rng, 2).copied().collect();
        fact(p, "born_in", two[0], &entities);
        fact(p, "lives_in", two[1], &entities);
        fact(p, "educated_at", *universities.choose(&mut rng).expect("universities"), &entities);
        fact(p, "employer", *companies.choose(&mut rng).expect("companies"), &entities);
    }
    let mut shuffled = persons.clone();
    shuffled.shuffle(&mut rng);
    let couples = shuffled.len() / 4;
    for pair in shuffled[..2 * couples].chunks(2) {
        fact(pair[0], "spouse", pair[1], &entities);
        fact(pair[1], "spouse", pair[0], &entities);
    }
    let rest = &shuffled[2 * couples..];
    for pair in rest.chunks(2).take(rest.len() / 3) {
        if let [a, b] = pair {
            fact(*a, "sibling", *b, &entities);
            fact(*b, "sibling", *a, &entities);
        }
    }
    for (&b, &p) in companies.iter().zip(shuffled.iter().rev()) {
        fact(b, "founded_by", p, &entities);
    }

    let index: BTreeMap<&str, usize> = entities.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let rel = |id: &str| RELATIONS.iter().find(|r| r.id == id).expect("known relation");

    // entity pages
    let name_of = |id: &str| entities[index[id]].name.join(" ");
    let mut pages: BTreeMap<String, String> = BTreeMap::new();
    for e in &entities {
        let about: Vec<&FactTriple> = facts.iter().filter(|f| f.head == e.id).collect();
        let tail = |r: &str| about.iter().find(|f| f.relation == r).map(|f| name_of(&f.tail));
        let n = e.name.join(" ");
        let page = match e.kind {
            Kind::Country => format!("{n} is a country whose capital is {} .", tail("capital").unwrap_or_default()),
            Kind::City => format!("{n} is a city in {} .", tail("country").unwrap_or_default()),
            Kind::University => format!("{n} is a university in {} .", tail("located_in").unwrap_or_default()),
            Kind::Company => format!(
                "{n} is a company based in {} founded by {} .",
                tail("headquartered_in").unwrap_or_default(),
                tail("founded_by").unwrap_or_default()
            ),
            Kind::Person => {
                let what = e.labels.iter().find(|l| *l != "person").map(String::as_str).unwrap_or("person");
                format!(
                    "{n} is a {what} born in {} who studied at {} and works for {} .",
                    tail("born_in").unwrap_or_default(),
                    tail("educated_at").unwrap_or_default(),
                    tail("employer").unwrap_or_default()
                )
            }
        };
        pages.insert(e.id.clone(), page);
    }

    // documents
    let mut documents = Vec::with_capacity(config.num_docs);
    for d in 0..config.num_docs {
        let focus = &entities[d % entities.len()];
        let involved: Vec<&FactTriple> = facts
            .iter()
            .filter(|f| f.head == focus.id || f.tail == focus.id)
            .collect();
        let weights: Vec<u32> = involved.iter().map(|f| rel(&f.relation).weight).collect();
        let total_w: u32 = weights.iter().sum();
        let mut sentences = Vec::new();
        let mut anchors = Vec::new();
        for s in 0..config.sentences_per_doc {
            if total_w == 0 || rng.gen_bool(0.2) {
                let template = FILLER.choose(&mut rng).expect("filler");
                let (toks, spans) = render(template, &[("{e}", &focus.name)]);
                anchors.push(Anchor { sent: s, start: spans[0].0, end: spans[0].1, entity: focus.id.clone() });
                sentences.push(toks);
                continue;
            }
            let mut pick = rng.gen_range(0..total_w);
            let mut chosen = involved[0];
            for (f, &w) in involved.iter().zip(&weights) {
                if pick < w {
                    chosen = f;
                    break;
                }
                pick -= w;
            }
            let template = rel(&chosen.relation).templates.choose(&mut rng).expect("templates");
            let (h, t) = (&entities[index[chosen.head.as_str()]], &entities[index[chosen.tail.as_str()]]);
            let (toks, spans) = render(template, &[("{h}", &h.name), ("{t}", &t.name)]);
            for (span, e) in spans.iter().zip([h, t]) {
                anchors.push(Anchor { sent: s, start: span.0, end: span.1, entity: e.id.clone() });
            }
            sentences.push(toks);
        }
        documents.push(Document {
            doc_id: format!("doc{d:04}"),
            sentences,
            anchors,
        });
    }

    // held-out facts
    let mut task_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1));
    let n_held = ((config.heldout_fraction * facts.len() as f64).round() as usize).min(facts.len());
    let mut heldout: Vec<FactTriple> = facts.choose_multiple(&mut task_rng, n_held).cloned().collect();
    heldout.sort();

    // typing
    let typing_example = |rng: &mut ChaCha8Rng| {
        let e = entities.choose(rng).expect("entities");
        let template = FILLER.choose(rng).expect("filler");
        let (toks, spans) = render(template, &[("{e}", &e.name)]);
        TypingExample {
            tokens: toks,
            span: [spans[0].0, spans[0].1],
            labels: e.labels.clone(),
        }
    };
    let typing_train = (0..config.typing_sizes.0).map(|_| typing_example(&mut task_rng)).collect();
    let typing_test = (0..config.typing_sizes.1).map(|_| typing_example(&mut task_rng)).collect();

    // NER over fact sentences
    let ner_example = |rng: &mut ChaCha8Rng| {
        let f = facts.choose(rng).expect("facts");
        let template = rel(&f.relation).templates.choose(rng).expect("templates");
        let (h, t) = (&entities[index[f.head.as_str()]], &entities[index[f.tail.as_str()]]);
        let (toks, spans) = render(template, &[("{h}", &h.name), ("{t}", &t.name)]);
        let mut tags = vec!["O".to_string(); toks.len()];
        for (span, e) in spans.iter().zip([h, t]) {
            let ty = e.kind.ner_type();
            tags[span.0] = format!("B-{ty}");
            for tag in &mut tags[span.0 + 1..=span.1] {
                *tag = format!("I-{ty}");
            }
        }
        NerExample { tokens: toks, tags }
    };
    let ner_train = (0..config.ner_sizes.0).map(|_| ner_example(&mut task_rng)).collect();
    let ner_test = (0..config.ner_sizes.1).map(|_| ner_example(&mut task_rng)).collect();

    // relation classification in neutral contexts
    let relc_pool: Vec<&FactTriple> = facts
        .iter()
        .filter(|f| RELC_RELATIONS.contains(&f.relation.as_str()))
        .collect();
    let relc_example = |rng: &mut ChaCha8Rng| {
        let f = relc_pool.choose(rng).expect("relc facts");
        let template = PAIR_CONTEXTS.choose(rng).expect("contexts");
        let (h, t) = (&entities[index[f.head.as_str()]], &entities[index[f.tail.as_str()]]);
        let (toks, spans) = render(template, &[("{h}", &h.name), ("{t}", &t.name)]);
        RelcExample {
            tokens: toks,
            subj: [spans[0].0, spans[0].1],
            obj: [spans[1].0, spans[1].1],
            label: f.relation.clone(),
        }
    };
    let relc_train = (0..config.relc_sizes.0).map(|_| relc_example(&mut task_rng)).collect();
    let relc_test = (0..config.relc_sizes.1).map(|_| relc_example(&mut task_rng)).collect();

    let entries = entities
        .iter()
        .map(|e| EntityEntry {
            id: e.id.clone(),
            name: e.name.clone(),
            page: tokens(&pages[&e.id]),
        })
        .collect();
    Ok(ToyWorld {
        entities: entries,
        facts,
        relation_surfaces: RELATIONS.iter().map(|r| (r.id.to_string(), tokens(r.surface))).collect(),
        heldout,
        documents,
        typing: (
            TaskDataset::new(Examples::Typing(typing_train)),
            TaskDataset::new(Examples::Typing(typing_test)),
        ),
        ner: (TaskDataset::new(Examples::Ner(ner_train)), TaskDataset::new(Examples::Ner(ner_test))),
        relc: (TaskDataset::new(Examples::Relc(relc_train)), TaskDataset::new(Examples::Relc(relc_test))),
    })
}

/// File locations inside a generated world directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyPaths {
    pub entities: PathBuf,
    pub facts: PathBuf,
    pub relations: PathBuf,
    pub heldout: PathBuf,
    pub documents: PathBuf,
    pub tasks: PathBuf,
}

impl ToyPaths {
    pub fn in_dir(dir: &Path) -> Self {
        ToyPaths {
            entities: dir.join("entities.jsonl"),
            facts: dir.join("facts.tsv"),
            relations: dir.join("relations.tsv"),
            heldout: dir.join("heldout.tsv"),
            documents: dir.join("documents.jsonl"),
            tasks: dir.join("tasks"),
        }
    }

    /// `<tasks>/<task>.<split>.jsonl`
    pub fn task_split(&self, task: &str, split: &str) -> PathBuf {
        self.tasks.join(format!("{task}.{split}.jsonl"))
    }
}

impl ToyWorld {
    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn write(&self, dir: &Path) -> Result<ToyPaths> {
        let paths = ToyPaths::in_dir(dir);
        std::fs::create_dir_all(&paths.tasks).map_err(|e| Error::io(&paths.tasks, e))?;
        write_entities(&paths.entities, &self.entities)?;
        write_facts(&paths.facts, &self.facts)?;
        write_facts(&paths.heldout, &self.heldout)?;
        let relations: String = self
            .relation_surfaces
            .iter()
            .map(|(r, s)| format!("{r}\t{}\n", s.join(" ")))
            .collect();
        write_string(&paths.relations, &relations)?;
        write_documents(&paths.documents, &self.documents)?;
        for (name, (train, test)) in [("typing", &self.typing), ("ner", &self.ner), ("relc", &self.relc)] {
            train.save(&paths.task_split(name, "train"))?;
            test.save(&paths.task_split(name, "test"))?;
        }
        Ok(paths)
    }
}
