//! A small offline world for examples and tests: twelve medical
//! multiple-choice items, two corpora, a rule-driven model backend and a
//! mock snippet filter.
//!
//! The backend behaves like a language model that answers from its own
//! (sometimes wrong) knowledge unless the prompt carries a document about the
//! question: a supporting document moves it to the gold option, a misleading
//! one to a specific wrong option. Misleading documents win over supporting
//! ones. Documents about other questions are ignored.
//!
//! Accuracies by mode on this world: `closed_book` 6/12, `rag_plain` 7/12,
//! `rag_rationale` 9/12, `rag2_full` 11/12 (one item falls back to its
//! closed-book answer).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use crate::corpus::{chunk_document, ChunkParams, RegistryEntry, SourceDocument, Snippet};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::filter::{FilterKind, FilterSpec, MockEntry, MockFilter, DEFAULT_DECISION_THRESHOLD};
use crate::labeling::LabelingConfig;
use crate::pipeline::{CorpusDir, Dataset, Engine, LongformPair, Mode, RunConfig};
use crate::providers::{
    OpenAiProvider, Provider, ProviderConfig, ProviderKind, RecordingTransport, Route, Transport, WireRequest,
};
use crate::rationale::{rationale_query, Label, McqaItem, Options, PromptTemplate, QueryOptions, RationaleRecord, DOCUMENTS_HEADER};
use crate::retrieval::{RetrievalConfig, Retriever, SnippetStore, Strategy};
use crate::vindex::build_index;

pub const LLM_MODEL: &str = "demo-llm";
pub const EMBED_MODEL: &str = "demo-embed";
pub const RERANK_MODEL: &str = "demo-rerank";
pub const CORPORA: [&str; 2] = ["textbooks", "pubmed"];

const DIM: usize = 2 * ITEMS.len() + 1;
const FILLER_AXIS: usize = DIM - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Effect {
    Supports,
    Misleads(Label),
    Neutral,
}

/// Which query a document is close to in embedding space.
#[derive(Clone, Copy, Debug)]
enum Axis {
    Question,
    Rationale,
    Both,
}

struct Doc {
    corpus: usize,
    name: &'static str,
    title: &'static str,
    text: &'static str,
    effect: Effect,
    axis: Axis,
}

struct ItemSpec {
    question: &'static str,
    options: [&'static str; 4],
    gold: Label,
    closed: Label,
    rationale: &'static str,
    docs: &'static [Doc],
}

const T: usize = 0;
const P: usize = 1;

use Label::{A, B, C, D};

const ITEMS: [ItemSpec; 12] = [
    ItemSpec {
        question: "Deficiency of which vitamin causes scurvy?",
        options: ["Vitamin A", "Vitamin C", "Vitamin D", "Vitamin K"],
        gold: B,
        closed: B,
        rationale: "Bleeding gums and poor wound healing reflect defective collagen hydroxylation, and prolyl hydroxylase needs ascorbic acid as its cofactor.",
        docs: &[Doc {
            corpus: T,
            name: "q01-collagen",
            title: "Collagen synthesis",
            text: "Prolyl and lysyl hydroxylase require ascorbic acid; its deficiency produces scurvy with perifollicular hemorrhage and gum bleeding.",
            effect: Effect::Supports,
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "Which electrolyte abnormality produces peaked T waves on the electrocardiogram?",
        options: ["Hyperkalemia", "Hypokalemia", "Hypercalcemia", "Hyponatremia"],
        gold: A,
        closed: A,
        rationale: "A raised extracellular potassium concentration speeds myocardial repolarization and makes the repolarization wave tall and narrow.",
        docs: &[Doc {
            corpus: P,
            name: "q02-potassium",
            title: "Potassium and the ECG",
            text: "Early hyperkalemia shows tall tented T waves, followed by PR prolongation and QRS widening as potassium rises.",
            effect: Effect::Supports,
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "Which organism most commonly causes community-acquired pneumonia in adults?",
        options: ["Staphylococcus aureus", "Streptococcus pneumoniae", "Klebsiella pneumoniae", "Legionella pneumophila"],
        gold: B,
        closed: B,
        rationale: "Lobar consolidation with rust-colored sputum in a previously healthy adult is the classic pneumococcal picture.",
        docs: &[Doc {
            corpus: T,
            name: "q03-pneumococcus",
            title: "Pneumococcal disease",
            text: "Streptococcus pneumoniae remains the leading bacterial cause of pneumonia acquired outside hospital.",
            effect: Effect::Supports,
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "What is the first-line drug for anaphylaxis?",
        options: ["Diphenhydramine", "Intramuscular epinephrine", "Methylprednisolone", "Nebulized albuterol"],
        gold: B,
        closed: B,
        rationale: "Systemic mast cell degranulation with airway swelling and shock needs immediate alpha and beta adrenergic support.",
        docs: &[Doc {
            corpus: P,
            name: "q04-adrenaline",
            title: "Emergency treatment of anaphylaxis",
            text: "Intramuscular adrenaline into the anterolateral thigh is first-line; antihistamines and steroids are adjuncts only.",
            effect: Effect::Supports,
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "Injury to which nerve causes wrist drop?",
        options: ["Median nerve", "Ulnar nerve", "Radial nerve", "Axillary nerve"],
        gold: C,
        closed: C,
        rationale: "Loss of wrist extension points to the nerve that supplies the posterior forearm extensor compartment, often damaged at the spiral groove.",
        docs: &[Doc {
            corpus: T,
            name: "q05-spiral-groove",
            title: "Upper limb nerve injuries",
            text: "Midshaft humeral fractures injure the radial nerve in the spiral groove and cause wrist drop.",
            effect: Effect::Supports,
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "Which antibiotic class is associated with tendon rupture?",
        options: ["Fluoroquinolones", "Macrolides", "Tetracyclines", "Penicillins"],
        gold: A,
        closed: A,
        rationale: "Collagen degradation in the Achilles tendon is a recognised toxicity of DNA gyrase inhibitors, worse with concurrent steroids.",
        docs: &[Doc {
            corpus: P,
            name: "q06-case-series",
            title: "Tendinopathy case series",
            text: "A small uncontrolled series linked macrolide courses to Achilles tendon rupture in older adults taking steroids.",
            effect: Effect::Misleads(B),
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "A 67-year-old man with a COPD exacerbation has pH 7.28 and PaCO2 68 mmHg and is alert and cooperative. What is the most appropriate ventilatory support?",
        options: ["BiPAP non-invasive ventilation", "Endotracheal intubation", "High-flow nasal oxygen", "Simple face mask"],
        gold: A,
        closed: B,
        rationale: "Acute respiratory acidosis with carbon dioxide retention means ventilatory failure, which calls for definitive airway control.",
        docs: &[Doc {
            corpus: T,
            name: "q07-niv",
            title: "Non-invasive ventilation",
            text: "In hypercapnic COPD exacerbations with pH 7.25 to 7.35, BiPAP lowers intubation rates and mortality and is first-line in alert patients.",
            effect: Effect::Supports,
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "Which agent reverses the anticoagulant effect of dabigatran?",
        options: ["Vitamin K", "Protamine sulfate", "Idarucizumab", "Andexanet alfa"],
        gold: C,
        closed: D,
        rationale: "Reversal of a direct oral anticoagulant uses a recombinant decoy protein that soaks up the circulating drug.",
        docs: &[Doc {
            corpus: P,
            name: "q08-antidote",
            title: "Direct thrombin inhibitor reversal",
            text: "Idarucizumab is a humanized antibody fragment that binds dabigatran and reverses its effect within minutes.",
            effect: Effect::Supports,
            axis: Axis::Both,
        }],
    },
    ItemSpec {
        question: "A patient taking lithium develops polyuria with dilute urine that does not respond to desmopressin. What is the diagnosis?",
        options: ["Central diabetes insipidus", "Nephrogenic diabetes insipidus", "Primary polydipsia", "SIADH"],
        gold: B,
        closed: A,
        rationale: "Large volumes of dilute urine suggest too little antidiuretic hormone released from the posterior pituitary.",
        docs: &[
            Doc {
                corpus: T,
                name: "q09-collecting-duct",
                title: "Renal water handling",
                text: "Lithium enters collecting duct principal cells and blunts the response to antidiuretic hormone, a nephrogenic defect that desmopressin cannot correct.",
                effect: Effect::Supports,
                axis: Axis::Rationale,
            },
            Doc {
                corpus: P,
                name: "q09-monitoring",
                title: "Lithium monitoring",
                text: "Lithium toxicity presents with tremor, ataxia and confusion; serum levels are checked every few months.",
                effect: Effect::Neutral,
                axis: Axis::Question,
            },
        ],
    },
    ItemSpec {
        question: "A 25-year-old has episodic headache, palpitations and sweating with blood pressure 220/120 and an adrenal mass. Which drug should be started before surgery?",
        options: ["Propranolol", "Phenoxybenzamine", "Hydrochlorothiazide", "Lisinopril"],
        gold: B,
        closed: A,
        rationale: "Catecholamine surges drive the tachycardia, which responds to beta adrenergic blockade.",
        docs: &[
            Doc {
                corpus: T,
                name: "q10-alpha-first",
                title: "Perioperative catecholamine excess",
                text: "Beta blockade before alpha blockade risks unopposed vasoconstriction; phenoxybenzamine is started first in pheochromocytoma.",
                effect: Effect::Supports,
                axis: Axis::Rationale,
            },
            Doc {
                corpus: P,
                name: "q10-triad",
                title: "Paroxysmal hypertension",
                text: "Headache, palpitations and sweating form the classic triad, evaluated with plasma metanephrines.",
                effect: Effect::Neutral,
                axis: Axis::Question,
            },
        ],
    },
    ItemSpec {
        question: "What is the preferred treatment for a first episode of non-severe Clostridioides difficile infection?",
        options: ["Oral metronidazole", "Oral fidaxomicin", "Intravenous vancomycin", "Oral clindamycin"],
        gold: B,
        closed: A,
        rationale: "Anaerobic colitis after antibiotic exposure has traditionally been treated with a nitroimidazole.",
        docs: &[
            Doc {
                corpus: T,
                name: "q11-guideline",
                title: "Colitis guideline update",
                text: "Fidaxomicin is now preferred over nitroimidazole therapy for initial episodes because recurrence is lower.",
                effect: Effect::Supports,
                axis: Axis::Rationale,
            },
            Doc {
                corpus: P,
                name: "q11-levels",
                title: "Glycopeptide pharmacokinetics",
                text: "Parenteral vancomycin was reported to reach colonic levels adequate for Clostridioides difficile infection.",
                effect: Effect::Misleads(C),
                axis: Axis::Both,
            },
        ],
    },
    ItemSpec {
        question: "What is the most common cause of hypercalcemia in hospitalized patients?",
        options: ["Primary hyperparathyroidism", "Malignancy", "Sarcoidosis", "Thiazide diuretics"],
        gold: B,
        closed: A,
        rationale: "Persistently raised calcium with inappropriate parathyroid hormone is the usual endocrine explanation.",
        docs: &[Doc {
            corpus: T,
            name: "q12-albumin",
            title: "Interpreting serum calcium",
            text: "Total calcium should be corrected for albumin before a raised value is interpreted.",
            effect: Effect::Neutral,
            axis: Axis::Both,
        }],
    },
];

/// Unrelated snippets, one axis of their own, so zero-score ties never pull
/// another question's documents into a pool.
const FILLERS: [(usize, &str, &str); 4] = [
    (T, "general-1", "Hand hygiene before and after patient contact reduces hospital-acquired infection."),
    (T, "general-2", "Informed consent requires capacity, disclosure and voluntariness."),
    (P, "general-1", "Survey response rates among physicians have declined over two decades."),
    (P, "general-2", "Open access publication has grown steadily in clinical journals."),
];

const LONGFORM: [(&str, &str, &str); 3] = [
    (
        "What does BiPAP do in a COPD exacerbation?",
        "BiPAP supports ventilation and lowers carbon dioxide.",
        "BiPAP supports breathing and lowers carbon dioxide.",
    ),
    (
        "Why is epinephrine first-line for anaphylaxis?",
        "Epinephrine reverses vasodilation and airway swelling.",
        "Epinephrine reverses vasodilation and airway swelling.",
    ),
    (
        "How does lithium cause diabetes insipidus?",
        "Lithium blocks the kidney response to antidiuretic hormone.",
        "The collecting duct ignores vasopressin in lithium toxicity.",
    ),
];

fn item_id(i: usize) -> String {
    format!("q{:02}", i + 1)
}

fn closed_text(spec: &ItemSpec) -> String {
    format!("{} Therefore, the answer is {}.", spec.rationale, spec.closed)
}

fn option_text(spec: &ItemSpec, label: Label) -> &'static str {
    spec.options[label as usize]
}

pub fn items() -> Vec<McqaItem> {
    ITEMS
        .iter()
        .enumerate()
        .map(|(i, s)| McqaItem {
            item_id: item_id(i),
            question: s.question.to_string(),
            options: Options::new(s.options[0], s.options[1], s.options[2], s.options[3]),
            gold: s.gold,
            dataset: "demo".to_string(),
        })
        .collect()
}

pub fn dataset() -> Dataset {
    Dataset::from_items("demo", items()).expect("demo items are valid")
}

pub fn longform_pairs() -> Vec<LongformPair> {
    LONGFORM
        .iter()
        .enumerate()
        .map(|(i, (q, r, _))| LongformPair {
            id: Some(format!("lf{}", i + 1)),
            question: q.to_string(),
            reference: r.to_string(),
        })
        .collect()
}

/// The canned long-form answers, aligned with [`longform_pairs`].
pub fn longform_answers() -> Vec<&'static str> {
    LONGFORM.iter().map(|(_, _, a)| *a).collect()
}

fn one_chunk(corpus: usize, doc_id: &str, title: Option<&str>, body: &str) -> Snippet {
    let doc = SourceDocument {
        doc_id: doc_id.to_string(),
        corpus_id: CORPORA[corpus].to_string(),
        title: title.map(str::to_string),
        body: body.to_string(),
    };
    let mut chunks = chunk_document(&doc, ChunkParams::default()).expect("demo documents are valid");
    assert_eq!(chunks.len(), 1, "demo documents fit one window");
    chunks.remove(0)
}

/// Snippets of one corpus, in document order.
pub fn corpus_snippets(corpus_id: &str) -> Vec<Snippet> {
    let corpus = CORPORA.iter().position(|c| *c == corpus_id).expect("known demo corpus");
    let mut out: Vec<Snippet> = FILLERS
        .iter()
        .filter(|(c, _, _)| *c == corpus)
        .map(|(c, name, text)| one_chunk(*c, name, None, text))
        .collect();
    for spec in &ITEMS {
        for d in spec.docs.iter().filter(|d| d.corpus == corpus) {
            out.push(one_chunk(d.corpus, d.name, Some(d.title), d.text));
        }
    }
    out
}

pub fn all_snippets() -> Vec<Snippet> {
    CORPORA.iter().flat_map(|c| corpus_snippets(c)).collect()
}

/// Balanced, two per corpus, reranked, three kept.
pub fn retrieval_config() -> RetrievalConfig {
    RetrievalConfig {
        strategy: Strategy::Balanced,
        k_per_corpus: 2,
        final_k: 3,
        rerank: true,
        corpus: None,
    }
}

fn doc_snippet_id(d: &Doc) -> String {
    format!("{}/{}#0", CORPORA[d.corpus], d.name)
}

/// Filter verdict scores: supporting documents pass, neutral documents about
/// the question pass, misleading documents and everything else fail.
pub fn mock_filter_entries() -> Vec<MockEntry> {
    let mut out = vec![MockEntry {
        question: None,
        snippet_id: "*".into(),
        score: 0.1,
    }];
    for spec in &ITEMS {
        for d in spec.docs {
            let score = match d.effect {
                Effect::Supports => 0.92,
                Effect::Neutral => 0.7,
                Effect::Misleads(_) => 0.15,
            };
            out.push(MockEntry {
                question: Some(spec.question.to_string()),
                snippet_id: doc_snippet_id(d),
                score,
            });
        }
    }
    out
}

pub fn mock_filter() -> MockFilter {
    let mut f = MockFilter::new(DEFAULT_DECISION_THRESHOLD);
    for e in mock_filter_entries() {
        f.insert(e);
    }
    f
}

fn axis_vector(i: usize, axis: Axis) -> Vec<f32> {
    let mut v = vec![0.0f32; DIM];
    match axis {
        Axis::Question => v[2 * i] = 1.0,
        Axis::Rationale => v[2 * i + 1] = 1.0,
        Axis::Both => {
            v[2 * i] = std::f32::consts::FRAC_1_SQRT_2;
            v[2 * i + 1] = std::f32::consts::FRAC_1_SQRT_2;
        }
    }
    v
}

/// Deterministic pseudo-embedding for texts the world does not know.
fn hashed_vector(text: &str) -> Vec<f32> {
    let digest = sha256_hex(text.to_lowercase());
    let bytes = hex::decode(digest).expect("hex digest");
    (0..DIM).map(|k| bytes[k % bytes.len()] as f32 / 127.5 - 1.0).collect()
}

struct DocInfo {
    owner: usize,
    effect: Effect,
}

/// Rule-driven stand-in for an OpenAI-compatible server.
pub struct DemoBackend {
    by_question: HashMap<&'static str, usize>,
    docs: HashMap<String, DocInfo>,
    doc_text: HashMap<String, (String, usize, Effect)>,
    query_vectors: HashMap<String, Vec<f32>>,
    doc_vectors: HashMap<String, Vec<f32>>,
    longform: HashMap<&'static str, &'static str>,
}

impl Default for DemoBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl DemoBackend {
    pub fn new() -> Self {
        let mut b = DemoBackend {
            by_question: HashMap::new(),
            docs: HashMap::new(),
            doc_text: HashMap::new(),
            query_vectors: HashMap::new(),
            doc_vectors: HashMap::new(),
            longform: LONGFORM.iter().map(|(q, _, a)| (*q, *a)).collect(),
        };
        for (i, spec) in ITEMS.iter().enumerate() {
            b.by_question.insert(spec.question, i);
            b.query_vectors.insert(spec.question.to_string(), axis_vector(i, Axis::Question));
            let record = RationaleRecord {
                item_id: item_id(i),
                rationale_text: closed_text(spec),
                extracted_option: Some(spec.closed),
                with_snippets: Vec::new(),
                prompt_digest: String::new(),
            };
            let q = rationale_query(&record, spec.question, QueryOptions::default()).expect("demo rationale");
            b.query_vectors.insert(q.text, axis_vector(i, Axis::Rationale));
            for d in spec.docs {
                let snippet = one_chunk(d.corpus, d.name, Some(d.title), d.text);
                b.doc_vectors.insert(snippet.retrieval_text(), axis_vector(i, d.axis));
                b.doc_text.insert(snippet.retrieval_text(), (snippet.snippet_id.clone(), i, d.effect));
                b.docs.insert(snippet.snippet_id, DocInfo { owner: i, effect: d.effect });
            }
        }
        for (c, name, text) in FILLERS {
            let snippet = one_chunk(c, name, None, text);
            let mut v = vec![0.0f32; DIM];
            v[FILLER_AXIS] = 1.0;
            b.doc_vectors.insert(snippet.retrieval_text(), v);
        }
        b
    }

    fn documents_in(prompt: &str) -> Vec<&str> {
        let Some(rest) = prompt.strip_prefix(DOCUMENTS_HEADER) else {
            return Vec::new();
        };
        rest.trim_start_matches('\n')
            .lines()
            .take_while(|l| !l.is_empty())
            .filter_map(|l| l.strip_prefix('[')?.split_once("] ").map(|(id, _)| id))
            .collect()
    }

    fn own_effects(&self, item: usize, prompt: &str) -> Vec<Effect> {
        Self::documents_in(prompt)
            .into_iter()
            .filter_map(|id| self.docs.get(id))
            .filter(|d| d.owner == item)
            .map(|d| d.effect)
            .collect()
    }

    fn item_of(&self, prompt: &str) -> Option<usize> {
        self.by_question
            .iter()
            .filter(|(q, _)| prompt.contains(*q))
            .map(|(_, &i)| i)
            .next()
    }

    fn answer(&self, prompt: &str) -> Result<String> {
        if let Some((_, answer)) = self.longform.iter().find(|(q, _)| prompt.contains(*q)) {
            return Ok(answer.to_string());
        }
        let i = self
            .item_of(prompt)
            .ok_or_else(|| Error::protocol("demo backend: prompt matches no known question"))?;
        let spec = &ITEMS[i];
        let effects = self.own_effects(i, prompt);
        if Self::documents_in(prompt).is_empty() {
            return Ok(closed_text(spec));
        }
        let mislead = effects.iter().find_map(|e| match e {
            Effect::Misleads(l) => Some(*l),
            _ => None,
        });
        let text = if let Some(wrong) = mislead {
            format!(
                "The documents report that {} is effective here. Therefore, the answer is {wrong}.",
                option_text(spec, wrong)
            )
        } else if effects.contains(&Effect::Supports) {
            format!(
                "Summarizing the documents, the evidence favors {}. Therefore, the answer is {}.",
                option_text(spec, spec.gold),
                spec.gold
            )
        } else {
            format!("The documents do not change the reasoning. {}", closed_text(spec))
        };
        Ok(text)
    }

    /// Per-token logprob of a target under `context`: supporting documents
    /// make the model more confident, misleading and off-topic ones less.
    fn token_logprob(&self, context: &str) -> f64 {
        let Some(i) = self.item_of(context) else {
            return -1.0;
        };
        let effects = self.own_effects(i, context);
        if effects.iter().any(|e| matches!(e, Effect::Misleads(_))) {
            -1.6
        } else if effects.contains(&Effect::Supports) {
            -0.45
        } else if effects.contains(&Effect::Neutral) {
            -0.95
        } else if Self::documents_in(context).is_empty() {
            -1.0
        } else {
            -1.05
        }
    }

    fn echo(&self, prompt: &str) -> Result<Value> {
        let spec = ITEMS
            .iter()
            .find(|s| prompt.ends_with(&closed_text(s)))
            .ok_or_else(|| Error::protocol("demo backend: echo target is not a known rationale"))?;
        let target = closed_text(spec);
        let context = &prompt[..prompt.len() - target.len()];
        let lp = self.token_logprob(context);
        let mut tokens = vec![Value::String(context.to_string())];
        let mut lps = vec![Value::Null];
        let mut offsets = vec![json!(0)];
        let mut offset = context.chars().count();
        for (k, tok) in target.split_inclusive(' ').enumerate() {
            tokens.push(Value::String(tok.to_string()));
            lps.push(json!(lp - 0.01 * (k % 5) as f64));
            offsets.push(json!(offset));
            offset += tok.chars().count();
        }
        Ok(json!({"choices": [{"index": 0, "text": prompt, "logprobs": {
            "tokens": tokens, "token_logprobs": lps, "text_offset": offsets
        }}]}))
    }

    fn embed(&self, text: &str, role: &str) -> Vec<f32> {
        let known = if role == "query" {
            self.query_vectors.get(text)
        } else {
            self.doc_vectors.get(text)
        };
        known.cloned().unwrap_or_else(|| hashed_vector(text))
    }

    fn rerank(&self, query: &str, doc: &str) -> f64 {
        match (self.by_question.get(query), self.doc_text.get(doc)) {
            (Some(&i), Some((_, owner, effect))) if *owner == i => match effect {
                Effect::Supports => 0.9,
                Effect::Misleads(_) => 0.85,
                Effect::Neutral => 0.6,
            },
            _ => 0.05,
        }
    }
}

fn str_field<'a>(body: &'a Value, pointer: &str) -> Result<&'a str> {
    body.pointer(pointer)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::protocol(format!("demo backend: request lacks {pointer}")))
}

impl Transport for DemoBackend {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        let body = &req.body;
        let response = match req.route {
            Route::Completions if body.get("echo").and_then(Value::as_bool) == Some(true) => {
                self.echo(str_field(body, "/prompt")?)?
            }
            Route::Completions => json!({"choices": [{"index": 0, "text": self.answer(str_field(body, "/prompt")?)?}]}),
            Route::ChatCompletions => {
                let prompt = body
                    .pointer("/messages")
                    .and_then(Value::as_array)
                    .and_then(|m| m.last())
                    .and_then(|m| m.get("content"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::protocol("demo backend: chat request without messages"))?;
                json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": self.answer(prompt)?}}]})
            }
            Route::Embeddings => {
                let role = body.get("input_type").and_then(Value::as_str).unwrap_or("document");
                let inputs = body
                    .get("input")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::protocol("demo backend: embeddings without input"))?;
                let data: Vec<Value> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| json!({"index": k, "embedding": self.embed(t.as_str().unwrap_or_default(), role)}))
                    .collect();
                json!({"object": "list", "data": data})
            }
            Route::Rerank => {
                let query = str_field(body, "/query")?;
                let docs = body
                    .get("documents")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::protocol("demo backend: rerank without documents"))?;
                let results: Vec<Value> = docs
                    .iter()
                    .enumerate()
                    .map(|(k, d)| json!({"index": k, "relevance_score": self.rerank(query, d.as_str().unwrap_or_default())}))
                    .collect();
                json!({"results": results})
            }
        };
        Ok(serde_json::to_vec(&response)?)
    }
}

/// Generator, embedder and reranker over one shared transport.
pub struct DemoProviders {
    pub generator: Arc<dyn Provider>,
    pub embedder: Arc<dyn Provider>,
    pub reranker: Arc<dyn Provider>,
}

pub fn providers<T: Transport + 'static>(transport: Arc<T>) -> DemoProviders {
    DemoProviders {
        generator: Arc::new(OpenAiProvider::new(transport.clone(), LLM_MODEL)),
        embedder: Arc::new(OpenAiProvider::new(transport.clone(), EMBED_MODEL)),
        reranker: Arc::new(OpenAiProvider::new(transport, RERANK_MODEL)),
    }
}

/// Indexes both corpora with `p.embedder` and wires a retriever.
pub fn retriever(p: &DemoProviders) -> Result<Retriever> {
    let mut indices = Vec::new();
    for c in CORPORA {
        indices.push(build_index(&corpus_snippets(c), p.embedder.as_ref())?.0);
    }
    Retriever::new(
        indices,
        SnippetStore::new(all_snippets()),
        p.embedder.clone(),
        Some(p.reranker.clone()),
    )
}

/// An engine over the demo world, ready for every mode.
pub fn engine<T: Transport + 'static>(transport: Arc<T>) -> Result<Engine> {
    let p = providers(transport);
    let retriever = retriever(&p)?;
    Ok(Engine::new(p.generator)
        .with_retriever(retriever)
        .with_filter(Box::new(mock_filter()))
        .with_retrieval(retrieval_config())
        .with_template(PromptTemplate::mcqa()))
}

/// Modes whose requests [`write_workspace`] records.
pub fn recorded_modes() -> Vec<Mode> {
    [
        "closed_book",
        "rag_plain",
        "rag_rationale",
        "rag2_full",
        "ablation:stacked",
        "ablation:stacked+rerank",
        "ablation:balanced+rerank",
        "ablation:independent@textbooks+rerank",
    ]
    .iter()
    .map(|m| m.parse().expect("valid mode"))
    .collect()
}

fn scripted(model: &str) -> ProviderConfig {
    ProviderConfig {
        kind: ProviderKind::Scripted,
        endpoint: None,
        fixture: Some("providers.jsonl".into()),
        ..ProviderConfig::http("", model)
    }
}

/// Writes a self-contained offline workspace into `dir` and returns the path
/// of its `run.toml`:
///
/// ```text
/// run.toml            scripted providers, mock filter, demo retrieval settings
/// items.jsonl         the twelve MCQA items
/// longform.jsonl      three long-form question/reference pairs
/// filter.jsonl        mock filter verdict table
/// providers.jsonl     recorded model responses (scripted fixture)
/// corpora/            registry, snippets and indexes of both corpora
/// ```
pub fn write_workspace(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    crate::io::write_jsonl(&dir.join("items.jsonl"), &items())?;
    crate::io::write_jsonl(&dir.join("longform.jsonl"), &longform_pairs())?;
    crate::io::write_jsonl(&dir.join("filter.jsonl"), &mock_filter_entries())?;

    let recorder = Arc::new(RecordingTransport::new(DemoBackend::new()));
    let p = providers(recorder.clone());
    let corpora = CorpusDir::new(dir.join("corpora"));
    for c in CORPORA {
        let snippets = corpus_snippets(c);
        let entry = RegistryEntry {
            corpus_id: c.to_string(),
            display_name: c.to_string(),
            source_path: PathBuf::from(format!("demo:{c}")),
            snippet_count: snippets.len(),
        };
        corpora.add_corpus(entry, &snippets)?;
        corpora.build_index(c, p.embedder.as_ref())?;
    }

    let engine = engine(recorder.clone())?;
    let data = dataset();
    for mode in recorded_modes() {
        crate::pipeline::evaluate(&engine, &data, &mode)?;
    }
    engine.longform_eval(&longform_pairs(), &Mode::ClosedBook, p.embedder.as_ref())?;
    let retriever = crate::demo::retriever(&p)?;
    crate::labeling::build_label_dataset(
        &data.items,
        p.generator.as_ref(),
        &retriever,
        &PromptTemplate::mcqa(),
        &LabelingConfig::default(),
    )?;
    recorder.write_jsonl(&dir.join("providers.jsonl"))?;

    let cfg = RunConfig {
        dataset: "items.jsonl".into(),
        mode: None,
        strict: false,
        deterministic: false,
        workers: 4,
        max_tokens: 512,
        template: None,
        longform_template: None,
        corpus_dir: Some("corpora".into()),
        corpora: None,
        generator: scripted(LLM_MODEL),
        embedder: Some(scripted(EMBED_MODEL)),
        reranker: Some(scripted(RERANK_MODEL)),
        retrieval: retrieval_config(),
        filter: FilterSpec {
            kind: FilterKind::Mock,
            fixture: Some("filter.jsonl".into()),
            ..FilterSpec::default()
        },
        query: QueryOptions::default(),
        labeling: LabelingConfig::default(),
    };
    let path = dir.join("run.toml");
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text)?;
    Ok(path)
}
