#![allow(dead_code)]

use rand::Rng;
use semlog::knowledge::KnowledgeBase;
use semlog::logio::{Category, LogMessage};
use semlog::miner::MinerOutput;

/// Implicit-discovery outcome as plain words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordDiscovery {
    pub pairs: Vec<(String, String)>,
    pub concepts: Vec<String>,
    pub instances: Vec<String>,
}

/// Implicit discovery written as literal list operations over index lists.
pub fn reference_discover(
    tokens: &[String],
    cats: &[Category],
    explicit: &[(usize, usize)],
    kb: &mut KnowledgeBase,
) -> WordDiscovery {
    let mut inst: Vec<usize> = (0..tokens.len())
        .filter(|&k| cats[k] == Category::Instance)
        .collect();
    let mut conc: Vec<usize> = (0..tokens.len())
        .filter(|&k| cats[k] == Category::Concept)
        .collect();
    let mut p_out: Vec<(String, String)> = Vec::new();
    let mut c_out: Vec<String> = Vec::new();
    let superior = |&(s, t): &(usize, usize)| -> Option<(usize, usize)> {
        let members = [s, t];
        let is: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&k| cats[k] == Category::Instance)
            .collect();
        let cs: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&k| cats[k] == Category::Concept)
            .collect();
        (is.len() == 1 && cs.len() == 1).then(|| (cs[0], is[0]))
    };
    for p in explicit {
        if let Some((cur_c, cur_i)) = superior(p) {
            kb.add(&tokens[cur_c], &tokens[cur_i]).unwrap();
            if let Some(pos) = inst.iter().position(|&x| x == cur_i) {
                inst.remove(pos);
            }
            if let Some(pos) = conc.iter().position(|&x| x == cur_c) {
                conc.remove(pos);
            }
        }
    }
    for i in inst.clone() {
        if let Some(found) = kb.lookup(&tokens[i]) {
            p_out.push((found.to_string(), tokens[i].clone()));
            c_out.push(found.to_string());
            let pos = inst.iter().position(|&x| x == i).unwrap();
            inst.remove(pos);
        }
    }
    let instances = inst.iter().map(|&k| tokens[k].clone()).collect();
    c_out.extend(conc.iter().map(|&k| tokens[k].clone()));
    for p in explicit {
        let (a, b) = superior(p).unwrap_or(*p);
        p_out.push((tokens[a].clone(), tokens[b].clone()));
    }
    WordDiscovery {
        pairs: p_out,
        concepts: c_out,
        instances,
    }
}

/// One randomized discovery input.
#[derive(Debug, Clone)]
pub struct DiscoveryCase {
    pub message: LogMessage,
    pub output: MinerOutput,
    pub kb: KnowledgeBase,
}

const VOCAB: [&str; 10] = [
    "cell", "server", "node", "request", "500", "a1", "b2", "x-9", "state", "id",
];

/// Random message of up to 20 tokens from a small vocabulary (so knowledge
/// lookups hit often), random categories, pairs and knowledge base.
pub fn random_case<R: Rng>(rng: &mut R) -> DiscoveryCase {
    let n = rng.random_range(0..=20usize);
    let tokens: Vec<&str> = (0..n)
        .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
        .collect();
    let message = LogMessage::new(tokens.join(" "), 1);
    let categories: Vec<Category> = (0..n)
        .map(|_| Category::ALL[rng.random_range(0..3)])
        .collect();
    let mut explicit_pairs = Vec::new();
    if n >= 2 {
        for _ in 0..rng.random_range(0..=n / 2 + 1) {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            explicit_pairs.push(if rng.random_bool(0.8) {
                (a.min(b), a.max(b))
            } else {
                (a, b)
            });
        }
    }
    let mut kb = KnowledgeBase::new();
    for _ in 0..rng.random_range(0..8) {
        let c = VOCAB[rng.random_range(0..VOCAB.len())];
        let i = VOCAB[rng.random_range(0..VOCAB.len())];
        kb.add(c, i).unwrap();
    }
    let mut output = MinerOutput::empty();
    output.categories = categories;
    output.explicit_pairs = explicit_pairs;
    DiscoveryCase {
        message,
        output,
        kb,
    }
}

/// Runs both implementations on a case; `None` when they agree, otherwise a
/// description of the mismatch.
pub fn compare_with_reference(case: &DiscoveryCase) -> Option<String> {
    let mut kb_impl = case.kb.clone();
    let mut kb_ref = case.kb.clone();
    let got = semlog::jparser::discover_implicit(&case.output, &case.message, &mut kb_impl)
        .map_err(|e| format!("implementation failed: {e}"));
    let want = reference_discover(
        &case.message.tokens,
        &case.output.categories,
        &case.output.explicit_pairs,
        &mut kb_ref,
    );
    let got = match got {
        Ok(d) => d,
        Err(e) => return Some(e),
    };
    let got_words = WordDiscovery {
        pairs: got
            .pairs
            .iter()
            .map(|p| (p.concept.clone(), p.instance.clone()))
            .collect(),
        concepts: got.concepts.clone(),
        instances: got
            .orphan_instances
            .iter()
            .map(|&k| case.message.tokens[k].clone())
            .collect(),
    };
    if got_words != want {
        return Some(format!(
            "{:?}: got {got_words:?}, want {want:?}",
            case.message.tokens
        ));
    }
    if kb_impl != kb_ref {
        return Some(format!("{:?}: knowledge bases differ", case.message.tokens));
    }
    None
}
