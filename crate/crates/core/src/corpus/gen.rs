//! Corpus generation and extension.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::stream;

use super::{Corpus, CorpusConfig, KnowledgeConcept, Question};

/// First token id of `kc`'s template; templates are contiguous disjoint
/// ranges after the OOV token, noise tokens follow all templates.
fn template_start(kc: usize, tokens_per_kc: usize) -> u32 {
    1 + (kc * tokens_per_kc) as u32
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..n as u32).collect();
    let (chosen, _) = pool.partial_shuffle(rng, k);
    let mut out = chosen.to_vec();
    out.sort_unstable();
    out
}

fn weighted_kc_count(rng: &mut ChaCha8Rng, weights: &[f64; 4], cap: usize) -> usize {
    let cap = cap.min(4).max(1);
    let total: f64 = weights[..cap].iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights[..cap].iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i + 1;
        }
    }
    cap
}

fn draw_difficulty(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("std is finite and nonnegative");
    normal.sample(rng).clamp(-2.0, 2.0)
}

/// One solution step's tokens, drawn only from the templates of its KCs.
fn step_tokens(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    step_kcs: &[u32],
) -> Vec<u32> {
    let count = rng.gen_range(cfg.step_tokens_min..=cfg.step_tokens_max);
    (0..count)
        .map(|_| {
            let kc = step_kcs[rng.gen_range(0..step_kcs.len())] as usize;
            template_start(kc, cfg.tokens_per_kc) + rng.gen_range(0..cfg.tokens_per_kc) as u32
        })
        .collect()
}

/// Steps plus a bipartite step/KC map where every step carries at least one
/// KC and every KC of the question lands on at least one step.
fn build_steps(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    kcs: &[u32],
) -> (Vec<Vec<u32>>, Vec<(u32, u32)>) {
    let n_steps = rng.gen_range(cfg.min_steps..=cfg.max_steps);
    let mut assigned: Vec<Vec<u32>> = vec![Vec::new(); n_steps];
    for (j, &kc) in kcs.iter().enumerate() {
        assigned[j % n_steps].push(kc);
    }
    for slot in assigned.iter_mut() {
        if slot.is_empty() {
            slot.push(kcs[rng.gen_range(0..kcs.len())]);
        }
    }
    // Occasional extra edges keep the map from being a plain partition.
    for slot in assigned.iter_mut() {
        for &kc in kcs {
            if !slot.contains(&kc) && rng.gen::<f64>() < 0.2 {
                slot.push(kc);
            }
        }
        slot.sort_unstable();
        slot.dedup();
    }
    let steps: Vec<Vec<u32>> = assigned
        .iter()
        .map(|slot| step_tokens(rng, cfg, slot))
        .collect();
    let mut map: Vec<(u32, u32)> = assigned
        .iter()
        .enumerate()
        .flat_map(|(s, slot)| slot.iter().map(move |&c| (s as u32, c)))
        .collect();
    map.sort_unstable();
    (steps, map)
}

fn question_text(rng: &mut ChaCha8Rng, cfg: &CorpusConfig, kcs: &[u32]) -> Vec<u32> {
    let noise_start = template_start(cfg.num_kcs, cfg.tokens_per_kc);
    let mut text = Vec::with_capacity(
        kcs.len() * cfg.kc_tokens_per_question + cfg.noise_tokens_per_question,
    );
    for &kc in kcs {
        for _ in 0..cfg.kc_tokens_per_question {
            text.push(
                template_start(kc as usize, cfg.tokens_per_kc)
                    + rng.gen_range(0..cfg.tokens_per_kc) as u32,
            );
        }
    }
    for _ in 0..cfg.noise_tokens_per_question {
        text.push(noise_start + rng.gen_range(0..cfg.noise_pool) as u32);
    }
    text.shuffle(rng);
    text
}

pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = stream(seed, "corpus-gen", 0);
    let kcs: Vec<KnowledgeConcept> = (0..cfg.num_kcs)
        .map(|k| KnowledgeConcept {
            id: k as u32,
            name: format!("kc_{k:03}"),
            template_tokens: (0..cfg.tokens_per_kc)
                .map(|t| template_start(k, cfg.tokens_per_kc) + t as u32)
                .collect(),
        })
        .collect();
    let questions: Vec<Question> = (0..cfg.num_questions)
        .map(|id| {
            let m = weighted_kc_count(&mut rng, &cfg.kc_count_weights, cfg.num_kcs);
            let q_kcs = sample_distinct(&mut rng, cfg.num_kcs, m);
            let (solution_steps, step_kc_map) = build_steps(&mut rng, cfg, &q_kcs);
            let text = question_text(&mut rng, cfg, &q_kcs);
            Question {
                id: id as u32,
                text,
                solution_steps,
                kcs: q_kcs,
                step_kc_map,
                difficulty: draw_difficulty(&mut rng, cfg.difficulty_std),
            }
        })
        .collect();
    let corpus = Corpus {
        kcs,
        questions,
        vocab_size: cfg.vocab_size(),
        seed,
        num_original: cfg.num_questions as u32,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// KCs that co-occur with `kc` in some original question.
fn cooccurring(corpus: &Corpus, kc_of: &[u32]) -> Vec<u32> {
    let mut related: Vec<u32> = corpus
        .questions
        .iter()
        .take(corpus.num_original as usize)
        .filter(|q| q.kcs.iter().any(|c| kc_of.contains(c)))
        .flat_map(|q| q.kcs.iter().copied())
        .filter(|c| !kc_of.contains(c))
        .collect();
    related.sort_unstable();
    related.dedup();
    related
}

/// Derived corpus: every original question kept verbatim, plus `factor`
/// variants per original appended after them. Variant 0 keeps the source's
/// KC set; later variants add one related KC when room allows. Noise tokens
/// are re-drawn and difficulty is jittered, so variants are near but not
/// identical to their source.
pub fn extend_corpus(corpus: &Corpus, factor: usize, seed: u64) -> Result<Corpus> {
    if factor == 0 {
        return Err(Error::config("extension factor must be >= 1"));
    }
    corpus.validate()?;
    let cfg_tokens_per_kc = corpus.kcs[0].template_tokens.len();
    let cfg = CorpusConfig {
        num_kcs: corpus.kcs.len(),
        tokens_per_kc: cfg_tokens_per_kc,
        noise_pool: corpus.vocab_size as usize - 1 - corpus.kcs.len() * cfg_tokens_per_kc,
        ..CorpusConfig::default()
    };
    if cfg.noise_pool == 0 {
        return Err(Error::data("corpus has no noise tokens to re-sample".to_string()));
    }
    let noise_start = template_start(cfg.num_kcs, cfg.tokens_per_kc);
    let mut rng = stream(seed, "corpus-extend", 0);
    let originals: Vec<Question> = corpus
        .questions
        .iter()
        .take(corpus.num_original as usize)
        .cloned()
        .collect();
    let mut questions = originals.clone();
    for q in &originals {
        for variant in 0..factor {
            let mut v = q.clone();
            v.id = (originals.len() + (q.id as usize) * factor + variant) as u32;
            let jitter: f64 = rng.gen_range(-0.3..0.3);
            v.difficulty = (q.difficulty + jitter).clamp(-2.0, 2.0);
            for tok in v.text.iter_mut() {
                if *tok >= noise_start {
                    *tok = noise_start + rng.gen_range(0..cfg.noise_pool) as u32;
                }
            }
            if variant > 0 && v.kcs.len() < 4 {
                let pool = {
                    let co = cooccurring(corpus, &v.kcs);
                    if co.is_empty() {
                        (0..cfg.num_kcs as u32).filter(|c| !v.kcs.contains(c)).collect()
                    } else {
                        co
                    }
                };
                if !pool.is_empty() {
                    let added = pool[rng.gen_range(0..pool.len())];
                    v.kcs.push(added);
                    v.kcs.sort_unstable();
                    for _ in 0..cfg.kc_tokens_per_question {
                        v.text.push(
                            template_start(added as usize, cfg.tokens_per_kc)
                                + rng.gen_range(0..cfg.tokens_per_kc) as u32,
                        );
                    }
                    if v.solution_steps.len() < 6 {
                        v.solution_steps.push(step_tokens(&mut rng, &cfg, &[added]));
                        v.step_kc_map
                            .push((v.solution_steps.len() as u32 - 1, added));
                    } else {
                        let last = v.solution_steps.len() - 1;
                        v.solution_steps[last].extend(step_tokens(&mut rng, &cfg, &[added]));
                        v.step_kc_map.push((last as u32, added));
                    }
                    v.step_kc_map.sort_unstable();
                }
            }
            v.text.shuffle(&mut rng);
            questions.push(v);
        }
    }
    let extended = Corpus {
        kcs: corpus.kcs.clone(),
        questions,
        vocab_size: corpus.vocab_size,
        seed,
        num_original: corpus.num_original,
    };
    extended.validate()?;
    Ok(extended)
}
