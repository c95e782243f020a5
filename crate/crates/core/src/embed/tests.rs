use proptest::prelude::*;

use super::cluster::{cosine_distance, included_mask};
use super::train::train_embeddings_from;
use super::*;
use crate::corpus::{generate_corpus, Corpus, CorpusConfig, KnowledgeConcept, Question};
use crate::error::Error;
use crate::numcore::stream;
use crate::{Real, Tensor};

fn desk_corpus() -> Corpus {
    generate_corpus(&CorpusConfig::default(), 7).unwrap()
}

fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(
        &CorpusConfig {
            num_kcs: 5,
            num_questions: 25,
            tokens_per_kc: 10,
            noise_pool: 50,
            ..CorpusConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn test_encoder(corpus: &Corpus, seed: u64) -> TextEncoder {
    TextEncoder::init(corpus.vocab_size, 16, 16, &mut stream(seed, "embed-init", 0))
}

#[test]
fn encode_outputs_are_unit_norm() {
    let c = small_corpus(1);
    let enc = test_encoder(&c, 1);
    for q in &c.questions {
        let v = enc.encode(Kind::Question, &q.text);
        let norm: Real = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn encode_is_deterministic_and_kind_sensitive() {
    let c = small_corpus(2);
    let enc = test_encoder(&c, 2);
    let tokens = &c.questions[0].text;
    assert_eq!(enc.encode(Kind::Question, tokens), enc.encode(Kind::Question, tokens));
    let q = enc.encode(Kind::Question, tokens);
    let k = enc.encode(Kind::Kc, tokens);
    assert!(cosine(&q, &k) < 1.0 - 1e-9, "kind offsets must separate kinds");
}

#[test]
fn unknown_tokens_collapse_to_oov() {
    let c = small_corpus(3);
    let enc = test_encoder(&c, 3);
    let with_unknown = vec![c.vocab_size + 17, 5, 9];
    let with_oov = vec![0, 5, 9];
    assert_eq!(
        enc.encode(Kind::Step, &with_unknown),
        enc.encode(Kind::Step, &with_oov)
    );
}

#[test]
fn cluster_identical_and_orthogonal() {
    let vecs = Tensor::from_vec(
        3,
        2,
        vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let a = cluster_kcs(&vecs, 0.15).unwrap();
    assert_eq!(a.cluster(0), a.cluster(1));
    assert_ne!(a.cluster(0), a.cluster(2));
    assert_eq!(a.num_clusters(), 2);
}

#[test]
fn cluster_single_link_transitivity() {
    // Angles chosen so a-b and b-c are within threshold but a-c is not.
    let theta = (0.9f64).acos();
    let angles = [0.0, theta, 2.0 * theta];
    let data: Vec<Real> = angles.iter().flat_map(|&t| [t.cos(), t.sin()]).collect();
    let vecs = Tensor::from_vec(3, 2, data).unwrap();
    assert!(cosine_distance(vecs.row_slice(0), vecs.row_slice(1)) <= 0.15);
    assert!(cosine_distance(vecs.row_slice(1), vecs.row_slice(2)) <= 0.15);
    assert!(cosine_distance(vecs.row_slice(0), vecs.row_slice(2)) > 0.15);
    let a = cluster_kcs(&vecs, 0.15).unwrap();
    assert_eq!(a.num_clusters(), 1);
}

#[test]
fn cluster_ids_dense_by_first_appearance() {
    let vecs = Tensor::from_vec(
        4,
        2,
        vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let a = cluster_kcs(&vecs, 0.15).unwrap();
    assert_eq!(a.raw(), &[0, 1, 0, 1]);
    assert_eq!(a.members(0), vec![0, 2]);
}

#[test]
fn contrastive_loss_frozen_values() {
    assert_eq!(contrastive_loss(0.4, &[], 0.1).unwrap(), 0.0);
    let ln2 = std::f64::consts::LN_2;
    assert!((contrastive_loss(0.3, &[0.3], 0.25).unwrap() - ln2).abs() < 1e-15);
    assert!((contrastive_loss(0.3, &[0.3], 0.7).unwrap() - ln2).abs() < 1e-15);
    let expect = (-20.0f64).exp().ln_1p();
    let got = contrastive_loss(1.0, &[-1.0], 0.1).unwrap();
    assert!(
        (got - expect).abs() < 1e-6 * expect,
        "got {got:e}, expected {expect:e}"
    );
    assert!(matches!(contrastive_loss(0.5, &[0.1], 0.0), Err(Error::Config(_))));
    assert!(matches!(contrastive_loss(0.5, &[0.1], -1.0), Err(Error::Config(_))));
}

#[test]
fn step_loss_equals_question_loss() {
    let negs = [0.2, -0.4, 0.9];
    let a = contrastive_loss_q(0.6, &negs, 0.1).unwrap();
    let b = contrastive_loss_s(0.6, &negs, 0.1).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let ln2 = std::f64::consts::LN_2;
    assert!((contrastive_loss_s(0.0, &[0.0], 0.5).unwrap() - ln2).abs() < 1e-15);
}

/// Hand-buildable space: 2 orthogonal KCs, one two-KC question whose steps
/// sit exactly on the KC axes.
fn hand_space() -> (Question, EmbeddingSpace) {
    let q = Question {
        id: 0,
        text: vec![1],
        solution_steps: vec![vec![1], vec![2]],
        kcs: vec![0, 1],
        step_kc_map: vec![(0, 0), (1, 1)],
        difficulty: 0.0,
    };
    let question_vecs = Tensor::from_vec(1, 2, vec![0.6, 0.8]).unwrap();
    let step_vecs = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let kc_vecs = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let assignment = ClusterAssignment::from_raw(vec![0, 1]).unwrap();
    let encoder = TextEncoder::init(4, 4, 2, &mut stream(0, "embed-init", 0));
    let space = EmbeddingSpace::from_parts(
        question_vecs,
        step_vecs,
        vec![0, 2],
        kc_vecs,
        assignment,
        encoder,
    )
    .unwrap();
    (q, space)
}

#[test]
fn total_loss_hand_computation() {
    let (q, space) = hand_space();
    let tau = 0.5;
    let got = total_contrastive_loss(&q, &space, tau).unwrap();
    // Direct formula, written independently of the implementation.
    let lq = |pos: f64, neg: f64| -> f64 {
        -((pos / tau).exp() / ((pos / tau).exp() + (neg / tau).exp())).ln()
    };
    let q_term = (lq(0.6, 0.8) + lq(0.8, 0.6)) / 2.0;
    let s_term = (lq(1.0, 0.0) + lq(1.0, 0.0)) / 2.0;
    assert!((got - (q_term + s_term)).abs() < 1e-12);
}

#[test]
fn total_loss_zero_when_no_negatives() {
    let (mut q, space) = hand_space();
    // Merge both KCs into one cluster: negative pools become empty.
    let (qv, sv, off, kv, _, enc) = space.parts();
    let merged = EmbeddingSpace::from_parts(
        qv.clone(),
        sv.clone(),
        off.to_vec(),
        kv.clone(),
        ClusterAssignment::from_raw(vec![0, 0]).unwrap(),
        enc.clone(),
    )
    .unwrap();
    q.kcs = vec![0];
    q.step_kc_map = vec![(0, 0), (1, 0)];
    assert_eq!(total_contrastive_loss(&q, &merged, 0.1).unwrap(), 0.0);
}

#[test]
fn total_loss_invariant_to_duplicated_step() {
    let (q, space) = hand_space();
    let base = total_contrastive_loss(&q, &space, 0.5).unwrap();
    // Duplicate step 0 (and its mapping) in both question and space.
    let mut q2 = q.clone();
    q2.solution_steps = vec![vec![1], vec![1], vec![2]];
    q2.step_kc_map = vec![(0, 0), (1, 0), (2, 1)];
    let (qv, _, _, kv, asg, enc) = space.parts();
    let step_vecs = Tensor::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let space2 = EmbeddingSpace::from_parts(
        qv.clone(),
        step_vecs,
        vec![0, 3],
        kv.clone(),
        asg.clone(),
        enc.clone(),
    )
    .unwrap();
    let dup = total_contrastive_loss(&q2, &space2, 0.5).unwrap();
    // Step term was already the mean over two identical per-step values.
    assert!((dup - base).abs() < 1e-12);
}

#[test]
fn total_loss_rejects_empty_structure() {
    let (mut q, space) = hand_space();
    q.kcs.clear();
    assert!(matches!(
        total_contrastive_loss(&q, &space, 0.5),
        Err(Error::Data(_))
    ));
}

#[test]
fn fuse_examples() {
    assert_eq!(
        fuse_question_embedding(&[1.0, 0.0], &[&[0.0, 2.0], &[0.0, 0.0]]),
        vec![0.5, 0.5]
    );
    let z = [0.3, -0.7, 0.1];
    assert_eq!(fuse_question_embedding(&z, &[&z]), z.to_vec());
    let zeros = [0.0, 0.0];
    assert_eq!(
        fuse_question_embedding(&[0.8, -0.6], &[&zeros, &zeros]),
        vec![0.4, -0.3]
    );
}

#[test]
fn fuse_is_permutation_invariant() {
    let steps_a: Vec<&[Real]> = vec![&[0.1, 0.9], &[0.5, -0.2], &[-0.3, 0.4]];
    let steps_b: Vec<&[Real]> = vec![&[-0.3, 0.4], &[0.1, 0.9], &[0.5, -0.2]];
    let a = fuse_question_embedding(&[1.0, 1.0], &steps_a);
    let b = fuse_question_embedding(&[1.0, 1.0], &steps_b);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn encoder_scale_invariance() {
    let c = small_corpus(4);
    let mut enc = test_encoder(&c, 4);
    let before = enc.encode(Kind::Question, &c.questions[0].text);
    let [_, _, pw, pb] = enc.params_mut();
    pw.data_mut().iter_mut().for_each(|x| *x *= 3.0);
    pb.data_mut().iter_mut().for_each(|x| *x *= 3.0);
    let after = enc.encode(Kind::Question, &c.questions[0].text);
    for (x, y) in before.iter().zip(&after) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn negative_filter_mask() {
    let assignment = ClusterAssignment::from_raw(vec![0, 0, 1]).unwrap();
    let batch = [0u32, 1, 2];
    assert_eq!(included_mask(&assignment, &batch, 0), vec![true, false, true]);
    assert_eq!(included_mask(&assignment, &batch, 1), vec![false, true, true]);
    assert_eq!(included_mask(&assignment, &batch, 2), vec![true, true, true]);
}

#[test]
fn overfit_loss_monotone_within_tolerance() {
    let c = generate_corpus(
        &CorpusConfig {
            num_kcs: 4,
            num_questions: 10,
            tokens_per_kc: 12,
            noise_pool: 30,
            ..CorpusConfig::default()
        },
        5,
    )
    .unwrap();
    let cfg = EmbedConfig {
        dim: 16,
        d_tok: 16,
        batch_size: 10,
        lr: 0.002,
        max_epochs: 30,
        plateau_patience: 30,
        ..EmbedConfig::default()
    };
    let out = train_embeddings(&c, &cfg, 5).unwrap();
    assert!(out.epoch_losses.len() >= 10);
    for w in out.epoch_losses.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-3,
            "loss increased beyond tolerance: {} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn training_reaches_retrieval_target_on_desk_corpus() {
    let c = desk_corpus();
    let cfg = EmbedConfig::default();
    let before_space = EmbeddingSpace::build(
        TextEncoder::init(c.vocab_size, cfg.d_tok, cfg.dim, &mut stream(7, "embed-init", 0)),
        &c,
        cfg.cluster_threshold,
    )
    .unwrap();
    let f1_before = retrieval_f1(&before_space, &c).unwrap();
    assert!(f1_before <= 0.35, "untrained F1 unexpectedly high: {f1_before}");
    let out = train_embeddings(&c, &cfg, 7).unwrap();
    let f1_after = retrieval_f1(&out.space, &c).unwrap();
    assert!(f1_after >= 0.80, "trained F1 too low: {f1_after}");
    for q in 0..out.space.num_questions() {
        let norm: Real = out.space.question(q).iter().map(|x| x * x).sum::<Real>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn divergence_reports_training_error() {
    let c = small_corpus(6);
    let mut enc = test_encoder(&c, 6);
    // Poison the projection: it participates in every forward pass.
    enc.params_mut()[2].data_mut()[0] = f64::NAN;
    let cfg = EmbedConfig {
        dim: 16,
        d_tok: 16,
        ..EmbedConfig::default()
    };
    match train_embeddings_from(&c, &cfg, 6, enc) {
        Err(Error::Training(msg)) => assert!(msg.contains("non-finite")),
        other => panic!("expected training error, got {:?}", other.map(|_| ())),
    }
}

fn perfect_toy() -> (Corpus, EmbeddingSpace) {
    // 2 KCs, 4 single-KC questions; question vectors placed exactly on
    // their KC axis.
    let kcs = vec![
        KnowledgeConcept {
            id: 0,
            name: "kc_000".to_string(),
            template_tokens: vec![1, 2, 3],
        },
        KnowledgeConcept {
            id: 1,
            name: "kc_001".to_string(),
            template_tokens: vec![4, 5, 6],
        },
    ];
    let mk_q = |id: u32, kc: u32| Question {
        id,
        text: vec![1 + kc * 3],
        solution_steps: vec![vec![1 + kc * 3], vec![2 + kc * 3]],
        kcs: vec![kc],
        step_kc_map: vec![(0, kc), (1, kc)],
        difficulty: 0.0,
    };
    let corpus = Corpus {
        kcs,
        questions: vec![mk_q(0, 0), mk_q(1, 0), mk_q(2, 1), mk_q(3, 1)],
        vocab_size: 8,
        seed: 0,
        num_original: 4,
    };
    corpus.validate().unwrap();
    let axis = |kc: u32| -> Vec<Real> {
        if kc == 0 {
            vec![1.0, 0.0]
        } else {
            vec![0.0, 1.0]
        }
    };
    let qdata: Vec<Real> = corpus.questions.iter().flat_map(|q| axis(q.kcs[0])).collect();
    let sdata: Vec<Real> = corpus
        .questions
        .iter()
        .flat_map(|q| [axis(q.kcs[0]), axis(q.kcs[0])].concat())
        .collect();
    let space = EmbeddingSpace::from_parts(
        Tensor::from_vec(4, 2, qdata).unwrap(),
        Tensor::from_vec(8, 2, sdata).unwrap(),
        vec![0, 2, 4, 6, 8],
        Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        ClusterAssignment::from_raw(vec![0, 1]).unwrap(),
        TextEncoder::init(8, 4, 2, &mut stream(0, "embed-init", 0)),
    )
    .unwrap();
    (corpus, space)
}

#[test]
fn retrieval_perfect_embedding_scores_one() {
    let (corpus, space) = perfect_toy();
    assert_eq!(retrieval_f1(&space, &corpus).unwrap(), 1.0);
}

#[test]
fn retrieval_half_right_scores_half() {
    let (corpus, space) = perfect_toy();
    // Swap q1 and q2 embeddings: each cluster retrieves one right, one
    // wrong out of two.
    let (qv, sv, off, kv, asg, enc) = space.parts();
    let mut qdata = qv.data().to_vec();
    let (a, b) = (1, 2);
    for d in 0..2 {
        qdata.swap(a * 2 + d, b * 2 + d);
    }
    let swapped = EmbeddingSpace::from_parts(
        Tensor::from_vec(4, 2, qdata).unwrap(),
        sv.clone(),
        off.to_vec(),
        kv.clone(),
        asg.clone(),
        enc.clone(),
    )
    .unwrap();
    let report = retrieval_report(&swapped, &corpus).unwrap();
    assert_eq!(report.clusters_evaluated, 2);
    assert_eq!(report.clusters_skipped, 0);
    for &(_, f1) in &report.per_cluster {
        assert!((f1 - 0.5).abs() < 1e-12);
    }
    assert!((report.f1 - 0.5).abs() < 1e-12);
}

#[test]
fn retrieval_random_vectors_score_low() {
    let c = desk_corpus();
    let mut rng = stream(99, "retrieval-random", 0);
    let mut qv = Tensor::uniform_init(200, 32, 1, &mut rng);
    let mut kv = Tensor::uniform_init(20, 32, 1, &mut rng);
    crate::numcore::dense::l2_normalize_rows(qv.data_mut(), 200, 32);
    crate::numcore::dense::l2_normalize_rows(kv.data_mut(), 20, 32);
    let total_steps: usize = c.questions.iter().map(|q| q.solution_steps.len()).sum();
    let mut offsets = vec![0u32];
    for q in &c.questions {
        offsets.push(offsets.last().unwrap() + q.solution_steps.len() as u32);
    }
    let assignment = cluster_kcs(&kv, 0.15).unwrap();
    let space = EmbeddingSpace::from_parts(
        qv,
        Tensor::zeros(total_steps, 32),
        offsets,
        kv,
        assignment,
        TextEncoder::init(c.vocab_size, 8, 32, &mut rng),
    )
    .unwrap();
    let f1 = retrieval_f1(&space, &c).unwrap();
    assert!(f1 < 0.2, "random embedding F1 too high: {f1}");
}

#[test]
fn space_roundtrip_and_corruption() {
    let c = small_corpus(8);
    let enc = test_encoder(&c, 8);
    let space = EmbeddingSpace::build(enc, &c, 0.15).unwrap();
    let dir = std::env::temp_dir().join(format!("ktrec-embed-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("space.bin");
    save_space(&path, &space).unwrap();
    let loaded = load_space(&path).unwrap();
    assert_eq!(space, loaded);

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_space(&path), Err(Error::Data(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[mid] ^= 0xff;
    bytes[7] = b'9';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_space(&path),
        Err(Error::Version { found: 9, expected: 1 })
    ));
    std::fs::remove_dir_all(&dir).ok();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn contrastive_loss_nonnegative(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..1.0, 0..6),
        tau in 0.05f64..2.0,
    ) {
        let l = contrastive_loss(pos, &negs, tau).unwrap();
        prop_assert!(l >= 0.0);
        if negs.is_empty() {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn cluster_threshold_extremes(seed in 0u64..50) {
        let mut rng = stream(seed, "cluster-prop", 0);
        let mut v = Tensor::uniform_init(6, 8, 1, &mut rng);
        crate::numcore::dense::l2_normalize_rows(v.data_mut(), 6, 8);
        // Threshold 2 covers the whole sphere; threshold 0 with distinct
        // vectors keeps everything apart.
        let all = cluster_kcs(&v, 2.0).unwrap();
        prop_assert_eq!(all.num_clusters(), 1);
    }
}
