//! Worked examples and properties that span modules: small trained models,
//! decoding against tiny catalogs, and the synthetic corpus end to end.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semrec::checkpoint::snap_to_f32;
use semrec::dataset::{split_dataset, InteractionDataset, SplitSpec, UserSequence};
use semrec::decoder::{constrained_beam_search, decode_topn, rank_of_item, CatalogTrie};
use semrec::embedding::{read_text, write_text, EmbeddingCatalog, ItemEmbedding};
use semrec::eval::{evaluate_cases, prepare_domain, zero_shot_cases, RandomPredictor};
use semrec::fsq::{digits_to_token, token_to_digits, FsqConfig, ItemTokenSequence, QuantizedDigits, TokenId};
use semrec::model::{
    mean_loss, train_model, EarlyStop, ItemTable, ModelConfig, ModelTraining, NextItemDistribution,
    NextItemPredictor, SequenceModel, TokenizedItem, TokenizedSequence,
};
use semrec::nn::LAYER_NORM_EPS;
use semrec::optim::AdamSettings;
use semrec::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use semrec::tokenizer::{quantize_pre_activation, CodeMode, FsqCodebook, ReconDecoderConfig};
use semrec::Result;

fn seq(id: &str, tokens: &[TokenId]) -> ItemTokenSequence {
    ItemTokenSequence {
        item_id: id.into(),
        tokens: tokens.to_vec(),
    }
}

/// Constant logits for every slot.
struct Uniform {
    vocab: usize,
    k: usize,
}

impl NextItemPredictor for Uniform {
    fn tokens_per_item(&self) -> usize {
        self.k
    }
    fn predict_next_item(&self, _: &TokenizedSequence) -> Result<NextItemDistribution> {
        Ok(NextItemDistribution::from_logits(vec![vec![0.0; self.vocab]; self.k]))
    }
}

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_positions: 16,
        tokens_per_item: 2,
        vocab,
        sub_dim: 2,
    }
}

/// Item `i` of a toy catalog: tokens `(2i, 2i+1)` and a distinct feature vector.
fn toy_item(i: usize) -> TokenizedItem {
    TokenizedItem {
        tokens: vec![2 * i as TokenId, 2 * i as TokenId + 1],
        features: (0..4).map(|j| ((i * 4 + j) as f64 * 0.7).sin()).collect(),
    }
}

fn toy_trie(n: usize) -> CatalogTrie {
    let cat: Vec<_> = (0..n)
        .map(|i| seq(&format!("i{i}"), &toy_item(i).tokens))
        .collect();
    CatalogTrie::build(&cat, 2).unwrap()
}

fn quick_training(epochs: usize) -> ModelTraining {
    ModelTraining {
        epochs,
        batch_size: 8,
        adam: AdamSettings {
            learning_rate: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    }
}

// ---- catalog trie and decoding ----

#[test]
fn three_distinct_items_make_three_leaves() {
    let t = CatalogTrie::build(&[seq("a", &[0, 1]), seq("b", &[0, 2]), seq("c", &[3, 1])], 2).unwrap();
    assert_eq!(t.num_leaves(), 3);
    assert!(t.node_count() <= 1 + 3 + 3, "{}", t.node_count());
    assert_eq!(t.node_count(), 1 + 2 + 3);
}

#[test]
fn identical_sequences_share_one_leaf() {
    let t = CatalogTrie::build(&[seq("y", &[4, 4]), seq("x", &[4, 4])], 2).unwrap();
    assert_eq!(t.num_leaves(), 1);
    assert_eq!(t.leaves()[0].items, vec!["x", "y"]);
}

#[test]
fn empty_catalog_decodes_to_nothing() {
    let t = CatalogTrie::build(&[], 2).unwrap();
    assert_eq!((t.node_count(), t.num_items()), (1, 0));
    let dist = NextItemDistribution::from_logits(vec![vec![0.0; 4]; 2]);
    assert!(constrained_beam_search(&dist, &t, 3, 5).unwrap().entries.is_empty());
}

#[test]
fn single_item_catalog_scores_its_path() {
    let t = CatalogTrie::build(&[seq("only", &[2, 0])], 2).unwrap();
    let dist = NextItemDistribution::from_logits(vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.0, -0.5]]);
    let out = constrained_beam_search(&dist, &t, 1, 10).unwrap();
    assert_eq!(out.entries.len(), 1);
    let expected = dist.slots[0][2] + dist.slots[1][0];
    assert_eq!(out.entries[0].0, "only");
    assert!((out.entries[0].1 - expected).abs() < 1e-12);
    let history = TokenizedSequence::new(vec![toy_item(0)]);
    assert_eq!(rank_of_item(&history, &Uniform { vocab: 3, k: 2 }, &t, "only").unwrap(), 1);
}

#[test]
fn uniform_model_ranks_by_tie_order() {
    // token-sequence order, not id order: "z" has the smallest sequence
    let cat = [seq("b", &[1, 0]), seq("a", &[2, 2]), seq("z", &[0, 3]), seq("c", &[1, 1])];
    let t = CatalogTrie::build(&cat, 2).unwrap();
    let model = Uniform { vocab: 4, k: 2 };
    let h = TokenizedSequence::new(vec![toy_item(0)]);
    let ranks: Vec<usize> = ["z", "b", "c", "a"]
        .iter()
        .map(|id| rank_of_item(&h, &model, &t, id).unwrap())
        .collect();
    assert_eq!(ranks, vec![1, 2, 3, 4]);
}

#[test]
fn decode_length_and_determinism_and_rank_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = SequenceModel::new(small_config(16), 4).unwrap();
    let trie = toy_trie(8);
    for _ in 0..10 {
        let len = rng.gen_range(1..=4);
        let h = TokenizedSequence::new((0..len).map(|_| toy_item(rng.gen_range(0..8))).collect());
        for n in [3, 8, 20] {
            let a = decode_topn(&h, &model, &trie, 8, n).unwrap();
            assert_eq!(a.entries.len(), n.min(8));
            assert_eq!(a, decode_topn(&h, &model, &trie, 8, n).unwrap());
        }
        let full = decode_topn(&h, &model, &trie, 8, 8).unwrap();
        for (pos, (id, _)) in full.entries.iter().enumerate() {
            assert_eq!(rank_of_item(&h, &model, &trie, id).unwrap(), pos + 1);
        }
    }
}

// ---- sequence model ----

#[test]
fn identical_inputs_compose_identical_rows_and_streams_are_normalized() {
    let model = SequenceModel::new(small_config(16), 9).unwrap();
    // Features scaled up so the raw auxiliary variance dwarfs the layer-norm
    // eps; normalized variance is var / (var + eps).
    let scaled = |i: usize| {
        let mut item = toy_item(i);
        item.features.iter_mut().for_each(|f| *f *= 30.0);
        item
    };
    // item 1 at position 1 and again at position 3 differ only in position
    let s = TokenizedSequence::new(vec![scaled(1), scaled(1), scaled(2)]);
    let a = model.compose_inputs(&s).unwrap();
    let b = model.compose_inputs(&s).unwrap();
    assert_eq!(a, b);
    let (_, cache) = model.forward_cached(&s, &[]).unwrap();
    let row_var = |row: &[f64]| {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64)
    };
    // normalized variance is v / (v + eps) for raw row variance v
    let tokens: Vec<u32> = s.items.iter().flat_map(|i| i.tokens.clone()).collect();
    let token_stream = cache.token_normalized();
    for (r, &t) in tokens.iter().enumerate() {
        let (_, raw) = row_var(model.token_embedding.row(t as usize));
        let (mean, var) = row_var(token_stream.row(r + 1));
        assert!(mean.abs() < 1e-9, "token row {}: mean {mean}", r + 1);
        assert!((var - raw / (raw + LAYER_NORM_EPS)).abs() < 1e-9, "token row {}: {var}", r + 1);
    }
    // row 0 is BOS, whose auxiliary input is zero
    let aux = cache.aux_normalized();
    for r in 1..aux.rows {
        let (mean, var) = row_var(aux.row(r));
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-2, "aux row {r}: mean {mean} var {var}");
    }
    // two copies of the same item at the same position in different sequences
    let t = TokenizedSequence::new(vec![scaled(1), scaled(3)]);
    let c = model.compose_inputs(&t).unwrap();
    assert_eq!(a.row(1), c.row(1));
    assert_eq!(a.row(2), c.row(2));
    assert!(a.rows > 0 && a.data.iter().all(|v| v.is_finite()));
}

#[test]
fn a_then_b_concentrates_on_b() {
    let (a, b) = (toy_item(0), toy_item(1));
    let data = vec![TokenizedSequence::new(vec![a.clone(), b.clone()]); 16];
    let (model, _) = train_model(SequenceModel::new(small_config(6), 2).unwrap(), &data, &[], &quick_training(60)).unwrap();
    let d = model.predict_next_item(&TokenizedSequence::new(vec![a])).unwrap();
    for (k, &t) in b.tokens.iter().enumerate() {
        let p = d.probabilities(k)[t as usize];
        assert!(p >= 0.9, "slot {k}: p(B) = {p}");
    }
}

/// Five items in a fixed cyclic order; every sequence is a window of it.
fn cyclic_corpus(n: usize, seed: u64) -> Vec<TokenizedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let start = rng.gen_range(0..5);
            let len = rng.gen_range(2..=6);
            TokenizedSequence::new((0..len).map(|j| toy_item((start + j) % 5)).collect())
        })
        .collect()
}

#[test]
fn cyclic_corpus_reaches_entropy_floor_and_ranks_targets_first() {
    let train = cyclic_corpus(200, 1);
    let held_out = cyclic_corpus(50, 2);
    let untrained = SequenceModel::new(small_config(10), 5).unwrap();
    let before = mean_loss(&untrained, &held_out).unwrap();
    let (model, report) = train_model(untrained, &train, &held_out, &quick_training(25)).unwrap();
    assert!(report.trace.iter().all(|e| e.train_loss.is_finite() && e.eval_loss.is_finite()));
    // Successors are deterministic, so the floor is 0 nats; "within 10%" of
    // zero is read as an absolute tolerance.
    let after = mean_loss(&model, &held_out).unwrap();
    assert!(after <= 0.05, "eval loss {after} (untrained {before})");

    let trie = toy_trie(5);
    let mut first = 0;
    for s in &held_out {
        let h = s.prefix(s.len() - 1);
        let target = s.items.last().unwrap().tokens[0] / 2;
        let top = decode_topn(&h, &model, &trie, 5, 1).unwrap();
        first += (top.entries[0].0 == format!("i{target}")) as usize;
    }
    assert!(first * 10 >= held_out.len() * 9, "{first}/{}", held_out.len());
}

#[test]
fn appending_an_item_changes_the_prediction() {
    let (model, _) = train_model(
        SequenceModel::new(small_config(10), 5).unwrap(),
        &cyclic_corpus(60, 4),
        &[],
        &quick_training(5),
    )
    .unwrap();
    let h = TokenizedSequence::new(vec![toy_item(0), toy_item(1)]);
    let longer = TokenizedSequence::new(vec![toy_item(0), toy_item(1), toy_item(2)]);
    assert_ne!(model.predict_next_item(&h).unwrap(), model.predict_next_item(&longer).unwrap());
}

#[test]
fn reloaded_checkpoint_reproduces_loss() {
    let data = cyclic_corpus(30, 8);
    let (mut model, _) = train_model(SequenceModel::new(small_config(10), 1).unwrap(), &data, &[], &quick_training(3)).unwrap();
    snap_to_f32(&mut model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = SequenceModel::load(&path).unwrap();
    let (a, b) = (mean_loss(&model, &data).unwrap(), mean_loss(&back, &data).unwrap());
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
}

// ---- synthetic corpus end to end ----

struct SyntheticSetup {
    table: ItemTable,
    alpha: InteractionDataset,
    config: ModelConfig,
}

fn synthetic_setup(users: usize) -> SyntheticSetup {
    let spec = SyntheticSpec {
        users_per_domain: users,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let fsq = FsqConfig::desk(spec.embedding_dim);
    let mut codebook = FsqCodebook::new(fsq.clone(), ReconDecoderConfig::default(), 1).unwrap();
    codebook.standardize_input(&corpus.catalog).unwrap();
    let tokens = codebook.tokenize_catalog(&corpus.catalog).unwrap();
    SyntheticSetup {
        table: ItemTable::build(&tokens, &corpus.catalog).unwrap(),
        alpha: corpus.domain("alpha").unwrap().clone(),
        config: ModelConfig {
            d_model: 32,
            n_layers: 1,
            ..ModelConfig::desk(fsq.codebook_size(), fsq.sub_dim())
        },
    }
}

fn tokenized(table: &ItemTable, data: &[UserSequence]) -> Vec<TokenizedSequence> {
    data.iter().map(|s| table.sequence(&s.items).unwrap()).collect()
}

#[test]
fn more_data_does_not_hurt_and_training_beats_no_training() {
    let s = synthetic_setup(700);
    let eval = tokenized(&s.table, &s.alpha.sequences[600..]);
    let hyper = ModelTraining {
        epochs: 30,
        early_stop: Some(EarlyStop::default()),
        ..quick_training(30)
    };
    let run = |n: usize| {
        let train = tokenized(&s.table, &s.alpha.sequences[..n]);
        train_model(SequenceModel::new(s.config, 3).unwrap(), &train, &eval, &hyper).unwrap().1
    };
    let small = run(300);
    let large = run(600);
    let untrained = mean_loss(&SequenceModel::new(s.config, 3).unwrap(), &eval).unwrap();
    assert!(small.best_eval_loss < untrained, "{} vs untrained {untrained}", small.best_eval_loss);
    assert!(
        large.best_eval_loss <= small.best_eval_loss * 1.02,
        "600 sequences: {}, 300 sequences: {}",
        large.best_eval_loss,
        small.best_eval_loss
    );
}

#[test]
fn random_logits_hit_at_5_matches_chance() {
    let spec = SyntheticSpec {
        users_per_domain: 2000,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let fsq = FsqConfig::desk(spec.embedding_dim);
    let mut codebook = FsqCodebook::new(fsq.clone(), ReconDecoderConfig::default(), 1).unwrap();
    codebook.standardize_input(&corpus.catalog).unwrap();
    let beta = corpus.domain("beta").unwrap();
    let catalog = corpus.domain_catalog("beta").unwrap();
    let domain = prepare_domain(&codebook, &catalog).unwrap();
    let cases = zero_shot_cases(beta);
    let model = RandomPredictor::new(fsq.codebook_size(), fsq.sub_vectors, 77);
    let report = evaluate_cases(&model, &domain, &cases, "zero-shot").unwrap();
    let p = 5.0 / catalog.len() as f64;
    let se = (p * (1.0 - p) / cases.len() as f64).sqrt();
    let hit = report.hit[&5];
    assert!(cases.len() >= 2000);
    assert!((hit - p).abs() <= 3.0 * se, "Hit@5 {hit}, chance {p}, se {se}");
}

// ---- properties ----

fn embedding_catalog(values: Vec<Vec<f64>>) -> EmbeddingCatalog {
    let dim = values[0].len();
    let entries = values
        .into_iter()
        .enumerate()
        .map(|(i, vector)| ItemEmbedding {
            item_id: format!("item{i}"),
            vector,
        })
        .collect();
    EmbeddingCatalog::new(dim, entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn digits_stay_in_bounds_and_are_monotone(
        z in prop::collection::vec(-60.0f64..60.0, 5),
        j in 0usize..5,
        bump in 0.0f64..10.0,
    ) {
        let cfg = FsqConfig::full(10);
        let d = quantize_pre_activation(&z, &cfg).unwrap();
        for (digit, level) in d.0.iter().zip(&cfg.levels) {
            prop_assert!(*digit < *level);
        }
        let mut up = z.clone();
        up[j] += bump;
        prop_assert!(quantize_pre_activation(&up, &cfg).unwrap().0[j] >= d.0[j]);
    }

    #[test]
    fn codec_round_trips_for_any_levels(levels in prop::collection::vec(2u32..9, 1..6), seed in any::<u64>()) {
        let cfg = FsqConfig::new(1, levels.len(), levels.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let digits = QuantizedDigits(levels.iter().map(|&l| rng.gen_range(0..l)).collect());
        let token = digits_to_token(&digits, &cfg).unwrap();
        prop_assert!((token as usize) < cfg.codebook_size());
        prop_assert_eq!(token_to_digits(token, &cfg).unwrap(), digits);
    }

    #[test]
    fn reconstruction_loss_is_non_negative(values in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 8), 1..5)) {
        let cfg = FsqConfig::new(2, 8, vec![5, 4, 3]).unwrap();
        let codebook = FsqCodebook::new(cfg, ReconDecoderConfig { width: 8, layers: 1, heads: 2 }, 4).unwrap();
        let batch: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
        prop_assert!(codebook.reconstruction_loss(&batch, CodeMode::Quantized).unwrap() >= 0.0);
    }

    #[test]
    fn text_embeddings_round_trip_exactly(values in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..6)) {
        let catalog = embedding_catalog(values);
        let mut buf = Vec::new();
        write_text(&mut buf, &catalog).unwrap();
        let back = read_text(buf.as_slice(), 3).unwrap();
        prop_assert_eq!(back, catalog);
    }

    #[test]
    fn split_partitions_the_dataset(n in 2usize..60, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let seqs: Vec<UserSequence> = (0..n)
            .map(|i| UserSequence { user_id: format!("u{i}"), items: vec!["a".into(), "b".into()] })
            .collect();
        let data = InteractionDataset::new("d", seqs).unwrap();
        let (train, test) = split_dataset(&data, &SplitSpec { train_fraction: fraction, seed }).unwrap();
        let expected = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
        prop_assert_eq!(train.len(), expected);
        prop_assert_eq!(train.len() + test.len(), n);
        let mut ids: Vec<_> = train.sequences.iter().chain(&test.sequences).map(|s| s.user_id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }
}

#[test]
fn small_perturbation_keeps_tokens_and_code_order_matters() {
    let cfg = FsqConfig::new(2, 8, vec![5, 4, 3]).unwrap();
    let codebook = FsqCodebook::new(cfg, ReconDecoderConfig { width: 8, layers: 1, heads: 2 }, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = ItemEmbedding { item_id: "x".into(), vector: v.clone() };
        let mut w = v.clone();
        w[0] += 1e-12;
        let f = ItemEmbedding { item_id: "x".into(), vector: w };
        assert_eq!(codebook.tokenize_item(&e).unwrap(), codebook.tokenize_item(&f).unwrap());
    }
    let tokens = [7, 40];
    let forward = codebook.reconstruct_tokens(&tokens).unwrap();
    let swapped = codebook.reconstruct_tokens(&[40, 7]).unwrap();
    assert_eq!(forward.len(), 8);
    assert_ne!(forward, swapped);
}
