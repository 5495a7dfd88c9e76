mod common;

use common::oracle;
use maestro_core::model::{
    self, attention, forward, generate, gradients, gradients_scaled, hidden_states, init_params,
    loss, sample_logits, sample_next, temperature_probs, train_step, LanguageModel, Mode,
    ModelConfig, ModelError, Optimizer, OptimizerState, Params, TrainingBatch,
};
use maestro_core::music::{TokenSequence, VOCAB_SIZE};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d_model: usize, n_heads: usize, n_layers: usize, d_ff: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model,
        n_heads,
        n_layers,
        d_ff,
        max_seq_len,
        dropout: 0.0,
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &oracle::Matrix) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] - v).abs());
        }
    }
    worst
}

#[test]
fn attention_single_row_returns_that_value_row() {
    let q = Array2::from_shape_vec((1, 2), vec![0.3, -1.2]).unwrap();
    let k = Array2::from_shape_vec((1, 2), vec![2.0, 0.5]).unwrap();
    let v = Array2::from_shape_vec((1, 3), vec![7.0, -1.0, 0.25]).unwrap();
    let out = attention(q.view(), k.view(), v.view(), true);
    assert_eq!(out.row(0).to_vec(), vec![7.0, -1.0, 0.25]);
}

#[test]
fn attention_with_zero_scores_averages_values() {
    let q = Array2::<f64>::zeros((3, 2));
    let k = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, -3.0, 0.5, 4.0, 4.0]).unwrap();
    let v = Array2::from_shape_vec((3, 2), vec![1.0, 10.0, 2.0, 20.0, 6.0, 60.0]).unwrap();
    let out = attention(q.view(), k.view(), v.view(), false);
    for row in out.rows() {
        assert!((row[0] - 3.0).abs() < 1e-12);
        assert!((row[1] - 30.0).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for causal in [true, false] {
        let q = oracle::random_matrix(3, 2, &mut rng);
        let k = oracle::random_matrix(3, 2, &mut rng);
        let v = oracle::random_matrix(3, 2, &mut rng);
        let ours = attention(oracle::to_array(&q).view(), oracle::to_array(&k).view(), oracle::to_array(&v).view(), causal);
        assert!(max_abs_diff(&ours, &oracle::attention(&q, &k, &v, causal)) < 1e-10);
    }
    // fewer queries than keys: the queries are the tail of the sequence
    let q = oracle::random_matrix(2, 4, &mut rng);
    let k = oracle::random_matrix(5, 4, &mut rng);
    let v = oracle::random_matrix(5, 3, &mut rng);
    let ours = attention(oracle::to_array(&q).view(), oracle::to_array(&k).view(), oracle::to_array(&v).view(), true);
    assert!(max_abs_diff(&ours, &oracle::attention(&q, &k, &v, true)) < 1e-10);
}

#[test]
fn attention_weights_are_a_distribution() {
    // with V = I the output rows are the weight rows themselves
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = oracle::to_array(&oracle::random_matrix(6, 4, &mut rng)) * 5.0;
    let k = oracle::to_array(&oracle::random_matrix(6, 4, &mut rng)) * 5.0;
    let eye = Array2::<f64>::eye(6);
    let w = attention(q.view(), k.view(), eye.view(), true);
    for (i, row) in w.rows().into_iter().enumerate() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
    }
}

#[test]
fn tiny_forward_matches_scalar_oracle() {
    let mut params = init_params::<f64>(&config(4, 1, 1, 8, 4), 1).unwrap();
    oracle::scramble(&mut params, 2);
    let tokens = [372u16, 60];
    let ours = forward(&params, &tokens).unwrap();
    assert_eq!(ours.dim(), (2, VOCAB_SIZE));
    assert!(max_abs_diff(&ours, &oracle::forward(&params, &tokens)) < 1e-8);
}

#[test]
fn multi_head_forward_matches_scalar_oracle() {
    let mut params = init_params::<f64>(&config(8, 2, 2, 12, 8), 4).unwrap();
    oracle::scramble(&mut params, 5);
    let tokens = [0u16, 387, 12, 200, 12, 300, 5];
    let ours = forward(&params, &tokens).unwrap();
    assert!(max_abs_diff(&ours, &oracle::forward(&params, &tokens)) < 1e-8);
}

#[test]
fn forward_rejects_overlong_and_out_of_vocabulary_input() {
    let params = init_params::<f64>(&config(4, 1, 1, 8, 4), 1).unwrap();
    assert_eq!(
        forward(&params, &[1, 2, 3, 4, 5]).unwrap_err(),
        ModelError::SequenceTooLong { len: 5, max: 4 }
    );
    assert_eq!(forward(&params, &[388]).unwrap_err(), ModelError::TokenOutOfRange(388));
    assert_eq!(forward(&params, &[]).unwrap_err(), ModelError::EmptyContext);
}

#[test]
fn logits_ignore_later_tokens() {
    let mut params = init_params::<f64>(&config(16, 4, 2, 32, 12), 9).unwrap();
    oracle::scramble(&mut params, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let base: Vec<u16> = (0..12).map(|_| rng.random_range(0..VOCAB_SIZE as u16)).collect();
    let reference = forward(&params, &base).unwrap();
    for j in 0..11 {
        let mut changed = base.clone();
        for t in changed.iter_mut().skip(j + 1) {
            *t = rng.random_range(0..VOCAB_SIZE as u16);
        }
        let logits = forward(&params, &changed).unwrap();
        for i in 0..=j {
            assert_eq!(logits.row(i), reference.row(i), "position {i} saw a change after {j}");
        }
    }
}

#[test]
fn loss_reference_values() {
    let zeros = Array2::<f64>::zeros((3, VOCAB_SIZE));
    assert!((loss(zeros.view(), &[0, 17, 387]) - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    assert!(((VOCAB_SIZE as f64).ln() - 5.9610).abs() < 1e-4);

    let mut sharp = Array2::<f64>::zeros((1, VOCAB_SIZE));
    sharp[[0, 42]] = 50.0;
    assert!(loss(sharp.view(), &[42]) < 1e-10);
}

#[test]
fn loss_matches_scalar_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits: oracle::Matrix = (0..5)
        .map(|_| (0..VOCAB_SIZE).map(|_| rng.random_range(-30.0..30.0)).collect())
        .collect();
    let targets = [3u16, 100, 387, 0, 255];
    let ours = loss(oracle::to_array(&logits).view(), &targets);
    assert!((ours - oracle::cross_entropy(&logits, &targets)).abs() < 1e-10);
}

fn tiny_batch() -> TrainingBatch {
    TrainingBatch::new(
        vec![vec![372, 60, 263, 188, 64], vec![5, 6, 7]],
        vec![vec![60, 263, 188, 64, 300], vec![6, 7, 1]],
    )
    .unwrap()
}

#[test]
fn batch_loss_matches_scalar_oracle() {
    let mut params = init_params::<f64>(&config(8, 2, 1, 8, 8), 3).unwrap();
    oracle::scramble(&mut params, 4);
    let batch = tiny_batch();
    let ours = model::batch_loss(&params, &batch, Mode::Eval).unwrap();
    assert!((ours - oracle::batch_loss(&params, &batch)).abs() < 1e-10);
}

#[test]
fn training_batch_enforces_the_shift() {
    assert!(TrainingBatch::new(vec![vec![1, 2, 3]], vec![vec![2, 4, 5]]).is_err());
    assert!(TrainingBatch::new(vec![vec![1, 2]], vec![vec![2]]).is_err());
    assert!(TrainingBatch::new(vec![], vec![]).is_err());
    let b = TrainingBatch::from_windows([&[1u16, 2, 3, 4][..]]).unwrap();
    assert_eq!(b.inputs(), &[vec![1, 2, 3]]);
    assert_eq!(b.targets(), &[vec![2, 3, 4]]);
}

#[test]
fn gradients_match_central_differences() {
    let mut params = init_params::<f64>(&config(8, 2, 2, 16, 8), 7).unwrap();
    oracle::scramble(&mut params, 8);
    let batch = tiny_batch();
    let report = oracle::finite_difference_check(&params, &batch, Mode::Eval, 0..params.len(), 1e-5, 1e-6);
    assert_eq!(report.checked, params.len());
    assert!(
        report.worst_relative < 1e-4,
        "relative error {} at {:?}",
        report.worst_relative,
        params.layout().tensor_of(report.worst_index)
    );
}

#[test]
fn gradients_with_dropout_match_central_differences() {
    // the mask is a function of the seed, so the loss is still smooth in θ
    let mut cfg = config(8, 2, 2, 16, 8);
    cfg.dropout = 0.3;
    let mut params = init_params::<f64>(&cfg, 17).unwrap();
    oracle::scramble(&mut params, 18);
    let batch = tiny_batch();
    let indices = (0..params.len()).step_by(3);
    let report = oracle::finite_difference_check(&params, &batch, Mode::Train { seed: 99 }, indices, 1e-5, 1e-6);
    assert!(report.worst_relative < 1e-4, "relative error {}", report.worst_relative);
}

#[test]
fn unused_embedding_row_only_feels_the_output_projection() {
    // With tied weights an absent token still receives the softmax term of
    // the output projection, Σ p(v)·h / N, and nothing from the input side.
    let mut params = init_params::<f64>(&config(8, 2, 1, 8, 8), 3).unwrap();
    oracle::scramble(&mut params, 30);
    let batch = tiny_batch();
    let unused = 377usize;
    assert!(batch.inputs().iter().chain(batch.targets()).all(|r| !r.contains(&(unused as u16))));

    let (_, grads) = gradients(&params, &batch, Mode::Eval).unwrap();
    let mut expected = [0.0; 8];
    for x in batch.inputs() {
        let h = hidden_states(&params, x).unwrap();
        let logits = forward(&params, x).unwrap();
        for (t, row) in logits.rows().into_iter().enumerate() {
            let p = temperature_probs(&row.to_vec(), 1.0)[unused];
            for (e, hv) in expected.iter_mut().zip(h.row(t)) {
                *e += p * hv / batch.token_count() as f64;
            }
        }
    }
    let row = grads.matrix(params.layout().embedding).row(unused).to_vec();
    for (g, e) in row.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn scaling_the_loss_scales_the_gradient() {
    let mut params = init_params::<f64>(&config(8, 2, 1, 8, 8), 3).unwrap();
    oracle::scramble(&mut params, 31);
    let batch = tiny_batch();
    let (l1, g1) = gradients(&params, &batch, Mode::Eval).unwrap();
    let (l3, g3) = gradients_scaled(&params, &batch, Mode::Eval, 3.0).unwrap();
    assert_eq!(l1, l3);
    for (a, b) in g1.values().iter().zip(g3.values()) {
        assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let mut params = init_params::<f64>(&config(8, 2, 2, 16, 8), 3).unwrap();
    oracle::scramble(&mut params, 32);
    let narrow: Params<f32> = params.cast();
    let a = forward(&params, &[1, 2, 3]).unwrap();
    let b = forward(&narrow, &[1, 2, 3]).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - f64::from(*y)).abs() < 1e-3);
    }
}

fn fixed_batch() -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let windows: Vec<Vec<u16>> = (0..4)
        .map(|_| (0..9).map(|_| rng.random_range(0..VOCAB_SIZE as u16)).collect())
        .collect();
    TrainingBatch::from_windows(windows.iter().map(Vec::as_slice)).unwrap()
}

#[test]
fn repeated_steps_on_one_batch_strictly_reduce_the_loss() {
    let mut params = init_params::<f64>(&config(16, 2, 1, 32, 8), 41).unwrap();
    let mut state = OptimizerState::new(Optimizer::default(), &params);
    let batch = fixed_batch();
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let loss = train_step(&mut params, &mut state, &batch, 3e-2, Mode::Eval).unwrap();
        assert!(loss < last, "step {step}: {loss} after {last}");
        last = loss;
    }
    assert_eq!(state.step(), 50);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut cfg = config(16, 2, 1, 32, 8);
        cfg.dropout = 0.1;
        let mut params = init_params::<f64>(&cfg, 42).unwrap();
        let mut state = OptimizerState::new(Optimizer::default(), &params);
        let batch = fixed_batch();
        let losses: Vec<u64> = (0..10)
            .map(|s| train_step(&mut params, &mut state, &batch, 1e-2, Mode::Train { seed: s }).unwrap().to_bits())
            .collect();
        (losses, params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn zero_learning_rate_gradient_descent_changes_nothing() {
    let mut params = init_params::<f64>(&config(8, 2, 1, 8, 8), 43).unwrap();
    let before = params.clone();
    let mut state = OptimizerState::new(Optimizer::Sgd, &params);
    train_step(&mut params, &mut state, &fixed_batch(), 0.0, Mode::Eval).unwrap();
    assert_eq!(params, before);
    assert!(matches!(
        train_step(&mut params, &mut state, &fixed_batch(), -1.0, Mode::Eval),
        Err(ModelError::InvalidLearningRate(_))
    ));
}

#[test]
fn non_finite_loss_reports_the_step() {
    let mut params = init_params::<f64>(&config(8, 2, 1, 8, 8), 44).unwrap();
    let mut state = OptimizerState::new(Optimizer::Sgd, &params);
    train_step(&mut params, &mut state, &fixed_batch(), 0.1, Mode::Eval).unwrap();
    params.values_mut()[0] = f64::NAN;
    assert!(matches!(
        train_step(&mut params, &mut state, &fixed_batch(), 0.1, Mode::Eval),
        Err(ModelError::Diverged { step: 1, .. })
    ));
}

#[test]
fn two_token_frequencies_match_three_quarters() {
    let logits = [0.0, 3f64.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let n = 100_000;
    let ones = (0..n).filter(|_| sample_logits(&logits, 1.0, &mut rng).unwrap() == 1).count();
    let freq = ones as f64 / n as f64;
    assert!((freq - 0.75).abs() <= 0.01, "{freq}");
}

#[test]
fn four_token_draws_pass_chi_square() {
    let logits = [0.3, -1.0, 1.1, 0.0];
    let probs = temperature_probs(&logits, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_logits(&logits, 1.0, &mut rng).unwrap()] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // upper 0.001 quantile of chi-square with 3 degrees of freedom
    assert!(chi2 < 16.266, "chi2 {chi2}");
}

#[test]
fn sample_next_and_generate_contracts() {
    let params = init_params::<f64>(&config(8, 2, 1, 8, 6), 60).unwrap();
    let seed = TokenSequence::new(vec![372, 60, 263]).unwrap();
    let out = generate(&params, &seed, 9, 1.0, 7).unwrap();
    assert_eq!(out.len(), 12);
    assert_eq!(&out.ids()[..3], seed.ids());
    assert_eq!(out, generate(&params, &seed, 9, 1.0, 7).unwrap());

    let greedy = sample_next(&params, &seed, 0.0, 1).unwrap();
    let logits = params.next_logits(seed.ids()).unwrap();
    assert_eq!(usize::from(greedy), model::argmax(&logits));
    assert!(sample_next(&params, &seed, -0.5, 1).is_err());
}

#[test]
fn greedy_generation_matches_iterated_argmax_oracle() {
    let mut params = init_params::<f64>(&config(8, 2, 2, 16, 6), 61).unwrap();
    oracle::scramble(&mut params, 62);
    // the seed is longer than the window, so sliding is exercised from the start
    let seed = TokenSequence::new(vec![1, 50, 100, 150, 200, 250, 300, 350]).unwrap();
    let ours = generate(&params, &seed, 12, 0.0, 0).unwrap();
    assert_eq!(ours.ids(), oracle::greedy(&params, seed.ids(), 12).as_slice());
}
