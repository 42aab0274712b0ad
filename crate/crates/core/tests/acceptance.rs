//! Acceptance suite. Every test prints one `acceptance N (<name>): PASS`
//! or `... FAIL` line; run with `--nocapture` to see them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqmatch_core::checkpoint::{load_checkpoint, save_checkpoint};
use seqmatch_core::data::{pad_batch, PreparedDialogue};
use seqmatch_core::embedding::EmbeddingTable;
use seqmatch_core::encoder::{bilstm_forward, stack_encode, BiLstmRefs, LstmDirRefs, StackRefs};
use seqmatch_core::gradcheck::check_gradients;
use seqmatch_core::metrics::{
    ensemble_average, mrr, rank_candidates, rank_dialogue, recall_at_k, RankedDialogue,
};
use seqmatch_core::model::{batch_loss, ModeFlags, Model, ModelConfig};
use seqmatch_core::scorer::softmax;
use seqmatch_core::trainer::{lr_at, train, TrainConfig};
use seqmatch_core::{Tape, Tensor, TensorRef};

fn report(number: u8, name: &str, outcome: Result<(), String>) {
    match outcome {
        Ok(()) => println!("acceptance {number} ({name}): PASS"),
        Err(message) => {
            println!("acceptance {number} ({name}): FAIL - {message}");
            panic!("acceptance criterion {number} failed: {message}");
        }
    }
}

fn ensure(condition: bool, message: impl Into<String>) -> Result<(), String> {
    if condition {
        Ok(())
    } else {
        Err(message.into())
    }
}

// ---- shared model fixtures ----

fn toy_config() -> ModelConfig {
    ModelConfig {
        general_dim: 2,
        task_dim: 2,
        hidden_dim: 4,
        ahre_layers: 2,
        mlp_hidden: 4,
        modes: ModeFlags::default(),
    }
}

fn embedding_for(config: &ModelConfig, vocab_size: usize, seed: u64) -> EmbeddingTable {
    let e = config.embed_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = Tensor::zeros(vec![vocab_size, e]);
    for (i, v) in matrix.data_mut().iter_mut().enumerate() {
        if i >= e {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    EmbeddingTable::from_matrix(matrix, config.general_dim, config.task_dim, false).unwrap()
}

/// A dialogue whose context uses up to 12 tokens of a 20-token vocabulary
/// and carries 3 candidates, per the toy gradient-check configuration.
fn toy_dialogue() -> PreparedDialogue {
    PreparedDialogue {
        example_id: "toy".to_string(),
        context: vec![3, 7, 11, 2, 5, 9, 13, 2, 4, 8, 12, 6],
        last_span: (8, 12),
        candidates: vec![vec![14, 15, 16], vec![17, 18], vec![19, 3, 5, 7]],
        label: Some(0),
    }
}

/// Memorization set: every context shares its tokens with exactly its gold
/// candidate, and every dialogue uses a disjoint token pattern.
fn memorization_set(dialogues: usize, candidates: usize) -> Vec<PreparedDialogue> {
    let mut set = Vec::new();
    for i in 0..dialogues {
        let base = 3 + i * 3;
        let label = i % candidates;
        let pattern = |d: usize| vec![3 + d * 3, 4 + d * 3, 5 + d * 3];
        let cands: Vec<Vec<usize>> = (0..candidates)
            .map(|c| {
                if c == label {
                    pattern(i)
                } else {
                    pattern((i + 1 + c) % dialogues)
                }
            })
            .collect();
        set.push(PreparedDialogue {
            example_id: format!("m{i}"),
            context: vec![base, base + 1, base + 2, base, base + 1, base + 2],
            last_span: (0, 6),
            candidates: cands,
            label: Some(label),
        });
    }
    set
}

fn max_token(set: &[PreparedDialogue]) -> usize {
    set.iter()
        .flat_map(|d| d.context.iter().chain(d.candidates.iter().flatten()))
        .copied()
        .max()
        .unwrap()
}

// ---- criterion 1: gradient correctness ----

type Leaves = Vec<(String, Tensor<f64>)>;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Random positive weights for a reduction; makes every output entry carry
/// a distinct gradient instead of the uniform one from a plain sum.
fn weighted_sum(tape: &mut Tape<f64>, x: TensorRef, seed: u64) -> seqmatch_core::Result<TensorRef> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = tape.constant(random_tensor(&mut rng, shape[0], shape[1], 0.2, 1.0));
    let weighted = tape.mul(x, weights)?;
    tape.sum_all(weighted)
}

fn run_fd_case<F>(label: &str, leaves: Leaves, build: F) -> Result<usize, String>
where
    F: FnOnce(&mut Tape<f64>, &[TensorRef]) -> seqmatch_core::Result<TensorRef>,
{
    let entries = leaves.len();
    let report = check_gradients(&leaves, 1e-5, 1e-4, build)
        .map_err(|e| format!("{label}: harness error {e}"))?;
    if report.passed() {
        Ok(entries)
    } else {
        let worst = &report.failures[0];
        Err(format!(
            "{label}: rel err {} at {}[{}] (analytic {}, numeric {})",
            worst.rel_err, worst.leaf, worst.index, worst.analytic, worst.numeric
        ))
    }
}

fn primitive_sweep() -> Result<usize, String> {
    let mut trials = 0usize;
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let seed = 1000 + trial;

        let a = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let b = random_tensor(&mut rng, 4, 2, -1.0, 1.0);
        run_fd_case(
            "matmul",
            vec![("a".to_string(), a), ("b".to_string(), b)],
            |t, l| {
                let c = t.matmul(l[0], l[1])?;
                weighted_sum(t, c, seed)
            },
        )?;
        trials += 1;

        for (name, op) in [("add", 0usize), ("sub", 1), ("mul", 2)] {
            let x = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
            let y = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
            run_fd_case(
                name,
                vec![("x".to_string(), x), ("y".to_string(), y)],
                |t, l| {
                    let z = match op {
                        0 => t.add(l[0], l[1])?,
                        1 => t.sub(l[0], l[1])?,
                        _ => t.mul(l[0], l[1])?,
                    };
                    weighted_sum(t, z, seed)
                },
            )?;
            trials += 1;
        }

        for axis in [0usize, 1] {
            let parts: Leaves = (0..3)
                .map(|i| (format!("p{i}"), random_tensor(&mut rng, 2, 3, -1.0, 1.0)))
                .collect();
            run_fd_case("concat", parts, |t, l| {
                let c = t.concat(l, axis)?;
                weighted_sum(t, c, seed)
            })?;
            trials += 1;

            let x = random_tensor(&mut rng, 4, 5, -1.0, 1.0);
            run_fd_case("slice", vec![("x".to_string(), x)], |t, l| {
                let s = t.slice(l[0], axis, 1, 3)?;
                weighted_sum(t, s, seed)
            })?;
            trials += 1;

            let x = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
            run_fd_case("sum_axis", vec![("x".to_string(), x)], |t, l| {
                let s = t.sum_axis(l[0], axis)?;
                weighted_sum(t, s, seed)
            })?;
            trials += 1;

            let x = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
            run_fd_case("mean_axis", vec![("x".to_string(), x)], |t, l| {
                let s = t.mean_axis(l[0], axis)?;
                weighted_sum(t, s, seed)
            })?;
            trials += 1;
        }

        let x = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
        run_fd_case("sum_all", vec![("x".to_string(), x)], |t, l| {
            t.sum_all(l[0])
        })?;
        trials += 1;

        // unary maps; relu and elu keep inputs clear of the hinge at zero
        type UnaryOp = fn(&mut Tape<f64>, TensorRef) -> seqmatch_core::Result<TensorRef>;
        let smooth: [(&str, UnaryOp, f64, f64); 4] = [
            ("exp", |t, x| t.exp(x), -1.0, 1.0),
            ("log", |t, x| t.log(x), 0.2, 2.0),
            ("tanh", |t, x| t.tanh(x), -2.0, 2.0),
            ("sigmoid", |t, x| t.sigmoid(x), -2.0, 2.0),
        ];
        for (name, op, lo, hi) in smooth {
            let x = random_tensor(&mut rng, 3, 3, lo, hi);
            run_fd_case(name, vec![("x".to_string(), x)], |t, l| {
                let y = op(t, l[0])?;
                weighted_sum(t, y, seed)
            })?;
            trials += 1;
        }
        let mut hinge_free = random_tensor(&mut rng, 3, 3, 0.1, 1.5);
        for (i, v) in hinge_free.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        run_fd_case(
            "relu",
            vec![("x".to_string(), hinge_free.clone())],
            |t, l| {
                let y = t.relu(l[0])?;
                weighted_sum(t, y, seed)
            },
        )?;
        trials += 1;
        run_fd_case("elu", vec![("x".to_string(), hinge_free)], |t, l| {
            let y = t.elu(l[0], 1.0)?;
            weighted_sum(t, y, seed)
        })?;
        trials += 1;

        for axis in [0usize, 1] {
            let x = random_tensor(&mut rng, 3, 4, -2.0, 2.0);
            // mask out one entry per trial but keep every row/column alive
            let mut mask = Tensor::full(vec![3, 4], 1.0f64);
            mask.data_mut()[(trial as usize) % 12] = 0.0;
            run_fd_case("softmax_masked", vec![("x".to_string(), x)], |t, l| {
                let m = t.constant(mask);
                let y = t.softmax_masked(l[0], m, axis)?;
                weighted_sum(t, y, seed)
            })?;
            trials += 1;
        }

        let x = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
        run_fd_case("dropout", vec![("x".to_string(), x)], |t, l| {
            let y = t.dropout(l[0], 0.4, true, 99 + seed)?;
            weighted_sum(t, y, seed)
        })?;
        trials += 1;

        let x = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
        run_fd_case("transpose", vec![("x".to_string(), x)], |t, l| {
            let y = t.transpose(l[0])?;
            weighted_sum(t, y, seed)
        })?;
        trials += 1;

        for shape in [vec![1, 4], vec![3, 1], vec![1, 1]] {
            let x = random_tensor(&mut rng, shape[0], shape[1], -1.0, 1.0);
            run_fd_case("broadcast", vec![("x".to_string(), x)], |t, l| {
                let y = t.broadcast(l[0], vec![3, 4])?;
                weighted_sum(t, y, seed)
            })?;
            trials += 1;
        }

        let x = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
        run_fd_case("scalar_mul", vec![("x".to_string(), x)], |t, l| {
            let y = t.scalar_mul(l[0], 1.7)?;
            weighted_sum(t, y, seed)
        })?;
        trials += 1;

        // column maxima stay unique by construction so the finite
        // difference never straddles an argmax switch
        let mut max_in = Tensor::zeros(vec![4, 3]);
        for col in 0..3 {
            let mut order: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for (row, &rank) in order.iter().enumerate() {
                max_in.data_mut()[row * 3 + col] = rank as f64 * 0.5 + rng.gen_range(0.0..0.1);
            }
        }
        run_fd_case("masked_max", vec![("x".to_string(), max_in)], |t, l| {
            let mut mask = Tensor::full(vec![4, 3], 1.0f64);
            for col in 0..3 {
                mask.data_mut()[((seed as usize + col) % 4) * 3 + col] = 0.0;
            }
            let m = t.constant(mask);
            let y = t.masked_max(l[0], m)?;
            weighted_sum(t, y, seed)
        })?;
        trials += 1;

        let table = random_tensor(&mut rng, 6, 3, -1.0, 1.0);
        run_fd_case("gather_rows", vec![("table".to_string(), table)], |t, l| {
            let y = t.gather_rows(l[0], &[0, 2, 2, 5, 1])?;
            weighted_sum(t, y, seed)
        })?;
        trials += 1;
    }
    Ok(trials)
}

fn full_pipeline_fd(label: &str, modes: ModeFlags, seed: u64) -> Result<(), String> {
    let config = ModelConfig {
        general_dim: 2,
        task_dim: 2,
        hidden_dim: 4,
        ahre_layers: 2,
        mlp_hidden: 4,
        modes,
    };
    let model =
        Model::init(&config, &embedding_for(&config, 20, seed), seed).map_err(|e| e.to_string())?;
    let batch = pad_batch(&[toy_dialogue()]);
    let leaves = model.trainable_leaf_tensors();
    let report = check_gradients(&leaves, 1e-5, 1e-4, |tape, refs| {
        let graph = model.wire_with_leaves(tape, refs)?;
        batch_loss(tape, &graph, &model.config, &batch)
    })
    .map_err(|e| format!("pipeline harness error: {e}"))?;
    if report.passed() {
        Ok(())
    } else {
        let worst = &report.failures[0];
        Err(format!(
            "{label} pipeline rel err {} at {}[{}]",
            worst.rel_err, worst.leaf, worst.index
        ))
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let outcome = (|| {
        let trials = primitive_sweep()?;
        ensure(trials >= 100, format!("only {trials} primitive trials ran"))?;
        full_pipeline_fd("default", ModeFlags::default(), 31)?;
        full_pipeline_fd(
            "trainable-embeddings",
            ModeFlags {
                trainable_embeddings: true,
                ..ModeFlags::default()
            },
            32,
        )?;
        full_pipeline_fd(
            "legacy-pooling",
            ModeFlags {
                legacy_pooling: true,
                ..ModeFlags::default()
            },
            33,
        )?;
        Ok(())
    })();
    report(1, "gradient correctness", outcome);
}

// ---- criterion 2: metric oracle equivalence ----

fn brute_rank(scores: &[f64]) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if scores[remaining[i]]
                .total_cmp(&scores[remaining[best]])
                .is_gt()
            {
                best = i;
            }
        }
        out.push(remaining.remove(best));
    }
    out
}

#[test]
fn criterion_2_metric_oracle() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for matrix in 0..1000 {
            let n = rng.gen_range(2..=10);
            let dialogues = rng.gen_range(3..=50);
            let mut ranked = Vec::new();
            let mut brute_gold = Vec::new();
            for d in 0..dialogues {
                // a quarter of the rows contain exact ties
                let scores: Vec<f64> = if d % 4 == 0 {
                    (0..n).map(|_| rng.gen_range(0..4) as f64 * 0.5).collect()
                } else {
                    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
                };
                let label = rng.gen_range(0..n);
                let expected = brute_rank(&scores);
                ensure(
                    rank_candidates(&scores) == expected,
                    format!("matrix {matrix} row {d}: order mismatch"),
                )?;
                let gold = expected.iter().position(|&i| i == label).unwrap() + 1;
                ranked.push(rank_dialogue(
                    &format!("{matrix}-{d}"),
                    &scores,
                    Some(label),
                ));
                ensure(
                    ranked[d].gold_rank == Some(gold),
                    format!("matrix {matrix} row {d}: gold rank mismatch"),
                )?;
                brute_gold.push(gold);
            }
            for k in 1..=n {
                let ours = recall_at_k(&ranked, k).map_err(|e| e.to_string())?;
                let brute =
                    brute_gold.iter().filter(|&&r| r <= k).count() as f64 / brute_gold.len() as f64;
                ensure(
                    ours == brute,
                    format!("matrix {matrix} k {k}: recall {ours} vs {brute}"),
                )?;
            }
            let ours = mrr(&ranked).map_err(|e| e.to_string())?;
            let brute =
                brute_gold.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / brute_gold.len() as f64;
            ensure(
                ours == brute,
                format!("matrix {matrix}: mrr {ours} vs {brute}"),
            )?;
        }

        let spot: Vec<RankedDialogue> = [1usize, 2, 4]
            .iter()
            .enumerate()
            .map(|(i, &r)| RankedDialogue {
                example_id: format!("spot{i}"),
                order: vec![],
                gold_rank: Some(r),
            })
            .collect();
        let value = mrr(&spot).map_err(|e| e.to_string())?;
        ensure(
            (value - 0.583333).abs() < 1e-6 && (value - 7.0 / 12.0).abs() < 1e-9,
            format!("spot mrr {value}"),
        )
    })();
    report(2, "metric oracle equivalence", outcome);
}

// ---- criterion 3: overfit memorization ----

#[test]
fn criterion_3_overfit_memorization() {
    let outcome = (|| {
        let started = std::time::Instant::now();
        let config = ModelConfig {
            general_dim: 4,
            task_dim: 4,
            hidden_dim: 8,
            ahre_layers: 2,
            mlp_hidden: 16,
            modes: ModeFlags::default(),
        };
        let set = memorization_set(8, 4);
        let model = Model::init(&config, &embedding_for(&config, max_token(&set) + 1, 5), 11)
            .map_err(|e| e.to_string())?;
        let train_config = TrainConfig {
            max_steps: 500,
            eval_every: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let outcome =
            train(model, &set, &set, &train_config, None, |_| {}).map_err(|e| e.to_string())?;

        let solved = outcome
            .log
            .iter()
            .find(|r| r.step > 0 && r.dev.recall_at.get(&1) == Some(&1.0) && r.train_loss <= 0.05);
        let best_r1 = outcome
            .log
            .iter()
            .filter_map(|r| r.dev.recall_at.get(&1))
            .cloned()
            .fold(0.0, f64::max);
        let min_loss = outcome
            .log
            .iter()
            .skip(1)
            .map(|r| r.train_loss)
            .fold(f64::INFINITY, f64::min);
        ensure(
            solved.is_some(),
            format!(
                "not memorized within 500 steps (best R@1 {best_r1}, min batch loss {min_loss})"
            ),
        )?;
        ensure(
            started.elapsed().as_secs() < 300,
            format!("took {:?}", started.elapsed()),
        )
    })();
    report(3, "overfit memorization", outcome);
}

// ---- criterion 4: ablation consistency ----

#[test]
fn criterion_4_ablation_consistency() {
    let outcome = (|| {
        let base = toy_config();
        let set = vec![toy_dialogue()];
        let batch = pad_batch(&set);
        let ablations = [
            ModeFlags {
                modification: false,
                ..ModeFlags::default()
            },
            ModeFlags {
                single_layer_encoder: true,
                ..ModeFlags::default()
            },
            ModeFlags {
                legacy_pooling: true,
                ..ModeFlags::default()
            },
            ModeFlags {
                trainable_embeddings: true,
                ..ModeFlags::default()
            },
        ];
        for (i, modes) in ablations.into_iter().enumerate() {
            let config = ModelConfig {
                modes,
                ..base.clone()
            };
            let model = Model::init(&config, &embedding_for(&config, 20, 8), 21)
                .map_err(|e| e.to_string())?;
            let scores = model.score_batch(&batch).map_err(|e| e.to_string())?;
            ensure(
                scores.iter().flatten().all(|s| s.is_finite()),
                format!("ablation {i} produced non-finite scores"),
            )?;
            // one optimization step must also run in every mode
            let train_config = TrainConfig {
                max_steps: 1,
                eval_every: 1,
                ..TrainConfig::default()
            };
            train(model, &set, &set, &train_config, None, |_| {})
                .map_err(|e| format!("ablation {i} training: {e}"))?;
        }

        // modification off must equal modification on with w pinned at zero
        let on = Model::init(&base, &embedding_for(&base, 20, 8), 21).map_err(|e| e.to_string())?;
        let mut pinned = on.clone();
        pinned.params_mut().get_mut("mod.w").unwrap().value = Tensor::zeros(vec![1, 1]);
        let mut off = pinned.clone();
        off.config.modes.modification = false;
        let with = pinned.score_batch(&batch).map_err(|e| e.to_string())?;
        let without = off.score_batch(&batch).map_err(|e| e.to_string())?;
        for (a, b) in with.iter().flatten().zip(without.iter().flatten()) {
            ensure(
                (a - b).abs() <= 1e-6,
                format!("w = 0 degeneracy violated: {a} vs {b}"),
            )?;
        }
        Ok(())
    })();
    report(4, "ablation consistency", outcome);
}

// ---- criterion 5: layer-weight properties ----

#[test]
fn criterion_5_layer_weight_properties() {
    let outcome = (|| {
        let config = toy_config();
        let set = memorization_set(4, 3);
        let model = Model::init(&config, &embedding_for(&config, max_token(&set) + 1, 3), 13)
            .map_err(|e| e.to_string())?;
        let train_config = TrainConfig {
            max_steps: 30,
            eval_every: 30,
            ..TrainConfig::default()
        };
        let outcome =
            train(model, &set, &set, &train_config, None, |_| {}).map_err(|e| e.to_string())?;
        let weights = &outcome.log.last().unwrap().ahre_layer_weights;
        ensure(
            weights.len() == config.ahre_layers,
            format!(
                "{} weights for {} layers",
                weights.len(),
                config.ahre_layers
            ),
        )?;
        ensure(
            (weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6,
            format!("weights sum {}", weights.iter().sum::<f64>()),
        )?;
        for &w in weights {
            ensure(w > 0.0 && w < 1.0, format!("weight {w} outside (0,1)"))?;
        }

        // single layer: the weighted mix must be bit-identical to the plain
        // BiLSTM output
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let d = 3usize;
        let seq = tape.constant(random_tensor(&mut rng, 5, 4, -1.0, 1.0));
        let dir = |tape: &mut Tape<f64>, rng: &mut ChaCha8Rng| LstmDirRefs {
            w_x: tape.constant(random_tensor(rng, 4, 4 * d, -0.4, 0.4)),
            w_h: tape.constant(random_tensor(rng, d, 4 * d, -0.4, 0.4)),
            b: tape.constant(random_tensor(rng, 1, 4 * d, -0.1, 0.1)),
        };
        let layer = BiLstmRefs {
            forward: dir(&mut tape, &mut rng),
            backward: dir(&mut tape, &mut rng),
            hidden: d,
        };
        let mask = [true, true, true, true, false];
        let plain = bilstm_forward(&mut tape, seq, &mask, &layer).map_err(|e| e.to_string())?;
        let logits = tape.constant(Tensor::new(vec![1, 1], vec![0.37]).unwrap());
        let stack = StackRefs {
            layers: vec![layer],
            layer_logits: logits,
        };
        let mixed = stack_encode(&mut tape, seq, &mask, &stack).map_err(|e| e.to_string())?;
        ensure(
            tape.value(plain).data() == tape.value(mixed).data(),
            "single-layer stack output differs from the plain BiLSTM".to_string(),
        )
    })();
    report(5, "layer-weight properties", outcome);
}

// ---- criterion 6: masking soundness ----

#[test]
fn criterion_6_masking_soundness() {
    let outcome = (|| {
        let config = toy_config();
        let model =
            Model::init(&config, &embedding_for(&config, 20, 4), 17).map_err(|e| e.to_string())?;
        let set = vec![
            toy_dialogue(),
            PreparedDialogue {
                example_id: "short".to_string(),
                context: vec![4, 9],
                last_span: (0, 2),
                candidates: vec![vec![5], vec![6, 7, 8]],
                label: Some(1),
            },
        ];
        let baseline = model
            .score_batch(&pad_batch(&set))
            .map_err(|e| e.to_string())?;
        for pads in 1..=8usize {
            let mut padded_batch = pad_batch(&set);
            for i in 0..padded_batch.example_ids.len() {
                padded_batch.context_ids[i].extend(std::iter::repeat_n(0, pads));
                padded_batch.context_mask[i].extend(std::iter::repeat_n(false, pads));
                for j in 0..padded_batch.candidate_ids[i].len() {
                    padded_batch.candidate_ids[i][j].extend(std::iter::repeat_n(0, pads));
                    padded_batch.candidate_masks[i][j].extend(std::iter::repeat_n(false, pads));
                }
            }
            let scores = model
                .score_batch(&padded_batch)
                .map_err(|e| e.to_string())?;
            for (row, (a_row, b_row)) in baseline.iter().zip(&scores).enumerate() {
                for (a, b) in a_row.iter().zip(b_row) {
                    ensure(
                        (a - b).abs() <= 1e-6,
                        format!("{pads} pads moved dialogue {row} score {a} to {b}"),
                    )?;
                }
            }
        }
        Ok(())
    })();
    report(6, "masking soundness", outcome);
}

// ---- criterion 7: ensemble contract ----

#[test]
fn criterion_7_ensemble_contract() {
    let outcome = (|| {
        let config = toy_config();
        let model =
            Model::init(&config, &embedding_for(&config, 20, 4), 19).map_err(|e| e.to_string())?;
        let batch = pad_batch(&[toy_dialogue()]);
        let probabilities: Vec<Vec<f64>> = model
            .score_batch(&batch)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|row| softmax(&row))
            .collect();
        for m in [2usize, 3, 5] {
            let copies: Vec<_> = (0..m).map(|_| probabilities.clone()).collect();
            let averaged = ensemble_average(&copies).map_err(|e| e.to_string())?;
            for (row, (a_row, b_row)) in averaged.iter().zip(&probabilities).enumerate() {
                let total: f64 = a_row.iter().sum();
                ensure(
                    (total - 1.0).abs() <= 1e-6,
                    format!("ensemble of {m}: row {row} sums to {total}"),
                )?;
                for (a, b) in a_row.iter().zip(b_row) {
                    ensure(
                        (a - b).abs() <= 1e-6,
                        format!("ensemble of {m} changed a probability: {a} vs {b}"),
                    )?;
                }
            }
        }
        Ok(())
    })();
    report(7, "ensemble contract", outcome);
}

// ---- criterion 8: checkpoint round trip ----

#[test]
fn criterion_8_checkpoint_round_trip() {
    let outcome = (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("model.ckpt");
        let config = toy_config();
        let model =
            Model::init(&config, &embedding_for(&config, 20, 4), 23).map_err(|e| e.to_string())?;
        save_checkpoint(&model, 7, Some(0.5), &path).map_err(|e| e.to_string())?;
        let restored = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let batch = pad_batch(&[toy_dialogue()]);
        let before = model.score_batch(&batch).map_err(|e| e.to_string())?;
        let after = restored
            .model
            .score_batch(&batch)
            .map_err(|e| e.to_string())?;
        ensure(
            before == after,
            "restored scores differ bit-for-bit".to_string(),
        )?;

        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let corruptions: Vec<(&str, Vec<u8>)> = vec![
            ("truncated", bytes[..bytes.len() / 2].to_vec()),
            ("bad magic", {
                let mut b = bytes.clone();
                b[0] = b'X';
                b
            }),
            ("garbled manifest", {
                let mut b = bytes.clone();
                b[9] = 0xFF;
                b
            }),
        ];
        for (what, corrupt) in corruptions {
            std::fs::write(&path, &corrupt).map_err(|e| e.to_string())?;
            match load_checkpoint(&path) {
                Ok(_) => return Err(format!("{what} checkpoint was accepted")),
                Err(e) => {
                    let code = e.category().exit_code();
                    ensure(
                        code == 2,
                        format!("{what} checkpoint mapped to exit code {code}, expected 2"),
                    )?;
                }
            }
        }
        Ok(())
    })();
    report(8, "checkpoint round trip", outcome);
}

// ---- criterion 9: recipe fidelity ----

#[test]
fn criterion_9_recipe_fidelity() {
    let outcome = (|| {
        let config = TrainConfig::default();
        ensure(lr_at(0, &config) == 0.001, "lr at step 0".to_string())?;
        for step in [1u64, 4999, 5000, 9999, 10000, 25000, 131072] {
            let expected = 0.001 * 0.96f64.powi((step / 5000) as i32);
            let got = lr_at(step, &config);
            ensure(
                (got - expected).abs() < 1e-15,
                format!("lr at {step}: {got} vs {expected}"),
            )?;
        }
        ensure(
            (lr_at(10000, &config) - 0.0009216).abs() < 1e-12,
            "staircase value at 10000".to_string(),
        )?;

        // frozen embeddings stay byte-identical through training
        let model_config = toy_config();
        let set = memorization_set(4, 3);
        let table = embedding_for(&model_config, max_token(&set) + 1, 6);
        let model = Model::init(&model_config, &table, 27).map_err(|e| e.to_string())?;
        let before: Vec<u8> = model
            .params()
            .get("embedding.table")
            .unwrap()
            .value
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let train_config = TrainConfig {
            max_steps: 12,
            eval_every: 6,
            ..TrainConfig::default()
        };
        let outcome =
            train(model, &set, &set, &train_config, None, |_| {}).map_err(|e| e.to_string())?;
        for which in [&outcome.best, &outcome.last] {
            let after: Vec<u8> = which
                .params()
                .get("embedding.table")
                .unwrap()
                .value
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            ensure(
                before == after,
                "embedding bytes changed under the fixed-embedding contract".to_string(),
            )?;
        }
        Ok(())
    })();
    report(9, "recipe fidelity", outcome);
}
