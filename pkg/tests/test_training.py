"""Training mechanics: loss values and gradients, the SGD recurrence,
micro-batch accumulation equivalence, batch scheduling determinism,
validation cadence, and stopping."""

import math

import numpy as np
import pytest

from sefer.errors import ConfigError, ContractError, TrainingError
from sefer.nn.network import SEResNet, split_parameter_groups, tiny_config
from sefer.training import (ArrayBatcher, ManifestBatcher, TrainConfig,
                            TrainState, accumulate_gradients, canonical_hash,
                            evaluate_model, load_train_state, run_training,
                            save_train_state, sgd_step,
                            weighted_cross_entropy,
                            weighted_cross_entropy_grad)

# the full-scale weight vector; most frequent class pinned at 1
FULL_WEIGHTS = (1.0, 22.92, 37.5, 50.66, 3.47, 5.79, 13.55)


# ------------------------------------------------------------------- loss

def test_uniform_logits_loss_is_weight_times_ln7():
    logits = np.zeros((1, 7))
    for cls, w in enumerate(FULL_WEIGHTS):
        loss = weighted_cross_entropy(logits, [cls], FULL_WEIGHTS)
        assert loss == pytest.approx(w * math.log(7.0), rel=1e-12)
    # the worked example: Fear under uniform logits
    fear = weighted_cross_entropy(logits, [3], FULL_WEIGHTS)
    assert fear == pytest.approx(98.5798, abs=5e-5)


def test_loss_shift_invariance_and_positivity():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 7))
    y = rng.integers(0, 7, 5)
    w = np.ones(7)
    a = weighted_cross_entropy(logits, y, w)
    b = weighted_cross_entropy(logits + 123.0, y, w)
    assert a == pytest.approx(b, rel=1e-9)
    assert a > 0


def test_loss_is_mean_of_per_sample_terms():
    """Decomposability licenses gradient accumulation: the batch loss equals
    the mean of single-sample losses."""
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((8, 7))
    y = rng.integers(0, 7, 8)
    whole = weighted_cross_entropy(logits, y, FULL_WEIGHTS)
    singles = [weighted_cross_entropy(logits[i:i + 1], y[i:i + 1],
                                      FULL_WEIGHTS) for i in range(8)]
    assert whole == pytest.approx(np.mean(singles), rel=1e-12)


def test_weighting_scales_rare_class_losses():
    logits = np.zeros((1, 7))
    base = weighted_cross_entropy(logits, [0], FULL_WEIGHTS)
    rare = weighted_cross_entropy(logits, [3], FULL_WEIGHTS)
    assert rare == pytest.approx(base * 50.66, rel=1e-12)


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((4, 7))
    y = rng.integers(0, 7, 4)
    _, grad = weighted_cross_entropy_grad(logits, y, FULL_WEIGHTS)
    eps = 1e-6
    for i in range(4):
        for j in range(7):
            up = logits.copy()
            up[i, j] += eps
            down = logits.copy()
            down[i, j] -= eps
            fd = (weighted_cross_entropy(up, y, FULL_WEIGHTS)
                  - weighted_cross_entropy(down, y, FULL_WEIGHTS)) / (2 * eps)
            assert grad[i, j] == pytest.approx(fd, abs=1e-7)


def test_loss_contracts():
    with pytest.raises(ContractError):
        weighted_cross_entropy(np.zeros((2, 5)), [0, 1], np.ones(7))
    with pytest.raises(ContractError):
        weighted_cross_entropy(np.zeros((2, 7)), [0], np.ones(7))
    with pytest.raises(ContractError):
        weighted_cross_entropy(np.full((1, 7), np.nan), [0], np.ones(7))
    with pytest.raises(ContractError):
        weighted_cross_entropy(np.zeros((1, 7)), [7], np.ones(7))


# -------------------------------------------------------------------- SGD

def test_sgd_hand_computed_step():
    theta = np.array([1.0])
    params = {"w": theta}
    grads = {"w": np.array([0.1])}
    buffers = {}
    sgd_step(params, grads, buffers, {"w": 0.001}, momentum=0.9,
             weight_decay=0.005)
    # v = 0.9*0 + (0.1 + 0.005*1) = 0.105; theta = 1 - 0.001*0.105
    assert abs(theta[0] - 0.999895) < 1e-12
    assert abs(buffers["w"][0] - 0.105) < 1e-12


def test_sgd_second_step_uses_velocity():
    theta = np.array([1.0])
    params = {"w": theta}
    buffers = {}
    lr = {"w": 0.001}
    sgd_step(params, {"w": np.array([0.1])}, buffers, lr, 0.9, 0.005)
    t1 = theta[0]
    sgd_step(params, {"w": np.array([0.1])}, buffers, lr, 0.9, 0.005)
    # v2 = 0.9*0.105 + (0.1 + 0.005*t1)
    v2 = 0.9 * 0.105 + (0.1 + 0.005 * t1)
    assert abs(theta[0] - (t1 - 0.001 * v2)) < 1e-15


def test_sgd_zero_lr_keeps_parameters():
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(5)
    before = theta.copy()
    sgd_step({"w": theta}, {"w": rng.standard_normal(5)}, {}, {"w": 0.0},
             0.9, 0.005)
    np.testing.assert_array_equal(theta, before)


def test_sgd_zero_everything_is_identity():
    theta = np.array([2.0, -3.0])
    sgd_step({"w": theta}, {"w": np.zeros(2)}, {}, {"w": 0.5}, 0.0, 0.0)
    np.testing.assert_array_equal(theta, [2.0, -3.0])


def test_sgd_rejects_non_finite_gradient():
    with pytest.raises(TrainingError, match="stem.weight"):
        sgd_step({"stem.weight": np.ones(2)},
                 {"stem.weight": np.array([1.0, np.inf])}, {},
                 {"stem.weight": 0.1}, 0.9, 0.0)


def test_weighted_loss_sum_invariant():
    """sum_c count_c * w_c is the same for every class under inverse
    frequency weights: count_c * max/count_c = max."""
    counts = np.array([618270, 26975, 16487, 12204, 178176, 106782, 45629])
    weights = counts.max() / counts
    products = counts * weights
    np.testing.assert_allclose(products, counts.max(), rtol=1e-12)


# ----------------------------------------------------------- accumulation

def float64_net(seed):
    return SEResNet(tiny_config(dtype="float64", bn_frozen=True), seed=seed)


@pytest.mark.parametrize("seed", range(3))
def test_accumulation_matches_full_batch(seed):
    """batch 8 split K=4 vs one full pass: same loss, same gradients."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 3, 32, 32))
    y = rng.integers(0, 7, 8)
    w = np.asarray(FULL_WEIGHTS)

    net_a = float64_net(seed)
    loss_a = accumulate_gradients(net_a, y, x, w, micro_batches=1)
    grads_a = {k: v.copy() for k, v in net_a.named_grads().items()}

    net_b = float64_net(seed)
    loss_b = accumulate_gradients(net_b, y, x, w, micro_batches=4)
    grads_b = net_b.named_grads()

    assert loss_b == pytest.approx(loss_a, rel=1e-12)
    for name, ga in grads_a.items():
        gb = grads_b[name]
        denom = max(np.abs(ga).max(), 1e-12)
        assert np.abs(gb - ga).max() / denom < 1e-9, name


def test_accumulation_batch_must_divide():
    net = float64_net(0)
    x = np.zeros((6, 3, 32, 32))
    y = np.zeros(6, dtype=np.int64)
    with pytest.raises(ConfigError):
        accumulate_gradients(net, y, x, np.ones(7), micro_batches=4)


# -------------------------------------------------------------- scheduling

class CountingPipeline:
    """Stands in for the augmentation pipeline; records stream indices."""

    def __init__(self):
        self.indices = []

    def __call__(self, img, index):
        self.indices.append(index)
        return np.full((3, 4, 4), float(index), dtype=np.float32)


def test_batcher_is_arithmetic_in_iteration(synth_dataset):
    root, train_manifest, _ = synth_dataset
    from sefer.augment import JitterConfig, TrainPipeline
    pipe = TrainPipeline(JitterConfig(), 16, seed=5)
    a = ManifestBatcher(train_manifest, pipe, 32, seed=5, root=root)
    b = ManifestBatcher(train_manifest, pipe, 32, seed=5, root=root)
    xa, ya = a.batch(7)
    xb, yb = b.batch(7)  # fresh batcher, straight to iteration 7
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(ya, yb)
    # iterations per epoch: drop-last
    assert a.iterations_per_epoch == len(train_manifest) // 32


def test_batcher_epoch_permutations_differ(synth_dataset):
    root, train_manifest, _ = synth_dataset
    from sefer.augment import JitterConfig, TrainPipeline
    pipe = TrainPipeline(JitterConfig(0, 0, 0, 0, 0.0), 16, seed=0)
    bat = ManifestBatcher(train_manifest, pipe, 32, seed=0, root=root)
    ipe = bat.iterations_per_epoch
    _, y_epoch0 = bat.batch(1)
    _, y_epoch1 = bat.batch(1 + ipe)
    assert not np.array_equal(y_epoch0, y_epoch1)


def test_batcher_epoch_is_a_permutation(synth_dataset):
    root, train_manifest, _ = synth_dataset
    from sefer.augment import JitterConfig, TrainPipeline
    pipe = TrainPipeline(JitterConfig(0, 0, 0, 0, 0.0), 16, seed=1)
    bat = ManifestBatcher(train_manifest, pipe, 32, seed=1, root=root)
    perm = bat._permutation(0)
    assert sorted(perm.tolist()) == list(range(len(train_manifest)))
    assert not np.array_equal(perm, bat._permutation(1))


def test_batcher_stream_indices_unique_per_presentation(synth_dataset):
    """The augmentation stream index of item j in iteration t must be
    (t-1)*B + j so no presentation reuses another's random draws."""
    root, train_manifest, _ = synth_dataset
    pipe = CountingPipeline()
    bat = ManifestBatcher(train_manifest, pipe, 32, seed=0, root=root)
    bat.batch(1)
    bat.batch(3)
    assert pipe.indices[:32] == list(range(32))
    assert pipe.indices[32:] == list(range(64, 96))


def test_batcher_worker_count_does_not_change_batches(synth_dataset):
    root, train_manifest, _ = synth_dataset
    from sefer.augment import JitterConfig, TrainPipeline
    pipe = TrainPipeline(JitterConfig(), 16, seed=2)
    serial = ManifestBatcher(train_manifest, pipe, 32, seed=2, root=root,
                             workers=1)
    threaded = ManifestBatcher(train_manifest, pipe, 32, seed=2, root=root,
                               workers=4)
    for t in (1, 5, 11):
        xs, ys = serial.batch(t)
        xt, yt = threaded.batch(t)
        np.testing.assert_array_equal(xs, xt)
        np.testing.assert_array_equal(ys, yt)


def test_batcher_rejects_oversized_batch(synth_dataset):
    root, train_manifest, _ = synth_dataset
    from sefer.augment import JitterConfig, TrainPipeline
    pipe = TrainPipeline(JitterConfig(), 16, seed=0)
    with pytest.raises(ConfigError):
        ManifestBatcher(train_manifest, pipe, len(train_manifest) + 1,
                        seed=0, root=root)


# ------------------------------------------------------------------ config

def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=10, micro_batches=3).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_head=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(patience=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"batch_sz": 8})


def test_canonical_hash_stable_and_order_free():
    a = canonical_hash({"b": 1, "a": [1, 2]})
    b = canonical_hash({"a": [1, 2], "b": 1})
    assert a == b and len(a) == 64
    assert canonical_hash({"a": 1}) != canonical_hash({"a": 2})


# ------------------------------------------------------ loop integration

def lockstep_sources(seed=0, n=24, size=8):
    """Tiny in-memory problem: inputs whose class is linearly decodable."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 7
    x = rng.standard_normal((n, 3, size, size)).astype(np.float32) * 0.1
    for i, cls in enumerate(y):
        x[i, 0, :, :] += cls * 0.5
    val = [(x, y, None)]
    return ArrayBatcher(x, y), val


def small_net(seed=0, size=8, bn_frozen=False):
    return SEResNet(tiny_config(input_size=size, bn_frozen=bn_frozen),
                    seed=seed)


def test_validation_cadence_and_log():
    batcher, val = lockstep_sources()
    model = small_net()
    config = TrainConfig(batch_size=24, micro_batches=1, lr_head=0.01,
                         lr_backbone=0.01, weight_decay=0.0001,
                         validate_every=5, patience=100, max_iterations=20,
                         seed=0)
    validated = []
    best = run_training(model, config, batcher, val, np.ones(7),
                        on_validation=lambda e, r: validated.append(
                            e["iteration"]))
    assert validated == [5, 10, 15, 20]
    assert best is not None
    assert best.iteration in validated


def test_validate_every_must_fit_budget():
    batcher, val = lockstep_sources()
    config = TrainConfig(batch_size=24, micro_batches=1, lr_head=0.01,
                         lr_backbone=0.01, validate_every=50,
                         max_iterations=20)
    with pytest.raises(ConfigError):
        run_training(small_net(), config, batcher, val, np.ones(7))


def test_stagnating_run_stops_at_patience():
    """Microscopic learning rates freeze the predictions (frozen
    normalization stats keep eval outputs bit-stable), so the criterion
    never improves after the first validation; the loop must stop exactly
    patience validations later."""
    batcher, val = lockstep_sources()
    model = small_net(bn_frozen=True)
    config = TrainConfig(batch_size=24, micro_batches=1, lr_head=1e-13,
                         lr_backbone=1e-13, weight_decay=1e-13,
                         validate_every=5, patience=2, max_iterations=1000,
                         seed=0)
    log = []
    best = run_training(model, config, batcher, val, np.ones(7),
                        on_validation=lambda e, r: log.append(
                            (e["iteration"], e["criterion"], e["is_best"])))
    assert [it for it, _, _ in log] == [5, 10, 15]
    assert [b for _, _, b in log] == [True, False, False]
    assert best.iteration == 5
    # best criterion trace is non-decreasing by construction
    crits = [c for _, c, _ in log]
    assert max(crits) == crits[0]


def test_training_improves_and_best_is_monotone():
    batcher, val = lockstep_sources()
    model = small_net()
    config = TrainConfig(batch_size=24, micro_batches=2, lr_head=0.02,
                         lr_backbone=0.02, weight_decay=0.0001,
                         validate_every=3, patience=50, max_iterations=60,
                         seed=0)
    bests = []
    state = TrainState()
    run_training(model, config, batcher, val, np.ones(7),
                 initial_state=state,
                 on_validation=lambda e, r: bests.append(
                     (e["criterion"], e["is_best"])))
    running = float("-inf")
    for criterion, is_best in bests:
        assert is_best == (criterion > running)
        running = max(running, criterion)
    assert state.best_criterion == running
    assert running > 0.5


def test_rerun_same_seed_identical_trace(synth_dataset):
    from conftest import smoke_train_setup
    root, train_manifest, val_manifest = synth_dataset
    traces = []
    for _ in range(2):
        model, config, batcher, val_source, weights = smoke_train_setup(
            root, train_manifest, val_manifest, seed=3, max_iterations=12)
        losses = []
        run_training(model, config, batcher, val_source, weights,
                     on_iteration=lambda t, loss: losses.append(loss))
        traces.append(losses)
    assert traces[0] == traces[1]
    assert len(traces[0]) == 12


def test_state_roundtrip(tmp_path):
    state = TrainState(iteration=17, best_criterion=0.5, best_iteration=10,
                       bad_validations=2,
                       momentum_buffers={"a.w": np.arange(3.0),
                                         "b.w": np.ones((2, 2))})
    save_train_state(state, tmp_path / "st")
    back = load_train_state(tmp_path / "st")
    assert back.iteration == 17
    assert back.best_criterion == 0.5
    assert back.best_iteration == 10
    assert back.bad_validations == 2
    assert sorted(back.momentum_buffers) == ["a.w", "b.w"]
    np.testing.assert_array_equal(back.momentum_buffers["a.w"],
                                  np.arange(3.0))


def test_resume_matches_uninterrupted(tmp_path, synth_dataset):
    from conftest import smoke_train_setup
    root, train_manifest, val_manifest = synth_dataset
    from sefer.nn.checkpoint import load_checkpoint, load_state_dict

    # uninterrupted 18 iterations
    model, config, batcher, val_source, weights = smoke_train_setup(
        root, train_manifest, val_manifest, seed=4, max_iterations=18)
    full_losses = []
    run_training(model, config, batcher, val_source, weights,
                 out_dir=tmp_path / "full",
                 on_iteration=lambda t, l: full_losses.append((t, l)))

    # interrupted at 9, then resumed to 18
    model2, config2, batcher2, val2, weights2 = smoke_train_setup(
        root, train_manifest, val_manifest, seed=4, max_iterations=9)
    part_losses = []
    run_training(model2, config2, batcher2, val2, weights2,
                 out_dir=tmp_path / "part",
                 on_iteration=lambda t, l: part_losses.append((t, l)))
    state, _ = load_checkpoint(tmp_path / "part" / "checkpoints" / "last")
    model3, config3, batcher3, val3, weights3 = smoke_train_setup(
        root, train_manifest, val_manifest, seed=4, max_iterations=18)
    load_state_dict(model3, state, strict=True)
    resumed = load_train_state(tmp_path / "part" / "checkpoints" /
                               "last_state")
    run_training(model3, config3, batcher3, val3, weights3,
                 initial_state=resumed,
                 on_iteration=lambda t, l: part_losses.append((t, l)))

    assert [t for t, _ in part_losses] == [t for t, _ in full_losses]
    for (t1, l1), (t2, l2) in zip(part_losses, full_losses):
        assert l1 == pytest.approx(l2, rel=1e-6), (t1, t2)


def test_evaluate_model_counts_everything(synth_dataset):
    root, _, val_manifest = synth_dataset
    from sefer.augment import EvalPipeline
    from sefer.training import EvalSource
    source = EvalSource(val_manifest, EvalPipeline(32), 32, root=root)
    model = SEResNet(tiny_config(), seed=0)
    report, matrix, records = evaluate_model(model, source)
    assert matrix.total == len(val_manifest)
    assert len(records) == len(val_manifest)
    assert sum(report.support) == len(val_manifest)
