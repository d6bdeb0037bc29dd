"""Acceptance gate: ten end-to-end checks covering the published numbers,
the optimizer arithmetic, gradient correctness, data handling, and the
training loop's checkpoint/stopping behavior. Each test prints one PASS or
FAIL line in the terminal summary (see conftest)."""

import math
import time

import numpy as np
import pytest

from conftest import smoke_train_setup
from test_layers import fd_check
from test_metrics import brute_force_f1
from test_training import FULL_WEIGHTS, float64_net, lockstep_sources, small_net

from sefer.dataset import (ANNOTATION_HEADER, ClassDistribution,
                           DatasetManifest, Sample, compute_class_weights,
                           parse_affwild2_annotations, read_manifest,
                           write_manifest)
from sefer.metrics import (ConfusionMatrix, combine_scores, per_class_f1,
                           round2)
from sefer.nn.layers import Bottleneck, SEBlock
from sefer.training import (TrainConfig, accumulate_gradients, run_training,
                            sgd_step, weighted_cross_entropy,
                            weighted_cross_entropy_grad)


def test_a01_expression_criterion_reproduces_published_totals():
    """0.67 * macro F1 + 0.33 * accuracy applied to the published validation
    scores gives the published total, and the per-class F1 row averages to
    the published macro F1."""
    total = combine_scores(0.33, 0.63)
    assert total == pytest.approx(0.4290, abs=1e-12)
    assert round2(total) == 0.43

    per_class = (0.75, 0.09, 0.02, 0.22, 0.58, 0.27, 0.41)
    macro = sum(per_class) / 7
    assert abs(macro - 0.3343) < 1e-4
    assert round2(macro) == 0.33


def test_a02_inverse_frequency_weights():
    """Worked example comes out exact, uniform data gets unit weights, and
    the minimum weight is always 1.0 on the most frequent class."""
    dist = ClassDistribution.from_counts((1000, 250, 100, 40, 500, 200, 125))
    assert compute_class_weights(dist).weights == (1.0, 4.0, 10.0, 25.0,
                                                   2.0, 5.0, 8.0)

    uniform = ClassDistribution.from_counts((300,) * 7)
    assert compute_class_weights(uniform).weights == (1.0,) * 7

    rng = np.random.default_rng(42)
    for _ in range(1000):
        counts = rng.integers(1, 100000, size=7)
        w = compute_class_weights(ClassDistribution.from_counts(counts)).weights
        assert min(w) == 1.0
        assert w[int(np.argmax(counts))] == 1.0


def test_a03_gradient_accumulation_equivalence():
    """Splitting a batch of 8 into 4 micro-batches reproduces the full-batch
    loss and every parameter gradient to 1e-9 relative, across 20 seeds."""
    start = time.monotonic()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((8, 3, 32, 32))
        y = rng.integers(0, 7, 8)
        w = np.asarray(FULL_WEIGHTS)

        net_a = float64_net(seed)
        loss_a = accumulate_gradients(net_a, y, x, w, micro_batches=1)
        grads_a = {k: v.copy() for k, v in net_a.named_grads().items()}

        net_b = float64_net(seed)
        loss_b = accumulate_gradients(net_b, y, x, w, micro_batches=4)

        assert abs(loss_b - loss_a) <= 1e-9 * max(1.0, abs(loss_a)), seed
        for name, ga in grads_a.items():
            gb = net_b.named_grads()[name]
            denom = max(np.abs(ga).max(), 1.0)
            assert np.abs(gb - ga).max() / denom <= 1e-9, (seed, name)
    assert time.monotonic() - start < 30.0


def test_a04_finite_difference_gradients():
    """Analytic backward of the channel-attention block, the residual
    bottleneck block, and the weighted cross-entropy agrees with central
    differences (step 1e-5) to 1e-4 relative, over 10 seeds each."""
    start = time.monotonic()
    for seed in range(10):
        rng = np.random.default_rng(seed)
        se = SEBlock(8, 4, rng=rng, dtype=np.float64)
        x = np.random.default_rng(seed + 100).standard_normal((2, 8, 5, 5))
        fd_check(se, x, step=1e-5, rtol=1e-4, seed=seed)

    for seed in range(10):
        rng = np.random.default_rng(seed)
        block = Bottleneck(8, 16, 2, reduction=4, rng=rng, dtype=np.float64)
        x = np.random.default_rng(seed + 200).standard_normal((2, 8, 6, 6))
        fd_check(block, x, train=True, step=1e-5, rtol=1e-4, seed=seed)

    w = np.asarray(FULL_WEIGHTS)
    step = 1e-5
    for seed in range(10):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((4, 7))
        y = rng.integers(0, 7, 4)
        _, grad = weighted_cross_entropy_grad(logits, y, w)
        for idx in range(logits.size):
            orig = logits.flat[idx]
            logits.flat[idx] = orig + step
            up = weighted_cross_entropy(logits, y, w)
            logits.flat[idx] = orig - step
            down = weighted_cross_entropy(logits, y, w)
            logits.flat[idx] = orig
            fd = (up - down) / (2 * step)
            got = grad.flat[idx]
            assert abs(fd - got) <= 1e-4 * max(1.0, abs(fd), abs(got)), \
                (seed, idx)
    assert time.monotonic() - start < 120.0


def test_a05_uniform_logits_cost_is_weight_times_log7():
    """With all logits equal, the per-sample loss is exactly the class
    weight times ln(7); the rarest class lands on the published 98.5798."""
    w = np.asarray(FULL_WEIGHTS)
    logits = np.zeros((1, 7))
    for c in range(7):
        loss = weighted_cross_entropy(logits, np.array([c]), w)
        expect = FULL_WEIGHTS[c] * math.log(7)
        assert loss == pytest.approx(expect, rel=1e-12)
    fear = weighted_cross_entropy(logits, np.array([3]), w)
    assert fear == pytest.approx(98.5798, abs=5e-5)


def test_a06_sgd_single_step_hand_value():
    """One momentum step at g=0.1, decay 0.005, lr 0.001 moves a unit
    parameter to exactly 0.999895."""
    params = {"p": np.array([1.0])}
    grads = {"p": np.array([0.1])}
    buffers = {}
    sgd_step(params, grads, buffers, {"p": 0.001}, momentum=0.9,
             weight_decay=0.005)
    assert params["p"][0] == pytest.approx(0.999895, abs=1e-12)
    assert buffers["p"][0] == pytest.approx(0.105, abs=1e-12)


def test_a07_end_to_end_smoke_train(synth_dataset):
    """Synthetic 7x40 corpus, tiny network: best validation criterion
    reaches 0.90 within 500 iterations on CPU, and a same-seed rerun
    reproduces the loss trace bit for bit."""
    root, train_manifest, val_manifest = synth_dataset
    start = time.monotonic()
    traces = []
    bests = []
    for _ in range(2):
        model, config, batcher, val_source, weights = smoke_train_setup(
            root, train_manifest, val_manifest, seed=0)
        losses = []
        best = run_training(model, config, batcher, val_source, weights,
                            on_iteration=lambda t, loss: losses.append(loss))
        traces.append(losses)
        bests.append(best)
    assert bests[0] is not None
    assert bests[0].expression_criterion >= 0.90
    assert bests[0].iteration <= 500
    assert traces[0] == traces[1]
    assert time.monotonic() - start < 300.0


def test_a08_f1_from_confusion_matrix_matches_per_sample_tally():
    """On 100 random prediction sets the confusion-matrix F1 equals the
    per-sample tally exactly, and scoring two halves separately then
    merging gives the same matrix as scoring everything at once."""
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 201))
        true = rng.integers(0, 7, n)
        pred = rng.integers(0, 7, n)

        matrix = ConfusionMatrix.from_pairs(true, pred)
        f1 = per_class_f1(matrix)
        for c in range(7):
            assert f1[c] == brute_force_f1(true, pred, c), c

        cut = int(rng.integers(0, n + 1))
        merged = (ConfusionMatrix.from_pairs(true[:cut], pred[:cut])
                  + ConfusionMatrix.from_pairs(true[cut:], pred[cut:]))
        assert merged == matrix


def test_a09_annotation_parsing_and_manifest_roundtrip(tmp_path):
    """A per-frame annotation file with -1 gaps parses to the exact sample
    list, and 100 random manifests survive a CSV write/read round trip
    unchanged."""
    ann = tmp_path / "video1.txt"
    ann.write_text(",".join(ANNOTATION_HEADER) + "\n0\n4\n-1\n6\n",
                   encoding="utf-8")
    samples, skipped = parse_affwild2_annotations(
        ann, video_id="video1", frames_dir=tmp_path / "frames")
    frames = tmp_path / "frames" / "video1"
    assert list(samples) == [
        Sample(str(frames / "00000.jpg"), 0, "affwild2", 0),
        Sample(str(frames / "00001.jpg"), 4, "affwild2", 1),
        Sample(str(frames / "00003.jpg"), 6, "affwild2", 3),
    ]
    assert skipped == 1

    rng = np.random.default_rng(11)
    decorations = ["", " ", ",", "'", '"', "é", "-", ";"]
    for i in range(100):
        n = int(rng.integers(1, 31))
        built = []
        for j in range(n):
            source = ("affwild2", "expw", "synthetic")[int(rng.integers(3))]
            deco = decorations[int(rng.integers(len(decorations)))]
            path = f"dir{deco}/img {i}_{j}{deco}.png"
            frame = int(rng.integers(0, 9999)) if source == "affwild2" else None
            built.append(Sample(path, int(rng.integers(0, 7)), source, frame))
        manifest = DatasetManifest(samples=tuple(built), split_name="train")
        target = tmp_path / f"m{i}.csv"
        write_manifest(manifest, target)
        assert read_manifest(target, "train") == manifest


def test_a10_early_stopping_and_monotone_best():
    """With learning rates too small to move float32 weights the criterion
    never improves, so a validate-every-5, patience-2 run stops exactly two
    validations after its best, and the best score never decreases."""
    batcher, val = lockstep_sources()
    model = small_net(bn_frozen=True)
    config = TrainConfig(batch_size=24, micro_batches=1, lr_head=1e-13,
                         lr_backbone=1e-13, weight_decay=1e-13,
                         validate_every=5, patience=2, max_iterations=10_000,
                         seed=0)
    log = []
    best = run_training(model, config, batcher, val, np.ones(7),
                        on_validation=lambda e, r: log.append(e))
    assert [e["iteration"] for e in log] == [5, 10, 15]
    assert [e["is_best"] for e in log] == [True, False, False]
    assert best.iteration == 5

    running_best = -np.inf
    bests = []
    for e in log:
        running_best = max(running_best, e["criterion"])
        bests.append(running_best)
    assert bests == sorted(bests)
    assert best.expression_criterion == bests[-1]
