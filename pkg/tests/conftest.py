"""Shared fixtures and the acceptance summary hook.

Every test in test_acceptance.py shows up in a final "acceptance criteria"
section with one PASS/FAIL line so the gate can be read at a glance.
"""

import numpy as np
import pytest

try:
    from hypothesis import settings

    settings.register_profile("suite", deadline=None)
    settings.load_profile("suite")
except ImportError:
    pass

from sefer import synth
from sefer.augment import EvalPipeline, JitterConfig, TrainPipeline
from sefer.dataset import compute_class_weights, compute_distribution
from sefer.nn.network import SEResNet, tiny_config
from sefer.training import EvalSource, ManifestBatcher, TrainConfig


SMOKE_TRAIN_PER_CLASS = 40
SMOKE_VAL_PER_CLASS = 12
SMOKE_IMAGE_SIZE = 32


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Deterministic synthetic corpus shared by training and CLI tests:
    (root, train manifest, val manifest) at seed 0 / 1."""
    root = tmp_path_factory.mktemp("synth")
    train = synth.generate_synthetic_dataset(
        root, (SMOKE_TRAIN_PER_CLASS,) * 7, image_size=SMOKE_IMAGE_SIZE,
        seed=0, split_name="train")
    val = synth.generate_synthetic_dataset(
        root, (SMOKE_VAL_PER_CLASS,) * 7, image_size=SMOKE_IMAGE_SIZE,
        seed=1, split_name="val")
    return root, train, val


def smoke_train_setup(root, train_manifest, val_manifest, seed=0,
                      max_iterations=500, **config_overrides):
    """The tiny-network training harness used by smoke and cadence tests."""
    jitter = JitterConfig(brightness=0.0, contrast=0.0, saturation=0.0,
                          hue=0.0, flip_probability=0.5)
    weights = compute_class_weights(compute_distribution(train_manifest))
    fields = dict(batch_size=32, micro_batches=4, momentum=0.9,
                  weight_decay=0.0005, lr_head=0.05, lr_backbone=0.05,
                  validate_every=None, patience=5,
                  max_iterations=max_iterations, seed=seed)
    fields.update(config_overrides)
    config = TrainConfig(**fields)
    train_pipe = TrainPipeline(jitter, SMOKE_IMAGE_SIZE, seed=seed)
    batcher = ManifestBatcher(train_manifest, train_pipe, config.batch_size,
                              seed=seed, root=root)
    val_source = EvalSource(val_manifest, EvalPipeline(SMOKE_IMAGE_SIZE),
                            config.batch_size, root=root)
    model = SEResNet(tiny_config(), seed=seed)
    return model, config, batcher, val_source, weights


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", None) != "call" and status != "error":
                continue
            if "test_acceptance.py" in rep.nodeid:
                rows.append((rep.nodeid.split("::")[-1], status))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in sorted(rows):
        mark = "PASS" if status == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}")
