"""Training loop: weighted cross-entropy, momentum SGD with two learning
rates, gradient accumulation over micro-batches, periodic validation with
checkpoint-on-improvement and patience-based early stopping.

Determinism contract: the batch served at iteration t (1-based) depends
only on (seed, t). Epoch e uses the permutation drawn from
default_rng((seed, SHUFFLE_TAG, e)); iterations map to (epoch, slot) by
pure arithmetic with drop-last batching, so resuming at iteration t+1
reproduces the exact batch sequence an uninterrupted run would have seen.

The loss is the plain mean over the batch of per-sample weighted terms
-w[y] * log softmax(logits)[y]. Because it is a mean of per-sample values,
a batch of size B in K micro-batches produces bitwise-matched-to-tolerance
gradients when each micro-batch backward is scaled by 1/K.

SGD update per parameter: v <- mu * v + (g + lambda * theta);
theta <- theta - eta * v. Weight decay rides inside the velocity.
"""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .augment import decode_image
from .errors import (CheckpointError, ConfigError, ContractError, DomainError,
                     TrainingError)
from .labels import NUM_CLASSES
from .metrics import ConfusionMatrix, expression_criterion
from .nn.checkpoint import save_checkpoint
from .nn.layers import log_softmax, softmax
from .nn.network import split_parameter_groups

SHUFFLE_TAG = 101


def canonical_hash(obj) -> str:
    """sha256 of the canonical JSON serialization (sorted keys, no spaces)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    micro_batches: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.005
    lr_head: float = 0.001
    lr_backbone: float = 1e-6
    validate_every: int | None = 3920
    patience: int = 5
    max_iterations: int = 100000
    seed: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.micro_batches < 1:
            raise ConfigError(f"micro_batches must be >= 1, got {self.micro_batches}")
        if self.batch_size % self.micro_batches != 0:
            raise ConfigError(f"batch_size {self.batch_size} is not divisible by "
                              f"micro_batches {self.micro_batches}")
        for name in ("lr_head", "lr_backbone", "weight_decay"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.validate_every is not None and self.validate_every < 1:
            raise ConfigError(f"validate_every must be >= 1 or null, "
                              f"got {self.validate_every}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        return self

    def to_dict(self):
        return {"batch_size": self.batch_size, "micro_batches": self.micro_batches,
                "momentum": self.momentum, "weight_decay": self.weight_decay,
                "lr_head": self.lr_head, "lr_backbone": self.lr_backbone,
                "validate_every": self.validate_every, "patience": self.patience,
                "max_iterations": self.max_iterations, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainState:
    """Everything needed to resume mid-run, minus the model parameters."""
    iteration: int = 0
    best_criterion: float = float("-inf")
    best_iteration: int = 0
    bad_validations: int = 0
    momentum_buffers: dict = field(default_factory=dict)
    rng_scheme: dict = field(default_factory=lambda: {"kind": "counter"})


@dataclass(frozen=True)
class CheckpointMeta:
    iteration: int
    expression_criterion: float
    macro_f1: float
    accuracy: float
    config_hash: str
    timestamp: str

    def to_dict(self):
        return {"iteration": self.iteration,
                "expression_criterion": self.expression_criterion,
                "macro_f1": self.macro_f1, "accuracy": self.accuracy,
                "config_hash": self.config_hash, "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _weights_array(class_weights):
    if hasattr(class_weights, "as_array"):
        w = class_weights.as_array(np.float64)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (NUM_CLASSES,):
        raise ContractError(f"need {NUM_CLASSES} class weights, got shape {w.shape}")
    if np.any(w <= 0):
        raise ContractError("class weights must be positive")
    return w


def _check_logits_targets(logits, targets):
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if logits.ndim != 2 or logits.shape[1] != NUM_CLASSES:
        raise ContractError(f"logits must be (N, {NUM_CLASSES}), got {logits.shape}")
    if logits.shape[0] != targets.shape[0]:
        raise ContractError(f"{logits.shape[0]} logit rows vs "
                            f"{targets.shape[0]} targets")
    if targets.size == 0:
        raise ContractError("empty batch")
    if targets.min() < 0 or targets.max() >= NUM_CLASSES:
        raise ContractError(f"target labels outside 0..{NUM_CLASSES - 1}")
    if not np.all(np.isfinite(logits)):
        raise ContractError("non-finite logits")
    return logits, targets


def weighted_cross_entropy(logits, targets, class_weights) -> float:
    """Mean over the batch of -w[y] * log p(y). Internally float64."""
    logits, targets = _check_logits_targets(logits, targets)
    w = _weights_array(class_weights)
    logp = log_softmax(logits.astype(np.float64))
    rows = np.arange(targets.shape[0])
    per_sample = -w[targets] * logp[rows, targets]
    return float(per_sample.mean())


def weighted_cross_entropy_grad(logits, targets, class_weights):
    """Loss plus d(loss)/d(logits), cast back to the logits dtype."""
    logits, targets = _check_logits_targets(logits, targets)
    w = _weights_array(class_weights)
    n = targets.shape[0]
    rows = np.arange(n)
    logits64 = logits.astype(np.float64)
    logp = log_softmax(logits64)
    loss = float((-w[targets] * logp[rows, targets]).mean())
    grad = softmax(logits64)
    grad[rows, targets] -= 1.0
    grad *= (w[targets] / n)[:, None]
    return loss, grad.astype(logits.dtype)


def sgd_step(params, grads, buffers, lr_map, momentum, weight_decay):
    """One in-place momentum step over every named parameter.

    lr_map maps parameter name -> learning rate. Velocity buffers are
    created on first use and must be carried between calls by the caller.
    """
    for name, theta in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if name not in lr_map:
            raise ContractError(f"no learning rate for parameter {name}")
        v = buffers.get(name)
        if v is None:
            v = np.zeros_like(theta)
            buffers[name] = v
        v *= momentum
        v += g + weight_decay * theta
        theta -= lr_map[name] * v


def accumulate_gradients(model, targets_batch, inputs_batch, class_weights,
                         micro_batches: int) -> float:
    """Zero grads, run K micro forward/backward passes, return batch loss.

    Each micro backward is scaled by 1/K so the summed parameter gradients
    equal those of one full-batch pass (the loss is a mean of per-sample
    terms, and the network is sample-independent when its normalization
    layers run on frozen statistics).
    """
    n = inputs_batch.shape[0]
    if micro_batches < 1 or n % micro_batches != 0:
        raise ConfigError(f"batch of {n} does not split into "
                          f"{micro_batches} equal micro-batches")
    m = n // micro_batches
    model.zero_grads()
    total = 0.0
    for k in range(micro_batches):
        lo, hi = k * m, (k + 1) * m
        logits = model.forward(inputs_batch[lo:hi], train=True)
        loss, dlogits = weighted_cross_entropy_grad(
            logits, targets_batch[lo:hi], class_weights)
        model.backward(dlogits / micro_batches)
        total += loss
    return total / micro_batches


class ImageCache:
    """Decode-once cache keyed by resolved path."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._cache = {}

    def resolve(self, path) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def get(self, path):
        p = self.resolve(path)
        key = str(p)
        img = self._cache.get(key)
        if img is None:
            img = decode_image(p)
            self._cache[key] = img
        return img


class ManifestBatcher:
    """Serves the training batch for any 1-based iteration number.

    Drop-last batching: with n samples and batch size B there are n // B
    slots per epoch. Iteration t lands at epoch (t-1) // ipe, slot
    (t-1) % ipe of that epoch's permutation. The augmentation stream index
    for the j-th item of iteration t is (t-1)*B + j, unique per presentation.
    """

    def __init__(self, manifest, pipeline, batch_size: int, seed: int,
                 root=None, workers: int = 1, cache=None):
        if len(manifest) == 0:
            raise ConfigError("training manifest is empty")
        if batch_size > len(manifest):
            raise ConfigError(f"batch_size {batch_size} exceeds dataset size "
                              f"{len(manifest)}")
        self.samples = manifest.samples
        self.pipeline = pipeline
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.workers = max(1, int(workers))
        self.cache = cache if cache is not None else ImageCache(root)
        self.num_samples = len(self.samples)
        self.iterations_per_epoch = self.num_samples // self.batch_size
        self._perm_epoch = None
        self._perm = None

    def _permutation(self, epoch: int):
        if self._perm_epoch != epoch:
            rng = np.random.default_rng((self.seed, SHUFFLE_TAG, epoch))
            self._perm = rng.permutation(self.num_samples)
            self._perm_epoch = epoch
        return self._perm

    def batch(self, iteration: int):
        if iteration < 1:
            raise ContractError(f"iterations are 1-based, got {iteration}")
        step = iteration - 1
        epoch, slot = divmod(step, self.iterations_per_epoch)
        perm = self._permutation(epoch)
        idx = perm[slot * self.batch_size:(slot + 1) * self.batch_size]

        def prepare(j_i):
            j, i = j_i
            sample = self.samples[i]
            img = self.cache.get(sample.image_path)
            return self.pipeline(img, step * self.batch_size + j)

        pairs = list(enumerate(idx))
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                arrays = list(pool.map(prepare, pairs))
        else:
            arrays = [prepare(p) for p in pairs]
        x = np.stack(arrays)
        y = np.asarray([self.samples[i].label for i in idx], dtype=np.int64)
        return x, y


class ArrayBatcher:
    """In-memory batch source for tests: every iteration serves the same
    full batch, already preprocessed."""

    def __init__(self, inputs, targets):
        self.inputs = np.asarray(inputs)
        self.targets = np.asarray(targets, dtype=np.int64)
        if self.inputs.shape[0] != self.targets.shape[0] or self.targets.size == 0:
            raise ContractError("inputs and targets must be equal-length and "
                                "non-empty")
        self.num_samples = self.targets.shape[0]
        self.batch_size = self.num_samples
        self.iterations_per_epoch = 1

    def batch(self, iteration: int):
        return self.inputs, self.targets


class EvalSource:
    """Re-iterable stream of (inputs, targets, samples) evaluation batches."""

    def __init__(self, manifest, pipeline, batch_size: int, root=None,
                 workers: int = 1, cache=None):
        if len(manifest) == 0:
            raise DomainError("evaluation manifest is empty")
        self.samples = manifest.samples
        self.pipeline = pipeline
        self.batch_size = int(batch_size)
        self.workers = max(1, int(workers))
        self.cache = cache if cache is not None else ImageCache(root)

    def __iter__(self):
        for lo in range(0, len(self.samples), self.batch_size):
            chunk = self.samples[lo:lo + self.batch_size]

            def prepare(sample):
                return self.pipeline(self.cache.get(sample.image_path))

            if self.workers > 1:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    arrays = list(pool.map(prepare, chunk))
            else:
                arrays = [prepare(s) for s in chunk]
            x = np.stack(arrays)
            y = np.asarray([s.label for s in chunk], dtype=np.int64)
            yield x, y, chunk


def predict_batches(model, batches):
    """Yield (true, predicted, samples) per batch; argmax breaks ties low."""
    for x, y, chunk in batches:
        logits = model.forward(x, train=False)
        preds = np.argmax(logits, axis=1)
        yield y, preds, chunk


def evaluate_model(model, batches):
    """Run the model over a batch stream; returns (EvalReport, matrix,
    records) where records are prediction rows for persistence."""
    matrix = ConfusionMatrix()
    records = []
    for y, preds, chunk in predict_batches(model, batches):
        matrix.update(y, preds)
        if chunk is not None:
            for sample, t, p in zip(chunk, y, preds):
                records.append((sample.image_path, sample.frame_index,
                                int(t), int(p)))
    report = expression_criterion(matrix)
    return report, matrix, records


def save_train_state(state: TrainState, base_path):
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.savez(str(base) + ".npz", **state.momentum_buffers)
    scalars = {"iteration": state.iteration,
               "best_criterion": state.best_criterion,
               "best_iteration": state.best_iteration,
               "bad_validations": state.bad_validations,
               "rng_scheme": state.rng_scheme}
    Path(str(base) + ".json").write_text(json.dumps(scalars, indent=2),
                                         encoding="utf-8")


def load_train_state(base_path) -> TrainState:
    base = Path(base_path)
    npz_path, json_path = Path(str(base) + ".npz"), Path(str(base) + ".json")
    if not npz_path.exists() or not json_path.exists():
        raise CheckpointError(f"no training state at {base}")
    try:
        scalars = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{json_path}: invalid JSON: {exc}")
    with np.load(npz_path) as data:
        buffers = {k: data[k].copy() for k in data.files}
    return TrainState(iteration=int(scalars["iteration"]),
                      best_criterion=float(scalars["best_criterion"]),
                      best_iteration=int(scalars["best_iteration"]),
                      bad_validations=int(scalars["bad_validations"]),
                      momentum_buffers=buffers,
                      rng_scheme=scalars.get("rng_scheme", {"kind": "counter"}))


def run_training(model, config: TrainConfig, train_source, val_source,
                 class_weights, *, out_dir=None, config_hash=None,
                 normalize=None, initial_state=None, initial_best=None,
                 on_iteration=None, on_validation=None):
    """Train until max_iterations or patience; returns the best CheckpointMeta.

    train_source must expose batch(iteration), num_samples, batch_size.
    val_source must be re-iterable, yielding (inputs, targets, samples).
    With out_dir set, writes best/last checkpoints, a resumable state, and
    appends one JSONL record per validation to train_log.jsonl.
    """
    config.validate()
    weights = _weights_array(class_weights)
    if config_hash is None:
        config_hash = canonical_hash(config.to_dict())
    validate_every = config.validate_every
    if validate_every is None:
        validate_every = math.ceil(train_source.num_samples / config.batch_size)
    if validate_every > config.max_iterations:
        raise ConfigError(f"validate_every {validate_every} exceeds "
                          f"max_iterations {config.max_iterations}; "
                          "the run would never be scored")

    groups = split_parameter_groups(model)
    lr_map = groups.lr_map(config.lr_head, config.lr_backbone)
    params = model.named_parameters()

    state = initial_state if initial_state is not None else TrainState()
    best_meta = initial_best
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a", encoding="utf-8")

    loss_sum = 0.0
    loss_n = 0
    try:
        for t in range(state.iteration + 1, config.max_iterations + 1):
            x, y = train_source.batch(t)
            loss = accumulate_gradients(model, y, x, weights,
                                        config.micro_batches)
            sgd_step(params, model.named_grads(), state.momentum_buffers,
                     lr_map, config.momentum, config.weight_decay)
            state.iteration = t
            loss_sum += loss
            loss_n += 1
            if on_iteration is not None:
                on_iteration(t, loss)
            if t % validate_every != 0:
                continue

            report, _, _ = evaluate_model(model, val_source)
            criterion = report.expression_criterion
            is_best = criterion > state.best_criterion
            if is_best:
                state.best_criterion = criterion
                state.best_iteration = t
                state.bad_validations = 0
                best_meta = CheckpointMeta(
                    iteration=t, expression_criterion=criterion,
                    macro_f1=report.macro_f1, accuracy=report.total_accuracy,
                    config_hash=config_hash, timestamp=utc_now_iso())
                if out is not None:
                    save_checkpoint(out / "checkpoints" / "best", model,
                                    source="train", normalize=normalize)
                    (out / "checkpoints" / "best.meta.json").write_text(
                        json.dumps(best_meta.to_dict(), indent=2),
                        encoding="utf-8")
            else:
                state.bad_validations += 1

            entry = {"iteration": t,
                     "loss": loss_sum / max(loss_n, 1),
                     "macro_f1": report.macro_f1,
                     "accuracy": report.total_accuracy,
                     "criterion": criterion,
                     "is_best": is_best}
            loss_sum, loss_n = 0.0, 0
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if out is not None:
                save_checkpoint(out / "checkpoints" / "last", model,
                                source="train", normalize=normalize)
                save_train_state(state, out / "checkpoints" / "last_state")
            if on_validation is not None:
                on_validation(entry, report)
            if state.bad_validations >= config.patience:
                break
    finally:
        if log_file is not None:
            log_file.close()
    return best_meta
