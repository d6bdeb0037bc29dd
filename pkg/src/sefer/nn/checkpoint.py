"""Checkpoint container: named float32 arrays plus a JSON sidecar.

On disk a checkpoint `foo` is two files: `foo.npz` mapping parameter/buffer
names to 32-bit arrays, and `foo.json` describing it:

    {"format_version": 1, "architecture": {...NetworkConfig...},
     "num_classes": 7, "source": "...", "normalize": {...} | null}

Keys follow the model's dotted naming; the classifier head is always
"head.weight" / "head.bias". Externally produced backbones must use the
same schema (see README for the full key list of a given topology).
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .network import HEAD_PARAM_NAMES, NetworkConfig, SEResNet

FORMAT_VERSION = 1


def state_dict(net) -> dict:
    """Parameters and buffers as one flat name -> array mapping."""
    out = dict(net.named_parameters())
    out.update(net.named_buffers())
    return out


@dataclass
class LoadReport:
    matched: tuple
    missing: tuple
    unexpected: tuple


def load_state_dict(net, state, strict=True) -> LoadReport:
    """Copy arrays from `state` into the model by name.

    Strict mode fails when the model has keys the state lacks; extra keys in
    the state are reported, never fatal. Shape conflicts are always fatal.
    """
    own = state_dict(net)
    matched, missing = [], []
    for name, target in own.items():
        if name not in state:
            missing.append(name)
            continue
        src = np.asarray(state[name])
        if src.shape != target.shape:
            raise CheckpointError(
                f"shape conflict for key {name!r}: checkpoint {src.shape}, "
                f"model {target.shape}")
        target[...] = src.astype(target.dtype)
        matched.append(name)
    unexpected = [k for k in state if k not in own]
    if strict and missing:
        raise CheckpointError("missing keys in checkpoint: " + ", ".join(sorted(missing)))
    return LoadReport(tuple(matched), tuple(missing), tuple(unexpected))


def _paths(path):
    p = Path(path)
    if p.suffix == ".npz":
        p = p.with_suffix("")
    return p.with_suffix(".npz"), p.with_suffix(".json")


def save_checkpoint(path, net, *, source, normalize=None):
    """Write `path`.npz / `path`.json; arrays are stored as float32."""
    npz_path, json_path = _paths(path)
    npz_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in state_dict(net).items()}
    np.savez(npz_path, **arrays)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "architecture": net.config.to_dict(),
        "num_classes": net.config.num_classes,
        "source": source,
        "normalize": normalize,
    }
    json_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return npz_path


def load_checkpoint(path):
    """Returns (state, sidecar). `path` may be the base or the .npz file."""
    npz_path, json_path = _paths(path)
    if not npz_path.exists():
        raise FileNotFoundError(f"checkpoint archive not found: {npz_path}")
    if not json_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {json_path}")
    try:
        sidecar = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint sidecar {json_path}: {exc}")
    version = sidecar.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    with np.load(npz_path) as archive:
        state = {k: archive[k] for k in archive.files}
    return state, sidecar


def build_from_checkpoint(path, seed=0):
    """Reconstruct the network a checkpoint describes and load it strictly."""
    state, sidecar = load_checkpoint(path)
    arch = sidecar.get("architecture")
    if not isinstance(arch, dict):
        raise CheckpointError("checkpoint sidecar lacks an architecture description")
    config = NetworkConfig.from_dict(arch)
    net = SEResNet(config, seed=seed)
    load_state_dict(net, state, strict=True)
    return net, sidecar


def reshape_head(state, num_classes, *, seed=0, preserve_head=False) -> dict:
    """Swap the final classification layer for a fresh `num_classes`-way one.

    Every non-head array is carried over untouched. The new weight uses the
    fan-in variance-preserving scheme, the new bias is zero. With
    `preserve_head=True` a head that already has `num_classes` outputs is
    kept as is.
    """
    w_key, b_key = HEAD_PARAM_NAMES
    if w_key not in state or b_key not in state:
        candidates = [k for k in state
                      if "head" in k or "fc" in k or getattr(state[k], "ndim", 0) == 2]
        raise CheckpointError(
            "no recognized classification head in checkpoint; candidate keys: "
            + (", ".join(sorted(candidates)) or "<none>"))
    old_w = np.asarray(state[w_key])
    if old_w.ndim != 2:
        raise CheckpointError(f"{w_key} is not a 2-D weight: shape {old_w.shape}")
    out = dict(state)
    if preserve_head and old_w.shape[0] == num_classes:
        return out
    feature_dim = old_w.shape[1]
    rng = np.random.default_rng(seed)
    scale = np.sqrt(1.0 / feature_dim)
    out[w_key] = (rng.standard_normal((num_classes, feature_dim)) * scale).astype(old_w.dtype)
    out[b_key] = np.zeros(num_classes, dtype=old_w.dtype)
    return out
