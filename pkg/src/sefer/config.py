"""Run configuration: one JSON file describing data, augmentation, network,
and optimizer for a training or evaluation run.

Shape:

    {
      "seed": 0,
      "out_dir": "runs/exp",
      "workers": 1,
      "data": {
        "train": {"manifest": "train_manifest.csv"},
        "val": {"sources": [{"kind": "manifest", "path": "..."},
                             {"kind": "affwild2", "annotations_dir": "...",
                              "frames_dir": "..."},
                             {"kind": "expw", "label_file": "...",
                              "images_dir": "...", "label_map": "..."}]}
      },
      "augment": {"brightness": 0.4, ..., "flip_probability": 0.5,
                   "normalize_mean": [0.5, 0.5, 0.5],
                   "normalize_std": [0.25, 0.25, 0.25]},
      "network": {... see NetworkConfig ...},
      "train": {... see TrainConfig ...},
      "pretrained": null,
      "class_weights": "auto"
    }

Every section except out_dir has usable defaults. Unknown keys anywhere are
rejected by name. Relative paths inside "data" and "pretrained" resolve
against the directory containing the config file; out_dir resolves against
the output root (the SEFER_OUT environment variable when set, otherwise the
working directory). The config hash archived with checkpoints is the sha256
of the canonical serialization of the merged dict, after command-line
overrides and before path resolution.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import DEFAULT_MEAN, DEFAULT_STD, JitterConfig
from .dataset import (DatasetManifest, load_label_map, merge_datasets,
                      parse_affwild2_annotations, parse_expw_annotations,
                      read_manifest)
from .errors import ConfigError
from .labels import NUM_CLASSES
from .nn.network import NetworkConfig, senet50_config
from .training import TrainConfig, canonical_hash

OUT_ROOT_ENV = "SEFER_OUT"

_JITTER_KEYS = ("brightness", "contrast", "saturation", "hue", "flip_probability")


def _require_keys(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config field(s) in {where}: "
                          f"{', '.join(sorted(unknown))}")


def _typed(d, key, types, where, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"missing required config field {where}.{key}")
        return default
    v = d[key]
    if not isinstance(v, types) or isinstance(v, bool) and bool not in (
            types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"config field {where}.{key} has wrong type: {v!r}")
    return v


def _resolve(path, base_dir):
    p = Path(path)
    return p if p.is_absolute() else base_dir / p


@dataclass(frozen=True)
class SplitSpec:
    """Where one split's samples come from: a list of kind-tagged sources
    with absolute paths."""
    sources: tuple

    def build(self, split_name: str) -> DatasetManifest:
        manifests = []
        for src in self.sources:
            kind = src["kind"]
            if kind == "manifest":
                manifests.append(read_manifest(src["path"], split_name))
            elif kind == "affwild2":
                ann_dir = Path(src["annotations_dir"])
                files = sorted(ann_dir.glob("*.txt"))
                if not files:
                    raise ConfigError(f"no .txt annotation files under {ann_dir}")
                samples = []
                for f in files:
                    video_samples, _ = parse_affwild2_annotations(
                        f, video_id=f.stem, frames_dir=src["frames_dir"],
                        filename_pattern=src.get("filename_pattern",
                                                 "{index:05d}.jpg"))
                    samples.extend(video_samples)
                manifests.append(DatasetManifest(samples=tuple(samples),
                                                 split_name=split_name))
            elif kind == "expw":
                label_map = load_label_map(src["label_map"])
                samples, _ = parse_expw_annotations(
                    src["label_file"], src["images_dir"], label_map,
                    strict=src.get("strict", True))
                manifests.append(DatasetManifest(samples=tuple(samples),
                                                 split_name=split_name))
            else:
                raise ConfigError(f"unknown data source kind {kind!r}")
        return merge_datasets(manifests)

    def image_root(self):
        """Manifest-relative paths resolve against the manifest's directory;
        only single-manifest splits may use relative paths."""
        if len(self.sources) == 1 and self.sources[0]["kind"] == "manifest":
            return Path(self.sources[0]["path"]).parent
        return None


def _parse_split(d, where, base_dir) -> SplitSpec:
    _require_keys(d, ("manifest", "sources"), where)
    if ("manifest" in d) == ("sources" in d):
        raise ConfigError(f"{where} must have exactly one of "
                          f"'manifest' or 'sources'")
    if "manifest" in d:
        return SplitSpec(sources=(
            {"kind": "manifest", "path": str(_resolve(d["manifest"], base_dir))},))
    sources = []
    raw_sources = d["sources"]
    if not isinstance(raw_sources, list) or not raw_sources:
        raise ConfigError(f"{where}.sources must be a non-empty list")
    for i, src in enumerate(raw_sources):
        sw = f"{where}.sources[{i}]"
        if not isinstance(src, dict):
            raise ConfigError(f"{sw} must be an object")
        kind = _typed(src, "kind", str, sw, required=True)
        if kind == "manifest":
            _require_keys(src, ("kind", "path"), sw)
            path = _typed(src, "path", str, sw, required=True)
            sources.append({"kind": kind, "path": str(_resolve(path, base_dir))})
        elif kind == "affwild2":
            _require_keys(src, ("kind", "annotations_dir", "frames_dir",
                                "filename_pattern"), sw)
            sources.append({
                "kind": kind,
                "annotations_dir": str(_resolve(
                    _typed(src, "annotations_dir", str, sw, required=True),
                    base_dir)),
                "frames_dir": str(_resolve(
                    _typed(src, "frames_dir", str, sw, required=True), base_dir)),
                "filename_pattern": _typed(src, "filename_pattern", str, sw,
                                           default="{index:05d}.jpg"),
            })
        elif kind == "expw":
            _require_keys(src, ("kind", "label_file", "images_dir",
                                "label_map", "strict"), sw)
            sources.append({
                "kind": kind,
                "label_file": str(_resolve(
                    _typed(src, "label_file", str, sw, required=True), base_dir)),
                "images_dir": str(_resolve(
                    _typed(src, "images_dir", str, sw, required=True), base_dir)),
                "label_map": str(_resolve(
                    _typed(src, "label_map", str, sw, required=True), base_dir)),
                "strict": _typed(src, "strict", bool, sw, default=True),
            })
        else:
            raise ConfigError(f"{sw}.kind must be one of manifest, affwild2, "
                              f"expw; got {kind!r}")
    return SplitSpec(sources=tuple(sources))


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    workers: int
    data_train: SplitSpec | None
    data_val: SplitSpec | None
    jitter: JitterConfig
    normalize_mean: tuple
    normalize_std: tuple
    network: NetworkConfig
    train: TrainConfig
    pretrained: str | None
    class_weights: object  # "auto" or a tuple of 7 floats
    config_hash: str
    base_dir: Path = field(compare=False)
    raw: dict = field(compare=False, repr=False)

    def resolved_out_dir(self) -> Path:
        p = Path(self.out_dir)
        if p.is_absolute():
            return p
        root = os.environ.get(OUT_ROOT_ENV)
        return (Path(root) / p) if root else Path.cwd() / p


def parse_run_config(raw: dict, base_dir) -> RunConfig:
    base_dir = Path(base_dir)
    _require_keys(raw, ("seed", "out_dir", "workers", "data", "augment",
                        "network", "train", "pretrained", "class_weights"),
                  "config")
    seed = _typed(raw, "seed", int, "config", default=0)
    out_dir = _typed(raw, "out_dir", str, "config", required=True)
    workers = _typed(raw, "workers", int, "config", default=1)
    if workers < 1:
        raise ConfigError(f"config.workers must be >= 1, got {workers}")

    data = _typed(raw, "data", dict, "config", default={})
    _require_keys(data, ("train", "val"), "config.data")
    data_train = (_parse_split(data["train"], "config.data.train", base_dir)
                  if "train" in data else None)
    data_val = (_parse_split(data["val"], "config.data.val", base_dir)
                if "val" in data else None)

    aug = dict(_typed(raw, "augment", dict, "config", default={}))
    _require_keys(aug, _JITTER_KEYS + ("normalize_mean", "normalize_std"),
                  "config.augment")
    mean = aug.pop("normalize_mean", list(DEFAULT_MEAN))
    std = aug.pop("normalize_std", list(DEFAULT_STD))
    for name, v in (("normalize_mean", mean), ("normalize_std", std)):
        if not isinstance(v, list) or len(v) != 3 \
                or not all(isinstance(x, (int, float)) for x in v):
            raise ConfigError(f"config.augment.{name} must be a list of 3 numbers")
    for k in aug:
        if not isinstance(aug[k], (int, float)) or isinstance(aug[k], bool):
            raise ConfigError(f"config.augment.{k} must be a number, got {aug[k]!r}")
    try:
        jitter = JitterConfig(**aug)
    except TypeError:
        raise ConfigError(f"bad augment section: {aug!r}")

    net_dict = _typed(raw, "network", dict, "config", default=None)
    network = (NetworkConfig.from_dict(net_dict) if net_dict is not None
               else senet50_config())
    if network.num_classes != NUM_CLASSES:
        raise ConfigError(f"config.network.num_classes must be {NUM_CLASSES}, "
                          f"got {network.num_classes}")

    train_dict = _typed(raw, "train", dict, "config", default=None)
    train = (TrainConfig.from_dict({**train_dict, "seed": train_dict.get(
        "seed", seed)}) if train_dict is not None
        else TrainConfig(seed=seed).validate())

    pretrained = raw.get("pretrained")
    if pretrained is not None:
        if not isinstance(pretrained, str):
            raise ConfigError(f"config.pretrained must be a path string or null, "
                              f"got {pretrained!r}")
        pretrained = str(_resolve(pretrained, base_dir))

    cw = raw.get("class_weights", "auto")
    if cw != "auto":
        if not isinstance(cw, list) or len(cw) != NUM_CLASSES \
                or not all(isinstance(x, (int, float)) and x > 0 for x in cw):
            raise ConfigError(f"config.class_weights must be \"auto\" or a list "
                              f"of {NUM_CLASSES} positive numbers")
        cw = tuple(float(x) for x in cw)

    return RunConfig(seed=seed, out_dir=out_dir, workers=workers,
                     data_train=data_train, data_val=data_val, jitter=jitter,
                     normalize_mean=tuple(float(x) for x in mean),
                     normalize_std=tuple(float(x) for x in std),
                     network=network, train=train, pretrained=pretrained,
                     class_weights=cw, config_hash=canonical_hash(raw),
                     base_dir=base_dir, raw=raw)


def apply_overrides(raw: dict, assignments) -> dict:
    """Apply --set dotted.key=json_value pairs onto the raw config dict."""
    out = json.loads(json.dumps(raw))
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override must look like dotted.key=value: {item!r}")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        if not all(keys):
            raise ConfigError(f"bad override key {dotted!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        for k in keys[:-1]:
            nxt = node.get(k)
            if nxt is None:
                nxt = {}
                node[k] = nxt
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {dotted!r} descends through "
                                  f"non-object field {k!r}")
            node = nxt
        node[keys[-1]] = value
    return out


def load_run_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    raw = apply_overrides(raw, overrides)
    return parse_run_config(raw, path.parent)


def archive_config(config: RunConfig, out_dir) -> Path:
    """Write the canonical serialization whose sha256 is config.config_hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "config.json"
    target.write_text(json.dumps(config.raw, sort_keys=True,
                                 separators=(",", ":")), encoding="utf-8")
    return target
