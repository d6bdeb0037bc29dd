"""Dataset ingestion and harmonization.

Two annotation families feed one canonical manifest: per-frame video
annotation files (one integer per frame, -1 for unannotated) and per-image
label lists (one whitespace-separated record per face). Manifests are
immutable once built; merging, counting, and weight computation operate on
them without touching the filesystem.

Manifest file format: UTF-8 CSV with the exact header
`path,label,source,frame_index`; frame_index is empty for still-image
sources.
"""

import csv
import json
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError, IntegrityError, SeferError
from .labels import CLASS_NAMES, NUM_CLASSES, check_label

SOURCES = ("affwild2", "expw", "synthetic")
SPLIT_NAMES = ("train", "val", "test")

# sources whose samples are video frames and therefore carry a frame index
FRAME_SOURCES = ("affwild2",)

MANIFEST_HEADER = ("path", "label", "source", "frame_index")
ANNOTATION_HEADER = CLASS_NAMES


@dataclass(frozen=True, slots=True)
class Sample:
    """One labeled face image and the dataset it came from."""
    image_path: str
    label: int
    source: str
    frame_index: int | None = None

    def __post_init__(self):
        if not self.image_path:
            raise FormatError("sample with empty image path")
        check_label(self.label)
        if self.source not in SOURCES:
            raise FormatError(f"unknown sample source {self.source!r}")
        has_frame = self.frame_index is not None
        if has_frame != (self.source in FRAME_SOURCES):
            raise FormatError(
                f"frame_index must be present exactly for per-frame sources; "
                f"got source={self.source!r}, frame_index={self.frame_index!r}")
        if has_frame and self.frame_index < 0:
            raise FormatError(f"negative frame_index {self.frame_index}")

    @property
    def key(self):
        return (self.image_path, self.frame_index)


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple
    split_name: str

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split_name not in SPLIT_NAMES:
            raise ConfigError(f"split_name must be one of {SPLIT_NAMES}, "
                              f"got {self.split_name!r}")
        seen = set()
        dupes = []
        for s in self.samples:
            if s.key in seen:
                dupes.append(s.key)
            seen.add(s.key)
        if dupes:
            shown = ", ".join(repr(k) for k in dupes[:5])
            more = f" (+{len(dupes) - 5} more)" if len(dupes) > 5 else ""
            raise IntegrityError(f"duplicate samples in manifest: {shown}{more}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass(frozen=True)
class ClassDistribution:
    counts: tuple
    total: int

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.counts) != NUM_CLASSES or any(c < 0 for c in self.counts):
            raise DomainError(f"need {NUM_CLASSES} non-negative counts, got {self.counts}")
        if self.total != sum(self.counts):
            raise DomainError(f"total {self.total} != sum of counts {sum(self.counts)}")

    @classmethod
    def from_counts(cls, counts):
        counts = tuple(int(c) for c in counts)
        return cls(counts=counts, total=sum(counts))


def _round2(x) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ClassWeights:
    """Inverse-frequency loss weights: most common class gets exactly 1."""
    weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != NUM_CLASSES:
            raise DomainError(f"need {NUM_CLASSES} weights, got {len(self.weights)}")
        if any(w < 1.0 for w in self.weights) or 1.0 not in self.weights:
            raise DomainError(f"weights must all be >= 1 with at least one exact 1: "
                              f"{self.weights}")

    def rounded(self):
        return tuple(_round2(w) for w in self.weights)

    def as_array(self, dtype=np.float64):
        return np.asarray(self.weights, dtype=dtype)


def _iter_lines(source):
    """Accept a path or an open text stream; yield (name, lines)."""
    if hasattr(source, "read"):
        name = getattr(source, "name", "<stream>")
        return name, source.read().splitlines()
    path = Path(source)
    return str(path), path.read_text(encoding="utf-8").splitlines()


def parse_affwild2_annotations(annotation_file, video_id, frames_dir,
                               filename_pattern="{index:05d}.jpg"):
    """Parse a per-frame annotation file into samples.

    First line must be the 7-name header, then one integer per frame.
    Codes 0..6 become samples whose frame_index is the zero-based data-line
    position; -1 and any other out-of-range integer are skipped and counted.
    Returns (samples, skipped_count).
    """
    name, lines = _iter_lines(annotation_file)
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise FormatError(f"{name}: empty annotation file")
    header = tuple(tok.strip() for tok in lines[0].split(","))
    if header != ANNOTATION_HEADER:
        raise FormatError(f"{name}: malformed header {lines[0]!r}")
    frames = Path(frames_dir) / video_id
    samples = []
    skipped = 0
    for pos, line in enumerate(lines[1:]):
        text = line.strip()
        try:
            code = int(text)
        except ValueError:
            raise FormatError(f"{name}: line {pos + 2}: not an integer: {text!r}")
        if 0 <= code < NUM_CLASSES:
            samples.append(Sample(
                image_path=str(frames / filename_pattern.format(index=pos)),
                label=code, source="affwild2", frame_index=pos))
        else:
            skipped += 1
    return samples, skipped


def check_label_map(label_map) -> dict:
    """Validate a source-code -> canonical-code permutation of 0..6."""
    try:
        mapping = {int(k): int(v) for k, v in dict(label_map).items()}
    except (TypeError, ValueError):
        raise ConfigError(f"label map must map integer codes to integer codes: {label_map!r}")
    if sorted(mapping) != list(range(NUM_CLASSES)) \
            or sorted(mapping.values()) != list(range(NUM_CLASSES)):
        raise ConfigError(f"label map must be a bijection of 0..{NUM_CLASSES - 1}, "
                          f"got {mapping!r}")
    return mapping


def load_label_map(path) -> dict:
    """Read a JSON label-map file: {"0": canonical, ..., "6": canonical}."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}")
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: label map must be a JSON object")
    return check_label_map(raw)


def parse_expw_annotations(label_file, images_dir, label_map, strict=True):
    """Parse a per-image label list into samples.

    Records are whitespace-separated:
    `image_name face_id top left right bottom confidence label`.
    Box fields are ignored (images are assumed pre-cropped). The source
    label is remapped through `label_map` into canonical order. Out-of-range
    source labels raise in strict mode, otherwise they are skipped and
    counted. Returns (samples, skipped_count).
    """
    mapping = check_label_map(label_map)
    name, lines = _iter_lines(label_file)
    images = Path(images_dir)
    samples = []
    skipped = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 8:
            raise FormatError(f"{name}: line {lineno}: expected 8 fields, "
                              f"got {len(fields)}")
        image_name = fields[0]
        try:
            code = int(fields[7])
        except ValueError:
            raise FormatError(f"{name}: line {lineno}: label is not an integer: "
                              f"{fields[7]!r}")
        if not 0 <= code < NUM_CLASSES:
            if strict:
                raise FormatError(f"{name}: line {lineno} ({image_name}): "
                                  f"source label {code} outside 0..{NUM_CLASSES - 1}")
            skipped += 1
            continue
        samples.append(Sample(image_path=str(images / image_name),
                              label=mapping[code], source="expw"))
    return samples, skipped


def merge_datasets(manifests) -> DatasetManifest:
    """Concatenate manifests of the same split; duplicates are rejected."""
    manifests = list(manifests)
    if not manifests:
        raise ConfigError("merge_datasets needs at least one manifest")
    split = manifests[0].split_name
    for m in manifests[1:]:
        if m.split_name != split:
            raise ConfigError(f"cannot merge splits {split!r} and {m.split_name!r}")
    merged = []
    for m in manifests:
        merged.extend(m.samples)
    return DatasetManifest(samples=tuple(merged), split_name=split)


def compute_distribution(manifest) -> ClassDistribution:
    counter = Counter(s.label for s in manifest)
    counts = tuple(counter.get(c, 0) for c in range(NUM_CLASSES))
    return ClassDistribution(counts=counts, total=len(manifest))


def compute_class_weights(dist: ClassDistribution) -> ClassWeights:
    """weight[c] = max(counts) / counts[c], full precision.

    Undefined when any class is empty; callers must floor or exclude such
    classes before asking for weights.
    """
    zero = [CLASS_NAMES[c] for c, n in enumerate(dist.counts) if n == 0]
    if zero:
        raise DomainError(
            "class weights are undefined for empty classes "
            f"({', '.join(zero)}); supply a floor count or exclude the class")
    top = max(dist.counts)
    return ClassWeights(weights=tuple(top / c for c in dist.counts))


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for s in manifest:
            writer.writerow([s.image_path, s.label, s.source,
                             "" if s.frame_index is None else s.frame_index])
    return path


def read_manifest(path, split_name) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise FormatError(f"{path}: missing manifest header")
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: bad manifest header {header!r}")
        samples = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            p, label_s, source, frame_s = row
            try:
                label = int(label_s)
                frame = None if frame_s == "" else int(frame_s)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-integer field")
            try:
                samples.append(Sample(image_path=p, label=label, source=source,
                                      frame_index=frame))
            except SeferError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}")
    return DatasetManifest(samples=tuple(samples), split_name=split_name)
