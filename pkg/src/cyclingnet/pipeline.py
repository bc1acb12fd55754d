"""Clip manifests, flow caching, frame/flow fusion, augmentation and batching.

Manifest grammar
----------------
One clip per line; blank lines and ``#`` comments are ignored. Fields are
whitespace-separated ``key=value`` pairs::

    clip_id=c001 dir=frames/c001 frames=120 labels=0:80,1:25,0:15 split=train fps=30

``clip_id``, ``dir``, ``frames`` and ``labels`` are required; ``split``
(train|val|test) and ``fps`` (metadata only) are optional; any other key is
rejected. ``labels`` is a run-length encoding of per-frame labels as
``label:count`` runs. ``dir`` is resolved relative to the manifest file and
must hold raster files named by frame index (``0.png``, ``000001.png``, ...)
numbered contiguously from 0.

Flow at index ``t`` (``1 <= t < N``) is the displacement from frame ``t-1``
to frame ``t``. A fused sample at ``t`` needs the flows at ``t..t-3``, so the
first usable index of every clip is 4.
"""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .imaging import FRAME_SUFFIXES, bilinear_resize, read_image, to_unit_range, write_image
from .optical_flow import FlowField, FlowParams, estimate_flow, flow_to_color

log = logging.getLogger(__name__)

FRAME_HEIGHT = 240
FRAME_WIDTH = 320
FLOW_LAGS = 4
FIRST_USABLE_INDEX = FLOW_LAGS
SPLITS = ("train", "val", "test")
_MANIFEST_FIELDS = {"clip_id", "dir", "frames", "labels", "split", "fps"}
_REQUIRED_FIELDS = ("clip_id", "dir", "frames", "labels")

FLOW_MAGIC = b"CYFLOW01"
_FLOW_HEADER = struct.Struct("<8sII")


class ManifestError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


class FlowFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ClipManifest:
    clip_id: str
    frame_directory: Path
    frame_count: int
    labels: np.ndarray
    split: Optional[str] = None
    fps: Optional[float] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.frame_count:
            raise ManifestError(f"clip {self.clip_id}: {len(self.labels)} labels for "
                                f"{self.frame_count} frames")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise ManifestError(f"clip {self.clip_id}: labels must be 0 or 1")
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"clip {self.clip_id}: unknown split {self.split!r}")

    def frame_paths(self) -> list[Path]:
        """Frame files ordered by index; raises if any index is missing."""
        if not self.frame_directory.is_dir():
            raise ManifestError(f"clip {self.clip_id}: frame directory {self.frame_directory} "
                                "does not exist")
        found = {}
        for path in self.frame_directory.iterdir():
            if path.suffix.lower() in FRAME_SUFFIXES and path.stem.isdigit():
                found[int(path.stem)] = path
        missing = [i for i in range(self.frame_count) if i not in found]
        if missing:
            raise ManifestError(f"clip {self.clip_id}: missing frame files for indices "
                                f"{missing[:10]}{'...' if len(missing) > 10 else ''}")
        return [found[i] for i in range(self.frame_count)]

    def usable_indices(self) -> range:
        return range(FIRST_USABLE_INDEX, max(FIRST_USABLE_INDEX, self.frame_count))


def parse_label_runs(text: str) -> np.ndarray:
    labels = []
    for run in filter(None, text.split(",")):
        try:
            value, count = run.split(":")
            value, count = int(value), int(count)
        except ValueError:
            raise ManifestError(f"bad label run {run!r}; expected label:count") from None
        if count < 0:
            raise ManifestError(f"negative run length in {run!r}")
        labels.extend([value] * count)
    return np.asarray(labels, dtype=np.int64)


def encode_label_runs(labels: Sequence[int]) -> str:
    runs: list[list[int]] = []
    for value in labels:
        if runs and runs[-1][0] == value:
            runs[-1][1] += 1
        else:
            runs.append([int(value), 1])
    return ",".join(f"{v}:{n}" for v, n in runs)


def parse_manifest(text: str, base_dir: Path = Path(".")) -> list[ClipManifest]:
    clips, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ManifestError(f"line {lineno}: expected key=value, got {token!r}")
            if key not in _MANIFEST_FIELDS:
                raise ManifestError(f"line {lineno}: unknown field {key!r}")
            fields[key] = value
        missing = [k for k in _REQUIRED_FIELDS if k not in fields]
        if missing:
            raise ManifestError(f"line {lineno}: missing fields {missing}")
        if fields["clip_id"] in seen:
            raise ManifestError(f"line {lineno}: duplicate clip_id {fields['clip_id']!r}")
        seen.add(fields["clip_id"])
        try:
            frame_count = int(fields["frames"])
            fps = float(fields["fps"]) if "fps" in fields else None
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        directory = Path(fields["dir"])
        if not directory.is_absolute():
            directory = base_dir / directory
        try:
            clips.append(ClipManifest(fields["clip_id"], directory, frame_count,
                                      parse_label_runs(fields["labels"]),
                                      fields.get("split"), fps))
        except ManifestError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
    return clips


def load_manifest(path, check_files: bool = True) -> list[ClipManifest]:
    """Parse and validate a manifest file; optionally verify every frame file exists."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} not found")
    clips = parse_manifest(path.read_text(), path.parent)
    if check_files:
        for clip in clips:
            clip.frame_paths()
    return clips


def write_manifest(path, clips: Iterable[ClipManifest]) -> None:
    path = Path(path)
    lines = []
    for clip in clips:
        directory = clip.frame_directory
        try:
            directory = directory.relative_to(path.parent)
        except ValueError:
            pass
        parts = [f"clip_id={clip.clip_id}", f"dir={directory}", f"frames={clip.frame_count}",
                 f"labels={encode_label_runs(clip.labels)}"]
        if clip.split:
            parts.append(f"split={clip.split}")
        if clip.fps:
            parts.append(f"fps={clip.fps:g}")
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + "\n")


def count_events(labels: Sequence[int]) -> int:
    """Number of contiguous runs of label 1."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0
    starts = np.diff(np.concatenate([[0], labels])) == 1
    return int(starts.sum())


def corpus_stats(clips: Sequence[ClipManifest]) -> dict:
    total = sum(c.frame_count for c in clips)
    positives = sum(int(c.labels.sum()) for c in clips)
    return {
        "clips": len(clips),
        "frames": total,
        "flows": sum(max(0, c.frame_count - 1) for c in clips),
        "positives": positives,
        "positive_rate": positives / total if total else 0.0,
        "events": sum(count_events(c.labels) for c in clips),
        "usable_samples": sum(len(c.usable_indices()) for c in clips),
    }


# ---------------------------------------------------------------------------
# frames and fusion


def resize_frame(image: np.ndarray, height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH) -> np.ndarray:
    """Bilinear resample to (height, width, 3) float32 in [0, 1]."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    image = to_unit_range(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    elif image.shape[-1] == 1:
        image = np.repeat(image, 3, axis=-1)
    out = bilinear_resize(image[..., :3], height, width)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def fuse_inputs(rgb: np.ndarray, flow_colors: Sequence[np.ndarray]) -> np.ndarray:
    """``rgb / 2 + (flow_t + flow_t-1 + flow_t-2 + flow_t-3) / 8``.

    ``flow_colors`` are the colourised flows ordered from the current step back.
    """
    if len(flow_colors) != FLOW_LAGS:
        raise ValueError(f"fusion needs {FLOW_LAGS} prior flows, got {len(flow_colors)}; "
                         "frames before index 4 must be skipped")
    rgb = np.asarray(rgb, dtype=np.float32)
    for flow in flow_colors:
        if np.shape(flow) != rgb.shape:
            raise ValueError(f"flow colour shape {np.shape(flow)} != frame shape {rgb.shape}")
    flows = sum(np.asarray(f, dtype=np.float32) for f in flow_colors)
    return (rgb * np.float32(0.5) + flows * np.float32(0.125)).astype(np.float32)


@dataclass
class FusedSample:
    x: np.ndarray
    label: int
    clip_id: str
    frame_index: int


AUGMENT_OPS = ("horizontal_flip", "scale")


def _scale_image(x: np.ndarray, factor: float) -> np.ndarray:
    height, width = x.shape[:2]
    new_h = max(1, int(round(height * factor)))
    new_w = max(1, int(round(width * factor)))
    scaled = bilinear_resize(x, new_h, new_w)
    out = np.zeros_like(x)
    # centre crop when enlarged, centre pad with zeros when shrunk
    sy, sx = max(0, (new_h - height) // 2), max(0, (new_w - width) // 2)
    dy, dx = max(0, (height - new_h) // 2), max(0, (width - new_w) // 2)
    h, w = min(height, new_h), min(width, new_w)
    out[dy:dy + h, dx:dx + w] = scaled[sy:sy + h, sx:sx + w]
    return out


def augment(sample: FusedSample, ops: Iterable[str] = AUGMENT_OPS, seed=None,
            scale_range: tuple[float, float] = (0.9, 1.1),
            scale_factor: Optional[float] = None) -> FusedSample:
    """Apply the requested augmentations; labels are never changed.

    ``horizontal_flip`` mirrors columns unconditionally, ``scale`` resamples by
    ``scale_factor`` (or a random factor from ``scale_range``) and crops/pads
    back to the original extent. Random flip decisions are the caller's job.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = sample.x
    for op in ops:
        if op == "horizontal_flip":
            x = x[:, ::-1]
        elif op == "scale":
            factor = scale_factor if scale_factor is not None else rng.uniform(*scale_range)
            x = _scale_image(x, factor)
        else:
            raise ValueError(f"unknown augmentation {op!r}")
    return FusedSample(np.ascontiguousarray(x), sample.label, sample.clip_id, sample.frame_index)


# ---------------------------------------------------------------------------
# flow cache


def write_flow(path, flow: FlowField) -> None:
    """16-byte header (magic, width, height) then little-endian float32 (u, v) pairs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    uv = flow.as_array().astype("<f4")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, flow.width, flow.height))
        fh.write(uv.tobytes())
    tmp.replace(path)


def read_flow(path) -> FlowField:
    blob = Path(path).read_bytes()
    if len(blob) < _FLOW_HEADER.size:
        raise FlowFormatError(f"{path}: truncated header")
    magic, width, height = _FLOW_HEADER.unpack_from(blob)
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    expected = _FLOW_HEADER.size + width * height * 2 * 4
    if len(blob) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    uv = np.frombuffer(blob, dtype="<f4", offset=_FLOW_HEADER.size).reshape(height, width, 2)
    return FlowField.from_array(uv.astype(np.float32))


@dataclass
class FlowCache:
    """Flows on disk under ``root/<params digest>/<frame size>/<clip_id>/<index>.flo``."""

    root: Path
    params: FlowParams = field(default_factory=FlowParams)
    frame_size: tuple[int, int] = (FRAME_HEIGHT, FRAME_WIDTH)

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def directory(self) -> Path:
        h, w = self.frame_size
        return self.root / self.params.digest() / f"{h}x{w}"

    def path(self, clip_id: str, index: int) -> Path:
        return self.directory / clip_id / f"{index:06d}.flo"

    def has(self, clip_id: str, index: int) -> bool:
        return self.path(clip_id, index).is_file()

    def load(self, clip_id: str, index: int) -> FlowField:
        path = self.path(clip_id, index)
        if not path.is_file():
            raise DatasetError(f"missing flow for clip {clip_id!r} frame {index} ({path}); "
                               "run the `flow` command first")
        return read_flow(path)

    def store(self, clip_id: str, index: int, flow: FlowField) -> None:
        write_flow(self.path(clip_id, index), flow)


def load_frame(clip: ClipManifest, index: int, frame_size=(FRAME_HEIGHT, FRAME_WIDTH),
               paths: Optional[list[Path]] = None) -> np.ndarray:
    paths = paths if paths is not None else clip.frame_paths()
    return resize_frame(read_image(paths[index]), *frame_size)


def compute_clip_flows(clip: ClipManifest, cache: FlowCache, emit_color: Optional[Path] = None,
                       force: bool = False) -> int:
    """Fill the cache with the N-1 flows of ``clip``; returns how many were computed.

    Entries already present are left untouched, so reruns are idempotent.
    """
    paths = clip.frame_paths()
    computed = 0
    prev = None
    for t in range(1, clip.frame_count):
        if not force and cache.has(clip.clip_id, t) and emit_color is None:
            prev = None
            continue
        if prev is None:
            prev = load_frame(clip, t - 1, cache.frame_size, paths)
        nxt = load_frame(clip, t, cache.frame_size, paths)
        if force or not cache.has(clip.clip_id, t):
            flow = estimate_flow(prev, nxt, cache.params)
            cache.store(clip.clip_id, t, flow)
            computed += 1
        else:
            flow = cache.load(clip.clip_id, t)
        if emit_color is not None:
            out = Path(emit_color) / clip.clip_id
            out.mkdir(parents=True, exist_ok=True)
            write_image(out / f"{t:06d}.png", flow_to_color(flow))
        prev = nxt
    return computed


class SampleSource:
    """Builds fused samples for (clip, index) from frames on disk and the flow cache."""

    def __init__(self, clips: Sequence[ClipManifest], cache: FlowCache, max_cached: int = 4096):
        self.clips = {c.clip_id: c for c in clips}
        self.cache = cache
        self.max_cached = max_cached
        self._paths: dict[str, list[Path]] = {}
        self._colors: OrderedDict = OrderedDict()
        self._samples: OrderedDict = OrderedDict()

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.cache.frame_size

    def _remember(self, store: OrderedDict, key, value):
        store[key] = value
        if len(store) > self.max_cached:
            store.popitem(last=False)
        return value

    def flow_color(self, clip_id: str, index: int) -> np.ndarray:
        key = (clip_id, index)
        if key in self._colors:
            self._colors.move_to_end(key)
            return self._colors[key]
        return self._remember(self._colors, key, flow_to_color(self.cache.load(clip_id, index)))

    def check_flows(self, clip_id: str, index: int) -> None:
        for t in range(index, index - FLOW_LAGS, -1):
            if not self.cache.has(clip_id, t):
                raise DatasetError(f"missing flow for clip {clip_id!r} frame {t} "
                                   f"(needed by sample {index}); run the `flow` command first")

    def sample(self, clip_id: str, index: int) -> FusedSample:
        key = (clip_id, index)
        if key in self._samples:
            self._samples.move_to_end(key)
            return self._samples[key]
        clip = self.clips[clip_id]
        if index < FIRST_USABLE_INDEX:
            raise ValueError(f"frame {index} precedes the first usable index {FIRST_USABLE_INDEX}")
        if clip_id not in self._paths:
            self._paths[clip_id] = clip.frame_paths()
        rgb = load_frame(clip, index, self.frame_size, self._paths[clip_id])
        colors = [self.flow_color(clip_id, t) for t in range(index, index - FLOW_LAGS, -1)]
        fused = FusedSample(fuse_inputs(rgb, colors), int(clip.labels[index]), clip_id, index)
        return self._remember(self._samples, key, fused)


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class DatasetSplit:
    train: list[tuple[str, int]]
    val: list[tuple[str, int]]
    test: list[tuple[str, int]]
    batch_size: int = 64

    def __getitem__(self, name: str) -> list[tuple[str, int]]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


def assign_splits(clips: Sequence[ClipManifest], policy: str = "manifest", seed: int = 0,
                  val_fraction: float = 0.2, test_fraction: float = 0.0) -> dict[str, str]:
    """Map clip_id to split. Whole clips go to one split so splits stay disjoint.

    ``manifest`` uses the split tags (untagged clips train); ``random`` deals
    clips out by a seeded permutation.
    """
    if policy == "manifest":
        return {c.clip_id: c.split or "train" for c in clips}
    if policy != "random":
        raise ValueError(f"unknown split policy {policy!r}")
    order = np.random.default_rng(seed).permutation(len(clips))
    n_val = int(round(val_fraction * len(clips)))
    n_test = int(round(test_fraction * len(clips)))
    out = {}
    for rank, k in enumerate(order):
        out[clips[k].clip_id] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
    return out


class Dataset:
    """Splits plus batch iterators over fused samples.

    Training batches are shuffled with a generator seeded by (seed, epoch) and
    optionally augmented (random horizontal flip with probability 0.5, random
    scale); validation and test batches keep manifest order.
    """

    def __init__(self, source: SampleSource, split: DatasetSplit, seed: int = 0,
                 augment_ops: Sequence[str] = ()):
        self.source = source
        self.split = split
        self.seed = seed
        self.augment_ops = tuple(augment_ops)

    def labels(self, name: str) -> np.ndarray:
        return np.array([self.source.clips[c].labels[i] for c, i in self.split[name]], dtype=np.int64)

    def batches(self, name: str, epoch: int = 0,
                batch_size: Optional[int] = None) -> Iterator[tuple[np.ndarray, np.ndarray, list]]:
        keys = list(self.split[name])
        batch_size = batch_size or self.split.batch_size
        rng = np.random.default_rng([self.seed, epoch])
        if name == "train":
            keys = [keys[k] for k in rng.permutation(len(keys))]
        for start in range(0, len(keys), batch_size):
            chunk = keys[start:start + batch_size]
            samples = [self.source.sample(c, i) for c, i in chunk]
            if name == "train" and self.augment_ops:
                samples = [self._augment(s, rng) for s in samples]
            x = np.stack([s.x for s in samples]).astype(np.float32)
            y = np.array([s.label for s in samples], dtype=np.float32)
            yield x, y, chunk

    def _augment(self, sample: FusedSample, rng: np.random.Generator) -> FusedSample:
        ops = [op for op in self.augment_ops if op != "horizontal_flip" or rng.random() < 0.5]
        return augment(sample, ops, rng)


def build_dataset(clips: Sequence[ClipManifest], cache: FlowCache, split_policy: str = "manifest",
                  batch_size: int = 64, seed: int = 0, augment_ops: Sequence[str] = (),
                  val_fraction: float = 0.2, test_fraction: float = 0.0) -> Dataset:
    """Assemble disjoint splits of usable (clip_id, index) pairs.

    Every referenced sample's four flows must already be cached.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    assignment = assign_splits(clips, split_policy, seed, val_fraction, test_fraction)
    source = SampleSource(clips, cache)
    keys: dict[str, list[tuple[str, int]]] = {name: [] for name in SPLITS}
    for clip in clips:
        for index in clip.usable_indices():
            source.check_flows(clip.clip_id, index)
            keys[assignment[clip.clip_id]].append((clip.clip_id, index))
    split = DatasetSplit(keys["train"], keys["val"], keys["test"], batch_size)
    log.info("dataset: %d train, %d val, %d test samples",
             len(split.train), len(split.val), len(split.test))
    return Dataset(source, split, seed, augment_ops)
