"""Feature files, annotations, synthetic planted-moment data and the
self-supervised clip sampler."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .objectives import MomentLabels

FEATURE_MAGIC = b"MATRFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sII")      # magic, version, flags -> 16 bytes
_SHAPE = struct.Struct("<II")

AUGMENTATIONS = ("reverse", "gaussian_noise", "slow_down", "speed_up")
TAGS = ("none",) + AUGMENTATIONS
DEFAULT_PERIOD = 2.0
MIN_CLIP = 2


class FormatError(ValueError):
    pass


class ClipTooShort(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray
    frame_period_sec: float = DEFAULT_PERIOD

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError(f"{self.video_id}: features must be (L>=1, dim), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.video_id}: non-finite feature values")
        if not self.frame_period_sec > 0:
            raise ValueError(f"{self.video_id}: frame period must be positive")

    def __len__(self):
        return len(self.features)

    @property
    def duration(self):
        return len(self) * self.frame_period_sec


@dataclass
class AnnotationRecord:
    target_id: str
    query_id: str
    start_sec: float
    end_sec: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.start_sec < self.end_sec:
            raise ValueError(
                f"annotation {self.target_id}/{self.query_id}: need 0 <= start < end, "
                f"got ({self.start_sec}, {self.end_sec})")

    @property
    def pair_id(self):
        return (self.target_id, self.query_id)

    @property
    def moment(self):
        return (self.start_sec, self.end_sec)

    def check_duration(self, duration):
        if self.end_sec > duration + 1e-9:
            raise ValueError(f"annotation {self.pair_id} ends at {self.end_sec}s past video end {duration}s")

    def to_dict(self):
        return {"target_id": self.target_id, "query_id": self.query_id,
                "start_sec": self.start_sec, "end_sec": self.end_sec, **self.extra}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        core = {k: d.pop(k) for k in ("target_id", "query_id", "start_sec", "end_sec")}
        return cls(str(core["target_id"]), str(core["query_id"]),
                   float(core["start_sec"]), float(core["end_sec"]), d)


@dataclass
class PretrainSample:
    target: FeatureSequence
    query: FeatureSequence
    labels: MomentLabels
    augmentation_tag: str
    span: Tuple[int, int]


# ------------------------------------------------------------------ file formats

def save_features(path, features):
    """Write an (L, dim) array as a float32 feature file."""
    arr = np.asarray(getattr(features, "features", features), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0))
        fh.write(_SHAPE.pack(*arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_features(path, video_id=None, frame_period_sec=DEFAULT_PERIOD):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + _SHAPE.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, _ = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    L, D = _SHAPE.unpack_from(raw, _HEADER.size)
    payload = raw[_HEADER.size + _SHAPE.size:]
    if len(payload) != 4 * L * D:
        raise FormatError(f"{path}: header declares ({L}, {D}) = {L * D} floats, payload has {len(payload) // 4}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(L, D).astype(np.float64)
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        raise FormatError(f"{path}: non-finite value at frame {bad[0][0]}, dim {bad[0][1]}")
    return FeatureSequence(video_id or path.stem, arr, frame_period_sec)


def save_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict() if hasattr(r, "to_dict") else r, sort_keys=True) + "\n")


def read_jsonl(path):
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{n}: {exc}") from exc
    return out


def load_annotations(path):
    recs = []
    for n, d in enumerate(read_jsonl(path), 1):
        try:
            recs.append(AnnotationRecord.from_dict(d))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{n}: {exc}") from exc
    return recs


# ------------------------------------------------------------------ labels

def timestamps_to_labels(moment, M, frame_period_sec=DEFAULT_PERIOD):
    """Frame ``i`` is foreground iff ``start <= i * period < end``."""
    start, end = float(moment[0]), float(moment[1])
    if not 0.0 <= start < end <= M * frame_period_sec + 1e-9:
        raise ValueError(f"moment {moment} outside video of {M} frames x {frame_period_sec}s")
    t = np.arange(M) * frame_period_sec
    fg = (t >= start) & (t < end)
    rows = np.flatnonzero(fg)
    if rows.size == 0:
        raise ValueError(f"moment {moment} contains no sampled frame")
    return MomentLabels.from_span(int(rows[0]), int(rows[-1]), M)


def labels_to_timestamps(labels, frame_period_sec=DEFAULT_PERIOD):
    s, e = labels.span
    return (s * frame_period_sec, (e + 1) * frame_period_sec)


# ------------------------------------------------------------------ augmentation / pre-training

def augment(clip, tag, rng=None, noise_sigma=0.05):
    """Apply one named augmentation to an (L, dim) clip."""
    clip = np.asarray(clip, dtype=np.float64)
    if tag == "none":
        return clip.copy()
    if tag == "reverse":
        return clip[::-1].copy()
    if tag == "gaussian_noise":
        rms = np.sqrt(np.mean(clip * clip))
        return clip + rng.normal(0.0, noise_sigma * rms, size=clip.shape)
    if tag == "slow_down":
        return np.repeat(clip, 2, axis=0)
    if tag == "speed_up":
        return clip[::2].copy()
    raise ValueError(f"unknown augmentation {tag!r}; expected one of {TAGS}")


def sample_pretrain(target: FeatureSequence, seed, tag=None, min_len=MIN_CLIP, noise_sigma=0.05):
    """Cut a random clip out of ``target`` and make it the query.

    ``tag=None`` picks one of the augmentations uniformly; pass ``"none"`` for
    the clean sample. The clip only depends on ``seed``, so the clean and the
    augmented sample for one seed share the same span.
    """
    L = len(target)
    hi = L // 2
    if hi < min_len:
        raise ClipTooShort(f"{target.video_id}: {L} frames too short for a {min_len}-frame clip")
    rng = np.random.default_rng(seed)
    length = int(rng.integers(min_len, hi + 1))
    s = int(rng.integers(0, L - length + 1))
    e = s + length - 1
    pick = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
    tag = pick if tag is None else tag
    clip = augment(target.features[s:e + 1], tag, rng, noise_sigma)
    query = FeatureSequence(f"{target.video_id}[{s}:{e}]:{tag}", clip, target.frame_period_sec)
    return PretrainSample(target, query, MomentLabels.from_span(s, e, L), tag, (s, e))


def pretrain_samples(videos, seed, epoch=0, augment_clips=True):
    """Clean (and, if enabled, augmented) clip samples for every video.

    Returns ``(samples, n_skipped)``.
    """
    out, skipped = [], 0
    for i, video in enumerate(videos):
        ss = [seed, epoch, i]
        try:
            out.append(sample_pretrain(video, ss, tag="none"))
            if augment_clips:
                out.append(sample_pretrain(video, ss))
        except ClipTooShort:
            skipped += 1
    return out, skipped


# ------------------------------------------------------------------ synthetic data

@dataclass
class SyntheticConfig:
    seed: int = 0
    n_train: int = 400
    n_val: int = 50
    n_test: int = 100
    n_pretrain: int = 200
    dim: int = 32
    target_len: Tuple[int, int] = (20, 40)
    query_len: Tuple[int, int] = (4, 8)
    moment_len: Tuple[int, int] = (4, 16)
    n_train_classes: int = 8
    n_val_classes: int = 2
    n_test_classes: int = 4
    noise_sigma: float = 0.3
    frame_period_sec: float = DEFAULT_PERIOD

    def __post_init__(self):
        self.target_len = tuple(self.target_len)
        self.query_len = tuple(self.query_len)
        self.moment_len = tuple(self.moment_len)
        for name in ("target_len", "query_len", "moment_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.moment_len[0] > self.target_len[0]:
            raise ValueError("shortest moment cannot exceed the shortest target")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass
class PairExample:
    target: FeatureSequence
    query: FeatureSequence
    annotation: AnnotationRecord
    class_id: int

    @property
    def labels(self):
        return timestamps_to_labels(self.annotation.moment, len(self.target), self.target.frame_period_sec)


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    splits: Dict[str, List[PairExample]]
    pretrain: List[FeatureSequence]
    classes: Dict[str, List[int]]


def _f32(x):
    return x.astype(np.float32).astype(np.float64)


def _centroids(rng, n, dim):
    c = rng.normal(size=(n, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def _planted_video(rng, cfg, centroid, vid):
    M = int(rng.integers(cfg.target_len[0], cfg.target_len[1] + 1))
    length = int(rng.integers(cfg.moment_len[0], min(cfg.moment_len[1], M) + 1))
    s = int(rng.integers(0, M - length + 1))
    e = s + length - 1
    scale = 1.0 / np.sqrt(cfg.dim)
    frames = rng.normal(0.0, scale, size=(M, cfg.dim))
    frames[s:e + 1] = centroid + cfg.noise_sigma * rng.normal(0.0, scale, size=(length, cfg.dim))
    return FeatureSequence(vid, _f32(frames), cfg.frame_period_sec), (s, e)


def gen_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Planted-moment pairs with class centroids disjoint across splits.

    Each target is isotropic noise with one block of frames near a class
    centroid; the query is an independent draw near the same centroid.
    Every sample gets its own generator keyed on (seed, split, index).
    """
    root = np.random.default_rng([cfg.seed, 0])
    n_cls = cfg.n_train_classes + cfg.n_val_classes + cfg.n_test_classes
    cents = _centroids(root, n_cls, cfg.dim)
    ids = np.arange(n_cls)
    classes = {
        "train": ids[:cfg.n_train_classes].tolist(),
        "val": ids[cfg.n_train_classes:cfg.n_train_classes + cfg.n_val_classes].tolist(),
        "test": ids[cfg.n_train_classes + cfg.n_val_classes:].tolist(),
    }
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    scale = 1.0 / np.sqrt(cfg.dim)
    splits = {}
    for k, (split, n) in enumerate(sizes.items()):
        pool = classes[split]
        items = []
        for i in range(n):
            if not pool:
                break
            rng = np.random.default_rng([cfg.seed, 1 + k, i])
            cls = int(pool[int(rng.integers(len(pool)))])
            tid, qid = f"{split}-{i:05d}-t", f"{split}-{i:05d}-q"
            target, (s, e) = _planted_video(rng, cfg, cents[cls], tid)
            N = int(rng.integers(cfg.query_len[0], cfg.query_len[1] + 1))
            q = cents[cls] + cfg.noise_sigma * rng.normal(0.0, scale, size=(N, cfg.dim))
            query = FeatureSequence(qid, _f32(q), cfg.frame_period_sec)
            ann = AnnotationRecord(tid, qid, s * cfg.frame_period_sec, (e + 1) * cfg.frame_period_sec,
                                   {"class_id": cls})
            items.append(PairExample(target, query, ann, cls))
        splits[split] = items
    pretrain = []
    for i in range(cfg.n_pretrain):
        # unlabeled videos use fresh random directions, never a split centroid
        rng = np.random.default_rng([cfg.seed, 9, i])
        video, _ = _planted_video(rng, cfg, _centroids(rng, 1, cfg.dim)[0], f"pt-{i:05d}")
        pretrain.append(video)
    return SyntheticDataset(cfg, splits, pretrain, classes)


# ------------------------------------------------------------------ on-disk datasets

MANIFEST_VERSION = 1


def write_dataset(ds: SyntheticDataset, out_dir):
    """Write features, per-split annotation files and ``manifest.json``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    period = ds.config.frame_period_sec
    manifest = {"version": MANIFEST_VERSION, "frame_period_sec": period,
                "generator": {k: (list(v) if isinstance(v, tuple) else v)
                              for k, v in ds.config.__dict__.items()},
                "splits": {}}
    for split, items in ds.splits.items():
        recs = []
        for ex in items:
            tp = f"features/{ex.target.video_id}.feat"
            qp = f"features/{ex.query.video_id}.feat"
            save_features(out / tp, ex.target.features)
            save_features(out / qp, ex.query.features)
            rec = AnnotationRecord(ex.annotation.target_id, ex.annotation.query_id,
                                   ex.annotation.start_sec, ex.annotation.end_sec,
                                   {"class_id": ex.class_id, "target_path": tp, "query_path": qp,
                                    "frame_period_sec": period})
            recs.append(rec)
        save_jsonl(out / f"{split}.jsonl", recs)
        manifest["splits"][split] = {"annotations": f"{split}.jsonl", "n_pairs": len(recs),
                                     "class_ids": ds.classes[split]}
    vids = []
    for v in ds.pretrain:
        p = f"features/{v.video_id}.feat"
        save_features(out / p, v.features)
        vids.append({"video_id": v.video_id, "path": p, "frame_period_sec": period})
    save_jsonl(out / "pretrain.jsonl", vids)
    manifest["pretrain"] = {"videos": "pretrain.jsonl", "n_videos": len(vids)}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out / "manifest.json"


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def load_split(data_dir, split):
    """Load every pair of one split listed in the manifest."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in manifest; have {sorted(manifest['splits'])}")
    items = []
    for rec in load_annotations(root / manifest["splits"][split]["annotations"]):
        period = float(rec.extra.get("frame_period_sec", manifest["frame_period_sec"]))
        target = load_features(root / rec.extra["target_path"], rec.target_id, period)
        query = load_features(root / rec.extra["query_path"], rec.query_id, period)
        rec.check_duration(target.duration)
        items.append(PairExample(target, query, rec, int(rec.extra.get("class_id", -1))))
    return items


def load_pretrain_videos(data_dir):
    root = Path(data_dir)
    manifest = read_manifest(root)
    return [load_features(root / d["path"], d["video_id"], float(d["frame_period_sec"]))
            for d in read_jsonl(root / manifest["pretrain"]["videos"])]
