"""Feature datasets: synthetic generator, feature store, splits and batching."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STORE_MAGIC = b"ARGF0001"
STORE_VERSION = 1
CLIPS_PER_VIDEO = 10

SPLIT_MODES = ("exclude_both", "include_scenario", "include_location", "include_union", "include_pair")


class FeatureStoreError(ValueError):
    """Bad magic, truncated payload, or anything unreadable."""


class ConsistencyError(FeatureStoreError):
    """Index and binary payload disagree."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    clip_id: str
    video_feat: np.ndarray
    text_feat: np.ndarray
    class_id: int
    scenario_id: int
    location_id: int
    video_id: str


@dataclass
class Batch:
    ids: np.ndarray
    video: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    scenario: np.ndarray
    location: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Dataset:
    """Column-oriented feature dataset; a sample's id is its row index."""

    video: np.ndarray
    text: np.ndarray
    class_id: np.ndarray
    scenario_id: np.ndarray
    location_id: np.ndarray
    clip_id: list[str]
    video_id: list[str]
    num_classes: int
    num_scenarios: int
    num_locations: int

    def __post_init__(self):
        n = self.video.shape[0]
        for name in ("text", "class_id", "scenario_id", "location_id"):
            if getattr(self, name).shape[0] != n:
                raise ConsistencyError(f"column {name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if len(self.clip_id) != n or len(self.video_id) != n:
            raise ConsistencyError("clip_id / video_id lengths disagree with feature rows")
        for name, bound in (
            ("class_id", self.num_classes),
            ("scenario_id", self.num_scenarios),
            ("location_id", self.num_locations),
        ):
            col = getattr(self, name)
            if n and (col.min() < 0 or col.max() >= bound):
                raise ConsistencyError(f"{name} outside [0, {bound})")

    def __len__(self) -> int:
        return self.video.shape[0]

    @property
    def video_dim(self) -> int:
        return self.video.shape[1]

    @property
    def text_dim(self) -> int:
        return self.text.shape[1]

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(
            clip_id=self.clip_id[i],
            video_feat=self.video[i],
            text_feat=self.text[i],
            class_id=int(self.class_id[i]),
            scenario_id=int(self.scenario_id[i]),
            location_id=int(self.location_id[i]),
            video_id=self.video_id[i],
        )

    def batch(self, ids: Sequence[int]) -> Batch:
        ids = np.asarray(ids, dtype=np.int64)
        return Batch(
            ids=ids,
            video=self.video[ids],
            text=self.text[ids],
            labels=self.class_id[ids],
            scenario=self.scenario_id[ids],
            location=self.location_id[ids],
        )

    def subset(self, ids: Sequence[int]) -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(
            video=self.video[ids],
            text=self.text[ids],
            class_id=self.class_id[ids],
            scenario_id=self.scenario_id[ids],
            location_id=self.location_id[ids],
            clip_id=[self.clip_id[i] for i in ids],
            video_id=[self.video_id[i] for i in ids],
            num_classes=self.num_classes,
            num_scenarios=self.num_scenarios,
            num_locations=self.num_locations,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.video, other.video)
            and np.array_equal(self.text, other.text)
            and np.array_equal(self.class_id, other.class_id)
            and np.array_equal(self.scenario_id, other.scenario_id)
            and np.array_equal(self.location_id, other.location_id)
            and self.clip_id == other.clip_id
            and self.video_id == other.video_id
            and (self.num_classes, self.num_scenarios, self.num_locations)
            == (other.num_classes, other.num_scenarios, other.num_locations)
        )


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 5
    num_scenarios: int = 4
    num_locations: int = 4
    samples_per_cell: int = 200
    video_dim: int = 32
    text_dim: int = 16
    class_signal: float = 1.0
    scenario_shift: float = 1.0
    location_shift: float = 1.0
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "num_scenarios", "num_locations", "samples_per_cell", "video_dim", "text_dim"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2, got {getattr(self, name)}")
        for name in ("class_signal", "scenario_shift", "location_shift", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class, scenario and location prototypes plus Gaussian noise.

    Every (scenario, location) cell holds ``samples_per_cell`` clips with
    classes cycling through ``0..C-1``, grouped into videos of ten clips.
    Text features carry the class only, never the domain.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    c, s, l = spec.num_classes, spec.num_scenarios, spec.num_locations
    class_proto = rng.standard_normal((c, spec.video_dim))
    scen_proto = rng.standard_normal((s, spec.video_dim))
    loc_proto = rng.standard_normal((l, spec.video_dim))
    text_proto = rng.standard_normal((c, spec.text_dim))

    n_cell = spec.samples_per_cell
    labels = np.arange(n_cell) % c
    cls, scen, loc, clip_ids, video_ids = [], [], [], [], []
    for si in range(s):
        for li in range(l):
            cls.append(labels)
            scen.append(np.full(n_cell, si))
            loc.append(np.full(n_cell, li))
            for k in range(n_cell):
                clip_ids.append(f"s{si}-l{li}-c{k:05d}")
                video_ids.append(f"s{si}-l{li}-v{k // CLIPS_PER_VIDEO:04d}")
    y = np.concatenate(cls)
    sc = np.concatenate(scen)
    lo = np.concatenate(loc)
    n = y.shape[0]
    video = (
        class_proto[y] * spec.class_signal
        + scen_proto[sc] * spec.scenario_shift
        + loc_proto[lo] * spec.location_shift
        + rng.standard_normal((n, spec.video_dim)) * spec.noise
    )
    text = text_proto[y] * spec.class_signal + rng.standard_normal((n, spec.text_dim)) * (spec.noise * 0.5)
    return Dataset(
        video=video,
        text=text,
        class_id=y.astype(np.int64),
        scenario_id=sc.astype(np.int64),
        location_id=lo.astype(np.int64),
        clip_id=clip_ids,
        video_id=video_ids,
        num_classes=c,
        num_scenarios=s,
        num_locations=l,
    )


# ---------------------------------------------------------------- feature store


def _write_matrix(path: Path, mat: np.ndarray) -> None:
    rows, width = mat.shape
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(np.array([rows, width], dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def _read_matrix(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:8] != STORE_MAGIC:
        raise FeatureStoreError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 24:
        raise FeatureStoreError(f"{path}: truncated header")
    rows, width = (int(v) for v in np.frombuffer(raw[8:24], dtype="<u8"))
    payload = raw[24:]
    if len(payload) != rows * width * 8:
        raise ConsistencyError(f"{path}: header declares {rows}x{width} floats but payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, width).astype(np.float64)


def write_feature_store(dataset: Dataset, path: str | os.PathLike) -> Path:
    """Write ``index.jsonl`` plus one float matrix file per modality."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_matrix(root / "video.bin", dataset.video)
    _write_matrix(root / "text.bin", dataset.text)
    header = {
        "format": "ARGF",
        "version": STORE_VERSION,
        "rows": len(dataset),
        "video_dim": dataset.video_dim,
        "text_dim": dataset.text_dim,
        "num_classes": dataset.num_classes,
        "num_scenarios": dataset.num_scenarios,
        "num_locations": dataset.num_locations,
    }
    with open(root / "index.jsonl", "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(dataset)):
            row = {
                "clip_id": dataset.clip_id[i],
                "class_id": int(dataset.class_id[i]),
                "scenario_id": int(dataset.scenario_id[i]),
                "location_id": int(dataset.location_id[i]),
                "video_id": dataset.video_id[i],
                "row": i,
            }
            fh.write(json.dumps(row) + "\n")
    return root


def read_feature_store(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    try:
        lines = (root / "index.jsonl").read_text().splitlines()
    except FileNotFoundError as exc:
        raise FeatureStoreError(f"{root}: no index.jsonl") from exc
    if not lines:
        raise FeatureStoreError(f"{root}: empty index")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise FeatureStoreError(f"{root}: malformed index ({exc})") from exc
    if header.get("format") != "ARGF" or header.get("version") != STORE_VERSION:
        raise FeatureStoreError(f"{root}: unsupported index header {header}")
    video = _read_matrix(root / "video.bin")
    text = _read_matrix(root / "text.bin")
    n = header["rows"]
    if len(rows) != n or video.shape[0] != n or text.shape[0] != n:
        raise ConsistencyError(
            f"{root}: index has {len(rows)} records (header says {n}), payloads have {video.shape[0]} / {text.shape[0]} rows"
        )
    if video.shape[1] != header["video_dim"] or text.shape[1] != header["text_dim"]:
        raise ConsistencyError(f"{root}: payload widths {video.shape[1]}/{text.shape[1]} disagree with index header")
    order = np.array([r["row"] for r in rows], dtype=np.int64)
    if not np.array_equal(np.sort(order), np.arange(n)):
        raise ConsistencyError(f"{root}: row offsets are not a permutation of 0..{n - 1}")
    return Dataset(
        video=video[order],
        text=text[order],
        class_id=np.array([r["class_id"] for r in rows], dtype=np.int64),
        scenario_id=np.array([r["scenario_id"] for r in rows], dtype=np.int64),
        location_id=np.array([r["location_id"] for r in rows], dtype=np.int64),
        clip_id=[r["clip_id"] for r in rows],
        video_id=[r["video_id"] for r in rows],
        num_classes=header["num_classes"],
        num_scenarios=header["num_scenarios"],
        num_locations=header["num_locations"],
    )


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    """Held-out (scenario, location) pair and which neighbours training may see.

    ``exclude_both``      neither the scenario nor the location
    ``include_scenario``  plus (held scenario, other locations)
    ``include_location``  plus (other scenarios, held location)
    ``include_union``     plus both of the above
    ``include_pair``      everything except the test clips

    With ``test_fraction < 1`` only a seeded, video-level share of the held
    cell is tested on; ``include_pair`` then also trains on the rest of that
    cell. The test set never depends on ``mode``.
    """

    held_scenario: int
    held_location: int
    mode: str = "exclude_both"
    test_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {self.mode!r}; expected one of {SPLIT_MODES}")
        if not 0.0 < self.test_fraction <= 1.0:
            raise ValueError(f"test_fraction must lie in (0, 1], got {self.test_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_mode(self, mode: str) -> "SplitSpec":
        return replace(self, mode=mode)

    @property
    def name(self) -> str:
        return f"s{self.held_scenario}-l{self.held_location}-{self.mode}"


def make_split(dataset: Dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    same_s = dataset.scenario_id == spec.held_scenario
    same_l = dataset.location_id == spec.held_location
    cell = same_s & same_l
    if not cell.any():
        raise SplitError(f"no samples in held cell (scenario={spec.held_scenario}, location={spec.held_location})")
    test = cell.copy()
    if spec.test_fraction < 1.0:
        cell_ids = np.flatnonzero(cell)
        _, val = validation_split(dataset, cell_ids, spec.test_fraction, spec.seed)
        test[:] = False
        test[val] = True
    if spec.mode == "exclude_both":
        train = ~same_s & ~same_l
    elif spec.mode == "include_scenario":
        train = ~same_l
    elif spec.mode == "include_location":
        train = ~same_s
    elif spec.mode == "include_union":
        train = ~cell
    else:
        train = ~test
    train_ids = np.flatnonzero(train)
    if train_ids.size == 0:
        raise SplitError(f"split {spec.name} leaves an empty training set")
    return train_ids, np.flatnonzero(test)


def validation_split(
    dataset: Dataset, train_ids: Sequence[int], fraction: float = 0.10, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Hold out whole videos until at least ``fraction`` of the clips are in validation."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    groups: dict[str, list[int]] = {}
    for i in train_ids:
        groups.setdefault(dataset.video_id[i], []).append(int(i))
    if len(groups) < 2:
        raise SplitError("validation split needs at least two distinct videos")
    videos = sorted(groups)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(videos))
    target = fraction * train_ids.size
    val: list[int] = []
    taken = 0
    for k in order:
        if len(val) >= target or taken == len(videos) - 1:
            break
        val.extend(groups[videos[k]])
        taken += 1
    val_ids = np.array(sorted(val), dtype=np.int64)
    rest = np.setdiff1d(train_ids, val_ids)
    return rest, val_ids


def write_split_manifest(path: str | os.PathLike, spec: SplitSpec, train_ids, test_ids, val_ids=None) -> None:
    doc = {"spec": spec.to_dict(), "train": sorted(int(i) for i in train_ids), "test": sorted(int(i) for i in test_ids)}
    if val_ids is not None:
        doc["val"] = sorted(int(i) for i in val_ids)
    Path(path).write_text(json.dumps(doc))


def read_split_manifest(path: str | os.PathLike) -> tuple[SplitSpec, np.ndarray, np.ndarray, np.ndarray | None]:
    doc = json.loads(Path(path).read_text())
    val = doc.get("val")
    return (
        SplitSpec(**doc["spec"]),
        np.array(doc["train"], dtype=np.int64),
        np.array(doc["test"], dtype=np.int64),
        None if val is None else np.array(val, dtype=np.int64),
    )


# ---------------------------------------------------------------- batching


def batch_iter(ids: Sequence[int], batch_size: int = 128, seed: int = 0, epoch: int = 0) -> Iterator[np.ndarray]:
    """Seeded per-epoch shuffle; a trailing batch of fewer than 2 ids is dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    ids = np.asarray(ids, dtype=np.int64)
    rng = np.random.Generator(np.random.PCG64([int(seed), int(epoch)]))
    perm = ids[rng.permutation(ids.size)]
    for start in range(0, perm.size, batch_size):
        chunk = perm[start : start + batch_size]
        if chunk.size < 2:
            break
        yield chunk


@dataclass
class BatchComposition:
    same_scenario: float = 0.0
    same_location: float = 0.0
    same_both: float = 0.0
    pairs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def batch_composition(dataset: Dataset, batches: Sequence[np.ndarray]) -> BatchComposition:
    """Fraction of ordered non-self pairs sharing scenario, location, or both."""
    ss = sl = both = total = 0
    for ids in batches:
        s = dataset.scenario_id[ids]
        l = dataset.location_id[ids]
        off = ~np.eye(len(ids), dtype=bool)
        eq_s = (s[:, None] == s[None, :]) & off
        eq_l = (l[:, None] == l[None, :]) & off
        ss += int(eq_s.sum())
        sl += int(eq_l.sum())
        both += int((eq_s & eq_l).sum())
        total += int(off.sum())
    if total == 0:
        return BatchComposition()
    return BatchComposition(ss / total, sl / total, both / total, total)
