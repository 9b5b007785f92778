"""LiDAR sequence storage and the two pair-sampling regimes.

Progressive sampling draws a random frame interval bounded by a schedule and
never touches poses. Traditional sampling picks pairs by the metric distance
between the two sensor positions and needs ground truth.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fileio
from .errors import MalformedFile, NoPairInRange, OutOfRange, SequenceTooShort
from .geom import PointCloud, Pose, compose, inverse


@dataclass(frozen=True)
class IntervalSchedule:
    b_start: int = 1
    b_end: int = 30
    total_epochs: int = 200
    step_size: int = 1

    def __post_init__(self):
        if not 1 <= self.b_start <= self.b_end:
            raise ValueError("need 1 <= b_start <= b_end")
        if self.step_size < 1 or self.total_epochs < 1:
            raise ValueError("step_size and total_epochs must be >= 1")


def bound_at(schedule: IntervalSchedule, epoch: int) -> int:
    """Frame-interval bound for ``epoch``.

    The range ``[b_start, b_end]`` is covered in ``ceil(span / step)`` raises
    spread evenly over the epochs: ``B(e) = min(b_end, b_start + step *
    floor(e * (n_raises + 1) / total_epochs))``. With the defaults this is
    ``min(30, 1 + floor(30 e / 200))``.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    n_raises = math.ceil((schedule.b_end - schedule.b_start) / schedule.step_size)
    level = (epoch * (n_raises + 1)) // schedule.total_epochs
    return min(schedule.b_end, schedule.b_start + schedule.step_size * level)


@dataclass(frozen=True)
class PairSample:
    src_frame: int
    dst_frame: int
    interval: int
    true_pose: Optional[Pose] = None
    sequence: int = 0

    def __post_init__(self):
        if self.dst_frame - self.src_frame != self.interval or self.interval < 1:
            raise ValueError("interval must equal dst_frame - src_frame and be >= 1")


@dataclass
class SequenceStore:
    """Frames of one sequence as lazy file handles, plus optional sensor-to-world poses."""

    frames: list
    poses: Optional[list] = None
    source: Optional[Path] = None
    stride: int = 3
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.poses is not None and len(self.poses) != len(self.frames):
            raise ValueError(f"{len(self.poses)} poses for {len(self.frames)} frames")

    def __len__(self):
        return len(self.frames)

    def load(self, i: int) -> PointCloud:
        cloud = self._cache.get(i)
        if cloud is None:
            cloud = PointCloud(fileio.read_cloud(self.frames[i], self.stride), i)
            self._cache[i] = cloud
        return cloud

    def relative_pose(self, src: int, dst: int) -> Pose:
        """Pose taking frame ``src`` coordinates into frame ``dst``."""
        if self.poses is None:
            raise ValueError("sequence has no poses")
        return compose(self.poses[src], inverse(self.poses[dst]))

    def without_poses(self) -> "SequenceStore":
        return SequenceStore(list(self.frames), None, self.source, self.stride, self.name)


def ingest(path, stride: int = 3, load_poses: bool = True) -> SequenceStore:
    """Open a sequence directory of ``NNNNNN.bin`` files and an optional ``poses.txt``.

    Every frame file is size-checked up front; point data is read on demand.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {path}")
    frames = sorted(p for p in path.iterdir() if p.suffix == ".bin")
    record = 4 * stride
    for f in frames:
        size = os.path.getsize(f)
        if size % record:
            raise MalformedFile(f, size - size % record, f"trailing partial record of {size % record} bytes")
    poses = None
    pose_path = path / fileio.POSE_FILE
    if load_poses and pose_path.exists():
        poses = fileio.read_poses(pose_path)
        if len(poses) != len(frames):
            raise MalformedFile(pose_path, pose_path.stat().st_size,
                                f"{len(poses)} poses for {len(frames)} frames")
    return SequenceStore(frames, poses, path, stride, path.name)


def ingest_corpus(root, stride: int = 3, load_poses: bool = True) -> list:
    """One store per sequence subdirectory; a directory holding frames is a single sequence."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    if any(p.suffix == ".bin" for p in root.iterdir()):
        return [ingest(root, stride, load_poses)]
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    stores = [ingest(d, stride, load_poses) for d in subdirs]
    stores = [s for s in stores if len(s)]
    if not stores:
        raise FileNotFoundError(f"no sequences under {root}")
    return stores


def sample_progressive(store: SequenceStore, bound: int, rng: np.random.Generator, sequence: int = 0) -> PairSample:
    """Uniform interval in ``[1, bound]`` (clamped to the sequence length), uniform source frame."""
    n = len(store)
    if n < 2:
        raise SequenceTooShort(f"sequence has {n} frame(s); need at least 2")
    top = max(1, min(int(bound), n - 1))
    interval = int(rng.integers(1, top + 1))
    src = int(rng.integers(0, n - interval))
    return PairSample(src, src + interval, interval, None, sequence)


def sample_progressive_corpus(stores: Sequence[SequenceStore], bound: int, rng: np.random.Generator) -> PairSample:
    k = int(rng.integers(0, len(stores)))
    return sample_progressive(stores[k], bound, rng, sequence=k)


def _sensor_positions(store: SequenceStore) -> np.ndarray:
    if store.poses is None:
        raise ValueError(f"sequence {store.name!r} has no poses")
    return np.array([p.translation for p in store.poses])


def traditional_candidates(stores: Sequence[SequenceStore], d_min: float, d_max: float) -> list:
    """All forward pairs ``(sequence, i, j)``, ``i < j``, with sensor distance in ``[d_min, d_max]``."""
    out = []
    for k, store in enumerate(stores):
        pos = _sensor_positions(store)
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        ii, jj = np.nonzero(np.triu((d >= d_min) & (d <= d_max), k=1))
        out.extend((k, int(i), int(j)) for i, j in zip(ii, jj))
    return out


def _pair(stores, k, i, j) -> PairSample:
    return PairSample(i, j, j - i, stores[k].relative_pose(i, j), k)


def sample_traditional(store: SequenceStore, d_min: float, d_max: float, rng: np.random.Generator) -> PairSample:
    cands = traditional_candidates([store], d_min, d_max)
    if not cands:
        raise NoPairInRange(f"no frame pair with sensor distance in [{d_min}, {d_max}] m")
    k, i, j = cands[int(rng.integers(0, len(cands)))]
    return _pair([store], k, i, j)


def sample_traditional_set(stores: Sequence[SequenceStore], d_min: float, d_max: float, n: int,
                           rng: np.random.Generator) -> list:
    """Up to ``n`` distinct pairs in the distance range, drawn without replacement."""
    cands = traditional_candidates(stores, d_min, d_max)
    if not cands:
        raise NoPairInRange(f"no frame pair with sensor distance in [{d_min}, {d_max}] m")
    pick = rng.choice(len(cands), size=min(n, len(cands)), replace=False)
    return [_pair(stores, *cands[int(c)]) for c in pick]
