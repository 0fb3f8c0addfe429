"""Task generators and labelers: random mazes, 2-DOF manipulator configuration
spaces on a torus, breadth-first expert policies, and the on-disk dataset
container.

Generation is deterministic: every map draws from its own substream derived
from (seed, split, index, attempt) via numpy seed sequences, so splits are
disjoint and generation parallelizes per map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .groups import ACTION_DELTAS
from .planner import OccupancyMap

DATASET_MAGIC = b"SYMP"
DATASET_VERSION = 1
TASKS = ("nav2d", "manip2d")
SPLIT_IDS = {"train": 0, "val": 1, "test": 2, "eval": 3}

#: label value on obstacle and goal cells, where no expert action exists
NO_ACTION = 255


class DatasetError(ValueError):
    """Base class for dataset generation and container errors."""


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class MazeSpec:
    """One random maze: i.i.d. obstacles at `obstacle_density`, goal uniform
    over free cells, unreachable free cells converted to obstacles."""

    size: int
    obstacle_density: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if self.size < 3:
            raise DatasetError("maze size must be at least 3")
        if not 0.0 <= self.obstacle_density < 1.0:
            raise DatasetError("obstacle density must lie in [0, 1)")


@dataclass(frozen=True)
class ManipSpec:
    """One random 2-DOF manipulation task: rectangular workspace obstacles and
    the discretization of the joint-angle torus."""

    bins: int = 18
    num_obstacles: int = 3
    workspace_resolution: int = 96
    link_lengths: tuple[float, float] = (24.0, 24.0)
    base_clearance: float = 8.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.bins not in (18, 36):
            raise DatasetError("bins must be 18 or 36")
        if not 0 <= self.num_obstacles <= 5:
            raise DatasetError("num_obstacles must lie in [0, 5]")
        if min(self.link_lengths) <= 0:
            raise DatasetError("link lengths must be positive")


@dataclass(frozen=True)
class Sample:
    """A map plus its per-cell expert actions (NO_ACTION on obstacle/goal)."""

    map: OccupancyMap
    expert: np.ndarray

    def __post_init__(self):
        expert = np.asarray(self.expert, dtype=np.uint8).copy()
        if expert.shape != self.map.shape:
            raise DatasetError("expert labels do not match the map shape")
        expert.setflags(write=False)
        object.__setattr__(self, "expert", expert)


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------------------
# Breadth-first search over the 4-connected free graph


def bfs_distances(occupancy: np.ndarray, goal: tuple[int, int], torus: bool = False) -> np.ndarray:
    """Shortest step counts from every free cell to the goal; -1 where
    unreachable (and on obstacles)."""
    occ = np.asarray(occupancy, dtype=bool)
    H, W = occ.shape
    if occ[goal]:
        raise DatasetError("goal cell is an obstacle")
    dist = np.full((H, W), -1, dtype=np.int64)
    dist[goal] = 0
    frontier = np.zeros((H, W), dtype=bool)
    frontier[goal] = True
    d = 0
    while frontier.any():
        d += 1
        reach = np.zeros((H, W), dtype=bool)
        for di, dj in ACTION_DELTAS:
            if torus:
                reach |= np.roll(frontier, (di, dj), axis=(0, 1))
            else:
                shifted = np.zeros((H, W), dtype=bool)
                src_i = slice(max(-di, 0), H + min(-di, 0))
                src_j = slice(max(-dj, 0), W + min(-dj, 0))
                dst_i = slice(max(di, 0), H + min(di, 0))
                dst_j = slice(max(dj, 0), W + min(dj, 0))
                shifted[dst_i, dst_j] = frontier[src_i, src_j]
                reach |= shifted
        frontier = reach & ~occ & (dist < 0)
        dist[frontier] = d
    return dist


def expert_labels(m: OccupancyMap, torus: bool = False) -> np.ndarray:
    """BFS expert policy: each free cell takes the first action in (N, W, S, E)
    order that steps to a strictly closer cell; NO_ACTION elsewhere."""
    H, W = m.shape
    dist = bfs_distances(m.occupancy, m.goal, torus)
    labels = np.full((H, W), NO_ACTION, dtype=np.uint8)
    for a, (di, dj) in enumerate(ACTION_DELTAS):
        if torus:
            ndist = np.roll(dist, (-di, -dj), axis=(0, 1))
        else:
            ndist = np.full((H, W), -1, dtype=np.int64)
            src_i = slice(max(di, 0), H + min(di, 0))
            src_j = slice(max(dj, 0), W + min(dj, 0))
            dst_i = slice(max(-di, 0), H + min(-di, 0))
            dst_j = slice(max(-dj, 0), W + min(-dj, 0))
            ndist[dst_i, dst_j] = dist[src_i, src_j]
        take = (labels == NO_ACTION) & (dist > 0) & (ndist >= 0) & (ndist == dist - 1)
        labels[take] = a
    return labels


# ---------------------------------------------------------------------------
# Navigation mazes


def gen_maze(spec: MazeSpec, max_attempts: int = 64) -> OccupancyMap:
    """Deterministic random maze; degenerate draws fall through to the next
    substream, with bounded retries."""
    m = spec.size
    for attempt in range(max_attempts):
        rng = _substream(spec.rng_seed, attempt)
        occ = rng.random((m, m)) < spec.obstacle_density
        free = np.argwhere(~occ)
        if len(free) < 2:
            continue
        goal = tuple(free[rng.integers(len(free))])
        dist = bfs_distances(occ, goal)
        occ = occ | (dist < 0)
        occ[goal] = False
        if int((~occ).sum()) >= 2:
            return OccupancyMap(occ, goal)
    raise DatasetError(f"no solvable maze after {max_attempts} attempts (seed {spec.rng_seed})")


# ---------------------------------------------------------------------------
# 2-DOF manipulation


def gen_workspace(spec: ManipSpec) -> np.ndarray:
    """Random axis-aligned rectangular obstacles in a square workspace,
    excluded from a clearance disk around the centered manipulator base."""
    res = spec.workspace_resolution
    rng = _substream(spec.rng_seed, 0)
    occ = np.zeros((res, res), dtype=bool)
    center = (res - 1) / 2.0
    ii, jj = np.mgrid[0:res, 0:res]
    in_disk = (ii - center) ** 2 + (jj - center) ** 2 <= spec.base_clearance ** 2
    placed = 0
    attempts = 0
    while placed < spec.num_obstacles and attempts < 200:
        attempts += 1
        h = int(rng.integers(8, 28))
        w = int(rng.integers(8, 28))
        i0 = int(rng.integers(0, res - h))
        j0 = int(rng.integers(0, res - w))
        rect = np.zeros((res, res), dtype=bool)
        rect[i0:i0 + h, j0:j0 + w] = True
        if (rect & in_disk).any():
            continue
        occ |= rect
        placed += 1
    return occ


def workspace_to_cspace(workspace: np.ndarray, bins: int,
                        link_lengths: tuple[float, float] = (24.0, 24.0),
                        samples_per_link: int = 256) -> np.ndarray:
    """Discretized configuration-space occupancy of a 2-link arm.

    Cell (t1, t2) is occupied iff either link, posed at the bin-center angles,
    passes over an occupied workspace pixel (dense point sampling along each
    link).  Both angle axes wrap, so the result lives on a torus.
    """
    workspace = np.asarray(workspace, dtype=bool)
    res = workspace.shape[0]
    center = (res - 1) / 2.0
    L1, L2 = link_lengths
    thetas = (np.arange(bins) + 0.5) * (2.0 * np.pi / bins)
    ts = np.linspace(0.0, 1.0, samples_per_link)

    def hits(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Any sampled point (last axis) over an occupied pixel."""
        ri = np.rint(rows).astype(np.int64)
        ci = np.rint(cols).astype(np.int64)
        inside = (ri >= 0) & (ri < res) & (ci >= 0) & (ci < res)
        ri, ci = np.clip(ri, 0, res - 1), np.clip(ci, 0, res - 1)
        return (workspace[ri, ci] & inside).any(axis=-1)

    # +theta is counterclockwise on screen: x along columns, y up along -rows.
    cos1, sin1 = np.cos(thetas), np.sin(thetas)
    link1_rows = center - np.outer(sin1, ts * L1)
    link1_cols = center + np.outer(cos1, ts * L1)
    link1_hit = hits(link1_rows, link1_cols)  # (bins,)

    elbow_r = center - L1 * sin1
    elbow_c = center + L1 * cos1
    abs2 = thetas[:, None] + thetas[None, :]  # theta2 is relative to link 1
    rows2 = elbow_r[:, None, None] - np.sin(abs2)[..., None] * (ts * L2)
    cols2 = elbow_c[:, None, None] + np.cos(abs2)[..., None] * (ts * L2)
    link2_hit = hits(rows2, cols2)  # (bins, bins)

    return link1_hit[:, None] | link2_hit


def gen_cspace_map(spec: ManipSpec, max_attempts: int = 64) -> OccupancyMap:
    """A solvable torus C-space task: random workspace, C-space conversion,
    uniform goal over free cells, unreachable pockets filled in."""
    for attempt in range(max_attempts):
        sub = ManipSpec(spec.bins, spec.num_obstacles, spec.workspace_resolution,
                        spec.link_lengths, spec.base_clearance,
                        rng_seed=int(_substream(spec.rng_seed, 100 + attempt).integers(2 ** 63)))
        occ = workspace_to_cspace(gen_workspace(sub), spec.bins, spec.link_lengths)
        free = np.argwhere(~occ)
        if len(free) < 2:
            continue
        rng = _substream(sub.rng_seed, 1)
        goal = tuple(free[rng.integers(len(free))])
        dist = bfs_distances(occ, goal, torus=True)
        occ = occ | (dist < 0)
        occ[goal] = False
        if int((~occ).sum()) >= 2:
            return OccupancyMap(occ, goal)
    raise DatasetError(f"no solvable C-space after {max_attempts} attempts (seed {spec.rng_seed})")


# ---------------------------------------------------------------------------
# Dataset assembly


def derived_seed(seed: int, *key: int) -> int:
    """A u64 child seed for an independent substream keyed by integers."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1, np.uint64)[0])


def generate_dataset(task: str, size: int, count: int, seed: int, split: str = "train",
                     density: float = 0.3) -> list[Sample]:
    """Generate `count` labeled samples on the split's disjoint substream."""
    if task not in TASKS:
        raise DatasetError(f"unknown task {task!r}; expected one of {TASKS}")
    split_id = SPLIT_IDS[split]
    torus = task == "manip2d"
    samples = []
    for idx in range(count):
        child = derived_seed(seed, split_id, idx)
        if task == "nav2d":
            m = gen_maze(MazeSpec(size, density, rng_seed=child))
        else:
            rng = _substream(child, 2)
            m = gen_cspace_map(ManipSpec(bins=size, num_obstacles=int(rng.integers(0, 6)),
                                         rng_seed=child))
        samples.append(Sample(m, expert_labels(m, torus)))
    return samples


def generate_from_manifest(manifest: dict) -> list[Sample]:
    """Regenerate a split exactly as recorded by its sidecar manifest."""
    return generate_dataset(manifest["task"], int(manifest["size"]), int(manifest["count"]),
                            int(manifest["seed"]), manifest["split"],
                            float(manifest["density"]))


# ---------------------------------------------------------------------------
# Binary container: magic "SYMP", u32 version, u32 task id (0 nav, 1 manip),
# u32 count, u32 H, u32 W, then per sample H*W occupancy bytes, H*W goal
# bytes, H*W expert bytes; little-endian throughout.


@dataclass
class Dataset:
    task: str
    samples: list[Sample]
    manifest: dict = field(default_factory=dict)

    @property
    def torus(self) -> bool:
        return self.task == "manip2d"


def write_dataset(samples: list[Sample], path, task: str = "nav2d",
                  manifest: dict | None = None) -> None:
    if task not in TASKS:
        raise DatasetError(f"unknown task {task!r}")
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    H, W = samples[0].map.shape
    for s in samples:
        if s.map.shape != (H, W):
            raise DatasetError("samples must share one map shape")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIII", DATASET_VERSION, TASKS.index(task), len(samples), H, W))
        for s in samples:
            goal = np.zeros((H, W), dtype=np.uint8)
            goal[s.map.goal] = 1
            fh.write(s.map.occupancy.astype(np.uint8).tobytes())
            fh.write(goal.tobytes())
            fh.write(s.expert.tobytes())
    if manifest is not None:
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad dataset magic")
    if len(data) < 24:
        raise TruncatedDatasetError(f"{path}: truncated dataset header")
    version, task_id, count, H, W = struct.unpack("<IIIII", data[4:24])
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"{path}: unsupported dataset version {version}")
    if task_id >= len(TASKS):
        raise DatasetError(f"{path}: unknown task id {task_id}")
    cell = H * W
    expected = 24 + count * 3 * cell
    if len(data) != expected:
        raise TruncatedDatasetError(f"{path}: expected {expected} bytes, found {len(data)}")
    samples = []
    off = 24
    for _ in range(count):
        occ = np.frombuffer(data, dtype=np.uint8, count=cell, offset=off).reshape(H, W)
        goal_map = np.frombuffer(data, dtype=np.uint8, count=cell, offset=off + cell).reshape(H, W)
        expert = np.frombuffer(data, dtype=np.uint8, count=cell, offset=off + 2 * cell).reshape(H, W)
        goals = np.argwhere(goal_map == 1)
        if len(goals) != 1:
            raise DatasetError(f"{path}: sample without a unique goal")
        samples.append(Sample(OccupancyMap(occ.astype(bool), tuple(goals[0])), expert.copy()))
        off += 3 * cell
    manifest = {}
    try:
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        pass
    return Dataset(TASKS[task_id], samples, manifest)
