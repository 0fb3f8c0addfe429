"""Evaluation metrics and the metrics CSV: success rate, SPL (success
weighted by inverse normalized path length), and cross-entropy loss.

Success rate is the mean over maps of the fraction of free starts whose
greedy rollout reaches the goal; SPL averages success * (l / max(p, l)) per
start the same way (l = BFS shortest length, p = rollout length), so
SPL <= success rate holds term by term.  Goal-cell starts are excluded.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datasets import NO_ACTION, Sample, bfs_distances
from .planner import (OccupancyMap, PlannerModel, build_spatial_mdp, exact_value_iteration,
                      extract_policy, map_to_channels, planner_forward, predict_logits,
                      rollout_all)

CSV_HEADER = ("epoch", "split", "loss", "success_rate", "spl", "wall_seconds")


@dataclass(frozen=True)
class MetricsRow:
    """One reporting row; success_rate and spl are percentages in [0, 100]."""

    epoch: int
    split: str
    loss: float
    success_rate: float
    spl: float
    wall_seconds: float

    def as_record(self) -> list[str]:
        return [str(self.epoch), self.split, repr(float(self.loss)),
                repr(float(self.success_rate)), repr(float(self.spl)),
                repr(float(self.wall_seconds))]


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.as_record())


def append_metrics_row(row: MetricsRow, path, write_header: bool = False) -> None:
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(CSV_HEADER)
        writer.writerow(row.as_record())


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {header}")
        return [MetricsRow(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5]))
                for r in reader]


def format_metrics_row(row: MetricsRow) -> str:
    return (f"epoch {row.epoch:3d} [{row.split:5s}] loss {row.loss:.6f} "
            f"success {row.success_rate:6.2f}% spl {row.spl:6.2f}% "
            f"({row.wall_seconds:.1f}s)")


# ---------------------------------------------------------------------------
# Policy evaluation


def evaluate_policy(policy: np.ndarray, m: OccupancyMap, torus: bool = False) -> tuple[float, float]:
    """(success fraction, SPL fraction) over all free non-goal starts."""
    dist = bfs_distances(m.occupancy, m.goal, torus)
    success, steps = rollout_all(policy, m, torus)
    starts = ~m.occupancy
    starts[m.goal] = False
    n = int(starts.sum())
    if n == 0:
        return 0.0, 0.0
    ok = success[starts]
    shortest = dist[starts].astype(np.float64)
    achieved = steps[starts].astype(np.float64)
    spl = np.where(ok, shortest / np.maximum(shortest, np.where(ok, achieved, 1.0)), 0.0)
    return float(ok.mean()), float(spl.mean())


def _aggregate(per_map: list[tuple[float, float]]) -> tuple[float, float]:
    succ = 100.0 * float(np.mean([s for s, _ in per_map]))
    spl = 100.0 * float(np.mean([p for _, p in per_map]))
    return succ, spl


def labels_and_mask(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    y = np.stack([s.expert for s in samples])
    return y, y != NO_ACTION


def samples_to_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """(n, H, W, 2) input channels and (n, H, W) expert labels."""
    X = np.stack([map_to_channels(s.map) for s in samples])
    y = np.stack([s.expert for s in samples])
    return X, y


def evaluate_model(model: PlannerModel, samples: list[Sample], torus: bool = False,
                   batch_size: int = 32, k_override: int | None = None) -> dict:
    """Loss, success rate (%), and SPL (%) of a planner on labeled samples."""
    X, y = samples_to_arrays(samples)
    logits = predict_logits(model, X, batch_size=batch_size, k_override=k_override)
    mask = y != NO_ACTION
    loss = ad.softmax_ce(ad.constant(logits), y, mask).value
    per_map = [evaluate_policy(extract_policy(logits[i]), s.map, torus)
               for i, s in enumerate(samples)]
    succ, spl = _aggregate(per_map)
    return {"loss": float(loss), "success_rate": succ, "spl": spl}


def evaluate_oracle(samples: list[Sample], torus: bool = False, gamma: float = 1.0,
                    step_cost: float = -1.0) -> dict:
    """Success rate and SPL of exact value iteration's greedy policy."""
    per_map = []
    for s in samples:
        mdp = build_spatial_mdp(s.map, gamma=gamma, step_cost=step_cost, torus=torus)
        _, _, policy = exact_value_iteration(mdp)
        per_map.append(evaluate_policy(policy, s.map, torus))
    succ, spl = _aggregate(per_map)
    return {"loss": float("nan"), "success_rate": succ, "spl": spl}


def masked_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of unmasked cells whose argmax action matches the label."""
    mask = labels != NO_ACTION
    if not mask.any():
        return 0.0
    pred = np.argmax(logits, axis=-1)
    return float((pred[mask] == labels[mask]).mean())
