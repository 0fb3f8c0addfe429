"""Scikit-learn style estimator around the differentiable planners.

``GridPathPlanner`` is a supervised per-cell action predictor: ``fit`` takes
(n, H, W, 2) map channels and (n, H, W) expert action labels, trains the
configured VIN or SymVIN with RMSprop, and ``predict`` returns greedy action
grids.  Parameters follow sklearn conventions (constructor args mirrored as
attributes, fitted state suffixed with an underscore, ``get_params`` via
``BaseEstimator``).
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import RMSProp
from .datasets import NO_ACTION
from .metrics import evaluate_policy, masked_accuracy
from .planner import (OccupancyMap, PlannerModel, extract_policy, make_model,
                      map_to_channels, planner_forward, predict_logits)


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


def validate_maps(X) -> np.ndarray:
    """Coerce map input to a float64 (n, H, W, 2) array.

    Accepts an array of stacked (occupancy, goal) channels or a sequence of
    OccupancyMap.  Every map must be binary with exactly one goal cell on a
    free cell.
    """
    if isinstance(X, OccupancyMap):
        X = [X]
    if len(X) and isinstance(X[0], OccupancyMap):
        X = np.stack([map_to_channels(m) for m in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[3] != 2:
        raise ValueError(f"expected maps of shape (n, H, W, 2), got {X.shape}")
    if not np.isin(X, (0.0, 1.0)).all():
        raise ValueError("map channels must be binary (obstacle occupancy and one-hot goal)")
    goals_per_map = X[:, :, :, 1].reshape(len(X), -1).sum(axis=1)
    if not (goals_per_map == 1.0).all():
        raise ValueError("every map needs exactly one goal cell")
    if (X[:, :, :, 0] * X[:, :, :, 1]).any():
        raise ValueError("goal cells must be free")
    return X


def validate_labels(y, X: np.ndarray) -> np.ndarray:
    """Coerce labels to (n, H, W) uint8 actions with NO_ACTION sentinels."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape[:3]:
        raise ValueError(f"labels of shape {y.shape} do not match maps {X.shape[:3]}")
    valid = (y < 4) | (y == NO_ACTION)
    if not valid.all():
        raise ValueError(f"labels must be actions 0..3 or the sentinel {NO_ACTION}")
    return y.astype(np.uint8)


class GridPathPlanner(BaseEstimator):
    """Differentiable grid path planner with optional rotation/reflection
    equivariance.

    Parameters mirror the run configuration: `model` selects vin or symvin,
    `group` the symmetry group token, `k`/`f` the iteration count and kernel
    size, `cq` the number of Q fibers, `hidden` the input head width, `rho_q`
    the fiber representation, `equiv_head` the steerable policy head, and
    `padding`/`torus` the boundary behavior (circular padding for C-space
    tasks).  Training uses RMSprop at `lr` with `batch_size` and `epochs`,
    deterministic in `seed`.
    """

    def __init__(self, model: str = "symvin", group: str = "d4", k: int = 30, f: int = 3,
                 cq: int = 16, hidden: int = 150, rho_q: str = "regular",
                 equiv_head: bool = False, padding: str = "zero", torus: bool = False,
                 lr: float = 1e-3, batch_size: int = 32, epochs: int = 30, seed: int = 0):
        self.model = model
        self.group = group
        self.k = k
        self.f = f
        self.cq = cq
        self.hidden = hidden
        self.rho_q = rho_q
        self.equiv_head = equiv_head
        self.padding = padding
        self.torus = torus
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    # -- sklearn plumbing ---------------------------------------------------

    def _check_fitted(self) -> PlannerModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("this GridPathPlanner instance is not fitted yet")
        return self.model_

    def _build_model(self, size: int) -> PlannerModel:
        return make_model(variant=self.model, group=self.group if self.model == "symvin" else None,
                          k=self.k, f=self.f, cq=self.cq, hidden=self.hidden,
                          padding=self.padding, equiv_head=self.equiv_head, rho_q=self.rho_q,
                          size=size, rng=np.random.default_rng(
                              np.random.SeedSequence(self.seed, spawn_key=(0,))))

    # -- training -----------------------------------------------------------

    def fit(self, X, y, validation_data=None, epoch_callback=None, resume_state=None,
            eval_train_subset=0):
        """Train on expert-labeled maps.

        `validation_data` is an optional (X_val, y_val) pair evaluated after
        every epoch; the parameters with the best validation success rate are
        kept in `best_model_`.  `epoch_callback(row)` fires per evaluated
        split.  `resume_state` continues a previous run from
        `training_state_` bitwise.  `eval_train_subset` > 0 also scores
        rollout success on that many training maps per epoch.
        """
        X = validate_maps(X)
        y = validate_labels(y, X)
        n, H, W, _ = X.shape
        if H != W:
            raise ValueError("training maps must be square")
        mask = y != NO_ACTION

        self.model_ = self._build_model(size=H)
        optimizer = RMSProp(self.model_.params, learning_rate=self.lr)
        start_epoch = 0
        if resume_state is not None:
            self.model_.set_param_values(resume_state["param_values"])
            optimizer.load_state(resume_state["moments"])
            start_epoch = int(resume_state["epoch"])

        if validation_data is not None:
            Xv = validate_maps(validation_data[0])
            yv = validate_labels(validation_data[1], Xv)

        self.history_ = []
        self.loss_curve_ = []
        best = {"success": -1.0, "epoch": -1, "values": self.model_.param_values()}
        for epoch in range(start_epoch, self.epochs):
            tic = time.perf_counter()
            order = np.random.default_rng(
                np.random.SeedSequence(self.seed, spawn_key=(1, epoch))).permutation(n)
            total, seen = 0.0, 0
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                logits, _ = planner_forward(self.model_, X[idx])
                loss = ad.softmax_ce(logits, y[idx], mask[idx])
                if not np.isfinite(loss.value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {lo // self.batch_size}")
                grads = ad.backward(loss)
                optimizer.step(grads)
                total += loss.value * len(idx)
                seen += len(idx)
            train_loss = total / seen
            self.loss_curve_.append(train_loss)
            stats = {"loss": train_loss}
            if eval_train_subset:
                sub = min(int(eval_train_subset), n)
                stats.update(self._evaluate_arrays(self.model_, X[:sub], y[:sub]))
                stats["loss"] = train_loss
            wall = time.perf_counter() - tic
            self._record(epoch, "train", stats, wall, epoch_callback)

            if validation_data is not None:
                stats = self._evaluate_arrays(self.model_, Xv, yv)
                self._record(epoch, "val", stats, time.perf_counter() - tic - wall,
                             epoch_callback)
                if stats["success_rate"] > best["success"]:
                    best = {"success": stats["success_rate"], "epoch": epoch,
                            "values": self.model_.param_values()}

        if validation_data is None or best["epoch"] < 0:
            best = {"success": float("nan"), "epoch": self.epochs - 1,
                    "values": self.model_.param_values()}
        self.best_epoch_ = best["epoch"]
        self.best_val_success_ = best["success"]
        self.best_model_ = self._build_model(size=H)
        self.best_model_.set_param_values(best["values"])
        self.n_features_in_ = H * W * 2
        self.training_state_ = {
            "param_values": self.model_.param_values(),
            "moments": optimizer.state(),
            "epoch": self.epochs,
        }
        return self

    def _record(self, epoch, split, stats, wall, callback):
        row = {"epoch": epoch, "split": split, "wall_seconds": wall,
               "loss": stats.get("loss", float("nan")),
               "success_rate": stats.get("success_rate", float("nan")),
               "spl": stats.get("spl", float("nan"))}
        self.history_.append(row)
        if callback is not None:
            callback(row)

    def _evaluate_arrays(self, model, X, y):
        logits = predict_logits(model, X, batch_size=self.batch_size)
        loss = ad.softmax_ce(ad.constant(logits), y, y != NO_ACTION).value
        per_map = []
        for i in range(len(X)):
            m = _map_from_channels(X[i])
            per_map.append(evaluate_policy(extract_policy(logits[i]), m, self.torus))
        return {"loss": float(loss),
                "success_rate": 100.0 * float(np.mean([s for s, _ in per_map])),
                "spl": 100.0 * float(np.mean([p for _, p in per_map]))}

    # -- inference ----------------------------------------------------------

    def predict_logits(self, X, k_override: int | None = None) -> np.ndarray:
        model = self._check_fitted()
        X = validate_maps(X)
        return predict_logits(model, X, batch_size=self.batch_size, k_override=k_override)

    def predict(self, X, k_override: int | None = None) -> np.ndarray:
        """Greedy per-cell actions, shape (n, H, W)."""
        logits = self.predict_logits(X, k_override)
        return logits.argmax(axis=3).astype(np.int8)

    def score(self, X, y=None) -> float:
        """Masked per-cell action accuracy against expert labels, or the mean
        per-map rollout success fraction when y is omitted."""
        X = validate_maps(X)
        logits = self.predict_logits(X)
        if y is not None:
            y = validate_labels(y, X)
            return masked_accuracy(logits, y)
        per_map = [evaluate_policy(extract_policy(logits[i]), _map_from_channels(X[i]),
                                   self.torus)[0]
                   for i in range(len(X))]
        return float(np.mean(per_map))


def _map_from_channels(x: np.ndarray) -> OccupancyMap:
    goal = np.argwhere(x[:, :, 1] == 1.0)[0]
    return OccupancyMap(x[:, :, 0].astype(bool), tuple(goal))
