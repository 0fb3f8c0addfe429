"""The planning core: spatial-MDP construction, exact value iteration, the
VIN/SymVIN forward graphs, policy extraction, rollout, equivariance audits,
and the model checkpoint format.

The spatial MDP removes obstacles from the transition (moves always succeed)
and encodes them as finite trap rewards, which makes the transition invariant
under grid isometries.  The learned planners iterate
``Q = conv(concat(R, V)); V = block_max(Q)`` for K steps; SymVIN additionally
constrains every kernel to the steerable subspace of its fiber group.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .fields import FeatureField, FieldType
from .groups import (ACTION_DELTAS, Group, GroupElement, GroupError, action_on_actions,
                     action_representation, elements, grid_action, group_from_token,
                     regular_rep, trivial_rep)
from .kernels import corr2d_batch, init_raw_kernel, project_kernel
from .fields import spatial_map

N_ACTIONS = len(ACTION_DELTAS)


class PlannerError(ValueError):
    """Raised for invalid planner configurations or inputs."""


class CheckpointError(IOError):
    """Raised when a checkpoint file cannot be decoded."""


# ---------------------------------------------------------------------------
# Maps and spatial MDPs


@dataclass(frozen=True)
class OccupancyMap:
    """An H x W obstacle grid (True = obstacle) with a single free goal cell."""

    occupancy: np.ndarray
    goal: tuple[int, int]

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool).copy()
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "goal", (int(self.goal[0]), int(self.goal[1])))
        i, j = self.goal
        H, W = occ.shape
        if not (0 <= i < H and 0 <= j < W):
            raise PlannerError(f"goal {self.goal} outside the {H}x{W} grid")
        if occ[i, j]:
            raise PlannerError("goal cell is an obstacle")
        if int((~occ).sum()) < 2:
            raise PlannerError("map needs at least one free cell besides the goal")

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def transform(self, g: GroupElement) -> "OccupancyMap":
        """The transformed task g.M: rotated/reflected obstacles and goal."""
        H, W = self.occupancy.shape
        return OccupancyMap(spatial_map(self.occupancy, g), grid_action(g, self.goal, H, W))


def map_to_channels(m: OccupancyMap) -> np.ndarray:
    """The 2-channel input field: obstacle occupancy and one-hot goal."""
    H, W = m.shape
    x = np.zeros((H, W, 2))
    x[:, :, 0] = m.occupancy
    x[m.goal[0], m.goal[1], 1] = 1.0
    return x


def map_field(m: OccupancyMap, group: Group, padding_hint: str = "zero") -> FeatureField:
    """The input as a steerable field typed by two trivial representations."""
    ftype = FieldType((trivial_rep(group), trivial_rep(group)))
    return FeatureField(map_to_channels(m), ftype, padding_hint)


@dataclass(frozen=True)
class SpatialMDP:
    """Trap-reward reformulation: per-state-action rewards, a pure
    displacement transition (with wrap flag), and a discount."""

    reward: np.ndarray  # (H, W, 4)
    gamma: float
    trap_reward: float
    torus: bool = False

    def __post_init__(self):
        r = np.asarray(self.reward, dtype=np.float64).copy()
        if r.ndim != 3 or r.shape[2] != N_ACTIONS:
            raise PlannerError(f"reward must be H x W x {N_ACTIONS}, got {r.shape}")
        r.setflags(write=False)
        object.__setattr__(self, "reward", r)
        if not 0.0 < self.gamma <= 1.0:
            raise PlannerError("gamma must lie in (0, 1]")

    @property
    def goal(self) -> tuple[int, int]:
        """The unique absorbing cell, recovered as the only all-zero reward row."""
        rows = np.argwhere((self.reward == 0.0).all(axis=2))
        if len(rows) != 1:
            raise PlannerError(f"expected exactly one absorbing cell, found {len(rows)}")
        return int(rows[0][0]), int(rows[0][1])


def _landing_occupancy(occ: np.ndarray, action: int, torus: bool) -> np.ndarray:
    """occ(s + delta_a) with off-grid landings counted as obstacles."""
    di, dj = ACTION_DELTAS[action]
    if torus:
        return np.roll(occ, (-di, -dj), axis=(0, 1))
    out = np.ones_like(occ)
    H, W = occ.shape
    src_i = slice(max(di, 0), H + min(di, 0))
    src_j = slice(max(dj, 0), W + min(dj, 0))
    dst_i = slice(max(-di, 0), H + min(-di, 0))
    dst_j = slice(max(-dj, 0), W + min(-dj, 0))
    out[dst_i, dst_j] = occ[src_i, src_j]
    return out


def build_spatial_mdp(m: OccupancyMap, gamma: float = 1.0, step_cost: float = -1.0,
                      trap_reward: float | None = None, torus: bool = False) -> SpatialMDP:
    """Encode obstacles as trap rewards on an always-move transition.

    Moves landing on free cells cost `step_cost`, moves landing on obstacles
    (or off a bounded map) earn `trap_reward`, and the goal is absorbing with
    reward 0.  The default trap is -4*H*W, finite but strictly dominating any
    path cost.
    """
    H, W = m.shape
    if trap_reward is None:
        trap_reward = -4.0 * H * W
    if step_cost >= 0 or trap_reward >= 0:
        raise PlannerError("step_cost and trap_reward must be negative")
    reward = np.empty((H, W, N_ACTIONS))
    for a in range(N_ACTIONS):
        landing = _landing_occupancy(m.occupancy, a, torus)
        reward[:, :, a] = np.where(landing, trap_reward, step_cost)
    reward[m.goal[0], m.goal[1], :] = 0.0
    return SpatialMDP(reward, gamma, trap_reward, torus)


def _next_values(V: np.ndarray, torus: bool) -> np.ndarray:
    """Stack V(s + delta_a) for the four actions; off-grid reads as 0."""
    H, W = V.shape
    out = np.zeros((H, W, N_ACTIONS))
    for a, (di, dj) in enumerate(ACTION_DELTAS):
        if torus:
            out[:, :, a] = np.roll(V, (-di, -dj), axis=(0, 1))
        else:
            src_i = slice(max(di, 0), H + min(di, 0))
            src_j = slice(max(dj, 0), W + min(dj, 0))
            dst_i = slice(max(-di, 0), H + min(-di, 0))
            dst_j = slice(max(-dj, 0), W + min(-dj, 0))
            out[dst_i, dst_j, a] = V[src_i, src_j]
    return out


def exact_value_iteration(mdp: SpatialMDP, iterations: int | None = None):
    """Exact Bellman iteration on the spatial MDP.

    Starts from the trap floor with the goal pinned at 0 and clips values at
    the floor, so iterates are pointwise nondecreasing and stabilize after at
    most H*W sweeps.  Returns (V, Q, policy) with argmax ties resolved toward
    the lower action index in (N, W, S, E) order.
    """
    H, W = mdp.reward.shape[:2]
    if iterations is None:
        iterations = H * W
    goal = mdp.goal
    floor = mdp.trap_reward
    V = np.full((H, W), floor)
    V[goal] = 0.0
    for _ in range(iterations):
        Q = mdp.reward + mdp.gamma * _next_values(V, mdp.torus)
        V = np.maximum(Q.max(axis=2), floor)
        V[goal] = 0.0
    Q = mdp.reward + mdp.gamma * _next_values(V, mdp.torus)
    policy = Q.argmax(axis=2).astype(np.int8)
    return V, Q, policy


# ---------------------------------------------------------------------------
# Planner models


@dataclass
class PlannerModel:
    """Parameter bundle for VIN or SymVIN.

    The reward head is the composition of two 1x1 convolutions (map -> hidden
    trivial channels -> Q-type reward); the transition kernel consumes the
    stacked [reward block; value block] field; the policy head is a 1x1 map to
    the four action logits, steerable when `equiv_head` is set.
    """

    variant: str
    group: Group | None
    K: int
    F: int
    cq: int
    hidden: int
    padding: str
    equiv_head: bool
    rho_q: str
    size: int
    input_conv: Parameter
    reward_conv: Parameter
    transition: Parameter
    policy: Parameter

    @property
    def fiber_dim(self) -> int:
        if self.variant == "vin":
            return 1
        return self.group.order if self.rho_q == "regular" else 1

    @property
    def q_channels(self) -> int:
        return self.cq * self.fiber_dim

    @property
    def v_channels(self) -> int:
        return self.fiber_dim

    @property
    def params(self) -> list[Parameter]:
        return [self.input_conv, self.reward_conv, self.transition, self.policy]

    def param_values(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params]

    def set_param_values(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.params, values):
            if p.value.shape != v.shape:
                raise PlannerError(f"parameter {p.name} shape {p.value.shape} != {v.shape}")
            p.set_value(v)


def _param_shapes(variant: str, group: Group | None, F: int, cq: int, hidden: int,
                  rho_q: str, equiv_head: bool) -> list[tuple[int, ...]]:
    fiber = 1 if variant == "vin" else (group.order if rho_q == "regular" else 1)
    qc, vc = cq * fiber, fiber
    return [
        (1, 1, hidden, 2),
        (1, 1, qc, hidden),
        (F, F, qc, qc + vc),
        (1, 1, N_ACTIONS, qc),
    ]


def make_model(variant: str = "symvin", group: str | Group | None = "d4", k: int = 30,
               f: int = 3, cq: int = 16, hidden: int = 150, padding: str = "zero",
               equiv_head: bool = False, rho_q: str = "regular", size: int = 0,
               rng: np.random.Generator | int | None = 0) -> PlannerModel:
    """Build a randomly initialized planner.

    Raw kernels are drawn uniform in [-a, a] with a = sqrt(1/(C_in F^2));
    SymVIN kernels additionally carry the steerable projector of their fiber
    group, which the forward pass and gradient pullback both apply.
    """
    if variant not in ("vin", "symvin"):
        raise PlannerError(f"unknown variant {variant!r}")
    if rho_q not in ("regular", "trivial"):
        raise PlannerError(f"unknown fiber representation {rho_q!r}")
    if f % 2 == 0 or f < 1:
        raise PlannerError("kernel size F must be odd and positive")
    if k < 0 or cq < 1 or hidden < 1:
        raise PlannerError("need K >= 0, C_Q >= 1, hidden >= 1")
    if padding not in ("zero", "circular"):
        raise PlannerError(f"unknown padding {padding!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    if variant == "vin":
        if equiv_head:
            raise PlannerError("the equivariant policy head requires the symvin variant")
        group_obj = None
        projectors = [None] * 4
    else:
        group_obj = group if isinstance(group, Group) else group_from_token(group)
        rep = regular_rep(group_obj) if rho_q == "regular" else trivial_rep(group_obj)
        triv = trivial_rep(group_obj)
        map_type = FieldType((triv, triv))
        hidden_type = FieldType((triv,) * hidden)
        q_type = FieldType((rep,) * cq)
        v_type = FieldType((rep,))
        rv_type = q_type + v_type

        def projector(in_t, out_t):
            return lambda arr: project_kernel(arr, in_t, out_t)

        head = None
        if equiv_head:
            logits_type = FieldType((action_representation(group_obj),))
            head = projector(q_type, logits_type)
        projectors = [
            projector(map_type, hidden_type),
            projector(hidden_type, q_type),
            projector(rv_type, q_type),
            head,
        ]

    shapes = _param_shapes(variant, group_obj, f, cq, hidden, rho_q, equiv_head)
    names = ["input_conv", "reward_conv", "transition", "policy"]
    params = []
    for name, shape, proj in zip(names, shapes, projectors):
        raw = init_raw_kernel(rng, shape[0], shape[2], shape[3])
        params.append(Parameter(raw, name=name, projector=proj))
    return PlannerModel(variant, group_obj, k, f, cq, hidden, padding, equiv_head,
                        rho_q, size, *params)


def planner_forward(model: PlannerModel, x: np.ndarray, trace: bool = False):
    """Run the planning graph on a batch of 2-channel maps.

    Returns (logits node, list of per-iteration V values when trace is set).
    All operations are recorded on the autodiff graph, so a scalar loss on the
    logits supports backward().
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[3] != 2:
        raise PlannerError(f"expected input of shape (B, H, W, 2), got {x.shape}")
    B, H, W, _ = x.shape
    xb = ad.constant(x)
    h = ad.conv1x1(xb, ad.param(model.input_conv))
    rhat = ad.conv1x1(h, ad.param(model.reward_conv))
    wt = ad.param(model.transition)
    v = ad.constant(np.zeros((B, H, W, model.v_channels)))
    q = rhat
    trace_v: list[np.ndarray] = []
    if model.K > 0:
        # Q_k = conv([R; V_k]) split blockwise: the reward block is constant
        # across iterations, so its convolution is hoisted out of the loop.
        qc = model.q_channels
        w_r = ad.slice_in_channels(wt, 0, qc)
        w_v = ad.slice_in_channels(wt, qc, qc + model.v_channels)
        rq = ad.conv2d(rhat, w_r, model.padding)
        for _ in range(model.K):
            q = ad.add(rq, ad.conv2d(v, w_v, model.padding))
            v = ad.block_max(q, model.cq)
            if trace:
                trace_v.append(v.value)
    logits = ad.conv1x1(q, ad.param(model.policy))
    return logits, trace_v


def _forward_logits(model: PlannerModel, m: OccupancyMap) -> np.ndarray:
    logits, _ = planner_forward(model, map_to_channels(m)[None])
    return logits.value[0]


def vin_forward(model: PlannerModel, m: OccupancyMap) -> np.ndarray:
    """Logits field (H, W, 4) of a plain VIN."""
    if model.variant != "vin":
        raise PlannerError("vin_forward needs a vin model")
    return _forward_logits(model, m)


def symvin_forward(model: PlannerModel, m: OccupancyMap) -> np.ndarray:
    """Logits field (H, W, 4) of a SymVIN with projected steerable kernels."""
    if model.variant != "symvin":
        raise PlannerError("symvin_forward needs a symvin model")
    return _forward_logits(model, m)


def predict_logits(model: PlannerModel, maps: np.ndarray, batch_size: int = 32,
                   k_override: int | None = None) -> np.ndarray:
    """Batched inference over an (n, H, W, 2) array of map channels."""
    maps = np.asarray(maps, dtype=np.float64)
    run = model if k_override is None else replace(model, K=int(k_override))
    outs = []
    for lo in range(0, len(maps), batch_size):
        logits, _ = planner_forward(run, maps[lo:lo + batch_size])
        outs.append(logits.value)
    return np.concatenate(outs, axis=0)


def extract_policy(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the 4 action logits; ties take the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim != 3 or logits.shape[2] != N_ACTIONS:
        raise PlannerError(f"logits must be H x W x {N_ACTIONS}, got {logits.shape}")
    return logits.argmax(axis=2).astype(np.int8)


# ---------------------------------------------------------------------------
# Rollout


def _next_cell_index(policy: np.ndarray, m: OccupancyMap, torus: bool) -> np.ndarray:
    """Flat successor index per cell under the greedy policy; index H*W is the
    failure sink (obstacle hit or off-grid) and the goal is absorbing."""
    H, W = m.shape
    sink = H * W
    nxt = np.full(H * W + 1, sink, dtype=np.int64)
    ii, jj = np.divmod(np.arange(H * W), W)
    deltas = np.array(ACTION_DELTAS)
    step = deltas[policy.reshape(-1)]
    ti, tj = ii + step[:, 0], jj + step[:, 1]
    if torus:
        ti, tj = ti % H, tj % W
        inside = np.ones(H * W, dtype=bool)
    else:
        inside = (0 <= ti) & (ti < H) & (0 <= tj) & (tj < W)
    flat = np.where(inside, ti % H * W + tj % W, sink)
    blocked = ~inside | m.occupancy.reshape(-1)[np.where(inside, flat, 0)]
    nxt[: H * W] = np.where(blocked, sink, flat)
    nxt[m.goal[0] * W + m.goal[1]] = m.goal[0] * W + m.goal[1]
    return nxt


def rollout_all(policy: np.ndarray, m: OccupancyMap, torus: bool = False):
    """Greedy rollouts from every cell at once.

    Returns (success, steps) arrays of shape (H, W); steps is the number of
    moves to reach the goal (horizon H*W) and -1 where the rollout fails.
    """
    H, W = m.shape
    nxt = _next_cell_index(policy, m, torus)
    pos = np.arange(H * W + 1)
    arrival = np.full(H * W + 1, -1, dtype=np.int64)
    goal_flat = m.goal[0] * W + m.goal[1]
    arrival[goal_flat] = 0
    for t in range(1, H * W + 1):
        pos = nxt[pos]
        hit = (arrival < 0) & (pos == goal_flat)
        arrival[hit] = t
        if (arrival[: H * W] >= 0).all():
            break
    steps = arrival[: H * W].reshape(H, W)
    return steps >= 0, steps


def rollout(policy: np.ndarray, m: OccupancyMap, start: tuple[int, int],
            torus: bool = False) -> dict:
    """Follow greedy actions from one free start cell.

    Terminates on the goal (success), on entering an obstacle or leaving a
    bounded map (failure), or after H*W moves (failure).
    """
    i, j = start
    if m.occupancy[i, j]:
        raise PlannerError(f"start {start} is an obstacle cell")
    success, steps = rollout_all(policy, m, torus)
    return {"success": bool(success[i, j]), "steps": int(steps[i, j])}


# ---------------------------------------------------------------------------
# Equivariance audits


def grid_elements(group: Group) -> list[GroupElement]:
    """The elements acting on the square pixel grid (all of C2/C4/D2/D4; the
    quarter-turn subgroup of C8/D8)."""
    return [g for g in elements(group) if g.acts_on_grid]


def action_permutation_matrix(g: GroupElement) -> np.ndarray:
    mat = np.zeros((N_ACTIONS, N_ACTIONS))
    for a in range(N_ACTIONS):
        mat[action_on_actions(g, a), a] = 1.0
    return mat


def transform_logits(g: GroupElement, logits: np.ndarray) -> np.ndarray:
    """g acting on a logits field: spatial move plus action-channel permutation."""
    return spatial_map(logits, g) @ action_permutation_matrix(g).T


def equivariance_audit(forward_fn, m: OccupancyMap, group: Group) -> dict[GroupElement, float]:
    """Commutative-diagram audit: max |forward(g.M) - g.forward(M)| per element.

    `forward_fn` maps an OccupancyMap to an (H, W, 4) logits array.  Requires
    a square map.
    """
    if m.shape[0] != m.shape[1]:
        raise PlannerError("equivariance audits need square maps")
    base = np.asarray(forward_fn(m), dtype=np.float64)
    report = {}
    for g in grid_elements(group):
        lhs = np.asarray(forward_fn(m.transform(g)), dtype=np.float64)
        rhs = transform_logits(g, base)
        report[g] = float(np.max(np.abs(lhs - rhs)))
    return report


def equivariance_audit_per_iteration(model: PlannerModel, m: OccupancyMap):
    """Audit every value-iteration step of a SymVIN, not only the output.

    Returns (per_iteration, logits_report): per_iteration[k] is the max
    deviation across group elements between V_k(g.M) and the transformed
    V_k(M); logits_report is the output audit keyed by element.
    """
    if model.variant != "symvin":
        raise PlannerError("per-iteration audits apply to symvin models")
    if m.shape[0] != m.shape[1]:
        raise PlannerError("equivariance audits need square maps")
    v_type = FieldType((regular_rep(model.group) if model.rho_q == "regular"
                        else trivial_rep(model.group),))
    base_logits, base_trace = planner_forward(model, map_to_channels(m)[None], trace=True)
    per_iter = np.zeros(model.K)
    logits_report = {}
    for g in grid_elements(model.group):
        gm = m.transform(g)
        logits_g, trace_g = planner_forward(model, map_to_channels(gm)[None], trace=True)
        rho = v_type.matrix(g)
        for k in range(model.K):
            expected = spatial_map(base_trace[k][0], g) @ rho.T
            dev = float(np.max(np.abs(trace_g[k][0] - expected)))
            per_iter[k] = max(per_iter[k], dev)
        expected_logits = transform_logits(g, base_logits.value[0])
        logits_report[g] = float(np.max(np.abs(logits_g.value[0] - expected_logits)))
    return per_iter, logits_report


# ---------------------------------------------------------------------------
# Checkpoint format: magic "SYMM", u32 version, u32 manifest length, JSON
# manifest, then little-endian float64 parameter arrays in declaration order.

CHECKPOINT_MAGIC = b"SYMM"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: PlannerModel, path) -> None:
    manifest = {
        "variant": model.variant,
        "group": model.group.token if model.group else None,
        "k": model.K,
        "f": model.F,
        "cq": model.cq,
        "hidden": model.hidden,
        "padding": model.padding,
        "equiv_head": model.equiv_head,
        "rho_q": model.rho_q,
        "size": model.size,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in model.params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> PlannerModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + mlen:
        raise CheckpointError(f"{path}: truncated checkpoint manifest")
    try:
        manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint manifest") from exc
    model = make_model(variant=manifest["variant"], group=manifest["group"],
                       k=manifest["k"], f=manifest["f"], cq=manifest["cq"],
                       hidden=manifest["hidden"], padding=manifest["padding"],
                       equiv_head=manifest["equiv_head"], rho_q=manifest["rho_q"],
                       size=manifest["size"], rng=0)
    off = 12 + mlen
    values = []
    for p in model.params:
        nbytes = p.value.size * 8
        chunk = data[off:off + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(f"{path}: truncated parameter payload")
        values.append(np.frombuffer(chunk, dtype="<f8").reshape(p.value.shape).copy())
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameter payload")
    model.set_param_values(values)
    return model
