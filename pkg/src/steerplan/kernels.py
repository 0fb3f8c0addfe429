"""Steerable convolution: exact projection of kernels onto the equivariant
subspace, the (batched) cross-correlation forward and adjoint maps, and the
numerical checks that make the kernel constraint executable.

A kernel psi is steerable when psi(h.x) = rho_out(h) psi(x) rho_in(h^-1) for
every fiber-group element h.  Projection is by group averaging, which is exact
for the finite groups used here, idempotent, and self-adjoint, so gradients
pull back through the same map.  Kernel offsets live on the centered window
{-(F-1)/2, ..., (F-1)/2}^2; even F is rejected.  For the 45-degree elements of
C8/D8 the offset action permutes each square ring of the window by an eighth
of a turn.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fields import FeatureField, FieldError, FieldType
from .groups import Group, GroupElement, GroupError, element_index, elements, inverse


class KernelError(ValueError):
    """Raised for invalid kernel geometry or mismatched field types."""


# ---------------------------------------------------------------------------
# Offset action of the fiber group on the centered kernel window


def _ring_walk(radius: int) -> list[tuple[int, int]]:
    """Cells of the square ring at Chebyshev radius r, walked counterclockwise
    from the +x axis offset (0, r).  The walk has 8*r positions."""
    r = radius
    walk = [(0, r)]
    walk += [(-t, r) for t in range(1, r + 1)]
    walk += [(-r, r - t) for t in range(1, 2 * r + 1)]
    walk += [(-r + t, -r) for t in range(1, 2 * r + 1)]
    walk += [(r, -r + t) for t in range(1, 2 * r + 1)]
    walk += [(r - t, r) for t in range(1, r)]
    return walk


def offset_action(g: GroupElement, offset: tuple[int, int]) -> tuple[int, int]:
    """Image of a centered kernel offset under g.

    Quarter-turn elements rotate/flip the displacement exactly; 45-degree
    elements of C8/D8 advance the offset one eighth of the way around its
    square ring, which restricts to the exact quarter-turn action.
    """
    di, dj = offset
    if (di, dj) == (0, 0):
        return (0, 0)
    if g.acts_on_grid:
        if g.reflected:
            dj = -dj
        for _ in range(g.quarter_turns):
            di, dj = -dj, di
        return (di, dj)
    if g.group.n != 8:
        raise GroupError(f"{g} does not act on grid offsets")
    radius = max(abs(di), abs(dj))
    walk = _ring_walk(radius)
    t = walk.index((di, dj))
    length = 8 * radius
    if g.reflected:
        t = (length // 2 - t) % length
    shift = g.rotation * length // 8
    return walk[(t + shift) % length]


@lru_cache(maxsize=None)
def _window_gather(group: Group, g_index: int, F: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (rows, cols) with out[i, j] = in[rows[i, j], cols[i, j]]
    realizing out(x) = in(g^-1 x) on the centered F x F window."""
    g_inv = inverse(elements(group)[g_index])
    c = F // 2
    rows = np.empty((F, F), dtype=np.intp)
    cols = np.empty((F, F), dtype=np.intp)
    for u in range(F):
        for v in range(F):
            di, dj = offset_action(g_inv, (u - c, v - c))
            rows[u, v] = di + c
            cols[u, v] = dj + c
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def kernel_spatial_transform(kernel: np.ndarray, g: GroupElement) -> np.ndarray:
    """Move kernel taps by g: out(x) = kernel(g^-1 x) on the centered window."""
    F = kernel.shape[0]
    if kernel.shape[1] != F or F % 2 == 0:
        raise KernelError(f"kernel window must be odd and square, got {kernel.shape[:2]}")
    rows, cols = _window_gather(g.group, element_index(g), F)
    return kernel[rows, cols]


# ---------------------------------------------------------------------------
# Projection onto the steerable subspace


def project_kernel(raw: np.ndarray, in_type: FieldType, out_type: FieldType) -> np.ndarray:
    """Group-average projection of a raw F x F x C_out x C_in kernel onto the
    subspace satisfying the steerability constraint.

    psi_bar(x) = (1/|H|) sum_h rho_out(h)^-1 raw(h.x) rho_in(h).  The result
    satisfies the constraint up to floating point and projecting twice is a
    fixed point.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if in_type.group != out_type.group:
        raise KernelError(f"field types live on {in_type.group} vs {out_type.group}")
    F = raw.shape[0]
    if raw.ndim != 4 or raw.shape[1] != F or F % 2 == 0:
        raise KernelError(f"raw kernel must be F x F x C_out x C_in with odd F, got {raw.shape}")
    if raw.shape[2] != out_type.total_dim or raw.shape[3] != in_type.total_dim:
        raise KernelError(
            f"kernel channels {raw.shape[2:]} do not match types "
            f"({out_type.total_dim}, {in_type.total_dim})"
        )
    group = in_type.group
    acc = np.zeros_like(raw)
    for h in elements(group):
        moved = kernel_spatial_transform(raw, inverse(h))  # raw(h.x)
        rout_inv = out_type.matrix(inverse(h))
        rin = in_type.matrix(h)
        acc += rout_inv @ moved @ rin
    return acc / group.order


def steerability_violation(psi: np.ndarray, in_type: FieldType, out_type: FieldType) -> float:
    """Max over h, x of |psi(h.x) - rho_out(h) psi(x) rho_in(h^-1)| entrywise."""
    psi = np.asarray(psi, dtype=np.float64)
    worst = 0.0
    for h in elements(in_type.group):
        lhs = kernel_spatial_transform(psi, inverse(h))  # psi(h.x)
        rhs = out_type.matrix(h) @ psi @ in_type.matrix(inverse(h))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


# ---------------------------------------------------------------------------
# Batched cross-correlation and its adjoints (the numerical core shared with
# the autodiff graph)


def _pad(x: np.ndarray, F: int, padding: str) -> np.ndarray:
    p = (F - 1) // 2
    if p == 0:
        return x
    widths = ((0, 0), (p, p), (p, p), (0, 0))
    if padding == "zero":
        return np.pad(x, widths)
    if padding == "circular":
        return np.pad(x, widths, mode="wrap")
    raise KernelError(f"unknown padding {padding!r}")


def _im2col(x: np.ndarray, F: int, padding: str) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, F*F*C) patch matrix for same-padding windows."""
    B, H, W, C = x.shape
    xp = _pad(x, F, padding)
    patches = sliding_window_view(xp, (F, F), axis=(1, 2))  # (B, H, W, C, F, F)
    return patches.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, F * F * C)


def corr2d_batch(x: np.ndarray, kernel: np.ndarray, padding: str = "zero") -> np.ndarray:
    """Same-padding cross-correlation of (B, H, W, C_in) with an
    F x F x C_out x C_in kernel, stride 1, no bias."""
    B, H, W, Ci = x.shape
    F, _, Co, Ci_k = kernel.shape
    if Ci_k != Ci:
        raise KernelError(f"input has {Ci} channels, kernel expects {Ci_k}")
    if F == 1:
        return x @ kernel[0, 0].T
    cols = _im2col(x, F, padding)
    w = kernel.transpose(0, 1, 3, 2).reshape(F * F * Ci, Co)
    return (cols @ w).reshape(B, H, W, Co)


def corr2d_input_grad(gy: np.ndarray, kernel: np.ndarray, padding: str) -> np.ndarray:
    """Adjoint of corr2d_batch in its input argument."""
    flipped = kernel[::-1, ::-1].transpose(0, 1, 3, 2)  # k'(y, c, o) = k(-y, o, c)
    return corr2d_batch(gy, np.ascontiguousarray(flipped), padding)


def corr2d_kernel_grad(x: np.ndarray, gy: np.ndarray, F: int, padding: str) -> np.ndarray:
    """Adjoint of corr2d_batch in its kernel argument."""
    B, H, W, Ci = x.shape
    Co = gy.shape[3]
    if F == 1:
        return (gy.reshape(-1, Co).T @ x.reshape(-1, Ci))[None, None]
    cols = _im2col(x, F, padding)
    gk = cols.T @ gy.reshape(B * H * W, Co)  # (F*F*Ci, Co)
    return gk.reshape(F, F, Ci, Co).transpose(0, 1, 3, 2)


# ---------------------------------------------------------------------------
# Field-level layer objects


@dataclass(frozen=True)
class ConvSpec:
    """Convolution configuration: same-padding, stride 1, no bias."""

    padding: str = "zero"

    def __post_init__(self):
        if self.padding not in ("zero", "circular"):
            raise KernelError(f"unknown padding {self.padding!r}")

    @property
    def stride(self) -> int:
        return 1

    @property
    def bias(self) -> bool:
        return False


class SteerableKernel:
    """Free kernel parameters plus their exact projection onto the steerable
    subspace.  The projected array is what convolution uses; raw is kept for
    optimization in the free parametrization."""

    def __init__(self, raw: np.ndarray, in_type: FieldType, out_type: FieldType):
        self.raw = np.asarray(raw, dtype=np.float64)
        self.in_type = in_type
        self.out_type = out_type
        self.projected = project_kernel(self.raw, in_type, out_type)
        self.raw.setflags(write=False)
        self.projected.setflags(write=False)

    @property
    def F(self) -> int:
        return self.raw.shape[0]

    @property
    def group(self) -> Group:
        return self.in_type.group


def identity_kernel(ftype: FieldType, F: int = 1) -> SteerableKernel:
    """Center-tap identity kernel; steerable for matching in/out types."""
    C = ftype.total_dim
    raw = np.zeros((F, F, C, C))
    raw[F // 2, F // 2] = np.eye(C)
    return SteerableKernel(raw, ftype, ftype)


def init_raw_kernel(rng: np.random.Generator, F: int, out_type_dim: int, in_type_dim: int) -> np.ndarray:
    """Uniform [-a, a] init with a = sqrt(1 / (C_in * F^2)), applied to raw
    parameters before projection."""
    a = np.sqrt(1.0 / (in_type_dim * F * F))
    return rng.uniform(-a, a, size=(F, F, out_type_dim, in_type_dim))


def conv2d(kernel: SteerableKernel, f: FeatureField, spec: ConvSpec = ConvSpec()) -> FeatureField:
    """Cross-correlate a field with the projected kernel; the output carries
    the kernel's output field type."""
    if f.field_type != kernel.in_type:
        raise FieldError("field type does not match the kernel's input type")
    out = corr2d_batch(f.data[None], kernel.projected, spec.padding)[0]
    return FeatureField(out, kernel.out_type, f.padding_hint)


def check_steerability(kernel, in_type: FieldType | None = None,
                       out_type: FieldType | None = None) -> float:
    """Max steerability-constraint violation of a SteerableKernel's projected
    array, or of a raw array given its field types."""
    if isinstance(kernel, SteerableKernel):
        return steerability_violation(kernel.projected, kernel.in_type, kernel.out_type)
    if in_type is None or out_type is None:
        raise KernelError("raw arrays need explicit in_type and out_type")
    return steerability_violation(kernel, in_type, out_type)


def translation_equivariance_check(kernel: SteerableKernel, f: FeatureField,
                                   spec: ConvSpec = ConvSpec("circular"),
                                   shifts: list[tuple[int, int]] | None = None) -> float:
    """Max deviation between conv(shift(f)) and shift(conv(f)) over cyclic
    shifts.  With zero padding the comparison is restricted to the interior
    at margin F - 1, where the padded band cannot reach."""
    p = (kernel.F - 1) // 2
    if shifts is None:
        shifts = [(0, 0), (1, 0), (0, 1), (1, 1), (p, p)]
    base = conv2d(kernel, f, spec).data
    worst = 0.0
    for di, dj in shifts:
        shifted_in = FeatureField(np.roll(f.data, (di, dj), axis=(0, 1)), f.field_type,
                                  f.padding_hint)
        lhs = conv2d(kernel, shifted_in, spec).data
        rhs = np.roll(base, (di, dj), axis=(0, 1))
        diff = np.abs(lhs - rhs)
        if spec.padding == "zero":
            m = kernel.F - 1
            diff = diff[m:-m or None, m:-m or None]
        worst = max(worst, float(diff.max()) if diff.size else 0.0)
    return worst
