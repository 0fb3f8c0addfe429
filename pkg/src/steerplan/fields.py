"""Steerable feature fields over the grid and the induced group action on them.

A field assigns a C-dimensional fiber to every grid cell; its field type (an
ordered list of representations) fixes how the fibers transform.  Transforming
a field moves pixels spatially and multiplies each fiber by the block-diagonal
matrix of the field type: the induced representation.  Fields are immutable
after construction and every operation is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .groups import Group, GroupElement, GroupError, Representation, rep_matrix


class FieldError(ValueError):
    """Raised for shape or field-type mismatches between fields."""


@dataclass(frozen=True)
class FieldType:
    """An ordered stack (direct sum) of fiber representations."""

    reps: tuple[Representation, ...]

    def __post_init__(self):
        if not self.reps:
            raise FieldError("field type needs at least one representation")
        groups = {rep.group for rep in self.reps}
        if len(groups) > 1:
            raise FieldError("all representations in a field type must share one group")
        object.__setattr__(self, "reps", tuple(self.reps))

    @property
    def group(self) -> Group:
        return self.reps[0].group

    @property
    def total_dim(self) -> int:
        return sum(rep.dim for rep in self.reps)

    def matrix(self, g: GroupElement) -> np.ndarray:
        """Block-diagonal fiber matrix of g over the stacked representations."""
        dim = self.total_dim
        mat = np.zeros((dim, dim))
        off = 0
        for rep in self.reps:
            mat[off:off + rep.dim, off:off + rep.dim] = rep_matrix(rep, g)
            off += rep.dim
        return mat

    def __add__(self, other: "FieldType") -> "FieldType":
        return FieldType(self.reps + other.reps)

    def __mul__(self, copies: int) -> "FieldType":
        return FieldType(self.reps * copies)

    __rmul__ = __mul__


@dataclass(frozen=True)
class FeatureField:
    """An H x W grid of C-dimensional fibers with an attached field type."""

    data: np.ndarray
    field_type: FieldType
    padding_hint: str = "zero"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise FieldError(f"field data must be H x W x C, got shape {data.shape}")
        if data.shape[2] != self.field_type.total_dim:
            raise FieldError(
                f"{data.shape[2]} channels do not match field type dim "
                f"{self.field_type.total_dim}"
            )
        if self.padding_hint not in ("zero", "circular"):
            raise FieldError(f"unknown padding hint {self.padding_hint!r}")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def spatial_map(data: np.ndarray, g: GroupElement) -> np.ndarray:
    """Move pixels of an H x W x ... array by g: out(x) = data(g^-1 x).

    Only elements acting on the grid are supported; quarter turns need H = W.
    """
    q = g.quarter_turns
    if q % 2 == 1 and data.shape[0] != data.shape[1]:
        raise GroupError("quarter-turn rotation needs a square grid")
    out = data
    if g.reflected:
        out = np.flip(out, axis=1)
    if q:
        out = np.rot90(out, q, axes=(0, 1))
    return np.ascontiguousarray(out)


def transform_field(g: GroupElement, f: FeatureField) -> FeatureField:
    """The induced action of g: spatial move plus per-pixel fiber transform."""
    if g.group != f.field_type.group:
        raise GroupError(f"element of {g.group} applied to a {f.field_type.group} field")
    moved = spatial_map(f.data, g)
    rho = f.field_type.matrix(g)
    out = np.einsum("ij,hwj->hwi", rho, moved)
    return FeatureField(out, f.field_type, f.padding_hint)


def stack_fields(fields: list[FeatureField]) -> FeatureField:
    """Concatenate fields along the channel axis; types stack by direct sum."""
    if not fields:
        raise FieldError("cannot stack zero fields")
    if len(fields) == 1:
        return fields[0]
    hw = fields[0].data.shape[:2]
    for f in fields[1:]:
        if f.data.shape[:2] != hw:
            raise FieldError(f"spatial shapes differ: {f.data.shape[:2]} vs {hw}")
    data = np.concatenate([f.data for f in fields], axis=2)
    ftype = FieldType(tuple(rep for f in fields for rep in f.field_type.reps))
    return FeatureField(data, ftype, fields[0].padding_hint)


def pointwise_add(f1: FeatureField, f2: FeatureField) -> FeatureField:
    if f1.data.shape != f2.data.shape or f1.field_type != f2.field_type:
        raise FieldError("pointwise add needs identical shapes and field types")
    return FeatureField(f1.data + f2.data, f1.field_type, f1.padding_hint)


def pointwise_scale(f: FeatureField, c: float) -> FeatureField:
    return FeatureField(f.data * float(c), f.field_type, f.padding_hint)


def block_type(ftype: FieldType, copies: int) -> FieldType:
    """Field type of one block when ftype consists of `copies` identical blocks."""
    if copies < 1:
        raise FieldError("copies must be positive")
    if len(ftype.reps) % copies != 0:
        raise FieldError(f"{len(ftype.reps)} representations do not split into {copies} blocks")
    size = len(ftype.reps) // copies
    block = ftype.reps[:size]
    for k in range(1, copies):
        if ftype.reps[k * size:(k + 1) * size] != block:
            raise FieldError("field type blocks are not identical")
    return FieldType(block)


def channel_block_max(f: FeatureField, copies: int) -> FeatureField:
    """Elementwise maximum across `copies` identical-type channel blocks.

    The output carries one block's field type; ties are resolved by value
    only, so the result is independent of block order.
    """
    btype = block_type(f.field_type, copies)
    H, W, C = f.data.shape
    out = f.data.reshape(H, W, copies, C // copies).max(axis=2)
    return FeatureField(out, btype, f.padding_hint)
