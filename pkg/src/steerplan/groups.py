"""Finite symmetry groups of the square grid and their matrix representations.

Supported groups are the cyclic rotation groups C2, C4, C8 and the dihedral
groups D2, D4, D8.  Elements are written in the normal form ``r^k s^m`` where
``r`` is the counterclockwise rotation by ``2*pi/n`` and ``s`` is the
horizontal (left-right) flip; the map ``r^k s^m`` applies the flip first.
All types are immutable values and all operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

GROUP_TOKENS = ("c2", "c4", "c8", "d2", "d4", "d8")

#: MDP actions in counterclockwise order and their (row, col) displacements.
ACTIONS = ("north", "west", "south", "east")
ACTION_DELTAS = ((-1, 0), (0, -1), (1, 0), (0, 1))


class GroupError(ValueError):
    """Raised for invalid group constructions or mixed-group operations."""


@dataclass(frozen=True)
class Group:
    """A cyclic (Cn) or dihedral (Dn) symmetry group with rotation order n."""

    kind: str
    n: int

    def __post_init__(self):
        if self.kind not in ("cyclic", "dihedral"):
            raise GroupError(f"unknown group kind {self.kind!r}")
        if self.n < 1:
            raise GroupError("rotation order must be a positive integer")

    @property
    def order(self) -> int:
        return self.n if self.kind == "cyclic" else 2 * self.n

    @property
    def token(self) -> str:
        return ("c" if self.kind == "cyclic" else "d") + str(self.n)

    def identity(self) -> "GroupElement":
        return GroupElement(self, 0, False)

    def __repr__(self):
        return f"Group({self.token})"


def group_from_token(token: str) -> Group:
    """Build a group from its lowercase CLI/config token, e.g. ``"d4"``."""
    token = token.strip().lower()
    if token not in GROUP_TOKENS:
        raise GroupError(f"unknown group token {token!r}; expected one of {GROUP_TOKENS}")
    kind = "cyclic" if token[0] == "c" else "dihedral"
    return Group(kind, int(token[1:]))


@dataclass(frozen=True)
class GroupElement:
    """The element ``r^rotation s^reflected`` of its group."""

    group: Group
    rotation: int
    reflected: bool = False

    def __post_init__(self):
        if not 0 <= self.rotation < self.group.n:
            raise GroupError(f"rotation {self.rotation} out of range for {self.group}")
        if self.reflected and self.group.kind == "cyclic":
            raise GroupError("cyclic groups have no reflections")

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and not self.reflected

    @property
    def quarter_turns(self) -> int:
        """Number of 90-degree ccw turns, when the rotation is a multiple of 90."""
        if not self.acts_on_grid:
            raise GroupError(f"{self} is not a quarter-turn rotation")
        return self.rotation * 4 // self.group.n

    @property
    def acts_on_grid(self) -> bool:
        """Whether the element maps the square pixel grid to itself.

        True for rotations by multiples of 90 degrees (optionally composed
        with a flip); false for the 45-degree elements of C8/D8.
        """
        return (self.rotation * 4) % self.group.n == 0

    def __repr__(self):
        rot = f"r{self.rotation}" if self.rotation else ""
        ref = "s" if self.reflected else ""
        return (rot + ref) or "e"


def elements(group: Group) -> list[GroupElement]:
    """All group elements: identity first, rotations ascending, then reflected
    rotations ascending.  The order is stable and deterministic."""
    elems = [GroupElement(group, k, False) for k in range(group.n)]
    if group.kind == "dihedral":
        elems += [GroupElement(group, k, True) for k in range(group.n)]
    return elems


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """Group product g*h, the map applying h first and then g."""
    if g.group != h.group:
        raise GroupError(f"cannot compose elements of {g.group} and {h.group}")
    n = g.group.n
    # (r^a s^p)(r^b s^q) = r^(a + (-1)^p b) s^(p xor q), from s r = r^-1 s.
    rot = (g.rotation + (-h.rotation if g.reflected else h.rotation)) % n
    return GroupElement(g.group, rot, g.reflected != h.reflected)


def inverse(g: GroupElement) -> GroupElement:
    if g.reflected:
        return g  # reflections r^k s are involutions
    return GroupElement(g.group, (-g.rotation) % g.group.n, False)


def element_index(g: GroupElement) -> int:
    """Position of g in the stable enumeration of its group."""
    return g.rotation + (g.group.n if g.reflected else 0)


@dataclass(frozen=True)
class Representation:
    """One of the four representation families: trivial, regular, quotient
    (D4 by an order-2 reflection subgroup), or standard (2D rotation matrices,
    visualization/testing only)."""

    kind: str
    group: Group
    quotient_subgroup: int | None = None

    def __post_init__(self):
        if self.kind not in ("trivial", "regular", "quotient", "standard"):
            raise GroupError(f"unknown representation kind {self.kind!r}")
        if self.kind == "quotient":
            if self.group != Group("dihedral", 4):
                raise GroupError("quotient representation is defined for D4 only")
            sel = self.quotient_subgroup
            if self.quotient_subgroup is None:
                object.__setattr__(self, "quotient_subgroup", _action_subgroup_selector())
            elif not 0 <= sel < 4:
                raise GroupError(f"quotient subgroup selector {sel} out of range")

    @property
    def dim(self) -> int:
        if self.kind == "trivial":
            return 1
        if self.kind == "regular":
            return self.group.order
        if self.kind == "quotient":
            return 4
        return 2  # standard


def trivial_rep(group: Group) -> Representation:
    return Representation("trivial", group)


def regular_rep(group: Group) -> Representation:
    return Representation("regular", group)


def quotient_rep(subgroup: int | None = None) -> Representation:
    """The 4-dimensional permutation representation of D4 on the cosets of the
    order-2 subgroup {e, r^subgroup s}.  With the default selector the coset
    permutation coincides with the geometric action on (N, W, S, E)."""
    return Representation("quotient", Group("dihedral", 4), subgroup)


def standard_rep(group: Group) -> Representation:
    return Representation("standard", group)


def rep_matrix(rep: Representation, g: GroupElement) -> np.ndarray:
    """The dim x dim orthogonal matrix of g under rep."""
    if g.group != rep.group:
        raise GroupError(f"element of {g.group} fed to representation of {rep.group}")
    return _rep_matrix_cached(rep, element_index(g))


@lru_cache(maxsize=None)
def _rep_matrix_cached(rep: Representation, g_index: int) -> np.ndarray:
    g = elements(rep.group)[g_index]
    if rep.kind == "trivial":
        mat = np.ones((1, 1))
    elif rep.kind == "regular":
        elems = elements(rep.group)
        mat = np.zeros((len(elems), len(elems)))
        for j, h in enumerate(elems):
            mat[element_index(compose(g, h)), j] = 1.0
    elif rep.kind == "quotient":
        mat = np.zeros((4, 4))
        for j in range(4):
            mat[_coset_index(compose(g, GroupElement(g.group, j)), rep.quotient_subgroup), j] = 1.0
    else:  # standard
        theta = 2.0 * np.pi * g.rotation / g.group.n
        c, s = np.cos(theta), np.sin(theta)
        mat = np.array([[c, -s], [s, c]])
        if g.reflected:
            mat = mat @ np.diag([1.0, -1.0])
    mat.setflags(write=False)
    return mat


def _coset_index(g: GroupElement, selector: int) -> int:
    """Index i such that g lies in the coset r^i {e, r^selector s} of D4."""
    if not g.reflected:
        return g.rotation
    # r^k s = r^(k - selector) * (r^selector s)
    return (g.rotation - selector) % 4


@lru_cache(maxsize=1)
def _action_subgroup_selector() -> int:
    """Selector m for which the D4 quotient by {e, r^m s} permutes cosets
    exactly like the geometric action on the four directions.

    The generator convention relating s to the grid axes is not canonical, so
    the match is found by search and pinned by the consistency tests.
    """
    d4 = Group("dihedral", 4)
    for m in range(4):
        ok = True
        for g in elements(d4):
            for a in range(4):
                perm = np.zeros(4)
                perm[a] = 1.0
                mat = np.zeros((4, 4))
                for j in range(4):
                    mat[_coset_index(compose(g, GroupElement(d4, j)), m), j] = 1.0
                if int(np.argmax(mat @ perm)) != action_on_actions(g, a):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return m
    raise GroupError("no order-2 reflection subgroup matches the action on directions")


def action_on_actions(g: GroupElement, a: int) -> int:
    """Image of direction index a in (N, W, S, E) under the grid isometry g."""
    if not g.acts_on_grid:
        raise GroupError(f"{g} does not act on the four grid directions")
    di, dj = ACTION_DELTAS[a]
    if g.reflected:
        dj = -dj
    for _ in range(g.quarter_turns):
        di, dj = -dj, di  # 90-degree ccw turn of a displacement
    return ACTION_DELTAS.index((di, dj))


def grid_action(g: GroupElement, index: tuple[int, int], H: int, W: int) -> tuple[int, int]:
    """Image of a grid index under the whole-array action of g.

    A 90-degree ccw rotation is the transpose-then-vertical-flip index map and
    the reflection s is the horizontal flip; the map is bijective on the index
    set.  Quarter-turn rotations require a square grid.
    """
    i, j = index
    if not (0 <= i < H and 0 <= j < W):
        raise ValueError(f"index {index} out of bounds for {H}x{W}")
    q = g.quarter_turns  # raises for 45-degree elements
    if q % 2 == 1 and H != W:
        raise GroupError("quarter-turn rotation needs a square grid")
    if g.reflected:
        j = W - 1 - j
    for _ in range(q):
        i, j = W - 1 - j, i
        H, W = W, H
    return i, j


def action_representation(group: Group) -> Representation:
    """The 4-dimensional representation acting on the (N, W, S, E) channels:
    the regular representation for C4, the quotient representation for D4."""
    if group == Group("cyclic", 4):
        return regular_rep(group)
    if group == Group("dihedral", 4):
        return quotient_rep()
    raise GroupError(
        f"{group.token} has no built-in action on the four directions; "
        "use group c4 or d4 for an equivariant policy head"
    )
