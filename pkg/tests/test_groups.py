import itertools

import numpy as np
import pytest

from steerplan.groups import (ACTION_DELTAS, ACTIONS, Group, GroupElement, GroupError,
                              Representation, action_on_actions, action_representation,
                              compose, element_index, elements, grid_action,
                              group_from_token, inverse, quotient_rep, regular_rep,
                              rep_matrix, standard_rep, trivial_rep)

ALL_TOKENS = ("c2", "c4", "c8", "d2", "d4", "d8")


def all_reps(group):
    reps = [trivial_rep(group), regular_rep(group), standard_rep(group)]
    if group == Group("dihedral", 4):
        reps.append(quotient_rep())
    return reps


def test_element_enumeration():
    c4 = group_from_token("c4")
    els = elements(c4)
    assert len(els) == 4
    assert els[0].is_identity
    assert [g.rotation for g in els] == [0, 1, 2, 3]

    d4 = group_from_token("d4")
    assert len(elements(d4)) == 8  # |D4| = 8

    c2 = group_from_token("c2")
    assert [repr(g) for g in elements(c2)] == ["e", "r1"]


@pytest.mark.parametrize("token", ALL_TOKENS)
def test_enumeration_deterministic_and_distinct(token):
    group = group_from_token(token)
    els = elements(group)
    assert len(els) == group.order
    assert len(set(els)) == group.order
    assert els == elements(group)
    assert [element_index(g) for g in els] == list(range(group.order))


def test_compose_examples():
    c4 = group_from_token("c4")
    r = GroupElement(c4, 1)
    assert compose(r, GroupElement(c4, 3)).is_identity  # r * r^3 = e

    d4 = group_from_token("d4")
    s = GroupElement(d4, 0, True)
    assert compose(s, s).is_identity  # s^2 = e
    sr = compose(s, GroupElement(d4, 1))
    assert compose(sr, sr).is_identity  # (sr)^2 = e


@pytest.mark.parametrize("token", ALL_TOKENS)
def test_group_axioms_latin_square(token):
    group = group_from_token(token)
    els = elements(group)
    table = np.array([[element_index(compose(g, h)) for h in els] for g in els])
    # closure as a Latin square: every row and column is a permutation
    for i in range(group.order):
        assert sorted(table[i, :]) == list(range(group.order))
        assert sorted(table[:, i]) == list(range(group.order))
    # declared identity and inverses
    e = els[0]
    for g in els:
        assert compose(e, g) == g and compose(g, e) == g
        assert compose(g, inverse(g)) == e
        assert compose(inverse(g), g) == e
    # associativity by brute force
    for g, h, k in itertools.product(els, repeat=3):
        assert compose(compose(g, h), k) == compose(g, compose(h, k))


def test_inverse_examples():
    c4 = group_from_token("c4")
    assert inverse(c4.identity()).is_identity
    assert inverse(GroupElement(c4, 1)) == GroupElement(c4, 3)
    d4 = group_from_token("d4")
    sr = compose(GroupElement(d4, 0, True), GroupElement(d4, 1))
    assert inverse(sr) == sr


@pytest.mark.parametrize("token", ALL_TOKENS)
def test_representations_are_homomorphisms(token):
    group = group_from_token(token)
    for rep in all_reps(group):
        for g in elements(group):
            for h in elements(group):
                lhs = rep_matrix(rep, g) @ rep_matrix(rep, h)
                rhs = rep_matrix(rep, compose(g, h))
                if rep.kind == "standard":
                    assert np.allclose(lhs, rhs, atol=1e-12)
                else:
                    assert np.array_equal(lhs, rhs)


@pytest.mark.parametrize("token", ALL_TOKENS)
def test_representations_orthogonal_identity_dims(token):
    group = group_from_token(token)
    expected_dim = {"trivial": 1, "regular": group.order, "quotient": 4, "standard": 2}
    for rep in all_reps(group):
        assert rep.dim == expected_dim[rep.kind]
        assert np.allclose(rep_matrix(rep, group.identity()), np.eye(rep.dim))
        for g in elements(group):
            mat = rep_matrix(rep, g)
            assert np.allclose(mat.T @ mat, np.eye(rep.dim), atol=1e-12)
            if rep.kind != "standard":
                # permutation matrix: entries in {0, 1}, one 1 per row/column
                assert np.isin(mat, (0.0, 1.0)).all()
                assert (mat.sum(axis=0) == 1).all() and (mat.sum(axis=1) == 1).all()


def test_regular_c4_rotation_is_cyclic_shift():
    c4 = group_from_token("c4")
    mat = rep_matrix(regular_rep(c4), GroupElement(c4, 1))
    shifted = mat @ np.array([1.0, 2.0, 3.0, 4.0])
    assert shifted.tolist() == [4.0, 1.0, 2.0, 3.0]


def test_quotient_matches_geometric_action():
    d4 = group_from_token("d4")
    q = quotient_rep()
    for g in elements(d4):
        mat = rep_matrix(q, g)
        for a in range(4):
            onehot = np.zeros(4)
            onehot[a] = 1.0
            assert int(np.argmax(mat @ onehot)) == action_on_actions(g, a)


def test_action_on_actions_examples():
    d4 = group_from_token("d4")
    r = GroupElement(d4, 1)
    assert ACTIONS[action_on_actions(r, ACTIONS.index("north"))] == "west"
    assert action_on_actions(d4.identity(), ACTIONS.index("east")) == ACTIONS.index("east")


def test_action_consistent_with_grid_displacements():
    d4 = group_from_token("d4")
    H = W = 7
    c = 3  # center cell, fixed by every element
    for g in elements(d4):
        for a, (di, dj) in enumerate(ACTION_DELTAS):
            gi, gj = grid_action(g, (c + di, c + dj), H, W)
            assert (gi - c, gj - c) == ACTION_DELTAS[action_on_actions(g, a)]


def test_grid_action_examples():
    d4 = group_from_token("d4")
    e, r = elements(d4)[0], elements(d4)[1]
    assert grid_action(e, (2, 5), 15, 15) == (2, 5)
    # 90 ccw sends the NW corner to the SW corner
    assert grid_action(r, (0, 0), 15, 15) == (14, 0)
    for i in range(9):
        for j in range(9):
            idx = (i, j)
            for _ in range(4):
                idx = grid_action(r, idx, 9, 9)
            assert idx == (i, j)


@pytest.mark.parametrize("token", ("c2", "c4", "d2", "d4"))
def test_grid_action_bijective(token):
    group = group_from_token(token)
    for g in elements(group):
        images = {grid_action(g, (i, j), 6, 6) for i in range(6) for j in range(6)}
        assert len(images) == 36


def test_grid_action_rejects_nonsquare_quarter_turn():
    d4 = group_from_token("d4")
    r = GroupElement(d4, 1)
    with pytest.raises(GroupError):
        grid_action(r, (0, 0), 3, 5)
    # half turns are fine on non-square grids
    assert grid_action(GroupElement(d4, 2), (0, 0), 3, 5) == (2, 4)


def test_group_mismatch_rejected():
    c4 = group_from_token("c4")
    d4 = group_from_token("d4")
    with pytest.raises(GroupError):
        compose(c4.identity(), d4.identity())
    with pytest.raises(GroupError):
        rep_matrix(regular_rep(c4), d4.identity())


def test_invalid_constructions():
    with pytest.raises(GroupError):
        group_from_token("q8")
    with pytest.raises(GroupError):
        GroupElement(group_from_token("c4"), 0, True)
    with pytest.raises(GroupError):
        GroupElement(group_from_token("c4"), 4)
    with pytest.raises(GroupError):
        quotient_rep(7)
    with pytest.raises(GroupError):
        Representation("quotient", group_from_token("d8"))


def test_action_representation_choice():
    assert action_representation(group_from_token("c4")).kind == "regular"
    assert action_representation(group_from_token("d4")).kind == "quotient"
    with pytest.raises(GroupError):
        action_representation(group_from_token("d8"))
