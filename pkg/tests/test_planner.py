import numpy as np
import pytest

from steerplan import autodiff as ad
from steerplan.datasets import MazeSpec, bfs_distances, gen_maze
from steerplan.fields import FieldType, transform_field, FeatureField
from steerplan.groups import (GroupElement, elements, group_from_token, quotient_rep,
                              action_on_actions, trivial_rep)
from steerplan.planner import (CheckpointError, OccupancyMap, PlannerError, SpatialMDP,
                               build_spatial_mdp, equivariance_audit,
                               equivariance_audit_per_iteration, exact_value_iteration,
                               extract_policy, grid_elements, load_checkpoint, make_model,
                               map_to_channels, planner_forward, predict_logits, rollout,
                               rollout_all, save_checkpoint, symvin_forward,
                               transform_logits, vin_forward)

D4 = group_from_token("d4")


def empty_map(n, goal=None):
    goal = goal or (n // 2, n // 2)
    return OccupancyMap(np.zeros((n, n), dtype=bool), goal)


# ---------------------------------------------------------------------------
# Spatial MDP


def test_map_validation():
    with pytest.raises(PlannerError):
        OccupancyMap(np.ones((3, 3), dtype=bool), (1, 1))
    occ = np.ones((3, 3), dtype=bool)
    occ[1, 1] = False
    with pytest.raises(PlannerError):
        OccupancyMap(occ, (1, 1))  # no free cell besides the goal
    with pytest.raises(PlannerError):
        OccupancyMap(np.zeros((3, 3), dtype=bool), (3, 0))


def test_empty_spatial_mdp_rewards():
    mdp = build_spatial_mdp(empty_map(3, goal=(1, 1)), step_cost=-1.0, trap_reward=-36.0)
    # interior moves cost -1; moves off the bounded grid are traps
    assert mdp.reward[1, 1].tolist() == [0.0, 0.0, 0.0, 0.0]  # absorbing goal
    assert mdp.reward[0, 1].tolist() == [-36.0, -1.0, -1.0, -1.0]
    assert mdp.reward[0, 0, 0] == -36.0 and mdp.reward[0, 0, 1] == -36.0
    assert mdp.goal == (1, 1)


def test_single_obstacle_traps_entering_moves():
    occ = np.zeros((5, 5), dtype=bool)
    occ[2, 2] = True
    mdp = build_spatial_mdp(OccupancyMap(occ, (0, 0)))
    trap = mdp.trap_reward
    assert trap == -100.0  # -4 * H * W
    assert mdp.reward[3, 2, 0] == trap  # north from below lands on it
    assert mdp.reward[2, 3, 1] == trap  # west from the right
    assert mdp.reward[1, 2, 2] == trap  # south from above
    assert mdp.reward[2, 1, 3] == trap  # east from the left
    values = mdp.reward.reshape(-1)
    assert ((values == trap) | (values == -1.0) | (values == 0.0)).all()


def test_reward_field_is_invariant_under_grid_isometries():
    # reward of g.M equals the transformed reward of M with permuted actions
    m = gen_maze(MazeSpec(9, 0.25, rng_seed=5))
    base = build_spatial_mdp(m).reward
    ftype = FieldType((quotient_rep(),))
    for g in elements(D4):
        rotated = build_spatial_mdp(m.transform(g)).reward
        expected = transform_field(g, FeatureField(base, ftype)).data
        assert np.array_equal(rotated, expected)


def test_mdp_validation():
    with pytest.raises(PlannerError):
        build_spatial_mdp(empty_map(3), gamma=0.0)
    with pytest.raises(PlannerError):
        build_spatial_mdp(empty_map(3), step_cost=1.0)
    with pytest.raises(PlannerError):
        SpatialMDP(np.zeros((3, 3, 3)), 1.0, -1.0)


# ---------------------------------------------------------------------------
# Exact value iteration


def test_three_cell_corridor():
    m = OccupancyMap(np.zeros((1, 3), dtype=bool), (0, 0))
    V, Q, policy = exact_value_iteration(build_spatial_mdp(m))
    assert V.tolist() == [[0.0, -1.0, -2.0]]
    assert policy[0, 1] == 1 and policy[0, 2] == 1  # west, toward the goal


def test_empty_map_matches_manhattan_distance():
    m = empty_map(5)
    V, _, policy = exact_value_iteration(build_spatial_mdp(m))
    _, steps = rollout_all(policy, m)
    for i in range(5):
        for j in range(5):
            manhattan = abs(i - 2) + abs(j - 2)
            assert V[i, j] == -manhattan
            assert steps[i, j] == manhattan


@pytest.mark.parametrize("seed", range(5))
def test_oracle_matches_bfs_on_random_mazes(seed):
    m = gen_maze(MazeSpec(15, 0.3, rng_seed=seed))
    _, _, policy = exact_value_iteration(build_spatial_mdp(m))
    dist = bfs_distances(m.occupancy, m.goal)
    success, steps = rollout_all(policy, m)
    free = ~m.occupancy
    assert success[free].all()
    assert np.array_equal(steps[free], dist[free])


def test_oracle_on_torus_wraps():
    occ = np.zeros((5, 5), dtype=bool)
    occ[:, 2] = True  # wall splitting the cylinder unless you wrap
    occ[2, 2] = False
    m = OccupancyMap(occ, (0, 0))
    mdp = build_spatial_mdp(m, torus=True)
    _, _, policy = exact_value_iteration(mdp)
    dist = bfs_distances(m.occupancy, m.goal, torus=True)
    success, steps = rollout_all(policy, m, torus=True)
    free = ~m.occupancy
    assert success[free].all()
    assert np.array_equal(steps[free], dist[free])
    assert steps[0, 4] == 1  # east wraps straight to the goal column


def test_monotone_convergence_from_trap_floor():
    m = gen_maze(MazeSpec(9, 0.3, rng_seed=3))
    mdp = build_spatial_mdp(m)
    H, W = m.shape
    previous = None
    for k in range(H * W + 5):
        V, _, _ = exact_value_iteration(mdp, iterations=k)
        if previous is not None:
            assert (V >= previous - 1e-12).all()
        previous = V
    V_exact, _, _ = exact_value_iteration(mdp, iterations=H * W)
    V_more, _, _ = exact_value_iteration(mdp, iterations=H * W + 7)
    assert np.array_equal(V_exact, V_more)


def test_oracle_value_equivariance_integer_exact():
    # transforming the task transforms the value field, exactly
    m = gen_maze(MazeSpec(9, 0.3, rng_seed=11))
    V, _, _ = exact_value_iteration(build_spatial_mdp(m))
    for g in elements(D4):
        Vg, _, _ = exact_value_iteration(build_spatial_mdp(m.transform(g)))
        expected = transform_field(g, FeatureField(V[..., None],
                                                   FieldType((trivial_rep(D4),)))).data[..., 0]
        assert np.array_equal(Vg, expected)


# ---------------------------------------------------------------------------
# Planner forward graphs


def test_k_zero_passes_reward_head_through_policy():
    model = make_model(variant="vin", k=0, f=3, cq=4, hidden=6, rng=0)
    logits = vin_forward(model, empty_map(5))
    assert logits.shape == (5, 5, 4)
    assert np.isfinite(logits).all()
    again = vin_forward(model, empty_map(5))
    assert np.array_equal(logits, again)


def test_variant_checks():
    vin = make_model(variant="vin", k=2, cq=2, hidden=2, rng=0)
    sym = make_model(variant="symvin", group="d4", k=2, cq=2, hidden=2, rng=0)
    with pytest.raises(PlannerError):
        symvin_forward(vin, empty_map(5))
    with pytest.raises(PlannerError):
        vin_forward(sym, empty_map(5))
    with pytest.raises(PlannerError):
        make_model(variant="vin", equiv_head=True)
    with pytest.raises(PlannerError):
        make_model(variant="symvin", f=4)


def test_hand_set_kernels_emulate_exact_value_iteration():
    # transition kernel with identity-shift taps reproduces Bellman backups,
    # so argmax(Q_K) matches the oracle's greedy policy on an empty map
    gamma = 0.99
    m = empty_map(5)
    mdp = build_spatial_mdp(m, gamma=gamma)
    _, _, oracle_policy = exact_value_iteration(mdp, iterations=400)

    K = 400
    taps = np.zeros((3, 3, 4, 5))  # out: 4 action channels; in: [R-block; V]
    for a, (di, dj) in enumerate([(-1, 0), (0, -1), (1, 0), (0, 1)]):
        taps[1, 1, a, a] = 1.0             # Q_a += R_a (center tap on R block)
        taps[1 + di, 1 + dj, a, 4] = gamma  # Q_a += gamma * V(s + delta_a)

    rhat = ad.constant(mdp.reward[None])
    w = ad.param(ad.Parameter(taps))
    w_r = ad.slice_in_channels(w, 0, 4)
    w_v = ad.slice_in_channels(w, 4, 5)
    rq = ad.conv2d(rhat, w_r, "zero")
    v = ad.constant(np.zeros((1, 5, 5, 1)))
    for _ in range(K):
        q = ad.add(rq, ad.conv2d(v, w_v, "zero"))
        v = ad.block_max(q, 4)
    network_policy = extract_policy(q.value[0])
    assert np.array_equal(network_policy, oracle_policy)


def test_vin_translation_equivariance_with_circular_padding():
    model = make_model(variant="vin", k=8, f=3, cq=4, hidden=8, padding="circular", rng=1)
    m = gen_maze(MazeSpec(9, 0.2, rng_seed=2))
    base = vin_forward(model, m)
    for shift in ((1, 0), (0, 2), (3, 3)):
        occ = np.roll(m.occupancy, shift, axis=(0, 1))
        goal = ((m.goal[0] + shift[0]) % 9, (m.goal[1] + shift[1]) % 9)
        shifted = vin_forward(model, OccupancyMap(occ, goal))
        assert np.abs(shifted - np.roll(base, shift, axis=(0, 1))).max() < 1e-6


def test_symvin_fully_equivariant_forward():
    model = make_model(variant="symvin", group="d4", k=10, f=3, cq=3, hidden=6,
                       equiv_head=True, rng=5)
    m = gen_maze(MazeSpec(9, 0.3, rng_seed=8))
    report = equivariance_audit(lambda mm: symvin_forward(model, mm), m, D4)
    assert len(report) == 8
    assert report[D4.identity()] == 0.0
    assert max(report.values()) < 1e-4


def test_symvin_per_iteration_audit():
    model = make_model(variant="symvin", group="d4", k=12, f=3, cq=2, hidden=4,
                       equiv_head=True, rng=6)
    m = gen_maze(MazeSpec(9, 0.3, rng_seed=9))
    per_iter, logits_report = equivariance_audit_per_iteration(model, m)
    assert per_iter.shape == (12,)
    assert per_iter.max() < 1e-4
    assert max(logits_report.values()) < 1e-4


def test_symvin_trivial_value_field_is_scalar_invariant():
    # with trivial fibers the V trace transforms by spatial rotation alone
    from steerplan.fields import spatial_map
    model = make_model(variant="symvin", group="d4", k=6, f=3, cq=4, hidden=4,
                       rho_q="trivial", rng=7)
    m = gen_maze(MazeSpec(9, 0.3, rng_seed=10))
    _, base_trace = planner_forward(model, map_to_channels(m)[None], trace=True)
    for g in elements(D4):
        _, trace_g = planner_forward(model, map_to_channels(m.transform(g))[None], trace=True)
        for k in range(model.K):
            expected = spatial_map(base_trace[k][0], g)
            assert np.abs(trace_g[k][0] - expected).max() < 1e-4


def test_plain_vin_is_not_equivariant():
    model = make_model(variant="vin", k=8, f=3, cq=4, hidden=8, rng=3)
    m = gen_maze(MazeSpec(9, 0.35, rng_seed=12))
    report = equivariance_audit(lambda mm: vin_forward(model, mm), m, D4)
    assert report[D4.identity()] == 0.0
    scale = np.abs(vin_forward(model, m)).max()
    assert max(report.values()) > 0.01 * scale


def test_symmetric_map_audit_reports_self_consistency():
    model = make_model(variant="vin", k=4, f=3, cq=2, hidden=4, rng=4)
    m = empty_map(7)  # invariant under all of D4
    base = vin_forward(model, m)
    report = equivariance_audit(lambda mm: vin_forward(model, mm), m, D4)
    for g in elements(D4):
        expected = np.abs(vin_forward(model, m) - transform_logits(g, base)).max()
        assert np.isclose(report[g], expected)


def test_grid_elements_subsets():
    assert len(grid_elements(group_from_token("d8"))) == 8
    assert len(grid_elements(group_from_token("c8"))) == 4
    assert len(grid_elements(D4)) == 8


# ---------------------------------------------------------------------------
# Policy extraction and rollout


def test_extract_policy_rules():
    logits = np.zeros((2, 2, 4))
    logits[0, 0, 2] = 3.0
    policy = extract_policy(logits)
    assert policy[0, 0] == 2
    assert policy[1, 1] == 0  # all-equal ties go north
    assert np.array_equal(extract_policy(logits + 5.0), policy)


def test_rollout_basics():
    m = empty_map(5)
    _, _, policy = exact_value_iteration(build_spatial_mdp(m))
    assert rollout(policy, m, (2, 2)) == {"success": True, "steps": 0}
    assert rollout(policy, m, (0, 0)) == {"success": True, "steps": 4}
    into_wall = np.zeros((5, 5), dtype=np.int8)  # everyone marches north
    result = rollout(into_wall, m, (3, 3))  # walks off the top edge
    assert result["success"] is False
    with pytest.raises(PlannerError):
        rollout(policy, OccupancyMap(np.eye(5, dtype=bool) > 0, (0, 1)), (0, 0))


def test_rollout_failure_on_obstacle_hit():
    occ = np.zeros((3, 3), dtype=bool)
    occ[1, 1] = True
    m = OccupancyMap(occ, (0, 1))
    policy = np.zeros((3, 3), dtype=np.int8)  # north everywhere
    assert rollout(policy, m, (2, 1))["success"] is False  # steps into the obstacle
    assert rollout(policy, m, (2, 0))["success"] is False  # walks off the grid
    east = np.full((3, 3), 3, dtype=np.int8)
    assert rollout(east, m, (0, 0)) == {"success": True, "steps": 1}


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_roundtrip(tmp_path):
    model = make_model(variant="symvin", group="d4", k=5, f=3, cq=2, hidden=4,
                       equiv_head=True, size=9, rng=8)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.variant == "symvin" and loaded.group.token == "d4"
    assert (loaded.K, loaded.F, loaded.cq, loaded.hidden) == (5, 3, 2, 4)
    assert loaded.equiv_head and loaded.size == 9
    for a, b in zip(model.params, loaded.params):
        assert np.array_equal(a.value, b.value)
    m = gen_maze(MazeSpec(9, 0.3, rng_seed=1))
    assert np.array_equal(symvin_forward(model, m), symvin_forward(loaded, m))


def test_checkpoint_errors(tmp_path):
    model = make_model(variant="vin", k=2, cq=2, hidden=2, rng=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "bad_magic.ckpt"
    bad_magic.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "bad_version.ckpt"
    bad_version.write_bytes(blob[:4] + b"\x02\x00\x00\x00" + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad_version)

    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(blob[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)


def test_predict_logits_batching_and_k_override():
    model = make_model(variant="vin", k=4, cq=2, hidden=2, rng=2)
    maps = np.stack([map_to_channels(gen_maze(MazeSpec(7, 0.2, rng_seed=s)))
                     for s in range(5)])
    all_at_once = predict_logits(model, maps, batch_size=2)
    one_by_one = np.concatenate([predict_logits(model, maps[i:i + 1]) for i in range(5)])
    assert np.abs(all_at_once - one_by_one).max() < 1e-12
    deeper = predict_logits(model, maps, k_override=8)
    assert deeper.shape == all_at_once.shape
    assert model.K == 4  # override does not mutate the model
