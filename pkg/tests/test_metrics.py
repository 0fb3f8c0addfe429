import numpy as np

from steerplan.datasets import MazeSpec, gen_maze, generate_dataset
from steerplan.metrics import (CSV_HEADER, MetricsRow, evaluate_model, evaluate_oracle,
                               evaluate_policy, masked_accuracy, read_metrics_csv,
                               write_metrics_csv)
from steerplan.planner import (OccupancyMap, build_spatial_mdp, exact_value_iteration,
                               make_model)


def test_csv_schema_and_parse_back(tmp_path):
    rows = [MetricsRow(0, "train", 1.2345678901234, 50.0, 49.999999999, 12.25),
            MetricsRow(1, "val", 0.1, 100.0, 100.0, 0.03125)]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(rows, path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(CSV_HEADER)
    parsed = read_metrics_csv(path)
    assert parsed == rows


def test_oracle_policy_scores_perfectly():
    samples = generate_dataset("nav2d", 9, 20, seed=2, split="test")
    stats = evaluate_oracle(samples)
    assert stats["success_rate"] == 100.0
    assert stats["spl"] == 100.0


def test_oracle_policy_perfect_on_torus_cspace():
    samples = generate_dataset("manip2d", 18, 3, seed=2, split="test")
    stats = evaluate_oracle(samples, torus=True)
    assert stats["success_rate"] == 100.0 and stats["spl"] == 100.0


def test_uniform_north_policy_fails_when_goal_is_unreachable_northward():
    m = OccupancyMap(np.zeros((5, 5), dtype=bool), (4, 2))  # goal on the south edge
    north = np.zeros((5, 5), dtype=np.int8)
    success, spl = evaluate_policy(north, m)
    assert success == spl == 0.0


def test_spl_bounded_by_success_rate():
    samples = generate_dataset("nav2d", 9, 10, seed=4, split="val")
    model = make_model(variant="vin", k=6, cq=4, hidden=8, rng=1)
    stats = evaluate_model(model, samples)
    assert 0.0 <= stats["spl"] <= stats["success_rate"] <= 100.0
    assert np.isfinite(stats["loss"])


def test_spl_penalizes_longer_paths():
    # a policy that detours but still reaches the goal has SPL < success
    m = OccupancyMap(np.zeros((5, 5), dtype=bool), (0, 0))
    _, _, optimal = exact_value_iteration(build_spatial_mdp(m))
    detour = optimal.copy()
    detour[2, 1] = 3  # step away from the goal; the rest of the policy recovers
    s_opt, spl_opt = evaluate_policy(optimal, m)
    s_det, spl_det = evaluate_policy(detour, m)
    assert s_opt == spl_opt == 1.0
    assert s_det == 1.0 and spl_det < 1.0


def test_masked_accuracy():
    logits = np.zeros((1, 2, 2, 4))
    logits[0, 0, 0, 3] = 1.0
    labels = np.full((1, 2, 2), 255, dtype=np.uint8)
    labels[0, 0, 0] = 3
    labels[0, 0, 1] = 1
    assert masked_accuracy(logits, labels) == 0.5
