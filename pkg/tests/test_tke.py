import numpy as np
import pytest

from core.errors import FormatTaskMismatch, InvalidNm, InvariantViolation, NoUpdates, ShapeMismatch
from core.tasks import OutputFormat, RoadNetwork, RoadSegment, TaskKind
from core.tke import (
    PROMPT_FEATURES,
    ChangeRateTracker,
    Information,
    Weather,
    aggregate_lora,
    build_prompt,
    change_rate,
    enhance_result,
    enumerate_selection_probabilities,
    featurize_prompt,
    n_selected,
    ratios,
    render_prompt,
    select_layers,
    selection_probabilities,
    selection_probability,
    simulate_selection,
)
from core.tpa import EmbeddingBatch, Normalization
from core.trajectory import SpatioTemporalPoint

BBOX = (116.30, 39.90, 116.40, 39.98)
NORM = Normalization(BBOX, 0, 1000)
POINTS = [SpatioTemporalPoint(116.31 + 0.01 * i, 39.93, 100 * i) for i in range(4)]


# ---------- 提示 ----------
def test_prompt_format_must_match_task():
    prompt = build_prompt(TaskKind.SPD, POINTS)
    assert prompt.format is OutputFormat.POINTS
    assert not prompt.issued_by_server
    with pytest.raises(FormatTaskMismatch):
        build_prompt(TaskKind.SPD, POINTS, fmt=OutputFormat.TRAJECTORY)


def test_render_prompt_client_and_server():
    info = Information(road=RoadNetwork((RoadSegment(0, 116.3, 39.9, 116.4, 39.9),)),
                       weather=Weather("rain", 12.0))
    text = render_prompt(build_prompt(TaskKind.NF, POINTS[:1], info))
    assert text.splitlines()[0].startswith("Task: ")
    assert "(116.310000, 39.930000, 0)" in text
    assert "weather rain, 12" in text and "1 road segments" in text
    assert text.endswith("Format: trajectory")

    batch = EmbeddingBatch(1, (("t", 0), ("t", 10)), np.zeros((2, 32)))
    server = render_prompt(build_prompt(TaskKind.AD, batch))
    assert "2 point embeddings from client 1" in server
    assert "Information: none" in server


def test_unknown_weather_condition():
    with pytest.raises(InvariantViolation):
        Weather("fog", 5.0)


def test_featurize_is_fixed_length_and_deterministic():
    prompt = build_prompt(TaskKind.NF, POINTS, Information(weather=Weather("sunny", 20.0)))
    a = featurize_prompt(prompt, NORM)
    assert a.shape == (PROMPT_FEATURES,)
    np.testing.assert_array_equal(a, featurize_prompt(prompt, NORM))
    empty = featurize_prompt(build_prompt(TaskKind.NF, []), NORM)
    assert empty.shape == (PROMPT_FEATURES,)
    batch = EmbeddingBatch(0, (("t", 0), ("t", 10)), np.ones((2, 32)))
    assert featurize_prompt(build_prompt(TaskKind.TUL, batch), NORM).shape == (PROMPT_FEATURES,)


def test_featurize_separates_tasks():
    a = featurize_prompt(build_prompt(TaskKind.NF, POINTS), NORM)
    b = featurize_prompt(build_prompt(TaskKind.TSim, POINTS), NORM)
    assert not np.array_equal(a, b)


# ---------- 变化率 / 比例 ----------
def test_change_rate_values():
    assert change_rate([2.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert change_rate([1.0, 1.0], [1.0, 1.0]) == 0.0
    with pytest.raises(ShapeMismatch):
        change_rate([1.0], [1.0, 2.0])


def test_ratios_normalize_and_fall_back_to_uniform():
    np.testing.assert_allclose(ratios([1.0, 3.0]), [0.25, 0.75])
    np.testing.assert_allclose(ratios([0.0, 0.0, 0.0, 0.0]), [0.25] * 4)
    with pytest.raises(InvariantViolation):
        ratios([-1.0, 2.0])
    with pytest.raises(InvariantViolation):
        ratios([])


def test_tracker_is_uniform_until_second_snapshot():
    tracker = ChangeRateTracker([0, 1])
    first = tracker.observe({0: np.array([1.0, 0.0]), 1: np.array([1.0, 1.0])})
    assert [s.ratio for s in first] == [0.5, 0.5]
    assert [s.cr for s in first] == [0.0, 0.0]
    second = tracker.observe({0: np.array([2.0, 0.0]), 1: np.array([1.0, 1.0])})
    assert second[0].cr == pytest.approx(1.0)
    np.testing.assert_allclose(tracker.ratios(), [1.0, 0.0])
    np.testing.assert_array_equal(second[0].prev_params, [1.0, 0.0])


# ---------- 层选择 ----------
def test_n_selected_floors():
    assert n_selected(0.25, 8) == 2
    assert n_selected(0.3, 10) == 3
    assert n_selected(1.0, 4) == 4
    assert n_selected(0.1, 4) == 0


def test_selection_probability_hand_values():
    r = [0.2, 0.3, 0.5]
    assert selection_probability(r, 0, 2) == pytest.approx(0.485714, abs=1e-5)
    assert selection_probability(r, 1, 2) == pytest.approx(0.675, abs=1e-5)
    assert selection_probability(r, 2, 2) == pytest.approx(0.839286, abs=1e-5)


@pytest.mark.parametrize("r,n_m", [
    ([0.2, 0.3, 0.5], 1),
    ([0.2, 0.3, 0.5], 3),
    ([0.1, 0.2, 0.3, 0.4], 2),
    ([0.05, 0.15, 0.25, 0.25, 0.3], 3),
    ([1.0, 0.0, 0.0], 2),
])
def test_closed_form_matches_enumeration_and_sums_to_n_m(r, n_m):
    closed = selection_probabilities(r, n_m)
    np.testing.assert_allclose(closed, enumerate_selection_probabilities(r, n_m), atol=1e-12)
    assert closed.sum() == pytest.approx(n_m)


def test_selection_probability_grows_with_own_ratio():
    rng = np.random.default_rng(17)
    for _ in range(300):
        n = int(rng.integers(3, 7))
        base = rng.dirichlet(np.ones(n))
        layer = int(rng.integers(n))
        n_m = int(rng.integers(1, n))
        # 其余层之间的相对比例保持不变
        rest = np.delete(base, layer) / (1.0 - base[layer])
        probs = [selection_probability(np.insert(rest * (1.0 - x), layer, x), layer, n_m)
                 for x in np.linspace(0.02, 0.95, 25)]
        assert all(b >= a - 1e-12 for a, b in zip(probs, probs[1:])), probs


def test_zero_mass_layers_are_drawn_uniformly():
    np.testing.assert_allclose(selection_probabilities([1.0, 0.0, 0.0], 2), [1.0, 0.5, 0.5])


def test_boundary_n_m():
    np.testing.assert_array_equal(selection_probabilities([0.5, 0.5], 0), [0.0, 0.0])
    np.testing.assert_allclose(selection_probabilities([0.2, 0.8], 2), [1.0, 1.0])
    with pytest.raises(InvalidNm):
        selection_probabilities([0.2, 0.3, 0.5], 4)
    with pytest.raises(InvariantViolation):
        selection_probabilities([0.2, 0.3], 1)


def test_monte_carlo_agrees_with_closed_form():
    r = [0.2, 0.3, 0.5]
    empirical = simulate_selection(r, 2, trials=100_000, seed=0)
    np.testing.assert_allclose(empirical, selection_probabilities(r, 2), atol=0.01)
    zero = simulate_selection([1.0, 0.0, 0.0], 2, trials=20_000, seed=1)
    np.testing.assert_allclose(zero, [1.0, 0.5, 0.5], atol=0.02)


def test_select_layers_draws_distinct_layers_deterministically():
    plan = select_layers([0.1, 0.2, 0.3, 0.4], 2, seed=5, round_index=3, layer_ids=[10, 11, 12, 13])
    assert len(set(plan.selected)) == 2
    assert set(plan.selected) <= {10, 11, 12, 13}
    assert plan == select_layers([0.1, 0.2, 0.3, 0.4], 2, seed=5, round_index=3, layer_ids=[10, 11, 12, 13])
    d = plan.to_dict()
    assert d["round"] == 3 and d["n_m"] == 2 and d["layer_ids"] == [10, 11, 12, 13]
    assert sum(d["probabilities"]) == pytest.approx(2.0)


def test_select_layers_skips_zero_ratio_layer_when_possible():
    for seed in range(20):
        assert select_layers([0.5, 0.5, 0.0], 2, seed=seed).selected in {(0, 1), (1, 0)}


# ---------- LoRA 聚合 ----------
def test_aggregate_hand_value():
    out = aggregate_lora(0, [(np.array([2.0]), 10)], np.array([1.0]), total_clients=3)
    assert out[0] == pytest.approx(5.0 / 3.0)


def test_aggregate_all_clients_returns_previous():
    updates = [(np.array([4.0]), 1), (np.array([8.0]), 3)]
    np.testing.assert_array_equal(aggregate_lora(0, updates, np.array([1.0]), total_clients=2), [1.0])


def test_aggregate_fixed_point_and_fedavg_mode():
    w = np.array([0.7, -0.2])
    np.testing.assert_allclose(aggregate_lora(1, [(w, 2), (w, 5)], w, total_clients=4), w)
    updates = [(np.array([4.0]), 1), (np.array([8.0]), 3)]
    assert aggregate_lora(0, updates, np.array([0.0]), 2, mode="fedavg")[0] == pytest.approx(7.0)


def test_aggregate_errors():
    with pytest.raises(NoUpdates):
        aggregate_lora(0, [], np.zeros(1), 3)
    with pytest.raises(InvariantViolation):
        aggregate_lora(0, [(np.zeros(1), 0)], np.zeros(1), 3)
    with pytest.raises(InvariantViolation):
        aggregate_lora(0, [(np.zeros(1), 1)] * 3, np.zeros(1), 2)
    with pytest.raises(InvariantViolation):
        aggregate_lora(0, [(np.zeros(1), 1)], np.zeros(1), 2, mode="median")


# ---------- 结果增强 ----------
def test_enhance_result_is_normalized_mixture():
    np.testing.assert_allclose(enhance_result(np.array([0.2, 0.8]), np.array([0.6, 0.4])), [0.4, 0.6])
    np.testing.assert_allclose(enhance_result(np.array([0.2, 0.8]), np.array([0.6, 0.4]), 0.0), [0.2, 0.8])
