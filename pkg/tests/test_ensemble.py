import numpy as np
import pytest

from mcseg.ensemble import (
    brier_matrix,
    build_combiner_inputs,
    candidate_seed,
    correlation_matrix,
    make_bag_plan,
    member_probability_maps,
    plural_correlation,
    select_members,
    train_candidates,
    train_combiner,
)
from mcseg.errors import ConfigError, SelectionError, ShapeError
from mcseg.nn import MiniSegNetConfig, TrainConfig, train

TINY_MODEL = MiniSegNetConfig(in_channels=1, base_channels=2, depth=1, dropout_rate=0.2)


def tiny_task(n=8, size=16, seed=0):
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size), dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=np.float32)
    for i in range(n):
        r = rng.integers(2, size - 6)
        c = rng.integers(2, size - 6)
        images[i] = rng.normal(0.2, 0.05, (size, size))
        images[i, r : r + 4, c : c + 4] = 0.9
        masks[i, r : r + 4, c : c + 4] = 1.0
    return np.clip(images, 0, 1), masks


# -- bagging -------------------------------------------------------------------


def test_bag_plan_single_index_is_forced():
    plan = make_bag_plan(1, 4, seed=0)
    for bag in plan.index_lists:
        assert bag.tolist() == [0]


def test_bag_plan_deterministic():
    a = make_bag_plan(50, 5, seed=9)
    b = make_bag_plan(50, 5, seed=9)
    for x, y in zip(a.index_lists, b.index_lists):
        assert np.array_equal(x, y)


def test_bag_unique_fraction_matches_bootstrap_law():
    # expected unique fraction of an n-out-of-n resample is 1 - 1/e
    plan = make_bag_plan(1000, 20, seed=3)
    fractions = [len(np.unique(bag)) / 1000 for bag in plan.index_lists]
    assert abs(np.mean(fractions) - (1 - np.exp(-1))) < 0.03


def test_bag_plan_preconditions():
    with pytest.raises(ConfigError):
        make_bag_plan(0, 3, seed=0)
    with pytest.raises(ConfigError):
        make_bag_plan(10, 0, seed=0)


# -- candidate training ----------------------------------------------------------


def test_candidates_differ_and_histories_align():
    x, y = tiny_task(10, seed=1)
    vx, vy = tiny_task(4, seed=2)
    plan = make_bag_plan(10, 3, seed=5)
    cfg = TrainConfig(batch_size=5, max_epochs=2, seed=42)
    results = train_candidates(plan, TINY_MODEL, cfg, x, y, vx, vy)
    assert len(results) == 3
    for res in results:
        assert len(res.history) == res.stopped_epoch
    for i in range(3):
        for j in range(i + 1, 3):
            same = all(
                np.array_equal(results[i].weights.arrays[k], results[j].weights.arrays[k])
                for k in results[i].weights.arrays
            )
            assert not same, (i, j)


def test_single_candidate_reduces_to_plain_training():
    x, y = tiny_task(6, seed=3)
    vx, vy = tiny_task(3, seed=4)
    plan = make_bag_plan(6, 1, seed=8)
    cfg = TrainConfig(batch_size=3, max_epochs=2, seed=13)
    [via_ensemble] = train_candidates(plan, TINY_MODEL, cfg, x, y, vx, vy)
    import dataclasses

    direct_cfg = dataclasses.replace(cfg, seed=candidate_seed(cfg.seed, 0))
    bag = plan.index_lists[0]
    direct = train(TINY_MODEL, x[bag], y[bag], vx, vy, direct_cfg)
    for name in via_ensemble.weights.arrays:
        assert np.array_equal(via_ensemble.weights.arrays[name], direct.weights.arrays[name])


def test_workers_do_not_change_candidate_results():
    x, y = tiny_task(8, seed=5)
    vx, vy = tiny_task(3, seed=6)
    plan = make_bag_plan(8, 3, seed=2)
    cfg = TrainConfig(batch_size=4, max_epochs=2, seed=77)
    seq = train_candidates(plan, TINY_MODEL, cfg, x, y, vx, vy, workers=1)
    par = train_candidates(plan, TINY_MODEL, cfg, x, y, vx, vy, workers=3)
    for a, b in zip(seq, par):
        for name in a.weights.arrays:
            assert np.array_equal(a.weights.arrays[name], b.weights.arrays[name])


# -- Brier matrix ------------------------------------------------------------------


def test_brier_perfect_model_scores_zero():
    _, masks = tiny_task(4, seed=7)
    roi = np.ones_like(masks[0])
    e = brier_matrix([masks], masks, masks, roi)  # maps == labels
    assert np.allclose(e[0], 0.0)


def test_brier_constant_half_scores_quarter():
    _, masks = tiny_task(4, seed=8)
    roi = np.ones_like(masks[0])
    maps = np.full_like(masks, 0.5)
    e = brier_matrix([maps], masks, masks, roi)
    assert np.allclose(e[0], 0.25)


def test_brier_matches_per_pixel_brute_force():
    rng = np.random.default_rng(9)
    images = rng.random((3, 4, 4)).astype(np.float32)
    masks = (rng.random((3, 4, 4)) > 0.5).astype(np.float32)
    roi = (rng.random((4, 4)) > 0.3).astype(np.float32)
    roi[0, 0] = 1
    maps = rng.random((3, 4, 4)).astype(np.float32)
    e = brier_matrix([maps], images, masks, roi)
    for j in range(3):
        total, count = 0.0, 0
        for yy in range(4):
            for xx in range(4):
                if roi[yy, xx] == 1:
                    total += (float(maps[j, yy, xx]) - float(masks[j, yy, xx])) ** 2
                    count += 1
        assert e[0, j] == pytest.approx(total / count, abs=1e-9)


# -- correlation and plural correlation ------------------------------------------------


def test_identical_error_rows_fully_correlated():
    row = np.array([0.1, 0.4, 0.2, 0.3])
    r = correlation_matrix(np.stack([row, row.copy()]))
    assert r[0, 1] == pytest.approx(1.0)


def test_affine_opposite_rows_anticorrelated():
    row = np.array([0.1, 0.4, 0.2, 0.3])
    r = correlation_matrix(np.stack([row, -row + 0.7]))
    assert r[0, 1] == pytest.approx(-1.0)


def test_correlation_matches_textbook_pearson():
    rng = np.random.default_rng(10)
    e = rng.random((3, 5))
    r = correlation_matrix(e)
    for i in range(3):
        for j in range(3):
            xi, xj = e[i], e[j]
            num = np.mean((xi - xi.mean()) * (xj - xj.mean()))
            den = xi.std() * xj.std()
            assert r[i, j] == pytest.approx(num / den, abs=1e-12)
    assert np.allclose(r, r.T)
    assert np.allclose(np.diag(r), 1.0)


def test_zero_variance_row_names_candidate():
    e = np.array([[0.25, 0.25, 0.25], [0.1, 0.2, 0.3]])
    with pytest.raises(SelectionError, match="candidate 0"):
        correlation_matrix(e)


def test_plural_correlation_identity_matrix_is_zero():
    r = np.eye(3)
    for i in range(3):
        assert plural_correlation(r, i) == 0.0


def test_plural_correlation_two_candidates_is_r_squared():
    for rho in (-0.8, -0.3, 0.0, 0.5, 0.9):
        r = np.array([[1.0, rho], [rho, 1.0]])
        assert plural_correlation(r, 0) == pytest.approx(rho**2, abs=1e-12)


def test_plural_correlation_uniform_half_off_diagonals():
    r = np.full((3, 3), 0.5)
    np.fill_diagonal(r, 1.0)
    for i in range(3):
        assert plural_correlation(r, i) == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_plural_correlation_requires_two_candidates():
    with pytest.raises(SelectionError):
        plural_correlation(np.eye(1), 0)


def test_plural_correlation_handles_near_singular_submatrix():
    # two near-duplicate candidates make R_{-2} ill-conditioned
    r = np.array([[1.0, 1.0 - 1e-14, 0.3], [1.0 - 1e-14, 1.0, 0.3], [0.3, 0.3, 1.0]])
    value = plural_correlation(r, 2)
    assert 0.0 <= value <= 1.0


# -- selection ----------------------------------------------------------------------


def test_top_k_equal_to_m_selects_everyone():
    rng = np.random.default_rng(11)
    e = rng.random((4, 6))
    r = correlation_matrix(e)
    report = select_members(r, policy="top_k", top_k=4)
    assert report.selected == [0, 1, 2, 3]


def test_identity_correlation_tie_breaks_by_index():
    report = select_members(np.eye(15), policy="top_k", top_k=3)
    assert report.selected == [0, 1, 2]
    assert len(report.rho2) == 15


def test_threshold_one_keeps_all():
    rng = np.random.default_rng(12)
    r = correlation_matrix(rng.random((5, 8)))
    report = select_members(r, policy="threshold", theta=1.0)
    assert report.selected == [0, 1, 2, 3, 4]


def test_threshold_zero_members_advises_top_k():
    row = np.array([0.1, 0.4, 0.2, 0.3])
    r = correlation_matrix(np.stack([row, row + 1e-9]))  # rho2 ~ 1 for both
    with pytest.raises(SelectionError, match="top_k"):
        select_members(r, policy="threshold", theta=1e-6)


def test_threshold_monotonicity():
    rng = np.random.default_rng(13)
    r = correlation_matrix(rng.random((6, 10)))
    previous: set = set()
    for theta in (0.2, 0.5, 0.8, 1.0):
        try:
            selected = set(select_members(r, policy="threshold", theta=theta).selected)
        except SelectionError:
            selected = set()
        assert previous <= selected
        previous = selected


def test_unknown_policy_rejected():
    with pytest.raises(ConfigError):
        select_members(np.eye(3), policy="bottom_k")


# -- combiner inputs and training ---------------------------------------------------


def test_combiner_inputs_single_member_is_passthrough():
    rng = np.random.default_rng(14)
    maps = rng.random((1, 5, 8, 8)).astype(np.float32)
    stacked = build_combiner_inputs(maps)
    assert stacked.shape == (5, 1, 8, 8)
    assert np.array_equal(stacked[:, 0], maps[0])


def test_combiner_inputs_channel_order_and_image_flag():
    rng = np.random.default_rng(15)
    maps = rng.random((3, 4, 8, 8)).astype(np.float32)
    images = rng.random((4, 8, 8)).astype(np.float32)
    stacked = build_combiner_inputs(maps)
    assert stacked.shape == (4, 3, 8, 8)
    for c in range(3):
        assert np.array_equal(stacked[:, c], maps[c])
    with_img = build_combiner_inputs(maps, images)
    assert with_img.shape == (4, 4, 8, 8)
    assert np.array_equal(with_img[:, 3], images)


def test_combiner_inputs_validate_range():
    bad = np.full((1, 2, 4, 4), 1.5, dtype=np.float32)
    with pytest.raises(ShapeError):
        build_combiner_inputs(bad)


def test_member_probability_maps_accepts_precomputed_arrays():
    rng = np.random.default_rng(16)
    images = rng.random((3, 8, 8)).astype(np.float32)
    fake = rng.random((3, 8, 8)).astype(np.float32)
    maps = member_probability_maps([fake], images)
    assert np.array_equal(maps[0], fake)


def test_combiner_learns_passthrough_from_perfect_member():
    # a member that outputs the ground truth: the combiner's validation loss
    # should approach the member's (~0) within a small margin
    x, y = tiny_task(24, seed=17)
    vx, vy = tiny_task(8, seed=18)
    maps_train = y[None]  # K=1 perfect member
    maps_vs1 = vy[None]
    model = MiniSegNetConfig(in_channels=1, base_channels=4, depth=1, dropout_rate=0.0)
    cfg = TrainConfig(batch_size=8, max_epochs=80, patience=80, learning_rate=1e-2, seed=4)
    result = train_combiner(maps_train, y, maps_vs1, vy, model, cfg)
    best_vs1 = min(h.vs1_loss for h in result.history)
    assert best_vs1 <= 0.05  # perfect member's BCE is 0


def test_combiner_input_channels_match_member_count():
    x, y = tiny_task(6, seed=19)
    maps = np.stack([y, y, y])
    stacked = build_combiner_inputs(maps)
    assert stacked.shape[1] == 3


def test_combiner_training_is_deterministic():
    x, y = tiny_task(8, seed=20)
    vx, vy = tiny_task(4, seed=21)
    maps_train = np.stack([y])
    maps_vs1 = np.stack([vy])
    cfg = TrainConfig(batch_size=4, max_epochs=2, seed=55)
    a = train_combiner(maps_train, y, maps_vs1, vy, TINY_MODEL, cfg)
    b = train_combiner(maps_train, y, maps_vs1, vy, TINY_MODEL, cfg)
    for name in a.weights.arrays:
        assert np.array_equal(a.weights.arrays[name], b.weights.arrays[name])
