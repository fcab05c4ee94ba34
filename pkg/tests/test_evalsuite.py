import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itergan import evalsuite as ev

from oracles import (friedman_permutation_p, friedman_rank_formula, kl_loop, l1_loop, masked_l1_loop,
                     ssim_direct, vifp_direct)

# 3 models x 6 pairs, no ties; rank sums 7, 13, 16.
FRIEDMAN_TABLE = np.array([[1, 2, 3]] * 5 + [[2, 3, 1]], dtype=float)


def _img(rng, h, w):
    return rng.random((h, w, 3))


def _random_shapes(rng, n, lo, hi=32):
    return [(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))) for _ in range(n)]


def test_pixel_metrics_match_loops():
    rng = np.random.default_rng(0)
    for h, w in _random_shapes(rng, 20, 8):
        B, T = _img(rng, h, w), _img(rng, h, w)
        M = rng.random((h, w)) < 0.4
        assert abs(ev.metric_l1(B, T) - l1_loop(B, T)) <= 1e-9
        assert abs(ev.metric_l1m(B, T, M) - masked_l1_loop(B, T, M)) <= 1e-9


def test_ssim_matches_direct_windows():
    rng = np.random.default_rng(1)
    for h, w in _random_shapes(rng, 10, 11):
        B, T = _img(rng, h, w), _img(rng, h, w)
        assert abs(ev.ssim(B, T) - ssim_direct(B, T)) <= 1e-9


def test_vifp_matches_direct_loops():
    rng = np.random.default_rng(2)
    for h, w in _random_shapes(rng, 6, 8, 24):
        T = _img(rng, h, w)
        B = np.clip(T + rng.normal(0, 0.1, T.shape), 0, 1)
        assert abs(ev.vifp(B, T) - vifp_direct(B, T)) <= 1e-9


def test_kl_matches_loop_and_known_values():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, q = rng.random(10), rng.random(10)
        assert abs(ev.kl_divergence(p, q) - kl_loop(p, q)) <= 1e-12
    assert ev.kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-8)
    p, q = [0.9, 0.1], [0.5, 0.5]
    assert ev.kl_divergence(p, q) != pytest.approx(ev.kl_divergence(q, p))
    assert ev.kl_divergence(p, p) == pytest.approx(0, abs=1e-15)


def test_label_model_distribution():
    lm = ev.RandomProjectionLabelModel()
    img = np.random.default_rng(0).random((32, 32, 3))
    p = lm(img)
    assert p.shape == (10,) and np.all(p > 0) and p.sum() == pytest.approx(1)
    assert ev.kl_label_divergence(lm, img, img) == pytest.approx(0, abs=1e-12)


def test_quality_identities():
    img = np.random.default_rng(4).random((24, 24, 3))
    assert ev.ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert ev.vifp(img, img) == pytest.approx(1.0, abs=1e-9)
    assert ev.metric_l1(img, img) == 0
    flat = np.full((16, 16, 3), 0.3)
    assert ev.vifp(flat, flat) == 1.0


def test_vifp_drops_with_noise():
    rng = np.random.default_rng(5)
    T = rng.random((32, 32, 3))
    scores = [ev.vifp(np.clip(T + rng.normal(0, s, T.shape), 0, 1), T) for s in (0.02, 0.1, 0.3)]
    assert scores[0] > scores[1] > scores[2]


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ev.ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    assert np.isfinite(ev.vifp(np.zeros((8, 8, 3)) + 0.2, np.random.default_rng(0).random((8, 8, 3))))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), h=st.integers(11, 20), w=st.integers(11, 20))
def test_metric_ranges(seed, h, w):
    r = np.random.default_rng(seed)
    B, T = r.random((h, w, 3)), r.random((h, w, 3))
    assert 0 <= ev.metric_l1(B, T) <= 1
    assert -1 <= ev.ssim(B, T) <= 1
    assert ev.ssim(B, T) == pytest.approx(ev.ssim(T, B))


# ----------------------------------------------------------------------------
# projective baseline


def test_projective_zero_degrees_is_identity():
    img = np.random.default_rng(6).random((32, 40, 3))
    assert np.allclose(ev.projective_baseline(img, 0), img, atol=1e-9)


@pytest.mark.parametrize("deg", [5, 15, 30])
def test_projective_round_trip_interior(deg):
    # smooth image, so bilinear resampling error stays small
    v, u = np.mgrid[0:64, 0:64] / 64.0
    img = np.stack([0.5 + 0.4 * np.sin(3 * u), 0.5 + 0.4 * np.cos(2 * v), 0.5 + 0.3 * np.sin(u + v)], -1)
    H = ev.rotation_homography(64, 64, deg)
    back = ev.warp_homography(ev.warp_homography(img, H), np.linalg.inv(H))
    interior = slice(16, 48)
    assert ev.metric_l1(back[interior, interior], img[interior, interior]) <= 0.02


def test_projective_warp_is_linear():
    rng = np.random.default_rng(7)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    H = ev.rotation_homography(32, 32, 20)
    lhs = ev.warp_homography(2 * a + 3 * b, H)
    assert np.allclose(lhs, 2 * ev.warp_homography(a, H) + 3 * ev.warp_homography(b, H))


def test_homography_maps_corners():
    src = [(0, 0), (10, 0), (10, 10), (0, 10)]
    dst = [(1, 2), (11, 1), (12, 12), (0, 9)]
    H = ev.homography_dlt(src, dst)
    for (x, y), (u, v) in zip(src, dst):
        p = H @ [x, y, 1]
        assert p[0] / p[2] == pytest.approx(u) and p[1] / p[2] == pytest.approx(v)


def test_degenerate_homography_raises():
    with pytest.raises(ValueError):
        ev.warp_homography(np.zeros((4, 4)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ev.rotation_homography(32, 32, 180)


# ----------------------------------------------------------------------------
# Friedman


def test_friedman_statistic_and_p_against_oracles():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = ev.friedman_test(FRIEDMAN_TABLE)
    assert res.statistic == pytest.approx(friedman_rank_formula(FRIEDMAN_TABLE), abs=1e-12)
    assert res.statistic == pytest.approx(7.0)
    assert abs(res.pvalue - friedman_permutation_p(FRIEDMAN_TABLE)) <= 0.01


def test_friedman_warns_below_ten_pairs():
    with pytest.warns(UserWarning):
        ev.friedman_test(FRIEDMAN_TABLE)


def test_friedman_constant_table():
    res = ev.friedman_test(np.ones((12, 3)))
    assert res.statistic == 0 and res.pvalue == 1


def test_friedman_tie_correction_matches_scipy():
    from scipy.stats import friedmanchisquare

    t = np.random.default_rng(8).integers(0, 3, (15, 4)).astype(float)
    res = ev.friedman_test(t)
    ref = friedmanchisquare(*t.T)
    assert res.statistic == pytest.approx(ref.statistic) and res.pvalue == pytest.approx(ref.pvalue)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_friedman_monotone_invariance(seed):
    t = np.random.default_rng(seed).random((12, 4))
    a = ev.friedman_test(t)
    b = ev.friedman_test(t ** 3 + 5)
    c = ev.friedman_test(-t, direction="higher")
    assert a.statistic == b.statistic == c.statistic
    assert np.array_equal(a.mean_ranks, b.mean_ranks)


def test_within_pair_ranks_direction():
    r = ev.within_pair_ranks([[0.1, 0.5, 0.5]], "lower")
    assert r.tolist() == [[1, 2.5, 2.5]]
    assert ev.within_pair_ranks([[0.1, 0.5, 0.3]], "higher").tolist() == [[3, 1, 2]]


# ----------------------------------------------------------------------------
# evaluation harness


def test_evaluate_identity_rows_and_delegation(tiny_dataset):
    man = tiny_dataset
    rep = ev.evaluate_model("identity", man, "seen_test", metrics=["l1", "l1m", "ssim"], ks=[1, 6])
    assert len(rep.rows) == 2 * len(man.pairs_seen_test)
    row = rep.rows[0]
    for key in ("pair_id", "object_id", "base_angle", "k", "angle", "model", "config_hash", "l1"):
        assert key in row
    from itergan import datahub
    s = datahub.sample_pair(man, row["object_id"], row["base_angle"], row["k"])
    assert row["l1"] == pytest.approx(ev.metric_l1((s.input + 1) / 2, (s.target + 1) / 2))
    agg = rep.aggregates["identity"]["l1"]
    assert agg["n"] == len(rep.rows) and agg["direction"] == "lower"


def test_evaluate_rejects_bad_inputs(tiny_dataset):
    with pytest.raises(ValueError):
        ev.evaluate_model("identity", tiny_dataset, "train")
    with pytest.raises(ValueError):
        ev.evaluate_model("identity", tiny_dataset, metrics=["kl"])
    with pytest.raises(ValueError):
        ev.evaluate_model("identity", tiny_dataset, metrics=["psnr"])


def test_report_round_trip_and_friedman(tiny_dataset, tmp_path):
    a = ev.evaluate_model("identity", tiny_dataset, metrics=["l1", "ssim"])
    b = ev.evaluate_model("projective", tiny_dataset, metrics=["l1", "ssim"])
    rep = ev.combine_reports([a, b])
    assert rep.models == ["identity", "projective"]
    assert "identity vs projective" in rep.friedman["l1"]["pairwise"]
    rep.save(tmp_path / "r.json")
    again = ev.MetricReport.load(tmp_path / "r.json")
    assert again.rows == rep.rows and again.friedman == rep.friedman
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().startswith("pair_id,object_id")
    with pytest.raises(ValueError):
        ev.combine_reports([a, a])


def test_rotation_sweep_groups_by_angle(tiny_dataset):
    rep = ev.evaluate_model("identity", tiny_dataset, metrics=["l1"], ks=[1, 2, 3])
    sweep = ev.rotation_sweep(rep, "l1")
    assert [s[0] for s in sweep] == [5, 10, 15]
    assert sweep[0][2] < sweep[2][2]
