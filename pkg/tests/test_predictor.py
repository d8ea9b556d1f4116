import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from geoinfer import data as gd
from geoinfer import predictor as gp

from conftest import regression_table


def soil_like(points, labels):
    values = [[n, v, gd.SOIL_CLASSES.index(s)] for (n, v), s in zip(points, labels)]
    return gd.make_table(gd.SOIL_SCHEMA, values, gd.SOIL_CLASSES)


# ---------------------------------------------------------------------------
# Context
# ---------------------------------------------------------------------------


def test_context_on_fixture(soil):
    ctx = gp.build_context(soil[0], "soil")
    assert (ctx.n, ctx.d) == (16, 2)
    assert ctx.k_neighbors == 16 and ctx.classes == ("Clay", "Sand")
    assert ctx.bins == 128 and ctx.alpha == 0.5


def test_single_row_context_rejected():
    t = soil_like([(10, 200)], ["Clay"])
    with pytest.raises(gp.PredictorError):
        gp.build_context(t, "soil")


def test_bandwidth_override(soil):
    assert gp.build_context(soil[0], "soil", gp.PredictorHyper(bandwidth=0.5)).bandwidth == 0.5


def test_empty_and_unknown_target(soil):
    empty = gd.make_table(gd.SOIL_SCHEMA, np.empty((0, 3)), gd.SOIL_CLASSES)
    with pytest.raises(gp.PredictorError):
        gp.build_context(empty, "soil")
    with pytest.raises(gd.SchemaError):
        gp.build_context(soil[0], "clay_content")


def test_context_rejects_missing_and_bad_hyper(soil):
    t = gd.make_table(gd.SOIL_SCHEMA, [[1, 100, 0], [2, np.nan, 1]], gd.SOIL_CLASSES)
    with pytest.raises(gd.DataError):
        gp.build_context(t, "soil")
    with pytest.raises(gp.PredictorError):
        gp.build_context(soil[0], "soil", gp.PredictorHyper(bins=7))
    with pytest.raises(gp.PredictorError):
        gp.build_context(soil[0], "soil", gp.PredictorHyper(k=17))
    with pytest.raises(gp.PredictorError):
        gp.build_context(soil[0], "soil", gp.PredictorHyper(bandwidth=0.0))


def test_median_heuristic_matches_pdist():
    z = np.random.default_rng(0).normal(size=(40, 3))
    assert gp.median_heuristic(z) == pytest.approx(np.median(pdist(z)) / math.sqrt(2), rel=1e-12)


def test_context_is_immutable(soil_ctx):
    with pytest.raises(ValueError):
        soil_ctx.features[0, 0] = 1.0


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


def test_clay_point_with_clay_neighbours():
    rng = np.random.default_rng(1)
    clay = [(20 + rng.normal(0, 0.2), 270 + rng.normal(0, 1)) for _ in range(12)]
    sand = [(45 + rng.normal(0, 0.2), 285 + rng.normal(0, 1)) for _ in range(12)]
    t = soil_like(clay + sand, ["Clay"] * 12 + ["Sand"] * 12)
    ctx = gp.build_context(t, "soil", gp.PredictorHyper(k=10))
    assert gp.predict_class_proba(ctx, clay[0])[0] >= 0.95


def test_midway_point_is_even():
    t = soil_like([(10, 200), (30, 200), (20, 100), (20, 300)], ["Clay", "Sand", "Clay", "Sand"])
    ctx = gp.build_context(t, "soil", gp.PredictorHyper(k=2, bandwidth=1.0))
    p = gp.predict_class_proba(ctx, (20, 200))
    # four points equidistant; k=2 keeps all ties, still symmetric
    assert p[1] == pytest.approx(0.5, abs=1e-9)
    t2 = soil_like([(10, 200), (30, 200), (100, 900)], ["Clay", "Sand", "Clay"])
    ctx2 = gp.build_context(t2, "soil", gp.PredictorHyper(k=2))
    assert gp.predict_class_proba(ctx2, (20, 200))[1] == pytest.approx(0.5, abs=1e-9)


def test_tie_goes_to_lower_class_index():
    t = soil_like([(10, 200), (30, 200)], ["Clay", "Sand"])
    ctx = gp.build_context(t, "soil", gp.PredictorHyper(k=2))
    assert gp.predict_labels(ctx, [[20, 200]]) == ["Clay"]


def test_fixture_accuracy(soil, soil_ctx):
    _, test = soil
    pred = gp.predict_labels(soil_ctx, test.columns(["N", "Vs"]))
    assert gp.accuracy(test.labels(), pred) >= 15 / 16


def test_far_query_drifts_to_even(soil_ctx):
    p = gp.predict_class_proba(soil_ctx, (1e6, 1e6))
    assert p == pytest.approx([0.5, 0.5], abs=1e-9)


def test_nonfinite_query_rejected(soil_ctx):
    with pytest.raises(gp.PredictorError):
        gp.predict_class_proba(soil_ctx, (np.nan, 200))
    with pytest.raises(gp.PredictorError):
        gp.predict_class_proba(soil_ctx, (1.0, 2.0, 3.0))


queries = st.tuples(st.floats(0.5, 80), st.floats(50, 500))


@settings(max_examples=80, deadline=None)
@given(queries)
def test_class_probabilities_sum_to_one(q):
    train, _ = gd.builtin_soil_dataset()
    for hyper in (gp.PredictorHyper(), gp.PredictorHyper(k=2, log_features=True), gp.PredictorHyper(k=3, bandwidth=0.05)):
        p = gp.predict_class_proba(gp.build_context(train, "soil", hyper), q)
        assert abs(p.sum() - 1.0) <= 1e-12 and np.all((p >= 0) & (p <= 1))


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_permutation_invariance(rnd):
    train, test = gd.builtin_soil_dataset()
    order = list(range(train.n_rows))
    rnd.shuffle(order)
    shuffled = gd.DataTable(train.schema, train.values[order], train.missing[order], train.classes)
    x = test.columns(["N", "Vs"])
    for hyper in (gp.PredictorHyper(), gp.PredictorHyper(k=2, log_features=True)):
        a = gp.predict_class_proba_batch(gp.build_context(train, "soil", hyper), x)
        b = gp.predict_class_proba_batch(gp.build_context(shuffled, "soil", hyper), x)
        assert np.allclose(a, b, atol=1e-12, rtol=0)


@pytest.mark.parametrize("scale", [0.001, 3.0, 1000.0])
def test_feature_scaling_invariance(scale, oracle42):
    train, _ = gd.builtin_soil_dataset()
    scaled = train.with_values(train.values * np.array([scale, scale, 1.0]))
    x = np.array([[5.0, 150.0], [30.0, 260.0], [44.0, 280.0]])
    a = gp.predict_class_proba_batch(gp.build_context(train, "soil"), x)
    b = gp.predict_class_proba_batch(gp.build_context(scaled, "soil"), x * scale)
    assert np.allclose(a, b, atol=1e-9, rtol=0)

    tr = oracle42.train
    cols = tr.index_features
    xs = tr.columns(cols)[:5] + 0.1
    scaled_tr = tr.with_values(tr.values * np.array([scale] * 6 + [1.0] * 5))
    ea, pa = gp.predict_posterior_batch(gp.build_context(tr, "s_u"), xs)
    eb, pb = gp.predict_posterior_batch(gp.build_context(scaled_tr, "s_u"), xs * scale)
    assert np.allclose(ea, eb) and np.allclose(pa, pb, atol=1e-9, rtol=0)


# ---------------------------------------------------------------------------
# Posteriors
# ---------------------------------------------------------------------------


def test_constant_target_posterior():
    x = np.arange(10, dtype=float)[:, None]
    ctx = gp.build_context(regression_table(x, np.full(10, 4.2)), "y")
    p = gp.predict_posterior(ctx, [3.3])
    holds = (p.bin_edges[:-1] <= 4.2) & (4.2 <= p.bin_edges[1:])
    assert p.probs[holds].sum() >= 0.999


def test_symmetric_two_point_posterior_mean():
    a = 3.0
    x = np.array([[-1.0], [1.0]])
    ctx = gp.build_context(regression_table(x, np.array([-a, a])), "y")
    assert gp.posterior_mean(gp.predict_posterior(ctx, [0.0])) == pytest.approx(0.0, abs=1e-6)


def test_posterior_mean_near_weighted_neighbour_mean(oracle42):
    tr = oracle42.train
    ctx = gp.build_context(tr, "C_c")
    raw = tr.columns(tr.index_features)
    z = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    y = tr.column("C_c")
    queries = raw[:20] + np.random.default_rng(5).normal(0, 0.3, size=(20, 6))
    edges, probs = gp.predict_posterior_batch(ctx, queries)
    width = edges[1] - edges[0]
    for q, p in zip(queries, probs):
        zq = (q - raw.mean(axis=0)) / raw.std(axis=0)
        d2 = ((z - zq) ** 2).sum(axis=1)
        near = d2 <= np.sort(d2)[ctx.k_neighbors - 1]
        w = np.exp(-d2[near] / (2 * ctx.bandwidth**2))
        brute = float((w * y[near]).sum() / w.sum())
        assert gp.posterior_mean(gp.DiscretePosterior(edges, p)) == pytest.approx(brute, abs=width)


def test_posterior_grid_span(oracle42):
    ctx = gp.build_context(oracle42.train, "s_u")
    y = oracle42.train.column("s_u")
    edges = gp.posterior_grid(ctx)
    span = y.max() - y.min()
    assert edges.size == 129
    assert edges[0] == pytest.approx(y.min() - 0.5 * span) and edges[-1] == pytest.approx(y.max() + 0.5 * span)


def test_posterior_errors(oracle42, soil_ctx):
    ctx = gp.build_context(oracle42.train, "s_u")
    with pytest.raises(gp.PredictorError):
        gp.predict_posterior(ctx, np.zeros(6), bins=7)
    with pytest.raises(gp.PredictorError):
        gp.predict_posterior(ctx, np.full(6, np.inf))
    with pytest.raises(gp.PredictorError):
        gp.predict_posterior(soil_ctx, (10, 200))


def test_astronomically_far_query_still_valid(oracle42):
    ctx = gp.build_context(oracle42.train, "s_u", gp.PredictorHyper(bandwidth=1e-3))
    edges, probs = gp.predict_posterior_batch(ctx, np.full((1, 6), 1e6))
    assert abs(probs.sum() - 1.0) <= 1e-9 and np.all(np.isfinite(probs))


def test_posterior_mean_within_grid(oracle42):
    ctx = gp.build_context(oracle42.train, "E_u")
    x = np.random.default_rng(2).normal(0, 4, size=(300, 6))
    edges, probs = gp.predict_posterior_batch(ctx, x)
    means = probs @ (0.5 * (edges[:-1] + edges[1:]))
    assert np.all((means >= edges[0]) & (means <= edges[-1]))


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------


def test_uniform_posterior_summaries():
    p = gp.DiscretePosterior(np.linspace(0, 1, 101), np.full(100, 0.01))
    assert gp.posterior_mean(p) == pytest.approx(0.5, abs=1e-9)
    assert abs(gp.posterior_quantile(p, 0.25) - 0.25) <= 0.01


def test_point_mass_summaries():
    probs = np.zeros(10)
    probs[3] = 1.0
    p = gp.DiscretePosterior(np.linspace(0, 10, 11), probs)
    assert gp.posterior_mean(p) == 3.5
    assert 3.0 <= gp.posterior_median(p) <= 4.0


@pytest.mark.parametrize("q", [-0.1, 1.5, float("nan")])
def test_quantile_level_out_of_range(q):
    p = gp.DiscretePosterior(np.linspace(0, 1, 9), np.full(8, 0.125))
    with pytest.raises(gp.PredictorError):
        gp.posterior_quantile(p, q)


def test_invalid_posteriors():
    with pytest.raises(gp.PredictorError):
        gp.DiscretePosterior(np.array([0.0, 1.0, 1.0]), np.array([0.5, 0.5]))
    with pytest.raises(gp.PredictorError):
        gp.DiscretePosterior(np.array([0.0, 1.0, 2.0]), np.array([0.6, 0.6]))
    with pytest.raises(gp.PredictorError):
        gp.DiscretePosterior(np.array([0.0, 1.0, 2.0]), np.array([1.5, -0.5]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=64).filter(lambda v: sum(v) > 1e-6), st.floats(0, 1))
def test_cdf_quantile_round_trip(weights, u):
    w = np.array(weights)
    edges = np.linspace(-2.0, 5.0, w.size + 1)
    p = gp.DiscretePosterior(edges, w / w.sum())
    # the CDF is only invertible where it increases: pick v inside a bin with mass
    support = np.flatnonzero(p.probs > 0)
    b = support[min(int(u * support.size), support.size - 1)]
    v = edges[b] + u * (edges[b + 1] - edges[b])
    assert abs(gp.posterior_quantile(p, p.cdf(v)) - v) <= edges[1] - edges[0] + 1e-12


def test_posterior_serialization_round_trip(oracle42):
    p = gp.predict_posterior(gp.build_context(oracle42.train, "C_v"), np.zeros(6))
    back = gp.DiscretePosterior.from_dict(p.to_dict())
    assert np.array_equal(back.bin_edges, p.bin_edges) and np.array_equal(back.probs, p.probs)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def test_embedding_concentrates_on_coincident_sample():
    x = np.array([[0.0], [10.0], [20.0], [30.0]])
    ctx = gp.build_context(regression_table(x, np.arange(4.0)), "y", gp.PredictorHyper(bandwidth=0.1))
    e = gp.embed(ctx, [10.0])
    assert e[1] >= 0.99 * np.linalg.norm(e)


def test_identical_queries_identical_embeddings(soil_ctx):
    a, b = gp.embed_batch(soil_ctx, [[14.0, 192.811], [14.0, 192.811]])
    assert np.array_equal(a, b) and float(a @ b) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(queries)
def test_embedding_unit_norm(q):
    train, _ = gd.builtin_soil_dataset()
    for hyper in (gp.PredictorHyper(), gp.PredictorHyper(bandwidth=1e-3)):
        e = gp.embed(gp.build_context(train, "soil", hyper), q)
        assert abs(np.linalg.norm(e) - 1.0) <= 1e-9 and np.all(e >= 0) and e.size == 16


def test_embedding_far_query_does_not_underflow(soil_ctx):
    e = gp.embed(soil_ctx, (1e4, 1e5))
    assert abs(np.linalg.norm(e) - 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# Decision grid and metrics
# ---------------------------------------------------------------------------


def test_small_decision_grid(soil_ctx):
    g = gp.decision_grid(soil_ctx, (1, 50), (80, 400), 2)
    assert g.probs.shape == (2, 2) and np.all((g.probs >= 0) & (g.probs <= 1))
    assert g.x_axis.tolist() == [13.25, 37.75] and g.y_axis.tolist() == [160.0, 320.0]


def test_grid_at_sand_training_points(soil, soil_ctx):
    train, _ = soil
    for (n, vs), lab in zip(train.columns(["N", "Vs"]), train.labels()):
        if lab != "Sand":
            continue
        g = gp.decision_grid(soil_ctx, (n - 0.01, n + 0.01), (vs - 0.01, vs + 0.01), 2, "Sand")
        assert np.all(g.probs > 0.5)


@pytest.mark.parametrize("xr, yr, res", [((5, 5), (80, 400), 10), ((1, 50), (400, 80), 10), ((1, 50), (80, 400), 1)])
def test_degenerate_grids(soil_ctx, xr, yr, res):
    with pytest.raises(gp.PredictorError):
        gp.decision_grid(soil_ctx, xr, yr, res)


def test_roc_auc_against_pair_count():
    rng = np.random.default_rng(4)
    pos = rng.random(30) < 0.4
    scores = np.round(rng.random(30), 1)
    wins = 0.0
    pairs = 0
    for i in np.flatnonzero(pos):
        for j in np.flatnonzero(~pos):
            pairs += 1
            wins += 1.0 if scores[i] > scores[j] else 0.5 if scores[i] == scores[j] else 0.0
    assert gp.roc_auc(pos, scores) == pytest.approx(wins / pairs, abs=1e-15)
    with pytest.raises(ValueError):
        gp.roc_auc([True, True], [0.1, 0.2])


def test_hyper_round_trip():
    h = gp.PredictorHyper(bandwidth=0.3, k=4, bins=64, alpha=1.0, log_features=True)
    assert gp.PredictorHyper.from_dict(h.to_dict()) == h
    assert gp.with_hyper(h, k=5).k == 5
