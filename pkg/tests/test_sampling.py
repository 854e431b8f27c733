import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scoregraph.data import ConditionKey, acceptance_dataset
from scoregraph.noise import Kind, TransitionModel, kernel
from scoregraph.sampling import (CalibrationParams, GuidanceError, GuidanceSpec, SamplerConfig, calibrate,
                                 calibrate_rows, compose_cfg, compose_cog, exact_model_distribution,
                                 normalize_rows, reverse_raw, reverse_token_distribution, sample, sample_tokens,
                                 step_distributions)
from scoregraph.scoring import ExactScorer, ScoreTensor
from scoregraph.training import TrainConfig, train

finite = st.floats(-5, 5, allow_nan=False)


def tensor(rng):
    return ScoreTensor(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


def test_cfg_linear_in_log_domain():
    rng = np.random.default_rng(0)
    a, b = tensor(rng), tensor(rng)
    out = compose_cfg(a, b, 2.5)
    assert np.allclose(out.node_log_scores, a.node_log_scores + 2.5 * (b.node_log_scores - a.node_log_scores))


def test_cog_sums_slot_directions():
    rng = np.random.default_rng(1)
    a, b, c = tensor(rng), tensor(rng), tensor(rng)
    out = compose_cog(a, [(b, 1.0), (c, 0.5)])
    want = a.edge_log_scores + (b.edge_log_scores - a.edge_log_scores) + 0.5 * (c.edge_log_scores - a.edge_log_scores)
    assert np.allclose(out.edge_log_scores, want)
    with pytest.raises(GuidanceError):
        compose_cog(a, [])


def test_neg_inf_propagates():
    a = ScoreTensor(np.array([[0.0, -np.inf]]), np.zeros((0, 2)))
    b = ScoreTensor(np.array([[0.0, 1.0]]), np.zeros((0, 2)))
    assert np.isneginf(compose_cfg(a, b, 2.0).node_log_scores[0, 1])
    assert compose_cfg(a, b, 1.0).node_log_scores[0, 1] == 1.0


def test_guidance_plans():
    cond = (1, (0.5,))
    keys, terms = GuidanceSpec.cfg(2.0).plan(cond)
    assert keys == [ConditionKey.null(), ConditionKey.joint(cond)]
    keys, terms = GuidanceSpec.cog({1: 1.0, 0: 2.0}).plan(cond)
    assert [k for k, _ in terms] == [ConditionKey.single(1, (0.5,)), ConditionKey.single(0, 1)]
    assert GuidanceSpec.cog({0: 1.0, 1: 1.0}).calls_per_step == 3
    assert GuidanceSpec.fast_cog([1, 0], 1.0).calls_per_step == 2
    with pytest.raises(GuidanceError):
        GuidanceSpec.cog({0: 1.0}).plan((None, (0.5,)))
    with pytest.raises(GuidanceError):
        GuidanceSpec.cog({3: 1.0}).plan(cond)
    with pytest.raises(GuidanceError):
        GuidanceSpec.cfg(float("nan"))
    with pytest.raises(GuidanceError):
        GuidanceSpec("bogus")


@pytest.mark.parametrize("kind", list(Kind))
def test_reverse_step_with_true_scores_is_bayes_posterior(kind):
    """A single-token chain: exact ratios give exactly p(x_s | x_t)."""
    model = TransitionModel(kind, 3)
    p0 = np.array([0.5, 0.5, 0.0]) if kind is Kind.ABSORB else np.array([0.2, 0.5, 0.3])
    s_sb, t_sb = 0.3, 0.9
    ps = kernel(model, s_sb) @ p0
    pt = kernel(model, t_sb) @ p0
    step = kernel(model, t_sb - s_sb)
    for cur in range(3):
        if pt[cur] == 0:
            continue
        with np.errstate(divide="ignore"):
            log_s = np.log(pt / pt[cur])
        got = reverse_token_distribution(log_s, cur, t_sb - s_sb, model)
        want = step[cur] * ps / pt[cur]
        assert np.allclose(got, want, atol=1e-12)


def test_normalize_fallback_point_mass():
    p, bad = normalize_rows(np.array([[-1.0, 0.0, 0.0], [1.0, 3.0, 0.0]]), np.array([2, 0]))
    assert bad.tolist() == [True, False]
    assert np.allclose(p, [[0, 0, 1], [0.25, 0.75, 0]])


def test_reverse_raw_rejects_negative_leap():
    with pytest.raises(ValueError):
        reverse_raw(np.zeros((1, 2)), np.array([0]), -0.1, TransitionModel(Kind.UNIFORM, 2))


def test_calibration_worked_examples():
    assert np.allclose(calibrate([0.5, 0.3, 0.2], CalibrationParams(0, 100, 1.0)), [0.75, 0.25, 0.0])
    assert np.allclose(calibrate([0.75, 0.25, 0.0], CalibrationParams(0, 100, 0.5)), [0.9, 0.1, 0.0])


def test_calibration_degenerate_row():
    out, bad = calibrate_rows(np.array([[0.25, 0.25, 0.25, 0.25]]), CalibrationParams(1, 99, 1.0))
    assert bad[0] and out[0].tolist() == [1.0, 0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        calibrate([np.nan, 1.0], CalibrationParams())
    with pytest.raises(ValueError):
        CalibrationParams(alpha=50, beta=40)


@settings(max_examples=200)
@given(arrays(float, st.integers(2, 6), elements=st.floats(0, 1)))
def test_calibration_output_is_distribution(p):
    out = calibrate(p, CalibrationParams(1, 99, 0.7))
    assert out.sum() == pytest.approx(1.0) and np.all(out >= 0)


def test_graph_scope_shares_thresholds():
    rng = np.random.default_rng(2)
    ln = np.log(rng.uniform(0.1, 2, (4, 3, 2)))
    le = np.log(rng.uniform(0.1, 2, (4, 3, 2)))
    nodes = rng.integers(0, 2, (4, 3))
    edges = rng.integers(0, 2, (4, 3))
    np.put_along_axis(ln, nodes[..., None], 0.0, -1)
    np.put_along_axis(le, edges[..., None], 0.0, -1)
    m = TransitionModel(Kind.UNIFORM, 2)
    pn, _, pe, _ = step_distributions(ln, le, nodes, edges, 0.05, m, m, CalibrationParams(1, 99, 0.9, scope="graph"))
    assert np.allclose(pn.sum(-1), 1) and np.allclose(pe.sum(-1), 1)
    tn, _, te, _ = step_distributions(ln, le, nodes, edges, 0.05, m, m, CalibrationParams(1, 99, 0.9))
    assert not np.allclose(pn, tn)


@pytest.fixture(scope="module")
def small_scorer():
    ds = acceptance_dataset()
    sc, _ = train(ds, TrainConfig(learning_rate=0.1, batch_size=128, steps=200, warmup_steps=20, seed=2))
    return sc


def test_sampling_is_seeded(small_scorer):
    cfg = SamplerConfig(steps=50, num_samples=20, seed=3)
    g1, d1 = sample(small_scorer, GuidanceSpec.cog({0: 1.0}), None, cfg, (1, None))
    g2, _ = sample(small_scorer, GuidanceSpec.cog({0: 1.0}), None, cfg, (1, None))
    g3, _ = sample(small_scorer, GuidanceSpec.cog({0: 1.0}), None, SamplerConfig(steps=50, num_samples=20, seed=4),
                   (1, None))
    assert g1 == g2 and g1 != g3
    assert d1.scorer_calls == 100 and len(d1.mean_entropy) == 50


def test_sampled_histogram_matches_exact_propagation(small_scorer):
    cfg = SamplerConfig(steps=40, num_samples=20000, seed=0)
    nodes, edges, _ = sample_tokens(small_scorer, GuidanceSpec.unconditional(), None, cfg)
    from scoregraph.graph import token_table

    tab = token_table(3, small_scorer.spaces)
    emp = np.bincount(tab.index_of(nodes, edges), minlength=tab.size) / len(nodes)
    exact = exact_model_distribution(small_scorer, GuidanceSpec.unconditional(), None, cfg)
    assert exact.sum() == pytest.approx(1.0)
    assert 0.5 * np.abs(emp - exact).sum() < 0.03


def test_oracle_recovers_data_on_short_grid():
    ds = acceptance_dataset()
    p = exact_model_distribution(ExactScorer(ds, outside_support="zero"), GuidanceSpec.unconditional(), None,
                                 SamplerConfig(steps=128))
    assert p[[0, 7, 56, 63]].sum() > 0.95


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(times=(0.5, 0.2)).grid(None)
