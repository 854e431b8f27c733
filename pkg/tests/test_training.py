import numpy as np
import pytest

from scoregraph.data import ConditionKey, acceptance_dataset
from scoregraph.graph import Graph
from scoregraph.noise import NoiseSchedule, forward_ratios, models_for
from scoregraph.scoring import NumericHealthError, ScoreTensor
from scoregraph.training import (Adagrad, Adam, Regime, TrainConfig, Trainer, clip_gradients, entropy_terms,
                                 global_norm, keys_for, loss_gradient_tabular, make_tabular, sample_keys,
                                 score_entropy_loss, train, write_loss_csv)

SCHED = NoiseSchedule()


def test_loss_floor_at_true_ratios():
    ds = acceptance_dataset()
    nm, em = models_for(ds.spaces)
    G0, Gt, t = ds.graphs[3], Graph((1, 0, 1), (1, 1, 0)), 0.4
    sb = np.array([SCHED.sigma_bar(t)])
    rn, _ = forward_ratios(nm, sb, np.array([G0.nodes]), np.array([Gt.nodes]))
    re, _ = forward_ratios(em, sb, np.array([G0.edges_upper]), np.array([Gt.edges_upper]))
    best = score_entropy_loss(ScoreTensor(np.log(rn[0]), np.log(re[0])), G0, Gt, t, SCHED, nm, em)
    worse = score_entropy_loss(ScoreTensor(np.log(rn[0]) + 0.1, np.log(re[0])), G0, Gt, t, SCHED, nm, em)
    assert worse.total > best.total
    assert best.token_count == 6


def test_entropy_gradient_formula():
    rng = np.random.default_rng(0)
    log_s = rng.normal(size=(2, 3, 4))
    r = rng.uniform(0.1, 2, size=(2, 3, 4))
    cur = rng.integers(0, 4, size=(2, 3))
    valid = np.ones_like(r, dtype=bool)
    sigma = np.array([0.5, 2.0])
    terms, grad = entropy_terms(log_s, r, valid, cur, sigma)
    h = 1e-6
    for idx in [(0, 1, 2), (1, 0, 3), (1, 2, 1)]:
        bumped = log_s.copy()
        bumped[idx] += h
        fd = (entropy_terms(bumped, r, valid, cur, sigma)[0].sum() - terms.sum()) / h
        assert fd == pytest.approx(grad[idx], rel=1e-4, abs=1e-8)
    assert np.all(np.take_along_axis(grad, cur[..., None], -1) == 0)


def test_nonfinite_prediction_raises():
    log_s = np.full((1, 1, 2), np.nan)
    with pytest.raises(NumericHealthError):
        entropy_terms(log_s, np.ones((1, 1, 2)), np.ones((1, 1, 2), bool), np.array([[0]]), np.array([1.0]))


def test_single_item_gradient_touches_one_cell_pair():
    ds = acceptance_dataset()
    cfg = TrainConfig()
    sc = make_tabular(ds, cfg, time_bins=8)
    nm, em = models_for(ds.spaces)
    grads = loss_gradient_tabular(sc, ds.graphs[0], Graph((0, 1, 0), (0, 0, 1)), 0.3, ConditionKey.null(),
                                  SCHED, nm, em)
    idx, _ = grads["node"]
    cells = np.unique(idx // (3 * 2))
    assert len(cells) <= 2


def test_config_validation():
    for bad in (dict(lambda_edge=0), dict(p_drop=1.5), dict(learning_rate=-1), dict(lr_decay="step"),
                dict(optimizer="sgd"), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(learning_rate=1.0, warmup_steps=10, steps=110, lr_decay="cosine", final_lr_fraction=0.1)
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(10) == pytest.approx(1.0)
    assert cfg.lr_at(110) == pytest.approx(0.1)
    assert cfg.to_dict()["regime"] == "per-property"


def test_key_sampling_regimes():
    ds = acceptance_dataset()
    rng = np.random.default_rng(0)
    keys = sample_keys(ds, np.arange(4).repeat(50), TrainConfig(p_drop=0.0), rng)
    assert all(len(k.items) == 1 for k in keys)
    keys = sample_keys(ds, np.arange(4).repeat(50), TrainConfig(p_drop=1.0), rng)
    assert all(k.is_null for k in keys)
    pooled = sample_keys(ds, np.arange(4).repeat(50), TrainConfig(p_drop=0.0, regime=Regime.SUBSET_POOLED), rng)
    assert {len(k.items) for k in pooled} == {1, 2}
    assert len(keys_for(ds, Regime.SUBSET_POOLED)) == 8


def test_clipping():
    grads = {"a": np.array([3.0, 4.0]), "b": (np.array([0]), np.array([0.0]))}
    assert global_norm(grads) == 5.0
    assert clip_gradients(grads, 1.0) == pytest.approx(0.2)
    assert global_norm(grads) == pytest.approx(1.0)
    assert clip_gradients(grads, None) == 1.0


@pytest.mark.parametrize("opt", [Adam(), Adagrad()], ids=["adam", "adagrad"])
def test_sparse_step_matches_dense_when_all_touched(opt):
    import copy

    dense_opt, sparse_opt = opt, copy.deepcopy(opt)
    p1 = {"w": np.array([1.0, -2.0, 0.5])}
    p2 = {"w": p1["w"].copy()}
    for k in range(5):
        g = np.array([0.3, -0.1, 0.7]) * (k + 1)
        dense_opt.step(p1, {"w": g}, 0.1)
        sparse_opt.sparse_step(p2, {"w": (np.arange(3), g)}, 0.1)
    assert np.allclose(p1["w"], p2["w"])


def test_training_is_deterministic_and_reduces_loss(tmp_path):
    ds = acceptance_dataset()
    cfg = TrainConfig(learning_rate=0.1, batch_size=256, steps=300, warmup_steps=20, seed=5)
    a, trace = train(ds, cfg)
    b, _ = train(ds, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    probe = Trainer(make_tabular(ds, cfg), ds, TrainConfig(batch_size=4096, seed=1))
    batch = probe.draw_batch(np.random.default_rng(1))
    before = probe.gradients(batch)[0].total
    probe.scorer = a
    after = probe.gradients(batch)[0].total
    assert after < before
    write_loss_csv(trace, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,node_term,edge_term,total" and len(lines) == 301


def test_empty_condition_schema_trains():
    from scoregraph.data import Dataset

    full = acceptance_dataset()
    ds = Dataset(3, full.spaces, (), full.graphs, [()] * 4)
    sc, trace = train(ds, TrainConfig(batch_size=32, steps=5, seed=0))
    assert sc.keys == [ConditionKey.null()] and len(trace) == 5
