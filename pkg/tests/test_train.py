import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from met import tensor as T
from met.data import DataError, generate_synthetic
from met.graph_reg import build_graphs, graph_penalty
from met.metrics import read_metrics
from met.multi_exit import ForwardResult, METModel
from met.tensor import Tensor
from met.train import (OptimizerState, TrainConfig, adam_step, evaluate, lr_at, total_loss,
                       train)
from met.vit import ConfigError, init_backbone
from oracles import images_for, model_fd_check, tiny_config, tiny_model

LABELS3 = np.array([0, 0, 1])
LOGITS3 = np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
REPS3 = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 0.0]])


def ce_ref(z, y):
    return float(np.mean([math.log(sum(math.exp(v) for v in row)) - row[t]
                          for row, t in zip(z, y)]))


def _result(logits: dict, reps: dict | None = None) -> ForwardResult:
    logits = {e: Tensor(v) for e, v in logits.items()}
    reps = {e: Tensor(v) for e, v in (reps or {}).items()}
    return ForwardResult(reps, logits, [])


# --- config -----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(epochs=5, warmup_epochs=5), dict(alpha=-0.1),
                                dict(batch_size=0), dict(merge_mode="sum")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_records_optimizer_constants():
    d = TrainConfig().to_dict()
    assert d["adam"]["beta1"] == 0.9 and d["adam"]["beta2"] == 0.999 and d["adam"]["eps"] == 1e-8
    assert (d["batch_size"], d["epochs"], d["warmup_epochs"]) == (32, 100, 10)


# --- joint loss -------------------------------------------------------------------

def test_single_exit_without_penalty_is_plain_ce():
    z = np.random.default_rng(0).standard_normal((4, 3))
    y = np.array([0, 2, 1, 1])
    rep = total_loss(_result({1: z}), y, alpha=0.0)
    assert rep.total == pytest.approx(ce_ref(z, y), abs=1e-12)
    assert rep.penalty == 0.0


def test_uniform_logits_give_log_c():
    rep = total_loss(_result({1: np.zeros((3, 5)), 2: np.zeros((3, 5))}), [0, 1, 4], 0.0)
    np.testing.assert_allclose(rep.ce, [math.log(5)] * 2, atol=1e-12)


def test_hand_fixture_total():
    z1 = np.array([[0.3, -0.2], [1.0, 0.5], [-0.4, 0.1]])
    out = _result({1: z1, 2: LOGITS3}, {1: REPS3, 2: np.zeros((3, 2))})
    rep = total_loss(out, LABELS3, alpha=0.3)
    want = ce_ref(z1, LABELS3) + ce_ref(LOGITS3, LABELS3) + 0.3 * 5.0
    assert rep.total == pytest.approx(want, abs=1e-8)
    assert rep.graph_terms[0] == pytest.approx(1.5, abs=1e-8) and rep.graph_terms[1] == 0.0


def test_out_of_range_label():
    with pytest.raises(DataError):
        total_loss(_result({1: np.zeros((2, 3))}), [0, 3], 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.floats(0, 1), st.integers(0, 2**31))
def test_total_is_sum_of_parts(E, alpha, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, 6)
    out = _result({e: rng.standard_normal((6, 3)) for e in range(1, E + 1)},
                  {e: rng.standard_normal((6, 4)) for e in range(1, E + 1)})
    rep = total_loss(out, y, alpha)
    assert abs(rep.total - (sum(rep.ce) + rep.penalty)) <= 1e-9
    assert rep.total == pytest.approx(rep.loss.item(), abs=1e-12)


def test_joint_gradient_is_sum_of_parts():
    cfg = tiny_config(layers=3)
    model = tiny_model(cfg, placement=(1, 2, 3), dprime=3, seed=1)
    img, y = images_for(cfg, 4, seed=2), np.array([0, 1, 2, 1])
    alpha = 0.05

    out = model.forward(img)
    graphs = build_graphs(out.logits[3].data, y)
    joint = T.backward(total_loss(out, y, alpha, graphs=graphs).loss)

    parts = []
    for e in (1, 2, 3):
        parts.append(T.backward(T.cross_entropy(model.forward(img).logits[e], y)))
    o = model.forward(img)
    parts.append(T.backward(graph_penalty([o.reps[1], o.reps[2]], graphs, alpha)))
    for p in model.trainable():
        summed = sum(g.get(p.name, 0.0) for g in parts)
        np.testing.assert_allclose(joint.get(p.name, 0.0), summed, rtol=0, atol=1e-9,
                                   err_msg=p.name)


def test_graph_penalty_never_reaches_last_head():
    cfg = tiny_config(layers=2)
    model = tiny_model(cfg, placement=(1, 2), seed=3)
    img, y = images_for(cfg, 4, seed=4), np.array([0, 1, 2, 0])
    out = model.forward(img)
    graphs = build_graphs(T.detach(out.logits[2]).data, y)
    grads = T.backward(graph_penalty([out.reps[1]], graphs, 1.0))
    assert "head.2.weight" not in grads and "head.2.bias" not in grads


def test_total_loss_gradient_matches_finite_differences():
    cfg = tiny_config(layers=2, dim=8)
    model = tiny_model(cfg, placement=(1, 2), dprime=2, seed=5)
    img, y = images_for(cfg, 3, seed=6), np.array([0, 1, 2])
    graphs = build_graphs(model.forward(img).logits[2].data, y)
    errs = model_fd_check(model, lambda: total_loss(model.forward(img), y, 0.01,
                                                    graphs=graphs).loss)
    assert max(errs.values()) <= 1e-3, errs


# --- schedule and optimizer -------------------------------------------------------------

def test_lr_schedule_points():
    assert lr_at(0, 100, 10, 0.1) == 0.0
    assert lr_at(10, 100, 10, 0.1) == pytest.approx(0.1)
    assert lr_at(55, 100, 10, 0.1) == pytest.approx(0.05)
    assert lr_at(5, 100, 10, 0.1) == pytest.approx(0.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 500), st.floats(1e-5, 1.0))
def test_lr_schedule_bounded(total, base):
    warm = total // 5
    lrs = [lr_at(s, total, warm, base) for s in range(total)]
    assert all(0 <= v <= base * (1 + 1e-12) for v in lrs)
    decay = lrs[warm:]
    assert all(b <= a + 1e-15 for a, b in zip(decay, decay[1:]))


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return [T.parameter("a", rng.standard_normal((2, 3)), True),
            T.parameter("b", rng.standard_normal(4), True),
            T.parameter("frozen", rng.standard_normal(3), False)]


def test_adam_zero_gradient_no_decay_is_noop():
    ps = _params()
    before = [p.data.copy() for p in ps]
    adam_step(ps, {p.name: np.zeros(p.shape) for p in ps}, OptimizerState(), 0.1, 0.0)
    for p, b in zip(ps, before):
        np.testing.assert_array_equal(p.data, b)


def test_adam_first_step_is_sign_sized():
    ps = _params()
    before = {p.name: p.data.copy() for p in ps}
    g = {p.name: np.random.default_rng(1).standard_normal(p.shape) for p in ps}
    adam_step(ps, g, OptimizerState(), 0.01)
    for p in ps[:2]:
        step = p.data - before[p.name]
        np.testing.assert_allclose(step, -0.01 * np.sign(g[p.name]), rtol=1e-6)


def test_adam_never_touches_frozen():
    ps = _params()
    before = ps[2].data.copy()
    st_ = OptimizerState()
    for _ in range(3):
        adam_step(ps, {p.name: np.ones(p.shape) for p in ps}, st_, 0.1, 0.1)
    np.testing.assert_array_equal(ps[2].data, before)
    assert st_.t == 3 and "frozen" not in st_.m


def test_adam_decoupled_decay():
    p = T.parameter("w", np.full(2, 2.0), True)
    adam_step([p], {}, OptimizerState(), 0.1, wd=0.5)
    np.testing.assert_allclose(p.data, 2.0 - 0.1 * 0.5 * 2.0)


# --- training loop ------------------------------------------------------------------------

def _task(seed=0, per_class=4, size=8):
    return generate_synthetic(seed, 3, per_class, size)


def _initial_model(cfg, bb, conf):
    # same bank seed derivation as train()
    seed = int(np.random.SeedSequence(conf.seed).spawn(2)[0].generate_state(1)[0])
    return METModel.create(cfg, bb, conf.plan(cfg.layers), conf.dprime, seed)


def test_zero_learning_rate_changes_nothing():
    cfg = tiny_config()
    bb = init_backbone(cfg, 0)
    ds = _task()
    conf = TrainConfig(lr=0.0, epochs=3, warmup_epochs=0, batch_size=5, dprime=2, exits=[1, 2],
                       alpha=0.01)
    res = train(conf, ds, bb, cfg)
    init = _initial_model(cfg, bb, conf)
    for p, q in zip(res.model.parameters(), init.parameters()):
        assert p.name == q.name
        np.testing.assert_array_equal(p.data, q.data)
    assert res.steps == 3 * math.ceil(len(ds) / 5)


def test_one_step_zero_lr_reports_initial_loss():
    cfg = tiny_config()
    bb = init_backbone(cfg, 0)
    ds = _task(per_class=2)
    conf = TrainConfig(lr=0.0, epochs=1, warmup_epochs=0, batch_size=len(ds), dprime=2,
                       exits=[1, 2], alpha=0.0)
    res = train(conf, ds, bb, cfg)
    init = _initial_model(cfg, bb, conf)
    want = total_loss(init.forward(ds.images), ds.labels, 0.0).total
    row = [r for r in res.history if r.exit == "all"][0]
    assert row.total_loss == want == pytest.approx(2 * math.log(3), abs=1e-12)
    for p, q in zip(res.model.trainable(), init.trainable()):
        np.testing.assert_array_equal(p.data, q.data)


def test_same_seed_same_history():
    cfg = tiny_config()
    bb = init_backbone(cfg, 0)
    ds = _task()
    conf = TrainConfig(lr=0.01, epochs=3, warmup_epochs=1, batch_size=4, dprime=2, exits=[1, 2])
    a, b = train(conf, ds, bb, cfg), train(conf, ds, bb, cfg)
    assert a.history == b.history
    for p, q in zip(a.model.trainable(), b.model.trainable()):
        np.testing.assert_array_equal(p.data, q.data)


def test_loss_decreases_on_fixed_batch():
    cfg = tiny_config(layers=2)
    ds = _task(per_class=3)
    wins = 0
    for seed in range(3):
        model = tiny_model(cfg, placement=(1, 2), seed=seed, randomize=False)
        opt, losses = OptimizerState(), []
        for _ in range(11):
            rep = total_loss(model.forward(ds.images), ds.labels, 0.01)
            losses.append(rep.total)
            adam_step(model.trainable(), T.backward(rep.loss), opt, 1e-3)
        wins += all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert wins >= 2


def test_threaded_evaluation_matches_serial(monkeypatch):
    cfg = tiny_config()
    model = tiny_model(cfg, placement=(1, 2), seed=7)
    ds = _task(per_class=5)
    monkeypatch.delenv("MET_THREADS", raising=False)
    serial = evaluate(model, ds, 0.01, batch_size=4)
    monkeypatch.setenv("MET_THREADS", "3")
    threaded = evaluate(model, ds, 0.01, batch_size=4)
    assert serial.ce == threaded.ce and serial.total == threaded.total


def test_train_writes_artifacts(tmp_path):
    cfg = tiny_config()
    bb = init_backbone(cfg, 0)
    tr, val = _task(), generate_synthetic(0, 3, 2, 8, split=1)
    conf = TrainConfig(lr=0.01, epochs=2, warmup_epochs=1, batch_size=8, dprime=2,
                       exits=[1, 2], alpha=0.0)
    res = train(conf, tr, bb, cfg, val=val, out_dir=str(tmp_path))
    for name in ("final.json", "final.bin", "best.json", "best.bin", "metrics.csv"):
        assert (tmp_path / name).exists()
    rows = read_metrics(str(tmp_path / "metrics.csv"))
    assert len(rows) == 2 * 2 * 3
    assert all(r.graph_term == 0.0 for r in rows)
    assert 1 <= res.best_epoch <= 2
