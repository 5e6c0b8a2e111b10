import math

import numpy as np
import pytest
from scipy import stats
from sklearn.base import clone

from customsgnn import gnn
from customsgnn.data import Dataset
from customsgnn.graph import build_graph
from customsgnn.synth import SynthConfig, generate
from customsgnn.training import (
    GRAPH_GRID,
    GraphFC,
    GraphFCModel,
    OptimizerState,
    PipelineError,
    PretrainBatch,
    TrainConfig,
    TrainingError,
    _batch_negatives,
    finetune_loss,
    finetune_objective,
    heads,
    make_pretrain_batch,
    optimizer_step,
    prepare_dataset,
    pretrain_loss,
    pretrain_objective,
    run_pipeline,
    sample_negatives,
)

from .conftest import make_frame

SMALL = dict(
    pretrain_epochs=2,
    finetune_epochs=3,
    hidden=8,
    fanouts=(5, 3),
    n_trees=5,
    max_depth=3,
    batch_size=128,
    test_from="2017-01-01",
    inspection_rate=0.3,
)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture(scope="module")
def prepared():
    d = generate(SynthConfig(n_transactions=2000, n_importers=120, n_hs_codes=40, seed=7, base_illicit_rate=0.08))
    return prepare_dataset(TrainConfig(**SMALL), d)


def small_graph(n_txn=20, seed=0, width=4):
    rng = np.random.default_rng(seed)
    rows = [(f"t{i:02d}", "2020-01-01", f"i{rng.integers(4)}", f"h{rng.integers(3)}", i % 2) for i in range(n_txn)]
    d = Dataset(make_frame(rows))
    return build_graph(d, rng.normal(size=(n_txn, width)))


# --- pretraining loss ---------------------------------------------------------


def test_pretrain_loss_orthogonal():
    loss, *_ = pretrain_loss([1.0, 0.0], [[0.0, 1.0]], np.empty((0, 2)))
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)


def test_pretrain_loss_limit():
    loss, *_ = pretrain_loss([50.0, 0.0], [[50.0, 0.0]], [[-50.0, 0.0], [-50.0, 0.0]])
    assert loss < 1e-300 or loss == 0.0


def test_pretrain_loss_scalar_oracle():
    # anchor u with one positive (u.v = +1) and one negative (u.n = -1)
    u, v, n = np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([-1.0, 0.0])
    loss, d_u, d_v, d_n = pretrain_loss(u, [v], [n])
    want = -math.log(sig(1.0)) - math.log(sig(1.0))
    assert loss == pytest.approx(want, abs=1e-12)
    # gradient by central differences
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        num = (pretrain_loss(u + e, [v], [n])[0] - pretrain_loss(u - e, [v], [n])[0]) / (2 * h)
        assert d_u[i] == pytest.approx(num, abs=1e-8)


def test_pretrain_loss_isolated():
    with pytest.raises(ValueError):
        pretrain_loss([1.0], np.empty((0, 1)), [[1.0]])


# --- negatives ----------------------------------------------------------------


def test_negatives_empty_and_forced():
    rows = [(f"t{i}", "2020-01-01", "imp" if i < 8 else "other", "h", 0) for i in range(10)]
    g = build_graph(Dataset(make_frame(rows)), np.ones((10, 1)))
    imp = int(g.offsets[1])
    assert len(sample_negatives(g, imp, 0, seed=0)) == 0
    assert list(sample_negatives(g, imp, 2, seed=5)) == [8, 9]
    with pytest.raises(TrainingError):
        sample_negatives(g, imp, 3, seed=0)


def test_negatives_uniform_chi_square():
    rows = [(f"t{i:03d}", "2020-01-01", "a" if i < 100 else "b", "h", 0) for i in range(101)]
    g = build_graph(Dataset(make_frame(rows)), np.ones((101, 1)))
    anchor = int(g.offsets[1]) + 1  # importer "b": its pool is the 100 transactions of "a"
    counts = np.zeros(g.n_txn)
    for seed in range(20_000):
        counts[sample_negatives(g, anchor, 5, seed)] += 1
    assert counts[100] == 0
    assert counts.sum() == 100_000
    assert stats.chisquare(counts[:100]).pvalue > 0.01


def test_batch_negatives_are_valid():
    g = small_graph(60)
    anchors = np.arange(g.n_nodes)
    neg = _batch_negatives(g, anchors, 2, seed=3)
    for a, row in zip(anchors, neg):
        nbrs = set(g.indices[g.indptr[a] : g.indptr[a + 1]])
        assert len(set(row)) == 2
        assert not nbrs & set(row)
        assert (g.is_txn(row) != g.is_txn(a)).all()


# --- heads and fine-tuning loss ------------------------------------------------


def test_heads_examples():
    p = gnn.init_params(3, hidden=4)
    rng = np.random.default_rng(0)
    s = rng.normal(size=(6, 4))
    p.tensors["cls.r"][:] = 0
    p.tensors["cls.b"][:] = 0
    p.tensors["rev.r"][:] = 0
    p.tensors["rev.b"][:] = 2.5
    prob, rev = heads(p, s)
    assert np.all(prob == 0.5) and np.all(rev == 2.5)
    q = gnn.init_params(3, hidden=4, seed=9)
    prob, rev = heads(q, s)
    t = q.tensors
    for i in range(6):
        z = sum(s[i, j] * t["cls.r"][j] for j in range(4)) + t["cls.b"][0]
        assert prob[i] == pytest.approx(sig(z), abs=1e-12)
        assert rev[i] == pytest.approx(sum(s[i, j] * t["rev.r"][j] for j in range(4)) + t["rev.b"][0], abs=1e-12)


def test_finetune_loss_examples():
    loss, *_ = finetune_loss([1.0, 0.0], [1, 0], [0.3, -1.0], [0.3, -1.0], None, alpha=10, lam=0)
    assert loss == 0.0
    loss, *_ = finetune_loss([0.5, 0.5, 0.5], [1, 0, 1], [9, 9, 9], [0, 0, 0], None, alpha=0, lam=0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        finetune_loss([], [], [], [], None, 1, 0)


def test_finetune_loss_two_sample_hand_value():
    p = gnn.ModelParams({"a": np.array([1.0, -2.0]), "b": np.array([[0.5]])})
    loss, d_logit, d_rev, d_params = finetune_loss([0.8, 0.3], [1, 0], [1.5, 0.2], [1.0, 0.0], p, alpha=10.0, lam=1e-4)
    bce = -(math.log(0.8) + math.log(0.7)) / 2
    mse = ((1.5 - 1.0) ** 2 + 0.2**2) / 2
    reg = 1e-4 * (1 + 4 + 0.25)
    assert loss == pytest.approx(bce + 10 * mse + reg, abs=1e-12)
    assert d_logit == pytest.approx([(0.8 - 1) / 2, 0.3 / 2])
    assert d_rev == pytest.approx([2 * 10 * 0.5 / 2, 2 * 10 * 0.2 / 2])
    assert d_params["a"] == pytest.approx([2e-4, -4e-4])


def test_regularizer_direct_sum():
    p = gnn.init_params(5, hidden=3, seed=1)
    loss_reg, *_ = finetune_loss([0.5], [1], [0.0], [0.0], p, 0.0, 1e-3)
    loss_plain, *_ = finetune_loss([0.5], [1], [0.0], [0.0], None, 0.0, 0.0)
    direct = sum(float((v**2).sum()) for v in p.tensors.values())
    assert loss_reg - loss_plain == pytest.approx(1e-3 * direct, rel=1e-12)


def _fd_objective(objective, p, h=1e-5):
    loss0, grads = objective(p)
    errs = []
    for name, grad in grads.items():
        for idx in np.ndindex(grad.shape):
            q = p.copy()
            q.tensors[name][idx] += h
            up = objective(q)[0]
            q.tensors[name][idx] -= 2 * h
            down = objective(q)[0]
            num = (up - down) / (2 * h)
            errs.append(abs(num - grad[idx]) / max(1e-6, abs(num) + abs(grad[idx])))
    return np.asarray(errs)


@pytest.mark.parametrize("aggregator", gnn.AGGREGATORS)
def test_finetune_objective_finite_differences(aggregator):
    g = small_graph()
    p = gnn.init_params(4, hidden=4, aggregator=aggregator, seed=2)
    roots = np.arange(0, 20, 2)
    rng = np.random.default_rng(1)
    y = (rng.random(10) < 0.5).astype(float)
    y_rev = rng.normal(size=10)
    errs = _fd_objective(lambda q: finetune_objective(q, g, roots, y, y_rev, 10.0, 1e-4, [3, 3], 4), p)
    assert np.mean(errs < 1e-4) >= 0.99


@pytest.mark.parametrize("aggregator", gnn.AGGREGATORS)
def test_pretrain_objective_finite_differences(aggregator):
    g = small_graph()
    p = gnn.init_params(4, hidden=4, aggregator=aggregator, seed=3)
    batch = make_pretrain_batch(g, np.arange(g.n_nodes), 25, 2, seed=0)
    errs = _fd_objective(lambda q: pretrain_objective(q, g, batch, [3, 3], 5), p)
    assert np.mean(errs < 1e-4) >= 0.99


def test_pretrain_objective_rejects_isolated_anchor():
    g = small_graph()
    p = gnn.init_params(4, hidden=4)
    batch = PretrainBatch(np.array([0, 1]), np.array([0, 0]), np.array([g.n_txn, g.n_txn + 1]), np.array([[5], [6]]))
    with pytest.raises(TrainingError, match="isolated"):
        pretrain_objective(p, g, batch, [3, 3], 0)


# --- optimizer ----------------------------------------------------------------


def scalar_params(value=0.0):
    return gnn.ModelParams({"w": np.array([value])})


def test_optimizer_first_step_closed_form():
    p = scalar_params()
    state = OptimizerState.create(p, sync_every=0)
    optimizer_step(state, p, {"w": np.array([1.0])}, lr=0.1)
    # m_hat = 1, v_hat = 1 after bias correction
    assert p.tensors["w"][0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)


def test_optimizer_zero_gradient():
    p = scalar_params(0.7)
    state = OptimizerState.create(p)
    for _ in range(12):
        optimizer_step(state, p, {"w": np.zeros(1)}, lr=0.1)
    assert p.tensors["w"][0] == 0.7


def test_optimizer_lookahead_sync():
    p = scalar_params()
    state = OptimizerState.create(p, sync_every=2, sync_alpha=0.5)
    optimizer_step(state, p, {"w": np.ones(1)}, lr=0.1)
    fast = p.tensors["w"][0]
    optimizer_step(state, p, {"w": np.ones(1)}, lr=0.1)
    # after the sync the weight sits halfway between the start (0) and the fast weight
    assert p.tensors["w"][0] == pytest.approx(0.5 * (fast - 0.1 / (1 + 1e-8)), rel=1e-6)
    assert state.slow["w"][0] == p.tensors["w"][0]


def test_optimizer_determinism_and_nonfinite():
    def trajectory():
        p = gnn.init_params(3, hidden=2, seed=1)
        state = OptimizerState.create(p)
        rng = np.random.default_rng(0)
        for _ in range(10):
            optimizer_step(state, p, {k: rng.normal(size=v.shape) for k, v in p.tensors.items()}, 0.01)
        return p

    a, b = trajectory(), trajectory()
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    p = scalar_params()
    with pytest.raises(TrainingError, match="non-finite"):
        optimizer_step(OptimizerState.create(p), p, {"w": np.array([np.nan])}, 0.1)


# --- configuration ------------------------------------------------------------


def test_config_validation_and_yaml(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"nope": 1})
    assert TrainConfig(pretrain_graph="G_L").pretrain_graph == "labeled"
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  alpha: 2.5\n  fanouts: [4, 3]\n  test_from: 2017-01-01\n")
    cfg = TrainConfig.from_yaml(path)
    assert cfg.alpha == 2.5 and cfg.fanouts == (4, 3) and cfg.test_from == "2017-01-01"
    assert cfg.digest() == TrainConfig.from_dict(cfg.to_dict()).digest()
    assert cfg.digest() != cfg.replace(seed=1).digest()
    assert TrainConfig(variant="sparse").keys == ("importer_id",)


def test_graph_grid():
    assert len(GRAPH_GRID) == 6 and len(set(GRAPH_GRID)) == 6
    assert ("labeled", "labeled") in GRAPH_GRID and ("full", "full") in GRAPH_GRID


# --- pipeline -----------------------------------------------------------------


def test_smoke_pipeline(prepared):
    cfg = TrainConfig(**SMALL)
    params, rep = run_pipeline(cfg, prepared)
    for n in cfg.eval_percents:
        for name in ("precision", "recall", "revenue_ratio"):
            v = rep.metric(name, n)
            assert math.isfinite(v) and 0 <= v <= 1
    hist = params.meta["history"]
    assert len(hist["pretrain_loss"]) == 2 and 1 <= len(hist["finetune_loss"]) <= 3
    model = GraphFCModel(params)
    p, rev = model.score(prepared, prepared.split == "test")
    assert ((p >= 0) & (p <= 1)).all() and np.isfinite(rev).all()


def test_pretraining_loss_decreases(prepared):
    cfg = TrainConfig(**{**SMALL, "pretrain_epochs": 5, "finetune_epochs": 1, "learning_rate": 0.002})
    params, _ = run_pipeline(cfg, prepared)
    losses = params.meta["history"]["pretrain_loss"]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert params.meta["history"]["pretrain_diverged"] is False


def test_zero_pretrain_epochs_equals_semi(prepared):
    _, a = run_pipeline(TrainConfig(**{**SMALL, "pretrain_epochs": 0}), prepared)
    _, b = run_pipeline(TrainConfig(**{**SMALL, "variant": "semi"}), prepared)
    assert a.metrics == b.metrics


def test_determinism(prepared, tmp_path):
    cfg = TrainConfig(**SMALL)
    p1, r1 = run_pipeline(cfg, prepared)
    p2, r2 = run_pipeline(cfg, prepared)
    assert r1.to_json() == r2.to_json()
    gnn.save_checkpoint(p1, tmp_path / "a.bin")
    gnn.save_checkpoint(p2, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_loss_only_on_labeled_roots(prepared, monkeypatch):
    import customsgnn.training as tr

    seen = []
    real = tr.finetune_objective

    def spy(params, g, roots, *a, **kw):
        seen.append(g.labeled[roots].all())
        return real(params, g, roots, *a, **kw)

    monkeypatch.setattr(tr, "finetune_objective", spy)
    run_pipeline(TrainConfig(**{**SMALL, "pretrain_epochs": 0}), prepared)
    assert seen and all(seen)


@pytest.mark.parametrize("variant", ["joint", "only", "sparse"])
def test_variants_run(prepared, variant):
    _, rep = run_pipeline(TrainConfig(**{**SMALL, "variant": variant, "finetune_epochs": 1, "pretrain_epochs": 1}), prepared)
    assert rep.variant == f"graphfc_{variant}"


def test_stage_failure_names_stage(prepared):
    cfg = TrainConfig(**{**SMALL, "negatives_R": 10_000})
    with pytest.raises(PipelineError) as info:
        run_pipeline(cfg, prepared)
    assert info.value.stage == "pretrain"


def test_checkpoint_restores_model(prepared, tmp_path):
    params, _ = run_pipeline(TrainConfig(**{**SMALL, "pretrain_epochs": 0}), prepared)
    model = GraphFCModel(params)
    model.save(tmp_path / "m.bin")
    back = GraphFCModel.load(tmp_path / "m.bin")
    q = prepared.split == "test"
    assert np.array_equal(model.score(prepared, q)[0], back.score(prepared, q)[0])


def test_estimator(prepared):
    est = GraphFC(pretrain_epochs=0, finetune_epochs=1, hidden=4, fanouts=(3, 2), batch_size=256)
    assert clone(est).get_params() == est.get_params()
    est.fit(prepared)
    proba = est.predict_proba(prepared, rows=[0, 1, 2])
    assert proba.shape == (3, 2) and np.allclose(proba.sum(axis=1), 1)
    assert est.predict(prepared, rows=[0]).shape == (1,)
    with pytest.raises(TypeError):
        GraphFC().fit(np.zeros((3, 3)))
