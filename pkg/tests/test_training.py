import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markcl.errors import ContractError, ParameterError, SamplingError
from markcl.model import ArchConfig, ClassifierHead, KnowledgeBase, param_digest
from markcl.numcore import SgdConfig, Tensor, backward, cross_entropy
from markcl.scenario import gen_synthetic
from markcl.training import (
    MetaConfig,
    TrainConfig,
    Tracer,
    Variant,
    _TaskData,
    aggregate_delta,
    compute_gamma,
    evaluate,
    init_kb,
    inner_train,
    kb_digest,
    kb_update,
    meta_step,
    query_phase,
    sample_minitasks,
    train_sequence,
    with_meta,
)

ARCH = ArchConfig(mode="dense", input_shape=(8,), block_channels=(12, 10), trunk_dim=10, embed_dim=6,
                  fe_channels=8, fe_variant="random")
FAST = TrainConfig(epochs=3, meta=MetaConfig(K=2, E_inner=2, E_outer=1))


@pytest.fixture(scope="module")
def scenario():
    return gen_synthetic(3, 3, (8,), separation=4.0, noise=0.5, seed=0, samples_per_class=30)


def kb_with(values):
    """Tiny KB whose every parameter is filled with one value per entry of ``values``."""
    kb = KnowledgeBase(ArchConfig(mode="dense", input_shape=(2,), block_channels=(2,), trunk_dim=2),
                       np.random.default_rng(0))
    for p in kb.params.values():
        p.data[:] = values
    return kb


class TestGamma:
    @pytest.mark.parametrize("accs,expected", [
        ([0.5, 0.5], [0.5, 0.5]),
        ([0.6, 0.2], [0.75, 0.25]),
        ([0, 0, 0], [1 / 3, 1 / 3, 1 / 3]),
    ])
    def test_examples(self, accs, expected):
        assert np.allclose(compute_gamma(accs), expected, rtol=0, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
    def test_simplex(self, accs):
        g = compute_gamma(accs)
        assert abs(g.sum() - 1) <= 1e-9 and np.all(g >= 0)


class TestAggregateDelta:
    def test_identical_copies(self):
        kb = kb_with(0.3)
        d = aggregate_delta(kb, [kb.clone(), kb.clone()], [0.5, 0.5], 4)
        assert all(np.all(v == 0) for v in d.values())

    def test_single_copy_arithmetic(self):
        kb = kb_with(1.0)
        d = aggregate_delta(kb, [kb_with(2.0)], [1.0], 2)
        assert all(np.all(v.astype(np.float32) == np.float32(0.5)) for v in d.values())

    def test_weighted_arithmetic(self):
        kb = kb_with(1.0)
        d = aggregate_delta(kb, [kb_with(5.0), kb_with(9.0)], [0.25, 0.75], 4)
        assert all(np.all(v.astype(np.float32) == np.float32(1.75)) for v in d.values())

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-4, 4, allow_nan=False), st.integers(0, 1000))
    def test_linear_in_offsets(self, s, seed):
        rng = np.random.default_rng(seed)
        base = {"w": rng.normal(size=(3, 2))}
        offs = [rng.normal(size=(3, 2)) for _ in range(3)]
        gamma = compute_gamma(rng.random(3))
        d1 = aggregate_delta(base, [{"w": base["w"] + o} for o in offs], gamma, 5)["w"]
        ds = aggregate_delta(base, [{"w": base["w"] + s * o} for o in offs], gamma, 5)["w"]
        assert np.allclose(ds, s * d1, rtol=1e-9, atol=1e-12)


class TestMetaStep:
    def test_zero_delta_and_zero_alpha(self):
        kb = kb_with(0.7)
        before = kb_digest_of(kb)
        meta_step(kb, {k: np.zeros(v.shape) for k, v in kb.params.items()}, 1.0)
        meta_step(kb, {k: np.ones(v.shape) for k, v in kb.params.items()}, 0.0)
        assert kb_digest_of(kb) == before

    def test_reptile_telescopes_to_adapted_copy(self):
        rng = np.random.default_rng(3)
        kb = KnowledgeBase(ARCH, rng)
        adapted = kb.clone()
        for p in adapted.params.values():
            p.data = (p.data + rng.normal(scale=1e-3, size=p.shape)).astype(np.float32)
        meta_step(kb, aggregate_delta(kb, [adapted], compute_gamma([0.4]), 1), 1.0, "reptile")
        for k in kb.params:
            assert kb.params[k].data.tobytes() == adapted.params[k].data.tobytes()

    def test_signs(self):
        kb_r, kb_p = kb_with(1.0), kb_with(1.0)
        delta = {k: np.full(v.shape, 0.5) for k, v in kb_r.params.items()}
        meta_step(kb_r, delta, 1.0, "reptile")
        meta_step(kb_p, delta, 1.0, "descent")
        assert np.all(kb_r.params["trunk.bias"].data == 1.5)
        assert np.all(kb_p.params["trunk.bias"].data == 0.5)


def kb_digest_of(kb):
    return param_digest({k: v.data for k, v in kb.params.items()})


class TestSampling:
    def test_full_task_single_minitask(self, scenario):
        task = scenario[0]
        n_train = np.bincount(task.labels[task.splits["train"]]).min()
        minis, vals = sample_minitasks(task, MetaConfig(K=1, H=3, h=int(n_train)), seed=0)
        assert sorted(minis[0].tolist()) == sorted(task.splits["train"].tolist())
        assert set(vals[0].tolist()) <= set(task.splits["val"].tolist())

    def test_deterministic(self, scenario):
        a = sample_minitasks(scenario[1], MetaConfig(K=4, H=2, h=5), seed=(7, 1))
        b = sample_minitasks(scenario[1], MetaConfig(K=4, H=2, h=5), seed=(7, 1))
        assert all(np.array_equal(x, y) for x, y in zip(a[0] + a[1], b[0] + b[1]))

    def test_counting_contract(self):
        sc = gen_synthetic(1, 5, (4,), seed=1, samples_per_class=30)
        minis, _ = sample_minitasks(sc[0], MetaConfig(K=6, H=3, h=10), seed=0)
        for m in minis:
            assert len(m) == 30 and len(set(m.tolist())) == 30
            labels = sc[0].labels[m]
            assert len(set(labels.tolist())) == 3
            assert all(np.sum(labels == c) == 10 for c in set(labels.tolist()))

    def test_insufficient_instances_names_class(self, scenario):
        with pytest.raises(SamplingError, match="class"):
            sample_minitasks(scenario[0], MetaConfig(K=1, H=3, h=1000), seed=0)

    def test_h_larger_than_classes(self, scenario):
        with pytest.raises(ParameterError):
            sample_minitasks(scenario[0], MetaConfig(K=1, H=9), seed=0)

    def test_default_h_and_h(self):
        assert MetaConfig().resolve(5, 200) == (3, 64)
        assert MetaConfig().resolve(4, 20) == (2, 20)
        assert MetaConfig().resolve(1, 20) == (1, 20)


class TestInnerTrain:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.kb = KnowledgeBase(ARCH, rng)
        self.head = ClassifierHead(ARCH.trunk_dim, 3, rng)
        self.x = rng.normal(size=(9, 8)).astype(np.float32)
        self.y = rng.integers(0, 3, size=9)
        self.masks = [Tensor(rng.random((9, c))) for c in ARCH.block_channels]

    def test_zero_lr_is_bitwise_noop(self):
        kb_k, _ = inner_train(self.kb.clone(), self.head.clone(), self.x, self.y, self.masks,
                              MetaConfig(inner_lr=0.0, E_inner=5), 128, (0,))
        assert kb_digest_of(kb_k) == kb_digest_of(self.kb)

    def test_single_step_matches_manual_sgd(self):
        lr = 0.05
        kb_k, head_k = inner_train(self.kb.clone(), self.head.clone(), self.x, self.y, self.masks,
                                   MetaConfig(inner_lr=lr, E_inner=1), 128, (0,))
        kb_m, head_m = self.kb.clone(), self.head.clone()
        backward(cross_entropy(head_m(kb_m(Tensor(self.x), self.masks)), self.y))
        for name, p in kb_m.params.items():
            manual = (p.data.astype(np.float64) - lr * p.grad.astype(np.float64)).astype(np.float32)
            assert np.array_equal(kb_k.params[name].data, manual)
        assert not np.array_equal(head_k.params["weight"].data, self.head.params["weight"].data)

    def test_copies_on_different_minitasks_diverge(self):
        meta = MetaConfig(inner_lr=0.05, E_inner=3)
        a, _ = inner_train(self.kb.clone(), self.head.clone(), self.x[:4], self.y[:4],
                           [Tensor(m.data[:4]) for m in self.masks], meta, 128, (0,))
        b, _ = inner_train(self.kb.clone(), self.head.clone(), self.x[4:], self.y[4:],
                           [Tensor(m.data[4:]) for m in self.masks], meta, 128, (0,))
        assert any(np.any(a.params[k].data != b.params[k].data) for k in a.params)

    def test_live_kb_untouched(self):
        before = kb_digest_of(self.kb)
        inner_train(self.kb.clone(), self.head.clone(), self.x, self.y, self.masks, MetaConfig(inner_lr=0.1), 4, (0,))
        assert kb_digest_of(self.kb) == before


def _prepared(scenario, t=0, seed=0):
    """A full_mark model after one task, plus the task data with features."""
    cfg = TrainConfig(epochs=0, meta=MetaConfig(E_outer=0))
    run = train_sequence(scenario, cfg, ARCH, "full_mark", seed)
    from markcl.training import task_data
    return run.model, task_data(scenario, run.model)


class TestPhases:
    def test_init_zero_epochs_is_noop(self, scenario):
        kb = KnowledgeBase(ARCH, np.random.default_rng(0))
        before = kb_digest_of(kb)
        init_kb(kb, _TaskData(scenario[0]), TrainConfig(epochs=0), 0)
        assert kb_digest_of(kb) == before

    def test_init_learns_separable_task(self):
        sc = gen_synthetic(1, 3, (8,), separation=6.0, noise=0.3, seed=2, samples_per_class=40)
        kb = KnowledgeBase(ARCH, np.random.default_rng(0))
        before = {k: v.data.copy() for k, v in kb.params.items()}
        train_acc = init_kb(kb, _TaskData(sc[0]), TrainConfig(epochs=50), 0)
        assert train_acc >= 0.95
        assert any(np.any(before[k] != v.data) for k, v in kb.params.items())

    def test_query_keeps_kb_frozen_and_zero_epochs_keeps_modules(self, scenario):
        model, datas = _prepared(scenario)
        kb_before, mods = kb_digest(model), model.task(1)
        head_before = param_digest({k: v.data for k, v in mods.head.params.items()})
        query_phase(model, datas[1], TrainConfig(epochs=0), 0)
        assert param_digest({k: v.data for k, v in mods.head.params.items()}) == head_before
        query_phase(model, datas[1], TrainConfig(epochs=5), 0)
        assert kb_digest(model) == kb_before
        assert param_digest({k: v.data for k, v in mods.head.params.items()}) != head_before
        assert all(p.grad is None for p in model.kb.params.values())

    def test_query_beats_feature_only(self):
        sc = gen_synthetic(1, 4, (8,), separation=3.0, noise=1.0, seed=5, samples_per_class=60)
        cfg = TrainConfig(epochs=50, meta=MetaConfig(E_outer=0))
        mark = train_sequence(sc, cfg, ARCH, "full_mark", 0)
        feat = train_sequence(sc, cfg, ARCH, "feature_only", 0)
        assert mark.acc_matrix[0, 0] > feat.acc_matrix[0, 0]

    def test_kb_update_noops(self, scenario):
        model, datas = _prepared(scenario)
        before = kb_digest(model)
        kb_update(model, datas[1], with_meta(FAST, E_outer=0), 0)
        kb_update(model, datas[1], with_meta(FAST, inner_lr=0.0, E_outer=2), 0)
        assert kb_digest(model) == before
        kb_update(model, datas[1], with_meta(FAST, inner_lr=0.01), 0)
        assert kb_digest(model) != before

    def test_requery_after_update_keeps_accuracy(self):
        sc = gen_synthetic(2, 3, (8,), separation=5.0, noise=0.5, seed=3, samples_per_class=60)
        cfg = TrainConfig(epochs=30, meta=MetaConfig(K=4, E_inner=10, E_outer=3))
        run = train_sequence(sc, cfg, ARCH, "full_mark", 0)
        q, rq = run.diagnostics["query_accuracy"], run.diagnostics["requery_accuracy"]
        assert rq[1] >= q[1] - 0.01


class TestSequence:
    def test_single_task(self, scenario):
        from markcl.scenario import Scenario
        run = train_sequence(Scenario([scenario[0]]), FAST, ARCH, "full_mark", 0)
        assert run.acc_matrix.shape == (1, 1) and not np.isnan(run.acc_matrix[0, 0])

    def test_no_update_identity_masks_keeps_post_init_kb(self, scenario):
        cfg = TrainConfig(epochs=3, meta=MetaConfig(E_outer=0))
        run = train_sequence(scenario, cfg, ARCH, "full_mark", 0)
        post_init = run.kb_snapshots[1]
        for snap in run.kb_snapshots[2:]:
            assert all(snap[k].tobytes() == post_init[k].tobytes() for k in snap)

    def test_deterministic_across_runs_and_threads(self, scenario):
        a = train_sequence(scenario, FAST, ARCH, "full_mark", 4)
        b = train_sequence(scenario, FAST, ARCH, "full_mark", 4)
        c = train_sequence(scenario, TrainConfig(epochs=3, threads=3, meta=FAST.meta), ARCH, "full_mark", 4)
        digests = {param_digest(r.model.named_tensors()) for r in (a, b, c)}
        assert len(digests) == 1
        assert np.array_equal(a.acc_matrix, c.acc_matrix, equal_nan=True)
        assert a.events == b.events

    def test_frozen_kb_instrumentation(self, scenario):
        tracer = Tracer()
        train_sequence(scenario, FAST, ARCH, "full_mark", 0, tracer=tracer)
        assert tracer.sites_changing_kb() == ["init_kb", "meta_step"]
        assert not any(r["others_changed"] for r in tracer.records)

    @pytest.mark.parametrize("variant", [v.value for v in Variant])
    def test_every_variant_runs(self, scenario, variant):
        run = train_sequence(scenario, FAST, ARCH, variant, 0)
        m = run.acc_matrix
        assert all(np.sum(~np.isnan(m[i])) == i + 1 for i in range(len(m)))

    def test_task_trained_extractor(self, scenario):
        arch = ArchConfig(**{**ARCH.__dict__, "fe_variant": "task_trained"})
        run = train_sequence(scenario, FAST, arch, "full_mark", 0)
        assert all(run.model.task(t).fe is not None and run.model.task(t).fe.frozen for t in range(3))

    def test_event_accounting(self, scenario):
        cfg = TrainConfig(epochs=2, init_epochs=3, eval_splits=("test", "val"), meta=FAST.meta)
        run = train_sequence(scenario, cfg, ARCH, "full_mark", 0)
        # init once, then query + requery per task
        assert len(run.events) == (3 + 3 * (2 + 2)) * 2

    def test_guard_catches_kb_mutation(self, scenario, monkeypatch):
        import markcl.training as tr

        real = tr.query_phase

        def leaky(model, *a, **kw):
            real(model, *a, **kw)
            model.kb.params["trunk.bias"].data[0] += 1

        monkeypatch.setattr(tr, "query_phase", leaky)
        with pytest.raises(ContractError, match="KB parameters changed"):
            train_sequence(scenario, FAST, ARCH, "full_mark", 0)


def test_evaluate_matches_predict(scenario):
    model, datas = _prepared(scenario)
    acc, loss = evaluate(model, datas[0], "test")
    idx = datas[0].split("test")
    pred = model.predict(0, datas[0].x[idx], features=Tensor(datas[0].features[idx]))
    assert acc == np.mean(pred == datas[0].y[idx]) and loss > 0


def test_config_validation():
    with pytest.raises(ParameterError):
        MetaConfig(K=0)
    with pytest.raises(ParameterError):
        MetaConfig(meta_sign="sideways")
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    assert TrainConfig().meta.inner_sgd == SgdConfig(0.001, 0.0, 0.0)
