import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markcl.errors import DimensionError, EmbeddingLookupError, FormatError, LengthError, MissingTaskError
from markcl.model import (
    ArchConfig,
    ClassifierHead,
    FeatureExtractor,
    KnowledgeBase,
    MarkModel,
    MaskGenerator,
    TaskModules,
    classify,
    count_params,
    extract_features,
    generate_masks,
    kb_forward,
    model_from_tensors,
    param_digest,
    predict,
    read_embeddings,
    write_embeddings,
)
from markcl.numcore import Tensor, backward, cross_entropy, no_grad, relu, conv2d_forward, modulate

# Split CIFAR-100 layout with a 64-wide trunk; total asserted as a regression constant.
CIFAR_ARCH = ArchConfig(trunk_dim=64)
CIFAR_TOTAL = 4_755_876


def small_conv_arch(**kw):
    base = dict(mode="conv", input_shape=(2, 10, 10), block_channels=(4, 6), trunk_dim=8,
                embed_dim=5, fe_channels=3)
    base.update(kw)
    return ArchConfig(**base)


def dense_arch(**kw):
    base = dict(mode="dense", input_shape=(6,), block_channels=(5, 4), trunk_dim=7, embed_dim=3, fe_channels=4)
    base.update(kw)
    return ArchConfig(**base)


def build_model(arch, n_tasks=1, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    kb = KnowledgeBase(arch, rng)
    model = MarkModel(arch, kb)
    for t in range(n_tasks):
        model.tasks[t] = TaskModules(ClassifierHead(arch.trunk_dim, n_classes, rng),
                                     MaskGenerator(arch.embed_dim, arch.block_channels),
                                     FeatureExtractor(arch, "random", rng))
    return model


def conv_param_count(c_in, c_out, k):
    return c_out * c_in * k * k + c_out


def dense_param_count(i, o):
    return i * o + o


class TestMasks:
    def test_zero_weights_zero_bias_give_zero_masks(self):
        mg = MaskGenerator(4, [2, 3])
        mg.params["bias"].data[:] = 0
        masks = generate_masks(mg, Tensor(np.ones((2, 4))))
        assert all(np.all(m.data == 0) for m in masks)

    def test_default_init_is_identity_modulation(self):
        mg = MaskGenerator(4, [2, 3])
        masks = generate_masks(mg, Tensor(np.random.default_rng(0).normal(size=(3, 4))))
        assert [m.shape for m in masks] == [(3, 2), (3, 3)]
        assert all(np.all(m.data == 1) for m in masks)

    def test_matches_loop_oracle_and_splits_448(self, rng):
        mg = MaskGenerator(4, [64, 128, 256])
        mg.params["weight"].data[:] = rng.normal(size=(4, 448)).astype(np.float32)
        mg.params["bias"].data[:] = rng.normal(size=448).astype(np.float32)
        feats = rng.normal(size=(2, 4)).astype(np.float32)
        masks = generate_masks(mg, Tensor(feats))
        assert [m.shape[1] for m in masks] == [64, 128, 256]
        joined = np.concatenate([m.data for m in masks], axis=1)
        w, b = mg.params["weight"].data, mg.params["bias"].data
        for n in range(2):
            for j in range(448):
                acc = float(b[j])
                for i in range(4):
                    acc += float(feats[n, i]) * float(w[i, j])
                assert joined[n, j] == pytest.approx(max(acc, 0.0), rel=1e-6, abs=1e-6)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            MaskGenerator(4, [2])(Tensor(np.ones((1, 3))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_masks_are_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        mg = MaskGenerator(3, [2, 2], rng=rng)
        mg.params["weight"].data[:] = rng.normal(size=(3, 4)).astype(np.float32)
        mg.params["bias"].data[:] = rng.normal(size=4).astype(np.float32)
        masks = mg(Tensor(rng.normal(size=(5, 3))))
        assert all(np.all(m.data >= 0) for m in masks)

    def test_no_bias_mode(self):
        mg = MaskGenerator(8, [3], bias=False, rng=np.random.default_rng(0))
        assert set(mg.params) == {"weight"}
        assert np.all(mg.params["weight"].data >= 0)


class TestKnowledgeBase:
    @pytest.mark.parametrize("arch", [small_conv_arch(), dense_arch()], ids=["conv", "dense"])
    def test_identity_masks_are_bitwise_noop(self, arch, rng):
        kb = KnowledgeBase(arch, rng)
        x = Tensor(rng.normal(size=(3,) + arch.input_shape))
        ones = [Tensor(np.ones((3, c))) for c in arch.block_channels]
        assert np.array_equal(kb_forward(kb, x, ones).data, kb_forward(kb, x, None).data)

    def test_zero_first_block_mask_with_zero_biases_gives_relu_trunk_bias(self, rng):
        arch = small_conv_arch()
        kb = KnowledgeBase(arch, rng)
        for b in range(len(arch.block_channels)):
            kb.params[f"block{b}.bias"].data[:] = 0
        kb.params["trunk.bias"].data[:] = rng.normal(size=arch.trunk_dim).astype(np.float32)
        x = Tensor(rng.normal(size=(2,) + arch.input_shape))
        masks = [Tensor(np.zeros((2, 4))), Tensor(np.ones((2, 6)))]
        out = kb_forward(kb, x, masks).data
        expected = np.maximum(kb.params["trunk.bias"].data, 0)
        assert np.array_equal(out, np.broadcast_to(expected, out.shape))

    def test_scaling_one_mask_entry_scales_its_channel(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)))
        b = Tensor(rng.normal(size=4))
        act = relu(conv2d_forward(x, w, b))
        scale = 0.37
        mask = np.ones((1, 4), np.float32)
        mask[0, 2] = scale
        scaled = modulate(act, Tensor(mask)).data
        assert np.array_equal(scaled[0, 2], (act.data[0, 2] * np.float32(scale)).astype(np.float32))
        for c in (0, 1, 3):
            assert np.array_equal(scaled[0, c], act.data[0, c])

    def test_wrong_mask_width(self, rng):
        arch = small_conv_arch()
        kb = KnowledgeBase(arch, rng)
        x = Tensor(rng.normal(size=(1,) + arch.input_shape))
        with pytest.raises(DimensionError):
            kb(x, [Tensor(np.ones((1, 3))), Tensor(np.ones((1, 6)))])
        with pytest.raises(DimensionError):
            kb(x, [Tensor(np.ones((1, 4)))])

    @pytest.mark.parametrize("block,channel", [(0, 0), (0, 3), (1, 5)])
    def test_zero_mask_entry_gates_filter_gradient(self, rng, block, channel):
        arch = small_conv_arch()
        kb = KnowledgeBase(arch, rng)
        head = ClassifierHead(arch.trunk_dim, 3, rng)
        x = Tensor(rng.normal(size=(1,) + arch.input_shape))
        masks = [np.full((1, c), 0.9, np.float32) for c in arch.block_channels]
        masks[block][0, channel] = 0.0
        loss = cross_entropy(head(kb(x, [Tensor(m) for m in masks])), np.array([1]))
        backward(loss)
        assert np.all(kb.params[f"block{block}.weight"].grad[channel] == 0)
        assert kb.params[f"block{block}.bias"].grad[channel] == 0
        assert np.any(kb.params[f"block{block}.weight"].grad != 0)

    def test_clone_does_not_alias(self, rng):
        kb = KnowledgeBase(dense_arch(), rng)
        twin = kb.clone()
        twin.params["block0.weight"].data[0, 0] += 1
        assert kb.params["block0.weight"].data[0, 0] != twin.params["block0.weight"].data[0, 0]


class TestFeatureExtractor:
    def test_random_variant_is_deterministic(self, rng):
        arch = small_conv_arch()
        fe = FeatureExtractor(arch, "random", rng)
        x = rng.normal(size=(2,) + arch.input_shape)
        assert np.array_equal(extract_features(fe, x).data, extract_features(fe, x).data)
        assert fe.trainable() == []

    def test_zero_input_with_zero_fc_bias(self):
        arch = dense_arch()
        fe = FeatureExtractor(arch, "task_trained", np.random.default_rng(0))
        fe.params["hidden.bias"].data[:] = 0
        fe.params["fc.bias"].data[:] = 0
        out = extract_features(fe, np.zeros((2, 6), np.float32))
        assert np.all(out.data == 0)

    def test_external_lookup_is_bit_exact(self, tmp_path, rng):
        table = rng.normal(size=(10, 3)).astype(np.float32)
        path = tmp_path / "emb.bin"
        write_embeddings(path, table)
        fe = FeatureExtractor(dense_arch(embed_dim=3), "external_embedding", table=read_embeddings(path))
        out = extract_features(fe, None, ids=[7])
        assert out.data.tobytes() == table[7].tobytes()
        with pytest.raises(EmbeddingLookupError):
            extract_features(fe, None, ids=[10])

    def test_conv_shapes(self, rng):
        arch = small_conv_arch()
        fe = FeatureExtractor(arch, "task_trained", rng)
        out = fe(rng.normal(size=(4,) + arch.input_shape), training=True)
        assert out.shape == (4, arch.embed_dim)


class TestEmbeddingFile:
    def test_round_trip(self, tmp_path, rng):
        table = rng.normal(size=(4, 2)).astype(np.float32)
        write_embeddings(tmp_path / "e", table)
        raw = (tmp_path / "e").read_bytes()
        assert raw[:8] == b"MARKEMB1"
        assert raw[8:16] == (4).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.array_equal(read_embeddings(tmp_path / "e"), table)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "e").write_bytes(b"NOTMAGIC" + bytes(8))
        with pytest.raises(FormatError, match="offset 0"):
            read_embeddings(tmp_path / "e")

    def test_truncated(self, tmp_path):
        write_embeddings(tmp_path / "e", np.ones((3, 3), np.float32))
        data = (tmp_path / "e").read_bytes()
        (tmp_path / "e").write_bytes(data[:-1])
        with pytest.raises(LengthError):
            read_embeddings(tmp_path / "e")


class TestClassifyPredict:
    def test_identity_weights(self):
        head = ClassifierHead(params={"weight": Tensor(np.eye(3)), "bias": Tensor(np.zeros(3))})
        x = Tensor(np.array([[1.0, -2.0, 3.0]]))
        assert np.array_equal(classify(head, x).data, x.data)

    def test_zero_weights_pass_bias(self):
        b = np.array([0.1, 0.7, 0.2], np.float32)
        head = ClassifierHead(params={"weight": Tensor(np.zeros((2, 3))), "bias": Tensor(b)})
        logits = classify(head, Tensor(np.ones((4, 2)))).data
        assert np.all(logits == b) and np.all(np.argmax(logits, 1) == 1)

    def test_pipeline_with_head_favoring_class_zero(self, rng):
        model = build_model(dense_arch())
        head = model.tasks[0].head
        head.params["weight"].data[:] = 0
        head.params["bias"].data[:] = [5, 0, 0]
        x = rng.normal(size=(6, 6)).astype(np.float32)
        assert np.all(predict(model, x, 0) == 0)

    def test_identical_inputs_identical_predictions(self, rng):
        model = build_model(small_conv_arch())
        x = rng.normal(size=(1,) + small_conv_arch().input_shape).astype(np.float32)
        both = predict(model, np.concatenate([x, x]), 0)
        assert both[0] == both[1]

    def test_unknown_task(self, rng):
        model = build_model(dense_arch())
        with pytest.raises(MissingTaskError):
            predict(model, rng.normal(size=(1, 6)), 3)

    def test_separable_toy_task_is_learned(self):
        from markcl.numcore import SGD, SgdConfig
        rng = np.random.default_rng(0)
        arch = dense_arch(input_shape=(2,), block_channels=(8,), trunk_dim=8)
        model = build_model(arch, n_classes=2)
        x = rng.normal(size=(200, 2)).astype(np.float32)
        y = (x[:, 0] + x[:, 1] > 0).astype(np.int64)
        mods = model.tasks[0]
        params = list(model.kb.params.values()) + list(mods.head.params.values())
        opt = SGD(params, SgdConfig(0.1, 0.9, 0.0))
        for _ in range(150):
            loss = cross_entropy(model.logits(0, x), y)
            backward(loss)
            opt.step()
            for p in params:
                p.zero_grad()
        assert np.mean(model.predict(0, x) == y) >= 0.99


class TestCountParams:
    def test_dense_and_conv_formulas(self):
        head = ClassifierHead(7, 3)
        assert sum(v.size for v in head.params.values()) == dense_param_count(7, 3) == 24
        arch = small_conv_arch(block_channels=(4,), trunk_dim=5)
        kb = KnowledgeBase(arch)
        assert kb.params["block0.weight"].size + kb.params["block0.bias"].size == conv_param_count(2, 4, 3)

    def test_additive_and_value_invariant(self):
        model = build_model(small_conv_arch(), n_tasks=2)
        report = count_params(model)
        parts = report["kb"] + report["shared_fe"] + sum(sum(e.values()) for e in report["tasks"].values())
        assert report["total"] == parts
        for v in model.kb.params.values():
            v.data[:] = 0
        assert count_params(model) == report

    def test_cifar_configuration(self):
        a = CIFAR_ARCH
        model = MarkModel(a, KnowledgeBase(a, np.random.default_rng(0)))
        for t in range(20):
            model.tasks[t] = TaskModules(ClassifierHead(a.trunk_dim, 5), MaskGenerator(a.embed_dim, a.block_channels),
                                         FeatureExtractor(a, "task_trained", np.random.default_rng(t)))
        report = count_params(model)
        # independent formula: valid 3x3 convs, 2x2 pooling, 32 -> 30 -> 15 -> 13 -> 6 -> 4 -> 2
        kb = (conv_param_count(3, 64, 3) + conv_param_count(64, 128, 3) + conv_param_count(128, 256, 3)
              + dense_param_count(256 * 2 * 2, 64))
        fe = (conv_param_count(3, 32, 3) + 2 * 32 + conv_param_count(32, 32, 3) + 2 * 32
              + dense_param_count(32 * 6 * 6, 128))
        mask = dense_param_count(128, 448)
        head = dense_param_count(64, 5)
        assert report["kb"] == kb
        assert report["tasks"][0] == {"fe": fe, "mask": mask, "head": head}
        assert report["total"] == kb + 20 * (fe + mask + head) == CIFAR_TOTAL
        assert abs(CIFAR_TOTAL - 4.7e6) / 4.7e6 <= 0.05


class TestStateRoundTrip:
    def test_named_tensors_rebuild(self, rng):
        arch = small_conv_arch()
        model = build_model(arch, n_tasks=2)
        tensors = model.named_tensors()
        rebuilt = model_from_tensors(arch, tensors)
        assert param_digest(rebuilt.named_tensors()) == param_digest(tensors)
        x = rng.normal(size=(3,) + arch.input_shape).astype(np.float32)
        with no_grad():
            assert np.array_equal(rebuilt.logits(1, x).data, model.logits(1, x).data)

    def test_clone_is_independent(self):
        model = build_model(dense_arch(), n_tasks=2)
        before = param_digest(model.named_tensors())
        twin = model.clone()
        twin.tasks[1].head.params["bias"].data[:] += 1
        twin.kb.params["trunk.bias"].data[:] += 1
        assert param_digest(model.named_tensors()) == before
