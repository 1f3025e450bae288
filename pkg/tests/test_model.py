import itertools
import json
import time

import numpy as np
import pytest

from mmfuse import nn
from mmfuse import tensor as T
from mmfuse.distill import AdamState, adam_step, teacher_loss
from mmfuse.errors import ConfigurationError
from mmfuse.model import (
    ModalitySpec,
    ModelConfig,
    StudentModel,
    TeacherModel,
    ensemble_predict,
    load_checkpoint,
    modality_head,
    mstt_forward,
    prepare_streams,
    raw_streams,
    save_checkpoint,
    student_forward,
    teacher_forward,
    tmt_aggregate,
    tmt_fuse_pair,
)
from mmfuse.tensor import Tensor


def micro_config(m=2, **kw):
    mods = [ModalitySpec("a", 3, 4), ModalitySpec("b", 3, 5), ModalitySpec("c", 4, 2)][:m]
    base = dict(num_classes=3, d_model=8, heads=2, mstt_layers=1, tmt_layers=1, fusion_tokens=2)
    base.update(kw)
    return ModelConfig(mods, **base)


def random_inputs(cfg, rng, batch=2, requires_grad=False):
    return {
        m.name: Tensor(rng.normal(size=(batch, m.patches, m.dim)), requires_grad=requires_grad)
        for m in cfg.modalities
    }


class TestStreams:
    def test_lengths(self, rng):
        cfg = micro_config(1)
        model = StudentModel(cfg)
        X = random_inputs(cfg, rng)["a"]
        spatial, temporal = prepare_streams(X, model.modalities[0])
        assert spatial.shape == (2, 4 + 1, 8)
        assert temporal.shape == (2, 3 + 1, 8)

    def test_zero_input_spatial_is_positions(self, f64):
        cfg = micro_config(1, d_model=8)
        model = StudentModel(cfg)
        p = model.modalities[0]
        p.spatial.cls_token.data[:] = 0
        spatial, _ = raw_streams(Tensor(np.zeros((1, 3, 4))), p)
        assert np.array_equal(spatial.data[0], p.pos.data)
        # (D+1, P) table evaluated at width P+1 and truncated for odd P
        full = nn.positional_encoding(5, 4).data
        np.testing.assert_array_equal(p.pos.data, full[:, :3])

    def test_temporal_has_no_positions(self, rng, f64):
        cfg = micro_config(1)
        p = StudentModel(cfg).modalities[0]
        X = rng.normal(size=(1, 3, 4))
        _, temporal = raw_streams(Tensor(X), p)
        np.testing.assert_array_equal(temporal.data[0, 1:], X[0])
        np.testing.assert_array_equal(temporal.data[0, 0], p.temporal.cls_token.data)


class TestMSTT:
    def test_single_modality(self, rng):
        cfg = micro_config(1)
        out = mstt_forward(StudentModel(cfg), random_inputs(cfg, rng))
        assert len(out) == 1

    def test_shapes(self, rng):
        cfg = micro_config(3)
        out = mstt_forward(TeacherModel(cfg), random_inputs(cfg, rng))
        for (spatial, temporal), m in zip(out, cfg.modalities):
            assert spatial.shape == (2, m.dim + 1, 8)
            assert temporal.shape == (2, m.patches + 1, 8)

    def test_no_cross_modality_gradient(self, rng, f64):
        cfg = micro_config(2)
        model = TeacherModel(cfg)
        X = random_inputs(cfg, rng, requires_grad=True)
        out = mstt_forward(model, X)
        spatial, temporal = out[0]
        (T.sum_axis(spatial * 1.3) + T.sum_axis(temporal)).backward()
        assert X["b"].grad is None or not np.any(X["b"].grad)
        assert np.any(X["a"].grad)

    def test_missing_modality(self, rng):
        cfg = micro_config(2)
        X = random_inputs(cfg, rng)
        del X["b"]
        with pytest.raises(ConfigurationError):
            mstt_forward(TeacherModel(cfg), X)


class TestTMT:
    def _pair(self, rng, cfg):
        model = TeacherModel(cfg)
        X = random_inputs(cfg, rng, requires_grad=True)
        streams = mstt_forward(model, X)
        return model, X, streams

    def test_zero_update_keeps_tokens(self, rng, f64):
        cfg = micro_config(2)
        model, _, streams = self._pair(rng, cfg)
        fp = model.fusion[0]
        for layers in fp.layers:
            for layer in layers:
                for lin in (layer.out, layer.ff2):
                    lin.weight.data[:] = 0
                    lin.bias.data[:] = 0
        fp.bridge.weight.data = np.eye(8)
        fp.bridge.bias.data[:] = 0
        _, _, tokens = tmt_fuse_pair(streams[0][1], streams[1][1], fp)
        assert np.array_equal(tokens.data, np.broadcast_to(fp.tokens.data, tokens.shape))

    def test_one_layer_mixes_tokens(self, rng, f64):
        cfg = micro_config(2, tmt_layers=1)
        model, X, streams = self._pair(rng, cfg)
        _, _, tokens = tmt_fuse_pair(streams[0][1], streams[1][1], model.fusion[0])
        T.sum_axis(tokens * Tensor(rng.normal(size=tokens.shape))).backward()
        assert np.linalg.norm(X["a"].grad) > 0 and np.linalg.norm(X["b"].grad) > 0

    def test_cross_modality_gradient(self, rng, f64):
        # streams read the shared tokens of the previous layer, so the
        # exchange reaches the streams from the second layer on
        cfg = micro_config(2, tmt_layers=2)
        model, X, streams = self._pair(rng, cfg)
        ha, _, _ = tmt_fuse_pair(streams[0][1], streams[1][1], model.fusion[0])
        T.sum_axis(ha * Tensor(rng.normal(size=ha.shape))).backward()
        assert np.linalg.norm(X["b"].grad) > 0

    def test_token_shape(self, rng):
        cfg = micro_config(2, tmt_layers=3, fusion_tokens=5)
        model, _, streams = self._pair(rng, cfg)
        ha, hb, tokens = tmt_fuse_pair(streams[0][1], streams[1][1], model.fusion[0])
        assert tokens.shape == (2, 5, 8)
        assert ha.shape == streams[0][1].shape and hb.shape == streams[1][1].shape

    def test_pair_count(self):
        assert len(TeacherModel(micro_config(3)).fusion) == 3

    def test_single_modality_rejected(self):
        with pytest.raises(ConfigurationError):
            TeacherModel(micro_config(1))

    def test_zero_tokens_rejected(self):
        with pytest.raises(ConfigurationError):
            TeacherModel(micro_config(2, fusion_tokens=0))


class TestAggregate:
    def test_three_modalities(self, rng, f64):
        h = {p: (Tensor(rng.normal(size=(1, 2))), Tensor(rng.normal(size=(1, 2))))
             for p in itertools.combinations(range(3), 2)}
        out = tmt_aggregate(h, 3)
        np.testing.assert_allclose(out[0].data, (h[(0, 1)][0].data + h[(0, 2)][0].data) / 2)
        np.testing.assert_allclose(out[1].data, (h[(0, 1)][1].data + h[(1, 2)][0].data) / 2)
        np.testing.assert_allclose(out[2].data, (h[(0, 2)][1].data + h[(1, 2)][1].data) / 2)

    def test_two_modalities_identity(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
        out = tmt_aggregate({(0, 1): (a, b)}, 2)
        assert out[0] is a and out[1] is b

    def test_identical_copies(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        out = tmt_aggregate({(0, 1): (x, x), (0, 2): (x, x), (1, 2): (x, x)}, 3)
        for o in out:
            assert np.array_equal(o.data, x.data)

    def test_needs_two(self):
        with pytest.raises(ConfigurationError):
            tmt_aggregate({}, 1)


class TestHeads:
    def test_mass_two(self, rng):
        model = StudentModel(micro_config(1))
        cls = Tensor(rng.normal(size=(4, 8)))
        *_, y = modality_head(cls, Tensor(rng.normal(size=(4, 8))), model.modalities[0])
        np.testing.assert_allclose(y.data.sum(-1), 2.0, atol=1e-6)

    def test_identical_logits(self, rng, f64):
        model = StudentModel(micro_config(1))
        p = model.modalities[0]
        p.temporal.head.weight.data = p.spatial.head.weight.data.copy()
        p.temporal.head.bias.data = p.spatial.head.bias.data.copy()
        cls = Tensor(rng.normal(size=(4, 8)))
        s_logits, _, s_probs, _, y = modality_head(cls, cls, p)
        np.testing.assert_array_equal(y.data, 2 * s_probs.data)
        assert np.array_equal(np.argmax(y.data, -1), np.argmax(y.data / 2, -1))

    def test_head_ignores_token_scale(self, rng, f64):
        # the class token is layer-normalized before the linear head
        model = StudentModel(micro_config(1))
        cls = rng.normal(size=(4, 8))
        a = modality_head(Tensor(cls), Tensor(cls), model.modalities[0])[0]
        b = modality_head(Tensor(50 * cls + 3), Tensor(cls), model.modalities[0])[0]
        # only the norm's epsilon separates the two
        np.testing.assert_allclose(a.data, b.data, rtol=1e-4)

    def test_ensemble_single(self, rng, f64):
        y = Tensor(rng.dirichlet(np.ones(4), size=3) * 2)
        probs, _ = ensemble_predict([y])
        np.testing.assert_allclose(probs.data, y.data / 2, rtol=0, atol=1e-15)

    def test_ensemble_sum_vs_mean_argmax(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            m = int(r.integers(1, 5))
            c = int(r.integers(2, 7))
            ys = [Tensor((r.dirichlet(np.ones(c)) + r.dirichlet(np.ones(c)))[None], dtype=np.float64) for _ in range(m)]
            probs, pred = ensemble_predict(ys)
            brute = max(range(c), key=lambda k: (sum(y.data[0, k] for y in ys), -k))
            assert pred[0] == brute
            assert abs(probs.data.sum() - 1.0) <= 1e-6

    def test_tie_breaks_low(self):
        probs, pred = ensemble_predict([Tensor([[1.0, 1.0]])])
        assert pred[0] == 0


class TestForward:
    def test_output_shapes(self, rng):
        cfg = micro_config(3)
        out = teacher_forward(TeacherModel(cfg), random_inputs(cfg, rng, batch=5))
        assert out.ensemble.shape == (5, 3)
        np.testing.assert_allclose(out.ensemble.data.sum(-1), 1.0, atol=1e-6)
        for p in out.spatial_probs + out.temporal_probs:
            np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-6)

    def test_deterministic(self, rng):
        cfg = micro_config(2)
        X = random_inputs(cfg, rng)
        a = teacher_forward(TeacherModel(cfg, seed=3), X).ensemble.data
        b = teacher_forward(TeacherModel(cfg, seed=3), X).ensemble.data
        assert np.array_equal(a, b)

    def test_no_dead_parameters(self, rng):
        cfg = micro_config(3, tmt_layers=2)
        model = TeacherModel(cfg, seed=1)
        X = random_inputs(cfg, rng, batch=6)
        labels = rng.integers(0, 3, size=6)
        named = model.named_parameters()
        state = AdamState()
        for _ in range(2):
            model.zero_grad()
            teacher_loss(teacher_forward(model, X), labels).backward()
            dead = [k for k, p in named.items() if p.grad is None or not np.any(p.grad)]
            assert not dead
            adam_step({k: p.data for k, p in named.items()}, {k: p.grad for k, p in named.items()}, state, 1e-3)

    def test_student_smaller(self):
        cfg = ModelConfig([ModalitySpec("a", 12, 6), ModalitySpec("b", 12, 9)], 6)
        teacher = TeacherModel(cfg)
        student = StudentModel(cfg.student(), teacher=teacher)
        assert student.parameter_count() < teacher.parameter_count()
        assert not student.fusion

    def test_student_not_smaller_rejected(self):
        cfg = micro_config(2)
        with pytest.raises(ConfigurationError):
            StudentModel(cfg.student(mstt_layers=4), teacher=TeacherModel(cfg))

    def test_single_modality_teacher_without_fusion_equals_student(self, rng):
        cfg = micro_config(1, mstt_layers=2)
        X = random_inputs(cfg, rng)
        t = teacher_forward(TeacherModel(cfg, seed=9, enable_tmt=False), X)
        s = student_forward(StudentModel(cfg, seed=9), X)
        assert np.array_equal(t.ensemble.data, s.ensemble.data)

    def test_student_forward_faster(self, rng):
        cfg = ModelConfig([ModalitySpec("a", 12, 6), ModalitySpec("b", 12, 9)], 6, d_model=32)
        X = random_inputs(cfg, rng, batch=16)
        teacher, student = TeacherModel(cfg), StudentModel(cfg.student())

        def best(model):
            times = []
            for _ in range(3):
                t0 = time.perf_counter()
                model(X)
                times.append(time.perf_counter() - t0)
            return min(times)

        assert best(student) < best(teacher)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        cfg = micro_config(3)
        model = TeacherModel(cfg, seed=4)
        X = random_inputs(cfg, rng)
        before = model(X).ensemble.data
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert isinstance(loaded, TeacherModel)
        for name, p in model.named_parameters().items():
            assert np.array_equal(p.data, loaded.named_parameters()[name].data)
        assert np.array_equal(loaded(X).ensemble.data, before)

    def test_manifest_layout(self, tmp_path):
        model = StudentModel(micro_config(2), seed=2)
        save_checkpoint(model, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        names = [s["name"] for s in manifest["slots"]]
        assert names == sorted(names) and len(set(names)) == len(names)
        offset = 0
        for slot in manifest["slots"]:
            assert slot["offset"] == offset and slot["dtype"] == "float32"
            offset += 4 * int(np.prod(slot["shape"]))
        assert (tmp_path / "params.bin").stat().st_size == offset
        raw = np.frombuffer((tmp_path / "params.bin").read_bytes(), dtype="<f4")
        first = model.named_parameters()[names[0]].data.ravel()
        assert np.array_equal(raw[: first.size], first)
        assert sum(int(np.prod(s["shape"])) for s in manifest["slots"]) == model.parameter_count()
