"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines.
The distillation criterion trains 8 teachers and 80 students on the default
synthetic dataset and takes several minutes on one core.
"""

import math
import time

import numpy as np
import pytest

from mmfuse import nn
from mmfuse import tensor as T
from mmfuse.data import (
    Protocol,
    SyntheticSpec,
    check_split,
    generate_synthetic,
    load_encoded,
    loso_splits,
    make_split,
    synthesize,
)
from mmfuse.distill import KDConfig, kl_div, student_loss, teacher_loss, train
from mmfuse.model import (
    ModalitySpec,
    ModelConfig,
    StudentModel,
    TeacherModel,
    ensemble_predict,
    forward,
    load_checkpoint,
    mstt_forward,
    save_checkpoint,
    tmt_aggregate,
    tmt_fuse_pair,
)
from mmfuse.tensor import Tensor

from conftest import grad_check

# Scaled-down architecture used wherever a criterion trains on the default
# dataset; the full defaults (d_model=64, 4 MSTT layers) are used for the
# parameter-count and timing comparison.
COMPACT = dict(d_model=32, heads=4, mstt_layers=1, tmt_layers=2, fusion_tokens=4)
TRAIN = dict(epochs=20, lr=1e-3, batch_size=8)
KD_SEEDS = (0, 1, 2, 3, 4)
FUSION_SEEDS = (0, 1, 2, 3, 4)


def verdict(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    print("\n" + line)
    assert ok, line


def micro_config(**kw):
    # D=4, P=3, M=2, C=3
    base = dict(num_classes=3, d_model=8, heads=2, mstt_layers=1, tmt_layers=2, fusion_tokens=2)
    base.update(kw)
    return ModelConfig([ModalitySpec("a", 3, 4), ModalitySpec("b", 3, 4)], **base)


def micro_inputs(rng, batch=3, requires_grad=False):
    return {n: Tensor(rng.normal(size=(batch, 3, 4)), requires_grad=requires_grad) for n in ("a", "b")}


@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_ds")
    generate_synthetic(SyntheticSpec(), root)
    return load_encoded(root)


def compact_config(ds, **kw):
    mods = [ModalitySpec(n, *ds.shape_of(n)) for n in ds.modalities]
    return ModelConfig(mods, ds.num_classes, **{**COMPACT, **kw})


# ---------------------------------------------------------------------------


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_prim = 0.0
    with T.precision(np.float64):
        def leaf(*shape):
            return T.parameter(rng.uniform(-2, 2, size=shape))

        a, b = leaf(3, 4), leaf(3, 4)
        w, g, s = leaf(4, 5), leaf(4), leaf(4)
        c34 = Tensor(rng.normal(size=(3, 4)))
        pos = T.parameter(rng.uniform(0.2, 2, size=(3, 4)))
        cases = {
            "add": (lambda: T.add(a, b), [a, b]),
            "sub": (lambda: T.sub(a, b), [a, b]),
            "mul": (lambda: T.mul(a, b), [a, b]),
            "scale": (lambda: T.scale(a, 0.7), [a]),
            "matmul": (lambda: T.slice_axis(T.matmul(a, w), 1, 0, 4), [a, w]),
            "exp": (lambda: T.exp(a), [a]),
            "log": (lambda: T.log(pos), [pos]),
            "relu": (lambda: T.relu(a), [a]),
            "gelu": (lambda: T.gelu(a), [a]),
            "softmax": (lambda: T.softmax_lastdim(a), [a]),
            "layer_norm": (lambda: T.layer_norm(a, g, s), [a, g, s]),
            "mean": (lambda: T.mean_axis(a, 0, keepdims=True) * b, [a, b]),
            "sum": (lambda: T.sum_axis(a, 1, keepdims=True) * b, [a, b]),
            "transpose": (lambda: T.transpose_last2(T.transpose_last2(a)), [a]),
            "swapaxes": (lambda: T.swapaxes(T.reshape(a, (3, 2, 2)), 1, 2).reshape((3, 4)), [a]),
            "reshape": (lambda: T.reshape(T.reshape(a, (2, 6)), (3, 4)), [a]),
            "concat": (lambda: T.slice_axis(T.concat_axis([a, b], 1), 1, 2, 6), [a, b]),
            "expand": (lambda: T.expand(T.slice_axis(a, 0, 0, 1), (3, 4)), [a]),
        }
        for name, (fn, params) in cases.items():
            err = grad_check(lambda: T.sum_axis(fn() * c34), params)
            worst_prim = max(worst_prim, err)

        cfg = micro_config()
        X = micro_inputs(rng)
        labels = np.array([0, 2, 1])
        teacher = TeacherModel(cfg, seed=1)
        student = StudentModel(cfg.student(), seed=2)
        kd = KDConfig()
        with T.no_grad():
            t_out = forward(teacher, X)
        err_t = grad_check(lambda: teacher_loss(forward(teacher, X), labels),
                           list(teacher.named_parameters().values()), max_entries=4, rng=rng)
        err_s = grad_check(lambda: student_loss(forward(student, X), t_out, labels, kd),
                           list(student.named_parameters().values()), max_entries=6, rng=rng)
    elapsed = time.perf_counter() - start
    ok = worst_prim < 1e-4 and err_t < 1e-3 and err_s < 1e-3 and elapsed < 60
    verdict(1, ok, f"primitives max rel err {worst_prim:.2e} (<1e-4), teacher {err_t:.2e}, "
                   f"student {err_s:.2e} (<1e-3), {elapsed:.1f}s (<60s)")


def test_criterion_2_normalization():
    rng = np.random.default_rng(12)
    worst = 0.0
    cfg = micro_config(num_classes=5)
    out = forward(TeacherModel(cfg, seed=3), micro_inputs(rng, batch=6))
    for p in out.spatial_probs + out.temporal_probs + [out.ensemble]:
        worst = max(worst, float(np.max(np.abs(p.data.sum(-1) - 1))))
    for y in out.modality_scores:
        worst = max(worst, float(np.max(np.abs(y.data.sum(-1) - 2))))
    for _ in range(20):
        z = Tensor(rng.normal(size=(4, 7)) * rng.uniform(0.1, 30))
        worst = max(worst, float(np.max(np.abs(T.softmax_lastdim(z).data.sum(-1) - 1))))
    q, k, v = (Tensor(rng.normal(size=(2, 3, 9, 4)) * 4) for _ in range(3))
    _, att = nn.attention(q, k, v, return_weights=True)
    att_err = float(np.max(np.abs(att.data.sum(-1) - 1)))

    with T.precision(np.float64):
        p = rng.exponential(size=(1000, 6))
        p /= p.sum(1, keepdims=True)
        q = rng.exponential(size=(1000, 6))
        q /= q.sum(1, keepdims=True)
        self_kl = max(abs(float(kl_div(Tensor(p[i:i + 1]), Tensor(p[i:i + 1])).data)) for i in range(1000))
        min_kl = min(float(kl_div(Tensor(p[i:i + 1]), Tensor(q[i:i + 1])).data) for i in range(1000))
    ok = worst <= 1e-6 and att_err <= 1e-6 and self_kl <= 1e-9 and min_kl >= 0
    verdict(2, ok, f"prob sums err {worst:.1e}, attention rows err {att_err:.1e}, "
                   f"max KL(p,p) {self_kl:.1e}, min KL over 1000 pairs {min_kl:.3e}")


def test_criterion_3_architecture():
    pre_zero = True
    post_norms = []
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        with T.precision(np.float64):
            cfg = micro_config()
            model = TeacherModel(cfg, seed=seed)
            X = micro_inputs(rng, requires_grad=True)
            streams = mstt_forward(model, X)
            probe = Tensor(rng.normal(size=streams[0][1].shape))
            (T.sum_axis(streams[0][0]) + T.sum_axis(streams[0][1] * probe)).backward()
            pre_zero &= X["b"].grad is None or not np.any(X["b"].grad)
            for t in X.values():
                t.grad = None
            model.zero_grad()

            streams = mstt_forward(model, X)
            ha, hb, _ = tmt_fuse_pair(streams[0][1], streams[1][1], model.fusion[0])
            fused = tmt_aggregate({(0, 1): (ha, hb)}, 2)
            T.sum_axis(fused[0] * Tensor(rng.normal(size=fused[0].shape))).backward()
            post_norms.append(float(np.linalg.norm(X["b"].grad)) if X["b"].grad is not None else 0.0)

    rng = np.random.default_rng(13)
    agree = 0
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        scores = [Tensor(rng.dirichlet(np.ones(6), size=3) * 2) for _ in range(m)]
        total = sum(s.data for s in scores)
        by_sum = np.argmax(total, -1)
        by_mean = np.argmax(total / (2 * m), -1)
        agree += int(np.array_equal(by_sum, by_mean) and np.array_equal(ensemble_predict(scores)[1], by_sum))
    ok = pre_zero and min(post_norms) > 0 and agree == 1000
    verdict(3, ok, f"pre-fusion cross grads zero: {pre_zero}; post-fusion cross grad norms "
                   f"min {min(post_norms):.2e} over 5 seeds; sum/mean argmax agree {agree}/1000")


def test_criterion_4_positional_encoding():
    rng = np.random.default_rng(14)
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(100):
            d_model = 2 * int(rng.integers(1, 64))
            pos = int(rng.integers(0, 200))
            col = int(rng.integers(0, d_model))
            i = col // 2
            angle = pos / 10000 ** (2 * i / d_model)
            ref = math.sin(angle) if col % 2 == 0 else math.cos(angle)
            got = float(nn.positional_encoding(pos + 1, d_model).data[pos, col])
            worst = max(worst, abs(got - ref))
    verdict(4, worst <= 1e-12, f"max |PE - closed form| over 100 points {worst:.1e} (<=1e-12)")


def test_criterion_5_distillation(default_dataset):
    ds = default_dataset
    start = time.perf_counter()
    cfg = compact_config(ds)
    deltas, rows = [], []
    for split in loso_splits(ds):
        teacher = TeacherModel(cfg, seed=0)
        t_rep = train(teacher, ds, split, KDConfig(**TRAIN, seed=0))
        for seed in KD_SEEDS:
            raw = train(StudentModel(cfg.student(), seed=seed), ds, split, KDConfig(**TRAIN, seed=seed))
            kd = train(StudentModel(cfg.student(), seed=seed), ds, split, KDConfig(**TRAIN, seed=seed),
                       teacher=teacher)
            deltas.append(kd.accuracy - raw.accuracy)
            rows.append((t_rep.accuracy, raw.accuracy, kd.accuracy))
    elapsed = time.perf_counter() - start
    r = np.mean(rows, axis=0)
    mean_delta = float(np.mean(deltas))
    ok = mean_delta >= 0 and elapsed < 900
    verdict(5, ok, f"LOSO x {len(KD_SEEDS)} seeds: teacher {r[0]:.3f}, raw student {r[1]:.3f}, "
                   f"KD student {r[2]:.3f}, mean KD-raw {mean_delta:+.4f} (>=0), {elapsed:.0f}s (<900s)")


def test_criterion_6_compression(default_dataset):
    ds = default_dataset
    mods = [ModalitySpec(n, *ds.shape_of(n)) for n in ds.modalities]
    cfg = ModelConfig(mods, ds.num_classes)  # full defaults
    teacher = TeacherModel(cfg, seed=0)
    student = StudentModel(cfg.student(), seed=0, teacher=teacher)
    ratio = teacher.parameter_count() / student.parameter_count()
    split = make_split(ds, Protocol("fifty_fifty"))
    one = KDConfig(epochs=1, batch_size=32)
    t_sec = min(train(TeacherModel(cfg, seed=0), ds, split, one).epoch_seconds[0] for _ in range(2))
    s_sec = min(train(StudentModel(cfg.student(), seed=0), ds, split, one).epoch_seconds[0] for _ in range(2))
    ok = ratio >= 2.5 and s_sec < t_sec
    verdict(6, ok, f"parameters {teacher.parameter_count()} / {student.parameter_count()} = {ratio:.2f}x (>=2.5); "
                   f"epoch time student {s_sec:.2f}s < teacher {t_sec:.2f}s")


def test_criterion_7_fusion_utility(default_dataset):
    ds = default_dataset
    cfg = compact_config(ds)
    split = make_split(ds, Protocol("fifty_fifty"))
    ens, best = [], []
    for seed in FUSION_SEEDS:
        rep = train(TeacherModel(cfg, seed=seed), ds, split, KDConfig(**TRAIN, seed=seed))
        ens.append(rep.accuracy)
        best.append(max(rep.per_modality_accuracy.values()))
    gap = float(np.mean(ens) - np.mean(best))
    verdict(7, gap >= -0.01, f"teacher ensemble {np.mean(ens):.3f} vs best single modality {np.mean(best):.3f} "
                             f"(mean of {len(FUSION_SEEDS)} seeds), gap {gap:+.3f} (>=-0.010)")


def test_criterion_8_determinism(default_dataset, tmp_path):
    ds = default_dataset
    cfg = compact_config(ds)
    split = make_split(ds, Protocol("loso", subject=3))
    kd = KDConfig(epochs=2, batch_size=16, seed=7)
    reps = [train(TeacherModel(cfg, seed=7), ds, split, kd) for _ in range(2)]
    same_trace = reps[0].epoch_losses == reps[1].epoch_losses
    same_report = reps[0].metrics() == reps[1].metrics()

    model = TeacherModel(cfg, seed=8)
    save_checkpoint(model, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    X = {n: Tensor(ds.features[n][:5]) for n in ds.modalities}
    with T.no_grad():
        a, b = forward(model, X), forward(back, X)
    exact = np.array_equal(a.ensemble.data, b.ensemble.data) and all(
        np.array_equal(p.data, q.data) for p, q in zip(a.spatial_logits + a.temporal_logits,
                                                       b.spatial_logits + b.temporal_logits))
    ok = same_trace and same_report and exact
    verdict(8, ok, f"loss traces identical: {same_trace}; reports identical: {same_report}; "
                   f"checkpoint round trip bit-exact: {exact}")


def test_criterion_9_protocols():
    small = dict(num_classes=2, num_sessions=2, trials=1, duration=1.0,
                 modalities=[dict(name="x", channels=2, rate=10.0, noise=0.1)])
    m8, _ = synthesize(SyntheticSpec(num_subjects=8, **small))
    m20, _ = synthesize(SyntheticSpec(num_subjects=20, **small))

    def subjects(manifest, ids):
        lookup = dict(zip(manifest.sample_ids, manifest.subject_ids))
        return sorted({int(lookup[i]) for i in ids})

    ff = make_split(m8, Protocol("fifty_fifty"))
    ff_ok = subjects(m8, ff.train_ids) == [1, 3, 5, 7] and subjects(m8, ff.test_ids) == [2, 4, 6, 8]

    folds = loso_splits(m8)
    tests = [i for f in folds for i in f.test_ids]
    loso_ok = len(tests) == len(set(tests)) == len(m8.samples) and len(folds) == 8

    cs = make_split(m20, Protocol("cross_subject", fraction=0.8))
    cs_ok = subjects(m20, cs.train_ids) == list(range(1, 17)) and subjects(m20, cs.test_ids) == list(range(17, 21))

    disjoint = True
    for manifest, splits in ((m8, [ff] + folds), (m20, [cs] + loso_splits(m20))):
        for sp in splits:
            check_split(sp, manifest)
            disjoint &= not set(subjects(manifest, sp.train_ids)) & set(subjects(manifest, sp.test_ids))
    ok = ff_ok and loso_ok and cs_ok and disjoint
    verdict(9, ok, f"fifty_fifty odd/even: {ff_ok}; LOSO partitions: {loso_ok}; "
                   f"cross_subject(0.8) 1-16/17-20: {cs_ok}; subject sets disjoint: {disjoint}")
