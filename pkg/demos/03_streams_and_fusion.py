# Spatial/temporal streams per modality, fusion tokens between modality
# pairs, and where information can and cannot flow.

import numpy as np

from mmfuse import tensor as T
from mmfuse.model import ModalitySpec, ModelConfig, StudentModel, TeacherModel, forward, mstt_forward, tmt_fuse_pair
from mmfuse.tensor import Tensor

rng = np.random.default_rng(0)
mods = [ModalitySpec("inertial", patches=12, dim=6), ModalitySpec("skeleton", patches=12, dim=9),
        ModalitySpec("visual", patches=12, dim=16)]
cfg = ModelConfig(mods, num_classes=6)

teacher = TeacherModel(cfg, seed=0)
student = StudentModel(cfg.student(), seed=0, teacher=teacher)
print(f"teacher {teacher.parameter_count():,} params, student {student.parameter_count():,}")
print("pairs:", [(mods[a].name, mods[b].name) for a, b in cfg.pairs])

X = {m.name: Tensor(rng.normal(size=(4, m.patches, m.dim))) for m in mods}
out = forward(teacher, X)
print("ensemble rows sum to", out.ensemble.data.sum(-1))
print("Y_m rows sum to", out.modality_scores[0].data.sum(-1))
print("predictions", out.predictions)

# %% before fusion the streams are independent...
small = ModelConfig(mods[:2], num_classes=3, d_model=16, heads=2, mstt_layers=1)
with T.precision(np.float64):
    t = TeacherModel(small, seed=1)
    Xg = {m.name: Tensor(rng.normal(size=(2, m.patches, m.dim)), requires_grad=True) for m in small.modalities}
    streams = mstt_forward(t, Xg)
    T.sum_axis(streams[0][1]).backward()
    print("d(inertial stream)/d(skeleton input) before fusion:", Xg["skeleton"].grad)

    # ...and after two fusion layers they are not
    for v in Xg.values():
        v.grad = None
    t.zero_grad()
    streams = mstt_forward(t, Xg)
    fused_a, _, _ = tmt_fuse_pair(streams[0][1], streams[1][1], t.fusion[0])
    T.sum_axis(fused_a * Tensor(rng.normal(size=fused_a.shape))).backward()
    print("after fusion, gradient norm:", np.linalg.norm(Xg["skeleton"].grad))
