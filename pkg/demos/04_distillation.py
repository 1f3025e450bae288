# Teacher, raw student and distilled student on one leave-one-subject-out fold.
# Takes about a minute on one core.

import tempfile

import numpy as np

from mmfuse.data import Protocol, SyntheticSpec, generate_synthetic, load_encoded, make_split
from mmfuse.distill import KDConfig, train
from mmfuse.model import ModalitySpec, ModelConfig, StudentModel, TeacherModel

root = tempfile.mkdtemp()
generate_synthetic(SyntheticSpec(), root)
ds = load_encoded(root)
split = make_split(ds, Protocol("loso", subject=1))

mods = [ModalitySpec(n, *ds.shape_of(n)) for n in ds.modalities]
cfg = ModelConfig(mods, ds.num_classes, d_model=32, heads=4, mstt_layers=1, tmt_layers=2)
hp = dict(epochs=20, lr=1e-3, batch_size=8, seed=0)

teacher = TeacherModel(cfg, seed=0)
t = train(teacher, ds, split, KDConfig(**hp), log=print)

raw = train(StudentModel(cfg.student(), seed=0), ds, split, KDConfig(**hp))
kd = train(StudentModel(cfg.student(), seed=0), ds, split, KDConfig(**hp, temperature=4.0, w_cs=0.5),
           teacher=teacher)

print(f"\n{'model':12s} {'acc':>6s} {'F1':>6s}  per-modality")
for name, r in (("teacher", t), ("student", raw), ("student KD", kd)):
    per = "  ".join(f"{k}={v:.2f}" for k, v in r.per_modality_accuracy.items())
    print(f"{name:12s} {r.accuracy:6.3f} {r.macro_f1:6.3f}  {per}")
print("confusion matrix (KD student):\n", np.array(kd.confusion_matrix))
