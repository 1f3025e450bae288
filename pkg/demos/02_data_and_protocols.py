# Synthetic multi-modal data, the encoding layer and the split protocols.

import tempfile
from pathlib import Path

import numpy as np

from mmfuse.data import (
    Protocol,
    SyntheticSpec,
    alignment_indices,
    generate_synthetic,
    load_encoded,
    loso_splits,
    make_split,
    segment_and_pool,
)

# %% the encoding layer on a toy series: windows of 2, remainder dropped
series = np.arange(10, dtype=float).reshape(5, 2)
print(segment_and_pool(series, 2))

# alignment picks evenly spaced patches (or repeats the last one)
print("5 -> 3:", alignment_indices(5, 3), " 2 -> 4:", alignment_indices(2, 4))

# %% generate the default dataset: 6 classes, 8 subjects, 3 modalities
root = Path(tempfile.mkdtemp()) / "synthetic"
manifest = generate_synthetic(SyntheticSpec(), root)
print(len(manifest.samples), "samples;", [m.name for m in manifest.modalities])
print(sorted(p.name for p in (root / "samples" / manifest.samples[0].sample_id).iterdir()))

ds = load_encoded(root)
for name in ds.modalities:
    print(f"{name:9s} window={ds.windows[name]:2d}  X shape={ds.features[name].shape}")

# %% protocols
ff = make_split(ds, Protocol("fifty_fifty"))
subj = dict(zip(ds.sample_ids, ds.subject_ids.tolist()))
print("fifty_fifty train subjects", sorted({subj[i] for i in ff.train_ids}))
print("fifty_fifty test subjects ", sorted({subj[i] for i in ff.test_ids}))

folds = loso_splits(ds)
print("LOSO folds:", len(folds), "test sizes:", [len(f.test_ids) for f in folds])

cs = make_split(ds, Protocol("cross_session", fraction=0.5))
print("cross_session train/test:", len(cs.train_ids), len(cs.test_ids))
