"""Datasets: synthetic generation, on-disk layout, patch encoding and splits.

On-disk layout::

    root/meta.json                          manifest (UTF-8 JSON)
    root/samples/<sample_id>/<modality>.csv one row per time step, no header
"""

from __future__ import annotations

import json
import math
import os
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError
from .tensor import Tensor

SUBJECT_INDEPENDENT = ("fifty_fifty", "loso", "cross_subject")
PROTOCOLS = SUBJECT_INDEPENDENT + ("cross_session",)


# ---------------------------------------------------------------------------
# records and manifest
# ---------------------------------------------------------------------------


@dataclass
class ModalityRecord:
    modality_id: str
    series: np.ndarray  # (T_raw, C)
    sample_rate: float

    def __post_init__(self):
        self.series = np.atleast_2d(np.asarray(self.series, dtype=np.float64))
        if self.series.ndim != 2 or self.series.shape[0] < 1 or self.series.shape[1] < 1:
            raise ConfigurationError(
                f"{self.modality_id}: series must be (T_raw>=1, C>=1), got {self.series.shape}"
            )


@dataclass
class ModalityInfo:
    name: str
    channels: int
    rate: float


@dataclass
class SampleEntry:
    sample_id: str
    subject_id: int
    session_id: int
    label: str
    files: dict


@dataclass
class DatasetManifest:
    modalities: list
    classes: list
    samples: list
    root: Path = None
    generator: dict = None

    def __post_init__(self):
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate modality names in manifest")
        classes = set(self.classes)
        for s in self.samples:
            if set(s.files) != set(names):
                raise ConfigurationError(
                    f"sample {s.sample_id} must reference every modality exactly once"
                )
            if not (isinstance(s.subject_id, int) and s.subject_id > 0):
                raise ConfigurationError(f"sample {s.sample_id}: subject_id must be a positive integer")
            if not (isinstance(s.session_id, int) and s.session_id > 0):
                raise ConfigurationError(f"sample {s.sample_id}: session_id must be a positive integer")
            if s.label not in classes:
                raise ConfigurationError(f"sample {s.sample_id}: label {s.label!r} not in classes")

    @property
    def modality_names(self):
        return [m.name for m in self.modalities]

    @property
    def sample_ids(self):
        return [s.sample_id for s in self.samples]

    @property
    def subject_ids(self):
        return np.array([s.subject_id for s in self.samples], dtype=np.int64)

    @property
    def session_ids(self):
        return np.array([s.session_id for s in self.samples], dtype=np.int64)

    def to_json(self):
        out = {
            "modalities": [asdict(m) for m in self.modalities],
            "classes": list(self.classes),
            "samples": [asdict(s) for s in self.samples],
        }
        if self.generator is not None:
            out["generator"] = self.generator
        return out

    @classmethod
    def from_json(cls, obj, root=None):
        try:
            modalities = [ModalityInfo(m["name"], int(m["channels"]), float(m["rate"])) for m in obj["modalities"]]
            samples = [
                SampleEntry(s["sample_id"], s["subject_id"], s["session_id"], s["label"], dict(s["files"]))
                for s in obj["samples"]
            ]
            classes = list(obj["classes"])
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed manifest: {exc}") from None
        return cls(modalities, classes, samples, root=root, generator=obj.get("generator"))


def read_manifest(root):
    root = Path(root)
    path = root / "meta.json"
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IngestionError(f"no manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"manifest {path} is not valid JSON: {exc}") from None
    return DatasetManifest.from_json(obj, root=root)


def write_manifest(manifest, root):
    root = Path(root)
    text = json.dumps(manifest.to_json(), indent=1, ensure_ascii=False)
    (root / "meta.json").write_text(text + "\n", encoding="utf-8")


def _format_csv(series):
    return "".join(",".join(repr(v) for v in row) + "\n" for row in series.tolist())


def read_series(path, sample_id=None):
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except FileNotFoundError:
        raise IngestionError(f"sample {sample_id}: missing file {path}", sample_id) from None
    except ValueError as exc:
        raise IngestionError(f"sample {sample_id}: cannot parse {path}: {exc}", sample_id) from None
    if arr.size == 0:
        raise IngestionError(f"sample {sample_id}: empty file {path}", sample_id)
    return arr


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticModality:
    name: str
    channels: int
    rate: float
    noise: float


def _default_modalities():
    return [
        SyntheticModality("inertial", 6, 50.0, 0.9),
        SyntheticModality("skeleton", 9, 30.0, 0.9),
        SyntheticModality("visual", 16, 10.0, 1.1),
    ]


@dataclass
class SyntheticSpec:
    num_classes: int = 6
    num_subjects: int = 8
    num_sessions: int = 2
    trials: int = 2
    duration: float = 6.0
    latent_dim: int = 4
    class_separation: float = 0.25
    subject_bias: float = 0.6
    seed: int = 0
    modalities: list = field(default_factory=_default_modalities)

    def __post_init__(self):
        self.modalities = [
            m if isinstance(m, SyntheticModality) else SyntheticModality(**m) for m in self.modalities
        ]
        for name in ("num_classes", "num_subjects", "num_sessions", "trials", "latent_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be an integer >= 1, got {value!r}")
        if not self.modalities:
            raise ConfigurationError("modalities must list at least one modality")
        if self.duration <= 0:
            raise ConfigurationError("duration must be > 0")
        if self.class_separation <= 0:
            raise ConfigurationError("class_separation must be > 0")
        if self.subject_bias < 0:
            raise ConfigurationError("subject_bias must be >= 0")
        for m in self.modalities:
            if m.channels < 1 or m.rate <= 0 or m.noise < 0:
                raise ConfigurationError(f"modality {m.name}: channels>=1, rate>0, noise>=0 required")

    @classmethod
    def from_dict(cls, obj):
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


def _class_prototypes(rng, num_classes, latent_dim, separation, components=3):
    """Per class and latent dim: amplitudes, frequencies (cycles/trial), phases.

    Classes share a common waveform; ``separation`` scales how far each class's
    own phases and amplitudes move away from it.
    """
    shape = (latent_dim, components)
    base_amp = rng.uniform(0.5, 1.5, size=shape)
    freq = np.broadcast_to(rng.uniform(0.5, 3.0, size=shape), (num_classes,) + shape).copy()
    base_phase = rng.uniform(0, 2 * np.pi, size=shape)
    amp = base_amp * np.exp(separation * rng.normal(0, 0.5, size=(num_classes,) + shape))
    phase = base_phase + separation * rng.normal(0, 1.0, size=(num_classes,) + shape)
    return amp, freq, phase


def _latent(u, amp, freq, phase):
    # u: (T,) normalized time -> (T, latent_dim)
    waves = amp[None] * np.sin(2 * np.pi * freq[None] * u[:, None, None] + phase[None])
    return waves.sum(axis=-1) / np.sqrt(amp.shape[-1])


def synthesize(spec):
    """Draw every sample in memory. Returns (manifest_without_root, {sample_id: {mod: series}})."""
    rng = np.random.default_rng(spec.seed)
    amp, freq, phase = _class_prototypes(rng, spec.num_classes, spec.latent_dim, spec.class_separation)

    projections = []
    for mi, m in enumerate(spec.modalities):
        A = rng.normal(size=(m.channels, spec.latent_dim)) / np.sqrt(spec.latent_dim)
        if spec.latent_dim > 1:
            # each modality is blind to one latent direction
            A[:, mi % spec.latent_dim] = 0.0
        projections.append(A)

    offsets = {}
    scales = {}
    for s in range(1, spec.num_subjects + 1):
        scales[s] = rng.uniform(0.9, 1.1)
        offsets[s] = [rng.normal(0, spec.subject_bias, size=m.channels) for m in spec.modalities]

    classes = [f"activity_{k:02d}" for k in range(spec.num_classes)]
    entries, series = [], {}
    for s in range(1, spec.num_subjects + 1):
        for e in range(1, spec.num_sessions + 1):
            for k in range(spec.num_classes):
                for t in range(1, spec.trials + 1):
                    sid = f"s{s:02d}_e{e:02d}_a{k:02d}_t{t:02d}"
                    amp_jit = rng.uniform(0.8, 1.2)
                    shift = rng.uniform(-0.05, 0.05)
                    length = spec.duration * scales[s] * rng.uniform(0.95, 1.05)
                    per_mod = {}
                    for mi, m in enumerate(spec.modalities):
                        n = max(1, int(round(length * m.rate)))
                        u = np.arange(n) / m.rate / (spec.duration * scales[s]) + shift
                        z = _latent(u, amp[k], freq[k], phase[k]) * amp_jit
                        x = z @ projections[mi].T + offsets[s][mi]
                        x = x + rng.normal(0, m.noise, size=x.shape)
                        per_mod[m.name] = x
                    series[sid] = per_mod
                    files = {m.name: f"samples/{sid}/{m.name}.csv" for m in spec.modalities}
                    entries.append(SampleEntry(sid, s, e, classes[k], files))

    manifest = DatasetManifest(
        [ModalityInfo(m.name, m.channels, m.rate) for m in spec.modalities],
        classes,
        entries,
        generator=spec.to_dict(),
    )
    return manifest, series


def generate_synthetic(spec, out_dir):
    """Write a synthetic dataset to ``out_dir`` and return its manifest."""
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    manifest, series = synthesize(spec)
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for entry in manifest.samples:
            sample_dir = root / "samples" / entry.sample_id
            sample_dir.mkdir(parents=True, exist_ok=True)
            for name, rel in entry.files.items():
                (root / rel).write_text(_format_csv(series[entry.sample_id][name]), encoding="utf-8")
        write_manifest(manifest, root)
    except OSError as exc:
        raise IngestionError(f"cannot write dataset to {root}: {exc}") from exc
    manifest.root = root
    return manifest


# ---------------------------------------------------------------------------
# generalized encoding layer
# ---------------------------------------------------------------------------


def segment_and_pool(rec, window, sample_id=None):
    """Mean-pool non-overlapping windows; a trailing partial window is dropped."""
    series = rec.series if isinstance(rec, ModalityRecord) else np.atleast_2d(np.asarray(rec, dtype=np.float64))
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    n = series.shape[0]
    if n < window:
        raise IngestionError(
            f"sample {sample_id}: series of length {n} is shorter than window {window}", sample_id
        )
    p = n // window
    return series[: p * window].reshape(p, window, series.shape[1]).mean(axis=1)


def alignment_indices(n_patches, target):
    if target < 1:
        raise ConfigurationError(f"target patch count must be >= 1, got {target}")
    if n_patches <= target:
        return np.minimum(np.arange(target), n_patches - 1)
    if target == 1:
        return np.zeros(1, dtype=np.int64)
    # half-up rounding
    return np.floor(np.arange(target) * (n_patches - 1) / (target - 1) + 0.5).astype(np.int64)


def temporal_align(patches, target):
    """Subsample (longer) or right-pad with the last patch (shorter) to ``target`` patches."""
    patches = np.asarray(patches)
    return patches[alignment_indices(patches.shape[0], target)]


@dataclass
class EncodedDataset:
    modalities: list
    classes: list
    features: dict  # name -> (N, P_m, D_m) float64
    labels: np.ndarray
    sample_ids: list
    subject_ids: np.ndarray
    session_ids: np.ndarray
    windows: dict
    target_patches: dict

    def __post_init__(self):
        self._index = {sid: i for i, sid in enumerate(self.sample_ids)}

    def __len__(self):
        return len(self.sample_ids)

    def indices(self, ids):
        return np.array([self._index[i] for i in ids], dtype=np.int64)

    @property
    def num_classes(self):
        return len(self.classes)

    def shape_of(self, name):
        _, p, d = self.features[name].shape
        return p, d

    def subset_modalities(self, names):
        missing = [n for n in names if n not in self.features]
        if missing:
            raise ConfigurationError(f"unknown modalities {missing}")
        return EncodedDataset(
            list(names), self.classes, {n: self.features[n] for n in names}, self.labels,
            self.sample_ids, self.subject_ids, self.session_ids,
            {n: self.windows[n] for n in names}, {n: self.target_patches[n] for n in names},
        )


def default_window(rate, seconds=0.5):
    return max(1, int(round(rate * seconds)))


def load_encoded(root, windows=None, target_patches=None, modalities=None):
    """Read a dataset from disk and apply pooling + alignment per modality."""
    manifest = root if isinstance(root, DatasetManifest) else read_manifest(root)
    base = Path(manifest.root) if manifest.root is not None else Path(".")
    info = {m.name: m for m in manifest.modalities}
    names = list(modalities) if modalities else manifest.modality_names
    for n in names:
        if n not in info:
            raise ConfigurationError(f"modality {n!r} is not declared in the manifest")
    windows = dict(windows or {})
    targets = dict(target_patches or {})
    for n in windows:
        if n not in info:
            raise ConfigurationError(f"window given for unknown modality {n!r}")

    pooled = {n: [] for n in names}
    for entry in manifest.samples:
        for n in names:
            arr = read_series(base / entry.files[n], entry.sample_id)
            if arr.shape[1] != info[n].channels:
                raise IngestionError(
                    f"sample {entry.sample_id}: modality {n} has {arr.shape[1]} channels, "
                    f"manifest declares {info[n].channels}",
                    entry.sample_id,
                )
            w = windows.setdefault(n, default_window(info[n].rate))
            pooled[n].append(segment_and_pool(arr, w, entry.sample_id))

    features = {}
    for n in names:
        if n not in targets:
            targets[n] = int(statistics.median_low(p.shape[0] for p in pooled[n]))
        features[n] = np.stack([temporal_align(p, targets[n]) for p in pooled[n]])
        assert features[n].shape[1] == targets[n]

    class_index = {c: i for i, c in enumerate(manifest.classes)}
    return EncodedDataset(
        modalities=names,
        classes=list(manifest.classes),
        features=features,
        labels=np.array([class_index[s.label] for s in manifest.samples], dtype=np.int64),
        sample_ids=manifest.sample_ids,
        subject_ids=manifest.subject_ids,
        session_ids=manifest.session_ids,
        windows={n: windows[n] for n in names},
        target_patches={n: targets[n] for n in names},
    )


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Protocol:
    name: str
    subject: int = None
    fraction: float = None

    def __post_init__(self):
        if self.name not in PROTOCOLS:
            raise ConfigurationError(f"unknown protocol {self.name!r}; expected one of {PROTOCOLS}")
        if self.name == "loso" and self.subject is None:
            raise ConfigurationError("loso protocol needs a held-out subject")
        if self.name in ("cross_subject", "cross_session"):
            if self.fraction is None or not 0 < self.fraction < 1:
                raise ConfigurationError(f"{self.name} needs a fraction in (0, 1), got {self.fraction}")

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - {"name", "subject", "fraction"}
        if unknown:
            raise ConfigurationError(f"unknown protocol keys: {sorted(unknown)}")
        if "name" not in obj:
            raise ConfigurationError("protocol.name is required")
        return cls(**obj)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @property
    def subject_independent(self):
        return self.name in SUBJECT_INDEPENDENT


@dataclass
class SplitSpec:
    protocol: Protocol
    train_ids: tuple
    test_ids: tuple


def _first_fraction(n, fraction):
    return math.ceil(round(fraction * n, 9))


def make_split(source, protocol):
    """Partition samples of a manifest or encoded dataset per ``protocol``."""
    if isinstance(protocol, dict):
        protocol = Protocol.from_dict(protocol)
    ids = list(source.sample_ids)
    subjects = np.asarray(source.subject_ids)
    sessions = np.asarray(source.session_ids)
    all_subjects = sorted(set(subjects.tolist()))

    if protocol.name == "fifty_fifty":
        train_mask = subjects % 2 == 1
    elif protocol.name == "loso":
        if protocol.subject not in all_subjects:
            raise ConfigurationError(f"loso: subject {protocol.subject} is not in the dataset")
        train_mask = subjects != protocol.subject
    elif protocol.name == "cross_subject":
        k = _first_fraction(len(all_subjects), protocol.fraction)
        train_mask = np.isin(subjects, all_subjects[:k])
    else:
        train_mask = np.zeros(len(ids), dtype=bool)
        for s in all_subjects:
            own = subjects == s
            sess = sorted(set(sessions[own].tolist()))
            k = _first_fraction(len(sess), protocol.fraction)
            train_mask |= own & np.isin(sessions, sess[:k])

    train = tuple(i for i, m in zip(ids, train_mask) if m)
    test = tuple(i for i, m in zip(ids, train_mask) if not m)
    if not train or not test:
        raise ConfigurationError(
            f"protocol {protocol.to_dict()} leaves an empty side (train={len(train)}, test={len(test)})"
        )
    check_split(SplitSpec(protocol, train, test), source)
    return SplitSpec(protocol, train, test)


def check_split(split, source):
    train, test = set(split.train_ids), set(split.test_ids)
    assert not train & test, "train and test overlap"
    assert train | test == set(source.sample_ids), "split does not cover every sample"
    if split.protocol.subject_independent:
        subj = dict(zip(source.sample_ids, np.asarray(source.subject_ids).tolist()))
        assert not {subj[i] for i in train} & {subj[i] for i in test}, "subject leaks across split"


def loso_splits(source):
    return [make_split(source, Protocol("loso", subject=s)) for s in sorted(set(np.asarray(source.subject_ids).tolist()))]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class EncodedBatch:
    features: dict  # name -> Tensor (B, P_m, D_m)
    labels: np.ndarray
    sample_ids: list

    def __len__(self):
        return len(self.labels)


def batch_iter(dataset, split, batch_size, seed=None, epoch=0, side="train"):
    """Yield batches of one split side; the train side is reshuffled per (seed, epoch)."""
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    ids = list(split.train_ids if side == "train" else split.test_ids)
    if not ids:
        raise ConfigurationError(f"split has an empty {side} side")
    idx = dataset.indices(ids)
    if side == "train" and seed is not None:
        rng = np.random.default_rng([seed, epoch])
        idx = idx[rng.permutation(len(idx))]
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        yield EncodedBatch(
            {n: Tensor(dataset.features[n][chunk]) for n in dataset.modalities},
            dataset.labels[chunk],
            [dataset.sample_ids[i] for i in chunk],
        )


def worker_count():
    try:
        return max(1, int(os.environ.get("MMFUSE_THREADS", "1")))
    except ValueError:
        return 1
