"""Teacher and student networks for multi-modal activity recognition.

Each modality gets two transformer streams over its patch matrix X (B, P, D):
a temporal stream over the P patch vectors and a spatial stream over the D
transposed channel rows (with sinusoidal positions). Both prepend a learned
class token. The teacher additionally exchanges information between every
pair of temporal streams through a small set of shared fusion tokens.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigurationError, DimensionError, IngestionError
from .tensor import Tensor


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    patches: int
    dim: int


@dataclass
class ModelConfig:
    modalities: list
    num_classes: int
    d_model: int = 64
    heads: int = 4
    mstt_layers: int = 4
    tmt_layers: int = 2
    fusion_tokens: int = 4
    ff_mult: int = 4

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities]
        if not self.modalities:
            raise ConfigurationError("model needs at least one modality")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.mstt_layers < 1:
            raise ConfigurationError("mstt_layers must be >= 1")
        for m in self.modalities:
            if m.patches < 1 or m.dim < 1:
                raise ConfigurationError(f"modality {m.name}: patches and dim must be >= 1")

    @property
    def num_modalities(self):
        return len(self.modalities)

    @property
    def pairs(self):
        return list(itertools.combinations(range(self.num_modalities), 2))

    def student(self, mstt_layers=1):
        return replace(self, mstt_layers=mstt_layers)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


@dataclass
class StreamParams:
    proj: nn.LinearParams
    cls_token: Tensor
    layers: list
    head_gain: Tensor  # layer norm applied to the class token before the head
    head_shift: Tensor
    head: nn.LinearParams

    def named_parameters(self, prefix):
        out = {f"{prefix}/cls_token": self.cls_token}
        out.update(self.proj.named_parameters(f"{prefix}/proj"))
        out.update(nn.stack_parameters(self.layers, f"{prefix}/encoder"))
        out[f"{prefix}/head_norm/gain"] = self.head_gain
        out[f"{prefix}/head_norm/shift"] = self.head_shift
        out.update(self.head.named_parameters(f"{prefix}/head"))
        return out


@dataclass
class ModalityParams:
    temporal: StreamParams
    spatial: StreamParams
    pos: Tensor  # constant (D+1, P)


@dataclass
class PairParams:
    pair: tuple
    raw_side: int  # 0 or 1: which stream receives the unprojected tokens
    tokens: Tensor  # (F, d_model)
    bridge: nn.LinearParams
    layers: tuple  # (layers for pair[0], layers for pair[1])

    def named_parameters(self, prefix):
        out = {f"{prefix}/tokens": self.tokens}
        out.update(self.bridge.named_parameters(f"{prefix}/bridge"))
        out.update(nn.stack_parameters(self.layers[0], f"{prefix}/stream0"))
        out.update(nn.stack_parameters(self.layers[1], f"{prefix}/stream1"))
        return out


def spatial_positions(n_rows, width):
    """Position table for the spatial stream; odd widths drop the last column."""
    return nn.positional_encoding(n_rows, width + width % 2).data[:, :width]


def _init_stream(rng, in_dim, cfg, n_layers):
    d = cfg.d_model
    return StreamParams(
        proj=nn.LinearParams.init(rng, in_dim, d),
        cls_token=T.parameter(rng.normal(0, 0.02, size=in_dim)),
        layers=nn.init_stack(rng, n_layers, d, cfg.heads, cfg.ff_mult * d),
        head_gain=T.parameter(np.ones(d)),
        head_shift=T.parameter(np.zeros(d)),
        head=nn.LinearParams.init(rng, d, cfg.num_classes),
    )


class DMFTNet:
    """Shared machinery; use :class:`TeacherModel` or :class:`StudentModel`."""

    role = "base"

    def __init__(self, config, seed=0, enable_tmt=False):
        self.config = config
        self.enable_tmt = enable_tmt
        rng = np.random.default_rng(seed)
        self.modalities = []
        for m in config.modalities:
            temporal = _init_stream(rng, m.dim, config, config.mstt_layers)
            spatial = _init_stream(rng, m.patches, config, config.mstt_layers)
            pos = Tensor(spatial_positions(m.dim + 1, m.patches))
            self.modalities.append(ModalityParams(temporal, spatial, pos))
        self.fusion = []
        if enable_tmt:
            if config.num_modalities < 2:
                raise ConfigurationError("temporal mid-fusion needs at least 2 modalities")
            if config.fusion_tokens < 1:
                raise ConfigurationError("fusion_tokens must be >= 1 when mid-fusion is enabled")
            if config.tmt_layers < 1:
                raise ConfigurationError("tmt_layers must be >= 1 when mid-fusion is enabled")
            d = config.d_model
            for a, b in config.pairs:
                dims = (config.modalities[a].dim, config.modalities[b].dim)
                self.fusion.append(PairParams(
                    pair=(a, b),
                    raw_side=0 if dims[0] <= dims[1] else 1,
                    tokens=T.parameter(rng.normal(0, 0.02, size=(config.fusion_tokens, d))),
                    bridge=nn.LinearParams.init(rng, d, d),
                    layers=tuple(
                        nn.init_stack(rng, config.tmt_layers, d, config.heads, config.ff_mult * d)
                        for _ in range(2)
                    ),
                ))

    def named_parameters(self):
        out = {}
        for spec, p in zip(self.config.modalities, self.modalities):
            out.update(p.temporal.named_parameters(f"mod/{spec.name}/temporal"))
            out.update(p.spatial.named_parameters(f"mod/{spec.name}/spatial"))
        names = [m.name for m in self.config.modalities]
        for fp in self.fusion:
            a, b = fp.pair
            out.update(fp.named_parameters(f"tmt/{names[a]}+{names[b]}"))
        return dict(sorted(out.items()))

    def parameters(self):
        return list(self.named_parameters().values())

    def parameter_count(self):
        return nn.count_parameters(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def __call__(self, features):
        return forward(self, features)


class TeacherModel(DMFTNet):
    role = "teacher"

    def __init__(self, config, seed=0, enable_tmt=True):
        super().__init__(config, seed, enable_tmt=enable_tmt)


class StudentModel(DMFTNet):
    role = "student"

    def __init__(self, config, seed=0, teacher=None):
        super().__init__(config, seed, enable_tmt=False)
        if teacher is not None:
            ours, theirs = self.parameter_count(), teacher.parameter_count()
            if ours >= theirs:
                raise ConfigurationError(
                    f"student has {ours} parameters, not fewer than the teacher's {theirs}"
                )


@dataclass
class StreamOutputs:
    spatial_cls: list = field(default_factory=list)
    temporal_cls: list = field(default_factory=list)
    spatial_logits: list = field(default_factory=list)
    temporal_logits: list = field(default_factory=list)
    spatial_probs: list = field(default_factory=list)
    temporal_probs: list = field(default_factory=list)
    modality_scores: list = field(default_factory=list)  # Y_m, mass 2 per row
    ensemble: Tensor = None  # normalized, rows sum to 1
    predictions: np.ndarray = None


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def raw_streams(X, params):
    """Token sequences before the input projection: (spatial, temporal)."""
    b, p, d = X.shape
    cls_t = T.expand(T.reshape(params.temporal.cls_token, (1, 1, d)), (b, 1, d))
    temporal = T.concat_axis([cls_t, X], axis=1)
    cls_s = T.expand(T.reshape(params.spatial.cls_token, (1, 1, p)), (b, 1, p))
    spatial = T.concat_axis([cls_s, T.transpose_last2(X)], axis=1) + params.pos
    return spatial, temporal


def prepare_streams(X, params):
    if X.ndim != 3:
        raise DimensionError(f"expected (B, P, D) features, got {X.shape}")
    spatial, temporal = raw_streams(X, params)
    return nn.linear(spatial, params.spatial.proj), nn.linear(temporal, params.temporal.proj)


def _ordered_features(model, features):
    names = [m.name for m in model.config.modalities]
    if isinstance(features, dict):
        missing = [n for n in names if n not in features]
        if missing:
            raise ConfigurationError(f"missing modalities {missing}")
        features = [features[n] for n in names]
    if len(features) != len(names):
        raise ConfigurationError(f"expected {len(names)} modalities, got {len(features)}")
    out = []
    for spec, X in zip(model.config.modalities, features):
        X = T.as_tensor(X)
        if X.shape[1:] != (spec.patches, spec.dim):
            raise DimensionError(
                f"modality {spec.name}: expected (B, {spec.patches}, {spec.dim}), got {X.shape}"
            )
        out.append(X)
    return out


def mstt_forward(model, features):
    """Independent spatial and temporal encoder stacks per modality."""
    out = []
    for X, p in zip(_ordered_features(model, features), model.modalities):
        spatial, temporal = prepare_streams(X, p)
        out.append((nn.encoder_stack(spatial, p.spatial.layers), nn.encoder_stack(temporal, p.temporal.layers)))
    return out


def tmt_fuse_pair(h_a, h_b, fp):
    """Run one pair of temporal streams through the fusion-token layers."""
    f = fp.tokens.shape[0]
    if f < 1:
        raise ConfigurationError("fusion token count must be >= 1")
    b = h_a.shape[0]
    tokens = T.expand(T.reshape(fp.tokens, (1,) + fp.tokens.shape), (b,) + fp.tokens.shape)
    streams = [h_a, h_b]
    for layer_a, layer_b in zip(*fp.layers):
        side_tokens = [tokens, tokens]
        side_tokens[1 - fp.raw_side] = nn.linear(tokens, fp.bridge)
        new = []
        for side, layer in enumerate((layer_a, layer_b)):
            joined = T.concat_axis([side_tokens[side], streams[side]], axis=1)
            new.append(nn.encoder_layer(joined, layer))
        n = [s.shape[1] for s in streams]
        tokens = (T.slice_axis(new[0], 1, 0, f) + T.slice_axis(new[1], 1, 0, f)) * 0.5
        streams = [T.slice_axis(new[i], 1, f, f + n[i]) for i in range(2)]
    return streams[0], streams[1], tokens


def tmt_aggregate(pair_outputs, num_modalities):
    """Average each modality's fused temporal stream over the pairs containing it.

    ``pair_outputs`` maps (a, b) -> (fused stream a, fused stream b).
    """
    if num_modalities < 2:
        raise ConfigurationError("mid-fusion aggregation needs at least 2 modalities")
    expected = set(itertools.combinations(range(num_modalities), 2))
    if set(pair_outputs) != expected:
        raise ConfigurationError(f"expected outputs for pairs {sorted(expected)}, got {sorted(pair_outputs)}")
    gathered = [[] for _ in range(num_modalities)]
    for (a, b), (ha, hb) in sorted(pair_outputs.items()):
        gathered[a].append(ha)
        gathered[b].append(hb)
    out = []
    for copies in gathered:
        if len(copies) == 1:
            out.append(copies[0])
            continue
        total = copies[0]
        for c in copies[1:]:
            total = total + c
        out.append(total * (1.0 / len(copies)))
    return out


def modality_head(spatial_cls, temporal_cls, params):
    """Per-stream logits and probabilities plus their sum Y_m.

    Each class token is layer-normalized before its linear head. Without the
    norm, a stream whose softmax saturates on a wrong class gets almost no
    gradient from the ensemble loss and can stay collapsed for good.
    """
    s, t = params.spatial, params.temporal
    s_logits = nn.linear(T.layer_norm(spatial_cls, s.head_gain, s.head_shift), s.head)
    t_logits = nn.linear(T.layer_norm(temporal_cls, t.head_gain, t.head_shift), t.head)
    s_probs = T.softmax_lastdim(s_logits)
    t_probs = T.softmax_lastdim(t_logits)
    return s_logits, t_logits, s_probs, t_probs, s_probs + t_probs


def ensemble_predict(scores):
    """Average Y_m over modalities (normalized to sum 1) and take the argmax."""
    if not scores:
        raise ConfigurationError("ensemble needs at least one modality output")
    total = scores[0]
    for y in scores[1:]:
        total = total + y
    probs = total * (1.0 / (2 * len(scores)))
    return probs, np.argmax(probs.data, axis=-1)


def _cls(seq):
    b, _, d = seq.shape
    return T.reshape(T.slice_axis(seq, 1, 0, 1), (b, d))


def forward(model, features):
    streams = mstt_forward(model, features)
    temporal = [t for _, t in streams]
    if model.enable_tmt:
        fused = {}
        for fp in model.fusion:
            a, b = fp.pair
            ha, hb, _ = tmt_fuse_pair(temporal[a], temporal[b], fp)
            fused[(a, b)] = (ha, hb)
        temporal = tmt_aggregate(fused, model.config.num_modalities)

    out = StreamOutputs()
    for (spatial, _), t_seq, p in zip(streams, temporal, model.modalities):
        s_cls, t_cls = _cls(spatial), _cls(t_seq)
        s_logits, t_logits, s_probs, t_probs, y = modality_head(s_cls, t_cls, p)
        out.spatial_cls.append(s_cls)
        out.temporal_cls.append(t_cls)
        out.spatial_logits.append(s_logits)
        out.temporal_logits.append(t_logits)
        out.spatial_probs.append(s_probs)
        out.temporal_probs.append(t_probs)
        out.modality_scores.append(y)
    out.ensemble, out.predictions = ensemble_predict(out.modality_scores)
    return out


def teacher_forward(model, batch):
    # enable_tmt=False gives the late-fusion-only ablation
    return forward(model, getattr(batch, "features", batch))


def student_forward(model, batch):
    if model.enable_tmt:
        raise ConfigurationError("student_forward called on a model with mid-fusion enabled")
    return forward(model, getattr(batch, "features", batch))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "mmfuse-checkpoint"


def save_checkpoint(model, path):
    """Write manifest.json + params.bin (little-endian float32, row-major)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    slots, blobs, offset = [], [], 0
    for name, t in model.named_parameters().items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        slots.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "role": model.role,
        "enable_tmt": model.enable_tmt,
        "config": model.config.to_dict(),
        "slots": slots,
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        raw = (path / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"checkpoint at {path} is incomplete: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not an mmfuse checkpoint")
    config = ModelConfig.from_dict(manifest["config"])
    if manifest["role"] == "teacher":
        with T.precision(np.float32):
            model = TeacherModel(config, enable_tmt=manifest["enable_tmt"])
    else:
        with T.precision(np.float32):
            model = StudentModel(config)
    named = model.named_parameters()
    listed = [s["name"] for s in manifest["slots"]]
    if sorted(listed) != list(named):
        raise ConfigurationError(f"checkpoint slots do not match the model layout at {path}")
    for slot in manifest["slots"]:
        n = int(np.prod(slot["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=slot["offset"]).reshape(slot["shape"])
        named[slot["name"]].data = arr.astype(np.float32)
    return model
