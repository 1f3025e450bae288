"""Command-line entry point: ``mmfuse <command> ...``.

Commands: gen-data, train, distill, eval, ablate-tokens. Every run writes
into ``<output_dir>/<command>-<hash>`` where the hash covers the fully
resolved config, so reruns never clobber an earlier report unless
``--force`` is given.

Exit codes: 0 ok, 2 config/validation, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    Protocol,
    SyntheticSpec,
    generate_synthetic,
    load_encoded,
    loso_splits,
    make_split,
    worker_count,
)
from .distill import KDConfig, evaluate, train
from .errors import ConfigurationError, DimensionError, IngestionError, NumericError
from .model import ModalitySpec, ModelConfig, StudentModel, TeacherModel, load_checkpoint

log = logging.getLogger("mmfuse")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------


@dataclass
class ModelSettings:
    d_model: int = 64
    heads: int = 4
    mstt_layers: int = 4
    tmt_layers: int = 2
    fusion_tokens: int = 4
    ff_mult: int = 4
    student_mstt_layers: int = 1


@dataclass
class EncodingSettings:
    windows: dict = field(default_factory=dict)
    target_patches: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    dataset: str
    protocol: dict
    model: ModelSettings = field(default_factory=ModelSettings)
    kd: KDConfig = field(default_factory=KDConfig)
    output_dir: str = "runs"
    seed: int = 0
    modalities: list = None
    encoding: EncodingSettings = field(default_factory=EncodingSettings)

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigurationError("experiment config must be a JSON object")
        _reject_unknown(obj, cls, "config")
        for key in ("dataset", "protocol"):
            if key not in obj:
                raise ConfigurationError(f"config is missing required key {key!r}")
        model = obj.get("model", {})
        _reject_unknown(model, ModelSettings, "model")
        encoding = obj.get("encoding", {})
        _reject_unknown(encoding, EncodingSettings, "encoding")
        seed = obj.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigurationError(f"seed must be an integer, got {seed!r}")
        kd = dict(obj.get("kd", {}))
        if "seed" in kd and kd["seed"] != seed:
            raise ConfigurationError("kd.seed is taken from the top-level seed; drop it or make them equal")
        kd["seed"] = seed
        protocol = obj["protocol"]
        if isinstance(protocol, str):
            protocol = {"name": protocol}
        if not (protocol.get("name") == "loso" and protocol.get("subject") is None):
            Protocol.from_dict(protocol)  # validate early; a subject-less loso is only valid for eval
        cfg = cls(
            dataset=str(obj["dataset"]),
            protocol=dict(protocol),
            model=ModelSettings(**model),
            kd=KDConfig.from_dict(kd),
            output_dir=str(obj.get("output_dir", "runs")),
            seed=seed,
            modalities=list(obj["modalities"]) if obj.get("modalities") is not None else None,
            encoding=EncodingSettings(**encoding),
        )
        cfg.kd.validate()
        return cfg

    def to_dict(self):
        return asdict(self)


def _reject_unknown(obj, cls, where):
    unknown = set(obj) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {sorted(unknown)}")


def read_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(obj)


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(payload):
    return hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


class Experiment:
    """A resolved config plus the loaded dataset and derived model config."""

    def __init__(self, cfg, protocol=None):
        self.cfg = cfg
        enc = cfg.encoding
        self.dataset = load_encoded(
            cfg.dataset, windows=enc.windows, target_patches=enc.target_patches, modalities=cfg.modalities,
        )
        # materialize what the loader chose so the echo is complete
        enc.windows = dict(self.dataset.windows)
        enc.target_patches = dict(self.dataset.target_patches)
        cfg.modalities = list(self.dataset.modalities)
        self.protocol = Protocol.from_dict(protocol or cfg.protocol)
        self.split = make_split(self.dataset, self.protocol)
        self.cfg.kd = self.cfg.kd.resolve(len(self.dataset.modalities))

    def model_config(self, **override):
        ms = self.cfg.model
        mods = [ModalitySpec(n, *self.dataset.shape_of(n)) for n in self.dataset.modalities]
        base = dict(
            d_model=ms.d_model, heads=ms.heads, mstt_layers=ms.mstt_layers, tmt_layers=ms.tmt_layers,
            fusion_tokens=ms.fusion_tokens, ff_mult=ms.ff_mult,
        )
        base.update(override)
        return ModelConfig(mods, self.dataset.num_classes, **base)

    def student_config(self):
        return self.model_config(mstt_layers=self.cfg.model.student_mstt_layers)


def run_dir(cfg, command, extra, force):
    payload = {"command": command, "config": cfg.to_dict(), **extra}
    out = Path(cfg.output_dir) / f"{command}-{config_hash(payload)}"
    if out.exists():
        if not force:
            raise ConfigurationError(f"{out} already exists; rerun with --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    return out


def result_row(name, report, split_name):
    return {
        "split": split_name,
        "model": name,
        "accuracy": report["accuracy"],
        "macro_f1": report["macro_f1"],
        "per_modality_accuracy": report["per_modality_accuracy"],
        "parameter_count": report.get("parameter_count"),
    }


def write_report(out, command, cfg, results, timings, extra=None):
    report = {"command": command, "config": cfg.to_dict() if cfg is not None else None, "results": results}
    report.update(extra or {})
    report["timings"] = timings  # the only field allowed to differ between reruns
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return report


def write_confusion(path, cm, classes):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(classes))
        for c, row in zip(classes, cm):
            w.writerow([c] + [int(v) for v in row])


def write_table(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])


def _split_name(protocol):
    return "/".join(f"{k}={v}" for k, v in protocol.to_dict().items())


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    spec = SyntheticSpec()
    if args.spec:
        try:
            obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IngestionError(f"cannot read spec {args.spec}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.spec} is not valid JSON: {exc}") from None
        spec = SyntheticSpec.from_dict(obj)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.samples)} samples x {len(manifest.modalities)} modalities to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = read_config(args.config)
    exp = Experiment(cfg)
    out = run_dir(cfg, "train", {"model": args.model}, args.force)
    if args.model == "teacher":
        model = TeacherModel(exp.model_config(), seed=cfg.seed)
    else:
        model = StudentModel(exp.student_config(), seed=cfg.seed)
    report = train(model, exp.dataset, exp.split, cfg.kd, checkpoint_dir=out / "checkpoint", log=log.info)
    metrics = report.metrics()
    write_confusion(out / "confusion_matrix.csv", metrics["confusion_matrix"], exp.dataset.classes)
    write_report(
        out, "train", cfg, [result_row(args.model, metrics, _split_name(exp.protocol))],
        {"epoch_seconds": report.epoch_seconds}, {"model": args.model, "train_report": metrics},
    )
    print(f"{args.model}: accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f} -> {out}")
    return EXIT_OK


def _check_modalities(model, dataset):
    ours = {m.name: (m.patches, m.dim) for m in model.config.modalities}
    for name in dataset.modalities:
        if name not in ours:
            raise ConfigurationError(f"modality {name!r} is in the dataset but not in the checkpoint")
        if ours[name] != dataset.shape_of(name):
            raise ConfigurationError(
                f"modality {name!r}: checkpoint expects (P, D)={ours[name]}, dataset has {dataset.shape_of(name)}"
            )
    for name in ours:
        if name not in dataset.modalities:
            raise ConfigurationError(f"modality {name!r} is in the checkpoint but not in the dataset")


def cmd_distill(args):
    cfg = read_config(args.config)
    ckpt = Path(args.teacher_ckpt)
    if not (ckpt / "manifest.json").is_file():
        raise IngestionError(f"teacher checkpoint not found at {ckpt}")
    teacher = load_checkpoint(ckpt)
    exp = Experiment(cfg)
    _check_modalities(teacher, exp.dataset)
    extra = {"teacher": _file_digest(ckpt / "params.bin"), "compare_raw": bool(args.compare_raw)}
    out = run_dir(cfg, "distill", extra, args.force)
    split_name = _split_name(exp.protocol)

    timings = {}
    student = StudentModel(exp.student_config(), seed=cfg.seed, teacher=teacher)
    kd_report = train(student, exp.dataset, exp.split, cfg.kd, teacher=teacher,
                      checkpoint_dir=out / "checkpoint", log=log.info)
    timings["student_kd_epoch_seconds"] = kd_report.epoch_seconds
    kd_metrics = kd_report.metrics()
    rows = [result_row("student_kd", kd_metrics, split_name)]
    if args.compare_raw:
        t_metrics = evaluate(teacher, exp.dataset, exp.split)
        t_metrics["parameter_count"] = teacher.parameter_count()
        raw = StudentModel(exp.student_config(), seed=cfg.seed)
        raw_report = train(raw, exp.dataset, exp.split, cfg.kd, log=log.info)
        timings["student_epoch_seconds"] = raw_report.epoch_seconds
        rows = [
            result_row("teacher", t_metrics, split_name),
            result_row("student", raw_report.metrics(), split_name),
            rows[0],
        ]
        rows[2]["delta_vs_student"] = rows[2]["accuracy"] - rows[1]["accuracy"]
    write_confusion(out / "confusion_matrix.csv", kd_metrics["confusion_matrix"], exp.dataset.classes)
    write_report(out, "distill", cfg, rows, timings, {"train_report": kd_metrics, **extra})
    for r in rows:
        print(f"{r['split']}\t{r['model']}\taccuracy={r['accuracy']:.4f}\tmacro_f1={r['macro_f1']:.4f}")
    print(f"-> {out}")
    return EXIT_OK


def _parse_protocol(text):
    if text is None:
        return None
    text = text.strip()
    if text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"--protocol is not valid JSON: {exc}") from None
    return {"name": text}


def _map_parallel(fn, items):
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint) if (Path(args.checkpoint) / "manifest.json").is_file() else None
    if model is None:
        raise IngestionError(f"checkpoint not found at {args.checkpoint}")
    if args.config:
        cfg = read_config(args.config)
        dataset_path = args.dataset or cfg.dataset
        protocol = _parse_protocol(args.protocol) or cfg.protocol
        enc, mods = cfg.encoding, cfg.modalities
    else:
        if not args.dataset or not args.protocol:
            raise ConfigurationError("eval needs --config, or both --dataset and --protocol")
        cfg, dataset_path, protocol = None, args.dataset, _parse_protocol(args.protocol)
        enc, mods = EncodingSettings(), [m.name for m in model.config.modalities]
    dataset = load_encoded(dataset_path, windows=enc.windows, target_patches=enc.target_patches, modalities=mods)
    _check_modalities(model, dataset)

    if protocol.get("name") == "loso" and protocol.get("subject") is None:
        splits = loso_splits(dataset)
    else:
        splits = [make_split(dataset, Protocol.from_dict(protocol))]

    start = time.perf_counter()
    evaluated = _map_parallel(lambda s: (s, evaluate(model, dataset, s)), splits)
    evaluated.sort(key=lambda pair: _split_name(pair[0].protocol))
    seconds = time.perf_counter() - start

    names = list(dataset.modalities)
    rows = []
    for split, res in evaluated:
        row = {"fold": _split_name(split.protocol), "accuracy": res["accuracy"], "macro_f1": res["macro_f1"]}
        row.update({m: res["per_modality_accuracy"][m] for m in names})
        rows.append(row)
    if len(rows) > 1:
        mean = {"fold": "mean"}
        for key in ["accuracy", "macro_f1"] + names:
            mean[key] = float(np.mean([r[key] for r in rows]))
        rows.append(mean)
    columns = ["fold", "accuracy", "macro_f1"] + names
    total_cm = np.sum([np.array(res["confusion_matrix"]) for _, res in evaluated], axis=0)

    for r in rows:
        print("\t".join(r["fold"] if c == "fold" else f"{c}={r[c]:.4f}" for c in columns))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "eval.csv", rows, columns)
        write_confusion(out / "confusion_matrix.csv", total_cm, dataset.classes)
        write_report(out, "eval", cfg, rows, {"eval_seconds": seconds},
                     {"checkpoint": str(args.checkpoint), "protocol": protocol})
    return EXIT_OK


def _parse_tokens(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--tokens must be comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigurationError("--tokens is empty")
    if any(v < 1 for v in values):
        raise ConfigurationError("every token count must be >= 1")
    return values


def cmd_ablate_tokens(args):
    tokens = _parse_tokens(args.tokens)
    cfg = read_config(args.config)
    exp = Experiment(cfg)
    out = run_dir(cfg, "ablate-tokens", {"tokens": tokens}, args.force)
    split_name = _split_name(exp.protocol)

    def one(f):
        mc = exp.model_config(fusion_tokens=f)
        rep = train(TeacherModel(mc, seed=cfg.seed), exp.dataset, exp.split, cfg.kd)
        return f, mc, rep

    runs = sorted(_map_parallel(one, tokens), key=lambda r: r[0])
    rows, configs, timings = [], {}, {}
    for f, mc, rep in runs:
        rows.append({
            "split": split_name, "fusion_tokens": f, "accuracy": rep.accuracy,
            "macro_f1": rep.macro_f1, "parameter_count": rep.parameter_count,
        })
        configs[str(f)] = mc.to_dict()
        timings[str(f)] = rep.epoch_seconds
    columns = ["split", "fusion_tokens", "accuracy", "macro_f1", "parameter_count"]
    write_table(out / "tokens.csv", rows, columns)
    write_report(out, "ablate-tokens", cfg, rows, timings, {"model_configs": configs})
    for r in rows:
        print(f"F={r['fusion_tokens']}\taccuracy={r['accuracy']:.4f}\tmacro_f1={r['macro_f1']:.4f}")
    print(f"-> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mmfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-modal dataset")
    g.add_argument("--spec", help="JSON generator spec (defaults used when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a teacher or a raw student")
    t.add_argument("--config", required=True)
    t.add_argument("--model", choices=("teacher", "student"), required=True)
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="train a student against a frozen teacher checkpoint")
    d.add_argument("--config", required=True)
    d.add_argument("--teacher-ckpt", required=True)
    d.add_argument("--compare-raw", action="store_true", help="also report the teacher and a raw student")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="evaluate a checkpoint; LOSO without a subject runs every fold")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="experiment config supplying dataset, protocol and encoding")
    e.add_argument("--dataset")
    e.add_argument("--protocol", help="protocol name or JSON object")
    e.add_argument("--out", help="directory for eval.csv, confusion_matrix.csv and report.json")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate-tokens", help="train one teacher per fusion-token count")
    a.add_argument("--config", required=True)
    a.add_argument("--tokens", required=True, help="comma-separated list, e.g. 2,4,8,16")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate_tokens)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
