# The same workflow through the command-line entry point (``mmfuse ...`` or
# ``python -m mmfuse ...``). Here main() is called in-process.

import json
import tempfile
from pathlib import Path

from mmfuse.cli import main

work = Path(tempfile.mkdtemp())
spec = {"num_subjects": 4, "trials": 1, "duration": 3.0}
(work / "spec.json").write_text(json.dumps(spec))
main(["gen-data", "--spec", str(work / "spec.json"), "--out", str(work / "ds")])

config = {
    "dataset": str(work / "ds"),
    "protocol": {"name": "loso", "subject": 1},
    "model": {"d_model": 16, "heads": 2, "mstt_layers": 2, "tmt_layers": 2},
    "kd": {"epochs": 3, "batch_size": 8},
    "output_dir": str(work / "runs"),
    "seed": 0,
}
(work / "exp.json").write_text(json.dumps(config))

main(["train", "--config", str(work / "exp.json"), "--model", "teacher"])
ckpt = next((work / "runs").glob("train-*")) / "checkpoint"
main(["distill", "--config", str(work / "exp.json"), "--teacher-ckpt", str(ckpt), "--compare-raw"])
main(["eval", "--checkpoint", str(ckpt), "--config", str(work / "exp.json"), "--protocol", "loso"])
main(["ablate-tokens", "--config", str(work / "exp.json"), "--tokens", "1,2,4"])

print("\nrun directories:")
for p in sorted((work / "runs").iterdir()):
    print(" ", p.name, sorted(q.name for q in p.iterdir()))
# a second identical train call is refused (exit code 2) unless --force is given
print("rerun exit code:", main(["train", "--config", str(work / "exp.json"), "--model", "teacher"]))
