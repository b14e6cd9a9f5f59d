"""Run the whole CLI pipeline on a small synthetic cohort.

Defaults are shrunk (20 subjects per class, 3 epochs, 1 fold) so the whole
thing takes under a minute on one core. Pass a work directory to keep the
artifacts; otherwise a temporary one is used.

    python demos/desk_pipeline.py [workdir]
"""

import json
import sys
import tempfile
from pathlib import Path

from botkit.cli import main

workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="botkit-demo-"))
workdir.mkdir(parents=True, exist_ok=True)
cfg = workdir / "demo.cfg"
cfg.write_text(
    "\n".join(
        [
            "mode = desk",
            f"workdir = {workdir}",
            "subjects_per_class = 20",
            "scans_per_subject = 2",
            "volume_size = 64",
            "epochs = 3",
            "folds = 1",
            "learning_rate = 1e-3",
        ]
    )
)

for cmd in ("synth", "preprocess", "train", "eval"):
    code = main([cmd, "--config", str(cfg)])
    print(f"{cmd:<10} exit {code}")
    if code:
        sys.exit(code)

main(["report", "--config", str(cfg)])
metrics = json.loads((workdir / "metrics.json").read_text())
print("artifacts in", workdir)
print(json.dumps({k: metrics[k] for k in sorted(metrics) if not isinstance(metrics[k], (dict, list))}, indent=2))
