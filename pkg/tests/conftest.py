import json
import time

import pytest

from botkit.cli import main

_DESK_RUNS = {}


def desk_pipeline(root, profiles, learning_rate):
    """synth -> preprocess -> train -> eval at desk scale through the CLI; returns (metrics, seconds).

    40 subjects per class with 2 scans each, 64^3 volumes, width 1/8, 32x32
    slices, 2 folds x 5 epochs. Results are cached for the session.
    """
    key = (profiles, learning_rate)
    if key not in _DESK_RUNS:
        wd = root / f"{profiles}-{learning_rate:g}"
        conf = wd.with_suffix(".cfg")
        conf.write_text(
            "\n".join(
                [
                    "mode = desk",
                    f"workdir = {wd}",
                    "subjects_per_class = 40",
                    "scans_per_subject = 2",
                    "volume_size = 64",
                    f"profiles = {profiles}",
                    f"learning_rate = {learning_rate!r}",
                    "weight_decay = 3e-5",
                    "seed = 0",
                ]
            )
            + "\n"
        )
        start = time.perf_counter()
        for command in ("synth", "preprocess", "train", "eval"):
            assert main([command, "--config", str(conf)]) == 0, command
        seconds = time.perf_counter() - start
        _DESK_RUNS[key] = (json.loads((wd / "metrics.json").read_text()), seconds)
    return _DESK_RUNS[key]


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")
