"""Ready-made desk-scale comparison protocols, written out as config files.

``python -m drkd.experiments OUTDIR [blobs|idx]`` writes run configs and a
manifest that ``drkd compare`` can execute: baseline, LSR, normal KD with a
larger fully-trained teacher, Tf-KD-self and DR-KD with an under-trained
self-teacher.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from .data import synth_glyphs, write_idx

SEEDS = [0, 1, 2, 3, 4]
TAU, ALPHA = 20.0, 0.95

PROTOCOLS = {
    "blobs": {
        "data": {"kind": "blobs", "classes": 10, "dim": 16, "n_per_class": 60,
                 "test_n_per_class": 500, "spread": 1.5, "seed": 0},
        "batch": {"batch_size": 32},
        "epochs": 30,
        "teacher_epochs": 3,
    },
    "idx": {
        "data": {"kind": "idx", "train_images": "train-images.idx3-ubyte",
                 "train_labels": "train-labels.idx1-ubyte", "test_images": "test-images.idx3-ubyte",
                 "test_labels": "test-labels.idx1-ubyte", "class_count": 10},
        "batch": {"batch_size": 64},
        "epochs": 20,
        "teacher_epochs": 2,
    },
}
STUDENT = {"kind": "mlp", "hidden": [64, 32]}
LARGE = {"kind": "mlp", "hidden": [256, 128]}


def write_glyph_corpus(root, n: int = 5000, n_test: int = 1000, seed: int = 0) -> None:
    """Synthetic MNIST-shaped corpus split into IDX train/test files."""
    root = Path(root)
    images, labels = synth_glyphs(seed, n)
    cut = n - n_test
    write_idx(images[:cut], labels[:cut], root / "train-images.idx3-ubyte", root / "train-labels.idx1-ubyte")
    write_idx(images[cut:], labels[cut:], root / "test-images.idx3-ubyte", root / "test-labels.idx1-ubyte")


def write_protocol(root, corpus: str = "blobs", seeds=SEEDS) -> Path:
    """Write configs and ``manifest.json`` under ``root``; returns the manifest path."""
    proto = PROTOCOLS[corpus]
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if corpus == "idx":
        write_glyph_corpus(root)
    optim = {"learning_rate": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "epochs": proto["epochs"]}

    def config(name, framework, model=STUDENT, epochs=None):
        o = dict(optim, epochs=epochs) if epochs is not None else optim
        cfg = {"name": name, "model": model, "data": proto["data"], "batch": proto["batch"], "optim": o,
               "distill": {"framework": framework, "tau": TAU, "alpha": ALPHA, "lsr_epsilon": 0.1}}
        (root / f"{name}.json").write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
        return f"{name}.json"

    manifest = {
        "name": f"desk-scale comparison ({corpus})",
        "seeds": list(seeds),
        "output_dir": "runs",
        "teachers": {
            "self": config("teacher_self", "baseline", epochs=proto["teacher_epochs"]),
            "large": config("teacher_large", "baseline", model=LARGE),
        },
        "arms": {
            "baseline": config("baseline", "baseline"),
            "lsr": config("lsr", "lsr"),
            "normal_kd": {"config": config("normal_kd", "normal_kd"), "teacher": "large"},
            "tfkd_self": {"config": config("tfkd_self", "tfkd_self"), "teacher": "self"},
            "drkd": {"config": config("drkd", "drkd"), "teacher": "self"},
        },
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


if __name__ == "__main__":
    if len(sys.argv) not in (2, 3):
        sys.exit("usage: python -m drkd.experiments OUTDIR [blobs|idx]")
    print(write_protocol(sys.argv[1], sys.argv[2] if len(sys.argv) == 3 else "blobs"))
