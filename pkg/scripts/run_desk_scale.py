"""Desk-scale attack run: poisoned and clean pipelines from one config, then defenses.

    python scripts/run_desk_scale.py configs/digits_rotation.json

Renders the synthetic digits first if the config's IDX files are missing.
The clean baseline goes to ``<output_dir>_clean`` with the attack disabled.
"""

import argparse
import copy
import json
import sys
from pathlib import Path

from batt import cli
from batt.config import ExperimentConfig
from batt.dataset_io import write_idx
from batt.synthetic import make_digits


def ensure_digits(cfg: ExperimentConfig) -> None:
    ds = cfg.raw["dataset"]
    if ds["format"] != "idx" or cfg.path(ds["train_images"]).exists():
        return
    for split, n, img_key, lab_key in (("train", 10000, "train_images", "train_labels"),
                                       ("test", 2000, "test_images", "test_labels")):
        images, labels = make_digits(n, 0, split)
        img_path, lab_path = cfg.path(ds[img_key]), cfg.path(ds[lab_key])
        img_path.parent.mkdir(parents=True, exist_ok=True)
        write_idx(images, labels, img_path, lab_path)
        print(f"rendered {n} {split} digits -> {img_path.parent}")


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("config", type=Path)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--skip-clean", action="store_true")
    parser.add_argument("--skip-defend", action="store_true")
    args = parser.parse_args()

    cfg = ExperimentConfig.load(args.config)
    ensure_digits(cfg)
    threads = ["--threads", str(args.threads)]
    for stage in ("poison", "train", "eval") + (() if args.skip_defend else ("defend",)):
        code = cli.main([stage, "--config", str(args.config), *threads])
        if code:
            sys.exit(code)

    if not args.skip_clean:
        raw = json.loads(args.config.read_text())
        clean = copy.deepcopy(raw)
        clean["attack"] = {**raw.get("attack", {}), "enabled": False}
        clean["output_dir"] = raw["output_dir"].rstrip("/") + "_clean"
        clean.pop("defense", None)
        clean_path = args.config.with_name(args.config.stem + ".clean.json")
        clean_path.write_text(json.dumps(clean, indent=2))
        for stage in ("poison", "train", "eval"):
            code = cli.main([stage, "--config", str(clean_path), *threads])
            if code:
                sys.exit(code)


if __name__ == "__main__":
    main()
