"""``batt`` command line: poison, train, eval, ablate, defend, verify.

Each subcommand reads one JSON experiment config and writes into its
``output_dir``::

    poisoned.battds / poisoned.manifest.json   poison
    model.ckpt / train_log.csv                 train
    report.json / report.sweep.csv             eval
    defense_fine_tune.csv / defense_prune.csv  defend
    ablation_<axis>.csv + ablation_<axis>/     ablate
    digests.json                               every command

Exit codes: 0 ok, 2 config or path problem, 3 training failure,
4 evaluation failure, 5 some ablation runs failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import dataset_io, evaluator, poisoner
from .config import ConfigError, ExperimentConfig, load_schema
from .dataset_io import FormatError
from .defenses import EvalContext, benign_subset, fine_tune_defense, prune_defense
from .nn import ShapeError, build_arch
from .trainer import TrainingError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("batt")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_EVAL, EXIT_ABLATE = 0, 2, 3, 4, 5

POISONED = "poisoned.battds"
CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train_log.csv"
REPORT = "report.json"
DIGESTS = "digests.json"


class StageError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def record_outputs(cfg: ExperimentConfig, out_dir: Path, files: list[Path]) -> None:
    """Merge ``files`` (with their sha256) and the config digests into ``digests.json``."""
    path = out_dir / DIGESTS
    data = json.loads(path.read_text()) if path.exists() else {"files": {}}
    data["config_digest"] = cfg.digest()
    data["section_digests"] = cfg.section_digests()
    for f in files:
        data["files"][f.name] = {"sha256": _sha256(f), "config_digest": cfg.digest()}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _verify_file(path: Path) -> str:
    if path.suffix == ".battds":
        return f"BATTDS ok ({dataset_io.verify_battds(path)} samples)"
    if path.suffix == ".ckpt":
        model = load_checkpoint(path)
        return f"checkpoint ok ({model.num_params} parameters)"
    return "present"


def verify_paths(paths) -> list[str]:
    """Check embedded checksums and recorded digests; returns failure messages."""
    failures = []
    for p in map(Path, paths):
        if p.is_dir():
            recorded = p / DIGESTS
            if not recorded.exists():
                failures.append(f"{p}: no {DIGESTS}")
                continue
            data = json.loads(recorded.read_text())
            for name, info in sorted(data["files"].items()):
                f = p / name
                if not f.exists():
                    failures.append(f"{f}: missing")
                    continue
                try:
                    msg = _verify_file(f)
                except (FormatError, ValueError) as exc:
                    failures.append(f"{f}: {exc}")
                    continue
                if _sha256(f) != info["sha256"]:
                    failures.append(f"{f}: sha256 differs from {DIGESTS}")
                    continue
                print(f"{f}: {msg}, digest ok")
        elif p.exists():
            try:
                print(f"{p}: {_verify_file(p)}")
            except (FormatError, ValueError) as exc:
                failures.append(f"{p}: {exc}")
        else:
            failures.append(f"{p}: does not exist")
    return failures


# --------------------------------------------------------------------------- stages


def run_poison(cfg: ExperimentConfig, threads: int = 1, out_dir: Path | None = None) -> Path:
    out_dir = out_dir or cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, _ = cfg.load_datasets()
    pc = cfg.poison
    if cfg.attack_enabled:
        poisoned = poisoner.build_poisoned_dataset(train_set, pc, threads=threads)
    else:
        poisoned = poisoner.build_clean_dataset(train_set)
    path = out_dir / POISONED
    manifest = {
        "attack_enabled": cfg.attack_enabled,
        "poison_config": pc.to_dict(),
        "poison_config_digest": pc.digest(),
        "config_digest": cfg.digest(),
        "source": train_set.source,
        "num_samples": len(poisoned),
        "num_poisoned": int(poisoned.poisoned.sum()),
        "num_classes": poisoned.num_classes,
        "dataset_digest": poisoned.digest(),
    }
    dataset_io.write_battds(poisoned, path, manifest)
    record_outputs(cfg, out_dir, [path, dataset_io.manifest_path(path)])
    print(f"poisoned {manifest['num_poisoned']} of {manifest['num_samples']} samples -> {path}")
    print(f"dataset digest {manifest['dataset_digest']}")
    return path


def run_train(cfg: ExperimentConfig, dataset_path: Path | None = None, out_dir: Path | None = None) -> Path:
    out_dir = out_dir or cfg.output_dir
    dataset_path = dataset_path or out_dir / POISONED
    if not dataset_path.exists():
        raise FileNotFoundError(f"training set not found: {dataset_path} (run `batt poison` first)")
    data = dataset_io.read_battds(dataset_path)
    arch = build_arch(cfg.arch_name, data.shape, data.num_classes)
    try:
        model = train(data, arch, cfg.hyper)
    except TrainingError as exc:
        raise StageError(f"training diverged in epoch {exc.epoch}: {exc}", EXIT_TRAIN) from exc
    model.metadata["experiment_digest"] = cfg.digest()
    model.metadata["train_file"] = str(dataset_path.name)
    ckpt = out_dir / CHECKPOINT
    save_checkpoint(model, ckpt)
    log_path = out_dir / TRAIN_LOG
    hp = cfg.hyper
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss"])
        for epoch, loss in enumerate(model.loss_history):
            writer.writerow([epoch, repr(hp.lr_at(epoch)), repr(loss)])
    record_outputs(cfg, out_dir, [ckpt, log_path])
    print(f"trained {model.epochs_done} epochs, final loss {model.loss_history[-1]:.5f} -> {ckpt}")
    print(f"model digest {model.digest()}")
    return ckpt


def _load_model_for(cfg: ExperimentConfig, checkpoint: Path, test):
    model = load_checkpoint(checkpoint)
    if model.arch.num_classes != test.num_classes or tuple(model.arch.input_shape) != tuple(test.shape):
        raise StageError(
            f"checkpoint expects {model.arch.num_classes} classes of shape {tuple(model.arch.input_shape)}, "
            f"dataset has {test.num_classes} classes of shape {test.shape}",
            EXIT_EVAL,
        )
    return model


def run_eval(cfg: ExperimentConfig, checkpoint: Path | None = None, threads: int = 1,
             out_dir: Path | None = None) -> evaluator.EvalReport:
    out_dir = out_dir or cfg.output_dir
    checkpoint = checkpoint or out_dir / CHECKPOINT
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    _, test = cfg.load_datasets()
    model = _load_model_for(cfg, checkpoint, test)
    try:
        report = evaluator.evaluate(
            model, test, cfg.poison, cfg.sweep_grid(), threads, cfg.digest(), cfg.raw["eval"]["transform_benign"]
        )
    except (ValueError, ShapeError) as exc:
        raise StageError(f"evaluation failed: {exc}", EXIT_EVAL) from exc
    json_path, csv_path = evaluator.emit_report(report, out_dir / REPORT)
    record_outputs(cfg, out_dir, [json_path, csv_path])
    print(f"BA {report.benign_accuracy:.4f}  ASR {report.attack_success_rate:.4f}  ({len(report.sweep)} sweep points) -> {json_path}")
    return report


def run_defend(cfg: ExperimentConfig, checkpoint: Path | None = None, threads: int = 1) -> list[Path]:
    out_dir = cfg.output_dir
    section = cfg.defense
    if not section or not any(section.get(k) is not None for k in ("fine_tune", "prune")):
        log.warning("no defenses configured; nothing to do")
        return []
    checkpoint = checkpoint or out_dir / CHECKPOINT
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    train_set, test = cfg.load_datasets()
    model = _load_model_for(cfg, checkpoint, test)
    ctx = EvalContext(test, cfg.poison, threads)
    written = []
    if section.get("fine_tune") is not None:
        ft = section["fine_tune"]
        subset = benign_subset(train_set, ft.get("fraction", 0.05), ft.get("seed", 0))
        curve = fine_tune_defense(model, subset, ft.get("epochs", 30), ctx, ft.get("lr"), ft.get("seed", 0))
        written.append(curve.write_csv(out_dir / "defense_fine_tune.csv"))
        last = curve.points[-1]
        print(f"fine-tune: {len(curve)} points, final BA {last.ba:.4f} ASR {last.asr:.4f}")
    if section.get("prune") is not None:
        pr = section["prune"]
        rates = pr.get("rates", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95])
        holdout = benign_subset(train_set, pr.get("fraction", 0.05), pr.get("seed", 0))
        curve = prune_defense(model, holdout, rates, ctx)
        written.append(curve.write_csv(out_dir / "defense_prune.csv"))
        print(f"prune: {len(curve)} rates evaluated")
    record_outputs(cfg, out_dir, written)
    return written


def run_ablate(cfg: ExperimentConfig, axis: str, threads: int = 1) -> tuple[Path, int]:
    values = cfg.raw.get("ablation", {}).get(axis)
    if not values:
        raise ConfigError(f"config has no ablation.{axis} values")
    root = cfg.output_dir / f"ablation_{axis}"
    rows, failures = [], 0
    for value in values:
        run_dir = root / f"{axis}={value}"
        try:
            sub = cfg.with_overrides(**{axis: value})
            run_dir.mkdir(parents=True, exist_ok=True)
            run_poison(sub, threads, run_dir)
            run_train(sub, out_dir=run_dir)
            report = run_eval(sub, threads=threads, out_dir=run_dir)
            rows.append([value, repr(report.benign_accuracy), repr(report.attack_success_rate), ""])
        except Exception as exc:  # one failed run must not stop the loop
            failures += 1
            log.error("ablation %s=%s failed: %s", axis, value, exc)
            rows.append([value, "", "", str(exc)])
    out = cfg.output_dir / f"ablation_{axis}.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "ba", "asr", "error"])
        writer.writerows(rows)
    record_outputs(cfg, cfg.output_dir, [out])
    print(f"ablation over {axis}: {len(values) - failures} ok, {failures} failed -> {out}")
    return out, failures


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batt", description="Transformation-trigger backdoor toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, type=Path, help="experiment JSON")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, help="override attack.seed")
        p.add_argument("--verify", action="store_true", help="re-check checksums of the outputs")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path)

    common(sub.add_parser("poison", help="build and store the poisoned training set"))
    p = sub.add_parser("train", help="train on the stored training set")
    common(p)
    p.add_argument("--dataset", type=Path, help="BATTDS file to train on instead of the poisoned set")
    common(sub.add_parser("eval", help="BA, ASR and parameter sweep"), checkpoint=True)
    p = sub.add_parser("ablate", help="repeat poison/train/eval over one config axis")
    common(p)
    p.add_argument("--axis", required=True, choices=["theta_star", "target_label"])
    common(sub.add_parser("defend", help="fine-tuning / pruning curves"), checkpoint=True)
    p = sub.add_parser("verify", help="check embedded checksums and recorded digests")
    p.add_argument("paths", nargs="+", type=Path)
    sub.add_parser("schema", help="print the experiment config JSON Schema")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "schema":
        print(json.dumps(load_schema(), indent=2))
        return EXIT_OK
    if args.command == "verify":
        failures = verify_paths(args.paths)
        for f in failures:
            print(f"FAIL {f}", file=sys.stderr)
        return EXIT_CONFIG if failures else EXIT_OK

    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        code = EXIT_OK
        if args.command == "poison":
            run_poison(cfg, args.threads)
        elif args.command == "train":
            run_train(cfg, args.dataset)
        elif args.command == "eval":
            run_eval(cfg, args.checkpoint, args.threads)
        elif args.command == "defend":
            run_defend(cfg, args.checkpoint, args.threads)
        elif args.command == "ablate":
            _, failed = run_ablate(cfg, args.axis, args.threads)
            code = EXIT_ABLATE if failed else EXIT_OK
        if args.verify:
            failures = verify_paths([cfg.output_dir])
            if failures:
                for f in failures:
                    print(f"FAIL {f}", file=sys.stderr)
                return EXIT_CONFIG
        return code
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, FileNotFoundError, FormatError, poisoner.PoisonConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL if args.command in ("eval", "defend") else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
