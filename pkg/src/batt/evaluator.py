"""Benign accuracy, attack success rate, parameter sweeps and report files."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import transforms
from .dataset_io import Dataset, DatasetValidationError
from .poisoner import PoisonConfig, build_asr_test_set
from .rng import RngStream
from .trainer import TrainedModel, predict_batch
from .transforms import Kind, TransformSpec


@dataclass(frozen=True)
class SweepPoint:
    theta: float
    asr: float
    n_evaluated: int
    n_hits: int


@dataclass
class EvalReport:
    benign_accuracy: float
    attack_success_rate: float
    sweep: list[SweepPoint] = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    config_digest: str = ""
    model_digest: str = ""

    def __post_init__(self):
        for name in ("benign_accuracy", "attack_success_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        thetas = [p.theta for p in self.sweep]
        if any(b <= a for a, b in zip(thetas, thetas[1:])):
            raise ValueError("sweep parameters must be strictly increasing")

    def to_json(self) -> dict:
        return {
            "ba": self.benign_accuracy,
            "asr": self.attack_success_rate,
            "counts": self.counts,
            "sweep": [{"theta": p.theta, "asr": p.asr, "n_evaluated": p.n_evaluated, "n_hits": p.n_hits} for p in self.sweep],
            "config_digest": self.config_digest,
            "model_digest": self.model_digest,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        sweep = [SweepPoint(p["theta"], p["asr"], p.get("n_evaluated", 0), p.get("n_hits", 0)) for p in d["sweep"]]
        return cls(d["ba"], d["asr"], sweep, d.get("counts", {}), d.get("config_digest", ""), d.get("model_digest", ""))


def _predictions(model: TrainedModel, images: np.ndarray, threads: int = 1) -> np.ndarray:
    if threads <= 1 or len(images) < 2 * threads:
        return predict_batch(model, images)
    bounds = np.linspace(0, len(images), threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda t: predict_batch(model, images[bounds[t] : bounds[t + 1]]), range(threads))
        return np.concatenate(list(parts))


def benign_counts(model: TrainedModel, test: Dataset, threads: int = 1) -> tuple[int, int]:
    if len(test) == 0:
        raise DatasetValidationError("benign accuracy needs at least one sample")
    pred = _predictions(model, test.images, threads)
    return int((pred == test.labels).sum()), len(test)


def benign_accuracy(model: TrainedModel, test: Dataset, threads: int = 1) -> float:
    correct, n = benign_counts(model, test, threads)
    return correct / n


def transformed_benign_accuracy(model: TrainedModel, test: Dataset, config: PoisonConfig) -> float:
    """BA on test images each transformed by a parameter drawn from the benign domain."""
    domain = config.domain
    images = np.empty_like(test.images)
    for i in range(len(test)):
        theta = transforms.sample_param(domain, RngStream(config.seed, "benign-test", i))
        images[i] = transforms.apply(TransformSpec(config.kind, theta, config.fill), test.images[i])
    pred = predict_batch(model, images)
    return float((pred == test.labels).mean())


def asr_counts(model: TrainedModel, test: Dataset, config: PoisonConfig, theta: float | None = None,
               threads: int = 1) -> tuple[int, int]:
    triggered = build_asr_test_set(test, config, theta)
    pred = _predictions(model, triggered.images, threads)
    return int((pred == config.target_label).sum()), len(triggered)


def attack_success_rate(model: TrainedModel, test: Dataset, config: PoisonConfig, threads: int = 1) -> float:
    hits, n = asr_counts(model, test, config, None, threads)
    return hits / n


def default_grid(kind: Kind | str) -> list[float]:
    if Kind.parse(kind) is Kind.ROTATION:
        return [float(t) for t in range(-176, 181, 4)]
    return [float(t) for t in range(-16, 17)]


def theta_sweep(model: TrainedModel, test: Dataset, config: PoisonConfig, grid, threads: int = 1) -> list[SweepPoint]:
    """ASR with each grid value used in place of the trigger parameter."""
    grid = sorted(set(float(t) for t in grid))
    if not grid:
        raise ValueError("sweep grid is empty")
    for theta in grid:
        transforms.check_parameter(config.kind, theta, test.shape[-1])
    points = []
    for theta in grid:
        param = int(theta) if config.kind is Kind.TRANSLATION else theta
        hits, n = asr_counts(model, test, config, param, threads)
        points.append(SweepPoint(theta, hits / n, n, hits))
    return points


def evaluate(model: TrainedModel, test: Dataset, config: PoisonConfig, grid=None, threads: int = 1,
             config_digest: str = "", transform_benign: bool = False) -> EvalReport:
    correct, n_clean = benign_counts(model, test, threads)
    hits, n_trig = asr_counts(model, test, config, None, threads)
    counts = {"benign_evaluated": n_clean, "benign_correct": correct, "asr_evaluated": n_trig, "asr_hits": hits}
    if transform_benign:
        counts["transformed_benign_accuracy"] = transformed_benign_accuracy(model, test, config)
    sweep = theta_sweep(model, test, config, grid, threads) if grid is not None else []
    return EvalReport(correct / n_clean, hits / n_trig, sweep, counts, config_digest or config.digest(), model.digest())


def emit_report(report: EvalReport, path) -> tuple[Path, Path]:
    """Write ``<path>`` (JSON) and the sweep CSV next to it."""
    path = Path(path)
    csv_path = path.with_suffix(".sweep.csv")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            # repr-precision floats keep the round trip loss-free
            json.dump(report.to_json(), fh, indent=2)
            fh.write("\n")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["theta", "asr", "n_evaluated", "n_hits"])
            for p in report.sweep:
                writer.writerow([repr(p.theta), repr(p.asr), p.n_evaluated, p.n_hits])
    except OSError as exc:
        raise OSError(f"cannot write evaluation report to {path}: {exc}") from exc
    return path, csv_path


def read_report(path) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_json(json.load(fh))
