"""Poisoned training set and triggered test set construction.

The training set keeps its order. A ``round(gamma * N)`` subset is rotated
or shifted by the trigger parameter and relabelled to the target class;
every other sample is transformed with its own parameter drawn from the
benign domain and keeps its label.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import transforms
from .dataset_io import Dataset, Split
from .rng import RngStream
from .transforms import Kind, ParamDomain, TransformSpec

log = logging.getLogger(__name__)


class PoisonConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoisonConfig:
    kind: Kind = Kind.ROTATION
    theta_star: float = 16.0
    domain_low: float = -10.0
    domain_high: float = 10.0
    gamma: float = 0.05
    target_label: int = 1
    seed: int = 0
    fill: float = 0.0
    exclude_target_class_from_selection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        if not 0.0 < self.gamma < 1.0 and self.gamma != 1.0:
            raise PoisonConfigError(f"poisoning rate {self.gamma} outside (0, 1]")
        if self.target_label < 0:
            raise PoisonConfigError(f"target label {self.target_label} is negative")
        transforms.check_parameter(self.kind, self.theta_star)
        ParamDomain(self.kind, self.domain_low, self.domain_high)
        if self.domain_low <= self.theta_star <= self.domain_high:
            log.warning(
                "trigger parameter %s lies inside the benign domain [%s, %s]; "
                "the backdoor will compete with benign augmentation",
                self.theta_star, self.domain_low, self.domain_high,
            )

    @classmethod
    def rotation(cls, **overrides) -> "PoisonConfig":
        return cls(**overrides)

    @classmethod
    def translation(cls, **overrides) -> "PoisonConfig":
        base = dict(kind=Kind.TRANSLATION, theta_star=6, domain_low=-3, domain_high=3)
        base.update(overrides)
        return cls(**base)

    @property
    def domain(self) -> ParamDomain:
        return ParamDomain(self.kind, self.domain_low, self.domain_high)

    @property
    def trigger(self) -> TransformSpec:
        return TransformSpec(self.kind, self.theta_star, self.fill)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def poison_count(n: int, gamma: float) -> int:
    """``round(gamma * n)`` with halves rounded up."""
    return int(math.floor(gamma * n + 0.5))


def select_poison_indices(dataset: Dataset, config: PoisonConfig) -> np.ndarray:
    if dataset.split is not Split.TRAIN:
        raise PoisonConfigError("poison indices are drawn from the training split only")
    if config.target_label >= dataset.num_classes:
        raise PoisonConfigError(f"target label {config.target_label} not in [0, {dataset.num_classes})")
    n = len(dataset)
    k = poison_count(n, config.gamma)
    if k == 0:
        raise PoisonConfigError(f"gamma={config.gamma} selects no samples out of N={n}")
    candidates = np.arange(n)
    if config.exclude_target_class_from_selection:
        candidates = np.flatnonzero(dataset.labels != config.target_label)
        if k > len(candidates):
            raise PoisonConfigError(f"cannot select {k} samples outside the target class ({len(candidates)} available)")
    stream = RngStream(config.seed, "select")
    picked = stream.sample_without_replacement(len(candidates), k)
    return np.sort(candidates[picked])


def benign_parameters(n: int, config: PoisonConfig) -> list[float | int]:
    """Per-sample augmentation parameter; sample ``i`` uses stream (seed, "benign", i)."""
    domain = config.domain
    return [transforms.sample_param(domain, RngStream(config.seed, "benign", i)) for i in range(n)]


def _transform_rows(images, out, rows, params, kind, fill):
    for i, p in zip(rows, params):
        spec = TransformSpec(kind, p, fill)
        out[i] = transforms.apply(spec, images[i])


def _run_chunks(work, n_items: int, threads: int) -> None:
    if threads <= 1 or n_items < 2 * threads:
        work(0, n_items)
        return
    bounds = np.linspace(0, n_items, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, bounds[t], bounds[t + 1]) for t in range(threads)]
        for f in futures:
            f.result()


def build_poisoned_dataset(dataset: Dataset, config: PoisonConfig, threads: int = 1) -> Dataset:
    """Training set for the attack. Output bytes do not depend on ``threads``."""
    selected = select_poison_indices(dataset, config)
    n = len(dataset)
    transforms.check_parameter(config.kind, config.theta_star, dataset.shape[-1])
    is_poison = np.zeros(n, dtype=bool)
    is_poison[selected] = True
    benign_rows = np.flatnonzero(~is_poison)
    params = benign_parameters(n, config)

    out = np.empty_like(dataset.images)
    out[selected] = transforms.apply(config.trigger, dataset.images[selected])

    def work(lo, hi):
        rows = benign_rows[lo:hi]
        _transform_rows(dataset.images, out, rows, [params[i] for i in rows], config.kind, config.fill)

    _run_chunks(work, len(benign_rows), threads)

    labels = dataset.labels.copy()
    labels[selected] = config.target_label
    return Dataset(out, labels, dataset.num_classes, Split.TRAIN, f"{dataset.source}|batt:{config.digest()[:12]}", is_poison)


def build_asr_test_set(test: Dataset, config: PoisonConfig, theta: float | None = None) -> Dataset:
    """Non-target test samples with the trigger applied; labels stay ground truth.

    ``theta`` overrides the trigger parameter (used by parameter sweeps).
    """
    if test.split is not Split.TEST:
        raise PoisonConfigError("the triggered evaluation set is built from the test split")
    keep = np.flatnonzero(test.labels != config.target_label)
    if keep.size == 0:
        raise PoisonConfigError(f"every test sample already has the target label {config.target_label}")
    theta = config.theta_star if theta is None else theta
    transforms.check_parameter(config.kind, theta, test.shape[-1])
    spec = TransformSpec(config.kind, theta, config.fill)
    images = transforms.apply(spec, test.images[keep])
    return Dataset(
        images,
        test.labels[keep].copy(),
        test.num_classes,
        Split.TEST,
        f"{test.source}|trigger:{config.kind.value}={theta}",
        np.ones(keep.size, dtype=bool),
    )


def build_clean_dataset(dataset: Dataset) -> Dataset:
    """The unattacked counterpart: identical samples, no flags (for clean baselines)."""
    return Dataset(dataset.images.copy(), dataset.labels.copy(), dataset.num_classes, dataset.split, dataset.source)
