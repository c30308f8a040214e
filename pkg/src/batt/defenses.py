"""Fine-tuning and activation-based channel pruning, scored by BA and ASR."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import Dataset
from .evaluator import asr_counts, benign_counts
from .nn import Conv2D, Dense, Flatten, Network
from .poisoner import PoisonConfig
from .rng import RngStream
from .trainer import TrainedModel, continue_training


@dataclass(frozen=True)
class DefensePoint:
    parameter: float
    ba: float
    asr: float


@dataclass
class DefenseCurve:
    kind: str
    points: list[DefensePoint] = field(default_factory=list)

    def append(self, parameter, ba, asr) -> None:
        if self.points and parameter <= self.points[-1].parameter:
            raise ValueError("defense parameters must be strictly increasing")
        if not (0 <= ba <= 1 and 0 <= asr <= 1):
            raise ValueError(f"metrics outside [0, 1]: ba={ba}, asr={asr}")
        self.points.append(DefensePoint(parameter, ba, asr))

    def __len__(self) -> int:
        return len(self.points)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "parameter", "ba", "asr"])
            for p in self.points:
                writer.writerow([self.kind, repr(p.parameter), repr(p.ba), repr(p.asr)])
        return path

    @classmethod
    def read_csv(cls, path) -> "DefenseCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        curve = cls(rows[0]["kind"] if rows else "")
        for r in rows:
            curve.append(float(r["parameter"]), float(r["ba"]), float(r["asr"]))
        return curve


@dataclass
class EvalContext:
    """What a defense is scored against: clean test split and the attack used."""

    test: Dataset
    config: PoisonConfig
    threads: int = 1

    def score(self, model: TrainedModel) -> tuple[float, float]:
        correct, n = benign_counts(model, self.test, self.threads)
        hits, m = asr_counts(model, self.test, self.config, None, self.threads)
        return correct / n, hits / m


def benign_subset(train: Dataset, fraction: float = 0.05, seed: int = 0) -> Dataset:
    """Uniform ``fraction`` of a clean training set (the defender's data)."""
    k = max(1, int(math.floor(fraction * len(train) + 0.5)))
    idx = np.sort(RngStream(seed, "defense-subset").sample_without_replacement(len(train), k))
    return train.subset(idx, f"{train.source}[defense {fraction:g}]")


def fine_tune_defense(model: TrainedModel, benign: Dataset, max_epochs: int, ctx: EvalContext,
                      lr: float | None = None, shuffle_seed: int = 0) -> DefenseCurve:
    if max_epochs < 1:
        raise ValueError(f"max_epochs must be at least 1, got {max_epochs}")
    lr = 0.1 * model.hyper.lr if lr is None else lr
    curve = DefenseCurve("fine_tune")
    curve.append(0, *ctx.score(model))
    current = model
    for epoch in range(1, max_epochs + 1):
        current = continue_training(current, benign, 1, lr=lr, reset_momentum=(epoch == 1), shuffle_seed=shuffle_seed)
        curve.append(epoch, *ctx.score(current))
    return curve


# --------------------------------------------------------------------------- pruning


@dataclass(frozen=True)
class Channel:
    layer: int  # index into Network.layers of the conv layer
    channel: int


def channel_activations(model: TrainedModel, holdout: Dataset, batch_size: int = 500) -> dict[int, np.ndarray]:
    """Mean absolute post-ReLU activation of every conv channel over ``holdout``."""
    net = model.network()
    conv_idx = net.conv_layer_indices()
    sums = {li: np.zeros(net.layers[li].out_shape[0]) for li in conv_idx}
    for start in range(0, len(holdout), batch_size):
        x = holdout.images[start : start + batch_size].astype(net.dtype)
        for li, layer in enumerate(net.layers):
            x = layer.forward(x, False)
            if li - 1 in sums and not isinstance(layer, Conv2D):
                # the layer right after a conv is its activation
                sums[li - 1] += np.abs(x).sum(axis=(0, 2, 3))
    n = len(holdout)
    for li in conv_idx:
        layer = net.layers[li]
        sums[li] /= n * layer.out_shape[1] * layer.out_shape[2]
    return sums


def rank_channels(activations: dict[int, np.ndarray]) -> list[Channel]:
    """Global pruning order: within-layer activation rank normalised to [0, 1), lowest first."""
    keyed = []
    for li, act in activations.items():
        order = np.argsort(act, kind="stable")
        for rank, ch in enumerate(order):
            keyed.append((rank / len(act), li, int(ch)))
    keyed.sort()
    return [Channel(li, ch) for _, li, ch in keyed]


def _consumer(net: Network, conv_layer: int):
    """Next parameterised layer after ``conv_layer`` and the per-channel column block width."""
    block = 1
    for layer in net.layers[conv_layer + 1 :]:
        if isinstance(layer, Flatten):
            block = int(np.prod(layer.in_shape[1:]))
        elif isinstance(layer, (Conv2D, Dense)):
            return layer, block
    raise ValueError(f"conv layer {conv_layer} has no downstream parameterised layer")


def mask_channels(model: TrainedModel, channels) -> TrainedModel:
    """Copy of ``model`` with the outgoing weights of ``channels`` set to zero."""
    pruned = model.copy()
    net = pruned.network()
    for ch in channels:
        consumer, block = _consumer(net, ch.layer)
        w = consumer.p["weight"]
        if isinstance(consumer, Conv2D):
            w[:, ch.channel] = 0
        else:
            w[:, ch.channel * block : (ch.channel + 1) * block] = 0
    pruned.params = net.params.copy()
    pruned.velocity = None
    return pruned


def masked_count(rate: float, total: int) -> int:
    return int(math.floor(rate * total + 0.5))


def prune_defense(model: TrainedModel, holdout: Dataset, rates, ctx: EvalContext) -> DefenseCurve:
    rates = [float(r) for r in rates]
    for r in rates:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"pruning rate {r} outside [0, 1)")
    order = rank_channels(channel_activations(model, holdout))
    curve = DefenseCurve("prune")
    for rate in sorted(set(rates)):
        k = masked_count(rate, len(order))
        defended = mask_channels(model, order[:k]) if k else model
        curve.append(rate, *ctx.score(defended))
    return curve
