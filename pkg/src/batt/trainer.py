"""Mini-batch SGD training, prediction, gradient checking and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checksum import Fnv1a64
from .dataset_io import Dataset, FormatError, BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError
from .nn import ArchSpec, Network, ShapeError, convnet_s, dense_net, softmax_cross_entropy
from .rng import RngStream

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BATTCKPT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class HyperParams:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    milestones: tuple[int, ...] = (15, 25)
    lr_decay: float = 0.1
    weight_decay: float = 5e-4
    shuffle_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.lr_decay <= 0:
            raise ValueError("learning rate, momentum, weight decay must be non-negative and lr decay positive")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainedModel:
    arch: ArchSpec
    params: np.ndarray
    hyper: HyperParams = field(default_factory=HyperParams)
    metadata: dict = field(default_factory=dict)
    velocity: np.ndarray | None = None
    epochs_done: int = 0
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        net = self.network()
        if not np.all(np.isfinite(self.params)):
            raise TrainingError("model parameters contain non-finite values")
        if self.velocity is not None and self.velocity.shape != self.params.shape:
            raise ShapeError("optimizer state does not match the parameter vector")
        self.num_params = net.num_params

    def network(self, dtype=None) -> Network:
        return Network(self.arch, self.params, dtype=dtype or self.params.dtype)

    def copy(self) -> "TrainedModel":
        return replace(
            self,
            params=self.params.copy(),
            metadata=dict(self.metadata),
            velocity=None if self.velocity is None else self.velocity.copy(),
            loss_history=list(self.loss_history),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.arch.to_dict(), sort_keys=True).encode())
        h.update(self.params.astype("<f4").tobytes())
        return h.hexdigest()


def _check_dataset(dataset: Dataset, arch: ArchSpec) -> None:
    if tuple(dataset.shape) != tuple(arch.input_shape):
        raise ShapeError(f"dataset images {dataset.shape} do not match architecture input {tuple(arch.input_shape)}")
    if dataset.num_classes != arch.num_classes:
        raise ShapeError(f"dataset has {dataset.num_classes} classes, architecture outputs {arch.num_classes}")


def _run_epochs(net: Network, velocity: np.ndarray, dataset: Dataset, hp: HyperParams,
                first_epoch: int, epochs: int, lr_override: float | None) -> list[float]:
    n = len(dataset)
    wd = net.dtype.type(hp.weight_decay)
    mu = net.dtype.type(hp.momentum)
    history = []
    for epoch in range(first_epoch, first_epoch + epochs):
        lr = net.dtype.type(hp.lr_at(epoch) if lr_override is None else lr_override)
        order = RngStream(hp.shuffle_seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            # divergence is detected below; numpy's overflow warnings would only duplicate it
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = net.loss_and_grad(dataset.images[idx], dataset.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch)
            total += loss * len(idx)
            # v <- mu*v + (g + wd*w);  w <- w - lr*v
            grad += wd * net.params
            velocity *= mu
            velocity += grad
            net.params -= lr * velocity
        mean = total / n
        if not np.all(np.isfinite(net.params)):
            raise TrainingError(f"parameters became non-finite in epoch {epoch}", epoch)
        history.append(mean)
        log.info("epoch %d lr=%.4g loss=%.5f", epoch, float(lr), mean)
    return history


def init_model(arch: ArchSpec, hp: HyperParams) -> TrainedModel:
    net = Network(arch)
    net.init_params(hp.init_seed)
    return TrainedModel(arch, net.params.copy(), hp, {}, np.zeros_like(net.params), 0, [])


def train(dataset: Dataset, arch: ArchSpec, hp: HyperParams = HyperParams()) -> TrainedModel:
    """Train from a fresh initialisation; bitwise reproducible for fixed seeds."""
    _check_dataset(dataset, arch)
    model = init_model(arch, hp)
    model.metadata = {
        "config_digest": hp.digest(),
        "dataset_digest": dataset.digest(),
    }
    return continue_training(model, dataset, hp.epochs, hp=hp, reset_momentum=False)


def continue_training(model: TrainedModel, dataset: Dataset, epochs: int, lr: float | None = None,
                      hp: HyperParams | None = None, reset_momentum: bool | None = None,
                      shuffle_seed: int | None = None) -> TrainedModel:
    """Run ``epochs`` more epochs starting from ``model``'s parameters.

    With ``lr`` given the rate is constant and optimizer state starts fresh
    (the fine-tuning setting). Without it the schedule of ``hp`` continues
    from ``model.epochs_done`` with the stored momentum, so splitting a run
    in two reproduces the uninterrupted run.
    """
    _check_dataset(dataset, model.arch)
    if epochs < 0:
        raise ValueError(f"epochs must be non-negative, got {epochs}")
    hp = hp or model.hyper
    if shuffle_seed is not None:
        hp = replace(hp, shuffle_seed=shuffle_seed)
    if reset_momentum is None:
        reset_momentum = lr is not None
    out = model.copy()
    if epochs == 0:
        return out
    net = out.network()
    velocity = np.zeros_like(net.params) if reset_momentum or out.velocity is None else out.velocity.astype(net.dtype)
    history = _run_epochs(net, velocity, dataset, hp, out.epochs_done, epochs, lr)
    out.params = net.params.copy()
    out.velocity = velocity
    out.epochs_done += epochs
    out.loss_history = out.loss_history + history
    out.metadata["final_train_loss"] = history[-1]
    out.metadata["epochs"] = out.epochs_done
    return out


def logits(model: TrainedModel | Network, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    net = model if isinstance(model, Network) else model.network()
    net.check_input(images)
    chunks = [net.forward(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, net.arch.num_classes), dtype=net.dtype)


def predict_batch(model: TrainedModel | Network, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Arg-max class per image; ties go to the lowest class index."""
    return logits(model, images, batch_size).argmax(axis=1)


def predict(model: TrainedModel, image: np.ndarray) -> tuple[int, np.ndarray]:
    scores = logits(model, np.asarray(image)[None])[0]
    return int(scores.argmax()), scores


# --------------------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    num_params: int
    tolerance: float
    dtype: str
    per_slice: dict[str, float]
    kink_skipped: int = 0

    @property
    def passed(self) -> bool:
        # a perturbation that flips a ReLU or pooling winner measures a different piece of the function
        return bool(self.max_rel_error <= self.tolerance and self.kink_skipped <= 0.01 * self.num_params)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(arch: ArchSpec | None = None, tolerance: float = 1e-4, dtype=np.float64, batch: int = 3,
               step: float = 1e-3, seed: int = 0, images: np.ndarray | None = None,
               labels: np.ndarray | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare backprop gradients with central differences for every parameter.

    Backprop runs in ``dtype``. The finite differences always run in double
    precision at the same parameter point, so a float32 check measures the
    float32 backward pass rather than float32 rounding in the oracle.
    Coordinates whose +-step perturbation flips a ReLU or pooling decision
    are excluded from the maximum and counted in ``kink_skipped``.
    """
    dtype = np.dtype(dtype)
    if arch is None:
        arch = dense_net((1, 4, 4), 2)
    net = Network(arch, dtype=dtype)
    net.init_params(seed)
    rs = RngStream(seed, "gradcheck")
    # non-zero biases exercise every bias gradient
    net.params += (0.1 * (2 * rs.uniforms(net.num_params) - 1)).astype(dtype) * (net.params == 0)
    if images is None:
        images = rs.uniforms(batch * int(np.prod(arch.input_shape))).reshape((batch,) + tuple(arch.input_shape))
    if labels is None:
        labels = np.array([rs.below(arch.num_classes) for _ in range(len(images))])
    x = np.asarray(images, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)

    _, grads = net.loss_and_grad(x, labels)
    analytic = grads.astype(np.float64)

    ref = Network(arch, net.params.astype(np.float64), dtype=np.float64)
    x64 = x.astype(np.float64)
    softmax_cross_entropy(ref.forward(x64, train=True), labels)
    pattern = ref.activation_pattern()
    p = ref.params

    def loss_at(i, value):
        p[i] = value
        loss = softmax_cross_entropy(ref.forward(x64, train=True), labels)[0]
        return loss, ref.activation_pattern() == pattern

    numeric = np.empty(net.num_params, dtype=np.float64)
    smooth = np.ones(net.num_params, dtype=bool)
    for i in range(net.num_params):
        orig = p[i]
        f_hi, ok_hi = loss_at(i, orig + step)
        f_lo, ok_lo = loss_at(i, orig - step)
        p[i] = orig
        numeric[i] = (f_hi - f_lo) / (2 * step)
        smooth[i] = ok_hi and ok_lo

    rel = np.where(smooth, relative_error(analytic, numeric, floor), 0.0)
    per_slice = {s.name: float(rel[s.offset : s.offset + s.size].max()) for s in net.slices}
    worst = int(rel.argmax())
    worst_name = next(s.name for s in net.slices if s.offset <= worst < s.offset + s.size)
    return GradCheckReport(float(rel.max()), worst_name, net.num_params, tolerance, dtype.name, per_slice,
                           int((~smooth).sum()))


def toy_convnet(num_classes: int = 2) -> ArchSpec:
    """ConvNet-S at 1x4x4 input: both conv/pool stages reduce to a 1x1 map."""
    return convnet_s((1, 4, 4), num_classes)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: TrainedModel, path) -> int:
    """Layout: magic | u32 version | u32 header length | JSON header | f32 payload | u64 FNV-1a."""
    header = {
        "arch": model.arch.to_dict(),
        "hyper": model.hyper.to_dict(),
        "metadata": model.metadata,
        "epochs_done": model.epochs_done,
        "loss_history": model.loss_history,
        "num_params": int(model.params.size),
        "has_velocity": model.velocity is not None,
        "model_digest": model.digest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    prefix = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes
    payload = model.params.astype("<f4").tobytes()
    if model.velocity is not None:
        payload += model.velocity.astype("<f4").tobytes()
    checksum = Fnv1a64().update(prefix).update(payload).value
    with open(path, "wb") as fh:
        fh.write(prefix)
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))
    return checksum


def load_checkpoint(path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a model checkpoint")
    off = len(CKPT_MAGIC)
    if len(raw) < off + 16:
        raise TruncatedFileError(f"{path}: truncated header")
    # checksum first, so a damaged header is reported as corruption rather than parsed
    (stored,) = struct.unpack_from("<Q", raw, len(raw) - 8)
    if Fnv1a64().update(memoryview(raw)[:-8]).value != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off += 8
    if len(raw) < off + hlen + 8:
        raise TruncatedFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    off += hlen
    n = int(header["num_params"])
    count = n * (2 if header["has_velocity"] else 1)
    if len(raw) != off + 4 * count + 8:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, expected {off + 4 * count + 8}")
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32)
    hyper = dict(header["hyper"])
    model = TrainedModel(
        ArchSpec.from_dict(header["arch"]),
        payload[:n].copy(),
        HyperParams(**hyper),
        header["metadata"],
        payload[n:].copy() if header["has_velocity"] else None,
        int(header["epochs_done"]),
        list(header["loss_history"]),
    )
    return model
