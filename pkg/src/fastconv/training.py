"""Optimization: warm-restart schedule, momentum SGD, cross-entropy, training loop
and a finite-difference gradient checker."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from fastconv import tensor
from fastconv.blocks import Block, block_backward, block_forward
from fastconv.network import Network, net_backward, net_forward

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing with warm restarts; the peak halves every cycle.

    Within cycle ``c`` the rate falls from ``lr_max0 / 2**c`` to ``lr_min``
    along half a cosine, then jumps back up at the next restart. The peak is
    never allowed below ``lr_min``.
    """

    lr_max0: float = 2e-3
    lr_min: float = 4e-5
    cycle_epochs: float = 5.0

    def __post_init__(self):
        if self.cycle_epochs <= 0:
            raise ValueError("cycle_epochs must be positive")
        if self.lr_min < 0 or self.lr_max0 < self.lr_min:
            raise ValueError("need 0 <= lr_min <= lr_max0")

    def cycle_max(self, cycle: int) -> float:
        return max(self.lr_max0 / 2.0 ** cycle, self.lr_min)


def lr_at(sched: LrSchedule, epoch: float) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    cycle = int(math.floor(epoch / sched.cycle_epochs))
    frac = (epoch - cycle * sched.cycle_epochs) / sched.cycle_epochs
    peak = sched.cycle_max(cycle)
    return sched.lr_min + 0.5 * (peak - sched.lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: SgdState, lr: float) -> None:
    """Classic momentum, in place: ``v = mu*v + g; w -= lr*v``."""
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: grad {g.shape} vs weight {w.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * w
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        elif v.shape != w.shape:
            raise ValueError(f"{name}: velocity {v.shape} vs weight {w.shape}")
        v *= state.momentum
        v += g
        w -= np.asarray(lr, dtype=w.dtype) * v


# ---------------------------------------------------------------------------
# loss


def softmax_xent(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Accepts a single logit vector with an int label, or a (n, C) batch with a
    length-n label array.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = np.atleast_2d(logits).astype(np.float64)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got {y.shape}")
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), y]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), y] -= 1.0
    grad = (p / n).astype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.train_x) == 0 or len(self.val_x) == 0:
            raise ValueError("train and validation splits must both be nonempty")
        if len(self.train_x) != len(self.train_y) or len(self.val_x) != len(self.val_y):
            raise ValueError("clip and label counts differ")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainRecord:
    epochs: list[EpochStats] = field(default_factory=list)

    # Wall time is excluded so identical runs give identical artifacts.
    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")

    def to_csv(self, with_time: bool = False) -> str:
        fields = self.CSV_FIELDS + (("seconds",) if with_time else ())
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(fields)
        for e in self.epochs:
            row = asdict(e)
            writer.writerow([row[f] if f == "epoch" else repr(float(row[f])) for f in fields])
        return buf.getvalue()

    def to_json(self, with_time: bool = False) -> str:
        rows = []
        for e in self.epochs:
            row = asdict(e)
            if not with_time:
                row.pop("seconds")
            rows.append(row)
        return json.dumps({"epochs": rows}, indent=2)

    def same_metrics(self, other: "TrainRecord") -> bool:
        return self.to_csv() == other.to_csv()


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _prefetch(x: np.ndarray, y: np.ndarray, batches: list[np.ndarray], workers: int) -> Iterator:
    """Yield (clips, labels) batches in order, gathered by a small thread pool."""
    if workers <= 1:
        for idx in batches:
            yield x[idx], y[idx]
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda idx: (x[idx], y[idx]), batches)


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 8) -> tuple[float, float]:
    """Mean loss and accuracy over a labelled set."""
    total_loss = 0.0
    correct = 0
    for i in range(0, len(x), batch_size):
        logits, _ = net_forward(net, x[i:i + batch_size])
        loss, _ = softmax_xent(logits, y[i:i + batch_size])
        total_loss += loss * len(logits)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i:i + batch_size]))
    return total_loss / len(x), correct / len(x)


def train(
    net: Network,
    data: Dataset,
    epochs: int,
    sched: LrSchedule | None = None,
    seed: int = 0,
    *,
    batch_size: int = 8,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    workers: int = 4,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainRecord:
    """Minibatch SGD over ``data.train_*``, evaluating on ``data.val_*`` after each epoch.

    The learning rate is re-read from ``sched`` before every batch using the
    fractional epoch, and the shuffle order is drawn from ``seed`` alone.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    sched = sched or LrSchedule()
    rng = np.random.default_rng(seed)
    state = SgdState(momentum=momentum, weight_decay=weight_decay)
    weights = net.params()
    record = TrainRecord()
    n = len(data.train_x)
    for epoch in range(epochs):
        start = time.perf_counter()
        batches = _batches(n, batch_size, rng)
        loss_sum = 0.0
        for bi, (xb, yb) in enumerate(_prefetch(data.train_x, data.train_y, batches, workers)):
            lr = lr_at(sched, epoch + bi / len(batches))
            logits, cache = net_forward(net, xb)
            loss, g = softmax_xent(logits, yb)
            _, grads = net_backward(net, cache, g, input_grad=False)
            sgd_step(weights, grads, state, lr)
            loss_sum += loss * len(yb)
        val_loss, val_acc = evaluate(net, data.val_x, data.val_y, batch_size)
        stats = EpochStats(epoch, loss_sum / n, val_loss, val_acc, lr_at(sched, epoch),
                           time.perf_counter() - start)
        log.info("epoch %d train %.4f val %.4f acc %.3f lr %.2e", epoch, stats.train_loss,
                 val_loss, val_acc, stats.lr)
        record.epochs.append(stats)
        if on_epoch:
            on_epoch(stats)
    return record


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    tensors: list[TensorCheck]

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    @property
    def max_rel_err(self) -> float:
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_rel_err": self.max_rel_err,
            "tensors": [asdict(t) for t in self.tensors],
        }


def gradcheck(
    target: Block | Network,
    x,
    tolerance: float = 1e-3,
    *,
    step: float = 1e-3,
    max_entries: int | None = 64,
    seed: int = 0,
    corrupt: float = 1.0,
    floor: float = 1e-6,
    freeze_gates: bool = True,
) -> GradcheckReport:
    """Compare analytic gradients with central differences in float64.

    The loss is ``sum(output**2) / 2``. Each weight tensor and the input are
    checked on up to ``max_entries`` seeded random entries (all of them when
    ``None``). An entry counts when either gradient exceeds ``floor`` in
    magnitude. ``corrupt`` scales the analytic gradients, to confirm the
    checker can fail.

    With ``freeze_gates`` (the default) the perturbed forwards reuse the ReLU
    on/off pattern of the unperturbed one. The gradient at the point is the
    same, but a +-step no longer crosses kinks, which otherwise puts O(step)
    errors on a sizeable fraction of entries.
    """
    if isinstance(target, Block):
        model = target.astype(np.float64)

        def forward(inp):
            return block_forward(model, inp)

        def backward(cache, g):
            return block_backward(model, cache, g)
    else:
        model = target.astype(np.float64)

        def forward(inp):
            return net_forward(model, inp)

        def backward(cache, g):
            return net_backward(model, cache, g)

    x64 = np.array(x, dtype=np.float64)

    with tensor.record_gates() as gates:
        out, cache = forward(x64)

    def loss_of(inp) -> float:
        if freeze_gates:
            with tensor.frozen_gates(gates):
                out, _ = forward(inp)
        else:
            out, _ = forward(inp)
        return 0.5 * float(np.sum(out * out))

    gx, grads = backward(cache, out)
    tensors = dict(model.params())
    analytic = {name: grads[name] * corrupt for name in tensors}
    tensors["input"] = x64
    analytic["input"] = gx * corrupt

    rng = np.random.default_rng(seed)
    checks = []
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        counted = 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_of(x64)
            flat[i] = orig - step
            down = loss_of(x64)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            scale = max(abs(numeric), abs(a_flat[i]))
            if scale <= floor:
                continue
            counted += 1
            worst = max(worst, abs(numeric - a_flat[i]) / scale)
        checks.append(TensorCheck(name, float(worst), counted, bool(worst <= tolerance)))
    return GradcheckReport(tolerance, checks)


def write_record(record: TrainRecord, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "train.csv").write_text(record.to_csv())
    (directory / "train.json").write_text(record.to_json())
    (directory / "timing.csv").write_text(record.to_csv(with_time=True))
