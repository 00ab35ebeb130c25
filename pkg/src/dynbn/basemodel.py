"""Small BN-bearing CNN, BN statistics estimation, merging and swapping.

Architecture (input 3 x 32 x 32)::

    conv3x3(3->16)  BN ReLU   conv3x3(16->16) BN ReLU   maxpool2
    conv3x3(16->32) BN ReLU   conv3x3(32->32) BN ReLU   maxpool2
    global average pool       dense(32 -> 10)

A model "view" made by ``apply_bn`` shares every weight array with its source
and only carries its own running mean/variance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dataio import Dataset, read_container, write_container

CONV_CHANNELS = ((3, 16), (16, 16), (16, 32), (32, 32))
POOL_AFTER = (1, 3)
N_OUT = 10
BN_MOMENTUM = 0.1


@dataclass
class BNStats:
    """Ordered (mean, var) per BN layer, float32."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for m, v in self.layers:
            if m.shape != v.shape or m.ndim != 1:
                raise nx.ShapeError("BN mean and var must be equal-length vectors")
            if np.any(v < 0):
                raise ValueError("BN variance must be non-negative")

    def __len__(self) -> int:
        return len(self.layers)

    def widths(self) -> list[int]:
        return [m.shape[0] for m, _ in self.layers]

    def equals(self, other: "BNStats") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(a, c) and np.array_equal(b, d)
            for (a, b), (c, d) in zip(self.layers, other.layers))


def _to_nchw(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise nx.ShapeError(f"expected (N, H, W, 3) images, got {images.shape}")
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32)


class BaseCNN:
    def __init__(self, params: dict[str, np.ndarray], bn: list[nx.BNLayerState]):
        self.params = params
        self.bn = bn
        if len(bn) != len(CONV_CHANNELS):
            raise nx.ShapeError(f"BaseCNN needs {len(CONV_CHANNELS)} BN layers, got {len(bn)}")
        for state, (_, c) in zip(bn, CONV_CHANNELS):
            if state.channels != c:
                raise nx.ShapeError(f"BN width {state.channels} != conv width {c}")

    # -- forward passes ----------------------------------------------------

    def _conv(self, i, x):
        return nx.conv2d(x, self.params[f"conv{i + 1}"], None, 1, 1)

    def _post_bn(self, i, y):
        """ReLU, plus max-pool where the architecture has one.  ``y`` is overwritten."""
        a = np.maximum(y, 0, out=y)
        return nx.maxpool2d(a) if i in POOL_AFTER else a

    def _head(self, a):
        return nx.dense(a.mean(axis=(2, 3)), self.params["fc.w"], self.params["fc.b"])

    def logits(self, images: np.ndarray, batch: int = 500) -> np.ndarray:
        """Eval-mode forward: BN uses the stored running statistics only."""
        x = _to_nchw(images)
        out = []
        for s in range(0, len(x), batch):
            a = x[s:s + batch]
            for i, state in enumerate(self.bn):
                a = self._post_bn(i, nx.batchnorm(self._conv(i, a), state, "eval"))
            out.append(self._head(a))
        return np.concatenate(out) if out else np.zeros((0, N_OUT), np.float32)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def train_step_grads(self, x: np.ndarray, y: np.ndarray):
        """Train-mode forward/backward on an NCHW batch.

        Returns (loss, logits, grads, batch stats per BN layer).
        """
        p = self.params
        caches, stats = [], []
        a = x
        for i, state in enumerate(self.bn):
            z, cc = nx.conv2d_forward(a, p[f"conv{i + 1}"], None, 1, 1)
            yb, cb = nx.batchnorm_forward(z, state, "train")
            a, cr = nx.relu_forward(yb)
            cp = None
            if i in POOL_AFTER:
                a, cp = nx.maxpool2d_forward(a)
            caches.append((cc, cb, cr, cp))
            stats.append((cb["mean"], cb["var"]))
        g_in, cg = nx.global_avgpool_forward(a)
        z, cd = nx.dense_forward(g_in, p["fc.w"], p["fc.b"])
        loss, dz = nx.softmax_xent(z, y)
        grads = {}
        dg, grads["fc.w"], grads["fc.b"] = nx.dense_backward(dz, cd)
        da = nx.global_avgpool_backward(dg, cg)
        for i in reversed(range(len(self.bn))):
            cc, cb, cr, cp = caches[i]
            if cp is not None:
                da = nx.maxpool2d_backward(da, cp)
            dyb = nx.relu_backward(da, cr)
            dz_, grads[f"bn{i + 1}.gamma"], grads[f"bn{i + 1}.beta"] = nx.batchnorm_backward(dyb, cb)
            da, grads[f"conv{i + 1}"], _ = nx.conv2d_backward(dz_, cc)
        return loss, z, grads, stats

    # -- BN statistics -----------------------------------------------------

    def bn_stats(self) -> BNStats:
        return BNStats([(s.mean.copy(), s.var.copy()) for s in self.bn])

    def trainable(self) -> dict[str, np.ndarray]:
        """Weights plus BN affine parameters, keyed as in the gradients."""
        out = dict(self.params)
        for i, s in enumerate(self.bn, start=1):
            out[f"bn{i}.gamma"] = s.gamma
            out[f"bn{i}.beta"] = s.beta
        return out

    def with_bn_stats(self, stats: BNStats) -> "BaseCNN":
        return apply_bn(self, stats)


def init_base(seed: int) -> BaseCNN:
    rng = np.random.default_rng(seed)
    params = {}
    for i, (cin, cout) in enumerate(CONV_CHANNELS, start=1):
        params[f"conv{i}"] = nx.he_normal(rng, cin * 9, (cout, cin, 3, 3))
    params["fc.w"] = nx.glorot_uniform(rng, CONV_CHANNELS[-1][1], N_OUT, (CONV_CHANNELS[-1][1], N_OUT))
    params["fc.b"] = np.zeros(N_OUT, np.float32)
    return BaseCNN(params, [nx.BNLayerState.fresh(c) for _, c in CONV_CHANNELS])


@dataclass
class BaseTrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 5e-4
    seed: int = 0


def train_base(dataset: Dataset, config: BaseTrainConfig | None = None, log=None) -> BaseCNN:
    """SGD with momentum and a cosine learning-rate decay over epochs.

    Running BN statistics follow an exponential moving average of the
    population batch statistics (weight 0.1 on the new batch).
    """
    cfg = config or BaseTrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty training set")
    model = init_base(cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    x_all = _to_nchw(dataset.images)
    y_all = dataset.labels.astype(np.int64)
    velocity: dict = {}
    n = len(y_all)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n - 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, z, grads, stats = model.train_step_grads(x_all[idx], y_all[idx])
            nx.sgd_step(model.trainable(), grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            for state, (m, v) in zip(model.bn, stats):
                state.mean[:] = (1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * m
                state.var[:] = (1 - BN_MOMENTUM) * state.var + BN_MOMENTUM * v
            loss_sum += loss * len(idx)
            correct += int((z.argmax(axis=1) == y_all[idx]).sum())
        if log is not None:
            log(f"{epoch}, {lr:.6g}, {loss_sum / n:.6f}, {correct / n:.4f}")
    return model


def accuracy(model, images: np.ndarray, labels: np.ndarray) -> float:
    return float((model.predict(images) == labels).mean())


# ---------------------------------------------------------------------------
# Statistics estimation, merging, swapping
# ---------------------------------------------------------------------------

class _RunningMoments:
    """Streaming per-channel count / mean / M2 with Chan's pairwise merge."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, x: np.ndarray) -> None:
        k = x.shape[0] * x.shape[2] * x.shape[3]
        # shift by a rough mean, then accumulate in float64 without a full float64 copy
        shift = x.sum(axis=(0, 2, 3), dtype=np.float64) / k
        d = x - shift.astype(x.dtype)[None, :, None, None]
        s = d.sum(axis=(0, 2, 3), dtype=np.float64)
        bm = shift + s / k
        bm2 = np.maximum(np.einsum("nchw,nchw->c", d, d, dtype=np.float64) - s * s / k, 0.0)
        tot = self.n + k
        delta = bm - self.mean
        self.mean = self.mean + delta * (k / tot)
        self.m2 = self.m2 + bm2 + delta ** 2 * (self.n * k / tot)
        self.n = tot

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.astype(np.float32), (self.m2 / self.n).astype(np.float32)


def estimate_bn(model: BaseCNN, images: np.ndarray, batch: int = 256) -> BNStats:
    """Population BN statistics of ``images`` under ``model``, layer by layer.

    Layer l's statistics are measured on activations normalized with the
    already estimated statistics of layers < l, i.e. the statistics the
    swapped model will actually see.  Weights are not touched.
    """
    x = _to_nchw(images)
    if len(x) < 2:
        raise ValueError("need at least 2 images to estimate BN statistics")
    acts = [x[s:s + batch] for s in range(0, len(x), batch)]
    layers = []
    for i, state in enumerate(model.bn):
        pre = [model._conv(i, a) for a in acts]
        moments = _RunningMoments(state.channels)
        for z in pre:
            moments.update(z)
        mean, var = moments.result()
        layers.append((mean, var))
        est = state.with_stats(mean, var)
        acts = [model._post_bn(i, nx.batchnorm(z, est, "eval")) for z in pre]
    return BNStats(layers)


def merge_bn(natural: BNStats, corrupted: BNStats, N: float = 1.0, n: float = 1.0) -> BNStats:
    """Weighted per-channel average of two statistic sets (no between-mean term)."""
    if natural.widths() != corrupted.widths():
        raise nx.ShapeError(f"cannot merge widths {natural.widths()} and {corrupted.widths()}")
    if N < 0 or n < 0 or N + n == 0:
        raise ValueError("merge weights must be non-negative with positive sum")
    out = []
    for (mn, vn), (mc, vc) in zip(natural.layers, corrupted.layers):
        mean = (N * mn.astype(np.float64) + n * mc.astype(np.float64)) / (N + n)
        var = (N * vn.astype(np.float64) + n * vc.astype(np.float64)) / (N + n)
        out.append((mean.astype(np.float32), var.astype(np.float32)))
    return BNStats(out)


def apply_bn(model: BaseCNN, stats: BNStats) -> BaseCNN:
    """A view of ``model`` with ``stats`` as running statistics.

    Weights and BN affine parameters are shared, never copied or modified.
    """
    if stats.widths() != [s.channels for s in model.bn]:
        raise nx.ShapeError(f"stats widths {stats.widths()} do not fit the model")
    bn = [s.with_stats(m, v) for s, (m, v) in zip(model.bn, stats.layers)]
    return BaseCNN(model.params, bn)


class BNTable(dict):
    """Corruption label code -> BNStats.  Must contain code 0 (natural)."""

    def validate(self, model: BaseCNN | None = None) -> None:
        if 0 not in self:
            raise KeyError("BN table has no natural entry")
        if model is not None:
            widths = [s.channels for s in model.bn]
            for code, st in self.items():
                if st.widths() != widths:
                    raise nx.ShapeError(f"table entry {code} does not fit the model")


def build_bn_table(model: BaseCNN, corpora: dict[int, np.ndarray], N: float = 1.0,
                   n: float = 1.0, labels=None) -> BNTable:
    """entry[c] = merge_bn(natural, estimate_bn(model, corpora[c])); entry[0] = natural."""
    natural = model.bn_stats()
    labels = sorted(int(c) for c in corpora if int(c) != 0) if labels is None else labels
    table = BNTable({0: natural})
    for c in labels:
        c = int(c)
        if c == 0:
            continue
        if c not in corpora:
            raise KeyError(f"no corpus for corruption label {c}")
        table[c] = merge_bn(natural, estimate_bn(model, corpora[c]), N, n)
    return table


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_base(path, model: BaseCNN) -> None:
    chunks = dict(model.params)
    for i, s in enumerate(model.bn, start=1):
        chunks.update({f"bn{i}.gamma": s.gamma, f"bn{i}.beta": s.beta,
                       f"bn{i}.mean": s.mean, f"bn{i}.var": s.var,
                       f"bn{i}.eps": np.array([s.eps], np.float32)})
    write_container(path, "basecnn", chunks)


def load_base(path) -> BaseCNN:
    c = read_container(path, "basecnn")
    params = {k: v for k, v in c.items() if not k.startswith("bn")}
    bn = [nx.BNLayerState(c[f"bn{i}.mean"], c[f"bn{i}.var"], c[f"bn{i}.gamma"],
                          c[f"bn{i}.beta"], float(c[f"bn{i}.eps"][0]))
          for i in range(1, len(CONV_CHANNELS) + 1)]
    return BaseCNN(params, bn)


def save_table(path, table: BNTable) -> None:
    chunks = {"codes": np.array(sorted(table), dtype=np.int32)}
    for code in sorted(table):
        for li, (m, v) in enumerate(table[code].layers):
            chunks[f"{code}.{li}.mean"] = m
            chunks[f"{code}.{li}.var"] = v
    write_container(path, "bntable", chunks)


def load_table(path) -> BNTable:
    c = read_container(path, "bntable")
    table = BNTable()
    for code in c["codes"]:
        layers = []
        li = 0
        while f"{code}.{li}.mean" in c:
            layers.append((c[f"{code}.{li}.mean"], c[f"{code}.{li}.var"]))
            li += 1
        table[int(code)] = BNStats(layers)
    return table
