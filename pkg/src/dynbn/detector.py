"""Corruption-type detector: a 3-layer fully connected net on spectrum features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dataio import read_container, write_container

HIDDEN = (1024, 512)


@dataclass
class TrainSchedule:
    epochs: int = 50
    drop_epochs: tuple[int, ...] = (20, 35)
    base_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    weight_decay: float = 0.0
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based); x0.1 at each drop epoch."""
        drops = sum(1 for d in self.drop_epochs if epoch >= d)
        return self.base_lr * 0.1 ** drops


class DetectorModel:
    """dense(in, 1024) -> ReLU -> dense(1024, 512) -> ReLU -> dense(512, n_classes)."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @property
    def in_dim(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.params["w3"].shape[1]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise nx.ShapeError(f"detector expects features of length {self.in_dim}, got {x.shape}")

    def logits(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        p = self.params
        h = nx.relu(nx.dense(x, p["w1"], p["b1"]))
        h = nx.relu(nx.dense(h, p["w2"], p["b2"]))
        return nx.dense(h, p["w3"], p["b3"])

    def loss_and_grads(self, x, y):
        p = self.params
        h1, c1 = nx.dense_forward(x, p["w1"], p["b1"])
        a1, m1 = nx.relu_forward(h1)
        h2, c2 = nx.dense_forward(a1, p["w2"], p["b2"])
        a2, m2 = nx.relu_forward(h2)
        z, c3 = nx.dense_forward(a2, p["w3"], p["b3"])
        loss, dz = nx.softmax_xent(z, y)
        g = {}
        da2, g["w3"], g["b3"] = nx.dense_backward(dz, c3)
        da1, g["w2"], g["b2"] = nx.dense_backward(nx.relu_backward(da2, m2), c2)
        _, g["w1"], g["b1"] = nx.dense_backward(nx.relu_backward(da1, m1), c1)
        return loss, z, g


def init_detector(in_dim: int, n_classes: int, seed: int, hidden=HIDDEN) -> DetectorModel:
    if in_dim < 1 or n_classes < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    dims = (in_dim, *hidden, n_classes)
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        params[f"w{i}"] = nx.glorot_uniform(rng, a, b, (a, b))
        params[f"b{i}"] = np.zeros(b, dtype=np.float32)
    return DetectorModel(params)


def train_detector(model: DetectorModel, features: np.ndarray, labels: np.ndarray,
                   schedule: TrainSchedule | None = None, log=None):
    """Minibatch SGD with step decay.  Returns (model, history).

    ``history`` holds one (epoch, lr, mean_loss, train_acc) tuple per epoch.
    ``log``, if given, is called with each formatted history line.
    """
    schedule = schedule or TrainSchedule()
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise ValueError("empty training corpus")
    model._check(features)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    rng = np.random.default_rng(schedule.seed)
    velocity: dict = {}
    history = []
    n = len(labels)
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss, z, grads = model.loss_and_grads(features[idx], labels[idx])
            nx.sgd_step(model.params, grads, velocity, lr, schedule.momentum, schedule.weight_decay)
            loss_sum += loss * len(idx)
            correct += int((z.argmax(axis=1) == labels[idx]).sum())
        row = (epoch, lr, loss_sum / n, correct / n)
        history.append(row)
        if log is not None:
            log(format_log_line(row))
    return model, history


def format_log_line(row) -> str:
    epoch, lr, loss, acc = row
    return f"{epoch}, {lr:.6g}, {loss:.6f}, {acc:.4f}"


def predict(model: DetectorModel, features: np.ndarray):
    """Returns (labels, probabilities); ties go to the smallest label code."""
    single = features.ndim == 1
    x = np.asarray(features, dtype=np.float32).reshape(-1, features.shape[-1])
    probs = nx.softmax(model.logits(x))
    labels = probs.argmax(axis=1)
    if single:
        return int(labels[0]), probs[0]
    return labels, probs


def confusion_matrix(true: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are true labels, columns predicted labels."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def evaluate(model: DetectorModel, features: np.ndarray, labels: np.ndarray):
    """Returns (accuracy, confusion matrix)."""
    pred, _ = predict(model, features)
    cm = confusion_matrix(labels, pred, model.n_classes)
    return float(np.trace(cm) / max(cm.sum(), 1)), cm


def family_confinement(cm: np.ndarray, family: list[int]) -> float:
    """Share of errors on ``family`` inputs whose prediction stays inside the family."""
    fam = list(family)
    rows = cm[fam]
    errors = rows.sum() - rows[:, fam].trace()
    within = rows[:, fam].sum() - rows[:, fam].trace()
    return float(within / errors) if errors else 1.0


def save_detector(path, model: DetectorModel) -> None:
    write_container(path, "detector", model.params)


def load_detector(path) -> DetectorModel:
    return DetectorModel(read_container(path, "detector"))
