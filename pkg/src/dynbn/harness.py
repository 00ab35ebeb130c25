"""Evaluation harness: corruption error tables, the gain matrix and the streaming study."""
from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .basemodel import BaseCNN, BNTable, apply_bn, estimate_bn, merge_bn
from .corruptions import CORRUPTIONS, SEVERITIES, CorruptionLabel
from .dataio import CorruptedCorpus, Dataset
from .pipeline import AdaptivePipeline

POLICIES = ("static_natural", "online_bn_window", "adaptive_lookup")
PERIODS = (1, 2, 4, 8, 16, 32)


def _slug(code: int) -> str:
    return CorruptionLabel(code).slug


def _errors(model, images, classes) -> int:
    if len(images) == 0:
        return 0
    return int((np.asarray(model.predict(images)) != classes).sum())


# ---------------------------------------------------------------------------
# Per-corruption report
# ---------------------------------------------------------------------------

@dataclass
class CorruptionErrorReport:
    """Top-1 error per (corruption, severity) plus aggregate accuracies.

    uCE of a corruption is the plain sum of its five severity errors; mCE is
    the mean uCE over corruptions (unnormalized, no reference model).
    """

    cells: dict[tuple[int, int], float]
    clean_accuracy: float
    corrupted_accuracy: float
    combined_accuracy: float
    counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        for key, e in self.cells.items():
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"cell {key} error {e} outside [0, 1]")

    @property
    def corruptions(self) -> list[int]:
        return sorted({c for c, _ in self.cells})

    def uce(self, code: int) -> float:
        total = 0.0
        for s in SEVERITIES:
            total += self.cells[(code, s)]
        return total

    @property
    def mce(self) -> float:
        codes = self.corruptions
        return sum(self.uce(c) for c in codes) / len(codes)

    def to_tsv(self) -> str:
        out = io.StringIO()
        out.write("metric\tcorruption\tseverity\tvalue\n")
        for c in self.corruptions:
            for s in SEVERITIES:
                out.write(f"error\t{_slug(c)}\t{s}\t{self.cells[(c, s)]!r}\n")
        for c in self.corruptions:
            out.write(f"uCE\t{_slug(c)}\t-\t{self.uce(c)!r}\n")
        out.write(f"mCE\t-\t-\t{self.mce!r}\n")
        for name in ("clean_accuracy", "corrupted_accuracy", "combined_accuracy"):
            out.write(f"{name}\t-\t-\t{getattr(self, name)!r}\n")
        return out.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> tuple["CorruptionErrorReport", dict]:
        """Parse an emitted table; returns (report, emitted aggregates)."""
        lines = text.strip().splitlines()
        if not lines or lines[0].split("\t") != ["metric", "corruption", "severity", "value"]:
            raise ValueError("not a corruption error table")
        cells, agg = {}, {"uCE": {}}
        for line in lines[1:]:
            metric, corr, sev, value = line.split("\t")
            if metric == "error":
                cells[(int(CorruptionLabel.parse(corr)), int(sev))] = float(value)
            elif metric == "uCE":
                agg["uCE"][int(CorruptionLabel.parse(corr))] = float(value)
            else:
                agg[metric] = float(value)
        report = cls(cells, agg["clean_accuracy"], agg["corrupted_accuracy"], agg["combined_accuracy"])
        return report, agg


def eval_per_corruption(model, corpus: CorruptedCorpus, clean: Dataset | None = None,
                        labels=CORRUPTIONS) -> CorruptionErrorReport:
    """Evaluate anything with ``predict(images)`` on every (corruption, severity) cell.

    Clean accuracy comes from ``clean`` when given, else from the corpus'
    ``natural`` records (NaN when there are none).
    """
    codes = [int(c) for c in labels]
    missing = [(_slug(c), s) for c in codes for s in SEVERITIES
               if not np.any((corpus.corruptions == c) & (corpus.severities == s))]
    if missing:
        raise KeyError(f"corpus lacks cells: {missing}")
    cells, counts = {}, {}
    wrong_c = total_c = 0
    for c in codes:
        for s in SEVERITIES:
            mask = (corpus.corruptions == c) & (corpus.severities == s)
            n = int(mask.sum())
            wrong = _errors(model, corpus.images[mask], corpus.classes[mask])
            cells[(c, s)] = wrong / n
            counts[(c, s)] = n
            wrong_c += wrong
            total_c += n
    if clean is not None:
        clean_imgs, clean_y = clean.images, clean.labels
    else:
        nat = corpus.corruptions == 0
        clean_imgs, clean_y = corpus.images[nat], corpus.classes[nat]
    n_clean = len(clean_y)
    wrong_n = _errors(model, clean_imgs, clean_y)
    clean_acc = 1.0 - wrong_n / n_clean if n_clean else float("nan")
    combined = 1.0 - (wrong_c + wrong_n) / (total_c + n_clean)
    return CorruptionErrorReport(cells, clean_acc, 1.0 - wrong_c / total_c, combined, counts)


# ---------------------------------------------------------------------------
# Gain matrix
# ---------------------------------------------------------------------------

@dataclass
class GainMatrix:
    rows: list[int]
    cols: list[int]
    values: np.ndarray  # [row stats, column corruption], accuracy delta in points of 1.0
    baseline: np.ndarray  # natural-stats accuracy per column

    def entry(self, i: int, j: int) -> float:
        return float(self.values[self.rows.index(i), self.cols.index(j)])

    def diagonal(self) -> np.ndarray:
        return np.array([self.entry(c, c) for c in self.cols if c in self.rows and c != 0])

    def off_diagonal(self) -> np.ndarray:
        return np.array([self.entry(i, j) for i in self.rows for j in self.cols
                         if i != 0 and j != 0 and i != j])

    def to_tsv(self) -> str:
        out = io.StringIO()
        out.write("stats\\corruption\t" + "\t".join(_slug(c) for c in self.cols) + "\n")
        out.write("baseline_accuracy\t" + "\t".join(repr(float(v)) for v in self.baseline) + "\n")
        for i, r in enumerate(self.rows):
            out.write(_slug(r) + "\t" + "\t".join(repr(float(v)) for v in self.values[i]) + "\n")
        return out.getvalue()


def gain_matrix(base: BaseCNN, table: BNTable, corpus: CorruptedCorpus,
                columns=None) -> GainMatrix:
    """Accuracy on corruption j under stats entry i minus accuracy under natural stats."""
    table.validate(base)
    cols = [int(c) for c in (columns if columns is not None else CORRUPTIONS)]
    rows = sorted(table)
    absent = [c for c in cols if not np.any(corpus.corruptions == c)]
    if absent:
        raise KeyError(f"corpus lacks corruptions {[_slug(c) for c in absent]}")
    subsets = [corpus.by_label(c) for c in cols]
    acc = np.empty((len(rows), len(cols)))
    for i, r in enumerate(rows):
        view = apply_bn(base, table[r])
        for j, sub in enumerate(subsets):
            acc[i, j] = 1.0 - _errors(view, sub.images, sub.classes) / len(sub)
    baseline = acc[rows.index(0)].copy()
    return GainMatrix(rows, cols, acc - baseline, baseline)


# ---------------------------------------------------------------------------
# Streaming study
# ---------------------------------------------------------------------------

@dataclass
class StreamConfig:
    """Streaming protocol settings.

    ``total_batches`` defaults to (number of corruptions) x max(periods), so
    every K in the sweep visits each corruption for the same number of batches
    and consumes exactly the same test samples.
    """

    batch_size: int = 16
    periods: tuple[int, ...] = PERIODS
    total_batches: int | None = None
    seed: int = 0
    policies: tuple[str, ...] = POLICIES
    window: int = 10
    online_blend: float = 0.0  # weight of natural stats mixed into the online estimate
    detect_mode: str = "per_image"
    labels: tuple[int, ...] = tuple(int(c) for c in CORRUPTIONS)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.periods or min(self.periods) < 1:
            raise ValueError("switch periods must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.online_blend < 1.0:
            raise ValueError("online_blend must lie in [0, 1)")
        unknown = set(self.policies) - set(POLICIES)
        if unknown:
            raise ValueError(f"unknown policies {sorted(unknown)}")
        if len(set(self.labels)) < 2:
            raise ValueError("need at least two corruptions to switch between")

    @property
    def n_batches(self) -> int:
        return self.total_batches or len(self.labels) * max(self.periods)


@dataclass
class StreamRow:
    policy: str
    period: int
    accuracy: float
    images: int
    batches: int


def corruption_schedule(n_batches: int, period: int, labels, rng: np.random.Generator) -> np.ndarray:
    """Corruption code of each batch; a new corruption every ``period`` batches.

    Corruptions are drawn as successive random permutations of ``labels`` (a
    uniform draw balanced over each cycle); a cycle never opens with the
    corruption that closed the previous one, so every switch changes it.
    """
    labels = np.asarray(labels)
    n_seg = -(-n_batches // period)
    seq: list[int] = []
    while len(seq) < n_seg:
        perm = rng.permutation(labels)
        if seq and perm[0] == seq[-1]:
            perm[[0, -1]] = perm[[-1, 0]]
        seq.extend(int(c) for c in perm)
    return np.repeat(np.array(seq[:n_seg]), period)[:n_batches]


def _pool_orders(pools: dict[int, tuple[np.ndarray, np.ndarray]], seed: int) -> dict[int, np.ndarray]:
    return {c: np.random.default_rng([seed, c]).permutation(len(pools[c][1])) for c in pools}


def make_stream(cfg: StreamConfig, period: int, pools) -> list[tuple[int, np.ndarray]]:
    """Batches as (corruption code, pool indices).  Each pool is consumed in a
    fixed shuffled order (cycling if exhausted), independent of ``period``."""
    sched = corruption_schedule(cfg.n_batches, period, cfg.labels,
                                np.random.default_rng([cfg.seed, period]))
    orders = _pool_orders(pools, cfg.seed)
    cursor = {c: 0 for c in pools}
    batches = []
    for c in sched:
        order = orders[c]
        pos = (cursor[c] + np.arange(cfg.batch_size)) % len(order)
        cursor[c] += cfg.batch_size
        batches.append((int(c), order[pos]))
    return batches


def stream_pools(corpus: CorruptedCorpus, labels) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    pools = {}
    for c in labels:
        sub = corpus.by_label(int(c))
        if len(sub) == 0:
            raise ValueError(f"empty stream pool for {_slug(int(c))}")
        pools[int(c)] = (sub.images, sub.classes)
    return pools


def stream_eval(cfg: StreamConfig, base: BaseCNN, table: BNTable, pipeline: AdaptivePipeline | None,
                pools, log=None) -> list[StreamRow]:
    """Accuracy per (policy, K) on single-corruption batch streams.

    ``pools`` maps corruption code -> (images, classes), or is a corpus.
    Per-image policies are functions of the image alone, so their predictions
    are computed once per pool sample and looked up along every stream.
    """
    if isinstance(pools, CorruptedCorpus):
        pools = stream_pools(pools, cfg.labels)
    for c in cfg.labels:
        if c not in pools or len(pools[c][1]) == 0:
            raise ValueError(f"empty stream pool for {_slug(c)}")
    if "adaptive_lookup" in cfg.policies and pipeline is None:
        raise ValueError("adaptive_lookup needs a pipeline")
    natural = apply_bn(base, table[0])

    cached: dict[str, dict[int, np.ndarray]] = {}
    if "static_natural" in cfg.policies:
        cached["static_natural"] = {c: natural.predict(pools[c][0]) for c in cfg.labels}
    if "adaptive_lookup" in cfg.policies and cfg.detect_mode == "per_image":
        cached["adaptive_lookup"] = {c: pipeline.infer_batch(pools[c][0], "per_image")[0]
                                     for c in cfg.labels}

    rows = []
    for period in cfg.periods:
        batches = make_stream(cfg, period, pools)
        for policy in cfg.policies:
            correct = total = 0
            history: deque = deque(maxlen=cfg.window)
            for c, idx in batches:
                imgs, ys = pools[c][0][idx], pools[c][1][idx]
                if policy in cached:
                    pred = cached[policy][c][idx]
                elif policy == "adaptive_lookup":
                    pred = pipeline.infer_batch(imgs, cfg.detect_mode)[0]
                else:
                    pred = _online_predict(base, table[0], history, imgs, cfg.online_blend)
                    history.append(imgs)
                correct += int((pred == ys).sum())
                total += len(ys)
            row = StreamRow(policy, period, correct / total, total, len(batches))
            rows.append(row)
            if log is not None:
                log(format_stream_row(row))
    return rows


def _online_predict(base, natural_stats, history, imgs, blend):
    if not history:
        return apply_bn(base, natural_stats).predict(imgs)
    est = estimate_bn(base, np.concatenate(history))
    if blend > 0:
        est = merge_bn(natural_stats, est, N=blend, n=1.0 - blend)
    return apply_bn(base, est).predict(imgs)


STREAM_HEADER = "policy\tperiod\taccuracy\timages\tbatches"


def format_stream_row(r: StreamRow) -> str:
    return f"{r.policy}\t{r.period}\t{r.accuracy!r}\t{r.images}\t{r.batches}"


def stream_tsv(rows: list[StreamRow]) -> str:
    return "\n".join([STREAM_HEADER, *map(format_stream_row, rows)]) + "\n"
