import numpy as np
import pytest

from dynbn import basemodel as bm
from dynbn import harness as H
from dynbn.corruptions import CORRUPTIONS, SEVERITIES
from dynbn.dataio import CorruptedCorpus, gen_synthetic


def _grid_corpus(per_cell=10, labels=CORRUPTIONS, natural=True, seed=0):
    """Balanced tiny corpus: ``per_cell`` records per (label, severity), classes 0..9 cycling."""
    rng = np.random.default_rng(seed)
    codes = ([0] if natural else []) + [int(c) for c in labels]
    cells = [(c, s) for c in codes for s in SEVERITIES]
    n = len(cells) * per_cell
    corr = np.repeat([c for c, _ in cells], per_cell)
    sev = np.repeat([s for _, s in cells], per_cell)
    classes = np.tile(np.arange(10), n // 10 + 1)[:n]
    images = rng.random((n, 4, 4, 3), dtype=np.float32)
    # the first pixel encodes the class so stubs can read it back
    images[:, 0, 0, 0] = classes
    return CorruptedCorpus(images, classes, corr, sev)


class Perfect:
    def predict(self, images):
        return images[:, 0, 0, 0].astype(int)


class Fixed:
    def predict(self, images):
        return np.zeros(len(images), int)


def test_perfect_and_fixed_class_stubs():
    corpus = _grid_corpus()
    r = H.eval_per_corruption(Perfect(), corpus)
    assert all(e == 0 for e in r.cells.values()) and r.mce == 0
    assert r.clean_accuracy == 1.0 and r.combined_accuracy == 1.0
    f = H.eval_per_corruption(Fixed(), corpus)
    assert all(np.isclose(e, 0.9) for e in f.cells.values())
    assert np.isclose(f.mce, 4.5) and np.isclose(f.corrupted_accuracy, 0.1)
    assert len(f.cells) == 55


def test_missing_cells_are_listed():
    corpus = _grid_corpus()
    drop = ~((corpus.corruptions == 7) & (corpus.severities == 3))
    with pytest.raises(KeyError, match="fog"):
        H.eval_per_corruption(Perfect(), corpus.select(drop))


def test_report_tsv_recomputation_is_exact():
    corpus = _grid_corpus(seed=3)
    rng = np.random.default_rng(0)

    class Noisy:
        def predict(self, images):
            return np.where(rng.random(len(images)) < 0.3, 0, images[:, 0, 0, 0].astype(int))

    report = H.eval_per_corruption(Noisy(), corpus)
    text = report.to_tsv()
    assert text.splitlines()[0] == "metric\tcorruption\tseverity\tvalue"
    parsed, agg = H.CorruptionErrorReport.from_tsv(text)
    assert parsed.cells == report.cells
    for c in parsed.corruptions:
        total = 0.0
        for s in SEVERITIES:
            total += parsed.cells[(c, s)]
        assert total == agg["uCE"][c]
    assert sum(agg["uCE"][c] for c in parsed.corruptions) / len(parsed.corruptions) == agg["mCE"]
    with pytest.raises(ValueError):
        H.CorruptionErrorReport.from_tsv("nope\n")


def test_error_range_checked():
    with pytest.raises(ValueError):
        H.CorruptionErrorReport({(1, 1): 1.5}, 1.0, 1.0, 1.0)


# --- gain matrix ------------------------------------------------------------------

def _small_model_and_table():
    base = bm.init_base(0)
    rng = np.random.default_rng(1)
    table = bm.BNTable({0: base.bn_stats()})
    for c in (1, 2, 3):
        table[c] = bm.BNStats([(rng.normal(0, 0.5, s.channels).astype(np.float32),
                                rng.uniform(0.3, 2, s.channels).astype(np.float32)) for s in base.bn])
    return base, table


def test_gain_matrix_natural_row_is_zero():
    base, table = _small_model_and_table()
    ds = gen_synthetic(60, seed=2)
    corpus = CorruptedCorpus(ds.images, ds.labels, np.repeat([1, 2, 3], 20), np.ones(60, int))
    gm = H.gain_matrix(base, table, corpus, columns=[1, 2, 3])
    assert gm.values.shape == (4, 3)
    assert np.all(gm.values[gm.rows.index(0)] == 0.0)
    direct = bm.accuracy(bm.apply_bn(base, table[2]), ds.images[20:40], ds.labels[20:40]) - gm.baseline[1]
    assert np.isclose(gm.entry(2, 2), direct)
    assert len(gm.diagonal()) == 3 and len(gm.off_diagonal()) == 6
    assert gm.to_tsv().splitlines()[0].split("\t")[1:] == ["gaussian_noise", "shot_noise", "impulse_noise"]
    with pytest.raises(KeyError):
        H.gain_matrix(base, table, corpus, columns=[4])


# --- streaming ----------------------------------------------------------------------

def test_stream_config_validation():
    with pytest.raises(ValueError):
        H.StreamConfig(batch_size=0)
    with pytest.raises(ValueError):
        H.StreamConfig(periods=(0, 2))
    with pytest.raises(ValueError):
        H.StreamConfig(policies=("magic",))
    assert H.StreamConfig().n_batches == 11 * 32


@pytest.mark.parametrize("period", [1, 2, 4, 8, 16, 32])
def test_schedule_is_balanced_and_switches(period):
    cfg = H.StreamConfig()
    sched = H.corruption_schedule(cfg.n_batches, period, cfg.labels, np.random.default_rng(period))
    assert len(sched) == 352
    np.testing.assert_array_equal(np.bincount(sched, minlength=12)[1:], np.full(11, 32))
    segs = sched.reshape(-1, period)
    assert np.all(segs == segs[:, :1])
    assert np.all(segs[1:, 0] != segs[:-1, 0])


def test_streams_consume_identical_samples_for_every_period():
    cfg = H.StreamConfig(seed=5)
    pools = {c: (np.zeros((100, 1)), np.arange(100)) for c in cfg.labels}
    used = []
    for period in cfg.periods:
        batches = H.make_stream(cfg, period, pools)
        assert all(len(idx) == 16 for _, idx in batches)
        used.append(sorted((c, int(i)) for c, idx in batches for i in idx))
    assert all(u == used[0] for u in used[1:])


def test_stream_eval_policies_on_tiny_stream():
    base, table = _small_model_and_table()
    ds = gen_synthetic(48, seed=6)
    pools = {c: (ds.images[(c - 1) * 16:c * 16], ds.labels[(c - 1) * 16:c * 16]) for c in (1, 2, 3)}

    class Oracle:
        def infer_batch(self, images, mode):
            code = next(c for c in pools if np.array_equal(pools[c][0][:0].shape, images[:0].shape)
                        and any(np.array_equal(images[0], p) for p in pools[c][0]))
            return bm.apply_bn(base, table[code]).predict(images), np.full(len(images), code), None

    cfg = H.StreamConfig(batch_size=4, periods=(1, 3), labels=(1, 2, 3), window=2)
    rows = H.stream_eval(cfg, base, table, Oracle(), pools)
    assert [(r.policy, r.period) for r in rows] == [(p, k) for k in (1, 3) for p in H.POLICIES]
    assert all(r.batches == 9 and r.images == 36 for r in rows)
    static = [r.accuracy for r in rows if r.policy == "static_natural"]
    assert static[0] == static[1]
    text = H.stream_tsv(rows)
    assert text.splitlines()[0] == H.STREAM_HEADER and len(text.splitlines()) == 7


def test_online_window_first_batch_uses_natural_stats():
    base, table = _small_model_and_table()
    imgs = gen_synthetic(8, seed=1).images
    from collections import deque
    pred = H._online_predict(base, table[0], deque(), imgs, 0.0)
    assert np.array_equal(pred, base.predict(imgs))
    hist = deque([imgs[:4]])
    pred = H._online_predict(base, table[0], hist, imgs, 0.0)
    assert np.array_equal(pred, bm.apply_bn(base, bm.estimate_bn(base, imgs[:4])).predict(imgs))


def test_stream_errors():
    base, table = _small_model_and_table()
    cfg = H.StreamConfig(labels=(1, 2), policies=("static_natural",))
    with pytest.raises(ValueError):
        H.stream_eval(cfg, base, table, None, {1: (np.zeros((0, 32, 32, 3)), np.zeros(0)), 2: (np.zeros((1, 32, 32, 3)), np.zeros(1))})
    with pytest.raises(ValueError):
        H.stream_eval(H.StreamConfig(labels=(1, 2)), base, table, None,
                      {c: (np.zeros((2, 32, 32, 3), np.float32), np.zeros(2, int)) for c in (1, 2)})
