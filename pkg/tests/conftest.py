import time
from functools import cached_property

import pytest

from dynbn import detector as det
from dynbn import experiment as ex
from dynbn import harness as H
from dynbn.pipeline import AdaptivePipeline
from dynbn.spectrum import extract_features

VERDICTS: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


class Desk:
    """The desk-scale experiment, each stage computed once and CPU-timed."""

    def __init__(self, cfg: ex.DeskConfig):
        self.cfg = cfg
        self.cpu: dict[str, float] = {}

    def _timed(self, name, fn):
        t = time.process_time()
        out = fn()
        self.cpu[name] = time.process_time() - t
        return out

    @cached_property
    def splits(self):
        return self._timed("data", lambda: ex.generate(self.cfg.n_images, self.cfg.n_test, self.cfg.seed))

    @cached_property
    def corpora(self):
        return self._timed("corrupt", lambda: ex.corrupt_splits(*self.splits, self.cfg))

    @property
    def train_corpus(self):
        return self.corpora[0]

    @property
    def test_corpus(self):
        return self.corpora[1]

    @cached_property
    def eps(self):
        return ex.natural_spectrum(self.train_corpus)

    @cached_property
    def base(self):
        return self._timed("base", lambda: ex.fit_base(self.splits[0], self.cfg))

    @cached_property
    def detector(self):
        return self._timed("detector", lambda: ex.spectrum_detector(self.train_corpus, self.eps, self.cfg)[0])

    @cached_property
    def detector_eval(self):
        return det.evaluate(self.detector, extract_features(self.test_corpus.images, self.eps),
                            self.test_corpus.corruptions)

    @cached_property
    def pixel_accuracy(self):
        def run():
            model, _ = ex.fit_detector(ex.pixel_features(self.train_corpus.images),
                                       self.train_corpus.corruptions, self.cfg)
            return det.evaluate(model, ex.pixel_features(self.test_corpus.images), self.test_corpus.corruptions)[0]
        return self._timed("pixel", run)

    @cached_property
    def table(self):
        return self._timed("table", lambda: ex.collect_table(self.base, self.train_corpus))

    @cached_property
    def gain(self):
        return self._timed("gain", lambda: H.gain_matrix(self.base, self.table, self.test_corpus))

    @cached_property
    def pipeline(self):
        return AdaptivePipeline(self.eps, self.detector, self.base, self.table)

    @cached_property
    def reports(self):
        return self._timed("eval", lambda: (H.eval_per_corruption(self.base, self.test_corpus),
                                            H.eval_per_corruption(self.pipeline, self.test_corpus)))

    @cached_property
    def stream(self):
        cfg = H.StreamConfig(seed=3)
        return self._timed("stream", lambda: H.stream_eval(cfg, self.base, self.table, self.pipeline,
                                                           self.test_corpus))


@pytest.fixture(scope="session")
def desk():
    return Desk(ex.DeskConfig())
