"""A compact tour of the BN-statistics swap on a freshly trained model.

1. train the small CNN on clean synthetic shapes
2. estimate BN statistics for a few corruptions and average them with the
   natural ones
3. show the accuracy each corruption gains when evaluated with its own entry
4. train the spectrum detector and let the pipeline pick entries by itself

The defaults finish in a few minutes on one core.  Raise --n / --epochs for
numbers closer to the acceptance run.

    python3 demos/swap_walkthrough.py
"""
import argparse
import time

import numpy as np

from dynbn import detector as det
from dynbn import experiment as ex
from dynbn.basemodel import BaseTrainConfig, accuracy, apply_bn
from dynbn.corruptions import CorruptionLabel
from dynbn.harness import eval_per_corruption
from dynbn.pipeline import AdaptivePipeline
from dynbn.spectrum import extract_features

SHOWN = ("gaussian_noise", "impulse_noise", "defocus_blur", "brightness", "contrast")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--detector-epochs", type=int, default=20)
    ap.add_argument("--per-cell", type=int, default=40)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    t0 = time.time()
    cfg = ex.DeskConfig(n_images=args.n, n_test=args.n // 6, seed=args.seed,
                        train_per_cell=args.per_cell, test_per_cell=args.per_cell,
                        base=BaseTrainConfig(epochs=args.epochs),
                        detector=det.TrainSchedule(epochs=args.detector_epochs,
                                                   drop_epochs=(int(args.detector_epochs * 0.4),
                                                                int(args.detector_epochs * 0.7))))

    train, test = ex.generate(cfg.n_images, cfg.n_test, cfg.seed)
    base = ex.fit_base(train, cfg)
    print(f"base model: {accuracy(base, test.images, test.labels):.3f} clean accuracy "
          f"[{time.time() - t0:.0f}s]")

    tr, te = ex.corrupt_splits(train, test, cfg)
    table = ex.collect_table(base, tr)
    natural = apply_bn(base, table[0])
    print("\ncorruption           natural  matched")
    for slug in SHOWN:
        code = CorruptionLabel.parse(slug)
        cell = te.by_label(code)
        before = accuracy(natural, cell.images, cell.classes)
        after = accuracy(apply_bn(base, table[code]), cell.images, cell.classes)
        print(f"{slug:<20} {before:7.3f}  {after:7.3f}")

    eps = ex.natural_spectrum(tr)
    model, _ = ex.spectrum_detector(tr, eps, cfg)
    acc, _ = det.evaluate(model, extract_features(te.images, eps), te.corruptions)
    print(f"\ndetector accuracy over 12 classes: {acc:.3f} [{time.time() - t0:.0f}s]")

    pipe = AdaptivePipeline(eps, model, base, table)
    plain, adapted = eval_per_corruption(base, te), eval_per_corruption(pipe, te)
    print(f"corrupted accuracy  base {plain.corrupted_accuracy:.3f}  pipeline {adapted.corrupted_accuracy:.3f}")
    print(f"clean accuracy      base {plain.clean_accuracy:.3f}  pipeline {adapted.clean_accuracy:.3f}")

    img = te.by_label(CorruptionLabel.parse("shot_noise")).images[0]
    cls, code, probs = pipe.infer(img)
    print(f"\none shot-noise image -> routed via {CorruptionLabel(code).slug} "
          f"(p={np.max(probs):.2f}), predicted class {cls}")


if __name__ == "__main__":
    main()
