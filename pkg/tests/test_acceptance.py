"""Acceptance criteria, each at its stated tolerance; one PASS/FAIL line per criterion."""
import time

import numpy as np

from conftest import record
from dynbn import basemodel as bm
from dynbn import detector as det
from dynbn import dataio as io
from dynbn import numerics as nx
from dynbn.cli import main as cli_main
from dynbn.corruptions import NOISE_LABELS
from dynbn.dataio import gen_synthetic
from oracles import conv2d_loops, dft2_direct, numeric_grad, rel_error

MIN = 60.0


def test_criterion_01_fft_oracle():
    rng = np.random.default_rng(0)
    err = fft_cpu = 0.0
    for n in (8, 16):
        x = rng.standard_normal((n, n))
        # the runtime bound is on fft2, not on the quadruple-loop oracle
        t = time.process_time()
        got = nx.fft2(x)
        fft_cpu += time.process_time() - t
        err = max(err, float(np.max(np.abs(got - dft2_direct(x)))))
    ok = err < 1e-4 and fft_cpu < 1.0
    record("1 FFT oracle", ok, f"max abs err {err:.2e} (< 1e-4), fft2 cpu {fft_cpu:.4f}s (< 1s)")
    assert ok


def _grad_errors():
    rng = np.random.default_rng(1)
    errs = {}

    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 5))
    b = rng.standard_normal(5)
    proj = rng.standard_normal((4, 5))
    _, cache = nx.dense_forward(x, w, b)
    dx, dw, db = nx.dense_backward(proj, cache)
    loss = lambda: float((nx.dense(x, w, b) * proj).sum())  # noqa: E731
    errs["dense"] = max(rel_error(dx, numeric_grad(loss, x)), rel_error(dw, numeric_grad(loss, w)),
                        rel_error(db, numeric_grad(loss, b)))

    xc = rng.standard_normal((2, 3, 6, 6))
    wc = rng.standard_normal((4, 3, 3, 3))
    bc = rng.standard_normal(4)
    pc = rng.standard_normal((2, 4, 6, 6))
    assert rel_error(nx.conv2d(xc, wc, bc, 1, 1), conv2d_loops(xc, wc, bc, 1, 1)) < 1e-12
    _, cache = nx.conv2d_forward(xc, wc, bc, 1, 1)
    dx, dw, db = nx.conv2d_backward(pc, cache)
    loss = lambda: float((nx.conv2d(xc, wc, bc, 1, 1) * pc).sum())  # noqa: E731
    errs["conv"] = max(rel_error(dx, numeric_grad(loss, xc)), rel_error(dw, numeric_grad(loss, wc)),
                       rel_error(db, numeric_grad(loss, bc)))

    xb = rng.standard_normal((4, 3, 3, 3))
    st = nx.BNLayerState(np.zeros(3), np.ones(3), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3))
    pb = rng.standard_normal(xb.shape)
    _, cache = nx.batchnorm_forward(xb, st, "train")
    dx, dg, db = nx.batchnorm_backward(pb, cache)
    loss = lambda: float((nx.batchnorm(xb, st, "train") * pb).sum())  # noqa: E731
    errs["bn-train"] = max(rel_error(dx, numeric_grad(loss, xb)), rel_error(dg, numeric_grad(loss, st.gamma)),
                           rel_error(db, numeric_grad(loss, st.beta)))

    # keep inputs away from the kink so the finite difference is well defined
    xr = rng.standard_normal((5, 7))
    xr[np.abs(xr) < 0.05] = 0.5
    pr = rng.standard_normal(xr.shape)
    _, mask = nx.relu_forward(xr)
    errs["relu"] = rel_error(nx.relu_backward(pr, mask), numeric_grad(lambda: float((nx.relu(xr) * pr).sum()), xr))

    z = rng.standard_normal((5, 4))
    y = np.array([0, 3, 1, 1, 2])
    g = nx.softmax_xent(z, y)[1]
    errs["softmax-xent"] = rel_error(g, numeric_grad(lambda: nx.softmax_xent(z, y)[0], z))
    return errs


def test_criterion_02_gradient_checks():
    t = time.process_time()
    errs = _grad_errors()
    cpu = time.process_time() - t
    worst = max(errs.values())
    ok = worst < 1e-3 and cpu < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record("2 gradient checks", ok, f"{detail} (all < 1e-3), cpu {cpu:.2f}s (< 10s)")
    assert ok


def test_criterion_03_bn_swap_exactness():
    t = time.process_time()
    m = bm.init_base(0)
    rng = np.random.default_rng(2)
    for s in m.bn:
        s.gamma[:] = rng.uniform(0.5, 1.5, s.channels)
        s.beta[:] = rng.normal(0, 0.2, s.channels)
    stats = bm.BNStats([(rng.normal(0, 1, s.channels).astype(np.float32),
                         rng.uniform(0.1, 3, s.channels).astype(np.float32)) for s in m.bn])
    direct = bm.BaseCNN({k: v.copy() for k, v in m.params.items()},
                        [nx.BNLayerState(mn.copy(), vr.copy(), s.gamma.copy(), s.beta.copy(), s.eps)
                         for s, (mn, vr) in zip(m.bn, stats.layers)])
    x = gen_synthetic(16, seed=3).images
    exact = bm.apply_bn(m, stats).logits(x).tobytes() == direct.logits(x).tobytes()

    z, one = np.zeros(2, np.float32), np.ones(2, np.float32)
    merged = bm.merge_bn(bm.BNStats([(z, one)]), bm.BNStats([(np.full(2, 4, np.float32), np.full(2, 3, np.float32))]))
    hand = np.array_equal(merged.layers[0][0], np.full(2, 2, np.float32)) and \
        np.array_equal(merged.layers[0][1], np.full(2, 2, np.float32))
    weighted = bm.merge_bn(bm.BNStats([(z, one)]), bm.BNStats([(np.full(2, 4, np.float32), one)]), N=3, n=1)
    hand = hand and np.array_equal(weighted.layers[0][0], one)
    cpu = time.process_time() - t
    ok = exact and hand and cpu < 1.0
    record("3 BN-swap exactness", ok, f"view==direct bit-exact {exact}, merge hand cases {hand}, cpu {cpu:.2f}s (< 1s)")
    assert ok


def test_criterion_04_detector_quality(desk):
    acc, _ = desk.detector_eval
    pixel = desk.pixel_accuracy
    cpu = desk.cpu["detector"] + desk.cpu["pixel"]
    ok = acc >= 0.45 and acc - pixel >= 0.15 and cpu <= 10 * MIN
    record("4 detector quality", ok,
           f"val acc {acc:.4f} (>= 0.45), raw-pixel {pixel:.4f}, gap {100 * (acc - pixel):.1f} pts (>= 15), "
           f"cpu {cpu:.0f}s (<= 600s)")
    assert ok


def test_criterion_05_noise_containment(desk):
    _, cm = desk.detector_eval
    share = det.family_confinement(cm, [int(c) for c in NOISE_LABELS])
    ok = share >= 0.5
    record("5 noise-family containment", ok, f"{share:.3f} of noise errors stay in the noise family (>= 0.5)")
    assert ok


def test_criterion_06_adaptation_gain(desk):
    gm = desk.gain
    diag = gm.diagonal()
    wins = int((diag >= 0.03).sum())
    base, pipe = desk.reports
    lift = pipe.corrupted_accuracy - base.corrupted_accuracy
    drop = base.clean_accuracy - pipe.clean_accuracy
    cpu = sum(desk.cpu[k] for k in ("base", "table", "gain", "eval"))
    ok = wins >= 7 and lift >= 0.03 and drop <= 0.02 and cpu <= 15 * MIN
    record("6 adaptation gain", ok,
           f"{wins}/11 corruptions gain >= 3 pts (>= 7), corrupted {base.corrupted_accuracy:.4f} -> "
           f"{pipe.corrupted_accuracy:.4f} (+{100 * lift:.2f} pts, >= 3), clean drop {100 * drop:.2f} pts (<= 2), "
           f"cpu {cpu:.0f}s (<= 900s)")
    assert ok


def test_criterion_07_gain_matrix_structure(desk):
    gm = desk.gain
    zero_row = bool(np.all(gm.values[gm.rows.index(0)] == 0.0))
    diag, off = float(gm.diagonal().mean()), float(gm.off_diagonal().mean())
    noise = [int(c) for c in NOISE_LABELS]
    intra = float(np.mean([gm.entry(i, j) for i in noise for j in noise if i != j]))
    ok = zero_row and diag > off and intra > 0
    record("7 gain-matrix structure", ok,
           f"natural row zero {zero_row}, diag mean {diag:.4f} > off-diag mean {off:.4f}, intra-noise {intra:.4f} (> 0)")
    assert ok


def test_criterion_08_streaming(desk):
    rows = desk.stream
    acc = {(r.policy, r.period): r.accuracy for r in rows}
    adaptive = [acc["adaptive_lookup", k] for k in (1, 2, 4, 8, 16, 32)]
    spread = max(adaptive) - min(adaptive)
    online_gap = acc["online_bn_window", 32] - acc["online_bn_window", 1]
    agree = abs(acc["online_bn_window", 32] - acc["adaptive_lookup", 32])
    cpu = desk.cpu["stream"]
    ok = spread < 0.02 and online_gap >= 0.05 and agree <= 0.03 and cpu <= 10 * MIN
    record("8 streaming", ok,
           f"adaptive spread {100 * spread:.2f} pts (< 2), online K=32 - K=1 {100 * online_gap:.2f} pts (>= 5), "
           f"|online - adaptive| at K=32 {100 * agree:.2f} pts (<= 3), cpu {cpu:.0f}s (<= 600s)")
    assert ok


def _format_checks():
    ds = gen_synthetic(20, seed=4)
    raw = io.serialize_cifar10_bin(ds)
    back = io.parse_cifar10_bin(raw)
    cifar = np.array_equal(io.to_uint8(back.images), io.to_uint8(ds.images)) and np.array_equal(back.labels, ds.labels)
    for bad in (raw[:-5], bytes([11]) + raw[1:]):
        try:
            io.parse_cifar10_bin(bad)
            cifar = False
        except io.CifarFormatError:
            pass

    rng = np.random.default_rng(5)
    chunks = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(7, dtype=np.int32), "c": np.arange(5, dtype=np.uint8)}
    blob = io.encode_container("test", chunks)
    kind, out = io.decode_container(blob)
    bnad = kind == "test" and all(out[k].tobytes() == v.tobytes() and out[k].dtype == v.dtype for k, v in chunks.items())

    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x40
    try:
        io.decode_container(bytes(flipped))
        crc = False
    except io.ChecksumError:
        crc = True

    crashes = 0
    for cut in range(len(blob)):
        try:
            io.decode_container(blob[:cut])
            crashes += 1
        except io.BNADError:
            pass
        except Exception:
            crashes += 1
    return cifar, bnad, crc, crashes


def test_criterion_09_formats():
    cifar, bnad, crc, crashes = _format_checks()
    ok = cifar and bnad and crc and crashes == 0
    record("9 formats", ok, f"cifar roundtrip+malformed {cifar}, BNAD bit-exact {bnad}, CRC detected {crc}, "
                            f"truncations escaping BNADError {crashes}")
    assert ok


def _cli_run(root):
    root.mkdir()
    data = str(root)
    steps = [
        ["gen-data", "--n", "660", "--n-test", "110", "--seed", "11", "--data", data],
        ["corrupt", "--per-cell", "4", "--test-per-cell", "2", "--seed", "11", "--data", data],
        ["train-base", "--epochs", "1", "--seed", "11", "--data", data],
        ["eps", "--seed", "11", "--data", data],
        ["train-detector", "--epochs", "2", "--seed", "11", "--data", data,
         "--report", str(root / "detector.tsv")],
        ["collect-bn", "--seed", "11", "--data", data],
        ["eval", "--seed", "11", "--data", data, "--report", str(root / "eval.tsv")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


def test_criterion_10_determinism(tmp_path, capsys):
    a = _cli_run(tmp_path / "a")
    b = _cli_run(tmp_path / "b")
    capsys.readouterr()
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    expected = {"base.bnad", "detector.bnad", "table.bnad", "eps.bnad", "eval.tsv"}
    ok = not diff and expected <= a.keys()
    record("10 determinism", ok, f"{len(a)} artifacts compared ({', '.join(sorted(a))}), differing: {diff or 'none'}")
    assert ok
