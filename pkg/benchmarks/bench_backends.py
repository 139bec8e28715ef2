"""Compare the pure-numpy and compiled kernel backends.

Times the four hot kernels on bank shapes spanning the supported range,
then one full online adaptation run per backend. Run from the repo root:

    python3 benchmarks/bench_backends.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from memadapt import backend
from memadapt.adapt import init_adaptation
from memadapt.harness import default_run_config, run_online, train_source


def _time_kernel(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    shapes = [
        ("small", 16, 8, 4),
        ("default", 1024, 8, 5),
        ("wide", 256, 64, 8),
        ("large", 4096, 16, 8),
    ]
    print(f"{'case':<10} {'kernel':<16} " + " ".join(f"{name:>12}" for name in backend.available()))
    for label, n_items, dim, n_q in shapes:
        bank = rng.normal(size=(n_items, dim))
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        bank = np.ascontiguousarray(bank)
        queries = np.ascontiguousarray(rng.normal(size=(n_q, dim)))
        values = np.ascontiguousarray(rng.normal(size=(n_q, dim)))
        scores = np.ascontiguousarray(rng.normal(size=(n_q, n_items)))
        cases = [
            ("softmax_rows", (scores,)),
            ("cross_attention", (queries, bank)),
            ("bank_write", (bank, queries, values, 1e-12)),
            ("bank_read", (bank, queries)),
        ]
        for kernel, args in cases:
            row = []
            for name in backend.available():
                backend.use(name)
                fn = getattr(backend, kernel)
                fn(*args)  # warm up
                row.append(_time_kernel(fn, args, repeats))
            cells = " ".join(f"{t * 1e6:>10.1f}us" for t in row)
            print(f"{label:<10} {kernel:<16} {cells}")
    backend.use("auto")


def bench_online_run():
    cfg = default_run_config(seed=0, stream_length=200, n_source=200, source_epochs=3)
    params, _ = train_source(cfg)
    state, bank = init_adaptation(params, cfg.adapt)
    print(f"\nfull online run ({cfg.stream_length} stream samples, bank {cfg.adapt.n_memory}):")
    finals = {}
    for name in backend.available():
        backend.use(name)
        t0 = time.perf_counter()
        report = run_online(cfg, state, bank)
        elapsed = time.perf_counter() - t0
        finals[name] = report.final_teacher_acc
        print(f"  {name:<10} {elapsed:>7.2f}s  final teacher acc {report.final_teacher_acc:.4f}")
    accs = list(finals.values())
    if len(accs) == 2:
        print(f"  backend accuracy difference: {abs(accs[0] - accs[1]):.2e}")
    backend.use("auto")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5, help="timing repetitions per kernel")
    args = parser.parse_args()
    print(f"available backends: {backend.available()} (active: {backend.active()})\n")
    bench_kernels(args.repeats)
    bench_online_run()


if __name__ == "__main__":
    main()
