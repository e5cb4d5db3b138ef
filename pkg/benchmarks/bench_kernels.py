"""Compare the numpy and numba kernel backends.

    python3 benchmarks/bench_kernels.py [--sizes 1000,100000,1000000] [--repeat 20]

Each timing is the best of ``--repeat`` runs after one warm-up call, so the
numba compile cost is excluded. A merge of two toy checkpoints is timed with
each backend at the end.
"""

import argparse
import time

import numpy as np

from alloyforge import kernels, merge
from alloyforge.checkpoint import ModelConfig
from alloyforge.transformer import RopeCache, ToyModel


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, rng):
    a, b = rng.normal(size=n), rng.normal(size=n)
    seq = max(1, n // 64)
    x = rng.normal(size=(seq, 4, 16))
    cache = RopeCache.build(16, seq, 500000.0)
    pos = np.arange(seq)
    return {
        "dot_norms": lambda be: be.dot_norms(a, b),
        "lincomb": lambda be: be.lincomb(a, b, 0.3, 0.7),
        "stats": lambda be: be.stats(a),
        "rope_rotate": lambda be: be.rope_rotate(x, pos, cache.cos, cache.sin, 1.0),
    }


def bench_merge(backend, repeat):
    cfg = ModelConfig(n_layers=4, d_model=128, d_ffn=448, n_heads=8, n_kv_heads=2, vocab_size=1024, max_seq_len=64)
    a = ToyModel.init(cfg, seed=1).to_checkpoint()
    b = ToyModel.init(cfg, seed=2).to_checkpoint()
    saved = kernels.dot_norms, kernels.lincomb
    kernels.dot_norms, kernels.lincomb = backend.dot_norms, backend.lincomb
    try:
        return best_of(lambda: merge.merge_checkpoints(a, b, merge.MergeSchedule.constant(0.5)), repeat)
    finally:
        kernels.dot_norms, kernels.lincomb = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1000,100000,1000000")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    backends = [kernels.numpy_backend]
    if kernels.numba_backend is not None:
        backends.append(kernels.numba_backend)
    else:
        print("numba not importable; timing numpy only")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<12} {'n':>9} " + " ".join(f"{be.name + ' ms':>12}" for be in backends))
    for n in (int(s) for s in args.sizes.split(",")):
        for name, fn in kernel_cases(n, rng).items():
            ms = [best_of(lambda: fn(be), args.repeat) * 1e3 for be in backends]
            print(f"{name:<12} {n:>9} " + " ".join(f"{m:>12.4f}" for m in ms))
    ms = [bench_merge(be, max(1, args.repeat // 5)) * 1e3 for be in backends]
    print(f"{'slerp merge':<12} {'toy':>9} " + " ".join(f"{m:>12.4f}" for m in ms))


if __name__ == "__main__":
    main()
