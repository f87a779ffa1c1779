"""Time the compiled and pure-numpy adaptation kernels on the default proxy size.

Usage: python benchmarks/bench_kernels.py [--candidates 128] [--steps 10] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from roma import kernels
from roma.proxy import ProxyNet


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--candidates", type=int, default=128)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    net = ProxyNet.init(args.dim, rng)
    C = args.candidates
    start = np.tile(net.params, (C, 1))
    X = rng.normal(size=(C, args.dim))
    f_prev = kernels.value_input_grad(start, net.sizes, X, backend="python")[0]

    results = {}
    for name in kernels.backends():
        def call():
            return kernels.adapt_pgd(net.params, net.sizes, start, X, f_prev, 1.0, 1.0, 0.005,
                                     0.005 / args.steps, args.steps, backend=name)
        call()  # warm up
        best = min(timeit.repeat(call, number=1, repeat=args.repeat))
        results[name] = best
        per = best / (C * (args.steps + 1)) * 1e6
        print(f"{name:9s} adapt_pgd: {best * 1e3:9.2f} ms  ({per:7.2f} us per candidate-step)")
    if len(results) == 2:
        outs = [kernels.adapt_pgd(net.params, net.sizes, start, X, f_prev, 1.0, 1.0, 0.005,
                                  0.005 / args.steps, args.steps, backend=b)[0] for b in results]
        print(f"speed-up compiled/python: {results['python'] / results['compiled']:.1f}x, "
              f"max |diff| {np.max(np.abs(outs[0] - outs[1])):.2e}")


if __name__ == "__main__":
    main()
