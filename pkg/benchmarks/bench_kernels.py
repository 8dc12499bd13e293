"""Compare the compiled and pure-Python sequential kernels.

Times one forward and backward pass of the LSTM layer and of the fused
posterior sampler at training batch geometry, for every available backend::

    python benchmarks/bench_kernels.py [--H 128] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from rvae import autodiff as ad
from rvae import kernels
from rvae.encoder import EncoderParams, posterior


def lstm_pass(x, weights):
    with ad.Tape() as tape:
        y = ad.lstm(x, *weights)
        tape.backward(ad.tsum(y * y))


def posterior_pass(enc, power, eps):
    with ad.Tape() as tape:
        z, mu, var = posterior(enc, power, eps)
        tape.backward(ad.tsum(z * z) + ad.tsum(var))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=50, help="frames per sequence")
    p.add_argument("--B", type=int, default=32, help="sequences per batch")
    p.add_argument("--F", type=int, default=513)
    p.add_argument("--L", type=int, default=16)
    p.add_argument("--H", type=int, default=128)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    D = 32
    x = rng.standard_normal((args.N, args.B, D))
    s = 1.0 / np.sqrt(args.H)
    weights = (ad.Tensor(rng.uniform(-s, s, (D, 4 * args.H)), True),
               ad.Tensor(rng.uniform(-s, s, (args.H, 4 * args.H)), True),
               ad.Tensor(np.zeros(4 * args.H), True))
    enc = EncoderParams("rnn", args.L, args.F, args.H, rng)
    power = rng.gamma(1.0, 1e-3, (args.N, args.B, args.F))
    eps = rng.standard_normal((args.N, args.B, args.L))

    cases = [("lstm fwd+bwd", lambda: lstm_pass(x, weights)),
             ("posterior fwd+bwd", lambda: posterior_pass(enc, power, eps))]
    print(f"N={args.N} B={args.B} H={args.H} L={args.L} F={args.F}; "
          f"best of {args.repeat}, milliseconds per pass")
    timings = {}
    prev = kernels.BACKEND
    try:
        for backend in kernels.available():
            kernels.use(backend)
            for name, fn in cases:
                fn()
                timings[backend, name] = 1e3 * min(timeit.repeat(fn, number=1,
                                                                  repeat=args.repeat))
    finally:
        kernels.use(prev)
    backends = kernels.available()
    print(f"{'case':<20s}" + "".join(f"{b:>10s}" for b in backends)
          + ("   speedup" if len(backends) > 1 else ""))
    for name, _ in cases:
        row = [timings[b, name] for b in backends]
        line = f"{name:<20s}" + "".join(f"{t:10.2f}" for t in row)
        if len(row) > 1:
            line += f"{row[0] / row[1]:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
