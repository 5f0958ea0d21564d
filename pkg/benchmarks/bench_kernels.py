"""Time the compiled and pure-Python kernel backends side by side.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32] [--json out.json]

Each kernel runs on CIFAR-sized shapes (first KB block: 3 -> 64 channels,
3x3 kernel, 32x32 input); a full conv training step on a small KB is timed
as well. Outputs of the two backends are also compared bitwise.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from markcl.model import ArchConfig, ClassifierHead, KnowledgeBase
from markcl.numcore import SGD, SgdConfig, Tensor, _backend, backward, cross_entropy


def kernel_cases(batch, rng):
    x = rng.normal(size=(batch, 3, 32, 32))
    cols = rng.normal(size=(batch * 30 * 30, 3 * 9))
    act = rng.normal(size=(batch, 64, 30, 30))
    grad = rng.normal(size=(batch, 64, 15, 15))
    _, idx = _backend.BACKENDS["python"].maxpool_forward(act, 2)
    return {
        "im2col": lambda k: k.im2col(x, 3, 1),
        "col2im": lambda k: k.col2im(cols, x.shape, 3, 1),
        "maxpool_forward": lambda k: k.maxpool_forward(act, 2),
        "maxpool_backward": lambda k: k.maxpool_backward(grad, idx, act.shape, 2),
    }


def train_step_case(batch, rng):
    arch = ArchConfig(mode="conv", input_shape=(3, 32, 32), block_channels=(16, 32), trunk_dim=32)
    kb = KnowledgeBase(arch, rng)
    head = ClassifierHead(arch.trunk_dim, 5, rng)
    params = list(kb.params.values()) + list(head.params.values())
    opt = SGD(params, SgdConfig(learning_rate=0.01))
    x = Tensor(rng.normal(size=(batch,) + arch.input_shape))
    y = rng.integers(0, 5, size=batch)

    def step(_kernels):
        opt.zero_grad()
        backward(cross_entropy(head(kb(x)), y))
        opt.step()
    return step


def _outputs_match(fn):
    a, b = fn(_backend.BACKENDS["python"]), fn(_backend.BACKENDS["compiled"])
    a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20, help="timed calls per kernel and backend")
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--json", help="also write the results here")
    args = parser.parse_args(argv)

    backends = sorted(_backend.BACKENDS)
    if "compiled" not in backends:
        print("compiled extension not built; timing the python backend only", file=sys.stderr)
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.batch, rng)
    cases["conv_train_step"] = train_step_case(args.batch, rng)

    previous = _backend.backend_name()
    results = {}
    try:
        for name, fn in cases.items():
            row = {}
            for b in backends:
                _backend.set_backend(b)
                kernels = _backend.BACKENDS[b]
                fn(kernels)  # warm-up
                row[b] = min(timeit.repeat(lambda: fn(kernels), number=1, repeat=args.repeat)) * 1e3
            if "compiled" in row and name != "conv_train_step":
                row["identical"] = _outputs_match(fn)
            results[name] = row
    finally:
        _backend.set_backend(previous)

    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}{'identical':>11}")
    for name, row in results.items():
        speed = f"{row['python'] / row['compiled']:.2f}x" if "compiled" in row else "-"
        same = {True: "yes", False: "NO"}.get(row.get("identical"), "-")
        print(f"{name:<18}" + "".join(f"{row[b]:>14.3f}" for b in backends) + f"{speed:>10}{same:>11}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"batch": args.batch, "repeat": args.repeat, "results": results}, fh, indent=2, sort_keys=True)
    return 0 if all(r.get("identical", True) for r in results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
