"""Time the compiled conv kernels against the numpy fallback on training-sized shapes."""
import argparse
import json
import logging
import timeit

import numpy as np

from mad_dg.tensor import _pykernels

try:
    from mad_dg.tensor import _ckernels
except ImportError:  # extension not built
    _ckernels = None

log = logging.getLogger("bench_kernels")

# (batch, c_in, c_out, padded side, kernel, stride, dilation), matching the extractor and image branches
SHAPES = [
    (16, 3, 8, 34, 3, 1, 1),
    (16, 8, 16, 18, 3, 1, 1),
    (16, 16, 32, 10, 3, 1, 1),
    (16, 32, 16, 10, 3, 1, 3),
]


def _case(shape, rng):
    b, ci, co, side, k, stride, dil = shape
    span = dil * (k - 1) + 1
    out = (side - span) // stride + 1
    xp = rng.standard_normal((b, ci, side, side))
    w = rng.standard_normal((co, ci, k, k))
    g = rng.standard_normal((b, co, out, out))
    return xp, w, g, stride, dil, out


def bench(impl, case, repeat):
    xp, w, g, stride, dil, out = case
    side = xp.shape[-1]
    calls = {
        "forward": lambda: impl.conv2d_forward(xp, w, stride, dil, out, out),
        "backward_input": lambda: impl.conv2d_backward_input(g, w, stride, dil, side, side),
        "backward_weight": lambda: impl.conv2d_backward_weight(g, xp, stride, dil, w.shape[2], w.shape[3]),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in calls.items()}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results to this path")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        case = _case(shape, rng)
        py = bench(_pykernels, case, args.repeat)
        cy = bench(_ckernels, case, args.repeat) if _ckernels is not None else None
        for op in py:
            row = {"shape": list(shape), "op": op, "python_s": py[op], "cython_s": cy[op] if cy else None}
            row["speedup"] = py[op] / cy[op] if cy else None
            rows.append(row)
            log.info("%-28s %-16s python %8.2f ms  cython %s", shape, op, py[op] * 1e3,
                     "%8.2f ms (x%.1f)" % (cy[op] * 1e3, row["speedup"]) if cy else "n/a")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
