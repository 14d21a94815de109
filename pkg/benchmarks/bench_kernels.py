"""Time each hot kernel under numba and under the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Both versions are imported side by side, so the env flag does not matter here.
Outputs are checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from stdet import _kernels as K


def _cases(rng):
    xp = rng.standard_normal((8, 32, 34, 34)).astype(np.float32)
    cols = K.im2col_numpy(xp, 3, 3, 1)
    x = rng.standard_normal((8, 32, 32, 32)).astype(np.float32)
    out, arg = K.maxpool_forward_numpy(x, 2, 2)
    xy = rng.uniform(0, 600, (400, 2))
    wh = rng.uniform(10, 80, (400, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    classes = rng.integers(0, 3, 400).astype(np.int64)
    gts = boxes[rng.choice(400, 60, replace=False)] + rng.normal(0, 3, (60, 4))
    return {
        "im2col": ((xp, 3, 3, 1), {}),
        "col2im": ((cols, xp.shape, 3, 3, 1), {}),
        "maxpool_forward": ((x, 2, 2), {}),
        "maxpool_backward": ((out, arg, x.shape, 2, 2), {}),
        "nms_keep": ((boxes, classes, 0.45), {}),
        "greedy_match": ((boxes, gts, 0.5), {}),
    }


def _best(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-5, atol=1e-5)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    cases = _cases(np.random.default_rng(args.seed))
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name in K.KERNELS:
        fn_np = getattr(K, f"{name}_numpy")
        fn_nb = getattr(K, f"{name}_numba")
        a, _ = cases[name]
        if not _same(fn_np(*a), fn_nb(*a)):
            raise SystemExit(f"{name}: numba and numpy outputs disagree")
        t_np = _best(fn_np, a, args.repeat)
        t_nb = _best(fn_nb, a, args.repeat)
        print(f"{name:<18} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
