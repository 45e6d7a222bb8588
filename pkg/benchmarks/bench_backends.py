"""Compare the compiled and numpy kernel backends.

Times each kernel on both backends, then end-to-end forward/backward and
em_fit_v by re-running this script in a subprocess with DEEPGMM_BACKEND set.

    python3 benchmarks/bench_backends.py [--size 64] [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(size, repeat):
    from deepgmm.kernels import available_backends

    rng = np.random.default_rng(0)
    x = rng.normal(size=(size * size, 3))
    means = rng.normal(size=(4, 3))
    var = rng.uniform(0.5, 2.0, size=(4, 3))
    act = rng.normal(size=(1, 16, size, size))
    cols = rng.normal(size=(size * size, 16 * 9))
    backends = available_backends()
    rows = []
    for name, mod in backends.items():
        pooled, idx = mod.maxpool2_forward(act)
        timings = {
            "log_gauss_table": best_of(lambda: mod.log_gauss_table(x, means, var), repeat),
            "im2col": best_of(lambda: mod.im2col(act, 3, 1), repeat),
            "col2im": best_of(lambda: mod.col2im(cols, act.shape, 3, 1), repeat),
            "maxpool2_forward": best_of(lambda: mod.maxpool2_forward(act), repeat),
            "maxpool2_backward": best_of(lambda: mod.maxpool2_backward(pooled, idx), repeat),
        }
        rows.append((name, timings))
    return rows


def end_to_end(size, repeat):
    from deepgmm.data import generate_synthetic, separated_spec
    from deepgmm.image import normalize_image
    from deepgmm.kernels import BACKEND
    from deepgmm.losses import nll_v_and_grad
    from deepgmm.network import NetworkConfig, backward, forward, init_state
    from deepgmm.svgmm import em_fit_v

    img, _ = generate_synthetic(separated_spec(3, 1, size, gap=3.0, seed=0, noise=0.05))
    img = normalize_image(img)
    cfg = NetworkConfig(1, 3, depth=2, base_width=8)
    state = init_state(cfg, 0)
    means = np.array([[-1.0], [0.0], [1.0]])
    var = np.full((3, 1), 0.3)

    def step():
        w = forward(state, cfg, img).weights
        _, g = nll_v_and_grad(img.pixels, w, means, var)
        backward(state, cfg, img, g)

    return {
        "backend": BACKEND,
        "forward": best_of(lambda: forward(state, cfg, img), repeat),
        "forward_backward": best_of(step, repeat),
        "em_fit_v": best_of(lambda: em_fit_v(img, 3, seed=0), repeat),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--e2e-only", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.e2e_only:
        print(json.dumps(end_to_end(args.size, args.repeat)))
        return

    print(f"kernels, {args.size}x{args.size}, best of {args.repeat} (ms)")
    rows = kernel_rows(args.size, args.repeat)
    names = list(rows[0][1])
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b, _ in rows))
    for k in names:
        print(f"{k:<20}" + "".join(f"{t[k] * 1e3:>12.3f}" for _, t in rows))

    print(f"\nend to end, depth-2 width-8 U-Net, K=3 (ms)")
    results = []
    for backend in [b for b, _ in rows]:
        env = dict(os.environ, DEEPGMM_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, __file__, "--e2e-only", "--size", str(args.size), "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        )
        results.append(json.loads(out.stdout))
    print(f"{'stage':<20}" + "".join(f"{r['backend']:>12}" for r in results))
    for stage in ("forward", "forward_backward", "em_fit_v"):
        print(f"{stage:<20}" + "".join(f"{r[stage] * 1e3:>12.3f}" for r in results))


if __name__ == "__main__":
    main()
