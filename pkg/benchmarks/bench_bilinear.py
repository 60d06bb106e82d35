"""Compare the compiled and pure-torch bilinear sampling backends.

    python benchmarks/bench_bilinear.py [--repeat 20] [--json out.json]

Shapes follow a training step of the default model: 16 sequences' worth of
16x16x32 feature maps, sampled at every point x offset x 3x3 grid cell.
"""
import argparse
import json
import timeit

import torch

from anypoint import tensorcore

CASES = {
    # name: (B, H, W, D, K)
    "query-prep": (8, 16, 16, 32, 8 * 9),
    "cca-keys": (16, 16, 16, 32, 8 * 8 * 9),
    "large": (4, 64, 64, 64, 4096),
}


def make_inputs(B, H, W, D, K, dtype, seed=0):
    g = torch.Generator().manual_seed(seed)
    fmap = torch.randn(B, H, W, D, generator=g, dtype=dtype)
    pts = torch.rand(B, K, 2, generator=g, dtype=dtype) * torch.tensor([W - 1, H - 1], dtype=dtype)
    grad = torch.randn(B, K, D, generator=g, dtype=dtype)
    return fmap, pts, grad


def bench(backend, fmap, pts, grad, repeat):
    with tensorcore.use_backend(backend):
        fwd = min(timeit.repeat(lambda: tensorcore.bilinear_forward(fmap, pts), number=1, repeat=repeat))
        bwd = min(timeit.repeat(lambda: tensorcore.bilinear_backward(fmap, pts, grad), number=1, repeat=repeat))
        out = tensorcore.bilinear_forward(fmap, pts)
    return fwd, bwd, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    dtype = getattr(torch, args.dtype)
    if "cython" not in tensorcore.BACKENDS:
        print("compiled kernels not built; only the python backend is available")
    rows = []
    print(f"{'case':<12}{'backend':<9}{'forward ms':>12}{'backward ms':>13}{'speedup f/b':>14}")
    for name, shape in CASES.items():
        fmap, pts, grad = make_inputs(*shape, dtype)
        results = {b: bench(b, fmap, pts, grad, args.repeat) for b in tensorcore.BACKENDS}
        ref_f, ref_b, ref_out = results["python"]
        for b, (f, bw, out) in results.items():
            err = (out - ref_out).abs().max().item()
            sp = f"{ref_f / f:5.1f}x/{ref_b / bw:4.1f}x"
            print(f"{name:<12}{b:<9}{f * 1e3:>12.3f}{bw * 1e3:>13.3f}{sp:>14}   max|diff| {err:.1e}")
            rows.append({"case": name, "shape": shape, "backend": b, "forward_s": f, "backward_s": bw,
                         "max_abs_diff": err})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
