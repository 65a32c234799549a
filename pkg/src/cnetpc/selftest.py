"""Invariant suites shared by ``cnetpc selftest`` and the test-suite."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import codec
from . import rangecoder as rc
from .blocktree import Partition, decode_octree, encode_octree, partition
from .colorspace import exhaustive_roundtrip_mismatches
from .models import CoordGraph, ModelBundle, ModelConfig
from .pcloud import SparseTensor, lex_keys, raster_index
from .sparsenn import (
    ResidualBlock,
    SparseConv,
    build_kernel_map,
    grad_check,
    kernel_offsets,
    mask_offsets,
    softmax_ce,
    softmax_ce_backward,
)
from .trainer import synthetic_block


def dense_reference_conv(grid: np.ndarray, weight: np.ndarray, bias: np.ndarray, zeroed=()) -> np.ndarray:
    """Plain dense 3D cross-correlation with zero padding.

    ``grid`` is (d, d, d, Cin); ``weight`` is (k**3, Cin, Cout) indexed by
    offset raster order. Offsets listed in ``zeroed`` are skipped.
    """
    d = grid.shape[0]
    k = round(weight.shape[0] ** (1 / 3))
    h = k // 2
    pad = np.pad(grid, ((h, h), (h, h), (h, h), (0, 0)))
    out = np.zeros((d, d, d, weight.shape[2])) + bias
    for j, (dx, dy, dz) in enumerate(kernel_offsets(k)):
        if j in zeroed:
            continue
        window = pad[h + dx:h + dx + d, h + dy:h + dy + d, h + dz:h + dz + d]
        out += np.einsum("xyzc,co->xyzo", window, weight[j])
    return out


def random_block_coords(rng, d, count):
    idx = np.sort(rng.choice(d ** 3, size=min(count, d ** 3), replace=False))
    return np.stack([idx // (d * d), (idx // d) % d, idx % d], axis=1)


def check_masks() -> str:
    assert mask_offsets(3, "A") == set(range(13, 27))
    assert mask_offsets(3, "B") == set(range(14, 27))
    assert mask_offsets(1, "A") == {0} and mask_offsets(1, "B") == set()
    return "mask offsets ok"


def check_dense_equivalence(cases: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(cases):
        d = 5
        k = (1, 3, 5)[case % 3]
        mask = (None, "A", "B")[case % 3 if k > 1 else 0]
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        coords = random_block_coords(rng, d, int(rng.integers(1, 40)))
        x = rng.standard_normal((len(coords), cin))
        conv = SparseConv(cin, cout, k, mask, rng)
        y, _ = conv.forward(x, build_kernel_map(coords, coords, k))
        grid = np.zeros((d, d, d, cin))
        grid[coords[:, 0], coords[:, 1], coords[:, 2]] = x
        ref = dense_reference_conv(grid, conv.weight.value, conv.bias.value, mask_offsets(k, mask))
        worst = max(worst, float(np.max(np.abs(ref[coords[:, 0], coords[:, 1], coords[:, 2]] - y))))
    return worst


def causality_sweep(blocks: int = 100, seed: int = 0, d: int = 8, trials: int = 3) -> dict[str, int]:
    """Perturbation sweep over random blocks and randomly initialized networks.

    Each trial flips one voxel ``j`` (occupancy) or shifts the channel history
    of one point ``i`` (colour main branch) and requires rows up to and
    including the perturbed one to stay bit-identical. ``sensitive`` counts
    trials where some later row did change.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d=d, channels=4, c_res_blocks=1, k_first=3)
    out = {"checks": 0, "violations": 0, "sensitive": 0}

    def record(ref, new, upto):
        out["checks"] += 1
        out["violations"] += int(not np.array_equal(ref[:upto], new[:upto]))
        out["sensitive"] += int(not np.array_equal(ref[upto:], new[upto:]))

    for b in range(blocks):
        bundle = ModelBundle(cfg, seed=seed + b)
        for net in bundle.nets:
            for p in net.params():  # non-zero heads so outputs are informative
                if not p.value.any():
                    p.value[...] = rng.standard_normal(p.value.shape) * 0.3
                    p.enforce_mask()
        coords = random_block_coords(rng, d, int(rng.integers(2, 30)))
        ridx = raster_index(coords, d)
        base = bundle.occupancy.forward([coords])[0]
        net = bundle.colors[b % 3]
        graph = CoordGraph(coords)
        n = len(coords)
        hist = rng.uniform(-1, 1, (n, 1))
        prev = rng.uniform(-1, 1, (n, net.feature))
        ref = net.forward(graph, hist, prev)[0]
        for _ in range(trials):
            j = int(rng.integers(0, d ** 3))
            if j in set(ridx.tolist()):
                flipped = coords[ridx != j]
            else:
                flipped = np.vstack([coords, [[j // (d * d), (j // d) % d, j % d]]])
                flipped = flipped[np.argsort(lex_keys(flipped))]
            record(base, bundle.occupancy.forward([flipped])[0], j + 1)
            i = int(rng.integers(0, n))
            h2 = hist.copy()
            h2[i] += rng.uniform(0.1, 1.0)
            record(ref, net.forward(graph, h2, prev)[0], i + 1)
    return out


def check_causality(blocks: int = 100, seed: int = 0, d: int = 8) -> int:
    """Number of causality violations in :func:`causality_sweep`."""
    return causality_sweep(blocks, seed, d)["violations"]


def check_gradients(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    d = 4
    coords = random_block_coords(rng, d, 20)
    results = {}
    for mask in (None, "A", "B"):
        conv = SparseConv(2, 3, 3, mask, rng)
        km = build_kernel_map(coords, coords, 3)
        results[f"sparse_conv[{mask}]"] = grad_check(
            lambda x: conv.forward(x, km), conv.backward, conv.params(), rng.standard_normal((len(coords), 2)))
    res = ResidualBlock(3, "B", rng)
    kmaps = {1: build_kernel_map(coords, coords, 1), 3: build_kernel_map(coords, coords, 3)}
    results["residual_block"] = grad_check(lambda x: res.forward(x, kmaps), res.backward, res.params(),
                                           rng.standard_normal((len(coords), 3)))
    targets = rng.integers(0, 5, 12)
    results["softmax_ce"] = grad_check(
        lambda z: (softmax_ce(z, targets)[0], softmax_ce(z, targets)[2]),
        lambda g, cache: softmax_ce_backward(cache, float(g)), [], rng.standard_normal((12, 5)))
    return results


def check_coder(cases: int = 10_000, seed: int = 0) -> int:
    """Random (sequence, CDF schedule) pairs; returns the number of failures."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(cases):
        k = int(rng.integers(2, 40))
        n = int(rng.integers(0, 40))
        probs = rng.dirichlet(np.full(k, float(rng.choice([0.05, 0.5, 5.0]))), size=max(n, 1))
        cdfs = rc.quantize_rows(probs)[:n]
        syms = [int(rng.integers(0, k)) for _ in range(n)]
        data = rc.encode(syms, cdfs)
        ok = rc.decode(data, n, lambda i, _: cdfs[i]) == syms
        bound = sum(rc.symbol_bits(cdfs[i], s) for i, s in enumerate(syms)) + 128
        failures += int(not ok or 8 * len(data) > bound)
    return failures


def random_partition(rng, n: int, log2_block: int = 6) -> Partition:
    cells = 1 << (n - log2_block)
    count = int(rng.integers(1, min(cells ** 3, 40) + 1))
    picks = rng.choice(cells ** 3, size=count, replace=False)
    pts = np.stack([picks // (cells * cells), (picks // cells) % cells, picks % cells], 1) << log2_block
    pts = pts + rng.integers(0, 1 << log2_block, pts.shape)
    pts = pts[np.argsort(lex_keys(pts))]
    cloud = SparseTensor(pts, np.zeros((len(pts), 0)), ())
    return partition(cloud, n, log2_block)


def check_octree(cases: int = 200, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    failures = 0
    for i in range(cases):
        n = 7 + i % 4
        p = random_partition(rng, n)
        failures += int(decode_octree(encode_octree(p), n, 6) != p.origins)
    return failures


def check_codec_roundtrip(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d=8, channels=4, c_res_blocks=1, k_first=3, colorspace="ycocg")
    bundle = ModelBundle(cfg, seed=seed)
    blk = synthetic_block(8, rng, "plane")
    data = codec.encode(blk, bundle, n=4).to_bytes()
    return codec.decode(data, bundle, workers=1).equals(blk)


SUITES: dict[str, Callable[[bool], tuple[bool, str]]] = {
    "masks": lambda quick: (True, check_masks()),
    "dense_equivalence": lambda quick: (lambda e: (e < 1e-12, f"max |err| {e:.2e}"))(
        check_dense_equivalence(20 if quick else 100)),
    "causality": lambda quick: (lambda v: (v == 0, f"{v} violations"))(check_causality(10 if quick else 100)),
    "gradients": lambda quick: (lambda r: (max(r.values()) < 1e-5, f"max rel err {max(r.values()):.2e}"))(
        check_gradients()),
    "coder": lambda quick: (lambda f: (f == 0, f"{f} failures"))(check_coder(500 if quick else 10_000)),
    "ycocg_exhaustive": lambda quick: (lambda m: (m == 0, f"{m} mismatches"))(exhaustive_roundtrip_mismatches()),
    "octree": lambda quick: (lambda f: (f == 0, f"{f} failures"))(check_octree(40 if quick else 200)),
    "codec_roundtrip": lambda quick: (lambda ok: (ok, "lossless" if ok else "mismatch"))(check_codec_roundtrip()),
}


def run_selftest(quick: bool = False, report: Callable[[dict], None] | None = None) -> bool:
    all_ok = True
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = suite(quick)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        if report:
            report({"suite": name, "passed": bool(ok), "detail": detail,
                    "seconds": round(time.perf_counter() - t0, 3)})
    return all_ok
