"""Per-image distillation + aggregation cost, compiled core vs numpy fallback.

Workload matches the cost budget: hw = 196 patches, C = 60 classes, K <= 5
queries per class, L = 4 attention layers, similarities already cached.

    python benchmarks/bench_kernels.py [--repeat 20] [--classes 60] [--per-class 5]
"""

import argparse
import time

import numpy as np

from vipseg import kernels


def make_workload(seed=0, hw=196, n_classes=60, per_class=5, layers=4, dim=64):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, per_class + 1, size=n_classes)
    group_ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    q = int(group_ptr[-1])
    cls = np.repeat(np.arange(n_classes), sizes)
    tokens = rng.normal(size=(hw, dim))
    text = rng.normal(size=(q, dim))
    tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    sims = tokens @ text.T
    gsims = rng.uniform(-0.2, 0.4, size=q)
    att = rng.random((layers, hw, hw)) ** 4
    att /= att.sum(axis=2, keepdims=True)
    return {"sims": sims, "gsims": gsims, "attn": att, "cls": cls, "anchors": group_ptr[:-1], "group_ptr": group_ptr}


def run_workload(impl, wl, alpha=2.0, beta=2, threshold=0.4, scale=100.0, tau=4.0):
    logits = scale * wl["sims"]
    w, _ = impl.transition_matrix(wl["attn"].mean(axis=0), alpha)
    vg, sc, _ = impl.score_substitutions(logits[:, wl["anchors"]], logits, wl["cls"], w, beta, threshold)
    probs = impl.softmax_rows(logits)
    fused = impl.aggregate_groups(probs, wl["gsims"], wl["group_ptr"], tau, impl.AGG_FREE_ENERGY)
    return vg, sc, fused


def time_impl(impl, wl, repeat):
    run_workload(impl, wl)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        run_workload(impl, wl)
        times.append(time.perf_counter() - t0)
    return 1000 * np.median(times), 1000 * np.min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--classes", type=int, default=60)
    ap.add_argument("--per-class", type=int, default=5)
    args = ap.parse_args()
    wl = make_workload(n_classes=args.classes, per_class=args.per_class)
    impls = kernels.implementations()
    print(f"queries={int(wl['group_ptr'][-1])} hw={wl['sims'].shape[0]} classes={args.classes}")
    results = {}
    for name, impl in impls.items():
        med, best = time_impl(impl, wl, args.repeat)
        results[name] = run_workload(impl, wl)
        print(f"{name:>7}: median {med:7.2f} ms  best {best:7.2f} ms")
    if len(results) > 1:
        ref = results["numpy"]
        for name, out in results.items():
            diff = max(float(np.nanmax(np.abs(a - b))) for a, b in zip(out, ref))
            print(f"{name:>7}: max |diff| vs numpy = {diff:.2e}")


if __name__ == "__main__":
    main()
