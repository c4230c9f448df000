"""Compare the two kernel backends on a representative network.

Each backend runs in its own subprocess because the choice is frozen at
import time via the DIRAD_BACKEND environment variable.

Usage: python3 benchmarks/bench_kernels.py [--reps N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

HERE = os.path.abspath(__file__)


def build_net(n_inputs=196, n_outputs=10, n_hidden=30, n_extra_edges=400, seed=0):
    import numpy as np

    from dirad.network import MODULATORY, Network

    rng = np.random.default_rng(seed)
    net = Network.fresh(n_inputs, n_outputs)
    hidden = []
    for _ in range(n_hidden):
        h = net.insert_node(MODULATORY)
        net.nodes[h].K = float(rng.uniform(0.5, 2.0))
        hidden.append(h)
    for h in hidden:
        for _ in range(3):
            src = int(rng.integers(0, n_inputs))
            if (src, h, 0) not in net.edges:
                net.insert_edge(src, h, 0, float(rng.normal()))
        out = int(rng.choice(net.outputs))
        net.insert_edge(h, out, 0, float(rng.normal()))
    ids = sorted(net.nodes)
    added = 0
    while added < n_extra_edges:
        src, dst = rng.choice(ids, size=2)
        node = net.nodes[dst]
        if node.kind == 0 or net.would_create_cycle(src, dst):
            continue
        term = int(rng.integers(0, 2)) if node.kind == MODULATORY else 0
        if (src, dst, term) in net.edges:
            continue
        net.insert_edge(src, dst, term, float(rng.normal()))
        added += 1
    return net


def run_inner(reps: int) -> None:
    import numpy as np

    from dirad import kernels
    from dirad.engine import backward_pass, compiled, forward_pass

    net = build_net()
    rng = np.random.default_rng(1)
    batch = rng.uniform(size=(100, len(net.inputs)))
    targets = rng.uniform(size=(100, len(net.outputs)))
    cn = compiled(net)

    # warm-up (includes JIT compilation when the numba path is active)
    acts = forward_pass(net, batch)
    backward_pass(net, acts, targets, 0.01)

    start = time.perf_counter()
    for _ in range(reps):
        kernels.forward_arrays(cn, batch)
    fwd = (time.perf_counter() - start) / reps

    a, z0, z1 = kernels.forward_arrays(cn, batch)
    start = time.perf_counter()
    for _ in range(reps):
        kernels.backward_arrays(cn, a, z0, z1, targets, 0.01)
    bwd = (time.perf_counter() - start) / reps

    print(json.dumps({
        "backend": kernels.BACKEND,
        "nodes": len(net.nodes),
        "edges": len(net.edges),
        "forward_ms": fwd * 1e3,
        "backward_ms": bwd * 1e3,
    }))


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=200)
    parser.add_argument("--inner", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.inner:
        run_inner(args.reps)
        return 0

    results = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, DIRAD_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, HERE, "--inner", "--reps", str(args.reps)],
            env=env, capture_output=True, text=True, check=True,
        )
        results[backend] = json.loads(proc.stdout.strip().splitlines()[-1])

    meta = results["numba"]
    print(f"net: {meta['nodes']} nodes, {meta['edges']} edges, "
          f"batch 100, {args.reps} reps")
    print(f"{'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for backend, doc in results.items():
        print(f"{backend:<8} {doc['forward_ms']:>11.3f} {doc['backward_ms']:>12.3f}")
    fwd = results["numpy"]["forward_ms"] / results["numba"]["forward_ms"]
    bwd = results["numpy"]["backward_ms"] / results["numba"]["backward_ms"]
    print(f"numba speedup: forward {fwd:.1f}x, backward {bwd:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
