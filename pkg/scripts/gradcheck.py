"""Central finite-difference check of every RCDGCN parameter tensor.

An entry passes when its relative error is at most 1e-4 or its absolute
difference is at most 1e-9 (the precision of the differences themselves).

    python scripts/gradcheck.py --nodes 5 --history 6 --horizon 2 --channels 8
"""
from __future__ import annotations

import argparse

import numpy as np

from rcdgcn import model as M
from rcdgcn import tensor as tn
from rcdgcn.graph import hop_masks, stack_masks
from rcdgcn.synth import corridor_network
from rcdgcn.tensor import Tensor


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--nodes", type=int, default=5)
    ap.add_argument("--history", type=int, default=6)
    ap.add_argument("--horizon", type=int, default=2)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--embed-dim", type=int, default=1)
    ap.add_argument("--hops", type=int, default=3)
    ap.add_argument("--mode", default="ring", choices=("ring", "shared"))
    ap.add_argument("--eps", type=float, default=1e-5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    h = M.Hyper(n_nodes=args.nodes, history=args.history, horizon=args.horizon, n_features=2,
                max_hops=args.hops, embed_dim=args.embed_dim, channels=args.channels,
                attention_mode=args.mode, feature_layout="I:0;O:1", seed=args.seed)
    params = M.init("rcdgcn", h)
    rng = np.random.default_rng(args.seed)
    x = rng.random((2, h.history, h.n_nodes, 1))
    z = rng.random((2, h.history, h.n_nodes, 2))
    y = rng.random((2, h.horizon, h.n_nodes, 1))
    rings = stack_masks(hop_masks(corridor_network(args.nodes, args.seed, max(2, args.nodes // 2), 1), h.max_hops))

    def loss(p: M.ModelParams) -> Tensor:
        return tn.tsum(tn.square(tn.sub(M.forward(p, x, z, rings), Tensor(y))))

    tn.backward(loss(params))
    worst = 0.0
    for name, t in params.tensors.items():
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            with tn.no_grad():
                flat[k] = orig + args.eps
                up = loss(params).item()
                flat[k] = orig - args.eps
                down = loss(params).item()
            flat[k] = orig
            num.reshape(-1)[k] = (up - down) / (2 * args.eps)
        diff = np.abs(t.grad - num)
        # differences at finite-difference precision count as agreement
        rel = np.where(diff <= 1e-9, 0.0, diff / np.maximum(np.abs(num), 1e-8))
        worst = max(worst, float(rel.max()))
        print(f"{name:18s} {str(t.shape):14s} max rel err {rel.max():.2e}  max abs diff {diff.max():.2e}")
    print(f"worst {worst:.2e} ({'ok' if worst <= 1e-4 else 'FAILED'} at 1e-4)")


if __name__ == "__main__":
    main()
