"""Plant five gender-biased experts in a 64-expert layer and check that the
sensitivity profile ranks them at the top.

    python demos/planted_recovery.py [--seed 0]
"""

import argparse

import numpy as np

from farelab.capture import aggregate, capture_run
from farelab.planted import PlantSpec, planted_setup
from farelab.profiling import ard, compute_metrics, fsp_score

PLANTED = [3, 17, 29, 41, 58]
LAYER = 2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = PlantSpec.spread(LAYER, PLANTED, ("gender", "female"), delta=0.05)
    setup = planted_setup(spec, axes=("gender",), n_experts=64, top_k=8, n_layers=4,
                          moe_layer_indices=(0, 1, 2, 3), seed=args.seed, margin=2.0)
    print(f"built planted model, router scales {setup.truth.router_scale}")

    stats = aggregate(capture_run(setup.model, setup.suite))
    metrics = compute_metrics(stats)
    profile = fsp_score(metrics)

    li = profile.layers.index(LAYER)
    order = list(np.argsort(-profile.phi[li], kind="stable"))
    g = stats.groups.index(("gender", "female"))
    shifts = ard(stats)[li, :, g]
    print(f"\ntop-10 experts of layer {LAYER} by phi:")
    for rank, e in enumerate(order[:10], 1):
        mark = "planted" if e in PLANTED else ""
        print(f"  {rank:2d}. expert {e:2d}  phi={profile.phi[li, e]:.3f}  ARD={shifts[e]:.3f}  {mark}")
    worst = max(order.index(e) for e in PLANTED) + 1
    print(f"\nworst rank of a planted expert: {worst}")


if __name__ == "__main__":
    main()
