"""Two ablations on planted models.

Masking: when the biased experts also store facts, masking the ten
highest-scoring experts costs more accuracy than masking ten random ones,
and masking the ten lowest-scoring experts costs least.

Breadth: with bias spread over twenty experts, penalising only the top five
moves preference less than penalising the top twenty.

    python demos/masking_and_breadth.py
"""

from farelab.capture import aggregate, capture_run
from farelab.intervention import group_masking_experiment, synthetic_ablation
from farelab.planted import BiasPlant, PlantSpec, make_eval_bundle, planted_setup
from farelab.profiling import compute_metrics, fsp_score
from farelab.sensitivity import ProfileTransform

FEMALE = ("gender", "female")


def profile_of(setup):
    return fsp_score(compute_metrics(aggregate(capture_run(setup.model, setup.suite))))


def masking():
    spec = PlantSpec.spread(1, list(range(1, 31, 3)), FEMALE, 0.05, entangled=True)
    setup = planted_setup(spec, axes=("gender",), seed=0, n_experts=32, top_k=12, n_layers=2,
                          moe_layer_indices=(1,))
    rows = group_masking_experiment(setup.model, profile_of(setup), group_size=10, n_random_seeds=5,
                                    bundle=make_eval_bundle(setup))
    print("masking 10 experts (utility change in points)")
    for r in rows:
        print(f"  {r.condition:14s} dUtil={r.delta_utility:+6.1f}  dPref={r.delta_preference:+6.1f}")


def breadth():
    plants = [BiasPlant(layer, e, FEMALE, 0.02) for layer in (1, 2) for e in range(1, 31, 3)]
    spec = PlantSpec(biased_experts=plants, breadth=len(plants), knowledge_experts=[(1, 0), (2, 0)])
    setup = planted_setup(spec, axes=("gender",), n_experts=32, top_k=12, n_layers=3,
                          moe_layer_indices=(1, 2), seed=0)
    conditions = [(f"top-{k}", ProfileTransform.top_k(k)) for k in (5, 10, 20)]
    conditions.append(("alpha=1.0 (FSP)", ProfileTransform.identity()))
    rows = synthetic_ablation(setup.model, profile_of(setup), conditions, make_eval_bundle(setup), lam=1.0)
    print("\npenalty breadth at lambda=1 (preference change in points)")
    for r in rows:
        print(f"  {r.condition:16s} dPref={r.delta_preference:+6.2f}  PPL x{r.ppl_ratio:.3f}")


if __name__ == "__main__":
    masking()
    breadth()
