"""Command-line pipeline: generate -> extract -> profile -> select -> intervene
-> evaluate -> ablate -> mask -> report.

Each stage reads the artifacts of earlier stages from the run directory and
writes its own. Every artifact carries the hash of the config that produced
it; a stage refuses to read artifacts from a different config and refuses to
overwrite them. ``report.json`` is deterministic; wall-clock times live only
in ``run_manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .capture import aggregate, capture_run, deserialize_log, serialize_log
from .config import ConfigFieldError, RunConfig, load_config
from .evaluation import EvalBundle, endpoint_summary, evaluate, preference_score
from .intervention import (
    TABLE5_CONDITIONS,
    InterventionSpec,
    ProfileTransform,
    aals_probe_all,
    aals_select,
    group_masking_experiment,
    pareto_search,
    synthetic_ablation,
    write_ablation_csv,
)
from .model import ConfigError, InputError, ModelConfig, load_model, preset, read_model_metadata, save_model
from .planted import BiasPlant, PlantSpec, make_eval_bundle, planted_setup
from .profiling import (
    MetricWeights,
    compute_metrics,
    descriptive_stats,
    fsp_score,
    write_metrics_csv,
)
from .prompts import PromptSet, Vocabulary, length_matched_subset, make_item, make_pair
from .sensitivity import SensitivityProfile
from .stats import bh_correct, bootstrap_ci, paired_permutation_test

log = logging.getLogger("farelab")

STAGES = ("generate", "extract", "profile", "select", "intervene", "evaluate", "ablate", "mask", "report")
ARTIFACT_VERSION = 1
BUNDLED_CONFIG = "desk.yaml"

# artifact file -> stage that writes it
PRODUCER = {
    "model.npz": "generate",
    "ground_truth.json": "generate",
    "suite.json": "generate",
    "bundle.json": "generate",
    "routing_log.jsonl": "extract",
    "routing_log.npz": "extract",
    "metrics.csv": "profile",
    "profile.json": "profile",
    "layer_scores.json": "select",
    "pareto.json": "intervene",
    "eval_report.json": "evaluate",
    "ablation.json": "ablate",
    "ablation.csv": "ablate",
    "masking.json": "mask",
    "report.json": "report",
}


class PipelineError(RuntimeError):
    """Base class for errors that abort a stage."""


class StageDependencyError(PipelineError):
    pass


class HashMismatchError(PipelineError):
    pass


def bundled_config_path() -> Path:
    return Path(str(resources.files("farelab") / "configs" / BUNDLED_CONFIG))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


class Run:
    """A config plus its run directory, with hash-checked artifact I/O."""

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.dir = Path(out_dir)
        self.hash = cfg.config_hash()
        self._cache = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    # --- writing ---------------------------------------------------------
    def _guard(self, name: str) -> Path:
        p = self.path(name)
        if p.exists():
            found = self._hash_of(name)
            if found != self.hash:
                raise HashMismatchError(
                    f"{p} was produced by config {found[:12]}, not {self.hash[:12]}; "
                    "use a fresh --out-dir (artifacts are never overwritten by another config)"
                )
        self.dir.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        p = self._guard(name)
        doc = {"artifact": name, "format_version": ARTIFACT_VERSION, "config_hash": self.hash, **payload}
        p.write_text(_dumps(doc))
        return p

    def write_csv(self, name: str, writer) -> Path:
        """``writer(path)`` writes a CSV; a ``# config_hash=`` line is prepended."""
        p = self._guard(name)
        writer(p)
        p.write_text(f"# config_hash={self.hash}\n" + p.read_text())
        return p

    # --- reading ---------------------------------------------------------
    def _hash_of(self, name: str) -> str | None:
        p = self.path(name)
        if name.endswith(".json"):
            return json.loads(p.read_text()).get("config_hash")
        if name.endswith(".csv"):
            first = p.read_text().split("\n", 1)[0]
            return first.split("=", 1)[1] if first.startswith("# config_hash=") else None
        if name == "model.npz":
            return read_model_metadata(p).get("config_hash")
        if name.startswith("routing_log"):
            return deserialize_log(p).manifest.get("config_hash")
        return None

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageDependencyError(
                f"missing artifact {p}; run stage '{PRODUCER[name]}' first"
            )
        return p

    def check_hash(self, name: str, found) -> None:
        if found != self.hash:
            raise HashMismatchError(
                f"{self.path(name)} has config hash {str(found)[:12]}, expected {self.hash[:12]}"
            )

    def read_json(self, name: str) -> dict:
        if name not in self._cache:
            doc = json.loads(self.require(name).read_text())
            self.check_hash(name, doc.get("config_hash"))
            self._cache[name] = doc
        return self._cache[name]

    def model(self):
        if "model" not in self._cache:
            p = self.require("model.npz")
            self.check_hash("model.npz", read_model_metadata(p).get("config_hash"))
            self._cache["model"] = load_model(p)
        return self._cache["model"]

    def vocab(self) -> Vocabulary:
        return Vocabulary(self.read_json("suite.json")["vocab"])

    def suite(self) -> PromptSet:
        return PromptSet.from_manifest(self.read_json("suite.json")["manifest"], self.vocab())

    def bundle(self) -> EvalBundle:
        doc, vocab = self.read_json("bundle.json"), self.vocab()
        pairs = [make_pair(p["stereo"], p["anti"], p["axis"], vocab) for p in doc["pairs"]]
        items = [make_item(i["question"], i["correct"], i["distractors"], vocab) for i in doc["items"]]
        corpus = [tuple(s) for s in doc["ppl_corpus"]]
        return EvalBundle(pairs, items, corpus, self.cfg.prompts.length_matched)

    def profile(self) -> SensitivityProfile:
        return SensitivityProfile.from_dict(self.read_json("profile.json")["profile"])

    def selected_layers(self) -> frozenset:
        return frozenset(self.read_json("layer_scores.json")["selection"]["layers"])

    def log_name(self) -> str:
        return f"routing_log.{self.cfg.output.log_format}"


# --- stages ----------------------------------------------------------------

def _plant_spec(cfg: RunConfig) -> PlantSpec:
    m = cfg.model
    plants = [BiasPlant(int(b.layer), int(e), tuple(b.group), float(b.delta)) for b in m.biased for e in b.experts]
    return PlantSpec(
        biased_experts=plants,
        knowledge_experts=[tuple(map(int, k)) for k in m.knowledge],
        entangled=m.entangled,
        breadth=max(1, len(plants)),
        push=m.push,
    )


def _base_config(cfg: RunConfig) -> ModelConfig:
    arch = dict(cfg.model.architecture)
    if "moe_layer_indices" in arch:
        arch["moe_layer_indices"] = tuple(arch["moe_layer_indices"])
    try:
        if cfg.model.preset:
            return preset(cfg.model.preset, **arch)
        return ModelConfig(**arch)
    except TypeError as exc:
        raise ConfigFieldError("model.architecture", str(exc)) from None


def cmd_generate(run: Run) -> None:
    cfg = run.cfg
    p = cfg.prompts
    try:
        setup = planted_setup(
            _plant_spec(cfg), axes=tuple(p.axes), n_templates=p.n_templates, n_professions=p.n_professions,
            seed=cfg.seed, margin=cfg.model.margin, n_demographic=p.n_demographic,
            base_config=_base_config(cfg),
        )
    except ValueError as exc:
        raise ConfigFieldError("model", str(exc)) from None
    bundle = make_eval_bundle(setup, ppl_prompts=p.ppl_prompts)
    save_model(setup.model, run._guard("model.npz"), {"config_hash": run.hash})
    run.write_json("ground_truth.json", {"ground_truth": setup.truth.to_dict()})
    run.write_json("suite.json", {"vocab": setup.vocab.to_list(), "manifest": setup.suite.to_manifest()})
    run.write_json("bundle.json", {
        "pairs": [x.to_json() for x in bundle.pairs],
        "items": [x.to_json() for x in bundle.items],
        "ppl_corpus": [list(map(int, s)) for s in bundle.ppl_corpus],
    })
    log.info("generate: %d prompts, %d pairs, %d items, model %s", len(setup.suite), len(bundle.pairs),
             len(bundle.items), setup.model.checksum()[:12])


def cmd_extract(run: Run) -> None:
    model, suite = run.model(), run.suite()
    rlog = capture_run(model, suite, log_id="baseline")
    rlog.manifest["config_hash"] = run.hash
    serialize_log(rlog, run._guard(run.log_name()), run.cfg.output.log_format)
    log.info("extract: %d routing records", len(rlog))


def _load_log(run: Run):
    p = run.require(run.log_name())
    rlog = deserialize_log(p)
    run.check_hash(run.log_name(), rlog.manifest.get("config_hash"))
    return rlog


def cmd_profile(run: Run) -> None:
    pl = run.cfg.pipeline
    stats = aggregate(_load_log(run), mode=pl.aggregation)
    metrics = compute_metrics(stats)
    w = pl.weights
    weights = MetricWeights(w["ard"], w["jsd"], w["pmi"], w["entropy"])
    profile = fsp_score(metrics, weights, log_id="baseline", aggregation=pl.aggregation)
    desc = descriptive_stats(stats, profile)
    run.write_csv("metrics.csv", lambda path: write_metrics_csv(metrics, profile, path))
    run.write_json("profile.json", {
        "profile": profile.to_dict(),
        "descriptive": desc.to_dict(),
        "top_experts": [list(x) for x in profile.ranked_pairs(True)[:10]],
    })
    log.info("profile: Gini %.3f, top-10 share %.3f", desc.gini, desc.top10_share)


def cmd_select(run: Run) -> None:
    pl = run.cfg.pipeline
    scores = aals_probe_all(run.model(), run.bundle(), run.profile(), pl.lambda_probe)
    sel = aals_select(scores, pl.quantile)
    run.write_json("layer_scores.json", {
        "scores": [s.to_dict() for s in scores],
        "quantile": pl.quantile,
        "lambda_probe": pl.lambda_probe,
        "selection": {"layers": sorted(sel.layers), "threshold": sel.threshold, "fallback": sel.fallback},
    })
    log.info("select: layers %s%s", sorted(sel.layers), " (fallback)" if sel.fallback else "")


def cmd_intervene(run: Run) -> None:
    pl = run.cfg.pipeline
    res = pareto_search(run.model(), run.bundle(), run.profile(), run.selected_layers(),
                        pl.lambda_grid, pl.beta)
    run.write_json("pareto.json", {"pareto": res.to_dict()})
    log.info("intervene: lambda* = %g", res.lambda_star)


def _wins(diffs: np.ndarray) -> np.ndarray:
    return (diffs > 0) + 0.5 * (diffs == 0)


def _test_block(name: str, changes: np.ndarray, pl, seed: int) -> dict:
    """Sign-flip test and bootstrap interval for per-unit changes (in points)."""
    t = paired_permutation_test(changes, n_perm=pl.n_perm, seed=seed)
    ci = bootstrap_ci(changes, n_resamples=pl.n_boot, seed=seed)
    return {
        "endpoint": name,
        "n": int(changes.size),
        "delta_pts": 100.0 * float(changes.mean()),
        "p_value": t.p_value,
        "exact": t.exact,
        "n_permutations": t.n_permutations,
        "ci_pts": [100.0 * ci.low, 100.0 * ci.high],
        "ci_level": ci.level,
        "seed": seed,
    }


def cmd_evaluate(run: Run) -> None:
    cfg, pl = run.cfg, run.cfg.pipeline
    model, bundle, profile = run.model(), run.bundle(), run.profile()
    layers = run.selected_layers()
    lam = run.read_json("pareto.json")["pareto"]["lambda_star"]
    spec = None if lam == 0 else InterventionSpec(layers, lam, profile)
    base, new = evaluate(model, bundle), evaluate(model, bundle, spec)

    subsets = {"full": list(bundle.pairs), "length_matched": length_matched_subset(bundle.pairs)}
    pref = {}
    tests = []
    for i, (name, pairs) in enumerate(subsets.items()):
        if not pairs:
            pref[name] = None
            continue
        b, n = preference_score(model, pairs), preference_score(model, pairs, spec)
        pref[name] = {"n_pairs": len(pairs), "baseline": b.preference, "intervened": n.preference,
                      "delta_pts": 100.0 * (n.preference - b.preference)}
        tests.append(_test_block(f"preference_{name}", _wins(n.per_pair_diffs) - _wins(b.per_pair_diffs),
                                 pl, cfg.seed + i))
    util_change = new.utility.per_item.astype(float) - base.utility.per_item.astype(float)
    tests.append(_test_block("utility", util_change, pl, cfg.seed + len(subsets)))
    reject, adjusted = bh_correct([t["p_value"] for t in tests], pl.fdr_q)
    for t, r, a in zip(tests, reject, adjusted):
        t["p_bh"] = float(a)
        t["reject_bh"] = bool(r)

    def endpoints(e):
        return {"preference": e.preference.preference, "utility": e.utility.accuracy, "ppl": e.ppl}

    run.write_json("eval_report.json", {
        "lambda_star": lam,
        "layers": sorted(layers),
        "beta": pl.beta,
        "baseline": endpoints(base),
        "intervened": endpoints(new),
        "summary": endpoint_summary(base, new, pl.beta),
        "subsets": pref,
        "tests": tests,
        "fdr_q": pl.fdr_q,
    })
    s = endpoint_summary(base, new, pl.beta)
    log.info("evaluate: dPref %+.2f pts, dUtil %+.2f pts, PPL x%.3f", s["delta_preference_pts"],
             s["delta_utility_pts"], s["ppl_ratio"])


def cmd_ablate(run: Run) -> None:
    cfg, pl = run.cfg, run.cfg.pipeline
    conds = [(label, ProfileTransform.random(cfg.seed) if t.kind == "random" else t)
             for label, t in TABLE5_CONDITIONS]
    rows = synthetic_ablation(run.model(), run.profile(), conds, run.bundle(), run.selected_layers(),
                              pl.ablation_lambda, pl.n_random_seeds)
    run.write_json("ablation.json", {"lambda": pl.ablation_lambda, "rows": [r.to_dict() for r in rows]})
    run.write_csv("ablation.csv", lambda path: write_ablation_csv(rows, path))
    log.info("ablate: %d conditions", len(rows))


def cmd_mask(run: Run) -> None:
    cfg, pl = run.cfg, run.cfg.pipeline
    rows = group_masking_experiment(run.model(), run.profile(), pl.mask_group_size, pl.n_random_seeds,
                                    run.bundle(), seed=cfg.seed)
    run.write_json("masking.json", {"group_size": pl.mask_group_size,
                                    "rows": [r.to_dict() for r in rows]})
    log.info("mask: " + ", ".join(f"{r.condition} {r.delta_utility:+.1f}" for r in rows))


REPORT_INPUTS = ("ground_truth.json", "profile.json", "layer_scores.json", "pareto.json",
                 "eval_report.json", "ablation.json", "masking.json")


def build_report(run: Run) -> dict:
    docs = {}
    for name in REPORT_INPUTS:
        doc = json.loads(run.require(name).read_text())
        docs[name] = doc
    hashes = {name: d.get("config_hash") for name, d in docs.items()}
    if len(set(hashes.values())) != 1 or run.hash not in hashes.values():
        detail = ", ".join(f"{n}={str(h)[:12]}" for n, h in sorted(hashes.items()))
        raise HashMismatchError(f"artifacts come from different configs ({detail}); expected {run.hash[:12]}")
    model = run.model()
    truth = docs["ground_truth.json"]["ground_truth"]
    planted = {(int(l), e) for l, es in truth["planted"].items() for e in es}
    top = [tuple(x) for x in docs["profile.json"]["top_experts"]]
    ev = docs["eval_report.json"]
    return {
        "farelab_version": __version__,
        "config_hash": run.hash,
        "config": run.cfg.to_dict() | {"output": None},
        "model": {"checksum": model.checksum(), "config": model.config.to_dict()},
        "ground_truth": {"planted": truth["planted"], "knowledge": truth["knowledge"],
                         "planted_in_top10": sum(1 for x in top if x in planted)},
        "profile": {"descriptive": docs["profile.json"]["descriptive"], "top_experts": [list(x) for x in top]},
        "layer_scores": docs["layer_scores.json"]["scores"],
        "selected_layers": docs["layer_scores.json"]["selection"]["layers"],
        "selection_fallback": docs["layer_scores.json"]["selection"]["fallback"],
        "pareto": docs["pareto.json"]["pareto"],
        "lambda_star": docs["pareto.json"]["pareto"]["lambda_star"],
        "evaluation": {k: ev[k] for k in ("baseline", "intervened", "summary", "subsets", "tests", "fdr_q")},
        "ablation": docs["ablation.json"]["rows"],
        "masking": docs["masking.json"]["rows"],
    }


def report_checksum(report: dict) -> str:
    return hashlib.sha256(json.dumps(report, sort_keys=True).encode()).hexdigest()


def cmd_report(run: Run) -> None:
    from .plots import render_plots

    report = build_report(run)
    run.write_json("report.json", {"report": report, "report_checksum": report_checksum(report)})
    if run.cfg.output.plots:
        render_plots(report, run.dir / "plots")
    log.info("report: checksum %s", report_checksum(report)[:16])


COMMANDS = {
    "generate": cmd_generate,
    "extract": cmd_extract,
    "profile": cmd_profile,
    "select": cmd_select,
    "intervene": cmd_intervene,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "mask": cmd_mask,
    "report": cmd_report,
}


def _update_manifest(run: Run, entries: list[dict]) -> None:
    p = run.dir / "run_manifest.json"
    doc = json.loads(p.read_text()) if p.exists() else {"config_hash": run.hash, "stages": []}
    doc["stages"].extend(entries)
    artifacts = {}
    for name in sorted(PRODUCER):
        if run.path(name).exists():
            artifacts[name] = _sha256(run.path(name))
    doc["artifacts"] = artifacts
    report = run.path("report.json")
    if report.exists():
        doc["report_checksum"] = json.loads(report.read_text()).get("report_checksum")
    p.write_text(_dumps(doc))


def run_stages(run: Run, stages) -> None:
    entries = []
    try:
        for name in stages:
            start = datetime.now(timezone.utc)
            t0 = time.perf_counter()
            COMMANDS[name](run)
            entries.append({"stage": name, "started": start.isoformat(),
                            "seconds": round(time.perf_counter() - t0, 3)})
    finally:
        if entries:
            _update_manifest(run, entries)


def cmd_run_all(run: Run) -> None:
    run_stages(run, STAGES)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="farelab", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", nargs="?", choices=[*STAGES, "run-all"],
                    help="stage to run (or run-all); alternatively use --stage")
    ap.add_argument("--config", help=f"YAML run config (default: the bundled {BUNDLED_CONFIG})")
    ap.add_argument("--out-dir", help="run directory (default: output.dir from the config)")
    ap.add_argument("--seed", type=int, help="override the config's top-level seed")
    ap.add_argument("--stage", help="comma-separated stages to run in order, e.g. extract,profile")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"farelab {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command and args.stage:
            raise ConfigFieldError("--stage", "give either a command or --stage, not both")
        if args.command == "run-all":
            stages = list(STAGES)
        elif args.command:
            stages = [args.command]
        elif args.stage:
            stages = [s.strip() for s in args.stage.split(",") if s.strip()]
            bad = [s for s in stages if s not in COMMANDS]
            if bad:
                raise ConfigFieldError("--stage", f"unknown stage {bad[0]!r}; choose from {', '.join(STAGES)}")
        else:
            raise ConfigFieldError("command", "give a stage name, run-all, or --stage")
        cfg = load_config(args.config or bundled_config_path())
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        run = Run(cfg, Path(args.out_dir or cfg.output.dir))
        run_stages(run, stages)
    except (PipelineError, ConfigFieldError, ConfigError, InputError, ValueError, OSError) as exc:
        print(f"farelab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
