"""Routing telemetry: capture per-token router state, persist it, and fold it
into neutral-vs-group activation statistics."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import InputError, LayerRouting, Model, RoutingRecord, forward_many, _check_tokens
from .prompts import PromptSet

LOG_SCHEMA = "farelab-routing-log"
LOG_VERSION = 1
MODES = ("selection", "probability")


class ProtocolError(ValueError):
    """The log cannot support the requested statistic."""


class LogParseError(ValueError):
    def __init__(self, path, where, msg: str):
        super().__init__(f"{path}:{where}: {msg}")
        self.where = where


@dataclass(eq=False)
class RoutingLog:
    manifest: dict
    routing: dict[str, dict[int, LayerRouting]]

    @property
    def prompts(self) -> list[dict]:
        return self.manifest["prompts"]

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(self.manifest["moe_layers"])

    @property
    def n_experts(self) -> int:
        return int(self.manifest["n_experts"])

    @property
    def top_k(self) -> int:
        return int(self.manifest["top_k"])

    def condition(self, prompt_id: str):
        meta = self._meta[prompt_id]
        if meta["condition"] == "neutral":
            return ("neutral",)
        return ("demographic", meta["axis"], meta["group"])

    @property
    def _meta(self) -> dict:
        if getattr(self, "_meta_cache", None) is None:
            self._meta_cache = {p["prompt_id"]: p for p in self.prompts}
        return self._meta_cache

    def __len__(self):
        return sum(r.probs.shape[0] for per in self.routing.values() for r in per.values())

    def records(self):
        """Yield ``(prompt_id, condition, RoutingRecord)`` in manifest order."""
        for p in self.prompts:
            pid = p["prompt_id"]
            for lid in self.layers:
                r = self.routing[pid][lid]
                for t in range(r.probs.shape[0]):
                    yield pid, self.condition(pid), RoutingRecord(
                        lid, t, r.logits[t], r.probs[t], tuple(int(e) for e in r.selected[t]),
                        r.weights[t], r.raw_logits[t],
                    )

    def equals(self, other: "RoutingLog") -> bool:
        if self.manifest != other.manifest or set(self.routing) != set(other.routing):
            return False
        for pid, per in self.routing.items():
            if set(per) != set(other.routing[pid]):
                return False
            for lid, r in per.items():
                o = other.routing[pid][lid]
                for name in ("raw_logits", "logits", "probs", "selected", "weights"):
                    if not np.array_equal(getattr(r, name), getattr(o, name)):
                        return False
        return True


def capture_run(model: Model, prompt_set: PromptSet, intervention=None, log_id: str = "") -> RoutingLog:
    prompts = list(prompt_set)
    if not prompts:
        raise ProtocolError("prompt set is empty")
    for p in prompts:
        try:
            _check_tokens(model, p.tokens)
        except InputError as exc:
            raise InputError(f"prompt {p.prompt_id}: {exc}") from None
    outs = forward_many(model, [p.tokens for p in prompts], intervention)
    manifest = {
        "log_id": log_id,
        "model_checksum": model.checksum(),
        "moe_layers": list(model.moe_layers),
        "n_experts": model.config.n_experts,
        "top_k": model.config.top_k,
        "intervention": intervention.describe() if intervention is not None else None,
        "masked": sorted([list(x) for x in model.mask.masked]) if model.mask else [],
        "prompts": [
            {"prompt_id": p.prompt_id, "condition": p.condition, "axis": p.axis, "group": p.group,
             "text": p.text, "n_tokens": p.n_tokens}
            for p in prompts
        ],
    }
    routing = {p.prompt_id: o.routing for p, o in zip(prompts, outs)}
    return RoutingLog(manifest, routing)


@dataclass
class ActivationStats:
    """Activation rates of one routing log.

    ``p_e[i, e]`` is the neutral rate of expert ``e`` at MoE layer
    ``layers[i]``; ``p_e_given_g[g, i, e]`` the rate under group ``groups[g]``.
    ``p_neutral`` / ``p_demo`` are mean routing probability vectors and
    ``freq`` the selection frequency over every captured token.
    """

    layers: tuple[int, ...]
    groups: list[tuple[str, str]]
    mode: str
    p_e: np.ndarray
    p_e_given_g: np.ndarray
    p_g: np.ndarray
    p_neutral: np.ndarray
    p_demo: np.ndarray
    freq: np.ndarray
    n_neutral_tokens: int = 0
    n_group_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_experts(self) -> int:
        return self.p_e.shape[1]


def aggregate(log: RoutingLog, mode: str = "selection", groups=None) -> ActivationStats:
    """Fold a log into activation rates.

    ``mode="selection"`` counts how often each expert is in the top-k set;
    ``mode="probability"`` averages its routing probability. The neutral rate
    uses neutral prompts only, and every token of a demographic prompt counts
    towards that prompt's group.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    L, K = len(log.layers), log.n_experts
    present = []
    for p in log.prompts:
        if p["condition"] != "neutral":
            key = (p["axis"], p["group"])
            if key not in present:
                present.append(key)
    groups = present if groups is None else [tuple(g) for g in groups]
    gidx = {g: i for i, g in enumerate(groups)}
    G = len(groups)

    rate_n = np.zeros((L, K))
    prob_n = np.zeros((L, K))
    rate_g = np.zeros((G, L, K))
    prob_g = np.zeros((G, L, K))
    sel_all = np.zeros((L, K))
    tok_n = 0
    tok_g = np.zeros(G, dtype=np.int64)
    tok_all = 0
    # sorted order makes the fold independent of log ordering
    for p in sorted(log.prompts, key=lambda d: d["prompt_id"]):
        per = log.routing[p["prompt_id"]]
        T = None
        for i, lid in enumerate(log.layers):
            r = per[lid]
            T = r.probs.shape[0]
            sel = r.selection_mask().sum(axis=0)
            use = sel if mode == "selection" else r.probs.sum(axis=0)
            sel_all[i] += sel
            if p["condition"] == "neutral":
                rate_n[i] += use
                prob_n[i] += r.probs.sum(axis=0)
            else:
                g = gidx.get((p["axis"], p["group"]))
                if g is not None:
                    rate_g[g, i] += use
                    prob_g[g, i] += r.probs.sum(axis=0)
        tok_all += T
        if p["condition"] == "neutral":
            tok_n += T
        elif (p["axis"], p["group"]) in gidx:
            tok_g[gidx[(p["axis"], p["group"])]] += T

    if tok_n == 0:
        raise ProtocolError("log has no neutral baseline prompts")
    if G == 0:
        raise ProtocolError("log has no demographic prompts")
    empty = [groups[g] for g in range(G) if tok_g[g] == 0]
    if empty:
        raise ProtocolError(f"groups without prompts: {empty}")
    n_demo_tokens = sum(
        p["n_tokens"] for p in log.prompts if p["condition"] != "neutral"
    )
    return ActivationStats(
        layers=tuple(log.layers),
        groups=list(groups),
        mode=mode,
        p_e=rate_n / tok_n,
        p_e_given_g=rate_g / tok_g[:, None, None],
        p_g=tok_g / n_demo_tokens,
        p_neutral=prob_n / tok_n,
        p_demo=prob_g / tok_g[:, None, None],
        freq=sel_all / tok_all,
        n_neutral_tokens=int(tok_n),
        n_group_tokens=tok_g,
    )


# --- persistence -------------------------------------------------------------

def _record_rows(log: RoutingLog):
    for pid, cond, rec in log.records():
        meta = log._meta[pid]
        yield {
            "prompt_id": pid,
            "condition": meta["condition"],
            "axis": meta["axis"],
            "group": meta["group"],
            "layer": rec.layer_id,
            "pos": rec.position,
            "logits": rec.gate_logits.tolist(),
            "raw_logits": rec.raw_logits.tolist(),
            "probs": rec.probs.tolist(),
            "selected": list(rec.selected),
            "weights": rec.gate_weights.tolist(),
        }


def serialize_log(log: RoutingLog, path, fmt: str | None = None) -> None:
    """Write ``log`` as JSONL (default) or compact ``.npz`` binary."""
    path = Path(path)
    fmt = fmt or ("npz" if path.suffix == ".npz" else "jsonl")
    if fmt == "npz":
        path.write_bytes(_to_npz_bytes(log))
        return
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema": LOG_SCHEMA, "version": LOG_VERSION, "manifest": log.manifest}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in _record_rows(log):
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def log_to_bytes(log: RoutingLog) -> bytes:
    buf = io.StringIO()
    buf.write(json.dumps({"schema": LOG_SCHEMA, "version": LOG_VERSION, "manifest": log.manifest},
                         sort_keys=True) + "\n")
    for row in _record_rows(log):
        buf.write(json.dumps(row, sort_keys=True) + "\n")
    return buf.getvalue().encode()


def _check_header(path, where, header):
    if not isinstance(header, dict) or header.get("schema") != LOG_SCHEMA:
        raise LogParseError(path, where, "not a routing log (schema tag missing)")
    if header.get("version") != LOG_VERSION:
        raise LogParseError(path, where, f"unsupported log version {header.get('version')!r}")
    if "manifest" not in header:
        raise LogParseError(path, where, "header lacks manifest")
    return header["manifest"]


def _assemble(path, manifest, rows_by_prompt) -> RoutingLog:
    layers = manifest["moe_layers"]
    K, k = manifest["n_experts"], manifest["top_k"]
    routing = {}
    for p in manifest["prompts"]:
        pid, T = p["prompt_id"], p["n_tokens"]
        got = rows_by_prompt.get(pid, {})
        per = {}
        for lid in layers:
            rows = got.get(lid, {})
            if sorted(rows) != list(range(T)):
                raise LogParseError(path, "eof", f"truncated log: prompt {pid} layer {lid} has "
                                    f"{len(rows)} of {T} records")
            arrs = [np.array([rows[t][j] for t in range(T)], dtype=np.float64) for j in range(5)]
            if arrs[0].shape != (T, K) or arrs[3].shape != (T, k):
                raise LogParseError(path, "eof", f"prompt {pid} layer {lid}: wrong vector sizes")
            per[lid] = LayerRouting(arrs[1], arrs[0], arrs[2], arrs[3].astype(np.int64), arrs[4])
        routing[pid] = per
    extra = set(rows_by_prompt) - set(routing)
    if extra:
        raise LogParseError(path, "eof", f"records for prompts missing from manifest: {sorted(extra)[:3]}")
    return RoutingLog(manifest, routing)


def deserialize_log(path) -> RoutingLog:
    path = Path(path)
    if path.suffix == ".npz":
        return _from_npz(path)
    rows_by_prompt: dict = {}
    manifest = None
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(path, f"line {i}", f"malformed record ({exc.msg})") from None
            if manifest is None:
                manifest = _check_header(path, f"line {i}", obj)
                continue
            try:
                key = (obj["prompt_id"], int(obj["layer"]), int(obj["pos"]))
                vals = (obj["logits"], obj["raw_logits"], obj["probs"], obj["selected"], obj["weights"])
            except (KeyError, TypeError, ValueError) as exc:
                raise LogParseError(path, f"line {i}", f"malformed record ({exc!r})") from None
            rows_by_prompt.setdefault(key[0], {}).setdefault(key[1], {})[key[2]] = vals
    if manifest is None:
        raise LogParseError(path, "line 1", "empty file")
    return _assemble(path, manifest, rows_by_prompt)


def _to_npz_bytes(log: RoutingLog) -> bytes:
    arrays = {"__header__": np.array(json.dumps(
        {"schema": LOG_SCHEMA, "version": LOG_VERSION, "manifest": log.manifest}, sort_keys=True))}
    for j, lid in enumerate(log.layers):
        for name in ("raw_logits", "logits", "probs", "selected", "weights"):
            arrays[f"L{lid}.{name}"] = np.concatenate(
                [getattr(log.routing[p["prompt_id"]][lid], name) for p in log.prompts]
            )
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    return buf.getvalue()


def _from_npz(path) -> RoutingLog:
    try:
        data = np.load(path, allow_pickle=False)
        files = data.files
        header = json.loads(str(data["__header__"]))
    except Exception as exc:
        raise LogParseError(path, "offset 0", f"unreadable binary log ({exc})") from None
    manifest = _check_header(path, "header", header)
    routing = {p["prompt_id"]: {} for p in manifest["prompts"]}
    with data:
        for lid in manifest["moe_layers"]:
            try:
                cols = {n: data[f"L{lid}.{n}"] for n in ("raw_logits", "logits", "probs", "selected", "weights")}
            except Exception as exc:
                raise LogParseError(path, f"layer {lid}", f"missing or corrupt array ({exc})") from None
            off = 0
            for p in manifest["prompts"]:
                T = p["n_tokens"]
                if off + T > cols["probs"].shape[0]:
                    raise LogParseError(path, f"layer {lid} row {off}", "truncated binary log")
                routing[p["prompt_id"]][lid] = LayerRouting(**{n: a[off:off + T] for n, a in cols.items()})
                off += T
    del files
    return RoutingLog(manifest, routing)
