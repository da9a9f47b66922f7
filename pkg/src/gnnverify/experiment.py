"""End-to-end experiment runner driven by a JSON spec.

Spec layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "graph": {"sbm": {...make_sbm_graph kwargs...}} | {"path": "graph.json"},
      "model": {"train": {...TrainConfig fields...}} | {"checkpoint": "m.gcnf"},
      "fingerprints": [
        {"name": "trans-f", "method": "trans-f", "k": 5, "seed": 0,
         "randomized": false, "sample_size": null},
        {"name": "ind-f", "method": "ind-f", "k": 3, "budget": 5,
         "shadow": {"fraction": 0.5, "seed": 7}}, ...
      ],
      "attack": {"kind": "bfa", "trials": 400, "seed": 0, "threshold": 0.05, "n_edges": 20},
      "qi": [["random", "trans-f"]],
      "compare": [["trans-f", "random"]],
      "bypass": [{"N": 100, "m_A": 60, "m_V": 2, "classes": 2, "trials": 10000, "seed": 0}]
    }

Methods: trans-f, trans-l, random, manc, ind-f, ind-l, ordinary. The
summary holds no timestamps, so the same spec always gives the same bytes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import attacks as atk
from .bypass import bypass_prob_approx, bypass_prob_exact, bypass_rate_paired
from .fingerprint.inductive import (
    construct_inductive_f,
    construct_inductive_l,
    construct_inductive_randomized,
    model_oracle,
    ordinary_inference_fingerprints,
)
from .fingerprint.transductive import baseline_manc, baseline_random, generate_randomized
from .gcn import Model, TrainConfig, train
from .graph import Graph, load_graph, make_sbm_graph, normalize_adjacency, sample_shadow_graph
from .serving import ServingConfig, endpoint_for
from .verifier import detection_rate, paired_dr_lower_bound, qi_entry

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRANS = ("trans-f", "trans-l", "random", "manc")
IND = ("ind-f", "ind-l", "ordinary")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def build_graph(doc: dict, base_dir: Path = Path(".")) -> Graph:
    if "sbm" in doc:
        return make_sbm_graph(**doc["sbm"])
    if "path" in doc:
        return load_graph(base_dir / doc["path"])
    raise ValueError("graph spec needs 'sbm' or 'path'")


def train_config(doc: dict | None) -> TrainConfig:
    doc = dict(doc or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown training options {sorted(unknown)}")
    return TrainConfig(**doc)


def build_model(doc: dict, g: Graph, base_dir: Path = Path(".")) -> Model:
    if "checkpoint" in doc:
        return Model.load(base_dir / doc["checkpoint"])
    return train(g, train_config(doc.get("train")))


def build_shadow(doc: dict, g: Graph) -> Graph:
    if "sbm" in doc:
        return make_sbm_graph(**doc["sbm"])
    return sample_shadow_graph(g, float(doc.get("fraction", 0.5)), int(doc.get("seed", 0)))


def build_fingerprints(entry: dict, m: Model, g: Graph, adj=None) -> list:
    method = entry["method"]
    k = int(entry.get("k", 1))
    seed = int(entry.get("seed", 0))
    randomized = bool(entry.get("randomized", False))
    if method in ("trans-f", "trans-l"):
        sample = entry.get("sample_size") if randomized else None
        return generate_randomized(m, g, sample_size=sample, k=k, seed=seed,
                                   method=method[-1].upper(), adj=adj)
    if method == "random":
        return baseline_random(m, g, k=k, seed=seed, adj=adj)
    if method == "manc":
        return baseline_manc(m, g, k=k, adj=adj)
    shadow = build_shadow(entry.get("shadow", {}), g)
    if method == "ordinary":
        return ordinary_inference_fingerprints(m, shadow, k, seed)
    budget = int(entry.get("budget", 5))
    letter = method[-1].upper()
    if randomized:
        target = m if letter == "F" else model_oracle(m)
        fs = construct_inductive_randomized(target, shadow, k, budget, seed=seed, method=letter,
                                            sample_size=entry.get("sample_size"))
    elif method == "ind-f":
        fs = construct_inductive_f(m, shadow, k, budget, seed=seed)
    elif method == "ind-l":
        fs = construct_inductive_l(model_oracle(m), shadow, k, budget, seed=seed)
    else:
        raise ValueError(f"unknown fingerprint method {method!r}")
    return fs.fingerprints


def run_attacks(doc: dict, m: Model, g: Graph, adj=None) -> list:
    kind = doc.get("kind", "bfa")
    trials = int(doc.get("trials", 0))
    seed0 = int(doc.get("seed", 0))
    thr = float(doc.get("threshold", atk.DEFAULT_THRESHOLD))
    if kind not in atk.ATTACKS:
        raise ValueError(f"unknown attack kind {kind!r}")
    out = []
    for t in range(trials):
        s = seed0 + t
        if kind.startswith("bfa"):
            out.append(atk.ATTACKS[kind](m, g, s, thr, adj))
        else:
            cfg = train_config({**doc.get("retrain", {}), "seed": s})
            out.append(atk.ATTACKS[kind](g, int(doc.get("n_edges", 20)), cfg, s, thr, m))
    return out


def _endpoint_factory(method: str, g: Graph):
    if method in TRANS:
        return lambda model: endpoint_for(ServingConfig("transductive", model, graph=g))
    return lambda model: endpoint_for(ServingConfig("inductive", model))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def run_experiment(spec: dict | str | Path, out_dir: str | Path | None = None) -> dict:
    """Run every stage of ``spec``; returns the summary dict.

    With ``out_dir`` the summary goes to ``summary.json`` and per-trial
    transcripts to ``transcripts.jsonl``. A failing stage still writes a
    summary, marked incomplete, before :class:`ExperimentError` propagates.
    """
    base_dir = Path(".")
    if not isinstance(spec, dict):
        base_dir = Path(spec).parent
        spec = json.loads(Path(spec).read_text())
    if spec.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {spec.get('schema_version')}")
    out_dir = None if out_dir is None else Path(out_dir)
    summary = {"schema_version": SCHEMA_VERSION, "status": "incomplete", "spec": spec}
    transcripts = []
    stage = "setup"
    try:
        stage = "graph"
        g = build_graph(spec.get("graph", {"sbm": {}}), base_dir)
        summary["graph_hash"] = g.content_hash()
        stage = "model"
        m = build_model(spec.get("model", {}), g, base_dir)
        adj = normalize_adjacency(g)
        summary["model_hash"] = m.hash()

        stage = "fingerprints"
        fps = {}
        for entry in spec.get("fingerprints", []):
            name = entry.get("name", entry["method"])
            if name in fps:
                raise ValueError(f"duplicate fingerprint name {name!r}")
            fps[name] = (entry["method"], build_fingerprints(entry, m, g, adj))
        summary["fingerprints"] = {
            n: [{"node": f.node_id, "label": f.expected_label} for f in lst] for n, (_, lst) in fps.items()
        }

        stage = "attacks"
        attack_doc = spec.get("attack", {"trials": 0})
        outcomes = run_attacks(attack_doc, m, g, adj)
        valid = [o for o in outcomes if o.valid]
        summary["attack"] = {
            "kind": attack_doc.get("kind", "bfa"),
            "trials_attempted": len(outcomes),
            "valid_attacks": len(valid),
            "seeds": [o.seed for o in outcomes],
        }

        stage = "detection"
        results = {}
        for name, (method, lst) in fps.items():
            res = detection_rate(outcomes, lst, _endpoint_factory(method, g))
            results[name] = res
        summary["detection"] = {n: r.to_dict() for n, r in results.items()}
        for t, o in enumerate(valid):
            rec = {"trial": t, "attack": o.manifest()}
            rec["detected"] = {n: bool(r.detected()[t]) for n, r in results.items() if r.valid}
            rec["first_mismatch"] = {
                n: (int(np.argmax(r.matrix[t])) if r.matrix[t].any() else None)
                for n, r in results.items() if r.valid
            }
            transcripts.append(rec)

        stage = "qi"
        summary["qi"] = [qi_entry(a, results[a], b, results[b]) for a, b in spec.get("qi", [])]
        summary["qi_note"] = "minimum query counts are measured on this finite trial set"

        stage = "compare"
        comps = []
        for entry in spec.get("compare", []):
            a, b = entry[0], entry[1]
            k = int(entry[2]) if len(entry) > 2 else 1
            ra, rb = results[a], results[b]
            comp = {"ours": a, "baseline": b, "k": k}
            if ra.valid >= 2:
                da, db = ra.detected(k), rb.detected(k)
                comp.update(dr_ours=float(da.mean()), dr_baseline=float(db.mean()),
                            lower_bound_95=paired_dr_lower_bound(da, db, seed=int(spec.get("bootstrap_seed", 0))))
                comp["significant"] = comp["lower_bound_95"] > 0
            else:
                comp["dr"] = "undefined"
            comps.append(comp)
        summary["compare"] = comps

        stage = "bypass"
        rows = []
        for b in spec.get("bypass", []):
            N, mA, mV = int(b["N"]), int(b["m_A"]), int(b["m_V"])
            c = int(b.get("classes", 2))
            tr, ind = bypass_rate_paired(N, mA, mV, int(b.get("trials", 10_000)), int(b.get("seed", 0)), c)
            rows.append({
                "N": N, "m_A": mA, "m_V": mV, "classes": c,
                "exact": bypass_prob_exact(N, mA, mV),
                "approx": bypass_prob_approx(N, mA, mV),
                "approx_inductive": bypass_prob_approx(N, mA, mV, c),
                "mc_transductive": tr.to_dict(),
                "mc_inductive": ind.to_dict(),
            })
        summary["bypass"] = rows
        summary["status"] = "complete"
    except Exception as exc:
        summary["failed_stage"] = stage
        summary["error"] = f"{type(exc).__name__}: {exc}"
        _persist(summary, transcripts, out_dir)
        raise ExperimentError(stage, exc) from exc
    _persist(summary, transcripts, out_dir)
    return summary


def _persist(summary: dict, transcripts: list, out_dir: Path | None):
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(_dumps(summary))
    with open(out_dir / "transcripts.jsonl", "w") as fh:
        for rec in transcripts:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def summary_bytes(summary: dict) -> bytes:
    return _dumps(summary).encode()
