"""Command-line entry point: ``gnnverify <command>``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import attacks as atk
from .bypass import bypass_prob_approx, bypass_prob_exact, bypass_rate_paired
from .experiment import ExperimentError, run_experiment, train_config
from .fingerprint.inductive import (
    construct_inductive_f,
    construct_inductive_l,
    construct_inductive_randomized,
    load_inductive,
    model_oracle,
)
from .fingerprint.transductive import generate_randomized, load_fingerprints, save_fingerprints
from .gcn import Model, train
from .graph import load_graph, make_sbm_graph, normalize_adjacency, save_graph
from .serving import AdaptiveConfig, HttpEndpoint, ServingConfig, endpoint_for, serve
from .verifier import verify


def _emit(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


def _graph(path, sbm_seed):
    if path is not None:
        return load_graph(path)
    return make_sbm_graph(seed=sbm_seed)


graph_opt = click.option("--graph", "graph_path", type=click.Path(exists=True, dir_okay=False),
                         help="Graph JSON file; defaults to the synthetic SBM graph.")
sbm_opt = click.option("--sbm-seed", default=0, show_default=True, help="Seed of the synthetic SBM graph.")
ckpt_opt = click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Fingerprint-based integrity verification for GCN prediction services."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("make-graph")
@sbm_opt
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def make_graph_cmd(sbm_seed, out):
    """Write the synthetic SBM graph as Graph JSON."""
    save_graph(make_sbm_graph(seed=sbm_seed), out)


@main.command("train")
@graph_opt
@sbm_opt
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path.")
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=200, show_default=True)
@click.option("--lr", default=0.02, show_default=True)
@click.option("--hidden", default=16, show_default=True)
@click.option("--dropout", default=0.5, show_default=True)
def train_cmd(graph_path, sbm_seed, out, seed, epochs, lr, hidden, dropout):
    """Train a two-layer GCN and save a GCNF checkpoint."""
    g = _graph(graph_path, sbm_seed)
    cfg = train_config({"seed": seed, "epochs": epochs, "learning_rate": lr, "hidden_dim": hidden,
                        "dropout": dropout})
    m = train(g, cfg)
    m.save(out)
    _emit({"checkpoint": out, "model_hash": m.hash(), **m.info})


@main.command("fingerprint")
@click.option("--mode", type=click.Choice(["trans-f", "trans-l", "ind-f", "ind-l"]), required=True)
@click.option("--randomized", is_flag=True, help="Sample-then-score (transductive) or random targets (inductive).")
@ckpt_opt
@graph_opt
@sbm_opt
@click.option("--k", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--sample-size", type=int, default=None)
@click.option("--budget", default=5, show_default=True, help="Inductive perturbation budget.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def fingerprint_cmd(mode, randomized, checkpoint, graph_path, sbm_seed, k, seed, sample_size, budget, out):
    """Generate fingerprints. For inductive modes the graph is the shadow graph."""
    m = Model.load(checkpoint)
    g = _graph(graph_path, sbm_seed)
    letter = mode[-1].upper()
    if mode.startswith("trans"):
        s = sample_size if randomized else None
        fps = generate_randomized(m, g, sample_size=s, k=k, seed=seed, method=letter)
        save_fingerprints(fps, out, letter, seed, s)
        _emit({"mode": "transductive", "nodes": [f.node_id for f in fps]})
        return
    if randomized:
        target = m if letter == "F" else model_oracle(m)
        res = construct_inductive_randomized(target, g, k, budget, seed=seed, method=letter,
                                             sample_size=sample_size)
    elif letter == "F":
        res = construct_inductive_f(m, g, k, budget, seed=seed)
    else:
        res = construct_inductive_l(model_oracle(m), g, k, budget, seed=seed)
    res.save(out)
    _emit({"mode": "inductive", "nodes": res.nodes, "budget_used": res.budget_used,
           "stop_reason": res.stop_reason})


@main.command("attack")
@click.option("--kind", type=click.Choice(sorted(atk.ATTACKS)), required=True)
@click.option("--trials", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@ckpt_opt
@graph_opt
@sbm_opt
@click.option("--threshold", default=atk.DEFAULT_THRESHOLD, show_default=True)
@click.option("--n-edges", default=20, show_default=True, help="Edges added by poisoning attacks.")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
def attack_cmd(kind, trials, seed, checkpoint, graph_path, sbm_seed, threshold, n_edges, out_dir):
    """Run seeded attack trials; writes a checkpoint and manifest per trial."""
    m = Model.load(checkpoint)
    g = _graph(graph_path, sbm_seed)
    adj = normalize_adjacency(g)
    rows = []
    for t in range(trials):
        s = seed + t
        if kind.startswith("bfa"):
            o = atk.ATTACKS[kind](m, g, s, threshold, adj)
        else:
            cfg = train_config({"seed": s, "epochs": m.epochs, "hidden_dim": m.hidden_dim})
            o = atk.ATTACKS[kind](g, n_edges, cfg, s, threshold, m)
        path = atk.save_outcome(o, out_dir, f"{kind}-{s}")
        rows.append({"manifest": str(path), "valid": o.valid, "attacked_acc": o.attacked_acc})
    _emit({"kind": kind, "trials": trials, "valid": sum(r["valid"] for r in rows), "outcomes": rows})


def _serving_config(mode, checkpoint, graph_path, sbm_seed, attacker, seed, m_a, shadow, strict,
                    host="127.0.0.1", port=0):
    m = Model.load(checkpoint)
    g = _graph(graph_path, sbm_seed) if mode == "transductive" else None
    att = None
    if attacker and attacker != "none":
        kind, _, path = attacker.partition(":")
        if not path:
            kind, path = "tampered", kind
        tampered = Model.load(path)
        if kind == "tampered":
            att = tampered
        elif kind == "adaptive":
            sh = load_graph(shadow) if shadow else None
            att = AdaptiveConfig(m_A=m_a, honest_model=m, attack_model=tampered, seed=seed, shadow=sh)
        else:
            raise click.BadParameter(f"unknown attacker kind {kind!r}", param_hint="--attacker")
    return ServingConfig(mode, m, graph=g, attacker=att, host=host, port=port, strict=strict)


attacker_opt = click.option("--attacker", default="none", show_default=True,
                            help="none | PATH | tampered:PATH | adaptive:PATH (tampered checkpoint).")
mode_opt = click.option("--mode", type=click.Choice(["transductive", "inductive"]), default="transductive",
                        show_default=True)


@main.command("serve")
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@mode_opt
@ckpt_opt
@graph_opt
@sbm_opt
@attacker_opt
@click.option("--seed", default=0, show_default=True, help="Adaptive attacker seed.")
@click.option("--m-a", default=0, show_default=True, help="Adaptive attacker guess size.")
@click.option("--shadow", type=click.Path(exists=True, dir_okay=False), help="Adaptive inductive shadow graph.")
@click.option("--strict", is_flag=True, help="Omit model_hash from /healthz.")
def serve_cmd(port, host, mode, checkpoint, graph_path, sbm_seed, attacker, seed, m_a, shadow, strict):
    """Serve label-only predictions over HTTP until interrupted."""
    cfg = _serving_config(mode, checkpoint, graph_path, sbm_seed, attacker, seed, m_a, shadow, strict,
                          host, port)
    click.echo(f"serving {mode} on http://{host}:{port}", err=True)
    try:
        serve(cfg, background=False)
    except KeyboardInterrupt:
        pass


@main.command("verify")
@click.option("--endpoint", required=True, help="Endpoint URL, or 'inproc' to serve locally.")
@click.option("--fingerprints", "fp_path", type=click.Path(exists=True, dir_okay=False), required=True)
@graph_opt
@sbm_opt
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
              help="Model to serve in-process (inproc only).")
@attacker_opt
@click.option("--seed", default=0, show_default=True)
@click.option("--m-a", default=0, show_default=True)
@click.option("--fail-fast", is_flag=True)
@click.option("--report", type=click.Path(dir_okay=False), help="Write the full report JSON here.")
def verify_cmd(endpoint, fp_path, graph_path, sbm_seed, checkpoint, attacker, seed, m_a, fail_fast, report):
    """Query the fingerprints. Exit 0 iff every response matches (b = 1).

    Inductive fingerprint files are resolved against --graph, the shadow graph
    they were built on. Exit code 1 means b = 0 and 2 means inconclusive.
    """
    doc = json.loads(Path(fp_path).read_text())
    mode = doc.get("mode")
    if mode == "transductive":
        fps = load_fingerprints(fp_path)
    elif mode == "inductive":
        fps = load_inductive(fp_path, _graph(graph_path, sbm_seed)).fingerprints
    else:
        raise click.BadParameter("unrecognized fingerprint file", param_hint="--fingerprints")
    if endpoint == "inproc":
        if checkpoint is None:
            raise click.UsageError("--endpoint inproc needs --checkpoint")
        cfg = _serving_config(mode, checkpoint, graph_path, sbm_seed, attacker, seed, m_a, None, False)
        ep = endpoint_for(cfg)
    else:
        ep = HttpEndpoint(endpoint)
    rep = verify(ep, fps, fail_fast=fail_fast, seed=seed)
    if report:
        Path(report).write_text(json.dumps(rep.to_dict(), indent=2))
    mismatches = [it.query for it in rep.items if not it.match]
    _emit({"b": rep.b, "inconclusive": rep.inconclusive, "error": rep.error, "queries": len(rep.items),
           "mismatches": mismatches, "endpoint": rep.endpoint})
    sys.exit(0 if rep.b == 1 else (2 if rep.inconclusive else 1))


@main.group("analyze")
def analyze():
    """Closed-form and simulated analytics."""


@analyze.command("bypass")
@click.option("--N", "n", type=int, required=True, help="Candidate nodes.")
@click.option("--mA", "m_a", type=int, required=True, help="Attacker guess size.")
@click.option("--mV", "m_v", type=int, required=True, help="Verifier fingerprint count.")
@click.option("--classes", default=1, show_default=True)
@click.option("--exact", "method", flag_value="exact", default=True)
@click.option("--approx", "method", flag_value="approx")
@click.option("--mc", "method", flag_value="mc")
@click.option("--trials", default=10_000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def bypass_cmd(n, m_a, m_v, classes, method, trials, seed):
    """Probability that an adaptive attacker covers every fingerprint."""
    try:
        if method == "exact":
            out = {"exact": bypass_prob_exact(n, m_a, m_v)}
        elif method == "approx":
            out = {"approx": bypass_prob_approx(n, m_a, m_v, classes)}
        else:
            tr, ind = bypass_rate_paired(n, m_a, m_v, trials, seed, max(classes, 1))
            out = {"transductive": tr.to_dict(), "inductive": ind.to_dict()}
    except (ValueError, TypeError) as exc:
        raise click.BadParameter(str(exc))
    _emit({"N": n, "m_A": m_a, "m_V": m_v, "classes": classes, **out})


@main.command("experiment")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory for summary.json and transcripts.jsonl.")
def experiment_cmd(spec_path, out_dir):
    """Run an experiment spec end to end and print the summary."""
    try:
        summary = run_experiment(spec_path, out_dir)
    except ExperimentError as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    _emit({k: summary[k] for k in ("status", "attack", "detection", "qi", "compare", "bypass") if k in summary})


if __name__ == "__main__":
    main()
