"""Command line front end: dataset generation, experiment runs, the oracle
battery, and cartesian sweeps.

Configs are YAML mappings with one section per experiment kind; --set
dotted.key=value overrides single keys and always wins over the file.
Every artifact starts with a provenance record holding the schema version,
the fully resolved config, and the seed, and nothing embeds wall-clock
state, so rerunning any (config, seed) pair reproduces byte-identical
files.  Exit codes: 0 success, 1 property failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import yaml

from . import battery, datagen, marl, pgm, signaling
from . import naming_game as ng
from .probcore import ConfigError, ContractError, PropertyViolation

ARTIFACT_SCHEMA_VERSION = 1
KINDS = ("naming-game", "signaling-game", "marl", "verify")
FORMATS = ("jsonl", "csv")
EXIT_OK, EXIT_PROPERTY, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Malformed invocation or config; mapped to exit code 2."""


# ---------------------------------------------------------------------------
# Config loading and overrides.


def load_yaml(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError("config file %s does not exist" % path)
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise UsageError("config %s is not valid YAML: %s" % (path, exc))
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError("config root must be a mapping")
    return doc


def parse_override(text: str) -> tuple:
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise UsageError("override %r must look like dotted.key=value" % text)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise UsageError("override value %r is not valid YAML: %s"
                         % (raw, exc))
    return key, value


def apply_override(cfg: dict, dotted: str, value):
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        child = node.get(p)
        if child is None:
            child = {}
            node[p] = child
        if not isinstance(child, dict):
            raise UsageError("cannot descend into %r: it is not a section"
                             % p)
        node = child
    node[parts[-1]] = value


def resolve_config(path: str | None, sets) -> dict:
    cfg = load_yaml(path) if path else {}
    for item in sets or ():
        key, value = parse_override(item)
        apply_override(cfg, key, value)
    return cfg


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    out: str | None
    fmt: str
    block: dict
    raw: dict


def experiment_config(raw: dict) -> ExperimentConfig:
    present = [k for k in KINDS if k in raw]
    kind = raw.get("kind")
    if kind is None:
        if len(present) != 1:
            raise UsageError("config must declare exactly one experiment "
                             "kind; found %s" % (", ".join(present) or "none"))
        kind = present[0]
    if kind not in KINDS:
        raise UsageError("unknown experiment kind %r (choose from %s)"
                         % (kind, ", ".join(KINDS)))
    extra = [k for k in present if k != kind]
    if extra:
        raise UsageError("config declares section(s) %s besides kind %r"
                         % (", ".join(extra), kind))
    stray = sorted(set(raw) - {"kind", "seed", "out", "format", kind})
    if stray:
        raise UsageError("unknown top-level key(s): %s" % ", ".join(stray))
    block = raw.get(kind) or {}
    if not isinstance(block, dict):
        raise UsageError("section %r must be a mapping" % kind)
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise UsageError("seed must be an integer")
    out = raw.get("out")
    if kind != "verify" and not out:
        raise UsageError("config needs an output directory under 'out'")
    fmt = raw.get("format", "csv")
    if fmt not in FORMATS:
        raise UsageError("format must be one of %s" % ", ".join(FORMATS))
    dataset = block.get("dataset")
    if dataset is not None and not os.path.exists(dataset):
        raise UsageError("referenced dataset %s does not exist" % dataset)
    return ExperimentConfig(kind, seed, out, fmt, block, raw)


def _reject_unknown(block: dict, allowed, where: str):
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise UsageError("unknown %s key(s): %s" % (where,
                                                    ", ".join(unknown)))


# ---------------------------------------------------------------------------
# Artifact writing.  All emitters sort keys and use plain \n so identical
# runs write identical bytes.


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"schema_version": ARTIFACT_SCHEMA_VERSION, "config": cfg.raw,
            "seed": cfg.seed}


def write_jsonl(path: str, provenance: dict, records):
    with open(path, "w") as fh:
        fh.write(json.dumps({"provenance": provenance}, sort_keys=True))
        fh.write("\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def write_json(path: str, doc: dict):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_table(out_dir: str, base: str, provenance: dict, fieldnames,
                rows, fmt: str) -> str:
    path = os.path.join(out_dir, "%s.%s" % (base, fmt))
    if fmt == "jsonl":
        write_jsonl(path, provenance, rows)
        return path
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps({"provenance": provenance},
                                   sort_keys=True) + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames),
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


# ---------------------------------------------------------------------------
# Experiment runners.


def run_naming_game(cfg: ExperimentConfig) -> int:
    b = cfg.block
    _reject_unknown(b, {"dataset", "vocab_size", "n_categories", "n_rounds",
                        "alpha_phi", "alpha_theta", "pairing", "learning",
                        "batched", "ablation", "burn_in", "record"},
                    "naming-game")
    if "dataset" not in b:
        raise UsageError("naming-game needs a dataset file")
    dataset = pgm.Dataset.load(b["dataset"])
    game_cfg = ng.GameConfig(
        n_agents=dataset.n_agents,
        n_objects=dataset.n_objects,
        vocab_size=int(b.get("vocab_size", 3)),
        n_categories=int(b.get("n_categories", 2)),
        n_features=dataset.n_features,
        n_rounds=int(b.get("n_rounds", 50)),
        seed=cfg.seed,
        alpha_phi=float(b.get("alpha_phi", pgm.DEFAULT_ALPHA_PHI)),
        alpha_theta=float(b.get("alpha_theta", pgm.DEFAULT_ALPHA_THETA)),
        pairing=b.get("pairing", "round-robin"),
        learning=b.get("learning", "gibbs"),
        batched=bool(b.get("batched", False)),
        ablation=b.get("ablation", "none"),
        burn_in=int(b.get("burn_in", 0)),
        record=b.get("record", "full"))
    result = ng.run_game(game_cfg, dataset)
    os.makedirs(cfg.out, exist_ok=True)
    prov = _provenance(cfg)
    write_jsonl(os.path.join(cfg.out, "trace.jsonl"), prov,
                result.events or [])
    if result.metrics:
        write_table(cfg.out, "metrics", prov, result.metrics[0].keys(),
                    result.metrics, cfg.fmt)
    write_json(os.path.join(cfg.out, "summary.json"), {
        "provenance": prov,
        "final_metrics": result.metrics[-1] if result.metrics else None,
        "final_signs": [np.asarray(a.signs).tolist()
                        for a in result.state.agents],
        "occupancy_rounds": result.occupancy_rounds,
    })
    return EXIT_OK


def run_signaling_game(cfg: ExperimentConfig) -> int:
    b = cfg.block
    _reject_unknown(b, {"x_size", "m_size", "scale", "uniform_source",
                        "beta", "lr", "n_iters", "train"}, "signaling-game")
    x_size = int(b.get("x_size", 4))
    m_size = int(b.get("m_size", 4))
    beta = float(b.get("beta", 0.0))
    train = tuple(b.get("train", ("sender", "receiver") if beta == 0.0
                  else ("sender", "receiver", "prior")))
    rng = np.random.default_rng(cfg.seed)
    inst = signaling.random_instance(rng, x_size, m_size,
                                     scale=float(b.get("scale", 0.5)),
                                     uniform_source=bool(
                                         b.get("uniform_source", False)))
    prior = inst["prior_logits"] if beta != 0.0 else None
    result = signaling.optimize(inst["log_px"], inst["sender_logits"],
                                inst["receiver_logits"], prior, beta=beta,
                                lr=float(b.get("lr", 1.0)),
                                n_iters=int(b.get("n_iters", 1000)),
                                train=train)
    os.makedirs(cfg.out, exist_ok=True)
    prov = _provenance(cfg)
    rows = [{"iteration": i, "objective": float(v)}
            for i, v in enumerate(result.history)]
    write_table(cfg.out, "curve", prov, ("iteration", "objective"), rows,
                cfg.fmt)
    final_rec = signaling.reconstruction_objective(
        inst["log_px"], result.sender_logits, result.receiver_logits)
    write_json(os.path.join(cfg.out, "summary.json"), {
        "provenance": prov,
        "final_objective": float(result.history[-1]),
        "final_reconstruction": float(final_rec),
        "mutual_information": float(signaling.mutual_information(
            inst["log_px"], result.sender_logits)),
        "source_entropy": float(signaling.source_entropy(inst["log_px"])),
    })
    return EXIT_OK


def run_marl(cfg: ExperimentConfig) -> int:
    b = cfg.block
    _reject_unknown(b, {"n_episodes", "n_cycles", "eta", "optimistic_init",
                        "n_messages", "horizon", "message_blind",
                        "step_cost", "anchor_bonus", "anchor_slip",
                        "gate_cost", "met_bonus", "gate_hit", "gate_sneak",
                        "meet_reward"}, "marl")
    bench_keys = ("n_messages", "horizon", "message_blind", "step_cost",
                  "anchor_bonus", "anchor_slip", "gate_cost", "met_bonus",
                  "gate_hit", "gate_sneak", "meet_reward")
    bench = {k: b[k] for k in bench_keys if k in b}
    mdp = marl.meet_at_goal(**bench)
    run_cfg = marl.MarlConfig(n_episodes=int(b.get("n_episodes", 20)),
                              n_cycles=int(b.get("n_cycles", 10)),
                              seed=cfg.seed,
                              eta=float(b.get("eta", 0.1)),
                              optimistic_init=float(
                                  b.get("optimistic_init", 0.0)))
    result = marl.run_marl(mdp, run_cfg)
    os.makedirs(cfg.out, exist_ok=True)
    prov = _provenance(cfg)
    rows = [{"episode": e, "cycle": c,
             "group_reward": float(result.group_rewards[e, c]),
             "accept_rate": float(result.accept_rates[e, c])}
            for e in range(run_cfg.n_episodes)
            for c in range(run_cfg.n_cycles)]
    write_table(cfg.out, "cycles", prov,
                ("episode", "cycle", "group_reward", "accept_rate"), rows,
                cfg.fmt)
    episodes = [{"episode": e,
                 "starts": result.starts[e].tolist(),
                 "goal": int(marl.goal_of_state(int(result.starts[e, 0]))),
                 "final_messages": result.final_messages[e].tolist()}
                for e in range(run_cfg.n_episodes)]
    write_jsonl(os.path.join(cfg.out, "episodes.jsonl"), prov, episodes)
    write_json(os.path.join(cfg.out, "summary.json"), {
        "provenance": prov,
        "mean_group_reward": float(result.group_rewards.mean()),
        "mean_final_cycle_reward": float(result.group_rewards[:, -1].mean()),
        "mean_accept_rate": float(result.accept_rates.mean()),
    })
    return EXIT_OK


def run_verify(cfg: ExperimentConfig) -> int:
    _reject_unknown(cfg.block, {"mutations"}, "verify")
    reports = battery.run_battery(cfg.seed)
    if bool(cfg.block.get("mutations", True)):
        reports += battery.mutation_battery(cfg.seed)
    records = [r.to_json() for r in reports]
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        write_jsonl(os.path.join(cfg.out, "report.jsonl"),
                    _provenance(cfg), records)
    failures = [r for r in reports if not r.passed]
    print("verify: %d checks, %d failed" % (len(reports), len(failures)))
    for r in failures:
        print("FAIL %s %s %s = %.6g (tolerance %.3g)"
              % (r.check, r.instance, r.metric, r.value, r.tolerance))
    return EXIT_OK if not failures else EXIT_PROPERTY


RUNNERS = {"naming-game": run_naming_game,
           "signaling-game": run_signaling_game,
           "marl": run_marl,
           "verify": run_verify}


def run_experiment(raw: dict) -> int:
    cfg = experiment_config(raw)
    return RUNNERS[cfg.kind](cfg)


# ---------------------------------------------------------------------------
# Dataset generation.


GENERATE_DEFAULTS = {"K": 2, "D": 10, "M_true": 2, "C": 2, "F": 3,
                     "counts_per_obs": 20, "noise": 0.0, "seed": 0,
                     "sequence": False, "T": 3, "stay": 0.5}


def run_generate(raw: dict, out: str) -> int:
    _reject_unknown(raw, GENERATE_DEFAULTS, "generate")
    spec = dict(GENERATE_DEFAULTS)
    spec.update(raw)
    common = dict(n_agents=int(spec["K"]), n_objects=int(spec["D"]),
                  n_true_signs=int(spec["M_true"]),
                  n_categories=int(spec["C"]), n_features=int(spec["F"]),
                  noise=float(spec["noise"]), seed=int(spec["seed"]))
    if spec["sequence"]:
        ds = datagen.generate_sequence_dataset(
            n_steps=int(spec["T"]), stay=float(spec["stay"]),
            counts_per_step=int(spec["counts_per_obs"]), **common)
    else:
        ds = datagen.generate_dataset(
            counts_per_obs=int(spec["counts_per_obs"]), **common)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    ds.save(out)
    print("wrote %s" % out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Sweeps.


def _sweep_worker(job) -> tuple:
    raw, combo_id = job
    try:
        code = run_experiment(raw)
        note = ""
    except (UsageError, ConfigError, ContractError, yaml.YAMLError,
            FileNotFoundError) as exc:
        code, note = EXIT_USAGE, str(exc)
    except PropertyViolation as exc:
        code, note = EXIT_PROPERTY, str(exc)
    return combo_id, code, note


def run_sweep(raw: dict, workers_flag: int | None) -> int:
    section = raw.get("sweep")
    if not isinstance(section, dict):
        raise UsageError("sweep needs a 'sweep' section")
    _reject_unknown(section, {"keys", "workers"}, "sweep")
    keys = section.get("keys")
    if not isinstance(keys, dict) or not keys:
        raise UsageError("sweep.keys must map dotted keys to value lists")
    workers = workers_flag or int(section.get("workers", 1))
    base = {k: v for k, v in raw.items() if k != "sweep"}
    base_out = base.get("out")
    if not base_out:
        raise UsageError("sweep needs a base 'out' directory")
    names = sorted(keys)
    for name in names:
        if not isinstance(keys[name], list) or not keys[name]:
            raise UsageError("sweep.keys.%s must be a non-empty list" % name)
    jobs, combos = [], []
    for idx, values in enumerate(itertools.product(*(keys[n]
                                                     for n in names))):
        sub = copy.deepcopy(base)
        for name, value in zip(names, values):
            apply_override(sub, name, value)
        sub["out"] = os.path.join(base_out, "combo-%03d" % idx)
        jobs.append((sub, idx))
        combos.append({"combo": idx, "out": sub["out"],
                       "overrides": dict(zip(names, values))})
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(job) for job in jobs]
    for (combo_id, code, note), rec in zip(results, combos):
        rec["exit"] = code
        if note:
            rec["error"] = note
    os.makedirs(base_out, exist_ok=True)
    write_jsonl(os.path.join(base_out, "sweep.jsonl"),
                {"schema_version": ARTIFACT_SCHEMA_VERSION, "config": raw,
                 "seed": raw.get("seed", 0)}, combos)
    print("sweep: %d combos, worst exit %d"
          % (len(combos), max((r[1] for r in results), default=0)))
    return max((r[1] for r in results), default=EXIT_OK)


# ---------------------------------------------------------------------------
# Entry point.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emcom",
        description="Emergent-communication simulators and their oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset file")
    gen.add_argument("--config", help="YAML generation spec")
    gen.add_argument("--out", required=True, help="dataset file to write")
    gen.add_argument("--set", action="append", dest="sets", default=[],
                     metavar="KEY=VALUE", help="override a spec key")

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("--config", required=True, help="YAML experiment config")
    run.add_argument("--out", help="output directory (overrides config)")
    run.add_argument("--seed", type=int, help="seed (overrides config)")
    run.add_argument("--set", action="append", dest="sets", default=[],
                     metavar="KEY=VALUE", help="override a config key")

    ver = sub.add_parser("verify", help="run the oracle battery")
    ver.add_argument("--config", help="optional YAML config")
    ver.add_argument("--out", help="directory for report.jsonl")
    ver.add_argument("--seed", type=int, help="battery seed")
    ver.add_argument("--set", action="append", dest="sets", default=[],
                     metavar="KEY=VALUE", help="override a config key")

    swp = sub.add_parser("sweep", help="cartesian sweep over config keys")
    swp.add_argument("--config", required=True, help="YAML config with a "
                     "sweep section")
    swp.add_argument("--workers", type=int, help="parallel worker count")
    swp.add_argument("--set", action="append", dest="sets", default=[],
                     metavar="KEY=VALUE", help="override a config key")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args.config, args.sets)
        if args.command == "generate":
            return run_generate(cfg, args.out)
        if args.command == "sweep":
            return run_sweep(cfg, args.workers)
        if args.command == "verify":
            cfg.setdefault("kind", "verify")
        if getattr(args, "out", None):
            cfg["out"] = args.out
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        return run_experiment(cfg)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, yaml.YAMLError, FileNotFoundError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print("contract error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except PropertyViolation as exc:
        print("property violation: %s" % exc, file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
