"""Command-line pipeline: train → forge → reconstruct → verify → attack → metrics → report.

Every stage reads its inputs from, and writes its outputs to, one output
directory.  Exit codes: 0 success, 1 verification or metric failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .attacks import build_attacks, calibrations_json, scores_csv, train_shadows
from .config import ConfigError, ExperimentConfig
from .data import Dataset, make_split_plan, sample_iid_batches, synth_subspace
from .forge import (ForgedBatchStore, efficient_cost, exclusion_scan, forge_all, forge_all_full,
                    naive_cost, reconstruct_por, thm1_bound)
from .metrics import (SETTINGS, MetricReport, ProbePlan, freq_profile, make_probe_plan, model_distance,
                      profiles_tsv, uniformity)
from .model import accuracy, per_sample_loss
from .pol import (PoLLog, PoLManifest, read_log, record_log, record_training, verify_full,
                  verify_subset, write_log, write_text_atomic)

log = logging.getLogger("repudiate")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class StageError(RuntimeError):
    """A missing or inconsistent artifact from an earlier stage."""


# ------------------------------------------------------------------ helpers


def _write_json(path: Path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save_params(path: Path, params: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, np.asarray(params, dtype="<f8"))
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def _load_params(path: Path) -> np.ndarray:
    if not path.is_file():
        raise StageError(f"missing artifact {path}")
    return np.load(path)


def _read_log(path: Path) -> PoLLog:
    if not path.is_dir():
        raise StageError(f"log directory not found: {path}")
    return read_log(path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _replayed(logged: PoLLog, dataset: Dataset) -> PoLLog:
    """Full-precision trajectory re-derived from θ^(0) and the logged batches."""
    m = dataclasses.replace(logged.manifest, checkpoint_interval=1)
    return record_log(dataset, m, logged.batches(), logged.checkpoints[0])


def _split_plan(cfg: ExperimentConfig):
    return make_split_plan(cfg.n_train, cfg.lam, cfg.kappa, cfg.steps, cfg.seed_for("plan"))


def selected_groups(cfg: ExperimentConfig) -> list[int]:
    """Seeded random choice of ``por_count`` group ids, sorted."""
    total = cfg.n_train // cfg.lam
    rng = np.random.default_rng(cfg.seed_for("por"))
    return sorted(rng.choice(total, cfg.por_count, replace=False).tolist())


def _por_dirs(out: Path) -> dict[int, Path]:
    root = out / "por"
    if not root.is_dir():
        raise StageError(f"no PoR directories under {out}; run reconstruct first")
    found = {int(p.name[1:]): p for p in root.iterdir() if p.is_dir() and p.name.startswith("g")}
    if not found:
        raise StageError(f"no PoR directories under {root}")
    return dict(sorted(found.items()))


# ------------------------------------------------------------------- stages


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    train, _, _ = cfg.datasets()
    spec = cfg.model_spec(train)
    manifest = PoLManifest(spec, cfg.hyperparams(), cfg.seed_for("init"), cfg.seed_for("schedule"), train.n,
                           cfg.augment, cfg.checkpoint_interval)
    t0 = time.perf_counter()
    honest, final = record_training(train, manifest)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / "config.json", cfg.dumps())
    write_log(honest, out / "log")
    _save_params(out / "theta_star.npy", final)
    loss = float(per_sample_loss(final, spec, train.features, train.labels).mean())
    summary = {"final_loss": loss, "train_accuracy": accuracy(final, spec, train),
               "seconds": round(time.perf_counter() - t0, 3)}
    _write_json(out / "train.json", {k: v for k, v in summary.items() if k != "seconds"})
    return summary


def cmd_forge(cfg: ExperimentConfig, out: Path) -> dict:
    logged = _read_log(out / "log")
    if logged.manifest.checkpoint_interval != 1:
        raise StageError(f"forging needs a log with checkpoint_interval 1, got {logged.manifest.checkpoint_interval}")
    train, _, _ = cfg.datasets()
    honest = _replayed(logged, train)
    plan = _split_plan(cfg)
    fcfg = cfg.forge_config()
    plain = logged.manifest.hp.plain and not logged.manifest.augment
    store = (forge_all if plain else forge_all_full)(honest, train, plan, fcfg)
    store.to_jsonl(out / "forge.jsonl")
    tau = cfg.steps
    stats = {
        "phase1_gradients": store.costs.phase1,
        "phase1_expected": cfg.kappa * cfg.mu * tau + tau,
        "phase2_expected": cfg.n_train * tau // cfg.lam,
        "naive_gradients": naive_cost(cfg.n_train, cfg.mu, tau),
        "efficient_gradients": efficient_cost(cfg.n_train, cfg.mu, cfg.kappa, cfg.lam, tau),
        "replaced_entries": len(store.entries),
        "mean_split_distance": float(store.split_distances.mean()),
    }
    stats["speedup"] = stats["naive_gradients"] / stats["efficient_gradients"]
    _write_json(out / "forge_stats.json", stats)
    return stats


def _load_store(cfg: ExperimentConfig, out: Path, logged: PoLLog) -> ForgedBatchStore:
    path = out / "forge.jsonl"
    if not path.is_file():
        raise StageError(f"missing {path}; run forge first")
    return ForgedBatchStore.from_jsonl(path, _split_plan(cfg), logged.batches())


def cmd_reconstruct(cfg: ExperimentConfig, out: Path, groups: list[int] | None = None, threads: int = 1) -> dict:
    logged = _read_log(out / "log")
    train, _, _ = cfg.datasets()
    store = _load_store(cfg, out, logged)
    groups = selected_groups(cfg) if groups is None else groups
    for g in groups:
        if not 0 <= g < store.plan.group_count:
            raise ConfigError(f"unknown group {g} (have {store.plan.group_count})")

    def one(g: int) -> dict:
        por = reconstruct_por(logged, train, store, g, cfg.por_checkpoint_interval)
        occurrences = exclusion_scan(por)
        d = out / "por" / f"g{g}"
        d.mkdir(parents=True, exist_ok=True)
        write_log(por.log, d / "log")
        _save_params(d / "params.npy", por.params)
        info = {"group": g, "members": list(por.group), "exclusion_occurrences": occurrences,
                "max_distance": por.max_distance, "replaced_steps": len(por.replaced_steps)}
        _write_json(d / "por.json", info)
        return info

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        infos = list(pool.map(one, groups))
    bad = [i["group"] for i in infos if i["exclusion_occurrences"]]
    return {"groups": len(infos), "exclusion_violations": bad}


def cmd_verify(cfg: ExperimentConfig, log_dir: Path, epsilon: float, subset_k: int | None = None) -> dict:
    logged = _read_log(log_dir)
    train, _, _ = cfg.datasets()
    if subset_k:
        report = verify_subset(logged, train, epsilon, subset_k)
    else:
        report = verify_full(logged, train, epsilon)
    return report.to_json()


def _probe_plan(cfg: ExperimentConfig, groups: list[int], holdout: np.ndarray) -> ProbePlan:
    plan = _split_plan(cfg)
    return make_probe_plan([plan.groups[g] for g in groups], cfg.n_train, holdout, cfg.seed_for("probe"),
                           cfg.probe_size)


def cmd_attack(cfg: ExperimentConfig, out: Path) -> dict:
    train, pool, holdout = cfg.datasets()
    spec = cfg.model_spec(train)
    theta_star = _load_params(out / "theta_star.npy")
    pors = _por_dirs(out)
    groups = list(pors)
    probes = _probe_plan(cfg, groups, holdout)
    shadows = train_shadows(pool, cfg.shadows, spec, cfg.shadow_hyperparams(), cfg.seed_for("shadow"))
    attacks = build_attacks(cfg.attacks, pool, spec, shadows, theta_star, holdout, cfg.fpr, cfg.lira_mode)
    per_group = {g: sorted(set().union(*(probes.for_setting(s)[j] for s in SETTINGS)))
                 for j, g in enumerate(groups)}
    star_idx = sorted(set().union(*per_group.values()))
    models = [("star", theta_star, star_idx)] + [(f"g{g}", _load_params(pors[g] / "params.npy"), per_group[g])
                                                 for g in groups]
    rows = []
    for name in cfg.attacks:
        a = attacks[name]
        for model_id, params, idx in models:
            for rec in a.score_records(params, idx):
                rows.append((rec.sample, name, rec.score, rec.prediction, model_id))
    write_text_atomic(out / "scores.csv", scores_csv(rows))
    write_text_atomic(out / "calibration.json", calibrations_json(attacks))
    _write_json(out / "probes.json", {"groups": groups, **{s: [list(u) for u in probes.for_setting(s)]
                                                           for s in SETTINGS}})
    return {"rows": len(rows), "models": len(models), "attacks": len(cfg.attacks)}


def _read_scores(path: Path) -> dict[tuple[str, str, int], tuple[float, bool]]:
    if not path.is_file():
        raise StageError(f"missing {path}; run attack first")
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table[(row["model_id"], row["attack"], int(row["sample_id"]))] = (float(row["score"]),
                                                                             row["prediction"] == "1")
    return table


def cmd_metrics(cfg: ExperimentConfig, out: Path) -> tuple[MetricReport, bool]:
    """Aggregate metrics from stage artifacts; the bool flags an exclusion violation."""
    table = _read_scores(out / "scores.csv")
    probes_path = out / "probes.json"
    if not probes_path.is_file():
        raise StageError(f"missing {probes_path}; run attack first")
    probes = json.loads(probes_path.read_text())
    groups = probes["groups"]
    pors = _por_dirs(out)
    if sorted(pors) != sorted(groups):
        raise StageError("scores were computed for a different set of PoRs")
    theta_star = _load_params(out / "theta_star.npy")
    report = MetricReport(config=cfg.to_dict())
    ok = True
    for g in groups:
        report.d_theta[g] = model_distance(theta_star, _load_params(pors[g] / "params.npy"))
        por_log = _read_log(pors[g] / "log")
        members = set(json.loads((pors[g] / "por.json").read_text())["members"])
        if any(i in members for s in por_log.steps for i in s.batch.indices):
            ok = False
        report.uniformity[g] = uniformity(por_log.batches(), cfg.n_train)
    for attack in cfg.attacks:
        report.c_a[attack] = {}
        diffs = []
        for setting in SETTINGS:
            differing = 0
            for j, g in enumerate(groups):
                u = probes[setting][j]
                if any(table[("star", attack, i)][1] != table[(f"g{g}", attack, i)][1] for i in u):
                    differing += 1
                if setting == "diff":
                    diffs.extend(abs(table[(f"g{g}", attack, i)][0] - table[("star", attack, i)][0]) for i in u)
            report.c_a[attack][setting] = 100.0 * differing / len(groups)
        report.s_a[attack] = diffs
    honest = _read_log(out / "log")
    baseline = sample_iid_batches(cfg.n_train, cfg.batch_size, cfg.steps, cfg.seed_for("schedule"))
    profiles = {"honest": freq_profile(honest.batches(), cfg.n_train),
                "iid": freq_profile(baseline, cfg.n_train),
                f"forged_g{groups[0]}": freq_profile(_read_log(pors[groups[0]] / "log").batches(), cfg.n_train)}
    report.config["baseline_uniformity"] = uniformity(baseline, cfg.n_train)
    report.config["honest_uniformity"] = uniformity(honest.batches(), cfg.n_train)
    write_text_atomic(out / "metrics.json", report.dumps())
    write_text_atomic(out / "metrics.csv", report.to_csv())
    write_text_atomic(out / "profiles.tsv", profiles_tsv(profiles))
    return report, ok


REPORT_INPUTS = ("config.json", "log/manifest.json", "log/steps.jsonl", "forge.jsonl", "forge_stats.json",
                 "scores.csv", "calibration.json", "probes.json", "metrics.json", "metrics.csv")


def cmd_report(cfg: ExperimentConfig, out: Path) -> dict:
    hashes = {}
    for name in REPORT_INPUTS:
        p = out / name
        if not p.is_file():
            raise StageError(f"missing {p}")
        hashes[name] = _sha256(p)
    for g, d in _por_dirs(out).items():
        hashes[f"por/g{g}/params.npy"] = _sha256(d / "params.npy")
    metrics = json.loads((out / "metrics.json").read_text())
    report = {"config": cfg.to_dict(), "inputs_sha256": hashes,
              "forge_stats": json.loads((out / "forge_stats.json").read_text()),
              "c_a": metrics["c_a"], "d_theta": metrics["d_theta"]["summary"],
              "uniformity": metrics["uniformity"]["summary"]}
    _write_json(out / "report.json", report)
    return report


def demo_impossibility(n: int, d: int, trials: int, seed: int) -> list[dict]:
    """One row per trial plus a leading ``w = 0`` plug-in fixture."""
    rows = []
    x = np.zeros((n, 2))
    x[0] = (0.0, 1.0)
    x[1:, 0] = np.linspace(-1.0, 1.0, n - 1)
    labels = np.r_[1, np.arange(n - 1) % 2]
    fixture = Dataset(x, labels, 2)
    rows.append(_demo_row("w0", fixture, np.zeros(2), np.array([[1.0, 0.0]])))
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        ds, outlier, basis = synth_subspace(n, d, int(rng.integers(2**31)))
        w = rng.normal(size=d) * rng.uniform(0.1, 3.0)
        rows.append(_demo_row(str(trial), ds, w, basis, outlier))
    return rows


def _demo_row(name, ds, w, basis, outlier=0) -> dict:
    try:
        gap, bound = thm1_bound(ds, w, basis, outlier)
        return {"trial": name, "min_distance": gap, "bound": bound, "ok": True}
    except AssertionError as e:
        gap, bound = e.args[0]
        return {"trial": name, "min_distance": gap, "bound": bound, "ok": False}


# --------------------------------------------------------------------- main


STAGES = ("train", "forge", "reconstruct", "attack", "metrics", "report")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repudiate", description="Forge proofs of repudiation and measure them.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="override the config's base seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages")
    common.add_argument("--epsilon", type=float, help="override the verification tolerance")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        s = sub.add_parser(name, parents=[common])
        if name == "reconstruct":
            s.add_argument("--group", type=int, action="append", help="group id (repeatable)")
    v = sub.add_parser("verify", parents=[common])
    v.add_argument("log_dir", nargs="?", type=Path, help="log directory (default: OUT/log)")
    v.add_argument("--subset-k", type=int, help="replay only the k largest updates")
    demo = sub.add_parser("demo-impossibility")
    demo.add_argument("--n", type=int, default=20)
    demo.add_argument("--d", type=int, default=5)
    demo.add_argument("--trials", type=int, default=100)
    demo.add_argument("--seed", type=int, default=0)
    return p


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _run_stage(name: str, cfg: ExperimentConfig, args) -> int:
    out = args.out
    if name == "train":
        _emit(cmd_train(cfg, out))
    elif name == "forge":
        _emit(cmd_forge(cfg, out))
    elif name == "reconstruct":
        res = cmd_reconstruct(cfg, out, getattr(args, "group", None), args.threads)
        _emit(res)
        if res["exclusion_violations"]:
            return EXIT_FAIL
    elif name == "attack":
        _emit(cmd_attack(cfg, out))
    elif name == "metrics":
        report, ok = cmd_metrics(cfg, out)
        _emit({"c_a": report.c_a, "exclusion_ok": ok})
        if not ok:
            return EXIT_FAIL
    elif name == "report":
        cmd_report(cfg, out)
        print(out / "report.json")
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("REPUDIATE_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level={"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
                               "debug": logging.DEBUG}.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "demo-impossibility":
            if args.n < 3 or args.d < 2 or args.trials < 0:
                raise ConfigError("need n >= 3, d >= 2, trials >= 0")
            rows = demo_impossibility(args.n, args.d, args.trials, args.seed)
            print("trial\tmin_distance\tbound\tok")
            for r in rows:
                print(f"{r['trial']}\t{r['min_distance']!r}\t{r['bound']!r}\t{int(r['ok'])}")
            return EXIT_OK if all(r["ok"] for r in rows) else EXIT_FAIL
        cfg = _load_config(args)
        if args.command == "verify":
            if args.subset_k is not None and args.subset_k < 1:
                raise ConfigError("--subset-k must be >= 1")
            report = cmd_verify(cfg, args.log_dir or args.out / "log", cfg.epsilon, args.subset_k)
            _emit(report)
            return EXIT_OK if report["pass"] else EXIT_FAIL
        stages = STAGES if args.command == "run" else (args.command,)
        for name in stages:
            log.info("stage %s", name)
            code = _run_stage(name, cfg, args)
            if code != EXIT_OK:
                return code
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
