"""``cdhmm`` command-line interface.

Exit codes: 0 success, 1 validation error (bad input, config or model file),
2 runtime failure. Logs go to stderr. Every command writes a manifest next to
its primary output recording the resolved configuration and input hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EmissionUnderflowError
from .ghosting import (BaselineReceptionModel, GhostConfig, evaluate_sequence, sweep_gca,
                       write_evaluations, write_sweep)
from .metrics import (REPORT_SCHEMA_VERSION, decode, player_profiles, profiles_document,
                      run_sensitivity, sensitivity_document, write_profiles_csv)
from .synthgen import ScenarioSpec, default_truth, generate_dataset, save_latents
from .tracking import (Dataset, SchemaError, filter_for_training, load_dataset, save_dataset,
                       summarize)
from .training import (EmConfig, ModelFormatError, batch_train, dumps_model, load_model)

log = logging.getLogger("cornermark")

MANIFEST_SCHEMA_VERSION = 1
DECODE_SCHEMA_VERSION = 1


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(path: str | Path, command: str, args: argparse.Namespace,
                   inputs: list[str], outputs: list[str]) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    write_json(path, {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "command": command,
        "package_version": __version__,
        "config": config,
        "inputs": {p: sha256(p) for p in inputs},
        "outputs": {p: sha256(p) for p in outputs},
    })


def _em_config(args) -> EmConfig:
    d = dict(args.em or {})
    for name in ("iterations", "batch_size", "seed"):
        if getattr(args, name, None) is not None:
            d[name] = getattr(args, name)
    return EmConfig.from_dict(d)


def _ghost_config(args) -> GhostConfig:
    d = dict(args.ghost or {})
    for name in ("mc_samples", "tau", "theta", "occupancy", "frames", "seed"):
        if getattr(args, name, None) is not None:
            d[name] = getattr(args, name)
    return GhostConfig.from_dict(d)


def _load_training_data(path: str, args) -> Dataset:
    ds = load_dataset(path)
    report: dict = {}
    ds = filter_for_training(ds, strict=not getattr(args, "lenient", False), report=report)
    for reason, ids in sorted(report.items()):
        if ids:
            log.info("dropped %d sequence(s): %s", len(ids), reason)
    return ds


def _select_groups(ds: Dataset, args) -> dict:
    groups = ds.groups()
    out = {}
    for key, sub in groups.items():
        if args.team and key[0] != args.team:
            continue
        if args.delivery and key[1] != args.delivery:
            continue
        out[key] = sub
    return out


def _model_path(out_dir: Path, team: str, delivery: str) -> Path:
    return out_dir / f"{team}_{delivery}.model.json"


def _matching_model(params, seq):
    if (params.team_id, params.delivery_type) != (seq.defending_team_id, seq.delivery_type):
        raise ValidationError(f"model for {params.team_id}/{params.delivery_type} does not match "
                              f"sequence {seq.sequence_id} ({seq.defending_team_id}/{seq.delivery_type})")
    if params.K != seq.n_attackers or params.K != seq.n_defenders:
        raise ValidationError(f"sequence {seq.sequence_id} does not have {params.K} attackers and defenders")


def _models_by_group(paths: list[str]) -> dict:
    out = {}
    for p in paths:
        params = load_model(p)
        out[(params.team_id, params.delivery_type)] = params
    return out


# ---------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    ds = load_dataset(args.input)
    report: dict = {}
    clean = filter_for_training(ds, strict=not args.lenient, squad_size=args.squad_size, report=report)
    save_dataset(clean, args.output)
    summary_path = args.summary or f"{args.output}.summary.json"
    write_json(summary_path, {"schema_version": REPORT_SCHEMA_VERSION, "input": summarize(ds),
                              "output": summarize(clean),
                              "dropped": {k: sorted(v) for k, v in sorted(report.items())}})
    write_manifest(f"{args.output}.manifest.json", "ingest", args, [args.input], [args.output, summary_path])
    log.info("kept %d of %d sequences", len(clean), len(ds))
    return 0


def cmd_train(args) -> int:
    config = _em_config(args)
    ds = _load_training_data(args.input, args)
    groups = _select_groups(ds, args)
    if not any(len(sub) for sub in groups.values()):
        raise ValidationError("no (team, delivery) group has usable sequences")
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for (team, delivery), sub in sorted(groups.items()):
        if len(sub) == 0:
            log.warning("group %s/%s has no sequences; skipped", team, delivery)
            continue
        log.info("training %s/%s on %d sequences", team, delivery, len(sub))
        bundle = batch_train(sub, config)
        for seed, trace in zip(bundle.seeds, bundle.ll_traces):
            log.info("%s/%s seed %d log-likelihood trace %s", team, delivery, seed,
                     " ".join(f"{v:.3f}" for v in trace))
        best = bundle.seeds.index(bundle.best_seed)
        path = _model_path(out_dir, team, delivery)
        path.write_text(dumps_model(bundle.params, config, bundle.ll_traces[best]), encoding="utf-8")
        trace_path = out_dir / f"{team}_{delivery}.traces.json"
        write_json(trace_path, {"schema_version": REPORT_SCHEMA_VERSION, "seeds": bundle.seeds,
                                "best_seed": bundle.best_seed, "final_logliks": bundle.final_logliks,
                                "ll_traces": bundle.ll_traces, "objective_traces": bundle.objective_traces})
        outputs += [str(path), str(trace_path)]
    write_manifest(out_dir / "manifest.json", "train", args, [args.input], outputs)
    return 0


def cmd_decode(args) -> int:
    params = load_model(args.model)
    ds = load_dataset(args.input)
    ds = filter_for_training(ds, strict=not args.lenient)
    snapshots = []
    with open(args.output, "w", encoding="utf-8") as fh:
        for seq in ds:
            _matching_model(params, seq)
            dec = decode(params, seq)
            fh.write(json.dumps({
                "schema_version": DECODE_SCHEMA_VERSION,
                "sequence_id": seq.sequence_id,
                "n_frames": seq.n_frames,
                "defender_ids": dec.defender_ids,
                "attacker_ids": dec.attacker_ids,
                "zone_assignment": dec.assignment.tolist(),
                "states": dec.paths.T.tolist(),
                "gamma": np.round(dec.gamma, 12).tolist(),
                "loglik": dec.loglik,
            }, sort_keys=True) + "\n")
            t = min(seq.delivery_frame, seq.n_frames - 1)
            snapshots.append({
                "sequence_id": seq.sequence_id, "frame": t,
                "defenders": [{"id": pid, "x": float(seq.positions[t, i, 0]), "y": float(seq.positions[t, i, 1]),
                               "state": int(dec.paths[j, t]),
                               "marks": dec.attacker_ids[dec.paths[j, t]] if dec.paths[j, t] < params.K else None,
                               "zone": int(dec.assignment[j])}
                              for j, (i, pid) in enumerate(zip(seq.defenders, dec.defender_ids))],
                "attackers": [{"id": pid, "x": float(seq.positions[t, i, 0]), "y": float(seq.positions[t, i, 1])}
                              for i, pid in zip(seq.attackers, dec.attacker_ids)],
                "zones": [{"mean": m.tolist(), "cov": c.tolist()} for m, c in zip(params.zone_means, params.zone_covs)],
            })
    outputs = [args.output]
    if args.snapshots:
        write_json(args.snapshots, {"schema_version": DECODE_SCHEMA_VERSION, "snapshots": snapshots})
        outputs.append(args.snapshots)
    write_manifest(f"{args.output}.manifest.json", "decode", args, [args.model, args.input], outputs)
    return 0


def cmd_metrics(args) -> int:
    models = _models_by_group(args.model)
    ds = filter_for_training(load_dataset(args.input), strict=not args.lenient)
    decoded = []
    for seq in ds:
        params = models.get((seq.defending_team_id, seq.delivery_type))
        if params is None:
            log.warning("no model for %s/%s; sequence %s skipped", seq.defending_team_id,
                        seq.delivery_type, seq.sequence_id)
            continue
        _matching_model(params, seq)
        decoded.append(decode(params, seq))
    profiles = player_profiles(decoded, threshold=args.threshold, soft=args.soft,
                               include_zonal_entry=args.include_zonal_entry)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "profiles.csv", out / "profiles.json"
    write_profiles_csv(profiles, csv_path)
    write_json(json_path, profiles_document(profiles))
    write_manifest(out / "manifest.json", "metrics", args, [*args.model, args.input],
                   [str(csv_path), str(json_path)])
    log.info("%d profiles from %d decoded sequences", len(profiles), len(decoded))
    return 0


def cmd_ghost(args) -> int:
    config = _ghost_config(args)
    params = load_model(args.model)
    outcome = BaselineReceptionModel.load(args.outcome_model) if args.outcome_model else BaselineReceptionModel()
    ds = filter_for_training(load_dataset(args.input), strict=not args.lenient)
    evals = []
    for seq in ds:
        _matching_model(params, seq)
        evals += evaluate_sequence(params, seq, outcome, config)
    summary = args.summary or f"{args.output}.summary.csv"
    n = write_evaluations(evals, args.output, summary)
    outputs = [args.output, summary]
    if args.sweep_tau or args.sweep_theta:
        rows = sweep_gca(params, ds, outcome, config, args.sweep_tau or [config.tau],
                         args.sweep_theta or [config.theta])
        sweep_path = f"{args.output}.sweep.csv"
        write_sweep(rows, sweep_path)
        outputs.append(sweep_path)
    inputs = [args.model, args.input] + ([args.outcome_model] if args.outcome_model else [])
    write_manifest(f"{args.output}.manifest.json", "ghost", args, inputs, outputs)
    log.info("%d ghost evaluations", n)
    return 0


def cmd_sensitivity(args) -> int:
    config = _em_config(args)
    ds = _load_training_data(args.input, args)
    docs = []
    for (team, delivery), sub in sorted(_select_groups(ds, args).items()):
        if len(sub) < args.step:
            log.warning("group %s/%s has fewer than %d sequences; skipped", team, delivery, args.step)
            continue
        points = run_sensitivity(sub, config, step=args.step, n_seeds=args.seeds,
                                 progress=lambda p: log.info("size %d: median zone disagreement %.4f",
                                                             p.size, float(np.median(p.zone_disagreement))))
        docs.append(sensitivity_document(points, (team, delivery)))
    write_json(args.output, {"schema_version": REPORT_SCHEMA_VERSION, "groups": docs})
    write_manifest(f"{args.output}.manifest.json", "sensitivity", args, [args.input], [args.output])
    return 0


def cmd_synth(args) -> int:
    truth = default_truth(args.K, sigma2=args.sigma2, zone_var=args.zone_var, team_id=args.team_id,
                          delivery_type=args.delivery_type)
    spec = ScenarioSpec(truth, T=args.T, n_sequences=args.n_sequences, seed=args.seed,
                        team_id=args.team_id, delivery_type=args.delivery_type)
    ds, latents = generate_dataset(spec)
    save_dataset(ds, args.output)
    latent_path = args.latents or f"{args.output}.latent.jsonl"
    save_latents(latents, latent_path)
    outputs = [args.output, latent_path]
    if args.truth_model:
        Path(args.truth_model).write_text(dumps_model(truth), encoding="utf-8")
        outputs.append(args.truth_model)
    write_manifest(f"{args.output}.manifest.json", "synth", args, [], outputs)
    return 0


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdhmm", description="Man-marking and zonal assignment models for corners.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file whose keys override command-line flags")
        sp.add_argument("-v", "--verbose", action="count", default=0)
        sp.set_defaults(em=None, ghost=None)

    def em_flags(sp):
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--team")
        sp.add_argument("--delivery")
        sp.add_argument("--lenient", action="store_true", help="keep sequences that break squad-size rules")

    sp = sub.add_parser("ingest", help="validate, canonicalise and filter raw tracking data")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--summary")
    sp.add_argument("--squad-size", type=int, default=10)
    sp.add_argument("--lenient", action="store_true")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="fit one model per (team, delivery type)")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output-dir", required=True)
    em_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="per-frame marking assignments")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--snapshots", help="write delivery-frame assignment snapshots (plot data)")
    sp.add_argument("--lenient", action="store_true")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("metrics", help="player profiles (CSV columns: player_id, role, sequences_observed, "
                                        "context_aware_attention, evasion_score, effective_initial_assignments, "
                                        "switch_rate, first_contact_proximity)")
    common(sp)
    sp.add_argument("--model", required=True, action="append")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--threshold", type=int, default=20)
    sp.add_argument("--soft", action="store_true", help="posterior-weighted attention")
    sp.add_argument("--include-zonal-entry", action="store_true", help="count zonal-to-man entries as switches")
    sp.add_argument("--lenient", action="store_true")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("ghost", help="group coverage advantage against role-conditioned ghosts")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--summary")
    sp.add_argument("--outcome-model", help="JSON weights of the reception model")
    sp.add_argument("--mc-samples", type=int)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--occupancy", choices=("smoothed", "filtered"))
    sp.add_argument("--frames", choices=("delivery", "all"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--sweep-tau", type=float, nargs="+", help="also summarise GCA over these tau values")
    sp.add_argument("--sweep-theta", type=float, nargs="+", help="also summarise GCA over these theta values")
    sp.add_argument("--lenient", action="store_true")
    sp.set_defaults(func=cmd_ghost)

    sp = sub.add_parser("sensitivity", help="stability of refits on growing chronological subsets")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--step", type=int, default=10)
    sp.add_argument("--seeds", type=int, default=10)
    em_flags(sp)
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("synth", help="simulate a synthetic dataset from a known model")
    common(sp)
    sp.add_argument("--output", required=True)
    sp.add_argument("--latents")
    sp.add_argument("--truth-model")
    sp.add_argument("--n-sequences", type=int, default=100)
    sp.add_argument("-K", type=int, default=10)
    sp.add_argument("-T", type=int, default=75)
    sp.add_argument("--sigma2", type=float, default=0.25)
    sp.add_argument("--zone-var", type=float, default=1.0)
    sp.add_argument("--team-id", default="SYN")
    sp.add_argument("--delivery-type", default="inswing")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def apply_config(args: argparse.Namespace, path: str) -> None:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest in ("em", "ghost"):
            allowed = {f.name for f in fields(EmConfig if dest == "em" else GhostConfig)}
            if not isinstance(value, dict) or set(value) - allowed:
                raise ValidationError(f"bad '{key}' section in config")
        elif dest not in vars(args) or dest in ("func", "command", "config"):
            raise ValidationError(f"unknown config key {key!r} for '{args.command}'")
        setattr(args, dest, value)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        if args.config:
            apply_config(args, args.config)
        return args.func(args)
    except (ValidationError, SchemaError, ModelFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return 1
    except (EmissionUnderflowError, RuntimeError, np.linalg.LinAlgError, OSError) as exc:
        log.error("run failed: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
