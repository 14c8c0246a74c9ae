"""Command-line entry point: ``stepedit <command> [flags]``.

Every :class:`~stepedit.harness.config.ExperimentConfig` field is also a flag
(``--meta-lr 1e-3``, ``--seeds 0,1,2``); flags override ``--config`` files,
which override ``--preset``.  Artifacts go under ``--out``, else
``$STEPEDIT_OUT``, else ``./runs``.

Exit codes: 0 success, 2 usage/configuration, 3 failed precondition,
4 numeric failure, 5 I/O or checkpoint failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from stepedit import evalprof as ep
from stepedit import factsynth as fs
from stepedit.editengine import delta_dump_rows, mbps_edit
from stepedit.errors import (CapacityError, CheckpointError, ContractError, NumericError,
                             PreconditionError, ShapeError)
from stepedit.harness import config as hc
from stepedit.harness import experiments as ex
from stepedit.harness.persist import load_state, save_state
from stepedit.hypernet import HypernetworkStepSet
from stepedit.metatrain import Trainer

log = logging.getLogger("stepedit")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PRECONDITION = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

COMMANDS = ("gen-data", "pretrain", "train", "edit", "eval", "profile", "sweep", "compare")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group(
        "configuration",
        "every ExperimentConfig key is also a flag with dashes, e.g. --preset desk --rank 16 "
        "--inner-lr 0.01 --seeds 0,1; precedence is preset < --config file < flags")
    g.add_argument("--config", help="key = value configuration file")
    g.add_argument("--out", help="output root (default $STEPEDIT_OUT or ./runs)")
    g.add_argument("--seed", type=int, help="shorthand for --seeds N")
    for f in fields(hc.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None,
                       help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stepedit", description="Multi-step meta-learned model editing at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic edit corpus for each seed")
    _add_config_flags(p)

    p = sub.add_parser("pretrain", help="fit the base toy model and check unedited specificity")
    _add_config_flags(p)

    p = sub.add_parser("train", help="meta-train hypernetworks")
    _add_config_flags(p)
    p.add_argument("--resume", help="trainer checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0, help="save a checkpoint every N iterations")
    p.add_argument("--stop-after", type=int, default=None,
                   help="stop after N iterations in total (checkpoint is written)")

    p = sub.add_parser("edit", help="apply trained hypernetworks to held-out batches")
    _add_config_flags(p)
    p.add_argument("--run", required=True, help="run directory written by 'train'")

    p = sub.add_parser("eval", help="emit editing metrics (unedited model without --run)")
    _add_config_flags(p)
    p.add_argument("--run", help="run directory written by 'train'")

    p = sub.add_parser("profile", help="five-category training-time profile")
    _add_config_flags(p)
    p.add_argument("--modes", default=None, help="comma-separated modes (default: the configured one)")

    p = sub.add_parser("sweep", help="BP-step sweep and training-data scarcity sweep")
    _add_config_flags(p)
    p.add_argument("--kind", choices=("steps", "scarcity", "both"), default="steps")
    p.add_argument("--steps", default=None, help="comma-separated S values (default 1,2,3,4)")
    p.add_argument("--iters", default=None, help="comma-separated iteration budgets for the scarcity sweep")

    p = sub.add_parser("compare", help="join metrics CSVs keyed by (mode, S, seed)")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--style", default="argmax_exact", choices=ep.STYLES)
    p.add_argument("--output", help="write the table here instead of stdout")
    return parser


def resolve_config(args) -> hc.ExperimentConfig:
    overrides = {}
    for f in fields(hc.ExperimentConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = hc.parse_value(f.name, raw)
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if args.config:
        return hc.load(args.config, overrides)
    return hc.build(overrides=overrides)


def _write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg, root: Path, args) -> int:
    for seed in cfg.seeds:
        corpus = fs.generate_corpus(cfg.corpus(seed))
        path = corpus.save(root / "data" / f"corpus_s{seed}.jsonl")
        print(f"wrote {path} ({len(corpus)} samples)")
    return EXIT_OK


def cmd_pretrain(cfg, root: Path, args) -> int:
    for seed in cfg.seeds:
        corpus = fs.generate_corpus(cfg.corpus(seed))
        model, fit = ex.pretrain(cfg, corpus, seed)
        path = model.save(ex.base_path(root, cfg, seed))
        metrics = ex.check_unedited(cfg, model, corpus.samples)
        summary = {"seed": seed, "steps": fit.steps, "loss": fit.final_loss, "accuracy": fit.accuracy,
                   "unedited": {k: v.__dict__ for k, v in metrics.items()}, "path": str(path)}
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _run_dir(root: Path, cfg, seed: int) -> Path:
    return root / "train" / ex.run_id(cfg, seed)


def cmd_train(cfg, root: Path, args) -> int:
    for seed in cfg.seeds:
        prep = ex.prepare(cfg, seed, root)
        out = _run_dir(root, cfg, seed)
        out.mkdir(parents=True, exist_ok=True)
        cfg.with_values(seeds=(seed,)).save(out / "config.cfg")
        if args.resume:
            tr = load_state(args.resume, prep.train)
        else:
            tr = Trainer(cfg.trainer(seed), prep.model, prep.train)
        total = cfg.iterations if args.stop_after is None else min(args.stop_after, cfg.iterations)
        while tr.iteration < total:
            tr.run_iteration()
            if args.checkpoint_every and tr.iteration % args.checkpoint_every == 0:
                save_state(out / "state.npz", tr)
        save_state(out / "state.npz", tr)
        tr.hypernets.save(out / "hypernets.npz")
        meta = {"run_id": out.name, "seed": seed, "config_hash": cfg.hash(), "config": cfg.to_json(),
                "iterations_done": tr.iteration, "skipped_updates": tr.skipped}
        ep.emit_report(out, logs=tr.log, meta=meta, formats=("json",))
        print(f"trained {out.name}: {tr.iteration} iterations, final loss {tr.log[-1]['total']:.4f}")
    return EXIT_OK


def _load_run(run: Path) -> tuple[hc.ExperimentConfig, HypernetworkStepSet]:
    if not (run / "config.cfg").is_file():
        raise FileNotFoundError(f"{run} is not a run directory written by 'train' (no config.cfg)")
    cfg = hc.load(run / "config.cfg")
    return cfg, HypernetworkStepSet.load(run / "hypernets.npz")


def cmd_edit(cfg, root: Path, args) -> int:
    run = Path(args.run)
    cfg, nets = _load_run(run)
    seed = cfg.seeds[0]
    prep = ex.prepare(cfg, seed, root)
    work = prep.model.copy()
    rows = []
    tc = cfg.trainer(seed)
    samples = prep.test
    for i in range(0, len(samples), tc.batch_size):
        if not tc.sequential:
            work = prep.model.copy()
        res = mbps_edit(work, samples[i:i + tc.batch_size], nets, S=tc.S, aggregation=tc.aggregation,
                        lr=tc.inner_lr)
        for r in delta_dump_rows(res.deltas):
            rows.append({"batch": i // tc.batch_size, **r})
    _write_csv(run / "edit_deltas.csv", ("batch", "layer_id", "step", "frobenius_norm"), rows)
    if tc.sequential:
        work.save(run / "edited_model.npz")
    print(f"edited {len(samples)} held-out samples; delta norms in {run / 'edit_deltas.csv'}")
    return EXIT_OK


def cmd_eval(cfg, root: Path, args) -> int:
    if args.run:
        run = Path(args.run)
        cfg, nets = _load_run(run)
        seed = cfg.seeds[0]
        prep = ex.prepare(cfg, seed, root)
        tc = cfg.trainer(seed)
        metrics = ep.edit_and_evaluate(prep.model, nets, prep.test, batch_size=tc.batch_size, S=tc.S,
                                       aggregation=tc.aggregation, lr=tc.inner_lr, sequential=tc.sequential)
        chash = ep.config_hash({**cfg.to_json(), "seed": seed})
        rows = [ep.metrics_rows(run.name, tc.mode, tc.S, m, seed, chash) for m in metrics.values()]
        out = run
    else:
        rows = []
        for seed in cfg.seeds:
            prep = ex.prepare(cfg, seed, root)
            chash = ep.config_hash({**cfg.to_json(), "seed": seed})
            for m in ex.check_unedited(cfg, prep.model, prep.test).values():
                rows.append(ep.metrics_rows(f"unedited-s{seed}-{cfg.hash()}", "unedited", 0, m, seed, chash))
        out = root / "eval" / f"unedited-{cfg.hash()}"
    ep.emit_report(out, metrics=rows, meta={"config_hash": cfg.hash(), "config": cfg.to_json()})
    for r in rows:
        print(f"{r['style']:>12}  eff={r['eff']:.3f} gen={r['gen']:.3f} spe={r['spe']:.3f} n={r['n']}")
    return EXIT_OK


def cmd_profile(cfg, root: Path, args) -> int:
    modes = args.modes.split(",") if args.modes else [cfg.mode]
    seed = cfg.seeds[0]
    prep = ex.prepare(cfg, seed, root)
    rows, summary = [], {}
    if len(modes) > 1:
        profs = ex.profile_modes(cfg, prep, modes, S=1)
    else:
        profs = {modes[0]: ex.profile(cfg, prep, mode=modes[0])}
    for mode, prof in profs.items():
        rid = f"profile-{mode}-s{seed}-{cfg.hash()}"
        rows += ep.profile_rows(rid, prof, seed, cfg.hash())
        summary[mode] = prof.to_json()
        shares = "  ".join(f"{c}={prof.mean_s[c] * 1e3:.3f}ms" for c in prof.mean_s)
        print(f"{mode}: wall={prof.wall_mean_s * 1e3:.3f}ms coverage={prof.coverage:.3f}  {shares}")
    ep.emit_report(root / "profile" / cfg.hash(), profiles=rows,
                   meta={"config_hash": cfg.hash(), "config": cfg.to_json(), "profiles": summary})
    return EXIT_OK


def _ints(raw):
    try:
        return tuple(int(x) for x in raw.split(",") if x.strip()) if raw else None
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {raw!r}") from exc


def cmd_sweep(cfg, root: Path, args) -> int:
    steps = _ints(args.steps) or cfg.sweep_steps
    iters = _ints(args.iters) or cfg.sweep_iterations
    base = root / "sweep" / cfg.hash()
    meta = {"config_hash": cfg.hash(), "config": cfg.to_json()}
    status = EXIT_OK
    if args.kind in ("steps", "both"):
        rows: list = []
        try:
            ex.step_sweep(cfg, steps=steps, cache_dir=root, on_row=rows.append)
        except NumericError as exc:
            print(f"step sweep aborted: {exc}", file=sys.stderr)
            meta["aborted"] = str(exc)
            status = EXIT_NUMERIC
        ep.emit_report(base / "steps", metrics=rows, meta=meta)
        print(f"step sweep: {len(rows)} rows -> {base / 'steps' / 'metrics.csv'}")
    if args.kind in ("scarcity", "both") and status == EXIT_OK:
        rows = ex.scarcity_sweep(cfg, iterations=iters, cache_dir=root)
        for it in iters:
            sel = [r for r in rows if r["iterations"] == it]
            ep.emit_report(base / f"scarcity_it{it}", metrics=sel, meta={**meta, "iterations": it})
        print(f"scarcity sweep: {len(rows)} rows -> {base}/scarcity_it*/metrics.csv")
    return status


def cmd_compare(args) -> int:
    columns, rows = ex.compare(args.inputs, args.style)
    if args.output:
        _write_csv(Path(args.output), columns, rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "edit": cmd_edit,
            "eval": cmd_eval, "profile": cmd_profile, "sweep": cmd_sweep}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "compare":
            return cmd_compare(args)
        cfg = resolve_config(args)
        root = hc.output_root(args.out)
        return HANDLERS[args.command](cfg, root, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, CapacityError, ShapeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
