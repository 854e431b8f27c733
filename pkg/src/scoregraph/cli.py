"""Command-line entry point: ``train``, ``sample``, ``eval`` and ``oracle-check``.

Exit codes: 0 success, 2 usage error, 3 missing or malformed input file,
4 invalid combination of options with the data or checkpoint schema,
5 a verification threshold was not met.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import CategoricalSlot, ConditionError, ConditionKey, acceptance_dataset
from .graph import GraphError, token_table
from .io import (FormatError, SchemaMismatch, load_checkpoint, load_dataset, load_samples, save_checkpoint,
                 save_dataset, save_samples, schema_to_json)
from .metrics import (SyntheticLabeler, ValenceTable, controllability, empirical_distribution, total_variation,
                      validity_rate)
from .neural import NeuralScorer
from .noise import NoiseSchedule
from .sampling import CalibrationParams, GuidanceError, GuidanceSpec, SamplerConfig, exact_model_distribution, sample
from .scoring import ExactScorer, UnknownKey
from .training import Regime, TrainConfig, Trainer, make_tabular, write_loss_csv

log = logging.getLogger("scoregraph")

EXIT_USAGE, EXIT_INPUT, EXIT_SCHEMA, EXIT_VERIFY = 2, 3, 4, 5


class UsageError(Exception):
    pass


class SchemaError(Exception):
    pass


class VerificationFailed(Exception):
    pass


def _parse_condition(text: str, schema):
    slot, sep, value = text.partition("=")
    if not sep:
        raise UsageError(f"--condition expects SLOT=VALUE, got {text!r}")
    m = int(slot)
    if not 0 <= m < len(schema):
        raise SchemaError(f"condition slot {m} is outside the schema's {len(schema)} slots")
    if isinstance(schema[m], CategoricalSlot):
        return m, schema[m].check(int(value))
    return m, schema[m].check([float(v) for v in value.split(",")])


def _parse_slots(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        slot, _, w = part.partition(":")
        out[int(slot)] = float(w) if w else 1.0
    return out


def _build_guidance(args, M: int) -> GuidanceSpec:
    if args.mode == "unconditional":
        return GuidanceSpec.unconditional()
    if args.mode == "cfg":
        return GuidanceSpec.cfg(args.w)
    if args.mode == "cog":
        if not args.slots:
            raise UsageError("--mode cog needs --slots SLOT:W[,SLOT:W...]")
        weights = _parse_slots(args.slots)
        bad = [m for m in weights if not 0 <= m < M]
        if bad:
            raise SchemaError(f"slots {bad} are not in the checkpoint schema ({M} slots)")
        return GuidanceSpec.cog(weights)
    if not args.subset:
        raise UsageError("--mode fast-cog needs --subset SLOT[,SLOT...]")
    subset = [int(s) for s in args.subset.split(",")]
    bad = [m for m in subset if not 0 <= m < M]
    if bad:
        raise SchemaError(f"slots {bad} are not in the checkpoint schema ({M} slots)")
    return GuidanceSpec.fast_cog(subset, args.w)


def _dataset(path):
    return acceptance_dataset(absorbing=path == "builtin:absorb") if str(path).startswith("builtin:") \
        else load_dataset(path)


def cmd_train(args) -> int:
    ds = _dataset(args.dataset)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, steps=args.steps,
                      lambda_edge=args.lambda_edge, p_drop=args.p_drop, warmup_steps=args.warmup,
                      grad_clip_norm=args.clip or None, regime=Regime(args.regime), seed=args.seed,
                      lr_decay=args.lr_decay, final_lr_fraction=args.final_lr_fraction, optimizer=args.optimizer)
    schedule = NoiseSchedule()
    if args.scorer == "tabular":
        scorer = make_tabular(ds, cfg, schedule, time_bins=args.time_bins)
    else:
        scorer = NeuralScorer(ds.n, ds.spaces, ds.schema, schedule, hidden=args.hidden, seed=args.seed,
                              p_drop=args.p_drop)
    trainer = Trainer(scorer, ds, cfg, schedule)
    trace = trainer.run(log_every=max(1, cfg.steps // 10))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(scorer, out, cfg.to_dict(), args.seed)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    write_loss_csv(trace, loss_csv)
    if args.report_dir:
        from .plotting import plot_loss

        steps = np.arange(1, len(trace) + 1)
        plot_loss(steps, [r.node_term for r in trace], [r.edge_term for r in trace],
                  [r.total for r in trace], Path(args.report_dir) / "loss.png")
    print(f"trained {args.scorer} scorer for {cfg.steps} steps; final loss {trace[-1].total:.6g}")
    print(f"checkpoint: {out}\nloss csv: {loss_csv}")
    return 0


def cmd_sample(args) -> int:
    scorer = load_checkpoint(args.checkpoint)
    schema = scorer.schema
    conditions = [None] * len(schema)
    for text in args.condition or []:
        m, v = _parse_condition(text, schema)
        conditions[m] = v
    guidance = _build_guidance(args, len(schema))
    calib = CalibrationParams(args.alpha, args.beta, args.tau) if args.pc else None
    config = SamplerConfig(steps=args.steps, n=args.n or scorer.n, num_samples=args.count, seed=args.seed)
    if config.n != scorer.n:
        raise SchemaError(f"checkpoint was trained on n={scorer.n} graphs, not n={config.n}")
    graphs, diag = sample(scorer, guidance, calib, config, tuple(conditions), scorer.schedule)
    meta = {"checkpoint": str(args.checkpoint), "mode": guidance.mode, "w": guidance.w,
            "weights": [list(p) for p in guidance.weights], "subset": list(guidance.subset),
            "calibration": None if calib is None else [calib.alpha, calib.beta, calib.tau],
            "steps": config.steps, "seed": args.seed, "schema": schema_to_json(schema),
            "degenerate_tokens": diag.degenerate_tokens}
    save_samples(graphs, [tuple(conditions)] * len(graphs), args.out, meta)
    if args.report_dir:
        from .plotting import plot_entropy

        rd = Path(args.report_dir)
        rd.mkdir(parents=True, exist_ok=True)
        with open(rd / "sampling_diagnostics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["reverse_step", "mean_entropy"])
            for k, h in zip(range(config.steps, 0, -1), diag.mean_entropy):
                w.writerow([k, repr(h)])
        plot_entropy(diag.mean_entropy, rd / "entropy.png")
    print(f"wrote {len(graphs)} samples to {args.out} ({diag.degenerate_tokens} degenerate token steps)")
    return 0


def cmd_eval(args) -> int:
    header, graphs, requested = load_samples(args.samples)
    ds = _dataset(args.dataset)
    if not graphs:
        raise FormatError(f"{args.samples}: no samples")
    if any(G.n != ds.n for G in graphs):
        raise SchemaError("samples and dataset differ in node count")
    bounds = tuple(float(x) for x in args.max_degree.split(",")) if args.max_degree else \
        (float(ds.n - 1) * (ds.spaces.edge_cardinality - 1),) * ds.spaces.node_cardinality
    table = ValenceTable(bounds)
    labeler = SyntheticLabeler(ds.schema, _labeler_for(ds), ds.spaces)
    rows = [("validity", validity_rate(graphs, table, ds.spaces), "", "")]
    p_model = empirical_distribution(graphs, ds.spaces)
    tab = token_table(ds.n, ds.spaces)
    p_data = np.bincount(tab.index_of(*ds.token_arrays()), minlength=tab.size) / len(ds)
    rows.append(("total_variation", total_variation(p_model, p_data), "", ""))
    if requested and any(c is not None for r in requested for c in r):
        report = controllability(graphs, requested, labeler)
        for m, r in report.items():
            rows.append((f"slot{m}_{r.kind}", r.value, r.ci_low, r.ci_high))
    out = Path(args.report_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "ci_low", "ci_high"])
        w.writerows(rows)
    from .plotting import plot_controllability, plot_distributions

    plot_distributions(p_model, p_data, out / "distribution.png")
    ctrl = [r for r in rows if r[0].startswith("slot")]
    if ctrl:
        plot_controllability([(r[0], r[1], r[2], r[3]) for r in ctrl], out / "controllability.png")
    for name, value, lo, hi in rows:
        ci = f"  [{lo:.4f}, {hi:.4f}]" if lo != "" else ""
        print(f"{name:>20s}  {value:.4f}{ci}")
    return 0


def _labeler_for(ds):
    from .data import PARITY_FRACTION_SCHEMA, parity_fraction_labeler

    if tuple(ds.schema) != PARITY_FRACTION_SCHEMA:
        raise SchemaError("eval needs the parity/fraction labeler schema")
    return parity_fraction_labeler


def cmd_oracle_check(args) -> int:
    ds = _dataset(args.dataset)
    oracle = ExactScorer(ds, outside_support="zero")
    config = SamplerConfig(steps=args.steps, n=ds.n)
    p = exact_model_distribution(oracle, GuidanceSpec.unconditional(), None, config)
    tab = token_table(ds.n, ds.spaces)
    p_data = np.bincount(tab.index_of(*ds.token_arrays()), minlength=tab.size) / len(ds)
    tv = total_variation(p, p_data)
    print(f"TV(exact reverse dynamics, data) = {tv:.6f} at T={args.steps} (tolerance {args.tol})")
    if tv > args.tol:
        raise VerificationFailed(f"TV {tv:.6f} exceeds {args.tol}")
    return 0


def cmd_make_dataset(args) -> int:
    save_dataset(acceptance_dataset(args.absorbing), args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoregraph", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a scorer on a dataset file")
    t.add_argument("--dataset", required=True, help="dataset file, or builtin:uniform / builtin:absorb")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-csv")
    t.add_argument("--report-dir")
    t.add_argument("--scorer", choices=["tabular", "neural"], default="tabular")
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--lambda-edge", type=float, default=1.0)
    t.add_argument("--p-drop", type=float, default=0.1)
    t.add_argument("--warmup", type=int, default=1500)
    t.add_argument("--clip", type=float, default=1.0, help="global-norm clip; 0 disables")
    t.add_argument("--regime", choices=[r.value for r in Regime], default="per-property")
    t.add_argument("--lr-decay", choices=["none", "cosine"], default="none")
    t.add_argument("--final-lr-fraction", type=float, default=0.0)
    t.add_argument("--optimizer", choices=["adam", "adagrad"], default="adam")
    t.add_argument("--time-bins", type=int, default=32)
    t.add_argument("--hidden", type=int, default=32)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw graphs from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report-dir")
    s.add_argument("--mode", choices=["unconditional", "cfg", "cog", "fast-cog"], default="unconditional")
    s.add_argument("--w", type=float, default=2.0, help="guidance scale for cfg and fast-cog")
    s.add_argument("--slots", help="cog slots and weights, e.g. 0:1.5,1:1.0")
    s.add_argument("--subset", help="fast-cog slots, e.g. 0,1")
    s.add_argument("--condition", action="append", help="requested value, SLOT=VALUE (repeatable)")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--n", type=int)
    s.add_argument("--pc", action="store_true", help="enable probability calibration")
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=99.0)
    s.add_argument("--tau", type=float, default=1.0)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a samples file against a dataset")
    e.add_argument("--samples", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--report-dir")
    e.add_argument("--max-degree", help="comma-separated degree bound per node state")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle-check", help="exact-score reverse dynamics vs the data distribution")
    o.add_argument("--dataset", required=True)
    o.add_argument("--steps", type=int, default=512)
    o.add_argument("--tol", type=float, default=0.05)
    o.set_defaults(func=cmd_oracle_check)

    d = sub.add_parser("make-dataset", help="write the built-in four-graph benchmark")
    d.add_argument("--out", required=True)
    d.add_argument("--absorbing", action="store_true")
    d.set_defaults(func=cmd_make_dataset)

    for sp in (t, s, e, o, d):
        sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SCOREGRAPH_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, FormatError, json.JSONDecodeError) as err:
        if isinstance(err, SchemaMismatch):
            print(f"schema error: {err}", file=sys.stderr)
            return EXIT_SCHEMA
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (SchemaError, GuidanceError, UnknownKey, ConditionError, GraphError) as err:
        print(f"schema error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except VerificationFailed as err:
        print(f"verification failed: {err}", file=sys.stderr)
        return EXIT_VERIFY
    except ValueError as err:
        print(f"invalid option: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
