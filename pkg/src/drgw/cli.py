"""Command-line entry point.

Exit codes: 0 success (for ``verify``: watermark detected), 3 ``verify``
ran but did not detect, 2 operational error, 1 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .graph import AttackSpec, attack, read_graph, write_graph
from .io import read_json, write_json
from .training import TrainingDivergence

log = logging.getLogger("drgw")

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_ERROR = 2
EXIT_NOT_DETECTED = 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML experiment config")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--quiet", action="store_true", help="only print results and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drgw", description="Keyed graph watermarking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training curriculum for the configured variants")
    _common(p)
    p.add_argument("--variant", action="append", help="train only this variant (repeatable)")
    p.add_argument("--resume", action="store_true", help="continue from the latest stage checkpoint")
    p.add_argument("--start-stage", type=int, default=1, choices=(1, 2, 3))
    p.add_argument("--no-calibrate", action="store_true", help="skip writing a calibrated key")

    p = sub.add_parser("embed", help="watermark one graph")
    _common(p)
    p.add_argument("graph")
    p.add_argument("--key", required=True)
    p.add_argument("--k-fraction", type=float, default=None,
                   help="edit budget as a fraction of |E| (default: the training run's)")
    p.add_argument("--plan-out", help="edit plan JSON (default: <out graph>.plan.json)")

    p = sub.add_parser("verify", help="test one suspect graph for the keyed watermark")
    _common(p)
    p.add_argument("graph")
    p.add_argument("--key", required=True)
    p.add_argument("--analytic", action="store_true", help="use the unit-variance null instead of calibration")

    p = sub.add_parser("attack", help="apply a removal attack to a graph")
    _common(p)
    p.add_argument("graph")
    p.add_argument("--kind", required=True, choices=("edge_flip", "node_delete", "isomorphism", "latent_noise"))
    p.add_argument("--intensity", type=float, default=0.1)

    p = sub.add_parser("evaluate", help="attack x variant AUC grid and transparency tables")
    _common(p)
    p.add_argument("--variant", action="append")

    p = sub.add_parser("eval-disentangle", help="MIG / DCI on the controlled-clustering corpus")
    _common(p)
    p.add_argument("--num-graphs", type=int, default=500)
    p.add_argument("--naive-checkpoint")
    p.add_argument("--save-corpus", action="store_true", help="also write the generated corpus under <out>/disentangle_corpus")

    p = sub.add_parser("sweep", help="embedding strength x budget trade-off grid")
    _common(p)
    p.add_argument("--variant", default="full")

    p = sub.add_parser("report", help="render markdown tables from the CSV outputs")
    _common(p)
    return parser


def _setup_logging(quiet: bool) -> None:
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(args):
    from .harness import load_config

    return load_config(args.config, args.seed)


def _models(args, variant: str = "full", run_dir=None):
    """Explicit ``--checkpoint``, else the variant's final checkpoint under ``run_dir`` or ``--out``."""
    from .harness import final_checkpoint, load_models

    path = args.checkpoint or final_checkpoint(Path(run_dir or args.out), variant)
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found; train first or pass --checkpoint")
    return load_models(path)


def _key(path):
    from .verification import WatermarkKey

    return WatermarkKey.from_dict(read_json(path))


def cmd_train(args) -> int:
    from . import harness

    cfg = _config(args)
    out = Path(args.out)
    states = harness.train_variants(cfg, out, resume=args.resume, start_stage=args.start_stage,
                                    variants=args.variant)
    summary = {v: harness.final_losses(s) for v, s in states.items()}
    if not args.no_calibrate and "full" in states:
        key = harness.calibrated_key(cfg, states["full"].models.eval())
        write_json(out / "key.json", key.to_dict())
        summary["key"] = str(out / "key.json")
    harness.write_manifest(cfg, out, {"final_losses": summary})
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _run_k_fraction(args, default: float) -> float:
    """Edit budget of the run: ``--config`` first, then the manifest next to the key."""
    if args.config:
        return _config(args).training.k_fraction
    manifest = Path(args.key).parent / "manifest.json"
    if manifest.exists():
        return float(read_json(manifest)["config"]["training"]["k_fraction"])
    return default


def cmd_embed(args) -> int:
    from .pipeline import DEFAULT_K_FRACTION, watermark_embed

    g = read_graph(args.graph)
    key = _key(args.key)
    models = _models(args, run_dir=Path(args.key).parent)
    kf = args.k_fraction if args.k_fraction is not None else _run_k_fraction(args, DEFAULT_K_FRACTION)
    gw, plan, record = watermark_embed(g, key, models, kf, return_record=True)
    src = Path(args.graph)
    target = Path(args.out)
    if target.suffix == "" or target.is_dir():
        target = target / f"{src.stem}.wm{src.suffix}"
    write_graph(gw, target)
    plan_path = Path(args.plan_out) if args.plan_out else target.with_name(target.name + ".plan.json")
    write_json(plan_path, plan.to_dict())
    for w in record.warnings:
        log.warning(w)
    print(json.dumps({"graph": str(target), "plan": str(plan_path), "flips": len(plan.flips)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import verify

    g = read_graph(args.graph)
    key = _key(args.key)
    result = verify(g, key, _models(args, run_dir=Path(args.key).parent), analytic=args.analytic)
    print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK if result.decision else EXIT_NOT_DETECTED


def cmd_attack(args) -> int:
    g = read_graph(args.graph)
    seed = 0 if args.seed is None else args.seed
    if args.kind == "latent_noise":
        from .pipeline import latent_noise_attack

        out = latent_noise_attack(g, args.intensity, _models(args), seed=seed)
    else:
        out = attack(g, AttackSpec(args.kind, args.intensity, seed))
    src = Path(args.graph)
    target = Path(args.out)
    if target.suffix == "" or target.is_dir():
        target = target / f"{src.stem}.{args.kind}{src.suffix}"
    write_graph(out, target)
    print(json.dumps({"graph": str(target), "nodes": out.num_nodes, "edges": out.num_edges}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import harness

    paths = harness.evaluate(_config(args), Path(args.out), args.variant)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def cmd_eval_disentangle(args) -> int:
    from . import harness
    from .disentangle import SyntheticSpec, generate_corpus, run_disentangle_eval, save_corpus
    from .harness import final_checkpoint, load_models

    cfg = _config(args)
    out = Path(args.out)
    models = _models(args)
    naive_path = args.naive_checkpoint or final_checkpoint(out, "naive_baseline")
    naive = load_models(naive_path) if Path(naive_path).exists() else None
    spec = SyntheticSpec(num_graphs=args.num_graphs, seed=harness.derived_seed(cfg.seed, "disentangle"))
    corpus = generate_corpus(spec)
    if args.save_corpus:
        save_corpus(corpus, out / "disentangle_corpus")
    rows = run_disentangle_eval(models, spec, naive, corpus=corpus)
    harness.write_csv(out / "tables" / "disentanglement.csv", rows)
    write_json(out / "tables" / "disentanglement.json", {"schema": 1, "rows": rows})
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import harness

    print(json.dumps({"sweep": str(harness.sweep(_config(args), Path(args.out), args.variant))}))
    return EXIT_OK


def cmd_report(args) -> int:
    from . import harness

    print(harness.report(Path(args.out)))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "eval-disentangle": cmd_eval_disentangle,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    _setup_logging(args.quiet)
    from .harness import set_deterministic_from_env

    set_deterministic_from_env()
    try:
        return COMMANDS[args.command](args)
    except TrainingDivergence as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if not args.quiet:
            log.debug("traceback", exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
