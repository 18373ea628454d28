"""Command-line interface.

Subcommands mirror the pipeline stages so intermediate artifacts can be
produced, inspected, and recombined: synth, validate, search, refine, score,
threshold, eval, pipeline, init-config. The TASC_LOG environment variable
sets the log level; --threads 1 makes runs bitwise reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import gmm, pipeline, refine, scoring, store

log = logging.getLogger("tasc")


def _thread_limit(n):
    if n and n >= 1:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=int(n))
    return nullcontext()


def _load_config(args) -> pipeline.RunConfig:
    if getattr(args, "config", None):
        cfg = pipeline.config_from_toml(args.config)
    else:
        cfg = pipeline.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "variant", None):
        cfg.variant = args.variant
        cfg.validate()
    return cfg


def _session(args):
    bundle = pipeline.load_bundle(pipeline.bundle_paths(args.data))
    return pipeline.build_session(bundle)


def _read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_init_config(args) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        print(f"error: {path} exists (use --force to overwrite)", file=sys.stderr)
        return 1
    path.write_text(pipeline.DEFAULT_CONFIG_TOML, encoding="utf-8")
    print(f"wrote {path}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    pipeline.stage_synth(cfg, args.out)
    print(f"wrote synthetic bundle to {args.out}")
    return 0


def cmd_validate(args) -> int:
    paths = [Path(p) for p in args.paths]
    if args.data:
        paths.extend(pipeline.bundle_paths(args.data).values())
    if not paths:
        print("error: nothing to validate (give paths or --data)", file=sys.stderr)
        return 1
    for path in paths:
        matrix, manifest = store.load_embeddings(path)
        if manifest.role != "adapter":
            store.l2_normalize(matrix)  # rejects zero rows
        print(f"OK {path} role={manifest.role} rows={matrix.rows} dims={matrix.dims}")
    return 0


def cmd_search(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    with _thread_limit(cfg.threads):
        session = _session(args)
        state, estimate, trace = pipeline.stage_search(session, cfg)
    path = out / pipeline.REPORT_NAMES["search"]
    pipeline.write_json(path, pipeline.search_report_dict(state, estimate, trace, session))
    print(f"wrote {path} (K={estimate.K}, K_com={estimate.K_com}, "
          f"K_pri={estimate.K_pri})")
    return 0


def cmd_refine(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    with _thread_limit(cfg.threads):
        session = _session(args)
        state = pipeline.state_from_report(_read_json(args.search_report))
        adapter, curve = pipeline.stage_refine(session, state, cfg)
    adapter_path = out / pipeline.REPORT_NAMES["adapter"]
    refine.save_adapter(adapter_path, adapter)
    pipeline.write_json(out / pipeline.REPORT_NAMES["refine"],
                        {"loss_curve": curve, "epochs": cfg.train.epochs,
                         "batch_size": cfg.train.batch_size, "eta0": cfg.train.eta0})
    print(f"wrote {adapter_path}")
    return 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    with _thread_limit(cfg.threads):
        session = _session(args)
        state = pipeline.state_from_report(_read_json(args.search_report))
        adapter = refine.load_adapter(args.adapter) if args.adapter else None
        _, score_set = pipeline.stage_score(session, state, adapter, cfg)
    path = out / pipeline.REPORT_NAMES["scores"]
    scoring.write_scores_csv(path, score_set)
    print(f"wrote {path} ({score_set.scores.shape[0]} samples, "
          f"variant={score_set.variant})")
    return 0


def cmd_threshold(args) -> int:
    out = _out_dir(args)
    score_set = scoring.read_scores_csv(args.scores)
    report = _read_json(args.search_report)
    thr = gmm.select_threshold(score_set.scores, int(report["K_com"]),
                               int(report["K_pri"]))
    path = out / pipeline.REPORT_NAMES["threshold"]
    pipeline.write_json(path, pipeline.threshold_report_dict(thr))
    print(f"wrote {path} (mode={thr.threshold.mode})")
    return 0


def _threshold_from_json(obj) -> gmm.Threshold:
    gamma = obj["gamma"]
    if gamma is None:
        gamma = -math.inf if obj["mode"] == gmm.MODE_DISABLED else math.inf
    return gmm.Threshold(gamma=float(gamma), mode=obj["mode"])


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    with _thread_limit(cfg.threads):
        session = _session(args)
        adapter = refine.load_adapter(args.adapter) if args.adapter else None
        score_set = scoring.read_scores_csv(args.scores)
        threshold = _threshold_from_json(_read_json(args.threshold_report))
        report = pipeline.stage_eval(session, adapter, score_set, threshold, cfg)
    pipeline.write_json(out / pipeline.REPORT_NAMES["eval"], report.to_json())
    pipeline.write_eval_csv(out / pipeline.REPORT_NAMES["eval_csv"], report)
    print(json.dumps(pipeline._jsonable(report.to_json()), sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    out = args.out if args.out else cfg.out_dir
    with _thread_limit(cfg.threads):
        artifacts = pipeline.run_pipeline(cfg, out)
    for name, path in sorted(artifacts.items()):
        print(f"{name}: {path}")
    return 0


def _add_common(p, config_required=True, with_out=True):
    p.add_argument("--config", required=config_required,
                   help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override run seed")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap; 1 = bitwise reproducible")
    if with_out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tasc",
        description="Universal domain adaptation on precomputed embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default TOML config")
    p.add_argument("--out", default="tasc.toml")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_init_config)

    p = sub.add_parser("synth", help="generate a synthetic EMBX bundle")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("validate", help="check EMBX files and manifests")
    p.add_argument("paths", nargs="*", help="EMBX files")
    p.add_argument("--data", default=None, help="directory with a role bundle")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("search", help="stage 1: greedy center search")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory with the EMBX bundle")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("refine", help="stage 2: train the linear adapter")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--search-report", required=True)
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("score", help="score target samples")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--search-report", required=True)
    p.add_argument("--adapter", default=None, help="adapter checkpoint (EMBX)")
    p.add_argument("--variant", default=None, choices=scoring.VARIANTS)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("threshold", help="fit the mixture and pick the threshold")
    p.add_argument("--scores", required=True, help="scores.csv from `score`")
    p.add_argument("--search-report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_threshold)

    p = sub.add_parser("eval", help="compute the evaluation report")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold-report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _add_common(p, with_out=False)
    p.add_argument("--out", default=None, help="output directory (default from config)")
    p.add_argument("--variant", default=None, choices=scoring.VARIANTS)
    p.set_defaults(fn=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("TASC_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error funnel
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
