"""Command line entry point: ``dyjr train | eval | report``.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig, load_config, parse_override
from .errors import DyJRError
from .trainer import _stream, evaluate, load_params, report, train

log = logging.getLogger("dyjr")


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = dict(parse_override(text) for text in getattr(args, "override", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(overrides) if overrides else cfg


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    result = train(cfg, out_dir=out, resume=args.resume)
    last = result.records[-1] if result.records else None
    summary = {"steps": result.trainer.step, "out": str(out), "config_digest": cfg.digest()}
    if last is not None:
        summary.update(mean_reward=last.mean_reward, rank1_prob=last.rank1_prob,
                       approx_entropy_mean=last.approx_entropy_mean, eval_pass16=last.eval_pass16)
    print(json.dumps(summary))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    params, state = load_params(args.checkpoint, cfg)
    metrics = evaluate(params, cfg, rng=_stream(cfg.seed, "eval", int(state["step"])))
    print(json.dumps({"step": state["step"], **metrics}))
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    text = report(args.log, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def _add_config_args(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--config", required=required, help="JSON file mirroring TrainConfig (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyjr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training and write metrics.jsonl plus checkpoints")
    _add_config_args(p, required=False)
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out queries")
    p.add_argument("--checkpoint", required=True)
    _add_config_args(p, required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="convert a metrics log to CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DyJRError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
