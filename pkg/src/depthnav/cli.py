"""Command-line pipeline driver: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 prerequisite mismatch,
4 numerical failure. Any config key can be overridden with an environment
variable DEPTHNAV_<SECTION>__<KEY>.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import PROFILES, load_config
from .errors import ConfigError, NumericalError, PrerequisiteError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="built-in profile preset")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument(
        "--stage-input",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="named stage input override (e.g. vae=resnet_dil, policy=policy_x)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthnav", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("gen-scenes", "generate train/eval/sparse obstacle worlds"),
        ("bootstrap", "short PPO run with a random encoder in sparse scenes"),
        ("collect", "roll the bootstrap policy to record a GT depth dataset"),
        ("degrade", "derive the stereo-like dataset from the GT dataset"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("train-vae", help="train a depth VAE on the GT dataset")
    _add_common(p)
    p.add_argument("--arch", choices=["resnet", "plain"], help="encoder architecture")
    p.add_argument("--dilation", type=int, help="min-pooling kernel (1 disables)")

    p = sub.add_parser("train-lstm", help="train the temporal predictor on VAE latents")
    _add_common(p)
    p.add_argument("--vae", help="VAE variant name, e.g. resnet_dil")

    p = sub.add_parser("train-policy", help="train the navigation policy on GT depth")
    _add_common(p)
    p.add_argument("--vae", help="frozen VAE variant name")
    p.add_argument("--name", help="policy artifact name")
    p.add_argument("--perception", choices=["vae", "lstm"], help="latent source")
    p.add_argument("--progress", action="store_true", help="print per-update metrics")

    p = sub.add_parser("adapt", help="adversarially refine the encoder on stereo frames")
    _add_common(p)
    p.add_argument("--vae", help="pretrained VAE variant name")
    p.add_argument("--name", help="output VAE name")
    p.add_argument("--no-domain-loss", action="store_true",
                   help="reconstruction-only refinement baseline")

    p = sub.add_parser("eval", help="run the navigation benchmark")
    _add_common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--mode", choices=["gt", "stereo"], default="gt")
    p.add_argument("--report", help="report name")

    p = sub.add_parser("gsi", help="latent separability between GT and stereo")
    _add_common(p)
    p.add_argument("--gt-encoder", required=True)
    p.add_argument("--stereo-encoder", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("export-latents", help="encode a dataset and export latents")
    _add_common(p)
    p.add_argument("--vae", required=True)
    p.add_argument("--dataset", default="data/gt.dtd")
    p.add_argument("--name", required=True)
    p.add_argument("--label", default="gt")
    return parser


def _workspace(args) -> pipeline.Workspace:
    overrides: dict = {}
    if args.seed is not None:
        overrides.setdefault("global", {})["seed"] = args.seed
    if args.out is not None:
        overrides.setdefault("global", {})["out_dir"] = args.out
    cfg = load_config(path=args.config, profile=args.profile, overrides=overrides)
    return pipeline.Workspace(cfg)


def _stage_inputs(args) -> dict[str, str]:
    out = {}
    for item in args.stage_input:
        if "=" not in item:
            raise ConfigError(f"--stage-input expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = value
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ws = _workspace(args)
        named = _stage_inputs(args)
        result: dict | None = None
        if args.command == "gen-scenes":
            result = {"scenes": pipeline.stage_gen_scenes(ws)}
        elif args.command == "bootstrap":
            result = pipeline.stage_bootstrap(ws)
        elif args.command == "collect":
            result = pipeline.stage_collect(ws)
        elif args.command == "degrade":
            result = pipeline.stage_degrade(ws)
        elif args.command == "train-vae":
            result = pipeline.stage_train_vae(ws, arch=args.arch, dilation=args.dilation)
            result = {"name": result["name"], "final": result["history"][-1]}
        elif args.command == "train-lstm":
            result = pipeline.stage_train_lstm(ws, vae_name=args.vae or named.get("vae"))
            result = {"windows": result["windows"], "final": result["history"][-1]}
        elif args.command == "train-policy":
            result = pipeline.stage_train_policy(
                ws, vae_name=args.vae or named.get("vae"), policy_name=args.name,
                perception_mode=args.perception, progress=args.progress,
            )
        elif args.command == "adapt":
            result = pipeline.stage_adapt(
                ws, vae_name=args.vae or named.get("vae"),
                use_domain_loss=not args.no_domain_loss, out_name=args.name,
            )
            result = {"name": result["name"], "final": result["history"][-1]}
        elif args.command == "eval":
            report = pipeline.stage_eval(
                ws, policy_name=args.policy or named.get("policy"),
                vae_name=args.vae or named.get("vae"), depth_mode=args.mode,
                report_name=args.report,
            )
            result = {"success_rate": report.success_rate, "trials": report.trials,
                      "mean_goal_velocity": report.mean_goal_velocity}
        elif args.command == "gsi":
            result = pipeline.stage_gsi(ws, args.gt_encoder, args.stereo_encoder, args.report)
        elif args.command == "export-latents":
            result = pipeline.stage_export_latents(ws, args.vae, args.dataset, args.name, args.label)
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except PrerequisiteError as err:
        print(f"prerequisite error: {err}", file=sys.stderr)
        return 3
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
