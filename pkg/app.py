# /app.py - MASTER CONTROLLER
# Command-line entry: parses the subcommand, loads the run config, opens the
# run's flight recorder and maps library errors to exit codes.
#
#   python app.py synth    --config run.json [--out DIR]
#   python app.py mask     --config run.json --in X.pseq --out Y.pseq [--pattern KIND] [--prob P]
#   python app.py train    --config run.json --role short --out short.tcdckpt [--resume CK]
#   python app.py sample   --config run.json --in Y.pseq --out DIR [--checkpoint role=path ...]
#   python app.py repair   --config run.json --in Y.pseq --out R.pseq [--checkpoint pre.tcdckpt]
#   python app.py evaluate --config run.json --report out/report.json [--pipeline "pre+zero_vel"]
#
# Any config key can be overridden with --set dotted.path=value (repeatable).

import sys
import json
import argparse

from modules.tcd_forecast import config as CFG
from modules.tcd_forecast import cli_app
from modules.tcd_forecast.errors import ConfigError, ParameterError, TCDError
from modules.tcd_forecast.trainer import ROLES
from services.logger_service import LoggerService
import models


class CLIParser(argparse.ArgumentParser):
    """Usage errors leave through the same ERROR line as library errors."""

    def error(self, message):
        raise ParameterError(f"{self.prog}: {message}", path="argv")


def build_parser():
    parser = CLIParser(prog="tcd", description="Masked conditional diffusion for pose forecasting and repair")
    parser.add_argument("--data-dir", default=CFG.DATA_DIR, help="base directory for logs and run folders")
    parser.add_argument("--verbose", action="store_true", help="echo library logs to the console")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config (RunConfig)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                       help="override one config key by dotted path")
        return p

    p = command("synth", "write the synthetic gait corpus")
    p.add_argument("--out", dest="out_dir", help="corpus root (defaults to data.train_dir / data.test_dir)")

    p = command("mask", "apply an occlusion pattern to a sequence")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--pattern", help="shortcut for --set mask.kind=...")
    p.add_argument("--prob", type=float, help="shortcut for --set mask.prob=...")
    p.add_argument("--seed", type=int)

    p = command("train", "train one block role")
    p.add_argument("--role", required=True, choices=ROLES)
    p.add_argument("--out", dest="out_checkpoint", required=True)
    p.add_argument("--train-dir")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = command("sample", "forecast from one observation")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--checkpoint", dest="checkpoints", action="append", default=[], metavar="ROLE=PATH")
    p.add_argument("--pipeline", help="[pre+]<tcd|single|zero_vel|exec:CMD>[+refine]")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)

    p = command("repair", "impute occluded joints of an observation")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--checkpoint", dest="pre_checkpoint", help="pre block checkpoint")
    p.add_argument("--seed", type=int)

    p = command("evaluate", "evaluate a pipeline on the test corpus")
    p.add_argument("--report", dest="report_path", required=True)
    p.add_argument("--pipeline")
    p.add_argument("--test-dir")
    return parser


def _overrides(args):
    overrides = list(args.overrides)
    if args.command == "mask":
        if args.pattern is not None:
            overrides.append(f"mask.kind={json.dumps(args.pattern)}")
        if args.prob is not None:
            overrides.append(f"mask.prob={args.prob}")
    if args.command == "sample":
        for item in args.checkpoints:
            role, sep, path = item.partition("=")
            if not sep or role not in ROLES:
                raise ConfigError(f"--checkpoint expects ROLE=PATH with ROLE in {ROLES}, got '{item}'",
                                  path="cascade.checkpoints")
            overrides.append(f"cascade.checkpoints.{role}={json.dumps(path)}")
    return overrides


def _dispatch(args, run_cfg, service, run_id):
    common = {"service": service, "run_id": run_id}
    if args.command == "synth":
        written = cli_app.cmd_synth(run_cfg, args.out_dir, **common)
        return [f"{split}: {path}" for split, path in written.items()]
    if args.command == "mask":
        return [cli_app.cmd_mask(run_cfg, args.in_path, args.out_path, seed=args.seed, **common)]
    if args.command == "train":
        ck = cli_app.cmd_train(run_cfg, args.role, args.out_checkpoint, train_dir=args.train_dir,
                               resume=args.resume, **common)
        final = f"{ck.loss_trace[-1]:.6f}" if ck.loss_trace else "n/a"
        return [f"{args.out_checkpoint} (epoch {ck.epoch}, final loss {final})"]
    if args.command == "sample":
        return cli_app.cmd_sample(run_cfg, args.in_path, args.out_dir, n_samples=args.n_samples, seed=args.seed,
                                  pipeline=args.pipeline, **common)
    if args.command == "repair":
        return [cli_app.cmd_repair(run_cfg, args.in_path, args.out_path, pre_checkpoint=args.pre_checkpoint,
                                   seed=args.seed, **common)]
    _, table = cli_app.cmd_evaluate(run_cfg, args.report_path, test_dir=args.test_dir, pipeline=args.pipeline,
                                    **common)
    return [table.rstrip("\n")]


def _error_line(record):
    return "ERROR " + json.dumps(record, sort_keys=True)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ParameterError as e:
        print(_error_line(e.to_record()), file=sys.stderr)
        return e.exit_code
    service = LoggerService(base_data_path=args.data_dir, verbose=args.verbose)
    run_id = None
    try:
        run_cfg = models.load_run_config(args.config, _overrides(args))
        run_id = cli_app.make_run_id(args.command, run_cfg, **{k: v for k, v in vars(args).items()
                                                                 if k not in ("overrides", "verbose")})
        service.log_system('INFO', f"Run {run_id} started ({args.command})")
        service.log_run(run_id, 'INFO', f"Command '{args.command}' with config {args.config or '<defaults>'}",
                        stage="SESSION_MGR")
        for line in _dispatch(args, run_cfg, service, run_id):
            print(line)
        service.log_run(run_id, 'INFO', "Run finished", stage="SESSION_MGR")
        service.close_run(run_id)
        return 0
    except TCDError as e:
        record = e.to_record()
    except Exception as e:
        record = {"code": 1, "type": type(e).__name__, "message": str(e), "path": None}
    print(_error_line(record), file=sys.stderr)
    service.log_system('ERROR', f"Run {run_id or args.command} failed: {_error_line(record)}")
    if run_id:
        service.log_run(run_id, 'ERROR', record["message"], stage="SESSION_MGR")
        service.close_run(run_id)
    return record["code"]


if __name__ == '__main__':
    sys.exit(main())
