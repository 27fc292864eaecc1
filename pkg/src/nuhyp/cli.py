"""Command-line client.

Runs analyses in-process by default; with ``--server URL`` the validated
config is posted to a running service and the returned bundle is written
locally. Exit codes: 0 ok, 1 expectation failure, 2 config/schema error,
3 runtime analysis error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config

COMMANDS = {
    "analyze-times": "times",
    "blocks": "blocks",
    "grow": "grow",
    "nested": "nested",
    "measure-sweep": "measure-sweep",
    "synth": "synth",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nuhyp", description="Nonuniform hyperbolicity analytics")
    sub = p.add_subparsers(dest="command", required=True)
    for name, analysis in COMMANDS.items():
        sp = sub.add_parser(name, help=f"run the '{analysis}' analysis")
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--out", type=Path, help="output directory (default: config 'out' or ./out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--horizon", type=int, help="orbit horizon N")
        sp.add_argument("--samples", type=int, help="Monte Carlo sample count S")
        sp.add_argument("--server", help="post the run to a service at this base URL")
    return p


def _overrides(args) -> dict:
    out = {"analysis": [COMMANDS[args.command]]}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.horizon is not None:
        out["orbit.N"] = args.horizon
    if args.samples is not None:
        out["samples"] = args.samples
    if args.command == "synth" and args.horizon is not None:
        out["synth.length"] = args.horizon
    return out


def _run_remote(url: str, cfg):
    import httpx

    from .report import RunResult

    resp = httpx.post(url.rstrip("/") + "/experiments", json=cfg.model_dump(mode="json"),
                      timeout=None)
    if resp.status_code == 422:
        raise ConfigError(resp.json().get("detail", "rejected by server"))
    resp.raise_for_status()
    body = resp.json()
    return RunResult(body["exit_code"], body["metrics"], body["expectations"], body["artifacts"],
                     body.get("error"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg.out or "out")
    if args.server:
        try:
            result = _run_remote(args.server, cfg)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
    else:
        from .report import run_experiment

        try:
            result = run_experiment(cfg)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
    from .report import write_bundle

    try:
        write_bundle(result, out)
    except OSError as exc:
        print(f"cannot write report bundle: {exc}", file=sys.stderr)
        return 3
    print(result.artifacts["summary.txt"], end="")
    if result.error:
        print(f"analysis error: {result.error}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
