"""The ami command line: serve the backend, simulate sensors, chat from a
terminal, evaluate rating CSVs, and run the tool server over stdio."""

from __future__ import annotations

import argparse
import getpass
import json
import signal
import sys
import threading

import httpx

from .agent import MalformedRuleError
from .config import Config, ConfigError, load_config
from .irr import CsvFormatError, evaluate_csv, render_report_table, reports_to_json
from .simulate import run_simulation
from .webapp import AmiHttpServer, build_app

JSON_SEPARATORS = (",", ":")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MalformedRuleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ami",
                                     description="Air Monitoring Interface backend and tools")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP API, tool server, and dashboard")
    serve.add_argument("--config", required=True, help="path to the TOML config file")
    serve.set_defaults(func=cmd_serve)

    sim = sub.add_parser("simulate-sensors", help="post synthetic readings to a server")
    sim.add_argument("--url", required=True, help="base URL of the running server")
    sim.add_argument("--devices", type=int, default=1)
    sim.add_argument("--interval", type=float, default=60.0, help="seconds between rounds")
    sim.add_argument("--duration", type=float, default=300.0, help="total seconds to cover")
    sim.add_argument("--seed", type=int, default=None,
                     help="fix the RNG and the timestamp base for reproducible payloads")
    sim.add_argument("--device-key", default=None, help="pre-shared ingestion key, if configured")
    sim.set_defaults(func=cmd_simulate)

    chat = sub.add_parser("chat", help="interactive chat against a running server")
    chat.add_argument("--url", required=True)
    chat.add_argument("--user", required=True)
    chat.add_argument("--password", default=None, help="prompted for when omitted")
    chat.set_defaults(func=cmd_chat)

    eval_irr = sub.add_parser("eval-irr", help="compute rater-agreement metrics from a CSV")
    eval_irr.add_argument("--csv", required=True, help="criterion,rater,item,score rows")
    eval_irr.add_argument("--scheme", choices=("linear", "quadratic"), default="quadratic")
    eval_irr.add_argument("--scale-max", type=int, default=5)
    eval_irr.add_argument("--json", action="store_true", dest="as_json")
    eval_irr.set_defaults(func=cmd_eval_irr)

    stdio = sub.add_parser("mcp-stdio",
                           help="serve the tool server over stdin/stdout (newline-delimited)")
    stdio.add_argument("--config", required=True)
    stdio.add_argument("--user", required=True,
                       help="acting user id; stdio trusts the launching process")
    stdio.set_defaults(func=cmd_mcp_stdio)

    return parser


def cmd_serve(args) -> int:
    config = load_config(args.config)
    app = build_app(config)
    host, port = config.host_port()
    try:
        server = AmiHttpServer(app, host, port)
    except OSError as exc:
        print(f"error: cannot bind {host}:{port}: {exc}", file=sys.stderr)
        return 2
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    server.start_background()
    print(f"ami: serving on {server.url} (planner: {config.planner_mode})")
    stop.wait()
    print("ami: shutting down")
    server.shutdown()
    return 0


def cmd_simulate(args) -> int:
    if args.devices < 1 or args.interval <= 0 or args.duration <= 0:
        print("error: devices, interval, and duration must be positive", file=sys.stderr)
        return 2
    report = run_simulation(args.url, args.devices, args.interval, args.duration,
                            seed=args.seed, device_key=args.device_key)
    for line in report.errors:
        print(f"post failed: {line}", file=sys.stderr)
    print(f"posted {report.posted} readings ({report.failed} failed)")
    return 1 if report.failure_rate > 0.10 else 0


def cmd_chat(args) -> int:
    password = args.password if args.password is not None else getpass.getpass()
    base = args.url.rstrip("/")
    with httpx.Client(timeout=30.0) as client:
        try:
            login = client.post(f"{base}/api/login",
                                json={"username": args.user, "password": password})
        except httpx.HTTPError as exc:
            print(f"error: cannot reach {base}: {exc}", file=sys.stderr)
            return 2
        if login.status_code != 200:
            print(f"error: login failed (HTTP {login.status_code})", file=sys.stderr)
            return 1
        token = login.json()["token"]
        headers = {"Authorization": f"Bearer {token}"}
        interactive = sys.stdin.isatty()
        while True:
            if interactive:
                print("> ", end="", flush=True)
            line = sys.stdin.readline()
            if not line:
                break
            message = line.strip()
            if not message:
                continue
            response = client.post(f"{base}/api/chat", json={"message": message},
                                   headers=headers)
            if response.status_code != 200:
                detail = response.json().get("error", response.text)
                print(f"error: {detail}", file=sys.stderr)
                continue
            payload = response.json()
            print(payload["reply"])
            for call in payload["tool_calls"]:
                args_text = json.dumps(call["args"], separators=JSON_SEPARATORS)
                result_text = json.dumps(call["result"], separators=JSON_SEPARATORS)
                print(f"[tool] {call['tool_name']}({args_text}) -> {result_text}")
    return 0


def cmd_eval_irr(args) -> int:
    try:
        reports = evaluate_csv(args.csv, scale_max=args.scale_max, scheme=args.scheme)
    except OSError as exc:
        print(f"error: cannot read {args.csv}: {exc}", file=sys.stderr)
        return 2
    except CsvFormatError as exc:
        print(f"error: {args.csv}: {exc}", file=sys.stderr)
        return 1
    if args.as_json:
        sys.stdout.write(reports_to_json(reports, scheme=args.scheme))
    else:
        sys.stdout.write(render_report_table(reports, scheme=args.scheme))
    return 0


def cmd_mcp_stdio(args) -> int:
    config = load_config(args.config)
    app = build_app(config)
    try:
        if args.user not in app.profiles.known_users():
            print(f"error: unknown user: {args.user}", file=sys.stderr)
            return 2
        app.mcp.serve_stdio(args.user)
    finally:
        app.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
