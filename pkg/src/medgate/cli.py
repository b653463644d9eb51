"""Command-line surface for operators and users.

Commands run in process against the configured store; `serve` exposes the same
gateway over a local socket and `scenario run` drives a temporary service
through that socket.  Exit codes: 0 success, 1 usage/config error, 2 security
denial, 3 integrity failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import cvss
from .config import ConfigError, GatewayConfig, load_config, master_key_from_env
from .gateway import INTEGRITY_ERRORS, SECURITY_ERRORS, Gateway

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SECURITY = 2
EXIT_INTEGRITY = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def _exit_code_for(error: str) -> int:
    if error in SECURITY_ERRORS:
        return EXIT_SECURITY
    if error in INTEGRITY_ERRORS:
        return EXIT_INTEGRITY
    return EXIT_USAGE


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self._gateway: Gateway | None = None
        config_path = args.config
        if config_path is None and Path("medgate.toml").exists():
            config_path = "medgate.toml"
        self.config: GatewayConfig = load_config(config_path)

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            self._gateway = Gateway(self.config, master_key=master_key_from_env())
        return self._gateway

    # -- session bookkeeping ----------------------------------------------------

    def _session_file(self) -> Path:
        return self.config.store_path / "client" / "last_session.json"

    def save_session(self, user: str, token: str) -> None:
        path = self._session_file()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"user": user, "token": token}))

    def token(self) -> str:
        if getattr(self.args, "token", None):
            return self.args.token
        path = self._session_file()
        if path.exists():
            return json.loads(path.read_text())["token"]
        raise CliError("no session: run `medgate user login` first or pass --token")

    # -- request helper ---------------------------------------------------------------

    def call(self, op: str, with_token: bool = True, **params) -> dict:
        token = self.token() if with_token else None
        response = self.gateway.handle({"op": op, **({"token": token} if token else {}), **params})
        if not response.get("ok"):
            raise CliError(
                f"{response.get('error')}: {response.get('message')}",
                _exit_code_for(response.get("error", "")),
            )
        response.pop("ok")
        return response

    def emit(self, payload: dict, human: str | None = None) -> None:
        if self.args.json or human is None:
            print(json.dumps(payload, indent=2, sort_keys=True))
        else:
            print(human)


# -- commands ------------------------------------------------------------------------


def cmd_admin(ctx: Context) -> int:
    sub = ctx.args.admin_cmd
    a = ctx.args
    if sub == "add-role":
        out = ctx.call("admin/add-role", id=a.id)
    elif sub == "add-data":
        out = ctx.call("admin/add-data", id=a.id)
    elif sub == "add-edge":
        out = ctx.call("admin/add-edge", kind=a.kind, parent=a.parent, child=a.child)
    elif sub == "remove-edge":
        out = ctx.call("admin/remove-edge", parent=a.parent, child=a.child)
    elif sub == "remove-node":
        out = ctx.call("admin/remove-node", id=a.id)
    elif sub == "associate":
        out = ctx.call("admin/associate", role=a.role, data=a.data)
    elif sub == "assign":
        out = ctx.call("admin/assign", user=a.user, role=a.role)
    elif sub == "revoke":
        out = ctx.call("admin/revoke", user=a.user, role=a.role)
    elif sub == "reissue-rs":
        out = ctx.call("admin/reissue-rs", role=a.role)
    else:
        raise CliError(f"unknown admin command {sub!r}")
    ctx.emit(out, f"{sub}: ok")
    return EXIT_OK


def _login_sample(ctx: Context, user: str) -> list[float]:
    from .biocapsule import synth_sample

    seed = ctx.args.seed
    sigma = ctx.args.sigma
    manifest_path = ctx.config.store_path / "manifest.json"
    if (seed is None or sigma is None) and manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        info = manifest["users"].get(user)
        if seed is None and info is not None:
            seed = info["seed"]
        if sigma is None:
            sigma = manifest["sigma"]
    if seed is None:
        raise CliError("no synthetic seed known for this user; pass --seed")
    if sigma is None:
        sigma = ctx.config.synth_sigma
    draw = ctx.args.draw if ctx.args.draw is not None else int(time.time() * 1000) % (1 << 30)
    sample = synth_sample(int(seed), float(sigma), draw=draw, dim=ctx.config.dim)
    return [float(x) for x in sample]


def cmd_user(ctx: Context) -> int:
    sub = ctx.args.user_cmd
    a = ctx.args
    if sub == "login":
        out = ctx.call(
            "login", with_token=False, user=a.user, role=a.role, sample=_login_sample(ctx, a.user)
        )
        ctx.save_session(a.user, out["token"])
        ctx.emit(out, f"logged in as {a.user} ({a.role}); session stored")
    elif sub == "enroll":
        from .biocapsule import synth_sample

        if a.seed is None:
            raise CliError("enroll needs --seed for the synthetic feature source")
        sigma = a.sigma if a.sigma is not None else ctx.config.synth_sigma
        samples = [
            [float(x) for x in synth_sample(a.seed, sigma, draw=d, dim=ctx.config.dim)]
            for d in range(a.samples)
        ]
        out = ctx.call("admin/enroll", user=a.user, role=a.role, samples=samples)
        ctx.emit(out, f"enrolled {a.user} for {a.role} under {out['rs_id']}")
    elif sub == "get":
        out = ctx.call("record/get", record_id=a.record_id)
        ctx.emit(out)
    elif sub == "put":
        record = json.loads(Path(a.file).read_text())
        out = ctx.call("record/put", record=record)
        ctx.emit(out, f"stored {out['record_id']}")
    elif sub == "cohort":
        codes = [c.strip() for c in a.codes.split(",") if c.strip()]
        out = ctx.call("cohort/query", codes=codes, description=a.description)
        ctx.emit(out, f"{out['cohort_id']}: {out['size']} records")
    elif sub == "report":
        out = ctx.call("cohort/report", cohort_id=a.cohort_id, dimensions=a.by, as_of=a.as_of)
        ctx.emit(out)
    elif sub == "export":
        out = ctx.call("cohort/export", cohort_id=a.cohort_id, as_of=a.as_of)
        if a.out:
            Path(a.out).write_text(out["document"])
            ctx.emit({"written": a.out}, f"export written to {a.out}")
        else:
            print(out["document"])
    else:
        raise CliError(f"unknown user command {sub!r}")
    return EXIT_OK


def cmd_prov(ctx: Context) -> int:
    out = ctx.call("prov/verify")
    valid = out["valid"]
    ctx.emit(out, f"provenance: {'valid' if valid else 'INVALID'}")
    return EXIT_OK if valid else EXIT_INTEGRITY


def cmd_cvss(ctx: Context) -> int:
    try:
        result = cvss.score_string(ctx.args.vector)
    except cvss.CvssError as exc:
        raise CliError(f"{type(exc).__name__}: {exc}") from None
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fixture(ctx: Context) -> int:
    from .fixtures import build_fixture

    gw = build_fixture(
        ctx.config, master_key=master_key_from_env(), seed=ctx.args.seed, patients=ctx.args.patients
    )
    summary = {
        "store": str(ctx.config.store_path),
        "seed": ctx.args.seed,
        "patients": ctx.args.patients,
        "roles": sorted(gw.graph.role_nodes),
        "records": len(gw.records.record_ids()),
    }
    ctx.emit(summary, f"fixture seeded: {summary['records']} records in {summary['store']}")
    return EXIT_OK


def cmd_scenario(ctx: Context) -> int:
    from .fixtures import load_manifest
    from .scenarios import run_suite_file
    from .service import GatewayClient, GatewayServer

    manifest = load_manifest(ctx.config)
    server = GatewayServer(ctx.gateway)
    import threading

    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.address
        client = GatewayClient(host, port)
        report = run_suite_file(ctx.args.suite, client, ctx.config, manifest)
    finally:
        server.shutdown()
        server.server_close()
    ctx.emit(report.to_dict(), report.summary())
    if not ctx.args.json:
        for r in report.results:
            status = "PASS" if r.passed else "FAIL"
            print(f"  [{status}] step {r.index} {r.kind} ({r.actor}) expected={r.expected} got={r.outcome}")
    return EXIT_OK if report.all_passed() else EXIT_INTEGRITY


def cmd_serve(ctx: Context) -> int:
    from .service import GatewayServer

    server = GatewayServer(ctx.gateway)
    host, port = server.address
    print(f"serving on {host}:{port} (store: {ctx.config.store_dir}); Ctrl-C to stop")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="medgate", description="secure data-sharing gateway")
    parser.add_argument("--config", help="path to TOML config (default: ./medgate.toml if present)")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--token", help="bearer session token (default: last login)")
    sub = parser.add_subparsers(dest="command", required=True)

    admin = sub.add_parser("admin", help="hierarchy and user administration")
    admin_sub = admin.add_subparsers(dest="admin_cmd", required=True)
    p = admin_sub.add_parser("add-role")
    p.add_argument("id")
    p = admin_sub.add_parser("add-data")
    p.add_argument("id")
    p = admin_sub.add_parser("add-edge")
    p.add_argument("kind", choices=["role", "data"])
    p.add_argument("parent")
    p.add_argument("child")
    p = admin_sub.add_parser("remove-edge")
    p.add_argument("parent")
    p.add_argument("child")
    p = admin_sub.add_parser("remove-node")
    p.add_argument("id")
    p = admin_sub.add_parser("associate")
    p.add_argument("role")
    p.add_argument("data")
    p = admin_sub.add_parser("assign")
    p.add_argument("user")
    p.add_argument("role")
    p = admin_sub.add_parser("revoke")
    p.add_argument("user")
    p.add_argument("role")
    p = admin_sub.add_parser("reissue-rs")
    p.add_argument("role")

    user = sub.add_parser("user", help="login and record operations")
    user_sub = user.add_subparsers(dest="user_cmd", required=True)
    p = user_sub.add_parser("login")
    p.add_argument("user")
    p.add_argument("role")
    p.add_argument("--seed", type=int, help="synthetic feature seed (default: fixture manifest)")
    p.add_argument("--sigma", type=float, help="synthetic capture noise")
    p.add_argument("--draw", type=int, help="synthetic draw index (default: time-based)")
    p = user_sub.add_parser("enroll")
    p.add_argument("user")
    p.add_argument("role")
    p.add_argument("--seed", type=int, required=False)
    p.add_argument("--sigma", type=float)
    p.add_argument("--samples", type=int, default=5)
    p = user_sub.add_parser("get")
    p.add_argument("record_id")
    p = user_sub.add_parser("put")
    p.add_argument("file", help="JSON file with the record plaintext")
    p = user_sub.add_parser("cohort")
    p.add_argument("codes", help="comma-separated diagnosis codes")
    p.add_argument("--description", default="")
    p = user_sub.add_parser("report")
    p.add_argument("cohort_id")
    p.add_argument("--by", choices=["age_gender", "procedure_code"], default="age_gender")
    p.add_argument("--as-of", dest="as_of")
    p = user_sub.add_parser("export")
    p.add_argument("cohort_id")
    p.add_argument("--as-of", dest="as_of")
    p.add_argument("--out")

    prov = sub.add_parser("prov", help="provenance verification")
    prov_sub = prov.add_subparsers(dest="prov_cmd", required=True)
    prov_sub.add_parser("verify")

    cvss_p = sub.add_parser("cvss", help="vulnerability scoring")
    cvss_sub = cvss_p.add_subparsers(dest="cvss_cmd", required=True)
    p = cvss_sub.add_parser("score")
    p.add_argument("vector")

    scenario = sub.add_parser("scenario", help="workflow evaluation suites")
    scenario_sub = scenario.add_subparsers(dest="scenario_cmd", required=True)
    p = scenario_sub.add_parser("run")
    p.add_argument("suite", help="path to a suite TOML file")

    fixture = sub.add_parser("fixture", help="seeded demo environment")
    fixture_sub = fixture.add_subparsers(dest="fixture_cmd", required=True)
    p = fixture_sub.add_parser("seed")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--patients", type=int, default=20)

    sub.add_parser("serve", help="run the socket service")
    return parser


COMMANDS = {
    "admin": cmd_admin,
    "user": cmd_user,
    "prov": cmd_prov,
    "cvss": cmd_cvss,
    "scenario": cmd_scenario,
    "fixture": cmd_fixture,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
