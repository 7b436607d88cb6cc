"""``fedincr`` command line.

Exit codes: 0 success, 1 usage/config, 2 I/O, 3 protocol, 4 validation.
Machine-readable output goes to stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import socket
import sys
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError, FedIncrError, PretrainError
from .nn import ArchDescriptor

log = logging.getLogger("fedincr")

EXIT_USAGE, EXIT_IO, EXIT_PROTOCOL, EXIT_VALIDATION = 1, 2, 3, 4
FIXED_CREATED_AT = "1970-01-01T00:00:00Z"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _created_at() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return FIXED_CREATED_AT
    return datetime.fromtimestamp(int(epoch), timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


# --- subcommands -------------------------------------------------------------------


def cmd_serve(args) -> int:
    import uvicorn

    from .package import read_package
    from .server.config import load_config
    from .server.http import create_app
    from .server.service import FederationServer

    cfg = load_config(args.config)
    cfg.store_path.mkdir(exist_ok=True)  # parent must exist
    port = args.port if args.port is not None else cfg.port
    server = FederationServer(cfg.store_path, cfg.api_keys(), cfg.task_configs())
    for t in cfg.tasks:
        if t.initial_package_path is not None and not server.registry.has_task(t.task_id):
            server.seed_task(t.task_id, read_package(t.initial_package_path))
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((cfg.host, port))
    sock.listen(128)
    host, port = sock.getsockname()[:2]
    uv = uvicorn.Server(uvicorn.Config(create_app(server), log_level="warning"))
    print(f"fedincr server ready on http://{host}:{port}/api/v1", flush=True)
    try:
        uv.run(sockets=[sock])
    finally:
        server.stop()
        sock.close()
    return 0


def cmd_init_model(args) -> int:
    from .datasets import list_datasets, read_dataset
    from .package import write_package
    from .sim.pretrain import pretrain

    desc = ArchDescriptor()
    if args.descriptor:
        desc = ArchDescriptor.from_dict(json.loads(Path(args.descriptor).read_text(encoding="utf-8")))
    paths = list_datasets(args.pretrain_dir)
    if not paths:
        raise FileNotFoundError(f"no datasets under {args.pretrain_dir}")
    data = []
    for p in paths:
        stack, gold, _ = read_dataset(p)
        if gold is None:
            raise PretrainError(f"{p} has no labels")
        data.append((stack, gold))
    pkg, score = pretrain(desc, data, args.epochs, args.seed, task_id=args.task, created_at=_created_at())
    write_package(pkg, args.out)
    _emit({"package": str(args.out), "version": pkg.version, "self_dsc": score, "content_hash": pkg.hash_hex})
    return 0


def _parse_slices(text: str | None):
    if not text:
        return None
    if ":" in text:
        a, b = text.split(":", 1)
        return list(range(int(a), int(b)))
    return [int(s) for s in text.split(",")]


def cmd_session(args) -> int:
    from .client import SessionConfig, identity_annotator, run_session
    from .datasets import read_dataset
    from .engine import TrainConfig
    from .sim.annotators import AnnotatorModel, make_annotator

    key = args.key or os.environ.get("FEDINCR_API_KEY")
    if not key:
        raise UsageError("an API key is required (--key or FEDINCR_API_KEY)")
    stack, gold, variant = read_dataset(args.data)
    slices = _parse_slices(args.slices)
    if args.annotator == "identity":
        annotator = identity_annotator
    else:
        if gold is None:
            raise ConfigError(f"{args.data} has no gold labels for the {args.annotator} annotator")
        mode = "oracle" if args.annotator == "oracle" else "noisy-oracle"
        annotator = make_annotator(gold, AnnotatorModel(mode, args.sigma, args.seed))
        if slices is None:
            slices = sorted(gold.segmented_slices)
    cfg = SessionConfig(
        server_url=args.server,
        api_key=key,
        task_id=args.task,
        variant=variant,
        train=TrainConfig(epochs=args.epochs, min_slices=args.min_slices, seed=args.seed),
        annotator=annotator,
    )
    result = run_session(cfg, stack, slices)
    if result.skipped:
        log.warning(result.skipped)
    summary = result.summary()
    if result.job_id:
        from .client import Client

        if args.wait:
            try:
                summary["job"] = Client(args.server, key).wait_job(result.job_id)
            except FedIncrError as exc:
                summary["job_error"] = str(exc)
    _emit(summary)
    return 0


def cmd_simulate(args) -> int:
    from .sim.scenario import ScenarioConfig, run_contrast_shift_scenario

    cfg = ScenarioConfig.from_json(args.scenario) if args.scenario else ScenarioConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    result = run_contrast_shift_scenario(cfg, concurrent=args.concurrent, progress=log.info)
    result.write(args.out)
    _emit(result.report())
    return 0


def cmd_analyze(args) -> int:
    from .sim.analysis import load_records, summarize

    records, skipped = load_records(args.log)
    if skipped:
        log.warning("skipped %d unparseable line(s)", skipped)
    summary = summarize(records, skipped)
    summary.write(args.out)
    _emit(summary.to_dict())
    return 0


def cmd_inspect(args) -> int:
    from .package import decode_package

    data = Path(args.package).read_bytes()
    pkg = decode_package(data)  # raises HashMismatch on a bad trailer
    d = pkg.descriptor
    lines = [
        f"task_id: {pkg.task_id}",
        f"version: {pkg.version}",
        f"parent_version: {pkg.parent_version}",
        f"created_at: {pkg.created_at}",
        f"input_size: {d.input_size[0]}x{d.input_size[1]}",
        f"n_classes: {d.n_classes}",
        f"label_names: {', '.join(pkg.label_names)}",
        f"encoder_channels: {', '.join(map(str, d.encoder_channels))}",
        f"canonical_resolution: {pkg.canonical_resolution}",
        f"n_params: {pkg.weights.n_parameters()}",
        f"content_hash: {pkg.hash_hex}",
        f"size_bytes: {len(data)}",
        "hash: OK",
    ]
    print("\n".join(lines))
    return 0


def cmd_phantoms(args) -> int:
    from .datasets import write_dataset
    from .engine import LabelMap
    from .sim.phantoms import PhantomSpec, generate_phantom

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(profile=args.profile, n_slices=args.n_slices, variant=args.variant, noise_sigma=args.noise)
    written = []
    for i in range(args.count):
        stack, gold = generate_phantom(spec, args.seed + i)
        if args.segmented is not None:
            gold = LabelMap(gold.labels, frozenset(range(min(args.segmented, spec.n_slices))))
        written.append(str(write_dataset(out / f"{args.prefix}{i:03d}", stack, gold, spec.variant)))
    _emit({"datasets": written})
    return 0


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedincr", description="Federated incremental learning for segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", help="run the federation server")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--port", type=int, help="override the configured port (0 picks a free one)")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("init-model", help="pretrain the initial (version 0) package")
    s.add_argument("--task", required=True)
    s.add_argument("--descriptor", type=Path, help="architecture descriptor JSON")
    s.add_argument("--pretrain-dir", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--epochs", type=int, default=200, help="epoch cap")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("session", help="segment, refine, learn and upload one dataset")
    s.add_argument("--server", required=True)
    s.add_argument("--key", help="API key (default: $FEDINCR_API_KEY)")
    s.add_argument("--task", required=True)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--annotator", choices=("oracle", "noisy", "identity"), default="oracle")
    s.add_argument("--sigma", type=float, default=1.0, help="boundary jitter for --annotator noisy")
    s.add_argument("--slices", help="'a:b' range or comma list (default: annotated slices)")
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--min-slices", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--wait", action="store_true", help="poll the upload job until it finishes")
    s.set_defaults(func=cmd_session)

    s = sub.add_parser("simulate", help="run the contrast-shift scenario")
    s.add_argument("--scenario", type=Path, help="scenario JSON (default: built-in defaults)")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", action="store_true", help="serialised round-robin sessions (default)")
    mode.add_argument("--concurrent", action="store_true", help="free-running client threads")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("analyze", help="summarise a usage-statistics log")
    s.add_argument("--log", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("inspect", help="print a package summary and verify its hash")
    s.add_argument("--package", required=True, type=Path)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("phantoms", help="write synthetic phantom datasets")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--profile", default="profile-A")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-slices", type=int, default=6)
    s.add_argument("--segmented", type=int, help="mark only the first N slices as annotated")
    s.add_argument("--variant", default="left", choices=("left", "right", "both_limbs"))
    s.add_argument("--noise", type=float, default=0.03)
    s.add_argument("--prefix", default="phantom")
    s.set_defaults(func=cmd_phantoms)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fedincr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedIncrError as exc:
        print(f"fedincr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, EOFError) as exc:
        print(f"fedincr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # bad argument values, malformed JSON
        print(f"fedincr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
