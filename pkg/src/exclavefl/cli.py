"""Command-line entry point.

Exit codes: 0 success / audit pass, 1 audit fail, 2 usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .auditor import audit, build_edg, export_dot
from .deviations import load_script
from .edr import read_store_lines
from .job import load_job, make_demo_job
from .storage import pack_dataset, save_image

EXIT_OK, EXIT_AUDIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("exclavefl")


def _read_csv(path: Path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        text_col = header.index("text") if "text" in header else None
        rows, texts = [], []
        for line in reader:
            if not line:
                continue
            if text_col is not None:
                texts.append(line[text_col].encode("utf-8"))
                line = line[:text_col] + line[text_col + 1 :]
            rows.append([float(x) for x in line])
    return np.array(rows, dtype=np.float64), (texts if text_col is not None else None)


def cmd_dataset_pack(args) -> int:
    try:
        salt = bytes.fromhex(args.salt)
    except ValueError:
        raise UsageError("--salt must be hex") from None
    if len(salt) != 16:
        raise UsageError("--salt must be 16 bytes (32 hex chars)")
    rows, texts = _read_csv(Path(args.input))
    image, commitment = pack_dataset(rows, salt, texts=texts, text_width=args.text_width if texts else 0)
    save_image(image, args.out)
    print(json.dumps(image.sidecar(), sort_keys=True))
    return EXIT_OK


def cmd_job_init(args) -> int:
    path = make_demo_job(
        args.dir,
        providers=args.providers,
        rounds=args.rounds,
        records=args.records,
        dim=args.dim,
        seed=args.seed,
        sanitize=args.sanitize,
    )
    print(path)
    return EXIT_OK


def cmd_job_run(args) -> int:
    from .orchestrator import run_job

    job = load_job(args.job)
    script = load_script(args.inject) if args.inject else None
    trace_f = open(args.trace, "w") if args.trace else None
    try:
        trace = (lambda req, resp: trace_f.write(json.dumps({"request": req.to_dict(), "response": resp.to_dict()}, sort_keys=True) + "\n")) if trace_f else None
        result = run_job(job, script, store_path=args.store, parallel=args.parallel, trace=trace)
    finally:
        if trace_f:
            trace_f.close()
    if args.model_out:
        Path(args.model_out).write_bytes(result.final_model_bytes)
    log.info("%d records written to %s", len(result.store), args.store)
    return EXIT_OK


def cmd_audit(args) -> int:
    job = load_job(args.job)
    report = audit(read_store_lines(args.store), job)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    for c in report.claims:
        blamed = f" blamed={','.join(sorted(c.blamed))}" if c.blamed else ""
        print(f"claim {c.claim} ({c.to_dict()['name']}): {c.status}{blamed}")
    print(f"rejected records: {len(report.rejected)}")
    return EXIT_OK if report.passed else EXIT_AUDIT_FAIL


def cmd_edg_export(args) -> int:
    job = load_job(args.job)
    edg, _ = build_edg(read_store_lines(args.store), job.platform_root_pub, job.issuer_registry)
    dot = export_dot(edg)
    if args.dot:
        Path(args.dot).write_text(dot)
    else:
        sys.stdout.write(dot)
    return EXIT_OK


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exclavefl", description="Attested FL runs and their audit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="group", required=True)

    ds = sub.add_parser("dataset", help="dataset images").add_subparsers(dest="cmd", required=True)
    pk = ds.add_parser("pack", help="pack a CSV (header row; optional 'text' column) into a verified image")
    pk.add_argument("--in", dest="input", required=True, help="input CSV")
    pk.add_argument("--out", required=True, help="output image path; .tree and .json sidecars are written next to it")
    pk.add_argument("--salt", required=True, help="16-byte salt as hex")
    pk.add_argument("--text-width", type=int, default=64, help="bytes reserved per text entry (default 64)")
    pk.set_defaults(func=cmd_dataset_pack)

    jb = sub.add_parser("job", help="create and run jobs").add_subparsers(dest="cmd", required=True)
    ji = jb.add_parser("init", help="write synthetic datasets and a job.json")
    ji.add_argument("--dir", required=True)
    ji.add_argument("--providers", type=int, default=4)
    ji.add_argument("--rounds", type=int, default=3)
    ji.add_argument("--records", type=int, default=256)
    ji.add_argument("--dim", type=int, default=17, help="model dimension (features + bias)")
    ji.add_argument("--seed", type=int, default=0)
    ji.add_argument("--sanitize", action="store_true", help="add a sanitization stage")
    ji.set_defaults(func=cmd_job_init)

    jr = jb.add_parser("run", help="execute a job and write its EDR store")
    jr.add_argument("--job", required=True)
    jr.add_argument("--store", required=True, help="output edrs.ndjson")
    jr.add_argument("--inject", help="deviation script JSON")
    jr.add_argument("--model-out", help="write the final model (u32 dim + float64 LE)")
    jr.add_argument("--parallel", action="store_true", help="run provider branches concurrently")
    jr.add_argument("--trace", help="record request/response envelopes as ndjson")
    jr.set_defaults(func=cmd_job_run)

    au = sub.add_parser("audit", help="audit a store against its job")
    au.add_argument("--job", required=True)
    au.add_argument("--store", required=True)
    au.add_argument("--report", help="write the JSON audit report here")
    au.set_defaults(func=cmd_audit)

    eg = sub.add_parser("edg", help="dataflow graph tools").add_subparsers(dest="cmd", required=True)
    ex = eg.add_parser("export", help="write the graph as Graphviz DOT")
    ex.add_argument("--store", required=True)
    ex.add_argument("--job", required=True)
    ex.add_argument("--dot", help="output file (default stdout)")
    ex.set_defaults(func=cmd_edg_export)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())
