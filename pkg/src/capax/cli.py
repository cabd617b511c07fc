"""Command line driver: ``capax run <cfg>`` and ``capax verify <cfg|--list>``.

Exit codes: 0 ok, 1 experiment (or criterion) failure, 2 config error.
The whole config is validated before anything is written, so a config error
leaves no outputs behind.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import acceptance
from . import config as C
from .experiments import REGISTRY, validate
from .plotting import gnuplot_script, render_png
from .serialize import csv_text, fmt

log = logging.getLogger("capax")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
DEFAULT_OUT = "capax-out"

RUN_GLOBALS = {"seed": (C.to_int, "0"), "threads": (C.to_int, "1"), "out": (str, None),
               "experiments": (C.to_words, None)}
VERIFY_GLOBALS = {"seed": (C.to_int, "0"), "threads": (C.to_int, "1"), "out": (str, None),
                  "suite": (C.choice(*acceptance.SUITES), "default"),
                  "criteria": (C.to_words, None)}


@dataclass
class Job:
    name: str
    kind: str
    params: dict


def _select(names, wanted, line, what):
    if wanted is None:
        return list(names)
    unknown = [w for w in wanted if w not in names]
    if unknown:
        raise C.ConfigError(f"unknown {what} {', '.join(unknown)}", line)
    return [n for n in names if n in wanted]


def _globals(raw, schema):
    opts = C.convert_entries(raw.globals, schema, "globals")
    if opts["threads"] < 1:
        raise C.ConfigError("threads must be at least 1", raw.globals["threads"].line)
    return opts


def plan_run(text: str):
    """Validated ``(options, jobs)`` for a run config; raises :class:`ConfigError`."""
    raw = C.parse_config(text)
    opts = _globals(raw, RUN_GLOBALS)
    jobs = {}
    for section in raw.sections:
        if section.kind not in REGISTRY:
            raise C.ConfigError(f"unknown experiment {section.kind!r} in [{section.name}]",
                                section.line)
        _, schema = REGISTRY[section.kind]
        params = C.convert_entries(section.entries, schema, f"[{section.name}]")
        try:
            validate(section.kind, params)
        except ValueError as exc:
            raise C.ConfigError(f"[{section.name}]: {exc}", section.line) from None
        jobs[section.name] = Job(section.name, section.kind, params)
    entry = raw.globals.get("experiments")
    chosen = _select(jobs, opts["experiments"], entry and entry.line, "experiment")
    return opts, raw, [jobs[n] for n in chosen]


def plan_verify(text: str):
    raw = C.parse_config(text)
    opts = _globals(raw, VERIFY_GLOBALS)
    sections = {}
    for section in raw.sections:
        if section.name not in acceptance.BY_NAME:
            raise C.ConfigError(f"unknown criterion [{section.name}]", section.line)
        sections[section.name] = section
    params = {}
    for crit in acceptance.CRITERIA:
        entries = sections[crit.name].entries if crit.name in sections else {}
        params[crit.name] = acceptance.parameters(crit, opts["suite"], entries,
                                                  f"[{crit.name}]")
    entry = raw.globals.get("criteria")
    chosen = _select(acceptance.BY_NAME, opts["criteria"], entry and entry.line, "criterion")
    return opts, raw, [(acceptance.BY_NAME[n], params[n]) for n in chosen]


def experiment_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _execute(job: Job, seed: int):
    fn, _ = REGISTRY[job.kind]
    try:
        return fn(job.params, experiment_rng(seed, job.name)), None
    except Exception as exc:
        log.exception("experiment [%s] failed", job.name)
        return None, f"{type(exc).__name__}: {exc}"


def _write_outputs(out: Path, name: str, outcome) -> list:
    files = []

    def put(fname, text):
        (out / fname).write_bytes(text.encode())
        files.append(fname)

    put(f"{name}.csv", csv_text(outcome.header, outcome.rows))
    groups = ()
    if outcome.plot.group:
        col = outcome.header.index(outcome.plot.group)
        groups = sorted({fmt(r[col]) for r in outcome.rows}, key=lambda s: (len(s), s))
    put(f"{name}.plt", gnuplot_script(f"{name}.csv", outcome.header, outcome.plot, groups,
                                      png_name=f"{name}_gnuplot.png"))
    for suffix, content in outcome.extras.items():
        put(f"{name}{suffix}", content if isinstance(content, str) else csv_text(*content))
    render_png(out / f"{name}.png", outcome.header, outcome.rows, outcome.plot)
    files.append(f"{name}.png")
    return files


def _versions() -> list:
    import matplotlib
    import scipy

    return [f"capax {__version__}", f"python {platform.python_version()}",
            f"numpy {np.__version__}", f"scipy {scipy.__version__}",
            f"matplotlib {matplotlib.__version__}"]


def _manifest(command, raw, seed, threads, records) -> str:
    lines = [f"# capax {command}", "[versions]", *_versions(), "[invocation]",
             f"seed = {seed}", f"threads = {threads}", "[config]"]
    # Indented so that config headers are not read as manifest headers.
    lines += ["  " + line for line in raw.text.splitlines()]
    lines.append("[results]")
    lines += records
    return "\n".join(lines) + "\n"


def run_config(text: str, out=None, seed=None, threads=None, quiet=False) -> int:
    """Run every experiment of a config; returns the exit status."""
    try:
        opts, raw, jobs = plan_run(text)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = opts["seed"] if seed is None else seed
    threads = opts["threads"] if threads is None else threads
    out = Path(out or opts["out"] or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)

    records, status = [], EXIT_OK
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_execute, job, seed) for job in jobs]
        # Files are written from this thread, in config order.
        for job, future in zip(jobs, futures):
            outcome, error = future.result()
            if error is not None:
                status = EXIT_FAILURE
                records.append(f"{job.name}\tkind={job.kind}\tstatus=error\t{error}")
                if not quiet:
                    print(f"[{job.name}] error: {error}")
                continue
            files = _write_outputs(out, job.name, outcome)
            failed = [c for c in outcome.checks if not c.passed]
            records.append(f"{job.name}\tkind={job.kind}\tstatus=ok\tchecks_failed="
                           f"{len(failed)}/{len(outcome.checks)}\tfiles={','.join(files)}")
            records += [f"{job.name}\tcheck\t{c.line()}" for c in outcome.checks]
            if not quiet:
                print(f"[{job.name}] {len(outcome.rows)} rows -> {job.name}.csv")
                for c in outcome.checks:
                    print(f"  {c.line()}")
    (out / "manifest.txt").write_text(_manifest("run", raw, seed, threads, records))
    return status


def verify_config(text: str, out=None, seed=None, threads=None, quiet=False):
    """Run the acceptance criteria named by a config; returns ``(status, results)``."""
    try:
        opts, raw, plan = plan_verify(text)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, []
    seed = opts["seed"] if seed is None else seed
    threads = opts["threads"] if threads is None else threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(acceptance.run_criterion, crit, params, seed)
                   for crit, params in plan]
        results = []
        for future in futures:
            results.append(future.result())
            if not quiet:
                print(results[-1].line(), flush=True)
    status = EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE
    out = out or opts["out"]
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [[r.name, rd.name, rd.value, rd.op, rd.limit, rd.passed]
                for r in results for rd in r.readings]
        rows += [[r.name, "error", np.nan, "", np.nan, False] for r in results if r.error]
        (out / "verify.csv").write_bytes(
            csv_text(["criterion", "reading", "value", "op", "limit", "passed"], rows).encode())
        records = [f"{r.name}\t{'pass' if r.passed else 'FAIL'}" for r in results]
        (out / "manifest.txt").write_text(_manifest("verify", raw, seed, threads, records))
    return status, results


def list_criteria() -> str:
    return "\n".join(f"{c.number}\t{c.name}\t{c.title}" for c in acceptance.CRITERIA) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capax", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"capax {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run the experiments of a config")
    run.add_argument("config", type=Path)
    ver = sub.add_parser("verify", parents=[common], help="run the acceptance criteria")
    ver.add_argument("config", type=Path, nargs="?",
                     help="config naming a suite; the default suite if omitted")
    ver.add_argument("--list", action="store_true", help="list the criteria and exit")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    if args.command == "verify" and args.list:
        sys.stdout.write(list_criteria())
        return EXIT_OK
    text = ""
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    elif args.command == "run":
        parser.error("run needs a config file")
    if args.command == "run":
        return run_config(text, args.out, args.seed, args.threads)
    status, _ = verify_config(text, args.out, args.seed, args.threads)
    return status


if __name__ == "__main__":
    sys.exit(main())
