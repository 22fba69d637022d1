import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

# Add project root to sys.path
root_dir = Path(__file__).resolve().parent.parent
if str(root_dir) not in sys.path:
    sys.path.append(str(root_dir))

from dotenv import load_dotenv

load_dotenv(dotenv_path=root_dir / ".env")

from src.config import get_settings
from src.errors import BoundViolation, CramerRaoError, SpecError
from src.models.family import format_point
from src.schemas.model_spec import ModelSpec
from src.schemas.report import BoundReport, CheckLedger, CrbReport, FisherReport, SweepRow
from src.services.crb_service import CramerRaoService

logger = logging.getLogger("crb")

SWEEP_COLUMNS = ["point", "theta", "variance", "bound", "slack", "efficiency", "error"]
SCHEMAS = {
    "model-spec": ModelSpec,
    "fisher-report": FisherReport,
    "crb-report": CrbReport,
    "bound-report": BoundReport,
    "check-ledger": CheckLedger,
    "sweep-row": SweepRow,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("spec", type=Path, help="model spec JSON document")
    common.add_argument("--format", choices=["table", "json"], default="table")
    common.add_argument("--at", help='evaluation point, "name=value,..."')
    common.add_argument("--seed", type=int, help="overrides the spec's Monte Carlo seed")
    common.add_argument("--workers", type=int, help="Monte Carlo worker threads; results do not depend on it")
    common.add_argument("--out", type=Path, help="write the report here instead of stdout")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    with_theta = argparse.ArgumentParser(add_help=False)
    with_theta.add_argument("--theta", help="parameter function; defaults to the first coordinate")

    parser = argparse.ArgumentParser(prog="crb", description="Fisher information and Cramér-Rao bounds")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("fisher", parents=[common], help="Fisher information matrix and its inverse")
    commands.add_parser("crb", parents=[common, with_theta], help="variance bound for a parameter function")
    verify = commands.add_parser("verify", parents=[common, with_theta], help="compare an estimator with the bound")
    verify.add_argument("--mc-seeds", type=int, help="also confirm by Monte Carlo with this many seeds")
    commands.add_parser("check", parents=[common, with_theta], help="run the identity and invariance checks")
    sweep = commands.add_parser("sweep", parents=[common, with_theta], help="tabulate the bound over a range")
    sweep.add_argument("--range", required=True, dest="sweep_range", help='"name=lo:hi:steps"')

    schema = commands.add_parser("schema", help="print a JSON schema")
    schema.add_argument("name", choices=sorted(SCHEMAS))
    return parser


def configure_logging(level: Optional[str]):
    level = (level or get_settings().log_level).upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise SpecError(f"unknown log level '{level}'")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


# rendering


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _matrix(rows: Sequence[Sequence[float]]) -> List[str]:
    return ["  " + "  ".join(f"{v: .10g}" for v in row) for row in rows]


def _header(report) -> List[str]:
    lines = [f"family       {report.family}", f"at           {format_point(report.coordinates, report.at)}"]
    method = report.method
    if method.kind == "mc":
        lines.append(f"method       mc ({method.mc_samples} samples, seed {method.seed})")
    else:
        lines.append("method       exact")
    return lines


def render_table(report) -> str:
    if isinstance(report, FisherReport):
        lines = _header(report) + ["", "information"] + _matrix(report.matrix)
        lines += ["inverse"] + _matrix(report.inverse)
        lines.append(f"condition    {report.condition_estimate:.6g}")
    elif isinstance(report, CrbReport):
        lines = _header(report) + [
            f"theta        {report.theta} = {report.theta_value:.17g}",
            f"gradient     ({', '.join(f'{g:.10g}' for g in report.gradient)})",
            f"bound        {report.bound:.17g}",
        ]
    elif isinstance(report, BoundReport):
        lines = _header(report) + [
            f"theta        {report.theta} = {report.theta_value:.17g}",
            f"estimator    {report.estimator} (mean {report.estimator_mean:.17g}, bias {report.bias:.3g})",
            f"variance     {report.variance:.17g}",
            f"bound        {report.bound:.17g}",
            f"slack        {report.slack:.17g}",
            f"efficiency   {_cell(report.efficiency)}",
        ]
        if report.mc_std_error is not None:
            lines.append(f"std error    {report.mc_std_error:.6g}")
        if report.biased:
            lines.append(f"biased       yes (largest probe bias {report.max_probe_bias:.3g}); the bound does not apply")
        if report.mc_verify is not None:
            summary = report.mc_verify
            lines.append(
                f"monte carlo  pass rate {summary.pass_rate:.3f} over {len(summary.outcomes)} seeds "
                f"x {summary.mc_samples} samples, min slack {summary.min_slack:.6g}"
            )
        lines.append(f"result       {'PASS' if report.passed else 'FAIL'}")
    elif isinstance(report, CheckLedger):
        width = max(len(c.name) for c in report.checks)
        lines = [
            f"family       {report.family}",
            f"at           {format_point(report.coordinates, report.at)}",
            "",
        ]
        for check in report.checks:
            status = "PASS" if check.passed else "FAIL"
            line = f"{status}  {check.name:<{width}}  residual {check.residual:.3e}  tolerance {check.tolerance:.1e}"
            if check.detail:
                line += f"  {check.detail}"
            lines.append(line)
    else:
        raise TypeError(f"no table rendering for {type(report).__name__}")
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[SweepRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([_cell(getattr(row, column)) for column in SWEEP_COLUMNS])
    return buffer.getvalue()


def emit(text: str, out: Optional[Path]):
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8", newline="") as f:
        f.write(text)


# commands


def run(args: argparse.Namespace) -> int:
    if args.command == "schema":
        emit(json.dumps(SCHEMAS[args.name].model_json_schema(), indent=2) + "\n", None)
        return 0

    if args.workers is not None and args.workers < 1:
        raise SpecError(f"--workers must be at least 1, got {args.workers}")
    service = CramerRaoService.from_file(args.spec, seed=args.seed, workers=args.workers)
    p = service.point(args.at)
    logger.info("%s: %s at %s", args.command, service.family.name, format_point(service.family.coordinate_names, p))
    theta = service.theta(getattr(args, "theta", None))

    if args.command == "fisher":
        report = service.fisher(p)
    elif args.command == "crb":
        report = service.crb(p, theta)
    elif args.command == "verify":
        report = service.verify(p, theta, args.mc_seeds)
    elif args.command == "check":
        report = service.check(p, theta)
    else:
        rows = service.sweep(p, theta, args.sweep_range)
        if args.format == "json":
            emit(json.dumps([row.model_dump() for row in rows], indent=2) + "\n", args.out)
        else:
            emit(render_csv(rows), args.out)
        return 0

    if args.format == "json":
        emit(report.model_dump_json(indent=2) + "\n", args.out)
    else:
        emit(render_table(report), args.out)

    if args.command == "verify" and not report.passed:
        if report.biased:
            reason = "estimator is biased"
        elif report.mc_verify is not None and report.mc_verify.pass_rate < 0.95:
            reason = f"Monte Carlo pass rate {report.mc_verify.pass_rate:.3f}"
        else:
            reason = f"variance falls below the bound by {-report.slack:.3g}"
        raise BoundViolation(f"bound verification failed: {reason}")
    if args.command == "check" and not report.passed:
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        raise BoundViolation(f"checks failed: {failed}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(getattr(args, "log_level", None))
        return run(args)
    except CramerRaoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
