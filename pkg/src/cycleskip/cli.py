"""Command-line entry point.

Subcommands: simulate, fit, predict, skip-prob, evaluate, curve. Every run
writes ``<first output>.manifest.json`` (or ``--manifest``) recording the
parsed configuration, seeds, SHA-256 digests of inputs and the package
version.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from ._parallel import THREADS_ENV, default_threads
from .dataset import CohortFilter, Dataset, ingest, read_ages, write_csv
from .errors import DataError, DomainError, NumericalError
from .evaluate import (
    ELIGIBILITY,
    BaselineModel,
    ProposedModel,
    fmt,
    per_day_rmse_curve,
    write_curve_csv,
    write_strata_csv,
    write_user_errors_csv,
)
from .inference import FitConfig, FitResult, fit
from .model import DEFAULT_U0, SAMPLERS, Hyperparameters, ModelConfig
from .predict import MODES, Predictor, canonical_mode, conditional_expectations, skip_posterior_from_joint, truncate_pmf
from .simulate import SimulationSpec, simulate_population

logger = logging.getLogger("cycleskip")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Everything a run depends on, echoed into the manifest."""

    command: str
    model: ModelConfig = field(default_factory=ModelConfig)
    fit: Optional[FitConfig] = None
    cohort: Optional[CohortFilter] = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "model": self.model.to_dict(),
            "fit": None if self.fit is None else self.fit.to_dict(),
            "cohort": None if self.cohort is None else self.cohort.to_dict(),
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "options": dict(self.options),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cohort = d.get("cohort")
        if cohort is not None:
            cohort = dict(cohort)
            if cohort.get("age_range") is not None:
                cohort["age_range"] = tuple(cohort["age_range"])
            cohort = CohortFilter(**cohort)
        return cls(
            command=d["command"],
            model=ModelConfig(**d["model"]),
            fit=None if d.get("fit") is None else FitConfig.from_dict(d["fit"]),
            cohort=cohort,
            inputs=dict(d.get("inputs", {})),
            outputs=dict(d.get("outputs", {})),
            options=dict(d.get("options", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run: RunConfig, path) -> None:
    payload = {
        "version": __version__,
        "config": run.to_dict(),
        "seed": run.model.seed,
        "input_digests": {k: file_digest(v) for k, v in sorted(run.inputs.items()) if v},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parse_days(text: str) -> List[int]:
    """``"0:40"`` (inclusive), ``"0:40:5"`` or ``"0,10,20"``."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) == 2:
                parts.append(1)
            lo, hi, step = parts
            return list(range(lo, hi + 1, step))
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad day grid {text!r}") from None


def parse_u(text: str) -> Hyperparameters:
    try:
        values = [float(p) for p in text.split(",")]
        return Hyperparameters.from_array(values)
    except (ValueError, DomainError) as exc:
        raise argparse.ArgumentTypeError(f"bad hyperparameters {text!r}: {exc}") from None


# ---------------------------------------------------------------------------
# fitted model file


def save_fit(result: FitResult, model: ModelConfig, path) -> None:
    payload = result.to_dict()
    payload["model_config"] = model.to_dict()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_fit(path):
    """Return (u_hat, ModelConfig, payload) from a fitted-model JSON."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        u = Hyperparameters(payload["kappa"], payload["gamma"], payload["alpha"], payload["beta"])
        model = ModelConfig(**payload["model_config"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a fitted-model file ({exc})") from None
    return u, model, payload


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--manifest", default=None, help="manifest path (default: <output>.manifest.json)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_cohort(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("cohort filter")
    g.add_argument("--min-cycles", type=int, default=1)
    g.add_argument("--max-gap-days", type=int, default=None)
    g.add_argument("--first-k-cycles", type=int, default=None)
    g.add_argument("--age-range", type=int, nargs=2, default=None, metavar=("LO", "HI"))
    g.add_argument("--ages", default=None, help="CSV with user_id,age for --age-range")
    g.add_argument("--shuffle-cycles", type=int, default=None, metavar="SEED", help="shuffle each user's cycles before truncation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cycleskip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a population with ground-truth skips")
    p.add_argument("--users", type=int, default=10_000)
    p.add_argument("--cycles", type=int, default=11)
    p.add_argument("--u", type=parse_u, default=DEFAULT_U0, help="kappa,gamma,alpha,beta")
    p.add_argument("--S", type=int, default=100)
    p.add_argument("--fixed-pi", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("fit", help="fit population hyperparameters")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-cycles", type=int, default=None, help="use only the first N cycles of each user")
    p.add_argument("--init", type=parse_u, default=DEFAULT_U0)
    p.add_argument("--S", type=int, default=100)
    p.add_argument("--M", type=int, default=1000)
    p.add_argument("--D", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--eps-loss", type=float, default=1e-3)
    p.add_argument("--sampler", choices=SAMPLERS, default="rqmc")
    p.add_argument("--seed", type=int, default=0)
    _add_cohort(p)
    _add_common(p)

    for name, help_text in (
        ("predict", "per-user conditional cycle-length pmf and expectation"),
        ("skip-prob", "per-user posterior over skipped cycles"),
        ("evaluate", "day-0 (or --days) errors, CLD strata and RMSE report"),
        ("curve", "per-day RMSE curve for the proposed model and baselines"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", required=True, help="fitted-model JSON from `fit`")
        p.add_argument("--data", required=True)
        p.add_argument("--train-cycles", type=int, default=None)
        p.add_argument("--seed", type=int, default=None, help="prediction draw seed (default: model seed)")
        p.add_argument("--M", type=int, default=None)
        p.add_argument("--sampler", choices=SAMPLERS, default="rqmc")
        if name == "predict":
            p.add_argument("--mode", choices=sorted(set(MODES) | {"assume-no-skip", "allow-skips"}), default="sfree")
            p.add_argument("--days", type=parse_days, default=parse_days("0:40"))
            p.add_argument("--out", required=True, help="summary CSV user_id,d_current,mode,expected,map")
            p.add_argument("--pmf-out", default=None, help="long CSV user_id,d_current,mode,d_star,probability")
            p.add_argument("--min-prob", type=float, default=0.0, help="omit pmf rows below this probability")
        elif name == "skip-prob":
            p.add_argument("--days", type=parse_days, default=parse_days("0:40"))
            p.add_argument("--out", required=True)
        elif name == "evaluate":
            p.add_argument("--days", type=parse_days, default=[0])
            p.add_argument("--out-dir", required=True)
            p.add_argument("--eligibility", choices=ELIGIBILITY, default="conditional")
        else:
            p.add_argument("--days", type=parse_days, default=parse_days("0:40"))
            p.add_argument("--out", required=True)
            p.add_argument("--eligibility", choices=ELIGIBILITY, default="conditional")
        _add_cohort(p)
        _add_common(p)
    return parser


def _cohort(args) -> CohortFilter:
    return CohortFilter(
        min_cycles=args.min_cycles,
        max_gap_days=args.max_gap_days,
        first_k_cycles=args.first_k_cycles,
        age_range=None if args.age_range is None else tuple(args.age_range),
    )


def _load_data(args, run: RunConfig) -> Dataset:
    if not Path(args.data).exists():
        raise FileNotFoundError(args.data)
    cohort = _cohort(args)
    run.cohort = cohort
    run.inputs["data"] = args.data
    ages = None
    if args.ages:
        ages = read_ages(args.ages)
        run.inputs["ages"] = args.ages
    dataset, report = ingest(args.data, cohort, ages, args.shuffle_cycles)
    run.options["ingest"] = {k: v for k, v in vars(report).items()}
    run.options["shuffle_cycles"] = args.shuffle_cycles
    if args.train_cycles is not None:
        dataset = dataset.head_cycles(args.train_cycles)
    return dataset


def _predictor(args, run: RunConfig) -> Predictor:
    if not Path(args.model).exists():
        raise FileNotFoundError(args.model)
    u, model, _ = load_fit(args.model)
    seed = model.seed if args.seed is None else args.seed
    M = model.M if args.M is None else args.M
    run.model = ModelConfig(S=model.S, M=M, D=model.D, seed=seed)
    run.inputs["model"] = args.model
    run.options["sampler"] = args.sampler
    return Predictor(u, model.S, M, model.D, seed, args.sampler)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, run: RunConfig) -> List[str]:
    spec = SimulationSpec(args.u, args.users, args.cycles, args.S, args.seed, args.fixed_pi)
    run.model = ModelConfig(S=args.S, seed=args.seed)
    run.options.update(u_true=args.u.to_dict(), users=args.users, cycles=args.cycles, fixed_pi=args.fixed_pi)
    dataset = simulate_population(spec, args.threads)
    run.options["zero_length_redraws"] = dataset.redraws
    write_csv(dataset, args.out)
    return [args.out]


def cmd_fit(args, run: RunConfig) -> List[str]:
    dataset = _load_data(args, run)
    if len(dataset) == 0:
        raise DataError("no users left after filtering")
    config = FitConfig(args.init, args.S, args.M, args.lr, min(args.batch_size, len(dataset)), args.max_epochs, args.eps_loss, args.seed, args.sampler)
    run.fit = config
    run.model = ModelConfig(S=args.S, M=args.M, D=args.D, seed=args.seed)
    result = fit(dataset.histories, config, args.threads)
    if result.message:
        logger.warning(result.message)
    save_fit(result, run.model, args.out)
    if result.message:
        raise NumericalError(result.message)
    return [args.out]


def cmd_predict(args, run: RunConfig) -> List[str]:
    dataset = _load_data(args, run)
    pred = _predictor(args, run)
    mode = canonical_mode(args.mode)
    run.options.update(mode=mode, days=args.days)
    pmfs = pred.unconditional_many(dataset.histories, mode, args.threads)
    out_pmf = open(args.pmf_out, "w", newline="", encoding="utf-8") if args.pmf_out else None
    try:
        pmf_writer = None
        if out_pmf:
            pmf_writer = csv.writer(out_pmf, lineterminator="\n")
            pmf_writer.writerow(["user_id", "d_current", "mode", "d_star", "probability"])
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "d_current", "mode", "expected", "map"])
            for h, pmf in zip(dataset.histories, pmfs):
                expected = conditional_expectations(pmf, args.days)
                for d, e in zip(args.days, expected):
                    cond = truncate_pmf(pmf, d)
                    w.writerow([h.user_id, d, mode, fmt(e), cond.argmax()])
                    if pmf_writer:
                        for ds, p in zip(cond.support, cond.probabilities):
                            if p >= args.min_prob:
                                pmf_writer.writerow([h.user_id, d, mode, int(ds), fmt(p)])
    finally:
        if out_pmf:
            out_pmf.close()
    return [args.out] + ([args.pmf_out] if args.pmf_out else [])


def cmd_skip_prob(args, run: RunConfig) -> List[str]:
    dataset = _load_data(args, run)
    pred = _predictor(args, run)
    run.options.update(days=args.days)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "d_current", "s_star", "probability"])
        log_w = pred.log_weights(dataset.histories) if len(dataset) else []
        for i, h in enumerate(dataset.histories):
            joint = pred.joint(h, "sfree", log_w[i])
            for d in args.days:
                post = skip_posterior_from_joint(joint, d)
                for s, p in zip(post.support, post.probabilities):
                    if p > 0:
                        w.writerow([h.user_id, d, int(s), fmt(p)])
    return [args.out]


def _models(pred: Predictor):
    return [ProposedModel(pred, "sfree"), ProposedModel(pred, "s0"), BaselineModel("mean"), BaselineModel("median")]


def _n_train(args, dataset: Dataset) -> int:
    if args.train_cycles is not None:
        return args.train_cycles
    lengths = {len(h) for h in dataset.histories}
    return max(1, max(lengths) - 1) if lengths else 1


def cmd_evaluate(args, run: RunConfig) -> List[str]:
    train_cycles, args.train_cycles = args.train_cycles, None
    dataset = _load_data(args, run)
    pred = _predictor(args, run)
    args.train_cycles = train_cycles
    n_train = _n_train(args, dataset)
    run.options.update(days=args.days, n_train=n_train, eligibility=args.eligibility)
    report = per_day_rmse_curve(dataset, _models(pred), args.days, n_train, args.eligibility, args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.csv", out / "users.csv", out / "strata.csv"]
    write_curve_csv(report, paths[0])
    write_user_errors_csv(report, paths[1], args.days[0])
    write_strata_csv(report, paths[2], args.days[0])
    return [str(p) for p in paths]


def cmd_curve(args, run: RunConfig) -> List[str]:
    train_cycles, args.train_cycles = args.train_cycles, None
    dataset = _load_data(args, run)
    pred = _predictor(args, run)
    args.train_cycles = train_cycles
    n_train = _n_train(args, dataset)
    run.options.update(days=args.days, n_train=n_train, eligibility=args.eligibility)
    report = per_day_rmse_curve(dataset, _models(pred), args.days, n_train, args.eligibility, args.threads)
    write_curve_csv(report, args.out)
    return [args.out]


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "skip-prob": cmd_skip_prob,
    "evaluate": cmd_evaluate,
    "curve": cmd_curve,
}


def run_subcommand(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    run = RunConfig(command=args.command)
    run.options["threads"] = args.threads
    try:
        outputs = COMMANDS[args.command](args, run)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run.outputs = {f"output{i}": p for i, p in enumerate(outputs)}
    # threads do not affect results; keep them out of the echoed config
    run.options.pop("threads", None)
    manifest = args.manifest or f"{outputs[0]}.manifest.json"
    write_manifest(run, manifest)
    return EXIT_OK


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
