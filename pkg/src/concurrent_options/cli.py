"""Experiment driver for the locked-door rooms task.

Subcommands ``plan``, ``learn``, ``verify`` and ``model``. Settings come
from an optional ``key=value`` file (``#`` starts a comment) and may be
overridden by flags of the same name.

Exit codes: 0 ok, 2 configuration error, 3 non-convergence, 4 I/O error,
5 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .concurrent import MultiOption, multi_option_model, write_model_dump
from .executor import RngStream, compare_with_model, monte_carlo_model
from .learning import LearnerConfig, run_training, write_learning_csv
from .options import DEFAULT_K_MAX, DEFAULT_TOL, TruncationWarning
from .planning import NotConvergedError, SmdpTask, bellman_residual, build_models, svi
from .rooms import build_rooms_domain, load_layout

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_IO, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("concurrent_options")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    framework: str = "concurrent"
    rule: str = "t2"
    gamma: float = 0.9
    alpha: float = 0.25
    epsilon: float = 0.1
    episodes: int = 20000
    trials: int = 20
    seed: int = 0
    k_max: int = DEFAULT_K_MAX
    tol: float = DEFAULT_TOL
    layout_path: str | None = None
    out_path: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.framework not in ("sequential", "concurrent"):
            raise ConfigError(f"framework: expected sequential or concurrent, got {self.framework!r}")
        if self.rule not in ("t1", "t2"):
            raise ConfigError(f"rule: expected t1 or t2, got {self.rule!r}")
        if not 0.0 < self.gamma < 1.0:
            # the discounted models need gamma < 1 for SVI to contract
            raise ConfigError(f"gamma: must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha: must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon: must lie in [0, 1], got {self.epsilon}")
        for key in ("episodes", "trials", "k_max"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be a positive integer, got {getattr(self, key)}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be non-negative, got {self.seed}")
        if not self.tol > 0:
            raise ConfigError(f"tol: must be positive, got {self.tol}")
        return self

    @property
    def learning_rule(self) -> str:
        return "sequential" if self.framework == "sequential" else self.rule


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Config file (optional) merged with flag overrides, then validated."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text))
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**values).validate()


# ---------------------------------------------------------------------------
# resolving states and multi-options


def _domain(cfg: ExperimentConfig):
    layout = None
    if cfg.layout_path:
        try:
            layout = load_layout(cfg.layout_path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"layout_path: {exc}") from None
    return build_rooms_domain(layout, cfg.gamma)


def parse_state(domain, spec: str) -> int:
    """``start``, a state ordinal, or ``row,col[,doors[,key]]``."""
    spec = spec.strip()
    if spec == "start":
        return domain.start
    try:
        parts = [int(p) for p in spec.split(",")]
    except ValueError:
        raise ConfigError(f"state: cannot parse {spec!r}") from None
    try:
        if len(parts) == 1:
            s = parts[0]
            if not 0 <= s < domain.mdp.n_states:
                raise ValueError(f"ordinal {s} out of range")
            return s
        if len(parts) in (2, 3, 4):
            cell = (parts[0], parts[1])
            return domain.state(cell, *parts[2:])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"state: {spec!r} is not a valid state ({exc})") from None
    raise ConfigError(f"state: expected row,col[,doors[,key]] or an ordinal, got {spec!r}")


def parse_multi_option(domain, spec: str, rule: str) -> MultiOption:
    names = [n.strip() for n in spec.split(",") if n.strip()]
    if not names:
        raise ConfigError("options: no option names given")
    try:
        members = tuple(domain.option(n) for n in names)
        return MultiOption(members, rule)
    except (KeyError, ValueError) as exc:
        known = ", ".join(o.name for o in domain.options)
        raise ConfigError(f"options: {exc}; known options: {known}") from None


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    try:
        return open(path, "w", newline="\n"), True
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_plan(cfg: ExperimentConfig, out=None, values_path=None) -> int:
    out = out or sys.stdout
    domain = _domain(cfg)
    task = SmdpTask(domain.mdp, domain.actions(cfg.framework, cfg.rule), domain.start)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TruncationWarning)
        models = build_models(task, cfg.k_max, cfg.tol)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    v, q = svi(models, tol=cfg.tol)
    label = cfg.framework if cfg.framework == "sequential" else f"concurrent-{cfg.rule}"
    best = models.names[int(np.argmax(q[domain.start]))]
    print(f"framework {label}", file=out)
    print(f"actions {len(task.actions)}", file=out)
    print(f"V*(start) {v[domain.start]:.10g}", file=out)
    print(f"greedy(start) {best}", file=out)
    print(f"bellman_residual {bellman_residual(models, v):.3g}", file=out)
    print(f"max_truncation_residual {models.residual.max():.3g}", file=out)
    if values_path is not None:
        fh, owned = _open_out(values_path)
        try:
            for s, x in enumerate(v.tolist()):
                fh.write(f"{s} {x!r}\n")
        finally:
            if owned:
                fh.close()
    return EXIT_OK


def cmd_learn(cfg: ExperimentConfig, workers: int = 1, out=None) -> int:
    out = out or sys.stdout
    domain = _domain(cfg)
    task = SmdpTask(domain.mdp, domain.actions(cfg.framework, cfg.rule), domain.start)
    lc = LearnerConfig(
        alpha=cfg.alpha, epsilon=cfg.epsilon, gamma=cfg.gamma, episodes=cfg.episodes,
        trials=cfg.trials, rule=cfg.learning_rule, seed=cfg.seed,
    )
    result = run_training(task, lc, workers=workers)
    fh, owned = _open_out(cfg.out_path)
    try:
        write_learning_csv(result.curve, fh)
    finally:
        if owned:
            fh.close()
    summary = sys.stderr if fh is sys.stdout else out
    print(f"final running median {result.curve.mean_running_median[-1]:.6g}", file=summary)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, state: str, options: str, samples: int, out=None) -> int:
    out = out or sys.stdout
    domain = _domain(cfg)
    s = parse_state(domain, state)
    mo = parse_multi_option(domain, options, cfg.rule)
    if not mo.available(s):
        raise ConfigError(f"{mo.name} is not available in state {s}")
    if samples < 1:
        raise ConfigError(f"samples: must be positive, got {samples}")
    model = multi_option_model(domain.mdp, mo, k_max=cfg.k_max, tol=cfg.tol, starts=[s])
    mc = monte_carlo_model(domain.mdp, mo, s, samples, RngStream(cfg.seed, 0))
    report = compare_with_model(model.duration_table(s), float(model.reward[s]), mc)
    for line in report.lines():
        print(line, file=out)
    if report.passed:
        print("PASS", file=out)
        return EXIT_OK
    bad = [f"(s'={r.s_next}, k={r.k}, z={r.z:+.2f})" for r in report.failures]
    if not report.reward_ok:
        bad.append(f"(reward, z={report.reward_z:+.2f})")
    print("FAIL " + " ".join(bad), file=out)
    return EXIT_VERIFY


def cmd_model(cfg: ExperimentConfig, options: str, state: str | None = None) -> int:
    domain = _domain(cfg)
    mo = parse_multi_option(domain, options, cfg.rule)
    starts = None
    if state is not None:
        s = parse_state(domain, state)
        if not mo.available(s):
            raise ConfigError(f"{mo.name} is not available in state {s}")
        starts = [s]
    model = multi_option_model(domain.mdp, mo, k_max=cfg.k_max, tol=cfg.tol, starts=starts)
    fh, owned = _open_out(cfg.out_path)
    try:
        write_model_dump(model, fh, mo.name, mo.rule, starts)
    finally:
        if owned:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    for f in fields(ExperimentConfig):
        common.add_argument(f"--{f.name}", dest=f.name, default=None, metavar=f.name.upper())
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="concurrent-options", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    plan = sub.add_parser("plan", parents=[common], help="value iteration over (multi-)option models")
    plan.add_argument("--values", default=None, help="also write 's_ordinal value' lines to this file")
    learn = sub.add_parser("learn", parents=[common], help="SMDP Q-learning; writes a learning-curve CSV")
    learn.add_argument("--workers", type=int, default=1)
    verify = sub.add_parser("verify", parents=[common], help="analytic model vs Monte-Carlo rollouts")
    verify.add_argument("--state", default="start")
    verify.add_argument("--options", required=True, help="comma-separated option names")
    verify.add_argument("--samples", type=int, default=100_000)
    model = sub.add_parser("model", parents=[common], help="dump P(s, s', k) of a multi-option")
    model.add_argument("--options", required=True)
    model.add_argument("--state", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "plan":
            return cmd_plan(cfg, values_path=args.values)
        if args.command == "learn":
            return cmd_learn(cfg, workers=args.workers)
        if args.command == "verify":
            return cmd_verify(cfg, args.state, args.options, args.samples)
        return cmd_model(cfg, args.options, args.state)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotConvergedError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
