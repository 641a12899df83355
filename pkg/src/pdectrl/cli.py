"""Command-line orchestration of the pipeline stages.

``pdectrl <command> --config experiments/<name>.ini [options]``

Commands: ``gen-data``, ``train-deeponet``, ``train-rl``, ``evaluate`` and
``simulate-backstepping``. Every relative path in the ``[paths]`` section is
resolved against the output directory (``--out`` or ``experiment.out_dir``).
Text outputs start with one ``# created ...`` line; everything after it is a
deterministic function of the configuration and seed.

Exit codes: 0 success, 1 numerical failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import sys
import types
import typing
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .backstepping import BacksteppingController, solve_kernel
from .dataset import (GenerationPlan, dataset_read, dataset_write, generate_dataset, read_header,
                      shuffle_split)
from .deeponet import (DeepONetController, DeepONetModel, DeepONetShape, predict, pretrain,
                       relative_l2_error)
from .errors import (CheckpointFormatError, ConfigError, DatasetFormatError, EnvironmentFault,
                     InvalidArgumentError, NumericalFailureError)
from .numerics import Grid, Rng, derive_seed
from .pde_env import (GAMMA_RANGE, HORIZON, KINDS, SAMPLE_EVERY, STEPS_PER_ACTION, EnvConfig,
                      PdeEnv, l2_norm, sample_coefficient, simulate)
from .sac import (VARIANT_EXTRACTOR, AgentNets, SacConfig, evaluate_controller, evaluate_policy,
                  metrics_csv, reward_curve_area, sac_config_dict, sac_train)

log = logging.getLogger("pdectrl")

COMMANDS = ("gen-data", "train-deeponet", "train-rl", "evaluate", "simulate-backstepping")
VARIANTS = tuple(VARIANT_EXTRACTOR)
CONTROLLERS = ("backstepping",) + VARIANTS

# derive_seed labels for the stages that own a random stream
_SPLIT_STREAM, _DEEPONET_INIT_STREAM, _DEEPONET_SHUFFLE_STREAM = 20, 21, 22


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EnvSection:
    gamma: float | None = None
    n_points: int = 101
    dt: float = 1e-3
    horizon: float | None = None
    steps_per_action: int | None = None
    blowup_limit: float = 100.0
    sigma: float = 10.0
    eta_rew: float = 100.0
    zeta: float = 0.2
    u0_low: float = 1.0
    u0_high: float = 10.0
    # a number, or "auto" to take ceil(1.5 max|U|) from the training dataset header
    action_bound: str = "auto"


@dataclass(frozen=True)
class DatasetSection:
    n_coeffs: int = 100
    n_inits: int = 60
    sample_every: int | None = None
    horizon: float | None = None
    gamma_low: float | None = None
    gamma_high: float | None = None
    split: float = 0.9


@dataclass(frozen=True)
class DeepONetSection:
    latent: int = 64
    branch_hidden: tuple[int, ...] = (128, 128)
    trunk_hidden: tuple[int, ...] = (64, 64)
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 1.0
    # 0 trains on the whole training split
    train_limit: int = 0


@dataclass(frozen=True)
class EvalSection:
    gamma_train: float | None = None
    gamma_eval: tuple[float, ...] = ()
    u0: tuple[float, ...] = (9.0,)
    horizon: float | None = None


@dataclass(frozen=True)
class PathsSection:
    train_data: str = "data/train.pdds"
    test_data: str = "data/test.pdds"
    deeponet: str = "deeponet.ckpt"
    agents: str = "agents"


_SAC_KEYS = tuple(f.name for f in dataclasses.fields(SacConfig) if f.name not in ("seed", "extractor"))


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str
    seed: int = 0
    out_dir: Path = Path("runs")
    variant: str = "nosac_training"
    env: EnvSection = EnvSection()
    dataset: DatasetSection = DatasetSection()
    deeponet: DeepONetSection = DeepONetSection()
    sac: dict = field(default_factory=dict)
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    @property
    def gamma(self) -> float:
        return self.env.gamma if self.env.gamma is not None else GAMMA_RANGE[self.benchmark][0]

    @property
    def gamma_train(self) -> float:
        return self.eval.gamma_train if self.eval.gamma_train is not None else self.gamma

    @property
    def gamma_eval(self) -> tuple:
        return self.eval.gamma_eval or (self.gamma_train,)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.out_dir / p

    def generation_plan(self) -> GenerationPlan:
        ds = self.dataset
        lo, hi = GAMMA_RANGE[self.benchmark]
        lo = ds.gamma_low if ds.gamma_low is not None else lo
        hi = ds.gamma_high if ds.gamma_high is not None else hi
        if not 0 < lo <= hi:
            raise ConfigError(f"dataset gamma range is invalid: low={lo}, high={hi}")
        return GenerationPlan(self.benchmark, ds.n_coeffs, ds.n_inits, self.env.n_points,
                              self.env.dt, ds.horizon or HORIZON[self.benchmark],
                              ds.sample_every or SAMPLE_EVERY[self.benchmark], (lo, hi),
                              (self.env.u0_low, self.env.u0_high))

    def sac_config(self, variant: str) -> SacConfig:
        return SacConfig(extractor=VARIANT_EXTRACTOR[variant], seed=self.seed, **self.sac)

    def deeponet_shape(self) -> DeepONetShape:
        d = self.deeponet
        return DeepONetShape(self.env.n_points, d.latent, d.branch_hidden, d.trunk_hidden)


def _convert(text: str, hint, key: str):
    """Parse ``text`` according to the annotation ``hint`` of a config field."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.strip().lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(text, inner, key)
    try:
        if hint is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[text.strip().lower()]
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if origin is tuple:
            return tuple(args[0](p.strip()) for p in text.split(",") if p.strip())
        return text.strip()
    except (ValueError, KeyError):
        raise ConfigError(f"cannot parse {key} = {text!r} as {getattr(hint, '__name__', hint)}") from None


def _section(parser, name: str, cls):
    if not parser.has_section(name):
        return cls()
    hints = typing.get_type_hints(cls)
    values = {}
    for key, text in parser.items(name):
        if key not in hints:
            raise ConfigError(f"unknown key [{name}] {key}")
        values[key] = _convert(text, hints[key], f"[{name}] {key}")
    return cls(**values)


def _sac_section(parser) -> dict:
    if not parser.has_section("sac"):
        return {}
    hints = typing.get_type_hints(SacConfig)
    values = {}
    for key, text in parser.items("sac"):
        if key not in _SAC_KEYS:
            raise ConfigError(f"unknown key [sac] {key}")
        values[key] = _convert(text, hints[key], f"[sac] {key}")
    for key in ("actor_hidden", "critic_hidden"):
        if key in values:
            values[key] = tuple(int(v) for v in values[key].split(","))
    return values


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = {"experiment", "env", "dataset", "deeponet", "sac", "eval", "paths"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
    exp = dict(parser.items("experiment")) if parser.has_section("experiment") else {}
    benchmark = exp.pop("benchmark", None)
    if benchmark not in KINDS:
        raise ConfigError(f"{path}: [experiment] benchmark must be one of {KINDS}, got {benchmark!r}")
    variant = exp.pop("variant", "nosac_training")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    try:
        cfg_seed = int(exp.pop("seed", 0))
    except ValueError:
        raise ConfigError(f"{path}: [experiment] seed must be an integer") from None
    out_dir = exp.pop("out_dir", "runs/" + path.stem)
    if exp:
        raise ConfigError(f"{path}: unknown [experiment] keys {sorted(exp)}")
    cfg = ExperimentConfig(
        benchmark=benchmark,
        seed=cfg_seed if seed is None else seed,
        out_dir=Path(out) if out else Path(out_dir),
        variant=variant,
        env=_section(parser, "env", EnvSection),
        dataset=_section(parser, "dataset", DatasetSection),
        deeponet=_section(parser, "deeponet", DeepONetSection),
        sac=_sac_section(parser),
        eval=_section(parser, "eval", EvalSection),
        paths=_section(parser, "paths", PathsSection),
    )
    # surface invalid values now rather than in the middle of a run
    cfg.generation_plan()
    cfg.sac_config(cfg.variant)
    if not 0.0 < cfg.dataset.split < 1.0:
        raise ConfigError(f"dataset split must lie in (0, 1), got {cfg.dataset.split}")
    return cfg


def action_bound(cfg: ExperimentConfig) -> float:
    """Configured bound, or ``ceil(1.5 * max|U|)`` read from the training dataset."""
    text = cfg.env.action_bound.strip().lower()
    if text != "auto":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"[env] action_bound must be a number or 'auto', got {text!r}") from None
    path = cfg.path("train_data")
    if not path.is_file():
        raise ConfigError(f"action_bound = auto needs the training dataset {path}; run gen-data first")
    return float(math.ceil(1.5 * read_header(path)["max_abs_control"]))


def env_config(cfg: ExperimentConfig, gamma: float, bound: float, horizon=None) -> EnvConfig:
    e = cfg.env
    return EnvConfig(cfg.benchmark, gamma, bound, e.n_points, e.dt, horizon or e.horizon,
                     e.steps_per_action, e.blowup_limit, e.sigma, e.eta_rew, e.zeta,
                     (e.u0_low, e.u0_high))


# ---------------------------------------------------------------------------
# output helpers


def stamp_line() -> str:
    return f"# created {datetime.now(timezone.utc).isoformat(timespec='seconds')}"


def write_text(path: Path, body: str) -> None:
    """Write ``body`` behind the single timestamp line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(stamp_line() + "\n" + body)


def _csv_text(header: list, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return out.getvalue()


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _fmt_gamma(g: float) -> str:
    return f"{g:g}".replace(".", "p")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    plan = cfg.generation_plan()
    print(f"planned rollouts: {plan.n_rollouts} ({plan.n_coeffs} coefficients x {plan.n_inits} "
          f"initial conditions), samples: {plan.n_samples}")
    if args.dry_run:
        return 0
    data = generate_dataset(plan, cfg.seed)
    train, test = shuffle_split(data, cfg.dataset.split, Rng(derive_seed(cfg.seed, _SPLIT_STREAM)))
    train_path, test_path = cfg.path("train_data"), cfg.path("test_data")
    train_path.parent.mkdir(parents=True, exist_ok=True)
    test_path.parent.mkdir(parents=True, exist_ok=True)
    dataset_write(train, train_path)
    dataset_write(test, test_path)
    bound = math.ceil(1.5 * data.max_abs_control)
    lines = [f"benchmark = {cfg.benchmark}", f"seed = {cfg.seed}",
             f"total_samples = {data.count}", f"train_samples = {train.count}",
             f"test_samples = {test.count}", f"max_abs_control = {data.max_abs_control!r}",
             f"suggested_action_bound = {bound}", f"skipped_coefficients = {len(data.skipped)}"]
    lines += [f"skipped = {i} gamma={g!r}" for i, g in data.skipped]
    report = "\n".join(lines) + "\n"
    write_text(cfg.out_dir / "gen_report.txt", report)
    print(report, end="")
    return 0


def cmd_train_deeponet(cfg: ExperimentConfig, args) -> int:
    d = cfg.deeponet
    train_path, test_path = cfg.path("train_data"), cfg.path("test_data")
    for p in (train_path, test_path):
        if not p.is_file():
            raise ConfigError(f"dataset file not found: {p}")
    print(f"pretraining on {train_path} for {d.epochs} epochs")
    if args.dry_run:
        return 0
    train, test = dataset_read(train_path), dataset_read(test_path)
    if d.train_limit and d.train_limit < train.count:
        train = train.subset(slice(0, d.train_limit))
    model = DeepONetModel.initialized(cfg.benchmark, Rng(derive_seed(cfg.seed, _DEEPONET_INIT_STREAM)),
                                      cfg.deeponet_shape())
    rng = Rng(derive_seed(cfg.seed, _DEEPONET_SHUFFLE_STREAM))
    if d.epochs > 0:
        report = pretrain(model, train, test, d.epochs, d.batch_size, d.lr, rng, d.lr_decay)
        error = report.test_relative_l2
        rows = [(k, a, b) for k, (a, b) in enumerate(zip(report.train_mse, report.test_mse))]
    else:
        error = relative_l2_error(predict(model, test), test.target)
        rows = []
    ckpt = cfg.path("deeponet")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt)
    write_text(cfg.out_dir / "deeponet_epochs.csv",
               _csv_text(["epoch", "train_mse", "test_mse"], rows))
    print(f"held-out relative L2 error: {error:.6f}")
    return 0


def _agent_path(cfg: ExperimentConfig, variant: str) -> Path:
    return cfg.path("agents") / f"{variant}_seed{cfg.seed}.ckpt"


def _load_pretrained(cfg: ExperimentConfig) -> DeepONetModel:
    path = cfg.path("deeponet")
    if not path.is_file():
        raise ConfigError(f"the nosac_training variant needs a pretrained DeepONet at {path}")
    return DeepONetModel.load(path)


def cmd_train_rl(cfg: ExperimentConfig, args) -> int:
    variant = args.variant or cfg.variant
    sac_cfg = cfg.sac_config(variant)
    pretrained = _load_pretrained(cfg) if variant == "nosac_training" else None
    bound = action_bound(cfg)
    env = PdeEnv(env_config(cfg, cfg.gamma_train, bound))
    print(f"training {variant} (seed {cfg.seed}) for {sac_cfg.total_steps} steps, bound {bound:g}")
    if args.dry_run:
        return 0

    def progress(episode, step, ret):
        log.info("episode %d ended at step %d with return %.3f", episode, step, ret)

    result = sac_train(env, sac_cfg, pretrained, progress)
    header = {"experiment": {"benchmark": cfg.benchmark, "variant": variant,
                             "gamma": cfg.gamma_train, "action_bound": bound},
              "sac": sac_config_dict(sac_cfg)}
    write_text(cfg.out_dir / f"metrics_{variant}_seed{cfg.seed}.csv", metrics_csv(result, header))
    path = _agent_path(cfg, variant)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(result.nets.to_bytes())
    returns = result.episode_returns
    area = reward_curve_area(result.episode_end_steps, returns)
    print(f"episodes: {len(returns)}, reward curve area: {area:.6g}")
    return 0


def _controllers(cfg: ExperimentConfig, bound: float):
    """Backstepping designed at the training coefficient plus the three agents."""
    grid = Grid(cfg.env.n_points)
    kernel = solve_kernel(sample_coefficient(cfg.benchmark, cfg.gamma_train, grid), grid)
    agents = {}
    for variant in VARIANTS:
        path = _agent_path(cfg, variant)
        if not path.is_file():
            raise ConfigError(f"agent checkpoint for {variant} not found: {path}")
        agents[variant] = AgentNets.from_bytes(path.read_bytes())
        if agents[variant].actor.bound != bound:
            raise ConfigError(f"{path} was trained with bound {agents[variant].actor.bound:g}, "
                              f"config gives {bound:g}")
    return BacksteppingController(kernel, grid.dx), agents


def evaluate_all(cfg: ExperimentConfig, bound: float) -> dict:
    """Run the four controllers for every (gamma_eval, u0) pair.

    Returns ``{(gamma, u0): {controller: EvalReport}}``. Each controller gets
    a fresh environment with the same deterministic coefficient and initial
    level, so all four face identical conditions.
    """
    backstepping, agents = _controllers(cfg, bound)
    horizon = cfg.eval.horizon
    results = {}
    for gamma in cfg.gamma_eval:
        for u0 in cfg.eval.u0:
            reports = {}
            reports["backstepping"] = evaluate_controller(
                PdeEnv(env_config(cfg, gamma, bound, horizon)), backstepping, u0)
            for variant, nets in agents.items():
                reports[variant] = evaluate_policy(
                    nets, PdeEnv(env_config(cfg, gamma, bound, horizon)), u0)
            results[(gamma, u0)] = reports
    return results


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    bound = action_bound(cfg)
    pairs = [(g, u) for g in cfg.gamma_eval for u in cfg.eval.u0]
    print(f"evaluating {len(CONTROLLERS)} controllers on {len(pairs)} conditions "
          f"(designed at gamma={cfg.gamma_train:g})")
    if args.dry_run:
        _controllers(cfg, bound)
        return 0
    results = evaluate_all(cfg, bound)
    out = cfg.out_dir / "eval"
    summary = {"benchmark": cfg.benchmark, "seed": cfg.seed, "gamma_train": cfg.gamma_train,
               "action_bound": bound, "runs": []}
    for (gamma, u0), reports in results.items():
        for name, rep in reports.items():
            rows = zip(rep.times, rep.norms, np.append(rep.controls, np.nan))
            write_text(out / f"traj_{name}_g{_fmt_gamma(gamma)}_u{_fmt_gamma(u0)}.csv",
                       _csv_text(["t", "l2_norm", "control"], rows))
            metrics = {k: _jsonable(v) for k, v in rep.summary().items()}
            summary["runs"].append({"controller": name, "gamma_eval": gamma, "u0": u0, **metrics})
            print(f"gamma={gamma:g} u0={u0:g} {name:>15}: " +
                  " ".join(f"{k}={v:.4g}" for k, v in rep.summary().items()))
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_simulate_backstepping(cfg: ExperimentConfig, args) -> int:
    which = args.controller
    model = None
    if which in ("deeponet", "both"):
        path = cfg.path("deeponet")
        if not path.is_file():
            raise ConfigError(f"--controller {which} needs a DeepONet checkpoint at {path}")
        model = DeepONetModel.load(path)
    grid = Grid(cfg.env.n_points)
    coeff = sample_coefficient(cfg.benchmark, cfg.gamma, grid)
    horizon = cfg.eval.horizon or cfg.env.horizon or HORIZON[cfg.benchmark]
    n_steps = int(round(horizon / cfg.env.dt))
    print(f"simulating gamma={cfg.gamma:g} for {n_steps} solver steps")
    if args.dry_run:
        return 0
    kernel = solve_kernel(coeff, grid)
    if args.dump_kernel:
        dump = Path(args.dump_kernel)
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(_csv_text(["y", "gain"], zip(grid.x, kernel.gain_row)))
    controllers = {}
    if which in ("backstepping", "both"):
        controllers["backstepping"] = BacksteppingController(kernel, grid.dx)
    if model is not None:
        controllers["deeponet"] = DeepONetController(model, coeff.samples)
    record = cfg.env.steps_per_action or STEPS_PER_ACTION[cfg.benchmark]
    for u0 in cfg.eval.u0:
        for name, ctl in controllers.items():
            times, states, controls = simulate(coeff, np.full(grid.n_points, float(u0)), n_steps,
                                               cfg.env.dt, controller=ctl, record_every=record)
            norms = [l2_norm(s, grid.dx) for s in states]
            write_text(cfg.out_dir / f"simulate_{name}_u{_fmt_gamma(u0)}.csv",
                       _csv_text(["t", "control", "l2_norm"], zip(times, controls, norms)))
            ratio = norms[-1] / norms[0] if norms[0] > 0 else 0.0
            print(f"u0={u0:g} {name}: final norm ratio {ratio:.3e}")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train-deeponet": cmd_train_deeponet,
            "train-rl": cmd_train_rl, "evaluate": cmd_evaluate,
            "simulate-backstepping": cmd_simulate_backstepping}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdectrl", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="sectioned INI experiment file")
    parser.add_argument("--seed", type=int, help="override [experiment] seed")
    parser.add_argument("--variant", choices=VARIANTS, help="agent variant for train-rl")
    parser.add_argument("--out", help="override [experiment] out_dir")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    parser.add_argument("--dump-kernel", metavar="PATH",
                        help="simulate-backstepping: also write the gain k(1, y) as CSV")
    parser.add_argument("--controller", choices=("backstepping", "deeponet", "both"),
                        default="backstepping", help="simulate-backstepping controllers")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return HANDLERS[args.command](cfg, args)
    except (ConfigError, InvalidArgumentError, DatasetFormatError, CheckpointFormatError,
            FileNotFoundError) as exc:
        print(f"pdectrl: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailureError, EnvironmentFault) as exc:
        print(f"pdectrl: numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
