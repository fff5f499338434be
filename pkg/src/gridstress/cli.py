"""Command-line pipeline: generate, train, eval, predict, benchmark.

Every subcommand reads a run configuration (plain ``key = value`` lines,
``#`` comments) and accepts flag overrides.  Artifacts go to ``--out``::

    dataset.gsds          pattern database (binary, versioned)
    generate.json         generation report
    <preset>-<head>.ckpt  network checkpoint, plus <preset>-<head>.trace.csv
    cart.json             decision tree
    eval.json / eval.txt  evaluation report
    benchmark.json        timing report

Exit codes: 0 success, 2 configuration, 3 data, 4 convergence or divergence,
5 geometry mismatch, 6 output directory locked by another run.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

log = logging.getLogger("gridstress")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE, EXIT_GEOMETRY, EXIT_LOCKED = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    code = EXIT_CONFIG


class ConfigError(CliError):
    code = EXIT_CONFIG


class DataError(CliError):
    code = EXIT_DATA


class ConvergenceError(CliError):
    code = EXIT_CONVERGENCE


class GeometryError(CliError):
    code = EXIT_GEOMETRY


class LockedError(CliError):
    code = EXIT_LOCKED


# keys that shape the generated dataset; they make up its fingerprint
GENERATION_KEYS = ("case", "case_format", "days", "slots_per_day", "n_ocs", "load_low",
                   "load_high", "load_constant", "sigma_frac", "seed", "limits", "alarm_frac",
                   "stress_frac", "n_exponent", "rating_margin", "rating_floor",
                   "rating_loading", "train_frac")


@dataclass
class RunConfig:
    case: str = "ieee118"
    case_format: str = "auto"
    days: int = 30
    slots_per_day: int = 24
    n_ocs: int = 200
    load_low: float = 0.70
    load_high: float = 1.00
    load_constant: float | None = None
    sigma_frac: float = 0.02
    seed: int = 0
    limits: str = "p90-110"
    alarm_frac: float = 0.90
    stress_frac: float = 1.10
    n_exponent: int = 1
    rating_margin: float = 1.5
    rating_floor: float = 0.3
    rating_loading: float = 1.0
    train_frac: float = 0.7
    workers: int = 1
    preset: str = "paper-cnn-118"
    head: str = "class"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    patience: int | None = None
    target: float | None = None
    dtype: str = "float64"
    paper_exact_adam: bool = False
    mlp_buses: int = 8
    k_folds: int = 5
    mnsn_max: int = 20
    cart_sweep_limit: int | None = None
    benchmark_loading: float = 1.2
    benchmark_reps: int = 5
    out: str = "run"

    def validate(self) -> "RunConfig":
        if self.limits not in ("p90-110", "p95-97", "custom"):
            raise ConfigError(f"unknown limits profile {self.limits!r}")
        al, sl = self.limit_fractions()
        if not 0 < al < sl:
            raise ConfigError(f"need 0 < alarm_frac < stress_frac, got {al}, {sl}")
        if self.head not in ("class", "si"):
            raise ConfigError(f"head must be class or si, got {self.head!r}")
        if self.n_exponent < 1:
            raise ConfigError("n_exponent must be a positive integer")
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac must lie in (0, 1)")
        if self.load_low > self.load_high:
            raise ConfigError("load_low exceeds load_high")
        if self.sigma_frac < 0:
            raise ConfigError("sigma_frac must be non-negative")
        if min(self.days, self.slots_per_day, self.n_ocs, self.batch_size, self.epochs) < 1:
            raise ConfigError("days, slots_per_day, n_ocs, batch_size and epochs must be positive")
        if self.benchmark_reps < 5:
            raise ConfigError("benchmark_reps must be at least 5")
        if self.case not in ("ieee118",) and not Path(self.case).is_file():
            raise ConfigError(f"case file not found: {self.case}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    def limit_fractions(self) -> tuple[float, float]:
        if self.limits == "p90-110":
            return 0.90, 1.10
        if self.limits == "p95-97":
            return 0.95, 0.97
        return self.alarm_frac, self.stress_frac

    def generation(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: d[k] for k in GENERATION_KEYS}

    def override(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw)


def _coerce(value: str, typ: str):
    v = value.strip()
    if "None" in typ and v.lower() in ("", "none", "null"):
        return None
    if typ.startswith("bool"):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ.startswith("int"):
        return int(v)
    if typ.startswith("float"):
        return float(v)
    return v


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines into a :class:`RunConfig`."""
    types = {f.name: str(f.type) for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(value, types[key])
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# pipeline pieces (also used by the test-suite)


def load_run_case(cfg: RunConfig):
    from . import netmodel as nm

    try:
        if cfg.case == "ieee118":
            return nm.ieee118()
        if cfg.case_format == "auto":
            return nm.load_case(cfg.case)
        return nm.parse_case(Path(cfg.case).read_text(), cfg.case_format)
    except nm.CaseError as exc:
        raise DataError(f"netmodel: {exc}") from None


PLACEHOLDER_MVA = 9900.0


def stress_limits(cfg: RunConfig):
    from .stress import StressLimits

    return StressLimits(*cfg.limit_fractions())


def run_ratings(cfg: RunConfig, case):
    """Line ratings: the case's own when every line is rated, else derived
    from the base solution at ``rating_loading``.

    MATPOWER files often carry 9900 MVA as a "no limit" placeholder; such
    ratings count as missing.
    """
    import numpy as np

    from . import powerflow as pf
    from . import scenario as sc

    rating = case.arrays.rating
    if np.all(rating < PLACEHOLDER_MVA / case.base_mva):
        return rating
    oc = sc.nominal_condition(case, cfg.rating_loading)
    state = pf.solve_nr(case, oc.p_load, oc.q_load, p_gen=oc.p_gen)
    if not state.converged:
        raise ConvergenceError("powerflow: base case for the ratings did not converge")
    return sc.derive_ratings(case, state, cfg.rating_margin, cfg.rating_floor)


def build_dataset(cfg: RunConfig, progress=None):
    """Generate, label and split the pattern database described by ``cfg``."""
    from . import scenario as sc

    case = load_run_case(cfg)
    ratings = run_ratings(cfg, case)
    shape = sc.LoadShape(low=cfg.load_low, high=cfg.load_high, constant=cfg.load_constant)
    profile = sc.build_load_profile(cfg.days, cfg.slots_per_day, shape, cfg.seed)
    slots = sc.sample_slots(profile.size, cfg.n_ocs, cfg.seed)
    ocs = sc.make_conditions(case, profile, cfg.sigma_frac, cfg.seed, slots)
    conts = sc.enumerate_contingencies(case)
    ds = sc.generate_patterns(case, ocs, conts, stress_limits(cfg), cfg.n_exponent,
                              seed=cfg.seed, config=cfg.generation(), ratings=ratings,
                              workers=cfg.workers, progress=progress)
    if len(ds) == 0:
        raise ConvergenceError("scenario: no operating condition converged")
    try:
        split = sc.split_dataset(ds, cfg.train_frac, cfg.seed)
    except ValueError as exc:
        raise DataError(f"scenario: {exc}") from None
    return ds.with_split(split)


def generation_report(ds) -> dict:
    import numpy as np

    from .scenario import TEST, TRAIN

    feas = ds.feasible
    test = ds.split == TEST if ds.split is not None else np.zeros(len(ds), bool)
    return {
        "fingerprint": ds.fingerprint,
        "n_oc": int(ds.angles.shape[0]),
        "n_contingencies": ds.n_contingencies,
        "pattern_slots": len(ds),
        "feasible": int(feas.sum()),
        "infeasible": int((~feas).sum()),
        "stressed": int((ds.label_stressed & feas).sum()),
        "unstressed": int((~ds.label_stressed & feas).sum()),
        "alarm": int(((ds.label_si > 0) & ~ds.label_stressed & feas).sum()),
        "train": int((ds.split == TRAIN).sum()) if ds.split is not None else 0,
        "test": int(test.sum()),
        "stressed_test": int((test & ds.label_stressed).sum()),
        "excluded_ocs": ds.excluded_ocs,
    }


def train_config(cfg: RunConfig, seed: int | None = None):
    from .models import TrainConfig

    return TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs,
                       seed=cfg.seed if seed is None else seed,
                       paper_exact_adam=cfg.paper_exact_adam, patience=cfg.patience,
                       target=cfg.target, dtype=cfg.dtype)


def model_spec(cfg: RunConfig, ds, train_idx=None):
    from . import models

    head = models.CLASSIFICATION if cfg.head == "class" else models.REGRESSION
    if cfg.preset.startswith("paper-mlp"):
        buses = models.select_buses(ds, cfg.mlp_buses, train_idx)
        return models.build_mlp(len(buses), buses, head)
    if cfg.preset.startswith("paper-cnn") or cfg.preset == "pjm-cnn":
        try:
            return models.preset(cfg.preset, ds.n_bus, ds.n_contingencies, head)
        except models.ModelError as exc:
            raise GeometryError(f"models: {exc}") from None
    raise ConfigError(f"unknown network preset {cfg.preset!r}")


def fit_network(cfg: RunConfig, ds, progress=None):
    from . import models

    spec = model_spec(cfg, ds, ds.indices("train"))
    try:
        return models.train(spec, ds, train_config(cfg), progress=progress)
    except models.TrainingDiverged as exc:
        raise ConvergenceError(f"models: {exc}") from None
    except models.ModelError as exc:
        raise DataError(f"models: {exc}") from None


def fit_cart(cfg: RunConfig, ds):
    from . import models

    train_idx = ds.indices("train")
    buses = models.select_buses(ds, cfg.mlp_buses, train_idx)
    return models.train_cart(ds, train_idx, buses, range(1, cfg.mnsn_max + 1), cfg.k_folds,
                             cfg.seed, cfg.cart_sweep_limit)


# ---------------------------------------------------------------------------
# artifacts


@contextmanager
def locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _atomic_write(path: Path, data: bytes | str):
    tmp = path.with_name(path.name + ".partial")
    try:
        if isinstance(data, str):
            tmp.write_text(data)
        else:
            tmp.write_bytes(data)
        tmp.replace(path)
    finally:
        tmp.unlink(missing_ok=True)


def read_dataset(path: Path, cfg: RunConfig | None = None):
    from . import scenario as sc

    try:
        ds = sc.load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None
    except sc.DatasetFormatError as exc:
        raise DataError(f"scenario: {exc}") from None
    if cfg is not None:
        case = load_run_case(cfg)
        if ds.case_fingerprint != sc.case_fingerprint(case):
            raise DataError("dataset was generated from a different case")
        if ds.config != cfg.generation():
            diff = sorted(k for k in GENERATION_KEYS if ds.config.get(k) != cfg.generation()[k])
            raise DataError(f"dataset fingerprint mismatch (differs in: {', '.join(diff)})")
    return ds


def read_model(path: Path):
    from . import models

    try:
        if path.suffix == ".json":
            return models.CartModel.from_json(path.read_text())
        return models.load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"model not found: {path}") from None
    except (models.ModelError, ValueError, KeyError) as exc:
        raise DataError(f"models: cannot read {path}: {exc}") from None


def checkpoint_name(cfg: RunConfig) -> str:
    return f"{cfg.preset}-{cfg.head}.ckpt"


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig, args) -> int:
    from . import scenario as sc

    out = Path(cfg.out)
    with locked(out):
        def progress(done, total):
            if done % 10 == 0 or done == total:
                log.info("solved %d/%d operating conditions", done, total)

        ds = build_dataset(cfg, progress)
        report = generation_report(ds)
        _atomic_write(out / "dataset.gsds", sc.dataset_bytes(ds))
        _atomic_write(out / "generate.json", json.dumps(report, indent=2, sort_keys=True))
    print(f"{report['n_oc']} OCs x {report['n_contingencies']} contingencies = "
          f"{report['pattern_slots']} pattern slots")
    print(f"feasible {report['feasible']}, infeasible {report['infeasible']}, "
          f"stressed {report['stressed']}, alarm {report['alarm']}, "
          f"unstressed {report['unstressed']}")
    print(f"train {report['train']}, test {report['test']} "
          f"({report['stressed_test']} stressed); fingerprint {report['fingerprint']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    from . import models

    out = Path(cfg.out)
    ds = read_dataset(Path(args.dataset) if args.dataset else out / "dataset.gsds", cfg)
    with locked(out):
        if cfg.preset == "cart":
            model = fit_cart(cfg, ds)
            _atomic_write(out / "cart.json", model.to_json())
            print(f"cart: MNSN {model.mnsn}, {model.tree.n_leaves()} leaves, "
                  f"depth {model.tree.depth()}")
            return EXIT_OK

        def progress(row):
            log.info("epoch %d: %s", row["epoch"],
                     ", ".join(f"{k}={v:.4g}" for k, v in row.items()
                               if isinstance(v, float)))

        model = fit_network(cfg, ds, progress)
        name = checkpoint_name(cfg)
        _atomic_write(out / name, models.checkpoint_bytes(model))
        buf = _StringIO()
        models.write_trace_csv(model, buf)
        _atomic_write(out / name.replace(".ckpt", ".trace.csv"), buf.getvalue())
    last = model.trace[-1]
    print(f"{cfg.preset}: {len(model.trace)} epochs, "
          + ", ".join(f"{k} {v:.4f}" for k, v in last.items() if isinstance(v, float)))
    return EXIT_OK


def _StringIO():
    import io

    return io.StringIO(newline="")


def cmd_eval(cfg: RunConfig, args) -> int:
    import numpy as np

    from . import eval as ev
    from . import models

    out = Path(cfg.out)
    report: dict = {}
    lines: list[str] = []
    if args.confusion:
        try:
            tp, fn, fp, tn = (int(x) for x in args.confusion.split(","))
            cm = ev.ConfusionMatrix(tp, fn, fp, tn)
        except ValueError as exc:
            raise ConfigError(f"--confusion expects tp,fn,fp,tn: {exc}") from None
        report["confusion"] = cm.to_dict()
        lines += [cm.table("injected"), _rates_line(cm)]
        _write_eval(out, report, lines)
        return EXIT_OK

    ds = read_dataset(Path(args.dataset) if args.dataset else out / "dataset.gsds", cfg)
    test = ds.indices("test")
    if test.size == 0:
        raise DataError("eval: empty test split")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / checkpoint_name(cfg)
    model = read_model(ckpt)
    if model.dataset_fingerprint != ds.fingerprint:
        raise DataError("eval: model was trained on a different dataset")
    if isinstance(model, models.TrainedModel) and model.norm_mean.size != ds.n_bus ** 2:
        raise GeometryError("eval: model geometry does not match the dataset")

    pred = model.predict_dataset(ds, test)
    if isinstance(model, models.CartModel) or model.spec.head == models.CLASSIFICATION:
        stressed = pred > 0.5
        hold = ev.holdout_report(ds, stressed_pred=stressed)
        cm = ev.ConfusionMatrix(**{k: hold["confusion"][k] for k in ("tp", "fn", "fp", "tn")})
        lines += [f"holdout ({test.size} test patterns)", cm.table(ckpt.stem), _rates_line(cm)]
    else:
        hold = ev.holdout_report(ds, si_pred=pred)
        lines += [f"holdout SI regression: MAPE {hold['mape']:.4f}, "
                  f"accuracy {hold['si_accuracy']:.4f} over {hold['n_nonzero_si']} nonzero targets"]
    report["holdout"] = hold

    if args.kfold:
        k = args.kfold
        base = models.TrainConfig(**{**dataclasses.asdict(model.config)}) \
            if isinstance(model, models.TrainedModel) else None

        def recipe(ds_, tr, te, stats):
            if isinstance(model, models.CartModel):
                m = models.train_cart(ds_, tr, model.buses, [model.mnsn])
                p = m.predict_dataset(ds_, te)
                return p > 0.5, None
            spec = model.spec
            m = models.train(spec, ds_, base, tr, np.zeros(0, np.int64), stats)
            p = m.predict_dataset(ds_, te)
            if spec.head == models.CLASSIFICATION:
                return p > 0.5, None
            return p >= 1.0, p

        reports, mean, std = ev.kfold(ds, k, cfg.seed, recipe)
        report["kfold"] = {"folds": [r.to_dict() for r in reports], "mean": mean, "std": std}
        lines += [f"{k}-fold cross-validation accuracy (%)", ev.fold_table(reports)]

    if args.compare:
        errs = {ckpt.stem: (pred > 0.5) != ds.label_stressed[test]}
        for other in args.compare:
            m = read_model(Path(other))
            p = m.predict_dataset(ds, test)
            errs[Path(other).stem] = (p > 0.5) != ds.label_stressed[test]
        base_err = errs[ckpt.stem].astype(float)
        report["t_tests"] = {}
        for name, e in errs.items():
            if name == ckpt.stem:
                continue
            res = ev.paired_t_test(base_err, e.astype(float))
            report["t_tests"][name] = dataclasses.asdict(res)
            who = {"a": ckpt.stem, "b": name}.get(res.winner, res.winner)
            lines.append(f"t-test {ckpt.stem} vs {name}: t={res.t:.3f} p={res.p:.3g} -> {who}")
    _write_eval(out, report, lines)
    return EXIT_OK


def _rates_line(cm) -> str:
    r = cm.rates()
    return "  ".join(f"{k} {v:.4f}" for k, v in r.items()) if r else "rates: n/a (empty)"


def _write_eval(out: Path, report: dict, lines: list[str]):
    from . import eval as ev

    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "eval.json", ev.to_json(report))
    _atomic_write(out / "eval.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))


def read_angles(path: Path, bus_ids) -> "np.ndarray":
    """Angle CSV: header line, then ``bus_id,angle_radians`` rows covering every bus."""
    import numpy as np

    pos = {b: k for k, b in enumerate(bus_ids)}
    angles = np.full(len(bus_ids), np.nan)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read angles: {exc}") from None
    if not rows:
        raise DataError("angle file is empty")
    for lineno, row in enumerate(rows[1:], 2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise DataError(f"angle file line {lineno}: expected bus_id,angle_radians")
        try:
            bus, ang = int(row[0]), float(row[1])
        except ValueError:
            raise DataError(f"angle file line {lineno}: not a number") from None
        if bus not in pos:
            raise GeometryError(f"angle file line {lineno}: bus {bus} is not in the model")
        if not np.isfinite(ang):
            raise DataError(f"angle file line {lineno}: non-finite angle")
        angles[pos[bus]] = ang
    missing = [bus_ids[k] for k in np.flatnonzero(np.isnan(angles))]
    if missing:
        raise GeometryError(f"angle file lacks {len(missing)} buses (first: {missing[0]})")
    return angles


def cmd_predict(cfg: RunConfig, args) -> int:
    from . import models
    from .stress import ALARM, STRESSED, UNSTRESSED

    out = Path(cfg.out)
    model = read_model(Path(args.checkpoint) if args.checkpoint else out / checkpoint_name(cfg))
    si_model = read_model(Path(args.si_checkpoint)) if args.si_checkpoint else None
    for m in (model, si_model):
        if m is not None and not isinstance(m, models.TrainedModel):
            raise ConfigError("predict needs a network checkpoint")
    case = load_run_case(cfg)
    if model.norm_mean.size != case.n_bus ** 2:
        raise GeometryError("model geometry does not match the case")
    angles = read_angles(Path(args.angles), case.bus_ids)
    n_c = model.spec.n_contingencies
    if args.all:
        ids = list(range(n_c))
    elif args.contingency is not None:
        if not 0 <= args.contingency < n_c:
            raise ConfigError(f"unknown contingency id {args.contingency} (0..{n_c - 1})")
        ids = [args.contingency]
    else:
        raise ConfigError("give --contingency ID or --all")
    from .scenario import enumerate_contingencies

    labels = {c.id: c.label for c in enumerate_contingencies(case)}
    first = models.predict_contingencies(model, angles, ids)
    si = models.predict_contingencies(si_model, angles, ids) if si_model is not None else None
    is_class = model.spec.head == models.CLASSIFICATION
    if not is_class:
        si, first = first, None
    rows = ["contingency,label,state,p_stressed,si"]
    for k, cid in enumerate(ids):
        p = None if first is None else float(first[k])
        s = None if si is None else float(si[k])
        if p is not None:
            stressed = p > 0.5
        else:
            stressed = s >= 1.0
        if stressed:
            state = STRESSED
        elif s is not None and s > args.alarm_threshold:
            state = ALARM
        else:
            state = UNSTRESSED
        rows.append(",".join([str(cid), labels.get(cid, ""), state,
                              "" if p is None else f"{p:.6f}", "" if s is None else f"{s:.6f}"]))
    text = "\n".join(rows) + "\n"
    if args.output:
        _atomic_write(Path(args.output), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig, args) -> int:
    import platform

    from . import eval as ev
    from . import models
    from . import scenario as sc

    out = Path(cfg.out)
    model = read_model(Path(args.checkpoint) if args.checkpoint else out / checkpoint_name(cfg))
    if not isinstance(model, models.TrainedModel):
        raise ConfigError("benchmark needs a network checkpoint")
    case = load_run_case(cfg)
    if model.norm_mean.size != case.n_bus ** 2:
        raise GeometryError("model geometry does not match the case")
    ratings = run_ratings(cfg, case)
    oc = sc.nominal_condition(case, cfg.benchmark_loading)
    conts = sc.enumerate_contingencies(case)
    if model.spec.encoding == "onehot" and model.spec.n_contingencies != len(conts):
        raise GeometryError("model and case disagree on the contingency count")
    note = f"{platform.machine()} {platform.python_implementation()} {platform.python_version()}, " \
           f"loading {cfg.benchmark_loading:.0%}"
    try:
        rep = ev.timing_benchmark(case, oc, conts, model, ratings, stress_limits(cfg),
                                  cfg.n_exponent, cfg.benchmark_reps, note)
    except Exception as exc:  # noqa: BLE001
        from .powerflow import PowerFlowError

        if isinstance(exc, PowerFlowError):
            raise ConvergenceError(f"powerflow: {exc}") from None
        raise
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "benchmark.json", json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    print(rep.text())
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "benchmark": cmd_benchmark}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=["paper-cnn-118", "paper-mlp-8bus", "cart",
                                             "pjm-cnn"])
    common.add_argument("--head", choices=["class", "si"])
    common.add_argument("--n-exponent", type=int, dest="n_exponent")
    common.add_argument("--limits", choices=["p90-110", "p95-97", "custom"])
    common.add_argument("--paper-exact-adam", action="store_true", default=None,
                        dest="paper_exact_adam",
                        help="divide by 1-beta instead of 1-beta^t in Adam's bias correction")
    common.add_argument("--threads", type=int, help="BLAS threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gridstress",
                                description="Power system stress assessment from bus angles")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="build the pattern database")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--dataset")
    e = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--kfold", type=int, metavar="K")
    e.add_argument("--compare", nargs="+", metavar="MODEL",
                   help="baseline models for paired t-tests")
    e.add_argument("--confusion", metavar="TP,FN,FP,TN",
                   help="report on given counts instead of a model")
    pr = sub.add_parser("predict", parents=[common], help="score an operating condition")
    pr.add_argument("--checkpoint")
    pr.add_argument("--si-checkpoint", help="SI regression checkpoint for the tri-state")
    pr.add_argument("--angles", required=True, help="CSV with header; rows bus_id,angle_radians")
    pr.add_argument("--contingency", type=int)
    pr.add_argument("--all", action="store_true")
    pr.add_argument("--alarm-threshold", type=float, default=0.05,
                    help="SI estimate above which a non-stressed row reads 'alarm'")
    pr.add_argument("--output")
    b = sub.add_parser("benchmark", parents=[common], help="time NR sweep vs model")
    b.add_argument("--checkpoint")
    b.add_argument("--loading", type=float, help="system load multiplier (default 1.2)")
    b.add_argument("--reps", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = load_config(args.config).override(
            seed=args.seed, preset=args.preset, head=args.head, n_exponent=args.n_exponent,
            limits=args.limits, paper_exact_adam=args.paper_exact_adam, out=args.out,
            benchmark_loading=getattr(args, "loading", None),
            benchmark_reps=getattr(args, "reps", None))
        cfg.validate()
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"gridstress {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
