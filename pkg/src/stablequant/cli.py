"""Command-line driver.

Run configuration is a JSON document with optional sections ``refnet``,
``data``, ``search``, ``calibrate``, ``compare`` and ``output``; unknown keys
are rejected. Command-line flags override the document.

Exit codes: 0 ok, 2 config error, 3 data error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .calibrators import METHOD_TAGS, CalibMethod, CalibrationError, calibrate, histogram_error
from .histogram import DEFAULT_BINS, MAX_CLIP_PERCENT, HistogramError, histogram_from_batches
from .quant import QuantizationError, QuantParams, as_tensor, fake_quantize, qmax
from .refnet import (
    DEFAULT_MIN_MARGIN,
    ConvSpec,
    DevSet,
    RefNet,
    RefNetError,
    RefNetSpec,
    TokenErrorEvaluator,
    calibration_inputs,
)
from .search import (
    SearchConfig,
    SearchError,
    calibrate_weights,
    collect_profiles,
    default_grid,
    run_single_method,
    run_stablequant,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

COMPARE_METHODS = ("percentile", "mse", "entropy", "stablequant")

log = logging.getLogger("stablequant")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# -- run configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class DataSection:
    seed: int | None = None  # None follows refnet.seed
    calib_size: int = 32
    dev_size: int = 128
    test_size: int = 128
    min_margin: float = DEFAULT_MIN_MARGIN


@dataclass(frozen=True)
class SearchSection:
    gamma: float = 0.25
    grid_step: float = 0.01
    grid_max: float = MAX_CLIP_PERCENT
    act_bits: int = 8
    weight_bits: int = 8
    num_bins: int = DEFAULT_BINS
    workers: int = 1


@dataclass(frozen=True)
class CalibrateSection:
    method: str = "mse"
    p: float | None = None


@dataclass(frozen=True)
class CompareSection:
    percentile_p: float = 0.01


@dataclass(frozen=True)
class OutputSection:
    report: str | None = None
    cache: str | None = None


@dataclass(frozen=True)
class RunConfig:
    refnet: RefNetSpec = field(default_factory=RefNetSpec)
    data: DataSection = field(default_factory=DataSection)
    search: SearchSection = field(default_factory=SearchSection)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    compare: CompareSection = field(default_factory=CompareSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def data_seed(self) -> int:
        return self.refnet.seed if self.data.seed is None else self.data.seed

    def search_config(self) -> SearchConfig:
        s = self.search
        return SearchConfig(
            gamma=s.gamma,
            grid=default_grid(s.grid_step, s.grid_max),
            act_bits=s.act_bits,
            weight_bits=s.weight_bits,
            num_bins=s.num_bins,
            workers=s.workers,
        )


_INT = (int,)
_NUM = (int, float)


def _check_type(where: str, value, kinds, nullable=False):
    if value is None and nullable:
        return
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigError(f"{where}: expected {'integer' if kinds is _INT else 'number'}, got {value!r}")


def _section(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return doc


def _refnet_spec(doc) -> RefNetSpec:
    doc = _section(RefNetSpec, doc, "refnet")
    if isinstance(doc, RefNetSpec):
        return doc
    kw = dict(doc)
    for key in ("seed", "num_blocks", "width", "vocab", "input_length"):
        if key in kw:
            _check_type(f"refnet.{key}", kw[key], _INT)
    if "conv" in kw:
        if not isinstance(kw["conv"], list):
            raise ConfigError("refnet.conv: expected a list")
        convs = []
        for i, c in enumerate(kw["conv"]):
            c = _section(ConvSpec, c, f"refnet.conv[{i}]")
            for key in ("channels", "kernel", "stride"):
                if key not in c:
                    raise ConfigError(f"refnet.conv[{i}]: missing {key}")
                _check_type(f"refnet.conv[{i}].{key}", c[key], _INT)
            if not isinstance(c.get("norm", False), bool):
                raise ConfigError(f"refnet.conv[{i}].norm: expected true/false")
            convs.append(ConvSpec(**c))
        kw["conv"] = tuple(convs)
    if "outlier_gains" in kw:
        gains = kw["outlier_gains"]
        if not isinstance(gains, dict):
            raise ConfigError("refnet.outlier_gains: expected an object")
        for k, v in gains.items():
            _check_type(f"refnet.outlier_gains.{k}", v, _NUM)
    try:
        return RefNetSpec(**kw)
    except RefNetError as exc:
        raise ConfigError(f"refnet: {exc}") from None


def parse_config(doc) -> RunConfig:
    """Validate a config document (already JSON-decoded) into a ``RunConfig``."""
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    doc = _section(RunConfig, doc, "config")
    spec = _refnet_spec(doc.get("refnet"))

    data = _section(DataSection, doc.get("data"), "data")
    data = data if isinstance(data, DataSection) else DataSection(**data)
    _check_type("data.seed", data.seed, _INT, nullable=True)
    for key in ("calib_size", "dev_size", "test_size"):
        _check_type(f"data.{key}", getattr(data, key), _INT)
        if getattr(data, key) < 1:
            raise ConfigError(f"data.{key}: must be positive")
    _check_type("data.min_margin", data.min_margin, _NUM)
    if data.min_margin < 0:
        raise ConfigError("data.min_margin: must be >= 0")

    search = _section(SearchSection, doc.get("search"), "search")
    search = search if isinstance(search, SearchSection) else SearchSection(**search)
    for key in ("gamma", "grid_step", "grid_max"):
        _check_type(f"search.{key}", getattr(search, key), _NUM)
    for key in ("act_bits", "weight_bits", "num_bins", "workers"):
        _check_type(f"search.{key}", getattr(search, key), _INT)

    cal = _section(CalibrateSection, doc.get("calibrate"), "calibrate")
    cal = cal if isinstance(cal, CalibrateSection) else CalibrateSection(**cal)
    _check_type("calibrate.p", cal.p, _NUM, nullable=True)

    cmp_ = _section(CompareSection, doc.get("compare"), "compare")
    cmp_ = cmp_ if isinstance(cmp_, CompareSection) else CompareSection(**cmp_)
    _check_type("compare.percentile_p", cmp_.percentile_p, _NUM)

    out = _section(OutputSection, doc.get("output"), "output")
    out = out if isinstance(out, OutputSection) else OutputSection(**out)
    for key in ("report", "cache"):
        if getattr(out, key) is not None and not isinstance(getattr(out, key), str):
            raise ConfigError(f"output.{key}: expected a path string")

    cfg = RunConfig(spec, data, search, cal, cmp_, out)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.search_config()
        qmax(cfg.search.act_bits)
        _method(cfg.calibrate.method, cfg.calibrate.p)
        CalibMethod.percentile(cfg.compare.percentile_p)
    except (ValueError, QuantizationError, CalibrationError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.search.num_bins < 1:
        raise ConfigError("search.num_bins must be positive")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)


def _method(tag: str, p: float | None) -> CalibMethod:
    if tag not in METHOD_TAGS:
        raise ConfigError(f"unknown method {tag!r}")
    if tag in ("percentile", "clipped-mse") and p is None:
        raise ConfigError(f"method {tag} requires --p")
    if tag not in ("percentile", "clipped-mse") and p is not None:
        raise ConfigError(f"method {tag} takes no --p")
    try:
        return CalibMethod(tag, p)
    except CalibrationError as exc:
        raise ConfigError(str(exc)) from None


def _override(cfg: RunConfig, args) -> RunConfig:
    search = cfg.search
    changes = {}
    if getattr(args, "bits", None) is not None:
        changes.update(act_bits=args.bits, weight_bits=args.bits)
    if getattr(args, "gamma", None) is not None:
        changes["gamma"] = args.gamma
    if getattr(args, "grid_step", None) is not None:
        changes["grid_step"] = args.grid_step
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    search = dataclasses.replace(search, **changes)
    spec, data = cfg.refnet, cfg.data
    if getattr(args, "seed", None) is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
        data = dataclasses.replace(data, seed=args.seed)
    cal = cfg.calibrate
    if getattr(args, "method", None) is not None:
        cal = CalibrateSection(args.method, args.p)
    elif getattr(args, "p", None) is not None:
        cal = dataclasses.replace(cal, p=args.p)
    out = cfg.output
    if getattr(args, "report", None) is not None:
        out = dataclasses.replace(out, report=args.report)
    if getattr(args, "out", None) is not None:
        out = dataclasses.replace(out, cache=args.out)
    new = RunConfig(spec, data, search, cal, cfg.compare, out)
    validate(new)
    return new


# -- shared pipeline pieces --------------------------------------------------------------


@dataclass
class Workspace:
    cfg: RunConfig
    model: RefNet
    calib: list
    dev: DevSet
    test: DevSet | None = None


def _workspace(cfg: RunConfig, with_test: bool = False) -> Workspace:
    model = RefNet(cfg.refnet)
    seed = cfg.data_seed
    try:
        calib = [calibration_inputs(model, seed, cfg.data.calib_size)]
        dev = DevSet.generate(model, seed, cfg.data.dev_size, cfg.data.min_margin, split="dev")
        test = DevSet.generate(model, seed, cfg.data.test_size, cfg.data.min_margin, split="test") if with_test else None
    except RefNetError as exc:
        raise DataError(str(exc)) from None
    return Workspace(cfg, model, calib, dev, test)


def _fmt_set(names) -> str:
    return "{" + ", ".join(names) + "}"


def _print_scale_table(rows, out) -> None:
    print(f"{'layer':<16} {'scale':>14} {'bits':>4}  {'method':<12} {'p':>6} {'e_opt':>19}", file=out)
    for name, r in rows:
        p = "-" if r.method.p is None else f"{r.method.p:g}"
        e = "-" if r.error is None else f"{r.error:.12e}"
        print(f"{name:<16} {r.scale:>14.8g} {r.bits:>4}  {r.method.kind:<12} {p:>6} {e:>19}", file=out)


# -- commands ----------------------------------------------------------------------------


def _bits(bits: int) -> int:
    try:
        qmax(bits)
    except QuantizationError as exc:
        raise ConfigError(str(exc)) from None
    return bits


def cmd_calibrate(args, out) -> int:
    method = _method(args.method, args.p)
    bits = _bits(args.bits)
    if args.dumps:
        num_bins = DEFAULT_BINS
        try:
            layers = dataio.list_dumps(args.dumps)
        except dataio.FormatError as exc:
            raise DataError(str(exc)) from None
        results = []
        for name, files in layers.items():
            try:
                h = histogram_from_batches(lambda files=files: dataio.iter_layer(files), num_bins)
                results.append((name, calibrate(h, method, bits)))
            except (dataio.FormatError, HistogramError, CalibrationError, ValueError) as exc:
                raise DataError(f"layer {name}: {exc}") from None
    else:
        cfg = _override(load_config(args.refnet), args)
        model = RefNet(cfg.refnet)
        calib = [calibration_inputs(model, cfg.data_seed, cfg.data.calib_size)]
        profiles = collect_profiles(model, calib, cfg.search.num_bins)
        results = []
        for name, h in profiles.items():
            try:
                results.append((name, calibrate(h, method, bits)))
            except CalibrationError as exc:
                raise DataError(f"layer {name}: {exc}") from None
    cache = dataio.CalibrationCache(tuple(dataio.CacheEntry.from_result(n, r) for n, r in results))
    dataio.write_cache(args.out, cache)
    _print_scale_table(results, out)
    print(f"wrote {len(results)} entries to {args.out}", file=out)
    return EXIT_OK


def _stablequant(ws: Workspace):
    cfg = ws.cfg.search_config()
    evaluator = TokenErrorEvaluator(ws.dev)
    report, quantized = run_stablequant(ws.model, evaluator, ws.calib, cfg)
    return report, quantized, evaluator


def _print_summary(report, out) -> None:
    print(f"S = {_fmt_set(report.clip_set)}", file=out)
    print(f"grid: {len(report.grid)} point(s), p_opt = {report.p_opt:g}", file=out)
    print(f"W{report.weight_bits}A{report.act_bits}  baseline error {report.baseline_error:.4f}  "
          f"final error {report.final_error:.4f}", file=out)


def cmd_stablequant(args, out) -> int:
    cfg = _override(load_config(args.refnet), args)
    ws = _workspace(cfg)
    report, _, evaluator = _stablequant(ws)
    _print_summary(report, out)
    if cfg.output.report:
        dataio.write_report(cfg.output.report, report)
    return EXIT_OK


def compare_methods(cfg: RunConfig) -> dict:
    """Percentile, MSE, Entropy and StableQuant on identical model and data.

    Every pipeline shares the MSE-calibrated weights and is scored on both the
    dev split (used by the search) and the held-out test split; ``final_error``
    is the test-split error.
    """
    ws = _workspace(cfg, with_test=True)
    scfg = cfg.search_config()
    dev_eval, test_eval = TokenErrorEvaluator(ws.dev), TokenErrorEvaluator(ws.test)
    report, quantized, _ = _stablequant(ws)
    profiles = collect_profiles(ws.model, ws.calib, scfg.num_bins)
    weights = calibrate_weights(ws.model, scfg.weight_bits, scfg.weight_method, scfg.num_bins)
    nq = 2 ** (scfg.act_bits - 1)
    # the KL recipe needs at least 2**(b-1) bins; only matters for b > 12
    ent_profiles = profiles if nq <= scfg.num_bins else collect_profiles(ws.model, ws.calib, nq)
    methods = {}
    for name, method, prof in (
        ("percentile", CalibMethod.percentile(cfg.compare.percentile_p), profiles),
        ("mse", CalibMethod.mse(), profiles),
        ("entropy", CalibMethod.entropy(), ent_profiles),
    ):
        dev_err, acts = run_single_method(ws.model, dev_eval, prof, method, scfg, weights)
        test_err, _ = run_single_method(ws.model, test_eval, prof, method, scfg, weights)
        methods[name] = {
            "method": str(method),
            "dev_error": dev_err,
            "test_error": test_err,
            "final_error": test_err,
            "per_layer": {k: dataio.calib_entry(r) for k, r in acts.items()},
        }
    sq_test = test_eval(quantized)
    methods["stablequant"] = {
        "method": "stablequant",
        "dev_error": report.final_error,
        "test_error": sq_test,
        "final_error": sq_test,
        "per_layer": {k: dataio.calib_entry(r) for k, r in report.activations.items()},
    }
    return {
        "schema_version": dataio.REPORT_SCHEMA,
        "kind": "compare",
        "act_bits": scfg.act_bits,
        "weight_bits": scfg.weight_bits,
        "percentile_p": cfg.compare.percentile_p,
        "dev_size": len(ws.dev),
        "test_size": len(ws.test),
        "methods": methods,
        "stablequant": dataio.report_to_dict(report),
    }


def cmd_compare(args, out) -> int:
    cfg = _override(load_config(args.refnet), args)
    doc = compare_methods(cfg)
    sq = doc["stablequant"]
    print(f"S = {_fmt_set(sq['clip_set'])}  p_opt = {sq['p_opt']:g}", file=out)
    print(f"W{doc['weight_bits']}A{doc['act_bits']}", file=out)
    print(f"{'method':<12} {'dev TER':>9} {'test TER':>9}", file=out)
    for name in COMPARE_METHODS:
        m = doc["methods"][name]
        print(f"{name:<12} {m['dev_error']:>9.4f} {m['test_error']:>9.4f}", file=out)
    if cfg.output.report:
        dataio.write_report(cfg.output.report, doc)
    return EXIT_OK


def cmd_eval_dump(args, out) -> int:
    _bits(args.bits)
    try:
        layers = dataio.list_dumps(args.dumps)
        cache = dataio.read_cache(args.cache)
    except dataio.FormatError as exc:
        raise DataError(str(exc)) from None
    except OSError as exc:
        raise DataError(f"cannot read {exc.filename}: {exc.strerror}") from None
    missing = [name for name in layers if name not in cache]
    if missing:
        raise DataError(f"layer {missing[0]} has no entry in cache {args.cache}")
    print(f"{'layer':<16} {'mse':>19} {'hist_err':>19} {'saturated':>10}", file=out)
    for name, files in layers.items():
        params = QuantParams(cache[name].scale, args.bits)
        sq_err, n, sat = 0.0, 0, 0
        try:
            for arr in dataio.iter_layer(files):
                x = as_tensor(arr)
                sq_err += float(np.sum((fake_quantize(x, params) - x) ** 2))
                sat += int(np.count_nonzero(np.abs(x) > params.clip_value))
                n += x.size
            h = histogram_from_batches(lambda files=files: dataio.iter_layer(files))
        except (dataio.FormatError, HistogramError, ValueError) as exc:
            raise DataError(f"layer {name}: {exc}") from None
        mse = sq_err / n if n else 0.0
        herr = histogram_error(h, params.scale, args.bits)
        print(f"{name:<16} {mse:>19.12e} {herr:>19.12e} {sat / max(n, 1):>10.6f}", file=out)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablequant", description="Post-training quantization calibration toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, refnet_required=True):
        if refnet_required:
            p.add_argument("--refnet", required=True, metavar="CFG", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the model and data seed")
        p.add_argument("--workers", type=int, help="parallel evaluations (default 1)")

    p = sub.add_parser("calibrate", help="calibrate every layer with one method and write a cache")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dumps", metavar="DIR", help="activation dump directory (<layer>/<batch>.aqd)")
    src.add_argument("--refnet", metavar="CFG", help="JSON run configuration")
    p.add_argument("--method", required=True, choices=METHOD_TAGS)
    p.add_argument("--p", type=float, help="cut-off percent in [0, 0.5] for percentile/clipped-mse")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--out", required=True, metavar="CACHE", help="calibration cache to write")
    common(p, refnet_required=False)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stablequant", help="run the layer-adaptive search on the reference network")
    common(p)
    p.add_argument("--gamma", type=float, help="stage-1 error-increase threshold")
    p.add_argument("--grid-step", type=float, help="cut-off grid step")
    p.add_argument("--bits", type=int, help="weight and activation bit-width")
    p.add_argument("--report", metavar="OUT", help="JSON report path")
    p.set_defaults(func=cmd_stablequant)

    p = sub.add_parser("compare", help="compare Percentile, MSE, Entropy and StableQuant")
    common(p)
    p.add_argument("--bits", type=int, help="weight and activation bit-width")
    p.add_argument("--report", metavar="OUT", help="JSON report path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval-dump", help="apply cached scales to dumped activations")
    p.add_argument("--dumps", required=True, metavar="DIR")
    p.add_argument("--cache", required=True, metavar="CACHE")
    p.add_argument("--bits", type=int, required=True)
    p.set_defaults(func=cmd_eval_dump)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SearchError as exc:
        print(f"search failed in {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant violation
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
