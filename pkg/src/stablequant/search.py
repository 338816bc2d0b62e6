"""Layer-adaptive activation calibration search.

Stage 1 probes each activation site alone with a max-style scale and keeps
the sites whose error increase exceeds ``gamma`` (the clip set). Stage 2
sweeps one global cut-off percent over the clip set, calibrating those sites
with clipped MSE and every other site with plain MSE, and keeps the cut-off
with the lowest error. Weights are MSE-calibrated once and held fixed.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

import numpy as np

from .calibrators import CalibMethod, CalibResult, calibrate, scale_calibration
from .histogram import DEFAULT_BINS, MAX_CLIP_PERCENT, ActivationHistogram, HistogramCollector, histogram_of
from .quant import QuantParams, qmax

log = logging.getLogger(__name__)


class SearchError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


class QuantizableModel(Protocol):
    def list_layers(self) -> list[tuple[str, str]]: ...
    def list_weights(self) -> list[str]: ...
    def weight(self, name: str) -> np.ndarray: ...
    def set_activation_quant(self, layer: str, params: QuantParams | None) -> None: ...
    def set_weight_quant(self, name: str, params: QuantParams | None) -> None: ...
    def forward(self, x, taps: dict | None = None) -> np.ndarray: ...
    def reset(self) -> None: ...
    def clone(self) -> QuantizableModel: ...


Evaluator = Callable[[QuantizableModel], float]


def default_grid(step: float = 0.01, stop: float = MAX_CLIP_PERCENT) -> tuple[float, ...]:
    """Cut-off percents ``0, step, ..., stop`` (rounded to kill float drift)."""
    if not step > 0:
        raise ValueError("grid step must be positive")
    n = int(np.floor(stop / step + 1e-9))
    return tuple(round(k * step, 10) for k in range(n + 1))


@dataclass(frozen=True)
class SearchConfig:
    gamma: float = 0.25
    grid: tuple = field(default_factory=default_grid)
    act_bits: int = 8
    weight_bits: int = 8
    probe_p: float = 0.0
    probe_m: int = 0
    weight_method: CalibMethod = field(default_factory=CalibMethod.mse)
    num_bins: int = DEFAULT_BINS
    workers: int = 1

    def __post_init__(self):
        grid = tuple(float(p) for p in self.grid)
        object.__setattr__(self, "grid", grid)
        if not grid:
            raise ValueError("grid must be non-empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("grid must be strictly increasing")
        if grid[0] < 0 or grid[-1] > MAX_CLIP_PERCENT:
            raise ValueError(f"grid must lie within [0, {MAX_CLIP_PERCENT}]")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        qmax(self.act_bits)
        qmax(self.weight_bits)
        if self.probe_m not in (0, 1) or not (0 <= self.probe_p <= MAX_CLIP_PERCENT):
            raise ValueError("invalid stage-1 probe method")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(eq=False)
class SearchReport:
    clip_set: list[str]
    grid: list[float]
    scores: list[float]
    p_opt: float
    activations: dict[str, CalibResult]
    weights: dict[str, CalibResult]
    baseline_error: float
    final_error: float
    act_bits: int
    weight_bits: int
    gamma: float
    deltas: dict[str, float] = field(default_factory=dict)

    @property
    def degradation(self) -> float:
        return self.final_error - self.baseline_error


def _pmap(fn, items, workers: int) -> list:
    # results always come back in input order
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fp_clone(model: QuantizableModel) -> QuantizableModel:
    m = model.clone()
    m.reset()
    return m


def collect_profiles(model: QuantizableModel, data: Iterable, num_bins: int = DEFAULT_BINS) -> dict[str, ActivationHistogram]:
    """Per-site ``|activation|`` histograms from full-precision forwards.

    Two passes: the first finds each site's global amax, the second bins with
    ``bin_width = amax / num_bins``. The result is therefore the same however
    the calibration data is split into batches.
    """
    batches = [np.asarray(b, dtype=np.float64) for b in data]
    if not batches or all(b.size == 0 for b in batches):
        raise ValueError("empty calibration dataset")
    fp = _fp_clone(model)
    layers = [name for name, _ in fp.list_layers()]
    amax = dict.fromkeys(layers, 0.0)
    for b in batches:
        taps: dict = {}
        fp.forward(b, taps=taps)
        for name in layers:
            amax[name] = max(amax[name], float(np.abs(taps[name]).max()))
    collectors = {
        name: HistogramCollector(num_bins, amax[name] / num_bins if amax[name] > 0 else None) for name in layers
    }
    for b in batches:
        taps = {}
        fp.forward(b, taps=taps)
        for name in layers:
            collectors[name].observe(taps[name])
    return {name: c.finalize() for name, c in collectors.items()}


def calibrate_weights(model: QuantizableModel, bits: int, method: CalibMethod | None = None,
                      num_bins: int = DEFAULT_BINS) -> dict[str, CalibResult]:
    method = method or CalibMethod.mse()
    return {name: calibrate(histogram_of(model.weight(name), num_bins), method, bits) for name in model.list_weights()}


def configure(model: QuantizableModel, activations: dict[str, QuantParams],
              weights: dict[str, QuantParams] | None = None) -> QuantizableModel:
    """Full-precision clone of ``model`` with the given quantizers attached."""
    m = _fp_clone(model)
    for name, params in (weights or {}).items():
        m.set_weight_quant(name, params)
    for name, params in activations.items():
        m.set_activation_quant(name, params)
    return m


def select_layers(model: QuantizableModel, evaluator: Evaluator, profiles: dict[str, ActivationHistogram],
                  config: SearchConfig, baseline: float | None = None) -> tuple[list[str], dict[str, float], float]:
    """Stage 1. Returns ``(clip_set, deltas, baseline)`` with ``clip_set`` in layer order.

    Costs one evaluation for the baseline (skipped when given) plus one per layer.
    """
    layers = [name for name, _ in model.list_layers()]
    if baseline is None:
        baseline = evaluator(_fp_clone(model))

    def probe(name: str) -> float:
        res = scale_calibration(profiles[name], config.probe_p, config.probe_m, config.act_bits)
        return evaluator(configure(model, {name: res.params})) - baseline

    deltas = dict(zip(layers, _pmap(probe, layers, config.workers)))
    clip_set = [name for name in layers if deltas[name] > config.gamma]
    log.info("stage 1: baseline %.4f, clip set %s", baseline, clip_set)
    return clip_set, deltas, baseline


def stage2_activations(profiles: dict[str, ActivationHistogram], clip_set, p: float, bits: int,
                       unclipped: dict[str, CalibResult] | None = None) -> dict[str, CalibResult]:
    """Activation calibration for one grid point: clipped MSE on the clip set, MSE elsewhere.

    ``unclipped`` may carry precomputed MSE results for the sites outside the clip set.
    """
    out = {}
    for name, h in profiles.items():
        if name in clip_set:
            out[name] = calibrate(h, CalibMethod.clipped_mse(p), bits)
        elif unclipped is not None:
            out[name] = unclipped[name]
        else:
            out[name] = calibrate(h, CalibMethod.mse(), bits)
    return out


def _params(results: dict[str, CalibResult]) -> dict[str, QuantParams]:
    return {k: r.params for k, r in results.items()}


def grid_search(model: QuantizableModel, evaluator: Evaluator, profiles: dict[str, ActivationHistogram],
                clip_set, config: SearchConfig,
                weights: dict[str, CalibResult] | None = None) -> tuple[float, list[float], list[float]]:
    """Stage 2. Returns ``(p_opt, evaluated_grid, scores)``.

    An empty clip set makes every grid point identical, so only ``p = 0`` is
    evaluated. Ties go to the smallest cut-off.
    """
    if weights is None:
        weights = calibrate_weights(model, config.weight_bits, config.weight_method, config.num_bins)
    wparams = _params(weights)
    grid = list(config.grid) if clip_set else [0.0]
    unclipped = {name: calibrate(h, CalibMethod.mse(), config.act_bits)
                 for name, h in profiles.items() if name not in clip_set}

    def score(p: float) -> float:
        acts = stage2_activations(profiles, clip_set, p, config.act_bits, unclipped)
        return evaluator(configure(model, _params(acts), wparams))

    scores = _pmap(score, grid, config.workers)
    best = int(np.argmin(scores))
    log.info("stage 2: p_opt %.2f error %.4f", grid[best], scores[best])
    return grid[best], grid, scores


def run_stablequant(model: QuantizableModel, evaluator: Evaluator, calib_data: Iterable,
                    config: SearchConfig) -> tuple[SearchReport, QuantizableModel]:
    """Full procedure; returns the report and the quantized model clone."""

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise SearchError(name, exc) from exc

    profiles = stage("collect_profiles", collect_profiles, model, calib_data, config.num_bins)
    clip_set, deltas, baseline = stage("select_layers", select_layers, model, evaluator, profiles, config)
    weights = stage("calibrate_weights", calibrate_weights, model, config.weight_bits, config.weight_method,
                    config.num_bins)
    p_opt, grid, scores = stage("grid_search", grid_search, model, evaluator, profiles, clip_set, config, weights)
    acts = stage2_activations(profiles, clip_set, p_opt, config.act_bits)
    quantized = configure(model, _params(acts), _params(weights))
    final = stage("final_evaluation", evaluator, quantized)
    if final != min(scores):
        raise SearchError("final_evaluation",
                          AssertionError(f"re-evaluated error {final!r} differs from min score {min(scores)!r}"))
    report = SearchReport(
        clip_set=clip_set,
        grid=grid,
        scores=scores,
        p_opt=p_opt,
        activations=acts,
        weights=weights,
        baseline_error=baseline,
        final_error=final,
        act_bits=config.act_bits,
        weight_bits=config.weight_bits,
        gamma=config.gamma,
        deltas=deltas,
    )
    return report, quantized


def run_single_method(model: QuantizableModel, evaluator: Evaluator, profiles: dict[str, ActivationHistogram],
                      method: CalibMethod, config: SearchConfig,
                      weights: dict[str, CalibResult] | None = None) -> tuple[float, dict[str, CalibResult]]:
    """Baseline pipeline: one calibrator for every activation site, MSE weights."""
    if weights is None:
        weights = calibrate_weights(model, config.weight_bits, config.weight_method, config.num_bins)
    acts = {name: calibrate(h, method, config.act_bits) for name, h in profiles.items()}
    return evaluator(configure(model, _params(acts), _params(weights))), acts
