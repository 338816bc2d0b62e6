import numpy as np
import pytest

from stablequant.calibrators import CalibMethod, calibrate
from stablequant.histogram import ActivationHistogram
from stablequant.quant import QuantParams
from stablequant.refnet import DevSet, RefNet, RefNetSpec, TokenErrorEvaluator, calibration_inputs
from stablequant.search import (
    SearchConfig,
    SearchError,
    collect_profiles,
    default_grid,
    grid_search,
    run_stablequant,
    select_layers,
    stage2_activations,
)


class ToyModel:
    """Three identity sites; the evaluator reads the attached scales directly."""

    layers = [("a", "conv"), ("b", "conv"), ("c", "linear")]

    def __init__(self):
        self.acts: dict = {}
        self.wq: dict = {}

    def list_layers(self):
        return list(self.layers)

    def list_weights(self):
        return ["c.weight"]

    def weight(self, name):
        return np.linspace(-1, 1, 64)

    def set_activation_quant(self, layer, params):
        self.acts[layer] = params

    def set_weight_quant(self, name, params):
        self.wq[name] = params

    def forward(self, x, taps=None):
        x = np.asarray(x, dtype=np.float64)
        if taps is not None:
            taps["a"] = x * 10  # heavy-tailed after scaling
            taps["b"] = x
            taps["c"] = x * 0.5
        return x

    def reset(self):
        self.acts.clear()
        self.wq.clear()

    def clone(self):
        m = ToyModel()
        m.acts, m.wq = dict(self.acts), dict(self.wq)
        return m


def toy_data(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(4000)
    x[:4] *= 40
    return [x[:2000], x[2000:]]


class ToyEvaluator:
    """Error grows with the clip value of site ``a`` (so clipping ``a`` helps)."""

    def __init__(self):
        self.calls = 0

    def __call__(self, model):
        self.calls += 1
        q = model.acts.get("a")
        return 0.0 if q is None else float(q.clip_value)


def test_default_grid():
    g = default_grid()
    assert len(g) == 51 and g[0] == 0.0 and g[-1] == 0.5 and g[20] == 0.2
    assert default_grid(0.1) == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@pytest.mark.parametrize("kw", [{"gamma": -1}, {"grid": ()}, {"grid": (0.2, 0.1)}, {"grid": (0.0, 0.6)},
                                {"act_bits": 1}, {"workers": 0}, {"probe_m": 2}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SearchConfig(**kw)


def test_toy_stage1_and_counts():
    m, ev = ToyModel(), ToyEvaluator()
    prof = collect_profiles(m, toy_data())
    clip_set, deltas, base = select_layers(m, ev, prof, SearchConfig(gamma=1.0))
    assert clip_set == ["a"]
    assert base == 0.0 and deltas["b"] == 0.0
    assert ev.calls == 4  # baseline + one probe per site
    assert m.acts == {}  # probing never touches the caller's model


def test_toy_grid_prefers_more_clipping_and_ties_smallest():
    m = ToyModel()
    prof = collect_profiles(m, toy_data())
    ev = ToyEvaluator()
    cfg = SearchConfig(grid=(0.0, 0.1, 0.3))
    p_opt, grid, scores = grid_search(m, ev, prof, ["a"], cfg)
    assert ev.calls == 3 and grid == [0.0, 0.1, 0.3]
    assert scores == sorted(scores, reverse=True)
    assert p_opt == grid[int(np.argmin(scores))]

    flat = lambda model: 1.0  # noqa: E731
    assert grid_search(m, flat, prof, ["a"], cfg)[0] == 0.0


def test_empty_clip_set_single_evaluation():
    m, ev = ToyModel(), ToyEvaluator()
    prof = collect_profiles(m, toy_data())
    p_opt, grid, scores = grid_search(m, ev, prof, [], SearchConfig())
    assert (p_opt, grid, ev.calls) == (0.0, [0.0], 1)


def test_stage2_method_assignment():
    prof = {"a": ActivationHistogram(1.0, [90, 5, 3, 1, 1]), "b": ActivationHistogram(1.0, [5, 5])}
    acts = stage2_activations(prof, ["a"], 0.2, 8)
    assert acts["a"].method == CalibMethod.clipped_mse(0.2)
    assert acts["b"].method == CalibMethod.mse()
    assert acts["a"].scale == calibrate(prof["a"], CalibMethod.clipped_mse(0.2), 8).scale


def test_profiles_independent_of_batching():
    m = ToyModel()
    x = np.concatenate(toy_data())
    a = collect_profiles(m, [x])
    b = collect_profiles(m, np.array_split(x, 5))
    assert all(a[k] == b[k] for k in a)
    with pytest.raises(ValueError):
        collect_profiles(m, [])


def test_errors_carry_stage():
    def boom(model):
        raise RuntimeError("evaluator down")

    with pytest.raises(SearchError) as info:
        run_stablequant(ToyModel(), boom, toy_data(), SearchConfig())
    assert info.value.stage == "select_layers"


def test_toy_full_run_accounting():
    m, ev = ToyModel(), ToyEvaluator()
    cfg = SearchConfig(gamma=1.0, grid=(0.0, 0.2, 0.4))
    rep, q = run_stablequant(m, ev, toy_data(), cfg)
    assert ev.calls == (len(m.layers) + 1) + 3 + 1
    assert rep.final_error == min(rep.scores)
    assert q.acts["a"] == QuantParams(rep.activations["a"].scale, 8)


@pytest.fixture(scope="module")
def rigged():
    m = RefNet(RefNetSpec(seed=0, outlier_gains={"conv0": 50, "conv2": 50}))
    return m, DevSet.generate(m, 0, 64), [calibration_inputs(m, 0, 32)]


def test_rigged_grid_two_points_prefers_clipping(rigged):
    m, dev, calib = rigged
    rep, _ = run_stablequant(m, TokenErrorEvaluator(dev), calib, SearchConfig(grid=(0.0, 0.1)))
    assert rep.clip_set == ["conv0", "conv2"]
    assert rep.p_opt == 0.1
    assert rep.scores[1] < rep.scores[0]


def test_parallel_matches_serial(rigged):
    m, dev, calib = rigged
    cfg = SearchConfig(grid=(0.0, 0.05, 0.1))
    a, _ = run_stablequant(m, TokenErrorEvaluator(dev), calib, cfg)
    b, _ = run_stablequant(m, TokenErrorEvaluator(dev), calib, SearchConfig(grid=cfg.grid, workers=4))
    assert a.scores == b.scores and a.deltas == b.deltas and a.final_error == b.final_error


def test_drifting_evaluator_trips_final_check():
    class Drift:
        calls = 0

        def __call__(self, model):
            self.calls += 1
            return float(self.calls)

    with pytest.raises(SearchError) as info:
        run_stablequant(ToyModel(), Drift(), toy_data(), SearchConfig(grid=(0.0, 0.1)))
    assert info.value.stage == "final_evaluation"
