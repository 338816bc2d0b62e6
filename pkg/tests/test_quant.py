import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fake_quant_scalar, quantize_scalar
from stablequant.quant import (
    QTensor,
    QuantizationError,
    QuantParams,
    as_tensor,
    dequantize_value,
    fake_quantize,
    qmax,
    quantize,
    quantize_value,
    quantize_weights,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
scales = st.floats(1e-4, 1e3, allow_nan=False)
bits = st.integers(2, 16)


def test_qmax_table():
    assert [qmax(b) for b in (2, 4, 8, 16)] == [1, 7, 127, 32767]
    for b in (1, 17, 0):
        with pytest.raises(QuantizationError):
            qmax(b)


def test_params_validation():
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(QuantizationError):
            QuantParams(bad)
    with pytest.raises(QuantizationError):
        QuantParams(1.0, zero_point=3)
    assert QuantParams(0.5, 4).clip_value == 3.5


def test_half_to_even_and_saturation():
    p = QuantParams(1.0, 8)
    assert [quantize_value(v, p) for v in (0.5, 1.5, 2.5, -0.5, -1.5)] == [0, 2, 2, 0, -2]
    assert quantize_value(1e9, p) == 127
    assert quantize_value(-1e9, p) == -127
    assert dequantize_value(-127, p) == -127.0


def test_quantize_array_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(2000) * 40
    for b in (3, 6, 8):
        p = QuantParams(0.37, b)
        expect = [quantize_scalar(v, 0.37, b) for v in x]
        assert quantize(x, p).tolist() == expect
        assert np.array_equal(fake_quantize(x, p), [fake_quant_scalar(v, 0.37, b) for v in x])


def test_non_finite_rejected():
    with pytest.raises(QuantizationError, match="non-finite"):
        as_tensor([1.0, np.nan])
    with pytest.raises(QuantizationError):
        quantize_value(math.inf, QuantParams(1.0))


def test_qtensor_range_check():
    p = QuantParams(1.0, 4)
    QTensor(np.array([7, -7]), p)
    with pytest.raises(QuantizationError, match="out of range"):
        QTensor(np.array([8]), p)


def test_quantize_weights_roundtrip_shape():
    w = np.random.default_rng(1).standard_normal((4, 5))
    qt, params = quantize_weights(w, bits=8)
    assert qt.shape == (4, 5)
    assert np.max(np.abs(qt.dequantize() - w)) <= params.scale * 0.5 + 1e-12 or np.abs(w).max() > params.clip_value


def test_all_zero_weights_degenerate():
    qt, params = quantize_weights(np.zeros(6))
    assert params.scale == 1.0 and qt.degenerate
    assert not qt.data.any()


@settings(max_examples=300, deadline=None)
@given(finite, scales, bits)
def test_fake_quant_idempotent(x, s, b):
    p = QuantParams(s, b)
    y = fake_quantize(np.array([x]), p)
    assert np.array_equal(fake_quantize(y, p), y)


@settings(max_examples=300, deadline=None)
@given(finite, scales, bits)
def test_bounded_error_inside_range(x, s, b):
    p = QuantParams(s, b)
    err = abs(fake_quantize(np.array([x]), p)[0] - x)
    if abs(x) <= p.clip_value:
        assert err <= s / 2 * (1 + 1e-12)
    else:
        assert abs(fake_quantize(np.array([x]), p)[0]) == pytest.approx(p.clip_value)


@settings(max_examples=300, deadline=None)
@given(finite, finite, scales, bits)
def test_monotone(x, y, s, b):
    p = QuantParams(s, b)
    lo, hi = sorted((x, y))
    assert quantize_value(lo, p) <= quantize_value(hi, p)


@settings(max_examples=300, deadline=None)
@given(st.integers(-32767, 32767), scales, bits)
def test_integer_roundtrip(q, s, b):
    p = QuantParams(s, b)
    q = max(-p.qmax, min(p.qmax, q))
    assert quantize_value(dequantize_value(q, p), p) == q


@settings(max_examples=200, deadline=None)
@given(finite, scales, bits)
def test_odd_symmetry(x, s, b):
    p = QuantParams(s, b)
    assert quantize_value(-x, p) == -quantize_value(x, p)
