import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stablequant.calibrators import CalibMethod, CalibResult
from stablequant.dataio import (
    ActivationDump,
    CacheEntry,
    CalibrationCache,
    FormatError,
    decode_dump,
    dumps_json,
    encode_dump,
    list_dumps,
    parse_cache,
    read_cache,
    read_dump,
    read_report,
    report_from_dict,
    report_to_dict,
    save_dump,
    scale_to_hex,
    serialize_cache,
    write_cache,
    write_dump,
    write_report,
)
from stablequant.search import SearchReport

names = st.text(st.characters(blacklist_characters="\t\r\n", blacklist_categories=("Cs",)), min_size=1, max_size=12)
pos_floats = st.floats(min_value=5e-324, max_value=1e308, allow_nan=False, allow_infinity=False)


def test_scalar_and_matrix_roundtrip(tmp_path):
    for arr in (np.array(3.25, dtype=np.float32), np.arange(6, dtype=np.float32).reshape(2, 3)):
        path = tmp_path / "x.aqd"
        write_dump(path, ActivationDump("l", arr))
        back = read_dump(path, "l")
        assert back == ActivationDump("l", arr)
        assert back.data.tobytes() == arr.tobytes()


def test_wire_layout():
    buf = encode_dump(np.array([[1.0, 2.0]], dtype=np.float32))
    assert buf[:4] == b"AQD1"
    assert struct.unpack("<I", buf[4:8]) == (2,)
    assert struct.unpack("<2Q", buf[8:24]) == (1, 2)
    assert buf[24] == 0
    assert buf[25:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_dump_errors():
    good = encode_dump(np.ones(3, dtype=np.float32))
    with pytest.raises(FormatError, match="bad magic"):
        decode_dump(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="truncated"):
        decode_dump(good[:-1])
    with pytest.raises(FormatError, match="truncated"):
        decode_dump(good[:10])
    nan = good[:-4] + np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(FormatError, match="non-finite payload"):
        decode_dump(nan)
    with pytest.raises(FormatError, match="non-finite payload"):
        encode_dump(np.array([1e300]))
    with pytest.raises(FormatError, match="dtype"):
        decode_dump(good[:8 + 8] + b"\x07" + good[17:])


def test_directory_layout(tmp_path):
    save_dump(tmp_path, "b", 10, np.ones(2))
    save_dump(tmp_path, "b", 2, np.zeros(2))
    save_dump(tmp_path, "a", 0, np.ones(1))
    layers = list_dumps(tmp_path)
    assert list(layers) == ["a", "b"]
    assert [f.name for f in layers["b"]] == ["2.aqd", "10.aqd"]
    with pytest.raises(FormatError):
        save_dump(tmp_path, "../x", 0, np.ones(1))


def test_cache_examples(tmp_path):
    cache = CalibrationCache((CacheEntry("conv0", 1.0, 8, "mse"), CacheEntry("attn0", 0.1, 6, "clipped-mse", 0.2)))
    text = serialize_cache(cache)
    assert text.splitlines()[0] == "PTQCALIB v1"
    assert text.splitlines()[1] == "conv0\t3ff0000000000000\t8\tmse\t-"
    path = tmp_path / "c.cache"
    write_cache(path, cache)
    assert read_cache(path) == cache
    assert serialize_cache(read_cache(path)).encode() == path.read_bytes()


def test_cache_errors():
    head = "PTQCALIB v1\n"
    with pytest.raises(FormatError, match="line 1"):
        parse_cache("PTQCALIB v2\n")
    with pytest.raises(FormatError, match="line 2"):
        parse_cache(head + "a\t3ff0000000000000\t8\tmse\n")
    with pytest.raises(FormatError, match="line 3: duplicate"):
        parse_cache(head + "a\t3ff0000000000000\t8\tmse\t-\na\t3ff0000000000000\t8\tmse\t-\n")
    with pytest.raises(FormatError, match="line 2"):
        parse_cache(head + "a\t3FF0000000000000\t8\tmse\t-\n")
    with pytest.raises(FormatError, match="line 2"):
        parse_cache(head + "a\t3ff0000000000000\t8\tpercentile\t-\n")
    with pytest.raises(FormatError, match="line 2"):
        parse_cache(head + "a\t0000000000000000\t8\tmse\t-\n")
    with pytest.raises(FormatError, match="duplicate"):
        CalibrationCache((CacheEntry("a", 1.0, 8, "mse"), CacheEntry("a", 2.0, 8, "mse")))


def _report(clip_set, scales, p_opt=0.0, grid=(0.0,), scores=(0.0,)):
    acts = {f"l{i}": CalibResult(s, CalibMethod.mse(), 8, -1) for i, s in enumerate(scales)}
    return SearchReport(list(clip_set), list(grid), list(scores), p_opt, acts, {}, 0.0, float(min(scores)), 8, 8, 0.25,
                        {k: 0.0 for k in acts})


def test_report_fields(tmp_path):
    rep = _report([], [0.5])
    doc = report_to_dict(rep)
    for key in ("baseline_error", "clip_set", "grid", "scores", "p_opt", "per_layer", "final_error", "schema_version"):
        assert key in doc
    assert doc["clip_set"] == []
    assert set(doc["per_layer"]["l0"]) >= {"scale", "bits", "method"}
    path = tmp_path / "r.json"
    write_report(path, rep)
    back = read_report(path)
    assert report_to_dict(back) == doc
    assert len(back.scores) == len(back.grid)
    with pytest.raises(FormatError):
        report_from_dict({**doc, "schema_version": 99})


dumps_st = st.builds(
    lambda shape, seed: np.random.default_rng(seed).standard_normal(shape).astype(np.float32),
    st.lists(st.integers(0, 4), max_size=3).map(tuple),
    st.integers(0, 2**32 - 1),
)


@settings(max_examples=200, deadline=None)
@given(dumps_st)
def test_dump_property(arr):
    buf = encode_dump(arr)
    back = decode_dump(buf)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
    assert encode_dump(back) == buf


cache_st = st.lists(
    st.tuples(names, pos_floats, st.integers(2, 16), st.sampled_from(["max", "mse", "entropy", "percentile", "clipped-mse"]),
              st.floats(0, 0.5)),
    max_size=8,
    unique_by=lambda t: t[0],
).map(lambda rows: CalibrationCache(tuple(
    CacheEntry(n, s, b, m, p if m in ("percentile", "clipped-mse") else None) for n, s, b, m, p in rows)))


@settings(max_examples=200, deadline=None)
@given(cache_st)
def test_cache_property(cache):
    text = serialize_cache(cache)
    back = parse_cache(text)
    assert back == cache
    assert [scale_to_hex(e.scale) for e in back.entries] == [scale_to_hex(e.scale) for e in cache.entries]
    assert serialize_cache(back) == text


@settings(max_examples=100, deadline=None)
@given(st.lists(pos_floats, min_size=1, max_size=5), st.lists(st.floats(0, 100), min_size=1, max_size=6))
def test_report_property(scales, scores):
    rep = _report(["l0"], scales, grid=[i / 100 for i in range(len(scores))], scores=scores)
    text = dumps_json(report_to_dict(rep))
    again = dumps_json(report_to_dict(report_from_dict(json.loads(text))))
    assert again == text
