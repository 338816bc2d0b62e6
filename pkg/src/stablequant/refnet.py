"""Deterministic desk-scale reference network.

A strided 1-D conv feature extractor (GELU, optional per-frame layer norm)
feeds a projection, a stack of single-head attention blocks and a linear
token head. All parameters come from ``numpy.random.Philox`` seeded with
``RefNetSpec.seed`` and drawn in a fixed order, so the same spec yields
bit-identical weights on every platform numpy supports.

Outlier injection: each unnormalised conv layer's channel 0 is a sparse
channel whose offset makes it fire on about 1% of frames. An
``outlier_gains`` entry multiplies that channel's pre-activation (kernel
response plus bias) through a per-channel full-precision gain, turning its
rare firings into large spikes without changing when it fires. The gain is
kept apart from the kernel, the way a norm layer's affine scale would be, so
it never enters weight quantization.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .metrics import decode_greedy, token_error_rate
from .quant import QuantParams, fake_quantize

LN_EPS = 1e-5
SPARSE_FIRE_RATE = 0.01
PROBE_BATCH = 16
DEFAULT_MIN_MARGIN = 0.3
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class RefNetError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    stride: int
    norm: bool = False


DEFAULT_CONVS = (
    ConvSpec(16, 10, 5, norm=False),
    ConvSpec(32, 3, 2, norm=True),
    ConvSpec(32, 3, 2, norm=False),
    ConvSpec(32, 3, 2, norm=True),
)


@dataclass(frozen=True)
class RefNetSpec:
    seed: int = 0
    conv: tuple = DEFAULT_CONVS
    num_blocks: int = 2
    width: int = 32
    vocab: int = 16
    input_length: int = 640
    outlier_gains: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(ConvSpec(**c) if isinstance(c, dict) else c for c in self.conv))
        object.__setattr__(self, "outlier_gains", {str(k): float(v) for k, v in self.outlier_gains.items()})
        if not self.conv:
            raise RefNetError("at least one conv layer is required")
        for c in self.conv:
            if c.channels < 1 or c.kernel < 1 or c.stride < 1:
                raise RefNetError(f"invalid conv layer {c}")
        if self.num_blocks < 0 or self.width < 1 or self.vocab < 2:
            raise RefNetError("invalid block/width/vocab configuration")
        names = {f"conv{i}" for i in range(len(self.conv))}
        for name, gain in self.outlier_gains.items():
            if name not in names:
                raise RefNetError(f"outlier gain for unknown conv layer {name!r}")
            if not gain >= 1.0:
                raise RefNetError(f"outlier gain must be >= 1, got {gain} for {name}")
        if self.num_frames() < 1:
            raise RefNetError("conv stack produces no output frames for input_length")

    def num_frames(self, length: int | None = None) -> int:
        n = self.input_length if length is None else length
        for c in self.conv:
            n = (n - c.kernel) // c.stride + 1
            if n < 1:
                return 0
        return n


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; pure elementwise numpy so results are reproducible
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    # x: (N, L, C_in); w: (C_out, C_in, k) -> (N, L', C_out)
    k = w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride]  # (N, L', C_in, k)
    n, frames = win.shape[:2]
    cols = win.reshape(n * frames, -1)
    return (cols @ w.reshape(w.shape[0], -1).T).reshape(n, frames, -1) + b


class RefNet:
    """Reference network implementing the quantizable-model contract.

    Activation sites (in forward order): ``conv0 .. conv{n-1}`` after each
    conv activation, ``attn0 ..`` after each attention block, ``head`` on
    the logits. Weight tensors are named ``<layer>.<tensor>``.
    """

    def __init__(self, spec: RefNetSpec):
        self.spec = spec
        self._build()
        self._act_q: dict[str, QuantParams] = {}
        self._w_q: dict[str, QuantParams] = {}
        self._w_fq: dict[str, np.ndarray] = {}

    def _build(self) -> None:
        spec = self.spec
        rng = np.random.Generator(np.random.Philox(spec.seed))
        p: dict[str, np.ndarray] = {}
        # fixed probe batch sets each sparse channel's offset so it fires on
        # SPARSE_FIRE_RATE of probe frames
        h = synth_waveforms(_stream(spec.seed, "probe"), PROBE_BATCH, spec.input_length)[:, :, None]
        c_in = 1
        for i, c in enumerate(spec.conv):
            name = f"conv{i}"
            w = rng.standard_normal((c.channels, c_in, c.kernel)) / math.sqrt(c_in * c.kernel)
            b = 0.1 * rng.standard_normal(c.channels)
            if not c.norm:
                pre = _conv1d(h, w[:1], np.zeros(1), c.stride)
                b[0] = -np.quantile(pre, 1.0 - SPARSE_FIRE_RATE)
            gain = np.ones(c.channels)
            gain[0] = spec.outlier_gains.get(name, 1.0)
            p[f"{name}.weight"], p[f"{name}.bias"], p[f"{name}.gain"] = w, b, gain
            h = _conv1d(h, w, b, c.stride) * gain
            h = gelu(layer_norm(h) if c.norm else h)
            c_in = c.channels
        d = spec.width
        p["proj.weight"] = rng.standard_normal((c_in, d)) / math.sqrt(c_in)
        p["proj.bias"] = 0.1 * rng.standard_normal(d)
        for i in range(spec.num_blocks):
            for t in ("wq", "wk", "wv", "wo"):
                p[f"attn{i}.{t}"] = rng.standard_normal((d, d)) / math.sqrt(d)
            p[f"attn{i}.w1"] = rng.standard_normal((d, 2 * d)) / math.sqrt(d)
            p[f"attn{i}.w2"] = rng.standard_normal((2 * d, d)) / math.sqrt(2 * d)
        p["head.weight"] = rng.standard_normal((d, spec.vocab)) / math.sqrt(d)
        p["head.bias"] = 0.1 * rng.standard_normal(spec.vocab)
        for arr in p.values():
            arr.setflags(write=False)
        self.params = p

    # -- quantizable-model contract -------------------------------------------------

    def list_layers(self) -> list[tuple[str, str]]:
        layers = [(f"conv{i}", "conv") for i in range(len(self.spec.conv))]
        layers += [(f"attn{i}", "attention") for i in range(self.spec.num_blocks)]
        layers.append(("head", "linear"))
        return layers

    def list_weights(self) -> list[str]:
        return [k for k in self.params if not k.endswith((".bias", ".gain"))]

    def weight(self, name: str) -> np.ndarray:
        if name not in self.list_weights():
            raise KeyError(name)
        return self.params[name]

    def set_activation_quant(self, layer: str, params: QuantParams | None) -> None:
        if layer not in dict(self.list_layers()):
            raise KeyError(layer)
        if params is None:
            self._act_q.pop(layer, None)
        else:
            self._act_q[layer] = params

    def set_weight_quant(self, name: str, params: QuantParams | None) -> None:
        w = self.weight(name)
        if params is None:
            self._w_q.pop(name, None)
            self._w_fq.pop(name, None)
        else:
            self._w_q[name] = params
            self._w_fq[name] = fake_quantize(w, params)

    def reset(self) -> None:
        self._act_q.clear()
        self._w_q.clear()
        self._w_fq.clear()

    def clone(self) -> RefNet:
        """Copy sharing the read-only weights but with independent quantizers."""
        other = object.__new__(RefNet)
        other.spec = self.spec
        other.params = self.params
        other._act_q = dict(self._act_q)
        other._w_q = dict(self._w_q)
        other._w_fq = dict(self._w_fq)
        return other

    @property
    def activation_quant(self) -> dict[str, QuantParams]:
        return dict(self._act_q)

    @property
    def weight_quant(self) -> dict[str, QuantParams]:
        return dict(self._w_q)

    # -- forward ----------------------------------------------------------------------

    def _w(self, name: str) -> np.ndarray:
        return self._w_fq.get(name, self.params[name])

    def _site(self, name: str, x: np.ndarray, taps) -> np.ndarray:
        if taps is not None:
            taps[name] = x
        q = self._act_q.get(name)
        return x if q is None else fake_quantize(x, q)

    def forward(self, x, taps: dict | None = None) -> np.ndarray:
        """Logits for a batch ``(N, T)`` or single ``(T,)`` waveform.

        Returns ``(N, frames, vocab)`` (or ``(frames, vocab)``). When ``taps``
        is a dict it receives every site's pre-quantization activation.
        """
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None]
        if arr.ndim != 2:
            raise RefNetError(f"expected (N, T) or (T,) input, got shape {arr.shape}")
        if self.spec.num_frames(arr.shape[1]) < 1:
            raise RefNetError(f"input length {arr.shape[1]} too short for the conv stack")
        h = arr[:, :, None]
        for i, c in enumerate(self.spec.conv):
            name = f"conv{i}"
            h = _conv1d(h, self._w(f"{name}.weight"), self.params[f"{name}.bias"], c.stride) * self.params[f"{name}.gain"]
            if c.norm:
                h = layer_norm(h)
            h = self._site(name, gelu(h), taps)
        h = layer_norm(h) @ self._w("proj.weight") + self.params["proj.bias"]
        scale = 1.0 / math.sqrt(self.spec.width)
        for i in range(self.spec.num_blocks):
            name = f"attn{i}"
            z = layer_norm(h)
            q, k, v = (z @ self._w(f"{name}.{t}") for t in ("wq", "wk", "wv"))
            att = softmax(q @ k.transpose(0, 2, 1) * scale) @ v
            h = h + att @ self._w(f"{name}.wo")
            h = h + gelu(layer_norm(h) @ self._w(f"{name}.w1")) @ self._w(f"{name}.w2")
            h = self._site(name, h, taps)
        logits = layer_norm(h) @ self._w("head.weight") + self.params["head.bias"]
        logits = self._site("head", logits, taps)
        return logits[0] if single else logits

    def decode(self, x) -> list[list[int]]:
        logits = self.forward(np.atleast_2d(x))
        return [decode_greedy(row) for row in logits]


def build_refnet(spec: RefNetSpec) -> RefNet:
    return RefNet(spec)


# -- data ---------------------------------------------------------------------------------


_STREAMS = {"probe": 1, "dev": 2, "test": 3, "calib": 4}


def _stream(seed: int, tag: str, block: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([_STREAMS[tag], int(seed), int(block)])


def synth_waveforms(seed, count: int, length: int) -> np.ndarray:
    """Waveform-like signals: piecewise tone mixtures with noise and envelopes.

    ``seed`` is anything ``numpy.random.Philox`` accepts (int or SeedSequence).
    """
    rng = np.random.Generator(np.random.Philox(seed))
    t = np.arange(length)
    out = np.empty((count, length))
    for n in range(count):
        sig = np.zeros(length)
        pos = 0
        while pos < length:
            seg = int(rng.integers(40, 121))
            end = min(length, pos + seg)
            freqs = rng.uniform(0.01, 0.45, size=3)
            amps = rng.uniform(0.2, 1.0, size=3)
            phases = rng.uniform(0, 2 * np.pi, size=3)
            tt = t[pos:end, None]
            tone = (amps * np.sin(2 * np.pi * freqs * tt + phases)).sum(axis=1)
            env = np.hanning(end - pos + 2)[1:-1]
            sig[pos:end] = tone * (0.3 + 0.7 * env)
            pos = end
        out[n] = sig + 0.05 * rng.standard_normal(length)
    return out


def frame_margins(logits: np.ndarray) -> np.ndarray:
    """Top-1 minus top-2 logit per frame, relative to the frame's logit spread."""
    top2 = np.sort(logits, axis=-1)[..., -2:]
    return (top2[..., 1] - top2[..., 0]) / logits.std(axis=-1)


@dataclass(frozen=True, eq=False)
class DevSet:
    """Inputs plus teacher references decoded by the full-precision network.

    Only frames whose relative top-1/top-2 margin is at least ``min_margin``
    are scored (``masks``), so measured disagreement comes from quantization
    rather than from near-ties the teacher itself barely resolves. Utterances
    without a single confident frame are skipped at generation time.
    """

    seed: int
    inputs: np.ndarray
    masks: np.ndarray
    references: tuple
    split: str = "dev"

    @classmethod
    def generate(cls, model: RefNet, seed: int, size: int, min_margin: float = DEFAULT_MIN_MARGIN,
                 split: str = "dev") -> DevSet:
        if size < 1:
            raise RefNetError("dataset size must be positive")
        if split not in ("dev", "test"):
            raise RefNetError(f"unknown split {split!r}")
        length = model.spec.input_length
        waves, masks, refs = [], [], []
        block = 0
        while len(refs) < size:
            if block >= 64:
                raise RefNetError(f"could not find {size} utterances with a frame margin >= {min_margin}")
            wave = synth_waveforms(_stream(seed, split, block), size, length)
            block += 1
            logits = _clean_forward(model, wave)
            confident = frame_margins(logits) >= min_margin
            tokens = logits.argmax(axis=-1)
            for w, keep, tok in zip(wave, confident, tokens):
                if keep.any() and len(refs) < size:
                    waves.append(w)
                    masks.append(keep)
                    refs.append(tuple(tok[keep].tolist()))
        inputs, masks = np.stack(waves), np.stack(masks)
        inputs.setflags(write=False)
        masks.setflags(write=False)
        return cls(seed, inputs, masks, tuple(refs), split)

    def __len__(self) -> int:
        return len(self.references)


def _clean_forward(model: RefNet, x: np.ndarray) -> np.ndarray:
    clean = model.clone()
    clean.reset()
    return clean.forward(x)


def calibration_inputs(model: RefNet, seed: int, size: int) -> np.ndarray:
    """Unlabelled calibration waveforms (their own stream, disjoint from dev/test)."""
    return synth_waveforms(_stream(seed, "calib"), size, model.spec.input_length)


def evaluate(model, devset: DevSet) -> float:
    """Mean token error rate of greedy decodes on the scored frames."""
    logits = model.forward(devset.inputs)
    rates = [
        token_error_rate(ref, [t for t, keep in zip(decode_greedy(lg), mask) if keep])
        for ref, lg, mask in zip(devset.references, logits, devset.masks)
    ]
    return float(np.mean(rates))


class TokenErrorEvaluator:
    """Callable evaluator ``G(model)`` over a fixed dataset.

    Thread-safe; ``calls`` counts evaluations.
    """

    def __init__(self, devset: DevSet):
        self.devset = devset
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, model) -> float:
        with self._lock:
            self.calls += 1
        return evaluate(model, self.devset)
