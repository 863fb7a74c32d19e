"""Streaming temporal-aggregation kernels with carried recurrent state.

Four adapter kinds share a down-project / core / up-project / residual
layout over sequences shaped ``[n_t, d]`` (one tubelet; callers fold any
patch dimensions into the batch):

* ``vanilla``   - pointwise GELU, no temporal mixing
* ``st_conv``   - masked (causal) temporal convolution
* ``qrnn``      - two causal convolutions feeding gated fo-pooling
* ``retention`` - decayed linear attention with equivalent parallel and
  recurrent forms

Each temporal kind carries a small fixed-size ``StreamState`` so that a
sequence processed in chunks produces outputs identical to a single pass,
at constant per-frame cost. Up-projections are zero-initialized, so a
freshly initialized adapter is exactly the identity.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError

KINDS = ("vanilla", "st_conv", "qrnn", "retention")

DEFAULT_GAMMA = 0.96875
DEFAULT_FORGET_BIAS = -5.0
# parallel retention on float32 inputs refuses sequences longer than this
SINGLE_PRECISION_CAP = 512


# -- op counting --------------------------------------------------------------


class OpCounter:
    """Counts multiply-accumulates performed by kernel primitives."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_OP_COUNTER: OpCounter | None = None


def set_op_counter(counter: OpCounter | None) -> None:
    global _OP_COUNTER
    _OP_COUNTER = counter


def _count(n: int) -> None:
    if _OP_COUNTER is not None:
        _OP_COUNTER.add(n)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class AdapterConfig:
    d: int
    d_prime: int
    kind: str
    k: int = 2
    lookback: int | None = None
    lookahead: int = 0
    gamma: float = DEFAULT_GAMMA
    theta: float | None = None
    forget_bias_init: float = DEFAULT_FORGET_BIAS
    depthwise: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 1 <= self.d_prime <= self.d:
            raise ConfigError(f"need 1 <= d_prime <= d, got d_prime={self.d_prime}, d={self.d}")
        if self.k < 1:
            raise ConfigError(f"kernel size must be >= 1, got {self.k}")
        if self.lookback is None:
            object.__setattr__(self, "lookback", self.k - 1 - self.lookahead)
        if self.lookback + self.lookahead != self.k - 1:
            raise ConfigError(
                f"lookback + lookahead must equal k - 1, got "
                f"{self.lookback} + {self.lookahead} != {self.k - 1}"
            )
        if self.lookback < 0 or self.lookahead < 0:
            raise ConfigError("lookback and lookahead must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.theta is None:
            object.__setattr__(self, "theta", 2.0 * math.pi / self.d_prime)


def default_reduced_dim(kind: str, d: int, k: int = 2) -> int:
    """Reduced width for a kind: d/2 for st_conv, others sized to match its
    parameter count."""
    if kind == "st_conv":
        return max(1, d // 2)
    target = _adapter_param_count("st_conv", d, max(1, d // 2), k)
    best, best_gap = 1, abs(_adapter_param_count(kind, d, 1, k) - target)
    for dp in range(2, d + 1):
        gap = abs(_adapter_param_count(kind, d, dp, k) - target)
        if gap < best_gap:
            best, best_gap = dp, gap
    return best


def _adapter_param_count(kind: str, d: int, d_prime: int, k: int) -> int:
    n = 2 * d * d_prime + d_prime + d  # down + up with biases
    if kind == "st_conv":
        n += k * d_prime * d_prime
    elif kind == "qrnn":
        n += 2 * (k * d_prime * d_prime + d_prime)
    elif kind == "retention":
        n += 3 * d_prime * d_prime
    return n


# -- parameters ---------------------------------------------------------------


@dataclass(frozen=True)
class AdapterParams:
    config: AdapterConfig
    w_down: np.ndarray
    b_down: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    w_s: np.ndarray | None = None   # st_conv / qrnn conv bank [k, d', d']
    b_s: np.ndarray | None = None   # qrnn only
    w_f: np.ndarray | None = None   # qrnn forget bank
    b_f: np.ndarray | None = None
    w_q: np.ndarray | None = None   # retention projections [d', d']
    w_k: np.ndarray | None = None
    w_v: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays in declaration order."""
        out = {"w_down": self.w_down, "b_down": self.b_down, "w_up": self.w_up, "b_up": self.b_up}
        for name in ("w_s", "b_s", "w_f", "b_f", "w_q", "w_k", "w_v"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


def init_params(config: AdapterConfig, seed: int) -> AdapterParams:
    """Identity-approximating initialization.

    The up-projection is exactly zero so the residual path carries the
    input unchanged. The qrnn forget bank starts at zero with its bias at a
    fixed negative value, keeping the forget gate nearly closed.
    """
    rng = np.random.default_rng(seed)
    d, dp, k = config.d, config.d_prime, config.k

    def small(shape, fan_in):
        return rng.normal(size=shape) / math.sqrt(fan_in)

    conv_shape = (k, dp) if config.depthwise else (k, dp, dp)
    conv_fan = k if config.depthwise else k * dp
    kw: dict = {
        "w_down": small((d, dp), d),
        "b_down": np.zeros(dp),
        "w_up": np.zeros((dp, d)),
        "b_up": np.zeros(d),
    }
    if config.kind == "st_conv":
        kw["w_s"] = small(conv_shape, conv_fan)
    elif config.kind == "qrnn":
        kw["w_s"] = small(conv_shape, conv_fan)
        kw["b_s"] = np.zeros(dp)
        kw["w_f"] = np.zeros(conv_shape)
        kw["b_f"] = np.full(dp, config.forget_bias_init, dtype=float)
    elif config.kind == "retention":
        kw["w_q"] = small((dp, dp), dp)
        kw["w_k"] = small((dp, dp), dp)
        kw["w_v"] = small((dp, dp), dp)
    return AdapterParams(config=config, **kw)


# -- stream state -------------------------------------------------------------


@dataclass(frozen=True)
class VanillaState:
    pass


@dataclass(frozen=True)
class ConvState:
    buffer: np.ndarray  # last (k-1) reduced-dim inputs, oldest first


@dataclass(frozen=True)
class QrnnState:
    buffer: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class RetentionState:
    s: np.ndarray  # [d', d'] decayed key-value summary
    n: int         # absolute position of the next frame

StreamState = VanillaState | ConvState | QrnnState | RetentionState

_STATE_KIND = {
    "vanilla": VanillaState,
    "st_conv": ConvState,
    "qrnn": QrnnState,
    "retention": RetentionState,
}


def fresh_state(config: AdapterConfig) -> StreamState:
    """All-zeros state for the start of a stream."""
    dp, k = config.d_prime, config.k
    if config.kind == "vanilla":
        return VanillaState()
    if config.kind == "st_conv":
        return ConvState(buffer=np.zeros((k - 1, dp)))
    if config.kind == "qrnn":
        return QrnnState(buffer=np.zeros((k - 1, dp)), h=np.zeros(dp))
    return RetentionState(s=np.zeros((dp, dp)), n=0)


def _check_state(config: AdapterConfig, state: StreamState) -> None:
    expected = _STATE_KIND[config.kind]
    if not isinstance(state, expected):
        raise ConfigError(
            f"state kind mismatch: adapter kind {config.kind!r} expects "
            f"{expected.__name__}, got {type(state).__name__}"
        )


# -- primitives ---------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def causal_conv(
    x: np.ndarray,
    w: np.ndarray,
    lookback: int,
    lookahead: int = 0,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Masked temporal convolution: y_t = sum_j x_{t - lookback + j} @ w[j].

    Positions outside [0, n_t) contribute zero, so the output has the input
    length. With lookahead = 0 the output at t never reads frames after t.
    A 2-D filter bank ``[k, d]`` applies depth-wise (per-channel) taps
    instead of the dense ``[k, d_in, d_out]`` mixing.
    """
    k = w.shape[0]
    if lookback + lookahead != k - 1:
        raise ConfigError(f"lookback + lookahead must equal k - 1 = {k - 1}")
    depthwise = w.ndim == 2
    n = x.shape[0]
    d_out = w.shape[1] if depthwise else w.shape[2]
    y = np.zeros((n, d_out), dtype=np.result_type(x, w))
    for j in range(k):
        off = j - lookback  # tap j reads x[t + off]
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo < hi:
            if depthwise:
                y[lo:hi] += x[lo + off : hi + off] * w[j]
                _count((hi - lo) * d_out)
            else:
                y[lo:hi] += x[lo + off : hi + off] @ w[j]
                _count((hi - lo) * w.shape[1] * d_out)
    if bias is not None:
        y = y + bias
    return y


def fo_pool(s: np.ndarray, f: np.ndarray, h_init: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gated recurrent pooling h_t = f_t * h_{t-1} + (1 - f_t) * s_t.

    Returns the full output sequence and the final hidden state. Gates must
    lie strictly inside (0, 1).
    """
    if s.shape != f.shape:
        raise ConfigError(f"s and f must share a shape, got {s.shape} vs {f.shape}")
    if f.size and not ((f > 0.0).all() and (f < 1.0).all()):
        raise NumericError("fo_pool gates must lie strictly in (0, 1)")
    h = np.empty_like(s, dtype=float)
    prev = np.asarray(h_init, dtype=float)
    for t in range(s.shape[0]):
        prev = f[t] * prev + (1.0 - f[t]) * s[t]
        h[t] = prev
    _count(2 * s.size)
    return h, prev


def qrnn_forward(
    x: np.ndarray, params: AdapterParams, state: QrnnState
) -> tuple[np.ndarray, QrnnState]:
    """Reduced-dim QRNN core: gated pooling of tanh'd causal convolutions.

    ``s = tanh(W_s * x)`` and ``f = sigmoid(W_f * x)`` share one ring buffer
    of left context; the carried hidden state seeds the pooling recurrence.
    """
    if not isinstance(state, QrnnState):
        raise ConfigError(f"qrnn_forward needs a QrnnState, got {type(state).__name__}")
    cfg = params.config
    if cfg.lookahead != 0:
        raise ConfigError("streaming qrnn requires lookahead = 0")
    ctx = np.vstack([state.buffer, x]) if cfg.k > 1 else x
    skip = state.buffer.shape[0]
    s = np.tanh(causal_conv(ctx, params.w_s, cfg.lookback, 0, params.b_s)[skip:])
    f = sigmoid(causal_conv(ctx, params.w_f, cfg.lookback, 0, params.b_f)[skip:])
    # sigmoid output saturating to float 0/1 is a rounding artifact; keep the
    # gates inside the open interval fo_pool requires
    f = np.clip(f, 1e-15, 1.0 - 1e-15)
    h, h_last = fo_pool(s, f, state.h)
    new_buffer = ctx[len(ctx) - skip :] if skip else state.buffer
    return h, QrnnState(buffer=new_buffer.copy(), h=h_last)


def _rotate(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate consecutive channel pairs of each row by position * theta.

    Real-valued realization of the complex positional factor e^{i n theta};
    an odd final channel is left unrotated.
    """
    out = x.astype(float).copy()
    d = x.shape[-1]
    pairs = d // 2
    if pairs == 0 or theta == 0.0:
        return out
    ang = np.asarray(positions, dtype=float) * theta
    c, s = np.cos(ang), np.sin(ang)
    if x.ndim == 1:
        c, s = float(c), float(s)
        a, b = x[0 : 2 * pairs : 2].copy(), x[1 : 2 * pairs : 2].copy()
        out[0 : 2 * pairs : 2] = c * a - s * b
        out[1 : 2 * pairs : 2] = s * a + c * b
        return out
    a = x[:, 0 : 2 * pairs : 2].copy()
    b = x[:, 1 : 2 * pairs : 2].copy()
    out[:, 0 : 2 * pairs : 2] = c[:, None] * a - s[:, None] * b
    out[:, 1 : 2 * pairs : 2] = s[:, None] * a + c[:, None] * b
    return out


def decay_matrix(n: int, gamma: float, dtype=float) -> np.ndarray:
    """Lower-triangular decay D[n, m] = gamma^(n-m) for n >= m, else exact 0."""
    delta = np.arange(n)[:, None] - np.arange(n)[None, :]
    return np.where(delta >= 0, gamma ** np.maximum(delta, 0).astype(dtype), 0.0)


def retention_parallel(
    x: np.ndarray,
    params: AdapterParams,
    gamma: float | None = None,
    theta: float | None = None,
    pos_offset: int = 0,
    stability_cap: int | None = None,
) -> np.ndarray:
    """Parallel-form retention: ((Q K^T) . D) V with rotated Q, K.

    Exact peer of the recurrent form. Single-precision inputs longer than
    the stability cap are refused; use chunked/recurrent processing instead.
    """
    cfg = params.config
    gamma = cfg.gamma if gamma is None else gamma
    theta = cfg.theta if theta is None else theta
    n = x.shape[0]
    cap = stability_cap
    if cap is None and np.asarray(x).dtype == np.float32:
        cap = SINGLE_PRECISION_CAP
    if cap is not None and n > cap:
        raise NumericError(
            f"parallel retention over {n} frames exceeds the stability cap {cap}; "
            "process the stream in chunks or use the recurrent form"
        )
    pos = pos_offset + np.arange(n)
    q = _rotate(x @ params.w_q, pos, theta)
    k = _rotate(x @ params.w_k, pos, theta)
    v = x @ params.w_v
    scores = (q @ k.T) * decay_matrix(n, gamma)
    _count(3 * n * x.shape[1] * cfg.d_prime + 2 * n * n * cfg.d_prime)
    return scores @ v


def _retention_final_state(
    x: np.ndarray, params: AdapterParams, gamma: float, theta: float, pos_offset: int
) -> RetentionState:
    n = x.shape[0]
    pos = pos_offset + np.arange(n)
    k = _rotate(x @ params.w_k, pos, theta)
    v = x @ params.w_v
    weights = gamma ** np.arange(n - 1, -1, -1, dtype=float)
    s = (k * weights[:, None]).T @ v
    return RetentionState(s=s, n=pos_offset + n)


def retention_recurrent(
    x_n: np.ndarray,
    params: AdapterParams,
    gamma: float | None = None,
    theta: float | None = None,
    state: RetentionState | None = None,
) -> tuple[np.ndarray, RetentionState]:
    """Constant-cost retention step: S_n = gamma S_{n-1} + K_n^T V_n, out = Q_n S_n."""
    cfg = params.config
    gamma = cfg.gamma if gamma is None else gamma
    theta = cfg.theta if theta is None else theta
    if state is None:
        state = RetentionState(s=np.zeros((cfg.d_prime, cfg.d_prime)), n=0)
    if not isinstance(state, RetentionState):
        raise ConfigError(f"retention_recurrent needs a RetentionState, got {type(state).__name__}")
    q = _rotate(x_n @ params.w_q, state.n, theta)
    k = _rotate(x_n @ params.w_k, state.n, theta)
    v = x_n @ params.w_v
    s = gamma * state.s + np.outer(k, v)
    out = q @ s
    _count(6 * cfg.d_prime * cfg.d_prime)
    return out, RetentionState(s=s, n=state.n + 1)


def receptive_field(m: int, k: int) -> int:
    """Temporal receptive field of m stacked width-k causal convolutions."""
    if m < 1 or k < 1:
        raise ConfigError(f"need m >= 1 and k >= 1, got ({m}, {k})")
    return k + (m - 1) * (k - 1)


# -- adapter ------------------------------------------------------------------


def _conv_core(
    x: np.ndarray, params: AdapterParams, state: ConvState
) -> tuple[np.ndarray, ConvState]:
    cfg = params.config
    if cfg.lookahead != 0:
        raise ConfigError("streaming st_conv requires lookahead = 0")
    ctx = np.vstack([state.buffer, x]) if cfg.k > 1 else x
    skip = state.buffer.shape[0]
    y = causal_conv(ctx, params.w_s, cfg.lookback, 0)[skip:]
    new_buffer = ctx[len(ctx) - skip :] if skip else state.buffer
    return y, ConvState(buffer=new_buffer.copy())


def adapter_forward(
    x: np.ndarray, params: AdapterParams, state: StreamState | None = None
) -> tuple[np.ndarray, StreamState | None]:
    """Residual adapter: y = x + Up(core(Down(x))).

    ``state=None`` runs in batch mode over the whole sequence (a fresh
    stream); passing the returned state continues the same stream, and any
    partition into chunks reproduces the batch output. A freshly
    initialized adapter returns ``x`` unchanged.
    """
    cfg = params.config
    if x.ndim != 2 or x.shape[1] != cfg.d:
        raise ConfigError(f"input must be [n, d={cfg.d}], got shape {x.shape}")
    streaming = state is not None
    if streaming:
        _check_state(cfg, state)
        if cfg.lookahead != 0:
            raise ConfigError("streaming mode requires lookahead = 0")
    else:
        if cfg.kind != "vanilla" and cfg.lookahead == 0:
            state = fresh_state(cfg)

    down = x @ params.w_down + params.b_down
    _count(x.shape[0] * cfg.d * cfg.d_prime)

    new_state: StreamState | None = state
    if cfg.kind == "vanilla":
        core = gelu(down)
        new_state = VanillaState() if streaming else state
    elif cfg.kind == "st_conv":
        if state is None:  # batch with lookahead > 0: no carried state
            core = causal_conv(down, params.w_s, cfg.lookback, cfg.lookahead)
            new_state = None
        else:
            core, new_state = _conv_core(down, params, state)
    elif cfg.kind == "qrnn":
        core, new_state = qrnn_forward(down, params, state)
    else:  # retention
        if streaming:
            rows = []
            st = state
            for t in range(down.shape[0]):
                out, st = retention_recurrent(down[t], params, state=st)
                rows.append(out)
            core = np.stack(rows) if rows else down[:0]
            new_state = st
        else:
            core = retention_parallel(params=params, x=down)
            new_state = _retention_final_state(down, params, cfg.gamma, cfg.theta, 0)

    y = x + core @ params.w_up + params.b_up
    _count(x.shape[0] * cfg.d_prime * cfg.d)
    return y, new_state


# -- spatio-temporal block ----------------------------------------------------


@dataclass(frozen=True)
class BlockParams:
    """Frozen stand-ins for the spatial and MLP sublayers of one block."""

    w_sp: np.ndarray
    b_sp: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "w_sp": self.w_sp, "b_sp": self.b_sp,
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
        }


def make_block_params(d: int, d_mlp: int, seed: int, scale: float = 0.1) -> BlockParams:
    """Seeded frozen sublayers; small scales keep deep stacks well-conditioned."""
    rng = np.random.default_rng(seed)
    return BlockParams(
        w_sp=scale * rng.normal(size=(d, d)) / math.sqrt(d),
        b_sp=np.zeros(d),
        w1=rng.normal(size=(d, d_mlp)) / math.sqrt(d),
        b1=np.zeros(d_mlp),
        w2=scale * rng.normal(size=(d_mlp, d)) / math.sqrt(d_mlp),
        b2=np.zeros(d),
    )


def identity_block_params(d: int, d_mlp: int) -> BlockParams:
    """Zeroed frozen sublayers: with an identity adapter the block is the identity."""
    return BlockParams(
        w_sp=np.zeros((d, d)), b_sp=np.zeros(d),
        w1=np.zeros((d, d_mlp)), b1=np.zeros(d_mlp),
        w2=np.zeros((d_mlp, d)), b2=np.zeros(d),
    )


def block_forward(
    x: np.ndarray,
    adapter_params: AdapterParams,
    block_params: BlockParams,
    state: StreamState | None = None,
) -> tuple[np.ndarray, StreamState | None]:
    """Temporal adapter, then frozen spatial and MLP sublayers with residuals.

    y_temp = adapter(x); v = spatial(y_temp) + x; out = mlp(v) + v.
    """
    u, new_state = adapter_forward(x, adapter_params, state)
    v = u @ block_params.w_sp + block_params.b_sp + x
    hidden = gelu(v @ block_params.w1 + block_params.b1)
    out = hidden @ block_params.w2 + block_params.b2 + v
    n = x.shape[0]
    d, d_mlp = block_params.w1.shape
    _count(n * d * d + 2 * n * d * d_mlp)
    return out, new_state


# -- checkpoint format --------------------------------------------------------
#
# Single binary file: magic "SDQK", u32 version, u32 config-JSON length,
# config JSON (UTF-8), u32 array count, then per array a u32 rank, u32 dims,
# and the little-endian float32 payload. Layout details in docs/formats.md.

MAGIC = b"SDQK"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, config: dict, arrays: list[np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", arr32.ndim))
        buf.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        buf.write(arr32.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path} is not a parameter checkpoint (bad magic {raw[:4]!r})")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off : off + blob_len].decode("utf-8"))
    off += blob_len
    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = []
    for _ in range(n_arrays):
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        arrays.append(arr.astype(float))
    return config, arrays
