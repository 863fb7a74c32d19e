"""Trainable scoring head and desk-scale trainer.

A detector is a frozen input map followed by a stack of blocks whose only
trainable parameters are the temporal adapters. Frames are scored by the
cosine similarity between the stack output and the query embedding, pushed
through a temperature-scaled sigmoid. Training minimizes a
positive-weighted binary cross-entropy over dense window labels with
hand-derived reverse-mode gradients; inference keeps one score per
arriving frame at constant cost.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError
from .kernels import AdapterConfig, AdapterParams, BlockParams, gelu, gelu_grad, sigmoid
from .metrics import ScoreSeries

logger = logging.getLogger(__name__)

DEFAULT_TAU_SIM = 0.07
DEFAULT_POS_CAP = 20.0
DIVERGENCE_LIMIT = 1e3
_NORM_EPS = 1e-12

# running count of zero-norm frame outputs mapped to sigmoid(0)
ZERO_NORM_COUNT = 0


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    d: int
    n_blocks: int
    adapter: AdapterConfig
    d_mlp: int = 0
    tau_sim: float = DEFAULT_TAU_SIM
    seed: int = 0

    def __post_init__(self) -> None:
        if self.adapter.d != self.d:
            raise ConfigError(f"adapter width {self.adapter.d} must equal model width {self.d}")
        if self.n_blocks < 1:
            raise ConfigError(f"need at least one block, got {self.n_blocks}")
        if self.tau_sim <= 0:
            raise ConfigError(f"tau_sim must be positive, got {self.tau_sim}")
        if self.d_mlp <= 0:
            object.__setattr__(self, "d_mlp", 2 * self.d)


@dataclass(frozen=True)
class DetectorModel:
    """Frozen input map + block stack; adapters are the only trainable parts."""

    config: ModelConfig
    w_in: np.ndarray
    b_in: np.ndarray
    blocks: list[tuple[AdapterParams, BlockParams]]


@dataclass(frozen=True)
class TrainConfig:
    w_s: int = 60
    fps: float = 1.0
    learning_rate: float = 1e-4
    steps: int = 0
    batch_size: int = 8
    pos_weight_cap: float = DEFAULT_POS_CAP
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.w_s < 1:
            raise ConfigError(f"w_s must be >= 1, got {self.w_s}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    pos_term: float
    neg_term: float
    pos_weight: float


@dataclass(frozen=True)
class TrainingExample:
    """One sampled window: frame embeddings, dense labels and the query."""

    embeddings: np.ndarray  # [w_s, d_in]
    labels: np.ndarray      # [w_s] bool
    query: np.ndarray       # [d]
    video_uid: str = ""


def build_model(config: ModelConfig) -> DetectorModel:
    """Seeded construction; the input map is identity when d_in == d."""
    rng = np.random.default_rng(config.seed)
    if config.d_in == config.d:
        w_in = np.eye(config.d)
    else:
        w_in = rng.normal(size=(config.d_in, config.d)) / math.sqrt(config.d_in)
    b_in = np.zeros(config.d)
    blocks = []
    for _ in range(config.n_blocks):
        adapter_seed = int(rng.integers(0, 2**31 - 1))
        block_seed = int(rng.integers(0, 2**31 - 1))
        blocks.append(
            (
                kernels.init_params(config.adapter, adapter_seed),
                kernels.make_block_params(config.d, config.d_mlp, block_seed),
            )
        )
    return DetectorModel(config=config, w_in=w_in, b_in=b_in, blocks=blocks)


# -- forward with optional tape -------------------------------------------------


@dataclass
class _BlockTape:
    x: np.ndarray
    down: np.ndarray
    core: np.ndarray
    u: np.ndarray
    v: np.ndarray
    h1_pre: np.ndarray
    extra: dict


def _core_forward_tape(down: np.ndarray, params: AdapterParams) -> tuple[np.ndarray, dict]:
    cfg = params.config
    if cfg.kind == "vanilla":
        return gelu(down), {}
    if cfg.kind == "st_conv":
        return kernels.causal_conv(down, params.w_s, cfg.lookback, cfg.lookahead), {}
    if cfg.kind == "qrnn":
        sp = kernels.causal_conv(down, params.w_s, cfg.lookback, cfg.lookahead, params.b_s)
        fp = kernels.causal_conv(down, params.w_f, cfg.lookback, cfg.lookahead, params.b_f)
        s = np.tanh(sp)
        f = np.clip(sigmoid(fp), 1e-15, 1.0 - 1e-15)
        h, _ = kernels.fo_pool(s, f, np.zeros(cfg.d_prime))
        return h, {"s": s, "f": f, "h": h}
    # retention (parallel form)
    n = down.shape[0]
    pos = np.arange(n)
    q = kernels._rotate(down @ params.w_q, pos, cfg.theta)
    k = kernels._rotate(down @ params.w_k, pos, cfg.theta)
    v = down @ params.w_v
    decay = kernels.decay_matrix(n, cfg.gamma)
    scores = (q @ k.T) * decay
    return scores @ v, {"q": q, "k": k, "v": v, "decay": decay, "scores": scores, "pos": pos}


def _block_forward_tape(
    x: np.ndarray, adapter: AdapterParams, block: BlockParams
) -> tuple[np.ndarray, _BlockTape]:
    down = x @ adapter.w_down + adapter.b_down
    core, extra = _core_forward_tape(down, adapter)
    u = x + core @ adapter.w_up + adapter.b_up
    v = u @ block.w_sp + block.b_sp + x
    h1_pre = v @ block.w1 + block.b1
    out = gelu(h1_pre) @ block.w2 + block.b2 + v
    return out, _BlockTape(x=x, down=down, core=core, u=u, v=v, h1_pre=h1_pre, extra=extra)


def _forward_stack(model: DetectorModel, embeddings: np.ndarray, record: bool = False):
    x = embeddings @ model.w_in + model.b_in
    tapes = []
    for adapter, block in model.blocks:
        x, tape = _block_forward_tape(x, adapter, block)
        if record:
            tapes.append(tape)
    return x, tapes


def _cosine_scores(out: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, dict]:
    global ZERO_NORM_COUNT
    qnorm = float(np.linalg.norm(query))
    if qnorm <= 0:
        raise ConfigError("query embedding must have positive norm")
    qn = query / qnorm
    unorm = np.linalg.norm(out, axis=1)
    zero = unorm < _NORM_EPS
    if zero.any():
        ZERO_NORM_COUNT += int(zero.sum())
        logger.warning("%d zero-norm frame output(s); scoring them as sigmoid(0)", int(zero.sum()))
    safe = np.where(zero, 1.0, unorm)
    s = np.where(zero, 0.0, (out @ qn) / safe)
    return s, {"out": out, "qn": qn, "unorm": safe, "s": s, "zero": zero}


def score_frames(
    model: DetectorModel,
    embeddings: np.ndarray,
    query: np.ndarray,
    video_uid: str = "",
    query_id: str = "",
    fps: float = 1.0,
) -> ScoreSeries:
    """Batch scoring: p_i = sigmoid(cos(stack(e)_i, query) / tau_sim)."""
    out, _ = _forward_stack(model, np.asarray(embeddings, dtype=float))
    s, _ = _cosine_scores(out, np.asarray(query, dtype=float))
    p = sigmoid(s / model.config.tau_sim)
    return ScoreSeries(video_uid=video_uid, query_id=query_id, fps=fps, scores=p)


# -- loss -----------------------------------------------------------------------


def _pos_weight(y: np.ndarray, cap: float) -> float:
    n_pos = float(y.sum())
    n_neg = float(y.size - y.sum())
    return float(min(cap, max(1.0, n_neg / max(1.0, n_pos))))


def weighted_bce(p: np.ndarray, y: np.ndarray, cap: float = DEFAULT_POS_CAP) -> LossBreakdown:
    """Positive-weighted binary cross-entropy over a batch of frames.

    total = w_pos * pos_term + neg_term with w_pos = min(cap, n_neg / n_pos),
    never below 1 so all-positive batches keep the plain BCE value.
    Probabilities are clamped to [1e-7, 1 - 1e-7].
    """
    p = np.clip(np.asarray(p, dtype=float), 1e-7, 1.0 - 1e-7)
    y = np.asarray(y, dtype=float)
    n = y.size
    w_pos = _pos_weight(y, cap)
    pos_term = float(-(y * np.log(p)).sum() / n)
    neg_term = float(-((1.0 - y) * np.log1p(-p)).sum() / n)
    return LossBreakdown(
        total=w_pos * pos_term + neg_term,
        pos_term=pos_term,
        neg_term=neg_term,
        pos_weight=w_pos,
    )


def _softplus(x: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.logaddexp(0.0, x)


def _bce_from_logits(z: np.ndarray, y: np.ndarray, cap: float) -> tuple[LossBreakdown, np.ndarray]:
    """Loss breakdown and dL/dz computed stably from logits."""
    y = np.asarray(y, dtype=float)
    n = y.size
    w_pos = _pos_weight(y, cap)
    p = sigmoid(z)
    pos_term = float((y * _softplus(-z)).sum() / n)
    neg_term = float(((1.0 - y) * (z + _softplus(-z))).sum() / n)
    dz = (w_pos * y * (p - 1.0) + (1.0 - y) * p) / n
    lb = LossBreakdown(
        total=w_pos * pos_term + neg_term,
        pos_term=pos_term,
        neg_term=neg_term,
        pos_weight=w_pos,
    )
    return lb, dz


# -- backward ---------------------------------------------------------------------


def _conv_backward(
    d_y: np.ndarray, x: np.ndarray, w: np.ndarray, lookback: int
) -> tuple[np.ndarray, np.ndarray]:
    """VJP of causal_conv w.r.t. its input and filter bank (dense or depthwise)."""
    n = x.shape[0]
    depthwise = w.ndim == 2
    d_x = np.zeros_like(x)
    g_w = np.zeros_like(w)
    for j in range(w.shape[0]):
        off = j - lookback
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo < hi:
            if depthwise:
                d_x[lo + off : hi + off] += d_y[lo:hi] * w[j]
                g_w[j] = (x[lo + off : hi + off] * d_y[lo:hi]).sum(axis=0)
            else:
                d_x[lo + off : hi + off] += d_y[lo:hi] @ w[j].T
                g_w[j] = x[lo + off : hi + off].T @ d_y[lo:hi]
    return d_x, g_w


def _fo_pool_backward(
    d_h: np.ndarray, s: np.ndarray, f: np.ndarray, h: np.ndarray, h_init: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """VJP of h_t = f_t h_{t-1} + (1 - f_t) s_t for d/ds and d/df."""
    d_s = np.zeros_like(s)
    d_f = np.zeros_like(f)
    carry = np.zeros(s.shape[1])
    for t in range(s.shape[0] - 1, -1, -1):
        g = d_h[t] + carry
        d_s[t] = g * (1.0 - f[t])
        h_prev = h[t - 1] if t > 0 else h_init
        d_f[t] = g * (h_prev - s[t])
        carry = g * f[t]
    return d_s, d_f


def _core_backward(
    d_core: np.ndarray, tape: _BlockTape, params: AdapterParams, grads: dict, prefix: str
) -> np.ndarray:
    cfg = params.config
    down = tape.down
    if cfg.kind == "vanilla":
        return d_core * gelu_grad(down)
    if cfg.kind == "st_conv":
        d_down, g_w = _conv_backward(d_core, down, params.w_s, cfg.lookback)
        grads[f"{prefix}.w_s"] += g_w
        return d_down
    if cfg.kind == "qrnn":
        s, f, h = tape.extra["s"], tape.extra["f"], tape.extra["h"]
        d_s, d_f = _fo_pool_backward(d_core, s, f, h, np.zeros(cfg.d_prime))
        d_sp = d_s * (1.0 - s * s)
        d_fp = d_f * f * (1.0 - f)
        d_down_s, g_ws = _conv_backward(d_sp, down, params.w_s, cfg.lookback)
        d_down_f, g_wf = _conv_backward(d_fp, down, params.w_f, cfg.lookback)
        grads[f"{prefix}.w_s"] += g_ws
        grads[f"{prefix}.b_s"] += d_sp.sum(axis=0)
        grads[f"{prefix}.w_f"] += g_wf
        grads[f"{prefix}.b_f"] += d_fp.sum(axis=0)
        return d_down_s + d_down_f
    # retention
    q, k, v = tape.extra["q"], tape.extra["k"], tape.extra["v"]
    decay, pos = tape.extra["decay"], tape.extra["pos"]
    scores = tape.extra["scores"]
    d_v = scores.T @ d_core
    d_scores = d_core @ v.T
    d_raw = d_scores * decay
    d_q = d_raw @ k
    d_k = d_raw.T @ q
    d_q0 = kernels._rotate(d_q, pos, -cfg.theta)
    d_k0 = kernels._rotate(d_k, pos, -cfg.theta)
    grads[f"{prefix}.w_q"] += down.T @ d_q0
    grads[f"{prefix}.w_k"] += down.T @ d_k0
    grads[f"{prefix}.w_v"] += down.T @ d_v
    return d_q0 @ params.w_q.T + d_k0 @ params.w_k.T + d_v @ params.w_v.T


def _block_backward(
    d_out: np.ndarray,
    tape: _BlockTape,
    adapter: AdapterParams,
    block: BlockParams,
    grads: dict,
    prefix: str,
) -> np.ndarray:
    d_hidden = d_out @ block.w2.T
    d_h1 = d_hidden * gelu_grad(tape.h1_pre)
    d_v = d_out + d_h1 @ block.w1.T
    d_u = d_v @ block.w_sp.T
    d_x = d_v.copy()

    # adapter: u = x + core @ w_up + b_up
    d_x += d_u
    d_core = d_u @ adapter.w_up.T
    grads[f"{prefix}.w_up"] += tape.core.T @ d_u
    grads[f"{prefix}.b_up"] += d_u.sum(axis=0)
    d_down = _core_backward(d_core, tape, adapter, grads, prefix)
    grads[f"{prefix}.w_down"] += tape.x.T @ d_down
    grads[f"{prefix}.b_down"] += d_down.sum(axis=0)
    d_x += d_down @ adapter.w_down.T
    return d_x


def _score_head_backward(dz: np.ndarray, cache: dict, tau: float) -> np.ndarray:
    out, qn = cache["out"], cache["qn"]
    unorm, s, zero = cache["unorm"], cache["s"], cache["zero"]
    ds = dz / tau
    uhat = out / unorm[:, None]
    d_out = ds[:, None] * (qn[None, :] - s[:, None] * uhat) / unorm[:, None]
    d_out[zero] = 0.0
    return d_out


def zero_grads(model: DetectorModel) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    for i, (adapter, _) in enumerate(model.blocks):
        for name, arr in adapter.arrays().items():
            grads[f"blocks.{i}.{name}"] = np.zeros_like(arr)
    return grads


def backward(
    model: DetectorModel, batch: list[TrainingExample], cap: float = DEFAULT_POS_CAP
) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    """Loss over the batch and gradients for every trainable parameter.

    Frozen parameters (input map, block sublayers) receive no gradient
    entries. The positive weight is computed over all frames of the batch.
    Raises NumericError naming the parameter if any gradient is non-finite.
    """
    if not batch:
        raise ConfigError("backward needs a non-empty batch")
    runs = []
    zs, ys = [], []
    for ex in batch:
        out, tapes = _forward_stack(model, np.asarray(ex.embeddings, dtype=float), record=True)
        s, cache = _cosine_scores(out, np.asarray(ex.query, dtype=float))
        runs.append((tapes, cache))
        zs.append(s / model.config.tau_sim)
        ys.append(np.asarray(ex.labels, dtype=float))
    z = np.concatenate(zs)
    y = np.concatenate(ys)
    lb, dz = _bce_from_logits(z, y, cap)

    grads = zero_grads(model)
    offset = 0
    for (tapes, cache), ex in zip(runs, batch):
        n = len(ex.labels)
        d_out = _score_head_backward(dz[offset : offset + n], cache, model.config.tau_sim)
        offset += n
        d_x = d_out
        for i in range(len(model.blocks) - 1, -1, -1):
            adapter, block = model.blocks[i]
            d_x = _block_backward(d_x, tapes[i], adapter, block, grads, f"blocks.{i}")

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    return grads, lb


# -- training ---------------------------------------------------------------------


def _rebuild(model: DetectorModel, work: dict[str, np.ndarray]) -> DetectorModel:
    blocks = []
    for i, (adapter, block) in enumerate(model.blocks):
        updates = {
            name: work[f"blocks.{i}.{name}"] for name in adapter.arrays() if f"blocks.{i}.{name}" in work
        }
        blocks.append((replace(adapter, **updates), block))
    return replace(model, blocks=blocks)


def train(
    model: DetectorModel, dataset: list[TrainingExample], config: TrainConfig
) -> tuple[DetectorModel, list[LossBreakdown]]:
    """Optimize adapter parameters; returns the trained model and loss curve.

    Deterministic given the seed. Uses adaptive moments by default (SGD
    with momentum via ``optimizer="sgd"``). Raises NumericError with the
    partial history attached if the loss exceeds the divergence limit.
    """
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    if config.steps == 0:
        return model, []

    rng = np.random.default_rng(config.seed)
    work = {
        name: arr.astype(float).copy()
        for name, arr in (
            (f"blocks.{i}.{n}", a)
            for i, (adapter, _) in enumerate(model.blocks)
            for n, a in adapter.arrays().items()
        )
    }
    m1 = {name: np.zeros_like(arr) for name, arr in work.items()}
    m2 = {name: np.zeros_like(arr) for name, arr in work.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    history: list[LossBreakdown] = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        batch = [dataset[int(i)] for i in idx]
        current = _rebuild(model, work)
        try:
            grads, lb = backward(current, batch, config.pos_weight_cap)
        except NumericError as err:
            err.history = history
            raise
        history.append(lb)
        if not math.isfinite(lb.total) or lb.total > DIVERGENCE_LIMIT:
            err = NumericError(f"training diverged at step {step} with loss {lb.total}")
            err.history = history
            raise err
        for name, g in grads.items():
            if config.optimizer == "adam":
                m1[name] = beta1 * m1[name] + (1.0 - beta1) * g
                m2[name] = beta2 * m2[name] + (1.0 - beta2) * g * g
                mhat = m1[name] / (1.0 - beta1**step)
                vhat = m2[name] / (1.0 - beta2**step)
                work[name] = work[name] - config.learning_rate * mhat / (np.sqrt(vhat) + eps)
            else:
                m1[name] = config.momentum * m1[name] + g
                work[name] = work[name] - config.learning_rate * m1[name]
            if config.weight_decay:
                work[name] = work[name] - config.learning_rate * config.weight_decay * work[name]
    return _rebuild(model, work), history


def loss_curve_csv(history: list[LossBreakdown]) -> str:
    lines = ["step,total,pos_term,neg_term,w_pos"]
    for i, lb in enumerate(history, start=1):
        lines.append(f"{i},{lb.total!r},{lb.pos_term!r},{lb.neg_term!r},{lb.pos_weight!r}")
    return "\n".join(lines) + "\n"


# -- streaming inference ------------------------------------------------------------


class StreamingScorer:
    """Scores one stream frame by frame with carried per-block state."""

    def __init__(self, model: DetectorModel, query: np.ndarray):
        self.model = model
        qnorm = float(np.linalg.norm(query))
        if qnorm <= 0:
            raise ConfigError("query embedding must have positive norm")
        self._qn = np.asarray(query, dtype=float) / qnorm
        self.states = [kernels.fresh_state(adapter.config) for adapter, _ in model.blocks]

    def push(self, frame: np.ndarray) -> float:
        """Consume one frame, return its score before the next frame arrives."""
        global ZERO_NORM_COUNT
        x = np.asarray(frame, dtype=float)[None, :] @ self.model.w_in + self.model.b_in
        for i, (adapter, block) in enumerate(self.model.blocks):
            x, self.states[i] = kernels.block_forward(x, adapter, block, self.states[i])
        u = x[0]
        unorm = float(np.linalg.norm(u))
        if unorm < _NORM_EPS:
            ZERO_NORM_COUNT += 1
            logger.warning("zero-norm frame output; scoring as sigmoid(0)")
            s = 0.0
        else:
            s = float(u @ self._qn) / unorm
        return float(sigmoid(np.array(s / self.model.config.tau_sim)))


def infer_streaming(
    model: DetectorModel,
    frames,
    query: np.ndarray,
    video_uid: str = "",
    query_id: str = "",
    fps: float = 1.0,
) -> ScoreSeries:
    """One score per arriving frame; equals batch scoring of the full stream."""
    scorer = StreamingScorer(model, query)
    scores = [scorer.push(frame) for frame in frames]
    return ScoreSeries(video_uid=video_uid, query_id=query_id, fps=fps, scores=np.array(scores))


# -- checkpoints --------------------------------------------------------------------


def save_model(path: str | Path, model: DetectorModel) -> None:
    cfg = model.config
    adapter = cfg.adapter
    config = {
        "d_in": cfg.d_in,
        "d": cfg.d,
        "n_blocks": cfg.n_blocks,
        "d_mlp": cfg.d_mlp,
        "tau_sim": cfg.tau_sim,
        "seed": cfg.seed,
        "adapter": {
            "d": adapter.d,
            "d_prime": adapter.d_prime,
            "kind": adapter.kind,
            "k": adapter.k,
            "lookback": adapter.lookback,
            "lookahead": adapter.lookahead,
            "gamma": adapter.gamma,
            "theta": adapter.theta,
            "forget_bias_init": adapter.forget_bias_init,
            "depthwise": adapter.depthwise,
        },
        "array_order": _array_order(model),
    }
    arrays = [model.w_in, model.b_in]
    for adapter_params, block in model.blocks:
        arrays.extend(adapter_params.arrays().values())
        arrays.extend(block.arrays().values())
    kernels.write_checkpoint(path, config, arrays)


def _array_order(model: DetectorModel) -> list[str]:
    order = ["w_in", "b_in"]
    for i, (adapter_params, block) in enumerate(model.blocks):
        order.extend(f"blocks.{i}.{name}" for name in adapter_params.arrays())
        order.extend(f"blocks.{i}.{name}" for name in block.arrays())
    return order


def load_model(path: str | Path) -> DetectorModel:
    raw_config, arrays = kernels.read_checkpoint(path)
    adapter_cfg = AdapterConfig(**raw_config["adapter"])
    config = ModelConfig(
        d_in=raw_config["d_in"],
        d=raw_config["d"],
        n_blocks=raw_config["n_blocks"],
        adapter=adapter_cfg,
        d_mlp=raw_config["d_mlp"],
        tau_sim=raw_config["tau_sim"],
        seed=raw_config["seed"],
    )
    it = iter(arrays)
    w_in, b_in = next(it), next(it)
    template = build_model(config)
    blocks = []
    for adapter_params, block in template.blocks:
        adapter_updates = {name: next(it) for name in adapter_params.arrays()}
        block_updates = {name: next(it) for name in block.arrays()}
        blocks.append((replace(adapter_params, **adapter_updates), replace(block, **block_updates)))
    return DetectorModel(config=config, w_in=w_in, b_in=b_in, blocks=blocks)
