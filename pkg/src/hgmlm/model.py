"""Compact transformer encoder with a constrained masked-LM head.

Pure numpy, pre-norm architecture, learned position embeddings, output
projection tied to the token embeddings. Backward passes are exact
analytic gradients (checked against central finite differences in the
test suite), which keeps training bit-reproducible and lets the whole
model run in float64 for gradient verification.

Forward/inference is read-only over ModelState and safe for concurrent
callers; training mutates state and must be serialized by the caller.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import erf

from . import _toml
from .errors import DataError, NumericError
from .graph import derive_seed
from .tokenizer import PAD_ID, TokenizedEntry

_LN_EPS = 1e-5
_MAGIC = b"HGMLM1"


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 8
    model_dim: int = 256
    ffn_dim: int = 1024
    max_length: int = 512
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise DataError("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise DataError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 3
    grad_clip_norm: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise DataError("learning rate and batch size must be positive")
        if self.epochs < 0 or self.weight_decay < 0 or self.grad_clip_norm < 0:
            raise DataError("epochs, weight decay and grad clip must be non-negative")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint declaration order."""
    d, f, v, l = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size, cfg.max_length
    shapes = [("tok_emb", (v, d)), ("pos_emb", (l, d))]
    for i in range(cfg.layers):
        p = f"layer{i}"
        shapes += [
            (f"{p}.ln1.g", (d,)),
            (f"{p}.ln1.b", (d,)),
            (f"{p}.attn.wq", (d, d)),
            (f"{p}.attn.bq", (d,)),
            (f"{p}.attn.wk", (d, d)),
            (f"{p}.attn.bk", (d,)),
            (f"{p}.attn.wv", (d, d)),
            (f"{p}.attn.bv", (d,)),
            (f"{p}.attn.wo", (d, d)),
            (f"{p}.attn.bo", (d,)),
            (f"{p}.ln2.g", (d,)),
            (f"{p}.ln2.b", (d,)),
            (f"{p}.ffn.w1", (d, f)),
            (f"{p}.ffn.b1", (f,)),
            (f"{p}.ffn.w2", (f, d)),
            (f"{p}.ffn.b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("out_bias", (v,))]
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    step: int = 0

    def ensure_optimizer(self):
        if self.opt_m is None:
            self.opt_m = {k: np.zeros_like(p) for k, p in self.params.items()}
            self.opt_v = {k: np.zeros_like(p) for k, p in self.params.items()}


def init_state(cfg: ModelConfig) -> ModelState:
    """Seeded random initialization: N(0, 0.02) weights, unit LayerNorm gains."""
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dt)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or name == "out_bias":
            params[name] = np.zeros(shape, dtype=dt)
        else:
            params[name] = (rng.standard_normal(shape) * 0.02).astype(dt)
    return ModelState(cfg, params)


@dataclass
class Batch:
    ids: np.ndarray
    mask_positions: np.ndarray
    target_ids: np.ndarray
    constrained: tuple[tuple[int, ...], ...]

    @classmethod
    def from_entries(cls, entries: list[TokenizedEntry]) -> "Batch":
        lengths = {len(e.ids) for e in entries}
        if len(lengths) != 1:
            raise DataError("all entries in a batch must share one encoded length")
        return cls(
            ids=np.stack([e.ids for e in entries]),
            mask_positions=np.array([e.mask_position for e in entries], dtype=np.int64),
            target_ids=np.array([e.target_id for e in entries], dtype=np.int64),
            constrained=tuple(tuple(e.constrained_ids) for e in entries),
        )

    @property
    def size(self) -> int:
        return self.ids.shape[0]


# --- numerics -------------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dx = inv * (
        dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _softmax_lastdim(x):
    m = x.max(-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(-1, keepdims=True)


class _Dropout:
    """Inverted dropout with masks drawn from a per-forward seeded generator."""

    def __init__(self, rate, rng, dtype):
        self.rate = rate
        self.rng = rng
        self.dtype = dtype
        self.masks = []

    def apply(self, x):
        if self.rate == 0.0 or self.rng is None:
            self.masks.append(None)
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(self.dtype) / (1.0 - self.rate)
        self.masks.append(keep)
        return x * keep

    def backward(self, dy, index):
        mask = self.masks[index]
        return dy if mask is None else dy * mask


def _forward_cached(state: ModelState, batch: Batch, train: bool):
    cfg = state.config
    P = state.params
    dt = cfg.np_dtype
    B, T = batch.ids.shape
    if T > cfg.max_length:
        raise DataError(f"sequence length {T} exceeds model max_length {cfg.max_length}")
    if batch.ids.max() >= cfg.vocab_size:
        raise DataError("token id out of vocabulary range")

    rng = None
    if train and cfg.dropout > 0.0:
        rng = np.random.default_rng(derive_seed(cfg.seed, "dropout", state.step))
    drop = _Dropout(cfg.dropout if train else 0.0, rng, dt)

    nonpad = batch.ids != PAD_ID  # (B, T)
    attn_bias = np.where(nonpad[:, None, None, :], 0.0, -np.inf).astype(dt)

    h = P["tok_emb"][batch.ids] + P["pos_emb"][:T]
    h = drop.apply(h)
    cache = {"h0": h, "drop": drop, "layers": [], "nonpad": nonpad}

    scale = 1.0 / np.sqrt(cfg.head_dim)
    attn_last = None
    for i in range(cfg.layers):
        p = f"layer{i}"
        lc = {"h_in": h}
        a, lc["ln1"] = _layer_norm(h, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
        lc["a"] = a
        q = a @ P[f"{p}.attn.wq"] + P[f"{p}.attn.bq"]
        k = a @ P[f"{p}.attn.wk"] + P[f"{p}.attn.bk"]
        v = a @ P[f"{p}.attn.wv"] + P[f"{p}.attn.bv"]
        q = q.reshape(B, T, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        k = k.reshape(B, T, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        v = v.reshape(B, T, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        lc["q"], lc["k"], lc["v"] = q, k, v
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + attn_bias
        probs = _softmax_lastdim(scores)
        attn_last = probs
        lc["probs"] = probs
        pd = drop.apply(probs)
        lc["probs_drop_idx"] = len(drop.masks) - 1
        ctx = (pd @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.model_dim)
        lc["pd"], lc["ctx"] = pd, ctx
        o = ctx @ P[f"{p}.attn.wo"] + P[f"{p}.attn.bo"]
        o = drop.apply(o)
        lc["o_drop_idx"] = len(drop.masks) - 1
        h = h + o
        lc["h_mid"] = h
        f, lc["ln2"] = _layer_norm(h, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        lc["f"] = f
        z1 = f @ P[f"{p}.ffn.w1"] + P[f"{p}.ffn.b1"]
        u = _gelu(z1)
        lc["z1"], lc["u"] = z1, u
        r = u @ P[f"{p}.ffn.w2"] + P[f"{p}.ffn.b2"]
        r = drop.apply(r)
        lc["r_drop_idx"] = len(drop.masks) - 1
        h = h + r
        cache["layers"].append(lc)

    hf, cache["ln_f"] = _layer_norm(h, P["ln_f.g"], P["ln_f.b"])
    cache["hf"] = hf
    hm = hf[np.arange(B), batch.mask_positions]
    cache["hm"] = hm
    logits = hm @ P["tok_emb"].T + P["out_bias"]
    return logits, attn_last, cache


def forward(state: ModelState, batch: Batch, train: bool = False):
    """Mask-position logits over the full vocabulary plus last-layer attention."""
    logits, attn_last, _ = _forward_cached(state, batch, train)
    return logits, attn_last


def constrained_log_probs(logits_row: np.ndarray, constrained_ids) -> np.ndarray:
    """Log-softmax restricted to the constrained id subset (stable log-sum-exp)."""
    if len(constrained_ids) == 0:
        raise DataError("constrained id set is empty")
    x = np.asarray(logits_row, dtype=np.float64)[list(constrained_ids)]
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    return x - lse


def _loss_and_dlogits(logits, batch: Batch):
    B = batch.size
    total = 0.0
    dlogits = np.zeros_like(logits)
    for b in range(B):
        cids = list(batch.constrained[b])
        if batch.target_ids[b] not in cids:
            raise DataError("entry target id not in its constrained id set")
        lp = constrained_log_probs(logits[b], cids)
        t = cids.index(batch.target_ids[b])
        total += -lp[t]
        probs = np.exp(lp)
        probs[t] -= 1.0
        dlogits[b, cids] = probs / B
    loss = total / B
    if not np.isfinite(loss):
        raise NumericError(f"non-finite MLM loss: {loss}")
    return loss, dlogits


def mlm_loss(state: ModelState, batch: Batch, train: bool = False) -> float:
    """Mean constrained cross-entropy of targets at the mask positions."""
    logits, _, _ = _forward_cached(state, batch, train)
    loss, _ = _loss_and_dlogits(logits, batch)
    return float(loss)


def backward(state: ModelState, batch: Batch, train: bool = True):
    """Loss and exact analytic gradients for every parameter."""
    cfg = state.config
    P = state.params
    B, T = batch.ids.shape
    logits, _, cache = _forward_cached(state, batch, train)
    loss, dlogits = _loss_and_dlogits(logits, batch)

    grads = {k: np.zeros_like(p) for k, p in P.items()}
    drop: _Dropout = cache["drop"]

    hm = cache["hm"]
    grads["tok_emb"] += dlogits.T @ hm
    grads["out_bias"] += dlogits.sum(0)
    dhm = dlogits @ P["tok_emb"]

    dhf = np.zeros_like(cache["hf"])
    dhf[np.arange(B), batch.mask_positions] = dhm
    dh, dg, db = _layer_norm_backward(dhf, cache["ln_f"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    scale = 1.0 / np.sqrt(cfg.head_dim)
    for i in reversed(range(cfg.layers)):
        p = f"layer{i}"
        lc = cache["layers"][i]
        # FFN residual branch
        dr = drop.backward(dh, lc["r_drop_idx"])
        u, z1, f = lc["u"], lc["z1"], lc["f"]
        grads[f"{p}.ffn.w2"] += u.reshape(-1, cfg.ffn_dim).T @ dr.reshape(-1, cfg.model_dim)
        grads[f"{p}.ffn.b2"] += dr.sum((0, 1))
        du = dr @ P[f"{p}.ffn.w2"].T
        dz1 = du * _gelu_grad(z1)
        grads[f"{p}.ffn.w1"] += f.reshape(-1, cfg.model_dim).T @ dz1.reshape(-1, cfg.ffn_dim)
        grads[f"{p}.ffn.b1"] += dz1.sum((0, 1))
        df = dz1 @ P[f"{p}.ffn.w1"].T
        dh_mid, dg, db = _layer_norm_backward(df, lc["ln2"])
        grads[f"{p}.ln2.g"] += dg
        grads[f"{p}.ln2.b"] += db
        dh = dh + dh_mid
        # attention residual branch
        do = drop.backward(dh, lc["o_drop_idx"])
        ctx, a = lc["ctx"], lc["a"]
        grads[f"{p}.attn.wo"] += ctx.reshape(-1, cfg.model_dim).T @ do.reshape(-1, cfg.model_dim)
        grads[f"{p}.attn.bo"] += do.sum((0, 1))
        dctx = (do @ P[f"{p}.attn.wo"].T).reshape(B, T, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        pd, v, probs = lc["pd"], lc["v"], lc["probs"]
        dpd = dctx @ v.transpose(0, 1, 3, 2)
        dv = pd.transpose(0, 1, 3, 2) @ dctx
        dprobs = drop.backward(dpd, lc["probs_drop_idx"])
        dscores = (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * probs
        dq = (dscores @ lc["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ lc["q"]) * scale
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, cfg.model_dim)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, cfg.model_dim)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, cfg.model_dim)
        da = np.zeros_like(a)
        for w, dout in (("wq", dq), ("wk", dk), ("wv", dv)):
            grads[f"{p}.attn.{w}"] += a.reshape(-1, cfg.model_dim).T @ dout.reshape(-1, cfg.model_dim)
            grads[f"{p}.attn.b{w[1]}"] += dout.sum((0, 1))
            da += dout @ P[f"{p}.attn.{w}"].T
        dh_in, dg, db = _layer_norm_backward(da, lc["ln1"])
        grads[f"{p}.ln1.g"] += dg
        grads[f"{p}.ln1.b"] += db
        dh = dh + dh_in

    dh0 = drop.backward(dh, 0)
    np.add.at(grads["tok_emb"], batch.ids, dh0)
    grads["pos_emb"][:T] += dh0.sum(0)
    return loss, grads


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


def optimizer_step(state: ModelState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> ModelState:
    """Bias-corrected AdamW update with decoupled weight decay.

    Decay is skipped for 1-D parameters (biases and layer-norm terms).
    """
    state.ensure_optimizer()
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in state.params.items():
        g = grads[name]
        m = state.opt_m[name]
        v = state.opt_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p -= cfg.learning_rate * update
        if cfg.weight_decay > 0 and p.ndim >= 2:
            p -= cfg.learning_rate * cfg.weight_decay * p
    return state


def export_attention(state: ModelState, entry: TokenizedEntry, vocab) -> dict:
    """Head-averaged final-layer attention from the mask position.

    Position-ordered (token, score) pairs over non-pad positions; a map
    keyed by token would merge repeated tokens and break the sum-to-one
    property, so the export keeps positions explicit.
    """
    batch = Batch.from_entries([entry])
    _, attn_last = forward(state, batch, train=False)
    row = attn_last[0, :, entry.mask_position, :].mean(axis=0)
    tokens = []
    for pos in range(entry.length):
        tokens.append(
            {
                "position": pos,
                "token": vocab.id_to_token[int(entry.ids[pos])],
                "score": float(row[pos]),
            }
        )
    return {"mask_position": int(entry.mask_position), "tokens": tokens}


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(state: ModelState, path):
    """Binary checkpoint: magic, JSON header, tensors in declaration order.

    Optimizer moment buffers follow the parameters when present. A
    human-readable `<path>.config.toml` sidecar is written alongside.
    """
    path = str(path)
    cfg = state.config
    header = {
        "config": asdict(cfg),
        "has_optimizer": state.opt_m is not None,
        "step": state.step,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    order = [name for name, _ in param_shapes(cfg)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for name in order:
            fh.write(np.ascontiguousarray(state.params[name], dtype=_le(cfg)).tobytes())
        if state.opt_m is not None:
            for buf in (state.opt_m, state.opt_v):
                for name in order:
                    fh.write(np.ascontiguousarray(buf[name], dtype=_le(cfg)).tobytes())
    with open(path + ".config.toml", "w", encoding="utf-8") as fh:
        fh.write(_toml.dumps({"step": state.step, "model": asdict(cfg)}))


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        n = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        dt = _le(cfg)
        itemsize = np.dtype(dt).itemsize

        def read_group():
            out = {}
            for name, shape in param_shapes(cfg):
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * itemsize)
                if len(raw) != count * itemsize:
                    raise DataError(f"{path}: truncated tensor {name}")
                out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
            return out

        params = read_group()
        opt_m = opt_v = None
        if header["has_optimizer"]:
            opt_m = read_group()
            opt_v = read_group()
    return ModelState(cfg, params, opt_m, opt_v, step=int(header["step"]))


def _le(cfg: ModelConfig):
    return np.dtype("<f4") if cfg.dtype == "float32" else np.dtype("<f8")
