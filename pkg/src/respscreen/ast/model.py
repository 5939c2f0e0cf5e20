"""Patch-based spectrogram transformer in numpy with hand-written backprop.

Layout: patch projection -> [cls] + patches + positional embeddings ->
pre-norm encoder blocks (multi-head self-attention, GELU MLP) -> final
layer norm on the class token -> linear classifier.

Parameters live in a flat ``dict[str, ndarray]``. Linear maps are stored as
``<name>.w`` (``[d_in, d_out]``) and ``<name>.b``; LoRA factors, when present,
as ``<name>.lora_a`` (``[d_in, r]``) and ``<name>.lora_b`` (``[r, d_out]``).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from ..errors import InvalidParameter
from ..features import RgbSpectrogramImage

LN_EPS = 1e-6
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class AstConfig:
    input_h: int = 128
    input_w: int = 483
    patch_h: int = 16
    patch_w: int = 16
    stride: int = 16
    embed_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mlp_ratio: int = 4
    n_classes: int = 2
    in_channels: int = 3

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise InvalidParameter(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.patch_h > self.input_h or self.patch_w > self.input_w:
            raise InvalidParameter("patch larger than input")
        if min(self.patch_h, self.patch_w, self.stride, self.n_layers, self.n_classes, self.mlp_ratio) < 1:
            raise InvalidParameter("sizes and stride must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return (
            (self.input_h - self.patch_h) // self.stride + 1,
            (self.input_w - self.patch_w) // self.stride + 1,
        )

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.in_channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 4
    alpha: float = 8.0
    target_selectors: tuple[str, ...] = ("qkv", "out_proj", "fc1", "fc2")

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidParameter("LoRA rank must be >= 1")
        unknown = set(self.target_selectors) - set(LORA_SELECTORS)
        if unknown:
            raise InvalidParameter(f"unknown LoRA selector(s): {sorted(unknown)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_selectors"] = list(self.target_selectors)
        return d


LORA_SELECTORS = ("qkv", "out_proj", "fc1", "fc2", "proj")
EMBEDDING_PARAMS = ("patch.proj.w", "patch.proj.b", "cls", "pos")


def linear_names(cfg: AstConfig) -> list[str]:
    names = ["patch.proj"]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        names += [f"{p}.attn.qkv", f"{p}.attn.out_proj", f"{p}.mlp.fc1", f"{p}.mlp.fc2"]
    return names + ["head"]


def parameter_shapes(cfg: AstConfig) -> dict[str, tuple[int, ...]]:
    D, F, T = cfg.embed_dim, cfg.mlp_dim, cfg.n_patches + 1
    shapes: dict[str, tuple[int, ...]] = {
        "patch.proj.w": (cfg.patch_dim, D),
        "patch.proj.b": (D,),
        "cls": (D,),
        "pos": (T, D),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        shapes.update({
            f"{p}.ln1.g": (D,), f"{p}.ln1.b": (D,),
            f"{p}.attn.qkv.w": (D, 3 * D), f"{p}.attn.qkv.b": (3 * D,),
            f"{p}.attn.out_proj.w": (D, D), f"{p}.attn.out_proj.b": (D,),
            f"{p}.ln2.g": (D,), f"{p}.ln2.b": (D,),
            f"{p}.mlp.fc1.w": (D, F), f"{p}.mlp.fc1.b": (F,),
            f"{p}.mlp.fc2.w": (F, D), f"{p}.mlp.fc2.b": (D,),
        })
    shapes.update({"norm.g": (D,), "norm.b": (D,), "head.w": (D, cfg.n_classes), "head.b": (cfg.n_classes,)})
    return shapes


def parameter_count(cfg: AstConfig) -> int:
    """Closed-form count of base (non-adapter) parameters."""
    D, F, C, P = cfg.embed_dim, cfg.mlp_dim, cfg.n_classes, cfg.patch_dim
    block = 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D + (D * F + F) + (F * D + D)
    return (P * D + D) + D + (cfg.n_patches + 1) * D + cfg.n_layers * block + 2 * D + (D * C + C)


@dataclass
class AstModel:
    config: AstConfig
    params: dict[str, np.ndarray]
    lora: LoraSpec | None = None
    frozen: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def init(cls, config: AstConfig, seed: int = 0, dtype=np.float32) -> "AstModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".g"):
                v = np.ones(shape)
            elif name.endswith(".b"):
                v = np.zeros(shape)
            elif name in ("cls", "pos"):
                v = rng.normal(0.0, 0.02, shape)
            else:
                v = rng.normal(0.0, math.sqrt(2.0 / (shape[0] + shape[1])), shape)
            params[name] = v.astype(dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["cls"].dtype

    def copy(self) -> "AstModel":
        return AstModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.lora, self.frozen)

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


# ---------------------------------------------------------------- patches

def patchify_array(x: np.ndarray, cfg: AstConfig) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, gh*gw, ph*pw*C]`` in row-major grid order."""
    if x.ndim != 4 or x.shape[1:] != (cfg.input_h, cfg.input_w, cfg.in_channels):
        raise InvalidParameter(
            f"expected input [B, {cfg.input_h}, {cfg.input_w}, {cfg.in_channels}], got {list(x.shape)}"
        )
    gh, gw = cfg.grid
    ph, pw, s = cfg.patch_h, cfg.patch_w, cfg.stride
    B, C = x.shape[0], x.shape[3]
    if s == ph and s == pw:
        x = x[:, : gh * ph, : gw * pw]
        p = x.reshape(B, gh, ph, gw, pw, C).transpose(0, 1, 3, 2, 4, 5)
    else:
        win = np.lib.stride_tricks.sliding_window_view(x, (ph, pw), axis=(1, 2))
        # win: [B, H-ph+1, W-pw+1, C, ph, pw]
        p = win[:, ::s, ::s][:, :gh, :gw].transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(p).reshape(B, gh * gw, ph * pw * C)


def patchify(img: RgbSpectrogramImage, cfg: AstConfig) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape
    if h < cfg.patch_h or w < cfg.patch_w:
        raise InvalidParameter(f"image {h}x{w} smaller than patch {cfg.patch_h}x{cfg.patch_w}")
    local = AstConfig(**{**cfg.to_dict(), "input_h": h, "input_w": w})
    return patchify_array(img.as_float()[None], local)[0], local.grid


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch_h: int, patch_w: int, channels: int = 3) -> np.ndarray:
    """Inverse of non-overlapping patchify: ``[gh*gw, ph*pw*C]`` -> ``[gh*ph, gw*pw, C]``."""
    gh, gw = grid
    p = patches.reshape(gh, gw, patch_h, patch_w, channels).transpose(0, 2, 1, 3, 4)
    return p.reshape(gh * patch_h, gw * patch_w, channels)


def images_to_input(images, cfg: AstConfig, dtype) -> np.ndarray:
    """Stack images (objects or arrays in [0, 1]) and map pixels to [-1, 1]."""
    if isinstance(images, RgbSpectrogramImage):
        images = [images]
    if isinstance(images, np.ndarray):
        x = images.astype(dtype) / dtype(255.0) if images.dtype == np.uint8 else images.astype(dtype)
        if x.ndim == 3:
            x = x[None]
    else:
        x = np.stack([im.as_float() for im in images]).astype(dtype)
    return (x - dtype(0.5)) * dtype(2.0)


# ---------------------------------------------------------------- layers

def _linear(params, name, x, lora: LoraSpec | None, cache):
    y = x @ params[name + ".w"] + params[name + ".b"]
    a_key = name + ".lora_a"
    if a_key in params:
        xa = x @ params[a_key]
        y = y + lora.scale * (xa @ params[name + ".lora_b"])
        cache[name] = (x, xa)
    else:
        cache[name] = (x, None)
    return y


def _linear_back(params, name, dy, lora, cache, grads, need):
    x, xa = cache[name]
    w = params[name + ".w"]
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    if need(name + ".w"):
        grads[name + ".w"] = x2.T @ dy2
    if need(name + ".b"):
        grads[name + ".b"] = dy2.sum(axis=0)
    dx = dy @ w.T
    if xa is not None:
        a, b, s = params[name + ".lora_a"], params[name + ".lora_b"], lora.scale
        dxa = (dy2 @ b.T) * s
        grads[name + ".lora_b"] = s * (xa.reshape(-1, xa.shape[-1]).T @ dy2)
        grads[name + ".lora_a"] = x2.T @ dxa
        dx = dx + (dxa @ a.T).reshape(dx.shape)
    return dx


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- network

def _forward(model: AstModel, x: np.ndarray, keep_cache: bool):
    cfg, p, lora = model.config, model.params, model.lora
    B = x.shape[0]
    D, H, dh = cfg.embed_dim, cfg.n_heads, cfg.head_dim
    cache: dict = {}
    attentions = []

    patches = patchify_array(x, cfg)
    tok = _linear(p, "patch.proj", patches, lora, cache)
    cls = np.broadcast_to(p["cls"], (B, 1, D))
    h = np.concatenate([cls, tok], axis=1) + p["pos"]
    T = h.shape[1]
    scale = 1.0 / math.sqrt(dh)

    for i in range(cfg.n_layers):
        pre = f"blocks.{i}"
        a_in, ln1 = _layernorm(h, p[pre + ".ln1.g"], p[pre + ".ln1.b"])
        qkv = _linear(p, pre + ".attn.qkv", a_in, lora, cache)
        qkv = qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        attentions.append(att)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        h = h + _linear(p, pre + ".attn.out_proj", o, lora, cache)

        m_in, ln2 = _layernorm(h, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
        u = _linear(p, pre + ".mlp.fc1", m_in, lora, cache)
        h = h + _linear(p, pre + ".mlp.fc2", _gelu(u), lora, cache)
        if keep_cache:
            cache[pre] = (ln1, q, k, v, att, ln2, u)

    z, lnf = _layernorm(h[:, 0], p["norm.g"], p["norm.b"])
    logits = _linear(p, "head", z, lora, cache)
    if keep_cache:
        cache["norm"] = lnf
        cache["shape"] = (B, T)
    return logits, attentions, cache


def _backward(model: AstModel, cache, dlogits, need) -> dict[str, np.ndarray]:
    cfg, p, lora = model.config, model.params, model.lora
    D, H, dh = cfg.embed_dim, cfg.n_heads, cfg.head_dim
    B, T = cache["shape"]
    scale = 1.0 / math.sqrt(dh)
    grads: dict[str, np.ndarray] = {}

    dz = _linear_back(p, "head", dlogits, lora, cache, grads, need)
    dcls, grads["norm.g"], grads["norm.b"] = _layernorm_back(dz, p["norm.g"], cache["norm"])
    dh_ = np.zeros((B, T, D), dtype=dlogits.dtype)
    dh_[:, 0] = dcls

    for i in reversed(range(cfg.n_layers)):
        pre = f"blocks.{i}"
        ln1, q, k, v, att, ln2, u = cache[pre]

        dg = _linear_back(p, pre + ".mlp.fc2", dh_, lora, cache, grads, need)
        du = dg * _gelu_grad(u)
        dm = _linear_back(p, pre + ".mlp.fc1", du, lora, cache, grads, need)
        dx, grads[pre + ".ln2.g"], grads[pre + ".ln2.b"] = _layernorm_back(dm, p[pre + ".ln2.g"], ln2)
        dh_ = dh_ + dx

        do = _linear_back(p, pre + ".attn.out_proj", dh_, lora, cache, grads, need)
        do = do.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, T, 3 * D)
        da = _linear_back(p, pre + ".attn.qkv", dqkv, lora, cache, grads, need)
        dx, grads[pre + ".ln1.g"], grads[pre + ".ln1.b"] = _layernorm_back(da, p[pre + ".ln1.g"], ln1)
        dh_ = dh_ + dx

    grads["pos"] = dh_.sum(axis=0)
    grads["cls"] = dh_[:, 0].sum(axis=0)
    if need("patch.proj.w") or need("patch.proj.b") or "patch.proj.lora_a" in p:
        _linear_back(p, "patch.proj", dh_[:, 1:], lora, cache, grads, need)
    return grads


def forward(model: AstModel, images) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits and per-layer attention ``[n_heads, T, T]`` (batched inputs get a leading axis).

    ``T = n_patches + 1``; index 0 is the class token.
    """
    single = isinstance(images, RgbSpectrogramImage) or (isinstance(images, np.ndarray) and images.ndim == 3)
    x = images_to_input(images, model.config, model.dtype.type)
    logits, attentions, _ = _forward(model, x, keep_cache=False)
    if single:
        return logits[0], [a[0] for a in attentions]
    return logits, attentions


def predict_proba(model: AstModel, images, batch_size: int = 32) -> np.ndarray:
    """Class probabilities ``[n, n_classes]`` for an array ``[n, H, W, 3]``."""
    out = []
    for s in range(0, len(images), batch_size):
        x = images_to_input(images[s : s + batch_size], model.config, model.dtype.type)
        logits, _, _ = _forward(model, x, keep_cache=False)
        out.append(_softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def loss_and_grads(model: AstModel, images, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and gradients for every parameter.

    Frozen parameters receive all-zero gradients.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise InvalidParameter("empty batch")
    if labels.min() < 0 or labels.max() >= model.config.n_classes:
        raise InvalidParameter(f"labels must lie in [0, {model.config.n_classes})")
    x = images_to_input(images, model.config, model.dtype.type)
    if x.shape[0] != labels.size:
        raise InvalidParameter("batch size and label count differ")
    logits, _, cache = _forward(model, x, keep_cache=True)
    loss, dlogits = cross_entropy(logits, labels)
    frozen = model.frozen
    grads = _backward(model, cache, dlogits.astype(model.dtype), lambda k: k not in frozen)
    out = {}
    for name, value in model.params.items():
        g = grads.get(name)
        if name in frozen or g is None:
            out[name] = np.zeros_like(value)
        else:
            out[name] = g.astype(value.dtype, copy=False).reshape(value.shape)
    return loss, out


# ---------------------------------------------------------------- LoRA

def lora_wrap(model: AstModel, spec: LoraSpec, seed: int = 0) -> AstModel:
    """Add low-rank adapters to the selected linear maps and freeze the base.

    Trainable after wrapping: adapters, classifier head and the embeddings
    (patch projection, class token, positions). ``lora_b`` starts at zero so
    outputs are unchanged.
    """
    if model.lora is not None:
        raise InvalidParameter("model already carries LoRA adapters")
    targets = [n for n in linear_names(model.config) if n.rsplit(".", 1)[-1] in spec.target_selectors]
    if not targets:
        raise InvalidParameter(f"selectors {spec.target_selectors} match no linear map")
    matched = {n.rsplit(".", 1)[-1] for n in targets}
    missing = set(spec.target_selectors) - matched
    if missing:
        raise InvalidParameter(f"selector(s) {sorted(missing)} match no linear map")

    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    dt = model.dtype
    for name in targets:
        d_in, d_out = params[name + ".w"].shape
        params[name + ".lora_a"] = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, spec.rank)).astype(dt)
        params[name + ".lora_b"] = np.zeros((spec.rank, d_out), dtype=dt)
    trainable_base = set(EMBEDDING_PARAMS) | {"head.w", "head.b"}
    frozen = frozenset(k for k in model.params if k not in trainable_base)
    return AstModel(model.config, params, copy.deepcopy(spec), frozen)


def trainable_fraction(model: AstModel) -> float:
    total = model.n_parameters()
    trainable = sum(v.size for k, v in model.params.items() if k not in model.frozen)
    return trainable / total
