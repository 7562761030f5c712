"""TrinityDNA encoder.

Token ids -> learned base embedding -> Groove Fusion (sum of GELU'd 'same'
convolutions with kernels 3/5/7) -> post-LN DeepNorm blocks of sliding
multi-window attention and GEGLU feed-forward -> final LayerNorm. With the
gated reverse-complement wrapper the same encoder also reads the reverse
complement strand; its states are flipped back into forward coordinates and
added through a learned gate.

Arrays are batch-first: ids (B, N), hidden states (B, N, H).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, ParamStore, Parameter, RandomSource, Tensor
from .tokenizer import PAD, VOCAB_SIZE, reverse_complement_ids

# name: (layers, hidden, ffn_hidden, heads, seq_len, peak_lr)
PRESETS = {
    "6M": (8, 256, 682, 8, 8192, 1e-3),
    "40M": (10, 576, 1536, 8, 8192, 6e-4),
    "85M": (12, 768, 2048, 12, 8192, 5.5e-4),
    "170M": (24, 768, 2048, 16, 8192, 5e-4),
    "470M": (24, 1280, 3413, 20, 8192, 4e-4),
    "1B": (24, 2048, 5461, 32, 8192, 3e-4),
    "1B-30k": (24, 2048, 5461, 32, 30720, 2e-4),
    "1B-100k": (24, 2048, 5461, 32, 102400, 1e-4),
    # desk-scale stand-ins
    "micro": (2, 64, 170, 4, 512, 1e-3),
    "nano": (1, 16, 32, 2, 64, 1e-3),
}


def ladder_windows(seq_len: int, heads: int) -> list[int]:
    """Spread heads evenly over window radii {N/64, N/16, N/4, N}, each >= 1."""
    rungs = [max(1, seq_len // 64), max(1, seq_len // 16), max(1, seq_len // 4), max(1, seq_len)]
    return [rungs[h * len(rungs) // heads] for h in range(heads)]


@dataclass
class ModelConfig:
    layers: int
    hidden: int
    ffn_hidden: int
    heads: int
    window_sizes: list = field(default_factory=list)
    kernel_sizes: tuple = (3, 5, 7)
    vocab_size: int = VOCAB_SIZE
    rope_base: float = 10000.0
    ntk_factor: float | None = None
    grc_enabled: bool = True
    grc_sigma: str = "sigmoid"
    init_std: float = 0.02

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if not self.window_sizes:
            self.window_sizes = ladder_windows(512, self.heads)
        self.validate()

    def validate(self) -> None:
        if self.layers < 0 or self.hidden < 1 or self.heads < 1 or self.ffn_hidden < 1:
            raise ConfigError("layers >= 0 and hidden, heads, ffn_hidden >= 1 required")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dim {self.head_dim} must be even for rotary embedding")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        for layer in range(self.layers):
            w = self.layer_windows(layer)
            if len(w) != self.heads:
                raise ConfigError(f"layer {layer}: {len(w)} window sizes for {self.heads} heads")
            if min(w) < 0:
                raise ConfigError("window sizes must be non-negative")
        if self.grc_sigma not in ("sigmoid", "identity"):
            raise ConfigError(f"grc_sigma must be 'sigmoid' or 'identity', got {self.grc_sigma!r}")
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size is fixed at {VOCAB_SIZE}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def deepnorm_alpha(self) -> float:
        return (2.0 * self.layers) ** 0.25 if self.layers else 1.0

    @property
    def deepnorm_beta(self) -> float:
        return (8.0 * self.layers) ** -0.25 if self.layers else 1.0

    @property
    def max_kernel_radius(self) -> int:
        return (max(self.kernel_sizes) - 1) // 2

    def layer_windows(self, layer: int) -> list[int]:
        w = self.window_sizes
        if w and isinstance(w[0], (list, tuple)):
            return [int(v) for v in w[layer]]
        return [int(v) for v in w]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def preset_config(name: str, seq_len: int | None = None, **overrides) -> ModelConfig:
    """Config for a named size; windows follow the ladder for ``seq_len``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    layers, hidden, ffn, heads, default_len, _ = PRESETS[name]
    seq_len = seq_len or default_len
    kw = dict(layers=layers, hidden=hidden, ffn_hidden=ffn, heads=heads,
              window_sizes=ladder_windows(seq_len, heads))
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LoraAdapter:
    target: str
    a: Parameter  # (r, d_in)
    b: Parameter  # (d_out, r)
    rank: int
    alpha: float
    merged: bool = False

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class ModelParams(ParamStore):
    """Named parameters plus any attached LoRA adapters."""

    def __init__(self, params=()):
        super().__init__(params)
        self.adapters: dict[str, LoraAdapter] = {}

    def copy(self) -> "ModelParams":
        out = ModelParams(Parameter(p.data.copy(), p.name, p.requires_grad) for p in self)
        for path, ad in self.adapters.items():
            out.adapters[path] = LoraAdapter(
                path,
                Parameter(ad.a.data.copy(), ad.a.name, ad.a.requires_grad),
                Parameter(ad.b.data.copy(), ad.b.name, ad.b.requires_grad),
                ad.rank, ad.alpha, ad.merged,
            )
        return out

    def adapter_params(self) -> list[Parameter]:
        return [p for ad in self.adapters.values() for p in (ad.a, ad.b)]

    def set_trainable(self, trainable: bool) -> None:
        for p in self:
            p.requires_grad = trainable


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every parameter's shape, derived from the config alone."""
    h, f, v = config.hidden, config.ffn_hidden, config.vocab_size
    shapes = {"embed.weight": (v, h)}
    for k in config.kernel_sizes:
        shapes[f"groove.k{k}.weight"] = (k, h, h)
        shapes[f"groove.k{k}.bias"] = (h,)
    for layer in range(config.layers):
        p = f"layer.{layer}"
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{p}.attn.{w}"] = (h, h)
        shapes[f"{p}.ln1.gain"] = (h,)
        shapes[f"{p}.ln1.bias"] = (h,)
        shapes[f"{p}.ffn.w_1a"] = (h, f)
        shapes[f"{p}.ffn.b_1a"] = (f,)
        shapes[f"{p}.ffn.w_1b"] = (h, f)
        shapes[f"{p}.ffn.b_1b"] = (f,)
        shapes[f"{p}.ffn.w_2"] = (f, h)
        shapes[f"{p}.ffn.b_2"] = (h,)
        shapes[f"{p}.ln2.gain"] = (h,)
        shapes[f"{p}.ln2.bias"] = (h,)
    shapes["final_ln.gain"] = (h,)
    shapes["final_ln.bias"] = (h,)
    shapes["gate.w_g"] = (h, h)
    shapes["head.weight"] = (h, v)
    shapes["head.bias"] = (v,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter count (LoRA adapters excluded)."""
    h, f, v = config.hidden, config.ffn_hidden, config.vocab_size
    embed = v * h + sum(k * h * h + h for k in config.kernel_sizes)
    per_layer = 4 * h * h + 2 * (h * f + f) + (f * h + h) + 4 * h
    head = 2 * h + h * h + h * v + v
    return embed + config.layers * per_layer + head


_BETA_SCALED = ("attn.w_v", "attn.w_o", "ffn.w_1a", "ffn.w_1b", "ffn.w_2")


def init_params(config: ModelConfig, rng: RandomSource) -> ModelParams:
    """Gaussian init; DeepNorm beta scales value/output/FFN weights.

    The base embedding is N(0, 1) and each groove kernel N(0, 1/(k*H)) so the
    embedding stage starts at unit scale.
    """
    params = ModelParams()
    std = config.init_std
    beta = config.deepnorm_beta
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias") or ".b_" in name:
            data = np.zeros(shape)
        elif name == "embed.weight":
            data = rng.normal(shape, 1.0)
        elif name.startswith("groove."):
            data = rng.normal(shape, 1.0 / math.sqrt(shape[0] * shape[1]))
        elif name.endswith(_BETA_SCALED):
            data = rng.normal(shape, std * beta)
        else:
            data = rng.normal(shape, std)
        params.add(Parameter(data, name))
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    shapes = param_shapes(config)
    if set(shapes) != set(params.names()):
        missing = sorted(set(shapes) - set(params.names()))
        extra = sorted(set(params.names()) - set(shapes))
        raise ConfigError(f"parameter set does not match config (missing {missing[:3]}, extra {extra[:3]})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: shape {params[name].shape}, config implies {shape}")


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    """x @ W, plus (alpha/r) * x A^T B^T when an unmerged adapter targets W."""
    y = nx.matmul(x, params[name])
    ad = params.adapters.get(name)
    if ad is not None and not ad.merged:
        low = nx.matmul(nx.matmul(x, nx.transpose(ad.a)), nx.transpose(ad.b))
        y = nx.add(y, nx.mul(low, ad.scale))
    return y


def embed(ids: np.ndarray, params: ModelParams) -> Tensor:
    return nx.take_rows(params["embed.weight"], ids)


def groove_fusion(x: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Sum over kernel sizes of GELU(conv_k(x))."""
    out = None
    for k in config.kernel_sizes:
        branch = nx.gelu(nx.conv1d_same(x, params[f"groove.k{k}.weight"], params[f"groove.k{k}.bias"]))
        out = branch if out is None else nx.add(out, branch)
    return out


def groove_fusion_embed(ids: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    return groove_fusion(embed(ids, params), params, config)


def rope_apply(x: Tensor, positions: np.ndarray, base: float = 10000.0,
               ntk_factor: float | None = None) -> Tensor:
    cos, sin = nx.rope_tables(positions, x.shape[-1], base, ntk_factor)
    return nx.rope(x, cos, sin)


@lru_cache(maxsize=64)
def _window_allow(n: int, windows: tuple) -> np.ndarray:
    dist = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    allow = np.stack([dist <= w for w in windows])
    allow.setflags(write=False)
    return allow


def attention_allow(n: int, windows: Sequence[int], pad_mask: np.ndarray | None = None) -> np.ndarray:
    """(B or 1, heads, N, N) boolean support: |i-j| <= L_h, PAD keys excluded except self."""
    allow = _window_allow(n, tuple(int(w) for w in windows))[None]
    if pad_mask is not None and pad_mask.any():
        key_ok = ~pad_mask[:, None, None, :] | np.eye(n, dtype=bool)[None, None]
        allow = allow & key_ok
    return allow


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1,) + x.shape), True
    return x, False


def smwa_layer(x: Tensor, params: ModelParams, config: ModelConfig, layer: int = 0,
               pad_mask: np.ndarray | None = None, trace: list | None = None) -> Tensor:
    """Sliding multi-window attention; head h sees keys with |i - j| <= L_h."""
    x, squeeze = _as_batch(x)
    b, n, hdim = x.shape
    nh, d = config.heads, config.head_dim
    p = f"layer.{layer}.attn"

    def heads(t):
        return nx.transpose(nx.reshape(t, (b, n, nh, d)), (0, 2, 1, 3))

    q = heads(linear(x, params, f"{p}.w_q"))
    k = heads(linear(x, params, f"{p}.w_k"))
    v = heads(linear(x, params, f"{p}.w_v"))
    cos, sin = nx.rope_tables(np.arange(n), d, config.rope_base, config.ntk_factor)
    q = nx.rope(q, cos, sin)
    k = nx.rope(k, cos, sin)
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(d))
    allow = attention_allow(n, config.layer_windows(layer), pad_mask)
    probs = nx.masked_softmax(scores, allow)
    if trace is not None:
        trace.append((layer, probs.data, np.broadcast_to(allow, probs.shape)))
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (b, n, hdim))
    out = linear(ctx, params, f"{p}.w_o")
    return nx.reshape(out, (n, hdim)) if squeeze else out


def geglu_ffn(x: Tensor, params: ModelParams, layer: int = 0) -> Tensor:
    """(GELU(x W_1a + b_1a) * (x W_1b + b_1b)) W_2 + b_2."""
    p = f"layer.{layer}.ffn"
    a = nx.gelu(nx.add(linear(x, params, f"{p}.w_1a"), params[f"{p}.b_1a"]))
    g = nx.add(linear(x, params, f"{p}.w_1b"), params[f"{p}.b_1b"])
    return nx.add(linear(nx.mul(a, g), params, f"{p}.w_2"), params[f"{p}.b_2"])


def encoder_from_embeddings(x: Tensor, params: ModelParams, config: ModelConfig,
                            pad_mask: np.ndarray | None = None, trace: list | None = None) -> Tensor:
    alpha = config.deepnorm_alpha
    h = groove_fusion(x, params, config)
    for layer in range(config.layers):
        a = smwa_layer(h, params, config, layer, pad_mask, trace)
        h = nx.layer_norm(nx.add(nx.mul(h, alpha), a),
                          params[f"layer.{layer}.ln1.gain"], params[f"layer.{layer}.ln1.bias"])
        f = geglu_ffn(h, params, layer)
        h = nx.layer_norm(nx.add(nx.mul(h, alpha), f),
                          params[f"layer.{layer}.ln2.gain"], params[f"layer.{layer}.ln2.bias"])
    return nx.layer_norm(h, params["final_ln.gain"], params["final_ln.bias"])


def _ids_and_pad(ids, pad_mask):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask)[None]
    if pad_mask is None:
        pad_mask = ids == PAD
    return ids, np.asarray(pad_mask, dtype=bool)


def encoder_forward(ids, params: ModelParams, config: ModelConfig,
                    pad_mask: np.ndarray | None = None, trace: list | None = None) -> Tensor:
    """Single-strand encoder; ids (N,) or (B, N) -> (B, N, H)."""
    ids, pad_mask = _ids_and_pad(ids, pad_mask)
    return encoder_from_embeddings(embed(ids, params), params, config, pad_mask, trace)


def gate_activation(t: Tensor, config: ModelConfig) -> Tensor:
    return nx.sigmoid(t) if config.grc_sigma == "sigmoid" else t


def grc_from_embeddings(x_both: Tensor, batch: int, params: ModelParams, config: ModelConfig,
                        pad_both: np.ndarray, trace: list | None = None) -> Tensor:
    """``x_both`` stacks forward-strand rows [:batch] and reverse-complement rows [batch:]."""
    hid = encoder_from_embeddings(x_both, params, config, pad_both, trace)
    fwd = nx.getitem(hid, slice(0, batch))
    rc_aligned = nx.flip(nx.getitem(hid, slice(batch, 2 * batch)), axis=1)
    gated = gate_activation(nx.matmul(rc_aligned, nx.transpose(params["gate.w_g"])), config)
    return nx.add(fwd, gated)


def grc_inputs(ids: np.ndarray, pad_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack forward ids with their reverse complement along the batch axis."""
    rc = reverse_complement_ids(ids)
    return np.concatenate([ids, rc]), np.concatenate([pad_mask, pad_mask[:, ::-1]])


def grc_forward(ids, params: ModelParams, config: ModelConfig,
                pad_mask: np.ndarray | None = None, trace: list | None = None) -> Tensor:
    """f(S) + sigma(Flip(f(RC(S))) W_G^T), with one shared encoder."""
    ids, pad_mask = _ids_and_pad(ids, pad_mask)
    both, pad_both = grc_inputs(ids, pad_mask)
    return grc_from_embeddings(embed(both, params), len(ids), params, config, pad_both, trace)


def hidden_states(ids, params: ModelParams, config: ModelConfig,
                  pad_mask: np.ndarray | None = None, trace: list | None = None) -> Tensor:
    """Final hidden states through the GRC wrapper when enabled."""
    if config.grc_enabled:
        return grc_forward(ids, params, config, pad_mask, trace)
    return encoder_forward(ids, params, config, pad_mask, trace)


def lm_logits(hidden: Tensor, params: ModelParams) -> Tensor:
    return nx.add(nx.matmul(hidden, params["head.weight"]), params["head.bias"])


# ---------------------------------------------------------------------------
# LoRA


def lora_attach(params: ModelParams, path: str, r: int, alpha: float, rng: RandomSource,
                init_std: float = 0.02) -> LoraAdapter:
    """Attach a rank-r adapter to the 2-D weight at ``path`` (A Gaussian, B zero)."""
    if path not in params or params[path].ndim != 2:
        raise ConfigError(f"no 2-D parameter named {path!r} to adapt")
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    if path in params.adapters:
        raise ConfigError(f"{path!r} already has an adapter")
    d_in, d_out = params[path].shape
    ad = LoraAdapter(
        path,
        Parameter(rng.normal((r, d_in), init_std), f"lora.{path}.a"),
        Parameter(np.zeros((d_out, r)), f"lora.{path}.b"),
        int(r), float(alpha),
    )
    params.adapters[path] = ad
    return ad


def lora_delta(ad: LoraAdapter) -> np.ndarray:
    """(d_in, d_out) weight update equal to (alpha/r) (B A)^T."""
    return ad.scale * (ad.b.data @ ad.a.data).T


def lora_merge(params: ModelParams) -> ModelParams:
    """Plain parameter store with every unmerged adapter folded into its weight."""
    out = ModelParams(Parameter(p.data.copy(), p.name, p.requires_grad) for p in params)
    for path, ad in params.adapters.items():
        if not ad.merged:
            out[path].data += lora_delta(ad)
    return out


ATTENTION_PROJECTIONS = ("w_q", "w_k", "w_v", "w_o")


def attention_paths(config: ModelConfig) -> list[str]:
    return [f"layer.{l}.attn.{w}" for l in range(config.layers) for w in ATTENTION_PROJECTIONS]
