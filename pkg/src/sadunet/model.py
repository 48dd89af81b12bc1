"""Dense-UNet mask estimator with optional self-attention subnets.

Block numbering runs 1..2L+1 for ``L`` levels: blocks 1..L form the encoder
(each followed by max pooling), block L+1 is the bottleneck, and blocks
L+2..2L+1 form the decoder (each preceded by a transpose convolution and a
skip concatenation).  An attention subnet after block ``b`` doubles that
block's channel count before the next down/upsampling step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .audio import MagPhase
from .layers import concat_channels, conv2d, conv2d_transpose, linear, maxpool2x2
from .tensor import ContractError, ShapeError, Tensor, crop, default_dtype, elu, matmul, relu, reshape, softmax_rows, transpose

__all__ = [
    "ModelConfig",
    "param_shapes",
    "init_params",
    "cast_params",
    "parameter_count",
    "dense_block_forward",
    "attention_subnet_forward",
    "unet_forward",
    "pad_magnitude",
    "predict_masks",
    "apply_masks",
    "describe",
]


@dataclass
class ModelConfig:
    channels: int = 32          # growth channels C
    layers: int = 4             # dense layers per block K
    levels: int = 4             # down/upsampling steps
    attn_channels: int = 5      # C'
    embed_dim: int = 20         # E
    freq_bins: int = 513
    window_frames: int | None = None  # defaults to 1250 with attention, 128 without
    attention: bool = True
    attn_blocks: tuple[int, ...] | None = None  # defaults to 2..2L

    def __post_init__(self):
        for name in ("channels", "layers", "levels", "attn_channels", "embed_dim", "freq_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.window_frames is None:
            self.window_frames = 1250 if self.attention else 128
        if self.window_frames < 1:
            raise ValueError("window_frames must be positive")
        if self.attn_blocks is None:
            self.attn_blocks = tuple(range(2, 2 * self.levels + 1))
        self.attn_blocks = tuple(sorted(set(int(b) for b in self.attn_blocks)))
        if 1 in self.attn_blocks:
            raise ValueError("block 1 never carries an attention subnet")
        bad = [b for b in self.attn_blocks if not 1 <= b <= self.n_blocks]
        if bad:
            raise ValueError(f"attention block indices out of range 2..{self.n_blocks}: {bad}")

    @property
    def n_blocks(self) -> int:
        return 2 * self.levels + 1

    @property
    def freq_pad(self) -> int:
        m = 2 ** self.levels
        return -(-self.freq_bins // m) * m

    @property
    def time_pad(self) -> int:
        m = 2 ** self.levels
        return -(-self.window_frames // m) * m

    @property
    def active_attn_blocks(self) -> tuple[int, ...]:
        return self.attn_blocks if self.attention else ()

    def depth(self, block: int) -> int:
        L = self.levels
        return block - 1 if block <= L + 1 else 2 * L + 1 - block

    def level_shape(self, depth: int) -> tuple[int, int]:
        return self.freq_pad >> depth, self.time_pad >> depth

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attn_blocks"] = list(self.attn_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("attn_blocks") is not None:
            d["attn_blocks"] = tuple(d["attn_blocks"])
        return cls(**d)


def _block_out_channels(cfg: ModelConfig, block: int) -> int:
    return cfg.channels * (2 if block in cfg.active_attn_blocks else 1)


def _block_in_channels(cfg: ModelConfig, block: int) -> int:
    L, C = cfg.levels, cfg.channels
    if block == 1:
        return 1
    if block <= L + 1:
        return _block_out_channels(cfg, block - 1)
    return 2 * C  # upsampled C + skip C


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the order fixes initialisation and serialisation."""
    C, K, L = cfg.channels, cfg.layers, cfg.levels
    shapes = []
    for b in range(1, cfg.n_blocks + 1):
        if b > L + 1:
            j = b - (L + 1)
            shapes.append((f"up{j}.weight", (_block_out_channels(cfg, b - 1), C, 2, 2)))
            shapes.append((f"up{j}.bias", (C,)))
        cin = _block_in_channels(cfg, b)
        for l in range(1, K + 1):
            shapes.append((f"block{b}.layer{l}.weight", (C, cin + (l - 1) * C, 3, 3)))
            shapes.append((f"block{b}.layer{l}.bias", (C,)))
        if b in cfg.active_attn_blocks:
            F = cfg.level_shape(cfg.depth(b))[0]
            Ca, E = cfg.attn_channels, cfg.embed_dim
            p = f"attn{b}"
            shapes += [
                (f"{p}.query_conv.weight", (Ca, C, 1, 1)), (f"{p}.query_conv.bias", (Ca,)),
                (f"{p}.key_conv.weight", (Ca, C, 1, 1)), (f"{p}.key_conv.bias", (Ca,)),
                (f"{p}.value_conv.weight", (C, C, 1, 1)), (f"{p}.value_conv.bias", (C,)),
                (f"{p}.query.weight", (E, Ca * F)), (f"{p}.query.bias", (E,)),
                (f"{p}.key.weight", (E, Ca * F)), (f"{p}.key.bias", (E,)),
            ]
    last = _block_out_channels(cfg, cfg.n_blocks)
    shapes += [
        ("reorg.weight", (C, last, 1, 1)), ("reorg.bias", (C,)),
        ("out_voice.weight", (1, C, 1, 1)), ("out_voice.bias", (1,)),
        ("out_accomp.weight", (1, C, 1, 1)), ("out_accomp.bias", (1,)),
    ]
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    # conv (out, in, kh, kw) and transpose conv (in, out, 2, 2) give the same fan sum
    rf = shape[2] * shape[3]
    return shape[1] * rf, shape[0] * rf


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-a, a, size=shape)
        params[name] = Tensor(arr.astype(np.float32).astype(default_dtype()), requires_grad=True, name=name)
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward pieces


def dense_block_forward(x: Tensor, params: dict[str, Tensor], block: int, layers: int) -> Tensor:
    """x_l = ELU(conv3x3([x_{l-1}, ..., x_0])); returns x_K."""
    feats = [x]
    for l in range(1, layers + 1):
        w = params[f"block{block}.layer{l}.weight"]
        if w.shape[1] != sum(f.shape[0] for f in feats):
            raise ShapeError(f"block{block}.layer{l}: weight {w.shape} does not fit "
                             f"{sum(f.shape[0] for f in feats)} input channels")
        inp = feats[0] if len(feats) == 1 else concat_channels(*reversed(feats))
        feats.append(elu(conv2d(inp, w, params[f"block{block}.layer{l}.bias"])))
    return feats[-1]


def attention_subnet_forward(x: Tensor, params: dict[str, Tensor], prefix: str,
                             maps: dict | None = None) -> Tensor:
    """Self-attention across time segments; returns concat(x, O) with 2C channels.

    ``maps``, when given, receives the attention matrix (rows = query segments)
    under ``prefix``.
    """
    C, F, T = x.shape
    if T <= 0:
        raise ShapeError("attention needs at least one time segment")

    def proj(kind):
        h = conv2d(x, params[f"{prefix}.{kind}_conv.weight"], params[f"{prefix}.{kind}_conv.bias"])
        h = reshape(h, (h.shape[0] * F, T))
        return linear(h, params[f"{prefix}.{kind}.weight"], params[f"{prefix}.{kind}.bias"])

    q, k = proj("query"), proj("key")
    scores = matmul(transpose(q), k)  # s_ij = Q(i)^T K(j)
    beta = softmax_rows(scores)
    v = conv2d(x, params[f"{prefix}.value_conv.weight"], params[f"{prefix}.value_conv.bias"])
    v = reshape(v, (C * F, T))
    o = matmul(v, transpose(beta))  # O(i) = sum_j beta_ij V(j)
    if maps is not None:
        maps[prefix] = beta.data.copy()
    return concat_channels(x, reshape(o, (C, F, T)))


def unet_forward(magnitude: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                 maps: dict | None = None) -> tuple[Tensor, Tensor]:
    """Padded (1, F_pad, T_pad) magnitude -> cropped voice and accompaniment masks."""
    if magnitude.shape != (1, cfg.freq_pad, cfg.time_pad):
        raise ShapeError(f"expected input (1, {cfg.freq_pad}, {cfg.time_pad}), got {magnitude.shape}")
    L, K = cfg.levels, cfg.layers
    attn = cfg.active_attn_blocks

    def stage(h, b):
        h = dense_block_forward(h, params, b, K)
        out = attention_subnet_forward(h, params, f"attn{b}", maps) if b in attn else h
        return h, out

    h = magnitude
    skips = []
    for b in range(1, L + 1):
        block_out, h = stage(h, b)
        skips.append(block_out)
        h = maxpool2x2(h)
    _, h = stage(h, L + 1)
    for j in range(1, L + 1):
        h = conv2d_transpose(h, params[f"up{j}.weight"], params[f"up{j}.bias"])
        h = concat_channels(h, skips[L - j])
        _, h = stage(h, L + 1 + j)
    h = elu(conv2d(h, params["reorg.weight"], params["reorg.bias"]))
    masks = []
    for head in ("out_voice", "out_accomp"):
        m = relu(conv2d(h, params[f"{head}.weight"], params[f"{head}.bias"]))
        masks.append(reshape(crop(m, (0, slice(0, cfg.freq_bins), slice(0, cfg.window_frames))),
                             (cfg.freq_bins, cfg.window_frames)))
    return masks[0], masks[1]


def pad_magnitude(mag: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Zero-pad an (F_in, T<=T_window) magnitude to the network's (1, F_pad, T_pad) input."""
    F, T = mag.shape
    if F != cfg.freq_bins or T > cfg.window_frames:
        raise ShapeError(f"magnitude {mag.shape} does not fit ({cfg.freq_bins}, <= {cfg.window_frames})")
    if np.any(mag < 0):
        raise ContractError("input magnitudes must be nonnegative")
    buf = np.zeros((1, cfg.freq_pad, cfg.time_pad), dtype=default_dtype())
    buf[0, :F, :T] = mag
    return Tensor(buf)


def predict_masks(mag: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig,
                  maps: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    m1, m2 = unet_forward(pad_magnitude(mag, cfg), params, cfg, maps)
    T = mag.shape[1]
    return m1.data[:, :T], m2.data[:, :T]


def apply_masks(masks, mixture: MagPhase) -> tuple[MagPhase, MagPhase]:
    """Scale the mixture magnitude by each mask and reuse the mixture phase."""
    out = []
    for m in masks:
        m = m.data if isinstance(m, Tensor) else np.asarray(m)
        if m.shape != mixture.magnitude.shape:
            raise ShapeError(f"mask {m.shape} does not match mixture {mixture.magnitude.shape}")
        if np.any(m < 0):
            raise ContractError("masks must be nonnegative")
        out.append(dataclasses.replace(mixture, magnitude=m * mixture.magnitude, phase=mixture.phase.copy()))
    return out[0], out[1]


def describe(cfg: ModelConfig) -> str:
    """Per-level feature-map extents, parameter shapes and the total count."""
    lines = [f"levels={cfg.levels} blocks={cfg.n_blocks} C={cfg.channels} K={cfg.layers} "
             f"attention={'on' if cfg.attention else 'off'} attn_blocks={list(cfg.active_attn_blocks)}",
             f"input {cfg.freq_bins}x{cfg.window_frames} padded to {cfg.freq_pad}x{cfg.time_pad}"]
    for d in range(cfg.levels + 1):
        F, T = cfg.level_shape(d)
        lines.append(f"level {d}: {F} x {T}")
    for name, shape in param_shapes(cfg):
        lines.append(f"{name:32s} {'x'.join(map(str, shape)):>16s} {int(np.prod(shape)):>9d}")
    lines.append(f"total parameters: {parameter_count(cfg)}")
    return "\n".join(lines)
