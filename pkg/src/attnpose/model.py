"""Full pose-regression model: shared convolutional backbone, per-branch
sequence conversion with a learned pose token, axis-separable positional
encoding, dual transformer encoders, and dual regression heads.

Checkpoint container layout (little-endian, documented here and in README):

    bytes 0..3   magic ``b"APCK"``
    u32          format version (currently 1)
    u32          config length N, then N bytes of UTF-8 JSON (sorted keys)
    u32          tensor count
    per tensor:  u16 name length, name UTF-8 bytes,
                 u8 ndim, ndim * u32 dims,
                 row-major float64 payload

Round-tripping a checkpoint is bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Pose
from .nn import Encoder, RegressionHead, xavier_uniform
from .tensor import ShapeError, Tensor

__all__ = [
    "ConfigError",
    "ModelConfig",
    "Backbone",
    "Branch",
    "TransPoseNet",
    "extract_token_attention",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"APCK"
CHECKPOINT_VERSION = 1

REDUCTION_STRIDES = {"rdct3": 8, "rdct4": 16}


class ConfigError(ValueError):
    """Raised for invalid or inconsistent model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture and ablation knob.

    The defaults mirror the reference configuration: embedding width 256,
    six encoder blocks with four heads and dropout 0.1, head hidden width
    1024, and the stride-16 map routed to position / stride-8 to orientation.
    """

    input_size: int = 224
    in_channels: int = 3
    backbone_widths: tuple[int, int, int, int] = (16, 24, 40, 112)
    position_map: str = "rdct4"
    orientation_map: str = "rdct3"
    embed_dim: int = 256
    n_blocks: int = 6
    n_heads: int = 4
    dropout: float = 0.1
    head_hidden: int = 1024
    orientation_prior: bool = False
    pos_to_mlp: bool = True
    init_seed: int = 0

    def validate(self) -> None:
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ConfigError(f"input size {self.input_size} must be a positive multiple of 16")
        if len(self.backbone_widths) != 4 or any(w < 1 for w in self.backbone_widths):
            raise ConfigError(f"backbone widths must be 4 positive ints, got {self.backbone_widths}")
        for name, value in (("position_map", self.position_map), ("orientation_map", self.orientation_map)):
            if value not in REDUCTION_STRIDES:
                raise ConfigError(f"{name} must be one of {sorted(REDUCTION_STRIDES)}, got {value!r}")
        if self.embed_dim % 2 != 0:
            raise ConfigError(f"embedding dim {self.embed_dim} must be even (axis-split positional tables)")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embedding dim {self.embed_dim} not divisible by {self.n_heads} heads")
        if self.n_blocks < 1:
            raise ConfigError("need at least one encoder block")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    def map_shape(self, level: str) -> tuple[int, int, int]:
        """(H_m, W_m, C_m) of a reduction endpoint for this input size."""
        stride = REDUCTION_STRIDES[level]
        side = self.input_size // stride
        channels = self.backbone_widths[2] if level == "rdct3" else self.backbone_widths[3]
        return side, side, channels

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        raw["backbone_widths"] = tuple(raw["backbone_widths"])
        return cls(**raw)


class _ConvStage:
    """3x3 stride-2 convolution with bias and gelu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (c_in * 9 + c_out * 9))
        self.kernel = Tensor(rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)), requires_grad=True)
        self.bias = Tensor(np.zeros((c_out, 1, 1)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.gelu(T.conv2d(x, self.kernel, stride=2, padding=1) + self.bias)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}kernel": self.kernel, f"{prefix}bias": self.bias}


class Backbone:
    """Four stride-2 stages; taps after stages 3 and 4 give the /8 and /16 maps."""

    def __init__(self, in_channels: int, widths: tuple[int, int, int, int], rng: np.random.Generator):
        chain = (in_channels, *widths)
        self.stages = [_ConvStage(chain[i], chain[i + 1], rng) for i in range(4)]

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor]:
        h = self.stages[1](self.stages[0](image))
        m3 = self.stages[2](h)
        m4 = self.stages[3](m3)
        return m3, m4

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, stage in enumerate(self.stages):
            params.update(stage.named_parameters(f"{prefix}stage{i}."))
        return params


class Branch:
    """One regression branch: 1x1 projection, pose token, positional tables,
    encoder stack, and regression head."""

    def __init__(self, map_shape: tuple[int, int, int], config: ModelConfig, rng: np.random.Generator,
                 out_dim: int, head_in_factor: int = 1):
        self.h_m, self.w_m, c_m = map_shape
        ct = config.embed_dim
        self.embed_dim = ct
        limit = np.sqrt(6.0 / (c_m + ct))
        self.proj_kernel = Tensor(rng.uniform(-limit, limit, size=(ct, c_m, 1, 1)), requires_grad=True)
        self.proj_bias = Tensor(np.zeros((ct, 1, 1)), requires_grad=True)
        self.token = Tensor(rng.normal(0.0, 0.02, size=(1, ct)), requires_grad=True)
        self.table_x = Tensor(rng.normal(0.0, 0.02, size=(self.w_m + 1, ct // 2)), requires_grad=True)
        self.table_y = Tensor(rng.normal(0.0, 0.02, size=(self.h_m + 1, ct // 2)), requires_grad=True)
        assert self.table_x.size + self.table_y.size == (self.h_m + self.w_m + 2) * ct // 2
        self.encoder = Encoder(ct, config.n_heads, config.n_blocks, config.dropout, rng, config.pos_to_mlp)
        self.head = RegressionHead(head_in_factor * ct, config.head_hidden, out_dim, rng)
        # row-major flattening: cell (i, j) lands at flat index 1 + i*W_m + j
        self._x_index = np.array([0] + [j + 1 for i in range(self.h_m) for j in range(self.w_m)])
        self._y_index = np.array([0] + [i + 1 for i in range(self.h_m) for j in range(self.w_m)])

    def to_sequence(self, activation_map: Tensor) -> tuple[Tensor, Tensor]:
        """Project, flatten, and prepend the pose token; build the paired
        positional sequence from the axis tables (x-part first, then y)."""
        if activation_map.shape[1:] != (self.h_m, self.w_m):
            raise ShapeError(
                f"activation map {activation_map.shape} does not match branch grid {(self.h_m, self.w_m)}")
        proj = T.conv2d(activation_map, self.proj_kernel) + self.proj_bias
        cells = proj.transpose((1, 2, 0)).reshape(self.h_m * self.w_m, self.embed_dim)
        seq = T.concat([self.token, cells], axis=0)
        pos = T.concat(
            [T.gather_rows(self.table_x, self._x_index), T.gather_rows(self.table_y, self._y_index)], axis=1)
        return seq, pos

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {
            f"{prefix}proj.kernel": self.proj_kernel,
            f"{prefix}proj.bias": self.proj_bias,
            f"{prefix}token": self.token,
            f"{prefix}pos_x": self.table_x,
            f"{prefix}pos_y": self.table_y,
        }
        params.update(self.encoder.named_parameters(f"{prefix}encoder."))
        params.update(self.head.named_parameters(f"{prefix}head."))
        return params


class TransPoseNet:
    """Dual-encoder absolute pose regressor."""

    # regression guard for the stock configuration; see README
    DEFAULT_PARAM_COUNT = 5388087

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.backbone = Backbone(config.in_channels, config.backbone_widths, rng)
        self.position_branch = Branch(config.map_shape(config.position_map), config, rng, out_dim=3)
        self.orientation_branch = Branch(
            config.map_shape(config.orientation_map), config, rng, out_dim=4,
            head_in_factor=2 if config.orientation_prior else 1)
        self.param_count = sum(t.size for t in self.named_parameters().values())
        if config == ModelConfig():
            assert self.param_count == self.DEFAULT_PARAM_COUNT, (
                f"default configuration now has {self.param_count} parameters")

    # ---- forward ---------------------------------------------------------------

    def forward(self, image, train: bool = False, rng: np.random.Generator | None = None):
        """Run the full model on one [C, H, W] image.

        Returns (x_hat [1,3] tensor, q_hat [1,4] tensor, attn_x, attn_q)
        where the attention lists hold one [heads, L, L] tensor per block.
        """
        img = image if isinstance(image, Tensor) else Tensor(image)
        expected = (self.config.in_channels, self.config.input_size, self.config.input_size)
        if img.shape != expected:
            raise ShapeError(f"image shape {img.shape} does not match configured {expected}")
        m3, m4 = self.backbone(img)
        maps = {"rdct3": m3, "rdct4": m4}

        seq_x, pos_x = self.position_branch.to_sequence(maps[self.config.position_map])
        enc_x, attn_x = self.position_branch.encoder(seq_x, pos_x, train, rng)
        t_x = enc_x[0:1]
        x_hat = self.position_branch.head(t_x)

        seq_q, pos_q = self.orientation_branch.to_sequence(maps[self.config.orientation_map])
        enc_q, attn_q = self.orientation_branch.encoder(seq_q, pos_q, train, rng)
        t_q = enc_q[0:1]
        head_in = T.concat([t_q, t_x], axis=1) if self.config.orientation_prior else t_q
        q_hat = self.orientation_branch.head(head_in)
        return x_hat, q_hat, attn_x, attn_q

    def predict(self, image) -> tuple[Pose, list[np.ndarray], list[np.ndarray]]:
        """Eval-mode forward returning a Pose and detached attention maps."""
        x_hat, q_hat, attn_x, attn_q = self.forward(image, train=False)
        return (
            Pose(x_hat.data[0].copy(), q_hat.data[0].copy()),
            [a.data.copy() for a in attn_x],
            [a.data.copy() for a in attn_q],
        )

    # ---- parameters & prior ------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = self.backbone.named_parameters("backbone.")
        params.update(self.position_branch.named_parameters("position."))
        params.update(self.orientation_branch.named_parameters("orientation."))
        return params

    def head_parameter_names(self, branch: str) -> list[str]:
        if branch not in ("position", "orientation"):
            raise ValueError(f"branch must be position or orientation, got {branch!r}")
        return [n for n in self.named_parameters() if n.startswith(f"{branch}.head.")]

    def enable_orientation_prior(self, warm_start: bool = False, rng: np.random.Generator | None = None) -> None:
        """Widen the orientation head to take [t'_q ; t'_x].

        The widened head is re-initialized by default; ``warm_start`` copies the
        old hidden weights into the first half and zeros the new half so the
        prior starts as a no-op.
        """
        if self.config.orientation_prior:
            return
        if rng is None:
            rng = np.random.default_rng(self.config.init_seed + 0x5EED)
        old = self.orientation_branch.head
        ct = self.config.embed_dim
        new = RegressionHead(2 * ct, self.config.head_hidden, 4, rng)
        if warm_start:
            new.fc1.weight.data[:ct] = old.fc1.weight.data
            new.fc1.weight.data[ct:] = 0.0
            new.fc1.bias.data[...] = old.fc1.bias.data
            new.fc2.weight.data[...] = old.fc2.weight.data
            new.fc2.bias.data[...] = old.fc2.bias.data
        self.orientation_branch.head = new
        self.config = dataclasses.replace(self.config, orientation_prior=True)
        self.param_count = sum(t.size for t in self.named_parameters().values())

    # ---- persistence -----------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters().items()}

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        tensors = dict(self.state_dict())
        for name, arr in (extra or {}).items():
            tensors[name] = np.asarray(arr, dtype=np.float64)
        save_checkpoint(path, self.config, tensors)

    @classmethod
    def load(cls, path) -> tuple["TransPoseNet", dict[str, np.ndarray]]:
        config, tensors = load_checkpoint(path)
        model = cls(config)
        extras: dict[str, np.ndarray] = {}
        params = model.named_parameters()
        for name, arr in tensors.items():
            if name in params:
                if params[name].shape != arr.shape:
                    raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {params[name].shape}")
                np.copyto(params[name].data, arr)
            else:
                extras[name] = arr
        missing = set(params) - set(tensors)
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)[:5]}...")
        return model, extras


def extract_token_attention(attn_all, h_m: int, w_m: int, layer: int = -1) -> np.ndarray:
    """Token-query attention of one block as a [H_m, W_m] heat map.

    Head-averaged row 0 of the chosen block, token-to-token entry dropped,
    renormalized to sum 1, reshaped row-major.
    """
    if not attn_all:
        raise ValueError("attention maps were not retained during the forward pass")
    attn = attn_all[layer]
    data = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    if data.ndim != 3 or data.shape[1] != h_m * w_m + 1:
        raise ShapeError(f"attention shape {data.shape} does not match a {h_m}x{w_m} map")
    row = data.mean(axis=0)[0, 1:]
    total = row.sum()
    if total <= 0.0:
        raise ValueError("token attention row has no mass outside the token entry")
    return (row / total).reshape(h_m, w_m)


# ---- checkpoint container ---------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = config.to_json().encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = ModelConfig.from_json(blob[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        tensors[name] = arr.astype(np.float64)
    return config, tensors
