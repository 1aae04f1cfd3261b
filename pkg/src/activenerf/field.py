"""Radiance field MLP with a per-location variance head.

The trunk maps the encoded position through ``depth`` fully connected ReLU
layers; the encoded position is concatenated back onto the hidden state at the
input of layer ``skip``. From the trunk output ``h``:

* ``density_head``  (group theta1, with the trunk) gives sigma,
* ``variance_head`` (group theta3) gives the raw variance, mapped through
  ``beta0_sq + softplus``,
* ``feature`` + ``color_hidden`` + ``color_out`` (group theta2) take
  ``[f, encoded direction]`` to a sigmoid RGB mean.

Gradients come from torch autograd; ``field_backward`` exposes them for an
arbitrary upstream gradient.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

GROUPS = ("theta1", "theta2", "theta3")


@dataclass(frozen=True)
class EncodingConfig:
    l_position: int = 10
    l_direction: int = 4
    # positions are divided by this before encoding; the lowest frequency has
    # period 2, so every sampled point must land inside (-1, 1) after scaling
    position_scale: float = 1.0

    def __post_init__(self):
        if self.l_position < 1 or self.l_direction < 1:
            raise ValueError("encoding frequency counts must be >= 1")
        if not self.position_scale > 0:
            raise ValueError("position_scale must be positive")


@dataclass(frozen=True)
class FieldConfig:
    depth: int = 8
    width: int = 64
    skip: int = 4
    color_width: int | None = None
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    density_activation: str = "shifted_softplus"
    uncertainty: bool = True
    beta0_sq: float = 0.01

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            object.__setattr__(self, "encoding", EncodingConfig(**self.encoding))
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.density_activation not in ("shifted_softplus", "relu"):
            raise ValueError(f"unknown density activation {self.density_activation!r}")
        if not self.beta0_sq > 0:
            raise ValueError("beta0_sq must be positive")

    @property
    def color_hidden_width(self) -> int:
        return self.color_width if self.color_width is not None else max(self.width // 2, 1)

    def to_dict(self) -> dict:
        return asdict(self)


def softplus(x: torch.Tensor) -> torch.Tensor:
    """log(1 + exp(x)) without overflow, with the exact sigmoid gradient."""
    return torch.logaddexp(x, torch.zeros_like(x))


def variance_activation(raw, beta0_sq: float):
    """Map a raw head output to a variance ``beta0_sq + log(1 + exp(raw))``."""
    if not beta0_sq > 0:
        raise ValueError("beta0_sq must be positive")
    if isinstance(raw, torch.Tensor):
        return beta0_sq + softplus(raw)
    return beta0_sq + np.logaddexp(0.0, raw)


def positional_encode(p: torch.Tensor, L: int) -> torch.Tensor:
    """Fourier features of each scalar in the last axis.

    Every input scalar ``p`` becomes ``sin(2^0 pi p), cos(2^0 pi p), ...,
    sin(2^(L-1) pi p), cos(2^(L-1) pi p)``, so the last axis grows from ``D``
    to ``2 * L * D``. The raw coordinate itself is not included.
    """
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.to(torch.get_default_dtype())
    if p.ndim == 0:
        p = p.reshape(1)
    freqs = (2.0 ** torch.arange(L, dtype=p.dtype, device=p.device)) * math.pi
    angles = p[..., :, None] * freqs
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return enc.reshape(*p.shape[:-1], p.shape[-1] * L * 2)


@dataclass
class FieldOutput:
    sigma: torch.Tensor
    color_mean: torch.Tensor
    variance: torch.Tensor | None
    feature: torch.Tensor


class RadianceField(nn.Module):
    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        enc_x = 6 * config.encoding.l_position
        enc_d = 6 * config.encoding.l_direction
        W = config.width
        layers = []
        for i in range(config.depth):
            if i == 0:
                fan_in = enc_x
            elif i == config.skip:
                fan_in = W + enc_x
            else:
                fan_in = W
            layers.append(nn.Linear(fan_in, W))
        self.trunk = nn.ModuleList(layers)
        self.density_head = nn.Linear(W, 1)
        self.variance_head = nn.Linear(W, 1) if config.uncertainty else None
        self.feature = nn.Linear(W, W)
        self.color_hidden = nn.Linear(W + enc_d, config.color_hidden_width)
        self.color_out = nn.Linear(config.color_hidden_width, 3)

    @property
    def uncertainty(self) -> bool:
        return self.variance_head is not None

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            if name.startswith(("trunk.", "density_head.")):
                groups["theta1"].append((name, p))
            elif name.startswith("variance_head."):
                groups["theta3"].append((name, p))
            else:
                groups["theta2"].append((name, p))
        return groups

    def forward(self, points: torch.Tensor, directions: torch.Tensor, uncertainty: bool = True,
                check_directions: bool = True) -> FieldOutput:
        if check_directions:
            norms = torch.linalg.vector_norm(directions, dim=-1)
            if torch.any(torch.abs(norms - 1.0) > 1e-6):
                raise ValueError("directions must be unit vectors (tolerance 1e-6)")
        cfg = self.config
        enc_x = positional_encode(points / cfg.encoding.position_scale, cfg.encoding.l_position)
        enc_d = positional_encode(directions, cfg.encoding.l_direction)
        h = enc_x
        for i, layer in enumerate(self.trunk):
            if i == cfg.skip and i > 0:
                h = torch.cat([h, enc_x], dim=-1)
            h = torch.relu(layer(h))
        raw_sigma = self.density_head(h)[..., 0]
        if cfg.density_activation == "relu":
            sigma = torch.relu(raw_sigma)
        else:
            sigma = softplus(raw_sigma - 1.0)
        variance = None
        if uncertainty and self.variance_head is not None:
            variance = variance_activation(self.variance_head(h)[..., 0], cfg.beta0_sq)
        f = self.feature(h)
        c = torch.relu(self.color_hidden(torch.cat([f, enc_d], dim=-1)))
        color = torch.sigmoid(self.color_out(c))
        return FieldOutput(sigma=sigma, color_mean=color, variance=variance, feature=f)


def init_params(seed: int, config: FieldConfig | None = None, dtype: torch.dtype = torch.float32) -> RadianceField:
    """Build a field with fan-in uniform weights drawn from a private generator.

    The variance head starts with zero bias and weights scaled down by 10 so
    that the initial variance sits just above ``beta0_sq + log 2``.
    """
    config = config or FieldConfig()
    model = RadianceField(config).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, module in model.named_modules():
            if not isinstance(module, nn.Linear):
                continue
            bound = 1.0 / math.sqrt(module.in_features)
            w = torch.rand(module.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1
            b = torch.rand(module.bias.shape, generator=gen, dtype=torch.float64) * 2 - 1
            if name == "variance_head":
                module.weight.copy_(0.1 * bound * w)
                module.bias.zero_()
            else:
                module.weight.copy_(bound * w)
                module.bias.copy_(bound * b)
    return model


def field_eval(model: RadianceField, points, directions, uncertainty: bool = True) -> FieldOutput:
    """Evaluate the field at (N, 3) points and unit (N, 3) directions."""
    dtype = next(model.parameters()).dtype
    pts = torch.as_tensor(points, dtype=dtype)
    dirs = torch.as_tensor(directions, dtype=dtype)
    return model(pts, dirs, uncertainty=uncertainty)


def field_backward(model: RadianceField, points, directions, upstream: dict) -> dict[str, torch.Tensor]:
    """Vector-Jacobian product of the field outputs with ``upstream`` gradients.

    ``upstream`` maps any of ``sigma``, ``color_mean``, ``variance`` to a
    tensor shaped like that output. Returns a gradient for every named
    parameter (zeros where no path exists).
    """
    out = field_eval(model, points, directions, uncertainty=model.uncertainty)
    outputs, grads = [], []
    for key, g in upstream.items():
        value = getattr(out, key)
        if value is None:
            raise ValueError(f"field has no {key!r} output")
        g = torch.as_tensor(g, dtype=value.dtype)
        if g.shape != value.shape:
            raise ValueError(f"upstream gradient for {key!r} has shape {tuple(g.shape)}, "
                             f"expected {tuple(value.shape)}")
        outputs.append(value)
        grads.append(g)
    names, params = zip(*model.named_parameters())
    if not outputs:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    result = torch.autograd.grad(outputs, params, grads, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, result)}


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic   8 bytes  b"ANRFCKPT"
#   version uint32 LE
#   hlen    uint32 LE, then hlen bytes of UTF-8 JSON header:
#           {"networks": [[name, field config], ...], "param_counts": [...],
#            "has_moments": bool, "adam_step": int, "extra": {...}}
#   step    uint64 LE   training-step counter
#   params  float32 LE, every network's flat parameter vector in header order
#   moments float32 LE (only if has_moments): first moments then second
#           moments, same layout as params
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"ANRFCKPT"
CKPT_VERSION = 1


def flat_params(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach()


def save_checkpoint(path: str | Path, networks: dict[str, RadianceField], step: int = 0,
                    moments: tuple[list[torch.Tensor], list[torch.Tensor]] | None = None,
                    adam_step: int = 0, extra: dict | None = None) -> None:
    header = {
        "networks": [[name, net.config.to_dict()] for name, net in networks.items()],
        "param_counts": [int(sum(p.numel() for p in net.parameters())) for net in networks.values()],
        "has_moments": moments is not None,
        "adam_step": int(adam_step),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    chunks = [flat_params(net).to(torch.float32).numpy().astype("<f4") for net in networks.values()]
    if moments is not None:
        for seq in moments:
            chunks.append(torch.cat([m.reshape(-1) for m in seq]).detach().to(torch.float32).numpy().astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<Q", int(step)))
        for c in chunks:
            fh.write(c.tobytes())


@dataclass
class Checkpoint:
    networks: dict[str, RadianceField]
    step: int
    moments: tuple[list[torch.Tensor], list[torch.Tensor]] | None
    adam_step: int
    extra: dict


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen])
    off += hlen
    (step,) = struct.unpack_from("<Q", data, off)
    off += 8
    floats = np.frombuffer(data, dtype="<f4", offset=off)
    networks: dict[str, RadianceField] = {}
    pos = 0
    for (name, cfg), count in zip(header["networks"], header["param_counts"]):
        net = RadianceField(FieldConfig(**cfg)).to(dtype)
        vec = torch.from_numpy(floats[pos:pos + count].astype(np.float32)).to(dtype)
        torch.nn.utils.vector_to_parameters(vec, net.parameters())
        networks[name] = net
        pos += count
    moments = None
    if header["has_moments"]:
        total = pos
        firsts, seconds = [], []
        for store, start in ((firsts, pos), (seconds, pos + total)):
            cursor = start
            for net in networks.values():
                for p in net.parameters():
                    n = p.numel()
                    store.append(torch.from_numpy(floats[cursor:cursor + n].astype(np.float32)).to(dtype).reshape(p.shape))
                    cursor += n
        moments = (firsts, seconds)
        pos += 2 * total
    if pos != floats.size:
        raise ValueError(f"{path}: checkpoint payload size mismatch")
    return Checkpoint(networks, int(step), moments, int(header["adam_step"]), header.get("extra", {}))
