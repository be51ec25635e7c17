"""Fully convolutional actor-critic over heightmap pixels.

One :class:`PrimitiveNet` serves one primitive at one horizon step. A pixel
encoder produces a per-pixel embedding; every other module is a per-pixel MLP
(equivalently a stack of 1x1 convolutions), implemented with ``nn.Linear`` on
channel-last tensors so that a single stored pixel can be evaluated without
running the full map.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
LOG2 = math.log(2.0)


@dataclass(frozen=True)
class NetworkSpec:
    action_dim: int = 3
    in_channels: int = 4
    embed_channels: int = 64
    hidden: int = 256
    bridge: int = 64
    # conv stem, then the four residual blocks of the encoder
    widths: tuple[int, ...] = (64, 128, 256, 128, 64)
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    terminal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) != 5:
            raise ValueError("widths needs 5 entries: stem and four residual blocks")
        if self.action_dim < 1 or self.in_channels < 1:
            raise ValueError("action_dim and in_channels must be positive")

    @classmethod
    def small(cls, action_dim: int, terminal: bool = False) -> "NetworkSpec":
        """Narrow variant for CPU-scale training runs."""
        return cls(action_dim=action_dim, embed_channels=32, hidden=64, bridge=32,
                   widths=(32, 32, 64, 32, 32), terminal=terminal)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


def _mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class PixelEncoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        w0, w1, w2, w3, w4 = spec.widths
        self.stem = nn.Conv2d(spec.in_channels, w0, 3, padding=1)
        self.rb1 = ResBlock(w0, w1)
        self.rb2 = ResBlock(w1, w2)
        self.rb3 = ResBlock(w2, w3)
        self.rb4 = ResBlock(w3, w4)
        self.head = nn.Conv2d(w4, spec.embed_channels, 3, padding=1)

    def forward(self, x):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(f"input spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        x = F.relu(self.stem(x))
        x = self.rb1(F.max_pool2d(x, 3, stride=2, padding=1))
        x = self.rb3(self.rb2(F.max_pool2d(x, 3, stride=2, padding=1)))
        x = self.rb4(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.head(x)


def squashed_gaussian_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Log density of ``tanh(u)`` for ``u ~ N(mean, exp(log_std))``, summed over the last axis."""
    gauss = -0.5 * ((u - mean) / log_std.exp()) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2), written to stay finite for large |u|
    log_det = 2.0 * (LOG2 - u - F.softplus(-2.0 * u))
    return (gauss - log_det).sum(-1)


class PrimitiveNet(nn.Module):
    """Encoder, actor, state/action bridges and twin critic heads for one primitive."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        e, h, b, a = spec.embed_channels, spec.hidden, spec.bridge, spec.action_dim
        self.encoder = PixelEncoder(spec)
        self.actor = _mlp([e, h, h, h, 2 * a])
        self.state_bridge = _mlp([e, b, b])
        self.action_bridge = _mlp([a, b, b])
        self.critic_a = _mlp([2 * b, h, h, h, 1])
        self.critic_b = _mlp([2 * b, h, h, h, 1])
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
                nn.init.zeros_(m.bias)
        with torch.no_grad():
            self.actor[-1].bias[self.spec.action_dim:] = -1.0

    # -- encoder ---------------------------------------------------------
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) heightmap tensor -> (B, H, W, E) embedding."""
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (B, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        return self.encoder(x).permute(0, 2, 3, 1)

    # -- actor -----------------------------------------------------------
    def actor_params(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.actor(e)
        mean, log_std = out.split(self.spec.action_dim, dim=-1)
        return mean, log_std.clamp(self.spec.log_std_min, self.spec.log_std_max)

    def actor_forward(self, e: torch.Tensor, mode: str = "sample",
                      generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-pixel squashed Gaussian action and its log-probability.

        Works on any leading shape ``(..., E)``; returns ``(..., A)`` actions in
        [-1, 1] and ``(...)`` log-probabilities (of the sampled action, or of
        the mean in ``"mean"`` mode).
        """
        mean, log_std = self.actor_params(e)
        if mode == "mean":
            u = mean
        elif mode == "sample":
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            u = mean + log_std.exp() * noise
        else:
            raise ValueError(f"unknown actor mode {mode!r}")
        return torch.tanh(u), squashed_gaussian_log_prob(u, mean, log_std)

    # -- critic ----------------------------------------------------------
    def critic_logits(self, e: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Twin critic outputs before the terminal squashing."""
        if e.shape[:-1] != a.shape[:-1]:
            raise ValueError(f"embedding {tuple(e.shape)} and action {tuple(a.shape)} disagree")
        if a.shape[-1] != self.spec.action_dim:
            raise ValueError(f"action has {a.shape[-1]} channels, expected {self.spec.action_dim}")
        z = torch.cat([self.state_bridge(e), self.action_bridge(a)], dim=-1)
        return self.critic_a(z).squeeze(-1), self.critic_b(z).squeeze(-1)

    def critic_forward(self, e: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Twin Q-values for ``(..., E)`` embeddings and ``(..., A)`` actions -> two ``(...)`` tensors.

        Terminal networks squash with a sigmoid so values lie in (0, 1).
        """
        qa, qb = self.critic_logits(e, a)
        if self.spec.terminal:
            qa, qb = torch.sigmoid(qa), torch.sigmoid(qb)
        return qa, qb

    def q_of_stored(self, e_map: torch.Tensor, rows, cols, params,
                    logits: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Q-values of stored actions at given pixels, without running the actor.

        ``e_map`` is ``(B, H, W, E)``; ``rows``, ``cols`` hold one pixel per batch item.
        """
        rows = torch.as_tensor(rows, dtype=torch.long)
        cols = torch.as_tensor(cols, dtype=torch.long)
        b, h, w, _ = e_map.shape
        if torch.any((rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)):
            raise IndexError("pixel outside the embedding map")
        params = torch.as_tensor(params, dtype=e_map.dtype)
        if torch.any(params.abs() > 1 + 1e-6):
            raise ValueError("stored parameters must lie in [-1, 1]")
        e = e_map[torch.arange(b), rows, cols]
        return self.critic_logits(e, params) if logits else self.critic_forward(e, params)

    def forward(self, x: torch.Tensor, mode: str = "sample", generator: torch.Generator | None = None):
        e = self.encode(x)
        a, logp = self.actor_forward(e, mode, generator)
        qa, qb = self.critic_forward(e, a)
        return {"embedding": e, "action": a, "log_prob": logp, "q_a": qa, "q_b": qb}

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters trained by the critic loss and by the actor loss."""
        enc = list(self.encoder.parameters())
        critic = (list(self.state_bridge.parameters()) + list(self.action_bridge.parameters())
                  + list(self.critic_a.parameters()) + list(self.critic_b.parameters()))
        return {"critic": enc + critic, "actor": enc + list(self.actor.parameters())}


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, nets: dict[str, PrimitiveNet], extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write networks and auxiliary state to an ``.npz`` container.

    Parameters are stored as little-endian float32 under ``"<net>/<param>"``.
    """
    header = {"version": CHECKPOINT_VERSION,
              "specs": {name: net.spec.to_dict() for name, net in nets.items()},
              "meta": meta or {}}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, net in nets.items():
        for pname, p in net.state_dict().items():
            arrays[f"{name}/{pname}"] = p.detach().cpu().numpy().astype("<f4")
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v).astype("<f8")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, PrimitiveNet], dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`; every parameter shape is checked against its spec."""
    with np.load(path) as f:
        header = json.loads(f["__header__"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, sd in header["specs"].items():
            net = PrimitiveNet(NetworkSpec.from_dict(sd))
            loaded = {}
            for pname, ref in net.state_dict().items():
                key = f"{name}/{pname}"
                if key not in f.files:
                    raise ValueError(f"checkpoint is missing {key}")
                arr = f[key]
                if tuple(arr.shape) != tuple(ref.shape):
                    raise ValueError(f"{key}: shape {arr.shape} does not match spec {tuple(ref.shape)}")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{key} contains non-finite values")
                loaded[pname] = torch.from_numpy(arr.astype(np.float32))
            net.load_state_dict(loaded)
            nets[name] = net
        extra = {k[len("extra/"):]: f[k] for k in f.files if k.startswith("extra/")}
    return nets, extra, header["meta"]
