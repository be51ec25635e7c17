"""Hybrid discrete-continuous soft actor-critic with a two-step horizon.

The discrete part of an action is the primitive and the pixel; the continuous
part is read from that primitive's per-pixel action map. Two network sets are
trained from the same replay: ``phi1`` regresses the immediate grasp outcome
with binary cross-entropy, ``phi0`` bootstraps one step from ``phi1`` with a
squared-error loss. Acting uses ``phi0``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import binsim
from .heightmap import DEFAULT_CHANGE_THRESHOLD, GridSpec, Heightmap, PixelMask, change_mask, rotate_heightmap
from .policynet import NetworkSpec, PrimitiveNet, load_checkpoint, save_checkpoint
from .primitives import (ACTION_DIM, GRASP, KINDS, SHIFT, BinBox, GripperModel, PrimitiveAction,
                         action_feasible, denormalize, grid_for_bin, make_action, rotate_action)

STEPS = (0, 1)
LOSS_TYPES = {0: "mse", 1: "bce"}


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    horizon: int = 2
    lr: float = 1e-4
    batch_size: int = 16
    alpha_init: float = 0.01
    eps_start: float = 0.9
    eps_end: float = 0.2
    eps_decay_steps: int = 2000
    replay_capacity: int = 50_000
    updates_per_step: int = 1
    mask_portion: float = 0.8
    heuristic_grasp_prob: float = 0.5
    max_feasibility_tries: int = 10
    episode_cap: int = 10
    min_objects: int = 1
    max_objects: int = 4
    primitives: tuple[str, ...] = KINDS
    network: str = "full"
    cell: float = 0.005
    height_px: int = 76
    width_px: int = 96
    change_threshold: float = DEFAULT_CHANGE_THRESHOLD
    checkpoint_every: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.horizon != 2:
            raise ValueError("only a horizon of 2 is supported")
        if not self.primitives or any(k not in KINDS for k in self.primitives):
            raise ValueError(f"primitives must be a non-empty subset of {KINDS}")
        if self.network not in ("full", "small"):
            raise ValueError(f"unknown network preset {self.network!r}")
        for name in ("eps_start", "eps_end", "mask_portion", "heuristic_grasp_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.replay_capacity < 1 or self.eps_decay_steps < 1:
            raise ValueError("batch_size, replay_capacity and eps_decay_steps must be positive")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")

    def epsilon(self, step: int) -> float:
        frac = min(max(step, 0) / self.eps_decay_steps, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def grid(self, bb: BinBox) -> GridSpec:
        return grid_for_bin(bb, self.cell, self.height_px, self.width_px)

    def network_spec(self, kind: str, step: int) -> NetworkSpec:
        terminal = step == self.horizon - 1
        if self.network == "small":
            return NetworkSpec.small(ACTION_DIM[kind], terminal=terminal)
        return NetworkSpec(action_dim=ACTION_DIM[kind], terminal=terminal)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = list(self.primitives)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "AgentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def target_entropy(kind: str) -> float:
    return -float(ACTION_DIM[kind])


@dataclass(frozen=True, eq=False)
class Transition:
    state: Heightmap
    action: PrimitiveAction
    reward: float
    next_state: Heightmap
    success: bool
    params: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if float(self.reward) != (1.0 if self.success else 0.0):
            raise ValueError("reward must be 1 for successes and 0 otherwise")
        object.__setattr__(self, "params", self.action.normalized().astype(np.float32))

    @property
    def kind(self) -> str:
        return self.action.kind


class ReplayBuffer:
    """Success and failure partitions with shared capacity.

    Until the buffer is full both partitions grow with arrivals. Afterwards
    each insertion evicts the oldest record of its own partition, or of the
    other partition when its own is empty.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        # per partition and primitive: (arrival index, transition)
        self._parts = {s: {k: deque() for k in KINDS} for s in (True, False)}
        self._arrivals = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        if self._size >= self.capacity:
            self._evict(t.success)
        self._parts[t.success][t.kind].append((self._arrivals, t))
        self._arrivals += 1
        self._size += 1

    def _evict(self, success: bool) -> None:
        part = self._parts[success]
        if not any(part.values()):
            part = self._parts[not success]
        oldest = min((q for q in part.values() if q), key=lambda q: q[0][0])
        oldest.popleft()
        self._size -= 1

    def partition(self, success: bool, kind: str | None = None) -> list[Transition]:
        kinds = KINDS if kind is None else (kind,)
        items = [item for k in kinds for item in self._parts[success][k]]
        items.sort(key=lambda item: item[0])
        return [t for _, t in items]

    def count(self, success: bool, kind: str | None = None) -> int:
        kinds = KINDS if kind is None else (kind,)
        return sum(len(self._parts[success][k]) for k in kinds)


def balanced_counts(n_success: int, n_failure: int, batch: int) -> tuple[int, int]:
    """How many draws come from each partition."""
    if n_success == 0 and n_failure == 0:
        raise RuntimeError("cannot sample from an empty buffer")
    if n_failure == 0:
        return batch, 0
    if n_success == 0:
        return 0, batch
    half = batch // 2
    s, f = min(half, n_success), min(batch - half, n_failure)
    deficit = batch - s - f
    # the short partition's share is drawn from the other one
    if s < half:
        f += deficit
    else:
        s += deficit
    return s, f


def _draw(items: list, n: int, rng: np.random.Generator) -> list:
    if n == 0:
        return []
    idx = rng.choice(len(items), size=n, replace=len(items) < n)
    return [items[i] for i in idx]


def sample_balanced(buffer: ReplayBuffer, batch: int = 16, rng: np.random.Generator | None = None,
                    kind: str | None = None) -> list[Transition]:
    """Half successes, half failures; a short partition's deficit is filled by the other."""
    rng = rng if rng is not None else np.random.default_rng(0)
    succ, fail = buffer.partition(True, kind), buffer.partition(False, kind)
    n_s, n_f = balanced_counts(len(succ), len(fail), batch)
    return _draw(succ, n_s, rng) + _draw(fail, n_f, rng)


def augment(batch: list[Transition], rng: np.random.Generator, spec: GridSpec,
            angles=None) -> list[Transition]:
    """Rotate each transition by its own random angle; keep it as is if the pixel leaves the frame."""
    if angles is None:
        angles = rng.uniform(0.0, 2 * math.pi, size=len(batch))
    out = []
    for t, ang in zip(batch, angles):
        ra = rotate_action(t.action, float(ang), spec)
        if ra is None or ra is t.action:
            out.append(t)
            continue
        out.append(Transition(rotate_heightmap(t.state, float(ang)), ra, t.reward,
                              rotate_heightmap(t.next_state, float(ang)), t.success))
    return out


class TemperatureState:
    """One entropy temperature per (step, primitive), optimized in log space."""

    def __init__(self, keys, alpha_init: float = 0.01, lr: float = 1e-4):
        self.log_alpha = {k: torch.tensor(math.log(alpha_init), dtype=torch.float32, requires_grad=True)
                          for k in keys}
        self.optim = {k: torch.optim.Adam([p], lr=lr) for k, p in self.log_alpha.items()}

    def alpha(self, key) -> float:
        return float(self.log_alpha[key].detach().exp())

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (step, kind), p in self.log_alpha.items():
            out[f"log_alpha/{step}/{kind}"] = np.array(float(p.detach()))
            st = self.optim[(step, kind)].state.get(p)
            if st:
                out[f"alpha_adam/{step}/{kind}/step"] = np.array(float(st["step"]))
                out[f"alpha_adam/{step}/{kind}/exp_avg"] = np.array(float(st["exp_avg"]))
                out[f"alpha_adam/{step}/{kind}/exp_avg_sq"] = np.array(float(st["exp_avg_sq"]))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for (step, kind), p in self.log_alpha.items():
            with torch.no_grad():
                p.fill_(float(arrays[f"log_alpha/{step}/{kind}"]))
            prefix = f"alpha_adam/{step}/{kind}/"
            if prefix + "step" in arrays:
                self.optim[(step, kind)].state[p] = {
                    "step": torch.tensor(float(arrays[prefix + "step"])),
                    "exp_avg": torch.tensor(float(arrays[prefix + "exp_avg"])),
                    "exp_avg_sq": torch.tensor(float(arrays[prefix + "exp_avg_sq"])),
                }


@dataclass
class NetworkSet:
    phi0: dict[str, PrimitiveNet]
    phi1: dict[str, PrimitiveNet]

    @classmethod
    def build(cls, cfg: AgentConfig, seed: int = 0) -> "NetworkSet":
        sets = {}
        for step in STEPS:
            sets[step] = {k: PrimitiveNet(cfg.network_spec(k, step), seed=seed * 10 + 2 * step + KINDS.index(k))
                          for k in cfg.primitives}
        return cls(sets[0], sets[1])

    def step(self, i: int) -> dict[str, PrimitiveNet]:
        return self.phi0 if i == 0 else self.phi1

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(k for k in KINDS if k in self.phi0)

    def named(self) -> dict[str, PrimitiveNet]:
        return {f"phi{s}/{k}": net for s in STEPS for k, net in self.step(s).items()}


# -- action selection -------------------------------------------------------

def to_batch(heightmaps) -> torch.Tensor:
    return torch.from_numpy(np.stack([hm.to_network_input() for hm in heightmaps]))


def _torch_generator(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2**62)))


@torch.no_grad()
def q_maps(hm: Heightmap, nets: dict[str, PrimitiveNet],
           generator: torch.Generator | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per primitive: ``(H, W)`` min-of-twins Q-map and ``(H, W, A)`` action map (actor sample mode)."""
    x = to_batch([hm])
    out = {}
    for kind in KINDS:
        if kind not in nets:
            continue
        net = nets[kind]
        e = net.encode(x)
        a, _ = net.actor_forward(e, "sample", generator)
        qa, qb = net.critic_forward(e, a)
        out[kind] = (torch.minimum(qa, qb)[0].numpy(), a[0].numpy())
    return out


def greedy_choice(qs: dict[str, np.ndarray]) -> tuple[str, int, int]:
    """Best (primitive, row, col); ties go to the lowest row, then column, then grasp."""
    best = None
    for kind in KINDS:
        if kind not in qs:
            continue
        q = np.asarray(qs[kind])
        flat = int(np.argmax(q))
        v = q.flat[flat]
        if best is None or v > best[0]:
            best = (v, kind, *np.unravel_index(flat, q.shape))
    if best is None:
        raise ValueError("no Q-maps to choose from")
    return best[1], int(best[2]), int(best[3])


def heuristic_action(hm: Heightmap, mask: PixelMask | None, bb: BinBox, gm: GripperModel,
                     rng: np.random.Generator, kinds=KINDS, grasp_prob: float = 0.5,
                     mask_portion: float = 0.8, max_tries: int = 10) -> PrimitiveAction:
    """Random primitive at a (mostly) object pixel with uniformly drawn feasible parameters."""
    spec = hm.spec
    if len(kinds) == 1:
        kind = kinds[0]
    else:
        kind = GRASP if rng.random() < grasp_prob else SHIFT
    pixels = mask.pixels() if mask is not None else np.empty((0, 2), dtype=np.int64)
    if len(pixels) and rng.random() < mask_portion:
        row, col = (int(v) for v in pixels[rng.integers(len(pixels))])
    else:
        row, col = int(rng.integers(spec.height_px)), int(rng.integers(spec.width_px))
    for _ in range(max_tries):
        params = denormalize(kind, rng.uniform(-1.0, 1.0, ACTION_DIM[kind]), row, col)
        a = make_action(kind, params, hm)
        if action_feasible(a, spec, gm, bb):
            return a
    vertical = replace(params, pitch=0.0) if kind == GRASP else replace(params, pitch=0.0, roll=0.0)
    return make_action(kind, vertical, hm)


def action_from_maps(hm: Heightmap, maps: dict[str, tuple[np.ndarray, np.ndarray]]) -> PrimitiveAction:
    kind, row, col = greedy_choice({k: q for k, (q, _) in maps.items()})
    vec = np.clip(maps[kind][1][row, col].astype(np.float64), -1.0, 1.0)
    return make_action(kind, denormalize(kind, vec, row, col), hm)


def select_action(hm: Heightmap, nets: dict[str, PrimitiveNet], mode: str = "greedy",
                  mask: PixelMask | None = None, epsilon: float = 0.0,
                  rng: np.random.Generator | None = None, bb: BinBox | None = None,
                  gm: GripperModel | None = None, cfg: AgentConfig | None = None) -> PrimitiveAction:
    """Greedy argmax over primitives and pixels, or epsilon-heuristic exploration."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if mode not in ("greedy", "explore"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "explore" and rng.random() < epsilon:
        cfg = cfg or AgentConfig()
        kinds = tuple(k for k in KINDS if k in nets)
        return heuristic_action(hm, mask, bb or BinBox(), gm or GripperModel(), rng, kinds,
                                cfg.heuristic_grasp_prob, cfg.mask_portion, cfg.max_feasibility_tries)
    return action_from_maps(hm, q_maps(hm, nets, _torch_generator(rng)))


# -- losses -----------------------------------------------------------------

@torch.no_grad()
def td_target(batch: list[Transition], phi1: dict[str, PrimitiveNet], gamma: float,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """``r`` for successes, else ``r + gamma * max`` over primitives and pixels of the terminal Q."""
    y = torch.tensor([t.reward for t in batch], dtype=torch.float32)
    fail = [i for i, t in enumerate(batch) if not t.success]
    if not fail:
        return y
    x = to_batch([batch[i].next_state for i in fail])
    best = torch.full((len(fail),), -math.inf)
    for kind in KINDS:
        if kind not in phi1:
            continue
        net = phi1[kind]
        e = net.encode(x)
        a, _ = net.actor_forward(e, "sample", generator)
        qa, qb = net.critic_forward(e, a)
        best = torch.maximum(best, torch.minimum(qa, qb).amax(dim=(1, 2)))
    y[fail] = y[fail] + gamma * best
    return y


def critic_loss(step_index: int, qa: torch.Tensor, qb: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """BCE on both heads for the terminal step, squared error otherwise."""
    if step_index == 1:
        if torch.any((qa <= 0) | (qa >= 1) | (qb <= 0) | (qb >= 1)):
            raise ValueError("terminal-step predictions must lie strictly inside (0, 1)")
        if torch.any((y != 0) & (y != 1)):
            raise ValueError("terminal-step labels must be 0 or 1")
        return F.binary_cross_entropy(qa, y) + F.binary_cross_entropy(qb, y)
    if step_index == 0:
        return F.mse_loss(qa, y) + F.mse_loss(qb, y)
    raise ValueError(f"step index must be 0 or 1, got {step_index}")


def terminal_critic_loss_from_logits(la: torch.Tensor, lb: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # same value as critic_loss(1, sigmoid(la), sigmoid(lb), y) without saturating at 0 or 1
    return F.binary_cross_entropy_with_logits(la, y) + F.binary_cross_entropy_with_logits(lb, y)


def actor_loss(q: torch.Tensor, log_pi: torch.Tensor, alpha: float) -> torch.Tensor:
    return (-(q - alpha * log_pi)).mean()


def temperature_update(log_pi: torch.Tensor, target: float, temps: TemperatureState, key) -> float:
    """One Adam step on ``mean(-alpha * (log_pi + target))`` with respect to ``log_alpha``."""
    p = temps.log_alpha[key]
    opt = temps.optim[key]
    opt.zero_grad()
    loss = -(p.exp() * (log_pi.detach() + target)).mean()
    loss.backward()
    opt.step()
    return float(loss.detach())


# -- learner ----------------------------------------------------------------

class Agent:
    """Networks, temperatures and optimizers for one training run."""

    def __init__(self, cfg: AgentConfig | None = None, seed: int = 0, bb: BinBox | None = None,
                 gm: GripperModel | None = None, nets: NetworkSet | None = None):
        self.cfg = cfg or AgentConfig()
        self.bb = bb or BinBox()
        self.gm = gm or GripperModel()
        self.spec = self.cfg.grid(self.bb)
        self.nets = nets or NetworkSet.build(self.cfg, seed)
        keys = [(s, k) for s in STEPS for k in self.nets.kinds]
        self.temps = TemperatureState(keys, self.cfg.alpha_init, self.cfg.lr)
        self.optims = {}
        for s in STEPS:
            for k, net in self.nets.step(s).items():
                groups = net.parameter_groups()
                self.optims[(s, k)] = {name: torch.optim.Adam(ps, lr=self.cfg.lr) for name, ps in groups.items()}
        self.step_count = 0

    @property
    def kinds(self) -> tuple[str, ...]:
        return self.nets.kinds

    def acting_nets(self, grasp_only: bool = False) -> dict[str, PrimitiveNet]:
        if grasp_only:
            return {GRASP: self.nets.phi1[GRASP]}
        return self.nets.phi0

    def alphas(self) -> dict[str, float]:
        return {f"{s}/{k}": self.temps.alpha((s, k)) for s in STEPS for k in self.kinds}

    def save(self, path) -> None:
        meta = {"step": self.step_count, "config": self.cfg.to_dict(), "grid": self.spec.to_dict(),
                "bin": self.bb.to_dict(), "gripper": asdict(self.gm)}
        save_checkpoint(path, self.nets.named(), self.temps.to_arrays(), meta)

    @classmethod
    def load(cls, path) -> "Agent":
        named, extra, meta = load_checkpoint(path)
        cfg = AgentConfig.from_dict(meta["config"])
        phi = {s: {} for s in STEPS}
        for name, net in named.items():
            step, kind = name.split("/")
            s = int(step[len("phi"):])
            if net.spec != cfg.network_spec(kind, s):
                raise ValueError(f"{name}: stored network spec does not match the config")
            phi[s][kind] = net
        if set(phi[0]) != set(cfg.primitives) or set(phi[1]) != set(cfg.primitives):
            raise ValueError("checkpoint networks do not cover the configured primitives")
        gm = meta.get("gripper", {})
        gm = GripperModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in gm.items()})
        agent = cls(cfg, bb=BinBox(**meta["bin"]), gm=gm, nets=NetworkSet(phi[0], phi[1]))
        if agent.spec.to_dict() != meta["grid"]:
            raise ValueError("stored grid does not match the config")
        agent.temps.load_arrays(extra)
        agent.step_count = int(meta["step"])
        return agent


@dataclass
class Streams:
    """Independent random streams derived from one run seed."""
    spawn: np.random.Generator
    act: np.random.Generator
    sample: np.random.Generator
    augment: np.random.Generator
    noise: torch.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        ss = np.random.SeedSequence(seed).spawn(5)
        noise = torch.Generator().manual_seed(int(ss[4].generate_state(1, np.uint64)[0] >> 2))
        return cls(*(np.random.default_rng(s) for s in ss[:4]), noise)


def _pixels_and_params(batch: list[Transition]):
    rows = torch.tensor([t.action.params.row for t in batch])
    cols = torch.tensor([t.action.params.col for t in batch])
    params = torch.from_numpy(np.stack([t.params for t in batch]))
    return rows, cols, params


def train_step(agent: Agent, buffer: ReplayBuffer, streams: Streams) -> dict:
    """Critic, actor and temperature updates for every primitive present in the buffer.

    Returns ``{"losses": {...}, "loss_types": {...}}`` with one critic and one
    actor loss per (step, primitive); primitives without data report ``None``.
    """
    cfg = agent.cfg
    if len(buffer) == 0:
        raise RuntimeError("cannot train on an empty buffer")
    losses = {f"{part}/{s}/{k}": None for k in agent.kinds for s in (1, 0) for part in ("critic", "actor")}
    batches = {}
    for kind in agent.kinds:
        if buffer.count(True, kind) + buffer.count(False, kind) == 0:
            continue
        batch = sample_balanced(buffer, cfg.batch_size, streams.sample, kind)
        batches[kind] = augment(batch, streams.augment, agent.spec)

    # critics: terminal step first so the bootstrap reads the freshest estimate
    for kind, batch in batches.items():
        x = to_batch([t.state for t in batch])
        rows, cols, params = _pixels_and_params(batch)
        r = torch.tensor([t.reward for t in batch], dtype=torch.float32)

        net1, opt1 = agent.nets.phi1[kind], agent.optims[(1, kind)]["critic"]
        opt1.zero_grad()
        la, lb = net1.q_of_stored(net1.encode(x), rows, cols, params, logits=True)
        loss1 = terminal_critic_loss_from_logits(la, lb, r)
        loss1.backward()
        opt1.step()
        losses[f"critic/1/{kind}"] = float(loss1.detach())

        y = td_target(batch, agent.nets.phi1, cfg.gamma, streams.noise)
        net0, opt0 = agent.nets.phi0[kind], agent.optims[(0, kind)]["critic"]
        opt0.zero_grad()
        qa, qb = net0.q_of_stored(net0.encode(x), rows, cols, params)
        loss0 = critic_loss(0, qa, qb, y)
        loss0.backward()
        opt0.step()
        losses[f"critic/0/{kind}"] = float(loss0.detach())

    # actors at the chosen pixels; critic parameters are not stepped here
    log_pis = {}
    for kind, batch in batches.items():
        x = to_batch([t.state for t in batch])
        rows, cols, _ = _pixels_and_params(batch)
        for s in (1, 0):
            net, opt = agent.nets.step(s)[kind], agent.optims[(s, kind)]["actor"]
            opt.zero_grad()
            e = net.encode(x)[torch.arange(len(batch)), rows, cols]
            a, log_pi = net.actor_forward(e, "sample", streams.noise)
            qa, qb = net.critic_forward(e.detach(), a)
            loss = actor_loss(torch.minimum(qa, qb), log_pi, agent.temps.alpha((s, kind)))
            loss.backward()
            opt.step()
            losses[f"actor/{s}/{kind}"] = float(loss.detach())
            log_pis[(s, kind)] = log_pi.detach()

    for (s, kind), log_pi in log_pis.items():
        temperature_update(log_pi, target_entropy(kind), agent.temps, (s, kind))
    agent.step_count += 1
    return {"losses": losses, "loss_types": {str(s): LOSS_TYPES[s] for s in (1, 0)}}


# -- training loop ----------------------------------------------------------

EnvFactory = Callable[[np.random.Generator, BinBox], binsim.BinScene]


def default_env_factory(cfg: AgentConfig) -> EnvFactory:
    def factory(rng: np.random.Generator, bb: BinBox) -> binsim.BinScene:
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        return binsim.spawn_random(n, binsim.TRAIN_OBJECTS, seed=int(rng.integers(2**31)), bb=bb)
    return factory


def empty_reference(bb: BinBox, spec: GridSpec) -> Heightmap:
    return binsim.render(binsim.BinScene(bb, ()), spec)


def train_loop(cfg: AgentConfig, seed: int, total_env_steps: int, env_factory: EnvFactory | None = None,
               out_dir=None, agent: Agent | None = None, log_records: bool = True):
    """Collect experience with the acting networks and update after every environment step.

    Returns ``(agent, records)``. With ``out_dir`` set, writes ``train_log.jsonl``,
    periodic ``checkpoint_<step>.npz`` files and a final ``checkpoint.npz``.
    """
    torch.set_num_threads(1)
    agent = agent or Agent(cfg, seed)
    streams = Streams.from_seed(seed)
    factory = env_factory or default_env_factory(cfg)
    buffer = ReplayBuffer(cfg.replay_capacity)
    empty_hm = empty_reference(agent.bb, agent.spec)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
    # the grasp-only ablation acts with the terminal network, as it does at evaluation
    acting = agent.acting_nets(grasp_only=cfg.primitives == (GRASP,))
    records = []
    scene, hm, episode, ep_steps = None, None, -1, 0
    try:
        for step in range(total_env_steps):
            if scene is None or binsim.is_empty(scene) or ep_steps >= cfg.episode_cap:
                scene = factory(streams.spawn, agent.bb)
                hm = binsim.render(scene, agent.spec)
                episode, ep_steps = episode + 1, 0
            eps = cfg.epsilon(step)
            mask = change_mask(hm, empty_hm, cfg.change_threshold)
            action = select_action(hm, acting, "explore", mask, eps, streams.act, agent.bb, agent.gm, cfg)
            res = binsim.step(scene, action, agent.spec, agent.gm)
            next_hm = binsim.render(res.next_scene, agent.spec)
            buffer.add(Transition(hm, action, float(res.reward), next_hm, res.success))
            report = None
            for _ in range(cfg.updates_per_step):
                report = train_step(agent, buffer, streams)
            rec = {"step": step, "episode": episode, "primitive": action.kind, "reward": float(res.reward),
                   "failure_reason": res.failure_reason, "epsilon": eps, "alpha": agent.alphas(),
                   "losses": report["losses"] if report else {}, "replay_size": len(buffer)}
            if log_records:
                records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    agent.save(out_dir / f"checkpoint_{step + 1}.npz")
            ep_steps += 1
            if res.success:
                scene = None
            else:
                scene, hm = res.next_scene, next_hm
        if out_dir is not None:
            agent.save(out_dir / "checkpoint.npz")
    finally:
        if log_fh is not None:
            log_fh.close()
    return agent, records
