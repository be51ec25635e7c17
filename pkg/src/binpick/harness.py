"""Evaluation episodes, bin-picking metrics and image output."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import binsim
from .agent import Agent, action_from_maps, q_maps
from .heightmap import GridSpec, Heightmap, to_png_panels
from .primitives import GRASP, SHIFT, BinBox, GripperModel, PrimitiveAction

SCENARIOS = ("random", "wall", "tucked")
MAX_CONSECUTIVE_FAILURES = 10
TUCKED_OBJECT = {False: "rod", True: "elongated_box"}

Policy = Callable[[Heightmap, np.random.Generator], PrimitiveAction]


@dataclass
class StepRecord:
    action: dict
    reward: float
    failure_reason: str
    objects_remaining: int
    latency_s: float = 0.0


@dataclass
class EpisodeLog:
    scenario: str
    seed: int
    object_count: int
    steps: list[StepRecord] = field(default_factory=list)
    completed: bool = False
    object_types: list[str] = field(default_factory=list)
    scene: dict | None = None
    grid: dict | None = None

    @property
    def n_actions(self) -> int:
        return len(self.steps)

    @property
    def removed(self) -> int:
        return int(sum(s.reward for s in self.steps))

    @property
    def grasp_attempts(self) -> int:
        return sum(1 for s in self.steps if s.action["kind"] == GRASP)

    @property
    def grasp_successes(self) -> int:
        return sum(1 for s in self.steps if s.action["kind"] == GRASP and s.reward > 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeLog":
        d = dict(d)
        d["steps"] = [StepRecord(**s) for s in d.get("steps", [])]
        return cls(**d)


@dataclass(frozen=True)
class Metrics:
    clearance: float
    completion: float
    grasp_success: float
    action_efficiency: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    checkpoint: str | None = None
    scenario: str = "random"
    runs: int = 100
    objects: int = 4
    grasp_only: bool = False
    unseen_objects: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if not 1 <= self.objects <= 6:
            raise ValueError("objects must lie in [1, 6]")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def agent_policy(agent: Agent, grasp_only: bool = False) -> Policy:
    nets = agent.acting_nets(grasp_only)

    def policy(hm: Heightmap, rng: np.random.Generator) -> PrimitiveAction:
        gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
        return action_from_maps(hm, q_maps(hm, nets, gen))
    return policy


def run_episode(scene: binsim.BinScene, policy: Policy | Agent, spec: GridSpec | None = None,
                gm: GripperModel | None = None, grasp_only: bool = False,
                max_consecutive_failures: int = MAX_CONSECUTIVE_FAILURES, seed: int = 0,
                scenario: str = "random") -> EpisodeLog:
    """Act greedily until the bin is empty or the failure streak reaches its limit."""
    if isinstance(policy, Agent):
        spec, gm = spec or policy.spec, gm or policy.gm
        policy = agent_policy(policy, grasp_only)
    if spec is None:
        raise ValueError("a grid spec is required for a bare policy")
    gm = gm or GripperModel()
    rng = np.random.default_rng(seed)
    log = EpisodeLog(scenario, seed, len(scene.objects),
                     object_types=sorted({o.shape.type_id for o in scene.objects}),
                     scene=scene.to_dict(), grid=spec.to_dict())
    streak = 0
    while not binsim.is_empty(scene) and streak < max_consecutive_failures:
        hm = binsim.render(scene, spec)
        t0 = time.perf_counter()
        action = policy(hm, rng)
        latency = time.perf_counter() - t0
        if grasp_only and action.kind != GRASP:
            raise RuntimeError("grasp-only episode produced a non-grasp action")
        res = binsim.step(scene, action, spec, gm)
        scene = res.next_scene
        streak = 0 if res.reward > 0 else streak + 1
        log.steps.append(StepRecord(action.to_dict(), float(res.reward), res.failure_reason,
                                    len(scene.objects), latency))
    log.completed = binsim.is_empty(scene)
    return log


def compute_metrics(logs: list[EpisodeLog]) -> Metrics:
    """Mean per-run clearance, completion, grasp success and action efficiency, in percent.

    Grasp success averages only runs with at least one grasp attempt; action
    efficiency averages only completed runs and is 0 when none completed.
    """
    if not logs:
        raise ValueError("need at least one episode log")
    clearance = [100.0 * l.removed / l.object_count if l.object_count else 100.0 for l in logs]
    completion = [100.0 if l.completed else 0.0 for l in logs]
    grasp = [100.0 * l.grasp_successes / l.grasp_attempts for l in logs if l.grasp_attempts]
    eff = [100.0 * l.object_count / l.n_actions if l.n_actions else 100.0 for l in logs if l.completed]
    return Metrics(float(np.mean(clearance)), float(np.mean(completion)),
                   float(np.mean(grasp)) if grasp else 0.0, float(np.mean(eff)) if eff else 0.0)


def _run_seeds(base: int, index: int) -> tuple[int, int]:
    scene_seed, policy_seed = np.random.SeedSequence([base, index]).generate_state(2)
    return int(scene_seed), int(policy_seed)


def make_scene(scenario: str, objects: int, unseen: bool, seed: int, bb: BinBox) -> binsim.BinScene:
    object_set = binsim.UNSEEN_OBJECTS if unseen else binsim.TRAIN_OBJECTS
    if scenario == "random":
        return binsim.spawn_random(objects, object_set, seed, bb)
    if scenario == "wall":
        return binsim.spawn_near_wall(objects, object_set, seed, bb)
    if scenario == "tucked":
        return binsim.spawn_wall_tucked(seed, TUCKED_OBJECT[unseen], bb=bb)
    raise ValueError(f"unknown scenario {scenario!r}")


def _evaluate_runs(agent: Agent, cfg: RunConfig, indices) -> list[EpisodeLog]:
    torch.set_num_threads(1)
    policy = agent_policy(agent, cfg.grasp_only)
    logs = []
    for i in indices:
        scene_seed, policy_seed = _run_seeds(cfg.seed, i)
        scene = make_scene(cfg.scenario, cfg.objects, cfg.unseen_objects, scene_seed, agent.bb)
        logs.append(run_episode(scene, policy, agent.spec, agent.gm, cfg.grasp_only,
                                seed=policy_seed, scenario=cfg.scenario))
    return logs


_WORKER_AGENT: Agent | None = None


def _worker_init(checkpoint: str) -> None:
    global _WORKER_AGENT
    torch.set_num_threads(1)
    _WORKER_AGENT = Agent.load(checkpoint)


def _worker_run(args) -> list[EpisodeLog]:
    cfg, indices = args
    return _evaluate_runs(_WORKER_AGENT, cfg, indices)


def run_evaluation(cfg: RunConfig, agent: Agent | None = None) -> tuple[Metrics, list[EpisodeLog]]:
    """Run ``cfg.runs`` independently seeded episodes; results are ordered by run index."""
    if agent is None:
        if cfg.checkpoint is None:
            raise ValueError("run_evaluation needs a checkpoint or an agent")
        agent = Agent.load(cfg.checkpoint)
    if cfg.grasp_only and GRASP not in agent.kinds:
        raise ValueError("checkpoint has no grasp network")
    if cfg.workers == 1 or cfg.checkpoint is None:
        logs = _evaluate_runs(agent, cfg, range(cfg.runs))
    else:
        chunks = [list(range(w, cfg.runs, cfg.workers)) for w in range(cfg.workers)]
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=(cfg.checkpoint,)) as ex:
            parts = list(ex.map(_worker_run, [(cfg, c) for c in chunks]))
        by_index = {i: log for c, part in zip(chunks, parts) for i, log in zip(c, part)}
        logs = [by_index[i] for i in range(cfg.runs)]
    return compute_metrics(logs), logs


def metrics_document(metrics: Metrics, cfg: RunConfig) -> str:
    """Canonical JSON for a metrics file: four metrics, run count and the config."""
    doc = {**metrics.to_dict(), "runs": cfg.runs, "config": cfg.to_dict()}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# -- rendering ----------------------------------------------------------------

PANEL_SCALE = 6


def scalar_to_rgb(values: np.ndarray, cmap: str = "viridis") -> tuple[np.ndarray, float, float]:
    """Min-max normalize a map and color it; returns ``(uint8 image, min, max)``."""
    from matplotlib import colormaps

    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    norm = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    rgb = colormaps[cmap](norm)[..., :3]
    return np.round(rgb * 255).astype(np.uint8), lo, hi


def _upscale(img: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(img, k, axis=0), k, axis=1)


def _compose(panel: np.ndarray, caption: str, action: PrimitiveAction | None, spec: GridSpec,
             scale: int) -> "Image.Image":
    from PIL import Image, ImageDraw

    # rows grow with world y; flip so +y points up in the image
    body = _upscale(panel[::-1], scale)
    h, w = body.shape[:2]
    canvas = Image.new("RGB", (w, h + 14), (255, 255, 255))
    canvas.paste(Image.fromarray(body), (0, 0))
    draw = ImageDraw.Draw(canvas)
    draw.text((2, h + 1), caption, fill=(0, 0, 0))
    if action is not None:
        r, c = action.pixel
        cx, cy = (c + 0.5) * scale, (spec.height_px - 1 - r + 0.5) * scale
        yaw = action.params.yaw
        length = 3 * scale
        dx, dy = length * math.cos(yaw), -length * math.sin(yaw)
        color = (255, 0, 0) if action.kind == GRASP else (255, 128, 0)
        draw.line([(cx - dx, cy - dy), (cx + dx, cy + dy)], fill=color, width=2)
        draw.ellipse([cx - 2, cy - 2, cx + 2, cy + 2], outline=color)
        if action.kind == SHIFT:
            pd = action.params.push_dir
            draw.line([(cx, cy), (cx + length * math.cos(pd), cy - length * math.sin(pd))],
                      fill=(255, 255, 255), width=1)
    return canvas


def render_outputs(out_dir, hm: Heightmap, maps: dict[str, np.ndarray] | None = None,
                   action: PrimitiveAction | None = None, prefix: str = "",
                   scale: int = PANEL_SCALE) -> list[Path]:
    """Write state RGB, state Z and per-primitive Q-map PNG panels; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rgb, _ = to_png_panels(hm)
    zimg, zlo, zhi = scalar_to_rgb(hm.z)
    panels = [("state_rgb", rgb, "RGB"), ("state_z", zimg, f"z {zlo:.3f}..{zhi:.3f} m")]
    for kind, q in (maps or {}).items():
        qimg, lo, hi = scalar_to_rgb(q)
        panels.append((f"q_{kind}", qimg, f"Q {kind} {lo:.3g}..{hi:.3g}"))
    paths = []
    for name, img, caption in panels:
        p = out / f"{prefix}{name}.png"
        _compose(img, caption, action, hm.spec, scale).save(p)
        paths.append(p)
    return paths


def render_episode(log: EpisodeLog, out_dir, gm: GripperModel | None = None) -> list[Path]:
    """Replay a logged episode in the simulator and render every state with its action."""
    if log.scene is None or log.grid is None:
        raise ValueError("episode log lacks the initial scene or grid")
    scene = binsim.BinScene.from_dict(log.scene)
    spec = GridSpec.from_dict(log.grid)
    paths = []
    for i, rec in enumerate(log.steps):
        action = PrimitiveAction.from_dict(rec.action)
        paths += render_outputs(out_dir, binsim.render(scene, spec), None, action, prefix=f"step{i:03d}_")
        scene = binsim.step(scene, action, spec, gm).next_scene
    paths += render_outputs(out_dir, binsim.render(scene, spec), None, None, prefix="final_")
    return paths


def render_checkpoint_scene(agent: Agent, scene: binsim.BinScene, out_dir, seed: int = 0) -> list[Path]:
    hm = binsim.render(scene, agent.spec)
    gen = torch.Generator().manual_seed(seed)
    maps = q_maps(hm, agent.acting_nets(), gen)
    action = action_from_maps(hm, maps)
    return render_outputs(out_dir, hm, {k: q for k, (q, _) in maps.items()}, action)
