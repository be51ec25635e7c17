"""Quick numerical and invariant checks runnable from the command line."""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy import integrate

from . import binsim
from .agent import Transition, augment
from .harness import EpisodeLog, StepRecord, compute_metrics
from .heightmap import world_to_pixel
from .policynet import NetworkSpec, PrimitiveNet, squashed_gaussian_log_prob
from .primitives import GRASP, SHIFT, BinBox, GripperModel, denormalize, grid_for_bin, make_action


def tiny_spec(action_dim: int = 3, terminal: bool = False) -> NetworkSpec:
    return NetworkSpec(action_dim=action_dim, embed_channels=4, hidden=8, bridge=4,
                       widths=(4, 4, 4, 4, 4), terminal=terminal)


def gradient_check(seed: int = 16, step: float = 1e-3) -> float:
    """Worst relative error between autograd and central differences over all parameters."""
    torch.manual_seed(seed)
    net = PrimitiveNet(tiny_spec(), seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 4, 8, 8, generator=gen, dtype=torch.float64)
    a = torch.rand(1, 8, 8, 3, generator=gen, dtype=torch.float64) * 2 - 1

    def loss():
        qa, _ = net.critic_forward(net.encode(x), a)
        return qa.sum()

    net.zero_grad()
    loss().backward()
    worst = 0.0
    with torch.no_grad():
        for p in net.parameters():
            # parameters off the loss path (actor, second head) have no gradient
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            flat, gflat = p.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss().item()
                flat[i] = orig - step
                down = loss().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                an = gflat[i].item()
                worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return worst


def squash_density_mass(mean: float = 0.0, log_std: float = 0.0) -> float:
    """Integral over (-1, 1) of the one-channel tanh-squashed Gaussian density."""
    m = torch.tensor([mean], dtype=torch.float64)
    s = torch.tensor([log_std], dtype=torch.float64)

    def density(y):
        if abs(y) >= 1:
            return 0.0
        u = torch.tensor([math.atanh(y)], dtype=torch.float64)
        return math.exp(float(squashed_gaussian_log_prob(u, m, s)))

    # split so the endpoint spikes of wide distributions and the mode are resolved
    inner = [-1 + 1e-12, -1 + 1e-8, -1 + 1e-4, -0.99, math.tanh(mean), 0.99, 1 - 1e-4, 1 - 1e-8, 1 - 1e-12]
    edges = [-1.0] + sorted(inner) + [1.0]
    return sum(integrate.quad(density, lo, hi, limit=400)[0] for lo, hi in zip(edges[:-1], edges[1:]))


def rotation_replay_agreement(pairs: int = 20, seed: int = 0) -> tuple[int, int]:
    """Replay (scene, action) and its half-turn rotation; count matching rewards."""
    bb, gm = BinBox(), GripperModel()
    spec = grid_for_bin(bb)
    rng = np.random.default_rng(seed)
    agree = 0
    for i in range(pairs):
        scene = binsim.spawn_random(int(rng.integers(1, 5)), seed=int(rng.integers(2**31)), bb=bb)
        hm = binsim.render(scene, spec)
        kind = GRASP if i % 2 == 0 else SHIFT
        o = scene.objects[int(rng.integers(len(scene.objects)))]
        row, col = world_to_pixel(spec, o.x, o.y)
        params = denormalize(kind, rng.uniform(-1, 1, 3 if kind == GRASP else 5), row, col)
        action = make_action(kind, params, hm)
        res = binsim.step(scene, action, spec, gm)
        t = Transition(hm, action, float(res.reward), binsim.render(res.next_scene, spec), res.success)
        (rt,) = augment([t], rng, spec, angles=[math.pi])
        rres = binsim.step(scene.rotated_pi(), rt.action, spec, gm)
        agree += int(rres.reward == res.reward)
    return agree, pairs


def metric_fixture_ok() -> bool:
    def log(n_obj, rewards, completed):
        steps = [StepRecord({"kind": GRASP}, r, "none", 0) for r in rewards]
        return EpisodeLog("random", 0, n_obj, steps, completed)
    a = log(4, [1, 1, 0, 1, 1], True)
    b = log(4, [0] * 10, False)
    c = log(3, [1, 1, 1], True)
    m1, m2, m3 = compute_metrics([a]), compute_metrics([a, b]), compute_metrics([c, c])
    return (m1.clearance, m1.completion, m1.grasp_success, m1.action_efficiency) == (100, 100, 80, 80) \
        and (m2.clearance, m2.completion, m2.grasp_success, m2.action_efficiency) == (50, 50, 40, 80) \
        and m3.action_efficiency == 100


def run_all(echo=print) -> bool:
    torch.set_num_threads(1)
    results = []
    err = gradient_check()
    results.append(("gradient check", err < 1e-4, f"max rel err {err:.2e}"))
    mass = squash_density_mass(0.3, -0.5)
    results.append(("squashed density mass", abs(mass - 1) < 1e-3, f"{mass:.6f}"))
    agree, n = rotation_replay_agreement()
    results.append(("half-turn replay", agree == n, f"{agree}/{n}"))
    results.append(("metric fixtures", metric_fixture_ok(), ""))
    for name, ok, detail in results:
        echo(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    return all(ok for _, ok, _ in results)
