import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from binpick import agent as ag
from binpick import binsim
from binpick.agent import (Agent, AgentConfig, ReplayBuffer, Streams, TemperatureState, Transition,
                           actor_loss, augment, balanced_counts, critic_loss, greedy_choice,
                           heuristic_action, q_maps, sample_balanced, select_action, td_target,
                           temperature_update, train_loop, train_step)
from binpick.heightmap import GridSpec, Heightmap, PixelMask, world_to_pixel
from binpick.policynet import PrimitiveNet
from binpick.primitives import (ACTION_DIM, GRASP, SHIFT, BinBox, GraspParams, GripperModel,
                                PrimitiveAction, action_feasible, denormalize, make_action)

SMALL = AgentConfig(network="small", cell=0.01, height_px=40, width_px=48, replay_capacity=500)
BB = BinBox()
GM = GripperModel()
SPEC = SMALL.grid(BB)


def make_transition(rng, kind=None, success=None):
    scene = binsim.spawn_random(int(rng.integers(1, 4)), seed=int(rng.integers(2**31)), bb=BB)
    hm = binsim.render(scene, SPEC)
    kind = kind or (GRASP if rng.random() < 0.5 else SHIFT)
    o = scene.objects[0]
    row, col = world_to_pixel(SPEC, o.x, o.y)
    a = make_action(kind, denormalize(kind, rng.uniform(-1, 1, ACTION_DIM[kind]), row, col), hm)
    res = binsim.step(scene, a, SPEC, GM)
    if success is not None and kind == SHIFT:
        res = binsim.StepResult(res.next_scene, int(success), success)
    if success is not None and res.success != success:
        res = binsim.StepResult(res.next_scene, int(success), success)
    return Transition(hm, a, float(res.reward), binsim.render(res.next_scene, SPEC), res.success)


def filled_buffer(n_success, n_failure, capacity=1000, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(capacity)
    base_s = make_transition(rng, GRASP, True)
    base_f = make_transition(rng, GRASP, False)
    for _ in range(n_success):
        buf.add(Transition(base_s.state, base_s.action, 1.0, base_s.next_state, True))
    for _ in range(n_failure):
        buf.add(Transition(base_f.state, base_f.action, 0.0, base_f.next_state, False))
    return buf


class ConstantCritic(PrimitiveNet):
    """Stub whose twin heads return fixed values at every pixel."""

    def __init__(self, spec, qa, qb=None):
        super().__init__(spec)
        self.qa, self.qb = qa, qa if qb is None else qb

    def critic_forward(self, e, a):
        shape = e.shape[:-1]
        return torch.full(shape, float(self.qa)), torch.full(shape, float(self.qb))


class ScaledCritic(PrimitiveNet):
    def __init__(self, net, c):
        super().__init__(net.spec)
        self.load_state_dict(net.state_dict())
        self.c = c

    def critic_forward(self, e, a):
        qa, qb = super().critic_forward(e, a)
        return self.c * qa, self.c * qb


# -- config ---------------------------------------------------------------

def test_config_defaults_and_schedule():
    cfg = AgentConfig()
    assert (cfg.gamma, cfg.horizon, cfg.lr, cfg.batch_size, cfg.alpha_init) == (0.99, 2, 1e-4, 16, 0.01)
    assert cfg.epsilon(0) == pytest.approx(0.9)
    assert cfg.epsilon(1000) == pytest.approx(0.55)
    assert cfg.epsilon(2000) == pytest.approx(0.2)
    assert cfg.epsilon(10**6) == pytest.approx(0.2)


@settings(max_examples=200, deadline=None)
@given(st.integers(-10, 10**7))
def test_epsilon_within_schedule_bounds(step):
    assert 0.2 - 1e-12 <= AgentConfig().epsilon(step) <= 0.9 + 1e-12


def test_config_validation_and_json(tmp_path):
    for bad in ({"gamma": 0.0}, {"gamma": 1.5}, {"horizon": 3}, {"primitives": ("poke",)},
                {"network": "huge"}, {"eps_end": 1.2}, {"min_objects": 5}):
        with pytest.raises(ValueError):
            AgentConfig(**bad)
    with pytest.raises(ValueError):
        AgentConfig.from_dict({"gama": 0.9})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL.to_dict()))
    assert AgentConfig.from_json(path) == SMALL


# -- selection --------------------------------------------------------------

def test_greedy_choice_examples():
    g = np.zeros((6, 8))
    g[3, 5] = 0.9
    s = np.full((6, 8), 0.2)
    assert greedy_choice({GRASP: g, SHIFT: s}) == (GRASP, 3, 5)
    tie = np.zeros((6, 8))
    tie[4, 1] = tie[2, 6] = 1.0
    assert greedy_choice({GRASP: tie}) == (GRASP, 2, 6)
    tie2 = np.zeros((6, 8))
    tie2[2, 3] = tie2[2, 7] = 1.0
    assert greedy_choice({GRASP: tie2}) == (GRASP, 2, 3)
    assert greedy_choice({GRASP: tie, SHIFT: tie}) == (GRASP, 2, 6)
    with pytest.raises(ValueError):
        greedy_choice({})


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100))
def test_greedy_choice_scale_covariant(seed, c):
    r = np.random.default_rng(seed)
    qs = {GRASP: r.normal(size=(5, 7)), SHIFT: r.normal(size=(5, 7))}
    assert greedy_choice({k: c * v for k, v in qs.items()}) == greedy_choice(qs)


def test_selection_scale_covariant_through_networks():
    agent = Agent(SMALL, seed=0)
    hm = binsim.render(binsim.spawn_random(3, seed=4, bb=BB), SPEC)
    nets = agent.acting_nets()
    base = select_action(hm, nets, "greedy", rng=np.random.default_rng(1))
    for c in (0.5, 3.0):
        scaled = {k: ScaledCritic(n, c) for k, n in nets.items()}
        assert select_action(hm, scaled, "greedy", rng=np.random.default_rng(1)) == base


def test_select_action_epsilon_one_uses_heuristic():
    class Boom(dict):
        def __getitem__(self, k):
            raise AssertionError("networks must not be consulted")

    hm = binsim.render(binsim.spawn_random(2, seed=1, bb=BB), SPEC)
    nets = Boom({GRASP: None, SHIFT: None})
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = select_action(hm, nets, "explore", None, 1.0, rng, BB, GM, SMALL)
        assert a.kind in (GRASP, SHIFT)


def test_select_action_greedy_reads_action_map():
    agent = Agent(SMALL, seed=2)
    hm = binsim.render(binsim.spawn_random(2, seed=3, bb=BB), SPEC)
    maps = q_maps(hm, agent.acting_nets(), torch.Generator().manual_seed(5))
    kind, row, col = greedy_choice({k: q for k, (q, _) in maps.items()})
    a = select_action(hm, agent.acting_nets(), "greedy", rng=None)
    assert a.kind in (GRASP, SHIFT) and 0 <= a.params.row < 40
    expect = denormalize(kind, np.clip(maps[kind][1][row, col].astype(float), -1, 1), row, col)
    via = ag.action_from_maps(hm, maps)
    assert via.params == expect and via.pixel == (row, col)
    with pytest.raises(ValueError):
        select_action(hm, agent.acting_nets(), "random")


def test_heuristic_action_examples():
    hm = binsim.render(binsim.spawn_random(1, seed=2, bb=BB), SPEC)
    bits = np.zeros(SPEC.shape, bool)
    bits[20, 24] = True
    mask = PixelMask(SPEC, bits)
    for s in range(10):
        a = heuristic_action(hm, mask, BB, GM, np.random.default_rng(s), mask_portion=1.0)
        assert a.pixel == (20, 24)
    empty = PixelMask(SPEC, np.zeros(SPEC.shape, bool))
    pixels = {heuristic_action(hm, empty, BB, GM, np.random.default_rng(s)).pixel for s in range(200)}
    assert len(pixels) > 150
    a1 = heuristic_action(hm, mask, BB, GM, np.random.default_rng(9))
    a2 = heuristic_action(hm, mask, BB, GM, np.random.default_rng(9))
    assert a1 == a2


def test_heuristic_actions_feasible_or_vertical_fallback():
    hm = binsim.render(binsim.spawn_random(3, seed=5, bb=BB), SPEC)
    rng = np.random.default_rng(0)
    kinds = set()
    for _ in range(200):
        a = heuristic_action(hm, None, BB, GM, rng)
        kinds.add(a.kind)
        if not action_feasible(a, SPEC, GM, BB):
            assert a.params.pitch == 0.0
            if a.kind == SHIFT:
                assert a.params.roll == 0.0
    assert kinds == {GRASP, SHIFT}


# -- losses -----------------------------------------------------------------

def test_td_target_examples():
    rng = np.random.default_rng(0)
    spec = SMALL.network_spec(GRASP, 1)
    succ, fail = make_transition(rng, GRASP, True), make_transition(rng, GRASP, False)
    half = {GRASP: ConstantCritic(spec, 0.5, 0.7)}
    y = td_target([succ, fail], half, 0.99)
    assert y.tolist() == pytest.approx([1.0, 0.495])
    zero = {GRASP: ConstantCritic(spec, 0.0)}
    assert td_target([fail], zero, 0.99).tolist() == [0.0]
    both = {GRASP: ConstantCritic(spec, 0.2), SHIFT: ConstantCritic(SMALL.network_spec(SHIFT, 1), 0.6)}
    assert td_target([fail], both, 0.5).tolist() == pytest.approx([0.3])


def test_td_target_does_not_backpropagate_into_terminal_nets():
    agent = Agent(SMALL, seed=0)
    rng = np.random.default_rng(1)
    batch = [make_transition(rng, GRASP, False) for _ in range(4)]
    for p in agent.nets.phi1[GRASP].parameters():
        p.grad = None
    y = td_target(batch, agent.nets.phi1, 0.99)
    assert not y.requires_grad
    net0 = agent.nets.phi0[GRASP]
    rows, cols, params = ag._pixels_and_params(batch)
    qa, qb = net0.q_of_stored(net0.encode(ag.to_batch([t.state for t in batch])), rows, cols, params)
    critic_loss(0, qa, qb, y).backward()
    assert all(p.grad is None or not p.grad.any() for p in agent.nets.phi1[GRASP].parameters())
    assert any(p.grad is not None and p.grad.any() for p in net0.parameters())


def test_critic_loss_examples():
    half = torch.tensor([0.5])
    assert float(critic_loss(1, half, half, torch.tensor([1.0]))) == pytest.approx(2 * math.log(2))
    q = torch.tensor([0.3])
    assert float(critic_loss(0, q, q, torch.tensor([0.5]))) == pytest.approx(0.08)
    assert float(critic_loss(0, q, q, q)) == 0.0
    with pytest.raises(ValueError):
        critic_loss(1, torch.tensor([1.0]), half, torch.tensor([1.0]))
    with pytest.raises(ValueError):
        critic_loss(1, half, half, torch.tensor([0.4]))
    with pytest.raises(ValueError):
        critic_loss(2, half, half, half)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=1, max_size=6), st.data())
def test_bce_from_logits_matches_probability_form(logits, data):
    y = torch.tensor(data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(logits), max_size=len(logits))))
    la = torch.tensor(logits, dtype=torch.float64)
    lb = -la
    ref = critic_loss(1, torch.sigmoid(la), torch.sigmoid(lb), y.double())
    assert float(ag.terminal_critic_loss_from_logits(la, lb, y.double())) == pytest.approx(float(ref), rel=1e-9)


def test_actor_loss_examples():
    q = torch.tensor([0.2, 0.6])
    assert float(actor_loss(q, torch.tensor([1.0, -4.0]), 0.0)) == pytest.approx(-0.4)
    assert float(actor_loss(torch.tensor([0.5]), torch.tensor([-3.0]), 0.01)) == pytest.approx(-0.53)


def test_actor_loss_entropy_term_widens_policy():
    # a narrow policy, well below the squashed entropy maximum
    mean = torch.zeros(4096, 1)
    log_std = torch.full((4096, 1), -1.0, requires_grad=True)
    noise = torch.randn(4096, 1, generator=torch.Generator().manual_seed(0))
    u = mean + log_std.exp() * noise
    from binpick.policynet import squashed_gaussian_log_prob
    log_pi = squashed_gaussian_log_prob(u, mean, log_std)
    actor_loss(torch.full((4096,), 0.3), log_pi, 0.1).backward()
    # descending the loss raises log_std, i.e. entropy
    assert float(log_std.grad.sum()) < 0


def test_temperature_update_examples():
    temps = TemperatureState([(0, GRASP)], 0.01, lr=0.1)
    temperature_update(torch.full((8,), 3.0), -3.0, temps, (0, GRASP))
    assert temps.alpha((0, GRASP)) == pytest.approx(0.01)
    temperature_update(torch.full((8,), 5.0), -3.0, temps, (0, GRASP))
    assert temps.alpha((0, GRASP)) > 0.01
    temps2 = TemperatureState([(1, SHIFT)], 0.01, lr=0.5)
    for _ in range(200):
        temperature_update(torch.full((8,), -50.0), -5.0, temps2, (1, SHIFT))
        assert temps2.alpha((1, SHIFT)) > 0


def test_temperature_state_round_trip():
    temps = TemperatureState([(0, GRASP), (1, GRASP)], 0.01, lr=0.1)
    temperature_update(torch.full((4,), 1.0), -3.0, temps, (0, GRASP))
    other = TemperatureState([(0, GRASP), (1, GRASP)], 0.5, lr=0.1)
    other.load_arrays(temps.to_arrays())
    for k in temps.log_alpha:
        assert other.alpha(k) == pytest.approx(temps.alpha(k))
    temperature_update(torch.full((4,), 1.0), -3.0, temps, (0, GRASP))
    temperature_update(torch.full((4,), 1.0), -3.0, other, (0, GRASP))
    assert other.alpha((0, GRASP)) == pytest.approx(temps.alpha((0, GRASP)), rel=1e-6)


# -- replay ---------------------------------------------------------------

def test_balanced_counts_examples():
    assert balanced_counts(100, 100, 16) == (8, 8)
    assert balanced_counts(3, 100, 16) == (3, 13)
    assert balanced_counts(0, 5, 16) == (0, 16)
    assert balanced_counts(100, 2, 16) == (14, 2)
    with pytest.raises(RuntimeError):
        balanced_counts(0, 0, 16)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(1, 32))
def test_balanced_counts_deficit_rules(n_s, n_f, batch):
    if n_s == 0 and n_f == 0:
        return
    s, f = balanced_counts(n_s, n_f, batch)
    assert s + f == batch and s >= 0 and f >= 0
    half = batch // 2
    if n_s == 0:
        assert (s, f) == (0, batch)
    elif n_f == 0:
        assert (s, f) == (batch, 0)
    elif n_s < half:
        assert (s, f) == (n_s, batch - n_s)
    elif n_f < batch - half:
        assert (s, f) == (batch - n_f, n_f)
    else:
        assert (s, f) == (half, batch - half)


def test_sample_balanced_examples():
    rng = np.random.default_rng(0)
    out = sample_balanced(filled_buffer(100, 100), 16, rng)
    assert sum(t.success for t in out) == 8
    out = sample_balanced(filled_buffer(3, 100), 16, rng)
    assert sum(t.success for t in out) == 3 and len(out) == 16
    out = sample_balanced(filled_buffer(0, 5), 16, rng)
    assert len(out) == 16 and not any(t.success for t in out)
    with pytest.raises(RuntimeError):
        sample_balanced(ReplayBuffer(4), 16, rng)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.lists(st.booleans(), max_size=40))
def test_replay_capacity_and_partitions(capacity, outcomes):
    rng = np.random.default_rng(0)
    s, f = make_transition(rng, GRASP, True), make_transition(rng, GRASP, False)
    buf = ReplayBuffer(capacity)
    for ok in outcomes:
        buf.add(s if ok else f)
        assert len(buf) <= capacity
        assert all(t.success for t in buf.partition(True))
        assert not any(t.success for t in buf.partition(False))
        assert buf.count(True) + buf.count(False) == len(buf)


def test_replay_evicts_oldest_of_own_partition():
    rng = np.random.default_rng(0)
    base = make_transition(rng, GRASP, False)
    fails = [Transition(base.state, base.action, 0.0, base.next_state, False) for _ in range(3)]
    succ = make_transition(rng, GRASP, True)
    buf = ReplayBuffer(3)
    buf.add(fails[0])
    buf.add(succ)
    buf.add(fails[1])
    buf.add(fails[2])
    assert buf.partition(False) == [fails[1], fails[2]]
    assert buf.partition(True) == [succ]


def test_transition_checks_reward():
    rng = np.random.default_rng(0)
    t = make_transition(rng, GRASP, False)
    with pytest.raises(ValueError):
        Transition(t.state, t.action, 1.0, t.next_state, False)
    assert t.params.dtype == np.float32 and t.params.shape == (3,)


# -- augmentation -------------------------------------------------------------

def test_augment_angle_zero_and_pi():
    rng = np.random.default_rng(0)
    batch = [make_transition(rng) for _ in range(6)]
    same = augment(batch, rng, SPEC, angles=[0.0] * 6)
    assert all(a is b for a, b in zip(same, batch))
    rot = augment(batch, rng, SPEC, angles=[math.pi] * 6)
    for t, r in zip(batch, rot):
        assert r.action.pixel == (39 - t.action.pixel[0], 47 - t.action.pixel[1])
        assert (r.reward, r.success) == (t.reward, t.success)
        assert np.array_equal(r.state.z, t.state.z[::-1, ::-1])


def test_augment_keeps_out_of_frame_transitions():
    spec = GridSpec(height_px=8, width_px=16)
    hm = Heightmap.empty(spec)
    a = PrimitiveAction(GRASP, GraspParams(0, 0))
    t = Transition(hm, a, 0.0, hm, False)
    assert augment([t], np.random.default_rng(0), spec, angles=[math.pi / 2])[0] is t


def test_augment_label_validity_half_turn():
    from binpick.selfcheck import rotation_replay_agreement
    agree, n = rotation_replay_agreement(pairs=100, seed=3)
    assert agree == n


# -- training -----------------------------------------------------------------

def test_train_step_report_and_determinism():
    def run():
        agent = Agent(SMALL, seed=0)
        rng = np.random.default_rng(0)
        buf = ReplayBuffer(100)
        for i in range(10):
            buf.add(make_transition(rng, GRASP if i % 2 else SHIFT))
        buf.add(make_transition(rng, GRASP, True))
        return train_step(agent, buf, Streams.from_seed(4)), agent

    (r1, agent), (r2, _) = run(), run()
    assert r1 == r2
    assert len(r1["losses"]) == 8 and all(v is not None for v in r1["losses"].values())
    assert r1["loss_types"] == {"1": "bce", "0": "mse"}
    assert agent.step_count == 1


def test_train_step_all_success_uses_unit_labels(monkeypatch):
    seen = []
    orig = ag.terminal_critic_loss_from_logits

    def spy(la, lb, y):
        seen.append(y.clone())
        return orig(la, lb, y)

    monkeypatch.setattr(ag, "terminal_critic_loss_from_logits", spy)
    buf = filled_buffer(5, 0)
    train_step(Agent(SMALL, seed=0), buf, Streams.from_seed(0))
    assert len(seen) == 1 and bool((seen[0] == 1).all())


def test_train_step_only_touches_primitives_with_data():
    buf = filled_buffer(2, 2)
    report = train_step(Agent(SMALL, seed=0), buf, Streams.from_seed(0))
    assert report["losses"]["critic/1/shift"] is None
    assert report["losses"]["critic/1/grasp"] is not None
    with pytest.raises(RuntimeError):
        train_step(Agent(SMALL, seed=0), ReplayBuffer(3), Streams.from_seed(0))


def test_train_loop_writes_logs_and_checkpoints(tmp_path):
    cfg = AgentConfig(**{**SMALL.to_dict(), "replay_capacity": 6, "checkpoint_every": 5})
    agent, records = train_loop(cfg, 3, 12, out_dir=tmp_path)
    assert len(records) == 12
    assert all(r["replay_size"] <= 6 for r in records)
    assert records[0]["epsilon"] == pytest.approx(0.9)
    assert all(v > 0 for r in records for v in r["alpha"].values())
    assert set(records[0]) == {"step", "episode", "primitive", "reward", "failure_reason", "epsilon",
                               "alpha", "losses", "replay_size"}
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == json.loads(json.dumps(records))
    assert (tmp_path / "checkpoint_5.npz").exists() and (tmp_path / "checkpoint_10.npz").exists()
    # episodes end on grasp success or after the cap
    for ep in {r["episode"] for r in records}:
        rs = [r for r in records if r["episode"] == ep]
        assert len(rs) <= cfg.episode_cap
        assert all(r["reward"] == 0 for r in rs[:-1])

    loaded = Agent.load(tmp_path / "checkpoint.npz")
    assert loaded.step_count == agent.step_count
    assert loaded.alphas() == pytest.approx(agent.alphas())
    hm = binsim.render(binsim.spawn_random(3, seed=8, bb=BB), SPEC)
    for grasp_only in (False, True):
        a1 = select_action(hm, agent.acting_nets(grasp_only), "greedy", rng=np.random.default_rng(2))
        a2 = select_action(hm, loaded.acting_nets(grasp_only), "greedy", rng=np.random.default_rng(2))
        assert a1 == a2


def test_grasp_only_training_has_no_shift_networks():
    cfg = AgentConfig(**{**SMALL.to_dict(), "primitives": ["grasp"]})
    agent, records = train_loop(cfg, 0, 4)
    assert agent.kinds == (GRASP,)
    assert all(r["primitive"] == GRASP for r in records)
    assert set(records[-1]["losses"]) == {"critic/1/grasp", "critic/0/grasp", "actor/1/grasp", "actor/0/grasp"}
