import math

import numpy as np
import pytest

from cntpp.events import ENGAGEMENT, GENERATION, EventSequence, RateBoundExceeded, engagement, generation, write_dataset
from cntpp.world import (
    ConstantNet,
    GroundTruth,
    World,
    WorldSpec,
    _ratio_estimate,
    initial_status,
    oracle_ite,
    oracle_ites,
    simulate,
)

SMALL = dict(n_users=60, n_news=8, horizon=20.0)


@pytest.fixture(scope="module")
def small_world():
    world = World(WorldSpec(**SMALL, seed=11))
    trajs, truth = simulate(world)
    return world, trajs, truth


def pinned(d=3, **kw):
    return World(WorldSpec(n_users=1, n_news=1, d_hidden=d, d_f=2, **kw))


class TestIntensities:
    def test_engagement_base_only(self):
        w = pinned()
        w.v_topic[0] = [0.7, 0.0, 0.0]
        assert w.engagement_intensity(0, 1.0, np.array([1.0, 5.0, -2.0]), EventSequence(0)) == pytest.approx(0.7)

    def test_engagement_clamped(self):
        w = pinned()
        w.v_topic[0] = [-0.5, 0.0, 0.0]
        assert w.engagement_intensity(0, 1.0, np.array([1.0, 0.0, 0.0]), EventSequence(0)) == 0.0

    def test_engagement_decay_kernel(self):
        w = pinned()
        w.nn_rec = ConstantNet(1.0)
        w.refresh()
        hist = EventSequence(0, (generation(0.0, [0.3, 0.1]),))
        val = w.engagement_intensity(0, 1.0, np.zeros(3), hist)
        assert val == pytest.approx(math.exp(-1), abs=1e-12)

    def test_generation_zero_status(self):
        assert pinned().generation_intensity(1.0, np.zeros(3), EventSequence(0)) == 0.0

    def test_generation_unit_status(self):
        u = np.array([0.6, 0.8, 0.0])
        assert pinned().generation_intensity(1.0, u, EventSequence(0)) == pytest.approx(1.0)

    def test_generation_negative_excitation_clamped(self):
        w = pinned()
        w.nn_post = ConstantNet(-2.0)
        u = np.array([1.0, 0.0, 0.0])
        hist = EventSequence(0, (generation(0.5, [0.0, 0.0]),))
        raw = 1.0 - 2.0 * 0.5
        assert raw == pytest.approx(0.0)
        assert w.generation_intensity(0.5 + math.log(2), u, hist) == pytest.approx(0.0, abs=1e-12)
        assert w.generation_intensity(0.5 + 0.1, u, hist) == 0.0

    def test_history_must_precede(self):
        hist = EventSequence(0, (generation(2.0, [0.0, 0.0]),))
        with pytest.raises(ValueError):
            pinned().generation_intensity(1.0, np.ones(3), hist)


class TestObservation:
    def test_noise_free_deterministic(self):
        w = World(WorldSpec(n_users=1, user_noise=0.0))
        u = np.full(w.spec.d_hidden, 0.1)
        a = w.observe_post(u, 3.0, np.random.default_rng(0))
        b = w.observe_post(u, 3.0, np.random.default_rng(1))
        assert np.array_equal(a, b)

    def test_distinct_status_distinct_output(self):
        w = World(WorldSpec(n_users=1, user_noise=0.0))
        rng = np.random.default_rng(0)
        a = w.observe_post(np.zeros(w.spec.d_hidden), 3.0, rng)
        b = w.observe_post(np.full(w.spec.d_hidden, 0.2), 3.0, rng)
        assert not np.allclose(a, b)

    def test_monte_carlo_mean_converges(self):
        w = World(WorldSpec(n_users=1, user_noise=0.3))
        rng = np.random.default_rng(5)
        u = np.full(w.spec.d_hidden, 0.1)
        draws = np.array([w.observe_post(u, 2.0, rng) for _ in range(10_000)])
        sd = draws.std(axis=0, ddof=1)
        batch_means = draws.reshape(100, 100, -1).mean(axis=1)
        ratio = batch_means.std(axis=0, ddof=1) / (sd / 10)
        assert np.all((ratio > 0.75) & (ratio < 1.25))
        assert np.all(sd > 0)


class TestStatusUpdate:
    def test_zero_influence(self):
        w = pinned()
        w.v_in[0] = 0.0
        u = np.array([0.1, -0.2, 0.3])
        u2, d = w.apply_engagement(u, 0)
        assert np.array_equal(u2, u) and not d.any()

    def test_zero_scale(self):
        w = pinned()
        w.nn_scale = ConstantNet(0.0)
        u = np.array([0.1, -0.2, 0.3])
        assert np.array_equal(w.apply_engagement(u, 0)[0], u)

    def test_pinned_delta(self):
        w = pinned()
        w.nn_scale = ConstantNet(0.5)
        w.v_in[0] = [1.0, 0.0, 0.0]
        u = np.array([0.1, -0.2, 0.3])
        u2, d = w.apply_engagement(u, 0)
        assert d == pytest.approx([0.5, 0.0, 0.0])
        assert u2 == pytest.approx(u + d)


class TestSimulate:
    def test_no_news_only_generation(self):
        trajs, truth = simulate(WorldSpec(n_users=20, n_news=0, horizon=10.0))
        assert all(e.kind == GENERATION for t in trajs for e in t.events)
        assert truth.records == []

    def test_full_scale_preset(self):
        s = WorldSpec.full()
        assert (s.n_users, s.n_news) == (15000, 120)

    def test_deterministic_files(self, tmp_path):
        spec = WorldSpec(**SMALL, seed=4)
        for name in ("a", "b"):
            trajs, truth = simulate(spec)
            write_dataset(tmp_path / f"{name}.events", [t.events for t in trajs])
            truth.save(tmp_path / f"{name}.gt")
        assert (tmp_path / "a.events").read_bytes() == (tmp_path / "b.events").read_bytes()
        assert (tmp_path / "a.gt").read_bytes() == (tmp_path / "b.gt").read_bytes()

    def test_digest_depends_on_seed(self):
        assert World(WorldSpec(seed=1)).digest() != World(WorldSpec(seed=2)).digest()

    def test_event_legality(self, small_world):
        world, trajs, _ = small_world
        for tr in trajs:
            for e in tr.events:
                assert e.t < world.spec.horizon
                if e.kind == ENGAGEMENT:
                    assert e.t >= world.post_time[e.news_id]
                    assert np.array_equal(e.feature, world.news_feature[e.news_id])

    def test_one_engagement_per_news(self, small_world):
        _, trajs, _ = small_world
        for tr in trajs:
            ids = [e.news_id for e in tr.events if e.kind == ENGAGEMENT]
            assert len(ids) == len(set(ids))

    def test_status_conservation(self, small_world):
        world, trajs, truth = small_world
        deltas = {}
        for r in truth.records:
            deltas.setdefault(r.user_id, []).append(r)
        for tr in trajs:
            recs = deltas.get(tr.user_id, [])
            assert len(recs) == len(tr.checkpoints) == len(tr.engagement_indices())
            u = tr.u0.copy()
            for (t, u_after), r in zip(tr.checkpoints, recs):
                u = u + r.delta_u
                assert t == r.t
                assert u_after == pytest.approx(u, abs=1e-12)

    def test_delta_matches_formula(self, small_world):
        world, trajs, truth = small_world
        look = truth.lookup()
        for tr in trajs[:10]:
            for k in tr.engagement_indices():
                r = look[(tr.user_id, k)]
                _, d = world.apply_engagement(tr.status_before(k), r.news_id)
                assert r.delta_u == pytest.approx(d, abs=1e-12)

    def test_initial_status_matches(self, small_world):
        world, trajs, _ = small_world
        u0 = initial_status(world.spec, [t.user_id for t in trajs])
        assert np.array_equal(u0, np.array([t.u0 for t in trajs]))

    def test_news_averages(self, small_world):
        _, _, truth = small_world
        for n, avg in truth.news_avg_delta.items():
            rows = [r.delta_u for r in truth.records if r.news_id == n]
            assert avg == pytest.approx(np.mean(rows, axis=0))

    def test_runaway_reported(self):
        from cntpp.world import SimulationDiverged

        spec = WorldSpec(n_users=5, n_news=0, horizon=50.0, user_scale=3.0, max_events=20)
        with pytest.raises(SimulationDiverged):
            simulate(spec)

    def test_truth_file_round_trip(self, small_world, tmp_path):
        _, _, truth = small_world
        truth.records[0].oracle_ite = np.array([0.1, 0.2, 0.3, 0.4])
        truth.save(tmp_path / "t.gt")
        back = GroundTruth.load(tmp_path / "t.gt")
        truth.records[0].oracle_ite = None
        assert back.digest == truth.digest
        assert back.records[0].oracle_ite.tolist() == [0.1, 0.2, 0.3, 0.4]
        assert all(np.array_equal(a.delta_u, b.delta_u) for a, b in zip(back.records, truth.records))


# -- reference simulator ---------------------------------------------------------


def _first_point(rate_fn, bound, start, end, rng):
    t = start
    while True:
        t += rng.exponential(1.0 / bound)
        if t >= end:
            return None
        r = rate_fn(t)
        if r > bound * (1 + 1e-9):
            raise RateBoundExceeded(r)
        if rng.uniform() * bound < r:
            return t


def reference_user(world: World, u0: np.ndarray, rng) -> list:
    """Competing-risks loop with every candidate redrawn after each event."""
    T = world.spec.horizon
    t, u, hist, engaged = 0.0, u0.copy(), [], set()
    while True:
        seq = EventSequence(0, tuple(hist))
        best = (math.inf, None)
        pos = sum(max(0.0, math.exp(e.t - t) * world._history_weight(e)
                      * float(world.post_excitation(np.array(e.feature), u))) for e in hist)
        bound = float(u @ u) + pos
        if bound > 0:
            c = _first_point(lambda s: world.generation_intensity(s, u, seq), bound, t, T, rng)
            if c is not None:
                best = (c, -1)
        for k in range(world.spec.n_news):
            if k in engaged:
                continue
            start = max(t, float(world.post_time[k]))
            pos = sum(max(0.0, math.exp(e.t - t) * world._history_weight(e)
                          * float(world.rec_matrix(np.array(e.feature))[0, k])) for e in hist)
            bound = max(0.0, float(world.v_topic[k] @ u) + pos)
            if bound <= 0:
                continue
            c = _first_point(lambda s: world.engagement_intensity(k, s, u, seq), bound, start, T, rng)
            if c is not None and c < best[0]:
                best = (c, k)
        if best[1] is None:
            return hist
        t, k = best
        if k < 0:
            hist.append(generation(t, world.observe_post(u, t, rng)))
        else:
            hist.append(engagement(t, world.news_feature[k], k))
            u, _ = world.apply_engagement(u, k)
            engaged.add(k)


def test_engine_matches_reference_simulator():
    spec = WorldSpec(n_users=200, n_news=10, horizon=40.0, seed=3)
    world = World(spec)
    trajs, _ = simulate(world)
    rng = np.random.default_rng(99)
    ref = [reference_user(world, tr.u0, rng) for tr in trajs]

    def stats(seqs):
        n_g = np.array([sum(e.kind == GENERATION for e in s) for s in seqs], float)
        n_e = np.array([sum(e.kind == ENGAGEMENT for e in s) for s in seqs], float)
        f = np.array([e.feature[0] for s in seqs for e in s if e.kind == GENERATION])
        return n_g, n_e, f

    for a, b in zip(stats([t.events.events for t in trajs]), stats(ref)):
        se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
        assert abs(a.mean() - b.mean()) <= 3.5 * se, (a.mean(), b.mean(), se)


# -- oracle ------------------------------------------------------------------


def test_ratio_of_means_not_mean_of_ratios():
    F, var, mu = _ratio_estimate(np.array([1.0, 3.0]), np.array([[1.0], [9.0]]), 1e-3)
    assert F[0] == pytest.approx(10 / 4)
    assert mu == 2.0


def test_ratio_undefined_below_floor():
    F, var, mu = _ratio_estimate(np.zeros(10), np.zeros((10, 2)), 1e-3)
    assert F is None


def test_oracle_rejects_non_engagement(small_world):
    world, trajs, _ = small_world
    tr = next(t for t in trajs if t.events[0].kind == GENERATION)
    with pytest.raises(IndexError):
        oracle_ite(world, tr, 0, 5.0, 10)


def _items(trajs, n):
    return [(t, k) for t in trajs for k in t.engagement_indices()][:n]


def test_oracle_se_shrinks_with_rollouts(small_world):
    world, trajs, _ = small_world
    items = _items(trajs, 20)
    se1 = np.array([e.se for e in oracle_ites(world, items, 10.0, 200)])
    se2 = np.array([e.se for e in oracle_ites(world, items, 10.0, 400)])
    ratio = np.median(se2 / se1)
    assert 0.62 < ratio < 0.80


def test_oracle_neutralized_news_is_null():
    spec = WorldSpec(n_users=80, n_news=6, horizon=20.0, seed=2, neutralize_news=(0, 1, 2, 3, 4, 5))
    world = World(spec)
    trajs, truth = simulate(world)
    assert all(not r.delta_u.any() for r in truth.records)
    ests = oracle_ites(world, _items(trajs, 40), 10.0, 200)
    z = np.concatenate([np.abs(e.ite) / e.se for e in ests if e.ite is not None])
    assert np.mean(z <= 3.0) >= 0.95


def test_oracle_micro_world_self_consistency():
    spec = WorldSpec(n_users=1, n_news=1, d_hidden=2, horizon=50.0, seed=7, news_post_window=0.1)
    world = World(spec)
    world.nn_scale = ConstantNet(1.5)  # pin a visible effect
    world.refresh()
    trajs, _ = simulate(world)
    (tr,) = trajs
    k = tr.engagement_indices()[0]
    a = oracle_ite(world, tr, k, 10.0, 10_000, seed=1)
    b = oracle_ite(world, tr, k, 10.0, 100_000, seed=2)
    se = np.sqrt(a.se ** 2 + b.se ** 2)
    assert np.all(np.abs(a.ite - b.ite) <= 3 * se)


def test_oracle_deterministic(small_world):
    world, trajs, _ = small_world
    items = _items(trajs, 5)
    a = oracle_ites(world, items, 10.0, 50, seed=3)
    b = oracle_ites(world, items, 10.0, 50, seed=3)
    assert all(np.array_equal(x.ite, y.ite) for x, y in zip(a, b))
