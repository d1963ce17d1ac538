import numpy as np
import pytest

from safempc.constraints import (
    PASS,
    YIELD,
    CollisionInterval,
    CorridorParams,
    ObstacleIntervals,
    build_collision_intervals,
    enumerate_configurations,
    g_eval,
    tube_interval,
)
from safempc.models import VehicleParams
from safempc.pedestrians import Edge, PedestrianBelief, PredictionParams, RoadGraph
from safempc.reference import from_curvature_profile, from_straight

PVEH = VehicleParams()


def crossing_edge(x=10.0, y0=-5.0, y1=5.0, edge_id="cross"):
    return Edge(edge_id, 0, 1, np.array([[x, y0], [x, y1]]))


def point_belief(edge, world_y, lat=0.0, obstacle_id="ped"):
    # edge runs south->north: lon = world_y - y0
    lon = world_y - edge.path[0][1]
    return PedestrianBelief.from_measurement(edge, lon, lat, obstacle_id=obstacle_id)


class TestTubeInterval:
    def test_circle_line_hand_case(self):
        path = from_straight(30.0, 5.0, PVEH)
        edge = crossing_edge(x=10.0)
        belief = point_belief(edge, world_y=0.3)
        c = CorridorParams(e_y_max=0.2, delta_safe=0.3)  # Delta = 0.5
        iv = tube_interval(path, belief, c)
        assert not iv.empty
        assert iv.sigma_lo == pytest.approx(10.0 - 0.4, abs=1e-3)
        assert iv.sigma_hi == pytest.approx(10.0 + 0.4, abs=1e-3)

    def test_far_box_empty(self):
        path = from_straight(30.0, 5.0, PVEH)
        edge = crossing_edge(x=10.0)
        belief = point_belief(edge, world_y=10.0)
        iv = tube_interval(path, belief, CorridorParams(0.4, 0.6))
        assert iv.empty

    def test_grid_oracle_on_curved_path(self):
        path = from_curvature_profile(
            [(10.0, 0.0, 0.0), (5.0, 0.0, 0.05), (25.0, 0.05, 0.05),
             (5.0, 0.05, 0.0), (10.0, 0.0, 0.0)],
            [[0.0, 5.0], [55.0, 5.0]], PVEH, spacing=0.25)
        rng = np.random.default_rng(9)
        c = CorridorParams(e_y_max=0.4, delta_safe=1.0)
        checked = 0
        for _ in range(25):
            s_c = rng.uniform(8.0, 45.0)
            ch = path.channels(np.asarray([s_c]))
            offset = rng.uniform(-3.5, 3.5)
            normal = np.array([-np.sin(ch["heading"][0]), np.cos(ch["heading"][0])])
            center = np.array([ch["x"][0], ch["y"][0]]) + offset * normal
            direction = rng.normal(size=2)
            direction /= np.linalg.norm(direction)
            edge = Edge("e", 0, 1, np.array([center - 6 * direction,
                                             center + 6 * direction]))
            half_lon = rng.uniform(0.05, 1.5)
            half_lat = rng.uniform(0.02, 0.4)
            belief = PedestrianBelief(edge, 6.0, 0.0, 6.0 - half_lon,
                                      6.0 + half_lon, -half_lat, half_lat)
            iv = tube_interval(path, belief, c)
            # oracle: 1 cm grid over the whole path
            from safempc.constraints import _box_pieces, _distance_to_pieces, _path_points
            grid = np.arange(path.s_min, path.s_max, 0.01)
            dist = _distance_to_pieces(_path_points(path, grid), _box_pieces(belief))
            inside = dist <= c.delta_total
            if not inside.any():
                assert iv.empty
                continue
            checked += 1
            assert not iv.empty
            assert iv.sigma_lo == pytest.approx(grid[np.flatnonzero(inside)[0]], abs=0.02)
            assert iv.sigma_hi == pytest.approx(grid[np.flatnonzero(inside)[-1]], abs=0.02)
        assert checked >= 5

    def test_monotone_in_delta(self):
        path = from_straight(30.0, 5.0, PVEH)
        edge = crossing_edge(x=12.0)
        belief = point_belief(edge, world_y=1.0)
        small = tube_interval(path, belief, CorridorParams(0.4, 0.8))
        large = tube_interval(path, belief, CorridorParams(0.4, 1.6))
        assert large.sigma_lo <= small.sigma_lo
        assert large.sigma_hi >= small.sigma_hi


class TestBuildIntervals:
    def test_no_pedestrians(self):
        path = from_straight(30.0, 5.0, PVEH)
        assert build_collision_intervals({}, path, CorridorParams()) == {}

    def test_example_layout_step0_only(self):
        # walker inside the corridor now and leaving it: nonempty only early
        path = from_straight(60.0, 5.0, PVEH)
        edge = crossing_edge(x=20.0)
        graph = RoadGraph(np.array([[20.0, -5.0], [20.0, 5.0]]), (edge,))
        pp = PredictionParams(xi_bar=0.0, horizon=40)
        from safempc.pedestrians import predict
        b0 = point_belief(edge, world_y=1.2, obstacle_id="i")
        series = predict(b0, graph, pp, steps=40)
        tables = build_collision_intervals({"i": series}, path,
                                           CorridorParams(0.4, 1.0))
        tab = tables["i"]
        assert not tab.empty[0]
        # walking north at 1.4 m/s the corridor (|y| <= 1.4) is left after ~3 steps
        assert tab.empty[10:].all()

    def test_nested_predictions_give_nested_intervals(self):
        path = from_straight(60.0, 5.0, PVEH)
        edge = crossing_edge(x=20.0, y0=-8.0, y1=8.0)
        graph = RoadGraph(np.array([[20.0, -8.0], [20.0, 8.0]]), (edge,))
        pp = PredictionParams(horizon=30)
        from safempc.pedestrians import predict, step_true_walker
        rng = np.random.default_rng(5)
        walker = point_belief(edge, world_y=-6.0, obstacle_id="p")
        pred_k = build_collision_intervals(
            {"p": predict(walker, graph, pp, steps=30)}, path, CorridorParams())
        walker1 = step_true_walker(walker, rng.uniform(-0.3, 0.3, 2), graph, pp)
        pred_k1 = build_collision_intervals(
            {"p": predict(walker1, graph, pp, steps=29)}, path, CorridorParams())
        for n in range(1, 31):
            old = pred_k["p"].interval(n)
            new = pred_k1["p"].interval(n - 1)
            if new.empty:
                continue
            assert not old.empty
            assert new.sigma_lo >= old.sigma_lo - 1e-6
            assert new.sigma_hi <= old.sigma_hi + 1e-6


class TestGEval:
    def test_empty_is_zero(self):
        iv = CollisionInterval.none("p", 3)
        assert g_eval(123.0, iv, YIELD) == 0.0
        assert g_eval(-5.0, iv, PASS) == 0.0

    def test_yield_safe(self):
        iv = CollisionInterval("p", 0, 12.3, 14.0, False)
        assert g_eval(10.0, iv, YIELD) == pytest.approx(-2.3)

    def test_pass_violated(self):
        iv = CollisionInterval("p", 0, 10.0, 12.3, False)
        assert g_eval(10.0, iv, PASS) == pytest.approx(2.3)

    def test_lipschitz_in_s(self):
        iv = CollisionInterval("p", 0, 3.0, 7.0, False)
        rng = np.random.default_rng(1)
        for _ in range(100):
            s1, s2 = rng.uniform(0, 20, 2)
            for d in (YIELD, PASS):
                assert abs(g_eval(s1, iv, d) - g_eval(s2, iv, d)) <= abs(s1 - s2) + 1e-12


def table(obstacle_id, steps, windows):
    """windows: {step: (lo, hi)}"""
    lo = np.full(steps + 1, np.nan)
    hi = np.full(steps + 1, np.nan)
    empty = np.ones(steps + 1, dtype=bool)
    for step, (a, b) in windows.items():
        lo[step], hi[step], empty[step] = a, b, False
    return ObstacleIntervals(obstacle_id, lo, hi, empty)


class TestEnumerate:
    def test_single_crossing_pedestrian(self):
        tabs = {"p": table("p", 40, {10: (18.0, 22.0), 11: (17.8, 22.2)})}
        configs = enumerate_configurations(tabs, ego_s=0.0)
        assert len(configs) == 2
        assert configs[0].decisions == {"p": YIELD}
        assert configs[1].decisions == {"p": PASS}

    def test_three_pedestrian_layout(self):
        # i blocks now, j enters the same crossing later, l is far downstream
        tabs = {
            "i": table("i", 40, {0: (18.0, 21.0)}),
            "j": table("j", 40, {25: (19.0, 22.5)}),
            "l": table("l", 40, {30: (38.0, 41.0)}),
        }
        configs = enumerate_configurations(tabs, ego_s=0.0)
        assert len(configs) == 3
        assert configs[0].decisions == {"i": YIELD, "j": YIELD, "l": YIELD}
        assert configs[1].decisions == {"i": YIELD, "j": PASS, "l": YIELD}
        assert configs[2].decisions == {"i": PASS, "j": PASS, "l": YIELD}

    def test_cluster_behind_is_ignored(self):
        tabs = {
            "behind": table("behind", 40, {0: (2.0, 4.0)}),
            "ahead": table("ahead", 40, {5: (30.0, 33.0)}),
        }
        configs = enumerate_configurations(tabs, ego_s=10.0)
        assert len(configs) == 2
        for cfg in configs:
            assert cfg.decisions["behind"] == YIELD

    def test_all_empty_single_config(self):
        tabs = {"q": table("q", 40, {})}
        configs = enumerate_configurations(tabs, ego_s=0.0)
        assert len(configs) == 1
        assert configs[0].decisions == {"q": YIELD}
