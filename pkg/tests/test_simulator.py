from dataclasses import replace

import numpy as np
import pytest

from cdum.data import generate_requests
from cdum.errors import ConfigError, ParseError, SchemaError, UndefinedMetricError
from cdum.fic import LONG, SHORT, ConstantInterest, build_request_labels
from cdum.simulator import (Policy, SimLog, log_to_batch, lt_metrics, observe_users, read_requests, request_log,
                            simulate, world_rct, world_schema, write_requests)
from cdum.world import Population, SimConfig

SMALL = SimConfig(user_count=200, day_count=3, requests_per_day=2)


def activity_log(active):
    active = np.asarray(active, dtype=bool)
    empty = np.zeros(0, np.int64)
    return SimLog(active, empty, empty, empty, np.zeros((0, 1), bool), np.zeros((0, 1), np.int64),
                  np.zeros((0, 1), np.int64), np.zeros(0), np.zeros((0, 1)), np.zeros(active.shape[0]))


class FixedPrefs:
    def __init__(self, row):
        self.row = np.asarray(row, dtype=float)

    def predict_all(self, x):
        return np.tile(self.row, (len(x), 1))


class TestLtMetrics:
    def test_always_active(self):
        assert lt_metrics(activity_log(np.ones((10, 7))), 7) == (7.0, 7.0)

    def test_one_day_run(self):
        assert lt_metrics(activity_log(np.ones((4, 1))), 7) == (1.0, 1.0)

    def test_half_only_first_day(self):
        active = np.zeros((10, 7), bool)
        active[:5] = True
        active[5:, 0] = True
        # 5 users x 7 days + 5 users x 1 day over 10 users
        assert lt_metrics(activity_log(active), 7) == (4.0, 4.0)

    def test_enter_counts_dormant_users(self):
        # user 1 was only active before the window
        active = np.zeros((2, 10), bool)
        active[0] = True
        active[1, 0] = True
        enter, slide = lt_metrics(activity_log(active), 7)
        assert enter == 3.5 and slide == 7.0

    def test_partial_activity(self):
        active = np.array([[1, 0, 1, 0], [0, 0, 0, 1]])
        assert lt_metrics(activity_log(active), 4) == (1.5, 1.5)

    def test_window_longer_than_run(self):
        assert lt_metrics(activity_log(np.ones((1, 3))), 30) == (3.0, 3.0)

    def test_nobody_active(self):
        with pytest.raises(UndefinedMetricError):
            lt_metrics(activity_log(np.zeros((2, 5))), 3)

    def test_slide_at_least_enter(self):
        active = np.random.default_rng(0).random((50, 12)) < 0.4
        enter, slide = lt_metrics(activity_log(active), 7)
        assert slide >= enter


class TestPolicyParse:
    @pytest.mark.parametrize("text, expected", [("cdum", Policy("cdum")), ("always_on(2)", Policy("always_on", 2)),
                                                ("always_on:1", Policy("always_on", 1)),
                                                ("random(0.25)", Policy("random", p=0.25)),
                                                ("random", Policy("random", p=0.5))])
    def test_accepted(self, text, expected):
        assert Policy.parse(text) == expected

    @pytest.mark.parametrize("text", ["always_on", "greedy", "cdum(1)", "random(("])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            Policy.parse(text)

    def test_str_round_trip(self):
        for text in ("cdum", "always_on(3)", "random(0.5)", "offline_only", "always_off"):
            assert str(Policy.parse(text)) == text


class TestSimulate:
    def test_deterministic(self):
        assert simulate("random(0.5)", SMALL).identical(simulate("random(0.5)", SMALL))

    def test_seed_changes_outcome(self):
        assert not simulate("always_off", SMALL).identical(simulate("always_off", replace(SMALL, seed=1)))

    def test_usage_conservation(self):
        log = simulate("random(0.3)", SMALL)
        per_user = np.bincount(log.user, weights=log.usage, minlength=SMALL.user_count)
        np.testing.assert_allclose(per_user, log.total_usage)
        assert np.all(log.exposures.sum(axis=1) == SMALL.slate_size)
        assert np.all(log.long_plays <= log.exposures)
        secs = log.long_plays @ np.asarray(SMALL.long_play_seconds) + log.short_plays.sum(axis=1) * 5.0
        np.testing.assert_allclose(log.usage, secs)

    def test_only_active_users_served(self):
        log = simulate("always_off", SMALL)
        assert np.all(log.active[log.user, log.day])
        counts = np.bincount(log.user * SMALL.day_count + log.day, minlength=SMALL.user_count * SMALL.day_count)
        np.testing.assert_array_equal(counts, SMALL.requests_per_day * log.active.reshape(-1))

    def test_always_on_boosts_exposure(self):
        on = simulate("always_on(2)", SMALL)
        off = simulate("always_off", SMALL)
        assert on.exposures[:, 1].mean() > off.exposures[:, 1].mean() + 1.0
        assert np.all(on.enabled[:, 1]) and not on.enabled[:, [0, 2]].any()

    def test_neutral_user_gains_nothing_from_boost(self):
        cfg = SimConfig(user_count=100, day_count=3)
        pop = Population.draw(cfg, preference=np.full(3, 1 / 3))
        diffs = []
        for s in range(20):
            c = replace(cfg, seed=s)
            diffs.append(simulate("always_on(1)", c, population=pop).total_usage.mean()
                         - simulate("always_off", c, population=pop).total_usage.mean())
        assert np.mean(diffs) <= 0.0

    def test_matching_boost_helps_and_mismatch_hurts(self):
        cfg = SimConfig(user_count=300, day_count=3)
        pop = Population.draw(cfg, preference=np.array([1.0, 0.0, 0.0]))
        use = {p: simulate(p, cfg, population=pop).total_usage.mean()
               for p in ("always_on(1)", "always_off", "always_on(2)")}
        assert use["always_on(1)"] > use["always_off"] > use["always_on(2)"]

    def test_neutral_interest_reproduces_offline_only(self):
        feats = np.zeros((SMALL.user_count, 1))
        prefs = FixedPrefs([1.0, 1.5, 0.5, 1.2])
        a = simulate("cdum", SMALL, prefs, ConstantInterest(1.0, 3), user_features=feats)
        b = simulate("offline_only", SMALL, prefs, user_features=feats)
        assert a.identical(b)

    def test_cdum_enables_positive_scores_only(self):
        feats = np.zeros((SMALL.user_count, 1))
        log = simulate("cdum", SMALL, FixedPrefs([1.0, 1.5, 0.5, 1.2]), ConstantInterest(1.0, 3),
                       user_features=feats)
        np.testing.assert_array_equal(log.enabled, log.scores > 0)
        assert np.all(log.enabled == [True, False, True])

    def test_models_required(self):
        with pytest.raises(ConfigError):
            simulate("cdum", SMALL)
        with pytest.raises(ConfigError):
            simulate("always_on(4)", SMALL)

    def test_zero_requests(self):
        log = simulate("always_off", SMALL, requests_per_day=[0, 0])
        assert len(log) == 0 and np.all(log.total_usage == 0)


class TestExport:
    def test_format(self, tmp_path):
        log = simulate("random(0.5)", SimConfig(user_count=5, day_count=2, requests_per_day=1))
        path = tmp_path / "log.csv"
        log.export(path)
        raw = path.read_bytes()
        assert b"\r" not in raw
        lines = raw.decode().splitlines()
        assert lines[0] == ("user,day,request,enabled_mask,exposed_1,exposed_2,exposed_3,long_1,long_2,long_3,"
                            "short_1,short_2,short_3,usage_seconds")
        assert len(lines) == len(log) + 1
        first = lines[1].split(",")
        assert int(first[3]) == int(log.bitmask[0]) and float(first[-1]) == log.usage[0]

    def test_export_is_deterministic(self, tmp_path):
        cfg = SimConfig(user_count=20, day_count=2)
        simulate("random(0.5)", cfg).export(tmp_path / "a.csv")
        simulate("random(0.5)", cfg).export(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestDatasets:
    def test_generate_requests_counts(self):
        cfg = SimConfig(user_count=10)
        reqs = generate_requests(cfg, [2, 0, 1])
        assert len(reqs) == 30
        for r in reqs:
            assert len(r.sequences) == 3 and len(r.sequences[0]) == cfg.history_length
            assert len(r.exposures) == cfg.slate_size
            assert all(1 <= c <= 3 and kind in (LONG, SHORT) for c, kind in r.exposures)

    def test_degenerate_preference_has_highest_ratio(self):
        cfg = SimConfig(user_count=50)
        pop = Population.draw(cfg, preference=np.array([0.0, 1.0, 0.0]))
        reqs = generate_requests(cfg, [2, 2], population=pop)
        r = np.array([build_request_labels(q, 3) for q in reqs]).mean(axis=0)
        assert r[1] > r[0] and r[1] > r[2]

    def test_generate_requests_empty(self):
        assert generate_requests(SimConfig(user_count=10), [0, 0]) == []

    def test_requests_file_round_trip(self, tmp_path):
        cfg = SimConfig(user_count=15)
        log = request_log(cfg, [1, 1])
        write_requests(log, tmp_path / "r.csv")
        a, b = log_to_batch(log, cfg), read_requests(tmp_path / "r.csv", cfg)
        np.testing.assert_array_equal(a.labels, b.labels)
        for sa, sb in zip(a.sequences, b.sequences):
            np.testing.assert_array_equal(sa.tokens, sb.tokens)

    def test_requests_file_errors(self, tmp_path):
        cfg = SimConfig(user_count=5)
        (tmp_path / "bad.csv").write_text("user,day\n1,2\n")
        with pytest.raises(SchemaError):
            read_requests(tmp_path / "bad.csv", cfg)
        write_requests(request_log(cfg, [1]), tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        header = lines[0].split(",")
        row = lines[2].split(",")
        row[header.index("hour")] = "x"
        lines[2] = ",".join(row)
        (tmp_path / "r2.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="line 3"):
            read_requests(tmp_path / "r2.csv", cfg)

    def test_world_rct_is_balanced(self):
        cfg = SimConfig(user_count=800, day_count=2)
        pop = Population.draw(cfg)
        feats = observe_users(cfg, pop, warmup_days=2)
        ds = world_rct(cfg, pop, feats, rct_days=2)
        assert ds.x.shape == (800, len(world_schema(cfg).offline))
        counts = np.bincount(ds.treatment, minlength=4)
        assert counts.min() > 150
        assert np.all(ds.y >= 0)
