import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from ocean import evalx as ev
from ocean.agent import AgentConfig, Player, init_player_params
from ocean.evalx import EpisodeLog, MetricsReport, TurnRecord
from ocean.game import Game, GameConfig


def _turn(step, player, slot, claims=(0, 0), confs=(0.5, 0.5), empty=False, mask=None):
    return TurnRecord(step=step, turn=step // 2 + 1, player=player, slot=slot, claim=claims[player],
                      confidence=confs[player], claims=list(claims), confidences=list(confs), empty=empty, mask=mask)


def _log(label, prediction, final_claims, turns=None, status="truncated", scene_id=0):
    turns = turns or [_turn(0, 0, 0, tuple(final_claims))]
    return EpisodeLog(scene_id=scene_id, label=label, prediction=prediction, end_status=status, starting_player=0,
                      final_claims=list(final_claims), final_confidences=[0.5, 0.5], turns=turns,
                      empty_flags=[False] * 7)


def _played_logs(n=12, seed=0, config=None):
    cfg = AgentConfig(n_slots=5, slot_dim=4, n_classes=3, hidden=8, modulator_hidden=8, head_hidden=6)
    players = [Player(init_player_params(cfg, seed=seed + i), cfg) for i in range(2)]
    slots = torch.randn(n, 5, 4, generator=torch.Generator().manual_seed(seed))
    config = config or GameConfig(confidence_threshold=0.34)
    g = Game(players, slots, torch.arange(n) % 3, config, scene_ids=list(range(n)))
    g.run(torch.Generator().manual_seed(seed))
    masks = np.random.default_rng(seed).random((n, 5, 8, 8))
    empty = [[k == 4 for k in range(5)]] * n
    return [ev.episode_log(ep, empty[b], masks[b]) for b, ep in enumerate(g.episodes)], config


class TestMetrics:
    def test_consensus_rate(self):
        logs = [_log(0, 0, (1, 1)), _log(0, 0, (2, 2)), _log(0, 0, (1, 2))]
        assert ev.consensus_rate(logs) == pytest.approx(0.6667, abs=1e-4)

    def test_consensus_rate_all_consensus(self):
        logs = [_log(0, 1, (1, 1), status="consensus") for _ in range(4)]
        assert ev.consensus_rate(logs) == 1.0

    def test_consensus_recount(self):
        logs, _ = _played_logs(30, seed=2)
        assert ev.consensus_rate(logs) == sum(lg.final_claims[0] == lg.final_claims[1] for lg in logs) / 30

    def test_all_correct(self):
        logs = [_log(c, c, (c, c)) for c in (0, 1, 2, 1)]
        assert ev.accuracy_f1(logs) == (1.0, 1.0)

    def test_confusion_matrix_oracle(self):
        # 2 classes; TP=1, FP=1, FN=0, TN=1 for class 1 (plus the mirrored view for class 0)
        logs = [_log(1, 1, (1, 1)), _log(0, 1, (1, 1)), _log(0, 0, (0, 0))]
        acc, f1 = ev.accuracy_f1(logs, n_classes=2)
        conf = np.zeros((2, 2), int)
        for lg in logs:
            conf[lg.label, lg.prediction] += 1
        f1s = []
        for c in range(2):
            tp, fp, fn = conf[c, c], conf[:, c].sum() - conf[c, c], conf[c, :].sum() - conf[c, c]
            f1s.append(2 * tp / (2 * tp + fp + fn))
        assert acc == pytest.approx(np.trace(conf) / conf.sum())
        assert f1 == pytest.approx(np.mean(f1s))

    def test_matches_sklearn(self):
        from sklearn.metrics import accuracy_score, f1_score

        rng = np.random.default_rng(0)
        y, p = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
        logs = [_log(int(a), int(b), (int(b), int(b))) for a, b in zip(y, p)]
        acc, f1 = ev.accuracy_f1(logs, n_classes=4)
        assert acc == pytest.approx(accuracy_score(y, p))
        assert f1 == pytest.approx(f1_score(y, p, average="macro"))

    def test_independent_predictions_chance(self):
        rng = np.random.default_rng(1)
        n = 6000
        logs = [_log(int(a), int(b), (0, 0)) for a, b in zip(rng.integers(0, 3, n), rng.integers(0, 3, n))]
        acc, _ = ev.accuracy_f1(logs, n_classes=3)
        se = np.sqrt((1 / 3) * (2 / 3) / n)
        assert abs(acc - 1 / 3) < 3 * se

    def test_game_stats_example(self):
        turns = [_turn(0, 0, 2), _turn(1, 1, 5), _turn(2, 0, 2)]
        lg = _log(0, 0, (0, 0), turns=turns)
        lg.empty_flags = [False] * 5 + [True, False]
        turns[1].empty = True
        length, uniq, empty = ev.game_stats([lg])
        assert length == 3 and uniq == pytest.approx(2 / 3) and empty == pytest.approx(1 / 3)

    def test_all_distinct_unique(self):
        turns = [_turn(i, i % 2, i) for i in range(4)]
        assert ev.game_stats([_log(0, 0, (0, 0), turns=turns)])[1] == 1.0

    def test_pooled_recount(self):
        logs, _ = _played_logs(25, seed=3)
        length, uniq, empty = ev.game_stats(logs)
        sel = [(lg, t) for lg in logs for t in lg.turns]
        seen_counts = 0
        for lg in logs:
            seen = set()
            for t in lg.turns:
                seen_counts += (t.player, t.slot) not in seen
                seen.add((t.player, t.slot))
        assert length == pytest.approx(np.mean([len(lg.turns) for lg in logs]))
        assert uniq == pytest.approx(seen_counts / len(sel))
        assert empty == pytest.approx(sum(t.slot == 4 for _, t in sel) / len(sel))

    def test_rates_in_unit_interval(self):
        logs, _ = _played_logs(20, seed=4)
        rep = ev.compute_metrics(logs, n_classes=3)
        for v in (rep.consensus, rep.accuracy, rep.f1, rep.empty_slot_pct, rep.slot_unique_pct):
            assert 0 <= v <= 1
        assert 1 <= rep.game_length <= 10

    def test_empty_logs_rejected(self):
        with pytest.raises(ValueError):
            ev.compute_metrics([])


class TestReplay:
    def test_replay_reproduces_prediction(self):
        logs, cfg = _played_logs(40, seed=5)
        for lg in logs:
            assert ev.replay_prediction(lg, cfg) == lg.prediction

    def test_tampered_transcript_detected(self):
        logs, cfg = _played_logs(40, seed=6)
        lg = next(lg for lg in logs if lg.length > 1)
        bad = replace(lg, turns=lg.turns[:-1])
        with pytest.raises(ValueError):
            ev.replay_prediction(bad, cfg)


class TestExport:
    def test_two_turn_schema(self, tmp_path):
        m = np.zeros((8, 8))
        m[2:4, 3:6] = 1.0
        turns = [_turn(0, 0, 1, mask=m.tolist()), _turn(1, 1, 6, empty=True, mask=np.zeros((8, 8)).tolist())]
        lg = _log(1, 1, (1, 1), turns=turns, status="consensus", scene_id=7)
        rec = ev.export_explanation(lg, {7: np.full((3, 8, 8), 0.5)}, tmp_path / "e", image_format="svg")
        assert len(rec["turns"]) == 2 and set(rec["final"]) >= {"claims", "prediction", "end_status"}
        assert rec["schema"] == ev.SCHEMA
        assert rec["turns"][0]["bbox"] == [3, 2, 5, 3]
        assert rec["turns"][1]["empty"] is True and rec["turns"][1]["bbox"] is None
        assert (tmp_path / "e.json").exists() and (tmp_path / "e.svg").exists()

    def test_round_trip(self, tmp_path):
        logs, _ = _played_logs(3, seed=7)
        scenes = {b: np.random.default_rng(b).random((3, 8, 8)) for b in range(3)}
        for lg in logs:
            ev.export_explanation(lg, scenes, tmp_path / f"s{lg.scene_id}")
            back = ev.read_explanation(tmp_path / f"s{lg.scene_id}.json")
            stripped = replace(lg, turns=[replace(t, mask=None) for t in lg.turns])
            assert back == stripped

    def test_unknown_scene(self, tmp_path):
        logs, _ = _played_logs(1)
        with pytest.raises(KeyError):
            ev.export_explanation(logs[0], {}, tmp_path / "x")

    def test_wrong_schema(self, tmp_path):
        (tmp_path / "x.json").write_text(json.dumps({"schema": "other/2"}))
        with pytest.raises(ValueError):
            ev.read_explanation(tmp_path / "x.json")


class TestReport:
    def _rep(self, k=0.0):
        return MetricsReport(0.9 - k, 0.8, 0.75, 3.5, 0.05, 0.95 + k / 10)

    def test_single_row(self, tmp_path):
        ev.emit_report([("hans3-lite/test", "A", self._rep())], tmp_path)
        rows = list(csv.reader(open(tmp_path / "metrics.csv")))
        assert len(rows) == 2 and tuple(rows[0]) == ev.REPORT_COLUMNS

    def test_round_trip(self, tmp_path):
        rows = [("d1", "A", self._rep(0.1)), ("d2", "B", self._rep(0.2))]
        ev.emit_report(rows, tmp_path, curves={"acc": {"A": [0.1, 0.5, 0.7]}})
        back = ev.read_metrics_csv(tmp_path / "metrics.csv")
        for (d, c, r), (d2, c2, r2) in zip(rows, back):
            assert (d, c) == (d2, c2)
            np.testing.assert_allclose(r.row(), r2.row(), atol=1e-6)
        assert (tmp_path / "curve_acc.svg").exists()

    def test_deterministic_bytes(self, tmp_path):
        rows = [("d", "A", self._rep())]
        curves = {"acc": {"A": [0.2, 0.4]}}
        ev.emit_report(rows, tmp_path / "a", curves)
        ev.emit_report(rows, tmp_path / "b", curves)
        for name in ("metrics.csv", "curve_acc.svg"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            ev.emit_report([], tmp_path)
