"""Metrics over episode logs, explanation export, and report tables/plots."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .game import Argument, EpisodeState, GameConfig, check_end, final_prediction

SCHEMA = "ocean-explanandum/1"
METRIC_COLUMNS = ("consensus", "accuracy", "f1", "game_length", "empty_slot_pct", "slot_unique_pct")
REPORT_COLUMNS = ("dataset", "config") + METRIC_COLUMNS
SVG_SALT = "ocean"


@dataclass
class TurnRecord:
    step: int
    turn: int
    player: int
    slot: int
    claim: int
    confidence: float
    claims: list[int]
    confidences: list[float]
    empty: bool = False
    mask: list[list[float]] | None = None  # selected slot's attention, upsampled to image size


@dataclass
class EpisodeLog:
    scene_id: int | None
    label: int
    prediction: int
    end_status: str
    starting_player: int
    final_claims: list[int]
    final_confidences: list[float]
    turns: list[TurnRecord] = field(default_factory=list)
    empty_flags: list[bool] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.turns)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeLog":
        d = dict(d)
        d["turns"] = [TurnRecord(**t) for t in d["turns"]]
        return cls(**d)


def episode_log(ep: EpisodeState, empty_flags=None, masks=None) -> EpisodeLog:
    """Serialise a finished episode; ``masks`` is [N, R, R] attention for its slot set."""
    empty_flags = [bool(x) for x in (empty_flags if empty_flags is not None else [False] * ep.n_slots)]
    turns = [
        TurnRecord(
            step=a.step,
            turn=a.turn,
            player=a.player,
            slot=a.slot,
            claim=int(a.claim),
            confidence=float(a.confidence),
            claims=[int(c) for c in a.claims],
            confidences=[float(c) for c in a.confidences],
            empty=empty_flags[a.slot] if empty_flags else False,
            mask=None if masks is None else np.round(np.asarray(masks[a.slot], dtype=np.float64), 4).tolist(),
        )
        for a in ep.history
    ]
    return EpisodeLog(
        scene_id=ep.scene_id,
        label=ep.label,
        prediction=int(ep.prediction),
        end_status=ep.status,
        starting_player=ep.starting_player,
        final_claims=[int(c) for c in ep.final_claims],
        final_confidences=[float(c) for c in ep.final_confidences],
        turns=turns,
        empty_flags=empty_flags,
    )


def replay_prediction(log: EpisodeLog, config: GameConfig) -> int:
    """Recompute the prediction from the transcript alone.

    The logged turns are fed back through the end-condition check one at a
    time; the game must end exactly at the last logged turn with the logged
    status, and the prediction is taken from the resulting final claims.
    """
    state = EpisodeState(label=log.label, starting_player=log.starting_player, n_slots=len(log.empty_flags))
    for i, t in enumerate(log.turns):
        state.history.append(
            Argument(turn=t.turn, step=t.step, player=t.player, slot=t.slot, claim=t.claim,
                     confidence=t.confidence, distribution=[], claims=tuple(t.claims),
                     confidences=tuple(t.confidences))
        )
        state.claims, state.confidences = tuple(t.claims), tuple(t.confidences)
        status = check_end(state, config)
        last = i == len(log.turns) - 1
        if (status != "running") != last:
            raise ValueError(f"transcript ends at turn {len(log.turns)} but replay says {status!r} at {i + 1}")
    state.status = status
    if status != log.end_status:
        raise ValueError(f"replayed end status {status!r} != logged {log.end_status!r}")
    state.final_claims, state.final_confidences = state.claims, state.confidences
    return final_prediction(state)


# -- metrics ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    consensus: float
    accuracy: float
    f1: float
    game_length: float
    empty_slot_pct: float
    slot_unique_pct: float
    n_episodes: int = 0

    def row(self) -> list[float]:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def _nonempty(logs):
    logs = list(logs)
    if not logs:
        raise ValueError("metrics need at least one episode log")
    return logs


def consensus_rate(logs: Iterable[EpisodeLog]) -> float:
    logs = _nonempty(logs)
    return sum(lg.final_claims[0] == lg.final_claims[1] for lg in logs) / len(logs)


def accuracy_f1(logs: Iterable[EpisodeLog], n_classes: int | None = None) -> tuple[float, float]:
    """Accuracy and macro F1; classes without support or predictions score 0."""
    logs = _nonempty(logs)
    y = np.array([lg.label for lg in logs])
    p = np.array([lg.prediction for lg in logs])
    n_classes = n_classes or int(max(y.max(), p.max()) + 1)
    f1s = []
    for c in range(n_classes):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if tp == 0 or denom == 0 else 2 * tp / denom)
    return float(np.mean(p == y)), float(np.mean(f1s))


def game_stats(logs: Iterable[EpisodeLog], per_player_unique: bool = True) -> tuple[float, float, float]:
    """``(mean length, uniqueness, empty fraction)``, selections pooled over episodes.

    A selection is unique if the same player (or, with ``per_player_unique``
    off, either player) had not picked that slot earlier in the episode.
    """
    logs = _nonempty(logs)
    lengths, unique, empty, total = [], 0, 0, 0
    for lg in logs:
        lengths.append(lg.length)
        seen: dict = {}
        for t in lg.turns:
            key = (t.player, t.slot) if per_player_unique else t.slot
            unique += key not in seen
            seen[key] = True
            empty += bool(t.empty)
            total += 1
    total = max(total, 1)
    return float(np.mean(lengths)), unique / total, empty / total


def compute_metrics(logs: Sequence[EpisodeLog], n_classes: int | None = None) -> MetricsReport:
    acc, f1 = accuracy_f1(logs, n_classes)
    length, uniq, empty = game_stats(logs)
    return MetricsReport(
        consensus=consensus_rate(logs), accuracy=acc, f1=f1, game_length=length,
        empty_slot_pct=empty, slot_unique_pct=uniq, n_episodes=len(logs),
    )


# -- explanation export -------------------------------------------------------------


def mask_bbox(mask, threshold: float = 0.5) -> list[int] | None:
    """``[x0, y0, x1, y1]`` (inclusive) of pixels at >= threshold * max, or None if the map is flat zero."""
    m = np.asarray(mask, dtype=np.float64)
    if m.size == 0 or m.max() <= 0:
        return None
    ys, xs = np.nonzero(m >= threshold * m.max())
    return [int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())]


def explanation_record(log: EpisodeLog, class_names: Sequence[str] | None = None) -> dict:
    def name(c):
        return class_names[c] if class_names else str(c)

    return {
        "schema": SCHEMA,
        "scene_id": log.scene_id,
        "label": log.label,
        "turns": [
            {
                "step": t.step,
                "turn": t.turn,
                "player": t.player + 1,
                "slot": t.slot,
                "claim": t.claim,
                "claim_name": name(t.claim),
                "confidence": t.confidence,
                "claims": t.claims,
                "confidences": t.confidences,
                "bbox": None if t.mask is None else mask_bbox(t.mask),
                "empty": bool(t.empty),
            }
            for t in log.turns
        ],
        "final": {
            "claims": log.final_claims,
            "confidences": log.final_confidences,
            "prediction": log.prediction,
            "end_status": log.end_status,
            "starting_player": log.starting_player + 1,
        },
        "empty_flags": log.empty_flags,
    }


def read_explanation(path) -> EpisodeLog:
    """Inverse of :func:`explanation_record` (masks are not stored, boxes are)."""
    rec = json.loads(Path(path).read_text())
    if rec.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported explanation schema {rec.get('schema')!r}")
    turns = [
        TurnRecord(step=t["step"], turn=t["turn"], player=t["player"] - 1, slot=t["slot"], claim=t["claim"],
                   confidence=t["confidence"], claims=t["claims"], confidences=t["confidences"], empty=t["empty"])
        for t in rec["turns"]
    ]
    f = rec["final"]
    return EpisodeLog(
        scene_id=rec["scene_id"], label=rec["label"], prediction=f["prediction"], end_status=f["end_status"],
        starting_player=f["starting_player"] - 1, final_claims=f["claims"], final_confidences=f["confidences"],
        turns=turns, empty_flags=rec["empty_flags"],
    )


def export_explanation(log: EpisodeLog, scenes, out_path, class_names=None, image_format: str = "png") -> dict:
    """Write ``<out>.json`` and a composite figure ``<out>.<image_format>``.

    ``scenes`` maps scene ids to images ([3, R, R]); either a dict or an object
    with ``image_of(scene_id)``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    try:
        image = scenes[log.scene_id] if isinstance(scenes, dict) else scenes.image_of(log.scene_id)
    except KeyError:
        raise KeyError(f"unknown scene id {log.scene_id}") from None
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rec = explanation_record(log, class_names)
    out_path.with_suffix(".json").write_text(json.dumps(rec, indent=1))

    img = np.transpose(np.asarray(image), (1, 2, 0)).clip(0, 1)
    n = len(log.turns) + 1
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6))
    axes = np.atleast_1d(axes)
    axes[0].imshow(img, interpolation="nearest")
    axes[0].set_title(f"label {log.label}", fontsize=8)
    for ax, t, r in zip(axes[1:], log.turns, rec["turns"]):
        shown = img * 0.35
        if t.mask is not None:
            m = np.asarray(t.mask)
            m = m / max(m.max(), 1e-12)
            shown = img * (0.35 + 0.65 * m[..., None])
        ax.imshow(shown, interpolation="nearest")
        if r["bbox"] is not None:
            x0, y0, x1, y1 = r["bbox"]
            ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0 + 1, y1 - y0 + 1, fill=False, ec="white", lw=1))
        flag = " (empty)" if t.empty else ""
        ax.set_title(f"P{t.player + 1}: slot {t.slot}{flag}\nclaims {r['claim_name']} ({t.confidence:.2f})", fontsize=7)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"prediction {log.prediction} [{log.end_status}]", fontsize=8)
    fig.tight_layout()
    with plt.rc_context({"svg.hashsalt": SVG_SALT}):
        fig.savefig(out_path.with_suffix("." + image_format), metadata={"Date": None} if image_format == "svg" else None)
    plt.close(fig)
    return rec


# -- report ------------------------------------------------------------------------


def write_metrics_csv(rows: Sequence[tuple[str, str, MetricsReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for dataset, config, rep in rows:
            w.writerow([dataset, config] + [f"{v:.6f}" for v in rep.row()])


def read_metrics_csv(path) -> list[tuple[str, str, MetricsReport]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        return [(row[0], row[1], MetricsReport(*[float(v) for v in row[2:]])) for row in r]


def emit_report(rows, out_dir, curves: dict | None = None) -> Path:
    """Write ``metrics.csv`` (one row per dataset/config) and SVG learning curves."""
    if not rows:
        raise ValueError("emit_report needs at least one report")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "metrics.csv"
        write_metrics_csv(rows, path)
    except OSError as e:
        raise OSError(f"cannot write report to {out_dir}: {e}") from e
    if curves:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for name, series in curves.items():
            fig, ax = plt.subplots(figsize=(4, 3))
            for label, ys in series.items():
                ax.plot(range(1, len(ys) + 1), ys, label=label)
            ax.set_xlabel("epoch")
            ax.set_title(name)
            ax.legend(fontsize=7)
            fig.tight_layout()
            with plt.rc_context({"svg.hashsalt": SVG_SALT}):  # stable element ids
                fig.savefig(out_dir / f"curve_{name}.svg", metadata={"Date": None})
            plt.close(fig)
    return path
