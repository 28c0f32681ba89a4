"""Optimisation loops: slot warm-up, game training, and EM-style alternation."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import slotcoder as sc
from .agent import Player
from .game import Game, GameConfig
from .numcore import Adam, ParamStore, Tape, backward, cross_entropy

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    warmup_epochs: int = 40
    warmup_lr: float = 2e-3
    game_epochs: int = 30
    lr_players: float = 3e-4
    lr_slots: float = 1e-4
    alpha_ce: float = 1.0
    alpha_base: float = 0.5
    entropy_coef: float = 0.0
    reward_scale: float = 0.1
    gamma: float = 1.0
    fixed_turns: int = 4
    final_turn_ce: bool = False
    em_cycles: int = 0
    em_m1_steps: int = 20
    em_m2_epochs: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("alpha_ce", "alpha_base", "entropy_coef", "reward_scale", "warmup_lr", "lr_players", "lr_slots"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.em_m1_steps < 0 or self.em_m2_epochs < 0:
            raise ValueError("EM cadence must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochStats:
    epoch: int
    phase: str
    reinforce_loss: float = 0.0
    ce_loss: float = 0.0
    baseline_loss: float = 0.0
    recon_loss: float = 0.0
    mean_reward: float = 0.0
    consensus_rate: float = 0.0
    accuracy: float = 0.0
    wall_clock: float = 0.0

    def as_row(self) -> dict:
        return asdict(self)


def append_stats_csv(path, stats: Sequence[EpochStats]) -> None:
    """Append rows to a per-epoch stats log, writing the header on first use."""
    path = Path(path)
    names = [f.name for f in fields(EpochStats)]
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        if fresh:
            w.writeheader()
        for s in stats:
            w.writerow(s.as_row())


def _check_finite(value: float, what: str, stats=None) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite; last stats: {stats}")


def _batches(n: int, batch_size: int, generator: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# -- slot autoencoder --------------------------------------------------------


def recon_step(params, cfg, opt: Adam, images: torch.Tensor, generator: torch.Generator) -> float:
    with Tape() as tape:
        _, recon = sc.forward(params, images, cfg, generator)
        loss = sc.recon_loss(recon.full, images)
        backward(loss, tape)
    opt.step(tape)
    return loss.item()


def warmup_slots(
    images: torch.Tensor,
    params: ParamStore,
    cfg: sc.SlotcoderConfig,
    tcfg: TrainConfig,
    epochs: int | None = None,
    callback=None,
) -> list[float]:
    """Reconstruction-only training; returns per-epoch mean losses."""
    if len(images) == 0:
        raise ValueError("warm-up needs a non-empty dataset")
    images = torch.as_tensor(images, dtype=params.dtype)
    g_shuffle = torch.Generator().manual_seed(tcfg.seed * 1000 + 1)
    g_init = torch.Generator().manual_seed(tcfg.seed * 1000 + 2)
    opt = Adam(params, tcfg.warmup_lr)
    curve: list[float] = []
    for epoch in range(tcfg.warmup_epochs if epochs is None else epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(images), tcfg.batch_size, g_shuffle):
            try:
                losses.append(recon_step(params, cfg, opt, images[idx], g_init))
            except FloatingPointError as exc:
                raise DivergenceError(f"warm-up became non-finite ({exc}); last stats: "
                                      f"{ {'epoch': epoch, 'recent': losses[-5:]} }") from exc
            _check_finite(losses[-1], "warm-up reconstruction loss", {"epoch": epoch, "recent": losses[-5:]})
        curve.append(float(np.mean(losses)))
        log.info("warmup epoch %d recon %.5f (%.1fs)", epoch, curve[-1], time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, curve[-1])
    return curve


def encode_slots(
    params: ParamStore, images, cfg: sc.SlotcoderConfig, seed: int = 0, batch_size: int = 256
) -> sc.SlotSet:
    """Slots and attention for a whole image array, without gradients."""
    images = torch.as_tensor(images, dtype=params.dtype)
    g = torch.Generator().manual_seed(seed)
    slots, attn = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            feats = sc.encode(params, images[i : i + batch_size], cfg)
            init = sc.sample_init_slots(params, feats.shape[0], cfg, g)
            s = sc.slot_attention(params, feats, init, cfg.n_iters)
            slots.append(s.slots)
            attn.append(s.attention)
    return sc.SlotSet(slots=torch.cat(slots), attention=torch.cat(attn))


def eval_recon(params, images, cfg, seed: int = 0, batch_size: int = 256) -> float:
    images = torch.as_tensor(images, dtype=params.dtype)
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i : i + batch_size]
            _, recon = sc.forward(params, x, cfg, g)
            total += sc.recon_loss(recon.full, x).item() * len(x)
    return total / len(images)


# -- game ----------------------------------------------------------------------


def reinforce_loss(log_probs, returns, baselines, mask=None) -> torch.Tensor:
    """``-sum_t log_prob * (G - b)`` averaged over the batch; the advantage is a constant."""
    log_probs = torch.as_tensor(log_probs)
    adv = (torch.as_tensor(returns) - torch.as_tensor(baselines)).detach()
    term = log_probs * adv
    if mask is not None:
        term = term * mask
    per_episode = term.sum(dim=0) if term.dim() > 1 else term.sum()
    return -per_episode.mean() if term.dim() > 1 else -per_episode


def baseline_loss(baselines, returns, mask=None) -> torch.Tensor:
    sq = (torch.as_tensor(baselines) - torch.as_tensor(returns).detach()) ** 2
    if mask is not None:
        sq = sq * mask
    return sq.sum(dim=0).mean() if sq.dim() > 1 else sq.sum()


def game_losses(game: Game, tcfg: TrainConfig) -> tuple[torch.Tensor, dict]:
    """Sum over both players of REINFORCE + alpha_ce * CE + alpha_base * baseline loss."""
    mask = game.step_mask()  # [T, B]
    T = mask.shape[0]
    G = game.actor_returns(tcfg.gamma)
    logp = torch.stack(game.log_probs)
    ent = torch.stack(game.entropies)
    base = torch.stack(game.baselines)
    actors = torch.tensor(game.actors)
    total = logp.new_zeros(())
    parts = {"reinforce": 0.0, "ce": 0.0, "baseline": 0.0}
    for i in range(2):
        acted = (actors == i).to(mask.dtype).unsqueeze(-1) * mask
        rl = reinforce_loss(logp, G, base, acted)
        bl = baseline_loss(base, G, acted)
        steps = [T - 1] if tcfg.final_turn_ce else range(T)
        ce_terms = []
        for t in steps:
            rows = mask[t].bool()
            if rows.any():
                ce_terms.append(cross_entropy(game.class_probs[t][i][rows], game.labels[rows]))
        ce = torch.stack(ce_terms).mean()
        total = total + rl + tcfg.alpha_ce * ce + tcfg.alpha_base * bl
        if tcfg.entropy_coef:
            total = total - tcfg.entropy_coef * (ent * acted).sum(dim=0).mean()
        parts["reinforce"] += rl.item()
        parts["ce"] += ce.item()
        parts["baseline"] += bl.item()
    return total, parts


class GameTrainer:
    """Optimiser state and RNG streams for game training (slot coder frozen)."""

    def __init__(self, players: Sequence[Player], game_cfg: GameConfig, tcfg: TrainConfig):
        self.players = list(players)
        self.game_cfg = game_cfg
        self.train_game_cfg = GameConfig(
            **{**asdict(game_cfg), "end_condition": "fixed", "fixed_turns": tcfg.fixed_turns,
               "max_turns": max(tcfg.fixed_turns, game_cfg.max_turns)}
        )
        self.tcfg = tcfg
        self.opts = [Adam(p.params, tcfg.lr_players) for p in self.players]
        self.g_shuffle = torch.Generator().manual_seed(tcfg.seed * 1000 + 11)
        self.g_actions = torch.Generator().manual_seed(tcfg.seed * 1000 + 12)
        self.batches_seen = 0
        self.epochs_done = 0
        self.history: list[EpochStats] = []

    def train_epoch(self, slots: torch.Tensor, labels) -> EpochStats:
        return train_game_epoch(self, slots, labels)


def train_game_epoch(trainer: GameTrainer, slots: torch.Tensor, labels) -> EpochStats:
    """One pass over the slot sets in fixed-length games; starting player flips per batch."""
    tcfg = trainer.tcfg
    slots = torch.as_tensor(slots).detach()
    labels = torch.as_tensor(labels, dtype=torch.long)
    t0 = time.perf_counter()
    acc = {"reinforce": [], "ce": [], "baseline": [], "reward": [], "consensus": [], "correct": []}
    for idx in _batches(len(slots), tcfg.batch_size, trainer.g_shuffle):
        start = trainer.batches_seen % 2
        with Tape() as tape:
            game = Game(trainer.players, slots[idx], labels[idx], trainer.train_game_cfg, starting_player=start)
            game.run(trainer.g_actions, "sample")
            loss, parts = game_losses(game, tcfg)
            _check_finite(loss.item(), "game loss", parts)
            backward(loss, tape)
        for opt in trainer.opts:
            opt.step()
        tape.clear()
        trainer.batches_seen += 1
        for k in ("reinforce", "ce", "baseline"):
            acc[k].append(parts[k])
        acc["reward"].append(game.reward_tensor().detach().mean().item())
        acc["consensus"].extend(ep.final_claims[0] == ep.final_claims[1] for ep in game.episodes)
        acc["correct"].extend(ep.prediction == ep.label for ep in game.episodes)
    stats = EpochStats(
        epoch=trainer.epochs_done,
        phase="game",
        reinforce_loss=float(np.mean(acc["reinforce"])),
        ce_loss=float(np.mean(acc["ce"])),
        baseline_loss=float(np.mean(acc["baseline"])),
        mean_reward=float(np.mean(acc["reward"])),
        consensus_rate=float(np.mean(acc["consensus"])),
        accuracy=float(np.mean(acc["correct"])),
        wall_clock=time.perf_counter() - t0,
    )
    trainer.epochs_done += 1
    trainer.history.append(stats)
    log.info(
        "game epoch %d reward %.4f ce %.4f acc %.3f cons %.3f (%.1fs)",
        stats.epoch, stats.mean_reward, stats.ce_loss, stats.accuracy, stats.consensus_rate, stats.wall_clock,
    )
    return stats


# -- EM alternation --------------------------------------------------------------


def em_step_slots(
    images: torch.Tensor,
    labels,
    slot_params: ParamStore,
    slot_cfg: sc.SlotcoderConfig,
    players: Sequence[Player],
    game_cfg: GameConfig,
    reward_scale: float,
    g_init: torch.Generator,
    g_actions: torch.Generator | None = None,
    actions: torch.Tensor | None = None,
    starting_player: int = 0,
) -> tuple[torch.Tensor, dict]:
    """Reward-injected reconstruction loss ``L_recon - lambda * mean_reward``.

    Player parameters are frozen; the mean reward stays differentiable in the
    slots through the frozen networks while sampled actions are held fixed.
    ``actions`` ([T, B]) replays a previous rollout exactly.
    """
    images = torch.as_tensor(images, dtype=slot_params.dtype)
    slot_set, recon = sc.forward(slot_params, images, slot_cfg, g_init)
    rl = sc.recon_loss(recon.full, images)
    with contextlib.ExitStack() as stack:
        for pl in players:
            stack.enter_context(pl.params.frozen())
        game = Game(players, slot_set.slots, labels, game_cfg.training(), starting_player=starting_player)
        game.run(g_actions, "sample", actions)
        r = game.reward_tensor()  # [T, 2, B]
        mask = game.step_mask().unsqueeze(1).expand_as(r)
        mean_r = (r * mask).sum() / mask.sum()
    loss = rl - reward_scale * mean_r
    return loss, {"recon": rl.item(), "mean_reward": mean_r.item(), "actions": torch.stack(game.actions)}


@dataclass
class Pipeline:
    """Everything the EM loop mutates."""

    slot_params: ParamStore
    slot_cfg: sc.SlotcoderConfig
    players: list
    game_cfg: GameConfig
    tcfg: TrainConfig
    game_trainer: GameTrainer | None = None
    slot_opt: Adam | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.game_trainer is None:
            self.game_trainer = GameTrainer(self.players, self.game_cfg, self.tcfg)
        if self.slot_opt is None:
            self.slot_opt = Adam(self.slot_params, self.tcfg.lr_slots)
        self.g_shuffle = torch.Generator().manual_seed(self.tcfg.seed * 1000 + 21)
        self.g_init = torch.Generator().manual_seed(self.tcfg.seed * 1000 + 22)
        # kept apart from the game trainer's stream so lambda = 0 leaves it untouched
        self.g_em_actions = torch.Generator().manual_seed(self.tcfg.seed * 1000 + 23)
        self.cycles_done = 0


class EMDegradationError(RuntimeError):
    pass


def em_loop(
    pipeline: Pipeline,
    images,
    labels,
    cycles: int | None = None,
    inject_reward: bool = True,
    recon_probe=None,
    checkpoint_fn=None,
) -> list[EpochStats]:
    """Alternate M1 (slot coder, players frozen) and M2 (players, slot coder frozen).

    With ``inject_reward=False`` M1 is plain reconstruction training, i.e. the
    pipelined schedule with the same cadence.
    """
    p, tcfg = pipeline, pipeline.tcfg
    images = torch.as_tensor(images, dtype=p.slot_params.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    probe = images[:256] if recon_probe is None else torch.as_tensor(recon_probe, dtype=images.dtype)
    pre = eval_recon(p.slot_params, probe, p.slot_cfg, seed=tcfg.seed)
    out = []
    queue: list[torch.Tensor] = []
    for _ in range(tcfg.em_cycles if cycles is None else cycles):
        t0 = time.perf_counter()
        m1_losses = []
        for _ in range(tcfg.em_m1_steps):
            if not queue:
                queue = _batches(len(images), tcfg.batch_size, p.g_shuffle)
            idx = queue.pop(0)
            if inject_reward:
                with Tape() as tape:
                    loss, info = em_step_slots(
                        images[idx], labels[idx], p.slot_params, p.slot_cfg, p.players, p.game_cfg,
                        tcfg.reward_scale, p.g_init, p.g_em_actions, starting_player=len(m1_losses) % 2,
                    )
                    backward(loss, tape)
                p.slot_opt.step(tape)
                m1_losses.append(info["recon"])
            else:
                m1_losses.append(recon_step(p.slot_params, p.slot_cfg, p.slot_opt, images[idx], p.g_init))
            _check_finite(m1_losses[-1], "M1 reconstruction loss")
        # re-encode with a cycle-specific seed so both schedules see identical slots
        slot_set = encode_slots(p.slot_params, images, p.slot_cfg, seed=tcfg.seed * 1000 + 31 + p.cycles_done)
        for _ in range(tcfg.em_m2_epochs):
            stats = train_game_epoch(p.game_trainer, slot_set.slots, labels)
            out.append(stats)
        post = eval_recon(p.slot_params, probe, p.slot_cfg, seed=tcfg.seed)
        ratio = post / max(pre, 1e-12)
        m1_stats = EpochStats(
            epoch=p.cycles_done, phase="m1", recon_loss=float(np.mean(m1_losses)) if m1_losses else post,
            wall_clock=time.perf_counter() - t0,
        )
        out.append(m1_stats)
        p.history.append(m1_stats)
        log.info("EM cycle %d: recon %.5f (pre-EM %.5f, ratio %.3f)", p.cycles_done, post, pre, ratio)
        if ratio > 2.0:
            raise EMDegradationError(
                f"reconstruction degraded by {100 * (ratio - 1):.0f}% (pre {pre:.5f}, post {post:.5f})"
            )
        if ratio > 1.2:
            log.warning("post-EM reconstruction %.1f%% worse than pre-EM", 100 * (ratio - 1))
        p.cycles_done += 1
        if checkpoint_fn is not None:
            checkpoint_fn(p)
    return out
