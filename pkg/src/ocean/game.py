"""The consensus game: turn protocol, rewards, end conditions and prediction.

Two players alternate selecting slots. After every selection both players
observe the slot, both classify, and each receives ``p_true - p0`` for its own
classifier. Per-episode bookkeeping lives in :class:`EpisodeState` (plain
Python values, serialisable); the differentiable per-step tensors needed for
learning live on the batched :class:`Game`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .agent import Player, PlayerState

END_CONDITIONS = ("consensus", "repetition", "fixed")
STATUSES = ("running", "consensus", "repetition", "truncated")


class GameOverError(RuntimeError):
    pass


@dataclass
class GameConfig:
    end_condition: str = "consensus"
    confidence_threshold: float = 0.70
    max_turns: int = 10
    fixed_turns: int = 4
    reward_scheme: str = "absolute"
    p0_mode: str = "uniform"
    repetition_bonus: float = 0.0
    mask_repeats: bool = False

    def __post_init__(self):
        if self.end_condition not in END_CONDITIONS:
            raise ValueError(f"end_condition must be one of {END_CONDITIONS}")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1)")
        if not 1 <= self.fixed_turns <= self.max_turns:
            raise ValueError("need 1 <= fixed_turns <= max_turns")
        if self.reward_scheme not in ("absolute", "relative"):
            raise ValueError(f"unknown reward scheme {self.reward_scheme!r}")
        if self.p0_mode not in ("zero", "uniform"):
            raise ValueError(f"unknown p0 mode {self.p0_mode!r}")
        if self.end_condition == "repetition":
            # repeats are the stopping signal, so they must stay selectable
            self.mask_repeats = False

    def p0(self, n_classes: int) -> float:
        return 0.0 if self.p0_mode == "zero" else 1.0 / n_classes

    def training(self) -> "GameConfig":
        return replace(self, end_condition="fixed")


@dataclass
class Argument:
    turn: int  # k, shared by the two players of a round
    step: int  # t, 0-based, unique per action
    player: int
    slot: int
    claim: int
    confidence: float
    distribution: list[float]
    claims: tuple[int, int] = (0, 0)  # both players' current claims after this step
    confidences: tuple[float, float] = (0.0, 0.0)
    slot_vec: list[float] | None = None


@dataclass
class EpisodeState:
    label: int
    starting_player: int = 0
    n_slots: int = 0
    scene_id: int | None = None
    history: list[Argument] = field(default_factory=list)
    rewards: list[list[float]] = field(default_factory=lambda: [[], []])
    claims: tuple[int, int] | None = None
    confidences: tuple[float, float] | None = None
    status: str = "running"
    final_claims: tuple[int, int] | None = None
    final_confidences: tuple[float, float] | None = None
    prediction: int | None = None

    @property
    def length(self) -> int:
        return len(self.history)

    def acting_player(self, step: int | None = None) -> int:
        step = len(self.history) if step is None else step
        return (self.starting_player + step) % 2


def turn_reward(p_true: float, p0: float) -> float:
    return p_true - p0


def relative_turn_reward(p_own: float, p_other_prev: float) -> float:
    return p_own - p_other_prev


def check_end(state: EpisodeState, config: GameConfig) -> str:
    """End status after the latest action (``running`` if the game continues)."""
    if not state.history:
        return "running"
    last = state.history[-1]
    if config.end_condition == "consensus":
        c, p = state.claims, state.confidences
        if c[0] == c[1] and min(p) >= config.confidence_threshold:
            return "consensus"
    elif config.end_condition == "repetition":
        if any(a.slot == last.slot for a in state.history[:-1] if a.player == last.player):
            return "repetition"
    elif len(state.history) >= config.fixed_turns:
        return "truncated"
    if len(state.history) >= config.max_turns:
        return "truncated"
    return "running"


def final_prediction(state: EpisodeState) -> int:
    """Shared claim on consensus, else the more confident player's claim (player 0 on ties)."""
    if state.status == "running":
        raise GameOverError("final_prediction called on a running episode")
    claims, conf = state.final_claims, state.final_confidences
    if state.status == "consensus":
        return int(claims[0])
    return int(claims[0]) if conf[0] >= conf[1] else int(claims[1])


def finish(state: EpisodeState, status: str) -> None:
    state.status = status
    state.final_claims = tuple(state.claims)
    state.final_confidences = tuple(state.confidences)
    state.prediction = final_prediction(state)


def returns(rewards: Sequence[float], gamma: float = 1.0) -> list[float]:
    """Reward-to-go ``G_k = sum_{k' >= k} gamma^(k'-k) r_k'``."""
    out, acc = [0.0] * len(rewards), 0.0
    for k in range(len(rewards) - 1, -1, -1):
        acc = rewards[k] + gamma * acc
        out[k] = acc
    return out


def returns_tensor(rewards: torch.Tensor, gamma: float = 1.0) -> torch.Tensor:
    """Batched reward-to-go along dim 0 of ``[T, ...]``."""
    out = torch.zeros_like(rewards)
    acc = torch.zeros_like(rewards[0])
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


class Game:
    """A batch of episodes sharing players, config and starting player."""

    def __init__(
        self,
        players: Sequence[Player],
        slots: torch.Tensor,
        labels,
        config: GameConfig,
        starting_player: int = 0,
        scene_ids: Sequence[int] | None = None,
        keep_slot_vecs: bool = False,
    ):
        if len(players) != 2:
            raise ValueError("the consensus game is played by exactly two players")
        self.players = list(players)
        self.slots = slots
        self.labels = torch.as_tensor(labels, dtype=torch.long)
        self.config = config
        self.starting_player = int(starting_player)
        self.keep_slot_vecs = keep_slot_vecs
        B, N, _ = slots.shape
        self.n_classes = players[0].cfg.n_classes
        self.p0 = config.p0(self.n_classes)
        self.states: list[PlayerState] = [p.initial_state(slots) for p in self.players]
        ids = list(scene_ids) if scene_ids is not None else [None] * B
        self.episodes = [
            EpisodeState(label=int(self.labels[b]), starting_player=self.starting_player, n_slots=N, scene_id=ids[b])
            for b in range(B)
        ]
        self.active = torch.ones(B, dtype=torch.bool)
        self.selected = torch.zeros(2, B, N, dtype=torch.bool)
        self.step = 0
        self._prev_true = [torch.full((B,), self.p0, dtype=slots.dtype) for _ in range(2)]
        # per-step learning records
        self.actions: list[torch.Tensor] = []
        self.actors: list[int] = []
        self.log_probs: list[torch.Tensor] = []
        self.entropies: list[torch.Tensor] = []
        self.baselines: list[torch.Tensor] = []
        self.active_steps: list[torch.Tensor] = []
        self.class_probs: list[list[torch.Tensor]] = []
        self.true_conf: list[torch.Tensor] = []
        self.rewards: list[torch.Tensor] = []

    @property
    def batch_size(self) -> int:
        return self.slots.shape[0]

    @property
    def done(self) -> bool:
        return not bool(self.active.any())

    def acting_player(self) -> int:
        return (self.starting_player + self.step) % 2

    def play_turn(
        self,
        generator: torch.Generator | None = None,
        mode: str = "sample",
        actions: torch.Tensor | None = None,
    ) -> list[Argument | None]:
        """Advance every running episode by one action; ``actions`` replays fixed choices."""
        if self.done:
            raise GameOverError("play_turn called after every episode ended")
        cfg, B = self.config, self.batch_size
        active = self.active.clone()
        actor = self.acting_player()
        player = self.players[actor]
        pre_state = self.states[actor]
        mask = None
        if cfg.mask_repeats:
            mask = ~self.selected[actor]
            exhausted = ~mask.any(dim=-1)
            mask[exhausted] = True
        if actions is None:
            idx, logp, probs = player.act(pre_state, generator, mode, mask)
        else:
            idx = torch.as_tensor(actions, dtype=torch.long)
            probs = player.act(pre_state, None, "greedy", mask)[2]
            logp = torch.log(probs.gather(-1, idx.unsqueeze(-1)).squeeze(-1).clamp_min(1e-12))
        baseline = player.baseline_value(pre_state)
        rows = torch.arange(B)
        slot_vec = self.slots[rows, idx]

        keep = active.unsqueeze(-1)
        for i, p in enumerate(self.players):
            new = p.observe(self.states[i], slot_vec, idx)
            self.states[i] = PlayerState(
                h_policy=torch.where(keep, new.h_policy, self.states[i].h_policy),
                h_classifier=torch.where(keep, new.h_classifier, self.states[i].h_classifier),
                turn=new.turn,
            )
        outs = [p.classify(s) for p, s in zip(self.players, self.states)]
        true = torch.stack([o[0].gather(-1, self.labels.unsqueeze(-1)).squeeze(-1) for o in outs])  # [2, B]

        repeat = self.selected[actor, rows, idx].clone()
        if cfg.reward_scheme == "absolute":
            reward = true - self.p0
        else:
            reward = true - torch.stack([self._prev_true[1], self._prev_true[0]])
        if cfg.repetition_bonus:  # stays active in the fixed-length training games
            bonus = (repeat & (true[actor].detach() >= self._prev_true[actor].detach())).to(true.dtype)
            zero = torch.zeros_like(bonus)
            reward = reward + cfg.repetition_bonus * torch.stack([bonus if i == actor else zero for i in range(2)])
        self.selected[actor, rows, idx] |= active
        self._prev_true = [torch.where(active, true[i], self._prev_true[i]) for i in range(2)]

        self.actions.append(idx)
        self.actors.append(actor)
        self.log_probs.append(logp)
        self.entropies.append(-(probs * torch.log(probs.clamp_min(1e-12))).sum(-1))
        self.baselines.append(baseline)
        self.active_steps.append(active)
        self.class_probs.append([o[0] for o in outs])
        self.true_conf.append(true)
        self.rewards.append(reward * active.to(reward.dtype))

        claims = torch.stack([o[1] for o in outs]).tolist()
        confs = torch.stack([o[2] for o in outs]).detach().tolist()
        dist = outs[actor][0].detach().tolist()
        r_list = reward.detach().tolist()
        idx_list = idx.tolist()
        args: list[Argument | None] = []
        for b in range(B):
            if not active[b]:
                args.append(None)
                continue
            ep = self.episodes[b]
            arg = Argument(
                turn=self.step // 2 + 1,
                step=self.step,
                player=actor,
                slot=idx_list[b],
                claim=claims[actor][b],
                confidence=confs[actor][b],
                distribution=dist[b],
                claims=(claims[0][b], claims[1][b]),
                confidences=(confs[0][b], confs[1][b]),
                slot_vec=self.slots[b, idx_list[b]].detach().tolist() if self.keep_slot_vecs else None,
            )
            ep.history.append(arg)
            ep.rewards[0].append(r_list[0][b])
            ep.rewards[1].append(r_list[1][b])
            ep.claims = arg.claims
            ep.confidences = arg.confidences
            status = check_end(ep, cfg)
            if status != "running":
                finish(ep, status)
                self.active[b] = False
            args.append(arg)
        self.step += 1
        return args

    def run(self, generator=None, mode: str = "sample", actions: torch.Tensor | None = None) -> "Game":
        t = 0
        while not self.done:
            self.play_turn(generator, mode, None if actions is None else actions[t])
            t += 1
        return self

    # -- learning views ---------------------------------------------------
    def step_mask(self) -> torch.Tensor:
        return torch.stack(self.active_steps).to(self.slots.dtype)  # [T, B]

    def reward_tensor(self) -> torch.Tensor:
        return torch.stack(self.rewards)  # [T, 2, B]

    def actor_returns(self, gamma: float = 1.0) -> torch.Tensor:
        """Return-to-go of the acting player's own rewards at each step, [T, B]."""
        g = returns_tensor(self.reward_tensor().detach(), gamma)  # [T, 2, B]
        actors = torch.tensor(self.actors)
        return g[torch.arange(len(self.actors)), actors]


def new_episode(players, slots: torch.Tensor, label: int, config: GameConfig, starting_player: int = 0) -> Game:
    """Single-episode game over one ``[N, D]`` (or ``[1, N, D]``) slot set."""
    if slots.dim() == 2:
        slots = slots.unsqueeze(0)
    return Game(players, slots, [label], config, starting_player)


def play_games(
    players,
    slots: torch.Tensor,
    labels,
    config: GameConfig,
    generator: torch.Generator | None = None,
    mode: str = "sample",
    batch_size: int = 256,
    scene_ids: Sequence[int] | None = None,
    keep_slot_vecs: bool = False,
) -> list[EpisodeState]:
    """Play one episode per slot set; the starting player alternates per batch."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    out: list[EpisodeState] = []
    with torch.no_grad():
        for k, start in enumerate(range(0, slots.shape[0], batch_size)):
            sl = slice(start, start + batch_size)
            ids = None if scene_ids is None else list(scene_ids)[sl]
            game = Game(players, slots[sl], labels[sl], config, starting_player=k % 2, scene_ids=ids,
                        keep_slot_vecs=keep_slot_vecs)
            game.run(generator, mode)
            out.extend(game.episodes)
    return out


def estimate_utility(
    players,
    slots: torch.Tensor,
    labels,
    config: GameConfig,
    episodes: int,
    generator: torch.Generator | None = None,
    mode: str = "sample",
    batch_size: int = 1000,
) -> tuple[float, float]:
    """Monte-Carlo mean (and standard error) of the per-episode summed rewards of both players.

    Slot sets are drawn uniformly with replacement from ``slots``.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    labels = torch.as_tensor(labels, dtype=torch.long)
    totals = []
    with torch.no_grad():
        done, k = 0, 0
        while done < episodes:
            n = min(batch_size, episodes - done)
            pick = torch.randint(0, slots.shape[0], (n,), generator=generator)
            game = Game(players, slots[pick], labels[pick], config, starting_player=k % 2)
            game.run(generator, mode)
            totals.extend(sum(ep.rewards[0]) + sum(ep.rewards[1]) for ep in game.episodes)
            done += n
            k += 1
    arr = np.asarray(totals, dtype=np.float64)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se
