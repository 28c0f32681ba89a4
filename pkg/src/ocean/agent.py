"""A single consensus-game player.

Each player owns an index embedder, a modulator MLP, two recurrent cells
(policy path and classifier path), a policy head, a classifier head and a
baseline head. Every method is batched over episodes: slot tensors are
``[B, N, D]`` and hidden states ``[B, H]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .numcore import ParamStore, affine_forward, gru_cell, mlp_forward, softmax


@dataclass
class AgentConfig:
    n_slots: int = 7
    slot_dim: int = 32
    n_classes: int = 3
    hidden: int = 64
    modulator_hidden: int = 64
    head_hidden: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlayerState:
    h_policy: torch.Tensor
    h_classifier: torch.Tensor
    turn: int = 0


def init_player_params(cfg: AgentConfig, seed: int = 0, dtype=torch.float32, zero: bool = False) -> ParamStore:
    """Random (or all-zero) player parameters; ``zero`` gives the closed-form test player."""
    g = torch.Generator().manual_seed(seed)

    def uniform(*shape):
        if zero:
            return torch.zeros(shape, dtype=dtype)
        bound = 1.0 / math.sqrt(shape[0])
        return (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1).mul(bound).to(dtype)

    def zeros(*shape):
        return torch.zeros(shape, dtype=dtype)

    D, H, M, Hh = cfg.slot_dim, cfg.hidden, cfg.modulator_hidden, cfg.head_hidden
    p = ParamStore()
    p.add("embed", zeros(cfg.n_slots, D) if zero else uniform(cfg.n_slots, D) * 0.1)
    p.add("mod.w0", uniform(D, M))
    p.add("mod.b0", zeros(M))
    p.add("mod.w1", uniform(M, D))
    p.add("mod.b1", zeros(D))
    for path in ("rnn_pi", "rnn_c"):
        p.add(f"{path}.w", uniform(D, 3 * H))
        p.add(f"{path}.u", uniform(H, 3 * H))
        p.add(f"{path}.b", zeros(3 * H))
    p.add("pi.w0", uniform(H, Hh))
    p.add("pi.b0", zeros(Hh))
    p.add("pi.w1", uniform(Hh, cfg.n_slots))
    p.add("pi.b1", zeros(cfg.n_slots))
    p.add("cls.w0", uniform(H, Hh))
    p.add("cls.b0", zeros(Hh))
    p.add("cls.w1", uniform(Hh, cfg.n_classes))
    p.add("cls.b1", zeros(cfg.n_classes))
    p.add("base.w", zeros(H, 1))
    p.add("base.b", zeros(1))
    return p


def set_identity_modulator(params: ParamStore) -> None:
    """Make the modulator exact identity: relu(x) - relu(-x) == x (needs hidden == 2 * D)."""
    D = params["mod.w0"].shape[0]
    if params["mod.w0"].shape[1] != 2 * D:
        raise ValueError("identity modulator needs modulator_hidden == 2 * slot_dim")
    eye = torch.eye(D, dtype=params.dtype)
    with torch.no_grad():
        params["mod.w0"].copy_(torch.cat([eye, -eye], dim=1))
        params["mod.w1"].copy_(torch.cat([eye, -eye], dim=0))
        params["mod.b0"].zero_()
        params["mod.b1"].zero_()


class Player:
    def __init__(self, params: ParamStore, cfg: AgentConfig):
        self.params = params
        self.cfg = cfg

    def embed_argument(self, slot_vec: torch.Tensor, slot_index: torch.Tensor) -> torch.Tensor:
        slot_index = torch.as_tensor(slot_index, dtype=torch.long)
        if slot_index.numel() and (slot_index.min() < 0 or slot_index.max() >= self.cfg.n_slots):
            raise IndexError(f"slot index out of range [0, {self.cfg.n_slots}): {slot_index.tolist()}")
        if slot_vec.shape[-1] != self.params["embed"].shape[1]:
            raise ValueError(f"slot dim {slot_vec.shape[-1]} != embedder dim {self.params['embed'].shape[1]}")
        x = slot_vec + self.params["embed"][slot_index]
        return mlp_forward(x, self.params, "mod", 2)

    def initial_state(self, slots: torch.Tensor) -> PlayerState:
        B = slots.shape[0]
        zeros = torch.zeros(B, self.cfg.hidden, dtype=slots.dtype)
        return PlayerState(h_policy=self.policy_init(slots), h_classifier=zeros, turn=0)

    def policy_init(self, slots: torch.Tensor) -> torch.Tensor:
        """Feed every slot in index order through the policy-path cell from zeros."""
        B, N, _ = slots.shape
        if N != self.cfg.n_slots:
            raise ValueError(f"expected {self.cfg.n_slots} slots, got {N}")
        h = torch.zeros(B, self.cfg.hidden, dtype=slots.dtype)
        for n in range(N):
            idx = torch.full((B,), n, dtype=torch.long)
            h = gru_cell(self.embed_argument(slots[:, n], idx), h, self.params, "rnn_pi")
        return h

    def observe(self, state: PlayerState, slot_vec: torch.Tensor, slot_index: torch.Tensor) -> PlayerState:
        e = self.embed_argument(slot_vec, slot_index)
        return PlayerState(
            h_policy=gru_cell(e, state.h_policy, self.params, "rnn_pi"),
            h_classifier=gru_cell(e, state.h_classifier, self.params, "rnn_c"),
            turn=state.turn + 1,
        )

    def policy_logits(self, state: PlayerState) -> torch.Tensor:
        return mlp_forward(state.h_policy, self.params, "pi", 2)

    def act(
        self,
        state: PlayerState,
        generator: torch.Generator | None = None,
        mode: str = "sample",
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Choose slot indices; returns ``(index[B], log_prob[B], distribution[B, N])``."""
        logits = self.policy_logits(state)
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool).expand_as(logits)
            if not mask.any(dim=-1).all():
                raise ValueError("every action is masked")
        probs = softmax(logits, dim=-1, mask=mask)
        if mode == "greedy":
            idx = torch.argmax(probs.detach(), dim=-1)  # first maximum wins ties
        elif mode == "sample":
            idx = torch.multinomial(probs.detach(), 1, generator=generator).squeeze(-1)
        else:
            raise ValueError(f"unknown act mode {mode!r}")
        chosen = probs.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
        return idx, torch.log(chosen.clamp_min(1e-12)), probs

    def classify(self, state: PlayerState) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``(distribution[B, Y], claim[B], confidence[B])`` from the classifier path."""
        probs = softmax(mlp_forward(state.h_classifier, self.params, "cls", 2), dim=-1)
        claim = torch.argmax(probs.detach(), dim=-1)
        confidence = probs.gather(-1, claim.unsqueeze(-1)).squeeze(-1)
        return probs, claim, confidence

    def baseline_value(self, state: PlayerState) -> torch.Tensor:
        """Value estimate from the (detached) policy hidden state; trains only the head."""
        return affine_forward(state.h_policy.detach(), self.params.block("base.w"), self.params.block("base.b")).squeeze(-1)
