"""Named run presets (A: consensus end, B: repetition end, C: consensus at 64 px)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .agent import AgentConfig
from .game import GameConfig
from .slotcoder import SlotcoderConfig


@dataclass
class Preset:
    name: str
    game: GameConfig
    slots: SlotcoderConfig
    hidden: int = 64
    head_hidden: int = 64
    notes: str = ""

    def agent_config(self, n_classes: int) -> AgentConfig:
        return AgentConfig(
            n_slots=self.slots.n_slots,
            slot_dim=self.slots.slot_dim,
            n_classes=n_classes,
            hidden=self.hidden,
            modulator_hidden=2 * self.slots.slot_dim,
            head_hidden=self.head_hidden,
        )


def preset(name: str) -> Preset:
    name = name.upper()
    if name == "A":
        return Preset("A", GameConfig(end_condition="consensus", confidence_threshold=0.70),
                      SlotcoderConfig(resolution=32, slot_dim=32), notes="consensus end, 32 px")
    if name == "B":
        return Preset("B", GameConfig(end_condition="repetition", repetition_bonus=0.1),
                      SlotcoderConfig(resolution=32, slot_dim=32), notes="repetition end with bonus, 32 px")
    if name == "C":
        return Preset(
            "C",
            GameConfig(end_condition="consensus", confidence_threshold=0.70),
            SlotcoderConfig(resolution=64, slot_dim=64, enc_channels=48, dec_channels=32, mlp_hidden=128),
            hidden=96,
            head_hidden=96,
            notes="consensus end, 64 px, wider heads",
        )
    raise ValueError(f"unknown preset {name!r}; choose A, B or C")


PRESETS = ("A", "B", "C")
