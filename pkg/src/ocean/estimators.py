"""scikit-learn style estimators wrapping the slot coder and the consensus game."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import slotcoder as sc
from . import trainer as tr
from .agent import AgentConfig, Player, init_player_params
from .config import preset as get_preset
from .evalx import EpisodeLog, MetricsReport, compute_metrics, episode_log
from .game import EpisodeState, GameConfig, play_games
from .numcore import load_checkpoint, save_checkpoint
from .validation import check_fitted, check_images, check_labels

log = logging.getLogger(__name__)


class SlotAutoencoder(TransformerMixin, BaseEstimator):
    """Slot-attention autoencoder; ``transform`` maps images to ``[n, n_slots, slot_dim]``."""

    def __init__(
        self,
        resolution=32,
        n_slots=7,
        slot_dim=32,
        enc_channels=32,
        dec_channels=16,
        mlp_hidden=64,
        n_iters=3,
        enc_downsample=2,
        epochs=40,
        batch_size=32,
        lr=2e-3,
        empty_tau=0.5,
        random_state=0,
    ):
        self.resolution = resolution
        self.n_slots = n_slots
        self.slot_dim = slot_dim
        self.enc_channels = enc_channels
        self.dec_channels = dec_channels
        self.mlp_hidden = mlp_hidden
        self.n_iters = n_iters
        self.enc_downsample = enc_downsample
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.empty_tau = empty_tau
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: sc.SlotcoderConfig, **kw) -> "SlotAutoencoder":
        return cls(
            resolution=cfg.resolution, n_slots=cfg.n_slots, slot_dim=cfg.slot_dim,
            enc_channels=cfg.enc_channels, dec_channels=cfg.dec_channels, mlp_hidden=cfg.mlp_hidden,
            n_iters=cfg.n_iters, enc_downsample=cfg.enc_downsample, empty_tau=cfg.empty_tau, **kw,
        )

    def _config(self) -> sc.SlotcoderConfig:
        return sc.SlotcoderConfig(
            resolution=self.resolution, n_slots=self.n_slots, slot_dim=self.slot_dim,
            enc_channels=self.enc_channels, dec_channels=self.dec_channels, mlp_hidden=self.mlp_hidden,
            n_iters=self.n_iters, enc_downsample=self.enc_downsample, empty_tau=self.empty_tau,
        )

    def fit(self, X, y=None, callback=None):
        X = check_images(X, self.resolution)
        self.config_ = self._config()
        self.params_ = sc.init_params(self.config_, seed=self.random_state)
        tcfg = tr.TrainConfig(seed=self.random_state, batch_size=self.batch_size, warmup_epochs=self.epochs,
                              warmup_lr=self.lr)
        self.loss_curve_ = tr.warmup_slots(torch.from_numpy(X), self.params_, self.config_, tcfg, callback=callback)
        return self

    def slot_sets(self, X) -> sc.SlotSet:
        check_fitted(self, "params_")
        X = check_images(X, self.config_.resolution)
        return tr.encode_slots(self.params_, X, self.config_, seed=self.random_state)

    def transform(self, X) -> np.ndarray:
        return self.slot_sets(X).slots.numpy()

    def reconstruct(self, X) -> np.ndarray:
        check_fitted(self, "params_")
        X = check_images(X, self.config_.resolution)
        g = torch.Generator().manual_seed(self.random_state)
        with torch.no_grad():
            _, recon = sc.forward(self.params_, torch.from_numpy(X), self.config_, g)
        return recon.full.numpy()

    def empty_slots(self, X) -> np.ndarray:
        return sc.empty_slot_mask(self.slot_sets(X).attention, self.config_.empty_tau).numpy()

    def score(self, X, y=None) -> float:
        """Negative mean squared reconstruction error."""
        check_fitted(self, "params_")
        X = check_images(X, self.config_.resolution)
        return -tr.eval_recon(self.params_, X, self.config_, seed=self.random_state)

    def save(self, path) -> None:
        check_fitted(self, "params_")
        save_checkpoint(path, {"slotcoder": self.params_},
                        meta={"config": self.config_.to_dict(), "estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "SlotAutoencoder":
        arrays, meta = load_checkpoint(path)
        est = cls(**meta["estimator"])
        est.config_ = sc.SlotcoderConfig(**meta["config"])
        est.params_ = sc.init_params(est.config_, seed=est.random_state)
        est.params_.load_arrays(arrays, prefix="slotcoder/")
        return est


class OceanClassifier(ClassifierMixin, BaseEstimator):
    """Two players agree on a label by exchanging slot selections.

    ``fit`` warms up (or reuses) a :class:`SlotAutoencoder`, then trains both
    players with REINFORCE, per-turn cross-entropy and a value baseline;
    ``em_cycles > 0`` adds reward-injected slot-coder updates. ``predict`` plays
    one game per image; ``explain`` returns the full transcripts.
    """

    def __init__(
        self,
        config="A",
        slotcoder=None,
        warmup_epochs=40,
        game_epochs=30,
        batch_size=32,
        lr_players=3e-4,
        lr_slots=1e-4,
        alpha_ce=1.0,
        alpha_base=0.5,
        entropy_coef=0.0,
        reward_scale=0.1,
        fixed_turns=4,
        em_cycles=0,
        em_m1_steps=20,
        em_m2_epochs=1,
        eval_mode="greedy",
        random_state=0,
    ):
        self.config = config
        self.slotcoder = slotcoder
        self.warmup_epochs = warmup_epochs
        self.game_epochs = game_epochs
        self.batch_size = batch_size
        self.lr_players = lr_players
        self.lr_slots = lr_slots
        self.alpha_ce = alpha_ce
        self.alpha_base = alpha_base
        self.entropy_coef = entropy_coef
        self.reward_scale = reward_scale
        self.fixed_turns = fixed_turns
        self.em_cycles = em_cycles
        self.em_m1_steps = em_m1_steps
        self.em_m2_epochs = em_m2_epochs
        self.eval_mode = eval_mode
        self.random_state = random_state

    def _train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            seed=self.random_state, batch_size=self.batch_size, warmup_epochs=self.warmup_epochs,
            game_epochs=self.game_epochs, lr_players=self.lr_players, lr_slots=self.lr_slots,
            alpha_ce=self.alpha_ce, alpha_base=self.alpha_base, entropy_coef=self.entropy_coef,
            reward_scale=self.reward_scale,
            fixed_turns=self.fixed_turns, em_cycles=self.em_cycles, em_m1_steps=self.em_m1_steps,
            em_m2_epochs=self.em_m2_epochs,
        )

    def _init_players(self, n_classes: int) -> list[Player]:
        acfg = replace(self.preset_, slots=self.slotcoder_.config_).agent_config(n_classes)
        return [Player(init_player_params(acfg, seed=self.random_state * 10 + 1 + i), acfg) for i in range(2)]

    def fit(self, X, y, epoch_callback=None):
        X = check_images(X)
        self.classes_, y_enc = check_labels(y, len(X))
        self.preset_ = get_preset(self.config)
        res = self.slotcoder.resolution if self.slotcoder is not None else self.preset_.slots.resolution
        if X.shape[2] != res:
            raise ValueError(f"config {self.config} expects {res}px images, got {X.shape[2]}px")
        tcfg = self._train_config()
        if self.slotcoder is not None and hasattr(self.slotcoder, "params_"):
            self.slotcoder_ = copy.deepcopy(self.slotcoder)
        else:
            base = self.slotcoder or SlotAutoencoder.from_config(
                self.preset_.slots, epochs=self.warmup_epochs, batch_size=self.batch_size,
                random_state=self.random_state,
            )
            self.slotcoder_ = copy.deepcopy(base).fit(X)
        self.players_ = self._init_players(len(self.classes_))
        self.game_config_ = self.preset_.game
        pipeline = tr.Pipeline(self.slotcoder_.params_, self.slotcoder_.config_, self.players_,
                               self.game_config_, tcfg)
        slots = tr.encode_slots(self.slotcoder_.params_, X, self.slotcoder_.config_, seed=tcfg.seed)
        self.history_ = []
        for _ in range(tcfg.game_epochs):
            stats = tr.train_game_epoch(pipeline.game_trainer, slots.slots, y_enc)
            self.history_.append(stats)
            if epoch_callback is not None:
                epoch_callback(stats)
        if tcfg.em_cycles:
            em_stats = tr.em_loop(pipeline, X, y_enc)
            self.history_.extend(em_stats)
            if epoch_callback is not None:
                for stats in em_stats:
                    epoch_callback(stats)
        return self

    def play(self, X, y=None, scene_ids=None) -> tuple[list[EpisodeState], sc.SlotSet]:
        """One evaluation game per image (config end condition, greedy by default)."""
        check_fitted(self, "players_")
        X = check_images(X, self.slotcoder_.config_.resolution)
        y_enc = np.zeros(len(X), np.int64) if y is None else np.searchsorted(self.classes_, np.asarray(y))
        slot_set = self.slotcoder_.slot_sets(X)
        g = torch.Generator().manual_seed(self.random_state * 1000 + 41)
        episodes = play_games(self.players_, slot_set.slots, y_enc, self.game_config_, g, self.eval_mode,
                              scene_ids=scene_ids)
        return episodes, slot_set

    def predict(self, X) -> np.ndarray:
        episodes, _ = self.play(X)
        return self.classes_[np.array([ep.prediction for ep in episodes], dtype=np.int64)]

    def explain(self, X, y=None, scene_ids=None, with_masks: bool = True) -> list[EpisodeLog]:
        """Transcripts with per-turn slot masks and empty-slot flags."""
        episodes, slot_set = self.play(X, y, scene_ids)
        empty = sc.empty_slot_mask(slot_set.attention, self.slotcoder_.config_.empty_tau).numpy()
        R = self.slotcoder_.config_.resolution
        logs = []
        for b, ep in enumerate(episodes):
            masks = sc.attention_maps(slot_set.attention[b], R) if with_masks else None
            logs.append(episode_log(ep, empty[b], masks))
        return logs

    def evaluate(self, X, y) -> MetricsReport:
        return compute_metrics(self.explain(X, y, with_masks=False), n_classes=len(self.classes_))

    # -- persistence ---------------------------------------------------------
    def save(self, directory) -> None:
        check_fitted(self, "players_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.slotcoder_.save(d / "slotcoder.ockp")
        save_checkpoint(d / "players.ockp", {f"player{i}": p.params for i, p in enumerate(self.players_)})
        params = {k: v for k, v in self.get_params(deep=False).items() if k != "slotcoder"}
        meta = {
            "estimator": params,
            "classes": self.classes_.tolist(),
            "game": asdict(self.game_config_),
            "agent": self.players_[0].cfg.to_dict(),
        }
        (d / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "OceanClassifier":
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text())
        est = cls(**meta["estimator"])
        est.preset_ = get_preset(est.config)
        est.classes_ = np.asarray(meta["classes"])
        est.game_config_ = GameConfig(**meta["game"])
        est.slotcoder_ = SlotAutoencoder.load(d / "slotcoder.ockp")
        acfg = AgentConfig(**meta["agent"])
        arrays, _ = load_checkpoint(d / "players.ockp")
        est.players_ = []
        for i in range(2):
            params = init_player_params(acfg, seed=0)
            params.load_arrays(arrays, prefix=f"player{i}/")
            est.players_.append(Player(params, acfg))
        return est

    def with_game_config(self, **changes) -> "OceanClassifier":
        """Copy sharing fitted weights but playing under a modified game config."""
        check_fitted(self, "players_")
        other = copy.copy(self)
        other.game_config_ = replace(self.game_config_, **changes)
        return other
