import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ocean.agent import AgentConfig, Player, PlayerState, init_player_params, set_identity_modulator
from ocean.numcore import finite_diff_check, float64_mode, gru_cell, mlp_forward

CFG = AgentConfig(n_slots=4, slot_dim=3, n_classes=3, hidden=5, modulator_hidden=6, head_hidden=4)


def _player(seed=0, zero=False, cfg=CFG, dtype=torch.float64):
    return Player(init_player_params(cfg, seed=seed, zero=zero, dtype=dtype), cfg)


def _slots(B=2, seed=0, cfg=CFG):
    return torch.randn(B, cfg.n_slots, cfg.slot_dim, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestEmbed:
    def test_identity_modulator_zero_embedding(self):
        pl = _player()
        set_identity_modulator(pl.params)
        with torch.no_grad():
            pl.params["embed"].zero_()
        v = torch.randn(5, 3, dtype=torch.float64)
        assert torch.allclose(pl.embed_argument(v, torch.arange(5) % 4), v, atol=1e-15)

    def test_zero_slot_vector(self):
        pl = _player(seed=2)
        idx = torch.tensor([1, 3])
        out = pl.embed_argument(torch.zeros(2, 3, dtype=torch.float64), idx)
        expected = mlp_forward(pl.params["embed"][idx], pl.params, "mod", 2)
        assert torch.equal(out, expected)

    def test_composition_oracle(self):
        pl = _player(seed=3)
        p = {k: pl.params[k].detach().numpy() for k in pl.params.names()}
        v = np.random.default_rng(0).normal(size=(1, 3))
        x = v + p["embed"][2]
        expected = np.maximum(x @ p["mod.w0"] + p["mod.b0"], 0) @ p["mod.w1"] + p["mod.b1"]
        out = pl.embed_argument(torch.tensor(v), torch.tensor([2])).detach().numpy()
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            _player().embed_argument(torch.zeros(1, 3, dtype=torch.float64), torch.tensor([4]))

    def test_identity_needs_double_width(self):
        cfg = AgentConfig(n_slots=4, slot_dim=3, modulator_hidden=5)
        with pytest.raises(ValueError):
            set_identity_modulator(init_player_params(cfg))


class TestRecurrence:
    def test_zero_params_policy_init(self):
        h = _player(zero=True).policy_init(_slots())
        assert torch.all(h == 0)

    def test_single_slot_is_one_cell_step(self):
        cfg = AgentConfig(n_slots=1, slot_dim=3, hidden=5, modulator_hidden=6, head_hidden=4)
        pl = _player(seed=1, cfg=cfg)
        s = _slots(cfg=cfg)
        e = pl.embed_argument(s[:, 0], torch.zeros(2, dtype=torch.long))
        expected = gru_cell(e, torch.zeros(2, 5, dtype=torch.float64), pl.params, "rnn_pi")
        assert torch.equal(pl.policy_init(s), expected)

    def test_three_step_unroll(self):
        cfg = AgentConfig(n_slots=3, slot_dim=3, hidden=5, modulator_hidden=6, head_hidden=4)
        pl = _player(seed=4, cfg=cfg)
        s = _slots(cfg=cfg)
        h = torch.zeros(2, 5, dtype=torch.float64)
        for n in range(3):
            h = gru_cell(pl.embed_argument(s[:, n], torch.full((2,), n)), h, pl.params, "rnn_pi")
        assert torch.allclose(pl.policy_init(s), h, atol=1e-14)

    def test_zero_params_observe_halves(self):
        pl = _player(zero=True)
        st0 = PlayerState(torch.ones(2, 5, dtype=torch.float64), torch.full((2, 5), 4.0, dtype=torch.float64))
        st1 = pl.observe(st0, _slots()[:, 0], torch.tensor([0, 1]))
        assert torch.all(st1.h_policy == 0.5) and torch.all(st1.h_classifier == 2.0) and st1.turn == 1

    def test_observe_fold(self):
        pl = _player(seed=5)
        s = _slots()
        picks = [torch.tensor([0, 3]), torch.tensor([2, 2]), torch.tensor([1, 0])]
        state = pl.initial_state(s)
        hp, hc = state.h_policy, state.h_classifier
        for idx in picks:
            state = pl.observe(state, s[torch.arange(2), idx], idx)
            e = pl.embed_argument(s[torch.arange(2), idx], idx)
            hp, hc = gru_cell(e, hp, pl.params, "rnn_pi"), gru_cell(e, hc, pl.params, "rnn_c")
        assert torch.allclose(state.h_policy, hp) and torch.allclose(state.h_classifier, hc) and state.turn == 3


class TestHeads:
    def test_zero_params_uniform_policy(self):
        pl = _player(zero=True)
        _, _, probs = pl.act(pl.initial_state(_slots()), torch.Generator().manual_seed(0))
        assert torch.allclose(probs, torch.full_like(probs, 0.25))

    def test_greedy_lowest_index_tie(self):
        pl = _player(zero=True)
        with torch.no_grad():
            pl.params["pi.b1"].copy_(torch.tensor([0.1, 0.9, 0.9, 0.2]))
        idx, _, _ = pl.act(pl.initial_state(_slots()), mode="greedy")
        assert idx.tolist() == [1, 1]

    def test_sampling_frequencies(self):
        pl = _player(zero=True)
        target = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
        with torch.no_grad():
            pl.params["pi.b1"].copy_(target.log())
        state = PlayerState(torch.zeros(10_000, 5, dtype=torch.float64), torch.zeros(10_000, 5, dtype=torch.float64))
        idx, logp, _ = pl.act(state, torch.Generator().manual_seed(7))
        freq = torch.bincount(idx, minlength=4).double() / 10_000
        assert (freq - target).abs().max().item() < 0.02
        assert torch.allclose(logp, target.log()[idx])

    def test_masked_actions_never_chosen(self):
        pl = _player(seed=1)
        mask = torch.tensor([[True, False, True, False]] * 2)
        for seed in range(20):
            idx, _, probs = pl.act(pl.initial_state(_slots()), torch.Generator().manual_seed(seed), mask=mask)
            assert set(idx.tolist()) <= {0, 2} and torch.all(probs[:, 1] == 0)
        with pytest.raises(ValueError):
            pl.act(pl.initial_state(_slots()), mask=torch.zeros(2, 4, dtype=torch.bool))

    def test_unknown_mode(self):
        pl = _player()
        with pytest.raises(ValueError):
            pl.act(pl.initial_state(_slots()), mode="beam")

    def test_zero_params_classifier(self):
        pl = _player(zero=True)
        probs, claim, conf = pl.classify(pl.initial_state(_slots()))
        assert torch.allclose(probs, torch.full_like(probs, 1 / 3))
        assert claim.tolist() == [0, 0] and torch.allclose(conf, torch.full_like(conf, 1 / 3))

    def test_one_hot_bias_classifier(self):
        pl = _player(zero=True)
        with torch.no_grad():
            pl.params["cls.b1"].copy_(torch.tensor([0.0, 0.0, 10.0]))
        _, claim, conf = pl.classify(pl.initial_state(_slots()))
        assert claim.tolist() == [2, 2] and conf.min().item() > 0.99

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_classifier_normalised(self, seed):
        pl = _player(seed=seed % 50)
        s = _slots(seed=seed)
        state = pl.observe(pl.initial_state(s), s[:, 1], torch.tensor([1, 1]))
        probs, _, _ = pl.classify(state)
        assert (probs.sum(-1) - 1).abs().max().item() < 1e-12

    def test_baseline_zero_and_bias(self):
        pl = _player(zero=True)
        state = pl.initial_state(_slots())
        assert torch.all(pl.baseline_value(state) == 0)
        with torch.no_grad():
            pl.params["base.b"].fill_(0.3)
        assert torch.allclose(pl.baseline_value(state), torch.full((2,), 0.3, dtype=torch.float64))

    def test_baseline_gradient_reaches_only_head(self):
        pl = _player(seed=6)
        with torch.no_grad():
            pl.params["base.w"].normal_()
        s = _slots()
        state = pl.observe(pl.initial_state(s), s[:, 0], torch.tensor([0, 0]))
        loss = ((pl.baseline_value(state) - 1.0) ** 2).mean()
        loss.backward()
        for name in pl.params.names():
            g = pl.params.block(name).grad
            if name.startswith("base."):
                assert g.abs().sum() > 0
            else:
                assert torch.all(g == 0), name


def test_player_composite_gradcheck():
    with float64_mode():
        pl = _player(seed=8)
        s = _slots(seed=1)
        idx = torch.tensor([2, 0])

        def f():
            state = pl.observe(pl.initial_state(s), s[torch.arange(2), idx], idx)
            probs = torch.softmax(pl.policy_logits(state), -1)
            cls, _, _ = pl.classify(state)
            return (probs * torch.arange(4.0)).sum() + (cls**2).sum()

        rep = finite_diff_check(f, pl.params, step=1e-5)
    assert rep.passed, rep.max_rel_error
