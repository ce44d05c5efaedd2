import math

import numpy as np
import pytest
import torch

from conftest import TINY, transform_scenario
from tokenplan.geometry import AgentCategory
from tokenplan.policy import (
    MASKED_LOGIT, ModelConfig, NonFiniteError, PolicyParams, build_context, collate, forward, forward_batch,
    future_tokens, param_shapes, grad, init_params, kl_categorical, log_prob, log_softmax, sample_from_uniform, sample_token,
)


def _sizes(vocabs):
    return {c: len(v) for c, v in vocabs.items()}


def _history(scn, vocabs, cfg, t=0):
    ctx = build_context(scn, vocabs, cfg)
    if t == 0:
        return ctx.hist_tokens
    return np.concatenate([ctx.hist_tokens, future_tokens(scn, vocabs, cfg.max_steps)[:, :t]], axis=1)


class TestConfig:
    def test_roundtrip(self):
        assert ModelConfig.from_dict(TINY.to_dict()) == TINY

    @pytest.mark.parametrize("kw", [{"model_dim": 0}, {"num_heads": 3}, {"map_radius": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_param_table(self, tiny_params):
        assert tiny_params.size == sum(int(np.prod(s)) for _, s in param_shapes(TINY))
        assert tiny_params.numpy().dtype == np.float64

    def test_seeded_init(self):
        a, b = init_params(TINY, 5), init_params(TINY, 5)
        assert np.array_equal(a.numpy(), b.numpy())
        assert not np.array_equal(a.numpy(), init_params(TINY, 6).numpy())


class TestForward:
    def test_shape_and_finite(self, scenarios, vocabs16, tiny_params):
        scn = scenarios[0]
        out = forward(tiny_params, scn, _history(scn, vocabs16, TINY), vocabs16)
        assert out.shape == (len(scn.agents), TINY.vocab_size)
        assert np.all(np.isfinite(out))

    def test_zero_params_uniform(self, scenarios, vocabs16):
        p = PolicyParams(TINY, torch.zeros(init_params(TINY, 0).size, dtype=torch.float64))
        scn = scenarios[1]
        pr = np.exp(log_softmax(forward(p, scn, _history(scn, vocabs16, TINY, 1), vocabs16)))
        for a, row in zip(scn.agents, pr):
            n = len(vocabs16[a.category])
            np.testing.assert_allclose(row[:n], 1.0 / n, atol=1e-12)
            assert np.all(row[n:] == 0.0)

    def test_masked_ids_get_no_mass(self, scenarios, vocabs16, tiny_params):
        small = dict(vocabs16)
        v = vocabs16[AgentCategory.PEDESTRIAN]
        small[AgentCategory.PEDESTRIAN] = type(v)(v.category, v.segments[:5], v.disk_radius_eps, v.ref_dims, v.dt)
        scn = next(s for s in scenarios if any(a.category == AgentCategory.PEDESTRIAN for a in s.agents))
        b = collate([build_context(scn, small, TINY)], TINY, _sizes(small))
        logits = forward_batch(tiny_params, b).detach()
        ped = b.categories[0] == int(AgentCategory.PEDESTRIAN)
        assert torch.all(logits[0, ped, :, 5:] <= MASKED_LOGIT / 2)
        probs = torch.softmax(logits[0, ped], -1)
        assert float(probs[..., 5:].sum()) == 0.0

    def test_horizon_complete_raises(self, scenarios, vocabs16, tiny_params):
        scn = scenarios[0]
        with pytest.raises(ValueError):
            forward(tiny_params, scn, _history(scn, vocabs16, TINY, TINY.max_steps), vocabs16)

    def test_rigid_invariance(self, scenarios, vocabs16, tiny_params):
        for scn in scenarios[:4]:
            th = _history(scn, vocabs16, TINY, 2)
            a = forward(tiny_params, scn, th, vocabs16)
            moved = transform_scenario(scn, 1.234, [250.0, -80.0])
            b = forward(tiny_params, moved, th, vocabs16)
            assert np.max(np.abs(a - b)) < 1e-5

    def test_causality_bit_exact(self, scenarios, vocabs16, tiny_params):
        """Outputs up to position tau never depend on tokens or poses after tau."""
        scn = scenarios[2]
        b = collate([build_context(scn, vocabs16, TINY)], TINY, _sizes(vocabs16))
        base = forward_batch(tiny_params, b).detach()
        rng = np.random.default_rng(0)
        H = TINY.history_steps
        for tau in range(H, TINY.seq_len):
            b2 = collate([build_context(scn, vocabs16, TINY)], TINY, _sizes(vocabs16))
            b2.tokens[:, :, tau:] = torch.from_numpy(rng.integers(0, 16, b2.tokens[:, :, tau:].shape))
            b2.poses[:, :, tau:] += torch.from_numpy(rng.normal(0, 3, b2.poses[:, :, tau:].shape))
            out = forward_batch(tiny_params, b2).detach()
            assert torch.equal(out[:, :, :tau], base[:, :, :tau])
            assert not torch.equal(out[:, :, tau:], base[:, :, tau:])

    def test_truncated_prefix_matches_full(self, scenarios, vocabs16, tiny_params):
        b = collate([build_context(s, vocabs16, TINY) for s in scenarios[:3]], TINY, _sizes(vocabs16))
        full = forward_batch(tiny_params, b).detach()
        for L in range(1, TINY.seq_len + 1):
            part = forward_batch(tiny_params, b, upto=L).detach()
            np.testing.assert_allclose(part.numpy(), full[:, :, :L].numpy(), rtol=0, atol=1e-12)

    def test_batched_equals_single(self, scenarios, vocabs16, tiny_params):
        ctxs = [build_context(s, vocabs16, TINY) for s in scenarios[:3]]
        both = forward_batch(tiny_params, collate(ctxs, TINY, _sizes(vocabs16))).detach()
        for i, c in enumerate(ctxs):
            one = forward_batch(tiny_params, collate([c], TINY, _sizes(vocabs16))).detach()
            n = c.num_agents
            np.testing.assert_allclose(both[i, :n].numpy(), one[0].numpy(), atol=1e-10)


class TestGradients:
    def test_matches_finite_differences(self, scenarios, vocabs16):
        cfg = TINY
        p = init_params(cfg, 2)
        scn = scenarios[0]
        b = collate([build_context(scn, vocabs16, cfg)], cfg, _sizes(vocabs16))
        tok = torch.from_numpy(future_tokens(scn, vocabs16, cfg.max_steps))[None]

        def loss_fn(q):
            lg = forward_batch(q, b)[:, :, cfg.history_steps - 1:-1]
            return -torch.gather(log_softmax(lg), -1, tok.unsqueeze(-1)).mean()

        g = grad(p, loss_fn)
        rng = np.random.default_rng(0)
        h = 1e-4
        flat = p.numpy()
        for i in rng.choice(p.size, 30, replace=False):
            e = np.zeros_like(flat)
            e[i] = h
            up = float(loss_fn(p.with_flat(torch.from_numpy(flat + e))))
            dn = float(loss_fn(p.with_flat(torch.from_numpy(flat - e))))
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[i]) <= 1e-4 * max(1e-3, abs(fd), abs(g[i])) + 1e-8

    def test_nonfinite_names_tensor(self, tiny_params):
        def bad(q):
            return (q["tok_emb"] * float("nan")).sum() + q["in_b"].sum()
        with pytest.raises(NonFiniteError):
            grad(tiny_params, bad)

    def test_unused_params_zero(self, tiny_params):
        g = grad(tiny_params, lambda q: (q["in_b"] ** 2).sum())
        assert np.count_nonzero(g) <= tiny_params.cfg.model_dim


class TestDistributions:
    def test_log_prob_normalized(self):
        rng = np.random.default_rng(0)
        lg = rng.normal(0, 5, 20)
        assert math.fsum(math.exp(log_prob(lg, i)) for i in range(20)) == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(IndexError):
            log_prob(lg, 20)

    def test_log_softmax_extreme(self):
        lp = log_softmax(np.array([1e6, 0.0, -1e6]))
        assert lp[0] == 0.0 and np.all(np.isfinite(lp[:2]))

    def test_torch_numpy_agree(self):
        lg = np.random.default_rng(1).normal(size=(4, 9))
        np.testing.assert_allclose(log_softmax(torch.from_numpy(lg)).numpy(), log_softmax(lg), atol=1e-14)

    def test_greedy_is_argmax_smallest_tie(self):
        lg = np.array([0.0, 3.0, 3.0, 1.0])
        assert sample_token(lg, np.random.default_rng(0), temperature=0.0) == 1

    def test_sampling_frequencies(self):
        lg = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
        rng = np.random.default_rng(7)
        draws = sample_from_uniform(np.tile(lg, (40000, 1)), rng.random(40000), 1.0)
        freq = np.bincount(draws, minlength=4) / 40000
        np.testing.assert_allclose(freq, [0.1, 0.2, 0.3, 0.4], atol=0.01)

    def test_zero_probability_never_sampled(self):
        lg = np.array([0.0, 0.0, MASKED_LOGIT])
        u = np.linspace(0, 1, 1001, endpoint=False)
        assert np.all(sample_from_uniform(np.tile(lg, (len(u), 1)), u, 1.0) < 2)

    def test_negative_temperature(self):
        with pytest.raises(ValueError):
            sample_token(np.zeros(3), np.random.default_rng(0), -1.0)

    def test_kl(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=10), rng.normal(size=10)
        assert kl_categorical(a, a) == pytest.approx(0.0, abs=1e-15)
        assert kl_categorical(a, b) > 0
        pa, pb = np.exp(log_softmax(a)), np.exp(log_softmax(b))
        assert kl_categorical(a, b) == pytest.approx(float(np.sum(pa * np.log(pa / pb))), rel=1e-12)
