"""Decoder step distribution and the three search procedures."""

import numpy as np
import pytest

from conftest import tiny_gat, tiny_gcn
from oracles import naive_decode_step
from tournet import decoder as dec
from tournet.decoder import (DecodeConfig, DecoderState, beam_search, decode_step,
                             greedy_decode, greedy_rollout, sample_decode)
from tournet.model import PolicyModel
from tournet.tsp import brute_force_solve, generate_instance, tour_length


def fresh(cfg=None, seed=7):
    return PolicyModel.init(cfg or tiny_gat(), seed)


class TestDecodeStep:
    def test_matches_straight_line_recomputation(self, rng):
        cfg = tiny_gat(layers=1, d=4, heads=2, ff=8)
        model = fresh(cfg, seed=21)
        inst = generate_instance(4, rng)
        emb = model.encode(inst.coords[None])
        params_np = {k: p.data for k, p in model.params.items()}
        node = emb.node.data[0]
        graph = emb.graph.data[0]
        for visited_list, first, last in [([], None, None), ([2], 2, 2), ([2, 0], 2, 0),
                                          ([1, 3, 0], 1, 0)]:
            state = DecoderState(partial=list(visited_list), mask=np.zeros(4, dtype=bool))
            for v in visited_list:
                state.mask[v] = True
            lp = decode_step(model, emb, state)
            expected = naive_decode_step(params_np, node, graph, state.mask.copy(),
                                         first, last, heads=cfg.heads, clip=10.0)
            got = np.exp(lp)
            got[state.mask] = 0.0
            np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_forced_move_has_log_prob_zero(self, rng):
        model = fresh()
        inst = generate_instance(2, rng)
        emb = model.encode(inst.coords[None])
        state = DecoderState(partial=[0], mask=np.array([True, False]))
        lp = decode_step(model, emb, state)
        assert lp[1] == 0.0 and lp[0] == -np.inf

    def test_visited_probability_exactly_zero(self, rng):
        model = fresh()
        inst = generate_instance(6, rng)
        emb = model.encode(inst.coords[None])
        state = DecoderState(partial=[3, 1], mask=np.zeros(6, dtype=bool))
        state.mask[[3, 1]] = True
        lp = decode_step(model, emb, state)
        assert np.all(np.exp(lp[[3, 1]]) == 0.0)
        assert abs(np.exp(lp[~state.mask]).sum() - 1.0) < 1e-12

    def test_all_visited_rejected(self, rng):
        model = fresh()
        inst = generate_instance(3, rng)
        emb = model.encode(inst.coords[None])
        state = DecoderState(partial=[0, 1, 2], mask=np.ones(3, dtype=bool))
        with pytest.raises(ValueError):
            decode_step(model, emb, state)


class TestGreedy:
    def test_valid_permutation_and_length(self, rng):
        model = fresh()
        insts = [generate_instance(int(rng.integers(3, 12)), rng) for _ in range(10)]
        for inst, tour in zip(insts, greedy_decode(model, insts)):
            assert sorted(tour.order.tolist()) == list(range(inst.n))
            assert abs(tour.length - tour_length(inst, tour.order)) < 1e-10

    def test_deterministic(self, rng):
        model = fresh()
        inst = generate_instance(9, rng)
        a = greedy_decode(model, [inst])[0]
        b = greedy_decode(model, [inst])[0]
        assert np.array_equal(a.order, b.order) and a.log_prob == b.log_prob

    def test_greedy_log_prob_beats_sampled_median(self, rng):
        model = fresh(seed=33)
        inst = generate_instance(6, rng)
        greedy = greedy_decode(model, [inst])[0]
        res = sample_decode(model, inst, 100, rng=5)
        sampled_lp = [dec.evaluate_log_prob(model, inst, o) for o in res.orders]
        assert greedy.log_prob >= np.median(sampled_lp)

    def test_log_prob_matches_re_evaluation(self, rng):
        model = fresh(seed=9)
        inst = generate_instance(7, rng)
        tour = greedy_decode(model, [inst])[0]
        assert abs(tour.log_prob - dec.evaluate_log_prob(model, inst, tour.order)) < 1e-8


class TestSampling:
    def test_k1_equals_single_stream_rollout(self, rng):
        model = fresh()
        inst = generate_instance(6, rng)
        res = sample_decode(model, inst, 1, rng=42)
        child = np.random.default_rng(42).spawn(1)[0]
        uniforms = child.random(6)[None]
        fx = dec.precompute_fixed(model.params, model.encode(inst.coords[None]), model.config.heads, 10.0)
        orders, _ = dec._sample_steps(model.params, fx, 6, uniforms)
        np.testing.assert_array_equal(res.best.order, orders[0])

    def test_nested_prefix_property(self, rng):
        model = fresh()
        inst = generate_instance(7, rng)
        small = sample_decode(model, inst, 4, rng=11)
        big = sample_decode(model, inst, 12, rng=11)
        np.testing.assert_array_equal(big.orders[:4], small.orders)
        assert big.best.length <= small.best.length

    def test_best_of_k_monotone(self, rng):
        model = fresh(seed=3)
        inst = generate_instance(8, rng)
        bests = [sample_decode(model, inst, k, rng=7).best.length for k in (1, 2, 4, 8, 16, 32)]
        assert all(b <= a + 1e-12 for a, b in zip(bests, bests[1:]))

    def test_step_frequencies_match_distribution(self, rng):
        model = fresh(seed=12)
        inst = generate_instance(5, rng)
        emb = model.encode(inst.coords[None])
        fx = dec.precompute_fixed(model.params, emb, model.config.heads, 10.0)
        probs, _ = dec.step_probs(model.params, fx, np.zeros((1, 5), dtype=bool), None, None)
        p = probs.data[0]
        draws = 100_000
        u = np.random.default_rng(99).random(draws)
        counts = np.bincount(dec._inverse_cdf(np.broadcast_to(p, (draws, 5)), u), minlength=5)
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma + 1.0)

    def test_lengths_retained_for_diagnostics(self, rng):
        model = fresh()
        inst = generate_instance(6, rng)
        res = sample_decode(model, inst, 9, rng=1)
        assert res.lengths.shape == (9,)
        assert res.best.length == res.lengths.min()


class TestBeam:
    def test_width_one_is_greedy_bit_exact(self, rng):
        model = fresh(seed=17)
        for _ in range(10):
            inst = generate_instance(int(rng.integers(3, 10)), rng)
            g = greedy_decode(model, [inst])[0]
            b = beam_search(model, inst, 1)
            assert np.array_equal(b.most_probable.order, g.order)
            assert b.most_probable.length == g.length
            assert b.shortest.length == g.length

    def test_exhaustive_beam_finds_optimum(self, rng):
        import math

        model = fresh(seed=29)
        for n in (5, 6):
            inst = generate_instance(n, rng)
            width = 2 * math.factorial(n)
            result = beam_search(model, inst, width)
            opt = brute_force_solve(inst)
            assert abs(result.shortest.length - opt.length) < 1e-9

    def test_max_log_prob_monotone_in_width(self, rng):
        model = fresh(seed=5)
        inst = generate_instance(7, rng)
        lps = [beam_search(model, inst, w).most_probable.log_prob for w in (1, 2, 4, 8, 16)]
        assert all(b >= a - 1e-12 for a, b in zip(lps, lps[1:]))

    def test_shortest_never_longer_than_most_probable(self, rng):
        model = fresh(seed=2)
        inst = generate_instance(8, rng)
        res = beam_search(model, inst, 16)
        assert res.shortest.length <= res.most_probable.length + 1e-12

    def test_beam_log_prob_matches_re_evaluation(self, rng):
        model = fresh(seed=4)
        inst = generate_instance(6, rng)
        res = beam_search(model, inst, 8)
        assert abs(res.shortest.log_prob -
                   dec.evaluate_log_prob(model, inst, res.shortest.order)) < 1e-8


class TestStructuralValidity:
    @pytest.mark.parametrize("cfg", [tiny_gat(), tiny_gcn()], ids=["gat", "gcn"])
    def test_every_mode_returns_permutations(self, cfg, rng):
        model = fresh(cfg, seed=77)
        for _ in range(15):
            n = int(rng.integers(3, 15))
            inst = generate_instance(n, rng)
            tours = [
                greedy_decode(model, [inst])[0],
                sample_decode(model, inst, 3, rng=int(rng.integers(1 << 30))).best,
                beam_search(model, inst, 4).shortest,
            ]
            for t in tours:
                assert sorted(t.order.tolist()) == list(range(n))
                assert abs(t.length - tour_length(inst, t.order)) < 1e-10


class TestDecodeConfig:
    def test_tags(self):
        assert DecodeConfig(mode="greedy").tag() == "greedy"
        assert DecodeConfig(mode="sample", k=16).tag() == "sample:16"
        assert DecodeConfig(mode="beam", width=8).tag() == "beam:8"

    def test_defaults_paper_scale(self):
        cfg = DecodeConfig()
        assert cfg.k == 1280 and cfg.width == 1280 and cfg.clip == 10.0

    def test_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(mode="magic")
        with pytest.raises(ValueError):
            DecodeConfig(mode="sample", k=0)
