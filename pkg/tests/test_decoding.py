import io
import json
import math

import numpy as np
import pytest

from prunecd.decoding import (
    DecodeConfig,
    apply_repetition_penalty,
    cd_score,
    dola_bucket_layers,
    generate,
    generate_ids,
    plausible_set,
    select_dola_layer,
    write_traces,
)
from prunecd.diagnostics import jsd
from prunecd.model import LayerSet, TokenDist
from reference import UnbatchedPruneCdSource


def dist_from_probs(probs):
    return TokenDist(np.log(np.asarray(probs, dtype=np.float64)))


class TestPlausibleSet:
    def test_alpha_point_one_keeps_tokens_above_five_percent(self):
        # alpha = 0.1 with max prob 0.5 keeps everything >= 0.05
        probs = [0.5, 0.3, 0.04] + [0.16 / 13] * 13
        keep = plausible_set(dist_from_probs(probs), alpha=0.1)
        assert list(keep) == [0, 1]

    def test_alpha_one_keeps_argmax_only(self):
        keep = plausible_set(dist_from_probs([0.6, 0.3, 0.1]), alpha=1.0)
        assert list(keep) == [0]

    def test_uniform_keeps_everything(self):
        v = 40
        keep = plausible_set(dist_from_probs([1.0 / v] * v), alpha=1.0)
        assert len(keep) == v

    def test_always_contains_argmax(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            dist = TokenDist(rng.normal(scale=4, size=50))
            for alpha in (0.01, 0.1, 0.5, 1.0):
                assert dist.argmax() in plausible_set(dist, alpha)

    def test_alpha_range_enforced(self):
        with pytest.raises(ValueError):
            plausible_set(dist_from_probs([1.0]), alpha=0.0)


class TestCdScore:
    def test_lambda_zero_is_expert_log_probs(self):
        expert = dist_from_probs([0.7, 0.2, 0.1])
        amateur = dist_from_probs([0.1, 0.2, 0.7])
        scores = cd_score(expert, amateur, 0.0, [0, 1, 2])
        np.testing.assert_allclose(scores, np.log(expert.probs.astype(np.float64)), atol=1e-6)
        assert int(np.argmax(scores)) == expert.argmax()

    def test_identical_amateur_scales_by_one_minus_lambda(self):
        expert = dist_from_probs([0.5, 0.3, 0.2])
        scores = cd_score(expert, expert, 0.5, [0, 1, 2])
        np.testing.assert_allclose(
            scores, 0.5 * np.log(expert.probs.astype(np.float64)), atol=1e-6
        )
        assert int(np.argmax(scores)) == expert.argmax()

    def test_two_option_arithmetic(self):
        # direct arithmetic: [log(0.7/0.6), log(0.3/0.4)]
        expert = dist_from_probs([0.7, 0.3])
        amateur = dist_from_probs([0.6, 0.4])
        scores = cd_score(expert, amateur, 1.0, [0, 1])
        np.testing.assert_allclose(
            scores,
            [math.log(0.7 / 0.6), math.log(0.3 / 0.4)],
            atol=1e-6,
        )
        assert int(np.argmax(scores)) == 0

    def test_zero_amateur_probability_stays_finite(self):
        expert = dist_from_probs([0.9, 0.1])
        amateur = TokenDist(np.array([0.0, -1e4], dtype=np.float32))
        scores = cd_score(expert, amateur, 1.0, [0, 1])
        assert np.isfinite(scores).all()

    def test_empty_candidates_rejected(self):
        d = dist_from_probs([1.0])
        with pytest.raises(ValueError, match="non-empty"):
            cd_score(d, d, 0.5, [])


class TestRepetitionPenalty:
    def test_theta_one_is_identity(self):
        logits = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        out = apply_repetition_penalty(logits, [0, 1, 2], 1.0)
        assert np.array_equal(out, logits)

    def test_positive_logit_divided(self):
        out = apply_repetition_penalty(np.array([2.4, 0.5]), [0], 1.2)
        np.testing.assert_allclose(out[0], 2.0, atol=1e-6)
        np.testing.assert_allclose(out[1], 0.5)

    def test_negative_logit_multiplied(self):
        out = apply_repetition_penalty(np.array([-1.0, 0.5]), [0], 1.2)
        np.testing.assert_allclose(out[0], -1.2, atol=1e-6)

    def test_untouched_tokens_unchanged(self):
        logits = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        out = apply_repetition_penalty(logits, [1], 1.5)
        assert out[0] == logits[0] and out[2] == logits[2]

    def test_theta_below_one_rejected(self):
        with pytest.raises(ValueError):
            apply_repetition_penalty(np.zeros(3), [0], 0.9)


class TestSelectDolaLayer:
    def test_layer_equal_to_final_never_selected_unless_all_zero(self):
        final = dist_from_probs([0.7, 0.2, 0.1])
        other = dist_from_probs([0.1, 0.2, 0.7])
        picked = select_dola_layer([final, other], final, layers=[4, 5])
        assert picked == 5

    def test_all_equal_ties_to_lowest_layer(self):
        final = dist_from_probs([0.5, 0.5])
        picked = select_dola_layer([final, final, final], final, layers=[2, 3, 4])
        assert picked == 2

    def test_matches_brute_force_argmax(self):
        rng = np.random.default_rng(22)
        final = TokenDist(rng.normal(size=30))
        bucket = [TokenDist(rng.normal(size=30)) for _ in range(6)]
        expected = max(
            range(6), key=lambda i: jsd(bucket[i].probs, final.probs)
        )
        assert select_dola_layer(bucket, final) == expected

    def test_bucket_ranges(self):
        assert dola_bucket_layers(8, "lower") == [0, 1, 2, 3]
        assert dola_bucket_layers(8, "upper") == [4, 5, 6]
        assert dola_bucket_layers(32, "upper") == list(range(16, 31))


class TestGenerate:
    def test_prunecd_lambda_zero_equals_greedy(self, tiny_model, byte_tok):
        prompt = "degenerate lambda"
        greedy, _ = generate(tiny_model, byte_tok, prompt,
                             DecodeConfig(mode="greedy", max_new_tokens=24))
        for prune in ([1], [2, 3, 5], [0, 7]):
            cd, _ = generate(
                tiny_model, byte_tok, prompt,
                DecodeConfig(mode="prunecd", lam=0.0,
                             prune_set=LayerSet.of(prune), max_new_tokens=24),
            )
            assert cd == greedy

    def test_empty_prune_set_any_lambda_below_one_equals_greedy(self, tiny_model, byte_tok):
        prompt = "degenerate prune set"
        greedy, _ = generate(tiny_model, byte_tok, prompt,
                             DecodeConfig(mode="greedy", max_new_tokens=24))
        cd, _ = generate(
            tiny_model, byte_tok, prompt,
            DecodeConfig(mode="prunecd", lam=0.3,
                         prune_set=LayerSet.empty(), max_new_tokens=24),
        )
        assert cd == greedy

    def test_batched_prunecd_equals_unbatched_oracle(self, tiny_model, byte_tok):
        prompt_ids = byte_tok.encode("two-pass oracle")
        prune = LayerSet.of([2, 3, 5])
        config = DecodeConfig(mode="prunecd", lam=0.4, prune_set=prune, max_new_tokens=24)
        batched, _ = generate_ids(tiny_model, prompt_ids, config)
        oracle, _ = generate_ids(
            tiny_model, prompt_ids, config,
            source=UnbatchedPruneCdSource(tiny_model, prune),
        )
        assert batched == oracle

    def test_chosen_always_in_plausible_set(self, tiny_model, byte_tok):
        config = DecodeConfig(mode="prunecd", lam=1.0, alpha=0.3,
                              prune_set=LayerSet.of([1, 6]), max_new_tokens=16)
        _, traces = generate(tiny_model, byte_tok, "membership", config)
        for t in traces:
            assert t.chosen in t.plausible_set
            assert t.expert.argmax() in t.plausible_set

    def test_trace_amateur_matches_subset_oracle(self, tiny_model, byte_tok):
        prune = LayerSet.of([2, 5])
        config = DecodeConfig(mode="prunecd", lam=0.5, prune_set=prune, max_new_tokens=6)
        prompt_ids = byte_tok.encode("trace oracle")
        generated, traces = generate_ids(tiny_model, prompt_ids, config)
        amateur_layers = tiny_model.full_layers().difference(prune)
        tokens = list(prompt_ids)
        for trace in traces:
            expected = tiny_model.forward_subset(tokens, amateur_layers)
            np.testing.assert_allclose(
                trace.amateur.logits, expected.logits, atol=1e-5
            )
            tokens.append(trace.chosen)

    def test_dola_reselects_layer_per_token(self, tiny_model, byte_tok):
        config = DecodeConfig(mode="dola", lam=1.0, max_new_tokens=12)
        _, traces = generate(tiny_model, byte_tok, "dola run", config)
        layers = dola_bucket_layers(tiny_model.n_layers, "upper")
        assert all(t.dola_exit_layer in layers for t in traces)

    def test_alpha_one_equals_greedy(self, tiny_model, byte_tok):
        prompt = "alpha gate"
        greedy, _ = generate(tiny_model, byte_tok, prompt,
                             DecodeConfig(mode="greedy", max_new_tokens=20))
        gated, _ = generate(
            tiny_model, byte_tok, prompt,
            DecodeConfig(mode="prunecd", lam=2.0, alpha=1.0,
                         prune_set=LayerSet.of([2, 3]), max_new_tokens=20),
        )
        assert gated == greedy

    def test_determinism(self, tiny_model, byte_tok):
        config = DecodeConfig(mode="dola", lam=0.7, max_new_tokens=16)
        a, ta = generate(tiny_model, byte_tok, "identical runs", config)
        b, tb = generate(tiny_model, byte_tok, "identical runs", config)
        assert a == b
        assert [t.chosen for t in ta] == [t.chosen for t in tb]

    def test_stop_ids_end_generation(self, tiny_model, byte_tok):
        base, _ = generate(tiny_model, byte_tok, "stopper",
                           DecodeConfig(mode="greedy", max_new_tokens=12))
        first = byte_tok.encode(base, add_bos=False)[0]
        stopped_ids, traces = generate_ids(
            tiny_model, byte_tok.encode("stopper"),
            DecodeConfig(mode="greedy", max_new_tokens=12,
                         stop_ids=frozenset([first])),
        )
        assert stopped_ids == []
        assert traces[0].chosen == first

    def test_budget_capacity_guard(self, tiny_model, byte_tok):
        with pytest.raises(Exception, match="max_seq"):
            generate(tiny_model, byte_tok, "x" * 500,
                     DecodeConfig(mode="greedy", max_new_tokens=100))

    def test_mode_validation(self):
        with pytest.raises(ValueError, match="prune_set"):
            DecodeConfig(mode="prunecd")
        with pytest.raises(ValueError, match="mode"):
            DecodeConfig(mode="beam")
        with pytest.raises(ValueError, match="alpha"):
            DecodeConfig(alpha=0.0)

    def test_selection_invariance_at_lambda_zero(self, tiny_model, byte_tok):
        # constant logit shifts and shared temperature scaling leave the
        # chosen token unchanged when only the expert ranking matters
        from prunecd.decoding import decode_step

        config = DecodeConfig(mode="greedy", rep_penalty=1.0, max_new_tokens=1)
        expert = tiny_model.forward_subset(
            byte_tok.encode("invariance"), tiny_model.full_layers()
        )
        base = decode_step(expert, None, config, [], 0).chosen
        for c in (-7.5, 3.0, 123.0):
            shifted = TokenDist(expert.logits + np.float32(c))
            assert decode_step(shifted, None, config, [], 0).chosen == base
        for scale in (0.25, 4.0):
            scaled = TokenDist(expert.logits * np.float32(scale))
            assert decode_step(scaled, None, config, [], 0).chosen == base

    def test_contrasting_final_with_itself_degenerates_to_greedy(
        self, tiny_model, byte_tok
    ):
        # a bucket forced to the last layer contrasts the final distribution
        # with itself; for lam < 1 that is a (1 - lam) rescaling of greedy
        class FinalOnlySource:
            def __init__(self, model):
                self.model = model
                self.cache = model.new_cache()

            def step(self, tokens):
                final = self.model.forward_subset(
                    tokens, self.model.full_layers(), self.cache
                )
                return final, final, self.model.n_layers - 1

        prompt_ids = byte_tok.encode("forced bucket")
        greedy, _ = generate_ids(
            tiny_model, prompt_ids, DecodeConfig(mode="greedy", max_new_tokens=16)
        )
        degenerate, traces = generate_ids(
            tiny_model, prompt_ids,
            DecodeConfig(mode="dola", lam=0.6, max_new_tokens=16),
            source=FinalOnlySource(tiny_model),
        )
        assert degenerate == greedy
        assert all(t.dola_exit_layer == tiny_model.n_layers - 1 for t in traces)

    def test_trace_round_trip(self, tiny_model, byte_tok):
        config = DecodeConfig(mode="prunecd", lam=0.2,
                              prune_set=LayerSet.of([4]), max_new_tokens=4)
        _, traces = generate(tiny_model, byte_tok, "jsonl", config)
        buf = io.StringIO()
        write_traces(traces, buf)
        lines = buf.getvalue().splitlines()
        assert len(lines) == len(traces)
        for line, trace in zip(lines, traces):
            doc = json.loads(line)
            assert doc["chosen"] == trace.chosen
            np.testing.assert_allclose(
                doc["expert_logits"], trace.expert.logits, atol=1e-6
            )
            assert doc["plausible_set"] == [int(i) for i in trace.plausible_set]
