import math

import numpy as np
import pytest
import torch

from tdlm.model import Denoiser, DenoiserConfig, OracleDenoiser
from tdlm.sampler import (GenerationConfig, GenerationError, allocate_steps,
                          generate, trace, write_trace)
from tdlm.schedule import NoiseSchedule
from tdlm.tree import complete_tree


class TestAllocateSteps:
    def test_balanced_even(self):
        assert allocate_steps(512, 2).tolist() == [256, 256]
        assert allocate_steps(8, 4).tolist() == [2, 2, 2, 2]

    def test_balanced_remainder_to_lowest_levels(self):
        # list is ordered top level first; the remainder lands at the end
        assert allocate_steps(10, 4).tolist() == [2, 2, 3, 3]

    def test_custom_accepted(self):
        assert allocate_steps(512, 2, [448, 64]).tolist() == [448, 64]

    def test_budget_too_small(self):
        with pytest.raises(GenerationError):
            allocate_steps(3, 4)

    def test_custom_invalid(self):
        with pytest.raises(GenerationError):
            allocate_steps(512, 2, [400, 64])
        with pytest.raises(GenerationError):
            allocate_steps(512, 2, [512, 0])


class TestOracleGeneration:
    def test_reproduces_target_any_allocation(self):
        tree = complete_tree(4, 2)
        sched = NoiseSchedule(H=2)
        rng = np.random.default_rng(0)
        target = rng.integers(0, 16, size=(3, 24))
        oracle = OracleDenoiser(tree, target)
        for allocation in ("balanced", [6, 2], [2, 6], [7, 1]):
            cfg = GenerationConfig(total_steps=8, S=24, allocation=allocation, seed=5)
            out = generate(oracle, tree, sched, cfg, rows=3)
            np.testing.assert_array_equal(out, target)

    def test_single_step_per_level(self):
        tree = complete_tree(2, 4)
        sched = NoiseSchedule(H=4)
        target = np.random.default_rng(1).integers(0, 16, size=(2, 8))
        cfg = GenerationConfig(total_steps=4, S=8, allocation=[1, 1, 1, 1], seed=0)
        out = generate(OracleDenoiser(tree, target), tree, sched, cfg, rows=2)
        np.testing.assert_array_equal(out, target)

    def test_reverse_matches_forward_marginals(self):
        # with exact predictions the reverse process reproduces the forward
        # occupancy: at time t a fraction alpha(t) of positions sit at the
        # lower height of the active level
        tree = complete_tree(2, 2)
        sched = NoiseSchedule(H=2)
        rows, S = 50, 2048
        target = np.random.default_rng(3).integers(0, 4, size=(rows, S))
        cfg = GenerationConfig(total_steps=16, S=S, seed=11)
        records = trace(OracleDenoiser(tree, target), tree, sched, cfg, rows=rows)
        n = rows * S
        for rec in records:
            t = rec.t
            h = sched.level_of(t) if t > 0 else 0
            _, a, _ = sched.alpha(t)
            # after the step down to time t, positions at the lower height
            frac = rec.height_histogram[h] / n
            if t in (0.0, 1.0) or abs(a - 1.0) < 1e-12:
                continue
            sigma = math.sqrt(a * (1 - a) / n)
            assert abs(frac - a) <= 4 * sigma + 1e-9, (t, frac, a)


class TestTraceInvariants:
    def _trace(self, rows=2):
        tree = complete_tree(3, 3)
        sched = NoiseSchedule(H=3)
        target = np.random.default_rng(0).integers(0, 27, size=(rows, 18))
        cfg = GenerationConfig(total_steps=9, S=18, seed=4)
        return tree, trace(OracleDenoiser(tree, target), tree, sched, cfg, rows=rows)

    def test_histogram_sums(self):
        tree, records = self._trace(rows=2)
        for rec in records:
            assert rec.height_histogram.sum() == 2 * 18

    def test_top_count_monotone_and_final_resolved(self):
        tree, records = self._trace()
        tops = [r.height_histogram[tree.tree_height] for r in records]
        assert all(a >= b for a, b in zip(tops, tops[1:]))
        final = records[-1].height_histogram
        assert final[0] == final.sum()

    def test_ancestry_consistency(self):
        tree, records = self._trace(rows=3)
        root = int(np.flatnonzero(tree.parent < 0)[0])
        state = np.full((3, 18), root)
        for rec in records:
            for row, pos, node in rec.resolutions:
                assert int(tree.parent[node]) == int(state[row, pos])
                state[row, pos] = node

    def test_write_trace_format(self, tmp_path):
        tree, records = self._trace()
        path = tmp_path / "trace.txt"
        write_trace(records, path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(records)
        assert lines[0].startswith("step 0 t ")
        assert "height_histogram" in lines[0]


class TestModelGeneration:
    def _model_tree(self):
        tree = complete_tree(4, 2)
        sched = NoiseSchedule(H=2)
        cfg = DenoiserConfig(node_vocab=tree.node_count, K=4, d=16, layers=1,
                             heads=2, S=12)
        return tree, sched, Denoiser(cfg, seed=0).double()

    def test_deterministic_given_seed(self):
        tree, sched, model = self._model_tree()
        cfg = GenerationConfig(total_steps=6, S=12, seed=9)
        a = generate(model, tree, sched, cfg, rows=2)
        b = generate(model, tree, sched, cfg, rows=2)
        np.testing.assert_array_equal(a, b)
        assert (a >= 0).all() and (a < 16).all()

    def test_seed_changes_output(self):
        tree, sched, model = self._model_tree()
        a = generate(model, tree, sched, GenerationConfig(6, 12, seed=1), rows=2)
        b = generate(model, tree, sched, GenerationConfig(6, 12, seed=2), rows=2)
        assert not np.array_equal(a, b)

    def test_temperature_zero_limit_greedy(self):
        tree, sched, model = self._model_tree()
        cfg = GenerationConfig(total_steps=6, S=12, temperature=1e-6, seed=0)
        a = generate(model, tree, sched, cfg, rows=1)
        b = generate(model, tree, sched, cfg, rows=1)
        np.testing.assert_array_equal(a, b)

    def test_nonfinite_logits_abort(self):
        tree = complete_tree(2, 2)
        sched = NoiseSchedule(H=2)

        class BadModel:
            def __call__(self, z, t):
                return torch.full((*z.shape, 2), float("nan"), dtype=torch.float64)

        with pytest.raises(GenerationError, match="non-finite"):
            generate(BadModel(), tree, sched, GenerationConfig(4, 8, seed=0))
