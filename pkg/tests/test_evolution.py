"""Fitness scaling, genetic operators, search loop and multi-objective measures."""

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autospikformer import evolution as evo
from autospikformer.space import (
    CandidateArch,
    CandidateSnn,
    baseline_candidate,
    is_valid,
    make_space,
    parse_candidate,
)
from autospikformer.tensor import Rng

S_S = make_space("s_s")
S_TS = make_space("s_ts")
S_TL = make_space("s_tl")


def genes(c):
    """Gene positions compared by mutation; trailing blocks beyond the shorter
    depth are not separate genes."""
    if isinstance(c, CandidateSnn):
        return dict(enumerate(c.to_tuple()))
    out = {"depth": c.depth, "time_step": c.time_step, "embed": c.embed_dim}
    for name, col in (("mlp", c.mlp_ratio_per_layer), ("head", c.head_num_per_layer),
                      ("u_th", c.u_th_per_layer), ("tau", c.tau_per_layer)):
        out.update({(name, i): v for i, v in enumerate(col)})
    return out


def changed_genes(a, b):
    ga, gb = genes(a), genes(b)
    return [k for k in ga if k in gb and ga[k] != gb[k]]


def brute_front(points):
    return [p for p in points if not any(evo.dominates(q, p) for q in points)]


def pair_tau(x, y):
    n = len(x)
    conc = disc = tx = ty = 0
    for i, j in itertools.combinations(range(n), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        if dx == 0 and dy == 0:
            tx += 1
            ty += 1
        elif dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif dx * dy > 0:
            conc += 1
        else:
            disc += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    return math.nan if denom == 0 else (conc - disc) / denom


class TestScaling:
    def test_examples(self):
        assert evo.minmax_scale([1, 2, 3]) == [0.0, 0.5, 1.0]
        assert evo.minmax_scale([5, 5, 5]) == [0.5, 0.5, 0.5]

    def test_empty(self):
        with pytest.raises(ValueError):
            evo.minmax_scale([])

    @settings(max_examples=200, deadline=None)
    @given(xs=st.lists(st.integers(-1000, 1000), min_size=1, max_size=30),
           a=st.integers(1, 64), b=st.integers(-1000, 1000))
    def test_affine_invariant(self, xs, a, b):
        # integer inputs and power-free factors keep both sides exact
        assert evo.minmax_scale([a * x + b for x in xs]) == evo.minmax_scale(xs)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
    def test_range(self, xs):
        assert all(0.0 <= v <= 1.0 for v in evo.minmax_scale(xs))


class TestFitness:
    def test_corners(self):
        assert evo.f_aeb(1.0, 0.0, 0.5) == 1.0
        assert evo.f_aeb(0.0, 1.0, 0.5) == 0.0

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            evo.f_aeb(0.5, 0.5, 1.5)

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(0, 1), e=st.floats(0, 1), da=st.floats(0, 1), alpha=st.floats(0, 1))
    def test_monotone(self, a, e, da, alpha):
        assert evo.f_aeb(min(a + da, 1.0), e, alpha) >= evo.f_aeb(a, e, alpha)
        assert evo.f_aeb(a, min(e + da, 1.0), alpha) <= evo.f_aeb(a, e, alpha)

    def test_alpha_zero_ranks_by_accuracy(self, np_rng):
        recs = [evo.FitnessRecord(S_S.largest(), float(a), float(e))
                for a, e in np_rng.random((40, 2))]
        ranked = evo.rescale(recs, 0.0)
        order = evo.fitness_order(ranked)
        assert order == sorted(range(40), key=lambda i: (-recs[i].accuracy, i))

    def test_record_fitness_recomputable(self, np_rng):
        recs = evo.rescale([evo.FitnessRecord(S_S.largest(), float(a), float(e))
                            for a, e in np_rng.random((20, 2))], 0.3)
        for r in recs:
            assert 0 <= r.scaled_acc <= 1 and 0 <= r.scaled_energy <= 1
            assert r.fitness == evo.f_aeb(r.scaled_acc, r.scaled_energy, 0.3)


class TestMutate:
    def test_zero_probability_is_identity(self):
        rng = Rng(0)
        for _ in range(50):
            c = evo.random_candidate(S_TS, rng)
            assert evo.mutate(c, S_TS, rng, 0.0) is c

    def test_tau_step_is_a_legal_mutation(self):
        a = parse_candidate("(1.0, 1.0, 1.0, 1.0, 1.25, 2, 2, 2, 4)", S_S)
        b = parse_candidate("(1.0, 1.0, 1.0, 1.0, 2.5, 2, 2, 2, 4)", S_S)
        seen = set()
        rng = Rng(1)
        for _ in range(3000):
            seen.add(evo.mutate(a, S_S, rng, 1.0))
        assert b in seen

    @pytest.mark.parametrize("space", [S_S, S_TS, S_TL], ids=["s_s", "s_ts", "s_tl"])
    def test_at_most_one_gene_and_valid(self, space):
        rng = Rng(2)
        counts = []
        for _ in range(1000):
            c = evo.random_candidate(space, rng)
            m = evo.mutate(c, space, rng, 0.5)
            assert is_valid(m, space)
            counts.append(len(changed_genes(c, m)))
        assert max(counts) <= 1 and counts.count(1) > 300

    def test_forced_mutation_always_changes(self):
        rng = Rng(3)
        for _ in range(300):
            c = evo.random_candidate(S_TS, rng)
            assert evo.mutate(c, S_TS, rng, 1.0) != c

    def test_depth_growth_keeps_prefix(self):
        rng = Rng(4)
        c = CandidateArch(2, (3.0, 3.2), (6, 12), (1.0, 1.2), (2.0, 3.0), 4, 348)
        for _ in range(400):
            m = evo.mutate(c, S_TS, rng, 1.0)
            if m.depth != c.depth:
                assert m.mlp_ratio_per_layer[:2] == c.mlp_ratio_per_layer
                assert m.tau_per_layer[:2] == c.tau_per_layer
                assert m.embed_dim == c.embed_dim


class TestCrossover:
    def test_identical_parents(self):
        rng = Rng(5)
        for _ in range(50):
            a = evo.random_candidate(S_TS, rng)
            assert evo.crossover(a, a, rng) == a

    @pytest.mark.parametrize("space", [S_S, S_TS, S_TL], ids=["s_s", "s_ts", "s_tl"])
    def test_genes_come_from_a_parent(self, space):
        rng = Rng(6)
        for _ in range(1000):
            a, b = evo.random_candidate(space, rng), evo.random_candidate(space, rng)
            child = evo.crossover(a, b, rng)
            assert is_valid(child, space)
            ga, gb, gc = genes(a), genes(b), genes(child)
            for k, v in gc.items():
                assert v in (ga.get(k), gb.get(k)), k

    def test_threshold_swap_reachable(self):
        a = parse_candidate("(1.6, 0.6, 0.8, 2.0, 10, 10, 10, 2, 2)", S_S)
        b = parse_candidate("(1.0, 1.0, 1.0, 1.0, 2, 2, 2, 2, 4)", S_S)
        want = CandidateSnn(b.u_th_per_block, a.tau_per_block, a.time_step)
        rng = Rng(7)
        assert any(evo.crossover(a, b, rng) == want for _ in range(5000))

    def test_mixed_spaces(self):
        with pytest.raises(TypeError):
            evo.crossover(baseline_candidate(S_S), S_TS.largest(), Rng(0))


class TestPareto:
    def test_single_and_strict(self):
        assert evo.pareto_front([(1.0, 0.5)]) == [(1.0, 0.5)]
        assert evo.pareto_front([(2.0, 0.5), (1.0, 0.6)]) == [(1.0, 0.6)]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        # coarse grid forces ties and duplicates
        pts = [tuple(map(float, p)) for p in rng.integers(0, 12, size=(200, 2))]
        front = evo.pareto_front(pts)
        assert sorted(front) == sorted(brute_front(pts))
        assert [p[0] for p in front] == sorted(p[0] for p in front)

    def test_records(self):
        recs = [evo.FitnessRecord(S_S.largest(), a, e) for a, e in ((0.9, 3.0), (0.8, 1.0), (0.7, 2.0))]
        assert [r.accuracy for r in evo.pareto_front(recs)] == [0.8, 0.9]


class TestKendall:
    def test_examples(self):
        assert evo.kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
        assert evo.kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
        assert evo.kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_pair_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 6, 40).tolist()
        y = rng.integers(0, 6, 40).tolist()
        assert evo.kendall_tau(x, y) == pair_tau(x, y)

    def test_errors(self):
        with pytest.raises(ValueError):
            evo.kendall_tau([1, 2], [1])
        with pytest.raises(ValueError):
            evo.kendall_tau([1], [1])
        assert math.isnan(evo.kendall_tau([1, 1], [1, 2]))


class TestHypervolumeCoverage:
    def test_staircase_area(self):
        pts = [(1.0, 0.5), (2.0, 0.8)]
        # [1,2)x(0,0.5] plus [2,4)x(0,0.8]
        assert evo.hypervolume(pts, (4.0, 0.0)) == pytest.approx(1 * 0.5 + 2 * 0.8)

    def test_dominated_points_add_nothing(self):
        pts = [(1.0, 0.9)]
        assert evo.hypervolume(pts + [(2.0, 0.5)], (3.0, 0.0)) == evo.hypervolume(pts, (3.0, 0.0))

    def test_points_outside_reference(self):
        assert evo.hypervolume([(5.0, 0.9)], (4.0, 0.0)) == 0.0

    def test_coverage(self):
        a = [(1.0, 0.9)]
        b = [(1.0, 0.9), (2.0, 0.5), (0.5, 0.2)]
        assert evo.coverage(a, b) == pytest.approx(2 / 3)
        with pytest.raises(ValueError):
            evo.coverage(a, [])


class TestEvolve:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            evo.EvoConfig(population_size=5, parent_count=6)
        with pytest.raises(ValueError):
            evo.EvoConfig(mutation_prob=1.2)
        with pytest.raises(ValueError, match="bogus"):
            evo.EvoConfig.from_dict({"bogus": 1})

    def test_budget_distinct_valid_and_deterministic(self):
        ev = evo.AnalyticEvaluator(S_TS)
        cfg = evo.EvoConfig(population_size=20, generations=10, parent_count=5, seed=3, total_sample_budget=130)
        a = evo.evolve(S_TS, ev, cfg)
        b = evo.evolve(S_TS, ev, cfg)
        assert len(a.records) == 130
        assert len({evo.candidate_key(r.candidate) for r in a.records}) == 130
        assert all(is_valid(r.candidate, S_TS) for r in a.records)
        assert [r.to_json(3) for r in a.records] == [r.to_json(3) for r in b.records]
        assert max(r.generation for r in a.records) == 6

    def test_elitist_best_never_worsens_in_raw_terms(self):
        ev = evo.AnalyticEvaluator(S_S)
        res = evo.evolve(S_S, ev, evo.EvoConfig(population_size=20, generations=8, seed=1))
        assert len(res.best_per_generation) == 8
        assert res.top(1)[0] == res.best_per_generation[-1]

    def test_small_space_exhaustion_uses_dedup_fallback(self):
        space = make_space("toy_t")
        calls = []

        def ev(c):
            calls.append(c)
            return 0.5, 1.0

        res = evo.evolve(space, ev, evo.EvoConfig(population_size=10, generations=6, parent_count=3,
                                                  mutation_prob=0.0, crossover_prob=0.0, seed=0))
        assert len(res.records) == 60 and len(calls) == 60
        assert len({evo.candidate_key(r.candidate) for r in res.records}) == 60

    def test_evaluator_failure_names_candidate(self):
        def ev(c):
            raise RuntimeError("boom")

        with pytest.raises(evo.SearchError, match="boom") as err:
            evo.evolve(S_S, ev, evo.EvoConfig(population_size=3, parent_count=1, generations=1))
        assert err.value.candidate is not None

    def test_non_finite_result(self):
        with pytest.raises(evo.SearchError, match="non-finite"):
            evo.evolve(S_S, lambda c: (float("nan"), 1.0), evo.EvoConfig(population_size=2, parent_count=1))

    def test_trajectory_invariant_under_affine_energy(self):
        base = evo.AnalyticEvaluator(S_S)

        def scaled(c):
            acc, e = base(c)
            return acc, 1e3 * e + 7.0

        cfg = evo.EvoConfig(population_size=15, generations=5, parent_count=4, seed=9)
        a = evo.evolve(S_S, base, cfg)
        b = evo.evolve(S_S, scaled, cfg)
        assert [r.candidate for r in a.records] == [r.candidate for r in b.records]


class TestRandomSearch:
    def test_distinct_valid(self):
        recs = evo.random_search(S_S, evo.AnalyticEvaluator(S_S), 50, Rng(0))
        assert len(recs) == 50 and all(is_valid(r.candidate, S_S) for r in recs)
        assert len({evo.candidate_key(r.candidate) for r in recs}) == 50

    def test_single(self):
        assert len(evo.random_search(S_S, evo.AnalyticEvaluator(S_S), 1, Rng(0))) == 1

    def test_bad_n(self):
        with pytest.raises(ValueError):
            evo.random_search(S_S, evo.AnalyticEvaluator(S_S), 0, Rng(0))


class TestRecordsIo:
    def test_round_trip_and_fields(self, tmp_path):
        recs = evo.rescale([evo.FitnessRecord(S_TS.largest(), 0.7, 1e-6, generation=2, fr=0.1),
                            evo.FitnessRecord(baseline_candidate(S_TS), 0.5, 2e-7)], 0.5)
        path = tmp_path / "results.jsonl"
        evo.write_records(path, recs, seed=4)
        first = json.loads(path.read_text().splitlines()[0])
        assert {"candidate", "accuracy", "energy_joules", "scaled_acc", "scaled_energy",
                "fitness", "generation", "seed"} <= set(first)
        assert first["seed"] == 4
        assert evo.read_records(path, S_TS) == recs

    def test_bad_line(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text('{"candidate": "(1, 2)"}\n')
        with pytest.raises(ValueError, match=":1:"):
            evo.read_records(path)


class TestAnalyticEvaluator:
    def test_energy_is_model_energy(self):
        from autospikformer.energy import model_energy
        ev = evo.AnalyticEvaluator(S_TS)
        arch = S_TS.largest()
        acc, e = ev(arch)
        assert 0 <= acc <= 1
        assert e == model_energy(arch, ev.fr_trace(arch), arch.time_step, strict=True).total_energy

    def test_higher_threshold_lowers_energy(self):
        ev = evo.AnalyticEvaluator(S_S)
        lo = parse_candidate("(0.6, 0.6, 0.6, 0.6, 5, 5, 5, 5, 4)", S_S)
        hi = parse_candidate("(2.0, 2.0, 2.0, 2.0, 5, 5, 5, 5, 4)", S_S)
        assert ev(hi)[1] < ev(lo)[1]
