import itertools
import math

import numpy as np
import pytest

from m3h.errors import CapacityError, ContractError, DomainError
from m3h.tim import (
    CachedOracle,
    LookupOracle,
    _mean_gain,
    greedy_select,
    heatmap_csv,
    read_heatmap_csv,
    task_set_seed,
    tim_csv,
    tim_exact,
    tim_matrix,
    tim_pairwise,
    tim_sampled,
    trace_csv,
)


def all_subsets(items):
    items = list(items)
    return [frozenset(c) for r in range(len(items) + 1) for c in itertools.combinations(items, r)]


def random_oracle(tasks, rng):
    table = {}
    for s in all_subsets(tasks):
        for t in sorted(s, key=str):
            table[(s, t)] = float(rng.uniform(0.5, 0.9))
    return LookupOracle(table)


def constant_oracle(tasks, value=0.7):
    return LookupOracle({(s, t): value for s in all_subsets(tasks) for t in s})


M3 = LookupOracle(
    {
        ((1,), 1): 0.70,
        ((1, 2), 1): 0.74,
        ((1, 3), 1): 0.71,
        ((1, 2, 3), 1): 0.77,
    }
)


# ---------------------------------------------------------------------------
# exact / pairwise


def test_exact_m3_example():
    res = tim_exact(M3, 1, 2, [1, 2, 3])
    assert res.delta == ((0.74 - 0.70) + (0.77 - 0.71)) / 2
    assert res.delta == pytest.approx(0.05, abs=1e-15)
    assert (res.mode, res.n_subsets) == ("exact", 2)


def test_exact_two_tasks_equals_pairwise():
    rng = np.random.default_rng(0)
    for _ in range(20):
        oracle = random_oracle(["a", "b"], rng)
        for i, j in (("a", "b"), ("b", "a")):
            assert tim_exact(oracle, i, j, ["a", "b"]).delta == tim_pairwise(oracle, i, j).delta
    assert tim_exact(oracle, "a", "b", ["a", "b"]).n_subsets == 1


def test_exact_subset_count_and_constant_oracle():
    tasks = list("abcde")
    res = tim_exact(constant_oracle(tasks), "a", "b", tasks)
    assert res.delta == 0.0 and res.n_subsets == 2 ** 3


def test_exact_capacity_guard():
    tasks = [f"t{k}" for k in range(13)]
    with pytest.raises(CapacityError, match="sampled"):
        tim_exact(lambda s, t: 0.0, "t0", "t1", tasks)
    with pytest.raises(DomainError):
        tim_exact(M3, 1, 1, [1, 2, 3])
    with pytest.raises(DomainError):
        tim_exact(M3, 1, 9, [1, 2, 3])


def test_exact_is_linear_in_the_oracle():
    rng = np.random.default_rng(1)
    tasks = list("abcd")
    f, g = random_oracle(tasks, rng), random_oracle(tasks, rng)
    a, b = 0.3, -1.7
    mix = LookupOracle({k: a * f.table[k] + b * g.table[k] for k in f.table})
    for i, j in itertools.permutations(tasks, 2):
        lhs = tim_exact(mix, i, j, tasks).delta
        rhs = a * tim_exact(f, i, j, tasks).delta + b * tim_exact(g, i, j, tasks).delta
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_pairwise_examples():
    oracle = LookupOracle({(("i",), "i"): 0.6, (("i", "j"), "i"): 0.65, (("j",), "j"): 0.5, (("i", "j"), "j"): 0.45})
    res = tim_pairwise(oracle, "i", "j")
    assert res.delta == pytest.approx(0.05, abs=1e-15)
    assert (res.mode, res.n_subsets) == ("pairwise", 1)
    # different measured task, different answer
    assert tim_pairwise(oracle, "j", "i").delta == pytest.approx(-0.05, abs=1e-15)


# ---------------------------------------------------------------------------
# sampled


def test_sampled_full_coverage_equals_exact():
    rng = np.random.default_rng(2)
    tasks = list("abcd")
    oracle = random_oracle(tasks, rng)
    rest = ["c", "d"]
    exact = tim_exact(oracle, "a", "b", tasks).delta
    covered, count = _mean_gain(oracle, "a", "b", all_subsets(rest))
    assert count == 4
    assert covered == pytest.approx(exact, abs=1e-15)


def test_sampled_constant_oracle_and_metadata():
    tasks = list("abcd")
    for seed in range(5):
        res = tim_sampled(constant_oracle(tasks), "a", "b", tasks, 16, seed)
        assert res.delta == 0.0
        assert (res.mode, res.n_subsets, res.seed) == ("sampled", 16, seed)
    with pytest.raises(DomainError):
        tim_sampled(constant_oracle(tasks), "a", "b", tasks, 0)


def test_sampled_m4_within_three_standard_errors():
    rng = np.random.default_rng(3)
    tasks = list("abcd")
    oracle = random_oracle(tasks, rng)
    exact = tim_exact(oracle, "a", "b", tasks).delta
    gains = [oracle(frozenset(s) | {"a", "b"}, "a") - oracle(frozenset(s) | {"a"}, "a") for s in all_subsets("cd")]
    se = np.std(gains) / math.sqrt(4096)
    est = tim_sampled(oracle, "a", "b", tasks, 4096, seed=11).delta
    assert abs(est - exact) <= 3 * se


def test_sampled_is_seeded():
    rng = np.random.default_rng(4)
    tasks = list("abcde")
    oracle = random_oracle(tasks, rng)
    assert tim_sampled(oracle, "a", "b", tasks, 7, 5) == tim_sampled(oracle, "a", "b", tasks, 7, 5)


# ---------------------------------------------------------------------------
# matrix


class CountingOracle:
    def __init__(self, inner):
        self.inner = inner
        self.queries = []

    def __call__(self, s, t):
        self.queries.append((frozenset(s), t))
        return self.inner(s, t)


def test_matrix_pairwise_call_count():
    rng = np.random.default_rng(5)
    tasks = list("abcd")
    counting = CountingOracle(random_oracle(tasks, rng))
    matrix, results = tim_matrix(counting, tasks, "pairwise")
    M = len(tasks)
    assert len(counting.queries) == M * (M - 1) + M
    assert len(set(counting.queries)) == len(counting.queries)
    assert np.all(np.diag(matrix) == 0)
    assert len(results) == M * (M - 1)


def test_matrix_exact_never_repeats_a_query():
    rng = np.random.default_rng(6)
    tasks = list("abcd")
    counting = CountingOracle(random_oracle(tasks, rng))
    tim_matrix(counting, tasks, "exact")
    assert len(set(counting.queries)) == len(counting.queries)


def test_matrix_constant_and_hand_cases():
    tasks = ["x", "y", "z"]
    matrix, _ = tim_matrix(constant_oracle(tasks), tasks, "pairwise")
    assert not matrix.any()

    rng = np.random.default_rng(7)
    oracle = random_oracle(tasks, rng)
    matrix, _ = tim_matrix(oracle, tasks, "pairwise")
    for r, i in enumerate(tasks):
        for c, j in enumerate(tasks):
            if i != j:
                hand = oracle.table[(frozenset({i, j}), i)] - oracle.table[(frozenset({i}), i)]
                assert matrix[r, c] == hand


def test_matrix_modes_and_threads_agree():
    rng = np.random.default_rng(8)
    tasks = list("abc")
    oracle = random_oracle(tasks, rng)
    serial, _ = tim_matrix(oracle, tasks, "exact")
    threaded, _ = tim_matrix(oracle, tasks, "exact", workers=4)
    np.testing.assert_array_equal(serial, threaded)
    with pytest.raises(DomainError):
        tim_matrix(oracle, tasks, "shapley")


def test_matrix_errors_name_the_pair():
    oracle = LookupOracle({(("a",), "a"): 0.5})
    with pytest.raises(DomainError, match=r"pair \(a, b\)"):
        tim_matrix(oracle, ["a", "b"], "pairwise")


def test_cached_oracle_contract():
    cached = CachedOracle(M3)
    assert cached((1, 2), 1) == cached(frozenset({2, 1}), 1)
    assert cached.calls == 1
    with pytest.raises(ContractError):
        cached((2, 3), 1)


# ---------------------------------------------------------------------------
# greedy search


def exhaustive_best(oracle, source, candidates):
    sets = [frozenset(s) | {source} for s in all_subsets(candidates)]
    return max(oracle(s, source) for s in sets)


def test_greedy_stops_when_everything_hurts():
    tasks = list("sab")
    table = {(s, "s"): 0.9 - 0.1 * len(s) for s in all_subsets(tasks) if "s" in s}
    best, trace = greedy_select(LookupOracle(table), "s", ["a", "b"])
    assert best == {"s"}
    assert len(trace) == 1 and not trace[0].improved


def test_greedy_finds_crafted_maximum():
    tasks = list("sabc")
    table = {(s, "s"): 0.5 for s in all_subsets(tasks) if "s" in s}
    table[(frozenset("sa"), "s")] = 0.6
    table[(frozenset("sab"), "s")] = 0.8
    best, _ = greedy_select(LookupOracle(table), "s", list("abc"))
    assert best == frozenset("sab")
    assert exhaustive_best(LookupOracle(table), "s", "abc") == 0.8


def test_greedy_monotone_returns_everything():
    rng = np.random.default_rng(9)
    for _ in range(10):
        tasks = ["s"] + [f"c{k}" for k in range(int(rng.integers(1, 6)))]
        w = {t: float(rng.uniform(0.01, 0.1)) for t in tasks}
        table = {(s, "s"): sum(w[t] for t in sorted(s)) for s in all_subsets(tasks) if "s" in s}
        best, _ = greedy_select(LookupOracle(table), "s", tasks[1:])
        assert best == frozenset(tasks)


def test_greedy_empty_candidates_and_preconditions():
    oracle = LookupOracle({(("s",), "s"): 0.5})
    assert greedy_select(oracle, "s", []) == (frozenset({"s"}), [])
    with pytest.raises(DomainError):
        greedy_select(oracle, "s", ["s"])


def test_greedy_tie_break_and_invariants():
    tasks = list("sab")
    table = {(s, "s"): 0.5 for s in all_subsets(tasks) if "s" in s}
    table[(frozenset("sa"), "s")] = 0.7
    table[(frozenset("sb"), "s")] = 0.7
    best, trace = greedy_select(LookupOracle(table), "s", ["b", "a"])
    assert best == frozenset("sa")
    assert trace[0].kept[0][0] == ("a", "s")

    rng = np.random.default_rng(10)
    for _ in range(30):
        tasks = ["s"] + list("abcde")
        oracle = random_oracle(tasks, rng)
        counting = CountingOracle(oracle)
        best, _ = greedy_select(counting, "s", tasks[1:])
        assert "s" in best
        assert oracle(best, "s") >= oracle(("s",), "s")
        assert len(set(counting.queries)) == len(counting.queries)


def test_greedy_keeps_global_top_three():
    tasks = list("sabcd")
    rng = np.random.default_rng(11)
    oracle = random_oracle(tasks, rng)
    _, trace = greedy_select(oracle, "s", list("abcd"), beam_width=3)
    for rnd in trace:
        scores = [v for _, v in rnd.scored]
        assert scores == sorted(scores, reverse=True)
        assert rnd.kept == rnd.scored[:3]


# ---------------------------------------------------------------------------
# seeds and export


def test_task_set_seed_is_order_free():
    assert task_set_seed(["b", "a"], 3) == task_set_seed(("a", "b"), 3)
    assert task_set_seed(["a", "b"], 3) != task_set_seed(["a", "b"], 4)
    assert task_set_seed(["a"], 3) != task_set_seed(["a", "b"], 3)


def test_csv_exports():
    results = [tim_exact(M3, 1, 2, [1, 2, 3])]
    text = tim_csv(results)
    assert text.splitlines()[0] == "source,added,delta,mode,n_subsets,seed"
    assert text.splitlines()[1].startswith("1,2,0.0500")
    matrix = np.array([[0.0, 0.25], [-0.5, 0.0]])
    tasks, back = read_heatmap_csv(heatmap_csv(matrix, ["a", "b"]))
    assert tasks == ["a", "b"]
    np.testing.assert_array_equal(back, matrix)
    _, trace = greedy_select(M3, 1, [2, 3])
    assert trace_csv(trace).splitlines()[0] == "round,task_set,score,kept,improved"
