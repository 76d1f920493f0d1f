import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attncurriculum.curriculum import (
    CurriculumPlan,
    OrderingPolicy,
    build_plan,
    rebuild_sorted_epochs,
    sort_key,
)
from attncurriculum.difficulty import DifficultyRecord, ScoreCache
from attncurriculum.errors import DataError
from attncurriculum.rng import SplitMix64, fisher_yates
from oracles import reference_stable_order


def make_cache(length=None, attention=None, loss=None):
    n = len(next(v for v in (length, attention, loss) if v is not None))
    rows = [
        DifficultyRecord(
            i,
            length[i] if length else 2,
            attention[i] if attention else None,
            loss[i] if loss else None,
        )
        for i in range(n)
    ]
    metrics = ["length"] + [m for m, v in (("attention", attention), ("loss", loss)) if v is not None]
    return ScoreCache({"format": "attncurriculum-score-cache", "version": 1, "model_fingerprint": None,
                       "options": {"metrics": metrics}}, rows)


class TestRng:
    def test_splitmix_reference_values(self):
        # published SplitMix64 outputs for seed 1234567
        rng = SplitMix64(1234567)
        assert [rng.next_u64() for _ in range(3)] == [
            6457827717110365317,
            3203168211198807973,
            9817491932198370423,
        ]

    def test_below_range(self):
        rng = SplitMix64(0)
        assert all(0 <= rng.below(7) < 7 for _ in range(1000))

    def test_fisher_yates_is_permutation(self):
        assert sorted(fisher_yates(100, SplitMix64(5))) == list(range(100))


class TestSortKey:
    def rec(self, i, length=2, attention=0.0, loss=0.0):
        return DifficultyRecord(i, length, attention, loss)

    def test_length_ascending(self):
        p = OrderingPolicy("length")
        assert sort_key(p, self.rec(0, length=3)) < sort_key(p, self.rec(1, length=10))

    def test_loss_ascending(self):
        p = OrderingPolicy("loss")
        assert sort_key(p, self.rec(1, loss=0.5)) < sort_key(p, self.rec(0, loss=2.0))

    def test_attention_high_variance_first(self):
        p = OrderingPolicy("attention")
        assert sort_key(p, self.rec(1, attention=0.18)) < sort_key(p, self.rec(0, attention=0.01))

    def test_hard_to_easy_reverses(self):
        p = OrderingPolicy("length", "hard_to_easy")
        assert sort_key(p, self.rec(0, length=10)) < sort_key(p, self.rec(1, length=3))

    def test_random_has_no_key(self):
        with pytest.raises(DataError):
            sort_key(OrderingPolicy("random"), self.rec(0))

    def test_bad_policy(self):
        with pytest.raises(DataError):
            OrderingPolicy("entropy")


class TestBuildPlan:
    def test_length_example(self):
        plan = build_plan(make_cache(length=[5, 3, 9]), OrderingPolicy("length"), 3, seed=0)
        assert plan.epochs[1] == (1, 0, 2)
        assert plan.epochs[2] == (1, 0, 2)

    def test_tie_break_by_id(self):
        length = [9, 9, 4, 9, 4, 9]
        plan = build_plan(make_cache(length=length), OrderingPolicy("length"), 2, seed=1)
        order = plan.epochs[1]
        assert order.index(2) < order.index(4)
        assert order == (2, 4, 0, 1, 3, 5)

    @pytest.mark.parametrize("kind", ["length", "attention", "loss"])
    def test_single_epoch_equals_random(self, kind):
        cache = make_cache(length=[4, 2, 7, 5], attention=[0.1, 0.3, 0.2, 0.0], loss=[1.0, 3.0, 2.0, 0.5])
        a = build_plan(cache, OrderingPolicy(kind), 1, seed=42)
        b = build_plan(cache, OrderingPolicy("random"), 1, seed=42)
        assert a.epochs == b.epochs

    def test_epoch_one_shared_across_policies(self):
        cache = make_cache(length=[4, 2, 7, 5], attention=[0.1, 0.3, 0.2, 0.0], loss=[1.0, 3.0, 2.0, 0.5])
        firsts = {build_plan(cache, OrderingPolicy(k), 3, seed=7).epochs[0] for k in ("random", "length", "attention", "loss")}
        assert len(firsts) == 1

    def test_random_epochs_differ(self):
        plan = build_plan(make_cache(length=list(range(50))), OrderingPolicy("random"), 3, seed=3)
        assert plan.epochs[0] != plan.epochs[1] != plan.epochs[2]

    def test_random_prefix_property(self):
        cache = make_cache(length=list(range(20)))
        long = build_plan(cache, OrderingPolicy("random"), 3, seed=3)
        short = build_plan(cache, OrderingPolicy("random"), 2, seed=3)
        assert long.epochs[:2] == short.epochs

    def test_empty_cache(self):
        empty = ScoreCache({"options": {"metrics": ["length"]}}, [])
        with pytest.raises(DataError, match="empty"):
            build_plan(empty, OrderingPolicy("length"), 2, 0)

    def test_serialisation(self, tmp_path):
        plan = build_plan(make_cache(length=[5, 3, 9, 1]), OrderingPolicy("length"), 3, seed=2)
        plan.save(tmp_path / "p.jsonl")
        again = CurriculumPlan.load(tmp_path / "p.jsonl")
        assert again == plan
        assert again.to_text() == plan.to_text()


class TestRebuild:
    def test_same_cache_unchanged(self):
        cache = make_cache(loss=[3.0, 1.0, 2.0])
        plan = build_plan(cache, OrderingPolicy("loss"), 3, seed=0)
        assert rebuild_sorted_epochs(plan, cache) == plan

    def test_swap_only_later_epochs(self):
        cache = make_cache(loss=[3.0, 1.0, 2.0])
        plan = build_plan(cache, OrderingPolicy("loss"), 3, seed=0)
        fresh = make_cache(loss=[3.0, 2.0, 1.0])
        new = rebuild_sorted_epochs(plan, fresh)
        assert new.epochs[0] == plan.epochs[0]
        assert plan.epochs[1] == (1, 2, 0)
        assert new.epochs[1] == new.epochs[2] == (2, 1, 0)

    def test_missing_id(self):
        plan = build_plan(make_cache(loss=[3.0, 1.0, 2.0]), OrderingPolicy("loss"), 2, seed=0)
        with pytest.raises(DataError, match="id set"):
            rebuild_sorted_epochs(plan, make_cache(loss=[3.0, 1.0]))


scores = st.lists(st.integers(0, 5), min_size=1, max_size=40)  # small range forces ties


@settings(max_examples=200, deadline=None)
@given(values=scores, seed=st.integers(0, 2**32), kind=st.sampled_from(["random", "length", "attention", "loss"]),
       n_epochs=st.integers(1, 4), direction=st.sampled_from(["easy_to_hard", "hard_to_easy"]))
def test_plan_properties(values, seed, kind, n_epochs, direction):
    fvals = [v / 7 for v in values]
    cache = make_cache(length=[v + 2 for v in values], attention=fvals, loss=fvals)
    policy = OrderingPolicy(kind, direction)
    plan = build_plan(cache, policy, n_epochs, seed)
    n = len(values)
    for order in plan.epochs:
        assert sorted(order) == list(range(n))
    assert plan.epochs[0] == tuple(fisher_yates(n, SplitMix64(seed)))
    if kind != "random" and n_epochs > 1:
        sign = 1 if direction == "easy_to_hard" else -1
        raw = {"length": [v + 2 for v in values], "loss": fvals, "attention": [-x for x in fvals]}[kind]
        keys = [sign * k for k in raw]
        assert list(plan.epochs[1]) == reference_stable_order(range(n), keys)
        assert all(e == plan.epochs[1] for e in plan.epochs[1:])
        # strictly increasing transform of the scores leaves the order alone
        f = lambda x: math.exp(3 * x) + 5
        moved = make_cache(length=[int(10 * (v + 2)) for v in values],
                           attention=[f(x) for x in fvals], loss=[f(x) for x in fvals])
        assert build_plan(moved, policy, n_epochs, seed).epochs == plan.epochs
    assert build_plan(cache, policy, n_epochs, seed).to_text() == plan.to_text()
