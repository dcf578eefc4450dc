import json
import warnings
from dataclasses import replace

import pytest

from factories import make_pred
from tspal.loop import (
    LoopComplete,
    LoopError,
    StateFileError,
    UnsupportedVersionError,
    cold_start,
    init_pools,
    load_state,
    run_cycle,
    save_state,
)
from tspal.pseudo import GateThresholds


def pred_with_score(s):
    # equal components: instance score equals s
    return make_pred(scores=(s, s, s))


def dump_for(state, score=lambda i: 0.5):
    return {i: [pred_with_score(score(i))] for i in state.d_u}


class TestInit:
    def test_basic(self):
        s = init_pools(["b", "a", "c"], per_cycle_b=1, max_cycles=2)
        assert s.all_ids == ("a", "b", "c")
        assert s.d_u == {"a", "b", "c"} and not s.d_al and not s.d_semi and s.k == 0

    def test_duplicates_warn(self):
        with pytest.warns(UserWarning, match="duplicate"):
            s = init_pools(["a", "a", "b"], per_cycle_b=1, max_cycles=2)
        assert s.all_ids == ("a", "b")

    def test_b_exceeds_pool(self):
        with pytest.raises(ValueError, match="exceeds pool size"):
            init_pools(["a"], per_cycle_b=2)

    def test_empty(self):
        with pytest.raises(ValueError):
            init_pools([])

    def test_budget_warning(self):
        with pytest.warns(UserWarning, match="stop early"):
            init_pools(["a", "b", "c"], per_cycle_b=2, max_cycles=2)


class TestColdStart:
    def test_deterministic(self):
        ids = [f"img{i:03d}" for i in range(50)]
        m1, s1 = cold_start(init_pools(ids, per_cycle_b=5, max_cycles=3, seed=7))
        m2, s2 = cold_start(init_pools(ids, per_cycle_b=5, max_cycles=3, seed=7))
        assert m1 == m2 and s1 == s2
        assert len(m1["selected"]) == 5 and s1.k == 1
        _, s3 = cold_start(init_pools(ids, per_cycle_b=5, max_cycles=3, seed=8))
        assert s3.d_al != s1.d_al

    def test_only_at_zero(self):
        _, s = cold_start(init_pools(["a", "b"], per_cycle_b=1, max_cycles=2))
        with pytest.raises(LoopError):
            cold_start(s)


class TestRunCycle:
    def setup_method(self):
        state = init_pools(["a0", "a1", "A", "B", "C", "D"], per_cycle_b=2, max_cycles=3, seed=0)
        # a known post-cold-start state
        self.state = replace(state, d_u=frozenset("ABCD"), d_al=frozenset({"a0", "a1"}), k=1)
        self.dump = {i: [pred_with_score(s)] for i, s in zip("ABCD", (0.1, 0.2, 0.8, 0.9))}

    def test_selects_two_lowest(self):
        man, pseudo, new, rec = run_cycle(self.state, self.dump)
        assert man["selected"] == ["A", "B"]
        assert new.d_u == {"C", "D"} and new.d_semi == {"C", "D"}
        assert new.d_al == {"a0", "a1", "A", "B"} and new.k == 2
        assert rec.pseudo_count == pseudo.instance_count
        # 0.9 does not clear the strict 0.9 gate
        assert pseudo.instance_count == 0
        assert set(pseudo.images) == {"C", "D"}

    def test_pseudo_respects_gate(self):
        _, pseudo, _, _ = run_cycle(self.state, self.dump, GateThresholds(0.5, 0.5, 0.5))
        assert {i for i, a in pseudo.images.items() if a} == {"C", "D"}

    def test_invariants(self):
        _, _, new, _ = run_cycle(self.state, self.dump)
        assert not new.d_u & new.d_al
        assert new.d_u | new.d_al == set(new.all_ids)
        assert new.d_semi <= new.d_u

    def test_entropy_and_random(self):
        man, _, _, _ = run_cycle(self.state, self.dump, strategy="entropy")
        assert len(man["selected"]) == 2
        m1, _, s1, _ = run_cycle(self.state, self.dump, strategy="random")
        m2, _, s2, _ = run_cycle(self.state, self.dump, strategy="random")
        assert m1 == m2 and s1.rng_state == s2.rng_state

    def test_missing_predictions(self):
        del self.dump["C"]
        with pytest.raises(ValueError, match="'C'"):
            run_cycle(self.state, self.dump)

    def test_extra_predictions_warn(self):
        self.dump["a0"] = []
        with pytest.warns(UserWarning, match="outside"):
            run_cycle(self.state, self.dump)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            run_cycle(self.state, self.dump, strategy="coreset")

    def test_before_cold_start(self):
        with pytest.raises(LoopError):
            run_cycle(init_pools(["a", "b"], 1, 2), {"a": [], "b": []})

    def test_complete(self):
        _, _, s, _ = run_cycle(self.state, self.dump)
        _, _, s, _ = run_cycle(s, dump_for(s))
        assert s.done
        with pytest.raises(LoopComplete):
            run_cycle(s, dump_for(s))

    def test_early_stop_takes_remainder(self):
        s = replace(self.state, d_u=frozenset("A"), d_al=frozenset({"a0", "a1", "B", "C", "D"}))
        with pytest.warns(UserWarning, match="only 1"):
            man, _, new, _ = run_cycle(s, {"A": [pred_with_score(0.3)]})
        assert man["selected"] == ["A"] and new.done


class TestPersistence:
    def test_round_trip_and_replay(self, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = init_pools([f"i{k:02d}" for k in range(12)], per_cycle_b=3, max_cycles=4, seed=3)
        _, s = cold_start(s)
        path = tmp_path / "state.json"
        save_state(s, path)
        loaded = load_state(path)
        assert loaded == s
        a = run_cycle(s, dump_for(s), strategy="random")
        b = run_cycle(loaded, dump_for(loaded), strategy="random")
        assert a[0] == b[0] and a[2] == b[2]
        save_state(a[2], tmp_path / "a.json")
        save_state(b[2], tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_overlap_rejected(self, tmp_path):
        _, s = cold_start(init_pools(["a", "b", "c"], per_cycle_b=1, max_cycles=2))
        obj = s.to_json()
        obj["d_u"].append(obj["d_al"][0])
        with pytest.raises(StateFileError, match="overlap"):
            load_state(_write(tmp_path, obj))

    def test_version(self, tmp_path):
        obj = init_pools(["a"], 1, 1).to_json()
        obj["version"] = 2
        with pytest.raises(UnsupportedVersionError):
            load_state(_write(tmp_path, obj))

    def test_missing_field(self, tmp_path):
        obj = init_pools(["a"], 1, 1).to_json()
        del obj["rng_state"]
        with pytest.raises(StateFileError, match="rng_state"):
            load_state(_write(tmp_path, obj))

    def test_semi_outside_pool(self, tmp_path):
        _, s = cold_start(init_pools(["a", "b"], per_cycle_b=1, max_cycles=2))
        obj = s.to_json()
        obj["d_semi"] = obj["d_al"]
        with pytest.raises(StateFileError):
            load_state(_write(tmp_path, obj))


def _write(tmp_path, obj):
    p = tmp_path / "state.json"
    p.write_text(json.dumps(obj))
    return p
