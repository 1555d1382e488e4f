
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cilforge.exceptions import ConfigurationError, InputError, StateError
from cilforge.memory import (BudgetPolicy, ExemplarMemory, herding_select,
                             ncm_predict)


from oracles import brute_force_greedy_herding


class TestHerdingSelect:
    def test_single_sample(self):
        assert herding_select(torch.tensor([[5.0, 1.0]]), 3) == [0]

    def test_collinear_first_pick_is_mean(self):
        feats = torch.tensor([[0.0], [1.0], [2.0]])
        picked = herding_select(feats, 1)
        oracle = brute_force_greedy_herding(feats.numpy().astype(float), 1)
        assert picked == oracle == [1]

    def test_m_geq_n_returns_all(self):
        feats = torch.randn(4, 3)
        order = herding_select(feats, 10)
        assert sorted(order) == [0, 1, 2, 3]

    def test_m_zero_empty(self):
        assert herding_select(torch.randn(3, 2), 0) == []

    def test_nan_rejected(self):
        feats = torch.tensor([[1.0, float("nan")]])
        with pytest.raises(InputError):
            herding_select(feats, 1)

    def test_determinism(self):
        feats = torch.randn(30, 5)
        assert herding_select(feats, 10) == herding_select(feats.clone(), 10)

    def test_matches_brute_force_oracle_exhaustively(self):
        # acceptance-scale sweep: n <= 12, d <= 3, M <= 4, >= 100 seeds
        rng = np.random.default_rng(0)
        cases = 0
        for seed in range(120):
            n = int(rng.integers(1, 13))
            d = int(rng.integers(1, 4))
            m = int(rng.integers(1, 5))
            feats = rng.normal(size=(n, d))
            ours = herding_select(torch.from_numpy(feats), m)
            oracle = brute_force_greedy_herding(feats, m)
            assert ours == oracle, f"seed {seed}: {ours} != {oracle}"
            cases += 1
        assert cases >= 100


class TestNcmPredict:
    def test_query_equals_mean(self):
        means = {0: torch.tensor([1.0, 0.0]), 1: torch.tensor([0.0, 1.0])}
        labels = ncm_predict(torch.tensor([[0.0, 2.0]]), means)
        assert labels.tolist() == [1]

    def test_two_axis_query(self):
        means = {0: torch.tensor([1.0, 0.0]), 1: torch.tensor([0.0, 1.0])}
        labels = ncm_predict(torch.tensor([[0.9, 0.1]]), means)
        assert labels.tolist() == [0]

    def test_single_class_degenerate(self):
        means = {3: torch.tensor([0.0, 1.0])}
        labels = ncm_predict(torch.randn(5, 2), means)
        assert (labels == 3).all()

    def test_empty_means_state_error(self):
        with pytest.raises(StateError):
            ncm_predict(torch.randn(2, 2), {})

    def test_euclidean_equals_cosine_on_unit_vectors(self):
        # argmin ||f - mu|| on unit vectors == argmax <f, mu>
        rng = torch.Generator().manual_seed(7)
        means = {c: torch.nn.functional.normalize(torch.randn(6, generator=rng), dim=0)
                 for c in range(4)}
        f = torch.randn(32, 6, generator=rng)
        ncm = ncm_predict(f, means)
        fn = torch.nn.functional.normalize(f, dim=1)
        mat = torch.stack([means[c] for c in range(4)])
        cos = (fn @ mat.t()).argmax(dim=1)
        assert torch.equal(ncm, cos)


def _fake_class(n, d=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(n, d, generator=g)
    images = torch.randint(0, 255, (n, 1, 4, 4), dtype=torch.uint8, generator=g)
    return feats, list(range(n)), images


def _mean_feature_fn(images):
    return images.float().flatten(1).mean(dim=1, keepdim=True).expand(-1, 4) + 1.0


class TestExemplarMemory:
    def test_per_class_budget_growth(self):
        mem = ExemplarMemory(BudgetPolicy.per_class(20))
        new = {c: _fake_class(500, seed=c) for c in range(10)}
        mem.update(new, _mean_feature_fn)
        assert len(mem) == 200
        mem.check_budget()

    def test_fixed_total_quota(self):
        mem = ExemplarMemory(BudgetPolicy.fixed_total(4400))
        new = {c: _fake_class(600, seed=c) for c in range(10)}
        mem.update(new, _mean_feature_fn)
        assert all(sc.images.shape[0] == 440 for sc in mem.store.values())
        mem.check_budget()

    def test_quota_shrink_keeps_herding_prefix(self):
        mem = ExemplarMemory(BudgetPolicy.fixed_total(40))
        mem.update({0: _fake_class(30, seed=1), 1: _fake_class(30, seed=2)}, _mean_feature_fn)
        first_20 = {c: list(mem.store[c].indices) for c in (0, 1)}
        assert all(len(v) == 20 for v in first_20.values())
        mem.update({2: _fake_class(30, seed=3), 3: _fake_class(30, seed=4)}, _mean_feature_fn)
        for c in (0, 1):
            assert mem.store[c].indices == first_20[c][:10]
        mem.check_budget()

    def test_budget_too_small_raises(self):
        mem = ExemplarMemory(BudgetPolicy.fixed_total(3))
        new = {c: _fake_class(5, seed=c) for c in range(4)}
        with pytest.raises(ConfigurationError):
            mem.update(new, _mean_feature_fn)

    def test_duplicate_class_rejected(self):
        mem = ExemplarMemory(BudgetPolicy.per_class(5))
        mem.update({0: _fake_class(4)}, _mean_feature_fn)
        with pytest.raises(InputError):
            mem.update({0: _fake_class(4)}, _mean_feature_fn)

    def test_means_are_unit_norm(self):
        mem = ExemplarMemory(BudgetPolicy.per_class(10))
        mem.update({0: _fake_class(8), 1: _fake_class(6, seed=5)}, _mean_feature_fn)
        for mu in mem.means.values():
            assert abs(float(mu.norm()) - 1.0) <= 1e-6

    def test_manifest_roundtrip(self, tmp_path):
        mem = ExemplarMemory(BudgetPolicy.per_class(3))
        mem.update({0: _fake_class(5), 1: _fake_class(5, seed=9)}, _mean_feature_fn)
        mem.save_manifest(tmp_path / "memory.json")
        import json
        man = json.loads((tmp_path / "memory.json").read_text())
        assert man["budget"] == {"kind": "per_class", "amount": 3}
        assert set(man["classes"]) == {"0", "1"}
        assert all(len(v) == 3 for v in man["classes"].values())

    def test_state_roundtrip(self):
        mem = ExemplarMemory(BudgetPolicy.per_class(4))
        mem.update({0: _fake_class(6)}, _mean_feature_fn)
        clone = ExemplarMemory.from_state(mem.state())
        assert clone.store[0].indices == mem.store[0].indices
        assert torch.equal(clone.store[0].images, mem.store[0].images)
        assert torch.allclose(clone.means[0], mem.means[0])

    @given(st.lists(st.integers(min_value=1, max_value=40), min_size=1, max_size=6),
           st.integers(min_value=1, max_value=3),
           st.sampled_from(["per_class", "fixed_total"]))
    @settings(max_examples=25, deadline=None)
    def test_budget_never_exceeded_over_phases(self, class_sizes, classes_per_phase, kind):
        budget = BudgetPolicy.per_class(5) if kind == "per_class" \
            else BudgetPolicy.fixed_total(30)
        mem = ExemplarMemory(budget)
        next_cls = 0
        for phase, _ in enumerate(range(0, len(class_sizes), classes_per_phase)):
            chunk = class_sizes[phase * classes_per_phase:(phase + 1) * classes_per_phase]
            if not chunk:
                break
            new = {next_cls + i: _fake_class(n, seed=next_cls + i)
                   for i, n in enumerate(chunk)}
            next_cls += len(chunk)
            if kind == "fixed_total" and budget.amount // next_cls == 0:
                return  # quota-zero configs raise by contract, covered elsewhere
            mem.update(new, _mean_feature_fn)
            mem.check_budget()
            if kind == "per_class":
                assert len(mem) <= 5 * next_cls
            else:
                assert len(mem) <= 30
