import json
import math

import numpy as np
import pytest
import statsmodels.api as sm

from distqn.cluster import partition_data
from distqn.models import DataShard, Dataset, ModelKind, gen_example1, gen_screening_dataset
from distqn.screening import (
    coverage_rate,
    distributed_sis,
    marginal_mle,
    marginal_mles,
    screen_size,
    select_top,
)


def logistic_shard(X, Y):
    return DataShard(0, X, Y, ModelKind.LOGISTIC)


class TestMarginalFit:
    def test_matches_glm_oracle(self):
        ds = gen_screening_dataset(3000, 12, s=5, seed=1)
        fit = marginal_mles(ds.X, ds.Y)
        for j in range(12):
            glm = sm.GLM(ds.Y, sm.add_constant(ds.X[:, j]), family=sm.families.Binomial()).fit(tol=1e-12)
            assert fit.slopes[j] == pytest.approx(glm.params[1], abs=1e-7)

    def test_null_feature(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((5000, 1))
        Y = (rng.random(5000) < 0.4).astype(float)
        assert abs(marginal_mle(logistic_shard(X, Y), 0)) < 0.1

    def test_strong_positive_association(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(2000)
        Y = (rng.random(2000) < 1 / (1 + np.exp(-3 * x))).astype(float)
        assert marginal_mle(logistic_shard(x[:, None], Y), 0) > 1

    def test_constant_column(self):
        Y = np.tile([0.0, 1.0], 50)
        fit = marginal_mles(np.full((100, 1), 2.0), Y)
        assert fit.slopes[0] == 0.0 and not fit.clamped[0]

    def test_separation_clamped(self):
        x = np.linspace(-1, 1, 40)
        fit = marginal_mles(x[:, None], (x > 0).astype(float))
        assert fit.clamped[0] and abs(fit.slopes[0]) == 50.0

    def test_requires_logistic(self):
        ds = gen_example1(10, 2, seed=0)
        with pytest.raises(ValueError):
            marginal_mle(DataShard(0, ds.X, ds.X[:, 0], ModelKind.GAUSSIAN), 0)


class TestSelection:
    def test_screen_size_natural_log(self):
        assert screen_size(2000, 10**4) == math.ceil(2000 / math.log(2000)) == 264
        assert screen_size(2000, 30) == 30

    def test_ties_prefer_lower_index(self):
        assert select_top(np.array([0.5, -1.0, 1.0, 0.5, 0.2]), 3) == [1, 2, 0]

    def test_coverage_rate(self):
        assert coverage_rate(range(30), range(20)) == 1.0
        assert coverage_rate([50, 51], range(20)) == 0.0
        assert coverage_rate(range(10), range(20)) == 0.5

    def test_small_p_selects_everything(self):
        ds = gen_screening_dataset(400, 10, s=5, seed=2)
        res = distributed_sis(partition_data(ds, 2, seed=0), range(5))
        assert sorted(res.selected) == list(range(10))
        assert res.coverage == 1.0

    def test_single_worker_average_identity(self):
        ds = gen_screening_dataset(500, 40, s=5, seed=3)
        (sh,) = partition_data(ds, 1, seed=0)
        res = distributed_sis([sh])
        assert res.marginal_estimates.tobytes() == marginal_mles(sh.X, sh.Y).slopes.tobytes()
        assert res.rounds == 1

    def test_permutation_equivariance(self):
        ds = gen_screening_dataset(1200, 300, s=10, seed=5)
        perm = np.random.default_rng(0).permutation(300)
        base = distributed_sis(partition_data(ds, 3, seed=1))
        permuted = Dataset(ds.X[:, perm], ds.Y, ds.kind)
        moved = distributed_sis(partition_data(permuted, 3, seed=1))
        assert sorted(perm[moved.selected].tolist()) == sorted(base.selected)

    def test_desk_scale_coverage(self):
        ds = gen_screening_dataset(20_000, 2000, s=20, q=20, seed=11)
        res = distributed_sis(partition_data(ds, 10, seed=11), range(20))
        assert len(res.selected) == screen_size(2000, 2000)
        assert res.coverage == 1.0

    def test_result_json(self, tmp_path):
        ds = gen_screening_dataset(300, 20, s=5, seed=6)
        res = distributed_sis(partition_data(ds, 3, seed=0), range(5))
        doc = json.loads(res.to_json(tmp_path / "r.json"))
        assert doc["selected"] == res.selected and doc["coverage_rate"] == res.coverage
