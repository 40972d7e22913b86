import math

import numpy as np
import pytest

from blade_sim.exceptions import DivergenceError, PartitionError, ShapeMismatchError
from blade_sim.mlcore import (Dataset, LocalUpdate, aggregate, apply_update, as_param_vector,
                              evaluate, fedavg_weights, init_params, local_train,
                              loss_and_grad, make_partitioned_data, params_digest,
                              partition_dataset, unflatten)


def _update(cid, params, n, round=1):
    return LocalUpdate(client_id=cid, round=round, params=as_param_vector(params),
                       sample_size=n, compute_time=1.0)


class TestData:
    def test_iid_partition_sizes(self):
        clients, test = make_partitioned_data(1, 20, 100, 10, 4, 0.0)
        assert len(clients) == 20
        assert all(len(c) == 100 for c in clients)
        assert [c.client_id for c in clients] == list(range(20))
        assert test.client_id == -1

    def test_full_skew_gives_two_classes(self):
        clients, _ = make_partitioned_data(1, 20, 100, 10, 4, 1.0)
        assert all(len(np.unique(c.labels)) <= 2 for c in clients)

    def test_full_skew_needs_enough_samples(self):
        with pytest.raises(PartitionError):
            make_partitioned_data(1, 4, 3, 10, 4, 1.0)

    def test_deterministic_per_seed(self):
        a, _ = make_partitioned_data(5, 3, 20, 6, 3, 0.5)
        b, _ = make_partitioned_data(5, 3, 20, 6, 3, 0.5)
        c, _ = make_partitioned_data(6, 3, 20, 6, 3, 0.5)
        np.testing.assert_array_equal(a[1].features, b[1].features)
        assert not np.array_equal(a[1].features, c[1].features)

    def test_union_histogram_tracks_global_proportions(self):
        clients, _ = make_partitioned_data(2, 20, 200, 5, 10, 0.0)
        hist = sum(c.label_histogram() for c in clients)
        share = hist / hist.sum()
        assert np.all(np.abs(share - 0.1) < 0.02)

    def test_dataset_is_read_only_and_validated(self):
        ds = Dataset(np.zeros((3, 2)), [0, 1, 1], client_id=0, num_classes=2)
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0
        with pytest.raises(ShapeMismatchError):
            Dataset(np.zeros((3, 2)), [0, 1, 2], client_id=0, num_classes=2)
        with pytest.raises(ShapeMismatchError):
            Dataset(np.zeros((3, 2)), [0, 1], client_id=0, num_classes=2)

    def test_partition_loaded_dataset_uses_each_sample_once(self):
        features = np.arange(400, dtype=float).reshape(200, 2)
        labels = np.arange(200) % 4
        full = Dataset(features, labels, client_id=-1, num_classes=4)
        parts = partition_dataset(full, 4, 30, 0.5, seed=9)
        rows = np.concatenate([p.features[:, 0] for p in parts])
        assert len(rows) == 120
        assert len(np.unique(rows)) == 120


class TestModel:
    @pytest.mark.parametrize("spec_name", ["linear_spec", "mlp_spec"])
    def test_gradient_matches_finite_differences(self, spec_name, request, rng):
        spec = request.getfixturevalue(spec_name)
        X = rng.normal(size=(6, spec.input_dim))
        y = rng.integers(0, spec.num_classes, size=6)
        params = as_param_vector(rng.normal(0, 0.3, size=spec.param_count))
        _, grad = loss_and_grad(params, X, y, spec)
        eps = 1e-6
        for i in rng.choice(spec.param_count, size=10, replace=False):
            bump = np.zeros(spec.param_count)
            bump[i] = eps
            up, _ = loss_and_grad(as_param_vector(params + bump), X, y, spec)
            down, _ = loss_and_grad(as_param_vector(params - bump), X, y, spec)
            assert grad[i] == pytest.approx((up - down) / (2 * eps), abs=1e-6)

    def test_unflatten_rejects_wrong_dimension(self, linear_spec):
        with pytest.raises(ShapeMismatchError):
            unflatten(as_param_vector(np.zeros(linear_spec.param_count + 1)), linear_spec)

    def test_linear_init_is_zero(self, linear_spec):
        params = init_params(linear_spec, seed=1)
        assert params.shape == (linear_spec.param_count,)
        assert not params.any()

    def test_zero_model_loss_is_log_classes(self, linear_spec, small_data):
        _, test = small_data
        loss, acc = evaluate(init_params(linear_spec, 0), test, linear_spec)
        assert loss == pytest.approx(math.log(4))
        assert acc == pytest.approx(np.mean(test.labels == 0))


class TestLocalTrain:
    def test_zero_learning_rate_is_identity(self, linear_spec, small_data):
        clients, _ = small_data
        params = as_param_vector(np.full(linear_spec.param_count, 0.1))
        out = local_train(params, clients[0], linear_spec, 2, 0.0, 8, seed=1)
        np.testing.assert_array_equal(out, params)

    def test_epoch_offsets_chain(self, linear_spec, small_data):
        clients, _ = small_data
        p0 = init_params(linear_spec, 0)
        both = local_train(p0, clients[0], linear_spec, 2, 0.1, 8, seed=4)
        first = local_train(p0, clients[0], linear_spec, 1, 0.1, 8, seed=4)
        second = local_train(first, clients[0], linear_spec, 1, 0.1, 8, seed=4, epoch_offset=1)
        np.testing.assert_array_equal(both, second)

    def test_training_reduces_loss(self, linear_spec, small_data):
        clients, _ = small_data
        p0 = init_params(linear_spec, 0)
        trained = local_train(p0, clients[0], linear_spec, 5, 0.2, 10, seed=2)
        assert evaluate(trained, clients[0], linear_spec)[0] < evaluate(p0, clients[0],
                                                                        linear_spec)[0]

    def test_input_not_modified(self, linear_spec, small_data):
        clients, _ = small_data
        p0 = init_params(linear_spec, 0)
        local_train(p0, clients[0], linear_spec, 1, 0.2, 10, seed=2)
        assert not p0.any()

    def test_divergence_is_reported(self, linear_spec, small_data):
        clients, _ = small_data
        with pytest.raises(DivergenceError) as err:
            local_train(as_param_vector(np.full(linear_spec.param_count, 0.5)), clients[0],
                        linear_spec, 3, np.inf, 10, seed=2)
        assert err.value.code == "DIVERGENCE"


class TestAggregate:
    def test_weights_sum_to_one(self):
        ups = [_update(0, [1.0], 10), _update(1, [2.0], 30)]
        w = fedavg_weights(ups)
        assert w == {0: 0.25, 1: 0.75}

    def test_matches_weighted_mean_oracle(self, rng):
        sizes = [10, 25, 40, 5]
        vectors = [rng.normal(size=12) for _ in sizes]
        ups = [_update(i, v, n) for i, (v, n) in enumerate(zip(vectors, sizes))]
        oracle = sum(n * v for v, n in zip(vectors, sizes)) / sum(sizes)
        np.testing.assert_allclose(aggregate(ups), oracle, rtol=0, atol=1e-12)

    def test_order_independent_bit_exact(self, rng):
        ups = [_update(i, rng.normal(size=7), 5 + i) for i in range(6)]
        shuffled = [ups[i] for i in rng.permutation(6)]
        np.testing.assert_array_equal(aggregate(ups), aggregate(shuffled))

    def test_single_update_is_identity(self):
        np.testing.assert_array_equal(aggregate([_update(3, [1.5, -2.0], 9)]), [1.5, -2.0])

    def test_rejects_bad_inputs(self):
        with pytest.raises(ShapeMismatchError):
            aggregate([])
        with pytest.raises(ShapeMismatchError):
            aggregate([_update(0, [1.0], 1), _update(1, [1.0, 2.0], 1)])

    def test_apply_update_adds_delta(self):
        np.testing.assert_array_equal(apply_update(as_param_vector([1.0, 2.0]),
                                                   as_param_vector([0.5, -1.0])), [1.5, 1.0])


def test_param_vector_rejects_non_finite():
    with pytest.raises(ShapeMismatchError):
        as_param_vector([1.0, np.nan])


def test_digest_changes_with_params():
    a = as_param_vector([1.0, 2.0])
    assert params_digest(a) == params_digest(as_param_vector([1.0, 2.0]))
    assert params_digest(a) != params_digest(as_param_vector([1.0, 2.0000001]))
    assert _update(1, a, 3).digest != _update(2, a, 3).digest
