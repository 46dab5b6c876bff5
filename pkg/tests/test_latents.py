"""Latent records, standardization, layer tapping, latent file round-trip."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rlfr.latents import (
    LatentRecord,
    Standardizer,
    Trajectory,
    fit_standardizer,
    load_latents,
    save_latents,
    standardize,
    tap_layers,
)


def _records(vectors, layer_idx=1):
    return [
        LatentRecord(seq_id=0, token_idx=i, layer_idx=layer_idx, vec=np.asarray(v, dtype=float))
        for i, v in enumerate(vectors)
    ]


class TestTapLayers:
    def test_four_layer_default_percentiles(self):
        assert tap_layers(4, {0.25, 0.5, 0.75}) == (1, 2, 3)

    def test_midpoint(self):
        assert tap_layers(4, {0.5}) == (2,)

    def test_28_layers(self):
        # round(tau * 28) for tau in {.25, .5, .75} -> 7, 14, 21
        assert tap_layers(28, {0.25, 0.5, 0.75}) == (7, 14, 21)

    def test_rejects_endpoint_percentiles(self):
        for tau in (0.0, 1.0, -0.2, 1.2):
            with pytest.raises(ValueError):
                tap_layers(8, {tau})

    def test_rejects_single_layer_model(self):
        with pytest.raises(ValueError):
            tap_layers(1, {0.5})

    @given(
        total=st.integers(min_value=2, max_value=200),
        taus=st.sets(st.floats(min_value=0.001, max_value=0.999), min_size=1, max_size=8),
    )
    def test_never_contains_final_layer(self, total, taus):
        out = tap_layers(total, taus)
        assert all(1 <= l <= total - 1 for l in out)
        assert total not in out
        assert list(out) == sorted(set(out))


class TestStandardizer:
    def test_two_point_population_std(self):
        stats = fit_standardizer(_records([[1.0], [3.0]]), 1)
        assert stats.mean[0] == pytest.approx(2.0)
        assert stats.std[0] == pytest.approx(1.0)  # population, not sample

    def test_identical_vectors_floor(self):
        stats = fit_standardizer(_records([[5.0, 5.0]] * 4), 1)
        assert np.all(stats.std == 1e-6)

    def test_zero_case(self):
        stats = fit_standardizer(_records([[0.0], [0.0]]), 1)
        assert stats.mean[0] == 0.0

    def test_needs_two_records(self):
        with pytest.raises(ValueError):
            fit_standardizer(_records([[1.0]]), 1)
        with pytest.raises(ValueError):
            fit_standardizer([], 1)

    def test_filters_by_layer(self):
        recs = _records([[1.0], [3.0]], layer_idx=1) + _records([[10.0], [30.0]], layer_idx=2)
        stats = fit_standardizer(recs, 2)
        assert stats.mean[0] == pytest.approx(20.0)

    def test_standardize_examples(self):
        stats = Standardizer(mean=np.array([2.0]), std=np.array([1.0]))
        assert standardize(np.array([2.0]), stats)[0] == 0.0  # x = mean
        assert standardize(np.array([3.0]), stats)[0] == 1.0  # x = mean + std
        stats2 = Standardizer(mean=np.array([1.0, -1.0]), std=np.array([2.0, 4.0]))
        out = standardize(np.array([3.0, 3.0]), stats2)
        assert np.allclose(out, [1.0, 1.0])

    def test_standardize_dimension_mismatch(self):
        stats = Standardizer(mean=np.zeros(3), std=np.ones(3))
        with pytest.raises(ValueError):
            standardize(np.zeros(4), stats)

    def test_roundtrip_mean_zero_std_one(self):
        rng = np.random.default_rng(7)
        x = rng.normal(3.0, 2.5, size=(500, 6))
        stats = fit_standardizer(
            [LatentRecord(0, i, 1, x[i]) for i in range(x.shape[0])], 1
        )
        z = np.stack([standardize(row, stats) for row in x])
        assert np.abs(z.mean(axis=0)).max() < 1e-9
        assert np.abs(z.std(axis=0) - 1.0).max() < 1e-6

    def test_std_floor_validated(self):
        with pytest.raises(ValueError):
            Standardizer(mean=np.zeros(2), std=np.array([1.0, 0.0]))


class TestTrajectory:
    def _make(self, k=3, **kw):
        base = dict(
            seq_id=0,
            prompt=(18, 13, 3, 14),
            response=tuple(range(k)),
            logp_old=np.zeros(k),
            entropy=np.zeros(k),
            latents={1: np.zeros((k, 4), dtype=np.float32)},
            outcome=1,
        )
        base.update(kw)
        return Trajectory(**base)

    def test_valid_construction(self):
        t = self._make()
        assert len(t.flow_rewards) == 3 and len(t.advantages) == 3

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            self._make(logp_old=np.zeros(2))
        with pytest.raises(ValueError):
            self._make(entropy=np.zeros(5))
        with pytest.raises(ValueError):
            self._make(latents={1: np.zeros((2, 4), dtype=np.float32)})

    def test_outcome_binary(self):
        with pytest.raises(ValueError):
            self._make(outcome=2)

    def test_records_iteration(self):
        t = self._make()
        recs = list(t.records(1))
        assert len(recs) == 3
        assert recs[2].token_idx == 2 and recs[2].layer_idx == 1


class TestLatentFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        lat = {
            0: {1: rng.normal(size=(5, 8)).astype(np.float32),
                2: rng.normal(size=(5, 8)).astype(np.float32)},
            3: {1: rng.normal(size=(2, 8)).astype(np.float32),
                2: rng.normal(size=(2, 8)).astype(np.float32)},
        }
        path = tmp_path / "latents.bin"
        save_latents(path, lat, dim=8, layers=[1, 2])
        meta, loaded = load_latents(path)
        assert meta == {"version": 1, "d": 8, "layers": [1, 2]}
        for seq in lat:
            for layer in lat[seq]:
                assert loaded[seq][layer].dtype == np.float32
                assert np.array_equal(loaded[seq][layer], lat[seq][layer])

    def test_rejects_wrong_dim(self, tmp_path):
        with pytest.raises(ValueError):
            save_latents(tmp_path / "x.bin", {0: {1: np.zeros((3, 4), dtype=np.float32)}},
                         dim=8, layers=[1])

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTANRLF" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_latents(p)
