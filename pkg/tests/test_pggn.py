import struct

import numpy as np
import pytest

from cloudattack import pggn
from cloudattack.pggn import (CELL_COUNTS, VERTEX_SIZES, DiscriminatorWeights,
                              GeneratorWeights, GridSet, TrainConfig,
                              WeightChecksumError, WeightFormatError,
                              WeightVersionError, discriminate, generate,
                              load_weights, sample_real_gridset, save_weights,
                              train)


@pytest.fixture(scope="module")
def gen_w():
    return GeneratorWeights.random_init(q=52, seed=0)


@pytest.fixture(scope="module")
def disc_w():
    return DiscriminatorWeights.random_init(seed=1)


class TestGenerate:
    def test_vertex_sizes(self, gen_w):
        gs = generate(np.zeros(52), gen_w)
        assert tuple(g.vectors.shape[0] for g in gs.grids) == (5, 9, 17, 33, 65)
        assert tuple(g.cells for g in gs.grids) == CELL_COUNTS

    def test_deterministic(self, gen_w):
        z = np.random.default_rng(2).uniform(-1, 1, 52)
        a, b = generate(z, gen_w), generate(z, gen_w)
        for ga, gb in zip(a.grids, b.grids):
            np.testing.assert_array_equal(ga.vectors, gb.vectors)

    def test_components_bounded(self, gen_w):
        rng = np.random.default_rng(3)
        for _ in range(10):
            gs = generate(rng.uniform(-1, 1, 52), gen_w)
            for g in gs.grids:
                assert np.abs(g.vectors).max() <= 1.0

    def test_dimension_mismatch(self, gen_w):
        with pytest.raises(ValueError):
            generate(np.zeros(51), gen_w)

    def test_lipschitz_probe(self, gen_w):
        """Grid response to latent perturbations stays below a pinned slope.

        Reference measurement on random-init weights: max ratio ~0.16 over
        100 pairs; pinned with margin at 1.0.
        """
        rng = np.random.default_rng(4)
        ratios = []
        for _ in range(100):
            z1 = rng.uniform(-1, 1, 52)
            z2 = np.clip(z1 + rng.normal(0, 0.01, 52), -1, 1)
            g1, g2 = generate(z1, gen_w), generate(z2, gen_w)
            diff = np.sqrt(sum(np.sum((a.vectors - b.vectors) ** 2)
                               for a, b in zip(g1.grids, g2.grids)))
            ratios.append(diff / np.linalg.norm(z1 - z2))
        measured_l = max(ratios)
        print(f"generator Lipschitz probe: L = {measured_l:.4f}")
        assert np.isfinite(measured_l)
        assert measured_l < 1.0


class TestDiscriminate:
    def test_output_in_open_unit_interval(self, gen_w, disc_w):
        rng = np.random.default_rng(5)
        for _ in range(5):
            p = discriminate(generate(rng.uniform(-1, 1, 52), gen_w), disc_w)
            assert 0.0 < p < 1.0

    def test_deterministic(self, disc_w):
        gs = sample_real_gridset(6)
        assert discriminate(gs, disc_w) == discriminate(gs, disc_w)

    def test_untrained_scores_near_chance(self, gen_w, disc_w):
        # before training every score hugs 0.5: the discriminator cannot
        # commit either way on balanced real/fake batches
        rng = np.random.default_rng(7)
        n = 50
        reals = [discriminate(sample_real_gridset(1000 + i), disc_w) for i in range(n)]
        fakes = [discriminate(generate(rng.uniform(-1, 1, 52), gen_w), disc_w)
                 for _ in range(n)]
        assert all(abs(s - 0.5) < 0.05 for s in reals + fakes)
        assert abs(np.mean(reals) - np.mean(fakes)) < 0.02


class TestRealGridsets:
    def test_unit_norms(self):
        gs = sample_real_gridset(0)
        for g in gs.grids:
            np.testing.assert_allclose(np.linalg.norm(g.vectors, axis=-1), 1.0,
                                       atol=1e-9)

    def test_sizes(self):
        gs = sample_real_gridset(1)
        assert tuple(g.vectors.shape[0] for g in gs.grids) == VERTEX_SIZES

    def test_component_statistics(self):
        # uniform unit circle: component mean 0, std 1/sqrt(2)
        comps = []
        rng = np.random.default_rng(8)
        while sum(c.size for c in comps) < 20_000:
            comps.append(sample_real_gridset(rng).grids[4].vectors.ravel())
        comps = np.concatenate(comps)
        assert abs(comps.mean()) < 0.02
        assert abs(comps.std() - 1 / np.sqrt(2)) < 0.02

    def test_gridset_validates_sizes(self):
        from cloudattack.perlin import random_unit_grid
        with pytest.raises(ValueError):
            GridSet(tuple(random_unit_grid(4, 0) for _ in range(5)))


class TestTraining:
    def test_tiny_run_records_history(self):
        cfg = TrainConfig(grids_per_size=24, epochs=3, batch_size=12, seed=0)
        gen, disc, history = train(cfg)
        assert len(history) == cfg.epochs
        assert all(np.isfinite(h["d_loss"]) and np.isfinite(h["g_loss"])
                   for h in history)

    def test_deterministic_history(self):
        cfg = TrainConfig(grids_per_size=12, epochs=2, batch_size=6, seed=3)
        _, _, h1 = train(cfg)
        _, _, h2 = train(cfg)
        assert h1 == h2

    def test_saturating_variant_runs(self):
        cfg = TrainConfig(grids_per_size=12, epochs=1, batch_size=6, seed=4,
                          saturating=True)
        _, _, history = train(cfg)
        assert len(history) == 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)


class TestWeightFiles:
    def test_round_trip_bit_exact(self, tmp_path, gen_w):
        p1, p2 = tmp_path / "g1.bin", tmp_path / "g2.bin"
        save_weights(gen_w, p1)
        loaded = load_weights(p1)
        save_weights(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_generate_identical_after_round_trip(self, tmp_path, gen_w):
        path = tmp_path / "g.bin"
        save_weights(gen_w, path)
        loaded = load_weights(path)
        z = np.random.default_rng(9).uniform(-1, 1, 52)
        before, after = generate(z, gen_w), generate(z, loaded)
        for a, b in zip(before.grids, after.grids):
            np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_discriminator_round_trip(self, tmp_path, disc_w):
        path = tmp_path / "d.bin"
        save_weights(disc_w, path)
        loaded = load_weights(path)
        gs = sample_real_gridset(11)
        assert discriminate(gs, disc_w) == discriminate(gs, loaded)

    def test_bad_magic(self, tmp_path, gen_w):
        path = tmp_path / "g.bin"
        save_weights(gen_w, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError):
            load_weights(path)

    def test_corrupted_payload_fails_checksum(self, tmp_path, gen_w):
        path = tmp_path / "g.bin"
        save_weights(gen_w, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightChecksumError):
            load_weights(path)

    def test_truncation(self, tmp_path, gen_w):
        path = tmp_path / "g.bin"
        save_weights(gen_w, path)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises((WeightFormatError, WeightChecksumError)):
            load_weights(path)

    def test_version_mismatch(self, tmp_path, gen_w):
        import zlib
        path = tmp_path / "g.bin"
        save_weights(gen_w, path)
        blob = bytearray(path.read_bytes())[:-4]
        blob[4:6] = struct.pack("<H", 99)
        blob += struct.pack("<I", zlib.crc32(bytes(blob)))
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightVersionError):
            load_weights(path)
