import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disentangleformer.data import (
    HsiCube,
    class_prototypes,
    extract_patches,
    load_cube,
    split_dataset,
    synth_generate,
    write_cube,
)
from disentangleformer.errors import ConfigError, FileFormatError

RNG = np.random.default_rng(31337)


def small_cube(h=5, w=4, c=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=(h, w)).astype(np.int32)
    return HsiCube(reflectance=rng.normal(size=(h, w, c)).astype(np.float32), labels=labels)


class TestCubeFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        cube = small_cube()
        cp, lp = tmp_path / "a.hsc", tmp_path / "a.hsl"
        write_cube(cube, cp, lp)
        again = load_cube(cp, lp)
        np.testing.assert_array_equal(again.reflectance, cube.reflectance)
        np.testing.assert_array_equal(again.labels, cube.labels)

    def test_hand_assembled_bytes(self, tmp_path):
        # 2x2x3 cube with known values, written by hand.
        values = np.arange(12, dtype="<f4")
        blob = b"HSC1" + struct.pack("<III", 2, 2, 3) + values.tobytes()
        p = tmp_path / "hand.hsc"
        p.write_bytes(blob)
        cube = load_cube(p)
        assert cube.reflectance.shape == (2, 2, 3)
        np.testing.assert_array_equal(cube.reflectance[0, 0], [0, 1, 2])
        np.testing.assert_array_equal(cube.reflectance[1, 1], [9, 10, 11])

    def test_truncated_payload(self, tmp_path):
        cube = small_cube()
        cp, lp = tmp_path / "t.hsc", tmp_path / "t.hsl"
        write_cube(cube, cp, lp)
        data = cp.read_bytes()
        cp.write_bytes(data[:-5])
        with pytest.raises(FileFormatError, match="offset 16"):
            load_cube(cp, lp)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.hsc"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FileFormatError, match="magic"):
            load_cube(p)

    def test_label_shape_mismatch(self, tmp_path):
        cube = small_cube()
        cp, lp = tmp_path / "m.hsc", tmp_path / "m.hsl"
        write_cube(cube, cp, lp)
        other = HsiCube(
            reflectance=np.zeros((2, 2, 1), dtype=np.float32),
            labels=np.zeros((2, 2), dtype=np.int32),
        )
        write_cube(other, tmp_path / "o.hsc", lp)
        with pytest.raises(FileFormatError, match="does not match"):
            load_cube(cp, lp)


class TestPatches:
    def test_patch_one_is_the_pixel(self):
        cube = small_cube()
        ps = extract_patches(cube, 1)
        rows, cols = np.nonzero(cube.labels)
        for i in range(len(ps.labels)):
            np.testing.assert_allclose(
                ps.patches[i][:, 0, 0], cube.reflectance[rows[i], cols[i]], atol=1e-7
            )

    def test_count_equals_labeled_pixels(self):
        cube = small_cube()
        assert len(extract_patches(cube, 3).labels) == np.count_nonzero(cube.labels)

    def test_center_is_labeled_pixel(self):
        cube = small_cube(h=7, w=7)
        for p in (3, 5, 4, 8):
            if p > 7:
                continue
            ps = extract_patches(cube, p)
            ctr = (p - 1) // 2
            rows, cols = np.nonzero(cube.labels)
            for i in range(len(ps.labels)):
                np.testing.assert_allclose(
                    ps.patches[i][:, ctr, ctr],
                    cube.reflectance[rows[i], cols[i]].astype(np.float64),
                    atol=1e-7,
                )

    def test_corner_uses_mirror_oracle(self):
        # reflect (no edge duplication): index -k maps to +k.
        cube = small_cube(h=6, w=6, seed=3)
        cube.labels[:] = 0
        cube.labels[0, 0] = 1
        ps = extract_patches(cube, 5)
        patch = ps.patches[0]  # (C, 5, 5), centered on (0, 0) with 2 pad rows
        refl = cube.reflectance.astype(np.float64)
        mirror = lambda i: abs(i)  # reflected source row/col for target i-2 in [-2, 2]
        for di in range(-2, 3):
            for dj in range(-2, 3):
                np.testing.assert_allclose(
                    patch[:, di + 2, dj + 2], refl[mirror(di), mirror(dj)], atol=1e-12
                )

    def test_even_patch_accepted_for_center_protocol(self):
        cube = small_cube(h=8, w=8)
        ps = extract_patches(cube, 8)
        assert ps.patches.shape[-2:] == (8, 8)


class TestSplit:
    def test_half_split(self):
        cube = small_cube(h=5, w=4)
        cube.labels[:] = np.tile([1, 2], 10).reshape(5, 4)
        ps = extract_patches(cube, 1)
        train, test = split_dataset(ps, 0.5, seed=0)
        assert len(train) == 10 and len(test) == 10

    def test_same_seed_identical(self):
        ps = extract_patches(small_cube(h=8, w=8), 3)
        a_train, a_test = split_dataset(ps, 0.4, seed=5)
        b_train, b_test = split_dataset(ps, 0.4, seed=5)
        np.testing.assert_array_equal(a_train.coords, b_train.coords)
        np.testing.assert_array_equal(a_test.coords, b_test.coords)

    def test_stratified_counting_oracle(self):
        labels = np.concatenate([np.ones(10), np.full(10, 2)]).astype(np.int32)
        cube = HsiCube(
            reflectance=RNG.normal(size=(4, 5, 2)).astype(np.float32),
            labels=labels.reshape(4, 5),
        )
        ps = extract_patches(cube, 1)
        train, _ = split_dataset(ps, 0.3, seed=1)
        assert (train.labels == 1).sum() == 3
        assert (train.labels == 2).sum() == 3

    def test_tiny_class_rejected(self):
        labels = np.ones((3, 3), dtype=np.int32)
        labels[0, 0] = 2
        cube = HsiCube(RNG.normal(size=(3, 3, 2)).astype(np.float32), labels)
        with pytest.raises(ConfigError, match="class 2"):
            split_dataset(extract_patches(cube, 1), 0.5, seed=0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.2, 0.8))
    def test_disjoint_and_exhaustive(self, seed, frac):
        ps = extract_patches(small_cube(h=8, w=8, seed=2), 3)
        train, test = split_dataset(ps, frac, seed=seed)
        tr = {tuple(c) for c in train.coords}
        te = {tuple(c) for c in test.coords}
        assert not tr & te
        assert len(tr) + len(te) == len(ps.labels)

    def test_normalization_stats(self):
        ps = extract_patches(small_cube(h=10, w=10, seed=4), 3)
        train, test = split_dataset(ps, 0.5, seed=0)
        flat = train.patches.transpose(1, 0, 2, 3).reshape(train.patches.shape[1], -1)
        np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(flat.std(axis=1), 1.0, atol=1e-6)
        # test split must reuse train stats
        np.testing.assert_array_equal(test.band_mean, train.band_mean)
        raw = ps.patches[np.isin(np.arange(len(ps.labels)),
                                 [i for i, c in enumerate(ps.coords)
                                  if tuple(c) in {tuple(x) for x in test.coords}])]
        want = (raw - train.band_mean[None, :, None, None]) / train.band_std[None, :, None, None]
        np.testing.assert_allclose(np.sort(test.patches.ravel()), np.sort(want.ravel()), atol=1e-12)


class TestSynth:
    def test_zero_noise_pixels_equal_prototypes(self):
        cube = synth_generate(4, 16, 16, 16, noise_sigma=0.0, seed=3)
        protos = class_prototypes(4, 16).astype(np.float32)
        for k in range(1, 5):
            mask = cube.labels == k
            assert mask.any()
            np.testing.assert_array_equal(cube.reflectance[mask], np.broadcast_to(
                protos[k - 1], (mask.sum(), 16)))

    def test_seed_determinism(self):
        a = synth_generate(4, 12, 12, 8, 0.1, seed=9)
        b = synth_generate(4, 12, 12, 8, 0.1, seed=9)
        np.testing.assert_array_equal(a.reflectance, b.reflectance)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_fully_labeled_all_classes(self):
        cube = synth_generate(5, 20, 20, 8, 0.05, seed=1)
        assert (cube.labels > 0).all()
        assert set(np.unique(cube.labels)) == {1, 2, 3, 4, 5}

    def test_nearest_prototype_oracle_pre_validates_learning_threshold(self):
        # The acceptance dataset must be solvable at >= 0.99 OA by the naive
        # nearest-prototype classifier before any training is attempted.
        cube = synth_generate(4, 32, 32, 16, noise_sigma=0.05, seed=7)
        protos = class_prototypes(4, 16)
        spectra = cube.reflectance.reshape(-1, 16).astype(np.float64)
        d2 = ((spectra[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
        pred = d2.argmin(axis=1) + 1
        oa = (pred == cube.labels.ravel()).mean()
        assert oa >= 0.99

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            synth_generate(1, 8, 8, 8, 0.1)
        with pytest.raises(ConfigError):
            synth_generate(6, 8, 8, 4, 0.1)
