import numpy as np
import pytest

from fewshot_biattn.rng import PortableRng, derive_seed, fnv1a64


def test_scalar_and_vector_streams_match():
    a = PortableRng(123)
    b = PortableRng(123)
    scalars = [a.random() for _ in range(33)]
    vector = b.fill_uniform((33,))
    assert scalars == list(vector)


def test_stream_continues_after_vector_fill():
    a = PortableRng(9)
    b = PortableRng(9)
    _ = [a.random() for _ in range(10)]
    b.fill_uniform((10,))
    assert a.random() == b.random()


def test_same_seed_same_stream():
    assert [PortableRng(7).next_u64() for _ in range(5)] == \
           [PortableRng(7).next_u64() for _ in range(5)]


def test_uniform_range():
    u = PortableRng(1).fill_uniform((10_000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02


def test_normal_moments():
    z = PortableRng(2).fill_normal((40_000,))
    assert abs(z.mean()) < 0.02
    assert abs(z.std() - 1.0) < 0.02


def test_fill_normal_odd_count():
    z = PortableRng(3).fill_normal((7,))
    assert z.shape == (7,)


def test_sample_without_replacement():
    rng = PortableRng(5)
    for _ in range(50):
        picked = rng.sample_without_replacement(20, 7)
        assert len(set(picked)) == 7
        assert all(0 <= p < 20 for p in picked)
    with pytest.raises(ValueError):
        rng.sample_without_replacement(3, 4)


def test_shuffle_is_permutation():
    rng = PortableRng(8)
    items = list(range(30))
    rng.shuffle(items)
    assert sorted(items) == list(range(30))
    assert items != list(range(30))


def test_derive_seed_depends_on_name_and_base():
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert derive_seed(3, "x") == derive_seed(3, "x")


def test_fnv1a64_known_value():
    # FNV-1a test vector: empty string hashes to the offset basis
    assert fnv1a64(b"") == 0xCBF29CE484222325
