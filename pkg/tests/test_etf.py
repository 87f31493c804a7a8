import json

import numpy as np
import pytest

from protoda import (
    SOURCE,
    TARGET,
    DimensionError,
    PrototypeBank,
    build_etf,
    cosine_pair,
    prototype_of,
)


def analytic_gram(num_classes):
    k = 2 * num_classes + 1
    off = -1.0 / (2 * num_classes)
    return (1.0 - off) * np.eye(k) + off * np.ones((k, k))


@pytest.mark.parametrize("num_classes", range(1, 9))
def test_gram_matches_analytic_etf(num_classes):
    bank = build_etf(num_classes, 2 * num_classes + 1, seed=3)
    assert np.abs(bank.gram() - analytic_gram(num_classes)).max() < 1e-6


@pytest.mark.parametrize("num_classes,dim", [(2, 5), (2, 9), (3, 12), (5, 11)])
def test_norms_and_zero_sum(num_classes, dim):
    bank = build_etf(num_classes, dim, seed=1)
    norms = np.linalg.norm(bank.prototypes, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-6
    assert np.abs(bank.prototypes.sum(axis=0)).max() < 1e-6


def test_c2_d5_pairwise_products():
    bank = build_etf(2, 5, seed=0)
    gram = bank.gram()
    off = gram[~np.eye(5, dtype=bool)]
    assert np.allclose(off, -0.25, atol=1e-6)


def test_c1_simplex_products():
    bank = build_etf(1, 3, seed=7)
    off = bank.gram()[~np.eye(3, dtype=bool)]
    assert np.allclose(off, -0.5, atol=1e-6)


def test_dimension_error():
    with pytest.raises(DimensionError):
        build_etf(3, 4, seed=0)


def test_num_classes_error():
    with pytest.raises(ValueError):
        build_etf(0, 5, seed=0)


def test_seed_changes_coordinates_not_gram():
    a = build_etf(2, 5, seed=0)
    b = build_etf(2, 5, seed=1)
    assert not np.allclose(a.prototypes, b.prototypes)
    assert np.abs(a.gram() - b.gram()).max() < 1e-12


def test_deterministic_bit_identical():
    a = build_etf(4, 9, seed=42)
    b = build_etf(4, 9, seed=42)
    assert np.array_equal(a.prototypes, b.prototypes)


def test_rotation_invariance_of_gram():
    bank = build_etf(3, 10, seed=5)
    rng = np.random.default_rng(11)
    q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
    rotated = bank.prototypes @ q.T
    assert np.abs(rotated @ rotated.T - bank.gram()).max() < 1e-9


def test_index_map_bijection():
    bank = build_etf(3, 7, seed=0)
    values = sorted(bank.index_map.values())
    assert values == list(range(1, 8))


def test_prototype_lookup():
    bank = build_etf(2, 5, seed=0)
    p = prototype_of(bank, 1, SOURCE)
    assert p.shape == (5,)
    assert abs(np.linalg.norm(p) - 1.0) < 1e-9
    assert np.array_equal(p, bank.prototypes[bank.index_map[(1, SOURCE)] - 1])

    unknown = prototype_of(bank, 3, TARGET)
    assert np.array_equal(unknown, bank.prototypes[-1])


def test_prototype_lookup_errors():
    bank = build_etf(2, 5, seed=0)
    with pytest.raises(KeyError):
        prototype_of(bank, 3, SOURCE)  # no source-side unknown
    with pytest.raises(KeyError):
        prototype_of(bank, 0, SOURCE)
    with pytest.raises(KeyError):
        prototype_of(bank, 4, TARGET)
    with pytest.raises(KeyError):
        prototype_of(bank, 1, "elsewhere")


def test_cosine_pair_at_source_prototype():
    bank = build_etf(2, 5, seed=0)
    d_s, d_t = cosine_pair(bank, prototype_of(bank, 1, SOURCE), 1)
    assert abs(d_s - 1.0) < 1e-9
    assert abs(d_t + 0.25) < 1e-9


def test_cosine_pair_symmetry():
    bank = build_etf(3, 7, seed=2)
    mid = prototype_of(bank, 2, SOURCE) + prototype_of(bank, 2, TARGET)
    d_s, d_t = cosine_pair(bank, mid, 2)
    assert abs(d_s - d_t) < 1e-12


def test_cosine_pair_normalizes_input():
    bank = build_etf(2, 5, seed=0)
    d1 = cosine_pair(bank, prototype_of(bank, 1, SOURCE), 1)
    d2 = cosine_pair(bank, 17.0 * prototype_of(bank, 1, SOURCE), 1)
    assert d1 == pytest.approx(d2, abs=1e-12)


def test_cosine_pair_zero_vector_rejected():
    bank = build_etf(2, 5, seed=0)
    with pytest.raises(ValueError):
        cosine_pair(bank, np.zeros(5), 1)


def test_prototypes_are_read_only():
    bank = build_etf(2, 5, seed=0)
    with pytest.raises(ValueError):
        bank.prototypes[0, 0] = 123.0


def test_json_round_trip(tmp_path):
    bank = build_etf(3, 8, seed=9)
    path = tmp_path / "bank.json"
    bank.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"num_classes", "embed_dim", "seed", "prototypes"}
    loaded = PrototypeBank.load(path)
    assert loaded.num_classes == 3 and loaded.embed_dim == 8 and loaded.seed == 9
    assert np.array_equal(loaded.prototypes, bank.prototypes)
    assert loaded.index_map == bank.index_map
