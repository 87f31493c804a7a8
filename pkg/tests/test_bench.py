import numpy as np
import pytest
from scipy import stats

from protoda import (
    DomainShift,
    ScenarioConfig,
    SegSample,
    class_mix,
    generate_domain_pair,
    scenario_presets,
)
from protoda.bench import class_appearance, load_dataset, occurrence_profile, write_dataset


def small_config(**overrides):
    base = dict(
        common_classes=(1, 2, 3),
        source_private=(4,),
        target_private=(5,),
        image_size=(24, 24),
        images_per_domain=8,
        domain_shift=DomainShift(0.05, 0.03, 0.3),
        seed=0,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def test_preset_shapes():
    opda = scenario_presets("open_partial")
    assert len(opda.common_classes) == 6
    assert len(opda.source_private) == 2
    assert len(opda.target_private) == 1
    assert opda.image_size == (64, 64) and opda.images_per_domain == 200
    assert opda.num_source_classes == 8
    assert len(opda.domain_classes("target")) == 7

    closed = scenario_presets("closed")
    assert closed.source_private == () and closed.target_private == ()

    partial = scenario_presets("partial")
    assert set(partial.domain_classes("target")) < set(partial.domain_classes("source"))

    open_ = scenario_presets("open")
    assert open_.source_private == () and len(open_.target_private) == 1

    with pytest.raises(ValueError):
        scenario_presets("bogus")


def test_disjointness_enforced():
    with pytest.raises(ValueError):
        ScenarioConfig(common_classes=(1, 2), source_private=(2,))
    with pytest.raises(ValueError):
        ScenarioConfig(common_classes=(1,), source_private=(2,), target_private=(2,))
    with pytest.raises(ValueError):
        ScenarioConfig(common_classes=())


def test_disjointness_of_presets():
    for name in ("closed", "partial", "open", "open_partial"):
        cfg = scenario_presets(name)
        lists = (set(cfg.common_classes), set(cfg.source_private), set(cfg.target_private))
        assert not (lists[0] & lists[1] or lists[0] & lists[2] or lists[1] & lists[2])


def test_label_spaces():
    cfg = small_config()
    source, target = generate_domain_pair(cfg)
    # source labels: classes 1..C_s in model space
    for i in range(len(source)):
        assert set(np.unique(source.train_label(i))) <= {1, 2, 3, 4}
    # target labels: common ids plus the target-private model id 5
    for i in range(len(target)):
        assert set(np.unique(target.eval_label(i))) <= {1, 2, 3, 5}


def test_images_in_unit_range():
    source, target = generate_domain_pair(small_config())
    for ds in (source, target):
        for img in ds.images:
            assert img.shape == (24, 24, 3)
            assert img.min() >= 0.0 and img.max() <= 1.0


def test_determinism_bitwise():
    cfg = small_config()
    s1, t1 = generate_domain_pair(cfg)
    s2, t2 = generate_domain_pair(cfg)
    for a, b in ((s1, s2), (t1, t2)):
        for i in range(len(a)):
            assert np.array_equal(a.images[i], b.images[i])
            assert np.array_equal(a.eval_label(i), b.eval_label(i))


def test_seed_changes_data():
    s1, _ = generate_domain_pair(small_config(seed=0))
    s2, _ = generate_domain_pair(small_config(seed=1))
    assert not np.array_equal(s1.images[0], s2.images[0])


def test_null_shift_identical_appearance():
    null = DomainShift(0.0, 0.0, 0.0)
    for cid in range(1, 10):
        assert class_appearance(cid) == class_appearance(cid, null)
    shifted = class_appearance(3, DomainShift(hue_shift=0.2))
    assert shifted != class_appearance(3)


def test_distinct_base_appearances():
    seen = {class_appearance(c).rgb for c in range(1, 10)}
    assert len(seen) == 9


def test_occurrence_profile_structure():
    cfg = small_config(occurrence={4: 0.9})
    prof_src = occurrence_profile(cfg, "source")
    assert prof_src[cfg.model_id(1)] == 1.0  # background always present
    assert prof_src[cfg.model_id(4)] == 0.9  # explicit override
    prof_tgt = occurrence_profile(cfg, "target")
    assert set(prof_tgt) == {cfg.model_id(c) for c in (1, 2, 3, 5)}


def test_occurrence_matches_profile_chi_square():
    cfg = small_config(images_per_domain=200, image_size=(16, 16))
    source, _ = generate_domain_pair(cfg)
    profile = occurrence_profile(cfg, "source")
    n = len(source)

    chi2 = 0.0
    dof = 0
    for model_id, p in profile.items():
        if p >= 1.0:
            continue
        observed = sum(
            bool((source.train_label(i) == model_id).any()) for i in range(n)
        )
        chi2 += (observed - n * p) ** 2 / (n * p * (1 - p))
        dof += 1
    assert stats.chi2.sf(chi2, dof) > 0.001


def test_target_gt_locked_away_from_training():
    _, target = generate_domain_pair(small_config())
    with pytest.raises(RuntimeError):
        target.train_label(0)
    with pytest.raises(RuntimeError):
        target.train_sample(0)
    assert target.eval_label(0).shape == (24, 24)


def test_class_mix_empty_subset_returns_target():
    source, target = generate_domain_pair(small_config())
    rng = np.random.default_rng(0)
    src = source.train_sample(0)
    tgt = SegSample(target.image(0), np.ones((24, 24), dtype=np.int64))
    mixed, mask = class_mix(src, tgt, rng, classes=[])
    assert not mask.any()
    assert np.array_equal(mixed.image, tgt.image)
    assert np.array_equal(mixed.labels, tgt.labels)


def test_class_mix_all_classes_overwrites_everything():
    source, target = generate_domain_pair(small_config())
    rng = np.random.default_rng(0)
    src = source.train_sample(0)
    tgt = SegSample(target.image(0), np.ones((24, 24), dtype=np.int64))
    mixed, mask = class_mix(src, tgt, rng, classes=np.unique(src.labels))
    assert mask.all()
    assert np.array_equal(mixed.image, src.image)
    assert np.array_equal(mixed.labels, src.labels)


def test_class_mix_partitions_pixels():
    source, target = generate_domain_pair(small_config())
    rng = np.random.default_rng(1)
    src = source.train_sample(1)
    tgt = SegSample(target.image(1), np.full((24, 24), 2, dtype=np.int64))
    mixed, mask = class_mix(src, tgt, rng)
    assert np.array_equal(mixed.labels[mask], src.labels[mask])
    assert np.array_equal(mixed.labels[~mask], tgt.labels[~mask])
    assert np.array_equal(mixed.image[mask], src.image[mask])
    assert np.array_equal(mixed.image[~mask], tgt.image[~mask])
    # the chosen classes cover exactly the masked pixels
    chosen = set(np.unique(src.labels[mask]))
    assert all(lbl in chosen for lbl in np.unique(src.labels[mask]))


def test_class_mix_size_mismatch():
    rng = np.random.default_rng(0)
    a = SegSample(np.zeros((4, 4, 3)), np.ones((4, 4), dtype=int))
    b = SegSample(np.zeros((5, 5, 3)), np.ones((5, 5), dtype=int))
    with pytest.raises(ValueError):
        class_mix(a, b, rng)


def test_dataset_disk_round_trip(tmp_path):
    source, target = generate_domain_pair(small_config(images_per_domain=3))
    write_dataset(source, tmp_path / "source")
    write_dataset(target, tmp_path / "target")

    # target labels live under eval_labels, never labels
    assert (tmp_path / "target" / "eval_labels").is_dir()
    assert not (tmp_path / "target" / "labels").exists()

    loaded = load_dataset(tmp_path / "source")
    assert loaded.ids == source.ids
    for i in range(3):
        assert np.array_equal(loaded.train_label(i), source.train_label(i))
        # 8-bit quantization on images
        assert np.abs(loaded.images[i] - source.images[i]).max() <= 0.5 / 255 + 1e-12

    loaded_t = load_dataset(tmp_path / "target")
    with pytest.raises(RuntimeError):
        loaded_t.train_label(0)
