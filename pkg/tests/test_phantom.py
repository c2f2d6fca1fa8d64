"""Phantom rendering, captions, oracles, manifests, corruption."""

import numpy as np
import pytest

from flowgen import (DatasetManifest, PhantomParams, build_manifest,
                     caption_from_params, corrupt_captions, disc_centroid_oracle,
                     inject_boilerplate, laterality_oracle, lesion_count_oracle,
                     parse_caption, read_attributes, render_phantom, sample_params,
                     stratified_split_labels)
from flowgen.phantom import BOILERPLATE_PHRASES, severity_of
from flowgen.util import ContractError, spawn_rng


def _params(lesions=0, laterality="right", x=0.35, y=0.5, cup=0.4, vessels=4,
            tint=0.5):
    return PhantomParams(disc_center=(x, y), cup_to_disc=cup, vessel_count=vessels,
                         lesion_count=lesions, severity_grade=severity_of(lesions),
                         laterality=laterality, background_tint=tint)


# ---- params ----

def test_severity_tied_to_lesion_count():
    assert [severity_of(k) for k in range(9)] == [0, 1, 1, 2, 2, 3, 3, 4, 4]
    with pytest.raises(ContractError):
        _params(lesions=3).__class__(**{**_params(lesions=3).to_dict(),
                                        "severity_grade": 0,
                                        "disc_center": (0.35, 0.5)})


def test_param_range_validation():
    with pytest.raises(ContractError):
        _params(x=0.05)  # disc x below 0.1
    with pytest.raises(ContractError):
        _params(cup=1.5)
    with pytest.raises(ContractError):
        _params(lesions=9)
    with pytest.raises(ContractError):
        _params(vessels=1)
    with pytest.raises(ContractError):
        _params(laterality="middle")


def test_sampled_params_valid_and_lateralized():
    rng = spawn_rng(0, "sample")
    for _ in range(200):
        p = sample_params(rng)
        assert p.severity_grade == severity_of(p.lesion_count)
        # right eye -> disc in left half of the image
        if p.laterality == "right":
            assert p.disc_center[0] < 0.5
        else:
            assert p.disc_center[0] > 0.5


# ---- rendering ----

def test_render_deterministic_bitwise():
    p = _params(lesions=3)
    a = render_phantom(p, 32, seed=5)
    b = render_phantom(p, 32, seed=5)
    assert a.tobytes() == b.tobytes()
    c = render_phantom(p, 32, seed=6)
    assert a.tobytes() != c.tobytes()


def test_render_range_shape_sizes():
    p = _params(lesions=2)
    for res, shape in ((32, (3, 32, 32)), (64, (3, 64, 64)),
                       ((64, 48), (3, 64, 48)), ((48, 64), (3, 48, 64))):
        img = render_phantom(p, res, seed=1)
        assert img.shape == shape
        assert img.dtype == np.float32
        assert img.min() >= -1.0 and img.max() <= 1.0
    for bad in (16, 128, (64, 40)):
        with pytest.raises(ContractError):
            render_phantom(p, bad, seed=1)


def test_laterality_mirror_is_exact_flip():
    x, y = 0.35, 0.52
    right = _params(lesions=4, laterality="right", x=x, y=y)
    left = PhantomParams(disc_center=(1.0 - x, y), cup_to_disc=right.cup_to_disc,
                         vessel_count=right.vessel_count,
                         lesion_count=right.lesion_count,
                         severity_grade=right.severity_grade, laterality="left",
                         background_tint=right.background_tint)
    a = render_phantom(right, 64, seed=9)
    b = render_phantom(left, 64, seed=9)
    np.testing.assert_array_equal(b, a[:, :, ::-1])


def test_zero_lesions_oracle_finds_none():
    img = render_phantom(_params(lesions=0), 64, seed=3)
    assert lesion_count_oracle(img) == 0


def test_oracles_recover_discrete_fields():
    """Blob counter + centroid side recover params on >= 99% of renders."""
    rng = spawn_rng(42, "oracle-check")
    n, lesion_hits, side_hits = 150, 0, 0
    for i in range(n):
        p = sample_params(rng)
        img = render_phantom(p, 64, seed=1000 + i)
        if lesion_count_oracle(img) == p.lesion_count:
            lesion_hits += 1
        if laterality_oracle(img) == p.laterality:
            side_hits += 1
    assert lesion_hits / n >= 0.99, f"lesion oracle agreement {lesion_hits}/{n}"
    assert side_hits / n >= 0.99, f"laterality oracle agreement {side_hits}/{n}"


def test_disc_centroid_oracle_near_truth():
    p = _params(x=0.3, y=0.45, lesions=0)
    img = render_phantom(p, 64, seed=2)
    cx, cy = disc_centroid_oracle(img)
    assert abs(cx - 0.3) < 0.08 and abs(cy - 0.45) < 0.08


def test_read_attributes_bundle():
    p = _params(lesions=5, laterality="left", x=0.68)
    img = render_phantom(p, 64, seed=7)
    attrs = read_attributes(img)
    assert attrs["lesion_count"] == 5
    assert attrs["laterality"] == "left"
    assert attrs["severity_grade"] == severity_of(5)


# ---- captions ----

def test_caption_grade0_mentions_no_lesions():
    cap = caption_from_params(_params(lesions=0))
    assert "no lesions" in cap and "grade 0" in cap


def test_caption_parse_roundtrip_discrete_fields():
    rng = spawn_rng(7, "roundtrip")
    for _ in range(300):
        p = sample_params(rng)
        parsed = parse_caption(caption_from_params(p))
        assert parsed["laterality"] == p.laterality
        assert parsed["lesion_count"] == p.lesion_count
        assert parsed["severity_grade"] == p.severity_grade
        assert parsed["vessel_count"] == p.vessel_count


def test_caption_regenerable_bit_identically():
    p = _params(lesions=3)
    assert caption_from_params(p) == caption_from_params(p)


def test_parse_rejects_off_grammar_text():
    with pytest.raises(ContractError):
        parse_caption("a lovely photograph of a sunset")


# ---- splits and manifest ----

def test_stratified_split_100_gives_80_10_10():
    rng = spawn_rng(11, "grades")
    grades = [int(rng.integers(0, 5)) for _ in range(100)]
    labels = stratified_split_labels(grades, (0.8, 0.1, 0.1))
    assert labels.count("train") == 80
    assert labels.count("val") == 10
    assert labels.count("test") == 10


def test_stratified_split_balances_each_grade_within_1():
    rng = spawn_rng(12, "grades2")
    grades = [int(rng.integers(0, 5)) for _ in range(500)]
    labels = stratified_split_labels(grades, (0.8, 0.1, 0.1))
    for g in range(5):
        idx = [i for i, gr in enumerate(grades) if gr == g]
        for frac, name in ((0.8, "train"), (0.1, "val"), (0.1, "test")):
            got = sum(1 for i in idx if labels[i] == name)
            assert abs(got - frac * len(idx)) <= 1.0


def test_build_manifest_contracts(tmp_path):
    with pytest.raises(ContractError):
        build_manifest(5, seed=0, out_dir=tmp_path)
    with pytest.raises(ContractError):
        build_manifest(20, seed=0, out_dir=tmp_path, ratios=(0.5, 0.2, 0.2))


def test_build_manifest_deterministic_hash(tmp_path, small_manifest):
    again = build_manifest(48, seed=7, out_dir=tmp_path / "again", resolution=32)
    assert again.content_hash() == small_manifest.content_hash()


def test_manifest_images_written_and_sized(tmp_path):
    man = build_manifest(12, seed=1, out_dir=tmp_path, resolution=32,
                         aspects=[(32, 32), (32, 24)], aspect_fractions=[0.5, 0.5])
    from flowgen import load_image
    for rec in man.records:
        img = load_image(tmp_path / rec.image)
        assert img.shape == (3, *rec.size)


# ---- corruption ----

def test_corrupt_fraction_zero_is_identity(small_manifest):
    out = corrupt_captions(small_manifest, 0.0, seed=1)
    assert out.content_hash() == small_manifest.content_hash()
    assert not any(r.mismatched for r in out.records)


def test_corrupt_counts_exact(small_manifest):
    n = len(small_manifest.records)
    for fraction in (0.25, 0.5):
        out = corrupt_captions(small_manifest, fraction, seed=2)
        flagged = [r for r in out.records if r.mismatched]
        assert len(flagged) == round(fraction * n)


def test_corrupt_swaps_across_grades(small_manifest):
    out = corrupt_captions(small_manifest, 0.25, seed=3)
    by_id = small_manifest.by_id()
    for rec in out.records:
        if rec.mismatched:
            caption_grade = parse_caption(rec.caption)["severity_grade"]
            true_grade = by_id[rec.id].params["severity_grade"]
            assert caption_grade != true_grade
        else:
            assert rec.caption == by_id[rec.id].caption


def test_corrupt_rejects_bad_fraction_and_tiny_manifest(small_manifest):
    with pytest.raises(ContractError):
        corrupt_captions(small_manifest, 1.5, seed=0)
    solo = DatasetManifest(provenance={"seed": 0},
                           records=[small_manifest.records[0]])
    with pytest.raises(ContractError):
        corrupt_captions(solo, 0.5, seed=0)


def test_boilerplate_injection_counts_and_phrases(small_manifest):
    out = inject_boilerplate(small_manifest, 0.5, seed=4)
    flagged = [r for r in out.records if r.boilerplate]
    assert len(flagged) == round(0.5 * len(small_manifest.records))
    for rec in flagged:
        assert any(phrase in rec.caption for phrase in BOILERPLATE_PHRASES)
    # parseable content is preserved underneath the boilerplate
    by_id = small_manifest.by_id()
    for rec in flagged:
        assert parse_caption(rec.caption) == parse_caption(by_id[rec.id].caption)
