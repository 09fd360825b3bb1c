import json

import numpy as np
import pytest

from percs.core import ConfigError, DataError, ProtocolError
from percs.dataset import (
    FixtureSpec,
    ManifestEntry,
    MixParams,
    load_manifest,
    mix_paste,
    render_scene,
    sample_donors,
    save_manifest,
    select_reference,
    synth_fixtures,
    target_instances,
    target_mask_for_reference,
    type_level,
)
from percs.io import write_image, write_mask


def write_manifest(path, entries):
    path.write_text(json.dumps({"version": 1, "entries": entries}))
    return path


def entry_json(i, split="test", ref=1):
    return {"id": f"e{i}", "image": f"i{i}.png", "mask": f"m{i}.png", "cell_type": 1,
            "split": split, "fixed_reference": ref}


def populate(tmp_path, n=2):
    for i in range(n):
        mask = np.zeros((20, 20), int)
        mask[2:6, 2:6] = 1
        mask[10:15, 10:15] = 2
        write_mask(tmp_path / f"m{i}.png", mask)
        write_image(tmp_path / f"i{i}.png", np.full((20, 20), 0.5))


# ---------------------------------------------------------------- manifest


def test_empty_manifest_is_valid(tmp_path):
    m = load_manifest(write_manifest(tmp_path / "m.json", []))
    assert len(m) == 0


def test_missing_fixed_reference_names_entry(tmp_path):
    populate(tmp_path)
    bad = entry_json(1, ref=None)
    with pytest.raises(DataError, match=r"entry 1 \(e1\).*fixed_reference"):
        load_manifest(write_manifest(tmp_path / "m.json", [entry_json(0), bad]))


def test_train_entry_may_omit_reference(tmp_path):
    populate(tmp_path, 1)
    m = load_manifest(write_manifest(tmp_path / "m.json", [entry_json(0, "train", None)]))
    assert m.entries[0].fixed_reference is None


@pytest.mark.parametrize(
    "mutate, pattern",
    [
        (lambda e: e.update(split="val"), "schema"),
        (lambda e: e.update(cell_type=0), "cell_type|positive"),
        (lambda e: e.update(image="nope.png"), "missing file"),
        (lambda e: e.update(fixed_reference=7), "not in mask"),
        (lambda e: e.update(instance_types={"1": 2}), "misses labels"),
        (lambda e: e.pop("mask"), "schema"),
    ],
)
def test_manifest_errors(tmp_path, mutate, pattern):
    populate(tmp_path, 1)
    e = entry_json(0)
    mutate(e)
    with pytest.raises(DataError, match=pattern):
        load_manifest(write_manifest(tmp_path / "m.json", [e]))


def test_duplicate_ids(tmp_path):
    populate(tmp_path, 2)
    a, b = entry_json(0), entry_json(1)
    b["id"] = "e0"
    with pytest.raises(DataError, match="duplicate"):
        load_manifest(write_manifest(tmp_path / "m.json", [a, b]))


def test_manifest_round_trip(tmp_path):
    populate(tmp_path, 2)
    e1 = entry_json(1, "novel", 2)
    e1["instance_types"] = {"1": 3, "2": 4}
    m = load_manifest(write_manifest(tmp_path / "m.json", [entry_json(0, "train", None), e1]))
    save_manifest(m, tmp_path / "m2.json")
    m2 = load_manifest(tmp_path / "m2.json")
    assert m2 == m
    assert m2.entries[1].instance_types == {1: 3, 2: 4}
    save_manifest(m2, tmp_path / "m3.json")
    assert (tmp_path / "m2.json").read_bytes() == (tmp_path / "m3.json").read_bytes()


def test_unreadable_manifest(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "m.json")


# ---------------------------------------------------------------- reference protocol


def four_instances():
    mask = np.zeros((10, 10), int)
    mask[0:2, 0:2], mask[0:2, 5:7], mask[5:7, 0:2], mask[5:7, 5:7] = 1, 2, 3, 4
    return mask


def test_eval_reference_is_fixed():
    e = ManifestEntry("x", "i", "m", 2, "test", 3)
    for _ in range(5):
        assert select_reference(e, "eval", mask=four_instances()) == (3, 2)


def test_eval_does_not_consume_rng():
    e = ManifestEntry("x", "i", "m", 1, "test", 2)
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state
    select_reference(e, "eval", rng=rng, mask=four_instances())
    assert rng.bit_generator.state == before


def test_reference_protocol_errors():
    e = ManifestEntry("x", "i", "m", 1, "train")
    with pytest.raises(ProtocolError):
        select_reference(e, "eval")
    with pytest.raises(ProtocolError):
        select_reference(e, "train", np.random.default_rng(0), np.zeros((4, 4), int))
    with pytest.raises(ConfigError):
        select_reference(e, "test")


def test_train_single_instance():
    e = ManifestEntry("x", "i", "m", 5, "train")
    mask = np.zeros((4, 4), int)
    mask[1, 1] = 1
    rng = np.random.default_rng(1)
    assert {select_reference(e, "train", rng, mask) for _ in range(50)} == {(1, 5)}


def test_train_reference_uniform():
    e = ManifestEntry("x", "i", "m", 1, "train")
    rng = np.random.default_rng(2024)
    mask = four_instances()
    n = 10_000
    counts = np.bincount([select_reference(e, "train", rng, mask)[0] for _ in range(n)], minlength=5)[1:]
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 4 * sigma)


def test_target_mask_examples():
    mask = four_instances()
    full = target_mask_for_reference(mask, {1: 1, 2: 1, 3: 1, 4: 1}, 1)
    np.testing.assert_array_equal(full, mask > 0)
    assert not target_mask_for_reference(mask, {1: 1, 2: 1, 3: 1, 4: 1}, 9).any()
    with pytest.raises(DataError):
        target_mask_for_reference(mask, {1: 1, 2: 1}, 1)


def test_target_mask_three_types(rng):
    spec = FixtureSpec(n_types=3, blobs=(6, 10), height=128, width=128, radii=(4, 10))
    _, mask, types, _ = render_scene(spec, rng)
    for t in (1, 2, 3):
        oracle = np.zeros(mask.shape, bool)
        for lab, ty in types.items():
            if ty == t:
                oracle |= mask == lab
        np.testing.assert_array_equal(target_mask_for_reference(mask, types, t), oracle)
        inst = target_instances(mask, types, t)
        assert inst.max() == sum(1 for v in types.values() if v == t)


# ---------------------------------------------------------------- mixing


def target_scene():
    img = np.zeros((40, 40))
    mask = np.zeros((40, 40), int)
    mask[2:8, 2:8] = 1
    img[mask > 0] = 0.4
    return img, mask, {1: 1}


def donor(t=2):
    img = np.full((40, 40), 0.9)
    m = np.zeros((40, 40), bool)
    m[20:25, 20:24] = True
    return img, m, t


def test_mix_zero_donors_identity():
    img, mask, types = target_scene()
    out = mix_paste((img, mask, types), [], rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.image[..., 0], img)
    np.testing.assert_array_equal(out.mask, mask)
    assert out.types == types and out.n_pasted == 0


def test_mix_one_donor():
    img, mask, types = target_scene()
    out = mix_paste((img, mask, types), [donor(7)], rng=np.random.default_rng(0))
    assert out.mask.max() == 2 and out.types == {1: 1, 2: 7}
    assert np.count_nonzero(out.mask == 2) == 20
    assert np.all(out.image[out.mask == 2] == 0.9)
    np.testing.assert_array_equal(out.mask == 1, mask == 1)


def test_mix_deterministic():
    img, mask, types = target_scene()
    a = mix_paste((img, mask, types), [donor(), donor(3)], rng=np.random.default_rng(5))
    b = mix_paste((img, mask, types), [donor(), donor(3)], rng=np.random.default_rng(5))
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_mix_skips_when_no_room():
    img = np.zeros((10, 10))
    mask = np.ones((10, 10), int)
    d_mask = np.zeros((10, 10), bool)
    d_mask[0:3, 0:3] = True
    out = mix_paste((img, mask, {1: 1}), [(img, d_mask, 2)], MixParams(max_attempts=3),
                    np.random.default_rng(0))
    assert out.n_pasted == 0 and out.n_skipped == 1


def test_mix_never_shrinks_existing_instances():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        spec = FixtureSpec(blobs=(3, 6), height=96, width=96, radii=(4, 10), seed=seed)
        img, mask, types, _ = render_scene(spec, rng)
        donors = []
        for _ in range(4):
            _, dm, dt, _ = render_scene(spec, rng)
            donors.append((img, dm == 1, 2))
        before = np.bincount(mask.ravel())
        out = mix_paste((img, mask, types), donors, MixParams(), rng)
        after = np.bincount(out.mask.ravel(), minlength=len(before))
        assert np.all(after[1 : len(before)] == before[1:])
        assert set(out.types) == set(range(1, out.mask.max() + 1))


def test_mix_overlap_keeps_valid_mask():
    img, mask, types = target_scene()
    out = mix_paste((img, mask, types), [donor()] * 6, MixParams(allow_overlap=True),
                    np.random.default_rng(3))
    labels = set(np.unique(out.mask)) - {0}
    assert labels == set(range(1, out.mask.max() + 1)) == set(out.types)


def test_mix_empty_donor_rejected():
    img, mask, types = target_scene()
    with pytest.raises(DataError):
        mix_paste((img, mask, types), [(img, np.zeros((40, 40), bool), 2)],
                  rng=np.random.default_rng(0))


def test_sample_donors_other_types(tmp_path):
    spec = FixtureSpec(n_images=4, n_types=2, blobs=(3, 5), height=96, width=96,
                       radii=(4, 10), seed=11)
    m = synth_fixtures(spec, tmp_path)
    rng = np.random.default_rng(0)
    ds = sample_donors(m, 0, MixParams(n_paste=(3, 3)), rng)
    assert all(t != m.entries[0].cell_type for _, _, t in ds)


# ---------------------------------------------------------------- fixtures


def test_single_blob_fixture(tmp_path):
    m = synth_fixtures(FixtureSpec(blobs=(1, 1), seed=3), tmp_path)
    _, mask, types = m.load(m.entries[0])
    assert mask.max() == 1 and list(types) == [1]
    assert load_manifest(tmp_path / "manifest.json") == m


def test_fixtures_deterministic(tmp_path):
    spec = FixtureSpec(n_images=2, seed=9, height=112, width=112, radii=(4, 10))
    synth_fixtures(spec, tmp_path / "a")
    synth_fixtures(spec, tmp_path / "b")
    for rel in ("manifest.json", "images/img0001.png", "masks/img0001.png"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_intensity_signature_classifier(tmp_path):
    spec = FixtureSpec(n_images=6, n_types=3, seed=21, height=168, width=168, radii=(5, 12))
    m = synth_fixtures(spec, tmp_path)
    levels = np.array([type_level(t, 3) for t in (1, 2, 3)])
    agree = total = 0
    for e in m.entries:
        img, mask, types = m.load(e)
        for lab, t in types.items():
            mean = img[mask == lab].mean()
            agree += int(np.argmin(np.abs(levels - mean)) + 1 == t)
            total += 1
    assert total > 10 and agree / total >= 0.95


def test_channel_signature_classifier(rng):
    spec = FixtureSpec(n_types=3, channels=3, signature="channel", blobs=(6, 9),
                       height=128, width=128, radii=(4, 10))
    img, mask, types, _ = render_scene(spec, rng)
    for lab, t in types.items():
        assert np.argmax(img[mask == lab].mean(axis=0)) == t - 1


def test_infeasible_packing_warns(caplog):
    spec = FixtureSpec(blobs=(40, 40), radii=(10, 12), height=60, width=60, max_tries=20)
    _, mask, _, n_req = render_scene(spec, np.random.default_rng(0))
    assert n_req == 40 and 1 <= mask.max() < 40
    assert "could not place" in caplog.text


def test_fixture_spec_errors():
    with pytest.raises(ConfigError):
        FixtureSpec.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        FixtureSpec(signature="channel", n_types=2, channels=1)
    assert FixtureSpec.from_dict({"blobs": [2, 3]}).blobs == (2, 3)
