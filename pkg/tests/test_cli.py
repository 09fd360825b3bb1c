import json

import jsonschema
import numpy as np
import pytest

from percs.cli import main
from percs.core import iou
from percs.dataset import _schema, load_manifest
from percs.flows import follow_flows
from percs.io import read_flow, read_image, read_mask, write_image, write_mask
from percs.model_head import HeadWeights, ToyFeaturizer, forward, masked_mean_embedding
from percs.pipeline import head_tile_maps, predict_maps
from percs.tiling import plan_tiles

FIX = ["--n-images", "2", "--blobs", "3", "5", "--radii", "6", "12", "--height", "336",
       "--width", "336"]


@pytest.fixture
def fixtures(tmp_path):
    out = tmp_path / "fx"
    assert main(["fixtures", "--out", str(out), "--seed", "1"] + FIX) == 0
    return out


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_fixtures_minimal_and_deterministic(tmp_path, fixtures):
    other = tmp_path / "again"
    assert main(["fixtures", "--out", str(other), "--seed", "1"] + FIX) == 0
    assert files(fixtures) == files(other)
    assert len(load_manifest(fixtures / "manifest.json")) == 2


def test_fixtures_spec_file(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"seed": 4, "n_images": 1, "blobs": [1, 1], "height": 112,
                                "width": 112, "radii": [5, 9]}))
    assert main(["fixtures", "--out", str(tmp_path / "o"), "--spec", str(spec)]) == 0
    assert read_mask(tmp_path / "o" / "masks" / "img0000.png").max() == 1


def test_fixtures_errors(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("PERCS_SEED", raising=False)
    assert main(["fixtures", "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["fixtures", "--out", str(tmp_path / "o"), "--seed", "0", "--radii", "9", "3"]) == 2
    assert "radius" in capsys.readouterr().err
    assert main(["fixtures"]) == 2  # argparse usage error


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PERCS_SEED", "1")
    out = tmp_path / "env"
    assert main(["fixtures", "--out", str(out)] + FIX) == 0
    monkeypatch.delenv("PERCS_SEED")
    assert main(["fixtures", "--out", str(tmp_path / "flag"), "--seed", "1"] + FIX) == 0
    assert files(out) == files(tmp_path / "flag")


def test_flows_command(tmp_path, fixtures):
    out = tmp_path / "f.pcsf"
    assert main(["flows", "--mask", str(fixtures / "masks" / "img0000.png"), "--out", str(out)]) == 0
    flow = read_flow(out)
    mask = read_mask(fixtures / "masks" / "img0000.png")
    norms = np.linalg.norm(flow, axis=-1)
    assert np.all(np.abs(norms[mask > 0] - 1) < 1e-6)
    assert np.all(norms[mask == 0] == 0)


def test_flows_empty_mask(tmp_path):
    write_mask(tmp_path / "m.png", np.zeros((9, 9), int))
    assert main(["flows", "--mask", str(tmp_path / "m.png"), "--out", str(tmp_path / "f")]) == 0
    assert not read_flow(tmp_path / "f").any()


def test_flows_missing_file(tmp_path):
    assert main(["flows", "--mask", str(tmp_path / "nope.png"), "--out", str(tmp_path / "f")]) == 2


def seg(fixtures, out, *extra):
    return main(["segment", "--manifest", str(fixtures / "manifest.json"), "--entry", "img0000",
                 "--out", str(out)] + list(extra))


def test_segment_injection_recovers_reference_type(tmp_path, fixtures):
    assert seg(fixtures, tmp_path / "p.png", "--inject-gt-flows", "--filter-thresh", "-1") == 0
    pred = read_mask(tmp_path / "p.png")
    gt = read_mask(fixtures / "masks" / "img0000.png")
    assert pred.max() == gt.max()
    for k in range(1, gt.max() + 1):
        assert max(iou(gt == k, pred == j) for j in range(1, pred.max() + 1)) >= 0.9


def test_segment_needs_weights_or_reference(tmp_path, fixtures, capsys):
    assert seg(fixtures, tmp_path / "p.png") == 2
    assert "weights" in capsys.readouterr().err
    img = fixtures / "images" / "img0000.png"
    assert main(["segment", "--image", str(img), "--random-weights", "--seed", "0",
                 "--out", str(tmp_path / "p.png")]) == 2
    assert "reference" in capsys.readouterr().err


def test_segment_small_image_needs_pad(tmp_path):
    img = np.random.default_rng(0).random((100, 120))
    m = np.zeros((100, 120), int)
    m[20:40, 20:40] = 1
    write_image(tmp_path / "i.png", img)
    write_mask(tmp_path / "m.png", m)
    base = ["segment", "--image", str(tmp_path / "i.png"), "--ref-mask", str(tmp_path / "m.png"),
            "--ref-label", "1", "--random-weights", "--seed", "0", "--out", str(tmp_path / "p.png")]
    assert main(base) == 2
    assert main(base + ["--pad", "--overlay", str(tmp_path / "o.png")]) == 0
    assert read_mask(tmp_path / "p.png").shape == (100, 120)
    assert read_image(tmp_path / "o.png").shape == (100, 120, 3)


def test_segment_deterministic_with_weights_file(tmp_path, fixtures):
    HeadWeights.init(32, seed=3).save(tmp_path / "w.pcsw")
    for name in ("a", "b"):
        assert seg(fixtures, tmp_path / f"{name}.png", "--weights", str(tmp_path / "w.pcsw"),
                   "--overlay", str(tmp_path / f"{name}_o.png")) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert (tmp_path / "a_o.png").read_bytes() == (tmp_path / "b_o.png").read_bytes()


def test_segment_random_weights_deterministic(tmp_path, fixtures):
    for name in ("a", "b"):
        assert seg(fixtures, tmp_path / f"{name}.png", "--random-weights", "--seed", "5") == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def head_setup(h, w, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.random((h, w, 1))
    feat = ToyFeaturizer()
    mask = np.zeros((h, w), bool)
    mask[30:60, 30:60] = True
    ref = masked_mean_embedding(feat(image), mask)
    return image, ref, HeadWeights.init(32, seed=seed), feat


def test_single_tile_is_identity():
    image, ref, w, feat = head_setup(336, 336)
    flow, logits, _ = forward(feat(image), ref, w)
    maps = predict_maps(image, ref, w, featurizer=feat)
    np.testing.assert_array_equal(maps[..., :2], flow)
    np.testing.assert_array_equal(maps[..., 2], logits)


def test_two_tiles_match_raw_output_outside_overlap():
    image, ref, w, feat = head_setup(504, 336)
    grid, outs = head_tile_maps(image, ref, w, feat, 336, 168)
    assert [a for a, _ in grid.anchors] == [0, 168]
    maps = predict_maps(image, ref, w, featurizer=feat)
    np.testing.assert_array_equal(maps[:168], outs[0][:168])
    np.testing.assert_array_equal(maps[336:], outs[1][168:])
    np.testing.assert_allclose(maps[168:336], (outs[0][168:] + outs[1][:168]) / 2, atol=1e-12)


def test_stride_equal_window_is_placement():
    image, ref, w, feat = head_setup(672, 336)
    maps = predict_maps(image, ref, w, featurizer=feat, window=336, stride=336)
    assert len(plan_tiles(672, 336, 336, 336)) == 2
    for a in (0, 336):
        flow, logits, _ = forward(feat(image[a : a + 336]), ref, w)
        np.testing.assert_array_equal(maps[a : a + 336, :, :2], flow)
        np.testing.assert_array_equal(maps[a : a + 336, :, 2], logits)


def test_segment_output_equals_pipeline(tmp_path, fixtures):
    HeadWeights.init(32, seed=2).save(tmp_path / "w.pcsw")
    assert seg(fixtures, tmp_path / "p.png", "--weights", str(tmp_path / "w.pcsw")) == 0
    image = read_image(fixtures / "images" / "img0000.png")
    gt = read_mask(fixtures / "masks" / "img0000.png")
    m = load_manifest(fixtures / "manifest.json")
    ref = masked_mean_embedding(ToyFeaturizer()(image), gt == m.entries[0].fixed_reference)
    maps = predict_maps(image, ref, HeadWeights.load(tmp_path / "w.pcsw"))
    labels = follow_flows(maps[..., :2], maps[..., 2])
    np.testing.assert_array_equal(read_mask(tmp_path / "p.png"), labels)


# ---------------------------------------------------------------- eval


def eval_cmd(pred_dir, manifest, out, *extra):
    return main(["eval", "--pred-dir", str(pred_dir), "--manifest", str(manifest),
                 "--out", str(out)] + list(extra))


def test_eval_perfect(tmp_path, fixtures):
    preds = tmp_path / "preds"
    for gt in (fixtures / "masks").iterdir():
        write_mask(preds / gt.name, read_mask(gt))
    assert eval_cmd(preds, fixtures / "manifest.json", tmp_path / "m.json", "--gt", "all") == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    jsonschema.validate(doc, _schema("metrics.schema.json"))
    assert [r["AP"] for r in doc["aggregate"]] == [1.0, 1.0]


def test_eval_known_counts(tmp_path):
    gt = np.zeros((60, 60), int)
    pred = np.zeros((60, 60), int)
    for k in range(5):
        gt[2 + 11 * k : 10 + 11 * k, 2:10] = k + 1
    for k in range(3):
        pred[2 + 11 * k : 10 + 11 * k, 2:10] = k + 1
    pred[40:50, 40:50] = 4
    write_mask(tmp_path / "gt.png", gt)
    write_image(tmp_path / "im.png", np.zeros((60, 60)))
    write_mask(tmp_path / "preds" / "x.png", pred)
    (tmp_path / "man.json").write_text(json.dumps({"version": 1, "entries": [
        {"id": "x", "image": "im.png", "mask": "gt.png", "cell_type": 1, "split": "test",
         "fixed_reference": 1}]}))
    assert eval_cmd(tmp_path / "preds", tmp_path / "man.json", tmp_path / "m.json") == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    jsonschema.validate(doc, _schema("metrics.schema.json"))
    for rec in doc["aggregate"]:
        assert (rec["TP"], rec["FP"], rec["FN"]) == (3, 1, 2)
        assert (rec["AP"], rec["P"], rec["R"]) == (0.5, 0.75, 0.6)


def test_eval_missing_prediction(tmp_path, fixtures):
    assert eval_cmd(tmp_path / "none", fixtures / "manifest.json", tmp_path / "m.json") == 2


# ---------------------------------------------------------------- mix


def mix(fixtures, out, *extra):
    return main(["mix", "--manifest", str(fixtures / "manifest.json"), "--out", str(out)]
                + list(extra))


def test_mix_identity(tmp_path, fixtures):
    assert mix(fixtures, tmp_path / "m", "--n-paste", "0", "0", "--seed", "0") == 0
    for name in ("img0000.png", "img0001.png"):
        np.testing.assert_array_equal(read_mask(tmp_path / "m" / "masks" / name),
                                      read_mask(fixtures / "masks" / name))


def test_mix_deterministic_and_bookkeeping(tmp_path, fixtures):
    for d in ("a", "b"):
        assert mix(fixtures, tmp_path / d, "--n-paste", "2", "4", "--seed", "7") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    src = load_manifest(fixtures / "manifest.json")
    out = load_manifest(tmp_path / "a" / "manifest.json")
    for e_in, e_out in zip(src.entries, out.entries):
        k_in = read_mask(fixtures / e_in.mask).max()
        mask = read_mask(tmp_path / "a" / e_out.mask)
        assert mask.max() == len(e_out.instance_types) >= k_in
        assert all(e_out.instance_types[k] == e_in.instance_types[k] for k in range(1, k_in + 1))
        assert all(e_out.instance_types[k] != e_in.cell_type
                   for k in range(k_in + 1, mask.max() + 1))
        assert e_out.fixed_reference == e_in.fixed_reference


def test_mix_needs_seed(tmp_path, fixtures, monkeypatch):
    monkeypatch.delenv("PERCS_SEED", raising=False)
    assert mix(fixtures, tmp_path / "m") == 2
