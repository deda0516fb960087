"""End-to-end smoke test of the Python bindings on a tiny simulated dataset."""

import json

import pytest

import braid_py as bp


DATASET = {"world_seed": 5, "codebook_seed": 7, "subjects": [1, 2], "n_train": 8,
           "n_test": 4, "noise_sigma": 0.05}


@pytest.fixture(scope="module")
def data():
    return bp.Dataset.generate(json.dumps(DATASET))


@pytest.fixture(scope="module")
def bai(data):
    cfg = {"epochs": 1, "batch": 4, "lr": 1e-3, "seed": 1}
    model, losses = bp.Bai.train(data, json.dumps(cfg))
    assert len(losses) == 1
    return model


def test_dataset_shapes(data):
    assert data.subjects == [1, 2]
    assert data.n_test == 4
    assert len(data.test_voxels(1)) == 4
    assert data.test_image(0).shape == (3, 32, 32)
    with pytest.raises(IndexError):
        data.test_triple(99)
    with pytest.raises(bp.BraidError, match="missing subject 9"):
        data.test_voxels(9)


def test_translate_synthesize_saliency(bai, data):
    triples = bai.translate(data.test_voxels(1), 1)
    assert len(triples) == 4 and len(triples[0].s) == 32
    voxels = bai.synthesize(triples, 2)
    assert len(voxels) == 4 and len(voxels[0]) == 512
    sal = bai.saliency(data.test_voxels(1)[0], 1, "edge")
    assert max(sal) == pytest.approx(1.0)
    rows = bai.score(data)
    assert [r[0] for r in rows] == [1, 2]


def test_decode_is_deterministic(data, tmp_path):
    diff, hist = bp.Diffusion.train(data, json.dumps({"epochs": 1, "batch": 4, "max_images": 8}))
    assert len(hist) == 1 and not diff.has_refinement
    triples = [data.test_triple(i) for i in range(2)]
    opts = json.dumps({"steps": 3})
    a = diff.decode(triples, [0, 1], opts)
    b = diff.decode(triples, [0, 1], opts)
    assert [x.data for x in a] == [x.data for x in b]
    assert -1.0 <= bp.pixcorr(a[0], data.test_image(0)) <= 1.0
    path = tmp_path / "f.baic"
    diff.save(str(path))
    again = bp.Diffusion.load(str(path)).decode(triples, [0, 1], opts)
    assert [x.data for x in again] == [x.data for x in a]


def test_metrics():
    img = bp.Image(3, 8, 8, [((i * 37) % 11) / 10 for i in range(192)])
    assert bp.pixcorr(img, img) == pytest.approx(1.0, abs=1e-6)
    assert bp.ssim(img, img) == pytest.approx(1.0, abs=1e-6)
    rows = [[float((i * j) % 7) for j in range(10)] for i in range(1, 5)]
    assert bp.two_way(rows, rows) == 1.0
    with pytest.raises(bp.BraidError):
        bp.Image(3, 8, 8, [0.0])


def test_unknown_config_keys_are_rejected():
    with pytest.raises(bp.BraidError, match="unknown field"):
        bp.Dataset.generate(json.dumps({"n_trian": 3}))
