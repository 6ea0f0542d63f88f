import logging

import numpy as np
import pytest
import torch
from PIL import Image

from floodtweets.data import DatasetSplit, Label, TweetRecord
from floodtweets.errors import ConfigError, DataError, TrainingError
from floodtweets.protocol import Checkpoint, TrainingProtocol
from floodtweets.smote import SmoteConfig
from floodtweets.vision import (BackboneSpec, extract_features, fuse_early, load_backbone, predict_images,
                                preprocess_image, train_image_classifier)

from conftest import TINY_OBJECT, TINY_PROTOCOL, TINY_SCENE

QUICK = TrainingProtocol(learning_rate=3e-3, head_learning_rate=1e-2, epochs=2, seeds=(4,))


def test_jpeg_shape(tmp_path):
    Image.new("RGB", (300, 180), (10, 200, 30)).save(tmp_path / "a.jpg")
    x = preprocess_image(tmp_path / "a.jpg")
    assert x.shape == (3, 224, 224) and torch.isfinite(x).all()


def test_grayscale_replicated(tmp_path):
    Image.new("L", (40, 40), 128).save(tmp_path / "g.png")
    x = preprocess_image(tmp_path / "g.png", 32)
    assert x.shape == (3, 32, 32)
    # equal raw channels, differing only by the per-channel normalisation
    raw = x * torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1) + torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
    assert torch.allclose(raw[0], raw[1], atol=1e-6) and torch.allclose(raw[1], raw[2], atol=1e-6)


def test_truncated_file_names_path(tmp_path):
    Image.new("RGB", (64, 64), (1, 2, 3)).save(tmp_path / "t.jpg")
    data = (tmp_path / "t.jpg").read_bytes()
    (tmp_path / "t.jpg").write_bytes(data[: len(data) // 3])
    with pytest.raises(DataError, match="t.jpg"):
        preprocess_image(tmp_path / "t.jpg")


def test_fuse_spans():
    f = fuse_early([1, 2], [3])
    assert f.vector.tolist() == [1, 2, 3]
    assert (f.object_span, f.scene_span) == ((0, 2), (2, 3))
    with pytest.raises(DataError):
        fuse_early([np.nan], [1.0])


def test_tiny_features_deterministic_and_distinct(separable_corpus):
    train, _ = separable_corpus
    rel = next(r for r in train if r.label is Label.RELEVANT)
    irr = next(r for r in train if r.label is Label.NOT_RELEVANT)
    a = extract_features(preprocess_image(rel.image_path, 32), TINY_SCENE)
    b = extract_features(preprocess_image(rel.image_path, 32), TINY_SCENE)
    c = extract_features(preprocess_image(irr.image_path, 32), TINY_SCENE)
    assert a.shape == (TINY_SCENE.feature_dim,) and np.isfinite(a).all()
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_object_and_scene_stand_ins_differ():
    fo = load_backbone(TINY_OBJECT).state_dict()
    fs = load_backbone(TINY_SCENE).state_dict()
    assert any(not torch.equal(fo[k], fs[k]) for k in fo)


def test_bad_weights_fail_before_inference(tmp_path):
    (tmp_path / "w.pt").write_bytes(b"garbage")
    with pytest.raises(TrainingError, match="w.pt"):
        load_backbone(BackboneSpec("tiny_vgg", "scene", str(tmp_path / "w.pt")))
    with pytest.raises(TrainingError):
        load_backbone(BackboneSpec("tiny_vgg", "scene", str(tmp_path / "missing.pt")))


def test_weights_file_round_trip(tmp_path):
    from floodtweets.vision import TinyVGG

    torch.manual_seed(11)
    net = TinyVGG(num_classes=365)
    torch.save(net.state_dict(), tmp_path / "places.pt")
    bb = load_backbone(BackboneSpec("tiny_vgg", "scene", str(tmp_path / "places.pt")))
    assert torch.equal(next(bb.parameters()), net.features[0].weight)


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        BackboneSpec("alexnet")


def _imbalanced(train, n_rel=10, n_irr=50):
    rel = [r for r in train if r.label is Label.RELEVANT][:n_rel]
    irr = [r for r in train if r.label is Label.NOT_RELEVANT]
    irr = (irr * 2)[:n_irr]
    irr = [TweetRecord(f"x{i:03d}", r.text, r.image_path, r.label, r.split) for i, r in enumerate(irr)]
    return DatasetSplit(tuple(rel + irr))


def test_smote_effective_counts_logged(separable_corpus, caplog):
    train, dev = separable_corpus
    caplog.set_level(logging.INFO, logger="floodtweets")
    _, _, info = train_image_classifier(_imbalanced(train), dev, "fused_head", QUICK, SmoteConfig(),
                                        TINY_OBJECT, TINY_SCENE)
    assert info.effective_counts == {"relevant": 30, "not_relevant": 50}
    assert "effective counts: 30 relevant / 50 not_relevant" in caplog.text


def test_scene_finetune_duplicates_minority(separable_corpus):
    train, dev = separable_corpus
    _, res, info = train_image_classifier(_imbalanced(train), dev, "scene_finetune", QUICK, SmoteConfig(),
                                          TINY_OBJECT, TINY_SCENE)
    assert info.effective_counts == {"relevant": 30, "not_relevant": 50}
    assert res.best.seed == 4


def test_imageless_records_excluded_and_unscored(separable_corpus, tmp_path):
    train, dev = separable_corpus
    extra = TweetRecord("zz-noimg", "solo testo", None, Label.RELEVANT)
    ckpt, _, info = train_image_classifier(DatasetSplit(train.records + (extra,)), dev, "fused_head", QUICK,
                                           None, TINY_OBJECT, TINY_SCENE)
    assert info.n_excluded == 1
    ckpt.save(tmp_path / "ck")
    preds = predict_images([None, dev.records[0].image_path], Checkpoint.load(tmp_path / "ck"))
    assert preds[0] is None and 0.5 <= preds[1][1] <= 1.0


def test_single_class_rejected(separable_corpus):
    train, dev = separable_corpus
    only = DatasetSplit(tuple(r for r in train if r.label is Label.RELEVANT))
    with pytest.raises(DataError):
        train_image_classifier(only, dev, "fused_head", QUICK, None, TINY_OBJECT, TINY_SCENE)
    with pytest.raises(ConfigError):
        train_image_classifier(train, dev, "late_fusion", QUICK)


@pytest.mark.parametrize("mode", ["scene_finetune", "fused_head"])
def test_separable_images_fit(separable_corpus, mode, tmp_path):
    train, dev = separable_corpus
    cfg = TrainingProtocol(**{**TINY_PROTOCOL.to_dict(), "seeds": (0,)})
    ckpt, _, info = train_image_classifier(train, dev, mode, cfg, SmoteConfig(), TINY_OBJECT, TINY_SCENE)
    assert ckpt.dev_score >= 0.95
    for before, after in info.backbone_fingerprints.values():
        assert before == after
    ckpt.save(tmp_path / "ck")
    preds = predict_images([r.image_path for r in dev], Checkpoint.load(tmp_path / "ck"))
    assert sum(p == r.label for (p, _), r in zip(preds, dev)) / len(dev) == pytest.approx(ckpt.dev_score)
