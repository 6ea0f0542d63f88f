import numpy as np
import pytest
import torch

from floodtweets.data import DatasetSplit, TweetRecord
from floodtweets.errors import ConfigError, DataError
from floodtweets.multimodal import (MultimodalBatch, MultimodalSetup, build_image_features_mm, encode_records,
                                    forward_multimodal, new_model, predict_multimodal, train_multimodal,
                                    training_step)
from floodtweets.preprocess import clean
from floodtweets.protocol import Checkpoint, TrainingProtocol
from floodtweets.text import load_encoder, pad_batch, pooled
from floodtweets.vision import preprocess_image

from conftest import TINY_OBJECT, TINY_RESIDUAL, TINY_SCENE

QUICK = TrainingProtocol(learning_rate=3e-3, epochs=2, seeds=(1,))
DUAL = MultimodalSetup("dual_vgg_features", 1, TINY_OBJECT, TINY_SCENE, TINY_RESIDUAL)
RESIDUAL = MultimodalSetup("residual_backbone", 1, TINY_OBJECT, TINY_SCENE, TINY_RESIDUAL)


@pytest.fixture(scope="module")
def handle(separable_corpus):
    return load_encoder("tiny-random", [clean(r.text) for r in separable_corpus[0]])


def test_unknown_image_mode():
    with pytest.raises(ConfigError):
        MultimodalSetup("late_fusion")
    with pytest.raises(ConfigError):
        build_image_features_mm(torch.zeros(3, 32, 32), "late_fusion")


def test_feature_dims(separable_corpus):
    img = preprocess_image(separable_corpus[0].records[0].image_path, 32)
    dual = build_image_features_mm(img, "dual_vgg_features", TINY_OBJECT, TINY_SCENE)
    res = build_image_features_mm(img, "residual_backbone", residual_spec=TINY_RESIDUAL)
    assert dual.shape == (TINY_OBJECT.feature_dim + TINY_SCENE.feature_dim,)
    assert res.shape == (TINY_RESIDUAL.feature_dim,)
    assert np.array_equal(dual, build_image_features_mm(img, "dual_vgg_features", TINY_OBJECT, TINY_SCENE))


@pytest.mark.parametrize("k", [1, 3])
def test_sequence_layout(separable_corpus, handle, k):
    setup = MultimodalSetup("dual_vgg_features", k, TINY_OBJECT, TINY_SCENE, TINY_RESIDUAL)
    enc = encode_records(separable_corpus[1].records[:5], handle, QUICK, setup)
    model = new_model(handle, setup)
    batch = enc.batch(range(5))
    embeds, attn, types = model.encoder_inputs(batch)
    for i, ids in enumerate(batch.token_ids):
        assert int(attn[i].sum()) == k + len(ids)
    assert types[:, 1:1 + k].eq(1).all() and types[:, 1 + k:].eq(0).all() and types[:, 0].eq(0).all()
    assert embeds.shape[1] == k + max(len(ids) for ids in batch.token_ids)


def test_empty_text_scores(handle):
    model = new_model(handle, DUAL).eval()
    batch = MultimodalBatch([[handle.tokenizer.cls_token_id, handle.tokenizer.sep_token_id]],
                            torch.tensor([True]), torch.randn(1, DUAL.image_dim))
    scores = forward_multimodal(batch, model)
    assert scores.shape == (1, 2) and torch.isfinite(scores).all()


def test_overflow_names_record(handle):
    model = new_model(handle, DUAL)
    too_long = [handle.tokenizer.cls_token_id] * handle.max_positions
    batch = MultimodalBatch([too_long], torch.tensor([True]), torch.zeros(1, DUAL.image_dim),
                            record_ids=["t-999"])
    with pytest.raises(DataError, match="t-999"):
        model(batch)


def test_long_text_truncated_to_fit_image_tokens(handle):
    setup = MultimodalSetup("dual_vgg_features", 3, TINY_OBJECT, TINY_SCENE, TINY_RESIDUAL)
    cfg = TrainingProtocol(max_sequence_length=handle.max_positions)
    enc = encode_records([TweetRecord("a", "acqua " * 5000)], handle, cfg, setup)
    assert len(enc.token_ids[0]) + 3 == handle.max_positions
    forward_multimodal(enc.batch([0]), new_model(handle, setup).eval())


def test_masked_image_tokens_reduce_to_text_encoder(handle, separable_corpus):
    # oracle: with the image token masked out and positions realigned, the
    # logits must equal the same encoder and head run on the text alone
    model = new_model(handle, DUAL).eval()
    enc = encode_records(separable_corpus[1].records[:4], handle, QUICK, DUAL)
    batch = enc.batch(range(4))
    embeds, attn, types = model.encoder_inputs(batch)
    attn[:, 1] = 0
    pos = torch.arange(embeds.shape[1]).unsqueeze(0)
    pos = torch.cat([pos[:, :1], pos[:, :1], pos[:, 1:-1]], dim=1).expand(4, -1)
    with torch.no_grad():
        mm = model.head(pooled(model.encoder(inputs_embeds=embeds, attention_mask=attn, token_type_ids=types,
                                             position_ids=pos)))
        ids, mask = pad_batch(batch.token_ids, 0)
        txt = model.head(pooled(model.encoder(input_ids=ids, attention_mask=mask)))
    assert torch.allclose(mm, txt, atol=1e-5)


def test_missing_image_uses_learned_embedding(handle):
    model = new_model(handle, DUAL).eval()
    feats = torch.randn(2, DUAL.image_dim)
    batch = MultimodalBatch([[2, 3], [2, 3]], torch.tensor([False, False]), feats)
    tokens = model.image_tokens(batch)
    assert torch.equal(tokens[0], model.missing_image) and torch.equal(tokens[1], model.missing_image)


def test_one_step_moves_projection_and_embeddings(separable_corpus, handle):
    torch.manual_seed(0)
    model = new_model(handle, DUAL)
    enc = encode_records(separable_corpus[0].records[:8], handle, QUICK, DUAL)
    proj0 = model.projection.linear.weight.detach().clone()
    emb0 = model.encoder.get_input_embeddings().weight.detach().clone()
    training_step(model, torch.optim.Adam(model.parameters(), lr=1e-3), enc.batch(range(8)))
    assert (model.projection.linear.weight - proj0).abs().max() > 0
    assert (model.encoder.get_input_embeddings().weight - emb0).abs().max() > 0


@pytest.mark.parametrize("setup", [DUAL, RESIDUAL], ids=["dual", "residual"])
def test_train_save_predict(separable_corpus, handle, setup, tmp_path):
    train, dev = separable_corpus
    extra = TweetRecord("zz-noimg", "acqua fiume", None, train.records[0].label)
    ckpt, res = train_multimodal(DatasetSplit(train.records + (extra,)), dev, handle, QUICK, setup)
    assert len(res.manifest) == 2 and ckpt.seed == 1
    ckpt.save(tmp_path / "ck")
    back = Checkpoint.load(tmp_path / "ck", "multimodal")
    preds = predict_multimodal(list(dev.records) + [extra], back)
    assert all(0.5 <= c <= 1.0 for _, c in preds)
    hits = sum(p == r.label for (p, _), r in zip(preds, dev))
    assert hits / len(dev) == pytest.approx(ckpt.dev_score)
