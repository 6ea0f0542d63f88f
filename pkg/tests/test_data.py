import json
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from floodtweets.data import (DatasetSplit, Label, Split, SyntheticCorpusSpec, TweetRecord,
                              generate_synthetic_corpus, load_dataset, write_dataset)
from floodtweets.errors import DataError


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def row(i, label="relevant", split="train", image=None, text="testo"):
    return {"tweet_id": str(i), "text": text, "image_path": image, "label": label, "split": split}


def test_class_counts_tally(tmp_path):
    rows = [row(i, "relevant") for i in range(2)] + [row(i, "not_relevant") for i in range(2, 5)]
    ds = load_dataset(_write_jsonl(tmp_path / "d.jsonl", rows))
    assert ds.class_counts == {Label.RELEVANT: 2, Label.NOT_RELEVANT: 3}


def test_empty_csv_with_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("tweet_id,text,image_path,label,split\n", encoding="utf-8")
    ds = load_dataset(p)
    assert len(ds) == 0
    assert ds.class_counts == {Label.RELEVANT: 0, Label.NOT_RELEVANT: 0}


def test_duplicate_id_names_the_id(tmp_path):
    p = _write_jsonl(tmp_path / "d.jsonl", [row(42), row(7), row(42)])
    with pytest.raises(DataError, match="'42'"):
        load_dataset(p)


def test_missing_field_names_row_and_field(tmp_path):
    bad = row(2)
    del bad["text"]
    p = _write_jsonl(tmp_path / "d.jsonl", [row(1), bad])
    with pytest.raises(DataError, match=r"row 2.*'text'"):
        load_dataset(p)


def test_label_optional_only_for_test_split(tmp_path):
    ok = load_dataset(_write_jsonl(tmp_path / "a.jsonl", [row(1, None, "test")]))
    assert ok.records[0].label is None
    with pytest.raises(DataError, match="label"):
        load_dataset(_write_jsonl(tmp_path / "b.jsonl", [row(1, None, "dev")]))


def test_unresolvable_images_listed(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / "ok.png")
    (tmp_path / "broken.png").write_bytes(b"not an image")
    rows = [row("a", image="ok.png"), row("b", image="missing.png"), row("c", image="broken.png")]
    with pytest.raises(DataError) as exc:
        load_dataset(_write_jsonl(tmp_path / "d.jsonl", rows))
    assert "b" in str(exc.value) and "c" in str(exc.value) and "'a'" not in str(exc.value)


def test_records_sorted_and_counts_order_invariant(tmp_path):
    rows = [row(i, random.Random(i).choice(["relevant", "not_relevant"])) for i in range(20)]
    a = load_dataset(_write_jsonl(tmp_path / "a.jsonl", rows))
    shuffled = rows[:]
    random.Random(0).shuffle(shuffled)
    b = load_dataset(_write_jsonl(tmp_path / "b.jsonl", shuffled))
    assert a == b
    assert a.class_counts == b.class_counts
    assert [r.tweet_id for r in a] == sorted(r.tweet_id for r in a)


# NUL cannot be represented in csv; every other code point must survive
texts = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"), max_size=40)
records = st.lists(
    st.builds(
        TweetRecord,
        tweet_id=st.text("abc0123456789", min_size=1, max_size=6),
        text=texts,
        image_path=st.none(),
        label=st.sampled_from(list(Label)),
        split=st.sampled_from([Split.TRAIN, Split.DEV]),
    ),
    max_size=12,
    unique_by=lambda r: r.tweet_id,
)


@settings(max_examples=60, deadline=None)
@given(records, st.sampled_from(["jsonl", "csv"]))
def test_round_trip(tmp_path_factory, recs, fmt):
    ds = DatasetSplit(tuple(recs))
    path = tmp_path_factory.mktemp("rt") / f"d.{fmt}"
    write_dataset(ds, path, fmt)
    assert load_dataset(path, fmt) == ds


def test_synthetic_is_byte_reproducible(tmp_path):
    spec = SyntheticCorpusSpec(32, 32, 1.0, 1.0, 7)
    generate_synthetic_corpus(spec, tmp_path / "a")
    generate_synthetic_corpus(spec, tmp_path / "b")
    assert (tmp_path / "a/train.jsonl").read_bytes() == (tmp_path / "b/train.jsonl").read_bytes()
    for img in (tmp_path / "a/images").iterdir():
        assert img.read_bytes() == (tmp_path / "b/images" / img.name).read_bytes()


def test_synthetic_zero_relevant(tmp_path):
    ds = generate_synthetic_corpus(SyntheticCorpusSpec(0, 5, 1.0, 1.0, 1), tmp_path)
    assert ds.class_counts == {Label.RELEVANT: 0, Label.NOT_RELEVANT: 5}


def test_synthetic_spec_ranges():
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(-1, 3)
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(1, 3, text_vocab_separability=1.5)


def test_separable_text_linearly_probeable(separable_corpus):
    # oracle: a bag-of-words logistic probe must fit the separable corpus perfectly
    from sklearn.feature_extraction.text import CountVectorizer
    from sklearn.linear_model import LogisticRegression

    train, _ = separable_corpus
    x = CountVectorizer().fit_transform([r.text for r in train])
    y = [r.label.index for r in train]
    probe = LogisticRegression(C=100.0, max_iter=2000).fit(x, y)
    assert probe.score(x, y) == 1.0


def test_separable_images_differ_by_family(separable_corpus):
    train, _ = separable_corpus
    blue = []
    for r in train:
        px = np.asarray(Image.open(r.image_path), dtype=np.int64)
        blue.append((px[..., 2] > 170).mean() > (px[..., 0] > 170).mean())
    assert blue == [r.label is Label.RELEVANT for r in train]
