"""Tweet cleaning applied before any tokenizer sees the text."""

from __future__ import annotations

import re
import unicodedata
from typing import Iterable

from .data import TweetRecord

URL_RE = re.compile(r"(?:https?://|\bwww\.|\bt\.co/)\S*", re.IGNORECASE)
# a chain like "@a@b" is one token; otherwise removing "@a" would expose "@b"
MENTION_RE = re.compile(r"(?<!\w)@\w+(?:@\w+)*")


def _drop_invisible(text: str) -> str:
    out = []
    for ch in text:
        if ch.isspace():
            out.append(" ")
        elif unicodedata.category(ch) in ("Cc", "Cf"):
            continue
        else:
            out.append(ch)
    return "".join(out)


def clean(raw: str, strip_mentions: bool = True) -> str:
    """Remove invisible characters, URLs and '#' signs (hashtag words stay).

    With ``strip_mentions`` (the default) ``@user`` tokens are dropped as well.
    Case and emoji are left alone. The result is idempotent.
    """
    # '#' goes before URL matching so that stripping it can never assemble a new URL
    text = _drop_invisible(raw).replace("#", "")
    text = URL_RE.sub(" ", text)
    if strip_mentions:
        text = MENTION_RE.sub(" ", text)
    return " ".join(text.split())


def clean_batch(records: Iterable[TweetRecord], strip_mentions: bool = True) -> list[tuple[str, str]]:
    return [(r.tweet_id, clean(r.text, strip_mentions)) for r in records]
