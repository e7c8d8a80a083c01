"""Caption splitting and prompt templates.

A caption is split into a subject phrase (everything through the first noun)
and an attribute phrase (the remainder). Splitting goes through a tagger
interface: the built-in LexiconTagger matches a closed noun lexicon, and
SpacyTagger adapts an external part-of-speech model when one is installed.

Templates render the split and the learned pseudo tokens into sentences for
the text encoder. Pseudo-token slots appear as ``<pw>`` in the rendered text
and carry their vectors once bound into a TokenSequence:

* image template        ``a photo of <pw> with <pw> ... <pw>.``
* standardized caption  ``a photo of {subj} with {attr}.``
* query template        image template with the final period replaced by
                        `` but {modification}.``

Derivative templates swap the subject span, the attribute span, or both for
pseudo slots; they drive the caption regularizer during training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import torch

from .backbone import TokenSequence, ToyTokenizer
from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)

SLOT = ToyTokenizer.SLOT_TOKEN

ABLATION_FLAGS = frozenset({
    "no_filter", "no_ortho", "no_context_reg", "no_subject_reg",
    "no_attribute_reg", "no_whole_reg", "no_subject_token",
    "no_attribute_token",
})


def validate_ablations(flags: Sequence[str] | frozenset[str]) -> frozenset[str]:
    flagset = frozenset(flags)
    unknown = flagset - ABLATION_FLAGS
    if unknown:
        raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
    if {"no_subject_token", "no_attribute_token"} <= flagset:
        raise ConfigError("cannot disable both pseudo-token kinds")
    return flagset


@dataclass(frozen=True)
class CaptionSplit:
    """A normalized caption partitioned at the first noun.

    ``full`` is the normalized caption (lowercase, collapsed whitespace,
    trailing period removed); ``subject`` runs through the first noun and is
    never empty; ``attribute`` is the remainder and may be empty. Joining
    subject and attribute with a single space reproduces ``full``.
    """

    full: str
    subject: str
    attribute: str

    def __post_init__(self):
        if not self.subject:
            raise InputError("caption subject must be non-empty")
        rejoined = f"{self.subject} {self.attribute}".strip()
        if rejoined != self.full:
            raise InputError("subject + attribute must reassemble the caption")


class Tagger(Protocol):
    def first_noun_index(self, words: Sequence[str]) -> Optional[int]:
        """Index of the first noun in ``words``, or None if there is none."""


#: Closed noun lexicon for the built-in tagger. Covers the procedural toy
#: corpus plus common fixture words; extend per-instance when needed.
DEFAULT_NOUNS = frozenset({
    # toy corpus shapes and scene words
    "circle", "square", "triangle", "cross", "ring", "star", "diamond",
    "background", "corner", "center", "row",
    # general fixture vocabulary
    "dog", "cat", "bird", "door", "shirt", "dress", "skirt", "jacket",
    "woman", "man", "person", "car", "chair", "table", "house", "tree",
    "flower", "hat", "bag", "shoe", "sleeve", "collar", "logo",
})

_PLURAL_SUFFIXES = ("s", "es")


class LexiconTagger:
    """Rule-based tagger over a closed noun lexicon (plural-aware)."""

    def __init__(self, nouns: frozenset[str] | set[str] = DEFAULT_NOUNS):
        self._nouns = frozenset(nouns)

    def _is_noun(self, word: str) -> bool:
        word = word.strip(".,!?;:'\"")
        if word in self._nouns:
            return True
        for suffix in _PLURAL_SUFFIXES:
            if word.endswith(suffix) and word[: -len(suffix)] in self._nouns:
                return True
        return False

    def first_noun_index(self, words: Sequence[str]) -> Optional[int]:
        for i, word in enumerate(words):
            if self._is_noun(word):
                return i
        return None


class SpacyTagger:
    """Adapter around a spaCy pipeline for open-vocabulary tagging."""

    def __init__(self, model: str = "en_core_web_sm"):
        try:
            import spacy
        except ImportError as exc:
            raise ConfigError(
                "SpacyTagger needs the spacy package; install it or use LexiconTagger"
            ) from exc
        self._nlp = spacy.load(model)

    def first_noun_index(self, words: Sequence[str]) -> Optional[int]:
        doc = self._nlp(" ".join(words))
        # map token indices back onto the whitespace words
        for token in doc:
            if token.pos_ in ("NOUN", "PROPN"):
                prefix = doc[: token.i].text
                return len(prefix.split()) if prefix else 0
        return None


def normalize_caption(caption: str) -> str:
    """Lowercase, collapse whitespace, drop one trailing period."""
    text = " ".join(caption.lower().split())
    if text.endswith("."):
        text = text[:-1].rstrip()
    return text


def split_caption(caption: str, tagger: Tagger | None = None) -> CaptionSplit:
    """Split a caption into subject and attribute phrases at the first noun.

    Falls back to subject = whole caption, attribute = "" when the tagger
    finds no noun, so downstream templates always have a subject.
    """
    tagger = tagger or LexiconTagger()
    full = normalize_caption(caption)
    if not full:
        raise InputError("cannot split an empty caption")
    words = full.split()
    idx = tagger.first_noun_index(words)
    if idx is None:
        return CaptionSplit(full=full, subject=full, attribute="")
    subject = " ".join(words[: idx + 1])
    attribute = " ".join(words[idx + 1:])
    return CaptionSplit(full=full, subject=subject, attribute=attribute)


# ----- template text -----------------------------------------------------


def _attr_slots(r: int) -> str:
    if r < 1:
        raise InputError(f"attribute slot count must be >= 1, got {r}")
    return " ".join([SLOT] * r)


def image_template_text(r: int, ablations: frozenset[str] = frozenset()) -> str:
    """Pseudo-sentence describing an image by its inverted tokens."""
    validate_ablations(ablations)
    if "no_subject_token" in ablations:
        return f"a photo with {_attr_slots(r)}."
    if "no_attribute_token" in ablations:
        return f"a photo of {SLOT}."
    return f"a photo of {SLOT} with {_attr_slots(r)}."


def standardized_caption_text(split: CaptionSplit) -> str:
    """Render a split caption into the fixed sentence form."""
    if split.attribute:
        return f"a photo of {split.subject} with {split.attribute}."
    return f"a photo of {split.subject}."


def derivative_texts(
    split: CaptionSplit, r: int, ablations: frozenset[str] = frozenset()
) -> dict[str, Optional[str]]:
    """Render the caption-regularizer template family.

    Returns the four variants keyed ``base``, ``subject_swapped``,
    ``attributes_swapped``, ``both_swapped``. A variant whose pseudo-token
    kind is disabled by ablation is None. Under ``no_context_reg`` the
    single-swap variants lose their real-text context.
    """
    ablations = validate_ablations(ablations)
    context = "no_context_reg" not in ablations
    base = standardized_caption_text(split)

    if "no_subject_token" in ablations:
        subject_swapped = None
    elif not context:
        subject_swapped = f"a photo of {SLOT}."
    elif split.attribute:
        subject_swapped = f"a photo of {SLOT} with {split.attribute}."
    else:
        subject_swapped = f"a photo of {SLOT}."

    if "no_attribute_token" in ablations:
        attributes_swapped = None
    elif not context:
        attributes_swapped = f"a photo with {_attr_slots(r)}."
    else:
        attributes_swapped = f"a photo of {split.subject} with {_attr_slots(r)}."

    both_swapped = image_template_text(r, ablations)
    return {
        "base": base,
        "subject_swapped": subject_swapped,
        "attributes_swapped": attributes_swapped,
        "both_swapped": both_swapped,
    }


def normalize_modification(modification: str) -> str:
    text = " ".join(modification.lower().split())
    if text.endswith("."):
        text = text[:-1].rstrip()
    if not text:
        raise InputError("modification text must be non-empty")
    return text


def query_template_text(
    r: int, modification: str, ablations: frozenset[str] = frozenset()
) -> str:
    """Composed-query sentence: image template + `` but {modification}.``"""
    base = image_template_text(r, ablations)
    mod = normalize_modification(modification)
    return f"{base[:-1]} but {mod}."


# ----- binding text to token sequences ------------------------------------


def bind_template(
    text: str,
    vectors: Sequence[torch.Tensor],
    tokenizer,
    max_len: int | None = None,
    label: str = "template",
) -> TokenSequence:
    """Tokenize a rendered template and attach slot vectors in order."""
    ids = tokenizer.encode(text)
    positions = [i for i, wid in enumerate(ids) if wid == tokenizer.SLOT_ID]
    if len(positions) != len(vectors):
        raise InputError(
            f"{label} has {len(positions)} slots but {len(vectors)} vectors"
        )
    if max_len is not None and len(ids) > max_len:
        raise InputError(
            f"{label} is {len(ids)} tokens, exceeding max_text_len {max_len}"
        )
    return TokenSequence(ids=ids, slots=list(zip(positions, list(vectors))))


def _pseudo_vectors(pseudo, ablations: frozenset[str]) -> list[torch.Tensor]:
    vectors: list[torch.Tensor] = []
    if "no_subject_token" not in ablations:
        vectors.append(pseudo.subject)
    if "no_attribute_token" not in ablations:
        vectors.extend(pseudo.attributes)
    return vectors


def image_template(
    pseudo, tokenizer, max_len: int | None = None,
    ablations: frozenset[str] = frozenset(),
) -> TokenSequence:
    ablations = validate_ablations(ablations)
    text = image_template_text(pseudo.num_attributes, ablations)
    return bind_template(
        text, _pseudo_vectors(pseudo, ablations), tokenizer, max_len,
        label="image template",
    )


def standardized_caption(
    split: CaptionSplit, tokenizer, max_len: int | None = None
) -> TokenSequence:
    return bind_template(
        standardized_caption_text(split), [], tokenizer, max_len,
        label="standardized caption",
    )


@dataclass
class TemplateBundle:
    """Bound caption-regularizer templates for one training sample."""

    base: TokenSequence
    subject_swapped: Optional[TokenSequence]
    attributes_swapped: Optional[TokenSequence]
    both_swapped: TokenSequence


def derivatives(
    split: CaptionSplit, pseudo, tokenizer, max_len: int | None = None,
    ablations: frozenset[str] = frozenset(),
) -> TemplateBundle:
    ablations = validate_ablations(ablations)
    texts = derivative_texts(split, pseudo.num_attributes, ablations)
    base = bind_template(texts["base"], [], tokenizer, max_len, label="base template")
    subject_swapped = None
    if texts["subject_swapped"] is not None:
        subject_swapped = bind_template(
            texts["subject_swapped"], [pseudo.subject], tokenizer, max_len,
            label="subject-swapped template",
        )
    attributes_swapped = None
    if texts["attributes_swapped"] is not None:
        attributes_swapped = bind_template(
            texts["attributes_swapped"], list(pseudo.attributes), tokenizer,
            max_len, label="attribute-swapped template",
        )
    both_swapped = bind_template(
        texts["both_swapped"], _pseudo_vectors(pseudo, ablations), tokenizer,
        max_len, label="both-swapped template",
    )
    return TemplateBundle(
        base=base,
        subject_swapped=subject_swapped,
        attributes_swapped=attributes_swapped,
        both_swapped=both_swapped,
    )


def query_template(
    pseudo, modification: str, tokenizer, max_len: int | None = None,
    ablations: frozenset[str] = frozenset(),
) -> TokenSequence:
    """Bind the composed query, truncating the modification tail on overflow."""
    ablations = validate_ablations(ablations)
    r = pseudo.num_attributes
    mod = normalize_modification(modification)
    mod_tokens = tokenizer.tokenize(mod)
    base = image_template_text(r, ablations)

    def render(tokens: list[str]) -> str:
        joined = " ".join(tokens)
        return f"{base[:-1]} but {joined}." if joined else f"{base[:-1]} but."

    text = render(mod_tokens)
    if max_len is not None:
        dropped = 0
        while mod_tokens and len(tokenizer.encode(render(mod_tokens))) > max_len:
            mod_tokens.pop()
            dropped += 1
        if dropped:
            logger.warning(
                "query modification truncated: dropped %d trailing tokens", dropped
            )
        text = render(mod_tokens)
        if len(tokenizer.encode(text)) > max_len:
            raise InputError(
                f"query template exceeds max_text_len {max_len} even with an empty modification"
            )
    return bind_template(
        text, _pseudo_vectors(pseudo, ablations), tokenizer, max_len,
        label="query template",
    )
